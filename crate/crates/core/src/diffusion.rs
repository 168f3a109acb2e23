//! Deterministic DDIM inversion and sampling over a pluggable noise
//! predictor, with per-layer hook points for attention injection and
//! feature recording.
//!
//! The sampling step is the standard deterministic (eta = 0) DDIM update.
//! Inversion solves that same update for the next noisier state by fixed
//! point iteration, so invert-then-sample is a bijection up to float
//! rounding for any reasonably contractive predictor; for state-independent
//! predictors the solve terminates after one iteration and coincides with
//! the textbook closed forms.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::attention::{AttentionError, AttentionWeights};
use crate::grid::{FeatureGrid, GridError};

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;
const VIRTUAL_STEPS: usize = 1000;
const MAX_FIXED_POINT_ITERS: usize = 64;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("attention hook failed: {0}")]
    Hook(String),
    #[error("inversion diverged at step {0}")]
    Divergent(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

/// Cumulative noise schedule: T+1 alpha-bar values with `alpha_bar(0) = 1`,
/// strictly decreasing, subsampled from a linear beta ramp over 1000
/// virtual training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    alphas_cumprod: Vec<f64>,
}

impl Schedule {
    pub fn new(n_steps: usize) -> Result<Self, DiffusionError> {
        if n_steps == 0 || n_steps > VIRTUAL_STEPS {
            return Err(DiffusionError::BadSchedule(format!(
                "steps must be in 1..={VIRTUAL_STEPS}, got {n_steps}"
            )));
        }
        let mut abar_virtual = Vec::with_capacity(VIRTUAL_STEPS + 1);
        abar_virtual.push(1.0f64);
        let mut acc = 1.0f64;
        for j in 0..VIRTUAL_STEPS {
            let beta =
                BETA_START + (BETA_END - BETA_START) * j as f64 / (VIRTUAL_STEPS - 1) as f64;
            acc *= 1.0 - beta;
            abar_virtual.push(acc);
        }
        let alphas = (0..=n_steps)
            .map(|k| abar_virtual[k * VIRTUAL_STEPS / n_steps])
            .collect();
        Self::from_alphas(alphas)
    }

    pub fn from_alphas(alphas_cumprod: Vec<f64>) -> Result<Self, DiffusionError> {
        if alphas_cumprod.len() < 2 {
            return Err(DiffusionError::BadSchedule("need at least one step".into()));
        }
        if alphas_cumprod[0] != 1.0 {
            return Err(DiffusionError::BadSchedule(
                "alpha_bar(0) must be exactly 1".into(),
            ));
        }
        for w in alphas_cumprod.windows(2) {
            if !(w[1] > 0.0 && w[1] < w[0]) {
                return Err(DiffusionError::BadSchedule(
                    "alpha_bar must be strictly decreasing within (0, 1]".into(),
                ));
            }
        }
        Ok(Self { alphas_cumprod })
    }

    pub fn n_steps(&self) -> usize {
        self.alphas_cumprod.len() - 1
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alphas_cumprod[k]
    }

    /// Sub-schedule covering the first `k` steps.
    pub fn prefix(&self, k: usize) -> Result<Schedule, DiffusionError> {
        if k == 0 || k > self.n_steps() {
            return Err(DiffusionError::BadSchedule(format!(
                "prefix length {k} outside 1..={}",
                self.n_steps()
            )));
        }
        Ok(Schedule {
            alphas_cumprod: self.alphas_cumprod[..=k].to_vec(),
        })
    }

    /// Coefficients of the deterministic DDIM transition between noise
    /// levels `t` and `t+1`: sampling computes
    /// `x_t = r * x_{t+1} + e * eps`.
    fn coeffs(&self, t: usize) -> (f32, f32) {
        let lo = self.alphas_cumprod[t];
        let hi = self.alphas_cumprod[t + 1];
        let r = (lo / hi).sqrt();
        let e = (1.0 - lo).sqrt() - r * (1.0 - hi).sqrt();
        (r as f32, e as f32)
    }
}

/// Opaque conditioning vector; the stand-in for an edit prompt. An empty
/// vector means unconditioned.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Conditioning(Vec<f32>);

impl Conditioning {
    pub fn none() -> Self {
        Self(Vec::new())
    }

    pub fn new(values: Vec<f32>) -> Result<Self, DiffusionError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::ShapeMismatch(
                "conditioning holds a non-finite value".into(),
            ));
        }
        Ok(Self(values))
    }

    /// Small seeded conditioning of the given dimension.
    pub fn seeded(dim: usize, seed: u64, amplitude: f32) -> Self {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self((0..dim).map(|_| rng.random_range(-amplitude..=amplitude)).collect())
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-(step, layer) map of recorded feature grids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureRecord {
    entries: BTreeMap<(usize, usize), FeatureGrid>,
}

impl FeatureRecord {
    pub fn insert(&mut self, step: usize, layer: usize, grid: FeatureGrid) {
        self.entries.insert((step, layer), grid);
    }

    pub fn get(&self, step: usize, layer: usize) -> Option<&FeatureGrid> {
        self.entries.get(&(step, layer))
    }

    pub fn remove(&mut self, step: usize, layer: usize) -> Option<FeatureGrid> {
        self.entries.remove(&(step, layer))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.keys().copied()
    }
}

/// Callbacks fired by a predictor at each attention layer. `on_attention`
/// may replace the per-view attention outputs (this is where cross-view
/// coupling happens); `on_record` observes the per-view features entering
/// the layer.
pub trait AttentionHook {
    fn on_attention(
        &mut self,
        step: usize,
        layer: usize,
        weights: &AttentionWeights,
        inputs: &[FeatureGrid],
    ) -> Result<Option<Vec<FeatureGrid>>, DiffusionError>;

    fn on_record(&mut self, _step: usize, _layer: usize, _inputs: &[FeatureGrid]) {}
}

/// Hook that changes nothing and records nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHook;

impl AttentionHook for NoHook {
    fn on_attention(
        &mut self,
        _step: usize,
        _layer: usize,
        _weights: &AttentionWeights,
        _inputs: &[FeatureGrid],
    ) -> Result<Option<Vec<FeatureGrid>>, DiffusionError> {
        Ok(None)
    }
}

/// Hook that records per-view layer inputs into one `FeatureRecord` per
/// view and leaves attention untouched.
#[derive(Debug, Default)]
pub struct Recorder {
    records: Vec<FeatureRecord>,
}

impl Recorder {
    pub fn new(n_views: usize) -> Self {
        Self {
            records: vec![FeatureRecord::default(); n_views],
        }
    }

    pub fn into_records(self) -> Vec<FeatureRecord> {
        self.records
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }
}

impl AttentionHook for Recorder {
    fn on_attention(
        &mut self,
        _step: usize,
        _layer: usize,
        _weights: &AttentionWeights,
        _inputs: &[FeatureGrid],
    ) -> Result<Option<Vec<FeatureGrid>>, DiffusionError> {
        Ok(None)
    }

    fn on_record(&mut self, step: usize, layer: usize, inputs: &[FeatureGrid]) {
        for (rec, grid) in self.records.iter_mut().zip(inputs) {
            rec.insert(step, layer, grid.clone());
        }
    }
}

/// Deterministic noise predictor over a batch of views. Views are
/// processed independently; any cross-view exchange goes through the hook.
pub trait NoisePredictor: Sync {
    fn n_layers(&self) -> usize {
        0
    }

    fn predict(
        &self,
        latents: &[FeatureGrid],
        step: usize,
        cond: &Conditioning,
        hook: &mut dyn AttentionHook,
    ) -> Result<Vec<FeatureGrid>, DiffusionError>;
}

fn check_prediction(
    latents: &[FeatureGrid],
    eps: &[FeatureGrid],
) -> Result<(), DiffusionError> {
    if eps.len() != latents.len() {
        return Err(DiffusionError::ShapeMismatch(format!(
            "predictor returned {} grids for {} views",
            eps.len(),
            latents.len()
        )));
    }
    for (i, (x, e)) in latents.iter().zip(eps).enumerate() {
        if !x.same_shape(e) {
            return Err(DiffusionError::ShapeMismatch(format!(
                "predicted noise shape differs from latent for view {i}"
            )));
        }
    }
    Ok(())
}

fn lincomb(a: &FeatureGrid, ca: f32, b: &FeatureGrid, cb: f32) -> Result<FeatureGrid, DiffusionError> {
    let data: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ca * x + cb * y)
        .collect();
    Ok(a.with_data(data)?)
}

/// Runs the deterministic DDIM reverse process from noise level T down to
/// 0 over all views in lockstep. The hook fires inside every predictor
/// evaluation.
pub fn sample_views(
    z_t: &[FeatureGrid],
    sched: &Schedule,
    pred: &dyn NoisePredictor,
    cond: &Conditioning,
    hook: &mut dyn AttentionHook,
) -> Result<Vec<FeatureGrid>, DiffusionError> {
    let mut states = z_t.to_vec();
    for t in (0..sched.n_steps()).rev() {
        let (r, e) = sched.coeffs(t);
        let eps = pred.predict(&states, t, cond, hook)?;
        check_prediction(&states, &eps)?;
        for (x, n) in states.iter_mut().zip(&eps) {
            *x = lincomb(x, r, n, e)?;
        }
    }
    Ok(states)
}

/// Maps clean latents to their noise representation by solving each DDIM
/// sampling step for the next noisier state (fixed point iteration seeded
/// with the explicit textbook estimate). Exact inverse of `sample_views`
/// up to float rounding.
pub fn invert_views(
    x0: &[FeatureGrid],
    sched: &Schedule,
    pred: &dyn NoisePredictor,
    cond: &Conditioning,
    hook: &mut dyn AttentionHook,
) -> Result<Vec<FeatureGrid>, DiffusionError> {
    let mut states = x0.to_vec();
    for t in 0..sched.n_steps() {
        let (r, e) = sched.coeffs(t);
        let step = |eps_src: &[FeatureGrid],
                    eps: &[FeatureGrid]|
         -> Result<Vec<FeatureGrid>, DiffusionError> {
            check_prediction(eps_src, eps)?;
            states
                .iter()
                .zip(eps)
                .map(|(x, n)| lincomb(x, 1.0 / r, n, -e / r))
                .collect()
        };

        let blown_up =
            |grids: &[FeatureGrid]| grids.iter().any(|g| g.data().iter().any(|v| v.abs() > 1e12));
        let eps = pred.predict(&states, t, cond, hook)?;
        let mut next = step(&states, &eps)?;
        for _ in 0..MAX_FIXED_POINT_ITERS {
            if blown_up(&next) {
                return Err(DiffusionError::Divergent(t));
            }
            let eps = pred.predict(&next, t, cond, hook)?;
            let cand = step(&next, &eps)?;
            if cand
                .iter()
                .zip(&next)
                .all(|(a, b)| a.data() == b.data())
            {
                next = cand;
                break;
            }
            next = cand;
        }
        // A last-bit limit cycle at the iteration cap is acceptable;
        // blow-ups are not.
        if blown_up(&next) {
            return Err(DiffusionError::Divergent(t));
        }
        states = next;
    }
    Ok(states)
}

/// Single-view inversion, recording the features entering every attention
/// layer at every step (last predictor evaluation of each step wins).
pub fn ddim_invert(
    x0: &FeatureGrid,
    sched: &Schedule,
    pred: &dyn NoisePredictor,
    cond: &Conditioning,
) -> Result<(FeatureGrid, FeatureRecord), DiffusionError> {
    let mut recorder = Recorder::new(1);
    let mut out = invert_views(
        std::slice::from_ref(x0),
        sched,
        pred,
        cond,
        &mut recorder,
    )?;
    let record = recorder
        .into_records()
        .pop()
        .expect("recorder built for one view");
    Ok((out.pop().expect("one view in, one view out"), record))
}

/// Single-view deterministic DDIM sampling with an optional injection hook.
pub fn ddim_sample(
    z_t: &FeatureGrid,
    sched: &Schedule,
    pred: &dyn NoisePredictor,
    cond: &Conditioning,
    hook: &mut dyn AttentionHook,
) -> Result<FeatureGrid, DiffusionError> {
    let mut out = sample_views(std::slice::from_ref(z_t), sched, pred, cond, hook)?;
    Ok(out.pop().expect("one view in, one view out"))
}
