//! Single-head attention over token grids: plain self attention, reference
//! attention (self attention blended with an extra key/value set taken from
//! a recorded reference feature map), and correspondence-constrained
//! attention in which each token attends only to its cross-view
//! correspondence group under an additive validity mask.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::correspondence::{AttentionMask, CorrespondenceSet};
use crate::grid::FeatureGrid;
use crate::mvdt::{read_matrix, write_matrix, MvdtError};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("lambda {0} outside [0, 1]")]
    BadLambda(f32),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Mvdt(#[from] MvdtError),
}

/// Square projection matrices for queries, keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    dim: usize,
    w_q: Array2<f32>,
    w_k: Array2<f32>,
    w_v: Array2<f32>,
}

impl AttentionWeights {
    pub fn new(
        w_q: Array2<f32>,
        w_k: Array2<f32>,
        w_v: Array2<f32>,
    ) -> Result<Self, AttentionError> {
        let dim = w_q.nrows();
        for (name, m) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(AttentionError::InvalidWeights(format!(
                    "{name} is {}x{}, expected {dim}x{dim}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(AttentionError::InvalidWeights(format!(
                    "{name} holds a non-finite value"
                )));
            }
        }
        if dim == 0 {
            return Err(AttentionError::InvalidWeights("zero dimension".into()));
        }
        Ok(Self { dim, w_q, w_k, w_v })
    }

    pub fn identity(dim: usize) -> Self {
        let eye = Array2::eye(dim);
        Self::new(eye.clone(), eye.clone(), eye).expect("identity weights are valid")
    }

    /// Test-friendly initialization: uniform in [-0.1, 0.1] from a fixed seed.
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = || {
            Array2::from_shape_fn((dim, dim), |_| rng.random_range(-0.1..=0.1f32))
        };
        let (w_q, w_k, w_v) = (mat(), mat(), mat());
        Self::new(w_q, w_k, w_v).expect("seeded weights are finite and square")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn w_q(&self) -> &Array2<f32> {
        &self.w_q
    }

    pub fn w_k(&self) -> &Array2<f32> {
        &self.w_k
    }

    pub fn w_v(&self) -> &Array2<f32> {
        &self.w_v
    }

    /// Stores the three matrices as `wq.mvdt`, `wk.mvdt`, `wv.mvdt`.
    pub fn save(&self, dir: &std::path::Path) -> Result<(), AttentionError> {
        for (name, m) in [("wq", &self.w_q), ("wk", &self.w_k), ("wv", &self.w_v)] {
            let flat: Vec<f32> = m.iter().copied().collect();
            write_matrix(self.dim, self.dim, &flat, &dir.join(format!("{name}.mvdt")))?;
        }
        Ok(())
    }

    pub fn load(dir: &std::path::Path) -> Result<Self, AttentionError> {
        let mut mats = Vec::with_capacity(3);
        for name in ["wq", "wk", "wv"] {
            let (rows, cols, data) = read_matrix(&dir.join(format!("{name}.mvdt")))?;
            let m = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| AttentionError::InvalidWeights(e.to_string()))?;
            mats.push(m);
        }
        let w_v = mats.pop().expect("three matrices");
        let w_k = mats.pop().expect("three matrices");
        let w_q = mats.pop().expect("three matrices");
        Self::new(w_q, w_k, w_v)
    }
}

/// Blend weight for reference attention, in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RAConfig {
    lambda: f32,
}

impl RAConfig {
    pub fn new(lambda: f32) -> Result<Self, AttentionError> {
        if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
            return Err(AttentionError::BadLambda(lambda));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(self) -> f32 {
        self.lambda
    }
}

fn tokens_view(f: &FeatureGrid) -> ArrayView2<'_, f32> {
    ArrayView2::from_shape((f.n_tokens(), f.dim()), f.data())
        .expect("grid data length matches its dimensions")
}

fn check_dim(f: &FeatureGrid, w: &AttentionWeights) -> Result<(), AttentionError> {
    if f.dim() != w.dim() {
        return Err(AttentionError::ShapeMismatch(format!(
            "grid dim {} vs weight dim {}",
            f.dim(),
            w.dim()
        )));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction; masked scores of -1e9 underflow
/// to an exact zero weight.
fn softmax_rows(scores: &mut Array2<f32>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// softmax(Q K^T / sqrt(d)) V over token rows.
fn scaled_dot_attention(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>) -> Array2<f32> {
    let d = q.ncols() as f32;
    let mut scores = q.dot(&k.t());
    scores.mapv_inplace(|s| s / d.sqrt());
    softmax_rows(&mut scores);
    scores.dot(v)
}

/// Standard single-head self attention over every token of `f`.
pub fn self_attention(
    f: &FeatureGrid,
    w: &AttentionWeights,
) -> Result<FeatureGrid, AttentionError> {
    check_dim(f, w)?;
    let x = tokens_view(f);
    let q = x.dot(&w.w_q.t());
    let k = x.dot(&w.w_k.t());
    let v = x.dot(&w.w_v.t());
    let out = scaled_dot_attention(&q, &k, &v);
    Ok(f.with_data(out.into_raw_vec_and_offset().0)?)
}

/// Reference attention: a lambda-weighted blend of cross attention onto the
/// recorded reference features and plain self attention.
pub fn reference_attention(
    f: &FeatureGrid,
    f_ref: &FeatureGrid,
    w: &AttentionWeights,
    cfg: RAConfig,
) -> Result<FeatureGrid, AttentionError> {
    check_dim(f, w)?;
    if f_ref.dim() != f.dim() {
        return Err(AttentionError::ShapeMismatch(format!(
            "reference dim {} vs input dim {}",
            f_ref.dim(),
            f.dim()
        )));
    }
    let x = tokens_view(f);
    let r = tokens_view(f_ref);
    let q = x.dot(&w.w_q.t());

    let k_ref = r.dot(&w.w_k.t());
    let v_ref = r.dot(&w.w_v.t());
    let cross = scaled_dot_attention(&q, &k_ref, &v_ref);

    let k = x.dot(&w.w_k.t());
    let v = x.dot(&w.w_v.t());
    let own = scaled_dot_attention(&q, &k, &v);

    let lambda = cfg.lambda();
    let out = cross.mapv(|c| c * lambda) + own.mapv(|o| o * (1.0 - lambda));
    Ok(f.with_data(out.into_raw_vec_and_offset().0)?)
}

fn matvec(m: &Array2<f32>, x: &[f32], out: &mut [f32]) {
    for (o, row) in out.iter_mut().zip(m.rows()) {
        let mut acc = 0.0f32;
        for (w, v) in row.iter().zip(x) {
            acc += w * v;
        }
        *o = acc;
    }
}

/// Correspondence-constrained attention. Each output token is attention of
/// its own (projected) query over exactly its correspondence group's keys
/// and values, with the mask bias silencing invalid entries. With
/// `reuse_projections` the surrounding layer's W_q/W_k/W_v are applied; the
/// bare form uses identity projections.
pub fn cca(
    views: &[FeatureGrid],
    cs: &CorrespondenceSet,
    mask: &AttentionMask,
    w: &AttentionWeights,
    reuse_projections: bool,
) -> Result<Vec<FeatureGrid>, AttentionError> {
    let n = cs.n_views();
    if views.len() != n {
        return Err(AttentionError::ShapeMismatch(format!(
            "{} views for a {}-view correspondence set",
            views.len(),
            n
        )));
    }
    if mask.n_views() != n || mask.grid_w() != cs.grid_w() || mask.grid_h() != cs.grid_h() {
        return Err(AttentionError::ShapeMismatch(
            "mask does not align with the correspondence set".into(),
        ));
    }
    let dim = views[0].dim();
    for (i, v) in views.iter().enumerate() {
        if v.grid_w() != cs.grid_w() || v.grid_h() != cs.grid_h() || v.dim() != dim {
            return Err(AttentionError::ShapeMismatch(format!(
                "view {i} is {}x{}x{}, expected {}x{}x{dim}",
                v.grid_w(),
                v.grid_h(),
                v.dim(),
                cs.grid_w(),
                cs.grid_h()
            )));
        }
    }
    if reuse_projections {
        check_dim(&views[0], w)?;
    }

    let grid_w = cs.grid_w();
    let scale = 1.0 / (dim as f32).sqrt();
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let mut data = vec![0.0f32; views[s].data().len()];
        data.par_chunks_mut(dim).enumerate().for_each(|(tidx, chunk)| {
            let (x, y) = (tidx % grid_w, tidx / grid_w);
            let group = cs.group(s, x, y);
            let bias = mask.group(s, x, y);

            let mut q = vec![0.0f32; dim];
            if reuse_projections {
                matvec(&w.w_q, views[s].token(x, y), &mut q);
            } else {
                q.copy_from_slice(views[s].token(x, y));
            }

            let mut scores = vec![0.0f32; group.len()];
            let mut values = vec![0.0f32; group.len() * dim];
            let mut key = vec![0.0f32; dim];
            for (gi, e) in group.iter().enumerate() {
                let z = views[e.target_view].token(e.tx, e.ty);
                let value_slot = &mut values[gi * dim..(gi + 1) * dim];
                if reuse_projections {
                    matvec(&w.w_k, z, &mut key);
                    matvec(&w.w_v, z, value_slot);
                } else {
                    key.copy_from_slice(z);
                    value_slot.copy_from_slice(z);
                }
                let mut dot = 0.0f32;
                for (a, b) in q.iter().zip(&key) {
                    dot += a * b;
                }
                scores[gi] = dot * scale + bias[gi];
            }

            let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for (gi, weight) in scores.iter().enumerate() {
                let wgt = weight / sum;
                for (o, v) in chunk.iter_mut().zip(&values[gi * dim..(gi + 1) * dim]) {
                    *o += wgt * v;
                }
            }
        });
        out.push(views[s].with_data(data)?);
    }
    Ok(out)
}
