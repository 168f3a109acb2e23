//! Deterministic toy noise predictors standing in for a pretrained
//! denoising network. The mixer variant carries two attention blocks and
//! exposes the per-layer hook points and feature recording the pipeline
//! relies on.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self_attention, AttentionWeights};
use crate::diffusion::{AttentionHook, Conditioning, DiffusionError, NoisePredictor};
use crate::grid::FeatureGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    Zero,
    Constant,
    Linear,
    Mixer,
}

/// Factory covering the standard toy predictors with default parameters.
pub fn toy_predictor(kind: ToyKind, dim: usize, seed: u64) -> Box<dyn NoisePredictor> {
    match kind {
        ToyKind::Zero => Box::new(ZeroPredictor),
        ToyKind::Constant => Box::new(ConstantPredictor::new(0.05)),
        ToyKind::Linear => Box::new(LinearPredictor::seeded(dim, seed)),
        ToyKind::Mixer => Box::new(MixerPredictor::new(dim, seed)),
    }
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(
        &self,
        latents: &[FeatureGrid],
        _step: usize,
        _cond: &Conditioning,
        _hook: &mut dyn AttentionHook,
    ) -> Result<Vec<FeatureGrid>, DiffusionError> {
        Ok(latents
            .iter()
            .map(|x| FeatureGrid::zeros(x.grid_w(), x.grid_h(), x.dim()))
            .collect())
    }
}

/// Predicts one constant value in every channel.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor {
    value: f32,
}

impl ConstantPredictor {
    pub fn new(value: f32) -> Self {
        Self { value }
    }
}

impl NoisePredictor for ConstantPredictor {
    fn predict(
        &self,
        latents: &[FeatureGrid],
        _step: usize,
        _cond: &Conditioning,
        _hook: &mut dyn AttentionHook,
    ) -> Result<Vec<FeatureGrid>, DiffusionError> {
        latents
            .iter()
            .map(|x| {
                x.with_data(vec![self.value; x.data().len()])
                    .map_err(DiffusionError::from)
            })
            .collect()
    }
}

/// Applies one seeded square matrix to every token: eps = A x.
#[derive(Debug, Clone)]
pub struct LinearPredictor {
    matrix: Array2<f32>,
}

impl LinearPredictor {
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            matrix: Array2::from_shape_fn((dim, dim), |_| rng.random_range(-0.1..=0.1f32)),
        }
    }

    pub fn from_matrix(matrix: Array2<f32>) -> Self {
        Self { matrix }
    }
}

impl NoisePredictor for LinearPredictor {
    fn predict(
        &self,
        latents: &[FeatureGrid],
        _step: usize,
        _cond: &Conditioning,
        _hook: &mut dyn AttentionHook,
    ) -> Result<Vec<FeatureGrid>, DiffusionError> {
        let dim = self.matrix.nrows();
        latents
            .iter()
            .map(|x| {
                if x.dim() != dim {
                    return Err(DiffusionError::ShapeMismatch(format!(
                        "latent dim {} vs predictor dim {dim}",
                        x.dim()
                    )));
                }
                let mut data = vec![0.0f32; x.data().len()];
                for t in 0..x.n_tokens() {
                    let tok = x.token_flat(t);
                    for (r, row) in self.matrix.rows().into_iter().enumerate() {
                        let mut acc = 0.0f32;
                        for (w, v) in row.iter().zip(tok) {
                            acc += w * v;
                        }
                        data[t * dim + r] = acc;
                    }
                }
                x.with_data(data).map_err(DiffusionError::from)
            })
            .collect()
    }
}

/// Two-block attention denoiser: conditioning and step embeddings enter as
/// per-channel biases, each block is self attention plus a residual, and
/// the hook may replace any block's attention output. The output head is
/// scaled down so the predictor stays contractive for inversion.
#[derive(Debug, Clone)]
pub struct MixerPredictor {
    dim: usize,
    layers: Vec<AttentionWeights>,
    step_emb: Vec<f32>,
    out_gain: f32,
}

impl MixerPredictor {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self::with_params(dim, seed, 0.25, 4.0)
    }

    /// Variant with explicit output gain and attention-weight scaling. The
    /// scale sharpens the softmax (stronger nonlinearity); the gain trades
    /// edit strength against inversion contractivity.
    pub fn with_params(dim: usize, seed: u64, out_gain: f32, weight_scale: f32) -> Self {
        let scaled = |s: u64| {
            let w = AttentionWeights::seeded(dim, s);
            AttentionWeights::new(
                w.w_q() * weight_scale,
                w.w_k() * weight_scale,
                w.w_v() * weight_scale,
            )
            .expect("scaled seeded weights stay finite")
        };
        let layers = vec![scaled(seed), scaled(seed.wrapping_add(1))];
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let step_emb = (0..dim).map(|_| rng.random_range(-0.05..=0.05f32)).collect();
        Self {
            dim,
            layers,
            step_emb,
            out_gain,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer_weights(&self, layer: usize) -> &AttentionWeights {
        &self.layers[layer]
    }
}

impl NoisePredictor for MixerPredictor {
    fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn predict(
        &self,
        latents: &[FeatureGrid],
        step: usize,
        cond: &Conditioning,
        hook: &mut dyn AttentionHook,
    ) -> Result<Vec<FeatureGrid>, DiffusionError> {
        if !cond.is_empty() && cond.as_slice().len() != self.dim {
            return Err(DiffusionError::ShapeMismatch(format!(
                "conditioning length {} vs dim {}",
                cond.as_slice().len(),
                self.dim
            )));
        }
        let step_scale = (step as f32 + 1.0) * 0.1;
        let mut states: Vec<FeatureGrid> = latents
            .iter()
            .map(|x| {
                if x.dim() != self.dim {
                    return Err(DiffusionError::ShapeMismatch(format!(
                        "latent dim {} vs predictor dim {}",
                        x.dim(),
                        self.dim
                    )));
                }
                let mut data = x.data().to_vec();
                for chunk in data.chunks_mut(self.dim) {
                    for (c, v) in chunk.iter_mut().enumerate() {
                        *v += self.step_emb[c] * step_scale;
                        if !cond.is_empty() {
                            *v += cond.as_slice()[c];
                        }
                    }
                }
                x.with_data(data).map_err(DiffusionError::from)
            })
            .collect::<Result<_, _>>()?;

        for (layer, weights) in self.layers.iter().enumerate() {
            hook.on_record(step, layer, &states);
            let attn = match hook.on_attention(step, layer, weights, &states)? {
                Some(replaced) => {
                    if replaced.len() != states.len()
                        || replaced
                            .iter()
                            .zip(&states)
                            .any(|(r, s)| !r.same_shape(s))
                    {
                        return Err(DiffusionError::ShapeMismatch(
                            "hook returned attention outputs of the wrong shape".into(),
                        ));
                    }
                    replaced
                }
                None => states
                    .iter()
                    .map(|h| self_attention(h, weights).map_err(DiffusionError::from))
                    .collect::<Result<_, _>>()?,
            };
            for (h, a) in states.iter_mut().zip(&attn) {
                let data: Vec<f32> = h
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(x, y)| x + y)
                    .collect();
                *h = h.with_data(data)?;
            }
        }

        Ok(states
            .into_iter()
            .map(|h| {
                let data: Vec<f32> = h.data().iter().map(|v| v * self.out_gain).collect();
                h.with_data(data).expect("scaling preserves shape")
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{NoHook, Recorder};

    fn latents(n: usize, w: usize, h: usize, d: usize) -> Vec<FeatureGrid> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
                FeatureGrid::from_fn(w, h, d, |_, _, _| rng.random_range(-1.0..1.0f32)).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_kind_returns_zeros() {
        let xs = latents(2, 3, 3, 4);
        let out = ZeroPredictor
            .predict(&xs, 0, &Conditioning::none(), &mut NoHook)
            .unwrap();
        assert!(out.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn mixer_preserves_shape_across_sizes() {
        for size in [8usize, 16, 64] {
            let xs = latents(1, size, size, 16);
            let out = MixerPredictor::new(16, 3)
                .predict(&xs, 2, &Conditioning::none(), &mut NoHook)
                .unwrap();
            assert!(out[0].same_shape(&xs[0]));
        }
    }

    #[test]
    fn mixer_is_deterministic() {
        let xs = latents(2, 6, 6, 16);
        let pred = MixerPredictor::new(16, 9);
        let cond = Conditioning::seeded(16, 4, 0.2);
        let a = pred.predict(&xs, 5, &cond, &mut NoHook).unwrap();
        let b = pred.predict(&xs, 5, &cond, &mut NoHook).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn mixer_records_every_layer() {
        let xs = latents(3, 4, 4, 8);
        let pred = MixerPredictor::new(8, 1);
        let mut rec = Recorder::new(3);
        pred.predict(&xs, 7, &Conditioning::none(), &mut rec).unwrap();
        for r in rec.records() {
            assert_eq!(r.len(), pred.n_layers());
            assert!(r.get(7, 0).is_some());
            assert!(r.get(7, 1).is_some());
        }
    }

    #[test]
    fn mixer_rejects_bad_conditioning() {
        let xs = latents(1, 4, 4, 8);
        let pred = MixerPredictor::new(8, 1);
        let bad = Conditioning::new(vec![0.1; 5]).unwrap();
        assert!(matches!(
            pred.predict(&xs, 0, &bad, &mut NoHook),
            Err(DiffusionError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn step_index_changes_the_output() {
        let xs = latents(1, 4, 4, 8);
        let pred = MixerPredictor::new(8, 1);
        let a = pred.predict(&xs, 0, &Conditioning::none(), &mut NoHook).unwrap();
        let b = pred.predict(&xs, 1, &Conditioning::none(), &mut NoHook).unwrap();
        assert_ne!(a[0].data(), b[0].data());
    }
}
