//! Seeded toy network and a synthetic prompt/latent corpus for it.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::madac::{AttentionKind, FfnGroup, Gate, ModuleShape, QkGroup, QkHead, VoGroup, VoHead};
use crate::model::{Block, ModelGraph};
use crate::rng::{gaussian_matrix, gaussian_vec, substream};

/// Builds `blocks` blocks of width `d` with `heads` heads and FFN width
/// `d_int`. Even blocks use self-attention, odd blocks cross-attention over
/// `d`-wide text tokens. Weights are Gaussian scaled by `1/√d`.
pub fn make_toy_model(seed: u64, blocks: usize, d: usize, heads: usize, d_int: usize) -> Result<ModelGraph> {
    if blocks == 0 {
        return Err(Error::Config("toy model needs at least one block".into()));
    }
    let shape = ModuleShape::new(d, heads, d_int)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(blocks);
    for i in 0..blocks {
        let layer_id = format!("block{i}");
        let mut rng = substream(seed, &format!("toy/{layer_id}"));
        let mut w = |r, c| gaussian_matrix(&mut rng, r, c).scale(scale);
        let attention = if i % 2 == 0 {
            AttentionKind::SelfAttention
        } else {
            AttentionKind::Cross
        };
        let dh = shape.head_dim;
        let mut qk = Vec::with_capacity(heads);
        let mut vo = Vec::with_capacity(heads);
        for _ in 0..heads {
            qk.push(QkHead { q: w(d, dh), k: w(d, dh) });
            vo.push(VoHead { v: w(d, dh), o: w(dh, d) });
        }
        let ffn = FfnGroup::new(w(d, d_int), w(d, d_int), w(d_int, d), Gate::Gelu)?;
        out.push(Block {
            layer_id,
            attention,
            shape,
            context_dim: d,
            qk: QkGroup::new(attention, qk)?,
            vo: VoGroup::new(attention, vo)?,
            ffn,
        });
    }
    ModelGraph::new(out)
}

/// `4d² + 3·d·d_int` per block.
pub fn toy_param_count(blocks: usize, d: usize, d_int: usize) -> usize {
    blocks * (4 * d * d + 3 * d * d_int)
}

/// Synthetic prompts with a shared low-dimensional structure.
///
/// Each prompt has an embedding and a fixed set of text tokens around it.
/// Latents at timestep `t` of `T` mix an anisotropic prompt-dependent signal
/// with isotropic noise at signal fraction `(t + 1) / T`, plus a scalar
/// conditioning shift of `0.1 · t / T`. Small `t` is therefore close to pure
/// noise.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub seed: u64,
    pub d: usize,
    pub tokens: usize,
    pub text_tokens: usize,
    pub timesteps: u32,
    pub prompt_ids: Vec<String>,
    pub embeddings: Matrix,
    mixing: Matrix,
}

/// Geometric decay of the latent signal spectrum, per direction.
const SPECTRAL_DECAY: f64 = 0.8;

impl ToyCorpus {
    pub fn new(seed: u64, d: usize, prompts: usize, tokens: usize, text_tokens: usize, timesteps: u32) -> Result<Self> {
        if d == 0 || prompts == 0 || tokens == 0 || text_tokens == 0 || timesteps == 0 {
            return Err(Error::Config("toy corpus dimensions must be positive".into()));
        }
        let mut rng = substream(seed, "corpus/mixing");
        let g = gaussian_matrix(&mut rng, d, d);
        let mixing = Matrix::from_fn(d, d, |i, j| g[(i, j)] * SPECTRAL_DECAY.powi(i as i32));

        let mut rng = substream(seed, "corpus/embeddings");
        let basis = gaussian_matrix(&mut rng, 4, d);
        let mut embeddings = Matrix::zeros(prompts, d);
        for p in 0..prompts {
            let coef = gaussian_vec(&mut rng, 4);
            let noise = gaussian_vec(&mut rng, d);
            let row = embeddings.row_mut(p);
            for j in 0..d {
                row[j] = 1.0 + (0..4).map(|k| coef[k] * basis[(k, j)]).sum::<f64>() + 0.1 * noise[j];
            }
        }
        Ok(Self {
            seed,
            d,
            tokens,
            text_tokens,
            timesteps,
            prompt_ids: (0..prompts).map(|p| format!("p{p:05}")).collect(),
            embeddings,
            mixing,
        })
    }

    pub fn len(&self) -> usize {
        self.prompt_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompt_ids.is_empty()
    }

    pub fn signal_fraction(&self, t: u32) -> f64 {
        f64::from(t + 1) / f64::from(self.timesteps)
    }

    /// Text tokens of prompt `p`: its embedding plus small per-token jitter.
    pub fn text(&self, p: usize) -> Matrix {
        let mut rng = substream(self.seed, &format!("corpus/text/{}", self.prompt_ids[p]));
        let jitter = gaussian_matrix(&mut rng, self.text_tokens, self.d);
        let scale = 1.0 / (self.d as f64).sqrt();
        Matrix::from_fn(self.text_tokens, self.d, |i, j| {
            (self.embeddings[(p, j)] + 0.3 * jitter[(i, j)]) * scale
        })
    }

    /// Latent tokens of prompt `p` at timestep `t`.
    pub fn latents(&self, p: usize, t: u32) -> Matrix {
        let mut rng = substream(self.seed, &format!("corpus/latent/{}", self.prompt_ids[p]));
        let signal = gaussian_matrix(&mut rng, self.tokens, self.d).matmul(&self.mixing);
        let mut rng = substream(self.seed, &format!("corpus/noise/{}/{t}", self.prompt_ids[p]));
        let noise = gaussian_matrix(&mut rng, self.tokens, self.d);
        let a = self.signal_fraction(t);
        let shift = 0.1 * f64::from(t) / f64::from(self.timesteps);
        let scale = 1.0 / (self.d as f64).sqrt();
        Matrix::from_fn(self.tokens, self.d, |i, j| {
            let cond = self.embeddings[(p, j)] * scale;
            a * (signal[(i, j)] * scale + cond) + (1.0 - a) * noise[(i, j)] + shift
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_weights() {
        let a = make_toy_model(9, 2, 8, 2, 32).unwrap();
        let b = make_toy_model(9, 2, 8, 2, 32).unwrap();
        let c = make_toy_model(10, 2, 8, 2, 32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn toy_shapes() {
        let m = make_toy_model(1, 1, 8, 2, 32).unwrap();
        let b = &m.blocks[0];
        assert_eq!(b.qk.full_query().shape(), (8, 8));
        assert_eq!(b.qk.full_key().shape(), (8, 8));
        assert_eq!(b.vo.full_value().shape(), (8, 8));
        assert_eq!(b.vo.full_output().shape(), (8, 8));
        assert_eq!(b.ffn.w_x.shape(), (8, 32));
        assert_eq!(b.ffn.w_g.shape(), (8, 32));
        assert_eq!(b.ffn.w_d.shape(), (32, 8));
        assert!(make_toy_model(1, 1, 8, 3, 32).is_err());
    }

    #[test]
    fn param_count_closed_form() {
        let m = make_toy_model(1, 3, 16, 4, 48).unwrap();
        assert_eq!(m.param_count(), toy_param_count(3, 16, 48));
        assert_eq!(m.to_bundle().total_elements(), 3 * (4 * 256 + 3 * 16 * 48));
    }

    #[test]
    fn corpus_is_deterministic_and_time_dependent() {
        let c = ToyCorpus::new(5, 8, 3, 4, 2, 5).unwrap();
        assert_eq!(c.latents(1, 2), c.latents(1, 2));
        assert_ne!(c.latents(1, 2), c.latents(1, 3));
        assert_eq!(c.text(0).shape(), (2, 8));
        assert!((c.signal_fraction(4) - 1.0).abs() < 1e-15);
    }
}
