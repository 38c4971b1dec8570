//! Weight-group model representation, the tensor bundle format, a seeded toy
//! network and the compression pipeline.

pub mod bundle;
pub mod pipeline;
pub mod toy;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use bundle::{Tensor, TensorBundle};

use crate::calib::InputKind;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::madac::{AttentionKind, FfnGroup, Gate, ModuleShape, QkGroup, QkHead, VoGroup, VoHead};

/// One transformer block: a single attention (self or cross) followed by a
/// gated FFN, both residual and each fed an RMS-normalized input.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub layer_id: String,
    pub attention: AttentionKind,
    /// Shape at construction time; `head_dim` fixes the attention scale even
    /// after the per-head width is reduced.
    pub shape: ModuleShape,
    /// Width of the key/value source for cross-attention.
    pub context_dim: usize,
    pub qk: QkGroup,
    pub vo: VoGroup,
    pub ffn: FfnGroup,
}

/// Activation captured during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub layer_id: String,
    pub kind: InputKind,
    pub data: Matrix,
}

const RMS_EPS: f64 = 1e-6;

/// Parameter-free RMS normalization of each row.
pub fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let d = x.cols().max(1) as f64;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let scale = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / d + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

fn softmax_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl Block {
    pub fn param_count(&self) -> usize {
        self.qk.param_count() + self.vo.param_count() + self.ffn.param_count()
    }

    pub fn attention_scale(&self) -> f64 {
        1.0 / (self.shape.head_dim as f64).sqrt()
    }

    /// Multi-head attention output for queries `x` over keys/values `kv`.
    pub fn attend(&self, x: &Matrix, kv: &Matrix) -> Matrix {
        let scale = self.attention_scale();
        let mut out = Matrix::zeros(x.rows(), self.vo.output_dim());
        for (qk, vo) in self.qk.heads.iter().zip(&self.vo.heads) {
            let mut scores = x.matmul(&qk.q).matmul_t(&kv.matmul(&qk.k)).scale(scale);
            softmax_rows(&mut scores);
            out.add_assign(&scores.matmul(&kv.matmul(&vo.v).matmul(&vo.o)));
        }
        out
    }

    pub fn forward(&self, x: &Matrix, text: &Matrix, mut taps: Option<&mut Vec<Tap>>) -> Result<Matrix> {
        if x.cols() != self.shape.d_model {
            return Err(Error::Shape(format!(
                "{} expects width {}, got {}",
                self.layer_id,
                self.shape.d_model,
                x.cols()
            )));
        }
        let mut tap = |kind: InputKind, m: &Matrix| {
            if let Some(t) = taps.as_deref_mut() {
                t.push(Tap {
                    layer_id: self.layer_id.clone(),
                    kind,
                    data: m.clone(),
                });
            }
        };
        let u = rms_norm(x);
        let attn = match self.attention {
            AttentionKind::SelfAttention => {
                tap(InputKind::SaInput, &u);
                self.attend(&u, &u)
            }
            AttentionKind::Cross => {
                if text.cols() != self.context_dim || text.rows() == 0 {
                    return Err(Error::Shape(format!(
                        "{} expects {}-wide text tokens, got {}x{}",
                        self.layer_id,
                        self.context_dim,
                        text.rows(),
                        text.cols()
                    )));
                }
                tap(InputKind::CaQueryInput, &u);
                tap(InputKind::TextTokens, text);
                self.attend(&u, text)
            }
        };
        let h = x.add(&attn);
        let z = self.ffn.intermediate(&rms_norm(&h));
        tap(InputKind::FfnIntermediate, &z);
        Ok(h.add(&z.matmul(&self.ffn.w_d)))
    }

    /// The inputs each calibration kind of this block needs.
    pub fn required_kinds(&self) -> &'static [InputKind] {
        match self.attention {
            AttentionKind::SelfAttention => &[InputKind::SaInput, InputKind::FfnIntermediate],
            AttentionKind::Cross => &[
                InputKind::CaQueryInput,
                InputKind::TextTokens,
                InputKind::FfnIntermediate,
            ],
        }
    }

    /// Weight the TRQ of `kind` is measured against.
    pub fn trq_weight(&self, kind: InputKind) -> Result<Matrix> {
        let q = self.qk.full_query();
        let k = self.qk.full_key();
        let v = self.vo.full_value();
        match (self.attention, kind) {
            (AttentionKind::SelfAttention, InputKind::SaInput) => Ok(Matrix::hstack(&[q, k, v])),
            (AttentionKind::Cross, InputKind::CaQueryInput) => Ok(q),
            (AttentionKind::Cross, InputKind::TextTokens) => Ok(Matrix::hstack(&[k, v])),
            (_, InputKind::FfnIntermediate) => Ok(self.ffn.w_d.clone()),
            _ => Err(Error::Config(format!(
                "{} ({} attention) has no {kind} input",
                self.layer_id,
                self.attention.as_str()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub blocks: Vec<Block>,
}

/// Bundle-level description of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockSpec {
    layer_id: String,
    attention: AttentionKind,
    d_model: usize,
    heads: usize,
    head_dim: usize,
    ffn_inner: usize,
    context_dim: usize,
    gate: Gate,
}

pub fn tensor_name(layer_id: &str, part: &str) -> String {
    format!("{layer_id}.{part}")
}

impl ModelGraph {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Config("model has no blocks".into()));
        }
        let mut ids = HashSet::new();
        let d = blocks[0].shape.d_model;
        for b in &blocks {
            if !ids.insert(b.layer_id.as_str()) {
                return Err(Error::Config(format!("duplicate layer id '{}'", b.layer_id)));
            }
            let width_ok = b.shape.d_model == d
                && b.qk.query_dim() == d
                && b.vo.output_dim() == d
                && b.ffn.w_x.rows() == d
                && b.ffn.w_d.cols() == d
                && b.qk.heads.len() == b.vo.heads.len();
            let kv = match b.attention {
                AttentionKind::SelfAttention => d,
                AttentionKind::Cross => b.context_dim,
            };
            if !width_ok || b.qk.key_dim() != kv || b.vo.input_dim() != kv {
                return Err(Error::Shape(format!("block {} does not chain at width {d}", b.layer_id)));
            }
        }
        Ok(Self { blocks })
    }

    pub fn d_model(&self) -> usize {
        self.blocks[0].shape.d_model
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(Block::param_count).sum()
    }

    pub fn block(&self, layer_id: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.layer_id == layer_id)
    }

    /// Runs all blocks on `x` with text context `text`.
    pub fn forward(&self, x: &Matrix, text: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, text, None)?;
        }
        Ok(h)
    }

    pub fn forward_with_taps(&self, x: &Matrix, text: &Matrix) -> Result<(Matrix, Vec<Tap>)> {
        let mut taps = Vec::new();
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, text, Some(&mut taps))?;
        }
        Ok((h, taps))
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut bundle = TensorBundle::new();
        let mut specs = Vec::new();
        for b in &self.blocks {
            specs.push(BlockSpec {
                layer_id: b.layer_id.clone(),
                attention: b.attention,
                d_model: b.shape.d_model,
                heads: b.shape.heads,
                head_dim: b.shape.head_dim,
                ffn_inner: b.shape.ffn_inner,
                context_dim: b.context_dim,
                gate: b.ffn.gate,
            });
            for (j, (qk, vo)) in b.qk.heads.iter().zip(&b.vo.heads).enumerate() {
                for (part, m) in [("q", &qk.q), ("k", &qk.k), ("v", &vo.v), ("o", &vo.o)] {
                    let t = Tensor::from_matrix(tensor_name(&b.layer_id, &format!("attn.{part}.{j}")), m);
                    bundle.push(t).expect("unique names");
                }
            }
            for (part, m) in [("ffn.x", &b.ffn.w_x), ("ffn.g", &b.ffn.w_g), ("ffn.d", &b.ffn.w_d)] {
                bundle
                    .push(Tensor::from_matrix(tensor_name(&b.layer_id, part), m))
                    .expect("unique names");
            }
        }
        bundle.metadata.insert("kind".into(), json!("model"));
        bundle
            .metadata
            .insert("blocks".into(), serde_json::to_value(specs).expect("serializable"));
        bundle
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let specs: Vec<BlockSpec> = bundle
            .metadata
            .get("blocks")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| Error::Manifest(format!("bad block metadata: {e}")))?
            .ok_or_else(|| Error::Manifest("bundle has no 'blocks' metadata".into()))?;
        let mut blocks = Vec::with_capacity(specs.len());
        for s in specs {
            let name = |part: &str| tensor_name(&s.layer_id, part);
            let mut qk_heads = Vec::with_capacity(s.heads);
            let mut vo_heads = Vec::with_capacity(s.heads);
            for j in 0..s.heads {
                qk_heads.push(QkHead {
                    q: bundle.matrix(&name(&format!("attn.q.{j}")))?,
                    k: bundle.matrix(&name(&format!("attn.k.{j}")))?,
                });
                vo_heads.push(VoHead {
                    v: bundle.matrix(&name(&format!("attn.v.{j}")))?,
                    o: bundle.matrix(&name(&format!("attn.o.{j}")))?,
                });
            }
            blocks.push(Block {
                attention: s.attention,
                shape: ModuleShape {
                    d_model: s.d_model,
                    heads: s.heads,
                    head_dim: s.head_dim,
                    ffn_inner: s.ffn_inner,
                },
                context_dim: s.context_dim,
                qk: QkGroup::new(s.attention, qk_heads)?,
                vo: VoGroup::new(s.attention, vo_heads)?,
                ffn: FfnGroup::new(
                    bundle.matrix(&name("ffn.x"))?,
                    bundle.matrix(&name("ffn.g"))?,
                    bundle.matrix(&name("ffn.d"))?,
                    s.gate,
                )?,
                layer_id: s.layer_id,
            });
        }
        Self::new(blocks)
    }
}

/// Reads an optional string entry from a metadata map.
pub(crate) fn meta_str<'a>(map: &'a std::collections::BTreeMap<String, Value>, key: &str) -> Option<&'a str> {
    map.get(key).and_then(Value::as_str)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy::make_toy_model;

    #[test]
    fn zero_weights_pass_input_through() {
        let mut m = make_toy_model(1, 2, 8, 2, 32).unwrap();
        for b in &mut m.blocks {
            for h in &mut b.vo.heads {
                h.o = Matrix::zeros(h.o.rows(), h.o.cols());
            }
            b.ffn.w_d = Matrix::zeros(32, 8);
        }
        let x = Matrix::from_fn(3, 8, |i, j| (i * 8 + j) as f64 * 0.1);
        let text = Matrix::from_fn(2, 8, |i, j| (i + j) as f64);
        assert_eq!(m.forward(&x, &text).unwrap(), x);
    }

    #[test]
    fn single_token_attention_is_linear() {
        // With one key the softmax is 1, so attention reduces to u·W_v·W_o.
        let m = make_toy_model(2, 1, 8, 2, 32).unwrap();
        let b = &m.blocks[0];
        let x = Matrix::from_fn(1, 8, |_, j| j as f64 * 0.3 - 1.0);
        let (out, taps) = m.forward_with_taps(&x, &Matrix::zeros(1, 8)).unwrap();
        let rms = |v: &Matrix| {
            let s = (v.row(0).iter().map(|t| t * t).sum::<f64>() / 8.0 + 1e-6).sqrt();
            v.scale(1.0 / s)
        };
        let u = rms(&x);
        let mut attn = Matrix::zeros(1, 8);
        for h in &b.vo.heads {
            attn.add_assign(&u.matmul(&h.v).matmul(&h.o));
        }
        let h = x.add(&attn);
        let hn = rms(&h);
        let z = Matrix::from_fn(1, 32, |_, c| {
            let a: f64 = (0..8).map(|i| hn[(0, i)] * b.ffn.w_x[(i, c)]).sum();
            let g: f64 = (0..8).map(|i| hn[(0, i)] * b.ffn.w_g[(i, c)]).sum();
            a * Gate::Gelu.apply(g)
        });
        let expected = h.add(&z.matmul(&b.ffn.w_d));
        assert!(out.max_abs_diff(&expected) < 1e-12);
        let z_tap = taps.iter().find(|t| t.kind == InputKind::FfnIntermediate).unwrap();
        assert!(z_tap.data.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn bundle_round_trip_preserves_model() {
        let m = make_toy_model(3, 2, 8, 2, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.to_bundle().save(dir.path()).unwrap();
        let back = ModelGraph::from_bundle(&TensorBundle::load(dir.path()).unwrap()).unwrap();
        assert_eq!(back.param_count(), m.param_count());
        for (a, b) in m.blocks.iter().zip(&back.blocks) {
            assert_eq!(a.attention, b.attention);
            // Weights are f32 on disk.
            assert!(a.ffn.w_d.max_abs_diff(&b.ffn.w_d) < 1e-6);
        }
        let back2 = ModelGraph::from_bundle(&back.to_bundle()).unwrap();
        assert_eq!(back, back2);
    }

    #[test]
    fn trq_weight_dims() {
        let m = make_toy_model(4, 2, 8, 2, 32).unwrap();
        assert_eq!(m.blocks[0].trq_weight(InputKind::SaInput).unwrap().shape(), (8, 24));
        assert_eq!(m.blocks[1].trq_weight(InputKind::TextTokens).unwrap().shape(), (8, 16));
        assert_eq!(m.blocks[1].trq_weight(InputKind::FfnIntermediate).unwrap().shape(), (32, 8));
        assert!(m.blocks[0].trq_weight(InputKind::TextTokens).is_err());
    }
}
