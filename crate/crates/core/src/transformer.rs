//! Query decoder that maps feature tokens to a class transfer matrix.
//!
//! `L` learned class queries attend over the feature tokens of one image. The
//! decoded queries `q` produce `W = softmax(q U)`, an `L x L` matrix that mixes
//! the unsupervised logits into the supervised ones: `o_s = W o_u`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, ParamGroup, ParamId, ParamStore, Session};
use crate::rng::StreamRng;
use crate::tensor::{Element, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Backbone location whose features feed the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tap {
    Block1,
    Block2,
    Block3,
    Block4,
    Logits,
}

impl Tap {
    pub const ALL: [Tap; 5] = [Tap::Block1, Tap::Block2, Tap::Block3, Tap::Block4, Tap::Logits];

    pub fn name(self) -> &'static str {
        match self {
            Tap::Block1 => "block1",
            Tap::Block2 => "block2",
            Tap::Block3 => "block3",
            Tap::Block4 => "block4",
            Tap::Logits => "logits",
        }
    }
}

/// Which axis of `q U` the softmax normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferNorm {
    /// Each row sums to one: every supervised logit is a convex mix of
    /// unsupervised logits.
    Rows,
    /// Each column sums to one.
    Columns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Divide attention scores by `sqrt(dim / heads)`.
    pub scale_attention: bool,
    pub positional_encoding: bool,
    pub tap: Tap,
    pub transfer_norm: TransferNorm,
    /// Replace the learned transfer matrix by the identity.
    pub identity_transfer: bool,
    pub query_std: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            dim: 32,
            heads: 4,
            layers: 1,
            dropout: 0.1,
            scale_attention: false,
            positional_encoding: false,
            tap: Tap::Block3,
            transfer_norm: TransferNorm::Rows,
            identity_transfer: false,
            query_std: 0.02,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "transformer dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.positional_encoding && !self.dim.is_multiple_of(4) {
            return Err(Error::config("positional encoding needs dim divisible by 4"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Fixed 2-D sinusoidal code of shape `[h * w, dim]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn positional_encoding<E: Element>(dim: usize, h: usize, w: usize) -> Tensor<E> {
    let half = dim / 2;
    let mut out = vec![E::zero(); h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * dim..(y * w + x + 1) * dim];
            for (offset, pos) in [(0, y), (half, x)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    let a = pos as f64 * freq;
                    row[offset + 2 * i] = E::of(a.sin());
                    row[offset + 2 * i + 1] = E::of(a.cos());
                }
            }
        }
    }
    Tensor::new([h * w, dim], out).expect("sized above")
}

/// Multi-head attention of projected queries `q: [L, C]` over projected keys
/// and values `k, v: [N, C]`. Returns the concatenated heads, `[L, C]`.
pub fn attention<E: Element>(g: &mut Graph<E>, q: Var, k: Var, v: Var, heads: usize, scale: bool) -> Result<Var> {
    let c = g.shape(q)[1];
    if g.shape(k)[1] != c || g.shape(v) != g.shape(k) || heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::shape("attention", g.shape(q), g.shape(k)));
    }
    let dh = c / heads;
    let mut outs = Vec::with_capacity(heads);
    for m in 0..heads {
        let qm = g.narrow(q, 1, m * dh, dh)?;
        let km = g.narrow(k, 1, m * dh, dh)?;
        let vm = g.narrow(v, 1, m * dh, dh)?;
        let kt = g.transpose(km)?;
        let mut scores = g.matmul(qm, kt)?;
        if scale {
            scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        }
        let att = g.softmax(scores, 1)?;
        outs.push(g.matmul(att, vm)?);
    }
    g.concat(&outs, 1)
}

/// `softmax(q U)` normalized along the chosen axis; `q: [L, C]`, `u: [C, L]`.
pub fn transfer_matrix<E: Element>(g: &mut Graph<E>, q: Var, u: Var, norm: TransferNorm) -> Result<Var> {
    let z = g.matmul(q, u)?;
    if g.shape(z)[0] != g.shape(z)[1] {
        return Err(Error::dim("transfer_matrix", format!("q U must be square, got {:?}", g.shape(z))));
    }
    g.softmax(
        z,
        match norm {
            TransferNorm::Rows => 1,
            TransferNorm::Columns => 0,
        },
    )
}

/// Applies one `[L, L]` transfer matrix per image to `o_u: [B, L, H, W]`.
pub fn supervised_logits<E: Element>(g: &mut Graph<E>, transfer: &[Var], o_u: Var) -> Result<Var> {
    let shape = g.shape(o_u).to_vec();
    if shape.len() != 4 || transfer.len() != shape[0] {
        return Err(Error::dim(
            "supervised_logits",
            format!("{} transfer matrices for logits {shape:?}", transfer.len()),
        ));
    }
    let (l, hw) = (shape[1], shape[2] * shape[3]);
    let mut parts = Vec::with_capacity(shape[0]);
    for (b, &w) in transfer.iter().enumerate() {
        if g.shape(w) != [l, l] {
            return Err(Error::shape("supervised_logits", g.shape(w), &[l, l]));
        }
        let ob = g.narrow(o_u, 0, b, 1)?;
        let ob = g.reshape(ob, &[l, hw])?;
        let os = g.matmul(w, ob)?;
        parts.push(g.reshape(os, &[1, l, shape[2], shape[3]])?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts, 0)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln_att: (ParamId, ParamId),
    ffn: [(ParamId, (ParamId, ParamId)); 2],
}

/// Parameter handles of the decoder; values live in the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct TransformerHead {
    pub config: TransformerConfig,
    classes: usize,
    proj: Option<(ParamId, ParamId)>,
    queries: ParamId,
    layers: Vec<Layer>,
    u: ParamId,
}

impl TransformerHead {
    pub fn build(
        store: &mut ParamStore<f32>,
        config: TransformerConfig,
        in_channels: usize,
        classes: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.dim;
        let group = ParamGroup::Transformer;
        let mat_std = (1.0 / c as f64).sqrt();
        let ln = |store: &mut ParamStore<f32>, name: String| {
            (
                store.add(format!("{name}.gamma"), group, Tensor::ones([c])),
                store.add(format!("{name}.beta"), group, Tensor::zeros([c])),
            )
        };
        let proj = (in_channels != c).then(|| {
            let w = normal_tensor([c, in_channels, 1, 1], (2.0 / in_channels as f64).sqrt(), rng);
            (
                store.add("tf.proj.weight", group, w),
                store.add("tf.proj.bias", group, Tensor::zeros([c])),
            )
        });
        let queries = store.add("tf.queries", group, normal_tensor([classes, c], config.query_std, rng));
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let mut mat = |store: &mut ParamStore<f32>, name: &str| {
                store.add(format!("tf.layer{i}.{name}"), group, normal_tensor([c, c], mat_std, rng))
            };
            let wq = mat(store, "wq");
            let wk = mat(store, "wk");
            let wv = mat(store, "wv");
            let wo = mat(store, "wo");
            let f1 = mat(store, "ffn1");
            let f2 = mat(store, "ffn2");
            layers.push(Layer {
                wq,
                wk,
                wv,
                wo,
                ln_att: ln(store, format!("tf.layer{i}.ln_att")),
                ffn: [
                    (f1, ln(store, format!("tf.layer{i}.ln_ffn1"))),
                    (f2, ln(store, format!("tf.layer{i}.ln_ffn2"))),
                ],
            });
        }
        let u = store.add("tf.transfer", group, normal_tensor([c, classes], mat_std, rng));
        Ok(TransformerHead {
            config,
            classes,
            proj,
            queries,
            layers,
            u,
        })
    }

    /// One transfer matrix per image of `features: [B, C_in, h, w]`.
    pub fn transfer_matrices<E: Element>(&self, s: &mut Session<'_, E>, features: Var) -> Result<Vec<Var>> {
        let l = self.classes;
        if self.config.identity_transfer {
            let eye = s.graph.constant(Tensor::eye(l));
            return Ok(vec![eye; s.graph.shape(features)[0]]);
        }
        let mut f = features;
        if let Some((w, b)) = self.proj {
            let (w, b) = (s.param(w), s.param(b));
            f = s.graph.conv2d(f, w, Some(b), 1, 0)?;
        }
        let shape = s.graph.shape(f).to_vec();
        let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let pe = self
            .config
            .positional_encoding
            .then(|| s.graph.constant(positional_encoding(c, h, w)));
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let fb = s.graph.narrow(f, 0, b, 1)?;
            let fb = s.graph.reshape(fb, &[c, h * w])?;
            let mut tokens = s.graph.transpose(fb)?;
            if let Some(pe) = pe {
                tokens = s.graph.add(tokens, pe)?;
            }
            let mut q = s.param(self.queries);
            for layer in &self.layers {
                q = self.decode(s, layer, q, tokens)?;
            }
            let u = s.param(self.u);
            out.push(transfer_matrix(&mut s.graph, q, u, self.config.transfer_norm)?);
        }
        Ok(out)
    }

    fn decode<E: Element>(&self, s: &mut Session<'_, E>, layer: &Layer, h: Var, tokens: Var) -> Result<Var> {
        let rate = self.config.dropout;
        let (wq, wk, wv, wo) = (s.param(layer.wq), s.param(layer.wk), s.param(layer.wv), s.param(layer.wo));
        let q = s.graph.matmul(h, wq)?;
        let k = s.graph.matmul(tokens, wk)?;
        let v = s.graph.matmul(tokens, wv)?;
        let heads = attention(&mut s.graph, q, k, v, self.config.heads, self.config.scale_attention)?;
        let a = s.graph.matmul(heads, wo)?;
        let a = s.dropout(a, rate)?;
        let r = s.graph.add(h, a)?;
        let (g0, b0) = (s.param(layer.ln_att.0), s.param(layer.ln_att.1));
        let mut h = s.graph.layernorm(r, g0, b0, LN_EPS)?;
        for &(wf, (gi, bi)) in &layer.ffn {
            let wf = s.param(wf);
            let z = s.graph.matmul(h, wf)?;
            let z = s.graph.relu(z);
            let z = s.dropout(z, rate)?;
            let r = s.graph.add(h, z)?;
            let (gi, bi) = (s.param(gi), s.param(bi));
            h = s.graph.layernorm(r, gi, bi, LN_EPS)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::rng::Seeds;

    #[test]
    fn positional_code_is_bounded_and_distinct() {
        let pe = positional_encoding::<f64>(8, 4, 4);
        assert_eq!(pe.shape(), &[16, 8]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        let rows: Vec<&[f64]> = pe.data().chunks(8).collect();
        for i in 0..16 {
            for j in i + 1..16 {
                assert_ne!(rows[i], rows[j]);
            }
        }
    }

    #[test]
    fn attention_with_one_key_returns_its_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_fn([3, 4], |i| i as f64 * 0.3));
        let k = g.constant(Tensor::from_fn([1, 4], |i| i as f64));
        let v = g.constant(Tensor::new([1, 4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let out = attention(&mut g, q, k, v, 2, false).unwrap();
        for row in g.value(out).data().chunks(4) {
            assert_eq!(row, &[1.0, -2.0, 3.0, 0.5]);
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = Seeds::new(3).stream("t");
        let inputs: Vec<Tensor<f64>> = [[3usize, 8], [5, 8], [5, 8]]
            .iter()
            .map(|s| normal_tensor(s.to_vec(), 1.0, &mut rng).cast())
            .collect();
        let report = gradcheck(
            |g, v| {
                let o = attention(g, v[0], v[1], v[2], 4, true)?;
                let o = g.square(o);
                Ok(g.sum(o))
            },
            &inputs,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn transfer_rows_are_distributions() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_fn([5, 6], |i| (i as f64).sin() * 3.0));
        let u = g.constant(Tensor::from_fn([6, 5], |i| (i as f64).cos()));
        let w = transfer_matrix(&mut g, q, u, TransferNorm::Rows).unwrap();
        for row in g.value(w).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_transfer_passes_logits_through() {
        let mut g = Graph::<f64>::new();
        let o = g.constant(Tensor::from_fn([2, 3, 2, 2], |i| i as f64 - 5.0));
        let eye = g.constant(Tensor::eye(3));
        let s = supervised_logits(&mut g, &[eye, eye], o).unwrap();
        assert_eq!(g.value(s), g.value(o));
    }
}
