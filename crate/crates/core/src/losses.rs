//! Supervised and unsupervised objectives over `[B, L, H, W]` logits.

use serde::{Deserialize, Serialize};

use crate::augment::{apply_geometric, apply_geometric_var, apply_photometric, GeometricSpec, PhotometricSpec};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const SELECTIVE_THRESHOLD: f64 = 0.8;

/// Unsupervised objective used during pretraining or test-time adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    None,
    MinEntropy,
    MaxSquares,
    TransConsistency,
    SelectiveCe,
    SpecialCe,
    /// No gradient step; only re-estimates normalization statistics.
    BnStats,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::None,
        Method::MinEntropy,
        Method::MaxSquares,
        Method::TransConsistency,
        Method::SelectiveCe,
        Method::SpecialCe,
        Method::BnStats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::MinEntropy => "min-entropy",
            Method::MaxSquares => "max-squares",
            Method::TransConsistency => "trans-consistency",
            Method::SelectiveCe => "selective-ce",
            Method::SpecialCe => "special-ce",
            Method::BnStats => "bn-stats",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }

    /// Whether the objective takes gradient steps.
    pub fn steps(self) -> bool {
        !matches!(self, Method::None | Method::BnStats)
    }

    /// Whether the objective compares predictions on transformed inputs.
    pub fn uses_transforms(self) -> bool {
        matches!(self, Method::TransConsistency | Method::SpecialCe)
    }
}

/// Distance between two sets of logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discrepancy {
    L2Logits,
    L1Logits,
    L2Probs,
    L1Probs,
    KlProbs,
}

impl Discrepancy {
    pub const ALL: [Discrepancy; 5] = [
        Discrepancy::L2Logits,
        Discrepancy::L1Logits,
        Discrepancy::L2Probs,
        Discrepancy::L1Probs,
        Discrepancy::KlProbs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Discrepancy::L2Logits => "l2-logits",
            Discrepancy::L1Logits => "l1-logits",
            Discrepancy::L2Probs => "l2-probs",
            Discrepancy::L1Probs => "l1-probs",
            Discrepancy::KlProbs => "kl-probs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Discrepancy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown discrepancy {s:?}")))
    }
}

fn class_shape<E: Element>(g: &Graph<E>, logits: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = g.shape(logits);
    if s.len() != 4 {
        return Err(Error::dim(op, format!("expected [B,L,H,W] logits, got {s:?}")));
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

/// Mean pixel-wise cross-entropy against `labels` laid out as `[B, H, W]`.
pub fn cross_entropy<E: Element>(g: &mut Graph<E>, logits: Var, labels: &[usize]) -> Result<Var> {
    class_shape(g, logits, "cross_entropy")?;
    let lp = g.log_softmax(logits, 1)?;
    let picked = g.pick(lp, 1, labels)?;
    let m = g.mean(picked);
    Ok(g.neg(m))
}

/// Mean pixel entropy of the softmax.
pub fn min_entropy<E: Element>(g: &mut Graph<E>, logits: Var) -> Result<Var> {
    let (b, _, hw) = class_shape(g, logits, "min_entropy")?;
    let p = g.softmax(logits, 1)?;
    let lp = g.log_softmax(logits, 1)?;
    let plp = g.mul(p, lp)?;
    let s = g.sum(plp);
    Ok(g.scale(s, -1.0 / (b * hw) as f64))
}

/// `-(1/2) * mean over pixels of sum_l p_l^2`.
pub fn max_squares<E: Element>(g: &mut Graph<E>, logits: Var) -> Result<Var> {
    let (b, _, hw) = class_shape(g, logits, "max_squares")?;
    let p = g.softmax(logits, 1)?;
    let sq = g.square(p);
    let s = g.sum(sq);
    Ok(g.scale(s, -0.5 / (b * hw) as f64))
}

fn probabilities<E: Element>(t: &Tensor<E>) -> Vec<E> {
    let s = t.shape();
    let (l, hw) = (s[1], s[2] * s[3]);
    let d = t.data();
    let mut p = vec![E::zero(); d.len()];
    for b in 0..s[0] {
        for i in 0..hw {
            let at = |c: usize| (b * l + c) * hw + i;
            let m = (0..l).map(|c| d[at(c)]).fold(E::neg_infinity(), E::max);
            let z: E = (0..l).map(|c| (d[at(c)] - m).exp()).sum();
            for c in 0..l {
                p[at(c)] = (d[at(c)] - m).exp() / z;
            }
        }
    }
    p
}

/// Cross-entropy to the arg-max pseudo-label on pixels whose top probability
/// exceeds `tau`, averaged over all pixels.
pub fn selective_ce<E: Element>(g: &mut Graph<E>, logits: Var, tau: f64) -> Result<Var> {
    let (b, l, hw) = class_shape(g, logits, "selective_ce")?;
    let p = probabilities(g.value(logits));
    let mut pseudo = vec![0usize; b * hw];
    let mut mask = vec![E::zero(); b * hw];
    for bi in 0..b {
        for i in 0..hw {
            let (k, pk) = (0..l)
                .map(|c| (c, p[(bi * l + c) * hw + i]))
                .fold((0, E::neg_infinity()), |acc, x| if x.1 > acc.1 { x } else { acc });
            pseudo[bi * hw + i] = k;
            if pk.f64() > tau {
                mask[bi * hw + i] = E::one();
            }
        }
    }
    let lp = g.log_softmax(logits, 1)?;
    let picked = g.pick(lp, 1, &pseudo)?;
    let shape = g.shape(picked).to_vec();
    let mask = g.constant(Tensor::new(shape, mask)?);
    let masked = g.mul(picked, mask)?;
    let s = g.sum(masked);
    Ok(g.scale(s, -1.0 / (b * hw) as f64))
}

/// Cross-entropy between predictions on an image (`logits`) and on its
/// transformed copy (`transformed`). Where the two arg-max labels agree the
/// term is plain cross-entropy of the transformed prediction to that label.
/// Where they disagree each class is weighted by `exp(-(p_l - p~_l)^2)`.
/// Weights are constants; gradients flow through `transformed` only.
pub fn special_ce<E: Element>(g: &mut Graph<E>, logits: Var, transformed: Var) -> Result<Var> {
    class_shape(g, logits, "special_ce")?;
    if g.shape(transformed) != g.shape(logits) {
        return Err(Error::shape("special_ce", g.shape(logits), g.shape(transformed)));
    }
    let w = special_ce_weights(g.value(logits), g.value(transformed))?;
    weighted_nll(g, &w, transformed)
}

/// Per-pixel class weights used by [`special_ce`].
pub fn special_ce_weights<E: Element>(logits: &Tensor<E>, transformed: &Tensor<E>) -> Result<Tensor<E>> {
    let s = logits.shape();
    let (b, l, hw) = (s[0], s[1], s[2] * s[3]);
    let p = probabilities(logits);
    let pt = probabilities(transformed);
    let argmax = |q: &[E], bi: usize, i: usize| {
        (0..l)
            .map(|c| (c, q[(bi * l + c) * hw + i]))
            .fold((0, E::neg_infinity()), |acc, x| if x.1 > acc.1 { x } else { acc })
            .0
    };
    let mut w = vec![E::zero(); p.len()];
    for bi in 0..b {
        for i in 0..hw {
            let (a, at) = (argmax(&p, bi, i), argmax(&pt, bi, i));
            if a == at {
                w[(bi * l + at) * hw + i] = E::one();
            } else {
                for c in 0..l {
                    let k = (bi * l + c) * hw + i;
                    let d = p[k] - pt[k];
                    w[k] = (-(d * d)).exp();
                }
            }
        }
    }
    Tensor::new(s.to_vec(), w)
}

/// `-mean over pixels of sum_l w_l log softmax(x)_l` with constant weights.
pub fn weighted_nll<E: Element>(g: &mut Graph<E>, weights: &Tensor<E>, logits: Var) -> Result<Var> {
    let (b, _, hw) = class_shape(g, logits, "weighted_nll")?;
    if weights.shape() != g.shape(logits) {
        return Err(Error::shape("weighted_nll", weights.shape(), g.shape(logits)));
    }
    let w = g.constant(weights.clone());
    let lp = g.log_softmax(logits, 1)?;
    let wl = g.mul(w, lp)?;
    let s = g.sum(wl);
    Ok(g.scale(s, -1.0 / (b * hw) as f64))
}

/// Mean-reduced distance between two logit tensors of equal shape. For
/// [`Discrepancy::KlProbs`] this is `KL(softmax(a) || softmax(b))` averaged over
/// pixels.
pub fn discrepancy<E: Element>(g: &mut Graph<E>, metric: Discrepancy, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape("discrepancy", g.shape(a), g.shape(b)));
    }
    match metric {
        Discrepancy::L2Logits => {
            let d = g.sub(a, b)?;
            let d = g.square(d);
            Ok(g.mean(d))
        }
        Discrepancy::L1Logits => {
            let d = g.sub(a, b)?;
            let d = g.abs(d);
            Ok(g.mean(d))
        }
        Discrepancy::L2Probs | Discrepancy::L1Probs => {
            let pa = g.softmax(a, 1)?;
            let pb = g.softmax(b, 1)?;
            let d = g.sub(pa, pb)?;
            let d = if metric == Discrepancy::L2Probs { g.square(d) } else { g.abs(d) };
            Ok(g.mean(d))
        }
        Discrepancy::KlProbs => {
            let (bs, _, hw) = class_shape(g, a, "discrepancy")?;
            let pa = g.softmax(a, 1)?;
            let la = g.log_softmax(a, 1)?;
            let lb = g.log_softmax(b, 1)?;
            let d = g.sub(la, lb)?;
            let t = g.mul(pa, d)?;
            let s = g.sum(t);
            Ok(g.scale(s, 1.0 / (bs * hw) as f64))
        }
    }
}

/// Sampled transformations for one consistency evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransformSet {
    pub photometric: Vec<PhotometricSpec>,
    pub geometric: Vec<GeometricSpec>,
}

/// Something that maps an image batch to logits on a shared graph.
pub trait LogitModel<E: Element> {
    fn graph(&mut self) -> &mut Graph<E>;
    /// Logits for `images: [B, 3, H, W]`, fed as constants.
    fn logits(&mut self, images: &Tensor<E>) -> Result<Var>;
}

/// Applies a photometric transform to every image of `[B, 3, H, W]`.
pub fn photometric_batch<E: Element>(spec: &PhotometricSpec, images: &Tensor<E>) -> Result<Tensor<E>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::dim("photometric", format!("expected [B,3,H,W], got {s:?}")));
    }
    let per = 3 * s[2] * s[3];
    let mut out = Vec::with_capacity(images.numel());
    for chunk in images.data().chunks(per) {
        let img = Tensor::new([3, s[2], s[3]], chunk.iter().map(|v| v.f64() as f32).collect())?;
        out.extend(apply_photometric(spec, &img)?.data().iter().map(|&v| E::of(v as f64)));
    }
    Tensor::new(s.to_vec(), out)
}

/// `mean_p D(o_u, f(A_p x)) + mean_g D(A_g o_u, f(A_g x))`, where `o_u` are
/// the logits of the untransformed `images`. Either family may be empty.
pub fn consistency_loss<E: Element, M: LogitModel<E>>(
    model: &mut M,
    images: &Tensor<E>,
    o_u: Var,
    set: &TransformSet,
    metric: Discrepancy,
) -> Result<Var> {
    if set.photometric.is_empty() && set.geometric.is_empty() {
        return Err(Error::config("consistency loss needs at least one transformation"));
    }
    let mut terms = Vec::new();
    if !set.photometric.is_empty() {
        let mut acc: Option<Var> = None;
        for spec in &set.photometric {
            let xt = photometric_batch(spec, images)?;
            let ot = model.logits(&xt)?;
            let g = model.graph();
            let d = discrepancy(g, metric, o_u, ot)?;
            acc = Some(match acc {
                Some(a) => g.add(a, d)?,
                None => d,
            });
        }
        let g = model.graph();
        terms.push(g.scale(acc.expect("non-empty"), 1.0 / set.photometric.len() as f64));
    }
    if !set.geometric.is_empty() {
        let mut acc: Option<Var> = None;
        for spec in &set.geometric {
            let xt = apply_geometric(spec, images)?;
            let ot = model.logits(&xt)?;
            let g = model.graph();
            let moved = apply_geometric_var(g, spec, o_u)?;
            let d = discrepancy(g, metric, moved, ot)?;
            acc = Some(match acc {
                Some(a) => g.add(a, d)?,
                None => d,
            });
        }
        let g = model.graph();
        terms.push(g.scale(acc.expect("non-empty"), 1.0 / set.geometric.len() as f64));
    }
    let g = model.graph();
    if terms.len() == 2 {
        g.add(terms[0], terms[1])
    } else {
        Ok(terms[0])
    }
}

/// `ce + lambda * unsup`; the unsupervised term is skipped when absent or
/// when `lambda` is zero.
pub fn total_loss<E: Element>(g: &mut Graph<E>, ce: Var, unsup: Option<Var>, lambda: f64) -> Result<Var> {
    match unsup {
        Some(u) if lambda != 0.0 => {
            let u = g.scale(u, lambda);
            g.add(ce, u)
        }
        _ => Ok(ce),
    }
}

/// Pretraining objective `CE(o_s, y) + lambda * L(o_u)` for objectives that
/// depend only on `o_u`. Transformation-based objectives go through
/// [`consistency_loss`] and [`total_loss`].
pub fn total_pretrain_loss<E: Element>(
    g: &mut Graph<E>,
    o_s: Var,
    labels: &[usize],
    o_u: Var,
    method: Method,
    lambda: f64,
) -> Result<Var> {
    let ce = cross_entropy(g, o_s, labels)?;
    let unsup = match method {
        Method::None | Method::BnStats => None,
        _ if lambda == 0.0 => None,
        Method::MinEntropy => Some(min_entropy(g, o_u)?),
        Method::MaxSquares => Some(max_squares(g, o_u)?),
        Method::SelectiveCe => Some(selective_ce(g, o_u, SELECTIVE_THRESHOLD)?),
        Method::TransConsistency | Method::SpecialCe => {
            return Err(Error::config(format!(
                "{} needs transformed forwards; use consistency_loss with total_loss",
                method.name()
            )))
        }
    };
    total_loss(g, ce, unsup, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    fn logits(seed: u64) -> Tensor<f64> {
        Tensor::from_fn([2, 3, 2, 3], |i| ((i as f64 + seed as f64) * 1.7).sin() * 2.0)
    }

    #[test]
    fn cross_entropy_matches_direct_sum() {
        let x = logits(1);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let mut g = Graph::<f64>::new();
        let v = g.constant(x.clone());
        let ce = cross_entropy(&mut g, v, &labels).unwrap();
        let d = x.data();
        let mut expect = 0.0;
        for b in 0..2 {
            for i in 0..6 {
                let z: f64 = (0..3).map(|c| d[(b * 3 + c) * 6 + i].exp()).sum();
                expect -= (d[(b * 3 + labels[b * 6 + i]) * 6 + i].exp() / z).ln();
            }
        }
        assert!((g.value(ce).item() - expect / 12.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_and_squares_at_uniform() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros([1, 4, 2, 2]));
        let h = min_entropy(&mut g, v).unwrap();
        let s = max_squares(&mut g, v).unwrap();
        assert!((g.value(h).item() - 4f64.ln()).abs() < 1e-12);
        assert!((g.value(s).item() + 0.5 * 0.25).abs() < 1e-12);
    }

    #[test]
    fn selective_ce_ignores_unconfident_pixels() {
        let mut g = Graph::<f64>::new();
        let mut d = vec![0.0; 4 * 2];
        d[0] = 10.0;
        let v = g.constant(Tensor::new([1, 4, 1, 2], d).unwrap());
        let l = selective_ce(&mut g, v, 0.8).unwrap();
        let p0 = 10f64.exp() / (10f64.exp() + 3.0);
        assert!((g.value(l).item() + p0.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn special_ce_agreeing_pixels_reduce_to_cross_entropy() {
        let x = logits(2);
        let mut g = Graph::<f64>::new();
        let a = g.constant(x.clone());
        let b = g.constant(x.clone());
        let l = special_ce(&mut g, a, b).unwrap();
        let labels: Vec<usize> = {
            let p = probabilities(&x);
            (0..12)
                .map(|k| {
                    let (bi, i) = (k / 6, k % 6);
                    (0..3)
                        .max_by(|&c1, &c2| p[(bi * 3 + c1) * 6 + i].total_cmp(&p[(bi * 3 + c2) * 6 + i]))
                        .unwrap()
                })
                .collect()
        };
        let ce = cross_entropy(&mut g, b, &labels).unwrap();
        assert!((g.value(l).item() - g.value(ce).item()).abs() < 1e-12);
    }

    #[test]
    fn special_ce_gradient_uses_frozen_weights() {
        let inputs = [logits(6), logits(7)];
        let mut g = Graph::<f64>::new();
        let a = g.constant(inputs[0].clone());
        let b = g.param(inputs[1].clone());
        let l = special_ce(&mut g, a, b).unwrap();
        g.backward(l).unwrap();
        let weights = special_ce_weights(&inputs[0], &inputs[1]).unwrap();
        let mut h = Graph::<f64>::new();
        let b2 = h.param(inputs[1].clone());
        let l2 = weighted_nll(&mut h, &weights, b2).unwrap();
        h.backward(l2).unwrap();
        assert_eq!(g.value(l).item(), h.value(l2).item());
        assert_eq!(g.grad(b).unwrap(), h.grad(b2).unwrap());
    }

    #[test]
    fn discrepancies_vanish_on_equal_inputs() {
        for m in Discrepancy::ALL {
            let mut g = Graph::<f64>::new();
            let a = g.constant(logits(3));
            let d = discrepancy(&mut g, m, a, a).unwrap();
            assert!(g.value(d).item().abs() < 1e-12, "{m:?}");
        }
    }

    #[test]
    fn objective_gradients() {
        let inputs = [logits(4), logits(5)];
        let labels: Vec<usize> = (0..12).map(|i| (i * 2) % 3).collect();
        type Objective = fn(&mut Graph<f64>, &[Var], &[usize]) -> Result<Var>;
        let weights = special_ce_weights(&inputs[0], &inputs[1]).unwrap();
        let cases: [(&str, Objective); 6] = [
            ("ce", |g, v, y| cross_entropy(g, v[0], y)),
            ("entropy", |g, v, _| min_entropy(g, v[0])),
            ("squares", |g, v, _| max_squares(g, v[0])),
            ("l2p", |g, v, _| discrepancy(g, Discrepancy::L2Probs, v[0], v[1])),
            ("kl", |g, v, _| discrepancy(g, Discrepancy::KlProbs, v[0], v[1])),
            ("l2", |g, v, _| discrepancy(g, Discrepancy::L2Logits, v[0], v[1])),
        ];
        for (name, f) in cases {
            let report = gradcheck(|g, v| f(g, v, &labels), &inputs).unwrap();
            assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
        }
        let report = gradcheck(|g, v| weighted_nll(g, &weights, v[1]), &inputs).unwrap();
        assert!(report.max_rel_error < 1e-4, "weighted: {report:?}");
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("bogus").is_err());
    }
}
