//! Source pretraining, online test-time adaptation and comparison sweeps.

mod adapt;
mod pretrain;
mod sweep;

pub use adapt::{adapt_stream, adapt_stream_with, evaluate, AdaptReport, Preview, Probe, ProbePoint, TraceRow};
pub use pretrain::{LossRow, Trainer};
pub use sweep::{adaptation_sweep, pretrain_sweep, SweepKind, SweepRow, SweepTable};

use crate::augment::{sample_geometric, sample_photometric, GeometricConfig, PhotometricConfig};
use crate::autodiff::{Graph, Var};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::losses::{
    consistency_loss, max_squares, min_entropy, photometric_batch, selective_ce, special_ce, Discrepancy, LogitModel,
    Method, TransformSet,
};
use crate::model::{BnMode, Head, Network};
use crate::params::Session;
use crate::rng::StreamRng;
use crate::tensor::{Element, Tensor};

/// A network bound into a session, exposed as an image-to-logits map.
pub struct SessionModel<'s, 'a, E: Element> {
    pub net: &'a Network<E>,
    pub session: &'s mut Session<'a, E>,
    pub mode: BnMode,
    pub head: Head,
}

impl<E: Element> LogitModel<E> for SessionModel<'_, '_, E> {
    fn graph(&mut self) -> &mut Graph<E> {
        &mut self.session.graph
    }

    fn logits(&mut self, images: &Tensor<E>) -> Result<Var> {
        let x = self.session.graph.constant(images.clone());
        let f = self.net.forward(self.session, x, self.mode, self.head == Head::Sup)?;
        f.head(self.head)
    }
}

/// Unsupervised objective and its transformation settings.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'c> {
    pub method: Method,
    pub k: usize,
    pub metric: Discrepancy,
    pub tau: f64,
    pub photometric: &'c PhotometricConfig,
    pub geometric: &'c GeometricConfig,
}

/// `k` photometric draws followed by `k` geometric draws.
pub fn sample_transforms(obj: &Objective<'_>, h: usize, w: usize, rng: &mut StreamRng) -> Result<TransformSet> {
    let photometric = (0..obj.k)
        .map(|_| sample_photometric(obj.photometric, rng))
        .collect::<Result<_>>()?;
    let geometric = (0..obj.k)
        .map(|_| sample_geometric(obj.geometric, h, w, rng))
        .collect::<Result<_>>()?;
    Ok(TransformSet { photometric, geometric })
}

/// The objective evaluated on logits `o` of `images`. Returns `None` for
/// methods without a loss. Entropy and squares average the original with
/// `k` photometric copies once `k >= 2`.
pub fn unsupervised_loss<E: Element, M: LogitModel<E>>(
    model: &mut M,
    images: &Tensor<E>,
    o: Var,
    obj: &Objective<'_>,
    rng: &mut StreamRng,
) -> Result<Option<Var>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::dim("unsupervised_loss", format!("expected [B,3,H,W], got {s:?}")));
    }
    let set = sample_transforms(obj, s[2], s[3], rng)?;
    let loss = match obj.method {
        Method::None | Method::BnStats => return Ok(None),
        Method::SelectiveCe => selective_ce(model.graph(), o, obj.tau)?,
        Method::TransConsistency => consistency_loss(model, images, o, &set, obj.metric)?,
        Method::MinEntropy | Method::MaxSquares => {
            let f = |g: &mut Graph<E>, v: Var| match obj.method {
                Method::MinEntropy => min_entropy(g, v),
                _ => max_squares(g, v),
            };
            let mut acc = f(model.graph(), o)?;
            if obj.k >= 2 {
                for spec in &set.photometric {
                    let ot = model.logits(&photometric_batch(spec, images)?)?;
                    let g = model.graph();
                    let term = f(g, ot)?;
                    acc = g.add(acc, term)?;
                }
                acc = model.graph().scale(acc, 1.0 / (obj.k + 1) as f64);
            }
            acc
        }
        Method::SpecialCe => {
            let mut acc: Option<Var> = None;
            for spec in &set.photometric {
                let ot = model.logits(&photometric_batch(spec, images)?)?;
                let g = model.graph();
                let term = special_ce(g, o, ot)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, term)?,
                    None => term,
                });
            }
            let acc = acc.expect("k >= 1");
            model.graph().scale(acc, 1.0 / obj.k as f64)
        }
    };
    Ok(Some(loss))
}

/// Stacks scenes into `[B, 3, H, W]` images and flat labels.
pub fn batch(scenes: &[&Scene]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::config("empty batch"))?;
    let (h, w) = first.size();
    let mut data = Vec::with_capacity(scenes.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(scenes.len() * h * w);
    for s in scenes {
        if s.size() != (h, w) || s.image.shape()[0] != 3 {
            return Err(Error::shape("batch", first.image.shape(), s.image.shape()));
        }
        data.extend_from_slice(s.image.data());
        labels.extend(s.labels.iter().map(|&l| l as usize));
    }
    Ok((Tensor::new([scenes.len(), 3, h, w], data)?, labels))
}
