use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{batch, unsupervised_loss, Objective, SessionModel};
use crate::config::AdaptConfig;
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::losses::Method;
use crate::metrics::{argmax_labels, ConfusionMatrix};
use crate::model::{BnMode, Head, Network};
use crate::optim::Sgd;
use crate::params::{ParamGroup, Session};
use crate::rng::{Seeds, STREAM_ORDER, TRANSFORMS};

/// One evaluated stream sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub run_id: String,
    /// Position in the processing order.
    pub position: usize,
    /// Index of the sample in the stream.
    pub sample: usize,
    /// mIoU over all samples processed so far.
    pub cumulative_miou: f64,
    /// Adaptation loss of the last step; absent for methods without one.
    pub loss: Option<f64>,
    pub method: Method,
    pub seed: u64,
    /// Update skipped because of a non-finite loss or gradient.
    pub skipped: bool,
}

/// Ground truth and prediction of one sample, for raster previews.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preview {
    pub sample: usize,
    pub size: (usize, usize),
    pub truth: Vec<u8>,
    pub pred: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptReport {
    pub run_id: String,
    pub seed: u64,
    pub config: AdaptConfig,
    pub checkpoint_hash: String,
    pub trace: Vec<TraceRow>,
    pub confusion: ConfusionMatrix,
    pub class_iou: Vec<Option<f64>>,
    pub final_miou: f64,
    /// Row-major `L×L` transfer matrix of the first sample's inference pass.
    pub transfer_example: Option<Vec<f64>>,
    pub previews: Vec<Preview>,
    /// Parameter-group hashes before and after the run.
    pub hashes_before: BTreeMap<ParamGroup, String>,
    pub hashes_after: BTreeMap<ParamGroup, String>,
    pub events: Vec<String>,
    pub wall_clock_secs: f64,
}

/// Observation points handed to a [`Probe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbePoint {
    Before,
    After,
}

pub type Probe<'p> = &'p mut dyn FnMut(ProbePoint, usize, &Network);

/// Plain evaluation with running statistics.
pub fn evaluate(net: &Network, scenes: &[Scene], head: Head) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(net.config.classes);
    for s in scenes {
        let (x, _) = batch(&[s])?;
        let mut sess = Session::new(&net.params, &[]);
        let x = sess.graph.constant(x);
        let f = net.forward(&mut sess, x, BnMode::Eval, head == Head::Sup)?;
        let pred = argmax_labels(sess.graph.value(f.head(head)?))?;
        cm.accumulate(&pred, &s.labels)?;
    }
    Ok(cm)
}

pub fn adapt_stream(net: &Network, stream: &[Scene], cfg: &AdaptConfig, seed: u64, run_id: &str) -> Result<AdaptReport> {
    adapt_stream_with(net, stream, cfg, seed, run_id, &mut |_, _, _| {})
}

/// Processes `stream` strictly one sample at a time: update on the sample,
/// then predict it and score the prediction. `probe` sees the model before
/// and after each sample.
pub fn adapt_stream_with(
    net: &Network,
    stream: &[Scene],
    cfg: &AdaptConfig,
    seed: u64,
    run_id: &str,
    probe: Probe<'_>,
) -> Result<AdaptReport> {
    let started = Instant::now();
    cfg.validate(net.config.image_size)?;
    if stream.is_empty() {
        return Err(Error::config("empty target stream"));
    }
    if !net.has_transformer() && !cfg.heads.single_head() {
        return Err(Error::config(format!(
            "head configuration {} needs a transfer head; this checkpoint has a single head (use UU)",
            cfg.heads
        )));
    }
    let size = net.config.image_size;
    let seeds = Seeds::new(seed);
    let mut order: Vec<usize> = (0..stream.len()).collect();
    if cfg.shuffle {
        order.shuffle(&mut seeds.stream(STREAM_ORDER));
    }
    let obj = Objective {
        method: cfg.method,
        k: cfg.k,
        metric: cfg.metric,
        tau: cfg.tau,
        photometric: &cfg.photometric,
        geometric: &cfg.geometric,
    };
    let infer_mode = match cfg.method {
        Method::None => BnMode::Eval,
        Method::BnStats => BnMode::Adapt,
        _ => cfg.inference_bn,
    };
    let update_sup = cfg.heads.update == Head::Sup;
    let infer_sup = cfg.heads.infer == Head::Sup;

    let mut work = net.clone();
    let mut sgd = Sgd::new(cfg.momentum);
    let mut cm = ConfusionMatrix::new(net.config.classes);
    let mut trace = Vec::with_capacity(stream.len());
    let mut events = Vec::new();
    let mut transfer_example = None;
    let mut previews = Vec::new();

    for (position, &sample) in order.iter().enumerate() {
        let scene = &stream[sample];
        if scene.size() != (size, size) || scene.image.shape()[0] != 3 || scene.labels.len() != size * size {
            return Err(Error::dim(
                "adapt_stream",
                format!("sample {sample} has shape {:?}, model expects [3, {size}, {size}]", scene.image.shape()),
            ));
        }
        probe(ProbePoint::Before, position, &work);
        let (images, _) = batch(&[scene])?;
        let mut loss = None;
        let mut skipped = false;
        if cfg.method.steps() {
            for it in 0..cfg.iterations {
                let mut rng = seeds.indexed(TRANSFORMS, (position * cfg.iterations + it) as u64);
                let (value, grads) = {
                    let mut sess = Session::new(&work.params, &cfg.groups);
                    let x = sess.graph.constant(images.clone());
                    let f = work.forward(&mut sess, x, BnMode::Adapt, update_sup)?;
                    let o = f.head(cfg.heads.update)?;
                    let mut m = SessionModel {
                        net: &work,
                        session: &mut sess,
                        mode: BnMode::Adapt,
                        head: cfg.heads.update,
                    };
                    let l = unsupervised_loss(&mut m, &images, o, &obj, &mut rng)?.expect("stepping method has a loss");
                    let value = sess.graph.value(l).item() as f64;
                    if value.is_finite() {
                        sess.graph.backward(l)?;
                    }
                    (value, sess.grads())
                };
                loss = Some(value);
                if !value.is_finite() {
                    skipped = true;
                    events.push(format!("sample {sample} (position {position}): non-finite loss {value}, update skipped"));
                    warn!(sample, position, "non-finite adaptation loss; update skipped");
                    break;
                }
                if let Err(e) = sgd.step(&mut work.params, &grads, cfg.lr) {
                    skipped = true;
                    events.push(format!("sample {sample} (position {position}): {e}, update skipped"));
                    warn!(sample, position, "non-finite gradient; update skipped");
                    break;
                }
            }
        }

        let (pred, transfer) = {
            let mut sess = Session::new(&work.params, &[]);
            let x = sess.graph.constant(images);
            let f = work.forward(&mut sess, x, infer_mode, infer_sup)?;
            let pred = argmax_labels(sess.graph.value(f.head(cfg.heads.infer)?))?;
            let transfer = f
                .transfer
                .first()
                .map(|&w| sess.graph.value(w).data().iter().map(|&v| v as f64).collect::<Vec<_>>());
            (pred, transfer)
        };
        cm.accumulate(&pred, &scene.labels)?;
        if position == 0 {
            transfer_example = transfer;
        }
        if position == 0 || position + 1 == order.len() {
            previews.push(Preview {
                sample,
                size: (size, size),
                truth: scene.labels.clone(),
                pred,
            });
        }
        let cumulative_miou = cm.miou()?;
        debug!(position, sample, cumulative_miou, "adapt");
        trace.push(TraceRow {
            run_id: run_id.to_string(),
            position,
            sample,
            cumulative_miou,
            loss,
            method: cfg.method,
            seed,
            skipped,
        });
        probe(ProbePoint::After, position, &work);
        if !cfg.continual {
            work = net.clone();
            sgd = Sgd::new(cfg.momentum);
        }
    }

    Ok(AdaptReport {
        run_id: run_id.to_string(),
        seed,
        config: cfg.clone(),
        checkpoint_hash: net.content_hash()?,
        trace,
        class_iou: cm.iou(),
        final_miou: cm.miou()?,
        confusion: cm,
        transfer_example,
        previews,
        hashes_before: net.params.group_hashes(),
        hashes_after: work.params.group_hashes(),
        events,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
