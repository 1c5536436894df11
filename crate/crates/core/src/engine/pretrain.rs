use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use super::{batch, unsupervised_loss, Objective, SessionModel};
use crate::config::TrainConfig;
use crate::container::Container;
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, total_loss};
use crate::model::{BnMode, Head, Network};
use crate::optim::{poly_lr, Sgd};
use crate::params::{ParamGroup, Session};
use crate::rng::{Seeds, DROPOUT, STREAM_ORDER, TRANSFORMS};
use crate::tensor::Tensor;

const STEP_KEY: &str = "train_step";
const VELOCITY_PREFIX: &str = "optim/velocity/";
const LOSS_TAIL: usize = 8;

/// One row of the training-loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub unsup: f64,
}

/// Supervised pretraining over every parameter group with momentum SGD.
pub struct Trainer {
    pub net: Network,
    pub config: TrainConfig,
    pub seeds: Seeds,
    /// Index of the next step to run.
    pub step: usize,
    sgd: Sgd<f32>,
    tail: Vec<f64>,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig, seeds: Seeds) -> Result<Self> {
        config.validate(net.config.image_size)?;
        Ok(Trainer {
            sgd: Sgd::new(config.momentum),
            net,
            config,
            seeds,
            step: 0,
            tail: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(c: &Container, config: TrainConfig, seeds: Seeds) -> Result<Self> {
        let net = Network::from_container(c)?;
        let mut t = Trainer::new(net, config, seeds)?;
        t.step = match c.meta.get(STEP_KEY) {
            Some(s) => s
                .parse()
                .map_err(|_| Error::State(format!("bad {STEP_KEY} value {s:?}")))?,
            None => return Err(Error::State("checkpoint carries no training state".into())),
        };
        let ids: Vec<_> = t.net.params.ids().collect();
        for id in ids {
            let name = format!("{VELOCITY_PREFIX}{}", t.net.params.get(id).name);
            if let Some(v) = c.get(&name) {
                t.sgd.set_velocity(id, v.data().to_vec());
            }
        }
        Ok(t)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.config.epochs * n.div_ceil(self.config.batch_size)
    }

    /// Network plus optimizer state, loadable by [`Network::load`] and [`Trainer::resume`].
    pub fn checkpoint(&self) -> Result<Container> {
        let mut c = self.net.to_container()?;
        c.meta.insert(STEP_KEY.into(), self.step.to_string());
        for (id, e) in self.net.params.iter() {
            if let Some(v) = self.sgd.velocity(id) {
                c.push(format!("{VELOCITY_PREFIX}{}", e.name), Tensor::new(e.value.shape().to_vec(), v.to_vec())?);
            }
        }
        Ok(c)
    }

    /// Runs all remaining steps.
    pub fn run(&mut self, data: &[Scene], on_row: &mut dyn FnMut(&LossRow)) -> Result<Vec<LossRow>> {
        let total = self.total_steps(data.len());
        self.run_until(data, total, on_row)
    }

    /// Runs steps until `stop` (exclusive) or the end of the schedule.
    pub fn run_until(&mut self, data: &[Scene], stop: usize, on_row: &mut dyn FnMut(&LossRow)) -> Result<Vec<LossRow>> {
        if data.is_empty() {
            return Err(Error::config("pretraining needs at least one scene"));
        }
        let stop = stop.min(self.total_steps(data.len()));
        let per_epoch = data.len().div_ceil(self.config.batch_size);
        let mut order: Option<(usize, Vec<usize>)> = None;
        let mut rows = Vec::new();
        while self.step < stop {
            let epoch = self.step / per_epoch;
            if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..data.len()).collect();
                perm.shuffle(&mut self.seeds.indexed(STREAM_ORDER, epoch as u64));
                order = Some((epoch, perm));
            }
            let perm = &order.as_ref().expect("set above").1;
            let j = self.step % per_epoch;
            let bs = self.config.batch_size;
            let picked: Vec<&Scene> = perm[j * bs..((j + 1) * bs).min(data.len())]
                .iter()
                .map(|&i| &data[i])
                .collect();
            let row = self.train_step(&picked, epoch, data.len())?;
            if self.step.is_multiple_of(50) {
                info!(epoch, step = row.step, lr = row.lr, loss = row.loss, "pretrain");
            } else {
                debug!(epoch, step = row.step, loss = row.loss, "pretrain");
            }
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    fn train_step(&mut self, scenes: &[&Scene], epoch: usize, n: usize) -> Result<LossRow> {
        let cfg = &self.config;
        let step = self.step;
        let lr = poly_lr(cfg.lr, step, self.total_steps(n), cfg.lr_power);
        let (images, labels) = batch(scenes)?;
        let obj = Objective {
            method: cfg.unsup,
            k: cfg.k,
            metric: cfg.metric,
            tau: cfg.tau,
            photometric: &cfg.photometric,
            geometric: &cfg.geometric,
        };
        let mut dropout = self.seeds.indexed(DROPOUT, step as u64);
        let mut transforms = self.seeds.indexed(TRANSFORMS, step as u64);
        let (row, grads, stats) = {
            let net = &self.net;
            let mut sess = Session::new(&net.params, &ParamGroup::ALL).with_dropout(&mut dropout);
            let x = sess.graph.constant(images.clone());
            let f = net.forward(&mut sess, x, BnMode::Train, true)?;
            let o_s = f.o_s.unwrap_or(f.o_u);
            let ce = cross_entropy(&mut sess.graph, o_s, &labels)?;
            let unsup = if cfg.lambda == 0.0 {
                None
            } else {
                let mut m = SessionModel {
                    net,
                    session: &mut sess,
                    mode: BnMode::Train,
                    head: Head::Unsup,
                };
                unsupervised_loss(&mut m, &images, f.o_u, &obj, &mut transforms)?
            };
            let total = total_loss(&mut sess.graph, ce, unsup, cfg.lambda)?;
            let value = |v| sess.graph.value(v).item() as f64;
            let row = LossRow {
                epoch,
                step,
                lr,
                loss: value(total),
                ce: value(ce),
                unsup: unsup.map(value).unwrap_or(0.0),
            };
            if !row.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pretraining loss {} at step {step} (epoch {epoch}, lr {lr:.3e}); recent losses {:?}",
                    row.loss, self.tail
                )));
            }
            sess.graph.backward(total)?;
            (row, sess.grads(), f.batch_stats)
        };
        self.sgd.step(&mut self.net.params, &grads, lr).map_err(|e| {
            Error::NonFinite(format!("{e} at step {step} (lr {lr:.3e}); recent losses {:?}", self.tail))
        })?;
        self.net.update_running(&stats)?;
        self.tail.push(row.loss);
        if self.tail.len() > LOSS_TAIL {
            self.tail.remove(0);
        }
        self.step += 1;
        Ok(row)
    }
}
