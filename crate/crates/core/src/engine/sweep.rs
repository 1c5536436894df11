use std::fmt;

use serde::{Deserialize, Serialize};
use tracing::info;

use super::{adapt_stream, AdaptReport, Trainer};
use crate::config::{AdaptConfig, HeadConfig, RunConfig, SweepConfig};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::losses::Method;
use crate::model::Network;
use crate::rng::Seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    /// Update/inference head configurations.
    Heads,
    /// Transformations per step, per method.
    K,
    /// Weight of the unsupervised pretraining term.
    Lambda,
    /// Decoder depth.
    Layers,
    /// Consistency discrepancy.
    Metric,
    /// Feature tap feeding the decoder.
    Tap,
}

impl SweepKind {
    pub const ALL: [SweepKind; 6] = [
        SweepKind::Heads,
        SweepKind::K,
        SweepKind::Lambda,
        SweepKind::Layers,
        SweepKind::Metric,
        SweepKind::Tap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Heads => "heads",
            SweepKind::K => "K",
            SweepKind::Lambda => "lambda",
            SweepKind::Layers => "layers",
            SweepKind::Metric => "metric",
            SweepKind::Tap => "tap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        SweepKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown sweep kind {s:?}")))
    }

    /// Whether each value needs its own pretrained network.
    pub fn needs_pretraining(self) -> bool {
        matches!(self, SweepKind::Lambda | SweepKind::Layers | SweepKind::Tap)
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One cell: final mIoU per adaptation seed and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub row: String,
    /// Second key for two-way tables (`K=4`); empty otherwise.
    pub col: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    /// Every underlying run, in row order then seed order.
    pub reports: Vec<AdaptReport>,
}

impl SweepTable {
    fn new(kind: SweepKind, seeds: &[u64]) -> Self {
        SweepTable {
            kind,
            seeds: seeds.to_vec(),
            rows: Vec::new(),
            reports: Vec::new(),
        }
    }

    fn run_cell(&mut self, net: &Network, stream: &[Scene], cfg: &AdaptConfig, row: String, col: String) -> Result<()> {
        let mut per_seed = Vec::with_capacity(self.seeds.len());
        for &seed in &self.seeds {
            let id = if col.is_empty() {
                format!("{}-{row}-seed{seed}", self.kind)
            } else {
                format!("{}-{row}-{col}-seed{seed}", self.kind)
            };
            let report = adapt_stream(net, stream, cfg, seed, &id)?;
            info!(run = %id, miou = report.final_miou, "sweep cell");
            per_seed.push(report.final_miou);
            self.reports.push(report);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        self.rows.push(SweepRow { row, col, per_seed, mean });
        Ok(())
    }

    pub fn get(&self, row: &str, col: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.row == row && r.col == col)
    }
}

/// Sweeps that only vary adaptation settings of one checkpoint. The metric
/// sweep always adapts with the consistency objective.
pub fn adaptation_sweep(
    kind: SweepKind,
    net: &Network,
    stream: &[Scene],
    base: &AdaptConfig,
    sweep: &SweepConfig,
) -> Result<SweepTable> {
    if sweep.seeds.is_empty() {
        return Err(Error::config("sweep needs at least one seed"));
    }
    let mut table = SweepTable::new(kind, &sweep.seeds);
    match kind {
        SweepKind::Heads => {
            if !net.has_transformer() {
                return Err(Error::config("head sweep needs a checkpoint with a transfer head"));
            }
            for heads in HeadConfig::ALL {
                let cfg = AdaptConfig { heads, ..base.clone() };
                table.run_cell(net, stream, &cfg, heads.to_string(), String::new())?;
            }
        }
        SweepKind::K => {
            if let Some(m) = sweep
                .k_methods
                .iter()
                .find(|m| !matches!(m, Method::MinEntropy | Method::MaxSquares | Method::TransConsistency))
            {
                return Err(Error::config(format!("K sweep does not support {}", m.name())));
            }
            for &method in &sweep.k_methods {
                for &k in &sweep.k_values {
                    let cfg = AdaptConfig { method, k, ..base.clone() };
                    table.run_cell(net, stream, &cfg, method.name().into(), format!("K={k}"))?;
                }
            }
        }
        SweepKind::Metric => {
            for &metric in &sweep.metrics {
                let cfg = AdaptConfig {
                    method: Method::TransConsistency,
                    metric,
                    ..base.clone()
                };
                table.run_cell(net, stream, &cfg, metric.name().into(), String::new())?;
            }
        }
        k => {
            return Err(Error::config(format!("{k} sweep retrains the network; use pretrain_sweep")));
        }
    }
    Ok(table)
}

/// Sweeps over pretraining settings: one network per value, each adapted with
/// `run.adapt` under every sweep seed.
pub fn pretrain_sweep(kind: SweepKind, run: &RunConfig, source: &[Scene], stream: &[Scene]) -> Result<SweepTable> {
    let sweep = &run.sweep;
    let mut table = SweepTable::new(kind, &sweep.seeds);
    let variants: Vec<(String, RunConfig)> = match kind {
        SweepKind::Lambda => sweep
            .lambdas
            .iter()
            .map(|&l| {
                let mut r = run.clone();
                r.pretrain.lambda = l;
                (format!("{l}"), r)
            })
            .collect(),
        SweepKind::Layers | SweepKind::Tap => {
            if run.model.transformer.is_none() || run.pretrain.no_transformer {
                return Err(Error::config(format!("{kind} sweep needs the transfer head")));
            }
            let mut out = Vec::new();
            if kind == SweepKind::Layers {
                for &n in &sweep.layers {
                    let mut r = run.clone();
                    r.model.transformer.as_mut().expect("checked").layers = n;
                    out.push((n.to_string(), r));
                }
            } else {
                for &tap in &sweep.taps {
                    let mut r = run.clone();
                    r.model.transformer.as_mut().expect("checked").tap = tap;
                    out.push((tap.name().to_string(), r));
                }
            }
            out
        }
        k => return Err(Error::config(format!("{k} sweep does not retrain; use adaptation_sweep"))),
    };
    for (label, r) in variants {
        r.validate()?;
        info!(kind = %kind, value = %label, "pretraining sweep variant");
        let seeds = Seeds::new(r.seed);
        let net = Network::new(r.pretrain.model(&r.model), &seeds)?;
        let mut trainer = Trainer::new(net, r.pretrain.clone(), seeds)?;
        trainer.run(source, &mut |_| {})?;
        table.run_cell(&trainer.net, stream, &r.adapt, label, String::new())?;
    }
    Ok(table)
}
