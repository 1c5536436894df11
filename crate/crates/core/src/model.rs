//! Convolutional segmentation network with an optional transfer head.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{BatchStats, Var};
use crate::container::Container;
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::params::{normal_tensor, ParamGroup, ParamId, ParamStore, Session};
use crate::rng::Seeds;
use crate::tensor::{Element, Tensor};
use crate::transformer::{supervised_logits, Tap, TransformerConfig, TransformerHead};

/// How batch normalization picks its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Batch statistics; the caller folds them into the running estimates.
    Train,
    /// Running statistics.
    Eval,
    /// Statistics of the current input only; running estimates are untouched.
    Adapt,
}

/// Which output an objective reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Head {
    /// Logits of the convolutional head, `o_u`.
    #[serde(rename = "U")]
    Unsup,
    /// Logits after the transfer matrix, `o_s`.
    #[serde(rename = "S")]
    Sup,
}

impl Head {
    pub fn letter(self) -> char {
        match self {
            Head::Unsup => 'U',
            Head::Sup => 'S',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub classes: usize,
    pub widths: [usize; 4],
    pub strides: [usize; 4],
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub transformer: Option<TransformerConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            classes: NUM_CLASSES,
            widths: [16, 32, 32, 32],
            strides: [1, 2, 2, 1],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            transformer: Some(TransformerConfig::default()),
        }
    }
}

impl ModelConfig {
    pub fn without_transformer() -> Self {
        ModelConfig {
            transformer: None,
            ..Self::default()
        }
    }

    pub fn output_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let stride = self.output_stride();
        if self.classes < 2 || self.image_size == 0 || !self.image_size.is_multiple_of(stride) {
            return Err(Error::config(format!(
                "image size {} must be a positive multiple of the output stride {stride}, classes >= 2",
                self.image_size
            )));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(Error::config("zero width or stride"));
        }
        if let Some(t) = &self.transformer {
            t.validate()?;
        }
        Ok(())
    }

    /// `(channels, height, width)` of a tap for one image.
    pub fn tap_shape(&self, tap: Tap) -> (usize, usize, usize) {
        let mut size = self.image_size;
        let mut dims = [(0, 0); 4];
        for i in 0..4 {
            size /= self.strides[i];
            dims[i] = (self.widths[i], size);
        }
        let (c, s) = match tap {
            Tap::Block1 => dims[0],
            Tap::Block2 => dims[1],
            Tap::Block3 => dims[2],
            Tap::Block4 => dims[3],
            Tap::Logits => (self.classes, self.image_size),
        };
        (c, s, s)
    }
}

/// Running batch-norm estimates of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
    pub tracked: bool,
}

#[derive(Debug, Clone)]
struct Block {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: usize,
}

/// Everything a forward pass produced.
#[derive(Debug, Clone)]
pub struct Forward<E> {
    /// Outputs of the four blocks.
    pub blocks: [Var; 4],
    /// Low-resolution logits before upsampling.
    pub coarse: Var,
    pub o_u: Var,
    /// Present when the transfer head ran.
    pub o_s: Option<Var>,
    pub transfer: Vec<Var>,
    /// Per-layer batch mean and unbiased variance in [`BnMode::Train`].
    pub batch_stats: Vec<(Vec<E>, Vec<E>)>,
}

impl<E> Forward<E> {
    pub fn head(&self, head: Head) -> Result<Var> {
        match head {
            Head::Unsup => Ok(self.o_u),
            Head::Sup => self
                .o_s
                .ok_or_else(|| Error::State("supervised head requested but the transfer head did not run".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network<E: Element = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<E>,
    pub running: Vec<RunningStats<E>>,
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
    transformer: Option<TransformerHead>,
}

impl Network<f32> {
    /// Fresh network. Backbone and decoder draw from separate init streams,
    /// so the backbone is identical with or without a decoder.
    pub fn new(config: ModelConfig, seeds: &Seeds) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeds.indexed(crate::rng::INIT, 0);
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (i, (&cout, &stride)) in config.widths.iter().zip(&config.strides).enumerate() {
            let w = normal_tensor([cout, cin, 3, 3], (2.0 / (9 * cin) as f64).sqrt(), &mut rng);
            blocks.push(Block {
                weight: store.add(format!("block{}.conv", i + 1), ParamGroup::Conv, w),
                gamma: store.add(format!("block{}.bn.gamma", i + 1), ParamGroup::Bn, Tensor::ones([cout])),
                beta: store.add(format!("block{}.bn.beta", i + 1), ParamGroup::Bn, Tensor::zeros([cout])),
                stride,
            });
            cin = cout;
        }
        let w = normal_tensor([config.classes, cin, 1, 1], (1.0 / cin as f64).sqrt(), &mut rng);
        let head_w = store.add("head.weight", ParamGroup::Head, w);
        let head_b = store.add("head.bias", ParamGroup::Head, Tensor::zeros([config.classes]));
        let transformer = match &config.transformer {
            Some(t) => {
                let mut trng = seeds.indexed(crate::rng::INIT, 1);
                let (c, _, _) = config.tap_shape(t.tap);
                Some(TransformerHead::build(&mut store, t.clone(), c, config.classes, &mut trng)?)
            }
            None => None,
        };
        let running = config
            .widths
            .iter()
            .map(|&c| RunningStats {
                mean: vec![0.0; c],
                var: vec![1.0; c],
                tracked: false,
            })
            .collect();
        Ok(Network {
            config,
            params: store,
            running,
            blocks,
            head_w,
            head_b,
            transformer,
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        self.params.write_into(&mut c);
        for (i, r) in self.running.iter().enumerate() {
            c.push(format!("running/{i}/mean"), Tensor::new([r.mean.len()], r.mean.clone())?);
            c.push(format!("running/{i}/var"), Tensor::new([r.var.len()], r.var.clone())?);
        }
        c.meta.insert("model_config".into(), serde_json::to_string(&self.config)?);
        let tracked: Vec<bool> = self.running.iter().map(|r| r.tracked).collect();
        c.meta.insert("running_tracked".into(), serde_json::to_string(&tracked)?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg = c
            .meta
            .get("model_config")
            .ok_or_else(|| Error::State("checkpoint has no model_config".into()))?;
        let config: ModelConfig = serde_json::from_str(cfg)?;
        let mut net = Network::new(config, &Seeds::new(0))?;
        net.params.read_from(c)?;
        let tracked: Vec<bool> = match c.meta.get("running_tracked") {
            Some(t) => serde_json::from_str(t)?,
            None => vec![false; net.running.len()],
        };
        for (i, r) in net.running.iter_mut().enumerate() {
            for (key, slot) in [("mean", &mut r.mean), ("var", &mut r.var)] {
                let name = format!("running/{i}/{key}");
                let t = c.get(&name).ok_or_else(|| Error::State(format!("checkpoint lacks {name}")))?;
                if t.numel() != slot.len() {
                    return Err(Error::shape("checkpoint", t.shape(), &[slot.len()]));
                }
                slot.copy_from_slice(t.data());
            }
            r.tracked = tracked.get(i).copied().unwrap_or(false);
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_container()?.to_bytes())))
    }
}

impl<E: Element> Network<E> {
    pub fn has_transformer(&self) -> bool {
        self.transformer.is_some()
    }

    pub fn transformer(&self) -> Option<&TransformerHead> {
        self.transformer.as_ref()
    }

    pub fn cast<F: Element>(&self) -> Network<F> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.iter().map(|v| F::of(v.f64())).collect(),
                    var: r.var.iter().map(|v| F::of(v.f64())).collect(),
                    tracked: r.tracked,
                })
                .collect(),
            blocks: self.blocks.clone(),
            head_w: self.head_w,
            head_b: self.head_b,
            transformer: self.transformer.clone(),
        }
    }

    /// Runs the network on `x: [B, 3, H, W]`. The transfer head runs only
    /// when `with_transfer` is set and the network has one.
    pub fn forward(&self, s: &mut Session<'_, E>, x: Var, mode: BnMode, with_transfer: bool) -> Result<Forward<E>> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::dim("forward", format!("expected [B,3,H,W] images, got {shape:?}")));
        }
        if !shape[2].is_multiple_of(self.config.output_stride()) || !shape[3].is_multiple_of(self.config.output_stride()) {
            return Err(Error::dim(
                "forward",
                format!("spatial size {shape:?} not divisible by the output stride"),
            ));
        }
        let mut h = x;
        let mut outs = Vec::with_capacity(4);
        let mut batch_stats = Vec::new();
        for (block, running) in self.blocks.iter().zip(&self.running) {
            let w = s.param(block.weight);
            h = s.graph.conv2d(h, w, None, block.stride, 1)?;
            let (gamma, beta) = (s.param(block.gamma), s.param(block.beta));
            let stats = match mode {
                BnMode::Train | BnMode::Adapt => BatchStats::Batch,
                BnMode::Eval => {
                    if !running.tracked {
                        return Err(Error::State(
                            "eval-mode batch norm needs running statistics; pretrain or load a checkpoint first".into(),
                        ));
                    }
                    BatchStats::Running {
                        mean: &running.mean,
                        var: &running.var,
                    }
                }
            };
            let (y, st) = s.graph.batchnorm2d(h, gamma, beta, stats, self.config.bn_eps)?;
            if mode == BnMode::Train {
                batch_stats.extend(st);
            }
            h = s.graph.relu(y);
            outs.push(h);
        }
        let (hw, hb) = (s.param(self.head_w), s.param(self.head_b));
        let coarse = s.graph.conv2d(h, hw, Some(hb), 1, 0)?;
        let o_u = s.graph.upsample_bilinear(coarse, shape[2], shape[3])?;
        let blocks = [outs[0], outs[1], outs[2], outs[3]];
        let (o_s, transfer) = match (&self.transformer, with_transfer) {
            (Some(t), true) => {
                let feat = match t.config.tap {
                    Tap::Block1 => blocks[0],
                    Tap::Block2 => blocks[1],
                    Tap::Block3 => blocks[2],
                    Tap::Block4 => blocks[3],
                    Tap::Logits => o_u,
                };
                let transfer = t.transfer_matrices(s, feat)?;
                let o_s = if t.config.identity_transfer {
                    o_u
                } else {
                    supervised_logits(&mut s.graph, &transfer, o_u)?
                };
                (Some(o_s), transfer)
            }
            _ => (None, Vec::new()),
        };
        Ok(Forward {
            blocks,
            coarse,
            o_u,
            o_s,
            transfer,
            batch_stats,
        })
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running(&mut self, batch_stats: &[(Vec<E>, Vec<E>)]) -> Result<()> {
        if batch_stats.len() != self.running.len() {
            return Err(Error::State(format!(
                "{} batch statistics for {} normalization layers",
                batch_stats.len(),
                self.running.len()
            )));
        }
        let m = E::of(self.config.bn_momentum);
        for (r, (mean, var)) in self.running.iter_mut().zip(batch_stats) {
            if r.tracked {
                for (a, &b) in r.mean.iter_mut().zip(mean) {
                    *a = (E::one() - m) * *a + m * b;
                }
                for (a, &b) in r.var.iter_mut().zip(var) {
                    *a = (E::one() - m) * *a + m * b;
                }
            } else {
                r.mean.clone_from(mean);
                r.var.clone_from(var);
                r.tracked = true;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(batch: usize) -> Tensor<f32> {
        Tensor::from_fn([batch, 3, 64, 64], |i| ((i * 7919) % 255) as f32 / 255.0)
    }

    #[test]
    fn shapes_through_the_network() {
        let net = Network::new(ModelConfig::default(), &Seeds::new(1)).unwrap();
        let mut s = Session::new(&net.params, &[]);
        let x = s.graph.constant(image(2));
        let f = net.forward(&mut s, x, BnMode::Train, true).unwrap();
        assert_eq!(s.graph.shape(f.blocks[2]), &[2, 32, 16, 16]);
        assert_eq!(s.graph.shape(f.o_u), &[2, 5, 64, 64]);
        assert_eq!(s.graph.shape(f.o_s.unwrap()), &[2, 5, 64, 64]);
        assert_eq!(f.transfer.len(), 2);
        assert_eq!(f.batch_stats.len(), 4);
    }

    #[test]
    fn eval_without_running_stats_fails() {
        let net = Network::new(ModelConfig::without_transformer(), &Seeds::new(1)).unwrap();
        let mut s = Session::new(&net.params, &[]);
        let x = s.graph.constant(image(1));
        assert!(matches!(net.forward(&mut s, x, BnMode::Eval, false), Err(Error::State(_))));
    }

    #[test]
    fn backbone_independent_of_decoder() {
        let a = Network::new(ModelConfig::default(), &Seeds::new(4)).unwrap();
        let b = Network::new(ModelConfig::without_transformer(), &Seeds::new(4)).unwrap();
        for g in [ParamGroup::Conv, ParamGroup::Bn, ParamGroup::Head] {
            assert_eq!(a.params.group_hash(g), b.params.group_hash(g));
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut net = Network::new(ModelConfig::default(), &Seeds::new(2)).unwrap();
        net.running[0].mean[0] = 0.25;
        net.running[0].tracked = true;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        net.save(&path).unwrap();
        let back = Network::load(&path).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!(back.running, net.running);
        assert_eq!(back.content_hash().unwrap(), net.content_hash().unwrap());
    }

    #[test]
    fn wrong_channel_count_is_reported() {
        let net = Network::new(ModelConfig::without_transformer(), &Seeds::new(1)).unwrap();
        let mut s = Session::new(&net.params, &[]);
        let x = s.graph.constant(Tensor::zeros([1, 4, 64, 64]));
        assert!(net.forward(&mut s, x, BnMode::Train, false).is_err());
    }
}
