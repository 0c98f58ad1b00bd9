//! The six-layer SE(2,N) chain: lifting, three group correlations, a 1×1
//! group correlation with orientation projection, and a 1×1 output layer.
//!
//! Layers 1–5 carry batch norm (scale and shift per channel); layer 6 carries
//! a bias. With the default channel widths the weight counts match across
//! orientation samplings, and `N_4 · N` is constant.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernel_rotation::OperatorCache;
use crate::layers::{self, GroupKernelSet, LiftingKernelSet, Projection};
use crate::ops::{BatchNormMode, Padding};
use crate::tensor::{read_u32, Precision, RawTensor, Scalar, Tensor};

pub const LAYERS: usize = 6;
pub const DEFAULT_KERNEL_SIZES: [usize; LAYERS] = [5, 5, 5, 5, 1, 1];
pub const DEFAULT_INPUT_CHANNELS: usize = 3;
const WEIGHT_BUDGET: usize = 34_000;

/// Channel widths `(N_1 … N_6)` for an orientation count.
///
/// The five tabulated samplings use their published widths. Other counts keep
/// `N_4 · N ≈ 64`, `N_5 = 16`, `N_6 = 1` and pick the shared width of layers
/// 1–3 whose total weight count lands closest to the budget.
pub fn default_channels(orientations: usize) -> [usize; LAYERS] {
    match orientations {
        1 => [16, 16, 16, 64, 16, 1],
        2 => [13, 13, 13, 32, 16, 1],
        4 => [10, 10, 10, 16, 16, 1],
        8 => [8, 8, 8, 8, 16, 1],
        16 => [6, 6, 6, 4, 16, 1],
        n => {
            let n4 = ((64.0 / n as f64).round() as usize).max(1);
            (1..=64)
                .map(|c| [c, c, c, n4, 16, 1])
                .min_by_key(|ch| {
                    let total = weight_counts(n, DEFAULT_INPUT_CHANNELS, ch, &DEFAULT_KERNEL_SIZES)
                        .iter()
                        .sum::<usize>();
                    total.abs_diff(WEIGHT_BUDGET)
                })
                .expect("non-empty range")
        }
    }
}

fn mask_len(n: usize) -> usize {
    let c = (n as f64 - 1.0) / 2.0;
    let r = n as f64 / 2.0;
    (0..n * n)
        .filter(|&k| {
            let (dr, dq) = ((k / n) as f64 - c, (k % n) as f64 - c);
            (dr * dr + dq * dq).sqrt() <= r
        })
        .count()
}

/// Closed-form per-layer weight counts.
pub fn weight_counts(
    orientations: usize,
    input_channels: usize,
    channels: &[usize; LAYERS],
    kernel_sizes: &[usize; LAYERS],
) -> [usize; LAYERS] {
    let mut counts = [0; LAYERS];
    counts[0] = channels[0] * (mask_len(kernel_sizes[0]) * input_channels + 2);
    for l in 1..5 {
        counts[l] = channels[l] * (mask_len(kernel_sizes[l]) * orientations * channels[l - 1] + 2);
    }
    counts[5] = channels[5] * (mask_len(kernel_sizes[5]) * channels[4] + 1);
    counts
}

/// Output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Head {
    /// One logit per pixel per output channel, `[B, H', W', N_6]`.
    PerPixel,
    /// Global spatial max of the logit map, `[B, N_6]`.
    #[default]
    GlobalMax,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::PerPixel => "per-pixel",
            Head::GlobalMax => "global-max",
        })
    }
}

impl FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-pixel" => Ok(Head::PerPixel),
            "global-max" => Ok(Head::GlobalMax),
            other => Err(Error::InvalidArgument(format!("unknown head {other:?}"))),
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Projection::Max => "max",
            Projection::Mean => "mean",
        })
    }
}

impl FromStr for Projection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Projection::Max),
            "mean" => Ok(Projection::Mean),
            other => Err(Error::InvalidArgument(format!("unknown projection {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub orientations: usize,
    pub input_channels: usize,
    pub channels: [usize; LAYERS],
    pub kernel_sizes: [usize; LAYERS],
    /// 1-based layers followed by a 2×2 spatial max pool.
    pub pool_layers: Vec<usize>,
    pub precision: Precision,
    pub projection: Projection,
    pub head: Head,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl NetworkConfig {
    pub fn new(orientations: usize) -> Self {
        Self {
            orientations,
            input_channels: DEFAULT_INPUT_CHANNELS,
            channels: default_channels(orientations.max(1)),
            kernel_sizes: DEFAULT_KERNEL_SIZES,
            pool_layers: Vec::new(),
            precision: Precision::Single,
            projection: Projection::Max,
            head: Head::GlobalMax,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn with_pool_layers(mut self, layers: &[usize]) -> Self {
        self.pool_layers = layers.to_vec();
        self
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.orientations == 0 {
            return bad("number of orientations must be at least 1".into());
        }
        if self.input_channels == 0 || self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if let Some(&k) = self.kernel_sizes.iter().find(|&&k| k == 0 || k % 2 == 0) {
            return bad(format!("kernel sizes must be odd, got {k}"));
        }
        if self.kernel_sizes[5] != 1 {
            return bad("the output layer is a 1x1 correlation".into());
        }
        if let Some(&l) = self.pool_layers.iter().find(|&&l| !(1..=5).contains(&l)) {
            return bad(format!("pooling can follow layers 1-5, got {l}"));
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("batch norm epsilon must be positive and momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Spatial downscaling factor of the pooling stages.
    pub fn pool_factor(&self) -> usize {
        1 << self.pool_layers.len()
    }

    /// Cumulative kernel radius of the chain in input pixels.
    pub fn receptive_radius(&self) -> usize {
        let mut radius = 0;
        let mut stride = 1;
        for l in 0..LAYERS {
            radius += (self.kernel_sizes[l] - 1) / 2 * stride;
            if self.pool_layers.contains(&(l + 1)) {
                radius += stride;
                stride *= 2;
            }
        }
        radius
    }

    fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        s.push_str(&format!("orientations={}\n", self.orientations));
        s.push_str(&format!("input_channels={}\n", self.input_channels));
        s.push_str(&format!("channels={}\n", join(&self.channels)));
        s.push_str(&format!("kernel_sizes={}\n", join(&self.kernel_sizes)));
        s.push_str(&format!("pool_layers={}\n", join(&self.pool_layers)));
        s.push_str(&format!("precision={}\n", self.precision));
        s.push_str(&format!("projection={}\n", self.projection));
        s.push_str(&format!("head={}\n", self.head));
        s.push_str(&format!("bn_epsilon={:e}\n", self.bn_epsilon));
        s.push_str(&format!("bn_momentum={:e}\n", self.bn_momentum));
        s
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("config is missing {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {k}")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| x.parse().map_err(|_| Error::Format(format!("bad list value in {k}"))))
                .collect()
        };
        let arr = |k: &str| -> Result<[usize; LAYERS]> {
            list(k)?
                .try_into()
                .map_err(|_| Error::Format(format!("{k} needs {LAYERS} entries")))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {k}")))
        };
        let precision = match get("precision")?.as_str() {
            "single" => Precision::Single,
            "double" => Precision::Double,
            other => return Err(Error::Format(format!("bad precision {other:?}"))),
        };
        let cfg = Self {
            orientations: num("orientations")?,
            input_channels: num("input_channels")?,
            channels: arr("channels")?,
            kernel_sizes: arr("kernel_sizes")?,
            pool_layers: list("pool_layers")?,
            precision,
            projection: get("projection")?.parse()?,
            head: get("head")?.parse()?,
            bn_epsilon: float("bn_epsilon")?,
            bn_momentum: float("bn_momentum")?,
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}

/// Batch norm parameters and running statistics of one layer.
#[derive(Debug, Clone)]
pub struct BatchNormParams<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl<T: Scalar> BatchNormParams<T> {
    fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::full(&[channels], T::one()),
            shift: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Per-layer and total trainable weight counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightCounts {
    pub per_layer: [usize; LAYERS],
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: NetworkConfig,
    lifting: LiftingKernelSet<T>,
    /// Layers 2–5.
    group: Vec<GroupKernelSet<T>>,
    /// Layers 1–5.
    norms: Vec<BatchNormParams<T>>,
    /// `[1, 1, N_5, N_6]`.
    output_kernel: Tensor<T>,
    output_bias: Tensor<T>,
}

/// Node handles of one recorded forward pass.
pub struct ForwardPass {
    pub logits: NodeId,
    /// Trainable parameter nodes in [`Model::params_mut`] order.
    pub params: Vec<NodeId>,
    /// Batch norm nodes of layers 1–5.
    pub norms: Vec<NodeId>,
}

pub fn build_network<T: Scalar>(config: &NetworkConfig) -> Result<Model<T>> {
    Model::new(config.clone())
}

impl<T: Scalar> Model<T> {
    /// Builds a model with zero weights, unit batch-norm scale and zero shift.
    pub fn new(mut config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        config.precision = T::PRECISION;
        let mut cache = OperatorCache::default();
        let nn = config.orientations;
        let ch = config.channels;
        let lifting = LiftingKernelSet::zeros(cache.get(config.kernel_sizes[0], nn)?, config.input_channels, ch[0])?;
        let group = (1..5)
            .map(|l| GroupKernelSet::zeros(cache.get(config.kernel_sizes[l], nn)?, ch[l - 1], ch[l]))
            .collect::<Result<Vec<_>>>()?;
        let norms = (0..5).map(|l| BatchNormParams::new(ch[l])).collect();
        Ok(Self {
            lifting,
            group,
            norms,
            output_kernel: Tensor::zeros(&[1, 1, ch[4], ch[5]]),
            output_bias: Tensor::zeros(&[ch[5]]),
            config,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn lifting(&self) -> &LiftingKernelSet<T> {
        &self.lifting
    }

    pub fn group_layers(&self) -> &[GroupKernelSet<T>] {
        &self.group
    }

    pub fn norms(&self) -> &[BatchNormParams<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [BatchNormParams<T>] {
        &mut self.norms
    }

    pub fn output_kernel(&self) -> &Tensor<T> {
        &self.output_kernel
    }

    pub fn output_bias(&self) -> &Tensor<T> {
        &self.output_bias
    }

    pub fn count_weights(&self) -> WeightCounts {
        let mut per_layer = [0; LAYERS];
        per_layer[0] = self.lifting.weights().len() + 2 * self.lifting.c_out();
        for (l, g) in self.group.iter().enumerate() {
            per_layer[l + 1] = g.weights().len() + 2 * g.c_out();
        }
        per_layer[5] = self.output_kernel.len() + self.output_bias.len();
        WeightCounts {
            per_layer,
            total: per_layer.iter().sum(),
        }
    }

    /// Named trainable parameters in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("layer1.weight".to_string(), self.lifting.weights())];
        for (l, g) in self.group.iter().enumerate() {
            out.push((format!("layer{}.weight", l + 2), g.weights()));
        }
        for (l, bn) in self.norms.iter().enumerate() {
            out.push((format!("layer{}.bn.scale", l + 1), &bn.scale));
            out.push((format!("layer{}.bn.shift", l + 1), &bn.shift));
        }
        out.push(("layer6.weight".to_string(), &self.output_kernel));
        out.push(("layer6.bias".to_string(), &self.output_bias));
        out
    }

    /// Mutable trainable parameters, same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![self.lifting.weights_mut()];
        for g in &mut self.group {
            out.push(g.weights_mut());
        }
        for bn in &mut self.norms {
            out.push(&mut bn.scale);
            out.push(&mut bn.shift);
        }
        out.push(&mut self.output_kernel);
        out.push(&mut self.output_bias);
        out
    }

    /// Draws kernel weights from `N(0, 2 / fan_in)`, fan-in counted over mask
    /// positions, orientations and input channels. Batch norm is reset to the
    /// identity and the output bias to zero.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |t: &mut Tensor<T>, fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in t.data_mut() {
                *v = T::from_f64_lossy(normal.sample(&mut rng));
            }
        };
        let m = self.lifting.operator().mask().len();
        let c_in = self.lifting.c_in();
        fill(self.lifting.weights_mut(), m * c_in);
        for g in &mut self.group {
            let fan_in = g.operator().mask().len() * g.orientations() * g.c_in();
            fill(g.weights_mut(), fan_in);
        }
        let c5 = self.config.channels[4];
        fill(&mut self.output_kernel, c5);
        for (l, bn) in self.norms.iter_mut().enumerate() {
            *bn = BatchNormParams::new(self.config.channels[l]);
        }
        self.output_bias = Tensor::zeros(self.output_bias.shape());
    }

    /// Records a forward pass of `input` (`[B, H, W, C_in]`) on `graph`.
    pub fn forward_graph(&self, graph: &mut Graph<T>, input: NodeId, mode: BatchNormMode) -> Result<ForwardPass> {
        let shape = graph.value(input).shape().to_vec();
        let [_, h, w, c] = shape[..] else {
            return Err(Error::Shape(format!("network input must be [B,H,W,C], got {shape:?}")));
        };
        if c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        let factor = self.config.pool_factor();
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by the pooling factor {factor}"
            )));
        }
        let mut params = Vec::with_capacity(2 + self.group.len() + 2 * self.norms.len());
        let mut norms = Vec::with_capacity(self.norms.len());

        let lw = graph.param(self.lifting.weights().clone());
        params.push(lw);
        let gw: Vec<NodeId> = self
            .group
            .iter()
            .map(|g| graph.param(g.weights().clone()))
            .collect();
        params.extend(&gw);
        let bn_nodes: Vec<(NodeId, NodeId)> = self
            .norms
            .iter()
            .map(|bn| (graph.param(bn.scale.clone()), graph.param(bn.shift.clone())))
            .collect();
        for &(s, b) in &bn_nodes {
            params.push(s);
            params.push(b);
        }
        let ok = graph.param(self.output_kernel.clone());
        let ob = graph.param(self.output_bias.clone());
        params.push(ok);
        params.push(ob);

        let mut x = layers::lift_node(graph, input, lw, &self.lifting)?;
        for l in 0..5 {
            if l > 0 {
                x = layers::group_node(graph, x, gw[l - 1], &self.group[l - 1])?;
            }
            let bn = &self.norms[l];
            x = graph.batch_norm(
                x,
                bn_nodes[l].0,
                bn_nodes[l].1,
                self.config.bn_epsilon,
                mode,
                &bn.running_mean,
                &bn.running_var,
            )?;
            norms.push(x);
            x = graph.relu(x)?;
            if self.config.pool_layers.contains(&(l + 1)) {
                x = layers::se2_max_pool_node(graph, x, 2)?;
            }
        }
        let x = layers::project_node(graph, x, self.config.projection)?;
        let x = graph.correlate2d(x, ok, Padding::SameZero, 1)?;
        let mut logits = graph.add_channel_bias(x, ob)?;
        if self.config.head == Head::GlobalMax {
            logits = graph.global_max_pool(logits)?;
        }
        Ok(ForwardPass { logits, params, norms })
    }

    /// Inference-mode logits for a batch `[B, H, W, C_in]`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_mode(batch, BatchNormMode::Inference)
    }

    pub fn forward_mode(&self, batch: &Tensor<T>, mode: BatchNormMode) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let input = graph.constant(batch.clone());
        let pass = self.forward_graph(&mut graph, input, mode)?;
        Ok(graph.value(pass.logits).clone())
    }

    /// Folds the batch statistics of a training pass into the running
    /// statistics.
    pub fn update_running_stats(&mut self, graph: &Graph<T>, pass: &ForwardPass) {
        let mom = self.config.bn_momentum;
        for (bn, &node) in self.norms.iter_mut().zip(&pass.norms) {
            if let Some((mean, var)) = graph.batch_norm_stats(node) {
                for (r, &m) in bn.running_mean.iter_mut().zip(mean) {
                    *r = (1.0 - mom) * *r + mom * m;
                }
                for (r, &v) in bn.running_var.iter_mut().zip(var) {
                    *r = (1.0 - mom) * *r + mom * v;
                }
            }
        }
    }

    fn running_stat_tensors(&self) -> Vec<(String, Tensor<f64>)> {
        let mut out = Vec::new();
        for (l, bn) in self.norms.iter().enumerate() {
            let c = bn.running_mean.len();
            out.push((
                format!("layer{}.bn.running_mean", l + 1),
                Tensor::new(&[c], bn.running_mean.clone()).expect("channel vector"),
            ));
            out.push((
                format!("layer{}.bn.running_var", l + 1),
                Tensor::new(&[c], bn.running_var.clone()).expect("channel vector"),
            ));
        }
        out
    }

    /// Serializes to the `SE2M` format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_VERSION);
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let mut block = |name: &str, bytes: Vec<u8>| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&bytes);
        };
        for (name, t) in self.named_params() {
            block(&name, t.to_se2t_bytes());
        }
        for (name, t) in self.running_stat_tensors() {
            block(&name, t.to_se2t_bytes());
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let config = read_config_block(r)?;

        let mut blocks = BTreeMap::new();
        loop {
            let mut len_bytes = [0u8; 4];
            match r.read(&mut len_bytes[..1])? {
                0 => break,
                _ => r
                    .read_exact(&mut len_bytes[1..])
                    .map_err(|_| Error::Format("truncated block header".into()))?,
            }
            let name_len = u32::from_le_bytes(len_bytes) as usize;
            if name_len > 256 {
                return Err(Error::Format(format!("implausible block name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| Error::Format("truncated block name".into()))?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
            let raw = RawTensor::read(r)?;
            if blocks.insert(name.clone(), raw).is_some() {
                return Err(Error::Format(format!("duplicate block {name}")));
            }
        }

        let mut model = Model::<T>::new(config)?;
        let mut take = |name: &str, expect: &[usize]| -> Result<RawTensor> {
            let raw = blocks
                .remove(name)
                .ok_or_else(|| Error::Format(format!("model file is missing {name}")))?;
            if raw.shape != expect {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, expected {expect:?}",
                    raw.shape
                )));
            }
            Ok(raw)
        };
        let names: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut loaded = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            loaded.push(take(name, shape)?.into_tensor::<T>());
        }
        for (slot, t) in model.params_mut().into_iter().zip(loaded) {
            *slot = t;
        }
        for l in 0..5 {
            let c = model.config.channels[l];
            let mean: Tensor<f64> = take(&format!("layer{}.bn.running_mean", l + 1), &[c])?.into_tensor();
            let var: Tensor<f64> = take(&format!("layer{}.bn.running_var", l + 1), &[c])?.into_tensor();
            model.norms[l].running_mean = mean.into_data();
            model.norms[l].running_var = var.into_data();
        }
        if let Some(extra) = blocks.keys().next() {
            return Err(Error::Format(format!("unexpected block {extra}")));
        }
        Ok(model)
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Reads the header and configuration of a model stream, leaving `r` at the
/// first parameter block.
fn read_config_block<R: Read>(r: &mut R) -> Result<NetworkConfig> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a model header".into()))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format(format!("bad model magic {magic:?}")));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)
        .map_err(|_| Error::Format("file too short for a model header".into()))?;
    if version[0] != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {}", version[0])));
    }
    let len = read_u32(r)? as usize;
    let mut text = Vec::new();
    r.take(len as u64).read_to_end(&mut text)?;
    if text.len() != len {
        return Err(Error::Format("truncated config block".into()));
    }
    let text = String::from_utf8(text).map_err(|_| Error::Format("config is not UTF-8".into()))?;
    NetworkConfig::from_text(&text)
}

/// The configuration stored in a model file, without loading its weights.
pub fn read_model_config(path: &Path) -> Result<NetworkConfig> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_config_block(&mut f)
}

pub const MODEL_MAGIC: &[u8; 4] = b"SE2M";
pub const MODEL_VERSION: u8 = 1;

pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    Model::load(path)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_channel_columns() {
        assert_eq!(NetworkConfig::new(4).channels, [10, 10, 10, 16, 16, 1]);
        assert_eq!(NetworkConfig::new(16).channels, [6, 6, 6, 4, 16, 1]);
    }

    #[test]
    fn closed_form_matches_tensor_sizes() {
        for n in [1, 2, 3, 4, 8] {
            let cfg = NetworkConfig::new(n);
            let model = Model::<f32>::new(cfg.clone()).unwrap();
            let closed = weight_counts(n, cfg.input_channels, &cfg.channels, &cfg.kernel_sizes);
            assert_eq!(model.count_weights().per_layer, closed);
        }
    }

    #[test]
    fn untabulated_orientation_counts_stay_near_budget() {
        for n in [3, 5, 6, 12] {
            let cfg = NetworkConfig::new(n);
            let total: usize = weight_counts(n, 3, &cfg.channels, &cfg.kernel_sizes).iter().sum();
            assert!(total.abs_diff(WEIGHT_BUDGET) < 6000, "N={n} total {total}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Model::<f32>::new(NetworkConfig::new(0)).is_err());
        let mut cfg = NetworkConfig::new(4);
        cfg.kernel_sizes[1] = 4;
        assert!(Model::<f32>::new(cfg).is_err());
        assert!(Model::<f32>::new(NetworkConfig::new(4).with_pool_layers(&[6])).is_err());
    }

    #[test]
    fn receptive_radius_accounts_for_pooling() {
        assert_eq!(NetworkConfig::new(4).receptive_radius(), 8);
        let pooled = NetworkConfig::new(4).with_pool_layers(&[1]);
        assert_eq!(pooled.receptive_radius(), 2 + 1 + 3 * 4);
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = NetworkConfig::new(8).with_pool_layers(&[1, 2]);
        cfg.head = Head::PerPixel;
        cfg.projection = Projection::Mean;
        assert_eq!(NetworkConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn zero_weight_model_outputs_bias() {
        let mut model = Model::<f64>::new(NetworkConfig::new(2).with_head(Head::PerPixel)).unwrap();
        model.output_bias.data_mut()[0] = 0.75;
        let x = Tensor::from_fn(&[2, 6, 6, 3], |i| (i as f64 * 0.37).sin());
        let y = model.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 6, 6, 1]);
        assert!(y.data().iter().all(|&v| v == 0.75));
    }
}
