//! The micro network: layer configuration, forward pass with cached
//! activations, hand-derived backward pass, loss, optimizer, gradient
//! checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use layers::{BatchNorm, BnCache, Conv, Dense, Param};

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, LayerCheck};
pub use loss::{bce_loss, LossValue, PROB_EPS};
pub use optim::sgd_momentum_step;

/// One entry of a network configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize },
    Conv3x3 { channels: usize },
    Batchnorm,
    Relu,
    Sigmoid,
    GapGmpConcat,
    Dropout {
        #[serde(default = "default_dropout")]
        p: f64,
    },
    /// BN-ReLU-conv3x3 stages, each fed the concatenation of the block input
    /// and every earlier stage output.
    DenseBlock { depth: usize, growth: usize },
    /// BN-ReLU-conv1x1 down to `floor(compression * m)` maps, then 2x2 average pooling.
    Transition {
        #[serde(default = "default_compression")]
        compression: f64,
    },
}

fn default_dropout() -> f64 {
    0.6
}

fn default_compression() -> f64 {
    0.5
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv3x3 { .. } => "conv3x3",
            LayerSpec::Batchnorm => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::GapGmpConcat => "gap_gmp_concat",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::DenseBlock { .. } => "dense_block",
            LayerSpec::Transition { .. } => "transition",
        }
    }
}

/// Feature maps leaving a transition that follows `m` maps.
pub fn transition_channels(m: usize, compression: f64) -> usize {
    (compression * m as f64).floor() as usize
}

/// Layer-to-layer feature reuses inside a dense block of depth `depth`.
pub fn dense_block_connections(depth: usize) -> usize {
    depth * (depth + 1) / 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::desk_default(1, 16)
    }
}

impl NetworkConfig {
    /// conv3x3(8) -> dense_block(L=2, growth 4) -> transition(0.5) -> GAP+GMP
    /// -> BN -> dropout(0.6) -> dense(1) -> sigmoid.
    pub fn desk_default(channels: usize, patch_size: usize) -> Self {
        NetworkConfig {
            input: InputShape {
                channels,
                height: patch_size,
                width: patch_size,
            },
            layers: vec![
                LayerSpec::Conv3x3 { channels: 8 },
                LayerSpec::DenseBlock { depth: 2, growth: 4 },
                LayerSpec::Transition { compression: 0.5 },
                LayerSpec::GapGmpConcat,
                LayerSpec::Batchnorm,
                LayerSpec::Dropout { p: 0.6 },
                LayerSpec::Dense { units: 1 },
                LayerSpec::Sigmoid,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Act {
    fn batched(self, n: usize) -> Vec<usize> {
        match self {
            Act::Map { c, h, w } => vec![n, c, h, w],
            Act::Flat(f) => vec![n, f],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    bn: BatchNorm,
    conv: Conv,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Dense(Dense),
    Conv(Conv),
    BatchNorm(BatchNorm),
    Relu,
    Sigmoid,
    GapGmp,
    Dropout(f64),
    DenseBlock(Vec<Stage>),
    Transition { bn: BatchNorm, conv: Conv },
}

fn conv_params<'a>(c: &'a Conv, w: &'static str, b: &'static str) -> Vec<(&'static str, &'a Param)> {
    let mut v = vec![(w, &c.weight)];
    v.extend(c.bias.as_ref().map(|p| (b, p)));
    v
}

fn conv_params_mut(c: &mut Conv) -> Vec<&mut Param> {
    let mut v = vec![&mut c.weight];
    v.extend(c.bias.as_mut());
    v
}

impl Layer {
    fn params(&self) -> Vec<(&'static str, &Param)> {
        match self {
            Layer::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
            Layer::Conv(c) => conv_params(c, "weight", "bias"),
            Layer::BatchNorm(bn) => vec![("gamma", &bn.gamma), ("beta", &bn.beta)],
            Layer::DenseBlock(stages) => stages
                .iter()
                .flat_map(|s| {
                    let mut v = vec![("bn.gamma", &s.bn.gamma), ("bn.beta", &s.bn.beta)];
                    v.extend(conv_params(&s.conv, "conv.weight", "conv.bias"));
                    v
                })
                .collect(),
            Layer::Transition { bn, conv } => {
                let mut v = vec![("bn.gamma", &bn.gamma), ("bn.beta", &bn.beta)];
                v.extend(conv_params(conv, "conv.weight", "conv.bias"));
                v
            }
            Layer::Relu | Layer::Sigmoid | Layer::GapGmp | Layer::Dropout(_) => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv(c) => conv_params_mut(c),
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::DenseBlock(stages) => stages
                .iter_mut()
                .flat_map(|s| {
                    let mut v = vec![&mut s.bn.gamma, &mut s.bn.beta];
                    v.extend(conv_params_mut(&mut s.conv));
                    v
                })
                .collect(),
            Layer::Transition { bn, conv } => {
                let mut v = vec![&mut bn.gamma, &mut bn.beta];
                v.extend(conv_params_mut(conv));
                v
            }
            Layer::Relu | Layer::Sigmoid | Layer::GapGmp | Layer::Dropout(_) => vec![],
        }
    }

    fn batch_norms(&self) -> Vec<&BatchNorm> {
        match self {
            Layer::BatchNorm(bn) => vec![bn],
            Layer::DenseBlock(stages) => stages.iter().map(|s| &s.bn).collect(),
            Layer::Transition { bn, .. } => vec![bn],
            _ => vec![],
        }
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        match self {
            Layer::BatchNorm(bn) => vec![bn],
            Layer::DenseBlock(stages) => stages.iter_mut().map(|s| &mut s.bn).collect(),
            Layer::Transition { bn, .. } => vec![bn],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct StageCache {
    input: Tensor,
    bn: BnCache,
    act: Tensor,
}

#[derive(Debug, Clone)]
enum LayerCache {
    None,
    Input(Tensor),
    Output(Tensor),
    BatchNorm(BnCache),
    GapGmp { in_shape: Vec<usize>, argmax: Vec<usize> },
    Dropout(Vec<f64>),
    DenseBlock(Vec<StageCache>),
    Transition { bn: BnCache, act: Tensor, pooled_from: Vec<usize> },
}

/// Activation record of one train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    batch: usize,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Dropout masks recorded by this pass, in layer order.
    pub fn dropout_masks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .filter_map(|c| match c {
                LayerCache::Dropout(m) => Some(m.as_slice()),
                _ => None,
            })
            .collect()
    }
}

enum Pass<'a> {
    Train(&'a mut Rng),
    /// Batch statistics, dropout masks taken from an earlier train pass.
    Replay(&'a ForwardCache),
    Eval,
}

/// Per-parameter gradients, laid out like [`Network::named_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| l.params().iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect())
                .collect(),
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape("gradient sets cover different layers".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.len() != b.len() {
                return Err(Error::Shape("gradient sets differ in parameter count".into()));
            }
            for (ta, tb) in a.iter_mut().zip(b) {
                if ta.shape() != tb.shape() {
                    return Err(Error::Shape(format!(
                        "gradient shapes differ: {:?} vs {:?}",
                        ta.shape(),
                        tb.shape()
                    )));
                }
                for (x, y) in ta.data_mut().iter_mut().zip(tb.data()) {
                    *x += factor * y;
                }
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(Tensor::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().flatten().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<Layer>,
    mode: Mode,
    version: u64,
}

/// Validates the shape chain and initializes parameters.
pub fn build_network(config: &NetworkConfig, rng: &mut Rng) -> Result<Network> {
    Network::build(config, rng)
}

impl Network {
    pub fn build(config: &NetworkConfig, rng: &mut Rng) -> Result<Network> {
        let InputShape {
            channels,
            height,
            width,
        } = config.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!("input shape must be positive, got {:?}", config.input)));
        }
        let mut act = Act::Map {
            c: channels,
            h: height,
            w: width,
        };
        let mut layers = Vec::with_capacity(config.layers.len());
        let n_layers = config.layers.len();
        for (i, spec) in config.layers.iter().enumerate() {
            let bad = |msg: String| Error::Config(format!("layer {i} ({}): {msg}", spec.name()));
            let (layer, next) = match (*spec, act) {
                (LayerSpec::Conv3x3 { channels: out }, Act::Map { c, h, w }) => {
                    if out == 0 {
                        return Err(bad("needs at least one output channel".into()));
                    }
                    let feeds_bn = matches!(
                        config.layers.get(i + 1),
                        Some(LayerSpec::Batchnorm | LayerSpec::DenseBlock { .. } | LayerSpec::Transition { .. })
                    );
                    (Layer::Conv(Conv::new(c, out, 3, !feeds_bn, rng)), Act::Map { c: out, h, w })
                }
                (LayerSpec::Dense { units }, Act::Flat(f)) => {
                    if units == 0 {
                        return Err(bad("needs at least one unit".into()));
                    }
                    (Layer::Dense(Dense::new(f, units, rng)), Act::Flat(units))
                }
                (LayerSpec::Batchnorm, a) => {
                    let c = match a {
                        Act::Map { c, .. } => c,
                        Act::Flat(f) => f,
                    };
                    (Layer::BatchNorm(BatchNorm::new(c)), a)
                }
                (LayerSpec::Relu, a) => (Layer::Relu, a),
                (LayerSpec::Sigmoid, a) => {
                    if i + 1 != n_layers {
                        return Err(bad("sigmoid must be the final layer".into()));
                    }
                    if a != Act::Flat(1) {
                        return Err(bad(format!("sigmoid head needs exactly one unit, got {a:?}")));
                    }
                    (Layer::Sigmoid, a)
                }
                (LayerSpec::GapGmpConcat, Act::Map { c, .. }) => (Layer::GapGmp, Act::Flat(2 * c)),
                (LayerSpec::Dropout { p }, a) => {
                    if !(0.0..1.0).contains(&p) {
                        return Err(bad(format!("dropout probability {p} outside [0, 1)")));
                    }
                    (Layer::Dropout(p), a)
                }
                (LayerSpec::DenseBlock { depth, growth }, Act::Map { c, h, w }) => {
                    if depth == 0 || growth == 0 {
                        return Err(bad("depth and growth must be at least 1".into()));
                    }
                    let stages = (0..depth)
                        .map(|s| {
                            let cin = c + s * growth;
                            Stage {
                                bn: BatchNorm::new(cin),
                                conv: Conv::new(cin, growth, 3, false, rng),
                            }
                        })
                        .collect();
                    (
                        Layer::DenseBlock(stages),
                        Act::Map {
                            c: c + depth * growth,
                            h,
                            w,
                        },
                    )
                }
                (LayerSpec::Transition { compression }, Act::Map { c, h, w }) => {
                    if !(compression > 0.0 && compression <= 1.0) {
                        return Err(bad(format!("compression {compression} outside (0, 1]")));
                    }
                    let out = transition_channels(c, compression);
                    if out == 0 {
                        return Err(bad(format!("{c} input maps compress to zero maps")));
                    }
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(bad(format!("pooling needs even spatial size, got {h}x{w}")));
                    }
                    (
                        Layer::Transition {
                            bn: BatchNorm::new(c),
                            conv: Conv::new(c, out, 1, false, rng),
                        },
                        Act::Map {
                            c: out,
                            h: h / 2,
                            w: w / 2,
                        },
                    )
                }
                (_, a) => return Err(bad(format!("cannot accept input of shape {a:?}"))),
            };
            layers.push(layer);
            act = next;
        }
        if !matches!(config.layers.last(), Some(LayerSpec::Sigmoid)) {
            return Err(Error::Config("network must end in a one-unit sigmoid layer".into()));
        }
        Ok(Network {
            config: config.clone(),
            layers,
            mode: Mode::Train,
            version: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn input_shape(&self) -> InputShape {
        self.config.input
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// `(layer index, qualified name, parameter)` in gradient order.
    pub fn named_params(&self) -> Vec<(usize, String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let kind = self.config.layers[i].name();
                l.params()
                    .into_iter()
                    .map(move |(n, p)| (i, format!("{i}.{kind}.{n}"), p))
            })
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<Vec<&mut Param>> {
        self.version += 1;
        self.layers.iter_mut().map(Layer::params_mut).collect()
    }

    /// BN running statistics as `(mean, var)` pairs in layer order.
    pub fn running_stats(&self) -> Vec<(&[f64], &[f64])> {
        self.layers
            .iter()
            .flat_map(|l| l.batch_norms())
            .map(|bn| (bn.running_mean.as_slice(), bn.running_var.as_slice()))
            .collect()
    }

    pub(crate) fn running_stats_mut(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.batch_norms_mut())
            .map(|bn| (&mut bn.running_mean, &mut bn.running_var))
            .collect()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let InputShape {
            channels,
            height,
            width,
        } = self.config.input;
        match batch.shape() {
            [n, c, h, w] if *c == channels && *h == height && *w == width => Ok(*n),
            s => Err(Error::Shape(format!(
                "batch shape {s:?} does not match network input [N, {channels}, {height}, {width}]"
            ))),
        }
    }

    /// Runs the network. In train mode dropout samples fresh masks from
    /// `rng`, batch norm uses batch statistics and its running estimates
    /// are updated; in eval mode the pass is deterministic and `rng` is
    /// untouched.
    pub fn forward(&mut self, batch: &Tensor, rng: &mut Rng) -> Result<(Tensor, ForwardCache)> {
        match self.mode {
            Mode::Eval => {
                let (p, _) = self.run(batch, Pass::Eval)?;
                Ok((
                    p,
                    ForwardCache {
                        version: u64::MAX,
                        batch: batch.shape()[0],
                        layers: vec![],
                    },
                ))
            }
            Mode::Train => {
                let (p, cache) = self.run(batch, Pass::Train(rng))?;
                self.absorb_batch_stats(&cache);
                Ok((p, cache))
            }
        }
    }

    /// Eval-mode probabilities `[N, 1]`; never mutates the network.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.run(batch, Pass::Eval)?.0)
    }

    /// Which side of each nondifferentiable point a pass landed on: the sign
    /// of every ReLU input and the winner of every max pooling.
    pub fn branch_pattern(&self, cache: &ForwardCache) -> (Vec<bool>, Vec<usize>) {
        let mut signs = Vec::new();
        let mut winners = Vec::new();
        let mut push = |t: &Tensor| signs.extend(t.data().iter().map(|&v| v > 0.0));
        for (layer, lc) in self.layers.iter().zip(&cache.layers) {
            match (layer, lc) {
                (Layer::Relu, LayerCache::Input(x)) => push(x),
                (_, LayerCache::DenseBlock(stages)) => stages.iter().for_each(|s| push(&s.act)),
                (_, LayerCache::Transition { act, .. }) => push(act),
                (_, LayerCache::GapGmp { argmax, .. }) => winners.extend_from_slice(argmax),
                _ => {}
            }
        }
        (signs, winners)
    }

    /// Train-mode forward that replays the dropout masks of `cache` and
    /// recomputes batch statistics, without touching running estimates.
    pub fn forward_replay(&self, batch: &Tensor, cache: &ForwardCache) -> Result<(Tensor, ForwardCache)> {
        if cache.layers.len() != self.layers.len() || cache.batch != self.check_batch(batch)? {
            return Err(Error::StaleCache("replay cache does not match this network/batch".into()));
        }
        self.run(batch, Pass::Replay(cache))
    }

    fn absorb_batch_stats(&mut self, cache: &ForwardCache) {
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            match (layer, lc) {
                (Layer::BatchNorm(bn), LayerCache::BatchNorm(c)) => {
                    bn.absorb(c, c.xhat.len() / c.mean.len());
                }
                (Layer::DenseBlock(stages), LayerCache::DenseBlock(sc)) => {
                    for (st, c) in stages.iter_mut().zip(sc) {
                        let count = c.bn.xhat.len() / c.bn.mean.len();
                        st.bn.absorb(&c.bn, count);
                    }
                }
                (Layer::Transition { bn, .. }, LayerCache::Transition { bn: c, .. }) => {
                    let count = c.xhat.len() / c.mean.len();
                    bn.absorb(c, count);
                }
                _ => {}
            }
        }
    }

    fn run(&self, batch: &Tensor, mut pass: Pass<'_>) -> Result<(Tensor, ForwardCache)> {
        let n = self.check_batch(batch)?;
        let record = !matches!(pass, Pass::Eval);
        let mut caches = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = match layer {
                Layer::Dense(d) => (d.forward(&x), LayerCache::Input(x)),
                Layer::Conv(c) => (c.forward(&x), LayerCache::Input(x)),
                Layer::BatchNorm(bn) => {
                    if record {
                        let (y, c) = bn.forward_train(&x);
                        (y, LayerCache::BatchNorm(c))
                    } else {
                        (bn.forward_eval(&x), LayerCache::None)
                    }
                }
                Layer::Relu => (layers::relu(&x), LayerCache::Input(x)),
                Layer::Sigmoid => {
                    let y = layers::sigmoid(&x);
                    (y.clone(), LayerCache::Output(y))
                }
                Layer::GapGmp => {
                    let (y, argmax) = layers::gap_gmp(&x);
                    (
                        y,
                        LayerCache::GapGmp {
                            in_shape: x.shape().to_vec(),
                            argmax,
                        },
                    )
                }
                Layer::Dropout(p) => match &mut pass {
                    Pass::Eval => (x, LayerCache::None),
                    Pass::Train(rng) => {
                        let mask = layers::dropout_mask(x.len(), *p, rng);
                        (layers::apply_mask(&x, &mask), LayerCache::Dropout(mask))
                    }
                    Pass::Replay(prev) => match &prev.layers[i] {
                        LayerCache::Dropout(mask) if mask.len() == x.len() => {
                            (layers::apply_mask(&x, mask), LayerCache::Dropout(mask.clone()))
                        }
                        _ => {
                            return Err(Error::StaleCache(format!("no dropout mask recorded for layer {i}")))
                        }
                    },
                },
                Layer::DenseBlock(stages) => {
                    let mut feats = x;
                    let mut sc = Vec::with_capacity(stages.len());
                    for st in stages {
                        let (t, bnc) = if record {
                            let (t, c) = st.bn.forward_train(&feats);
                            (t, Some(c))
                        } else {
                            (st.bn.forward_eval(&feats), None)
                        };
                        let act = layers::relu(&t);
                        let out = st.conv.forward(&act);
                        let next = layers::concat_channels(&feats, &out);
                        if let Some(bn) = bnc {
                            sc.push(StageCache {
                                input: feats,
                                bn,
                                act,
                            });
                        }
                        feats = next;
                    }
                    (feats, LayerCache::DenseBlock(sc))
                }
                Layer::Transition { bn, conv } => {
                    let (t, bnc) = if record {
                        let (t, c) = bn.forward_train(&x);
                        (t, Some(c))
                    } else {
                        (bn.forward_eval(&x), None)
                    };
                    let act = layers::relu(&t);
                    let conv_out = conv.forward(&act);
                    let pooled_from = conv_out.shape().to_vec();
                    let y = layers::avg_pool2(&conv_out);
                    let cache = match bnc {
                        Some(bn) => LayerCache::Transition {
                            bn,
                            act,
                            pooled_from,
                        },
                        None => LayerCache::None,
                    };
                    (y, cache)
                }
            };
            if !y.is_finite() {
                return Err(Error::Numeric(format!(
                    "layer {i} ({}) produced a non-finite activation",
                    self.config.layers[i].name()
                )));
            }
            if record {
                caches.push(cache);
            }
            x = y;
        }
        debug_assert_eq!(x.shape(), Act::Flat(1).batched(n).as_slice());
        Ok((
            x,
            ForwardCache {
                version: self.version,
                batch: n,
                layers: caches,
            },
        ))
    }

    /// Gradients of the loss with respect to every trainable parameter,
    /// given `grad_output = dLoss/dProbabilities` (`[N, 1]`).
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Tensor) -> Result<Gradients> {
        if cache.version != self.version || cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache(
                "cache was not produced by a train-mode forward of the current parameters".into(),
            ));
        }
        if grad_output.shape() != [cache.batch, 1] {
            return Err(Error::Shape(format!(
                "loss gradient shape {:?} does not match batch [{}, 1]",
                grad_output.shape(),
                cache.batch
            )));
        }
        let mut grads: Vec<Vec<Tensor>> = vec![vec![]; self.layers.len()];
        let mut dy = grad_output.clone();
        for (i, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let dx = match (layer, lc) {
                (Layer::Dense(d), LayerCache::Input(x)) => {
                    let (dx, dw, db) = d.backward(x, &dy);
                    grads[i] = vec![dw, db];
                    dx
                }
                (Layer::Conv(c), LayerCache::Input(x)) => {
                    let (dx, dw, db) = c.backward(x, &dy);
                    grads[i] = std::iter::once(dw).chain(db).collect();
                    dx
                }
                (Layer::BatchNorm(bn), LayerCache::BatchNorm(c)) => {
                    let (dx, dg, db) = bn.backward(c, &dy);
                    grads[i] = vec![dg, db];
                    dx
                }
                (Layer::Relu, LayerCache::Input(x)) => layers::relu_backward(x, &dy),
                (Layer::Sigmoid, LayerCache::Output(y)) => layers::sigmoid_backward(y, &dy),
                (Layer::GapGmp, LayerCache::GapGmp { in_shape, argmax }) => {
                    layers::gap_gmp_backward(in_shape, argmax, &dy)
                }
                (Layer::Dropout(_), LayerCache::Dropout(mask)) => layers::apply_mask(&dy, mask),
                (Layer::DenseBlock(stages), LayerCache::DenseBlock(sc)) => {
                    let mut g = Vec::with_capacity(stages.len() * 4);
                    let mut dfeat = dy;
                    for (st, c) in stages.iter().zip(sc).rev() {
                        let (dprev, dout) = layers::split_channels(&dfeat, st.conv.inputs);
                        let (dact, dw, db) = st.conv.backward(&c.act, &dout);
                        let dt = layers::relu_backward(&c.act, &dact);
                        let (din, dgamma, dbeta) = st.bn.backward(&c.bn, &dt);
                        debug_assert_eq!(din.shape(), c.input.shape());
                        dfeat = dprev.add(&din)?;
                        g.push(vec![dgamma, dbeta, dw].into_iter().chain(db).collect::<Vec<_>>());
                    }
                    grads[i] = g.into_iter().rev().flatten().collect();
                    dfeat
                }
                (
                    Layer::Transition { bn, conv },
                    LayerCache::Transition {
                        bn: bnc,
                        act,
                        pooled_from,
                    },
                ) => {
                    let dconv = layers::avg_pool2_backward(pooled_from, &dy);
                    let (dact, dw, db) = conv.backward(act, &dconv);
                    let dt = layers::relu_backward(act, &dact);
                    let (dx, dgamma, dbeta) = bn.backward(bnc, &dt);
                    grads[i] = vec![dgamma, dbeta, dw].into_iter().chain(db).collect();
                    dx
                }
                _ => {
                    return Err(Error::StaleCache(format!(
                        "layer {i} has no train-mode activation record"
                    )))
                }
            };
            dy = dx;
        }
        let grads = Gradients { layers: grads };
        if !grads.is_finite() {
            return Err(Error::Numeric("backward pass produced a non-finite gradient".into()));
        }
        Ok(grads)
    }
}

/// Stacks `[C, H, W]` patches into an `[N, C, H, W]` batch.
pub fn stack_batch<'a>(patches: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for p in patches {
        match &shape {
            None => shape = Some(p.shape().to_vec()),
            Some(s) if s.as_slice() != p.shape() => {
                return Err(Error::Shape(format!(
                    "cannot batch patches of shape {s:?} and {:?}",
                    p.shape()
                )))
            }
            _ => {}
        }
        data.extend_from_slice(p.data());
        n += 1;
    }
    let mut shape = shape.ok_or_else(|| Error::Shape("cannot batch zero patches".into()))?;
    shape.insert(0, n);
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig::desk_default(1, 8)
    }

    #[test]
    fn desk_default_is_small() {
        let net = Network::build(&NetworkConfig::default(), &mut Rng::new(0)).unwrap();
        assert!(net.param_count() < 10_000, "{}", net.param_count());
    }

    #[test]
    fn transition_after_twelve_maps_emits_six() {
        let cfg = NetworkConfig {
            input: InputShape {
                channels: 4,
                height: 4,
                width: 4,
            },
            layers: vec![
                LayerSpec::DenseBlock { depth: 2, growth: 4 },
                LayerSpec::Transition { compression: 0.5 },
                LayerSpec::GapGmpConcat,
                LayerSpec::Dense { units: 1 },
                LayerSpec::Sigmoid,
            ],
        };
        let net = Network::build(&cfg, &mut Rng::new(0)).unwrap();
        // GAP+GMP doubles the six transition maps.
        let dense_in = net.named_params().iter().find(|(_, n, _)| n == "3.dense.weight").unwrap().2;
        assert_eq!(dense_in.value.shape(), &[1, 12]);
        assert_eq!(transition_channels(12, 0.5), 6);
        assert_eq!(transition_channels(7, 0.5), 3);
        assert_eq!(dense_block_connections(3), 6);
    }

    #[test]
    fn shape_chain_break_names_layer() {
        let cfg = NetworkConfig {
            input: InputShape {
                channels: 1,
                height: 4,
                width: 4,
            },
            layers: vec![LayerSpec::Dense { units: 1 }, LayerSpec::Sigmoid],
        };
        let err = Network::build(&cfg, &mut Rng::new(0)).unwrap_err().to_string();
        assert!(err.contains("layer 0 (dense)"), "{err}");

        let cfg = NetworkConfig {
            input: cfg.input,
            layers: vec![LayerSpec::GapGmpConcat, LayerSpec::Dense { units: 2 }, LayerSpec::Sigmoid],
        };
        let err = Network::build(&cfg, &mut Rng::new(0)).unwrap_err().to_string();
        assert!(err.contains("layer 2 (sigmoid)"), "{err}");
    }

    #[test]
    fn zero_weights_give_one_half() {
        let mut net = Network::build(&tiny_config(), &mut Rng::new(3)).unwrap();
        for layer in net.params_mut() {
            for p in layer {
                let shape = p.value.shape().to_vec();
                p.value = Tensor::zeros(&shape);
            }
        }
        net.set_mode(Mode::Eval);
        let mut rng = Rng::new(1);
        let batch = Tensor::from_fn(&[3, 1, 8, 8], |_| rng.uniform());
        let p = net.predict(&batch).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut net = Network::build(&tiny_config(), &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(1);
        let batch = Tensor::from_fn(&[4, 1, 8, 8], |_| rng.uniform());
        net.forward(&batch, &mut rng).unwrap();
        net.set_mode(Mode::Eval);
        let a = net.forward(&batch, &mut rng).unwrap().0;
        let b = net.forward(&batch, &mut Rng::new(99)).unwrap().0;
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let mut net = Network::build(&tiny_config(), &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(1);
        let batch = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.uniform());
        let (_, cache) = net.forward(&batch, &mut rng).unwrap();
        let grads = Gradients::zeros_like(&net);
        sgd_momentum_step(&mut net, &grads, 0.1, 0.0).unwrap();
        let err = net.backward(&cache, &Tensor::zeros(&[2, 1])).unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)));

        net.set_mode(Mode::Eval);
        let (_, eval_cache) = net.forward(&batch, &mut rng).unwrap();
        assert!(matches!(
            net.backward(&eval_cache, &Tensor::zeros(&[2, 1])),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let mut net = Network::build(&tiny_config(), &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(1);
        let batch = Tensor::from_fn(&[3, 1, 8, 8], |_| rng.uniform());
        let (_, cache) = net.forward(&batch, &mut rng).unwrap();
        let g = net.backward(&cache, &Tensor::zeros(&[3, 1])).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut net = Network::build(&tiny_config(), &mut Rng::new(3)).unwrap();
        let before: Vec<Vec<f64>> = net.running_stats().iter().map(|(m, _)| m.to_vec()).collect();
        let mut rng = Rng::new(1);
        let batch = Tensor::from_fn(&[3, 1, 8, 8], |_| rng.uniform());
        net.forward(&batch, &mut rng).unwrap();
        let after: Vec<Vec<f64>> = net.running_stats().iter().map(|(m, _)| m.to_vec()).collect();
        assert_ne!(before, after);
        assert!(net.running_stats().iter().all(|(_, v)| v.iter().all(|&x| x > 0.0)));
    }

    #[test]
    fn layer_spec_serde_uses_kind_tags() {
        let text = serde_json::to_string(&LayerSpec::DenseBlock { depth: 2, growth: 4 }).unwrap();
        assert_eq!(text, r#"{"kind":"dense_block","depth":2,"growth":4}"#);
        let d: LayerSpec = serde_json::from_str(r#"{"kind":"dropout"}"#).unwrap();
        assert_eq!(d, LayerSpec::Dropout { p: 0.6 });
    }
}
