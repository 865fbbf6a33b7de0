//! The full network: a noise-estimation sub-network whose level map is
//! concatenated with the noisy input and fed to two parallel branches (a
//! u-shaped branch with pooling/upsampling and a branch of dilated
//! convolutions), fused by one final convolution.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::nn::{self, Activation, BatchNormState, ConvGeometry, ConvParams, Mode};
use crate::noise::GaussianSampler;
use crate::ops;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Shape, Tensor};

/// Dilation rates of the dilated branch, first to last layer.
pub const LOWER_DILATIONS: [usize; 12] = [1, 2, 3, 4, 5, 6, 5, 4, 3, 2, 1, 1];
pub const ESTIMATOR_CONVS: usize = 7;
pub const BRANCH_CONVS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Pool,
    Upsample,
    Activation(Activation),
    BatchNorm,
    SkipSource,
    SkipJoin,
}

/// One entry of a sub-network description.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub dilation: usize,
    /// Output channels of a convolution; 0 for other kinds.
    pub channels: usize,
    /// For joins, the index of the matching skip source in the same list.
    pub skip_partner: Option<usize>,
}

impl LayerSpec {
    fn simple(kind: LayerKind) -> Self {
        LayerSpec { kind, kernel: 0, dilation: 0, channels: 0, skip_partner: None }
    }

    pub fn conv(channels: usize, dilation: usize) -> Self {
        LayerSpec { kind: LayerKind::Conv, kernel: 3, dilation, channels, skip_partner: None }
    }

    pub fn pool() -> Self {
        LayerSpec { kernel: 2, ..Self::simple(LayerKind::Pool) }
    }

    pub fn upsample() -> Self {
        Self::simple(LayerKind::Upsample)
    }

    pub fn bn() -> Self {
        Self::simple(LayerKind::BatchNorm)
    }

    pub fn relu() -> Self {
        Self::simple(LayerKind::Activation(Activation::Relu))
    }

    pub fn tanh() -> Self {
        Self::simple(LayerKind::Activation(Activation::Tanh))
    }

    pub fn skip_source() -> Self {
        Self::simple(LayerKind::SkipSource)
    }

    pub fn skip_join(partner: usize) -> Self {
        LayerSpec { skip_partner: Some(partner), ..Self::simple(LayerKind::SkipJoin) }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LayerKind::Conv => write!(f, "conv:{}:{}:{}", self.kernel, self.dilation, self.channels),
            LayerKind::Pool => write!(f, "pool"),
            LayerKind::Upsample => write!(f, "up"),
            LayerKind::Activation(Activation::Relu) => write!(f, "relu"),
            LayerKind::Activation(Activation::Tanh) => write!(f, "tanh"),
            LayerKind::BatchNorm => write!(f, "bn"),
            LayerKind::SkipSource => write!(f, "src"),
            LayerKind::SkipJoin => write!(f, "join:{}", self.skip_partner.unwrap_or(usize::MAX)),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad layer spec `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| parts.get(i).and_then(|p| p.parse::<usize>().ok()).ok_or_else(bad);
        Ok(match parts[0] {
            "conv" if parts.len() == 4 => {
                LayerSpec { kind: LayerKind::Conv, kernel: num(1)?, dilation: num(2)?, channels: num(3)?, skip_partner: None }
            }
            "pool" => LayerSpec::pool(),
            "up" => LayerSpec::upsample(),
            "relu" => LayerSpec::relu(),
            "tanh" => LayerSpec::tanh(),
            "bn" => LayerSpec::bn(),
            "src" => LayerSpec::skip_source(),
            "join" if parts.len() == 2 => LayerSpec::skip_join(num(1)?),
            _ => return Err(bad()),
        })
    }
}

pub fn layers_to_string(layers: &[LayerSpec]) -> String {
    layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn layers_from_str(s: &str) -> Result<Vec<LayerSpec>> {
    s.split(',').map(str::parse).collect()
}

/// conv -> BN -> ReLU
fn conv_block(layers: &mut Vec<LayerSpec>, channels: usize, dilation: usize) {
    layers.extend([LayerSpec::conv(channels, dilation), LayerSpec::bn(), LayerSpec::relu()]);
}

/// Seven convolutions with one pool/upsample pair and one skip around them,
/// ending in Tanh.
pub fn estimator_layers(width: usize, out_channels: usize) -> Vec<LayerSpec> {
    let mut l = Vec::new();
    conv_block(&mut l, width, 1);
    conv_block(&mut l, width, 1);
    let src = l.len();
    l.push(LayerSpec::skip_source());
    l.push(LayerSpec::pool());
    conv_block(&mut l, width, 1);
    conv_block(&mut l, width, 1);
    l.push(LayerSpec::upsample());
    conv_block(&mut l, width, 1);
    conv_block(&mut l, width, 1);
    l.push(LayerSpec::skip_join(src));
    l.push(LayerSpec::conv(out_channels, 1));
    l.push(LayerSpec::tanh());
    l
}

/// Twelve convolutions, two pool/upsample stages and two additive skips.
pub fn upper_layers(width: usize) -> Vec<LayerSpec> {
    let mut l = Vec::new();
    for _ in 0..3 {
        conv_block(&mut l, width, 1);
    }
    let src3 = l.len();
    l.push(LayerSpec::skip_source());
    l.push(LayerSpec::pool());
    for _ in 0..2 {
        conv_block(&mut l, width, 1);
    }
    let src5 = l.len();
    l.push(LayerSpec::skip_source());
    l.push(LayerSpec::pool());
    for _ in 0..2 {
        conv_block(&mut l, width, 1);
    }
    l.push(LayerSpec::upsample());
    for _ in 0..2 {
        conv_block(&mut l, width, 1);
    }
    l.push(LayerSpec::skip_join(src5));
    l.push(LayerSpec::upsample());
    for _ in 0..2 {
        conv_block(&mut l, width, 1);
    }
    l.push(LayerSpec::conv(width, 1));
    l.push(LayerSpec::skip_join(src3));
    l
}

/// Twelve dilated convolutions with symmetric additive skips (layer i to 13 - i).
pub fn lower_layers(width: usize) -> Vec<LayerSpec> {
    let mut l = Vec::new();
    let mut sources = Vec::new();
    for (i, &d) in LOWER_DILATIONS.iter().enumerate() {
        let layer = i + 1;
        if layer < BRANCH_CONVS {
            conv_block(&mut l, width, d);
        } else {
            l.push(LayerSpec::conv(width, d));
        }
        if layer <= 5 {
            sources.push(l.len());
            l.push(LayerSpec::skip_source());
        }
        if layer >= 8 {
            let partner = sources[BRANCH_CONVS - layer];
            l.push(LayerSpec::skip_join(partner));
        }
    }
    l
}

/// Declarative description of the whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub input_channels: usize,
    pub use_skip: bool,
    pub use_bn: bool,
    pub conv_bias: bool,
    pub init_gain: f64,
    pub seed: u64,
    pub estimator: Vec<LayerSpec>,
    pub upper: Vec<LayerSpec>,
    pub lower: Vec<LayerSpec>,
}

impl ModelConfig {
    pub fn new(input_channels: usize, channels: usize) -> Self {
        ModelConfig {
            channels,
            input_channels,
            use_skip: true,
            use_bn: true,
            conv_bias: true,
            init_gain: 1.0,
            seed: 0,
            estimator: estimator_layers(channels, input_channels),
            upper: upper_layers(channels),
            lower: lower_layers(channels),
        }
    }

    pub fn grayscale() -> Self {
        ModelConfig::new(1, 64)
    }

    pub fn color() -> Self {
        ModelConfig::new(3, 64)
    }

    pub fn with_ablation(mut self, use_skip: bool, use_bn: bool) -> Self {
        self.use_skip = use_skip;
        self.use_bn = use_bn;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::Config(format!("input_channels must be 1 or 3, got {}", self.input_channels)));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        let convs = |l: &[LayerSpec]| l.iter().filter(|s| s.kind == LayerKind::Conv).count();
        for (name, layers, want) in [
            ("estimator", &self.estimator, ESTIMATOR_CONVS),
            ("upper", &self.upper, BRANCH_CONVS),
            ("lower", &self.lower, BRANCH_CONVS),
        ] {
            if convs(layers) != want {
                return Err(Error::Config(format!("{name} must have {want} conv layers, has {}", convs(layers))));
            }
            for (i, s) in layers.iter().enumerate() {
                if s.kind == LayerKind::Conv && (s.kernel != 3 || s.dilation == 0 || s.channels == 0) {
                    return Err(Error::Config(format!("{name} layer {i}: invalid conv {s}")));
                }
                if s.kind == LayerKind::SkipJoin {
                    match s.skip_partner {
                        Some(p) if p < i && layers[p].kind == LayerKind::SkipSource => {}
                        _ => return Err(Error::Config(format!("{name} layer {i}: join without an earlier source"))),
                    }
                }
            }
        }
        let dilations: Vec<usize> =
            self.lower.iter().filter(|s| s.kind == LayerKind::Conv).map(|s| s.dilation).collect();
        if dilations != LOWER_DILATIONS {
            return Err(Error::Config(format!("lower branch dilations must be {LOWER_DILATIONS:?}, got {dilations:?}")));
        }
        let last_conv = self.estimator.iter().rev().find(|s| s.kind == LayerKind::Conv).expect("counted above");
        if last_conv.channels != self.input_channels {
            return Err(Error::Config("estimator must output one map channel per image channel".into()));
        }
        Ok(())
    }
}

/// Orthogonal weights for a conv of `shape` (`out x in x k x k`): the rows or
/// columns of the flattened `out x (in*k*k)` matrix, whichever are fewer, are
/// orthonormal and then scaled by `gain`.
pub fn orthogonal_init(shape: Shape, gain: f64, sampler: &mut GaussianSampler) -> Result<Tensor> {
    let rows = shape.n;
    let cols = shape.c * shape.h * shape.w;
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("orthogonal_init on empty shape {shape}")));
    }
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let sample: Vec<f64> = (0..tall * short).map(|_| sampler.sample()).collect();
    let qr = DMatrix::from_row_slice(tall, short, &sample).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows < cols { q.transpose() } else { q };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(gain * m[(i, j)]);
        }
    }
    Tensor::new(shape, data)
}

#[derive(Clone, Debug)]
enum Block {
    Conv(usize),
    Bn(usize),
    Pool,
    Upsample,
    Act(Activation),
    Source(usize),
    Join(usize),
}

#[derive(Clone, Debug)]
struct Branch {
    name: &'static str,
    blocks: Vec<Block>,
}

/// Node ids produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub denoised: NodeId,
    pub sigma_map: NodeId,
    /// Trainable parameter leaves, in [`Model::parameters`] order.
    pub params: Vec<NodeId>,
}

/// A built network with its parameters and batch-norm statistics.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    convs: Vec<(String, ConvParams)>,
    bns: Vec<(String, BatchNormState)>,
    branches: [Branch; 3],
    fuse: usize,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Model {
            config: config.clone(),
            convs: Vec::new(),
            bns: Vec::new(),
            branches: [
                Branch { name: "estimator", blocks: Vec::new() },
                Branch { name: "upper", blocks: Vec::new() },
                Branch { name: "lower", blocks: Vec::new() },
            ],
            fuse: 0,
        };
        let c = config.input_channels;
        let est_out = model.build_branch(0, &config.estimator, c)?;
        debug_assert_eq!(est_out, c);
        let up_out = model.build_branch(1, &config.upper, 2 * c)?;
        let low_out = model.build_branch(2, &config.lower, 2 * c)?;
        model.fuse = model.add_conv("fuse.conv".into(), up_out + low_out, c, 1)?;
        Ok(model)
    }

    fn add_conv(&mut self, name: String, cin: usize, cout: usize, dilation: usize) -> Result<usize> {
        let geometry = ConvGeometry::same(dilation);
        let mut params = ConvParams::zeros(cin, cout, geometry, self.config.conv_bias);
        let index = self.convs.len() as u64;
        let mut sampler = GaussianSampler::split(self.config.seed, index);
        params.weight = orthogonal_init(params.weight.shape(), self.config.init_gain, &mut sampler)?;
        self.convs.push((name, params));
        Ok(self.convs.len() - 1)
    }

    fn build_branch(&mut self, b: usize, specs: &[LayerSpec], mut channels: usize) -> Result<usize> {
        let name = self.branches[b].name;
        let mut blocks = Vec::new();
        let (mut nconv, mut nbn) = (0, 0);
        for (i, spec) in specs.iter().enumerate() {
            let block = match spec.kind {
                LayerKind::Conv => {
                    nconv += 1;
                    let id = self.add_conv(format!("{name}.conv{nconv}"), channels, spec.channels, spec.dilation)?;
                    channels = spec.channels;
                    Block::Conv(id)
                }
                LayerKind::BatchNorm if !self.config.use_bn => continue,
                LayerKind::BatchNorm => {
                    nbn += 1;
                    self.bns.push((format!("{name}.bn{nbn}"), BatchNormState::new(channels)));
                    Block::Bn(self.bns.len() - 1)
                }
                LayerKind::Pool => Block::Pool,
                LayerKind::Upsample => Block::Upsample,
                LayerKind::Activation(a) => Block::Act(a),
                LayerKind::SkipSource => Block::Source(i),
                LayerKind::SkipJoin => Block::Join(spec.skip_partner.expect("validated")),
            };
            blocks.push(block);
        }
        self.branches[b].blocks = blocks;
        Ok(channels)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Trainable tensors with stable names, in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, conv) in &self.convs {
            out.push((format!("{name}.weight"), &conv.weight));
            if let Some(b) = &conv.bias {
                out.push((format!("{name}.bias"), b));
            }
        }
        for (name, bn) in &self.bns {
            out.push((format!("{name}.gamma"), &bn.gamma));
            out.push((format!("{name}.beta"), &bn.beta));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (_, conv) in &mut self.convs {
            out.push(&mut conv.weight);
            if let Some(b) = &mut conv.bias {
                out.push(b);
            }
        }
        for (_, bn) in &mut self.bns {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        self.bns
            .iter()
            .flat_map(|(name, bn)| {
                [(format!("{name}.running_mean"), &bn.running_mean), (format!("{name}.running_var"), &bn.running_var)]
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.bns.iter_mut().flat_map(|(_, bn)| [&mut bn.running_mean, &mut bn.running_var]).collect()
    }

    /// Parameters followed by buffers.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (_, conv) in &mut self.convs {
            out.push(&mut conv.weight);
            if let Some(b) = &mut conv.bias {
                out.push(b);
            }
        }
        let mut buffers = Vec::new();
        for (_, bn) in &mut self.bns {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
            buffers.push(&mut bn.running_mean);
            buffers.push(&mut bn.running_var);
        }
        out.extend(buffers);
        out
    }

    pub fn conv_weights(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.convs.iter().map(|(n, c)| (n.as_str(), &c.weight))
    }

    pub fn num_params(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Round all parameters and statistics to `f32` precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.round_to_f32();
        }
    }

    /// Record a forward pass. Train mode updates batch-norm running statistics.
    pub fn forward(&mut self, tape: &mut Tape, noisy: NodeId, mode: Mode) -> Result<ForwardOutput> {
        let mut bns = std::mem::take(&mut self.bns);
        let out = self.run(tape, noisy, mode, &mut bns);
        self.bns = bns;
        out
    }

    /// Eval-mode forward on a batch, returning (denoised, sigma map) values.
    pub fn infer(&self, noisy: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.constant(noisy.clone());
        let mut bns = self.bns.clone();
        let out = self.run(&mut tape, x, Mode::Eval, &mut bns)?;
        Ok((tape.value(out.denoised).clone(), tape.value(out.sigma_map).clone()))
    }

    fn run(
        &self,
        tape: &mut Tape,
        noisy: NodeId,
        mode: Mode,
        bns: &mut [(String, BatchNormState)],
    ) -> Result<ForwardOutput> {
        tape.check(noisy)?;
        let s = tape.shape(noisy);
        if s.c != self.config.input_channels {
            return Err(Error::Shape(format!("model expects {} channels, got {s}", self.config.input_channels)));
        }
        if s.h % 4 != 0 || s.w % 4 != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::Shape(format!("spatial dims must be positive multiples of 4, got {s}")));
        }
        let mut params = Vec::new();
        let mut conv_nodes = Vec::with_capacity(self.convs.len());
        for (_, conv) in &self.convs {
            let w = tape.leaf(conv.weight.clone());
            params.push(w);
            let b = conv.bias.as_ref().map(|b| tape.leaf(b.clone()));
            params.extend(b);
            conv_nodes.push((w, b));
        }
        let mut bn_nodes = Vec::with_capacity(bns.len());
        for (_, bn) in bns.iter() {
            let g = tape.leaf(bn.gamma.clone());
            let b = tape.leaf(bn.beta.clone());
            params.extend([g, b]);
            bn_nodes.push((g, b));
        }

        let mut ctx = RunCtx { tape, conv_nodes: &conv_nodes, bn_nodes: &bn_nodes, bns, mode };
        let raw = self.run_branch(&mut ctx, 0, noisy)?;
        // tanh output in [-1, 1] -> sigma / 75 in [0, 1]
        let sigma_map = ops::affine(ctx.tape, raw, 0.5, 0.5)?;
        let input = ops::concat_channels(ctx.tape, noisy, sigma_map)?;
        let up = self.run_branch(&mut ctx, 1, input)?;
        let low = self.run_branch(&mut ctx, 2, input)?;
        let fused = ops::concat_channels(ctx.tape, up, low)?;
        let denoised = self.conv(&mut ctx, self.fuse, fused)?;
        Ok(ForwardOutput { denoised, sigma_map, params })
    }

    fn conv(&self, ctx: &mut RunCtx<'_>, id: usize, x: NodeId) -> Result<NodeId> {
        let (w, b) = ctx.conv_nodes[id];
        nn::conv2d(ctx.tape, x, w, b, self.convs[id].1.geometry)
    }

    fn run_branch(&self, ctx: &mut RunCtx<'_>, b: usize, input: NodeId) -> Result<NodeId> {
        let mut x = input;
        let mut saved: Vec<(usize, NodeId)> = Vec::new();
        for block in &self.branches[b].blocks {
            x = match *block {
                Block::Conv(id) => self.conv(ctx, id, x)?,
                Block::Bn(id) => {
                    let (g, beta) = ctx.bn_nodes[id];
                    nn::batch_norm(ctx.tape, x, g, beta, &mut ctx.bns[id].1, ctx.mode)?
                }
                Block::Pool => nn::maxpool2x2(ctx.tape, x)?,
                Block::Upsample => nn::upsample_bilinear2x(ctx.tape, x)?,
                Block::Act(a) => nn::activation(ctx.tape, x, a)?,
                Block::Source(tag) => {
                    saved.push((tag, x));
                    x
                }
                Block::Join(_) if !self.config.use_skip => x,
                Block::Join(tag) => {
                    let src = saved
                        .iter()
                        .find(|(t, _)| *t == tag)
                        .map(|(_, n)| *n)
                        .ok_or_else(|| Error::Structural(format!("skip source {tag} not reached")))?;
                    nn::add(ctx.tape, x, src)?
                }
            };
        }
        Ok(x)
    }

    /// Replace parameters and buffers from name-tensor pairs (all must be present).
    pub fn load_named(&mut self, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        let names: Vec<String> = self.parameters().into_iter().map(|(n, _)| n).collect();
        let buffer_names: Vec<String> = self.buffers().into_iter().map(|(n, _)| n).collect();
        let targets = self.tensors_mut();
        for (name, slot) in names.iter().chain(&buffer_names).zip(targets) {
            let t = lookup(name).ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Shape(format!("tensor `{name}`: expected {}, got {}", slot.shape(), t.shape())));
            }
            *slot = t;
        }
        Ok(())
    }
}

struct RunCtx<'a> {
    tape: &'a mut Tape,
    conv_nodes: &'a [(NodeId, Option<NodeId>)],
    bn_nodes: &'a [(NodeId, NodeId)],
    bns: &'a mut [(String, BatchNormState)],
    mode: Mode,
}

/// One step of a receptive-field schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfLayer {
    Conv { kernel: usize, dilation: usize, stride: usize },
    Pool { kernel: usize, stride: usize },
    /// Leaves the receptive field and jump unchanged.
    Upsample,
}

/// Receptive field after each convolution plus the final field and jump.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReceptiveField {
    pub per_conv: Vec<usize>,
    pub rf: usize,
    pub jump: usize,
}

/// `rf += (k - 1) * d * jump; jump *= stride` through the schedule.
pub fn receptive_field(schedule: &[RfLayer], initial_rf: usize, initial_jump: usize) -> ReceptiveField {
    let (mut rf, mut jump) = (initial_rf, initial_jump);
    let mut per_conv = Vec::new();
    for layer in schedule {
        match *layer {
            RfLayer::Conv { kernel, dilation, stride } => {
                rf += (kernel - 1) * dilation * jump;
                jump *= stride;
                per_conv.push(rf);
            }
            RfLayer::Pool { kernel, stride } => {
                rf += (kernel - 1) * jump;
                jump *= stride;
            }
            RfLayer::Upsample => {}
        }
    }
    ReceptiveField { per_conv, rf, jump }
}

/// Receptive-field schedule of a layer list.
pub fn rf_schedule(layers: &[LayerSpec]) -> Vec<RfLayer> {
    layers
        .iter()
        .filter_map(|s| match s.kind {
            LayerKind::Conv => Some(RfLayer::Conv { kernel: s.kernel, dilation: s.dilation, stride: 1 }),
            LayerKind::Pool => Some(RfLayer::Pool { kernel: 2, stride: 2 }),
            LayerKind::Upsample => Some(RfLayer::Upsample),
            _ => None,
        })
        .collect()
}

/// Published per-layer receptive fields of the upper branch.
pub const REFERENCE_UPPER_RF: [usize; 12] = [30, 34, 38, 48, 56, 74, 90, 106, 122, 138, 154, 170];
/// Published per-layer receptive fields of the lower branch.
pub const REFERENCE_LOWER_RF: [usize; 12] = [30, 38, 50, 66, 86, 110, 130, 146, 158, 166, 170, 174];

/// Per-layer receptive fields of the (upper, lower) branches, measured on the
/// input image, i.e. seeded with the estimator's field and jump.
pub fn branch_receptive_fields(config: &ModelConfig) -> (ReceptiveField, ReceptiveField, ReceptiveField) {
    let est = receptive_field(&rf_schedule(&config.estimator), 1, 1);
    let upper = receptive_field(&rf_schedule(&config.upper), est.rf, est.jump);
    let lower = receptive_field(&rf_schedule(&config.lower), est.rf, est.jump);
    (est, upper, lower)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> Model {
        Model::new(ModelConfig::new(1, 8).with_seed(seed)).unwrap()
    }

    #[test]
    fn default_layouts_validate() {
        ModelConfig::grayscale().validate().unwrap();
        ModelConfig::color().validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_dilations_and_joins() {
        let mut c = ModelConfig::grayscale();
        let i = c.lower.iter().position(|s| s.kind == LayerKind::Conv).unwrap();
        c.lower[i].dilation = 2;
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = ModelConfig::grayscale();
        let j = c.upper.iter().position(|s| s.kind == LayerKind::SkipJoin).unwrap();
        c.upper[j].skip_partner = Some(j + 1);
        assert!(c.validate().is_err());

        let mut c = ModelConfig::grayscale();
        c.upper.retain(|s| s.kind != LayerKind::Conv || s.channels == 0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn layer_specs_round_trip_through_text() {
        let c = ModelConfig::color();
        for layers in [&c.estimator, &c.upper, &c.lower] {
            assert_eq!(&layers_from_str(&layers_to_string(layers)).unwrap(), layers);
        }
        assert!(layers_from_str("conv:3:1").is_err());
        assert!(layers_from_str("nope").is_err());
    }

    #[test]
    fn orthogonal_square_and_gain() {
        let mut s = GaussianSampler::new(3);
        for gain in [1.0, 2.0] {
            let w = orthogonal_init(Shape::new(4, 4, 1, 1), gain, &mut s).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let dot: f64 = (0..4).map(|k| w.data()[i * 4 + k] * w.data()[j * 4 + k]).sum();
                    let want = if i == j { gain * gain } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10, "{gain} {i} {j} {dot}");
                }
            }
        }
    }

    #[test]
    fn orthogonal_is_seeded() {
        let shape = Shape::new(8, 2, 3, 3);
        let a = orthogonal_init(shape, 1.0, &mut GaussianSampler::new(11)).unwrap();
        let b = orthogonal_init(shape, 1.0, &mut GaussianSampler::new(11)).unwrap();
        assert_eq!(a, b);
        assert!(orthogonal_init(Shape::new(0, 1, 3, 3), 1.0, &mut GaussianSampler::new(0)).is_err());
    }

    #[test]
    fn conv_counts() {
        let m = small(0);
        let count = |p: &str| m.conv_weights().filter(|(n, _)| n.starts_with(p)).count();
        assert_eq!(count("estimator."), 7);
        assert_eq!(count("upper."), 12);
        assert_eq!(count("lower."), 12);
        assert_eq!(count("fuse."), 1);
    }

    #[test]
    fn forward_shapes_and_sigma_range() {
        let mut m = small(1);
        let noisy = Tensor::from_fn(Shape::new(2, 1, 16, 12), |n, _, y, x| ((n + y * 3 + x * 5) % 7) as f64 / 7.0);
        let mut tape = Tape::new();
        let x = tape.constant(noisy);
        let out = m.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(out.denoised), Shape::new(2, 1, 16, 12));
        assert_eq!(tape.shape(out.sigma_map), Shape::new(2, 1, 16, 12));
        assert!(tape.value(out.sigma_map).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(out.params.len(), m.parameters().len());
    }

    #[test]
    fn forward_rejects_sizes_not_divisible_by_four() {
        let mut m = small(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 10, 8)));
        assert!(matches!(m.forward(&mut tape, x, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn zeros_forward_is_finite_and_deterministic() {
        let zeros = Tensor::zeros(Shape::new(1, 1, 8, 8));
        let (a, sa) = small(5).infer(&zeros).unwrap();
        let (b, sb) = small(5).infer(&zeros).unwrap();
        assert!(a.is_finite() && sa.is_finite());
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn ablations_build_and_differ_only_by_bn() {
        let base = ModelConfig::new(1, 8);
        let with_bn = Model::new(base.clone()).unwrap().num_params();
        let without_bn = Model::new(base.clone().with_ablation(true, false)).unwrap().num_params();
        // 6 + 11 + 11 batch-norm layers, gamma and beta per channel
        assert_eq!(with_bn - without_bn, 28 * 2 * 8);
        for (skip, bn) in [(true, true), (true, false), (false, true), (false, false)] {
            let m = Model::new(base.clone().with_ablation(skip, bn)).unwrap();
            let (out, _) = m.infer(&Tensor::full(Shape::new(1, 1, 8, 8), 0.5)).unwrap();
            assert_eq!(out.shape(), Shape::new(1, 1, 8, 8));
            assert!(out.is_finite());
        }
        let skip_params = Model::new(base.clone().with_ablation(false, true)).unwrap().num_params();
        assert_eq!(skip_params, with_bn);
    }

    #[test]
    fn receptive_field_textbook() {
        let conv = RfLayer::Conv { kernel: 3, dilation: 1, stride: 1 };
        assert_eq!(receptive_field(&[conv], 1, 1).per_conv, vec![3]);
        assert_eq!(receptive_field(&[conv, conv], 1, 1).per_conv, vec![3, 5]);
    }

    #[test]
    fn estimator_field_seeds_branches() {
        let (est, _, _) = branch_receptive_fields(&ModelConfig::grayscale());
        assert_eq!((est.rf, est.jump), (26, 2));
    }
}
