//! Encoder-decoder segmentation networks.
//!
//! Three layouts are built at configurable width and depth:
//!
//! * `unet`: symmetric two-convolution stages, decoder features merged with
//!   encoder features by channel concatenation.
//! * `vgg_concat_11` / `vgg_concat_16`: VGG-style encoder stages (1-1-2-2-2 or
//!   2-2-3-3-3 convolutions) with concatenating decoder blocks.
//! * `residual_add`: a 7x7/stride-2 stem, 2x max-pool and residual stages,
//!   with LinkNet-style decoder blocks whose outputs are *added* to the
//!   matching encoder features.
//!
//! Weights are He-uniform initialized; biases start at zero and batch-norm
//! layers at `gamma = 1`, `beta = 0`.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, ChannelStats, Graph, Mode, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Unet,
    #[serde(rename = "vgg_concat_11")]
    VggConcat11,
    #[serde(rename = "vgg_concat_16")]
    VggConcat16,
    ResidualAdd,
}

impl Style {
    pub const ALL: [Style; 4] = [
        Style::Unet,
        Style::VggConcat11,
        Style::VggConcat16,
        Style::ResidualAdd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Style::Unet => "unet",
            Style::VggConcat11 => "vgg_concat_11",
            Style::VggConcat16 => "vgg_concat_16",
            Style::ResidualAdd => "residual_add",
        }
    }

    fn default_convs_per_stage(self) -> &'static [usize] {
        match self {
            Style::VggConcat16 => &[2, 2, 3, 3, 3],
            _ => &[1, 1, 2, 2, 2],
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_input_channels() -> usize {
    3
}

fn default_output_classes() -> usize {
    1
}

/// Architecture description. `depth` counts the 2x downsamplings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub style: Style,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    #[serde(default = "default_output_classes")]
    pub output_classes: usize,
    /// Convolutions per encoder stage for the VGG styles; the last entry
    /// repeats for deeper networks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convs_per_stage: Option<Vec<usize>>,
    /// Residual blocks per encoder stage for `residual_add` (default one each).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks_per_stage: Option<Vec<usize>>,
}

impl NetworkSpec {
    pub fn new(style: Style, base_width: usize, depth: usize) -> Self {
        NetworkSpec {
            style,
            input_channels: 3,
            base_width,
            depth,
            output_classes: 1,
            convs_per_stage: None,
            blocks_per_stage: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth < 1 {
            return bad("network depth must be >= 1".into());
        }
        if self.style == Style::ResidualAdd && self.depth < 2 {
            return bad("residual_add needs depth >= 2 (stem convolution and pooling)".into());
        }
        if self.base_width < 1 || self.input_channels < 1 || self.output_classes < 1 {
            return bad("base_width, input_channels and output_classes must be >= 1".into());
        }
        if self.depth > 16 {
            return bad(format!("network depth {} is unreasonably large", self.depth));
        }
        for (key, list) in [
            ("convs_per_stage", &self.convs_per_stage),
            ("blocks_per_stage", &self.blocks_per_stage),
        ] {
            if let Some(l) = list {
                if l.is_empty() || l.contains(&0) {
                    return bad(format!("{key} entries must be >= 1"));
                }
            }
        }
        Ok(())
    }

    /// Input extents must be divisible by `2^depth`.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "input {height}x{width} is not divisible by 2^{} = {m}",
                self.depth
            )));
        }
        Ok(())
    }

    fn convs_for_stage(&self, stage: usize) -> usize {
        let list = self
            .convs_per_stage
            .as_deref()
            .unwrap_or_else(|| self.style.default_convs_per_stage());
        list[stage.min(list.len() - 1)]
    }

    fn blocks_for_stage(&self, stage: usize) -> usize {
        match &self.blocks_per_stage {
            Some(l) => l[stage.min(l.len() - 1)],
            None => 1,
        }
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}(in={}, width={}, depth={}, classes={}",
            self.style, self.input_channels, self.base_width, self.depth, self.output_classes
        )?;
        if let Some(c) = &self.convs_per_stage {
            write!(f, ", convs={c:?}")?;
        }
        if let Some(b) = &self.blocks_per_stage {
            write!(f, ", blocks={b:?}")?;
        }
        f.write_str(")")
    }
}

/// Width of the 1x1 bottleneck inside a residual-style decoder block.
pub fn decoder_mid_channels(in_channels: usize) -> usize {
    (in_channels / 4).max(1)
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    state: usize,
}

/// Convolution, optional batch norm, optional ReLU.
#[derive(Clone, Debug)]
struct ConvUnit {
    conv: ConvLayer,
    bn: Option<BnLayer>,
    relu: bool,
}

/// Transposed convolution upsampling 2x, optional batch norm and ReLU.
#[derive(Clone, Debug)]
struct UpLayer {
    conv: ConvLayer,
    bn: Option<BnLayer>,
    relu: bool,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    convs: Vec<ConvUnit>,
    up: Option<UpLayer>,
}

#[derive(Clone, Debug)]
struct ResBlock {
    first: ConvUnit,
    second: ConvUnit,
    shortcut: Option<ConvUnit>,
}

/// 1x1 reduce -> transposed conv -> 1x1 expand, each with BN and ReLU.
#[derive(Clone, Debug)]
struct LinkDecoder {
    reduce: ConvUnit,
    up: UpLayer,
    expand: ConvUnit,
}

#[derive(Clone, Debug)]
enum Arch {
    Concat {
        encoder: Vec<Vec<ConvUnit>>,
        center: Vec<ConvUnit>,
        center_up: UpLayer,
        /// Indexed by level; visited from deepest to shallowest.
        decoder: Vec<DecoderStage>,
        head: ConvLayer,
    },
    Residual {
        stem: ConvUnit,
        stages: Vec<Vec<ResBlock>>,
        /// Applied in order, deepest first; the second to last output is
        /// added to the stem features, the last restores full resolution.
        decoders: Vec<LinkDecoder>,
        head: ConvLayer,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Result of recording one forward pass on a graph.
pub struct ForwardOutput {
    /// Per-pixel probabilities (`sigmoid`, or channel softmax for K > 1).
    pub probs: Var,
    pub logits: Var,
    /// Handles of every parameter, in parameter order.
    pub params: Vec<Var>,
    /// Training-mode batch statistics per batch-norm layer.
    pub batch_stats: Vec<(usize, ChannelStats)>,
    /// Shapes of the encoder feature maps from shallow to deep.
    pub encoder_shapes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Network<T: Real = f32> {
    spec: NetworkSpec,
    params: Vec<Param<T>>,
    bn: Vec<BatchNormState<T>>,
    arch: Arch,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param<f64>>,
    bn: Vec<usize>,
}

impl Builder {
    fn tensor(&mut self, name: String, value: Tensor<f64>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn he_uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound)).expect("positive extents");
        self.tensor(name, t)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> ConvLayer {
        let w = self.he_uniform(format!("{name}.weight"), vec![cout, cin, k, k], cin * k * k);
        let b = bias.then(|| self.tensor(format!("{name}.bias"), Tensor::zeros(vec![cout]).expect("cout >= 1")));
        ConvLayer {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    /// Transposed conv k=4, stride 2, pad 1: exact 2x upsampling.
    fn conv_t(&mut self, name: &str, cin: usize, cout: usize, bias: bool) -> ConvLayer {
        // each output pixel sees cin * (k / stride)^2 inputs
        let w = self.he_uniform(format!("{name}.weight"), vec![cin, cout, 4, 4], cin * 4);
        let b = bias.then(|| self.tensor(format!("{name}.bias"), Tensor::zeros(vec![cout]).expect("cout >= 1")));
        ConvLayer {
            w,
            b,
            stride: 2,
            pad: 1,
        }
    }

    fn bn(&mut self, name: &str, channels: usize) -> BnLayer {
        let gamma = self.tensor(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0).expect("channels >= 1"));
        let beta = self.tensor(format!("{name}.beta"), Tensor::zeros(vec![channels]).expect("channels >= 1"));
        self.bn.push(channels);
        BnLayer {
            gamma,
            beta,
            state: self.bn.len() - 1,
        }
    }

    fn conv_relu(&mut self, name: &str, cin: usize, cout: usize) -> ConvUnit {
        ConvUnit {
            conv: self.conv(name, cin, cout, 3, 1, true),
            bn: None,
            relu: true,
        }
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, relu: bool) -> ConvUnit {
        ConvUnit {
            conv: self.conv(&format!("{name}.conv"), cin, cout, k, stride, false),
            bn: Some(self.bn(&format!("{name}.bn"), cout)),
            relu,
        }
    }

    fn link_decoder(&mut self, name: &str, cin: usize, cout: usize) -> LinkDecoder {
        let mid = decoder_mid_channels(cin);
        LinkDecoder {
            reduce: self.conv_bn(&format!("{name}.reduce"), cin, mid, 1, 1, true),
            up: UpLayer {
                conv: self.conv_t(&format!("{name}.up.conv"), mid, mid, false),
                bn: Some(self.bn(&format!("{name}.up.bn"), mid)),
                relu: true,
            },
            expand: self.conv_bn(&format!("{name}.expand"), mid, cout, 1, 1, true),
        }
    }
}

fn build_unet(b: &mut Builder, spec: &NetworkSpec) -> Arch {
    let d = spec.depth;
    let width = |i: usize| spec.base_width << i;
    let mut encoder = Vec::new();
    let mut cin = spec.input_channels;
    for i in 0..d {
        encoder.push(vec![
            b.conv_relu(&format!("enc{i}.0"), cin, width(i)),
            b.conv_relu(&format!("enc{i}.1"), width(i), width(i)),
        ]);
        cin = width(i);
    }
    let center = vec![
        b.conv_relu("center.0", width(d - 1), width(d)),
        b.conv_relu("center.1", width(d), width(d)),
    ];
    let center_up = UpLayer {
        conv: b.conv_t("center.up", width(d), width(d - 1), true),
        bn: None,
        relu: false,
    };
    let decoder = (0..d)
        .map(|i| DecoderStage {
            convs: vec![
                b.conv_relu(&format!("dec{i}.0"), 2 * width(i), width(i)),
                b.conv_relu(&format!("dec{i}.1"), width(i), width(i)),
            ],
            up: (i > 0).then(|| UpLayer {
                conv: b.conv_t(&format!("dec{i}.up"), width(i), width(i - 1), true),
                bn: None,
                relu: false,
            }),
        })
        .collect();
    let head = b.conv("head", width(0), spec.output_classes, 1, 1, true);
    Arch::Concat {
        encoder,
        center,
        center_up,
        decoder,
        head,
    }
}

fn build_vgg(b: &mut Builder, spec: &NetworkSpec) -> Arch {
    let d = spec.depth;
    // VGG doubles width per stage up to 8x the first stage.
    let width = |i: usize| spec.base_width << i.min(3);
    let half = |c: usize| (c / 2).max(1);
    let mut encoder = Vec::new();
    let mut cin = spec.input_channels;
    for i in 0..d {
        let convs = (0..spec.convs_for_stage(i))
            .map(|j| {
                let unit = b.conv_relu(&format!("enc{i}.{j}"), cin, width(i));
                cin = width(i);
                unit
            })
            .collect();
        encoder.push(convs);
    }
    let deepest = width(d - 1);
    let center = vec![b.conv_relu("center.0", deepest, deepest)];
    let center_up = UpLayer {
        conv: b.conv_t("center.up", deepest, half(deepest), true),
        bn: None,
        relu: true,
    };
    let mut up_channels = half(deepest);
    let mut decoder: Vec<DecoderStage> = Vec::with_capacity(d);
    for i in (0..d).rev() {
        let cin = up_channels + width(i);
        let stage = if i > 0 {
            up_channels = half(width(i - 1));
            DecoderStage {
                convs: vec![b.conv_relu(&format!("dec{i}.0"), cin, width(i))],
                up: Some(UpLayer {
                    conv: b.conv_t(&format!("dec{i}.up"), width(i), up_channels, true),
                    bn: None,
                    relu: true,
                }),
            }
        } else {
            DecoderStage {
                convs: vec![b.conv_relu("dec0.0", cin, half(width(0)))],
                up: None,
            }
        };
        decoder.push(stage);
    }
    decoder.reverse();
    let head = b.conv("head", half(width(0)), spec.output_classes, 1, 1, true);
    Arch::Concat {
        encoder,
        center,
        center_up,
        decoder,
        head,
    }
}

fn build_residual(b: &mut Builder, spec: &NetworkSpec) -> Arch {
    let w = spec.base_width;
    let stem = b.conv_bn("stem", spec.input_channels, w, 7, 2, true);
    // stem conv and pooling provide two downsamplings; every stage after
    // the first halves once more
    let stage_count = spec.depth - 1;
    let width = |j: usize| w << j;
    let mut stages = Vec::with_capacity(stage_count);
    let mut cin = w;
    for j in 0..stage_count {
        let blocks = (0..spec.blocks_for_stage(j))
            .map(|k| {
                let stride = if j > 0 && k == 0 { 2 } else { 1 };
                let name = format!("layer{j}.{k}");
                let cout = width(j);
                let shortcut = (stride != 1 || cin != cout)
                    .then(|| b.conv_bn(&format!("{name}.shortcut"), cin, cout, 1, stride, false));
                let block = ResBlock {
                    first: b.conv_bn(&format!("{name}.conv1"), cin, cout, 3, stride, true),
                    second: b.conv_bn(&format!("{name}.conv2"), cout, cout, 3, 1, false),
                    shortcut,
                };
                cin = cout;
                block
            })
            .collect();
        stages.push(blocks);
    }
    let mut decoders = Vec::with_capacity(stage_count + 1);
    for j in (1..stage_count).rev() {
        decoders.push(b.link_decoder(&format!("dec{j}"), width(j), width(j - 1)));
    }
    decoders.push(b.link_decoder("dec_stem", w, w));
    decoders.push(b.link_decoder("dec_final", w, w));
    let head = b.conv("head", w, spec.output_classes, 1, 1, true);
    Arch::Residual {
        stem,
        stages,
        decoders,
        head,
    }
}

struct Ctx<'a, T: Real> {
    g: &'a mut Graph<T>,
    p: Vec<Var>,
    bn: &'a [BatchNormState<T>],
    mode: Mode,
    stats: Vec<(usize, ChannelStats)>,
}

impl<T: Real> Ctx<'_, T> {
    fn conv(&mut self, l: &ConvLayer, x: Var) -> Result<Var> {
        let b = l.b.map(|b| self.p[b]);
        self.g.conv2d(x, self.p[l.w], b, l.stride, l.pad)
    }

    fn norm(&mut self, l: &BnLayer, x: Var) -> Result<Var> {
        let (y, stats) = self
            .g
            .batch_norm(x, self.p[l.gamma], self.p[l.beta], &self.bn[l.state], self.mode)?;
        if let Some(s) = stats {
            self.stats.push((l.state, s));
        }
        Ok(y)
    }

    fn unit(&mut self, u: &ConvUnit, x: Var) -> Result<Var> {
        let mut h = self.conv(&u.conv, x)?;
        if let Some(bn) = &u.bn {
            h = self.norm(bn, h)?;
        }
        if u.relu {
            h = self.g.relu(h)?;
        }
        Ok(h)
    }

    fn up(&mut self, u: &UpLayer, x: Var) -> Result<Var> {
        let b = u.conv.b.map(|b| self.p[b]);
        let mut h = self.g.conv_transpose2d(x, self.p[u.conv.w], b, u.conv.stride, u.conv.pad)?;
        if let Some(bn) = &u.bn {
            h = self.norm(bn, h)?;
        }
        if u.relu {
            h = self.g.relu(h)?;
        }
        Ok(h)
    }

    fn link(&mut self, d: &LinkDecoder, x: Var) -> Result<Var> {
        let h = self.unit(&d.reduce, x)?;
        let h = self.up(&d.up, h)?;
        self.unit(&d.expand, h)
    }

    fn res_block(&mut self, blk: &ResBlock, x: Var) -> Result<Var> {
        let h = self.unit(&blk.first, x)?;
        let h = self.unit(&blk.second, h)?;
        let skip = match &blk.shortcut {
            Some(s) => self.unit(s, x)?,
            None => x,
        };
        let sum = self.g.add(h, skip)?;
        self.g.relu(sum)
    }

    fn shape(&self, v: Var) -> Result<Vec<usize>> {
        Ok(self.g.value(v)?.shape().to_vec())
    }
}

impl Network<f32> {
    /// Builds a network with weights drawn from a generator seeded by `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        Ok(Network::<f64>::build_f64(spec, seed)?.cast())
    }
}

impl Network<f64> {
    /// Same initialization as [`Network::build`] but kept in 64-bit.
    pub fn build_f64(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            bn: Vec::new(),
        };
        let arch = match spec.style {
            Style::Unet => build_unet(&mut b, spec),
            Style::VggConcat11 | Style::VggConcat16 => build_vgg(&mut b, spec),
            Style::ResidualAdd => build_residual(&mut b, spec),
        };
        Ok(Network {
            spec: spec.clone(),
            params: b.params,
            bn: b.bn.into_iter().map(BatchNormState::new).collect(),
            arch,
        })
    }
}

impl<T: Real> Network<T> {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn batch_norm_states(&self) -> &[BatchNormState<T>] {
        &self.bn
    }

    pub fn batch_norm_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.bn
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Exact number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            bn: self.bn.iter().map(|s| s.cast()).collect(),
            arch: self.arch.clone(),
        }
    }

    /// Records a forward pass of `input` (`N x C x H x W`) on `graph`.
    pub fn forward(&self, graph: &mut Graph<T>, input: Var, mode: Mode) -> Result<ForwardOutput> {
        let (_, c, h, w) = graph.value(input)?.dims4()?;
        if c != self.spec.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.spec.input_channels
            )));
        }
        self.spec.check_input(h, w)?;
        let p = self
            .params
            .iter()
            .enumerate()
            .map(|(i, prm)| graph.param(i, prm.value.clone()))
            .collect();
        let mut cx = Ctx {
            g: graph,
            p,
            bn: &self.bn,
            mode,
            stats: Vec::new(),
        };
        let mut encoder_shapes = Vec::new();
        let logits = match &self.arch {
            Arch::Concat {
                encoder,
                center,
                center_up,
                decoder,
                head,
            } => {
                let mut x = input;
                let mut skips = Vec::with_capacity(encoder.len());
                for stage in encoder {
                    for u in stage {
                        x = cx.unit(u, x)?;
                    }
                    encoder_shapes.push(cx.shape(x)?);
                    skips.push(x);
                    x = cx.g.max_pool2d(x, 2, 2)?;
                }
                for u in center {
                    x = cx.unit(u, x)?;
                }
                encoder_shapes.push(cx.shape(x)?);
                x = cx.up(center_up, x)?;
                for (stage, skip) in decoder.iter().zip(skips).rev() {
                    x = cx.g.concat(x, skip)?;
                    for u in &stage.convs {
                        x = cx.unit(u, x)?;
                    }
                    if let Some(up) = &stage.up {
                        x = cx.up(up, x)?;
                    }
                }
                cx.conv(head, x)?
            }
            Arch::Residual {
                stem,
                stages,
                decoders,
                head,
            } => {
                let stem_out = cx.unit(stem, input)?;
                encoder_shapes.push(cx.shape(stem_out)?);
                let mut x = cx.g.max_pool2d(stem_out, 2, 2)?;
                encoder_shapes.push(cx.shape(x)?);
                let mut feats = Vec::with_capacity(stages.len());
                for stage in stages {
                    for blk in stage {
                        x = cx.res_block(blk, x)?;
                    }
                    encoder_shapes.push(cx.shape(x)?);
                    feats.push(x);
                }
                // feats[j - 1] receives decoder j; the stem receives dec_stem
                let mut skips: Vec<Var> = feats[..feats.len() - 1].to_vec();
                skips.insert(0, stem_out);
                let (last, inner) = decoders.split_last().expect("at least two decoders");
                for (dec, skip) in inner.iter().zip(skips.into_iter().rev()) {
                    let up = cx.link(dec, x)?;
                    x = cx.g.add(up, skip)?;
                }
                x = cx.link(last, x)?;
                cx.conv(head, x)?
            }
        };
        let probs = if self.spec.output_classes == 1 {
            cx.g.sigmoid(logits)?
        } else {
            cx.g.softmax_channels(logits)?
        };
        Ok(ForwardOutput {
            probs,
            logits,
            params: cx.p,
            batch_stats: cx.stats,
            encoder_shapes,
        })
    }

    /// Evaluation-mode probabilities for a batch; output spatial size equals
    /// the input's.
    pub fn forward_segment(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let out = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(out.probs)?.clone())
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn commit_batch_stats(&mut self, stats: &[(usize, ChannelStats)]) {
        for (idx, s) in stats {
            self.bn[*idx].update(s);
        }
    }

    /// Replaces every parameter from a flat array in parameter order.
    pub fn import_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "flat import has {} values, network has {} parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Reads little-endian `f32` weights (parameter order) from `path`.
    pub fn import_flat_file(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::format(path, "length is not a multiple of 4 bytes"));
        }
        let values: Vec<T> = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        self.import_flat(&values)
    }
}
