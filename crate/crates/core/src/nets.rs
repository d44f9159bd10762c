//! The four small convolutional networks and their parameters.
//!
//! * **feature** — maps a `(3, H, W)` image to a `(Cf, H/s, W/s)`
//!   feature map, where `s` is the product of layer strides.
//! * **flow** — maps a channel-concatenated image pair `(6, H, W)` to a
//!   displacement field `(2, H/s, W/s)` plus a per-position scale map
//!   `(1, H/s, W/s)`, via a shared trunk with two heads.
//! * **quality** — maps a feature map to a single-channel quality
//!   logit map, used to weight competing features against each other.
//! * **task** — maps a feature map to detection heads: one objectness
//!   logit, one logit per class, and four box regression channels.
//!
//! Heads that must start neutral are zero-initialised: the flow head
//! (zero displacement), the scale head (zero weights with a fixed bias
//! of one, so scaling starts as the identity and the bias never
//! trains), the quality head (equal weights after the softmax), and
//! the task head (maximum-entropy detections).

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{concat_channels, conv2d, read_tensor, write_tensor, DType, KernelBank, Tensor};

/// Pointwise nonlinearity applied after a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlin {
    Relu,
    Linear,
}

impl fmt::Display for Nonlin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Nonlin::Relu => write!(f, "relu"),
            Nonlin::Linear => write!(f, "linear"),
        }
    }
}

impl std::str::FromStr for Nonlin {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Nonlin::Relu),
            "linear" => Ok(Nonlin::Linear),
            other => Err(Error::Format(format!("unknown nonlinearity '{other}'"))),
        }
    }
}

/// One convolutional layer: kernels, per-output-channel bias, and the
/// nonlinearity that follows. `train_bias` is false for heads whose
/// bias is pinned (the scale head keeps its bias at one forever).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub bank: KernelBank,
    pub bias: Vec<f64>,
    pub nonlin: Nonlin,
    pub train_bias: bool,
}

impl Layer {
    pub fn new(bank: KernelBank, bias: Vec<f64>, nonlin: Nonlin, train_bias: bool) -> Result<Self> {
        if bias.len() != bank.out_channels {
            return Err(Error::DataLength { expected: bank.out_channels, got: bias.len() });
        }
        Ok(Layer { bank, bias, nonlin, train_bias })
    }

    /// Convolution followed by the layer's nonlinearity.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pre = conv2d(x, &self.bank, &self.bias)?;
        Ok(apply_nonlin(&pre, self.nonlin))
    }

    /// Convolution only; the caller applies the nonlinearity. Training
    /// uses this to keep pre-activation values for the backward pass.
    pub fn forward_pre(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.bank, &self.bias)
    }

    /// Number of values the optimiser may update.
    pub fn trainable_param_count(&self) -> usize {
        self.bank.weights().len() + if self.train_bias { self.bias.len() } else { 0 }
    }
}

/// Applies a nonlinearity elementwise.
pub fn apply_nonlin(x: &Tensor, nonlin: Nonlin) -> Tensor {
    match nonlin {
        Nonlin::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        Nonlin::Linear => x.clone(),
    }
}

/// Which network a layer belongs to; used to address parameters
/// uniformly in training and serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetId {
    Feature,
    FlowTrunk,
    FlowHead,
    ScaleHead,
    Quality,
    Task,
}

impl NetId {
    pub const ALL: [NetId; 6] = [
        NetId::Feature,
        NetId::FlowTrunk,
        NetId::FlowHead,
        NetId::ScaleHead,
        NetId::Quality,
        NetId::Task,
    ];

    fn section_name(self) -> &'static str {
        match self {
            NetId::Feature => "feature",
            NetId::FlowTrunk => "flow_trunk",
            NetId::FlowHead => "flow_head",
            NetId::ScaleHead => "scale_head",
            NetId::Quality => "quality",
            NetId::Task => "task",
        }
    }

    fn from_section_name(s: &str) -> Result<Self> {
        Ok(match s {
            "feature" => NetId::Feature,
            "flow_trunk" => NetId::FlowTrunk,
            "flow_head" => NetId::FlowHead,
            "scale_head" => NetId::ScaleHead,
            "quality" => NetId::Quality,
            "task" => NetId::Task,
            other => return Err(Error::Format(format!("unknown checkpoint section '{other}'"))),
        })
    }
}

/// All parameters of the four networks, plus a flag recording whether
/// they have been through training (freshly initialised heads are
/// deliberately inert, so downstream consumers refuse untrained
/// parameters where detections are expected to mean something).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub feature: Vec<Layer>,
    pub flow_trunk: Vec<Layer>,
    pub flow_head: Layer,
    pub scale_head: Layer,
    pub quality: Vec<Layer>,
    pub task: Vec<Layer>,
    pub trained: bool,
}

/// Detection head output on the feature grid: channel 0 is the
/// objectness logit, channels `1..=num_classes` are class logits and
/// the last four channels are box offsets
/// `(dx, dy, log_w, log_h)` relative to each cell centre, in
/// feature-stride units.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGrid {
    pub raw: Tensor,
    pub num_classes: usize,
}

impl DetectionGrid {
    pub fn new(raw: Tensor, num_classes: usize) -> Result<Self> {
        if raw.channels() != num_classes + 5 {
            return Err(Error::Shape {
                op: "detection_grid",
                detail: format!(
                    "raw tensor has {} channels, expected {} for {} classes",
                    raw.channels(),
                    num_classes + 5,
                    num_classes
                ),
            });
        }
        Ok(DetectionGrid { raw, num_classes })
    }

    pub fn height(&self) -> usize {
        self.raw.height()
    }

    pub fn width(&self) -> usize {
        self.raw.width()
    }

    pub fn objectness_logit(&self, y: usize, x: usize) -> f64 {
        self.raw.at(0, y, x)
    }

    pub fn class_logit(&self, class: usize, y: usize, x: usize) -> f64 {
        self.raw.at(1 + class, y, x)
    }

    /// `(dx, dy, log_w, log_h)` box channels at one cell.
    pub fn box_offsets(&self, y: usize, x: usize) -> [f64; 4] {
        let base = 1 + self.num_classes;
        [
            self.raw.at(base, y, x),
            self.raw.at(base + 1, y, x),
            self.raw.at(base + 2, y, x),
            self.raw.at(base + 3, y, x),
        ]
    }
}

impl Params {
    /// Downsampling factor of the feature network (product of strides).
    pub fn feature_stride(&self) -> usize {
        self.feature.iter().map(|l| l.bank.stride).product()
    }

    /// Channel count of the feature map.
    pub fn feature_channels(&self) -> usize {
        self.feature.last().map(|l| l.bank.out_channels).unwrap_or(0)
    }

    /// Number of object classes the task head scores.
    pub fn num_classes(&self) -> usize {
        self.task.last().map(|l| l.bank.out_channels.saturating_sub(5)).unwrap_or(0)
    }

    /// Total count of optimiser-visible values.
    pub fn trainable_param_count(&self) -> usize {
        self.layers().map(|(_, _, l)| l.trainable_param_count()).sum()
    }

    /// Iterates `(net, index_within_net, layer)` in canonical order.
    pub fn layers(&self) -> impl Iterator<Item = (NetId, usize, &Layer)> {
        let heads = [
            (NetId::FlowHead, &self.flow_head),
            (NetId::ScaleHead, &self.scale_head),
        ];
        self.feature
            .iter()
            .enumerate()
            .map(|(i, l)| (NetId::Feature, i, l))
            .chain(self.flow_trunk.iter().enumerate().map(|(i, l)| (NetId::FlowTrunk, i, l)))
            .chain(heads.into_iter().map(|(n, l)| (n, 0usize, l)))
            .chain(self.quality.iter().enumerate().map(|(i, l)| (NetId::Quality, i, l)))
            .chain(self.task.iter().enumerate().map(|(i, l)| (NetId::Task, i, l)))
    }

    /// Mutable access to one layer by `(net, index)`.
    pub fn layer_mut(&mut self, net: NetId, index: usize) -> &mut Layer {
        match net {
            NetId::Feature => &mut self.feature[index],
            NetId::FlowTrunk => &mut self.flow_trunk[index],
            NetId::FlowHead => &mut self.flow_head,
            NetId::ScaleHead => &mut self.scale_head,
            NetId::Quality => &mut self.quality[index],
            NetId::Task => &mut self.task[index],
        }
    }

    pub fn layer(&self, net: NetId, index: usize) -> &Layer {
        match net {
            NetId::Feature => &self.feature[index],
            NetId::FlowTrunk => &self.flow_trunk[index],
            NetId::FlowHead => &self.flow_head,
            NetId::ScaleHead => &self.scale_head,
            NetId::Quality => &self.quality[index],
            NetId::Task => &self.task[index],
        }
    }

    pub fn net_len(&self, net: NetId) -> usize {
        match net {
            NetId::Feature => self.feature.len(),
            NetId::FlowTrunk => self.flow_trunk.len(),
            NetId::FlowHead | NetId::ScaleHead => 1,
            NetId::Quality => self.quality.len(),
            NetId::Task => self.task.len(),
        }
    }

    /// Flattens every trainable value (weights, then trainable biases,
    /// per layer in canonical order) into one vector. The inverse is
    /// [`Self::set_trainable_values`]; together they let gradient
    /// checks and tests treat the model as a point in R^n.
    pub fn trainable_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_param_count());
        for (_, _, layer) in self.layers() {
            out.extend_from_slice(layer.bank.weights());
            if layer.train_bias {
                out.extend_from_slice(&layer.bias);
            }
        }
        out
    }

    /// Writes back a vector produced by [`Self::trainable_values`].
    pub fn set_trainable_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.trainable_param_count() {
            return Err(Error::DataLength {
                expected: self.trainable_param_count(),
                got: values.len(),
            });
        }
        let order: Vec<(NetId, usize)> = self.layers().map(|(n, i, _)| (n, i)).collect();
        let mut cursor = 0;
        for (net, index) in order {
            let layer = self.layer_mut(net, index);
            let nw = layer.bank.weights().len();
            layer.bank.weights_mut().copy_from_slice(&values[cursor..cursor + nw]);
            cursor += nw;
            if layer.train_bias {
                let nb = layer.bias.len();
                layer.bias.copy_from_slice(&values[cursor..cursor + nb]);
                cursor += nb;
            }
        }
        Ok(())
    }

    /// Structural sanity: channel chaining, head shapes, and agreement
    /// between feature and flow downsampling.
    pub fn validate(&self) -> Result<()> {
        fn chain(name: &str, layers: &[Layer]) -> Result<()> {
            if layers.is_empty() {
                return Err(Error::Config(format!("{name} network has no layers")));
            }
            for pair in layers.windows(2) {
                if pair[0].bank.out_channels != pair[1].bank.in_channels {
                    return Err(Error::Config(format!(
                        "{name} network breaks the channel chain: {} -> {}",
                        pair[0].bank.out_channels, pair[1].bank.in_channels
                    )));
                }
            }
            Ok(())
        }
        chain("feature", &self.feature)?;
        chain("flow", &self.flow_trunk)?;
        chain("quality", &self.quality)?;
        chain("task", &self.task)?;

        let image_c = self.feature[0].bank.in_channels;
        if self.flow_trunk[0].bank.in_channels != 2 * image_c {
            return Err(Error::Config(format!(
                "flow trunk expects a concatenated image pair ({} channels), got {}",
                2 * image_c,
                self.flow_trunk[0].bank.in_channels
            )));
        }
        let trunk_out = self.flow_trunk.last().unwrap().bank.out_channels;
        for (name, head, out) in
            [("flow head", &self.flow_head, 2usize), ("scale head", &self.scale_head, 1usize)]
        {
            if head.bank.in_channels != trunk_out {
                return Err(Error::Config(format!("{name} input does not match trunk output")));
            }
            if head.bank.out_channels != out {
                return Err(Error::Config(format!("{name} must have {out} output channels")));
            }
        }
        let cf = self.feature_channels();
        if self.quality[0].bank.in_channels != cf || self.task[0].bank.in_channels != cf {
            return Err(Error::Config(
                "quality and task networks must consume the feature map".into(),
            ));
        }
        if self.quality.last().unwrap().bank.out_channels != 1 {
            return Err(Error::Config("quality network must emit one channel".into()));
        }
        if self.task.last().unwrap().bank.out_channels < 6 {
            return Err(Error::Config(
                "task head needs at least 6 channels (objectness + 1 class + 4 box)".into(),
            ));
        }
        let flow_stride: usize = self.flow_trunk.iter().map(|l| l.bank.stride).product();
        if flow_stride != self.feature_stride() {
            return Err(Error::Config(format!(
                "flow downsampling {} must match feature downsampling {}",
                flow_stride,
                self.feature_stride()
            )));
        }
        Ok(())
    }

    /// Runs the feature network on a `(3, H, W)` image. `H` and `W`
    /// must be divisible by the feature stride so that feature maps of
    /// all frames in a clip align cell for cell.
    pub fn feature_forward(&self, image: &Tensor) -> Result<Tensor> {
        let s = self.feature_stride();
        if image.height() % s != 0 || image.width() % s != 0 {
            return Err(Error::Shape {
                op: "feature_forward",
                detail: format!(
                    "image {}x{} is not divisible by feature stride {s}",
                    image.height(),
                    image.width()
                ),
            });
        }
        run_stack(&self.feature, image)
    }

    /// Estimates displacement (and the rescale map) that moves features
    /// of `reference` onto the frame of `current`. Both images must
    /// share the feature network's input shape.
    pub fn flow_forward(&self, current: &Tensor, reference: &Tensor) -> Result<(Tensor, Tensor)> {
        if current.shape() != reference.shape() {
            return Err(Error::Shape {
                op: "flow_forward",
                detail: format!("{:?} vs {:?}", current.shape(), reference.shape()),
            });
        }
        let pair = concat_channels(current, reference)?;
        let trunk = run_stack(&self.flow_trunk, &pair)?;
        let flow = self.flow_head.forward(&trunk)?;
        let scale = self.scale_head.forward(&trunk)?;
        Ok((flow, scale))
    }

    /// Quality logit map for a feature map.
    pub fn quality_forward(&self, feature: &Tensor) -> Result<Tensor> {
        run_stack(&self.quality, feature)
    }

    /// Detection heads for a feature map.
    pub fn task_forward(&self, feature: &Tensor) -> Result<DetectionGrid> {
        let raw = run_stack(&self.task, feature)?;
        DetectionGrid::new(raw, self.num_classes())
    }
}

/// Applies a layer stack in order.
pub fn run_stack(layers: &[Layer], input: &Tensor) -> Result<Tensor> {
    if layers.is_empty() {
        return Err(Error::Empty("layer stack"));
    }
    let mut x = layers[0].forward(input)?;
    for layer in &layers[1..] {
        x = layer.forward(&x)?;
    }
    Ok(x)
}

/// Multiply-add FLOP estimate for one application of a layer stack to
/// an `(h, w)` input: `out_elems * (2 * in_c * kh * kw + 2)` per layer
/// (two for the multiply-add, two for bias and nonlinearity). Returns
/// the count and the final spatial size.
pub fn stack_flops(layers: &[Layer], h: usize, w: usize) -> Result<(f64, (usize, usize))> {
    let (mut h, mut w) = (h, w);
    let mut total = 0.0;
    for layer in layers {
        let (oh, ow) = layer.bank.output_size(h, w)?;
        let b = &layer.bank;
        total += (oh * ow * b.out_channels) as f64 * (2 * b.in_channels * b.kh * b.kw + 2) as f64;
        h = oh;
        w = ow;
    }
    Ok((total, (h, w)))
}

// ---------------------------------------------------------------------------
// Initialisation
// ---------------------------------------------------------------------------

fn he_layer(
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
    nonlin: Nonlin,
) -> Layer {
    let fan_in = (in_c * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid stddev");
    let weights: Vec<f64> = (0..out_c * in_c * k * k).map(|_| normal.sample(rng)).collect();
    let bank = KernelBank::new(out_c, in_c, k, k, stride, dilation, padding, weights)
        .expect("static geometry is valid");
    Layer { bank, bias: vec![0.0; out_c], nonlin, train_bias: true }
}

fn zero_layer(
    out_c: usize,
    in_c: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
    nonlin: Nonlin,
    bias_value: f64,
    train_bias: bool,
) -> Layer {
    let bank = KernelBank::zeros(out_c, in_c, k, k, stride, dilation, padding)
        .expect("static geometry is valid");
    Layer { bank, bias: vec![bias_value; out_c], nonlin, train_bias }
}

/// Default model: feature stride 4, 16 feature channels, 4 classes.
///
/// Layer widths are chosen so the flow network costs roughly a quarter
/// of the feature network and the task head is nearly free, which is
/// the regime where skipping feature extraction on non-key frames pays
/// off.
pub fn desk_params(seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feature = vec![
        he_layer(&mut rng, 16, 3, 3, 2, 1, 1, Nonlin::Relu),
        he_layer(&mut rng, 32, 16, 3, 2, 1, 1, Nonlin::Relu),
        he_layer(&mut rng, 32, 32, 3, 1, 2, 2, Nonlin::Relu),
        he_layer(&mut rng, 16, 32, 3, 1, 1, 1, Nonlin::Relu),
    ];
    let flow_trunk = vec![
        he_layer(&mut rng, 8, 6, 3, 2, 1, 1, Nonlin::Relu),
        he_layer(&mut rng, 16, 8, 3, 2, 1, 1, Nonlin::Relu),
        he_layer(&mut rng, 16, 16, 3, 1, 1, 1, Nonlin::Relu),
    ];
    let flow_head = zero_layer(2, 16, 3, 1, 1, 1, Nonlin::Linear, 0.0, true);
    let scale_head = zero_layer(1, 16, 1, 1, 1, 0, Nonlin::Linear, 1.0, false);
    let quality = vec![
        he_layer(&mut rng, 16, 16, 3, 1, 1, 1, Nonlin::Relu),
        he_layer(&mut rng, 8, 16, 1, 1, 1, 0, Nonlin::Relu),
        zero_layer(1, 8, 1, 1, 1, 0, Nonlin::Linear, 0.0, true),
    ];
    let task = vec![
        he_layer(&mut rng, 16, 16, 1, 1, 1, 0, Nonlin::Relu),
        zero_layer(9, 16, 1, 1, 1, 0, Nonlin::Linear, 0.0, true),
    ];
    let params =
        Params { feature, flow_trunk, flow_head, scale_head, quality, task, trained: false };
    params.validate().expect("desk architecture is self-consistent");
    params
}

/// Miniature model (under 500 trainable values, 2 classes) used by
/// exhaustive gradient checks, where every coordinate is probed with
/// finite differences.
pub fn tiny_params(seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feature = vec![he_layer(&mut rng, 3, 3, 3, 2, 1, 1, Nonlin::Relu)];
    let flow_trunk = vec![he_layer(&mut rng, 4, 6, 3, 2, 1, 1, Nonlin::Relu)];
    let flow_head = zero_layer(2, 4, 3, 1, 1, 1, Nonlin::Linear, 0.0, true);
    let scale_head = zero_layer(1, 4, 1, 1, 1, 0, Nonlin::Linear, 1.0, false);
    let quality = vec![
        he_layer(&mut rng, 2, 3, 3, 1, 1, 1, Nonlin::Relu),
        zero_layer(1, 2, 1, 1, 1, 0, Nonlin::Linear, 0.0, true),
    ];
    let task = vec![zero_layer(7, 3, 1, 1, 1, 0, Nonlin::Linear, 0.0, true)];
    let params =
        Params { feature, flow_trunk, flow_head, scale_head, quality, task, trained: false };
    params.validate().expect("tiny architecture is self-consistent");
    params
}

// ---------------------------------------------------------------------------
// Checkpoint format: a text header describing every layer, the token
// "blobs", then one weights tensor and one bias tensor per layer in
// header order (weights as (out*in, kh, kw), bias as (1, 1, out)).
// ---------------------------------------------------------------------------

const CHECKPOINT_HEADER: &str = "IMPRESSION-CHECKPOINT v1";

/// Writes parameters to `w` in checkpoint format.
pub fn write_params<W: Write>(w: &mut W, params: &Params) -> Result<()> {
    writeln!(w, "{CHECKPOINT_HEADER}")?;
    writeln!(w, "trained {}", if params.trained { 1 } else { 0 })?;
    for net in NetId::ALL {
        writeln!(w, "section {} {}", net.section_name(), params.net_len(net))?;
        for i in 0..params.net_len(net) {
            let layer = params.layer(net, i);
            let b = &layer.bank;
            writeln!(
                w,
                "layer {} {} {} {} {} {} {} {} {}",
                b.out_channels,
                b.in_channels,
                b.kh,
                b.kw,
                b.stride,
                b.dilation,
                b.padding,
                layer.nonlin,
                if layer.train_bias { "trainable" } else { "fixed" },
            )?;
        }
    }
    writeln!(w, "blobs")?;
    for (net, _, layer) in params.layers() {
        let _ = net;
        write_tensor(w, &layer.bank.weights_tensor(), DType::F64)?;
        let bias = Tensor::from_vec(1, 1, layer.bias.len(), layer.bias.clone())?;
        write_tensor(w, &bias, DType::F64)?;
    }
    Ok(())
}

/// Reads parameters written by [`write_params`] and validates them.
pub fn read_params<R: Read>(r: &mut R) -> Result<Params> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();

    let read_line = |reader: &mut BufReader<&mut R>, line: &mut String| -> Result<String> {
        line.clear();
        let n = reader.read_line(line)?;
        if n == 0 {
            return Err(Error::Format("unexpected end of checkpoint header".into()));
        }
        Ok(line.trim_end().to_string())
    };

    if read_line(&mut reader, &mut line)? != CHECKPOINT_HEADER {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let trained_line = read_line(&mut reader, &mut line)?;
    let trained = match trained_line.strip_prefix("trained ") {
        Some("0") => false,
        Some("1") => true,
        _ => return Err(Error::Format(format!("bad trained line '{trained_line}'"))),
    };

    struct LayerDesc {
        net: NetId,
        out_c: usize,
        in_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
        nonlin: Nonlin,
        train_bias: bool,
    }
    let mut descs: Vec<LayerDesc> = Vec::new();
    let mut expected_sections = NetId::ALL.iter();
    loop {
        let text = read_line(&mut reader, &mut line)?;
        if text == "blobs" {
            break;
        }
        if let Some(rest) = text.strip_prefix("section ") {
            let mut parts = rest.split_whitespace();
            let name = parts.next().ok_or_else(|| Error::Format("empty section line".into()))?;
            let net = NetId::from_section_name(name)?;
            match expected_sections.next() {
                Some(&want) if want == net => {}
                _ => {
                    return Err(Error::Format(format!(
                        "checkpoint sections out of order at '{name}'"
                    )))
                }
            }
            let count: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format("bad section count".into()))?;
            for _ in 0..count {
                let layer_line = read_line(&mut reader, &mut line)?;
                let fields: Vec<&str> = layer_line.split_whitespace().collect();
                if fields.len() != 10 || fields[0] != "layer" {
                    return Err(Error::Format(format!("bad layer line '{layer_line}'")));
                }
                let num = |i: usize| -> Result<usize> {
                    fields[i]
                        .parse()
                        .map_err(|_| Error::Format(format!("bad layer field '{}'", fields[i])))
                };
                descs.push(LayerDesc {
                    net,
                    out_c: num(1)?,
                    in_c: num(2)?,
                    kh: num(3)?,
                    kw: num(4)?,
                    stride: num(5)?,
                    dilation: num(6)?,
                    padding: num(7)?,
                    nonlin: fields[8].parse()?,
                    train_bias: match fields[9] {
                        "trainable" => true,
                        "fixed" => false,
                        other => {
                            return Err(Error::Format(format!("bad bias mode '{other}'")))
                        }
                    },
                });
            }
        } else {
            return Err(Error::Format(format!("unexpected header line '{text}'")));
        }
    }

    let mut nets: [Vec<Layer>; 6] = Default::default();
    for d in &descs {
        let (weights, _) = read_tensor(&mut reader)?;
        if weights.shape() != (d.out_c * d.in_c, d.kh, d.kw) {
            return Err(Error::Format(format!(
                "weights blob shape {:?} does not match layer geometry",
                weights.shape()
            )));
        }
        let (bias, _) = read_tensor(&mut reader)?;
        if bias.shape() != (1, 1, d.out_c) {
            return Err(Error::Format(format!(
                "bias blob shape {:?} does not match layer geometry",
                bias.shape()
            )));
        }
        let bank = KernelBank::new(
            d.out_c,
            d.in_c,
            d.kh,
            d.kw,
            d.stride,
            d.dilation,
            d.padding,
            weights.data().to_vec(),
        )?;
        let layer = Layer::new(bank, bias.data().to_vec(), d.nonlin, d.train_bias)?;
        let slot = NetId::ALL.iter().position(|&n| n == d.net).unwrap();
        nets[slot].push(layer);
    }

    let [feature, flow_trunk, mut flow_head_v, mut scale_head_v, quality, task] = nets;
    let flow_head = flow_head_v
        .pop()
        .filter(|_| flow_head_v.is_empty())
        .ok_or_else(|| Error::Format("checkpoint must contain exactly one flow head".into()))?;
    let scale_head = scale_head_v
        .pop()
        .filter(|_| scale_head_v.is_empty())
        .ok_or_else(|| Error::Format("checkpoint must contain exactly one scale head".into()))?;

    let params = Params { feature, flow_trunk, flow_head, scale_head, quality, task, trained };
    params.validate()?;
    Ok(params)
}

/// Saves parameters to a file.
pub fn save_params<P: AsRef<Path>>(path: P, params: &Params) -> Result<()> {
    let mut file = BufWriter::new(std::fs::File::create(path)?);
    write_params(&mut file, params)
}

/// Loads parameters from a file.
pub fn load_params<P: AsRef<Path>>(path: P) -> Result<Params> {
    let mut file = std::fs::File::open(path)?;
    read_params(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn fixture_dir() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
    }

    /// Deterministic pseudo-image with structure in every channel.
    fn test_image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(3, h, w, |c, y, x| {
            (((c + 1) * (y + 2) * (x + 3)) % 17) as f64 / 17.0 - 0.4
        })
    }

    #[test]
    fn desk_shapes_line_up() {
        let p = desk_params(0);
        assert_eq!(p.feature_stride(), 4);
        assert_eq!(p.feature_channels(), 16);
        assert_eq!(p.num_classes(), 4);
        let img = test_image(64, 64);
        let f = p.feature_forward(&img).unwrap();
        assert_eq!(f.shape(), (16, 16, 16));
        let (flow, scale) = p.flow_forward(&img, &test_image(64, 64)).unwrap();
        assert_eq!(flow.shape(), (2, 16, 16));
        assert_eq!(scale.shape(), (1, 16, 16));
        let q = p.quality_forward(&f).unwrap();
        assert_eq!(q.shape(), (1, 16, 16));
        let d = p.task_forward(&f).unwrap();
        assert_eq!(d.raw.shape(), (9, 16, 16));
        assert_eq!(d.num_classes, 4);
    }

    #[test]
    fn fresh_heads_are_neutral() {
        let p = desk_params(3);
        let img = test_image(32, 32);
        let (flow, scale) = p.flow_forward(&img, &test_image(32, 32)).unwrap();
        assert!(flow.data().iter().all(|&v| v == 0.0), "flow head starts at zero displacement");
        assert!(scale.data().iter().all(|&v| v == 1.0), "scale head starts as identity");
        let f = p.feature_forward(&img).unwrap();
        let q = p.quality_forward(&f).unwrap();
        assert!(q.data().iter().all(|&v| v == 0.0), "quality head starts flat");
        let d = p.task_forward(&f).unwrap();
        assert!(d.raw.data().iter().all(|&v| v == 0.0), "task head starts at max entropy");
    }

    #[test]
    fn feature_forward_rejects_unaligned_images() {
        let p = desk_params(0);
        let img = test_image(62, 64);
        assert!(matches!(p.feature_forward(&img), Err(Error::Shape { .. })));
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        assert_eq!(desk_params(7), desk_params(7));
        let a = desk_params(7);
        let b = desk_params(8);
        assert_ne!(a, b);
    }

    #[test]
    fn tiny_model_fits_exhaustive_gradient_checks() {
        let p = tiny_params(0);
        let n = p.trainable_param_count();
        assert!(n <= 500, "tiny model has {n} trainable values");
        assert_eq!(p.num_classes(), 2);
        let img = test_image(8, 8);
        let f = p.feature_forward(&img).unwrap();
        assert_eq!(f.shape(), (3, 4, 4));
    }

    #[test]
    fn scale_head_bias_is_fixed_and_one() {
        let p = desk_params(0);
        assert!(!p.scale_head.train_bias);
        assert_eq!(p.scale_head.bias, vec![1.0]);
        assert!(p.scale_head.bank.weights().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let mut p = desk_params(5);
        p.trained = true;
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        let back = read_params(&mut &buf[..]).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let p = desk_params(1);
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        // Flip the magic line.
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_params(&mut &bad[..]), Err(Error::Format(_))));
        // Truncate mid-blob.
        let mut short = buf.clone();
        short.truncate(buf.len() / 2);
        assert!(read_params(&mut &short[..]).is_err());
    }

    #[test]
    fn param_iteration_visits_every_layer_once() {
        let p = desk_params(0);
        let count = p.layers().count();
        assert_eq!(count, 4 + 3 + 1 + 1 + 3 + 2);
        let total: usize = p.layers().map(|(_, _, l)| l.trainable_param_count()).sum();
        assert_eq!(total, p.trainable_param_count());
    }

    /// Regenerates the committed golden outputs. Run explicitly with
    /// `cargo test -p impression-core golden -- --ignored` after an
    /// intentional change to initialisation or the forward pass.
    #[test]
    #[ignore]
    fn regenerate_golden_fixtures() {
        let dir = fixture_dir();
        std::fs::create_dir_all(&dir).unwrap();
        let p = desk_params(0);
        let img = test_image(32, 32);
        let f = p.feature_forward(&img).unwrap();
        crate::tensor::save_tensor(dir.join("feature_seed0.impt"), &f, DType::F64).unwrap();
        let q = p.quality_forward(&f).unwrap();
        crate::tensor::save_tensor(dir.join("quality_seed0.impt"), &q, DType::F64).unwrap();
    }

    #[test]
    fn forward_pass_matches_golden_fixture() {
        let dir = fixture_dir();
        let p = desk_params(0);
        let img = test_image(32, 32);
        let f = p.feature_forward(&img).unwrap();
        let (golden, dtype) =
            crate::tensor::load_tensor(dir.join("feature_seed0.impt")).unwrap();
        assert_eq!(dtype, DType::F64);
        assert_eq!(f, golden, "feature forward drifted from the committed fixture");
        let q = p.quality_forward(&f).unwrap();
        let (golden_q, _) = crate::tensor::load_tensor(dir.join("quality_seed0.impt")).unwrap();
        assert_eq!(q, golden_q, "quality forward drifted from the committed fixture");
    }
}
