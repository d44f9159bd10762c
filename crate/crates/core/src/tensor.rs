//! Dense `(channels, height, width)` tensors and 2-D convolution.
//!
//! Storage is channel-major, row-major within a channel: the element at
//! `(c, y, x)` lives at index `(c * height + y) * width + x`. All math
//! runs in 64-bit floats; a 32-bit convolution variant exists purely for
//! benchmark comparisons. Loop orders are fixed so results are
//! bit-for-bit reproducible across runs.

use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Element width used by the on-disk tensor format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

/// Immutable dense rank-3 tensor.
///
/// Construction validates that the buffer length matches the shape;
/// after that the value never changes (operations return new tensors).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from an existing channel-major buffer.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::DataLength { expected, got: data.len() });
        }
        Ok(Tensor { channels, height, width, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    /// Constant-valued tensor of the given shape.
    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Tensor { channels, height, width, data: vec![value; channels * height * width] }
    }

    /// Fills a tensor by evaluating `f(c, y, x)` at every position.
    pub fn from_fn<F: FnMut(usize, usize, usize) -> f64>(
        channels: usize,
        height: usize,
        width: usize,
        mut f: F,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)` triple.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Element at `(c, y, x)`.
    ///
    /// Panics when the index is out of bounds, like slice indexing.
    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Raw channel-major buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Applies a scalar function elementwise, producing a new tensor.
    pub fn map<F: FnMut(f64) -> f64>(&self, mut f: F) -> Tensor {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.sum() / self.data.len() as f64
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat index of `(c, y, x)`; exposed for gradient code that writes
    /// into matching mutable buffers.
    #[inline]
    pub fn flat_index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

/// Stacks two tensors along the channel axis. Spatial sizes must match.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape {
            op: "concat_channels",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor { channels: a.channels + b.channels, height: a.height, width: a.width, data })
}

/// `alpha * x + y`, elementwise. Shapes must match exactly.
pub fn axpy(alpha: f64, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::Shape {
            op: "axpy",
            detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
        });
    }
    let data = x.data.iter().zip(&y.data).map(|(&a, &b)| alpha * a + b).collect();
    Ok(Tensor { channels: x.channels, height: x.height, width: x.width, data })
}

/// Elementwise product. `y` may either match `x` exactly or be a
/// single-channel map with the same spatial size, in which case it is
/// broadcast across the channels of `x` (the scale-map case).
pub fn hadamard(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() == y.shape() {
        let data = x.data.iter().zip(&y.data).map(|(&a, &b)| a * b).collect();
        return Ok(Tensor { channels: x.channels, height: x.height, width: x.width, data });
    }
    if y.channels == 1 && y.height == x.height && y.width == x.width {
        let plane = y.height * y.width;
        let mut data = Vec::with_capacity(x.data.len());
        for c in 0..x.channels {
            let base = c * plane;
            for i in 0..plane {
                data.push(x.data[base + i] * y.data[i]);
            }
        }
        return Ok(Tensor { channels: x.channels, height: x.height, width: x.width, data });
    }
    Err(Error::Shape {
        op: "hadamard",
        detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
    })
}

/// Convolution kernel stack plus its geometry.
///
/// Weights are stored `(out_channel, in_channel, ky, kx)`-major in one
/// flat buffer. Kernel sides must be odd so that padding can stay
/// symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    weights: Vec<f64>,
}

impl KernelBank {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kh == 0 || kw == 0 {
            return Err(Error::Config("kernel bank dimensions must be positive".into()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel sides must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Config("stride and dilation must be at least 1".into()));
        }
        let expected = out_channels * in_channels * kh * kw;
        if weights.len() != expected {
            return Err(Error::DataLength { expected, got: weights.len() });
        }
        Ok(KernelBank { out_channels, in_channels, kh, kw, stride, dilation, padding, weights })
    }

    /// All-zero kernels with the given geometry.
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Self> {
        let weights = vec![0.0; out_channels * in_channels * kh * kw];
        KernelBank::new(out_channels, in_channels, kh, kw, stride, dilation, padding, weights)
    }

    #[inline]
    pub fn weight(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((oc * self.in_channels + ic) * self.kh + ky) * self.kw + kx]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Spatial output size for an input of `(h, w)`, or an error when the
    /// geometry leaves no valid output position.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out_h = conv_out_dim(h, self.kh, self.stride, self.dilation, self.padding)?;
        let out_w = conv_out_dim(w, self.kw, self.stride, self.dilation, self.padding)?;
        Ok((out_h, out_w))
    }

    /// Weights viewed as a `(out*in, kh, kw)` tensor, for serialization.
    pub fn weights_tensor(&self) -> Tensor {
        Tensor {
            channels: self.out_channels * self.in_channels,
            height: self.kh,
            width: self.kw,
            data: self.weights.clone(),
        }
    }
}

fn conv_out_dim(input: usize, k: usize, stride: usize, dilation: usize, padding: usize) -> Result<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span {
        return Err(Error::Shape {
            op: "conv2d",
            detail: format!(
                "input extent {input} with padding {padding} is smaller than kernel span {span}"
            ),
        });
    }
    Ok((padded - span) / stride + 1)
}

/// 2-D cross-correlation of `input` with `bank`, adding one bias value
/// per output channel. Out-of-bounds taps read zero (zero padding).
///
/// The accumulation order is fixed (input channel, then kernel row, then
/// kernel column), so outputs are bit-identical run to run.
pub fn conv2d(input: &Tensor, bank: &KernelBank, bias: &[f64]) -> Result<Tensor> {
    if input.channels != bank.in_channels {
        return Err(Error::Shape {
            op: "conv2d",
            detail: format!(
                "input has {} channels, kernel bank expects {}",
                input.channels, bank.in_channels
            ),
        });
    }
    if bias.len() != bank.out_channels {
        return Err(Error::DataLength { expected: bank.out_channels, got: bias.len() });
    }
    let (out_h, out_w) = bank.output_size(input.height, input.width)?;
    let mut out = vec![0.0; bank.out_channels * out_h * out_w];

    let (s, d, p) = (bank.stride as isize, bank.dilation as isize, bank.padding as isize);
    let (in_h, in_w) = (input.height as isize, input.width as isize);

    for oc in 0..bank.out_channels {
        let out_base = oc * out_h * out_w;
        out[out_base..out_base + out_h * out_w].fill(bias[oc]);
        for ic in 0..bank.in_channels {
            let in_base = ic * input.height * input.width;
            for ky in 0..bank.kh {
                // Valid output rows for this kernel row: 0 <= oy*s + ky*d - p < in_h.
                let off_y = ky as isize * d - p;
                let oy_lo = ((-off_y).max(0) + s - 1) / s;
                let oy_hi = ((in_h - 1 - off_y) / s).min(out_h as isize - 1);
                for kx in 0..bank.kw {
                    let wgt = bank.weight(oc, ic, ky, kx);
                    if wgt == 0.0 {
                        continue;
                    }
                    let off_x = kx as isize * d - p;
                    let ox_lo = ((-off_x).max(0) + s - 1) / s;
                    let ox_hi = ((in_w - 1 - off_x) / s).min(out_w as isize - 1);
                    let mut oy = oy_lo;
                    while oy <= oy_hi {
                        let iy = oy * s + off_y;
                        let row_in = in_base + iy as usize * input.width;
                        let row_out = out_base + oy as usize * out_w;
                        let mut ox = ox_lo;
                        while ox <= ox_hi {
                            let ix = (ox * s + off_x) as usize;
                            out[row_out + ox as usize] += wgt * input.data[row_in + ix];
                            ox += 1;
                        }
                        oy += 1;
                    }
                }
            }
        }
    }
    Ok(Tensor { channels: bank.out_channels, height: out_h, width: out_w, data: out })
}

/// Gradients of [`conv2d`] with respect to its input, weights and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    /// Same layout as [`KernelBank::weights`].
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Reverse-mode derivative of [`conv2d`]. `upstream` is the loss
/// gradient with respect to the *pre-nonlinearity* output.
pub fn conv2d_backward(input: &Tensor, bank: &KernelBank, upstream: &Tensor) -> Result<ConvGrads> {
    if input.channels != bank.in_channels {
        return Err(Error::Shape {
            op: "conv2d_backward",
            detail: format!(
                "input has {} channels, kernel bank expects {}",
                input.channels, bank.in_channels
            ),
        });
    }
    let (out_h, out_w) = bank.output_size(input.height, input.width)?;
    if upstream.shape() != (bank.out_channels, out_h, out_w) {
        return Err(Error::Shape {
            op: "conv2d_backward",
            detail: format!(
                "upstream {:?} does not match output shape ({}, {out_h}, {out_w})",
                upstream.shape(),
                bank.out_channels
            ),
        });
    }
    let mut d_input = vec![0.0; input.data.len()];
    let mut d_weights = vec![0.0; bank.weights.len()];
    let mut d_bias = vec![0.0; bank.out_channels];

    let (s, d, p) = (bank.stride as isize, bank.dilation as isize, bank.padding as isize);
    let (in_h, in_w) = (input.height as isize, input.width as isize);

    for oc in 0..bank.out_channels {
        let out_base = oc * out_h * out_w;
        d_bias[oc] = upstream.data[out_base..out_base + out_h * out_w].iter().sum();
        for ic in 0..bank.in_channels {
            let in_base = ic * input.height * input.width;
            for ky in 0..bank.kh {
                let off_y = ky as isize * d - p;
                let oy_lo = ((-off_y).max(0) + s - 1) / s;
                let oy_hi = ((in_h - 1 - off_y) / s).min(out_h as isize - 1);
                for kx in 0..bank.kw {
                    let widx = ((oc * bank.in_channels + ic) * bank.kh + ky) * bank.kw + kx;
                    let wgt = bank.weights[widx];
                    let off_x = kx as isize * d - p;
                    let ox_lo = ((-off_x).max(0) + s - 1) / s;
                    let ox_hi = ((in_w - 1 - off_x) / s).min(out_w as isize - 1);
                    let mut acc_w = 0.0;
                    let mut oy = oy_lo;
                    while oy <= oy_hi {
                        let iy = oy * s + off_y;
                        let row_in = in_base + iy as usize * input.width;
                        let row_out = out_base + oy as usize * out_w;
                        let mut ox = ox_lo;
                        while ox <= ox_hi {
                            let ix = (ox * s + off_x) as usize;
                            let u = upstream.data[row_out + ox as usize];
                            acc_w += u * input.data[row_in + ix];
                            d_input[row_in + ix] += wgt * u;
                            ox += 1;
                        }
                        oy += 1;
                    }
                    d_weights[widx] += acc_w;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor {
            channels: input.channels,
            height: input.height,
            width: input.width,
            data: d_input,
        },
        weights: d_weights,
        bias: d_bias,
    })
}

/// 32-bit convolution used only by the benchmark suite to compare
/// element widths; the 64-bit [`conv2d`] is the product path.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_f32(
    input: &[f32],
    in_c: usize,
    in_h: usize,
    in_w: usize,
    bank: &KernelBank,
    weights: &[f32],
    bias: &[f32],
) -> Result<(Vec<f32>, usize, usize)> {
    if in_c != bank.in_channels || input.len() != in_c * in_h * in_w {
        return Err(Error::Shape {
            op: "conv2d_f32",
            detail: format!("input buffer {}x{}x{} does not fit kernel bank", in_c, in_h, in_w),
        });
    }
    if weights.len() != bank.weights.len() || bias.len() != bank.out_channels {
        return Err(Error::DataLength { expected: bank.weights.len(), got: weights.len() });
    }
    let (out_h, out_w) = bank.output_size(in_h, in_w)?;
    let mut out = vec![0.0f32; bank.out_channels * out_h * out_w];
    let (s, d, p) = (bank.stride as isize, bank.dilation as isize, bank.padding as isize);

    for oc in 0..bank.out_channels {
        let out_base = oc * out_h * out_w;
        out[out_base..out_base + out_h * out_w].fill(bias[oc]);
        for ic in 0..bank.in_channels {
            let in_base = ic * in_h * in_w;
            for ky in 0..bank.kh {
                let off_y = ky as isize * d - p;
                let oy_lo = ((-off_y).max(0) + s - 1) / s;
                let oy_hi = ((in_h as isize - 1 - off_y) / s).min(out_h as isize - 1);
                for kx in 0..bank.kw {
                    let wgt = weights[((oc * bank.in_channels + ic) * bank.kh + ky) * bank.kw + kx];
                    let off_x = kx as isize * d - p;
                    let ox_lo = ((-off_x).max(0) + s - 1) / s;
                    let ox_hi = ((in_w as isize - 1 - off_x) / s).min(out_w as isize - 1);
                    let mut oy = oy_lo;
                    while oy <= oy_hi {
                        let iy = oy * s + off_y;
                        let row_in = in_base + iy as usize * in_w;
                        let row_out = out_base + oy as usize * out_w;
                        let mut ox = ox_lo;
                        while ox <= ox_hi {
                            let ix = (ox * s + off_x) as usize;
                            out[row_out + ox as usize] += wgt * input[row_in + ix];
                            ox += 1;
                        }
                        oy += 1;
                    }
                }
            }
        }
    }
    Ok((out, out_h, out_w))
}

// ---------------------------------------------------------------------------
// Binary tensor format: magic "IMPT", u32 version, u32 dtype tag
// (0 = f64, 1 = f32), u32 channels/height/width, then raw little-endian
// element data.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"IMPT";
const FORMAT_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Serializes a tensor. `dtype` selects the stored element width;
/// storing as `F32` rounds each element to the nearest 32-bit float.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, FORMAT_VERSION)?;
    write_u32(w, match dtype {
        DType::F64 => 0,
        DType::F32 => 1,
    })?;
    for dim in [t.channels, t.height, t.width] {
        let dim32 = u32::try_from(dim)
            .map_err(|_| Error::Format(format!("dimension {dim} exceeds format limit")))?;
        write_u32(w, dim32)?;
    }
    match dtype {
        DType::F64 => {
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::F32 => {
            for &v in &t.data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Deserializes a tensor written by [`write_tensor`], reporting which
/// element width the file carried. 32-bit data is widened to f64.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Tensor, DType)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported tensor format version {version}")));
    }
    let dtype = match read_u32(r)? {
        0 => DType::F64,
        1 => DType::F32,
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    };
    let channels = read_u32(r)? as usize;
    let height = read_u32(r)? as usize;
    let width = read_u32(r)? as usize;
    let volume = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::Format("tensor volume overflows".into()))?;
    let mut data = Vec::with_capacity(volume);
    match dtype {
        DType::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..volume {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
        DType::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..volume {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
    }
    Ok((Tensor { channels, height, width, data }, dtype))
}

/// Writes a tensor to a file path.
pub fn save_tensor<P: AsRef<Path>>(path: P, t: &Tensor, dtype: DType) -> Result<()> {
    let mut file = io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut file, t, dtype)
}

/// Reads a tensor from a file path.
pub fn load_tensor<P: AsRef<Path>>(path: P) -> Result<(Tensor, DType)> {
    let mut file = io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut file)
}
