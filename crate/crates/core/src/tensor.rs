//! Dense row-major `f32` tensors and the kernels the network needs.
//!
//! Images are channels-first (`C×H×W`). Reductions inside [`matmul`] and
//! [`conv2d`] accumulate in `f64`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-1 tensor over `data`.
    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Same data viewed as a rank-1 tensor.
    pub fn flatten(self) -> Self {
        Tensor::vector(self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Index of the largest element, ties resolved to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(self.mismatch("max_abs_diff", other));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    fn mismatch(&self, op: &'static str, other: &Tensor) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape.clone(),
            right: other.shape.clone(),
        }
    }
}

/// `[rows×inner] · [inner×cols]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(a.mismatch("matmul", b));
    }
    let (rows, inner, cols) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = &a.data[r * inner..(r + 1) * inner];
        for c in 0..cols {
            let mut acc = 0.0f64;
            for (k, &av) in row.iter().enumerate() {
                acc += av as f64 * b.data[k * cols + c] as f64;
            }
            out.push(acc as f32);
        }
    }
    Ok(Tensor {
        shape: vec![rows, cols],
        data: out,
    })
}

/// `W x + b` for `W: [out×in]`, `x` of any shape with `in` elements.
pub fn dense(weight: &Tensor, bias: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (out_dim, in_dim) = dense_dims(weight, bias)?;
    if x.len() != in_dim {
        return Err(weight.mismatch("dense", x));
    }
    let out = (0..out_dim)
        .map(|o| {
            let row = &weight.data[o * in_dim..(o + 1) * in_dim];
            let mut acc = bias.data[o] as f64;
            for (w, v) in row.iter().zip(&x.data) {
                acc += *w as f64 * *v as f64;
            }
            acc as f32
        })
        .collect();
    Ok(Tensor::vector(out))
}

pub(crate) fn dense_dims(weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    if weight.rank() != 2 || bias.rank() != 1 || bias.shape[0] != weight.shape[0] {
        return Err(weight.mismatch("dense", bias));
    }
    Ok((weight.shape[0], weight.shape[1]))
}

/// Geometry of a 2-D convolution, shared by the forward and backward kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input_shape.len() != 3 || kernel_shape.len() != 4 || input_shape[0] != kernel_shape[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input_shape.to_vec(),
                right: kernel_shape.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::Geometry("conv2d stride must be positive".into()));
        }
        let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
        let (k, kh, kw) = (kernel_shape[0], kernel_shape[2], kernel_shape[3]);
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return Err(Error::Geometry(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(ConvGeometry {
            in_channels: c,
            height: h,
            width: w,
            out_channels: k,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_h, self.out_w]
    }

    /// Visits every (output index, input index, kernel index) triple of the
    /// convolution, skipping taps that land in the zero padding.
    pub(crate) fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (c_in, h, w) = (self.in_channels, self.height, self.width);
        let (kh, kw) = (self.kernel_h, self.kernel_w);
        for k in 0..self.out_channels {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let out_idx = (k * self.out_h + oy) * self.out_w + ox;
                    for c in 0..c_in {
                        for dy in 0..kh {
                            let iy = (oy * self.stride + dy) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ix = (ox * self.stride + dx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let in_idx = (c * h + iy as usize) * w + ix as usize;
                                let w_idx = ((k * c_in + c) * kh + dy) * kw + dx;
                                f(out_idx, in_idx, w_idx);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding; output extent `(H + 2p - kh) / stride + 1`.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let geo = ConvGeometry::new(&input.shape, &kernels.shape, stride, padding)?;
    if bias.shape != [geo.out_channels] {
        return Err(kernels.mismatch("conv2d bias", bias));
    }
    let plane = geo.out_h * geo.out_w;
    let mut acc: Vec<f64> = (0..geo.out_channels * plane)
        .map(|i| bias.data[i / plane] as f64)
        .collect();
    geo.for_each_tap(|o, i, k| {
        acc[o] += input.data[i] as f64 * kernels.data[k] as f64;
    });
    Ok(Tensor {
        shape: geo.output_shape().to_vec(),
        data: acc.into_iter().map(|v| v as f32).collect(),
    })
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Per-channel window maximum.
pub fn maxpool2d(t: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    maxpool2d_with_indices(t, window, stride).map(|(out, _)| out)
}

/// Like [`maxpool2d`], also returning for every output element the flat
/// index of the winning input element (ties go to the lowest index).
pub fn maxpool2d_with_indices(
    t: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let [c, h, w] = pool_input_dims(t, window, stride)?;
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut winners = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + oy * stride) * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                        if t.data[idx] > t.data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(t.data[best]);
                winners.push(best);
            }
        }
    }
    Ok((
        Tensor {
            shape: vec![c, oh, ow],
            data: out,
        },
        winners,
    ))
}

pub(crate) fn pool_input_dims(t: &Tensor, window: usize, stride: usize) -> Result<[usize; 3]> {
    if t.rank() != 3 {
        return Err(Error::Geometry(format!(
            "maxpool2d expects a C×H×W tensor, got shape {:?}",
            t.shape
        )));
    }
    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::Geometry(format!(
            "maxpool2d window {window} stride {stride} does not fit {h}x{w}"
        )));
    }
    Ok([c, h, w])
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(a.mismatch("add", b));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn scale(t: &Tensor, factor: f32) -> Tensor {
    t.map(|v| v * factor)
}
