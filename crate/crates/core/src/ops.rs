//! Pure tensor kernels.
//!
//! Both the plain forward pass and the autodiff tape call these functions, so
//! a value computed with or without a tape is bitwise identical.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Output spatial size of a convolution along one axis.
pub fn conv_output_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry shared by the convolution forward and backward kernels.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {input:?} must be [h,w,c] and kernel {kernel:?} [kh,kw,cin,cout]"),
            ));
        }
        let (h, w, cin) = (input[0], input[1], input[2]);
        let (kh, kw, kcin, cout) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let (oh, ow) = match (
            conv_output_dim(h, kh, stride, padding),
            conv_output_dim(w, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("padded input {h}x{w} (pad {padding}) smaller than kernel {kh}x{kw}"),
                ))
            }
        };
        Ok(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            oh,
            ow,
            stride,
            padding,
        })
    }

    /// Input coordinate hit by output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Cross-correlation of an `[h, w, c_in]` input with a `[kh, kw, c_in, c_out]` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o_base = (oy * g.ow + ox) * g.cout;
            let acc = &mut out[o_base..o_base + g.cout];
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.source(ox, kx, g.w) else { continue };
                    let x_base = (iy * g.w + ix) * g.cin;
                    let k_base = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let v = x[x_base + ci];
                        let krow = &k[k_base + ci * g.cout..k_base + (ci + 1) * g.cout];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += v * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.oh, g.ow, g.cout], out))
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input_shape, kernel.shape(), stride, padding)?;
    let k = kernel.data();
    let go = grad_out.data();
    let mut dx = vec![0.0; g.h * g.w * g.cin];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let grow = &go[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.source(ox, kx, g.w) else { continue };
                    let x_base = (iy * g.w + ix) * g.cin;
                    let k_base = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let krow = &k[k_base + ci * g.cout..k_base + (ci + 1) * g.cout];
                        let s: f64 = krow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        dx[x_base + ci] += s;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub fn conv2d_grad_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel_shape, stride, padding)?;
    let x = input.data();
    let go = grad_out.data();
    let mut dk = vec![0.0; g.kh * g.kw * g.cin * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let grow = &go[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.source(ox, kx, g.w) else { continue };
                    let x_base = (iy * g.w + ix) * g.cin;
                    let k_base = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let v = x[x_base + ci];
                        let drow = &mut dk[k_base + ci * g.cout..k_base + (ci + 1) * g.cout];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += v * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(kernel_shape.to_vec(), dk))
}

/// Adds a per-channel bias to a channel-last tensor.
pub fn add_channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = *input.shape().last().unwrap_or(&0);
    if bias.rank() != 1 || bias.len() != c {
        return Err(Error::shape(
            "add_channel_bias",
            format!("bias {:?} does not match channels of {:?}", bias.shape(), input.shape()),
        ));
    }
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Sums a channel-last gradient over all positions, giving the bias gradient.
pub fn channel_sums(grad: &Tensor) -> Tensor {
    let c = *grad.shape().last().expect("non-empty shape");
    let mut out = vec![0.0; c];
    for row in grad.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![c], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Spatial mean of an `[h, w, c]` map, giving a length-`c` vector.
pub fn global_average_pool(input: &Tensor) -> Result<Tensor> {
    expect_rank("global_average_pool", input, 3)?;
    let s = input.shape();
    let (hw, c) = (s[0] * s[1], s[2]);
    let mut out = vec![0.0; c];
    for row in input.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = 1.0 / hw as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(Tensor::from_parts(vec![c], out))
}

/// Affine map `weight · x + bias` with `weight` stored `[out, in]`.
pub fn dense(weight: &Tensor, input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank("dense", weight, 2)?;
    let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
    if input.len() != cols || bias.len() != rows {
        return Err(Error::shape(
            "dense",
            format!(
                "weight {:?}, input {:?}, bias {:?}",
                weight.shape(),
                input.shape(),
                bias.shape()
            ),
        ));
    }
    let x = input.data();
    let out: Vec<f64> = weight
        .data()
        .chunks(cols)
        .zip(bias.data())
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect();
    Ok(Tensor::from_parts(vec![rows], out))
}

/// `A'[i, j, c] = A[i, j, c] · f[i, j]` for every channel `c`.
pub fn spatial_multiply(features: &Tensor, filter: &Tensor) -> Result<Tensor> {
    expect_rank("spatial_multiply", features, 3)?;
    let s = features.shape();
    if filter.shape() != [s[0], s[1]] {
        return Err(Error::shape(
            "spatial_multiply",
            format!("filter {:?} does not match feature map {:?}", filter.shape(), s),
        ));
    }
    let c = s[2];
    let mut out = features.clone();
    for (row, &f) in out.data_mut().chunks_mut(c).zip(filter.data()) {
        for v in row {
            *v *= f;
        }
    }
    Ok(out)
}

/// Divides by the L2 norm over all elements.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let n = v.norm_l2();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateFilter);
    }
    Ok(v.map(|x| x / n))
}

/// Softmax over all elements (shape preserved), computed with max subtraction.
pub fn softmax(v: &Tensor) -> Tensor {
    let m = v.max();
    let e = v.map(|x| (x - m).exp());
    let s = e.sum();
    e.map(|x| x / s)
}

/// `log Σ exp(v)` computed with max subtraction.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Identity-covariance Gaussian bump with peak 1, centered at `mu = (row, col)`.
pub fn gaussian_grid(mu: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    if mu.len() != 2 {
        return Err(Error::shape("gaussian_grid", format!("mu must have 2 elements, got {:?}", mu.shape())));
    }
    let (mr, mc) = (mu.data()[0], mu.data()[1]);
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let (dr, dc) = (i as f64 - mr, j as f64 - mc);
            out.push((-(dr * dr + dc * dc) / 2.0).exp());
        }
    }
    Ok(Tensor::from_parts(vec![rows, cols], out))
}
