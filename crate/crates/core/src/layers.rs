//! Convolutional building blocks: convolution (stride, padding, dilation),
//! transposed convolution for upsampling, bilinear kernel initialization,
//! ReLU, softmax cross-entropy over label maps, and elementwise fusion.
//!
//! Convolution here is cross-correlation (no kernel flip). The transposed
//! convolution is implemented as the exact linear adjoint of the forward
//! convolution with the same kernel/stride/pad, so ⟨conv(x), y⟩ = ⟨x, deconv(y)⟩
//! holds to rounding.

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }

    pub fn stride(mut self, s: usize) -> ConvSpec {
        self.stride = s;
        self
    }

    pub fn pad(mut self, p: usize) -> ConvSpec {
        self.pad = p;
        self
    }

    pub fn dilation(mut self, d: usize) -> ConvSpec {
        self.dilation = d;
        self
    }

    /// Output spatial extent for input extent `n`:
    /// floor((n + 2·pad − dilation·(kernel−1) − 1)/stride) + 1, which must be ≥ 1.
    pub fn out_size(&self, n: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::Config(format!("degenerate conv spec {self:?}")));
        }
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = n + 2 * self.pad;
        if padded < span {
            return Err(Error::Config(format!(
                "conv output size < 1: input {n}, spec {self:?}"
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }
}

/// Geometry of a transposed convolution upsampling by integer `factor` k.
/// Kernel size 2k − (k mod 2), stride k, pad floor(k/2): output extent is
/// exactly k × the input extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeconvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub factor: usize,
}

impl DeconvSpec {
    pub fn new(in_channels: usize, out_channels: usize, factor: usize) -> Result<DeconvSpec> {
        if factor == 0 {
            return Err(Error::Config("deconv factor must be >= 1".into()));
        }
        Ok(DeconvSpec {
            in_channels,
            out_channels,
            factor,
        })
    }

    pub fn kernel(&self) -> usize {
        2 * self.factor - (self.factor % 2)
    }

    pub fn stride(&self) -> usize {
        self.factor
    }

    pub fn pad(&self) -> usize {
        self.factor / 2 // == ceil((k−1)/2)
    }

    /// Weight layout is (in_channels, out_channels, kernel, kernel): the
    /// weights of the forward convolution this op is the adjoint of.
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.in_channels,
            self.out_channels,
            self.kernel(),
            self.kernel(),
        ]
    }

    /// The forward convolution whose adjoint this deconvolution is.
    fn as_conv(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            kernel: self.kernel(),
            stride: self.stride(),
            pad: self.pad(),
            dilation: 1,
        }
    }
}

#[inline]
fn floor_div(a: i64, b: i64) -> i64 {
    a.div_euclid(b)
}

#[inline]
fn ceil_div(a: i64, b: i64) -> i64 {
    -(-a).div_euclid(b)
}

/// Range of output coordinates `o` for which `o*stride + k_off - pad` lands
/// inside [0, in_len). Returns (start, end) with end exclusive.
#[inline]
fn valid_out_range(out_len: usize, in_len: usize, stride: usize, pad: usize, k_off: usize) -> (usize, usize) {
    let (s, p, ko) = (stride as i64, pad as i64, k_off as i64);
    let lo = ceil_div(p - ko, s).max(0);
    let hi = floor_div(in_len as i64 - 1 + p - ko, s).min(out_len as i64 - 1);
    if hi < lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize + 1)
    }
}

fn check_conv_args(input: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: Option<&Tensor>) -> Result<()> {
    let shp = input.shape();
    if shp.len() != 4 {
        return Err(Error::shape("conv2d input", &[0, 0, 0, 0], shp));
    }
    if shp[1] != spec.in_channels {
        return Err(Error::Config(format!(
            "conv2d channel mismatch: input has {}, spec expects {}",
            shp[1], spec.in_channels
        )));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::shape("conv2d weights", &spec.weight_shape(), weights.shape()));
    }
    if let Some(bias) = bias {
        if bias.shape() != [spec.out_channels] {
            return Err(Error::shape("conv2d bias", &[spec.out_channels], bias.shape()));
        }
    }
    Ok(())
}

// Finiteness guard on op outputs: active in debug/test builds, compiled out
// of release hot loops.
macro_rules! debug_finite {
    ($t:expr, $op:literal) => {
        #[cfg(debug_assertions)]
        $t.require_finite($op)?;
    };
}

/// Cross-correlation of `input` (B×C×H×W) with `weights`
/// (out_ch×in_ch×k×k) plus optional per-channel bias.
pub fn conv2d(input: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    check_conv_args(input, spec, weights, bias)?;
    let (bsz, h, w_in) = (input.shape()[0], input.shape()[2], input.shape()[3]);
    let (out_h, out_w) = (spec.out_size(h)?, spec.out_size(w_in)?);
    let (cin, cout, k) = (spec.in_channels, spec.out_channels, spec.kernel);
    let (stride, pad, dil) = (spec.stride, spec.pad, spec.dilation);

    let mut out = Tensor::zeros(&[bsz, cout, out_h, out_w]);
    let x = input.data();
    let wd = weights.data();
    let od = out.data_mut();

    for b in 0..bsz {
        for co in 0..cout {
            let out_base = (b * cout + co) * out_h * out_w;
            if let Some(bias) = bias {
                let bv = bias.data()[co];
                od[out_base..out_base + out_h * out_w]
                    .iter_mut()
                    .for_each(|v| *v = bv);
            }
            for ci in 0..cin {
                let in_base = (b * cin + ci) * h * w_in;
                for kh in 0..k {
                    let (oh0, oh1) = valid_out_range(out_h, h, stride, pad, kh * dil);
                    for kw in 0..k {
                        let wv = wd[((co * cin + ci) * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow0, ow1) = valid_out_range(out_w, w_in, stride, pad, kw * dil);
                        for oh in oh0..oh1 {
                            let ih = oh * stride + kh * dil - pad;
                            let in_row = in_base + ih * w_in;
                            let out_row = out_base + oh * out_w;
                            for ow in ow0..ow1 {
                                let iw = ow * stride + kw * dil - pad;
                                od[out_row + ow] += wv * x[in_row + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    debug_finite!(out, "conv2d");
    Ok(out)
}

/// Gradient of [`conv2d`] w.r.t. its input. `(in_h, in_w)` are the spatial
/// extents of the forward input (they are not always recoverable from the
/// output extents because of flooring).
pub fn conv2d_backward_input(
    dout: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor> {
    let shp = dout.shape();
    if shp.len() != 4 || shp[1] != spec.out_channels {
        return Err(Error::shape(
            "conv2d_backward_input",
            &[0, spec.out_channels, 0, 0],
            shp,
        ));
    }
    let (bsz, out_h, out_w) = (shp[0], shp[2], shp[3]);
    if out_h != spec.out_size(in_h)? || out_w != spec.out_size(in_w)? {
        return Err(Error::shape(
            "conv2d_backward_input extents",
            &[spec.out_size(in_h)?, spec.out_size(in_w)?],
            &[out_h, out_w],
        ));
    }
    let (cin, cout, k) = (spec.in_channels, spec.out_channels, spec.kernel);
    let (stride, pad, dil) = (spec.stride, spec.pad, spec.dilation);

    let mut dx = Tensor::zeros(&[bsz, cin, in_h, in_w]);
    let dod = dout.data();
    let wd = weights.data();
    let dxd = dx.data_mut();

    for b in 0..bsz {
        for co in 0..cout {
            let out_base = (b * cout + co) * out_h * out_w;
            for ci in 0..cin {
                let in_base = (b * cin + ci) * in_h * in_w;
                for kh in 0..k {
                    let (oh0, oh1) = valid_out_range(out_h, in_h, stride, pad, kh * dil);
                    for kw in 0..k {
                        let wv = wd[((co * cin + ci) * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow0, ow1) = valid_out_range(out_w, in_w, stride, pad, kw * dil);
                        for oh in oh0..oh1 {
                            let ih = oh * stride + kh * dil - pad;
                            let in_row = in_base + ih * in_w;
                            let out_row = out_base + oh * out_w;
                            for ow in ow0..ow1 {
                                let iw = ow * stride + kw * dil - pad;
                                dxd[in_row + iw] += wv * dod[out_row + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Gradients of [`conv2d`] w.r.t. weights and bias.
pub fn conv2d_backward_params(dout: &Tensor, spec: &ConvSpec, input: &Tensor) -> Result<(Tensor, Tensor)> {
    let ishp = input.shape();
    let oshp = dout.shape();
    if ishp.len() != 4 || oshp.len() != 4 {
        return Err(Error::shape("conv2d_backward_params", &[0, 0, 0, 0], oshp));
    }
    let (bsz, h, w_in) = (ishp[0], ishp[2], ishp[3]);
    let (out_h, out_w) = (oshp[2], oshp[3]);
    let (cin, cout, k) = (spec.in_channels, spec.out_channels, spec.kernel);
    let (stride, pad, dil) = (spec.stride, spec.pad, spec.dilation);

    let mut dw = Tensor::zeros(&spec.weight_shape());
    let mut db = Tensor::zeros(&[cout]);
    let x = input.data();
    let dod = dout.data();
    {
        let dbd = db.data_mut();
        for b in 0..bsz {
            for co in 0..cout {
                let out_base = (b * cout + co) * out_h * out_w;
                dbd[co] += dod[out_base..out_base + out_h * out_w].iter().sum::<f64>();
            }
        }
    }
    let dwd = dw.data_mut();
    for b in 0..bsz {
        for co in 0..cout {
            let out_base = (b * cout + co) * out_h * out_w;
            for ci in 0..cin {
                let in_base = (b * cin + ci) * h * w_in;
                for kh in 0..k {
                    let (oh0, oh1) = valid_out_range(out_h, h, stride, pad, kh * dil);
                    for kw in 0..k {
                        let (ow0, ow1) = valid_out_range(out_w, w_in, stride, pad, kw * dil);
                        let mut acc = 0.0;
                        for oh in oh0..oh1 {
                            let ih = oh * stride + kh * dil - pad;
                            let in_row = in_base + ih * w_in;
                            let out_row = out_base + oh * out_w;
                            for ow in ow0..ow1 {
                                let iw = ow * stride + kw * dil - pad;
                                acc += dod[out_row + ow] * x[in_row + iw];
                            }
                        }
                        dwd[((co * cin + ci) * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    }
    Ok((dw, db))
}

/// Transposed convolution: the adjoint of [`conv2d`] with the spec's
/// kernel/stride/pad. Upsamples each spatial extent by exactly `factor`.
pub fn deconv2d(input: &Tensor, spec: &DeconvSpec, weights: &Tensor) -> Result<Tensor> {
    let shp = input.shape();
    if shp.len() != 4 {
        return Err(Error::shape("deconv2d input", &[0, 0, 0, 0], shp));
    }
    if shp[1] != spec.in_channels {
        return Err(Error::Config(format!(
            "deconv2d channel mismatch: input has {}, spec expects {}",
            shp[1], spec.in_channels
        )));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::shape("deconv2d weights", &spec.weight_shape(), weights.shape()));
    }
    let (out_h, out_w) = (shp[2] * spec.factor, shp[3] * spec.factor);
    let out = conv2d_backward_input(input, &spec.as_conv(), weights, out_h, out_w)?;
    debug_finite!(out, "deconv2d");
    Ok(out)
}

/// Gradient of [`deconv2d`] w.r.t. its input: the forward convolution.
pub fn deconv2d_backward_input(dout: &Tensor, spec: &DeconvSpec, weights: &Tensor) -> Result<Tensor> {
    conv2d(dout, &spec.as_conv(), weights, None)
}

/// Gradient of [`deconv2d`] w.r.t. its weights.
pub fn deconv2d_backward_weights(dout: &Tensor, spec: &DeconvSpec, input: &Tensor) -> Result<Tensor> {
    // For y = Cᵀx, the weight gradient is the conv weight gradient with the
    // roles of (input, output cotangent) swapped.
    let (dw, _db) = conv2d_backward_params(input, &spec.as_conv(), dout)?;
    Ok(dw)
}

/// Per-channel bilinear upsampling kernel for factor `k`:
/// w[i,j] = (1 − |i/f − c|)(1 − |j/f − c|) with s = 2k − (k mod 2),
/// f = ceil(s/2), c = (2f − 1 − f mod 2)/(2f). Cross-channel entries are zero.
pub fn bilinear_kernel(k: usize, channels: usize) -> Tensor {
    let s = 2 * k - (k % 2);
    let f = s.div_ceil(2) as f64;
    let c = (2.0 * f - 1.0 - (f as usize % 2) as f64) / (2.0 * f);
    let mut t = Tensor::zeros(&[channels, channels, s, s]);
    for ch in 0..channels {
        for i in 0..s {
            for j in 0..s {
                let wi = 1.0 - (i as f64 / f - c).abs();
                let wj = 1.0 - (j as f64 / f - c).abs();
                *t.at4_mut(ch, ch, i, j) = wi * wj;
            }
        }
    }
    t
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0))
}

/// dx = dout where the forward input was positive, 0 elsewhere.
pub fn relu_backward(dout: &Tensor, input: &Tensor) -> Result<Tensor> {
    if dout.shape() != input.shape() {
        return Err(Error::shape("relu_backward", input.shape(), dout.shape()));
    }
    Ok(Tensor::from_fn(input.shape(), |i| {
        if input.data()[i] > 0.0 {
            dout.data()[i]
        } else {
            0.0
        }
    }))
}

/// a + b, with the backward routing dout to both inputs unchanged.
pub fn elementwise_fuse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.add(b)
}

/// Softmax cross-entropy over logits B×n_cl×H×W against per-item label maps.
/// Pixels labeled `ignore_label` contribute zero loss and zero gradient.
/// Returns (mean loss over non-ignored pixels, gradient w.r.t. logits).
pub fn softmax_ce(logits: &Tensor, labels: &[&LabelMap], ignore_label: u8) -> Result<(f64, Tensor)> {
    let shp = logits.shape();
    if shp.len() != 4 {
        return Err(Error::shape("softmax_ce logits", &[0, 0, 0, 0], shp));
    }
    let (bsz, n_cl, h, w) = (shp[0], shp[1], shp[2], shp[3]);
    if labels.len() != bsz {
        return Err(Error::Data(format!(
            "softmax_ce: {} label maps for batch of {bsz}",
            labels.len()
        )));
    }
    for lm in labels {
        if lm.height() != h || lm.width() != w {
            return Err(Error::shape("softmax_ce labels", &[h, w], &[lm.height(), lm.width()]));
        }
    }

    let mut grad = Tensor::zeros(shp);
    let ld = logits.data();
    let plane = h * w;
    let mut total = 0.0;
    let mut n_valid = 0usize;

    // first pass: count valid pixels so the gradient can be scaled in place
    for lm in labels {
        for &lab in lm.data() {
            if lab != ignore_label {
                if usize::from(lab) >= n_cl {
                    return Err(Error::Data(format!(
                        "label {lab} out of range for {n_cl} classes"
                    )));
                }
                n_valid += 1;
            }
        }
    }
    if n_valid == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / n_valid as f64;

    let gd = grad.data_mut();
    let mut probs = vec![0.0f64; n_cl];
    for (b, lm) in labels.iter().enumerate() {
        let base = b * n_cl * plane;
        for py in 0..h {
            for px in 0..w {
                let lab = lm.get(py, px);
                if lab == ignore_label {
                    continue;
                }
                let pix = py * w + px;
                // stable softmax over the channel fiber
                let mut mx = f64::NEG_INFINITY;
                for c in 0..n_cl {
                    mx = mx.max(ld[base + c * plane + pix]);
                }
                let mut z = 0.0;
                for c in 0..n_cl {
                    let e = (ld[base + c * plane + pix] - mx).exp();
                    probs[c] = e;
                    z += e;
                }
                let lab = usize::from(lab);
                total += -(probs[lab] / z).ln();
                for c in 0..n_cl {
                    let p = probs[c] / z;
                    let target = if c == lab { 1.0 } else { 0.0 };
                    gd[base + c * plane + pix] = (p - target) * inv_n;
                }
            }
        }
    }
    let loss = total * inv_n;
    #[cfg(debug_assertions)]
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite value produced by softmax_ce".into()));
    }
    Ok((loss, grad))
}
