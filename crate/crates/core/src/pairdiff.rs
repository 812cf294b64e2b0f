//! Cancellation-free central differences for the gradient-check harness.
//!
//! A plain evaluation of (L(θ+ε) − L(θ−ε)) in f64 loses ~11 digits to
//! cancellation: both losses are O(1) and their difference is O(ε·grad),
//! which for weakly-coupled parameters sits below the f64 rounding floor of
//! the loss value. Instead of subtracting two forward passes, this module
//! runs ONE forward pass over value/difference pairs: each intermediate
//! carries (x⁻, x⁺ − x⁻) where the difference component is propagated with
//! exact algebraic identities —
//!
//!   (w+dw)(x+dx) − wx = w·dx + dw·x + dw·dx
//!   tanh a − tanh b   = sinh(a−b) / (cosh a · cosh b)
//!   σ(a) − σ(b)       = (tanh(a/2) − tanh(b/2)) / 2
//!   eᵃ − eᵇ           = eᵇ · expm1(a−b)
//!   ln a − ln b       = log1p((a−b)/b)
//!
//! so the difference is computed to full relative precision and exact zeros
//! stay exactly zero. The divided difference it returns is mathematically
//! the same central difference the spec formula asks for.

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::grid::WeightMode;
use crate::layers::{ConvSpec, DeconvSpec};
use crate::lstm::LstmWeights;
use crate::model::{Model, StMode};
use crate::tensor::{sigmoid, ParamId, ParamSet, Tensor};
use crate::train::Supervision;

/// Value/difference buffer: `v` holds the θ−ε run, `d` holds the exact
/// difference of the θ+ε run against it.
#[derive(Debug, Clone)]
struct PairBuf {
    shape: Vec<usize>,
    v: Vec<f64>,
    d: Vec<f64>,
}

impl PairBuf {
    fn zeros(shape: &[usize]) -> PairBuf {
        let n = shape.iter().product();
        PairBuf {
            shape: shape.to_vec(),
            v: vec![0.0; n],
            d: vec![0.0; n],
        }
    }

    fn from_exact(t: &Tensor) -> PairBuf {
        PairBuf {
            shape: t.shape().to_vec(),
            v: t.data().to_vec(),
            d: vec![0.0; t.numel()],
        }
    }
}

#[inline]
fn tanh_diff(v: f64, d: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    // saturated on both sides: the true difference is below 1e-300
    if v.abs() > 350.0 && (v + d).abs() > 350.0 && v.signum() == (v + d).signum() {
        return 0.0;
    }
    d.sinh() / (v.cosh() * (v + d).cosh())
}

#[inline]
fn sigmoid_diff(v: f64, d: f64) -> f64 {
    0.5 * tanh_diff(0.5 * v, 0.5 * d)
}

#[inline]
fn mul_pair(av: f64, ad: f64, bv: f64, bd: f64) -> (f64, f64) {
    (av * bv, av * bd + ad * bv + ad * bd)
}

/// Parameter views with exactly one perturbed coordinate.
struct PairParams<'p> {
    params: &'p ParamSet,
    perturbed: ParamId,
    coord: usize,
    /// θ_k − ε as stored in f64.
    v_minus: f64,
    /// fl(θ_k + ε) − fl(θ_k − ε), exact.
    dk: f64,
}

impl<'p> PairParams<'p> {
    fn new(params: &'p ParamSet, perturbed: ParamId, coord: usize, eps: f64) -> PairParams<'p> {
        let orig = params.value(perturbed).data()[coord];
        let plus = orig + eps;
        let minus = orig - eps;
        PairParams {
            params,
            perturbed,
            coord,
            v_minus: minus,
            dk: plus - minus, // exact: plus and minus are within a factor 2
        }
    }

    #[inline]
    fn value(&self, id: ParamId, k: usize) -> (f64, f64) {
        let base = self.params.value(id).data()[k];
        if id == self.perturbed && k == self.coord {
            (self.v_minus, self.dk)
        } else {
            (base, 0.0)
        }
    }

    fn is_perturbed(&self, id: ParamId) -> bool {
        id == self.perturbed
    }
}

fn conv2d_pair(
    x: &PairBuf,
    spec: &ConvSpec,
    w_id: ParamId,
    b_id: Option<ParamId>,
    pp: &PairParams,
) -> Result<PairBuf> {
    let (bsz, h, w_in) = (x.shape[0], x.shape[2], x.shape[3]);
    let (out_h, out_w) = (spec.out_size(h)?, spec.out_size(w_in)?);
    let (cin, cout, k) = (spec.in_channels, spec.out_channels, spec.kernel);
    let (stride, pad, dil) = (spec.stride, spec.pad, spec.dilation);
    let mut out = PairBuf::zeros(&[bsz, cout, out_h, out_w]);

    if let Some(b_id) = b_id {
        for b in 0..bsz {
            for co in 0..cout {
                let (bv, bd) = pp.value(b_id, co);
                let base = (b * cout + co) * out_h * out_w;
                out.v[base..base + out_h * out_w].iter_mut().for_each(|t| *t = bv);
                if bd != 0.0 {
                    out.d[base..base + out_h * out_w].iter_mut().for_each(|t| *t = bd);
                }
            }
        }
    }
    for b in 0..bsz {
        for co in 0..cout {
            let out_base = (b * cout + co) * out_h * out_w;
            for ci in 0..cin {
                let in_base = (b * cin + ci) * h * w_in;
                for kh in 0..k {
                    for kw in 0..k {
                        let (wv, wd) = pp.value(w_id, ((co * cin + ci) * k + kh) * k + kw);
                        if wv == 0.0 && wd == 0.0 {
                            continue;
                        }
                        let (oh0, oh1) = valid_range(out_h, h, stride, pad, kh * dil);
                        let (ow0, ow1) = valid_range(out_w, w_in, stride, pad, kw * dil);
                        for oh in oh0..oh1 {
                            let ih = oh * stride + kh * dil - pad;
                            let in_row = in_base + ih * w_in;
                            let out_row = out_base + oh * out_w;
                            for ow in ow0..ow1 {
                                let iw = ow * stride + kw * dil - pad;
                                let xv = x.v[in_row + iw];
                                let xd = x.d[in_row + iw];
                                out.v[out_row + ow] += wv * xv;
                                // d(w·x) = w·dx + dw·(x + dx)
                                let mut dd = 0.0;
                                if xd != 0.0 {
                                    dd += wv * xd;
                                }
                                if wd != 0.0 {
                                    dd += wd * (xv + xd);
                                }
                                if dd != 0.0 {
                                    out.d[out_row + ow] += dd;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn deconv2d_pair(x: &PairBuf, spec: &DeconvSpec, w_id: ParamId, pp: &PairParams) -> Result<PairBuf> {
    // adjoint of the matching convolution: scatter instead of gather
    let (bsz, in_h, in_w) = (x.shape[0], x.shape[2], x.shape[3]);
    let (out_h, out_w) = (in_h * spec.factor, in_w * spec.factor);
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let (k, stride, pad) = (spec.kernel(), spec.stride(), spec.pad());
    let mut out = PairBuf::zeros(&[bsz, cout, out_h, out_w]);
    for b in 0..bsz {
        for ci in 0..cin {
            let in_base = (b * cin + ci) * in_h * in_w;
            for co in 0..cout {
                let out_base = (b * cout + co) * out_h * out_w;
                for kh in 0..k {
                    for kw in 0..k {
                        let (wv, wd) = pp.value(w_id, ((ci * cout + co) * k + kh) * k + kw);
                        if wv == 0.0 && wd == 0.0 {
                            continue;
                        }
                        let (ih0, ih1) = valid_range(in_h, out_h, stride, pad, kh);
                        let (iw0, iw1) = valid_range(in_w, out_w, stride, pad, kw);
                        for ih in ih0..ih1 {
                            let oh = ih * stride + kh - pad;
                            let in_row = in_base + ih * in_w;
                            let out_row = out_base + oh * out_w;
                            for iw in iw0..iw1 {
                                let ow = iw * stride + kw - pad;
                                let xv = x.v[in_row + iw];
                                let xd = x.d[in_row + iw];
                                out.v[out_row + ow] += wv * xv;
                                let mut dd = 0.0;
                                if xd != 0.0 {
                                    dd += wv * xd;
                                }
                                if wd != 0.0 {
                                    dd += wd * (xv + xd);
                                }
                                if dd != 0.0 {
                                    out.d[out_row + ow] += dd;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, k_off: usize) -> (usize, usize) {
    let (s, p, ko) = (stride as i64, pad as i64, k_off as i64);
    let lo = (-(-(p - ko)).div_euclid(s)).max(0);
    let hi = ((in_len as i64 - 1 + p - ko).div_euclid(s)).min(out_len as i64 - 1);
    if hi < lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize + 1)
    }
}

fn relu_pair(x: &mut PairBuf) {
    for i in 0..x.v.len() {
        let v = x.v[i];
        let d = x.d[i];
        let vp = v + d;
        let (rv, rd) = if v > 0.0 {
            if vp > 0.0 {
                (v, d)
            } else {
                (v, -v)
            }
        } else if vp > 0.0 {
            (0.0, vp)
        } else {
            (0.0, 0.0)
        };
        x.v[i] = rv;
        x.d[i] = rd;
    }
}

struct LstmStatePair {
    h: Vec<(f64, f64)>,
    c: Vec<(f64, f64)>,
}

fn lstm_step_pair(
    x: &[(f64, f64)],
    st: &LstmStatePair,
    w: &LstmWeights,
    pp: &PairParams,
) -> LstmStatePair {
    let (m, n) = (w.input_size, w.hidden_size);
    let gate_pre = |wx: ParamId, wh: ParamId, b: ParamId, u: usize| -> (f64, f64) {
        let (bv, bd) = pp.value(b, u);
        let mut pv = bv;
        let mut pd = bd;
        // x side
        if pp.is_perturbed(wx) {
            for j in 0..m {
                let (wv, wd) = pp.value(wx, u * m + j);
                let (xv, xd) = x[j];
                pv += wv * xv;
                pd += wv * xd + wd * (xv + xd);
            }
        } else {
            let wrow = &pp.params.value(wx).data()[u * m..(u + 1) * m];
            for j in 0..m {
                pv += wrow[j] * x[j].0;
                if x[j].1 != 0.0 {
                    pd += wrow[j] * x[j].1;
                }
            }
        }
        // recurrent side
        if pp.is_perturbed(wh) {
            for j in 0..n {
                let (wv, wd) = pp.value(wh, u * n + j);
                let (hv, hd) = st.h[j];
                pv += wv * hv;
                pd += wv * hd + wd * (hv + hd);
            }
        } else {
            let wrow = &pp.params.value(wh).data()[u * n..(u + 1) * n];
            for j in 0..n {
                pv += wrow[j] * st.h[j].0;
                if st.h[j].1 != 0.0 {
                    pd += wrow[j] * st.h[j].1;
                }
            }
        }
        (pv, pd)
    };

    let mut out = LstmStatePair {
        h: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
    };
    for u in 0..n {
        let (iv_pre, id_pre) = gate_pre(w.w_xi, w.w_hi, w.b_i, u);
        let (fv_pre, fd_pre) = gate_pre(w.w_xf, w.w_hf, w.b_f, u);
        let (ov_pre, od_pre) = gate_pre(w.w_xo, w.w_ho, w.b_o, u);
        let (gv_pre, gd_pre) = gate_pre(w.w_xc, w.w_hc, w.b_c, u);
        let i = (sigmoid(iv_pre), sigmoid_diff(iv_pre, id_pre));
        let f = (sigmoid(fv_pre), sigmoid_diff(fv_pre, fd_pre));
        let o = (sigmoid(ov_pre), sigmoid_diff(ov_pre, od_pre));
        let g = (gv_pre.tanh(), tanh_diff(gv_pre, gd_pre));
        let fc = mul_pair(f.0, f.1, st.c[u].0, st.c[u].1);
        let ig = mul_pair(i.0, i.1, g.0, g.1);
        let c = (fc.0 + ig.0, fc.1 + ig.1);
        let tc = (c.0.tanh(), tanh_diff(c.0, c.1));
        let h = mul_pair(o.0, o.1, tc.0, tc.1);
        out.c.push(c);
        out.h.push(h);
    }
    out
}

/// Softmax cross-entropy over the supervised frames, returned as
/// (loss at θ−ε, exact loss difference).
fn ce_pair(
    logits: &PairBuf,
    labels: &[Option<&LabelMap>],
    supervision: Supervision,
    ignore: u8,
) -> Result<(f64, f64)> {
    let (t_len, n_cl, h, w) = (
        logits.shape[0],
        logits.shape[1],
        logits.shape[2],
        logits.shape[3],
    );
    let supervised: Vec<usize> = match supervision {
        Supervision::LastFrame => vec![t_len - 1],
        Supervision::AllLabeled => (0..t_len).filter(|&t| labels[t].is_some()).collect(),
    };
    let plane = h * w;
    let mut total_v = 0.0;
    let mut total_d = 0.0;
    let mut n_valid = 0usize;
    let mut ev = vec![0.0f64; n_cl];
    let mut ed = vec![0.0f64; n_cl];
    for &t in &supervised {
        let lm = labels[t].ok_or_else(|| Error::Data("unlabeled supervised frame".into()))?;
        let base = t * n_cl * plane;
        for y in 0..h {
            for xq in 0..w {
                let lab = lm.get(y, xq);
                if lab == ignore {
                    continue;
                }
                n_valid += 1;
                let pix = y * w + xq;
                let mut mx = f64::NEG_INFINITY;
                for c in 0..n_cl {
                    mx = mx.max(logits.v[base + c * plane + pix]);
                }
                let mut zv = 0.0;
                let mut zd = 0.0;
                for c in 0..n_cl {
                    let lv = logits.v[base + c * plane + pix];
                    let ld = logits.d[base + c * plane + pix];
                    let e = (lv - mx).exp();
                    ev[c] = e;
                    ed[c] = if ld == 0.0 { 0.0 } else { e * ld.exp_m1() };
                    zv += ev[c];
                    zd += ed[c];
                }
                let lab = usize::from(lab);
                // per-pixel loss: ln Z − (x_label − m)
                let xv = logits.v[base + lab * plane + pix];
                let xd = logits.d[base + lab * plane + pix];
                total_v += zv.ln() - (xv - mx);
                let dln_z = if zd == 0.0 { 0.0 } else { (zd / zv).ln_1p() };
                total_d += dln_z - xd;
            }
        }
    }
    if n_valid == 0 {
        return Ok((0.0, 0.0));
    }
    let inv = 1.0 / n_valid as f64;
    Ok((total_v * inv, total_d * inv))
}

/// The central difference (L(θ+ε·e_k) − L(θ−ε·e_k)) / (2ε) for one
/// parameter coordinate, with the difference propagated exactly. Returns
/// the divided difference over the actually representable interval.
pub fn central_difference(
    model: &Model,
    frames: &Tensor,
    labels: &[Option<&LabelMap>],
    supervision: Supervision,
    ignore: u8,
    perturbed: ParamId,
    coord: usize,
    eps: f64,
) -> Result<f64> {
    let pp = PairParams::new(&model.params, perturbed, coord, eps);
    let mut x = PairBuf::from_exact(frames);
    for block in model.encoder_blocks() {
        x = conv2d_pair(&x, &block.0, block.1, Some(block.2), &pp)?;
        relu_pair(&mut x);
    }
    let cls_in = match model.config.st_mode {
        StMode::Off => x,
        StMode::OnTop => {
            let (grid, proj) = model.st_parts().expect("on_top model");
            let st_out = grid_pair(&x, grid.0, grid.1, grid.2, grid.3, grid.4, &pp);
            conv2d_pair(&st_out, &proj.0, proj.1, Some(proj.2), &pp)?
        }
        StMode::Fusion => {
            let parts = model.fusion_parts().expect("fusion model");
            let down = {
                let mut d = conv2d_pair(&x, &parts.down.0, parts.down.1, Some(parts.down.2), &pp)?;
                relu_pair(&mut d);
                d
            };
            let g = parts.grid;
            let st_out = grid_pair(&down, g.0, g.1, g.2, g.3, g.4, &pp);
            let proj = conv2d_pair(&st_out, &parts.proj.0, parts.proj.1, Some(parts.proj.2), &pp)?;
            let up = deconv2d_pair(&proj, &parts.up.0, parts.up.1, &pp)?;
            let mut fused = x;
            for i in 0..fused.v.len() {
                fused.v[i] += up.v[i];
                fused.d[i] += up.d[i];
            }
            let mut ctx = conv2d_pair(&fused, &parts.ctx.0, parts.ctx.1, Some(parts.ctx.2), &pp)?;
            relu_pair(&mut ctx);
            ctx
        }
    };
    let cls = model.classifier_parts();
    let small = conv2d_pair(&cls_in, &cls.0, cls.1, Some(cls.2), &pp)?;
    let out = model.out_parts();
    let logits = deconv2d_pair(&small, &out.0, out.1, &pp)?;
    let (_lv, ld) = ce_pair(&logits, labels, supervision, ignore)?;
    Ok(ld / pp.dk)
}

fn grid_pair(
    feat: &PairBuf,
    mode: WeightMode,
    grid_w: usize,
    grid_h: usize,
    hidden: usize,
    weights: &[LstmWeights],
    pp: &PairParams,
) -> PairBuf {
    let (t_len, maps) = (feat.shape[0], feat.shape[1]);
    let plane = grid_h * grid_w;
    let mut out = PairBuf::zeros(&[t_len, hidden, grid_h, grid_w]);
    let mut states: Vec<LstmStatePair> = (0..plane)
        .map(|_| LstmStatePair {
            h: vec![(0.0, 0.0); hidden],
            c: vec![(0.0, 0.0); hidden],
        })
        .collect();
    for t in 0..t_len {
        let fbase = t * maps * plane;
        let obase = t * hidden * plane;
        for row in 0..grid_h {
            for col in 0..grid_w {
                let loc = row * grid_w + col;
                let w = match mode {
                    WeightMode::Shared => &weights[0],
                    WeightMode::PerLocation => &weights[loc],
                };
                let x: Vec<(f64, f64)> = (0..maps)
                    .map(|c| {
                        let idx = fbase + c * plane + loc;
                        (feat.v[idx], feat.d[idx])
                    })
                    .collect();
                let next = lstm_step_pair(&x, &states[loc], w, pp);
                for u in 0..hidden {
                    let idx = obase + u * plane + loc;
                    out.v[idx] = next.h[u].0;
                    out.d[idx] = next.h[u].1;
                }
                states[loc] = next;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difference_identities_are_precise() {
        for (v, d) in [(0.3, 1e-5), (-2.0, 2e-7), (10.0, 1e-9), (0.0, 1e-6)] {
            // the naive subtraction carries ~1 ulp of the function values as
            // absolute error; the identity must agree within that
            let td = tanh_diff(v, d);
            let direct = (v + d).tanh() - v.tanh();
            assert!((td - direct).abs() <= 5e-16, "tanh {v} {d}: {td} vs {direct}");
            // and must match the slope to first order in d
            let slope = 1.0 - v.tanh().powi(2);
            assert!((td / d - slope).abs() < 1e-3 * slope.max(1e-12) + 1e-12);

            let sd = sigmoid_diff(v, d);
            let direct_s = sigmoid(v + d) - sigmoid(v);
            assert!((sd - direct_s).abs() <= 5e-16, "sigmoid {v} {d}");
            let sslope = sigmoid(v) * (1.0 - sigmoid(v));
            assert!((sd / d - sslope).abs() < 1e-3 * sslope.max(1e-12) + 1e-12);
        }
    }

    #[test]
    fn zero_difference_propagates_bitwise() {
        assert_eq!(tanh_diff(0.73, 0.0), 0.0);
        assert_eq!(sigmoid_diff(-4.0, 0.0), 0.0);
        assert_eq!(mul_pair(1.5, 0.0, -2.0, 0.0).1, 0.0);
    }
}
