//! LSTM cell: forward and backward of the standard gated update
//!
//!   i = σ(W_xi·x + W_hi·h' + b_i)      f = σ(W_xf·x + W_hf·h' + b_f)
//!   o = σ(W_xo·x + W_ho·h' + b_o)      g = φ(W_xc·x + W_hc·h' + b_c)
//!   c = f ⊙ c' + i ⊙ g                 h = o ⊙ φ(c)
//!
//! with σ the logistic sigmoid and φ = tanh. No peepholes, no clipping.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{
    affine, affine_backward, hadamard, sigmoid_map, tanh_map, ParamId, ParamSet, Tensor,
};

/// Handles to the twelve trainable arrays of one cell. Field order here is
/// also the serialization order.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_xi: ParamId,
    pub w_xf: ParamId,
    pub w_xo: ParamId,
    pub w_xc: ParamId,
    pub w_hi: ParamId,
    pub w_hf: ParamId,
    pub w_ho: ParamId,
    pub w_hc: ParamId,
    pub b_i: ParamId,
    pub b_f: ParamId,
    pub b_o: ParamId,
    pub b_c: ParamId,
}

impl LstmWeights {
    /// Register a fresh cell under `prefix`. Weights are uniform in
    /// ±1/√fan_in; biases zero except the forget gate at +1.
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        stream: &mut Stream,
    ) -> LstmWeights {
        let (m, n) = (input_size, hidden_size);
        let bx = 1.0 / (m as f64).sqrt();
        let bh = 1.0 / (n as f64).sqrt();
        let mut wx = |name: &str, s: &mut Stream| {
            params.register(
                format!("{prefix}.{name}"),
                Tensor::rand_uniform(&[n, m], -bx, bx, s),
            )
        };
        let w_xi = wx("w_xi", stream);
        let w_xf = wx("w_xf", stream);
        let w_xo = wx("w_xo", stream);
        let w_xc = wx("w_xc", stream);
        let mut wh = |name: &str, s: &mut Stream| {
            params.register(
                format!("{prefix}.{name}"),
                Tensor::rand_uniform(&[n, n], -bh, bh, s),
            )
        };
        let w_hi = wh("w_hi", stream);
        let w_hf = wh("w_hf", stream);
        let w_ho = wh("w_ho", stream);
        let w_hc = wh("w_hc", stream);
        let b_i = params.register(format!("{prefix}.b_i"), Tensor::zeros(&[n]));
        let b_f = params.register(format!("{prefix}.b_f"), Tensor::filled(&[n], 1.0));
        let b_o = params.register(format!("{prefix}.b_o"), Tensor::zeros(&[n]));
        let b_c = params.register(format!("{prefix}.b_c"), Tensor::zeros(&[n]));
        LstmWeights {
            input_size,
            hidden_size,
            w_xi,
            w_xf,
            w_xo,
            w_xc,
            w_hi,
            w_hf,
            w_ho,
            w_hc,
            b_i,
            b_f,
            b_o,
            b_c,
        }
    }

    /// The twelve parameters in serialization order.
    pub fn ordered_ids(&self) -> [ParamId; 12] {
        [
            self.w_xi, self.w_xf, self.w_xo, self.w_xc, self.w_hi, self.w_hf, self.w_ho,
            self.w_hc, self.b_i, self.b_f, self.b_o, self.b_c,
        ]
    }

    pub fn write_to<W: Write>(&self, params: &ParamSet, out: &mut W) -> Result<()> {
        for id in self.ordered_ids() {
            params.value(id).write_to(out)?;
        }
        Ok(())
    }

    /// Load twelve tensors (fixed order) into this cell's parameters.
    pub fn read_into<R: Read>(&self, params: &mut ParamSet, input: &mut R) -> Result<()> {
        for id in self.ordered_ids() {
            let t = Tensor::read_from(input)?;
            if t.shape() != params.value(id).shape() {
                return Err(Error::shape(
                    "lstm weights load",
                    params.value(id).shape(),
                    t.shape(),
                ));
            }
            params.get_mut(id).value = t;
        }
        Ok(())
    }
}

/// Hidden and memory state of one cell.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
    pub t: usize,
}

impl LstmState {
    pub fn zeros(hidden_size: usize) -> LstmState {
        LstmState {
            h: Tensor::zeros(&[hidden_size]),
            c: Tensor::zeros(&[hidden_size]),
            t: 0,
        }
    }
}

/// Values saved by the forward step for the backward step.
#[derive(Debug, Clone)]
pub struct LstmCache {
    pub x: Tensor,
    pub h_prev: Tensor,
    pub c_prev: Tensor,
    pub i: Tensor,
    pub f: Tensor,
    pub o: Tensor,
    pub g: Tensor,
    pub c: Tensor,
}

fn gate_pre(
    x: &Tensor,
    h_prev: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    b: &Tensor,
) -> Result<Tensor> {
    let mut pre = affine(x, wx, b)?;
    let rec = affine(h_prev, wh, &Tensor::zeros(&[wh.shape()[0]]))?;
    pre.add_assign(&rec)?;
    Ok(pre)
}

/// One forward step. Returns the next state and the cache needed by
/// [`lstm_step_backward`].
pub fn lstm_step(
    x: &Tensor,
    prev: &LstmState,
    w: &LstmWeights,
    params: &ParamSet,
) -> Result<(LstmState, LstmCache)> {
    if x.shape() != [w.input_size] {
        return Err(Error::shape("lstm_step input", &[w.input_size], x.shape()));
    }
    if prev.h.shape() != [w.hidden_size] || prev.c.shape() != [w.hidden_size] {
        return Err(Error::shape(
            "lstm_step state",
            &[w.hidden_size],
            prev.h.shape(),
        ));
    }
    prev.c.require_finite("lstm_step prev.c")?;
    let i = sigmoid_map(&gate_pre(x, &prev.h, params.value(w.w_xi), params.value(w.w_hi), params.value(w.b_i))?);
    let f = sigmoid_map(&gate_pre(x, &prev.h, params.value(w.w_xf), params.value(w.w_hf), params.value(w.b_f))?);
    let o = sigmoid_map(&gate_pre(x, &prev.h, params.value(w.w_xo), params.value(w.w_ho), params.value(w.b_o))?);
    let g = tanh_map(&gate_pre(x, &prev.h, params.value(w.w_xc), params.value(w.w_hc), params.value(w.b_c))?);
    let c = hadamard(&f, &prev.c)?.add(&hadamard(&i, &g)?)?;
    let h = hadamard(&o, &tanh_map(&c))?;
    let cache = LstmCache {
        x: x.clone(),
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        i: i.clone(),
        f,
        o,
        g,
        c: c.clone(),
    };
    Ok((
        LstmState {
            h,
            c,
            t: prev.t + 1,
        },
        cache,
    ))
}

/// Reverse-mode step. `dh` and `dc_next` are the cotangents of the step's
/// outputs; weight gradients accumulate into `params`; the returned triple is
/// (dx, dh_prev, dc_prev).
pub fn lstm_step_backward(
    dh: &Tensor,
    dc_next: &Tensor,
    cache: &LstmCache,
    w: &LstmWeights,
    params: &mut ParamSet,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = w.hidden_size;
    if dh.shape() != [n] || dc_next.shape() != [n] {
        return Err(Error::shape("lstm_step_backward", &[n], dh.shape()));
    }
    let tanh_c = tanh_map(&cache.c);

    // h = o ⊙ φ(c)
    let d_o = hadamard(dh, &tanh_c)?;
    let dc_total = {
        let through_h = Tensor::from_fn(&[n], |u| {
            dh.data()[u] * cache.o.data()[u] * (1.0 - tanh_c.data()[u] * tanh_c.data()[u])
        });
        dc_next.add(&through_h)?
    };

    // c = f ⊙ c' + i ⊙ g
    let d_f = hadamard(&dc_total, &cache.c_prev)?;
    let d_i = hadamard(&dc_total, &cache.g)?;
    let d_g = hadamard(&dc_total, &cache.i)?;
    let dc_prev = hadamard(&dc_total, &cache.f)?;

    // pre-activation cotangents
    let dpre = |d: &Tensor, act: &Tensor, is_tanh: bool| {
        Tensor::from_fn(&[n], |u| {
            let a = act.data()[u];
            let slope = if is_tanh { 1.0 - a * a } else { a * (1.0 - a) };
            d.data()[u] * slope
        })
    };
    let dpre_i = dpre(&d_i, &cache.i, false);
    let dpre_f = dpre(&d_f, &cache.f, false);
    let dpre_o = dpre(&d_o, &cache.o, false);
    let dpre_g = dpre(&d_g, &cache.g, true);

    let mut dx = Tensor::zeros(&[w.input_size]);
    let mut dh_prev = Tensor::zeros(&[n]);
    for (d, wx_id, wh_id, b_id) in [
        (&dpre_i, w.w_xi, w.w_hi, w.b_i),
        (&dpre_f, w.w_xf, w.w_hf, w.b_f),
        (&dpre_o, w.w_xo, w.w_ho, w.b_o),
        (&dpre_g, w.w_xc, w.w_hc, w.b_c),
    ] {
        let (dxg, dwx, db) = affine_backward(d, &cache.x, params.value(wx_id))?;
        dx.add_assign(&dxg)?;
        params.accumulate(wx_id, &dwx)?;
        params.accumulate(b_id, &db)?;
        let (dhg, dwh, _db) = affine_backward(d, &cache.h_prev, params.value(wh_id))?;
        dh_prev.add_assign(&dhg)?;
        params.accumulate(wh_id, &dwh)?;
    }
    Ok((dx, dh_prev, dc_prev))
}
