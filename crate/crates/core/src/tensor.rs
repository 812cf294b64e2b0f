//! Dense row-major f64 tensors and the primitive differentiable operations.
//!
//! Layout convention is (batch, channels, height, width) for 4-d tensors.
//! Every primitive has a hand-written backward; gradients returned by a
//! backward shape-match the forward inputs and are accumulated (`+=`) into
//! [`Parameter::grad`] by the caller.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Dense N-dimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape("from_vec", &[n], &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// n×n identity matrix.
    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries uniform in [lo, hi), drawn from `stream`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, stream: &mut Stream) -> Tensor {
        Tensor::from_fn(shape, |_| stream.uniform(lo, hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    #[inline]
    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 4);
        let (_, ch, hh, ww) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * ch + c) * hh + h) * ww + w]
    }

    #[inline]
    pub fn at4_mut(&mut self, b: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        debug_assert_eq!(self.shape.len(), 4);
        let (_, ch, hh, ww) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        &mut self.data[((b * ch + c) * hh + h) * ww + w]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape("add", other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.require_same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape("sub", other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// Flat inner product.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.require_same_shape("dot", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn require_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value produced by {op}")))
        }
    }

    fn require_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::shape(op, &self.shape, &other.shape))
        }
    }
}

// ---------------------------------------------------------------------------
// Primitive differentiable ops
// ---------------------------------------------------------------------------

/// out[i] = sum_j W[i,j] x[j] + b[i]
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.shape.len() != 2 {
        return Err(Error::shape("affine weights", &[0, 0], &w.shape));
    }
    let (n_out, n_in) = (w.shape[0], w.shape[1]);
    if x.shape != [n_in] {
        return Err(Error::shape("affine input", &[n_in], &x.shape));
    }
    if b.shape != [n_out] {
        return Err(Error::shape("affine bias", &[n_out], &b.shape));
    }
    let mut out = b.data.clone();
    for i in 0..n_out {
        let row = &w.data[i * n_in..(i + 1) * n_in];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(&x.data) {
            acc += wv * xv;
        }
        out[i] += acc;
    }
    Tensor::from_vec(&[n_out], out)
}

/// Gradients of [`affine`]: returns (dx, dw, db).
pub fn affine_backward(dout: &Tensor, x: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n_out, n_in) = (w.shape[0], w.shape[1]);
    if dout.shape != [n_out] {
        return Err(Error::shape("affine_backward", &[n_out], &dout.shape));
    }
    let mut dx = vec![0.0; n_in];
    let mut dw = vec![0.0; n_out * n_in];
    for i in 0..n_out {
        let d = dout.data[i];
        let row = &w.data[i * n_in..(i + 1) * n_in];
        let drow = &mut dw[i * n_in..(i + 1) * n_in];
        for j in 0..n_in {
            dx[j] += row[j] * d;
            drow[j] = d * x.data[j];
        }
    }
    Ok((
        Tensor::from_vec(&[n_in], dx)?,
        Tensor::from_vec(&[n_out, n_in], dw)?,
        dout.clone(),
    ))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid_map(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| sigmoid(v)).collect(),
    }
}

/// dx = dout ⊙ s(1−s), where `s` is the saved forward output.
pub fn sigmoid_backward(dout: &Tensor, s: &Tensor) -> Result<Tensor> {
    dout.require_same_shape("sigmoid_backward", s)?;
    Ok(Tensor {
        shape: s.shape.clone(),
        data: dout
            .data
            .iter()
            .zip(&s.data)
            .map(|(d, s)| d * s * (1.0 - s))
            .collect(),
    })
}

pub fn tanh_map(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v.tanh()).collect(),
    }
}

/// dx = dout ⊙ (1−t²), where `t` is the saved forward output.
pub fn tanh_backward(dout: &Tensor, t: &Tensor) -> Result<Tensor> {
    dout.require_same_shape("tanh_backward", t)?;
    Ok(Tensor {
        shape: t.shape.clone(),
        data: dout
            .data
            .iter()
            .zip(&t.data)
            .map(|(d, t)| d * (1.0 - t * t))
            .collect(),
    })
}

/// Elementwise product.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.require_same_shape("hadamard", b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

/// Gradients of [`hadamard`]: (da, db) = (dout ⊙ b, dout ⊙ a).
pub fn hadamard_backward(dout: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((hadamard(dout, b)?, hadamard(dout, a)?))
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// A trainable tensor with its accumulated gradient and momentum buffer.
/// `value`, `grad` and `momentum` are always shape-identical.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    /// Frozen parameters still receive gradients but are skipped by the
    /// optimizer (used for non-learned bilinear deconvolutions).
    pub frozen: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Parameter {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            momentum,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Accumulate `g` into the gradient buffer.
    pub fn add_grad(&mut self, g: &Tensor) -> Result<()> {
        self.grad.add_assign(g)
    }
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered registry of named parameters. Registration order is the
/// serialization order for checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    entries: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.entries.push(Parameter::new(value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        self.entries[id.0].add_grad(g)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.zero_grad();
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.entries.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.entries.iter_mut())
    }

    /// Total scalar count over all parameter values.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }
}

// ---------------------------------------------------------------------------
// Serialization: little-endian container, magic "STTN",
// u32 rank, rank x u64 extents, raw f64 payload.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"STTN";

impl Tensor {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data(format!(
                "bad tensor magic: {:?}, expected {:?}",
                magic, MAGIC
            )));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank > 8 {
            return Err(Error::Data(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity_passes_through() {
        let w = Tensor::identity(2);
        let b = Tensor::zeros(&[2]);
        let x = Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap();
        let y = affine(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
    }

    #[test]
    fn affine_hand_example() {
        // W = [[1,1],[0,2]], b = (1,0), x = (2,3) -> (6,6)
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let x = Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap();
        let y = affine(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[6.0, 6.0]);
    }

    #[test]
    fn affine_zero_weight_returns_bias() {
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::from_vec(&[2], vec![5.0, 5.0]).unwrap();
        let x = Tensor::from_vec(&[3], vec![0.3, -7.0, 2.2]).unwrap();
        let y = affine(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_shapes() {
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2]);
        let x = Tensor::zeros(&[4]);
        let err = affine(&x, &w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn sigmoid_tanh_fixed_points() {
        let x = Tensor::zeros(&[3]);
        assert!(sigmoid_map(&x).data().iter().all(|&v| v == 0.5));
        assert!(tanh_map(&x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_symmetry() {
        let xs = [-3.0, -0.7, 0.1, 2.5, 11.0];
        for &x in &xs {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hadamard_identity_annihilator_and_hand_case() {
        let a = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let ones = Tensor::filled(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        assert_eq!(hadamard(&a, &ones).unwrap(), a);
        assert_eq!(hadamard(&a, &zeros).unwrap(), zeros);
        let b = Tensor::from_vec(&[3], vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(hadamard(&a, &b).unwrap().data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn affine_backward_zero_cotangent() {
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let dout = Tensor::zeros(&[2]);
        let (dx, dw, db) = affine_backward(&dout, &x, &w).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dw.data().iter().all(|&v| v == 0.0));
        assert!(db.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_backward_at_zero_is_quarter() {
        let x = Tensor::zeros(&[4]);
        let s = sigmoid_map(&x);
        let dout = Tensor::filled(&[4], 2.0);
        let dx = sigmoid_backward(&dout, &s).unwrap();
        for &v in dx.data() {
            assert!((v - 0.5).abs() < 1e-15); // 2.0 * 0.25
        }
    }

    #[test]
    fn determinism_bitwise() {
        let mut s1 = Stream::named(11, "t");
        let mut s2 = Stream::named(11, "t");
        let a = Tensor::rand_uniform(&[32], -1.0, 1.0, &mut s1);
        let b = Tensor::rand_uniform(&[32], -1.0, 1.0, &mut s2);
        assert_eq!(a.data(), b.data());
        let sa = sigmoid_map(&tanh_map(&a));
        let sb = sigmoid_map(&tanh_map(&b));
        // bit-identical, not just approximately equal
        for (x, y) in sa.data().iter().zip(sb.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn serialization_roundtrip() {
        let mut s = Stream::named(5, "ser");
        let t = Tensor::rand_uniform(&[2, 3, 4], -10.0, 10.0, &mut s);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"STTN");
        let u = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(t, u);
    }

    #[test]
    fn serialization_rejects_bad_magic() {
        let t = Tensor::zeros(&[2]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(Tensor::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn param_zero_grad_and_accumulate() {
        let mut p = Parameter::new(Tensor::zeros(&[3]));
        let g = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        p.add_grad(&g).unwrap();
        p.add_grad(&g).unwrap();
        assert_eq!(p.grad.data(), &[2.0, 4.0, 6.0]);
        p.zero_grad();
        assert!(p.grad.data().iter().all(|&v| v == 0.0));
    }

    // Finite-difference check of the primitive backwards. Central
    // differences with eps = 1e-5 against the analytic gradients.
    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let eps = 1e-5;
        let mut g = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + eps;
            let fp = f(&xp);
            xp[i] = orig - eps;
            let fm = f(&xp);
            xp[i] = orig;
            g.push((fp - fm) / (2.0 * eps));
        }
        g
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut s = Stream::named(123, "gradcheck");
        for _ in 0..20 {
            let n_in = s.range_inclusive(1, 5);
            let n_out = s.range_inclusive(1, 5);
            let x = Tensor::rand_uniform(&[n_in], -1.0, 1.0, &mut s);
            let w = Tensor::rand_uniform(&[n_out, n_in], -1.0, 1.0, &mut s);
            let b = Tensor::rand_uniform(&[n_out], -1.0, 1.0, &mut s);
            let dout = Tensor::rand_uniform(&[n_out], -1.0, 1.0, &mut s);

            // scalar objective: dot(affine(x, W, b), dout)
            let (dx, dw, db) = affine_backward(&dout, &x, &w).unwrap();
            let loss_x = |xv: &[f64]| {
                let xt = Tensor::from_vec(&[n_in], xv.to_vec()).unwrap();
                affine(&xt, &w, &b).unwrap().dot(&dout).unwrap()
            };
            for (a, n) in dx.data().iter().zip(numeric_grad(loss_x, x.data())) {
                assert!(rel_err(*a, n) < 1e-6, "affine dx: {a} vs {n}");
            }
            let loss_w = |wv: &[f64]| {
                let wt = Tensor::from_vec(&[n_out, n_in], wv.to_vec()).unwrap();
                affine(&x, &wt, &b).unwrap().dot(&dout).unwrap()
            };
            for (a, n) in dw.data().iter().zip(numeric_grad(loss_w, w.data())) {
                assert!(rel_err(*a, n) < 1e-6, "affine dw: {a} vs {n}");
            }
            let loss_b = |bv: &[f64]| {
                let bt = Tensor::from_vec(&[n_out], bv.to_vec()).unwrap();
                affine(&x, &w, &bt).unwrap().dot(&dout).unwrap()
            };
            for (a, n) in db.data().iter().zip(numeric_grad(loss_b, b.data())) {
                assert!(rel_err(*a, n) < 1e-6, "affine db: {a} vs {n}");
            }

            // sigmoid / tanh / hadamard on a random vector
            let v = Tensor::rand_uniform(&[n_in], -1.0, 1.0, &mut s);
            let dv = Tensor::rand_uniform(&[n_in], -1.0, 1.0, &mut s);
            let sig = sigmoid_map(&v);
            let dsig = sigmoid_backward(&dv, &sig).unwrap();
            let loss_sig = |xv: &[f64]| {
                let xt = Tensor::from_vec(&[n_in], xv.to_vec()).unwrap();
                sigmoid_map(&xt).dot(&dv).unwrap()
            };
            for (a, n) in dsig.data().iter().zip(numeric_grad(loss_sig, v.data())) {
                assert!(rel_err(*a, n) < 1e-6, "sigmoid dx: {a} vs {n}");
            }

            let th = tanh_map(&v);
            let dth = tanh_backward(&dv, &th).unwrap();
            let loss_tanh = |xv: &[f64]| {
                let xt = Tensor::from_vec(&[n_in], xv.to_vec()).unwrap();
                tanh_map(&xt).dot(&dv).unwrap()
            };
            for (a, n) in dth.data().iter().zip(numeric_grad(loss_tanh, v.data())) {
                assert!(rel_err(*a, n) < 1e-6, "tanh dx: {a} vs {n}");
            }

            let u = Tensor::rand_uniform(&[n_in], -1.0, 1.0, &mut s);
            let (da, db2) = hadamard_backward(&dv, &v, &u).unwrap();
            let loss_ha = |xv: &[f64]| {
                let xt = Tensor::from_vec(&[n_in], xv.to_vec()).unwrap();
                hadamard(&xt, &u).unwrap().dot(&dv).unwrap()
            };
            for (a, n) in da.data().iter().zip(numeric_grad(loss_ha, v.data())) {
                assert!(rel_err(*a, n) < 1e-6, "hadamard da: {a} vs {n}");
            }
            let loss_hb = |xv: &[f64]| {
                let xt = Tensor::from_vec(&[n_in], xv.to_vec()).unwrap();
                hadamard(&v, &xt).unwrap().dot(&dv).unwrap()
            };
            for (a, n) in db2.data().iter().zip(numeric_grad(loss_hb, u.data())) {
                assert!(rel_err(*a, n) < 1e-6, "hadamard db: {a} vs {n}");
            }
        }
    }
}
