//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A `Tape` records every operation in execution order. Each node stores its
//! output value plus a backward rule closing over the input indices and any
//! saved intermediates. `backward` walks the tape once in reverse, so a node
//! is visited exactly once and gradient contributions accumulate additively
//! when a value is used in several places.
//!
//! All inner matrix products go through `matrixmultiply::dgemm`, which is
//! single-threaded here and therefore bit-deterministic run to run.

use crate::error::{CoreError, Result};
use crate::tensor::{broadcast_shape, broadcast_strides, reduce_to_shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type Grads = [Option<Vec<f64>>];
type BackRule = Box<dyn Fn(&[Tensor], &[f64], &mut Grads)>;

#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    rules: Vec<Option<BackRule>>,
    grads: Vec<Option<Vec<f64>>>,
}

fn ensure<'g>(grads: &'g mut Grads, idx: usize, len: usize) -> &'g mut [f64] {
    if grads[idx].is_none() {
        grads[idx] = Some(vec![0.0; len]);
    }
    grads[idx].as_mut().unwrap()
}

/// Row-major gemm helper: C[c_off..] (+)= alpha * A[a_off..] * B[b_off..]
/// with explicit strides, so transposed views never materialize.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_off: usize,
    rsa: isize,
    csa: isize,
    b: &[f64],
    b_off: usize,
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    c[c_off + (i as isize * rsc + j as isize * csc) as usize] = 0.0;
                }
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa,
            csa,
            b.as_ptr().add(b_off),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc,
            csc,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.vals[v.0].shape
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: &'static str, t: Tensor, rule: Option<BackRule>) -> Result<Var> {
        if !t.data.iter().all(|x| x.is_finite()) {
            return Err(CoreError::NonFinite { op });
        }
        self.vals.push(t);
        self.rules.push(rule);
        Ok(Var(self.vals.len() - 1))
    }

    fn requires(&self, v: Var) -> bool {
        self.vals[v.0].requires_grad
    }

    /// Records a leaf from an existing tensor, keeping its requires_grad flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.vals.push(t.clone());
        self.rules.push(None);
        Var(self.vals.len() - 1)
    }

    /// Records a leaf that never receives gradient (masks, inputs).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.vals.push(t);
        self.rules.push(None);
        Var(self.vals.len() - 1)
    }

    // ---- arithmetic ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || CoreError::DimensionMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        // Supported: [m,k]x[k,n]; [..,m,k]x[k,n] (flattened); [..,m,k]x[..,k,n] (batched).
        let (batch, m, k) = match sa.len() {
            2 => (1, sa[0], sa[1]),
            3 => (sa[0], sa[1], sa[2]),
            4 => (sa[0] * sa[1], sa[2], sa[3]),
            _ => return Err(mismatch()),
        };
        let (b_batched, k2, n) = match sb.len() {
            2 => (false, sb[0], sb[1]),
            3 => (true, sb[1], sb[2]),
            4 => (true, sb[2], sb[3]),
            _ => return Err(mismatch()),
        };
        if k != k2 {
            return Err(mismatch());
        }
        if b_batched && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let (av, bv) = (&self.vals[a.0].data, &self.vals[b.0].data);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_off = bi * m * k;
            let b_off = if b_batched { bi * k * n } else { 0 };
            gemm(
                m, k, n, 1.0, av, a_off, k as isize, 1, bv, b_off, n as isize, 1, 0.0, &mut out,
                bi * m * n, n as isize, 1,
            );
        }
        let req = self.requires(a) || self.requires(b);
        let rule: Option<BackRule> = req.then(|| {
            let (ai, bi_) = (a.0, b.0);
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let (av, bv) = (&vals[ai].data, &vals[bi_].data);
                if vals[ai].requires_grad {
                    let da = ensure(grads, ai, av.len());
                    for bb in 0..batch {
                        let b_off = if b_batched { bb * k * n } else { 0 };
                        // dA += dC * B^T
                        gemm(
                            m, n, k, 1.0, dz, bb * m * n, n as isize, 1, bv, b_off, 1, n as isize,
                            1.0, da, bb * m * k, k as isize, 1,
                        );
                    }
                }
                if vals[bi_].requires_grad {
                    let db = ensure(grads, bi_, bv.len());
                    for bb in 0..batch {
                        let b_off = if b_batched { bb * k * n } else { 0 };
                        // dB += A^T * dC
                        gemm(
                            k, m, n, 1.0, av, bb * m * k, 1, k as isize, dz, bb * m * n,
                            n as isize, 1, 1.0, db, b_off, n as isize, 1,
                        );
                    }
                }
            }) as BackRule
        });
        let t = Tensor {
            shape: out_shape,
            data: out,
            requires_grad: req,
            grad: None,
        };
        self.push("matmul", t, rule)
    }

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        is_mul: bool,
    ) -> Result<Var> {
        let (av, bv) = (&self.vals[a.0].data, &self.vals[b.0].data);
        let out: Vec<f64> = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        let req = self.requires(a) || self.requires(b);
        let rule: Option<BackRule> = req.then(|| {
            let (ai, bi) = (a.0, b.0);
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                if vals[ai].requires_grad {
                    let da = ensure(grads, ai, vals[ai].data.len());
                    if is_mul {
                        let bv = &vals[bi].data;
                        da.iter_mut().zip(dz.iter().zip(bv)).for_each(|(g, (d, y))| *g += d * y);
                    } else {
                        da.iter_mut().zip(dz).for_each(|(g, d)| *g += d);
                    }
                }
                if vals[bi].requires_grad {
                    let db = ensure(grads, bi, vals[bi].data.len());
                    if is_mul {
                        let av = &vals[ai].data;
                        db.iter_mut().zip(dz.iter().zip(av)).for_each(|(g, (d, x))| *g += d * x);
                    } else {
                        db.iter_mut().zip(dz).for_each(|(g, d)| *g += d);
                    }
                }
            }) as BackRule
        });
        let t = Tensor {
            shape: self.vals[a.0].shape.clone(),
            data: out,
            requires_grad: req,
            grad: None,
        };
        self.push(op, t, rule)
    }

    /// Fast path for the adds the model actually performs (bias, position
    /// table, attention mask): b tiles over a contiguous middle extent.
    fn add_tiled(&mut self, a: Var, b: Var, dims: (usize, usize, usize)) -> Result<Var> {
        let (outer, mid, inner) = dims;
        let (av, bv) = (&self.vals[a.0].data, &self.vals[b.0].data);
        debug_assert_eq!(av.len(), outer * mid * inner);
        debug_assert_eq!(bv.len(), outer * inner);
        let mut out = Vec::with_capacity(av.len());
        for o in 0..outer {
            let bslice = &bv[o * inner..(o + 1) * inner];
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                out.extend(av[base..base + inner].iter().zip(bslice).map(|(&x, &y)| x + y));
            }
        }
        let req = self.requires(a) || self.requires(b);
        let rule: Option<BackRule> = req.then(|| {
            let (ai, bi) = (a.0, b.0);
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                if vals[ai].requires_grad {
                    let da = ensure(grads, ai, vals[ai].data.len());
                    da.iter_mut().zip(dz).for_each(|(g, d)| *g += d);
                }
                if vals[bi].requires_grad {
                    let db = ensure(grads, bi, vals[bi].data.len());
                    for o in 0..outer {
                        let dbs = &mut db[o * inner..(o + 1) * inner];
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            dbs.iter_mut()
                                .zip(&dz[base..base + inner])
                                .for_each(|(g, d)| *g += d);
                        }
                    }
                }
            }) as BackRule
        });
        let t = Tensor {
            shape: self.vals[a.0].shape.clone(),
            data: out,
            requires_grad: req,
            grad: None,
        };
        self.push("add", t, rule)
    }

    /// Detects the "b broadcasts onto a" pattern of the model's adds: after
    /// left-padding b's shape with 1s, a prefix matches a, a suffix matches
    /// a, and everything between is extent 1 in b. Returns
    /// (outer, mid, inner): b is laid out [outer, inner] and tiles over mid.
    fn tiled_broadcast(sa: &[usize], sb: &[usize]) -> Option<(usize, usize, usize)> {
        if sb.len() > sa.len() {
            return None;
        }
        let ndim = sa.len();
        let pad = ndim - sb.len();
        let bdim = |i: usize| if i < pad { 1 } else { sb[i - pad] };
        let mut lo = 0;
        while lo < ndim && bdim(lo) == sa[lo] && bdim(lo) != 1 {
            lo += 1;
        }
        let mut hi = ndim;
        while hi > lo && bdim(hi - 1) == sa[hi - 1] {
            hi -= 1;
        }
        if (lo..hi).any(|i| bdim(i) != 1) {
            return None;
        }
        let outer: usize = sa[..lo].iter().product();
        let mid: usize = sa[lo..hi].iter().product();
        let inner: usize = sa[hi..].iter().product();
        Some((outer, mid, inner))
    }

    fn binary_broadcast(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        is_mul: bool,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return self.binary_same_shape(op, a, b, f, is_mul);
        }
        if !is_mul {
            if let Some(dims) = Self::tiled_broadcast(&sa, &sb) {
                return self.add_tiled(a, b, dims);
            }
        }
        let out_shape = broadcast_shape(op, &sa, &sb)?;
        let numel: usize = out_shape.iter().product();
        let ndim = out_shape.len();
        let stra = broadcast_strides(&sa, ndim);
        let strb = broadcast_strides(&sb, ndim);
        let (av, bv) = (&self.vals[a.0].data, &self.vals[b.0].data);
        let mut out = vec![0.0; numel];
        {
            let mut coords = vec![0usize; ndim];
            for o in out.iter_mut() {
                let mut ia = 0;
                let mut ib = 0;
                for d in 0..ndim {
                    ia += coords[d] * stra[d];
                    ib += coords[d] * strb[d];
                }
                *o = f(av[ia], bv[ib]);
                for d in (0..ndim).rev() {
                    coords[d] += 1;
                    if coords[d] < out_shape[d] {
                        break;
                    }
                    coords[d] = 0;
                }
            }
        }
        let req = self.requires(a) || self.requires(b);
        let rule: Option<BackRule> = req.then(|| {
            let (ai, bi) = (a.0, b.0);
            let (sa, sb, out_shape) = (sa.clone(), sb.clone(), out_shape.clone());
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let expand = |src: &[f64], shape: &[usize]| -> Vec<f64> {
                    // value of the *other* operand broadcast to the output shape
                    let strides = broadcast_strides(shape, out_shape.len());
                    let mut v = vec![0.0; dz.len()];
                    let mut coords = vec![0usize; out_shape.len()];
                    for slot in v.iter_mut() {
                        let mut idx = 0;
                        for d in 0..out_shape.len() {
                            idx += coords[d] * strides[d];
                        }
                        *slot = src[idx];
                        for d in (0..out_shape.len()).rev() {
                            coords[d] += 1;
                            if coords[d] < out_shape[d] {
                                break;
                            }
                            coords[d] = 0;
                        }
                    }
                    v
                };
                if vals[ai].requires_grad {
                    let contrib: Vec<f64> = if is_mul {
                        let bb = expand(&vals[bi].data, &sb);
                        dz.iter().zip(&bb).map(|(g, x)| g * x).collect()
                    } else {
                        dz.to_vec()
                    };
                    let red = reduce_to_shape(&contrib, &out_shape, &sa);
                    let da = ensure(grads, ai, vals[ai].data.len());
                    da.iter_mut().zip(&red).for_each(|(g, d)| *g += d);
                }
                if vals[bi].requires_grad {
                    let contrib: Vec<f64> = if is_mul {
                        let aa = expand(&vals[ai].data, &sa);
                        dz.iter().zip(&aa).map(|(g, x)| g * x).collect()
                    } else {
                        dz.to_vec()
                    };
                    let red = reduce_to_shape(&contrib, &out_shape, &sb);
                    let db = ensure(grads, bi, vals[bi].data.len());
                    db.iter_mut().zip(&red).for_each(|(g, d)| *g += d);
                }
            }) as BackRule
        });
        let t = Tensor {
            shape: out_shape,
            data: out,
            requires_grad: req,
            grad: None,
        };
        self.push(op, t, rule)
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("add", a, b, |x, y| x + y, false)
    }

    /// Elementwise product with trailing-axis broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, true)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = &self.vals[a.0];
        let out: Vec<f64> = av.data.iter().map(|x| x * c).collect();
        let req = av.requires_grad;
        let shape = av.shape.clone();
        let rule: Option<BackRule> = req.then(|| {
            let ai = a.0;
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let da = ensure(grads, ai, vals[ai].data.len());
                da.iter_mut().zip(dz).for_each(|(g, d)| *g += d * c);
            }) as BackRule
        });
        self.push(
            "scale",
            Tensor { shape, data: out, requires_grad: req, grad: None },
            rule,
        )
    }

    // ---- activations ---------------------------------------------------

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A3: f64 = 0.044715;
        let av = &self.vals[a.0];
        let req = av.requires_grad;
        let shape = av.shape.clone();
        let mut tanhs = req.then(|| Vec::with_capacity(av.data.len()));
        let out: Vec<f64> = av
            .data
            .iter()
            .map(|&x| {
                let t = (C * (x + A3 * x * x * x)).tanh();
                if let Some(ts) = tanhs.as_mut() {
                    ts.push(t);
                }
                0.5 * x * (1.0 + t)
            })
            .collect();
        let rule: Option<BackRule> = tanhs.map(|tanhs| {
            let ai = a.0;
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let da = ensure(grads, ai, vals[ai].data.len());
                for (i, (&x, &g)) in vals[ai].data.iter().zip(dz).enumerate() {
                    let t = tanhs[i];
                    let du = C * (1.0 + 3.0 * A3 * x * x);
                    da[i] += g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                }
            }) as BackRule
        });
        self.push(
            "gelu",
            Tensor { shape, data: out, requires_grad: req, grad: None },
            rule,
        )
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.vals[a.0];
        let shape = av.shape.clone();
        if axis >= shape.len() {
            return Err(CoreError::IndexOutOfRange {
                op: "softmax",
                index: axis,
                limit: shape.len(),
            });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0; av.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(av.data[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (av.data[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let req = av.requires_grad;
        // the rule needs the node's own output, so it is attached after push
        let t = Tensor {
            shape: shape.clone(),
            data: out,
            requires_grad: req,
            grad: None,
        };
        let out_var = self.push("softmax", t, None)?;
        if req {
            let (ai, oi) = (a.0, out_var.0);
            // ds_j = s_j * (dz_j - sum_k dz_k s_k) per row along the axis
            self.rules[oi] = Some(Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let s = &vals[oi].data;
                let da = ensure(grads, ai, vals[ai].data.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            let idx = base + j * inner;
                            dot += dz[idx] * s[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            da[idx] += s[idx] * (dz[idx] - dot);
                        }
                    }
                }
            }));
        }
        Ok(out_var)
    }

    /// Per-row (last axis) normalization followed by the affine map.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (sa, sg, sb) = (
            self.shape(a).to_vec(),
            self.shape(gain).to_vec(),
            self.shape(bias).to_vec(),
        );
        let d = *sa.last().ok_or_else(|| CoreError::Contract("layer_norm on 0-d tensor".into()))?;
        if sg != vec![d] || sb != vec![d] {
            return Err(CoreError::DimensionMismatch { op: "layer_norm", lhs: sa, rhs: sg });
        }
        let rows = self.vals[a.0].data.len() / d;
        let (av, gv, bv) = (
            &self.vals[a.0].data,
            &self.vals[gain.0].data,
            &self.vals[bias.0].data,
        );
        let mut out = vec![0.0; av.len()];
        let mut mean = vec![0.0; rows];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &av[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            mean[r] = mu;
            inv_std[r] = is;
            for c in 0..d {
                out[r * d + c] = (row[c] - mu) * is * gv[c] + bv[c];
            }
        }
        let req = self.requires(a) || self.requires(gain) || self.requires(bias);
        let rule: Option<BackRule> = req.then(|| {
            let (ai, gi, bi) = (a.0, gain.0, bias.0);
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let av = &vals[ai].data;
                let gv = &vals[gi].data;
                let dn = d as f64;
                if vals[ai].requires_grad {
                    let da = ensure(grads, ai, av.len());
                    for r in 0..rows {
                        let (mu, is) = (mean[r], inv_std[r]);
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for c in 0..d {
                            let xh = (av[r * d + c] - mu) * is;
                            let dxh = dz[r * d + c] * gv[c];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        for c in 0..d {
                            let xh = (av[r * d + c] - mu) * is;
                            let dxh = dz[r * d + c] * gv[c];
                            da[r * d + c] +=
                                is * (dxh - sum_dxh / dn - xh * sum_dxh_xh / dn);
                        }
                    }
                }
                if vals[gi].requires_grad {
                    let dg = ensure(grads, gi, d);
                    for r in 0..rows {
                        let (mu, is) = (mean[r], inv_std[r]);
                        for c in 0..d {
                            let xh = (av[r * d + c] - mu) * is;
                            dg[c] += dz[r * d + c] * xh;
                        }
                    }
                }
                if vals[bi].requires_grad {
                    let db = ensure(grads, bi, d);
                    for r in 0..rows {
                        for c in 0..d {
                            db[c] += dz[r * d + c];
                        }
                    }
                }
            }) as BackRule
        });
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data: out,
            requires_grad: req,
            grad: None,
        };
        self.push("layer_norm", t, rule)
    }

    /// Zeroes elements with probability `p` and rescales survivors by
    /// 1/(1-p). Identity when `p == 0` or not training.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut ChaCha12Rng, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::Contract(format!("dropout rate {p} outside [0,1)")));
        }
        if p == 0.0 || !train {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let av = &self.vals[a.0];
        let mask: Vec<f64> = (0..av.data.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let out: Vec<f64> = av.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let req = av.requires_grad;
        let shape = av.shape.clone();
        let rule: Option<BackRule> = req.then(|| {
            let ai = a.0;
            let mask = mask.clone();
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let da = ensure(grads, ai, vals[ai].data.len());
                da.iter_mut()
                    .zip(dz.iter().zip(&mask))
                    .for_each(|(g, (d, m))| *g += d * m);
            }) as BackRule
        });
        self.push(
            "dropout",
            Tensor { shape, data: out, requires_grad: req, grad: None },
            rule,
        )
    }

    // ---- structural ops --------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = &self.vals[a.0];
        let numel: usize = shape.iter().product();
        if numel != av.data.len() {
            return Err(CoreError::DimensionMismatch {
                op: "reshape",
                lhs: av.shape.clone(),
                rhs: shape,
            });
        }
        let req = av.requires_grad;
        let data = av.data.clone();
        let rule: Option<BackRule> = req.then(|| {
            let ai = a.0;
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let da = ensure(grads, ai, vals[ai].data.len());
                da.iter_mut().zip(dz).for_each(|(g, d)| *g += d);
            }) as BackRule
        });
        self.push(
            "reshape",
            Tensor { shape, data, requires_grad: req, grad: None },
            rule,
        )
    }

    /// Looks up rows of `table` ([V, d]) by id; output is lead_shape + [d].
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize], lead_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(CoreError::Contract("embedding table must be 2-d".into()));
        }
        let (v, d) = (ts[0], ts[1]);
        let lead: usize = lead_shape.iter().product();
        if lead != ids.len() {
            return Err(CoreError::DimensionMismatch {
                op: "embedding_gather",
                lhs: lead_shape.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        for &id in ids {
            if id >= v {
                return Err(CoreError::IndexOutOfRange {
                    op: "embedding_gather",
                    index: id,
                    limit: v,
                });
            }
        }
        let tv = &self.vals[table.0].data;
        let mut out = vec![0.0; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let req = self.requires(table);
        let rule: Option<BackRule> = req.then(|| {
            let ti = table.0;
            let ids = ids.to_vec();
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let dt = ensure(grads, ti, vals[ti].data.len());
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += dz[r * d + c];
                    }
                }
            }) as BackRule
        });
        let mut shape = lead_shape.to_vec();
        shape.push(d);
        self.push(
            "embedding_gather",
            Tensor { shape, data: out, requires_grad: req, grad: None },
            rule,
        )
    }

    /// Extracts position `pos` along axis 1 of a [B, L, d] tensor -> [B, d].
    pub fn select_pos(&mut self, a: Var, pos: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(CoreError::Contract("select_pos expects [B, L, d]".into()));
        }
        let (bsz, l, d) = (s[0], s[1], s[2]);
        if pos >= l {
            return Err(CoreError::IndexOutOfRange { op: "select_pos", index: pos, limit: l });
        }
        let av = &self.vals[a.0].data;
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            out[b * d..(b + 1) * d].copy_from_slice(&av[(b * l + pos) * d..(b * l + pos) * d + d]);
        }
        let req = self.requires(a);
        let rule: Option<BackRule> = req.then(|| {
            let ai = a.0;
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let da = ensure(grads, ai, vals[ai].data.len());
                for b in 0..bsz {
                    for c in 0..d {
                        da[(b * l + pos) * d + c] += dz[b * d + c];
                    }
                }
            }) as BackRule
        });
        self.push(
            "select_pos",
            Tensor { shape: vec![bsz, d], data: out, requires_grad: req, grad: None },
            rule,
        )
    }

    /// Gathers rows (b, p) from a [B, L, d] tensor into [K, d].
    pub fn gather_rows(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(CoreError::Contract("gather_rows expects [B, L, d]".into()));
        }
        let (bsz, l, d) = (s[0], s[1], s[2]);
        for &(b, p) in idx {
            if b >= bsz || p >= l {
                return Err(CoreError::IndexOutOfRange {
                    op: "gather_rows",
                    index: b * l + p,
                    limit: bsz * l,
                });
            }
        }
        let av = &self.vals[a.0].data;
        let mut out = vec![0.0; idx.len() * d];
        for (r, &(b, p)) in idx.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&av[(b * l + p) * d..(b * l + p) * d + d]);
        }
        let req = self.requires(a);
        let rule: Option<BackRule> = req.then(|| {
            let ai = a.0;
            let idx = idx.to_vec();
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let da = ensure(grads, ai, vals[ai].data.len());
                for (r, &(b, p)) in idx.iter().enumerate() {
                    for c in 0..d {
                        da[(b * l + p) * d + c] += dz[r * d + c];
                    }
                }
            }) as BackRule
        });
        self.push(
            "gather_rows",
            Tensor { shape: vec![idx.len(), d], data: out, requires_grad: req, grad: None },
            rule,
        )
    }

    /// Concatenates [B, L_i, d] tensors along the sequence axis.
    pub fn concat_rows3(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Contract("concat_rows3 of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 3 {
            return Err(CoreError::Contract("concat_rows3 expects [B, L, d]".into()));
        }
        let (bsz, d) = (first[0], first[2]);
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != bsz || s[2] != d {
                return Err(CoreError::DimensionMismatch {
                    op: "concat_rows3",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            lens.push(s[1]);
        }
        let total: usize = lens.iter().sum();
        let mut out = vec![0.0; bsz * total * d];
        let mut row = 0;
        for (&p, &l) in parts.iter().zip(&lens) {
            let pv = &self.vals[p.0].data;
            for b in 0..bsz {
                let dst = (b * total + row) * d;
                let src = b * l * d;
                out[dst..dst + l * d].copy_from_slice(&pv[src..src + l * d]);
            }
            row += l;
        }
        let req = parts.iter().any(|&p| self.requires(p));
        let rule: Option<BackRule> = req.then(|| {
            let parts: Vec<usize> = parts.iter().map(|p| p.0).collect();
            let lens = lens.clone();
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let mut row = 0;
                for (&pi, &l) in parts.iter().zip(&lens) {
                    if vals[pi].requires_grad {
                        let dp = ensure(grads, pi, vals[pi].data.len());
                        for b in 0..bsz {
                            let src = (b * total + row) * d;
                            let dst = b * l * d;
                            for i in 0..l * d {
                                dp[dst + i] += dz[src + i];
                            }
                        }
                    }
                    row += l;
                }
            }) as BackRule
        });
        self.push(
            "concat_rows3",
            Tensor {
                shape: vec![bsz, total, d],
                data: out,
                requires_grad: req,
                grad: None,
            },
            rule,
        )
    }

    /// Concatenates 2-d tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Contract("concat_cols of zero tensors".into()));
        }
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(CoreError::DimensionMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = &self.vals[p.0].data;
            for r in 0..rows {
                out[r * total + col..r * total + col + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let req = parts.iter().any(|&p| self.requires(p));
        let rule: Option<BackRule> = req.then(|| {
            let parts: Vec<usize> = parts.iter().map(|p| p.0).collect();
            let widths = widths.clone();
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let mut col = 0;
                for (&pi, &w) in parts.iter().zip(&widths) {
                    if vals[pi].requires_grad {
                        let dp = ensure(grads, pi, vals[pi].data.len());
                        for r in 0..rows {
                            for c in 0..w {
                                dp[r * w + c] += dz[r * total + col + c];
                            }
                        }
                    }
                    col += w;
                }
            }) as BackRule
        });
        self.push(
            "concat_cols",
            Tensor { shape: vec![rows, total], data: out, requires_grad: req, grad: None },
            rule,
        )
    }

    // ---- attention kernels ----------------------------------------------

    /// Scaled per-head dot products: q, k are [B, L, D] with D = heads*dh;
    /// output is [B, heads, Lq, Lk], scaled by 1/sqrt(dh).
    pub fn attention_scores(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sq[2] != sk[2] || sq[0] != sk[0] {
            return Err(CoreError::DimensionMismatch { op: "attention_scores", lhs: sq, rhs: sk });
        }
        let (bsz, lq, dim) = (sq[0], sq[1], sq[2]);
        let lk = sk[1];
        if dim % heads != 0 {
            return Err(CoreError::Config(format!(
                "width {dim} not divisible by {heads} heads"
            )));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv) = (&self.vals[q.0].data, &self.vals[k.0].data);
        let mut out = vec![0.0; bsz * heads * lq * lk];
        for b in 0..bsz {
            for h in 0..heads {
                gemm(
                    lq, dh, lk, scale,
                    qv, b * lq * dim + h * dh, dim as isize, 1,
                    kv, b * lk * dim + h * dh, 1, dim as isize,
                    0.0,
                    &mut out, (b * heads + h) * lq * lk, lk as isize, 1,
                );
            }
        }
        let req = self.requires(q) || self.requires(k);
        let rule: Option<BackRule> = req.then(|| {
            let (qi, ki) = (q.0, k.0);
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let (qv, kv) = (&vals[qi].data, &vals[ki].data);
                if vals[qi].requires_grad {
                    let dq = ensure(grads, qi, qv.len());
                    for b in 0..bsz {
                        for h in 0..heads {
                            gemm(
                                lq, lk, dh, scale,
                                dz, (b * heads + h) * lq * lk, lk as isize, 1,
                                kv, b * lk * dim + h * dh, dim as isize, 1,
                                1.0,
                                dq, b * lq * dim + h * dh, dim as isize, 1,
                            );
                        }
                    }
                }
                if vals[ki].requires_grad {
                    let dk = ensure(grads, ki, kv.len());
                    for b in 0..bsz {
                        for h in 0..heads {
                            gemm(
                                lk, lq, dh, scale,
                                dz, (b * heads + h) * lq * lk, 1, lk as isize,
                                qv, b * lq * dim + h * dh, dim as isize, 1,
                                1.0,
                                dk, b * lk * dim + h * dh, dim as isize, 1,
                            );
                        }
                    }
                }
            }) as BackRule
        });
        self.push(
            "attention_scores",
            Tensor {
                shape: vec![bsz, heads, lq, lk],
                data: out,
                requires_grad: req,
                grad: None,
            },
            rule,
        )
    }

    /// Head-wise weighted sum of values: p is [B, H, Lq, Lk], v is [B, Lk, D];
    /// output [B, Lq, D]. Heads write to disjoint column blocks.
    pub fn attention_mix(&mut self, p: Var, v: Var, heads: usize) -> Result<Var> {
        let (sp, sv) = (self.shape(p).to_vec(), self.shape(v).to_vec());
        if sp.len() != 4 || sv.len() != 3 || sp[0] != sv[0] || sp[1] != heads || sp[3] != sv[1] {
            return Err(CoreError::DimensionMismatch { op: "attention_mix", lhs: sp, rhs: sv });
        }
        let (bsz, _, lq, lk) = (sp[0], sp[1], sp[2], sp[3]);
        let dim = sv[2];
        if dim % heads != 0 {
            return Err(CoreError::Config(format!(
                "width {dim} not divisible by {heads} heads"
            )));
        }
        let dh = dim / heads;
        let (pv, vv) = (&self.vals[p.0].data, &self.vals[v.0].data);
        let mut out = vec![0.0; bsz * lq * dim];
        for b in 0..bsz {
            for h in 0..heads {
                gemm(
                    lq, lk, dh, 1.0,
                    pv, (b * heads + h) * lq * lk, lk as isize, 1,
                    vv, b * lk * dim + h * dh, dim as isize, 1,
                    0.0,
                    &mut out, b * lq * dim + h * dh, dim as isize, 1,
                );
            }
        }
        let req = self.requires(p) || self.requires(v);
        let rule: Option<BackRule> = req.then(|| {
            let (pi, vi) = (p.0, v.0);
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let (pv, vv) = (&vals[pi].data, &vals[vi].data);
                if vals[pi].requires_grad {
                    let dp = ensure(grads, pi, pv.len());
                    for b in 0..bsz {
                        for h in 0..heads {
                            gemm(
                                lq, dh, lk, 1.0,
                                dz, b * lq * dim + h * dh, dim as isize, 1,
                                vv, b * lk * dim + h * dh, 1, dim as isize,
                                1.0,
                                dp, (b * heads + h) * lq * lk, lk as isize, 1,
                            );
                        }
                    }
                }
                if vals[vi].requires_grad {
                    let dv = ensure(grads, vi, vv.len());
                    for b in 0..bsz {
                        for h in 0..heads {
                            gemm(
                                lk, lq, dh, 1.0,
                                pv, (b * heads + h) * lq * lk, 1, lk as isize,
                                dz, b * lq * dim + h * dh, dim as isize, 1,
                                1.0,
                                dv, b * lk * dim + h * dh, dim as isize, 1,
                            );
                        }
                    }
                }
            }) as BackRule
        });
        self.push(
            "attention_mix",
            Tensor {
                shape: vec![bsz, lq, dim],
                data: out,
                requires_grad: req,
                grad: None,
            },
            rule,
        )
    }

    // ---- losses ----------------------------------------------------------

    /// Mean over rows of -log softmax(logits)[target].
    pub fn cross_entropy_from_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = targets.len().max(1);
        let w = vec![1.0 / n as f64; targets.len()];
        self.cross_entropy_weighted(logits, targets, &w)
    }

    /// Weighted sum over rows of -log softmax(logits)[target]; the per-row
    /// weights let a caller average per instance before averaging a batch.
    pub fn cross_entropy_weighted(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || targets.len() != weights.len() {
            return Err(CoreError::DimensionMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let (n, c) = (s[0], s[1]);
        for &t in targets {
            if t >= c {
                return Err(CoreError::IndexOutOfRange { op: "cross_entropy", index: t, limit: c });
            }
        }
        let lv = &self.vals[logits.0].data;
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[r * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[r * c + j] /= sum;
            }
            let lse = mx + sum.ln();
            loss += weights[r] * (lse - row[targets[r]]);
        }
        let req = self.requires(logits);
        let rule: Option<BackRule> = req.then(|| {
            let li = logits.0;
            let targets = targets.to_vec();
            let weights = weights.to_vec();
            let probs = probs.clone();
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let dl = ensure(grads, li, vals[li].data.len());
                for r in 0..n {
                    let g = dz[0] * weights[r];
                    for j in 0..c {
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        dl[r * c + j] += g * (probs[r * c + j] - onehot);
                    }
                }
            }) as BackRule
        });
        self.push(
            "cross_entropy",
            Tensor { shape: vec![1], data: vec![loss], requires_grad: req, grad: None },
            rule,
        )
    }

    /// Mean binary cross-entropy on logits, computed in log space.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let numel = self.vals[logits.0].data.len();
        if numel != labels.len() {
            return Err(CoreError::DimensionMismatch {
                op: "bce_with_logits",
                lhs: vec![numel],
                rhs: vec![labels.len()],
            });
        }
        for &y in labels {
            if y != 0.0 && y != 1.0 {
                return Err(CoreError::Contract(format!("bce label {y} is not binary")));
            }
        }
        let lv = &self.vals[logits.0].data;
        let mut loss = 0.0;
        for (&z, &y) in lv.iter().zip(labels) {
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        loss /= numel as f64;
        let req = self.requires(logits);
        let rule: Option<BackRule> = req.then(|| {
            let li = logits.0;
            let labels = labels.to_vec();
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let g = dz[0] / labels.len() as f64;
                let dl = ensure(grads, li, vals[li].data.len());
                for (i, (&z, &y)) in vals[li].data.iter().zip(&labels).enumerate() {
                    let sig = 1.0 / (1.0 + (-z).exp());
                    dl[i] += g * (sig - y);
                }
            }) as BackRule
        });
        self.push(
            "bce_with_logits",
            Tensor { shape: vec![1], data: vec![loss], requires_grad: req, grad: None },
            rule,
        )
    }

    /// Sum of all elements; mostly useful as a test scalarizer.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let av = &self.vals[a.0];
        let s: f64 = av.data.iter().sum();
        let req = av.requires_grad;
        let rule: Option<BackRule> = req.then(|| {
            let ai = a.0;
            Box::new(move |vals: &[Tensor], dz: &[f64], grads: &mut Grads| {
                let da = ensure(grads, ai, vals[ai].data.len());
                da.iter_mut().for_each(|g| *g += dz[0]);
            }) as BackRule
        });
        self.push(
            "sum_all",
            Tensor { shape: vec![1], data: vec![s], requires_grad: req, grad: None },
            rule,
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// requires_grad value reachable from `loss`; others stay untouched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.vals[loss.0].numel() != 1 {
            return Err(CoreError::Contract(format!(
                "backward on non-scalar loss of shape {:?}",
                self.vals[loss.0].shape
            )));
        }
        self.grads = vec![None; self.vals.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        let Tape { vals, rules, grads } = self;
        for i in (0..vals.len()).rev() {
            if let Some(rule) = &rules[i] {
                // take dz so intermediate buffers free as we go; leaves keep theirs
                if let Some(dz) = grads[i].take() {
                    rule(vals, &dz, grads);
                }
            }
        }
        Ok(())
    }
}
