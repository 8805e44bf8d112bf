use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Pointwise primitives exposed through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF.
    Gelu,
    Silu,
    Softplus,
    Exp,
    Neg,
}

/// Records primitive applications in execution order; backward replays the
/// list exactly once in reverse, which is a valid topological order by
/// construction. Gradient accumulation order is therefore fixed, making
/// backward deterministic. A tape is single-threaded.
pub struct Tape<R: Real> {
    ops: RefCell<Vec<Box<dyn Fn()>>>,
    recording: bool,
    _marker: std::marker::PhantomData<R>,
}

impl<R: Real> Tape<R> {
    /// A recording tape for training and gradient checks.
    pub fn new() -> Self {
        Tape {
            ops: RefCell::new(Vec::new()),
            recording: true,
            _marker: std::marker::PhantomData,
        }
    }

    /// A non-recording tape: forward only, no gradient buffers allocated.
    pub fn inference() -> Self {
        Tape {
            ops: RefCell::new(Vec::new()),
            recording: false,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_ops(&self) -> usize {
        self.ops.borrow().len()
    }

    fn push(&self, f: impl Fn() + 'static) {
        self.ops.borrow_mut().push(Box::new(f));
    }

    fn track(&self, inputs: &[&Tensor<R>]) -> bool {
        self.recording && inputs.iter().any(|t| t.has_grad())
    }

    /// Seeds `d loss = 1` and replays the tape in reverse, populating the
    /// gradient buffer of every participating tensor (`+=` across fan-out).
    pub fn backward(&self, loss: &Tensor<R>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let g = loss.grad_rc().ok_or_else(|| {
            Error::Contract("loss does not participate in the tape (no gradient buffer)".into())
        })?;
        g.borrow_mut()[0] = R::ONE;
        for op in self.ops.borrow().iter().rev() {
            op();
        }
        Ok(())
    }

    // ---------------------------------------------------------------
    // arithmetic
    // ---------------------------------------------------------------

    pub fn add(&self, a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
        if a.shape() != b.shape() {
            return Err(Error::shape("add", a.shape(), b.shape()));
        }
        let data: Vec<R> = {
            let (ad, bd) = (a.data(), b.data());
            ad.iter().zip(bd.iter()).map(|(&x, &y)| x + y).collect()
        };
        let out = Tensor::from_vec(a.shape(), data)?.with_grad_buffer(self.track(&[a, b]));
        if let Some(og) = out.grad_rc() {
            let (ag, bg) = (a.grad_rc(), b.grad_rc());
            self.push(move || {
                let og = og.borrow();
                for g in [&ag, &bg].into_iter().flatten() {
                    let mut g = g.borrow_mut();
                    for (gi, &o) in g.iter_mut().zip(og.iter()) {
                        *gi += o;
                    }
                }
            });
        }
        Ok(out)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape (bias or a
    /// positional table broadcast over leading axes).
    pub fn add_broadcast(&self, a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != bsh[..] {
            return Err(Error::shape("add_broadcast", &ash, &bsh));
        }
        let bn = b.numel();
        let data: Vec<R> = {
            let (ad, bd) = (a.data(), b.data());
            ad.iter()
                .enumerate()
                .map(|(i, &x)| x + bd[i % bn])
                .collect()
        };
        let out = Tensor::from_vec(&ash, data)?.with_grad_buffer(self.track(&[a, b]));
        if let Some(og) = out.grad_rc() {
            let (ag, bg) = (a.grad_rc(), b.grad_rc());
            self.push(move || {
                let og = og.borrow();
                if let Some(ag) = &ag {
                    let mut ag = ag.borrow_mut();
                    for (gi, &o) in ag.iter_mut().zip(og.iter()) {
                        *gi += o;
                    }
                }
                if let Some(bg) = &bg {
                    let mut bg = bg.borrow_mut();
                    for (i, &o) in og.iter().enumerate() {
                        bg[i % bn] += o;
                    }
                }
            });
        }
        Ok(out)
    }

    pub fn mul(&self, a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
        if a.shape() != b.shape() {
            return Err(Error::shape("mul", a.shape(), b.shape()));
        }
        let data: Vec<R> = {
            let (ad, bd) = (a.data(), b.data());
            ad.iter().zip(bd.iter()).map(|(&x, &y)| x * y).collect()
        };
        let out = Tensor::from_vec(a.shape(), data)?.with_grad_buffer(self.track(&[a, b]));
        if let Some(og) = out.grad_rc() {
            let (ad, bd) = (a.data_rc(), b.data_rc());
            let (ag, bg) = (a.grad_rc(), b.grad_rc());
            self.push(move || {
                let og = og.borrow();
                if let Some(ag) = &ag {
                    let bd = bd.borrow();
                    let mut ag = ag.borrow_mut();
                    for i in 0..og.len() {
                        ag[i] += og[i] * bd[i];
                    }
                }
                if let Some(bg) = &bg {
                    let ad = ad.borrow();
                    let mut bg = bg.borrow_mut();
                    for i in 0..og.len() {
                        bg[i] += og[i] * ad[i];
                    }
                }
            });
        }
        Ok(out)
    }

    pub fn scale(&self, a: &Tensor<R>, c: R) -> Result<Tensor<R>> {
        let data: Vec<R> = a.data().iter().map(|&x| x * c).collect();
        let out = Tensor::from_vec(a.shape(), data)?.with_grad_buffer(self.track(&[a]));
        if let Some(og) = out.grad_rc() {
            let ag = a.grad_rc();
            self.push(move || {
                if let Some(ag) = &ag {
                    let og = og.borrow();
                    let mut ag = ag.borrow_mut();
                    for i in 0..og.len() {
                        ag[i] += og[i] * c;
                    }
                }
            });
        }
        Ok(out)
    }

    pub fn elementwise(&self, a: &Tensor<R>, kind: Unary) -> Result<Tensor<R>> {
        let data: Vec<R> = a.data().iter().map(|&x| unary_value(x, kind)).collect();
        let out = Tensor::from_vec(a.shape(), data)?.with_grad_buffer(self.track(&[a]));
        if let Some(og) = out.grad_rc() {
            let ad = a.data_rc();
            let ag = a.grad_rc();
            self.push(move || {
                if let Some(ag) = &ag {
                    let og = og.borrow();
                    let ad = ad.borrow();
                    let mut ag = ag.borrow_mut();
                    for i in 0..og.len() {
                        ag[i] += og[i] * unary_deriv(ad[i], kind);
                    }
                }
            });
        }
        Ok(out)
    }

    pub fn gelu(&self, a: &Tensor<R>) -> Result<Tensor<R>> {
        self.elementwise(a, Unary::Gelu)
    }
    pub fn silu(&self, a: &Tensor<R>) -> Result<Tensor<R>> {
        self.elementwise(a, Unary::Silu)
    }
    pub fn softplus(&self, a: &Tensor<R>) -> Result<Tensor<R>> {
        self.elementwise(a, Unary::Softplus)
    }

    pub fn sum_all(&self, a: &Tensor<R>) -> Result<Tensor<R>> {
        let s: R = a.data().iter().copied().sum();
        let out = Tensor::scalar(s).with_grad_buffer(self.track(&[a]));
        if let Some(og) = out.grad_rc() {
            let ag = a.grad_rc();
            self.push(move || {
                if let Some(ag) = &ag {
                    let g = og.borrow()[0];
                    for v in ag.borrow_mut().iter_mut() {
                        *v += g;
                    }
                }
            });
        }
        Ok(out)
    }

    // ---------------------------------------------------------------
    // shape plumbing
    // ---------------------------------------------------------------

    /// Zero-copy reshape; gradient buffer is shared with the input, so no
    /// backward op is recorded.
    pub fn reshape(&self, a: &Tensor<R>, shape: &[usize]) -> Result<Tensor<R>> {
        if shape.iter().product::<usize>() != a.numel() {
            return Err(Error::shape("reshape", a.shape(), shape));
        }
        Ok(a.reshaped(shape))
    }

    /// Narrows the last axis to `[start, start+len)`.
    pub fn slice_last(&self, a: &Tensor<R>, start: usize, len: usize) -> Result<Tensor<R>> {
        let s = *a.shape().last().ok_or_else(|| {
            Error::Contract("slice_last on rank-0 tensor".into())
        })?;
        if start + len > s {
            return Err(Error::Contract(format!(
                "slice_last [{start}, {}) out of last axis {s}",
                start + len
            )));
        }
        let rows = a.numel() / s;
        let mut data = Vec::with_capacity(rows * len);
        {
            let ad = a.data();
            for r in 0..rows {
                data.extend_from_slice(&ad[r * s + start..r * s + start + len]);
            }
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::from_vec(&shape, data)?.with_grad_buffer(self.track(&[a]));
        if let Some(og) = out.grad_rc() {
            let ag = a.grad_rc();
            self.push(move || {
                if let Some(ag) = &ag {
                    let og = og.borrow();
                    let mut ag = ag.borrow_mut();
                    for r in 0..rows {
                        for j in 0..len {
                            ag[r * s + start + j] += og[r * len + j];
                        }
                    }
                }
            });
        }
        Ok(out)
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_last(&self, parts: &[&Tensor<R>]) -> Result<Tensor<R>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_last of zero tensors".into()));
        }
        let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let sh = p.shape();
            if &sh[..sh.len() - 1] != lead {
                return Err(Error::shape("concat_last", parts[0].shape(), sh));
            }
            widths.push(sh[sh.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = vec![R::ZERO; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let pd = p.data();
                data[r * total + off..r * total + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::from_vec(&shape, data)?.with_grad_buffer(self.track(parts));
        if let Some(og) = out.grad_rc() {
            let grads: Vec<_> = parts.iter().map(|p| p.grad_rc()).collect();
            let widths = widths.clone();
            self.push(move || {
                let og = og.borrow();
                for r in 0..rows {
                    let mut off = 0;
                    for (g, &w) in grads.iter().zip(&widths) {
                        if let Some(g) = g {
                            let mut g = g.borrow_mut();
                            for j in 0..w {
                                g[r * w + j] += og[r * total + off + j];
                            }
                        }
                        off += w;
                    }
                }
            });
        }
        Ok(out)
    }

    /// Gathers one row per batch element: `x[b, idx[b], :]`.
    pub fn select_positions(&self, x: &Tensor<R>, idx: &[usize]) -> Result<Tensor<R>> {
        let sh = x.shape();
        if sh.len() != 3 {
            return Err(Error::shape("select_positions", sh, &[0, 0, 0]));
        }
        let (b, l, d) = (sh[0], sh[1], sh[2]);
        if idx.len() != b {
            return Err(Error::shape("select_positions idx", &[idx.len()], &[b]));
        }
        let mut data = Vec::with_capacity(b * d);
        {
            let xd = x.data();
            for (bi, &t) in idx.iter().enumerate() {
                if t >= l {
                    return Err(Error::Contract(format!(
                        "select_positions index {t} out of length {l}"
                    )));
                }
                data.extend_from_slice(&xd[(bi * l + t) * d..(bi * l + t + 1) * d]);
            }
        }
        let out = Tensor::from_vec(&[b, d], data)?.with_grad_buffer(self.track(&[x]));
        if let Some(og) = out.grad_rc() {
            let xg = x.grad_rc();
            let idx = idx.to_vec();
            self.push(move || {
                if let Some(xg) = &xg {
                    let og = og.borrow();
                    let mut xg = xg.borrow_mut();
                    for (bi, &t) in idx.iter().enumerate() {
                        for j in 0..d {
                            xg[(bi * l + t) * d + j] += og[bi * d + j];
                        }
                    }
                }
            });
        }
        Ok(out)
    }

    // ---------------------------------------------------------------
    // matmul
    // ---------------------------------------------------------------

    /// Batched matrix product. Operands are rank 2 or 3; a rank-2 operand
    /// broadcasts across the other's batch axis. With `trans_b` the second
    /// operand is stored `[.., n, k]` and used transposed.
    pub fn matmul_ex(&self, a: &Tensor<R>, b: &Tensor<R>, trans_b: bool) -> Result<Tensor<R>> {
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        if ash.len() < 2 || ash.len() > 3 || bsh.len() < 2 || bsh.len() > 3 {
            return Err(Error::shape("matmul rank", &ash, &bsh));
        }
        let (ba, m, ka) = split_batched(&ash);
        let (bb, d0, d1) = split_batched(&bsh);
        let (kb, n) = if trans_b { (d1, d0) } else { (d0, d1) };
        if ka != kb || (ba != bb && ba != 1 && bb != 1) {
            return Err(Error::shape("matmul", &ash, &bsh));
        }
        let batch = ba.max(bb);
        let k = ka;
        let mut out_shape = if ash.len() >= bsh.len() {
            ash[..ash.len() - 2].to_vec()
        } else {
            bsh[..bsh.len() - 2].to_vec()
        };
        out_shape.push(m);
        out_shape.push(n);

        let mut data = vec![R::ZERO; batch * m * n];
        {
            let ad = a.data();
            let bd = b.data();
            for i in 0..batch {
                let ai = if ba == 1 { 0 } else { i };
                let bi = if bb == 1 { 0 } else { i };
                let (rsb, csb) = if trans_b {
                    (1isize, k as isize)
                } else {
                    (n as isize, 1isize)
                };
                unsafe {
                    R::gemm(
                        m,
                        k,
                        n,
                        R::ONE,
                        ad.as_ptr().add(ai * m * k),
                        k as isize,
                        1,
                        bd.as_ptr().add(bi * k * n),
                        rsb,
                        csb,
                        R::ZERO,
                        data.as_mut_ptr().add(i * m * n),
                        n as isize,
                        1,
                    );
                }
            }
        }
        let out = Tensor::from_vec(&out_shape, data)?.with_grad_buffer(self.track(&[a, b]));
        if let Some(og) = out.grad_rc() {
            let (ad, bd) = (a.data_rc(), b.data_rc());
            let (ag, bg) = (a.grad_rc(), b.grad_rc());
            self.push(move || {
                let og = og.borrow();
                for i in 0..batch {
                    let ai = if ba == 1 { 0 } else { i };
                    let bi = if bb == 1 { 0 } else { i };
                    let go = og[i * m * n..].as_ptr();
                    if let Some(ag) = &ag {
                        // dA = dY * B^T  (or dY * B when b was transposed)
                        let bd = bd.borrow();
                        let mut ag = ag.borrow_mut();
                        let (rsb, csb) = if trans_b {
                            (k as isize, 1isize) // B stored [n,k]; want [n,k] as is
                        } else {
                            (1isize, n as isize) // B stored [k,n]; want its transpose
                        };
                        unsafe {
                            R::gemm(
                                m,
                                n,
                                k,
                                R::ONE,
                                go,
                                n as isize,
                                1,
                                bd.as_ptr().add(bi * k * n),
                                rsb,
                                csb,
                                R::ONE,
                                ag.as_mut_ptr().add(ai * m * k),
                                k as isize,
                                1,
                            );
                        }
                    }
                    if let Some(bg) = &bg {
                        let ad = ad.borrow();
                        let mut bg = bg.borrow_mut();
                        unsafe {
                            if trans_b {
                                // B stored [n,k]: dB = dY^T * A
                                R::gemm(
                                    n,
                                    m,
                                    k,
                                    R::ONE,
                                    go,
                                    1,
                                    n as isize,
                                    ad.as_ptr().add(ai * m * k),
                                    k as isize,
                                    1,
                                    R::ONE,
                                    bg.as_mut_ptr().add(bi * k * n),
                                    k as isize,
                                    1,
                                );
                            } else {
                                // dB = A^T * dY
                                R::gemm(
                                    k,
                                    m,
                                    n,
                                    R::ONE,
                                    ad.as_ptr().add(ai * m * k),
                                    1,
                                    k as isize,
                                    go,
                                    n as isize,
                                    1,
                                    R::ONE,
                                    bg.as_mut_ptr().add(bi * k * n),
                                    n as isize,
                                    1,
                                );
                            }
                        }
                    }
                }
            });
        }
        Ok(out)
    }

    pub fn matmul(&self, a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
        self.matmul_ex(a, b, false)
    }

    // ---------------------------------------------------------------
    // normalization and attention
    // ---------------------------------------------------------------

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, a: &Tensor<R>, axis: usize) -> Result<Tensor<R>> {
        let sh = a.shape().to_vec();
        if axis >= sh.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of rank {}",
                sh.len()
            )));
        }
        let alen = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let outer: usize = sh[..axis].iter().product();
        let mut data = a.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * alen * inner + i;
                let mut mx = data[base];
                for j in 1..alen {
                    mx = mx.max(data[base + j * inner]);
                }
                let mut sum = R::ZERO;
                for j in 0..alen {
                    let e = (data[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..alen {
                    data[base + j * inner] = data[base + j * inner] / sum;
                }
            }
        }
        let out = Tensor::from_vec(&sh, data)?.with_grad_buffer(self.track(&[a]));
        if let Some(og) = out.grad_rc() {
            let yd = out.data_rc();
            let ag = a.grad_rc();
            self.push(move || {
                if let Some(ag) = &ag {
                    let og = og.borrow();
                    let yd = yd.borrow();
                    let mut ag = ag.borrow_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * alen * inner + i;
                            let mut dot = R::ZERO;
                            for j in 0..alen {
                                dot += og[base + j * inner] * yd[base + j * inner];
                            }
                            for j in 0..alen {
                                let idx = base + j * inner;
                                ag[idx] += yd[idx] * (og[idx] - dot);
                            }
                        }
                    }
                }
            });
        }
        Ok(out)
    }

    /// Softmax over the key axis of attention scores `[B, L, S]`,
    /// restricted to eligible keys: `s <= t` under the causal mask and
    /// `key_mask[b][s]` true. Max and sum run over eligible entries only,
    /// so masked keys cannot perturb eligible outputs even in the last
    /// bit. Rows with no eligible key produce all zeros.
    pub fn attention_softmax(
        &self,
        scores: &Tensor<R>,
        key_mask: &[bool],
        causal: bool,
    ) -> Result<Tensor<R>> {
        let sh = scores.shape().to_vec();
        if sh.len() != 3 {
            return Err(Error::shape("attention_softmax", &sh, &[0, 0, 0]));
        }
        let (b, l, s) = (sh[0], sh[1], sh[2]);
        if key_mask.len() != b * s {
            return Err(Error::shape("attention_softmax mask", &[key_mask.len()], &[b * s]));
        }
        let mut data = vec![R::ZERO; b * l * s];
        {
            let sd = scores.data();
            for bi in 0..b {
                for t in 0..l {
                    let row = (bi * l + t) * s;
                    let hi = if causal { (t + 1).min(s) } else { s };
                    let mut mx: Option<R> = None;
                    for j in 0..hi {
                        if key_mask[bi * s + j] {
                            let v = sd[row + j];
                            mx = Some(match mx {
                                Some(m) => m.max(v),
                                None => v,
                            });
                        }
                    }
                    let Some(mx) = mx else { continue }; // fully masked row: zeros
                    let mut sum = R::ZERO;
                    for j in 0..hi {
                        if key_mask[bi * s + j] {
                            let e = (sd[row + j] - mx).exp();
                            data[row + j] = e;
                            sum += e;
                        }
                    }
                    for j in 0..hi {
                        if key_mask[bi * s + j] {
                            data[row + j] = data[row + j] / sum;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&sh, data)?.with_grad_buffer(self.track(&[scores]));
        if let Some(og) = out.grad_rc() {
            let yd = out.data_rc();
            let sg = scores.grad_rc();
            self.push(move || {
                if let Some(sg) = &sg {
                    let og = og.borrow();
                    let yd = yd.borrow();
                    let mut sg = sg.borrow_mut();
                    for row in 0..b * l {
                        let base = row * s;
                        let mut dot = R::ZERO;
                        for j in 0..s {
                            dot += og[base + j] * yd[base + j];
                        }
                        for j in 0..s {
                            // y is zero at masked entries, so their grad is zero
                            sg[base + j] += yd[base + j] * (og[base + j] - dot);
                        }
                    }
                }
            });
        }
        Ok(out)
    }

    /// LayerNorm over the last axis with population variance.
    pub fn layer_norm(
        &self,
        x: &Tensor<R>,
        gamma: &Tensor<R>,
        beta: &Tensor<R>,
        eps: f64,
    ) -> Result<Tensor<R>> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let sh = x.shape().to_vec();
        let d = *sh.last().ok_or_else(|| Error::Contract("layer_norm on rank-0".into()))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape("layer_norm affine", gamma.shape(), &[d]));
        }
        let rows = x.numel() / d;
        let epsr = R::from_f64(eps);
        let inv_d = R::ONE / R::from_f64(d as f64);
        let mut xhat = vec![R::ZERO; rows * d];
        let mut inv_std = vec![R::ZERO; rows];
        let mut data = vec![R::ZERO; rows * d];
        {
            let xd = x.data();
            let gd = gamma.data();
            let bd = beta.data();
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean: R = row.iter().copied().sum::<R>() * inv_d;
                let mut var = R::ZERO;
                for &v in row {
                    let c = v - mean;
                    var += c * c;
                }
                var = var * inv_d;
                let is = R::ONE / (var + epsr).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let xh = (row[j] - mean) * is;
                    xhat[r * d + j] = xh;
                    data[r * d + j] = xh * gd[j] + bd[j];
                }
            }
        }
        let out =
            Tensor::from_vec(&sh, data)?.with_grad_buffer(self.track(&[x, gamma, beta]));
        if let Some(og) = out.grad_rc() {
            let xg = x.grad_rc();
            let gg = gamma.grad_rc();
            let bg = beta.grad_rc();
            let gd = gamma.data_rc();
            self.push(move || {
                let og = og.borrow();
                if let Some(bg) = &bg {
                    let mut bg = bg.borrow_mut();
                    for r in 0..rows {
                        for j in 0..d {
                            bg[j] += og[r * d + j];
                        }
                    }
                }
                if let Some(gg) = &gg {
                    let mut gg = gg.borrow_mut();
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += og[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(xg) = &xg {
                    let gd = gd.borrow();
                    let mut xg = xg.borrow_mut();
                    for r in 0..rows {
                        let mut m1 = R::ZERO; // mean of dxhat
                        let mut m2 = R::ZERO; // mean of dxhat * xhat
                        for j in 0..d {
                            let dxh = og[r * d + j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let dxh = og[r * d + j] * gd[j];
                            xg[r * d + j] += inv_std[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            });
        }
        Ok(out)
    }

    // ---------------------------------------------------------------
    // sequence primitives
    // ---------------------------------------------------------------

    /// Depthwise causal 1-D convolution over `[B, L, C]` with implicit
    /// left padding of `K-1` zeros. Output at position `t` reads inputs
    /// `t-K+1..=t` only.
    pub fn causal_conv1d(
        &self,
        x: &Tensor<R>,
        kernel: &Tensor<R>,
        bias: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        let sh = x.shape().to_vec();
        if sh.len() != 3 {
            return Err(Error::shape("causal_conv1d input", &sh, &[0, 0, 0]));
        }
        let (b, l, c) = (sh[0], sh[1], sh[2]);
        let ksh = kernel.shape().to_vec();
        if ksh.len() != 2 || ksh[1] != c || ksh[0] < 1 {
            return Err(Error::shape("causal_conv1d kernel", &ksh, &[1, c]));
        }
        let k = ksh[0];
        if bias.shape() != [c] {
            return Err(Error::shape("causal_conv1d bias", bias.shape(), &[c]));
        }
        let mut data = vec![R::ZERO; b * l * c];
        {
            let xd = x.data();
            let kd = kernel.data();
            let bd = bias.data();
            for bi in 0..b {
                for t in 0..l {
                    let o = (bi * l + t) * c;
                    for ch in 0..c {
                        let mut acc = bd[ch];
                        // kernel tap k-1 aligns with the current position
                        for j in 0..k {
                            let tt = t as isize - (k - 1 - j) as isize;
                            if tt >= 0 {
                                acc += kd[j * c + ch] * xd[(bi * l + tt as usize) * c + ch];
                            }
                        }
                        data[o + ch] = acc;
                    }
                }
            }
        }
        let out =
            Tensor::from_vec(&sh, data)?.with_grad_buffer(self.track(&[x, kernel, bias]));
        if let Some(og) = out.grad_rc() {
            let xd = x.data_rc();
            let kd = kernel.data_rc();
            let xg = x.grad_rc();
            let kg = kernel.grad_rc();
            let bg = bias.grad_rc();
            self.push(move || {
                let og = og.borrow();
                if let Some(bg) = &bg {
                    let mut bg = bg.borrow_mut();
                    for i in 0..b * l {
                        for ch in 0..c {
                            bg[ch] += og[i * c + ch];
                        }
                    }
                }
                if let Some(kg) = &kg {
                    let xd = xd.borrow();
                    let mut kg = kg.borrow_mut();
                    for bi in 0..b {
                        for t in 0..l {
                            for j in 0..k {
                                let tt = t as isize - (k - 1 - j) as isize;
                                if tt >= 0 {
                                    for ch in 0..c {
                                        kg[j * c + ch] += og[(bi * l + t) * c + ch]
                                            * xd[(bi * l + tt as usize) * c + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(xg) = &xg {
                    let kd = kd.borrow();
                    let mut xg = xg.borrow_mut();
                    for bi in 0..b {
                        for t in 0..l {
                            for j in 0..k {
                                let tt = t as isize - (k - 1 - j) as isize;
                                if tt >= 0 {
                                    for ch in 0..c {
                                        xg[(bi * l + tt as usize) * c + ch] +=
                                            og[(bi * l + t) * c + ch] * kd[j * c + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        Ok(out)
    }

    /// Inverted dropout: training mode zeroes each element with
    /// probability `p` and scales survivors by `1/(1-p)`; eval mode is the
    /// identity.
    pub fn dropout(
        &self,
        x: &Tensor<R>,
        p: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<R>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout p must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x.clone());
        }
        let scale = R::from_f64(1.0 / (1.0 - p));
        let mask: Vec<R> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < p { R::ZERO } else { scale })
            .collect();
        let data: Vec<R> = x
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::from_vec(x.shape(), data)?.with_grad_buffer(self.track(&[x]));
        if let Some(og) = out.grad_rc() {
            let xg = x.grad_rc();
            self.push(move || {
                if let Some(xg) = &xg {
                    let og = og.borrow();
                    let mut xg = xg.borrow_mut();
                    for i in 0..og.len() {
                        xg[i] += og[i] * mask[i];
                    }
                }
            });
        }
        Ok(out)
    }

    /// Row lookup into an embedding table `[V+1, D]`. Row 0 is the frozen
    /// padding row: it is looked up normally (all zeros) but receives no
    /// gradient.
    pub fn embedding(
        &self,
        ids: &[u32],
        batch_shape: (usize, usize),
        table: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        let (b, l) = batch_shape;
        if ids.len() != b * l {
            return Err(Error::shape("embedding ids", &[ids.len()], &[b * l]));
        }
        let tsh = table.shape().to_vec();
        if tsh.len() != 2 {
            return Err(Error::shape("embedding table", &tsh, &[0, 0]));
        }
        let (rows, d) = (tsh[0], tsh[1]);
        let mut data = Vec::with_capacity(b * l * d);
        {
            let td = table.data();
            for &id in ids {
                let id = id as usize;
                if id >= rows {
                    return Err(Error::OutOfVocab { id, vocab: rows - 1 });
                }
                data.extend_from_slice(&td[id * d..(id + 1) * d]);
            }
        }
        let out =
            Tensor::from_vec(&[b, l, d], data)?.with_grad_buffer(self.track(&[table]));
        if let Some(og) = out.grad_rc() {
            let tg = table.grad_rc();
            let ids = ids.to_vec();
            self.push(move || {
                if let Some(tg) = &tg {
                    let og = og.borrow();
                    let mut tg = tg.borrow_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        if id == 0 {
                            continue; // padding row stays frozen
                        }
                        let id = id as usize;
                        for j in 0..d {
                            tg[id * d + j] += og[r * d + j];
                        }
                    }
                }
            });
        }
        Ok(out)
    }

    /// Input-dependent (selective) state-space recurrence, per channel `c`:
    ///
    /// ```text
    /// h_0 = 0
    /// abar_t = exp(delta_t[c] * A[c, :])        (ZOH discretization)
    /// h_t    = abar_t (.) h_{t-1} + delta_t[c] * B_t * u_t[c]
    /// y_t[c] = <C_t, h_t> + D_skip[c] * u_t[c]
    /// ```
    ///
    /// Strictly causal by construction. A sequential scan; backward
    /// recomputes the per-(row, channel) state trajectory, so nothing is
    /// stored at forward time.
    pub fn selective_scan(
        &self,
        u: &Tensor<R>,
        delta: &Tensor<R>,
        a: &Tensor<R>,
        b_in: &Tensor<R>,
        c_in: &Tensor<R>,
        d_skip: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        let ush = u.shape().to_vec();
        if ush.len() != 3 {
            return Err(Error::shape("selective_scan u", &ush, &[0, 0, 0]));
        }
        let (bsz, l, e) = (ush[0], ush[1], ush[2]);
        if delta.shape() != ush.as_slice() {
            return Err(Error::shape("selective_scan delta", delta.shape(), &ush));
        }
        let ash = a.shape().to_vec();
        if ash.len() != 2 || ash[0] != e {
            return Err(Error::shape("selective_scan A", &ash, &[e, 0]));
        }
        let s = ash[1];
        if b_in.shape() != [bsz, l, s] || c_in.shape() != [bsz, l, s] {
            return Err(Error::shape("selective_scan B/C", b_in.shape(), &[bsz, l, s]));
        }
        if d_skip.shape() != [e] {
            return Err(Error::shape("selective_scan D", d_skip.shape(), &[e]));
        }
        if delta.data().iter().any(|&v| !(v > R::ZERO)) {
            return Err(Error::Contract(
                "selective_scan requires strictly positive delta".into(),
            ));
        }

        let mut data = vec![R::ZERO; bsz * l * e];
        {
            let ud = u.data();
            let dd = delta.data();
            let ad = a.data();
            let bd = b_in.data();
            let cd = c_in.data();
            let skd = d_skip.data();
            let mut h = vec![R::ZERO; s];
            for bi in 0..bsz {
                for ch in 0..e {
                    h.iter_mut().for_each(|v| *v = R::ZERO);
                    for t in 0..l {
                        let idx = (bi * l + t) * e + ch;
                        let dt = dd[idx];
                        let ut = ud[idx];
                        let brow = (bi * l + t) * s;
                        let mut acc = R::ZERO;
                        for si in 0..s {
                            let abar = (dt * ad[ch * s + si]).exp();
                            let hv = abar * h[si] + dt * bd[brow + si] * ut;
                            h[si] = hv;
                            acc += cd[brow + si] * hv;
                        }
                        data[idx] = acc + skd[ch] * ut;
                    }
                }
            }
        }
        let out = Tensor::from_vec(&ush, data)?
            .with_grad_buffer(self.track(&[u, delta, a, b_in, c_in, d_skip]));
        if let Some(og) = out.grad_rc() {
            let ud = u.data_rc();
            let dd = delta.data_rc();
            let ad = a.data_rc();
            let bd = b_in.data_rc();
            let cd = c_in.data_rc();
            let skd = d_skip.data_rc();
            let ug = u.grad_rc();
            let dg = delta.grad_rc();
            let agr = a.grad_rc();
            let bg = b_in.grad_rc();
            let cg = c_in.grad_rc();
            let skg = d_skip.grad_rc();
            self.push(move || {
                let og = og.borrow();
                let ud = ud.borrow();
                let dd = dd.borrow();
                let ad = ad.borrow();
                let bd = bd.borrow();
                let cd = cd.borrow();
                let skd = skd.borrow();
                let mut ug = ug.as_ref().map(|g| g.borrow_mut());
                let mut dg = dg.as_ref().map(|g| g.borrow_mut());
                let mut agr = agr.as_ref().map(|g| g.borrow_mut());
                let mut bg = bg.as_ref().map(|g| g.borrow_mut());
                let mut cg = cg.as_ref().map(|g| g.borrow_mut());
                let mut skg = skg.as_ref().map(|g| g.borrow_mut());
                let mut hs = vec![R::ZERO; l * s];
                let mut gh = vec![R::ZERO; s];
                for bi in 0..bsz {
                    for ch in 0..e {
                        // recompute the state trajectory for this (row, channel)
                        let mut h = vec![R::ZERO; s];
                        for t in 0..l {
                            let idx = (bi * l + t) * e + ch;
                            let dt = dd[idx];
                            let ut = ud[idx];
                            let brow = (bi * l + t) * s;
                            for si in 0..s {
                                let abar = (dt * ad[ch * s + si]).exp();
                                h[si] = abar * h[si] + dt * bd[brow + si] * ut;
                                hs[t * s + si] = h[si];
                            }
                        }
                        gh.iter_mut().for_each(|v| *v = R::ZERO);
                        for t in (0..l).rev() {
                            let idx = (bi * l + t) * e + ch;
                            let gy = og[idx];
                            let dt = dd[idx];
                            let ut = ud[idx];
                            let brow = (bi * l + t) * s;
                            if let Some(skg) = skg.as_mut() {
                                skg[ch] += gy * ut;
                            }
                            let mut du_acc = gy * skd[ch];
                            for si in 0..s {
                                gh[si] += gy * cd[brow + si];
                                if let Some(cg) = cg.as_mut() {
                                    cg[brow + si] += gy * hs[t * s + si];
                                }
                            }
                            let mut dd_acc = R::ZERO;
                            for si in 0..s {
                                let av = ad[ch * s + si];
                                let abar = (dt * av).exp();
                                let h_prev = if t > 0 { hs[(t - 1) * s + si] } else { R::ZERO };
                                let g = gh[si];
                                if let Some(agr) = agr.as_mut() {
                                    agr[ch * s + si] += g * dt * abar * h_prev;
                                }
                                dd_acc += g * (av * abar * h_prev + bd[brow + si] * ut);
                                if let Some(bg) = bg.as_mut() {
                                    bg[brow + si] += g * dt * ut;
                                }
                                du_acc += g * dt * bd[brow + si];
                                gh[si] = g * abar;
                            }
                            if let Some(dg) = dg.as_mut() {
                                dg[idx] += dd_acc;
                            }
                            if let Some(ug) = ug.as_mut() {
                                ug[idx] += du_acc;
                            }
                        }
                    }
                }
            });
        }
        Ok(out)
    }

    /// Mean categorical cross-entropy over the positions whose target is
    /// nonzero. Targets are item ids; class index is `id - 1` (the padding
    /// item never appears in the softmax). Computed via log-sum-exp; the
    /// backward pass recomputes the row softmax instead of storing it.
    pub fn cross_entropy(&self, logits: &Tensor<R>, targets: &[u32]) -> Result<Tensor<R>> {
        let sh = logits.shape().to_vec();
        let v = *sh.last().ok_or_else(|| Error::Contract("cross_entropy rank-0".into()))?;
        let rows = logits.numel() / v;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy targets", &[targets.len()], &[rows]));
        }
        let mut lse = vec![R::ZERO; rows];
        let mut n_valid = 0usize;
        let mut loss = R::ZERO;
        {
            let ld = logits.data();
            for (r, &t) in targets.iter().enumerate() {
                if t == 0 {
                    continue;
                }
                let t = t as usize;
                if t > v {
                    return Err(Error::OutOfVocab { id: t, vocab: v });
                }
                let row = &ld[r * v..(r + 1) * v];
                let mut mx = row[0];
                for &x in &row[1..] {
                    mx = mx.max(x);
                }
                let mut sum = R::ZERO;
                for &x in row {
                    sum += (x - mx).exp();
                }
                let l = mx + sum.ln();
                lse[r] = l;
                loss += l - row[t - 1];
                n_valid += 1;
            }
        }
        if n_valid == 0 {
            return Err(Error::Contract(
                "cross_entropy: no positions with a valid target".into(),
            ));
        }
        let inv_n = R::ONE / R::from_f64(n_valid as f64);
        let out = Tensor::scalar(loss * inv_n).with_grad_buffer(self.track(&[logits]));
        if let Some(og) = out.grad_rc() {
            let ld = logits.data_rc();
            let lg = logits.grad_rc();
            let targets = targets.to_vec();
            self.push(move || {
                if let Some(lg) = &lg {
                    let g0 = og.borrow()[0] * inv_n;
                    let ld = ld.borrow();
                    let mut lg = lg.borrow_mut();
                    for (r, &t) in targets.iter().enumerate() {
                        if t == 0 {
                            continue;
                        }
                        let l = lse[r];
                        for j in 0..v {
                            let p = (ld[r * v + j] - l).exp();
                            lg[r * v + j] += g0 * p;
                        }
                        lg[r * v + (t as usize - 1)] -= g0;
                    }
                }
            });
        }
        Ok(out)
    }
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Tape::new()
    }
}

fn split_batched(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.len();
    let batch: usize = shape[..n - 2].iter().product();
    (batch, shape[n - 2], shape[n - 1])
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_value<R: Real>(x: R, kind: Unary) -> R {
    match kind {
        Unary::Gelu => x * x.norm_cdf(),
        Unary::Silu => x * R::from_f64(sigmoid_f64(x.to_f64())),
        Unary::Softplus => {
            let xf = x.to_f64();
            R::from_f64(xf.max(0.0) + (1.0 + (-xf.abs()).exp()).ln())
        }
        Unary::Exp => x.exp(),
        Unary::Neg => -x,
    }
}

fn unary_deriv<R: Real>(x: R, kind: Unary) -> R {
    match kind {
        Unary::Gelu => x.norm_cdf() + x * x.norm_pdf(),
        Unary::Silu => {
            let s = sigmoid_f64(x.to_f64());
            R::from_f64(s * (1.0 + x.to_f64() * (1.0 - s)))
        }
        Unary::Softplus => R::from_f64(sigmoid_f64(x.to_f64())),
        Unary::Exp => x.exp(),
        Unary::Neg => -R::ONE,
    }
}
