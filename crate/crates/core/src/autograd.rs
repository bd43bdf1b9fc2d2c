//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Statistics used by a batch-norm node.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a, T> {
    /// Normalize with the batch statistics over (N, H, W).
    Batch,
    /// Normalize with stored running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-channel (mean, biased variance) computed by a training-mode batch norm.
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    ConvTranspose2d { x: usize, w: usize },
    MaxPool { x: usize, argmax: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
    Relu { x: usize },
    Sigmoid { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulChannel { x: usize, gate: usize },
    ScaleAdd { s: usize, x: usize, f: usize },
    Concat { a: usize, b: usize },
    Reshape { x: usize },
    Transpose { x: usize },
    Matmul { a: usize, b: usize, ta: bool, tb: bool },
    Softmax { x: usize },
    Attention { q: usize, k: usize, v: usize, probs: usize },
    CrossEntropy { logits: usize, probs: Vec<T>, labels: Vec<usize> },
    Sum { x: usize },
    GlobalAvgPool { x: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by tape variable.
/// Only leaves keep their gradient; intermediate ones are dropped.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < k || !(padded - k).is_multiple_of(stride) {
        return config_err(format!(
            "conv output size ({size} + 2*{pad} - {k})/{stride} + 1 is not integral"
        ));
    }
    Ok((padded - k) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, shape: Shape, f: impl FnOnce(&mut [T])) {
    let g = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(g.data_mut());
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {v:?} was not produced by tape {}",
                self.id
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A new leaf holding a copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x)?.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        let i = self.idx(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Result<Shape> {
        Ok(self.value(v)?.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.idx(v)?;
        Ok(self.nodes[i].requires_grad)
    }

    /// 2-D convolution without bias. Kernel layout (C_out, C_in, k, k).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let [n, c, h, wd] = self.nodes[xi].value.shape();
        let [co, ci, kh, kw] = self.nodes[wi].value.shape();
        if kh != kw || !(kh == 1 || kh == 3) {
            return config_err(format!("conv2d kernel must be 1x1 or 3x3, got {kh}x{kw}"));
        }
        if ci != c {
            return config_err(format!(
                "conv2d kernel expects {ci} input channels, input {:?} has {c}",
                [n, c, h, wd]
            ));
        }
        let k = kh;
        let ho = conv_out(h, k, stride, pad)?;
        let wo = conv_out(wd, k, stride, pad)?;
        let mut out = Tensor::zeros([n, co, ho, wo]);
        let rows = c * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); rows * ho * wo] };
        let xv = self.nodes[xi].value.data();
        let wv = self.nodes[wi].value.data();
        let od = out.data_mut();
        for b in 0..n {
            let xs = &xv[b * c * h * wd..(b + 1) * c * h * wd];
            let src: &[T] = if direct {
                xs
            } else {
                im2col(xs, c, h, wd, k, stride, pad, ho, wo, &mut cols);
                &cols
            };
            let dst = &mut od[b * co * ho * wo..(b + 1) * co * ho * wo];
            T::gemm(co, rows, ho * wo, wv, false, src, false, dst, false);
        }
        Ok(self.push(out, Op::Conv2d { x: xi, w: wi, stride, pad }, &[xi, wi]))
    }

    /// Stride-2, 2×2 transposed convolution. Kernel layout (C_in, C_out, 2, 2).
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let [n, c, h, wd] = self.nodes[xi].value.shape();
        let [ci, co, kh, kw] = self.nodes[wi].value.shape();
        if stride != 2 || kh != 2 || kw != 2 {
            return config_err(format!(
                "conv_transpose2d supports only a 2x2 kernel with stride 2, got {kh}x{kw} stride {stride}"
            ));
        }
        if ci != c {
            return config_err(format!(
                "conv_transpose2d kernel expects {ci} input channels, input has {c}"
            ));
        }
        let hw = h * wd;
        let mut out = Tensor::zeros([n, co, 2 * h, 2 * wd]);
        let mut scratch = vec![T::zero(); co * 4 * hw];
        let xv = self.nodes[xi].value.data();
        let wv = self.nodes[wi].value.data();
        let (oh, ow) = (2 * h, 2 * wd);
        let od = out.data_mut();
        for b in 0..n {
            let xs = &xv[b * c * hw..(b + 1) * c * hw];
            // (C_out·4 × HW) = Wᵀ (C_out·4 × C_in) · X (C_in × HW)
            T::gemm(co * 4, c, hw, wv, true, xs, false, &mut scratch, false);
            let dst = &mut od[b * co * oh * ow..(b + 1) * co * oh * ow];
            for o in 0..co {
                for a in 0..2 {
                    for e in 0..2 {
                        let row = &scratch[((o * 2 + a) * 2 + e) * hw..][..hw];
                        for i in 0..h {
                            for j in 0..wd {
                                dst[(o * oh + 2 * i + a) * ow + 2 * j + e] = row[i * wd + j];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::ConvTranspose2d { x: xi, w: wi }, &[xi, wi]))
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first window
    /// element in row-major order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let [n, c, h, w] = self.nodes[xi].value.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return config_err(format!("maxpool2d needs even spatial size, got {h}x{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        let xv = self.nodes[xi].value.data();
        let od = out.data_mut();
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = base + (2 * i + dy) * w + 2 * j + dx;
                        if xv[cand] > xv[best] {
                            best = cand;
                        }
                    }
                    let o = (p * ho + i) * wo + j;
                    od[o] = xv[best];
                    argmax[o] = best;
                }
            }
        }
        Ok(self.push(out, Op::MaxPool { x: xi, argmax }, &[xi]))
    }

    /// Per-channel batch normalization with epsilon [`BN_EPS`]. In batch
    /// mode the computed moments are returned so the caller can update its
    /// running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, T>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let [n, c, h, w] = self.nodes[xi].value.shape();
        let (gv, bv) = (self.nodes[gi].value.data(), self.nodes[bi].value.data());
        if gv.len() != c || bv.len() != c {
            return dim_err(format!(
                "batch_norm affine terms have {} / {} entries for {c} channels",
                gv.len(),
                bv.len()
            ));
        }
        let count = n * h * w;
        if count == 0 {
            return config_err("batch_norm over a zero-element channel");
        }
        let hw = h * w;
        let xv = self.nodes[xi].value.data();
        let eps = T::lit(BN_EPS);
        let m = T::from_usize(count).unwrap();
        let (mean, var, batch) = match stats {
            BnStats::Batch => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xv[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                    }
                    let mu = s / m;
                    let mut ss = T::zero();
                    for b in 0..n {
                        for &v in &xv[(b * c + ch) * hw..][..hw] {
                            ss += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m;
                }
                (mean, var, true)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return dim_err(format!("running stats sized for {} channels, input has {c}", mean.len()));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = Tensor::zeros([n, c, h, w]);
        let od = out.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for k in off..off + hw {
                    let xh = (xv[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    od[k] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let var_node = self.push(
            out,
            Op::BatchNorm { x: xi, gamma: gi, beta: bi, xhat, inv_std, batch },
            &[xi, gi, bi],
        );
        let moments = batch.then_some(BatchMoments { mean, var, count });
        Ok((var_node, moments))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(out, Op::Relu { x: xi }, &[xi]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        Ok(self.push(out, Op::Sigmoid { x: xi }, &[xi]))
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<Shape> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return dim_err(format!("{what}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let shape = self.same_shape(ai, bi, "add")?;
        let data = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::Add { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let shape = self.same_shape(ai, bi, "mul")?;
        let data = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::Mul { a: ai, b: bi }, &[ai, bi]))
    }

    /// `x ⊙ gate` with `gate` of shape (N, C, 1, 1) broadcast over space.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xi, gi) = (self.idx(x)?, self.idx(gate)?);
        let [n, c, h, w] = self.nodes[xi].value.shape();
        let gs = self.nodes[gi].value.shape();
        if gs != [n, c, 1, 1] {
            return dim_err(format!("mul_channel: gate {gs:?} does not match input {:?}", [n, c, h, w]));
        }
        let hw = h * w;
        let gv = self.nodes[gi].value.data();
        let mut out = self.nodes[xi].value.clone();
        for (p, chunk) in out.data_mut().chunks_mut(hw.max(1)).enumerate().take(n * c) {
            for v in chunk {
                *v *= gv[p];
            }
        }
        Ok(self.push(out, Op::MulChannel { x: xi, gate: gi }, &[xi, gi]))
    }

    /// `s·x + f` with a (1,1,1,1) scale. A zero scale returns `f` bit-for-bit.
    pub fn scale_add(&mut self, s: Var, x: Var, f: Var) -> Result<Var> {
        let (si, xi, fi) = (self.idx(s)?, self.idx(x)?, self.idx(f)?);
        if self.nodes[si].value.shape() != [1, 1, 1, 1] {
            return dim_err(format!(
                "scale_add: scale must be (1,1,1,1), got {:?}",
                self.nodes[si].value.shape()
            ));
        }
        let shape = self.same_shape(xi, fi, "scale_add")?;
        let sv = self.nodes[si].value.data()[0];
        let out = if sv == T::zero() {
            self.nodes[fi].value.clone()
        } else {
            let data = self.nodes[xi]
                .value
                .data()
                .iter()
                .zip(self.nodes[fi].value.data())
                .map(|(&xv, &fv)| sv * xv + fv)
                .collect();
            Tensor::from_vec(shape, data)?
        };
        Ok(self.push(out, Op::ScaleAdd { s: si, x: xi, f: fi }, &[si, xi, fi]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let [n, ca, h, w] = self.nodes[ai].value.shape();
        let [nb, cb, hb, wb] = self.nodes[bi].value.shape();
        if (n, h, w) != (nb, hb, wb) {
            return dim_err(format!(
                "concat_channels: {:?} and {:?} disagree outside the channel axis",
                [n, ca, h, w],
                [nb, cb, hb, wb]
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        let (av, bv) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        for k in 0..n {
            data.extend_from_slice(&av[k * ca * hw..(k + 1) * ca * hw]);
            data.extend_from_slice(&bv[k * cb * hw..(k + 1) * cb * hw]);
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data)?;
        Ok(self.push(out, Op::Concat { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x: xi }, &[xi]))
    }

    /// Swaps the last two axes of every (N, C) plane.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let [n, c, h, w] = self.nodes[xi].value.shape();
        let xv = self.nodes[xi].value.data();
        let mut out = Tensor::zeros([n, c, w, h]);
        let od = out.data_mut();
        for p in 0..n * c {
            let r = p * h * w..(p + 1) * h * w;
            transpose_plane(&xv[r.clone()], &mut od[r], h, w, |d, v| *d = v);
        }
        Ok(self.push(out, Op::Transpose { x: xi }, &[xi]))
    }

    /// Batched matrix product: each (N, C) plane of `a` (M×K) times the
    /// matching plane of `b` (K×P).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// Batched `op(a)·op(b)` where `op` transposes the last two axes when
    /// the matching flag is set. Avoids materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let sa = self.nodes[ai].value.shape();
        let sb = self.nodes[bi].value.shape();
        let (n, c) = (sa[0], sa[1]);
        let (m, k) = if trans_a { (sa[3], sa[2]) } else { (sa[2], sa[3]) };
        let (kb, p) = if trans_b { (sb[3], sb[2]) } else { (sb[2], sb[3]) };
        if (n, c) != (sb[0], sb[1]) || k != kb {
            return dim_err(format!(
                "matmul: cannot multiply {m}x{k} by {kb}x{p} (shapes {sa:?} and {sb:?})"
            ));
        }
        let mut out = Tensor::zeros([n, c, m, p]);
        let (av, bv) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let od = out.data_mut();
        for q in 0..n * c {
            T::gemm(
                m,
                k,
                p,
                &av[q * m * k..(q + 1) * m * k],
                trans_a,
                &bv[q * k * p..(q + 1) * k * p],
                trans_b,
                &mut od[q * m * p..(q + 1) * m * p],
                false,
            );
        }
        Ok(self.push(out, Op::Matmul { a: ai, b: bi, ta: trans_a, tb: trans_b }, &[ai, bi]))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = self.nodes[xi].value.shape();
        let width = shape[3];
        let mut out = self.nodes[xi].value.clone();
        if width > 0 {
            for row in out.data_mut().chunks_mut(width) {
                softmax_in_place(row);
            }
        }
        Ok(self.push(out, Op::Softmax { x: xi }, &[xi]))
    }

    /// Spatial dot-product attention, fused. `q`, `k` are (N, 1, Cq, P) and
    /// `v` is (N, 1, Cv, P). Returns `(agg, probs)` with
    /// `probs[i][j] = softmax_j(Σ_c q[c,i]·k[c,j])` of shape (N, 1, P, P) and
    /// `agg[c,i] = Σ_j v[c,j]·probs[i][j]`. Same values as the
    /// matmul/softmax composition, but only one P×P buffer is kept.
    /// `probs` is a read-only view: gradient flows through `agg` alone.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let (qi, ki, vi) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let [n, one, cq, p] = self.nodes[qi].value.shape();
        let sk = self.nodes[ki].value.shape();
        let [nv, onev, cv, pv] = self.nodes[vi].value.shape();
        if one != 1 || sk != [n, 1, cq, p] || (nv, onev, pv) != (n, 1, p) {
            return dim_err(format!(
                "attention: query {:?}, key {sk:?} and value {:?} disagree",
                [n, one, cq, p],
                [nv, onev, cv, pv]
            ));
        }
        let mut probs = Tensor::zeros([n, 1, p, p]);
        let mut agg = Tensor::zeros([n, 1, cv, p]);
        {
            let (qd, kd, vd) = (
                self.nodes[qi].value.data(),
                self.nodes[ki].value.data(),
                self.nodes[vi].value.data(),
            );
            let (pd, ad) = (probs.data_mut(), agg.data_mut());
            for b in 0..n {
                let a = &mut pd[b * p * p..(b + 1) * p * p];
                let (qb, kb) = (&qd[b * cq * p..(b + 1) * cq * p], &kd[b * cq * p..(b + 1) * cq * p]);
                T::gemm(p, cq, p, qb, true, kb, false, a, false);
                if p > 0 {
                    for row in a.chunks_mut(p) {
                        softmax_in_place(row);
                    }
                }
                let vb = &vd[b * cv * p..(b + 1) * cv * p];
                T::gemm(cv, p, p, vb, false, a, true, &mut ad[b * cv * p..(b + 1) * cv * p], false);
            }
        }
        let pi = self.nodes.len();
        let probs_var = self.constant(probs);
        let out = self.push(agg, Op::Attention { q: qi, k: ki, v: vi, probs: pi }, &[qi, ki, vi]);
        Ok((out, probs_var))
    }

    /// Mean over all pixels of −log softmax(logits)[label]. `labels` is an
    /// (N, H, W) row-major map of class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let [n, k, h, w] = self.nodes[li].value.shape();
        let hw = h * w;
        if labels.len() != n * hw {
            return dim_err(format!(
                "cross_entropy: {} labels for logits {:?}",
                labels.len(),
                [n, k, h, w]
            ));
        }
        if let Some(pos) = labels.iter().position(|&l| l >= k) {
            let (b, r) = (pos / hw, pos % hw);
            return Err(Error::Data(format!(
                "label {} out of range [0, {k}) at (n={b}, y={}, x={})",
                labels[pos],
                r / w,
                r % w
            )));
        }
        let lv = self.nodes[li].value.data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        let mut col = vec![T::zero(); k];
        for b in 0..n {
            for pix in 0..hw {
                for (cls, slot) in col.iter_mut().enumerate() {
                    *slot = lv[(b * k + cls) * hw + pix];
                }
                let max = col.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = col.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                total += lse - col[labels[b * hw + pix]];
                for (cls, &v) in col.iter().enumerate() {
                    probs[(b * k + cls) * hw + pix] = (v - lse).exp();
                }
            }
        }
        let count = T::from_usize((n * hw).max(1)).unwrap();
        let out = Tensor::scalar(total / count);
        Ok(self.push(
            out,
            Op::CrossEntropy { logits: li, probs, labels: labels.to_vec() },
            &[li],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = Tensor::scalar(self.nodes[xi].value.sum());
        Ok(self.push(out, Op::Sum { x: xi }, &[xi]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let [n, c, h, w] = self.nodes[xi].value.shape();
        let hw = h * w;
        if hw == 0 {
            return config_err("global_avg_pool over an empty plane");
        }
        let denom = T::from_usize(hw).unwrap();
        let data = self.nodes[xi]
            .value
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let out = Tensor::from_vec([n, c, 1, 1], data)?;
        Ok(self.push(out, Op::GlobalAvgPool { x: xi }, &[xi]))
    }

    /// Reverse sweep from a scalar. A tape supports exactly one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let root = self.idx(loss)?;
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), T::one()));
        for i in (0..=root).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            // only leaf gradients are observable afterwards
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, stride, pad } => {
                let xs = self.nodes[x].value.shape();
                let ws = self.nodes[w].value.shape();
                let [n, c, h, wd] = xs;
                let [co, _, k, _] = ws;
                let [_, _, ho, wo] = node.value.shape();
                let rows = c * k * k;
                let plane = ho * wo;
                let direct = k == 1 && stride == 1 && pad == 0;
                let xv = self.nodes[x].value.data();
                let wv = self.nodes[w].value.data();
                let mut cols = vec![T::zero(); if direct { 0 } else { rows * plane }];
                let mut dcols = vec![T::zero(); rows * plane];
                let (want_x, want_w) = (self.wants(x), self.wants(w));
                for b in 0..n {
                    let go = &gd[b * co * plane..(b + 1) * co * plane];
                    let xs_b = &xv[b * c * h * wd..(b + 1) * c * h * wd];
                    if want_w {
                        let src: &[T] = if direct {
                            xs_b
                        } else {
                            im2col(xs_b, c, h, wd, k, stride, pad, ho, wo, &mut cols);
                            &cols
                        };
                        accumulate(&mut grads[w], ws, |dw| {
                            T::gemm(co, plane, rows, go, false, src, true, dw, true)
                        });
                    }
                    if want_x {
                        T::gemm(rows, co, plane, wv, true, go, false, &mut dcols, false);
                        accumulate(&mut grads[x], xs, |dx| {
                            let dxb = &mut dx[b * c * h * wd..(b + 1) * c * h * wd];
                            if direct {
                                for (d, s) in dxb.iter_mut().zip(&dcols) {
                                    *d += *s;
                                }
                            } else {
                                col2im(&dcols, c, h, wd, k, stride, pad, ho, wo, dxb);
                            }
                        });
                    }
                }
            }
            &Op::ConvTranspose2d { x, w } => {
                let xs = self.nodes[x].value.shape();
                let ws = self.nodes[w].value.shape();
                let [n, c, h, wd] = xs;
                let co = ws[1];
                let hw = h * wd;
                let (oh, ow) = (2 * h, 2 * wd);
                let xv = self.nodes[x].value.data();
                let wv = self.nodes[w].value.data();
                let mut gathered = vec![T::zero(); co * 4 * hw];
                for b in 0..n {
                    let go = &gd[b * co * oh * ow..(b + 1) * co * oh * ow];
                    for o in 0..co {
                        for a in 0..2 {
                            for e in 0..2 {
                                let row = &mut gathered[((o * 2 + a) * 2 + e) * hw..][..hw];
                                for ii in 0..h {
                                    for jj in 0..wd {
                                        row[ii * wd + jj] = go[(o * oh + 2 * ii + a) * ow + 2 * jj + e];
                                    }
                                }
                            }
                        }
                    }
                    if self.wants(x) {
                        accumulate(&mut grads[x], xs, |dx| {
                            let dxb = &mut dx[b * c * hw..(b + 1) * c * hw];
                            T::gemm(c, co * 4, hw, wv, false, &gathered, false, dxb, true);
                        });
                    }
                    if self.wants(w) {
                        let xb = &xv[b * c * hw..(b + 1) * c * hw];
                        accumulate(&mut grads[w], ws, |dw| {
                            T::gemm(c, hw, co * 4, xb, false, &gathered, true, dw, true);
                        });
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                if self.wants(x) {
                    accumulate(&mut grads[x], self.nodes[x].value.shape(), |dx| {
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src] += gd[o];
                        }
                    });
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let [n, c, h, w] = self.nodes[x].value.shape();
                let hw = h * w;
                let gv = self.nodes[gamma].value.data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for k in off..off + hw {
                            sum_dy[ch] += gd[k];
                            sum_dy_xhat[ch] += gd[k] * xhat[k];
                        }
                    }
                }
                if self.wants(gamma) {
                    accumulate(&mut grads[gamma], [1, c, 1, 1], |d| {
                        for ch in 0..c {
                            d[ch] += sum_dy_xhat[ch];
                        }
                    });
                }
                if self.wants(beta) {
                    accumulate(&mut grads[beta], [1, c, 1, 1], |d| {
                        for ch in 0..c {
                            d[ch] += sum_dy[ch];
                        }
                    });
                }
                if self.wants(x) {
                    let m = T::from_usize(n * hw).unwrap();
                    accumulate(&mut grads[x], [n, c, h, w], |dx| {
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * hw;
                                let scale = gv[ch] * inv_std[ch];
                                for k in off..off + hw {
                                    dx[k] += if *batch {
                                        scale / m
                                            * (m * gd[k] - sum_dy[ch] - xhat[k] * sum_dy_xhat[ch])
                                    } else {
                                        scale * gd[k]
                                    };
                                }
                            }
                        }
                    });
                }
            }
            &Op::Relu { x } => {
                let xv = self.nodes[x].value.data();
                accumulate(&mut grads[x], node.value.shape(), |dx| {
                    for k in 0..dx.len() {
                        if xv[k] > T::zero() {
                            dx[k] += gd[k];
                        }
                    }
                });
            }
            &Op::Sigmoid { x } => {
                let yv = node.value.data();
                accumulate(&mut grads[x], node.value.shape(), |dx| {
                    for k in 0..dx.len() {
                        dx[k] += gd[k] * yv[k] * (T::one() - yv[k]);
                    }
                });
            }
            &Op::Add { a, b } => {
                for t in [a, b] {
                    if self.wants(t) {
                        accumulate(&mut grads[t], node.value.shape(), |d| {
                            for (dv, &gv) in d.iter_mut().zip(gd) {
                                *dv += gv;
                            }
                        });
                    }
                }
            }
            &Op::Mul { a, b } => {
                for (t, other) in [(a, b), (b, a)] {
                    if self.wants(t) {
                        let ov = self.nodes[other].value.data();
                        accumulate(&mut grads[t], node.value.shape(), |d| {
                            for k in 0..d.len() {
                                d[k] += gd[k] * ov[k];
                            }
                        });
                    }
                }
            }
            &Op::MulChannel { x, gate } => {
                let [n, c, h, w] = self.nodes[x].value.shape();
                let hw = h * w;
                let xv = self.nodes[x].value.data();
                let gv = self.nodes[gate].value.data();
                if self.wants(x) {
                    accumulate(&mut grads[x], [n, c, h, w], |dx| {
                        for k in 0..dx.len() {
                            dx[k] += gd[k] * gv[k / hw];
                        }
                    });
                }
                if self.wants(gate) {
                    accumulate(&mut grads[gate], [n, c, 1, 1], |dg| {
                        for (p, d) in dg.iter_mut().enumerate() {
                            *d += (p * hw..(p + 1) * hw).map(|k| gd[k] * xv[k]).sum::<T>();
                        }
                    });
                }
            }
            &Op::ScaleAdd { s, x, f } => {
                let sv = self.nodes[s].value.data()[0];
                let xv = self.nodes[x].value.data();
                if self.wants(s) {
                    let ds: T = gd.iter().zip(xv).map(|(&g, &v)| g * v).sum();
                    accumulate(&mut grads[s], [1, 1, 1, 1], |d| d[0] += ds);
                }
                if self.wants(x) {
                    accumulate(&mut grads[x], node.value.shape(), |d| {
                        for (dv, &gv) in d.iter_mut().zip(gd) {
                            *dv += sv * gv;
                        }
                    });
                }
                if self.wants(f) {
                    accumulate(&mut grads[f], node.value.shape(), |d| {
                        for (dv, &gv) in d.iter_mut().zip(gd) {
                            *dv += gv;
                        }
                    });
                }
            }
            &Op::Concat { a, b } => {
                let sa = self.nodes[a].value.shape();
                let sb = self.nodes[b].value.shape();
                let [n, ca, h, w] = sa;
                let cb = sb[1];
                let hw = h * w;
                let stride = (ca + cb) * hw;
                if self.wants(a) {
                    accumulate(&mut grads[a], sa, |d| {
                        for k in 0..n {
                            for (dv, &gv) in d[k * ca * hw..(k + 1) * ca * hw]
                                .iter_mut()
                                .zip(&gd[k * stride..k * stride + ca * hw])
                            {
                                *dv += gv;
                            }
                        }
                    });
                }
                if self.wants(b) {
                    accumulate(&mut grads[b], sb, |d| {
                        for k in 0..n {
                            for (dv, &gv) in d[k * cb * hw..(k + 1) * cb * hw]
                                .iter_mut()
                                .zip(&gd[k * stride + ca * hw..(k + 1) * stride])
                            {
                                *dv += gv;
                            }
                        }
                    });
                }
            }
            &Op::Reshape { x } => {
                accumulate(&mut grads[x], self.nodes[x].value.shape(), |d| {
                    for (dv, &gv) in d.iter_mut().zip(gd) {
                        *dv += gv;
                    }
                });
            }
            &Op::Transpose { x } => {
                let [n, c, h, w] = self.nodes[x].value.shape();
                accumulate(&mut grads[x], [n, c, h, w], |d| {
                    // the upstream plane is w×h; its transpose adds into d
                    for p in 0..n * c {
                        let r = p * h * w..(p + 1) * h * w;
                        transpose_plane(&gd[r.clone()], &mut d[r], w, h, |d, v| *d += v);
                    }
                });
            }
            &Op::Matmul { a, b, ta, tb } => {
                let sa = self.nodes[a].value.shape();
                let sb = self.nodes[b].value.shape();
                let [n, c, _, _] = sa;
                let (m, k) = if ta { (sa[3], sa[2]) } else { (sa[2], sa[3]) };
                let p = if tb { sb[2] } else { sb[3] };
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                let (amk, bkp, gmp) = (m * k, k * p, m * p);
                if self.wants(a) {
                    accumulate(&mut grads[a], sa, |d| {
                        for q in 0..n * c {
                            let (g, bq, dq) = (
                                &gd[q * gmp..(q + 1) * gmp],
                                &bv[q * bkp..(q + 1) * bkp],
                                &mut d[q * amk..(q + 1) * amk],
                            );
                            if ta {
                                // dA (k×m) = op(B)·Gᵀ
                                T::gemm(k, p, m, bq, tb, g, true, dq, true);
                            } else {
                                // dA (m×k) = G·op(B)ᵀ
                                T::gemm(m, p, k, g, false, bq, !tb, dq, true);
                            }
                        }
                    });
                }
                if self.wants(b) {
                    accumulate(&mut grads[b], sb, |d| {
                        for q in 0..n * c {
                            let (g, aq, dq) = (
                                &gd[q * gmp..(q + 1) * gmp],
                                &av[q * amk..(q + 1) * amk],
                                &mut d[q * bkp..(q + 1) * bkp],
                            );
                            if tb {
                                // dB (p×k) = Gᵀ·op(A)
                                T::gemm(p, m, k, g, true, aq, ta, dq, true);
                            } else {
                                // dB (k×p) = op(A)ᵀ·G
                                T::gemm(k, m, p, aq, !ta, g, false, dq, true);
                            }
                        }
                    });
                }
            }
            &Op::Softmax { x } => {
                let width = node.value.shape()[3];
                let yv = node.value.data();
                accumulate(&mut grads[x], node.value.shape(), |d| {
                    if width == 0 {
                        return;
                    }
                    for ((drow, yrow), grow) in d
                        .chunks_mut(width)
                        .zip(yv.chunks(width))
                        .zip(gd.chunks(width))
                    {
                        let dot: T = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                        for k in 0..width {
                            drow[k] += yrow[k] * (grow[k] - dot);
                        }
                    }
                });
            }
            &Op::Attention { q, k, v, probs } => {
                let [n, _, cq, p] = self.nodes[q].value.shape();
                let cv = self.nodes[v].value.shape()[2];
                let (qd, kd, vd) = (
                    self.nodes[q].value.data(),
                    self.nodes[k].value.data(),
                    self.nodes[v].value.data(),
                );
                let pd = self.nodes[probs].value.data();
                let (wq, wk, wv) = (self.wants(q), self.wants(k), self.wants(v));
                let mut scratch = vec![T::zero(); if wq || wk { p * p } else { 0 }];
                let mut dq = wq.then(|| vec![T::zero(); n * cq * p]);
                let mut dk = wk.then(|| vec![T::zero(); n * cq * p]);
                let mut dv = wv.then(|| vec![T::zero(); n * cv * p]);
                for b in 0..n {
                    let a = &pd[b * p * p..(b + 1) * p * p];
                    let gb = &gd[b * cv * p..(b + 1) * cv * p];
                    let vb = &vd[b * cv * p..(b + 1) * cv * p];
                    let rq = b * cq * p..(b + 1) * cq * p;
                    if let Some(dv) = dv.as_mut() {
                        // dV = G·A
                        T::gemm(cv, p, p, gb, false, a, false, &mut dv[b * cv * p..(b + 1) * cv * p], true);
                    }
                    if !(wq || wk) || p == 0 {
                        continue;
                    }
                    // dA = Gᵀ·V, then the softmax Jacobian row by row
                    T::gemm(p, cv, p, gb, true, vb, false, &mut scratch, false);
                    for (srow, arow) in scratch.chunks_mut(p).zip(a.chunks(p)) {
                        let dot: T = arow.iter().zip(srow.iter()).map(|(&y, &g)| y * g).sum();
                        for (sv, &y) in srow.iter_mut().zip(arow) {
                            *sv = y * (*sv - dot);
                        }
                    }
                    if let Some(dq) = dq.as_mut() {
                        // dQ[c,i] = Σ_j K[c,j]·dS[i,j]
                        T::gemm(cq, p, p, &kd[rq.clone()], false, &scratch, true, &mut dq[rq.clone()], true);
                    }
                    if let Some(dk) = dk.as_mut() {
                        // dK[c,j] = Σ_i Q[c,i]·dS[i,j]
                        T::gemm(cq, p, p, &qd[rq.clone()], false, &scratch, false, &mut dk[rq], true);
                    }
                }
                for (slot, d) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(d) = d {
                        let shape = self.nodes[slot].value.shape();
                        accumulate(&mut grads[slot], shape, |acc| {
                            for (x, y) in acc.iter_mut().zip(d) {
                                *x += y;
                            }
                        });
                    }
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let logits = *logits;
                let [n, k, h, w] = self.nodes[logits].value.shape();
                let hw = h * w;
                let scale = gd[0] / T::from_usize((n * hw).max(1)).unwrap();
                accumulate(&mut grads[logits], [n, k, h, w], |d| {
                    for b in 0..n {
                        for cls in 0..k {
                            for pix in 0..hw {
                                let idx = (b * k + cls) * hw + pix;
                                let onehot = if labels[b * hw + pix] == cls { T::one() } else { T::zero() };
                                d[idx] += scale * (probs[idx] - onehot);
                            }
                        }
                    }
                });
            }
            &Op::Sum { x } => {
                accumulate(&mut grads[x], self.nodes[x].value.shape(), |d| {
                    for dv in d.iter_mut() {
                        *dv += gd[0];
                    }
                });
            }
            &Op::GlobalAvgPool { x } => {
                let [n, c, h, w] = self.nodes[x].value.shape();
                let hw = h * w;
                let denom = T::from_usize(hw).unwrap();
                accumulate(&mut grads[x], [n, c, h, w], |d| {
                    for (k, dv) in d.iter_mut().enumerate() {
                        *dv += gd[k / hw] / denom;
                    }
                });
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Writes the transpose of the h×w plane `src` into the w×h plane `dst`
/// through `put`, in cache-sized blocks.
fn transpose_plane<T: Copy>(src: &[T], dst: &mut [T], h: usize, w: usize, put: impl Fn(&mut T, T)) {
    const B: usize = 32;
    for i0 in (0..h).step_by(B) {
        for j0 in (0..w).step_by(B) {
            for i in i0..(i0 + B).min(h) {
                for j in j0..(j0 + B).min(w) {
                    put(&mut dst[j * h + i], src[i * w + j]);
                }
            }
        }
    }
}
