use std::sync::atomic::{AtomicU64, Ordering};

use super::{Parameter, Real, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op<T> {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: usize,
        k: usize,
        /// im2col buffer, kept only when the filters need a gradient and k > 1.
        cols: Option<Vec<T>>,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Mfm {
        x: usize,
        first_wins: Vec<bool>,
    },
    Dense {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Reshape {
        x: usize,
    },
    SoftmaxXent {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    WeightedSum {
        x: usize,
        weights: Option<Vec<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Records a parameter's current value as a gradient-tracking leaf.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        self.leaf(p.tensor.clone(), true)
    }

    /// Records a parameter without gradient tracking (frozen inference).
    pub fn constant(&mut self, p: &Parameter<T>) -> Var {
        self.leaf(p.tensor.clone(), false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>, TensorError> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn grad(&self, v: Var) -> Result<Option<&[T]>, TensorError> {
        Ok(self.nodes[self.idx(v)?].grad.as_deref())
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Stride-1 convolution (cross-correlation) with zero padding `(k-1)/2`.
    ///
    /// `x`: `[B, W, H, Cin]`, `w`: `[Cout, k, k, Cin]`, `b`: `[Cout]`.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        let ws = self.nodes[wi].value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err("conv2d_same", format!("input {xs:?}, filters {ws:?}")));
        }
        let (bsz, wd, ht, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[1]);
        if ws[2] != k {
            return Err(shape_err("conv2d_same", format!("non-square kernel {ws:?}")));
        }
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel(k));
        }
        if ws[3] != cin {
            return Err(TensorError::ChannelMismatch {
                input: cin,
                filters: ws[3],
            });
        }
        if self.nodes[bi].value.shape() != [cout] {
            return Err(shape_err(
                "conv2d_same",
                format!("bias {:?} for {cout} filters", self.nodes[bi].value.shape()),
            ));
        }
        let p = bsz * wd * ht;
        let kk = k * k * cin;
        let cols = if k == 1 {
            None
        } else {
            Some(im2col(self.nodes[xi].value.data(), bsz, wd, ht, cin, k))
        };
        let mut out = vec![T::zero(); p * cout];
        {
            let bias = self.nodes[bi].value.data();
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bias);
            }
            let a = cols.as_deref().unwrap_or(self.nodes[xi].value.data());
            T::gemm(
                p,
                kk,
                cout,
                T::one(),
                a,
                kk as isize,
                1,
                self.nodes[wi].value.data(),
                1,
                kk as isize,
                T::one(),
                &mut out,
                cout as isize,
                1,
            );
        }
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        let keep_cols = if self.rg(wi) { cols } else { None };
        let value = Tensor::new(vec![bsz, wd, ht, cout], out)?;
        Ok(self.push(
            value,
            rg,
            Op::Conv {
                x: xi,
                w: wi,
                b: bi,
                k,
                cols: keep_cols,
            },
        ))
    }

    /// Non-overlapping 2×2 max pooling over the two spatial axes of `[B, W, H, C]`.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(shape_err("maxpool2x2", format!("input {xs:?}")));
        }
        let (bsz, wd, ht, c) = (xs[0], xs[1], xs[2], xs[3]);
        if wd % 2 != 0 || ht % 2 != 0 {
            return Err(TensorError::OddSpatial(xs));
        }
        let (ow, oh) = (wd / 2, ht / 2);
        let xd = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(bsz * ow * oh * c);
        let mut argmax = Vec::with_capacity(bsz * ow * oh * c);
        for b in 0..bsz {
            for i in 0..ow {
                for j in 0..oh {
                    let base = |di: usize, dj: usize| (((b * wd + 2 * i + di) * ht) + 2 * j + dj) * c;
                    let corners = [base(0, 0), base(0, 1), base(1, 0), base(1, 1)];
                    for ch in 0..c {
                        let mut best = corners[0] + ch;
                        for &cb in &corners[1..] {
                            if xd[cb + ch] > xd[best] {
                                best = cb + ch;
                            }
                        }
                        out.push(xd[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let rg = self.rg(xi);
        let value = Tensor::new(vec![bsz, ow, oh, c], out)?;
        Ok(self.push(value, rg, Op::MaxPool { x: xi, argmax }))
    }

    /// Max-Feature-Map over the last axis: channel `k` of the output is the
    /// larger of input channels `k` and `k + N/2`.
    pub fn mfm(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let xs = self.nodes[xi].value.shape().to_vec();
        let n = *xs.last().ok_or_else(|| shape_err("mfm", "scalar input".into()))?;
        if n % 2 != 0 {
            return Err(TensorError::OddChannels(n));
        }
        let half = n / 2;
        let xd = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(xd.len() / 2);
        let mut first_wins = Vec::with_capacity(xd.len() / 2);
        for px in xd.chunks_exact(n) {
            let (lo, hi) = px.split_at(half);
            for (&a, &b) in lo.iter().zip(hi) {
                let first = a >= b;
                out.push(if first { a } else { b });
                first_wins.push(first);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = half;
        let rg = self.rg(xi);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, rg, Op::Mfm { x: xi, first_wins }))
    }

    /// Affine map over the last axis: `x·Wᵀ + b` with `w: [m, n]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let wi = self.idx(w)?;
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let xs = self.nodes[xi].value.shape().to_vec();
        let ws = self.nodes[wi].value.shape().to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(shape_err("dense", format!("input {xs:?}, weights {ws:?}")));
        }
        let (m, n) = (ws[0], ws[1]);
        if let Some(bi) = bi {
            if self.nodes[bi].value.shape() != [m] {
                return Err(shape_err(
                    "dense",
                    format!("bias {:?} for {m} outputs", self.nodes[bi].value.shape()),
                ));
            }
        }
        let rows = self.nodes[xi].value.len() / n;
        let mut out = vec![T::zero(); rows * m];
        if let Some(bi) = bi {
            let bias = self.nodes[bi].value.data();
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(
            rows,
            n,
            m,
            T::one(),
            self.nodes[xi].value.data(),
            n as isize,
            1,
            self.nodes[wi].value.data(),
            1,
            n as isize,
            T::one(),
            &mut out,
            m as isize,
            1,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = m;
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|b| self.rg(b));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, rg, Op::Dense { x: xi, w: wi, b: bi }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let data = self.nodes[xi].value.data().to_vec();
        let value = Tensor::new(shape, data).map_err(|_| {
            shape_err(
                "reshape",
                format!("cannot view {:?} with a different element count", self.nodes[xi].value.shape()),
            )
        })?;
        let rg = self.rg(xi);
        Ok(self.push(value, rg, Op::Reshape { x: xi }))
    }

    /// Mean softmax cross-entropy over the rows of `[B, K]` logits (or a
    /// single `[K]` row).
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let li = self.idx(logits)?;
        let shape = self.nodes[li].value.shape().to_vec();
        let k = *shape.last().ok_or_else(|| shape_err("softmax_xent", "scalar logits".into()))?;
        let rows = self.nodes[li].value.len() / k.max(1);
        if rows != labels.len() {
            return Err(shape_err(
                "softmax_xent",
                format!("{rows} logit rows for {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes: k });
        }
        let data = self.nodes[li].value.data();
        let mut probs = Vec::with_capacity(data.len());
        let mut total = T::zero();
        for (row, &label) in data.chunks_exact(k).zip(labels) {
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            total = total + (lse - row[label]);
            probs.extend(row.iter().map(|&v| (v - mx).exp() / sum));
        }
        let loss = total / T::from_f64(rows as f64);
        let rg = self.rg(li);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxXent {
                logits: li,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        self.weighted_sum_impl(x, None)
    }

    /// `Σ wᵢ·xᵢ` for fixed weights; a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var, TensorError> {
        self.weighted_sum_impl(x, Some(weights))
    }

    fn weighted_sum_impl(&mut self, x: Var, weights: Option<Vec<T>>) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let xd = self.nodes[xi].value.data();
        let total = match &weights {
            Some(w) => {
                if w.len() != xd.len() {
                    return Err(shape_err(
                        "weighted_sum",
                        format!("{} weights for {} elements", w.len(), xd.len()),
                    ));
                }
                xd.iter().zip(w).map(|(&a, &b)| a * b).sum()
            }
            None => xd.iter().cloned().sum(),
        };
        let rg = self.rg(xi);
        Ok(self.push(Tensor::scalar(total), rg, Op::WeightedSum { x: xi, weights }))
    }

    /// Populates gradients of every gradient-tracking node that `loss`
    /// depends on. Gradients accumulate across calls and across fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let li = self.idx(loss)?;
        let shape = self.nodes[li].value.shape().to_vec();
        if self.nodes[li].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if !self.nodes[li].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[li].grad, vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let contributions = self.backprop(&op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
            for (j, c) in contributions {
                if self.nodes[j].requires_grad {
                    accumulate(&mut self.nodes[j].grad, c);
                }
            }
        }
        Ok(())
    }

    fn backprop(&self, op: &Op<T>, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, b, k, cols } => {
                let xs = self.nodes[*x].value.shape();
                let (bsz, wd, ht, cin) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = self.nodes[*w].value.shape()[0];
                let p = bsz * wd * ht;
                let kk = k * k * cin;
                if self.rg(*w) {
                    let a = cols.as_deref().unwrap_or(self.nodes[*x].value.data());
                    let mut gw = vec![T::zero(); cout * kk];
                    T::gemm(
                        cout,
                        p,
                        kk,
                        T::one(),
                        g,
                        1,
                        cout as isize,
                        a,
                        kk as isize,
                        1,
                        T::zero(),
                        &mut gw,
                        kk as isize,
                        1,
                    );
                    out.push((*w, gw));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); cout];
                    for row in g.chunks_exact(cout) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    out.push((*b, gb));
                }
                if self.rg(*x) {
                    let mut gcols = vec![T::zero(); p * kk];
                    T::gemm(
                        p,
                        cout,
                        kk,
                        T::one(),
                        g,
                        cout as isize,
                        1,
                        self.nodes[*w].value.data(),
                        kk as isize,
                        1,
                        T::zero(),
                        &mut gcols,
                        kk as isize,
                        1,
                    );
                    let gx = if *k == 1 {
                        gcols
                    } else {
                        col2im(&gcols, bsz, wd, ht, cin, *k)
                    };
                    out.push((*x, gx));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); self.nodes[*x].value.len()];
                for (&src, &v) in argmax.iter().zip(g) {
                    gx[src] = gx[src] + v;
                }
                out.push((*x, gx));
            }
            Op::Mfm { x, first_wins } => {
                let n = *self.nodes[*x].value.shape().last().unwrap();
                let half = n / 2;
                let mut gx = vec![T::zero(); self.nodes[*x].value.len()];
                for (px, (gi, fw)) in gx
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(half).zip(first_wins.chunks_exact(half)))
                {
                    for c in 0..half {
                        let dst = if fw[c] { c } else { c + half };
                        px[dst] = gi[c];
                    }
                }
                out.push((*x, gx));
            }
            Op::Dense { x, w, b } => {
                let ws = self.nodes[*w].value.shape();
                let (m, n) = (ws[0], ws[1]);
                let rows = g.len() / m;
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); m * n];
                    T::gemm(
                        m,
                        rows,
                        n,
                        T::one(),
                        g,
                        1,
                        m as isize,
                        self.nodes[*x].value.data(),
                        n as isize,
                        1,
                        T::zero(),
                        &mut gw,
                        n as isize,
                        1,
                    );
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); m];
                        for row in g.chunks_exact(m) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc = *acc + v;
                            }
                        }
                        out.push((*b, gb));
                    }
                }
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); rows * n];
                    T::gemm(
                        rows,
                        m,
                        n,
                        T::one(),
                        g,
                        m as isize,
                        1,
                        self.nodes[*w].value.data(),
                        n as isize,
                        1,
                        T::zero(),
                        &mut gx,
                        n as isize,
                        1,
                    );
                    out.push((*x, gx));
                }
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::SoftmaxXent { logits, probs, labels } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::from_f64(labels.len() as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * k + l] = gl[r * k + l] - scale;
                }
                out.push((*logits, gl));
            }
            Op::WeightedSum { x, weights } => {
                let gx = match weights {
                    Some(w) => w.iter().map(|&v| v * g[0]).collect(),
                    None => vec![g[0]; self.nodes[*x].value.len()],
                };
                out.push((*x, gx));
            }
        }
        out
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, c: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(c) {
                *a = *a + v;
            }
        }
        None => *slot = Some(c),
    }
}

/// Rows are output pixels `(b, i, j)`; columns are `(di, dj, c)`.
fn im2col<T: Real>(x: &[T], bsz: usize, wd: usize, ht: usize, cin: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let kk = k * k * cin;
    let mut cols = vec![T::zero(); bsz * wd * ht * kk];
    let mut row = 0;
    for b in 0..bsz {
        for i in 0..wd {
            for j in 0..ht {
                let dst = &mut cols[row * kk..(row + 1) * kk];
                for di in 0..k {
                    let ii = i as isize + di as isize - pad;
                    if ii < 0 || ii >= wd as isize {
                        continue;
                    }
                    for dj in 0..k {
                        let jj = j as isize + dj as isize - pad;
                        if jj < 0 || jj >= ht as isize {
                            continue;
                        }
                        let src = ((b * wd + ii as usize) * ht + jj as usize) * cin;
                        let off = (di * k + dj) * cin;
                        dst[off..off + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], bsz: usize, wd: usize, ht: usize, cin: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let kk = k * k * cin;
    let mut x = vec![T::zero(); bsz * wd * ht * cin];
    let mut row = 0;
    for b in 0..bsz {
        for i in 0..wd {
            for j in 0..ht {
                let src = &cols[row * kk..(row + 1) * kk];
                for di in 0..k {
                    let ii = i as isize + di as isize - pad;
                    if ii < 0 || ii >= wd as isize {
                        continue;
                    }
                    for dj in 0..k {
                        let jj = j as isize + dj as isize - pad;
                        if jj < 0 || jj >= ht as isize {
                            continue;
                        }
                        let dst = ((b * wd + ii as usize) * ht + jj as usize) * cin;
                        let off = (di * k + dj) * cin;
                        for (d, &s) in x[dst..dst + cin].iter_mut().zip(&src[off..off + cin]) {
                            *d = *d + s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}
