//! Wengert tape: forward operations are recorded in order, then replayed in
//! reverse for gradients. Buffer values live in one contiguous arena indexed
//! by [`Var`]; each buffer is written by exactly one operation, and operation
//! inputs always precede the output, so one reverse sweep visits every node
//! exactly once and accumulation order is fixed.
//!
//! [`Tape::reset`] clears the recording but keeps the arena capacity, so a
//! training loop allocates almost nothing after its first step.

use super::{numel, Tensor, TensorError};

/// Handle to a buffer on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy)]
struct Span {
    off: usize,
    len: usize,
}

struct BufMeta {
    span: Span,
    shape: Vec<usize>,
    requires_grad: bool,
}

enum Op {
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { a: usize, c: f64, out: usize },
    AddRowBroadcast { a: usize, bias: usize, out: usize, cols: usize },
    Matmul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    BatchMatmul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    TransposeLast2 { a: usize, out: usize, m: usize, n: usize },
    Reshape { a: usize, out: usize },
    SplitHeads { a: usize, out: usize, b: usize, n: usize, h: usize, dh: usize },
    MergeHeads { a: usize, out: usize, b: usize, n: usize, h: usize, dh: usize },
    SoftmaxRows { a: usize, out: usize, cols: usize },
    LogSoftmaxRows { a: usize, out: usize, cols: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        shift: usize,
        out: usize,
        cols: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu { a: usize, out: usize, tanh_u: Vec<f64> },
    Tanh { a: usize, out: usize },
    GatherRows { table: usize, out: usize, ids: Vec<usize>, cols: usize },
    CrossEntropyLogProbs { logp: usize, out: usize, labels: Vec<usize>, cols: usize },
    Sum { a: usize, out: usize },
}

impl Op {
    fn out(&self) -> usize {
        match *self {
            Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::AddRowBroadcast { out, .. }
            | Op::Matmul { out, .. }
            | Op::BatchMatmul { out, .. }
            | Op::TransposeLast2 { out, .. }
            | Op::Reshape { out, .. }
            | Op::SplitHeads { out, .. }
            | Op::MergeHeads { out, .. }
            | Op::SoftmaxRows { out, .. }
            | Op::LogSoftmaxRows { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::Gelu { out, .. }
            | Op::Tanh { out, .. }
            | Op::GatherRows { out, .. }
            | Op::CrossEntropyLogProbs { out, .. }
            | Op::Sum { out, .. } => out,
        }
    }
}

// ── dense kernels ────────────────────────────────────────────────────

/// Column-tile width for the matmul kernels: accumulators for one output
/// tile stay in registers across the whole k loop.
const TILE: usize = 16;

/// c += a @ b, row-major. Output rows are processed in fixed-width column
/// tiles so each c element is loaded and stored once, not once per k.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let tiles = n / TILE;
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for jt in 0..tiles {
            let j0 = jt * TILE;
            let mut acc = [0.0f64; TILE];
            acc.copy_from_slice(&crow[j0..j0 + TILE]);
            for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
                let bt = &brow[j0..j0 + TILE];
                for t in 0..TILE {
                    acc[t] = av.mul_add(bt[t], acc[t]);
                }
            }
            crow[j0..j0 + TILE].copy_from_slice(&acc);
        }
        // Remaining columns.
        let j0 = tiles * TILE;
        if j0 < n {
            for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
                for (cv, &bv) in crow[j0..].iter_mut().zip(&brow[j0..]) {
                    *cv = av.mul_add(bv, *cv);
                }
            }
        }
    }
}

/// db += aᵀ @ g, with a: [m×k] and g: [m×n]. The kij order keeps the inner
/// loop over contiguous rows of g and db.
fn matmul_at_b_acc(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(db.len(), k * n);
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (&av, drow) in arow.iter().zip(db.chunks_exact_mut(n)) {
            for (dv, &gv) in drow.iter_mut().zip(grow) {
                *dv = av.mul_add(gv, *dv);
            }
        }
    }
}

fn transpose_into(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh via a single exp: (e -1)/(e +1) with e = exp(2u). Saturates
/// cleanly for large |u|; worst-case error is ~1e-9 relative near zero,
/// far inside the gradient-check tolerance.
fn fast_tanh(u: f64) -> f64 {
    let e = (2.0 * u).exp();
    if e.is_infinite() {
        return 1.0;
    }
    (e - 1.0) / (e + 1.0)
}

fn gelu_tanh_u(x: f64) -> f64 {
    fast_tanh(GELU_C * (x + GELU_A * x * x * x))
}

/// Derivative given x and the cached tanh of the inner polynomial.
fn gelu_derivative(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ── the tape ─────────────────────────────────────────────────────────

#[derive(Default)]
pub struct Tape {
    vals: Vec<f64>,
    /// Gradient arena mirroring `vals` offsets. Regions are stale until the
    /// matching `grad_live` flag is set; never read it directly.
    grads: Vec<f64>,
    grad_live: Vec<bool>,
    bufs: Vec<BufMeta>,
    ops: Vec<Op>,
    scratch: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drop the recording but keep arena capacity for the next step.
    /// All existing [`Var`] handles become invalid.
    pub fn reset(&mut self) {
        self.vals.clear();
        self.grad_live.clear();
        self.bufs.clear();
        self.ops.clear();
    }

    fn span(&self, v: Var) -> Span {
        self.bufs[v.0].span
    }

    /// Append a zero-initialized buffer and return its handle.
    fn new_buf(&mut self, shape: Vec<usize>, requires_grad: bool) -> Var {
        let len = numel(&shape);
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        self.bufs.push(BufMeta {
            span: Span { off, len },
            shape,
            requires_grad,
        });
        self.grad_live.push(false);
        Var(self.bufs.len() - 1)
    }

    /// Arena split giving read access to everything before `out` and write
    /// access to `out` itself. Inputs always live strictly before outputs.
    fn split_out(&mut self, out: Var) -> (&[f64], &mut [f64]) {
        let Span { off, len } = self.bufs[out.0].span;
        let (before, after) = self.vals.split_at_mut(off);
        (before, &mut after[..len])
    }

    fn push(&mut self, op: Op) {
        // Only ops whose output can carry gradient need replaying.
        if self.bufs[op.out()].requires_grad {
            self.ops.push(op);
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.bufs[v.0].requires_grad
    }

    /// Register a standalone tensor as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let off = self.vals.len();
        self.vals.extend_from_slice(t.values());
        self.bufs.push(BufMeta {
            span: Span {
                off,
                len: t.numel(),
            },
            shape: t.shape().to_vec(),
            requires_grad: t.requires_grad,
        });
        self.grad_live.push(false);
        Var(self.bufs.len() - 1)
    }

    /// Register a constant (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var, TensorError> {
        if numel(&shape) != values.len() {
            return Err(TensorError::LengthMismatch {
                len: values.len(),
                shape,
            });
        }
        let off = self.vals.len();
        self.vals.extend_from_slice(&values);
        self.bufs.push(BufMeta {
            span: Span {
                off,
                len: values.len(),
            },
            shape,
            requires_grad: false,
        });
        self.grad_live.push(false);
        Ok(Var(self.bufs.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let Span { off, len } = self.span(v);
        &self.vals[off..off + len]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.bufs[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if self.grad_live[v.0] {
            let Span { off, len } = self.span(v);
            Some(&self.grads[off..off + len])
        } else {
            None
        }
    }

    /// Gradient of a buffer, as zeros when nothing flowed to it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.span(v).len],
        }
    }

    /// Export value + gradient into a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let mut t = Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).unwrap();
        t.requires_grad = self.rg(v);
        t.grad = self.grad(v).map(|g| g.to_vec());
        t
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn zero_grads(&mut self) {
        self.grad_live.iter_mut().for_each(|f| *f = false);
    }

    // ── elementwise ──────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn elementwise2(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (sa, sb) = (self.span(a), self.span(b));
        let rg = self.rg(a) || self.rg(b);
        let out = self.new_buf(self.bufs[a.0].shape.clone(), rg);
        let (before, dst) = self.split_out(out);
        let (xa, xb) = (&before[sa.off..sa.off + sa.len], &before[sb.off..sb.off + sb.len]);
        for ((d, &x), &y) in dst.iter_mut().zip(xa).zip(xb) {
            *d = f(x, y);
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.elementwise2(a, b, |x, y| x + y);
        self.push(Op::Add { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.elementwise2(a, b, |x, y| x - y);
        self.push(Op::Sub { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.elementwise2(a, b, |x, y| x * y);
        self.push(Op::Mul { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let sa = self.span(a);
        let rg = self.rg(a);
        let out = self.new_buf(self.bufs[a.0].shape.clone(), rg);
        let (before, dst) = self.split_out(out);
        for (d, &x) in dst.iter_mut().zip(&before[sa.off..sa.off + sa.len]) {
            *d = c * x;
        }
        self.push(Op::Scale { a: a.0, c, out: out.0 });
        out
    }

    /// a[rows×cols] + bias[cols], broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let ashape = self.shape(a).to_vec();
        let cols = *ashape.last().ok_or(TensorError::BadShape {
            op: "add_row_broadcast",
            expected: "rank >= 1",
            got: ashape.clone(),
        })?;
        if self.shape(bias) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: ashape,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let (sa, sb) = (self.span(a), self.span(bias));
        let rg = self.rg(a) || self.rg(bias);
        let out = self.new_buf(ashape, rg);
        let (before, dst) = self.split_out(out);
        let bvals = &before[sb.off..sb.off + sb.len];
        for (drow, arow) in dst
            .chunks_exact_mut(cols)
            .zip(before[sa.off..sa.off + sa.len].chunks_exact(cols))
        {
            for ((d, &x), &bv) in drow.iter_mut().zip(arow).zip(bvals) {
                *d = x + bv;
            }
        }
        self.push(Op::AddRowBroadcast { a: a.0, bias: bias.0, out: out.0, cols });
        Ok(out)
    }

    // ── linear algebra ───────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: ash, rhs: bsh });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let (sa, sb) = (self.span(a), self.span(b));
        let rg = self.rg(a) || self.rg(b);
        let out = self.new_buf(vec![m, n], rg);
        let (before, dst) = self.split_out(out);
        matmul_acc(
            &before[sa.off..sa.off + sa.len],
            &before[sb.off..sb.off + sb.len],
            dst,
            m,
            k,
            n,
        );
        self.push(Op::Matmul { a: a.0, b: b.0, out: out.0, m, k, n });
        Ok(out)
    }

    /// [.., m, k] @ [.., k, n] -> [.., m, n]; leading axes are batch and
    /// must agree elementwise.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rank = ash.len();
        if rank < 3
            || bsh.len() != rank
            || ash[..rank - 2] != bsh[..rank - 2]
            || ash[rank - 1] != bsh[rank - 2]
        {
            return Err(TensorError::ShapeMismatch { op: "batch_matmul", lhs: ash, rhs: bsh });
        }
        let (m, k, n) = (ash[rank - 2], ash[rank - 1], bsh[rank - 1]);
        let mut oshape = ash[..rank - 2].to_vec();
        oshape.extend([m, n]);
        let (sa, sb) = (self.span(a), self.span(b));
        let rg = self.rg(a) || self.rg(b);
        let out = self.new_buf(oshape, rg);
        let (before, dst) = self.split_out(out);
        for ((ab, bb), cb) in before[sa.off..sa.off + sa.len]
            .chunks_exact(m * k)
            .zip(before[sb.off..sb.off + sb.len].chunks_exact(k * n))
            .zip(dst.chunks_exact_mut(m * n))
        {
            matmul_acc(ab, bb, cb, m, k, n);
        }
        self.push(Op::BatchMatmul { a: a.0, b: b.0, out: out.0, m, k, n });
        Ok(out)
    }

    /// Swap the last two axes; leading axes are treated as batch.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var, TensorError> {
        let ash = self.shape(a).to_vec();
        if ash.len() < 2 {
            return Err(TensorError::BadShape {
                op: "transpose_last2",
                expected: "rank >= 2",
                got: ash,
            });
        }
        let (m, n) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let mut oshape = ash;
        let len = oshape.len();
        oshape.swap(len - 2, len - 1);
        let sa = self.span(a);
        let rg = self.rg(a);
        let out = self.new_buf(oshape, rg);
        let (before, dst) = self.split_out(out);
        for (src, d) in before[sa.off..sa.off + sa.len]
            .chunks_exact(m * n)
            .zip(dst.chunks_exact_mut(m * n))
        {
            transpose_into(src, d, m, n);
        }
        self.push(Op::TransposeLast2 { a: a.0, out: out.0, m, n });
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if numel(&shape) != self.span(a).len {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: "same element count",
                got: shape,
            });
        }
        let sa = self.span(a);
        let rg = self.rg(a);
        let out = self.new_buf(shape, rg);
        let (before, dst) = self.split_out(out);
        dst.copy_from_slice(&before[sa.off..sa.off + sa.len]);
        self.push(Op::Reshape { a: a.0, out: out.0 });
        Ok(out)
    }

    /// Token-major to head-major: input holding `batch*n` rows of width
    /// `d` (any leading shape), output [batch*h, n, d/h].
    pub fn split_heads(
        &mut self,
        a: Var,
        batch: usize,
        n: usize,
        h: usize,
    ) -> Result<Var, TensorError> {
        let ash = self.shape(a).to_vec();
        let total = numel(&ash);
        let d = *ash.last().unwrap_or(&0);
        if h == 0 || d == 0 || !d.is_multiple_of(h) || total != batch * n * d {
            return Err(TensorError::BadShape {
                op: "split_heads",
                expected: "batch*n rows of width d with h | d",
                got: ash,
            });
        }
        let (b, n, d) = (batch, n, d);
        let dh = d / h;
        let sa = self.span(a);
        let rg = self.rg(a);
        let out = self.new_buf(vec![b * h, n, dh], rg);
        let (before, dst) = self.split_out(out);
        let src = &before[sa.off..sa.off + sa.len];
        for bi in 0..b {
            for t in 0..n {
                let row = &src[(bi * n + t) * d..(bi * n + t + 1) * d];
                for hd in 0..h {
                    let o = ((bi * h + hd) * n + t) * dh;
                    dst[o..o + dh].copy_from_slice(&row[hd * dh..(hd + 1) * dh]);
                }
            }
        }
        self.push(Op::SplitHeads { a: a.0, out: out.0, b, n, h, dh });
        Ok(out)
    }

    /// Head-major back to token-major: [batch*h, n, dh] -> [batch*n, h*dh].
    pub fn merge_heads(&mut self, a: Var, batch: usize, h: usize) -> Result<Var, TensorError> {
        let ash = self.shape(a).to_vec();
        if ash.len() != 3 || h == 0 || ash[0] != batch * h {
            return Err(TensorError::BadShape {
                op: "merge_heads",
                expected: "[batch*h, n, dh]",
                got: ash,
            });
        }
        let (b, h, n, dh) = (batch, h, ash[1], ash[2]);
        let d = h * dh;
        let sa = self.span(a);
        let rg = self.rg(a);
        let out = self.new_buf(vec![b * n, d], rg);
        let (before, dst) = self.split_out(out);
        let src = &before[sa.off..sa.off + sa.len];
        for bi in 0..b {
            for hd in 0..h {
                for t in 0..n {
                    let s = ((bi * h + hd) * n + t) * dh;
                    let o = (bi * n + t) * d + hd * dh;
                    dst[o..o + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        self.push(Op::MergeHeads { a: a.0, out: out.0, b, n, h, dh });
        Ok(out)
    }

    // ── nonlinear ────────────────────────────────────────────────

    /// Row softmax over the last axis, stabilized by max subtraction.
    ///
    /// `mask`, when given, has one flag per element of `a`; `true` keeps a
    /// position, `false` zeroes it exactly and excludes it from the
    /// normalization. A row with no `true` flag is an error.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let ash = self.shape(a).to_vec();
        let cols = *ash.last().ok_or(TensorError::BadShape {
            op: "softmax_rows",
            expected: "rank >= 1",
            got: ash.clone(),
        })?;
        let total = numel(&ash);
        if let Some(m) = mask {
            if m.len() != total {
                return Err(TensorError::BadShape {
                    op: "softmax_rows",
                    expected: "mask with one flag per element",
                    got: vec![m.len()],
                });
            }
            // Degenerate rows are an error, checked before any allocation.
            for (row, mrow) in m.chunks_exact(cols).enumerate() {
                if !mrow.iter().any(|&v| v) {
                    return Err(TensorError::DegenerateRow { row });
                }
            }
        }
        let sa = self.span(a);
        let rg = self.rg(a);
        let out = self.new_buf(ash, rg);
        let (before, dst) = self.split_out(out);
        let src = &before[sa.off..sa.off + sa.len];
        for (row, (xrow, yrow)) in src
            .chunks_exact(cols)
            .zip(dst.chunks_exact_mut(cols))
            .enumerate()
        {
            match mask {
                None => softmax_row(xrow, yrow),
                Some(m) => {
                    let mrow = &m[row * cols..(row + 1) * cols];
                    let mut max = f64::NEG_INFINITY;
                    for (j, &x) in xrow.iter().enumerate() {
                        if mrow[j] && x > max {
                            max = x;
                        }
                    }
                    let mut sum = 0.0;
                    for (j, &x) in xrow.iter().enumerate() {
                        if mrow[j] {
                            let e = (x - max).exp();
                            yrow[j] = e;
                            sum += e;
                        }
                    }
                    for (j, y) in yrow.iter_mut().enumerate() {
                        if mrow[j] {
                            *y /= sum;
                        }
                    }
                }
            }
        }
        self.push(Op::SoftmaxRows { a: a.0, out: out.0, cols });
        Ok(out)
    }

    /// Row log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ash = self.shape(a).to_vec();
        let cols = *ash.last().ok_or(TensorError::BadShape {
            op: "log_softmax_rows",
            expected: "rank >= 1",
            got: ash.clone(),
        })?;
        let sa = self.span(a);
        let rg = self.rg(a);
        let out = self.new_buf(ash, rg);
        let (before, dst) = self.split_out(out);
        for (xrow, yrow) in before[sa.off..sa.off + sa.len]
            .chunks_exact(cols)
            .zip(dst.chunks_exact_mut(cols))
        {
            let max = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + xrow.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (y, &x) in yrow.iter_mut().zip(xrow) {
                *y = x - lse;
            }
        }
        self.push(Op::LogSoftmaxRows { a: a.0, out: out.0, cols });
        Ok(out)
    }

    /// Per-vector standardization over the last axis, then affine transform.
    /// Uses the population variance.
    pub fn layer_normalize(
        &mut self,
        x: Var,
        gain: Var,
        shift: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let xsh = self.shape(x).to_vec();
        let cols = *xsh.last().ok_or(TensorError::BadShape {
            op: "layer_normalize",
            expected: "rank >= 1",
            got: xsh.clone(),
        })?;
        if self.shape(gain) != [cols] || self.shape(shift) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_normalize",
                lhs: xsh,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = numel(&xsh) / cols;
        let (sx, sg, ss) = (self.span(x), self.span(gain), self.span(shift));
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        let out = self.new_buf(xsh, rg);
        let (before, dst) = self.split_out(out);
        let src = &before[sx.off..sx.off + sx.len];
        let gvals = &before[sg.off..sg.off + sg.len];
        let svals = &before[ss.off..ss.off + ss.len];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        for (xrow, yrow) in src.chunks_exact(cols).zip(dst.chunks_exact_mut(cols)) {
            let mean = xrow.iter().sum::<f64>() / cols as f64;
            let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for ((y, &xv), (&g, &s)) in yrow.iter_mut().zip(xrow).zip(gvals.iter().zip(svals)) {
                *y = (xv - mean) * inv_std * g + s;
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        self.push(Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            shift: shift.0,
            out: out.0,
            cols,
            mean: means,
            inv_std: inv_stds,
        });
        Ok(out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let sa = self.span(a);
        let rg = self.rg(a);
        let out = self.new_buf(self.bufs[a.0].shape.clone(), rg);
        let (before, dst) = self.split_out(out);
        let mut tanh_u = Vec::new();
        if rg {
            tanh_u.reserve_exact(sa.len);
        }
        for (d, &x) in dst.iter_mut().zip(&before[sa.off..sa.off + sa.len]) {
            let t = gelu_tanh_u(x);
            *d = 0.5 * x * (1.0 + t);
            if rg {
                tanh_u.push(t);
            }
        }
        self.push(Op::Gelu { a: a.0, out: out.0, tanh_u });
        out
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let sa = self.span(a);
        let rg = self.rg(a);
        let out = self.new_buf(self.bufs[a.0].shape.clone(), rg);
        let (before, dst) = self.split_out(out);
        for (d, &x) in dst.iter_mut().zip(&before[sa.off..sa.off + sa.len]) {
            *d = x.tanh();
        }
        self.push(Op::Tanh { a: a.0, out: out.0 });
        out
    }

    // ── gather / reduce ──────────────────────────────────────────

    /// Select rows of a [R, d] table; gradient scatter-adds back.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                expected: "[rows, cols]",
                got: tsh,
            });
        }
        let (rows, cols) = (tsh[0], tsh[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(TensorError::RowOutOfRange { index: bad, rows });
        }
        let st = self.span(table);
        let rg = self.rg(table);
        let out = self.new_buf(vec![ids.len(), cols], rg);
        let (before, dst) = self.split_out(out);
        let src = &before[st.off..st.off + st.len];
        for (drow, &id) in dst.chunks_exact_mut(cols).zip(ids) {
            drow.copy_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        self.push(Op::GatherRows { table: table.0, out: out.0, ids: ids.to_vec(), cols });
        Ok(out)
    }

    /// Mean over the batch of the negative log-probability of the gold class.
    ///
    /// Rows of `exp(log_probs)` must sum to 1 within 1e-9.
    pub fn cross_entropy_from_log_probs(
        &mut self,
        logp: Var,
        labels: &[usize],
    ) -> Result<Var, TensorError> {
        let lsh = self.shape(logp).to_vec();
        if lsh.len() != 2 || lsh[0] != labels.len() {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                expected: "[batch, classes] with one label per row",
                got: lsh,
            });
        }
        let (rows, cols) = (lsh[0], lsh[1]);
        let src = self.value(logp);
        let mut total = 0.0;
        for (row, (xrow, &label)) in src.chunks_exact(cols).zip(labels).enumerate() {
            let sum: f64 = xrow.iter().map(|x| x.exp()).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(TensorError::NotLogProbRow { row, sum });
            }
            if label >= cols {
                return Err(TensorError::LabelOutOfRange { label, classes: cols, row });
            }
            total -= xrow[label];
        }
        let value = total / rows as f64;
        if !value.is_finite() {
            return Err(TensorError::NonFinite { context: "cross_entropy" });
        }
        let rg = self.rg(logp);
        let out = self.new_buf(vec![], rg);
        let (_, dst) = self.split_out(out);
        dst[0] = value;
        self.push(Op::CrossEntropyLogProbs {
            logp: logp.0,
            out: out.0,
            labels: labels.to_vec(),
            cols,
        });
        Ok(out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().sum();
        let rg = self.rg(a);
        let out = self.new_buf(vec![], rg);
        let (_, dst) = self.split_out(out);
        dst[0] = value;
        self.push(Op::Sum { a: a.0, out: out.0 });
        out
    }

    /// Identity on values; an exact gradient wall. The output never carries
    /// gradient, so nothing upstream of it receives any contribution.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let sa = self.span(a);
        let out = self.new_buf(self.bufs[a.0].shape.clone(), false);
        let (before, dst) = self.split_out(out);
        dst.copy_from_slice(&before[sa.off..sa.off + sa.len]);
        out
    }

    // ── backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every reachable
    /// gradient-carrying buffer become available through [`Tape::grad`].
    /// Accumulation order is the fixed reverse of recording order.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.span(loss).len != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        if self.grads.len() < self.vals.len() {
            self.grads.resize(self.vals.len(), 0.0);
        }
        let vals = &self.vals;
        let grads = &mut self.grads;
        let live = &mut self.grad_live;
        let bufs = &self.bufs;
        let scratch = &mut self.scratch;

        grads[bufs[loss.0].span.off] = 1.0;
        live[loss.0] = true;

        let val = |v: usize| -> &[f64] {
            let Span { off, len } = bufs[v].span;
            &vals[off..off + len]
        };

        for op in self.ops.iter().rev() {
            let out = op.out();
            if !live[out] {
                continue;
            }
            // Every consumer of `out` has been processed, so its gradient is
            // final. Inputs live strictly before it in the arena: split there.
            let out_span = bufs[out].span;
            macro_rules! pair {
                ($in_id:expr) => {
                    grad_pair(bufs, grads, live, $in_id, out_span)
                };
            }

            match op {
                Op::Add { a, b, .. } => {
                    for id in [a, b] {
                        if let Some((slot, g)) = pair!(*id) {
                            for (s, &gv) in slot.iter_mut().zip(g) {
                                *s += gv;
                            }
                        }
                    }
                }
                Op::Sub { a, b, .. } => {
                    if let Some((slot, g)) = pair!(*a) {
                        for (s, &gv) in slot.iter_mut().zip(g) {
                            *s += gv;
                        }
                    }
                    if let Some((slot, g)) = pair!(*b) {
                        for (s, &gv) in slot.iter_mut().zip(g) {
                            *s -= gv;
                        }
                    }
                }
                Op::Mul { a, b, .. } => {
                    if let Some((slot, g)) = pair!(*a) {
                        for ((s, &gv), &bv) in slot.iter_mut().zip(g).zip(val(*b)) {
                            *s = gv.mul_add(bv, *s);
                        }
                    }
                    if let Some((slot, g)) = pair!(*b) {
                        for ((s, &gv), &av) in slot.iter_mut().zip(g).zip(val(*a)) {
                            *s = gv.mul_add(av, *s);
                        }
                    }
                }
                Op::Scale { a, c, .. } => {
                    if let Some((slot, g)) = pair!(*a) {
                        for (s, &gv) in slot.iter_mut().zip(g) {
                            *s = gv.mul_add(*c, *s);
                        }
                    }
                }
                Op::AddRowBroadcast { a, bias, cols, .. } => {
                    if let Some((slot, g)) = pair!(*a) {
                        for (s, &gv) in slot.iter_mut().zip(g) {
                            *s += gv;
                        }
                    }
                    if let Some((slot, g)) = pair!(*bias) {
                        for grow in g.chunks_exact(*cols) {
                            for (s, &gv) in slot.iter_mut().zip(grow) {
                                *s += gv;
                            }
                        }
                    }
                }
                Op::Matmul { a, b, m, k, n, .. } => {
                    if let Some((slot, g)) = pair!(*a) {
                        // dA += G @ Bᵀ; materialize Bᵀ so the kernel streams rows.
                        scratch.resize(k * n, 0.0);
                        transpose_into(val(*b), scratch, *k, *n);
                        matmul_acc(g, scratch, slot, *m, *n, *k);
                    }
                    if let Some((slot, g)) = pair!(*b) {
                        matmul_at_b_acc(val(*a), g, slot, *m, *k, *n);
                    }
                }
                Op::BatchMatmul { a, b, m, k, n, .. } => {
                    if let Some((slot, g)) = pair!(*a) {
                        scratch.resize(k * n, 0.0);
                        for ((gb, vb), ga) in g
                            .chunks_exact(m * n)
                            .zip(val(*b).chunks_exact(k * n))
                            .zip(slot.chunks_exact_mut(m * k))
                        {
                            transpose_into(vb, scratch, *k, *n);
                            matmul_acc(gb, scratch, ga, *m, *n, *k);
                        }
                    }
                    if let Some((slot, g)) = pair!(*b) {
                        for ((gb, va), gdst) in g
                            .chunks_exact(m * n)
                            .zip(val(*a).chunks_exact(m * k))
                            .zip(slot.chunks_exact_mut(k * n))
                        {
                            matmul_at_b_acc(va, gb, gdst, *m, *k, *n);
                        }
                    }
                }
                Op::TransposeLast2 { a, m, n, .. } => {
                    if let Some((slot, g)) = pair!(*a) {
                        for (gb, gdst) in g.chunks_exact(m * n).zip(slot.chunks_exact_mut(m * n)) {
                            // g laid out [n, m]; transpose back.
                            for i in 0..*n {
                                for j in 0..*m {
                                    gdst[j * *n + i] += gb[i * *m + j];
                                }
                            }
                        }
                    }
                }
                Op::Reshape { a, .. } => {
                    if let Some((slot, g)) = pair!(*a) {
                        for (s, &gv) in slot.iter_mut().zip(g) {
                            *s += gv;
                        }
                    }
                }
                Op::SplitHeads { a, b, n, h, dh, .. } => {
                    if let Some((slot, g)) = pair!(*a) {
                        let d = h * dh;
                        for bi in 0..*b {
                            for hd in 0..*h {
                                for t in 0..*n {
                                    let s = ((bi * h + hd) * n + t) * dh;
                                    let o = (bi * n + t) * d + hd * dh;
                                    for j in 0..*dh {
                                        slot[o + j] += g[s + j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MergeHeads { a, b, n, h, dh, .. } => {
                    if let Some((slot, g)) = pair!(*a) {
                        let d = h * dh;
                        for bi in 0..*b {
                            for hd in 0..*h {
                                for t in 0..*n {
                                    let o = ((bi * h + hd) * n + t) * dh;
                                    let s = (bi * n + t) * d + hd * dh;
                                    for j in 0..*dh {
                                        slot[o + j] += g[s + j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::SoftmaxRows { a, cols, out } => {
                    if let Some((slot, g)) = pair!(*a) {
                        for ((yrow, grow), srow) in val(*out)
                            .chunks_exact(*cols)
                            .zip(g.chunks_exact(*cols))
                            .zip(slot.chunks_exact_mut(*cols))
                        {
                            let dot: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                            for ((s, &yv), &gv) in srow.iter_mut().zip(yrow).zip(grow) {
                                *s += yv * (gv - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmaxRows { a, cols, out } => {
                    if let Some((slot, g)) = pair!(*a) {
                        for ((yrow, grow), srow) in val(*out)
                            .chunks_exact(*cols)
                            .zip(g.chunks_exact(*cols))
                            .zip(slot.chunks_exact_mut(*cols))
                        {
                            let gsum: f64 = grow.iter().sum();
                            for ((s, &yv), &gv) in srow.iter_mut().zip(yrow).zip(grow) {
                                *s += gv - yv.exp() * gsum;
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, shift, cols, mean, inv_std, .. } => {
                    let d = *cols as f64;
                    let vgain = val(*gain);
                    if let Some((slot, g)) = pair!(*x) {
                        for (row, ((xrow, grow), srow)) in val(*x)
                            .chunks_exact(*cols)
                            .zip(g.chunks_exact(*cols))
                            .zip(slot.chunks_exact_mut(*cols))
                            .enumerate()
                        {
                            let (mu, is) = (mean[row], inv_std[row]);
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for ((&xv, &gv), &gn) in xrow.iter().zip(grow).zip(vgain) {
                                let xhat = (xv - mu) * is;
                                let dxhat = gv * gn;
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            let m1 = sum_dxhat / d;
                            let m2 = sum_dxhat_xhat / d;
                            for ((s, &xv), (&gv, &gn)) in
                                srow.iter_mut().zip(xrow).zip(grow.iter().zip(vgain))
                            {
                                let xhat = (xv - mu) * is;
                                *s += is * (gv * gn - m1 - xhat * m2);
                            }
                        }
                    }
                    if let Some((slot, g)) = pair!(*gain) {
                        for (row, (xrow, grow)) in
                            val(*x).chunks_exact(*cols).zip(g.chunks_exact(*cols)).enumerate()
                        {
                            let (mu, is) = (mean[row], inv_std[row]);
                            for ((s, &xv), &gv) in slot.iter_mut().zip(xrow).zip(grow) {
                                *s += gv * (xv - mu) * is;
                            }
                        }
                    }
                    if let Some((slot, g)) = pair!(*shift) {
                        for grow in g.chunks_exact(*cols) {
                            for (s, &gv) in slot.iter_mut().zip(grow) {
                                *s += gv;
                            }
                        }
                    }
                }
                Op::Gelu { a, tanh_u, .. } => {
                    if let Some((slot, g)) = pair!(*a) {
                        for (((s, &gv), &xv), &t) in
                            slot.iter_mut().zip(g).zip(val(*a)).zip(tanh_u)
                        {
                            *s = gv.mul_add(gelu_derivative(xv, t), *s);
                        }
                    }
                }
                Op::Tanh { a, out } => {
                    if let Some((slot, g)) = pair!(*a) {
                        for ((s, &gv), &yv) in slot.iter_mut().zip(g).zip(val(*out)) {
                            *s = gv.mul_add(1.0 - yv * yv, *s);
                        }
                    }
                }
                Op::GatherRows { table, ids, cols, .. } => {
                    if let Some((slot, g)) = pair!(*table) {
                        for (grow, &id) in g.chunks_exact(*cols).zip(ids) {
                            let trow = &mut slot[id * cols..(id + 1) * cols];
                            for (s, &gv) in trow.iter_mut().zip(grow) {
                                *s += gv;
                            }
                        }
                    }
                }
                Op::CrossEntropyLogProbs { logp, labels, cols, .. } => {
                    if let Some((slot, g)) = pair!(*logp) {
                        let scale = g[0] / labels.len() as f64;
                        for (i, &label) in labels.iter().enumerate() {
                            slot[i * cols + label] -= scale;
                        }
                    }
                }
                Op::Sum { a, .. } => {
                    if let Some((slot, g)) = pair!(*a) {
                        let gv = g[0];
                        for s in slot.iter_mut() {
                            *s += gv;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn softmax_row(xrow: &[f64], yrow: &mut [f64]) {
    let max = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (y, &x) in yrow.iter_mut().zip(xrow) {
        let e = (x - max).exp();
        *y = e;
        sum += e;
    }
    for y in yrow.iter_mut() {
        *y /= sum;
    }
}

/// Gradient slot of `in_id` (zeroed on first touch this sweep) together with
/// the final gradient of the op output. `None` when the input does not carry
/// gradient.
fn grad_pair<'g>(
    bufs: &[BufMeta],
    grads: &'g mut [f64],
    live: &mut [bool],
    in_id: usize,
    out_span: Span,
) -> Option<(&'g mut [f64], &'g [f64])> {
    if !bufs[in_id].requires_grad {
        return None;
    }
    let Span { off, len } = bufs[in_id].span;
    if !live[in_id] {
        grads[off..off + len].fill(0.0);
        live[in_id] = true;
    }
    let (before, after) = grads.split_at_mut(out_span.off);
    Some((&mut before[off..off + len], &after[..out_span.len]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, values: Vec<f64>) -> Var {
        let t = Tensor::new(shape, values).unwrap().with_grad();
        tape.leaf(&t)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut tape, vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_one_by_one() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1, 1], vec![1.0]);
        let b = leaf(&mut tape, vec![1, 1], vec![1.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[1.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradients() {
        // f = sum(A @ B): dA = ones @ Bᵀ, dB = Aᵀ @ ones.
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.5, 0.3, 0.7, 0.1]);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        for g in tape.grad(a).unwrap() {
            assert!((g - 0.8).abs() < 1e-12);
        }
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn batch_matmul_matches_per_slice_matmul() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2, 3], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect());
        let b = leaf(&mut tape, vec![2, 3, 2], (0..12).map(|i| 0.5 - i as f64 * 0.2).collect());
        let c = tape.batch_matmul(a, b).unwrap();
        for batch in 0..2 {
            let asl = tape.value(a)[batch * 6..(batch + 1) * 6].to_vec();
            let bsl = tape.value(b)[batch * 6..(batch + 1) * 6].to_vec();
            let a0 = leaf(&mut tape, vec![2, 3], asl);
            let b0 = leaf(&mut tape, vec![3, 2], bsl);
            let c0 = tape.matmul(a0, b0).unwrap();
            assert_eq!(tape.value(c)[batch * 4..(batch + 1) * 4], *tape.value(c0));
        }
    }

    #[test]
    fn softmax_symmetry_and_hand_case() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![0.0, 0.0]);
        let y = tape.softmax_rows(x, None).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let x2 = leaf(&mut tape, vec![1, 2], vec![0.0, 2.0_f64.ln()]);
        let y2 = tape.softmax_rows(x2, None).unwrap();
        let v = tape.value(y2);
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_masked_entry_is_exactly_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![5.0, 9.0]);
        let y = tape.softmax_rows(x, Some(&[true, false])).unwrap();
        assert_eq!(tape.value(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let err = tape
            .softmax_rows(x, Some(&[true, true, false, false]))
            .unwrap_err();
        assert!(matches!(err, TensorError::DegenerateRow { row: 1 }));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut tape = Tape::new();
        let vals = vec![0.3, -1.2, 4.0, 2.2, 0.0, -0.7];
        let x = leaf(&mut tape, vec![2, 3], vals.clone());
        let y = tape.softmax_rows(x, None).unwrap();
        for row in tape.value(y).chunks_exact(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted: Vec<f64> = vals.iter().map(|v| v + 123.456).collect();
        let xs = leaf(&mut tape, vec![2, 3], shifted);
        let ys = tape.softmax_rows(xs, None).unwrap();
        let (yv, ysv) = (tape.value(y).to_vec(), tape.value(ys).to_vec());
        for (a, b) in yv.iter().zip(&ysv) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_normalize_cases() {
        let mut tape = Tape::new();
        let gain = leaf(&mut tape, vec![2], vec![1.0, 1.0]);
        let shift = leaf(&mut tape, vec![2], vec![0.0, 0.0]);

        // Constant vector standardizes to zero.
        let c = leaf(&mut tape, vec![1, 2], vec![3.0, 3.0]);
        let y = tape.layer_normalize(c, gain, shift, 1e-12).unwrap();
        assert!(tape.value(y).iter().all(|v| v.abs() < 1e-6));

        // [1, 3]: mean 2, population variance 1.
        let x = leaf(&mut tape, vec![1, 2], vec![1.0, 3.0]);
        let y2 = tape.layer_normalize(x, gain, shift, 1e-12).unwrap();
        assert!((tape.value(y2)[0] + 1.0).abs() < 1e-9);
        assert!((tape.value(y2)[1] - 1.0).abs() < 1e-9);

        // Zero gain broadcasts the shift.
        let g0 = leaf(&mut tape, vec![2], vec![0.0, 0.0]);
        let s = leaf(&mut tape, vec![2], vec![0.25, -0.5]);
        let y3 = tape.layer_normalize(x, g0, s, 1e-12).unwrap();
        assert_eq!(tape.value(y3), &[0.25, -0.5]);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        // Gold probability 1 -> 0 loss. log[1, ~0] is not representable,
        // so use a spike row whose softmax is numerically [1, 0].
        let x = leaf(&mut tape, vec![1, 2], vec![60.0, -60.0]);
        let logp = tape.log_softmax_rows(x).unwrap();
        let loss = tape.cross_entropy_from_log_probs(logp, &[0]).unwrap();
        assert!(tape.value(loss)[0].abs() < 1e-12);

        // Gold probability 0.5 -> ln 2.
        let x2 = leaf(&mut tape, vec![1, 2], vec![0.0, 0.0]);
        let logp2 = tape.log_softmax_rows(x2).unwrap();
        let loss2 = tape.cross_entropy_from_log_probs(logp2, &[1]).unwrap();
        assert!((tape.value(loss2)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        // Uniform over C classes -> ln C.
        let c = 5;
        let x3 = leaf(&mut tape, vec![1, c], vec![0.0; c]);
        let logp3 = tape.log_softmax_rows(x3).unwrap();
        let loss3 = tape.cross_entropy_from_log_probs(logp3, &[3]).unwrap();
        assert!((tape.value(loss3)[0] - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![0.0, 0.0]);
        let logp = tape.log_softmax_rows(x).unwrap();
        let err = tape.cross_entropy_from_log_probs(logp, &[2]).unwrap_err();
        assert!(matches!(
            err,
            TensorError::LabelOutOfRange { label: 2, classes: 2, row: 0 }
        ));
    }

    #[test]
    fn cross_entropy_rejects_unnormalized_rows() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![-0.1, -0.2]);
        let err = tape.cross_entropy_from_log_probs(x, &[0]).unwrap_err();
        assert!(matches!(err, TensorError::NotLogProbRow { row: 0, .. }));
    }

    #[test]
    fn stop_gradient_forward_is_bitwise_identity() {
        let mut tape = Tape::new();
        let vals = vec![1.5e-300, -0.0, 3.7, f64::MIN_POSITIVE];
        let x = leaf(&mut tape, vec![4], vals.clone());
        let y = tape.stop_gradient(x);
        for (a, b) in vals.iter().zip(tape.value(y)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn stop_gradient_freezes_one_product_factor() {
        // d/dx [stop_gradient(x) * x] at x = 3 is 3, not 6.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![3.0]);
        let frozen = tape.stop_gradient(x);
        let prod = tape.mul(frozen, x).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn loss_through_stop_gradient_only_gives_exact_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![1.0, 2.0, 3.0]);
        let sq = tape.mul(x, x).unwrap();
        let frozen = tape.stop_gradient(sq);
        let loss = tape.sum(frozen);
        tape.backward(loss).unwrap();
        // Nothing flowed back at all; the reported gradient is exactly zero.
        assert!(tape.grad(x).is_none());
        assert!(tape.grad_or_zeros(x).iter().all(|g| g.to_bits() == 0));
    }

    #[test]
    fn backward_square_and_sum() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);

        let mut tape2 = Tape::new();
        let y = leaf(&mut tape2, vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let loss2 = tape2.sum(y);
        tape2.backward(loss2).unwrap();
        assert_eq!(tape2.grad(y).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn backward_is_deterministic_bit_for_bit() {
        let run = || {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, vec![2, 3], vec![0.31, -0.7, 1.9, 0.02, -1.4, 0.55]);
            let w = leaf(&mut tape, vec![3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
            let h = tape.matmul(x, w).unwrap();
            let g = tape.gelu(h);
            let logp = tape.log_softmax_rows(g).unwrap();
            let loss = tape.cross_entropy_from_log_probs(logp, &[0, 1]).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.grad(x).unwrap().to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        for (a, b) in gx1.iter().zip(&gx2).chain(gw1.iter().zip(&gw2)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn reset_reuses_arena_and_stays_correct() {
        let mut tape = Tape::new();
        for round in 0..3 {
            tape.reset();
            let scale = 1.0 + round as f64;
            let x = leaf(&mut tape, vec![2], vec![scale, 2.0 * scale]);
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            assert_eq!(tape.grad(x).unwrap(), &[2.0 * scale, 4.0 * scale]);
        }
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64).collect();
        let x = leaf(&mut tape, vec![2 * 3, 4], vals.clone());
        let split = tape.split_heads(x, 2, 3, 2).unwrap();
        assert_eq!(tape.shape(split), &[4, 3, 2]);
        // Head-major layout: batch 0, head 0 holds columns 0..2 of each row.
        assert_eq!(&tape.value(split)[..6], &[0.0, 1.0, 4.0, 5.0, 8.0, 9.0]);
        let merged = tape.merge_heads(split, 2, 2).unwrap();
        assert_eq!(tape.value(merged), vals.as_slice());
        // Gradient flows back as identity through the permutation pair.
        let loss = tape.sum(merged);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn gather_rows_selects_and_scatter_adds() {
        let mut tape = Tape::new();
        let table = leaf(&mut tape, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let picked = tape.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(picked), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(picked);
        tape.backward(loss).unwrap();
        // Row 2 was gathered twice.
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
