use super::{log_sigmoid, sigmoid, smooth_l1_grad, smooth_l1_scalar, SparseRows, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SmoothL1 { pred: Var, target: Var, beta: f64 },
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Mix { src: Var, table: SparseRows },
    Im2Col { src: Var, height: usize, width: usize, dilation: usize },
    /// `argmax[g * c + ch]` is the source row that won, or `usize::MAX` for empty groups.
    ScatterMax { src: Var, argmax: Vec<usize> },
    RowNormalize { src: Var, norms: Vec<f64> },
    GramDiff(Var, Var),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Focal { logits: Var, target: Vec<f64>, norm: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Rows with an L2 norm below this are treated as zero vectors.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Focusing exponents of the penalty-reduced focal loss.
const FOCAL_ALPHA: i32 = 2;
const FOCAL_BETA: i32 = 4;

/// Single-threaded computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `c (+)= op(a) * op(b)` for row-major buffers. `a` is logically `m x k`,
/// `b` is logically `k x n`; the `*_t` flags say the buffer holds the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe buffers whose lengths are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a leaf; it is trainable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Copies the current value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let mut t = self.nodes[v.0].value.clone();
        t.zero_grad();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * factor).collect();
        let value = Tensor::new(self.shape(a), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, factor), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(self.shape(a), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(self.shape(a), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid(a), needs)
    }

    /// Elementwise smooth-L1 of `pred - target`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: f64) -> Result<Var> {
        same_shape("smooth_l1", self.value(pred), self.value(target))?;
        let data = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(p, t)| smooth_l1_scalar(p - t, beta))
            .collect();
        let value = Tensor::new(self.shape(pred), data)?;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(value, Op::SmoothL1 { pred, target, beta }, needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Mean over all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len();
        let s: f64 = self.data(a).iter().sum();
        let m = if n == 0 { 0.0 } else { s / n as f64 };
        let needs = self.needs(a);
        self.push(Tensor::scalar(m), Op::Mean(a), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_matrix("matmul", self.value(a))?;
        let (k2, n) = require_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// Adds a length-`c` bias to every row of an `n x c` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, c) = require_matrix("add_bias", self.value(a))?;
        if self.value(bias).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: vec![n, c],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_exact_mut(c.max(1)) {
            row.iter_mut().zip(b).for_each(|(x, bb)| *x += bb);
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::AddBias(a, bias), needs))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    /// Sparse row mix of an `n x c` matrix; see [`SparseRows`].
    pub fn mix(&mut self, src: Var, table: SparseRows) -> Result<Var> {
        let (n, c) = require_matrix("mix", self.value(src))?;
        if let Some(max) = table.max_source_row() {
            if max >= n {
                return Err(Error::InvalidTensor(format!(
                    "mix reads row {max} of a {n}-row matrix"
                )));
            }
        }
        let src_data = self.data(src);
        let rows = table.num_rows();
        let mut out = vec![0.0; rows * c];
        for (i, dst) in out.chunks_exact_mut(c.max(1)).enumerate().take(rows) {
            for &(r, w) in table.row(i) {
                let s = &src_data[r * c..(r + 1) * c];
                dst.iter_mut().zip(s).for_each(|(d, x)| *d += w * x);
            }
        }
        let needs = self.needs(src);
        Ok(self.push(Tensor::new(&[rows, c], out)?, Op::Mix { src, table }, needs))
    }

    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        self.mix(src, SparseRows::gather(indices))
    }

    /// 3x3 zero-padded patch extraction from an `(h*w) x c` pixel-major map.
    /// Output column `k * c + ch` holds channel `ch` of neighbour `k`, with
    /// `k = (dy + 1) * 3 + (dx + 1)`.
    pub fn im2col3x3(&mut self, src: Var, height: usize, width: usize) -> Result<Var> {
        self.im2col3x3_dilated(src, height, width, 1)
    }

    /// Like [`Graph::im2col3x3`] with taps `dilation` cells apart.
    pub fn im2col3x3_dilated(
        &mut self,
        src: Var,
        height: usize,
        width: usize,
        dilation: usize,
    ) -> Result<Var> {
        if dilation == 0 {
            return Err(Error::InvalidTensor("dilation must be >= 1".into()));
        }
        let (n, c) = require_matrix("im2col", self.value(src))?;
        if n != height * width {
            return Err(Error::ShapeMismatch {
                op: "im2col",
                lhs: vec![n, c],
                rhs: vec![height, width],
            });
        }
        let d = dilation as isize;
        let s = self.data(src);
        let mut out = vec![0.0; n * 9 * c];
        for y in 0..height {
            for x in 0..width {
                let dst = &mut out[(y * width + x) * 9 * c..][..9 * c];
                for (k, (dy, dx)) in NEIGHBOURS_3X3.iter().enumerate() {
                    let (yy, xx) = (y as isize + dy * d, x as isize + dx * d);
                    if yy < 0 || xx < 0 || yy >= height as isize || xx >= width as isize {
                        continue;
                    }
                    let p = yy as usize * width + xx as usize;
                    dst[k * c..(k + 1) * c].copy_from_slice(&s[p * c..(p + 1) * c]);
                }
            }
        }
        let needs = self.needs(src);
        Ok(self.push(
            Tensor::new(&[n, 9 * c], out)?,
            Op::Im2Col {
                src,
                height,
                width,
                dilation,
            },
            needs,
        ))
    }

    /// Per-channel max over row groups: output row `g` is the elementwise max
    /// of all source rows `r` with `groups[r] == g`. Empty groups yield zeros.
    /// Ties keep the first row.
    pub fn scatter_max(&mut self, src: Var, groups: &[usize], num_groups: usize) -> Result<Var> {
        let (n, c) = require_matrix("scatter_max", self.value(src))?;
        if groups.len() != n {
            return Err(Error::ShapeMismatch {
                op: "scatter_max",
                lhs: vec![n, c],
                rhs: vec![groups.len()],
            });
        }
        let s = self.data(src);
        let mut out = vec![0.0; num_groups * c];
        let mut argmax = vec![usize::MAX; num_groups * c];
        for (r, &g) in groups.iter().enumerate() {
            if g >= num_groups {
                return Err(Error::InvalidTensor(format!(
                    "group {g} out of range {num_groups}"
                )));
            }
            for ch in 0..c {
                let slot = g * c + ch;
                let v = s[r * c + ch];
                if argmax[slot] == usize::MAX || v > out[slot] {
                    out[slot] = v;
                    argmax[slot] = r;
                }
            }
        }
        let needs = self.needs(src);
        Ok(self.push(
            Tensor::new(&[num_groups, c], out)?,
            Op::ScatterMax { src, argmax },
            needs,
        ))
    }

    /// Column-wise max of an `n x c` matrix, shape `1 x c`.
    pub fn max_rows(&mut self, src: Var) -> Result<Var> {
        let n = self.value(src).rows();
        self.scatter_max(src, &vec![0; n], 1)
    }

    /// Scales each row to unit L2 norm. Rows with norm below
    /// [`ZERO_NORM_EPS`] become zero and pass no gradient.
    pub fn row_normalize(&mut self, src: Var) -> Result<Var> {
        let (n, c) = require_matrix("row_normalize", self.value(src))?;
        let s = self.data(src);
        let mut out = vec![0.0; n * c];
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = &s[r * c..(r + 1) * c];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push(norm);
            if norm >= ZERO_NORM_EPS {
                out[r * c..(r + 1) * c]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(o, x)| *o = x / norm);
            }
        }
        let needs = self.needs(src);
        Ok(self.push(
            Tensor::new(&[n, c], out)?,
            Op::RowNormalize { src, norms },
            needs,
        ))
    }

    /// `(1/n^2) * sum_ij ((A A^T)_ij - (B B^T)_ij)^2` for two `n x c` matrices,
    /// evaluated through `c x c` Gram matrices so memory stays `O(n c)`.
    pub fn gram_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("gram_diff", self.value(a), self.value(b))?;
        let (n, c) = require_matrix("gram_diff", self.value(a))?;
        let value = if n == 0 {
            0.0
        } else {
            let (da, db) = (self.data(a), self.data(b));
            let mut gaa = vec![0.0; c * c];
            let mut gbb = vec![0.0; c * c];
            let mut gab = vec![0.0; c * c];
            gemm(c, n, c, da, true, da, false, &mut gaa, false);
            gemm(c, n, c, db, true, db, false, &mut gbb, false);
            gemm(c, n, c, da, true, db, false, &mut gab, false);
            let sq = |g: &[f64]| g.iter().map(|x| x * x).sum::<f64>();
            let raw = (sq(&gaa) - 2.0 * sq(&gab)) + sq(&gbb);
            // rounding can leave a tiny negative residue when A ~ B
            (raw / (n * n) as f64).max(0.0)
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(value), Op::GramDiff(a, b), needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidTensor("concat of zero tensors".into()));
        };
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = require_matrix("concat_rows", self.value(p))?;
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(&[rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let mut value = value;
        value.zero_grad();
        let needs = self.needs(a);
        Ok(self.push(value.with_requires_grad(false), Op::Reshape(a), needs))
    }

    /// Cosine similarity of two vectors of equal length. Returns 0 with zero
    /// gradient when either vector has (near-)zero norm.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("cosine_sim", self.value(a), self.value(b))?;
        let n = self.value(a).numel();
        let a2 = self.reshape(a, &[1, n])?;
        let b2 = self.reshape(b, &[1, n])?;
        let na = self.row_normalize(a2)?;
        let nb = self.row_normalize(b2)?;
        let p = self.mul(na, nb)?;
        Ok(self.sum(p))
    }

    /// Penalty-reduced focal loss on sigmoid logits against a Gaussian target
    /// heatmap; cells where the target equals 1 are positives. Normalized by
    /// `max(1, #positives)`.
    pub fn focal_loss(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        if self.value(logits).numel() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "focal_loss",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let num_pos = target.iter().filter(|&&g| g == 1.0).count();
        let norm = num_pos.max(1) as f64;
        let mut total = 0.0;
        for (&x, &g) in self.data(logits).iter().zip(target) {
            let p = sigmoid(x);
            if g == 1.0 {
                total += (1.0 - p).powi(FOCAL_ALPHA) * log_sigmoid(x);
            } else {
                total += (1.0 - g).powi(FOCAL_BETA) * p.powi(FOCAL_ALPHA) * log_sigmoid(-x);
            }
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(-total / norm),
            Op::Focal {
                logits,
                target: target.to_vec(),
                norm,
            },
            needs,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients are added to any
    /// existing leaf gradients, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.needs(loss) {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }

        for (id, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[id];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.needs_grad, g) {
                node.value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        let slot = grad_slot(grads, *v, g.len());
                        slot.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    let slot = grad_slot(grads, *a, g.len());
                    slot.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
                if self.needs(*b) {
                    let slot = grad_slot(grads, *b, g.len());
                    slot.iter_mut().zip(g).for_each(|(s, d)| *s -= d);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let other = self.data(*b);
                    let slot = grad_slot(grads, *a, g.len());
                    for ((s, d), o) in slot.iter_mut().zip(g).zip(other) {
                        *s += d * o;
                    }
                }
                if self.needs(*b) {
                    let other = self.data(*a);
                    let slot = grad_slot(grads, *b, g.len());
                    for ((s, d), o) in slot.iter_mut().zip(g).zip(other) {
                        *s += d * o;
                    }
                }
            }
            Op::Scale(a, f) => {
                let slot = grad_slot(grads, *a, g.len());
                slot.iter_mut().zip(g).for_each(|(s, d)| *s += d * f);
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                let slot = grad_slot(grads, *a, g.len());
                for ((s, d), xv) in slot.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *s += d;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let slot = grad_slot(grads, *a, g.len());
                for ((s, d), y) in slot.iter_mut().zip(g).zip(out.data()) {
                    *s += d * y * (1.0 - y);
                }
            }
            Op::SmoothL1 { pred, target, beta } => {
                let (p, t) = (self.data(*pred), self.data(*target));
                let local: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .zip(g)
                    .map(|((p, t), d)| d * smooth_l1_grad(p - t, *beta))
                    .collect();
                if self.needs(*pred) {
                    let slot = grad_slot(grads, *pred, local.len());
                    slot.iter_mut().zip(&local).for_each(|(s, d)| *s += d);
                }
                if self.needs(*target) {
                    let slot = grad_slot(grads, *target, local.len());
                    slot.iter_mut().zip(&local).for_each(|(s, d)| *s -= d);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                let slot = grad_slot(grads, *a, n);
                slot.iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                if n > 0 {
                    let d = g[0] / n as f64;
                    let slot = grad_slot(grads, *a, n);
                    slot.iter_mut().for_each(|s| *s += d);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let bd = self.data(*b);
                    let slot = grad_slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, bd, true, slot, true);
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    let slot = grad_slot(grads, *b, k * n);
                    gemm(k, m, n, ad, true, g, false, slot, true);
                }
            }
            Op::AddBias(a, bias) => {
                if self.needs(*a) {
                    let slot = grad_slot(grads, *a, g.len());
                    slot.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
                if self.needs(*bias) {
                    let c = self.value(*bias).numel();
                    let slot = grad_slot(grads, *bias, c);
                    for row in g.chunks_exact(c.max(1)) {
                        slot.iter_mut().zip(row).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::Mix { src, table } => {
                let src_t = self.value(*src);
                let c = src_t.cols();
                let slot = grad_slot(grads, *src, src_t.numel());
                for i in 0..table.num_rows() {
                    let gi = &g[i * c..(i + 1) * c];
                    for &(r, w) in table.row(i) {
                        let dst = &mut slot[r * c..(r + 1) * c];
                        dst.iter_mut().zip(gi).for_each(|(s, d)| *s += w * d);
                    }
                }
            }
            Op::Im2Col {
                src,
                height,
                width,
                dilation,
            } => {
                let d = *dilation as isize;
                let src_t = self.value(*src);
                let c = src_t.cols();
                let (h, w) = (*height, *width);
                let slot = grad_slot(grads, *src, src_t.numel());
                for y in 0..h {
                    for x in 0..w {
                        let gi = &g[(y * w + x) * 9 * c..][..9 * c];
                        for (k, (dy, dx)) in NEIGHBOURS_3X3.iter().enumerate() {
                            let (yy, xx) = (y as isize + dy * d, x as isize + dx * d);
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let p = yy as usize * w + xx as usize;
                            slot[p * c..(p + 1) * c]
                                .iter_mut()
                                .zip(&gi[k * c..(k + 1) * c])
                                .for_each(|(s, d)| *s += d);
                        }
                    }
                }
            }
            Op::ScatterMax { src, argmax } => {
                let src_t = self.value(*src);
                let c = src_t.cols();
                let slot = grad_slot(grads, *src, src_t.numel());
                for (i, &r) in argmax.iter().enumerate() {
                    if r != usize::MAX {
                        slot[r * c + i % c] += g[i];
                    }
                }
            }
            Op::RowNormalize { src, norms } => {
                let c = out.cols();
                let slot = grad_slot(grads, *src, out.numel());
                for (r, &norm) in norms.iter().enumerate() {
                    if norm < ZERO_NORM_EPS {
                        continue;
                    }
                    let y = &out.data()[r * c..(r + 1) * c];
                    let gy = &g[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((s, yv), gv) in slot[r * c..(r + 1) * c].iter_mut().zip(y).zip(gy) {
                        *s += (gv - yv * dot) / norm;
                    }
                }
            }
            Op::GramDiff(a, b) => {
                let (n, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if n == 0 {
                    return;
                }
                let (da, db) = (self.data(*a), self.data(*b));
                let scale = 4.0 * g[0] / (n * n) as f64;
                // d/dA = 4/n^2 (A A^T A - B B^T A), d/dB = 4/n^2 (B B^T B - A A^T B)
                let side = |x: &[f64], y: &[f64]| {
                    let mut gxx = vec![0.0; c * c];
                    let mut gyx = vec![0.0; c * c];
                    gemm(c, n, c, x, true, x, false, &mut gxx, false);
                    gemm(c, n, c, y, true, x, false, &mut gyx, false);
                    let mut t1 = vec![0.0; n * c];
                    let mut t2 = vec![0.0; n * c];
                    gemm(n, c, c, x, false, &gxx, false, &mut t1, false);
                    gemm(n, c, c, y, false, &gyx, false, &mut t2, false);
                    t1.iter().zip(&t2).map(|(p, q)| scale * (p - q)).collect::<Vec<_>>()
                };
                if self.needs(*a) {
                    let d = side(da, db);
                    let slot = grad_slot(grads, *a, n * c);
                    slot.iter_mut().zip(&d).for_each(|(s, v)| *s += v);
                }
                if self.needs(*b) {
                    let d = side(db, da);
                    let slot = grad_slot(grads, *b, n * c);
                    slot.iter_mut().zip(&d).for_each(|(s, v)| *s += v);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if self.needs(*p) {
                        let slot = grad_slot(grads, *p, len);
                        slot.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(s, d)| *s += d);
                    }
                    offset += len;
                }
            }
            Op::Reshape(a) => {
                let slot = grad_slot(grads, *a, g.len());
                slot.iter_mut().zip(g).for_each(|(s, d)| *s += d);
            }
            Op::Focal {
                logits,
                target,
                norm,
            } => {
                let x = self.data(*logits);
                let scale = -g[0] / norm;
                let slot = grad_slot(grads, *logits, x.len());
                for ((s, &xv), &gt) in slot.iter_mut().zip(x).zip(target) {
                    let p = sigmoid(xv);
                    let d = if gt == 1.0 {
                        (1.0 - p).powi(FOCAL_ALPHA)
                            * (-(FOCAL_ALPHA as f64) * p * log_sigmoid(xv) + (1.0 - p))
                    } else {
                        (1.0 - gt).powi(FOCAL_BETA)
                            * p.powi(FOCAL_ALPHA)
                            * ((FOCAL_ALPHA as f64) * (1.0 - p) * log_sigmoid(-xv) - p)
                    };
                    *s += scale * d;
                }
            }
        }
    }
}

const NEIGHBOURS_3X3: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];
