//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended after their inputs, so reverse insertion order is a
//! valid topological order for [`Graph::backward`]. Only nodes reachable from
//! a `requires_grad` leaf take part in the backward pass.

use crate::error::{ensure, Error, Result};
use crate::exec;
use crate::functional::{self, check_targets, l2_norm, Targets};
use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: F },
    Gelu { x: Var },
    Tanh { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(F, F)> },
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, mask: Vec<bool>, probs: Vec<F> },
    GatherRows { x: Var, rows: Vec<usize> },
    ReplaceRows { x: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Targets<F>, probs: Vec<F> },
    KlDiv { teacher: Var, student: Var, tau: F, logp: Vec<F>, logq: Vec<F>, row_kl: Vec<F> },
    NormSqDist { a: Var, b: Var },
    Sum { x: Var },
}

#[derive(Clone, Copy, Debug)]
struct AttnLayout {
    batch: usize,
    seq: usize,
    heads: usize,
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn width(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn rows_of(shape: &[usize]) -> usize {
    let w = width(shape);
    if w == 0 {
        0
    } else {
        shape.iter().product::<usize>() / w
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, requires_grad: bool, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    pub fn leaf(&mut self, shape: &[usize], values: Vec<F>, requires_grad: bool) -> Result<Var> {
        ensure!(
            shape.iter().product::<usize>() == values.len(),
            Shape,
            "leaf shape {:?} vs {} values",
            shape,
            values.len()
        );
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// Registers a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn tensor(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), true, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn scalar(&self, v: Var) -> F {
        self.node(v).value[0]
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.node(v).grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are consistent")
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    // ---- operations ---------------------------------------------------

    /// `a[n,k] · b[k,m]`, or `a · bᵀ` with `b` stored `[m,k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(sa.len() == 2 && sb.len() == 2, Shape, "matmul needs matrices, got {sa:?} and {sb:?}");
        let (n, k) = (sa[0], sa[1]);
        let (kb, m) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        ensure!(k == kb, Shape, "matmul inner dims {k} vs {kb}");
        let mut out = vec![F::zero(); n * m];
        gemm(n, k, m, self.value(a), false, self.value(b), trans_b, F::zero(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![n, m], out, rg, Op::MatMul { a, b, trans_b }))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let w = width(self.shape(x));
        ensure!(self.shape(bias) == [w], Shape, "bias {:?} for width {w}", self.shape(bias));
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(w) {
            row.iter_mut().zip(b).for_each(|(o, &bb)| *o = *o + bb);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, out, rg, Op::AddBias { x, bias }))
    }

    /// `x·w + b` with `w` stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w, false)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(self.shape(a) == self.shape(b), Shape, "add {:?} vs {:?}", self.shape(a), self.shape(b));
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, rg, Op::Scale { x, s })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -F::one())
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, k, half) = (F::lit(GELU_C), F::lit(GELU_K), F::lit(0.5));
        let mut out = self.value(x).to_vec();
        let w = width(self.shape(x)).max(1);
        exec::for_each_chunk_mut(&mut out, w * 16, |_, chunk| {
            for v in chunk.iter_mut() {
                let x = *v;
                *v = half * x * (F::one() + (c * (x + k * x * x * x)).tanh());
            }
        });
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, rg, Op::Gelu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, rg, Op::Tanh { x })
    }

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let w = width(self.shape(x));
        ensure!(
            self.shape(gain) == [w] && self.shape(bias) == [w],
            Shape,
            "layer norm params {:?}/{:?} for width {w}",
            self.shape(gain),
            self.shape(bias)
        );
        ensure!(eps > F::zero(), InvalidArgument, "eps must be positive");
        let rows = rows_of(self.shape(x));
        let mut out = vec![F::zero(); rows * w];
        let mut stats = vec![(F::zero(), F::zero()); rows];
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        const ROWS: usize = 16;
        exec::for_each_chunk2_mut(&mut out, w * ROWS, &mut stats, ROWS, |ci, o, st| {
            for (r, (orow, s)) in o.chunks_mut(w).zip(st.iter_mut()).enumerate() {
                let row = ci * ROWS + r;
                *s = functional::layer_norm_row(&xv[row * w..(row + 1) * w], g, b, eps, orow);
            }
        });
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(shape, out, rg, Op::LayerNorm { x, gain, bias, stats }))
    }

    /// Multi-head scaled dot-product self-attention on `[batch·seq, d]`
    /// projections. `key_mask[b·seq + j]` marks key `j` of sample `b` as
    /// attendable; masked keys receive exactly zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        ensure!(shape.len() == 2 && shape[0] == batch * seq, Shape, "attention input {shape:?} vs {batch}x{seq}");
        ensure!(self.shape(k) == shape.as_slice() && self.shape(v) == shape.as_slice(), Shape, "q/k/v shapes differ");
        ensure!(key_mask.len() == batch * seq, Shape, "mask length {} vs {}", key_mask.len(), batch * seq);
        let d = shape[1];
        ensure!(heads > 0 && d % heads == 0, Shape, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![F::zero(); batch * seq * d];
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        exec::for_each_chunk2_mut(&mut out, seq * d, &mut probs, heads * seq * seq, |b, ob, pb| {
            let base = b * seq;
            let mask = &key_mask[base..base + seq];
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq {
                    let qrow = &qv[(base + t) * d + off..(base + t) * d + off + dh];
                    let prow = &mut pb[(h * seq + t) * seq..(h * seq + t + 1) * seq];
                    let mut max = F::neg_infinity();
                    for j in 0..seq {
                        if mask[j] {
                            let krow = &kv[(base + j) * d + off..(base + j) * d + off + dh];
                            let s = qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<F>() * scale;
                            prow[j] = s;
                            max = max.max(s);
                        }
                    }
                    let mut total = F::zero();
                    for j in 0..seq {
                        if mask[j] {
                            prow[j] = (prow[j] - max).exp();
                            total = total + prow[j];
                        } else {
                            prow[j] = F::zero();
                        }
                    }
                    if total > F::zero() {
                        prow.iter_mut().for_each(|p| *p = *p / total);
                    }
                    let orow = &mut ob[t * d + off..t * d + off + dh];
                    for j in 0..seq {
                        let p = prow[j];
                        if p != F::zero() {
                            let vrow = &vv[(base + j) * d + off..(base + j) * d + off + dh];
                            orow.iter_mut().zip(vrow).for_each(|(o, &x)| *o = *o + p * x);
                        }
                    }
                }
            }
        });
        let rg = self.rg(&[q, k, v]);
        let layout = AttnLayout { batch, seq, heads };
        Ok(self.push(shape, out, rg, Op::Attention { q, k, v, layout, mask: key_mask.to_vec(), probs }))
    }

    /// Selects rows (of the last dimension) into a `[rows.len(), width]` matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let w = width(self.shape(x));
        let n = rows_of(self.shape(x));
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::InvalidArgument(format!("row {bad} out of range for {n} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            out.extend_from_slice(&xv[r * w..(r + 1) * w]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![rows.len(), w], out, rg, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Copy of `x` with the given rows overwritten by constant `replacement`
    /// rows. No gradient flows into the replaced rows.
    pub fn replace_rows(&mut self, x: Var, rows: &[usize], replacement: &[F]) -> Result<Var> {
        let w = width(self.shape(x));
        let n = rows_of(self.shape(x));
        ensure!(replacement.len() == rows.len() * w, Shape, "replacement holds {} values", replacement.len());
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::InvalidArgument(format!("row {bad} out of range for {n} rows")));
        }
        let mut out = self.value(x).to_vec();
        for (i, &r) in rows.iter().enumerate() {
            out[r * w..(r + 1) * w].copy_from_slice(&replacement[i * w..(i + 1) * w]);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, rg, Op::ReplaceRows { x, rows: rows.to_vec() }))
    }

    /// Mean cross-entropy of `softmax(logits)` against hard or soft targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: Targets<F>) -> Result<Var> {
        let shape = self.shape(logits);
        ensure!(shape.len() == 2, Shape, "logits must be a matrix, got {shape:?}");
        let (rows, cols) = (shape[0], shape[1]);
        check_targets(&targets, rows, cols)?;
        let lv = self.value(logits);
        let mut probs = vec![F::zero(); rows * cols];
        let mut logp = vec![F::zero(); cols];
        let mut total = F::zero();
        for r in 0..rows {
            let row = &lv[r * cols..(r + 1) * cols];
            functional::log_softmax_row(row, F::one(), &mut logp);
            for c in 0..cols {
                probs[r * cols + c] = logp[c].exp();
            }
            total = total
                - match &targets {
                    Targets::Hard(ids) => logp[ids[r]],
                    Targets::Soft(p) => p[r * cols..(r + 1) * cols].iter().zip(&logp).map(|(&t, &l)| t * l).sum(),
                };
        }
        let loss = total / F::from_usize(rows.max(1)).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(vec![], vec![loss], rg, Op::CrossEntropy { logits, targets, probs }))
    }

    /// Batch mean of `τ²·KL(softmax(teacher/τ) ‖ softmax(student/τ))`.
    pub fn kl_div(&mut self, teacher: Var, student: Var, tau: F) -> Result<Var> {
        ensure!(tau > F::zero(), InvalidArgument, "temperature must be positive, got {tau}");
        let shape = self.shape(student).to_vec();
        ensure!(
            shape.len() == 2 && self.shape(teacher) == shape.as_slice(),
            Shape,
            "kl shapes {:?} vs {:?}",
            self.shape(teacher),
            shape
        );
        let (rows, cols) = (shape[0], shape[1]);
        let mut logp = vec![F::zero(); rows * cols];
        let mut logq = vec![F::zero(); rows * cols];
        let mut row_kl = vec![F::zero(); rows];
        let (tv, sv) = (self.value(teacher), self.value(student));
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            functional::log_softmax_row(&tv[span.clone()], tau, &mut logp[span.clone()]);
            functional::log_softmax_row(&sv[span.clone()], tau, &mut logq[span.clone()]);
            row_kl[r] = logp[span.clone()].iter().zip(&logq[span]).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum();
        }
        let total: F = row_kl.iter().copied().sum();
        let loss = total * tau * tau / F::from_usize(rows.max(1)).unwrap();
        let rg = self.rg(&[teacher, student]);
        Ok(self.push(vec![], vec![loss], rg, Op::KlDiv { teacher, student, tau, logp, logq, row_kl }))
    }

    /// Batch mean over rows of `‖a_r/‖a_r‖ − b_r/‖b_r‖‖²`.
    pub fn normalized_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(self.shape(a) == self.shape(b), Shape, "{:?} vs {:?}", self.shape(a), self.shape(b));
        let w = width(self.shape(a));
        let rows = rows_of(self.shape(a));
        let mut total = F::zero();
        for r in 0..rows {
            let (ar, br) = (&self.value(a)[r * w..(r + 1) * w], &self.value(b)[r * w..(r + 1) * w]);
            total = total + functional::normalized_sqdist(ar, br)?;
        }
        let loss = total / F::from_usize(rows.max(1)).unwrap();
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![], vec![loss], rg, Op::NormSqDist { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], rg, Op::Sum { x })
    }

    // ---- backward -----------------------------------------------------

    /// Back-propagates from a scalar root, adding `∂root/∂leaf` into the
    /// gradient buffer of every `requires_grad` leaf it reaches.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        ensure!(self.node(root).value.len() == 1, InvalidArgument, "backward root must be scalar, got {:?}", self.shape(root));
        let mut grads: Vec<Option<Vec<F>>> = (0..=root.0).map(|_| None).collect();
        if !self.node(root).requires_grad {
            return Ok(());
        }
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            self.propagate(i, &gy, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Some(g), Op::Leaf, true) = (g, &node.op, node.requires_grad) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot_mut(grads, $v, self.nodes[$v.0].value.len())
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (sa, n_out) = (&self.nodes[a.0].shape, node.shape[1]);
                let (n, k) = (sa[0], sa[1]);
                if wants(*a) {
                    let bv = &self.nodes[b.0].value;
                    gemm(n, n_out, k, gy, false, bv, !*trans_b, F::one(), acc!(*a));
                }
                if wants(*b) {
                    let av = &self.nodes[a.0].value;
                    if *trans_b {
                        gemm(n_out, n, k, gy, true, av, false, F::one(), acc!(*b));
                    } else {
                        gemm(k, n, n_out, av, true, gy, false, F::one(), acc!(*b));
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(gy).for_each(|(a, &g)| *a = *a + g);
                }
                if wants(*bias) {
                    let gb = acc!(*bias);
                    let w = gb.len();
                    for row in gy.chunks(w) {
                        gb.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc!(v).iter_mut().zip(gy).for_each(|(s, &g)| *s = *s + g);
                    }
                }
            }
            Op::Scale { x, s } => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(gy).for_each(|(a, &g)| *a = *a + g * *s);
                }
            }
            Op::Gelu { x } => {
                if wants(*x) {
                    let (c, k, half) = (F::lit(GELU_C), F::lit(GELU_K), F::lit(0.5));
                    let three = F::lit(3.0);
                    let xv = &self.nodes[x.0].value;
                    for ((a, &g), &x) in acc!(*x).iter_mut().zip(gy).zip(xv) {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x);
                        *a = *a + g * d;
                    }
                }
            }
            Op::Tanh { x } => {
                if wants(*x) {
                    for ((a, &g), &y) in acc!(*x).iter_mut().zip(gy).zip(&node.value) {
                        *a = *a + g * (F::one() - y * y);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let w = width(&node.shape);
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let nf = F::from_usize(w).unwrap();
                if wants(*gain) || wants(*bias) {
                    let mut dg = vec![F::zero(); w];
                    let mut db = vec![F::zero(); w];
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        for c in 0..w {
                            let g = gy[r * w + c];
                            dg[c] = dg[c] + g * (xv[r * w + c] - mean) * rstd;
                            db[c] = db[c] + g;
                        }
                    }
                    if wants(*gain) {
                        acc!(*gain).iter_mut().zip(&dg).for_each(|(a, &g)| *a = *a + g);
                    }
                    if wants(*bias) {
                        acc!(*bias).iter_mut().zip(&db).for_each(|(a, &g)| *a = *a + g);
                    }
                }
                if wants(*x) {
                    let dx = acc!(*x);
                    const ROWS: usize = 16;
                    exec::for_each_chunk_mut(dx, w * ROWS, |ci, chunk| {
                        for (rr, drow) in chunk.chunks_mut(w).enumerate() {
                            let r = ci * ROWS + rr;
                            let (mean, rstd) = stats[r];
                            let xr = &xv[r * w..(r + 1) * w];
                            let gr = &gy[r * w..(r + 1) * w];
                            let mut m1 = F::zero();
                            let mut m2 = F::zero();
                            for c in 0..w {
                                let dxhat = gr[c] * gv[c];
                                m1 = m1 + dxhat;
                                m2 = m2 + dxhat * (xr[c] - mean) * rstd;
                            }
                            m1 = m1 / nf;
                            m2 = m2 / nf;
                            for c in 0..w {
                                let xhat = (xr[c] - mean) * rstd;
                                drow[c] = drow[c] + rstd * (gr[c] * gv[c] - m1 - xhat * m2);
                            }
                        }
                    });
                }
            }
            Op::Attention { q, k, v, layout, mask, probs } => {
                if !(wants(*q) || wants(*k) || wants(*v)) {
                    return;
                }
                let AttnLayout { batch, seq, heads } = *layout;
                let d = node.shape[1];
                let dh = d / heads;
                let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
                let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
                let parts = exec::map_indexed(batch, |b| {
                    let base = b * seq;
                    let mut dq = vec![F::zero(); seq * d];
                    let mut dk = vec![F::zero(); seq * d];
                    let mut dv = vec![F::zero(); seq * d];
                    let mut dp = vec![F::zero(); seq];
                    for h in 0..heads {
                        let off = h * dh;
                        for t in 0..seq {
                            let prow = &probs[((b * heads + h) * seq + t) * seq..((b * heads + h) * seq + t + 1) * seq];
                            let go = &gy[(base + t) * d + off..(base + t) * d + off + dh];
                            let mut dot = F::zero();
                            for j in 0..seq {
                                if !mask[base + j] {
                                    dp[j] = F::zero();
                                    continue;
                                }
                                let vrow = &vv[(base + j) * d + off..(base + j) * d + off + dh];
                                dp[j] = go.iter().zip(vrow).map(|(&a, &c)| a * c).sum();
                                dot = dot + dp[j] * prow[j];
                                let p = prow[j];
                                dv[j * d + off..j * d + off + dh].iter_mut().zip(go).for_each(|(a, &g)| *a = *a + p * g);
                            }
                            let qrow = &qv[(base + t) * d + off..(base + t) * d + off + dh];
                            for j in 0..seq {
                                if !mask[base + j] {
                                    continue;
                                }
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == F::zero() {
                                    continue;
                                }
                                let krow = &kv[(base + j) * d + off..(base + j) * d + off + dh];
                                dq[t * d + off..t * d + off + dh].iter_mut().zip(krow).for_each(|(a, &c)| *a = *a + ds * c);
                                dk[j * d + off..j * d + off + dh].iter_mut().zip(qrow).for_each(|(a, &c)| *a = *a + ds * c);
                            }
                        }
                    }
                    (dq, dk, dv)
                });
                for (which, var) in [(0usize, *q), (1, *k), (2, *v)] {
                    if !wants(var) {
                        continue;
                    }
                    let target = acc!(var);
                    for (b, part) in parts.iter().enumerate() {
                        let src = match which {
                            0 => &part.0,
                            1 => &part.1,
                            _ => &part.2,
                        };
                        target[b * seq * d..(b + 1) * seq * d].iter_mut().zip(src).for_each(|(a, &g)| *a = *a + g);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if wants(*x) {
                    let w = node.shape[1];
                    let gx = acc!(*x);
                    for (i, &r) in rows.iter().enumerate() {
                        gx[r * w..(r + 1) * w].iter_mut().zip(&gy[i * w..(i + 1) * w]).for_each(|(a, &g)| *a = *a + g);
                    }
                }
            }
            Op::ReplaceRows { x, rows } => {
                if wants(*x) {
                    let w = width(&node.shape);
                    let mut g = gy.to_vec();
                    for &r in rows {
                        g[r * w..(r + 1) * w].iter_mut().for_each(|v| *v = F::zero());
                    }
                    acc!(*x).iter_mut().zip(&g).for_each(|(a, &v)| *a = *a + v);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if wants(*logits) {
                    let shape = &self.nodes[logits.0].shape;
                    let (rows, cols) = (shape[0], shape[1]);
                    let coef = gy[0] / F::from_usize(rows.max(1)).unwrap();
                    let gl = acc!(*logits);
                    for r in 0..rows {
                        let p = &probs[r * cols..(r + 1) * cols];
                        match targets {
                            Targets::Hard(ids) => {
                                for c in 0..cols {
                                    let t = if ids[r] == c { F::one() } else { F::zero() };
                                    gl[r * cols + c] = gl[r * cols + c] + coef * (p[c] - t);
                                }
                            }
                            Targets::Soft(tp) => {
                                let trow = &tp[r * cols..(r + 1) * cols];
                                let mass: F = trow.iter().copied().sum();
                                for c in 0..cols {
                                    gl[r * cols + c] = gl[r * cols + c] + coef * (p[c] * mass - trow[c]);
                                }
                            }
                        }
                    }
                }
            }
            Op::KlDiv { teacher, student, tau, logp, logq, row_kl } => {
                let shape = &node_shape(self, *student);
                let (rows, cols) = (shape[0], shape[1]);
                let coef = gy[0] * *tau / F::from_usize(rows.max(1)).unwrap();
                if wants(*student) {
                    let gs = acc!(*student);
                    for idx in 0..rows * cols {
                        gs[idx] = gs[idx] + coef * (logq[idx].exp() - logp[idx].exp());
                    }
                }
                if wants(*teacher) {
                    let gt = acc!(*teacher);
                    for r in 0..rows {
                        for c in 0..cols {
                            let idx = r * cols + c;
                            gt[idx] = gt[idx] + coef * logp[idx].exp() * (logp[idx] - logq[idx] - row_kl[r]);
                        }
                    }
                }
            }
            Op::NormSqDist { a, b } => {
                let w = width(&self.nodes[a.0].shape);
                let rows = rows_of(&self.nodes[a.0].shape);
                let coef = gy[0] * F::lit(2.0) / F::from_usize(rows.max(1)).unwrap();
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (wa, wb) = (wants(*a), wants(*b));
                for r in 0..rows {
                    let (ar, br) = (&av[r * w..(r + 1) * w], &bv[r * w..(r + 1) * w]);
                    let (na, nb) = (l2_norm(ar), l2_norm(br));
                    let u: Vec<F> = ar.iter().zip(br).map(|(&x, &y)| x / na - y / nb).collect();
                    if wa {
                        let proj: F = ar.iter().zip(&u).map(|(&x, &uu)| x / na * uu).sum();
                        let ga = acc!(*a);
                        for c in 0..w {
                            ga[r * w + c] = ga[r * w + c] + coef / na * (u[c] - ar[c] / na * proj);
                        }
                    }
                    if wb {
                        let proj: F = br.iter().zip(&u).map(|(&y, &uu)| y / nb * uu).sum();
                        let gb = acc!(*b);
                        for c in 0..w {
                            gb[r * w + c] = gb[r * w + c] - coef / nb * (u[c] - br[c] / nb * proj);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    acc!(*x).iter_mut().for_each(|a| *a = *a + gy[0]);
                }
            }
        }
    }
}

fn slot_mut<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, n: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
}

fn node_shape<F: Real>(g: &Graph<F>, v: Var) -> Vec<usize> {
    g.nodes[v.0].shape.clone()
}
