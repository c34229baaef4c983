//! Tape of executed operations with reverse-mode gradients.
//!
//! Every node is a `rows × cols` matrix. Ops append a node holding the
//! forward value plus whatever the backward rule needs; `backward` walks the
//! tape once in reverse.

use std::collections::HashMap;

use super::kernels::{self, gemm, Scalar};
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, k: usize },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    SoftmaxMasked(Var),
    LayerNorm { x: Var, scale: Var, shift: Var, stats: Vec<(S, S)> },
    Silu(Var),
    Gelu(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ScatterAddRows { base: Var, delta: Var, idx: Vec<usize> },
    Sum(Var),
    Mse { a: Var, target: Vec<S> },
}

struct Node<S> {
    rows: usize,
    cols: usize,
    value: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Ordered record of differentiable operations.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    param_leaves: HashMap<ParamId, Var>,
    fully_blocked_rows: usize,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            fully_blocked_rows: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Rows written as all-zero by `softmax_masked` because every entry was blocked.
    pub fn fully_blocked_rows(&self) -> usize {
        self.fully_blocked_rows
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    /// Forward value as an `f32` tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        let data = self.value(v).iter().map(|x| x.as_f32()).collect();
        Tensor::matrix(r, c, data).expect("node dims match value")
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<S>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value: data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn lift(data: &[f32]) -> Vec<S> {
        data.iter().map(|&x| S::from_f32(x)).collect()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), Self::lift(t.data()), Op::Leaf, false)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: &[f32]) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::shape("constant data length"));
        }
        Ok(self.push(rows, cols, Self::lift(data), Op::Leaf, false))
    }

    /// Differentiable leaf not backed by a parameter set (used for input gradients).
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), Self::lift(t.data()), Op::Leaf, true)
    }

    /// Leaf holding a copy of a stored parameter. Frozen parameters never
    /// receive a gradient buffer. Repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let t = params.get(id);
        let v = self.push(
            t.rows(),
            t.cols(),
            Self::lift(t.data()),
            Op::Leaf,
            params.is_trainable(id),
        );
        self.param_leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents {k} vs {k2} ({ar}x{ac}{} · {br}x{bc}{})",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![S::zero(); m * n];
        gemm(m, k, n, self.value(a), ta, self.value(b), tb, &mut out, false);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::MatMul { a, b, ta, tb, k }, ng))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    fn row_dims(&self, a: Var, row: Var, what: &str) -> Result<()> {
        let (_, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::shape(format!(
                "{what}: row {:?} vs cols {c}",
                self.dims(row)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let (r, c) = self.dims(a);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let (r, c) = self.dims(a);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_dims(a, row, "add_row")?;
        let (r, c) = self.dims(a);
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks_exact(c.max(1))
            .flat_map(|x| x.iter().zip(rv).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(r, c, out, Op::AddRow(a, row), ng))
    }

    /// Multiplies every row of `a` elementwise by a `1 × cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_dims(a, row, "mul_row")?;
        let (r, c) = self.dims(a);
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks_exact(c.max(1))
            .flat_map(|x| x.iter().zip(rv).map(|(&x, &y)| x * y))
            .collect();
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(r, c, out, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let s = S::from_f32(s);
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let s = S::from_f32(s);
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x + s).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::AddScalar(a), ng)
    }

    /// Row softmax of `logits + mask` over unblocked entries only. Blocked
    /// outputs are exactly zero; fully blocked rows become zeros and are
    /// counted in [`Graph::fully_blocked_rows`].
    pub fn softmax_masked(&mut self, logits: Var, mask: &Tensor) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if (mask.rows(), mask.cols()) != (r, c) {
            return Err(Error::shape(format!(
                "softmax mask {}x{} vs logits {r}x{c}",
                mask.rows(),
                mask.cols()
            )));
        }
        let mut out = vec![S::zero(); r * c];
        let mask = Self::lift(mask.data());
        let fb = kernels::softmax_masked_rows(self.value(logits), &mask, c, &mut out);
        if fb > 0 {
            log::warn!("softmax_masked: {fb} fully blocked row(s) written as zeros");
        }
        self.fully_blocked_rows += fb;
        let ng = self.needs(logits);
        Ok(self.push(r, c, out, Op::SoftmaxMasked(logits), ng))
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.row_dims(x, scale, "layer_norm scale")?;
        self.row_dims(x, shift, "layer_norm shift")?;
        let (r, c) = self.dims(x);
        let mut out = vec![S::zero(); r * c];
        let stats = kernels::layer_norm_rows(
            self.value(x),
            c,
            self.value(scale),
            self.value(shift),
            &mut out,
        );
        let ng = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(r, c, out, Op::LayerNorm { x, scale, shift, stats }, ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| kernels::silu(x)).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::Silu(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::Gelu(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(Error::shape(format!("slice_cols {start}+{len} > {c}")));
        }
        let out = self
            .value(a)
            .chunks_exact(c.max(1))
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let ng = self.needs(a);
        Ok(self.push(r, len, out, Op::SliceCols { a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(Error::shape("concat_cols row mismatch"));
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("gather row {bad} of {r}")));
        }
        let v = self.value(a);
        let out = idx
            .iter()
            .flat_map(|&i| v[i * c..(i + 1) * c].iter().copied())
            .collect();
        let ng = self.needs(a);
        Ok(self.push(idx.len(), c, out, Op::GatherRows { a, idx: idx.to_vec() }, ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.dims(p).1).unwrap_or(0);
        if parts.iter().any(|&p| self.dims(p).1 != cols) {
            return Err(Error::shape("concat_rows column mismatch"));
        }
        let rows = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Copy of `base` with `delta` row `z` added into row `idx[z]`. Rows not
    /// listed in `idx` are copied untouched.
    pub fn scatter_add_rows(&mut self, base: Var, delta: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(base);
        if self.dims(delta) != (idx.len(), c) {
            return Err(Error::shape("scatter_add_rows delta dims"));
        }
        if idx.iter().any(|&i| i >= r) {
            return Err(Error::shape("scatter_add_rows index out of range"));
        }
        let mut out = self.value(base).to_vec();
        let dv = self.value(delta);
        for (z, &i) in idx.iter().enumerate() {
            for (o, &d) in out[i * c..(i + 1) * c].iter_mut().zip(&dv[z * c..(z + 1) * c]) {
                *o += d;
            }
        }
        let ng = self.needs(base) || self.needs(delta);
        Ok(self.push(
            r,
            c,
            out,
            Op::ScatterAddRows {
                base,
                delta,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: &[f32]) -> Result<Var> {
        let target = Self::lift(target);
        let v = self.value(a);
        if v.len() != target.len() {
            return Err(Error::shape("mse target length"));
        }
        let n = S::from(v.len().max(1)).unwrap();
        let s = v.iter().zip(&target).map(|(&x, &t)| (x - t) * (x - t)).sum::<S>() / n;
        let ng = self.needs(a);
        Ok(self.push(
            1,
            1,
            vec![s],
            Op::Mse { a, target },
            ng,
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, Var(i), &g, &mut grads);
        }
        let params = self
            .param_leaves
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect::<Vec<_>>();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn backprop_node(&self, node: &Node<S>, out: Var, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, k } => {
                let (m, n) = (rows, cols);
                if self.needs(a) {
                    let buf = slot(grads, a, m * k);
                    if ta {
                        gemm(k, n, m, self.value(b), tb, g, true, buf, true);
                    } else {
                        gemm(m, n, k, g, false, self.value(b), !tb, buf, true);
                    }
                }
                if self.needs(b) {
                    let buf = slot(grads, b, k * n);
                    if tb {
                        gemm(n, m, k, g, true, self.value(a), ta, buf, true);
                    } else {
                        gemm(k, m, n, self.value(a), !ta, g, false, buf, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.value(b);
                    let buf = slot(grads, a, g.len());
                    buf.iter_mut().zip(g).zip(bv).for_each(|((o, &g), &y)| *o += g * y);
                }
                if self.needs(b) {
                    let av = self.value(a);
                    let buf = slot(grads, b, g.len());
                    buf.iter_mut().zip(g).zip(av).for_each(|((o, &g), &x)| *o += g * x);
                }
            }
            &Op::AddRow(a, row) => {
                if self.needs(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if self.needs(row) {
                    let buf = slot(grads, row, cols);
                    for gr in g.chunks_exact(cols) {
                        add_into(buf, gr);
                    }
                }
            }
            &Op::MulRow(a, row) => {
                let rv = self.value(row);
                if self.needs(a) {
                    let buf = slot(grads, a, g.len());
                    for (br, gr) in buf.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                        br.iter_mut().zip(gr).zip(rv).for_each(|((o, &g), &y)| *o += g * y);
                    }
                }
                if self.needs(row) {
                    let av = self.value(a);
                    let buf = slot(grads, row, cols);
                    for (ar, gr) in av.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        buf.iter_mut().zip(gr).zip(ar).for_each(|((o, &g), &x)| *o += g * x);
                    }
                }
            }
            &Op::Scale(a, s) => {
                if self.needs(a) {
                    let buf = slot(grads, a, g.len());
                    buf.iter_mut().zip(g).for_each(|(o, &g)| *o += g * s);
                }
            }
            &Op::AddScalar(a) => {
                if self.needs(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
            }
            &Op::SoftmaxMasked(a) => {
                if self.needs(a) {
                    let y = self.value(out);
                    let buf = slot(grads, a, g.len());
                    for ((br, yr), gr) in buf
                        .chunks_exact_mut(cols)
                        .zip(y.chunks_exact(cols))
                        .zip(g.chunks_exact(cols))
                    {
                        let dot: S = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for ((o, &y), &g) in br.iter_mut().zip(yr).zip(gr) {
                            if y != S::zero() {
                                *o += y * (g - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                stats,
            } => {
                let (x, scale, shift) = (*x, *scale, *shift);
                let xv = self.value(x);
                let sv = self.value(scale);
                let n = S::from(cols).unwrap();
                if self.needs(scale) || self.needs(shift) {
                    let mut dscale = vec![S::zero(); cols];
                    let mut dshift = vec![S::zero(); cols];
                    for ((xr, gr), &(mean, rstd)) in
                        xv.chunks_exact(cols).zip(g.chunks_exact(cols)).zip(stats)
                    {
                        for j in 0..cols {
                            dscale[j] += gr[j] * (xr[j] - mean) * rstd;
                            dshift[j] += gr[j];
                        }
                    }
                    if self.needs(scale) {
                        add_into(slot(grads, scale, cols), &dscale);
                    }
                    if self.needs(shift) {
                        add_into(slot(grads, shift, cols), &dshift);
                    }
                }
                if self.needs(x) {
                    let buf = slot(grads, x, g.len());
                    let mut dxhat = vec![S::zero(); cols];
                    for ((br, (xr, gr)), &(mean, rstd)) in buf
                        .chunks_exact_mut(cols)
                        .zip(xv.chunks_exact(cols).zip(g.chunks_exact(cols)))
                        .zip(stats)
                    {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..cols {
                            dxhat[j] = gr[j] * sv[j];
                            let xhat = (xr[j] - mean) * rstd;
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat;
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in 0..cols {
                            let xhat = (xr[j] - mean) * rstd;
                            br[j] += rstd * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                }
            }
            &Op::Silu(a) => {
                if self.needs(a) {
                    let av = self.value(a);
                    let buf = slot(grads, a, g.len());
                    buf.iter_mut()
                        .zip(g)
                        .zip(av)
                        .for_each(|((o, &g), &x)| *o += g * kernels::silu_grad(x));
                }
            }
            &Op::Gelu(a) => {
                if self.needs(a) {
                    let av = self.value(a);
                    let buf = slot(grads, a, g.len());
                    buf.iter_mut()
                        .zip(g)
                        .zip(av)
                        .for_each(|((o, &g), &x)| *o += g * kernels::gelu_grad(x));
                }
            }
            &Op::SliceCols { a, start } => {
                if self.needs(a) {
                    let ac = self.dims(a).1;
                    let buf = slot(grads, a, rows * ac);
                    for (br, gr) in buf.chunks_exact_mut(ac).zip(g.chunks_exact(cols)) {
                        add_into(&mut br[start..start + cols], gr);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if self.needs(p) {
                        let buf = slot(grads, p, rows * pc);
                        for (br, gr) in buf.chunks_exact_mut(pc).zip(g.chunks_exact(cols)) {
                            add_into(br, &gr[off..off + pc]);
                        }
                    }
                    off += pc;
                }
            }
            Op::GatherRows { a, idx } => {
                let a = *a;
                if self.needs(a) {
                    let ar = self.dims(a).0;
                    let buf = slot(grads, a, ar * cols);
                    for (z, &i) in idx.iter().enumerate() {
                        add_into(&mut buf[i * cols..(i + 1) * cols], &g[z * cols..(z + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.dims(p).0 * cols;
                    if self.needs(p) {
                        add_into(slot(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ScatterAddRows { base, delta, idx } => {
                let (base, delta) = (*base, *delta);
                if self.needs(base) {
                    add_into(slot(grads, base, g.len()), g);
                }
                if self.needs(delta) {
                    let buf = slot(grads, delta, idx.len() * cols);
                    for (z, &i) in idx.iter().enumerate() {
                        add_into(&mut buf[z * cols..(z + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                }
            }
            &Op::Sum(a) => {
                if self.needs(a) {
                    let (r, c) = self.dims(a);
                    let buf = slot(grads, a, r * c);
                    buf.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mse { a, target } => {
                let a = *a;
                if self.needs(a) {
                    let av = self.value(a);
                    let scale = S::from(2.0).unwrap() * g[0] / S::from(av.len().max(1)).unwrap();
                    let buf = slot(grads, a, av.len());
                    buf.iter_mut()
                        .zip(av)
                        .zip(target)
                        .for_each(|((o, &x), &t)| *o += scale * (x - t));
                }
            }
        }
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Gradients produced by one reverse pass. Only differentiable leaves keep
/// their buffers.
pub struct Gradients<S: Scalar = f32> {
    by_node: Vec<Option<Vec<S>>>,
    params: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[S]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }

    /// Parameter gradients in ascending parameter order.
    pub fn params(&self) -> Vec<(ParamId, &[S])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Adds every parameter gradient into the parameter's own grad buffer.
    pub fn accumulate_into(&self, params: &mut ParamSet) -> Result<()> {
        for (id, g) in self.params() {
            let g: Vec<f32> = g.iter().map(|x| x.as_f32()).collect();
            params.get_mut(id).accumulate_grad(&g)?;
        }
        Ok(())
    }
}
