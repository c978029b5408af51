//! Dynamic differentiation tape.
//!
//! A [`Graph`] records every primitive applied during one forward pass and
//! replays them in reverse on [`Graph::backward`], accumulating gradients
//! into the [`ParameterStore`] leaves the pass was built from. The tape is
//! rebuilt from scratch each pass and consumed by `backward`.
//!
//! Forward outputs are checked for non-finite values after every primitive;
//! NaN/Inf is an error state, never silently propagated.

use super::store::ParameterStore;
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddRow {
        x: usize,
        v: usize,
    },
    MulRow {
        x: usize,
        v: usize,
    },
    AddCol {
        x: usize,
        v: usize,
    },
    MulCol {
        x: usize,
        v: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    Relu {
        x: usize,
    },
    Sin {
        x: usize,
    },
    Cos {
        x: usize,
    },
    SoftmaxLast {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxAxis {
        x: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumAxis {
        x: usize,
        axis: usize,
    },
    SumAll {
        x: usize,
    },
    ConcatLast {
        parts: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    NarrowLast {
        x: usize,
        start: usize,
    },
    Dropout {
        x: usize,
        mult: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
    requires_grad: bool,
}

enum Mode {
    Eval,
    Train { rng: Rng },
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    param_cache: std::collections::HashMap<String, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            mode: Mode::Eval,
            param_cache: Default::default(),
        }
    }

    /// Training-mode graph: dropout samples masks from `rng`.
    pub fn new_train(rng: Rng) -> Self {
        Graph {
            nodes: Vec::new(),
            mode: Mode::Train { rng },
            param_cache: Default::default(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar read; panics if the node is not a single element.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(
            t.numel(),
            1,
            "scalar_value on tensor of shape {:?}",
            t.shape()
        );
        t.data()[0]
    }

    // ── node construction ───────────────────────────────────────────

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let numel: usize = shape.iter().product();
        debug_assert_eq!(numel, data.len());
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                grad: None,
                requires_grad,
            },
            op,
            param: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Inserts a tensor as a leaf. Gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            requires_grad,
            value: t,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Loads a named parameter from the store onto the tape. `backward`
    /// accumulates the leaf's gradient back into the store under this name.
    /// Repeated loads of the same name within one graph share a single leaf.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_cache.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        let requires = t.requires_grad;
        let v = self.leaf(t.clone(), requires);
        self.nodes[v.0].param = Some(name.to_string());
        self.param_cache.insert(name.to_string(), v);
        Ok(v)
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data_of(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape_of(a).to_vec(),
            rhs: self.shape_of(b).to_vec(),
        }
    }

    // ── primitives ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        super::matmul_nn(self.data_of(a), self.data_of(b), m, k, n, &mut out);
        let req = self.requires(a) || self.requires(b);
        self.push(
            "matmul",
            vec![m, n],
            out,
            Op::MatMul { a: a.0, b: b.0 },
            req,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape_of(x);
        if s.len() != 2 {
            return Err(Error::invalid(format!(
                "transpose: expected 2-d tensor, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.data_of(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let req = self.requires(x);
        self.push("transpose", vec![c, r], out, Op::Transpose { x: x.0 }, req)
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(self.mismatch(op_name, a, b));
        }
        let out: Vec<f64> = self
            .data_of(a)
            .iter()
            .zip(self.data_of(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let req = self.requires(a) || self.requires(b);
        let shape = self.shape_of(a).to_vec();
        self.push(op_name, shape, out, op, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    fn row_broadcast(
        &mut self,
        op_name: &'static str,
        x: Var,
        v: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].value.rows_cols();
        let sv = self.shape_of(v);
        if sv.len() != 1 || sv[0] != cols {
            return Err(self.mismatch(op_name, x, v));
        }
        let xd = self.data_of(x);
        let vd = self.data_of(v);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] = f(xd[r * cols + j], vd[j]);
            }
        }
        let req = self.requires(x) || self.requires(v);
        let shape = self.shape_of(x).to_vec();
        self.push(op_name, shape, out, op, req)
    }

    /// `out[.., j] = x[.., j] + v[j]` — broadcast a vector over the last axis.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, v, |a, b| a + b, Op::AddRow { x: x.0, v: v.0 })
    }

    /// `out[.., j] = x[.., j] * v[j]`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, v, |a, b| a * b, Op::MulRow { x: x.0, v: v.0 })
    }

    fn col_broadcast(
        &mut self,
        op_name: &'static str,
        x: Var,
        v: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let s = self.shape_of(x);
        if s.len() != 2 {
            return Err(Error::invalid(format!(
                "{op_name}: expected 2-d tensor, got {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let sv = self.shape_of(v);
        if sv.len() != 1 || sv[0] != rows {
            return Err(self.mismatch(op_name, x, v));
        }
        let xd = self.data_of(x);
        let vd = self.data_of(v);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] = f(xd[r * cols + j], vd[r]);
            }
        }
        let req = self.requires(x) || self.requires(v);
        self.push(op_name, vec![rows, cols], out, op, req)
    }

    /// `out[i, j] = x[i, j] + v[i]` — broadcast a vector down the columns.
    pub fn add_col(&mut self, x: Var, v: Var) -> Result<Var> {
        self.col_broadcast("add_col", x, v, |a, b| a + b, Op::AddCol { x: x.0, v: v.0 })
    }

    /// `out[i, j] = x[i, j] * v[i]`.
    pub fn mul_col(&mut self, x: Var, v: Var) -> Result<Var> {
        self.col_broadcast("mul_col", x, v, |a, b| a * b, Op::MulCol { x: x.0, v: v.0 })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.data_of(x).iter().map(|&v| v * c).collect();
        let req = self.requires(x);
        let shape = self.shape_of(x).to_vec();
        self.push("scale", shape, out, Op::Scale { x: x.0, c }, req)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.data_of(x).iter().map(|&v| v.max(0.0)).collect();
        let req = self.requires(x);
        let shape = self.shape_of(x).to_vec();
        self.push("relu", shape, out, Op::Relu { x: x.0 }, req)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.data_of(x).iter().map(|&v| v.sin()).collect();
        let req = self.requires(x);
        let shape = self.shape_of(x).to_vec();
        self.push("sin", shape, out, Op::Sin { x: x.0 }, req)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.data_of(x).iter().map(|&v| v.cos()).collect();
        let req = self.requires(x);
        let shape = self.shape_of(x).to_vec();
        self.push("cos", shape, out, Op::Cos { x: x.0 }, req)
    }

    /// Numerically-stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].value.rows_cols();
        let xd = self.data_of(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (oj, &xj) in o.iter_mut().zip(row) {
                *oj = (xj - m).exp();
                z += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= z;
            }
        }
        let req = self.requires(x);
        let shape = self.shape_of(x).to_vec();
        self.push("softmax", shape, out, Op::SoftmaxLast { x: x.0 }, req)
    }

    /// Layer normalization over the last axis with learned affine:
    /// `y = (x - mean) / sqrt(var + eps) * gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].value.rows_cols();
        for &p in &[gamma, beta] {
            let sp = self.shape_of(p);
            if sp.len() != 1 || sp[0] != cols {
                return Err(self.mismatch("layer_norm", x, p));
            }
        }
        let xd = self.data_of(x);
        let gd = self.data_of(gamma);
        let bd = self.data_of(beta);
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * gd[j] + bd[j];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let shape = self.shape_of(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            req,
        )
    }

    /// Max-reduction over `axis`. Returns the reduced tensor and the argmax
    /// index along that axis for every output element (ties break to the
    /// lowest index). The argmax routes the gradient in backward.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let s = self.shape_of(x).to_vec();
        if axis >= s.len() {
            return Err(Error::invalid(format!(
                "max_axis: axis {axis} out of range for {s:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let xd = self.data_of(x);
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut best_l = 0;
                for l in 0..len {
                    let v = xd[(o * len + l) * inner + i];
                    if v > best {
                        best = v;
                        best_l = l;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = best_l;
            }
        }
        let mut new_shape: Vec<usize> = s[..axis].to_vec();
        new_shape.extend_from_slice(&s[axis + 1..]);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let req = self.requires(x);
        let v = self.push(
            "max_axis",
            new_shape,
            out,
            Op::MaxAxis {
                x: x.0,
                axis,
                argmax: arg.clone(),
            },
            req,
        )?;
        Ok((v, arg))
    }

    /// Min-reduction, composed as `-max(-x)` so the gradient routing comes
    /// for free. Ties break to the lowest index.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let n = self.neg(x)?;
        let (mx, arg) = self.max_axis(n, axis)?;
        Ok((self.neg(mx)?, arg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        if axis >= s.len() {
            return Err(Error::invalid(format!(
                "sum_axis: axis {axis} out of range for {s:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let xd = self.data_of(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * len + l) * inner + i];
                }
            }
        }
        let mut new_shape: Vec<usize> = s[..axis].to_vec();
        new_shape.extend_from_slice(&s[axis + 1..]);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let req = self.requires(x);
        self.push(
            "sum_axis",
            new_shape,
            out,
            Op::SumAxis { x: x.0, axis },
            req,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.data_of(x).iter().sum();
        let req = self.requires(x);
        self.push("sum_all", vec![1], vec![total], Op::SumAll { x: x.0 }, req)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Concatenate 2-d tensors along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_last: no inputs"));
        }
        let rows = self.shape_of(parts[0]).first().copied().unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape_of(p);
            if s.len() != 2 || s[0] != rows {
                return Err(self.mismatch("concat_last", parts[0], p));
            }
            cols += s[1];
        }
        let mut out = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let pc = self.shape_of(p)[1];
            let pd = self.data_of(p);
            for r in 0..rows {
                out[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&pd[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(
            "concat_last",
            vec![rows, cols],
            out,
            Op::ConcatLast {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            req,
        )
    }

    /// Concatenate 2-d tensors along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows: no inputs"));
        }
        let cols = self.shape_of(parts[0]).last().copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let s = self.shape_of(p);
            if s.len() != 2 || s[1] != cols {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.data_of(p));
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(
            "concat_rows",
            vec![rows, cols],
            out,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            req,
        )
    }

    /// Select rows (leading-axis slices) by index; duplicates allowed.
    /// Backward scatter-adds into the source rows.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        if s.is_empty() || idx.is_empty() {
            return Err(Error::invalid("gather_rows: empty input or index list"));
        }
        let row = s[1..].iter().product::<usize>().max(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of range for leading dim {}",
                s[0]
            )));
        }
        let xd = self.data_of(x);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&xd[i * row..(i + 1) * row]);
        }
        let mut new_shape = vec![idx.len()];
        new_shape.extend_from_slice(&s[1..]);
        let req = self.requires(x);
        self.push(
            "gather_rows",
            new_shape,
            out,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            req,
        )
    }

    pub fn reshape(&mut self, x: Var, new_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x.0].value.numel() || new_shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape_of(x).to_vec(),
                rhs: new_shape,
            });
        }
        let out = self.data_of(x).to_vec();
        let req = self.requires(x);
        self.push("reshape", new_shape, out, Op::Reshape { x: x.0 }, req)
    }

    /// Columns `[start, start+len)` of a 2-d tensor.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape_of(x);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::invalid(format!(
                "narrow_last: range {start}..{} invalid for shape {s:?}",
                start + len
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let xd = self.data_of(x);
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        let req = self.requires(x);
        self.push(
            "narrow_last",
            vec![rows, len],
            out,
            Op::NarrowLast { x: x.0, start },
            req,
        )
    }

    /// Inverted dropout with rate `p`: identity in evaluation mode; in
    /// training mode each element is zeroed with probability `p` and the
    /// survivors are scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout: rate {p} outside [0, 1)")));
        }
        match &mut self.mode {
            Mode::Eval => Ok(x),
            Mode::Train { .. } if p == 0.0 => Ok(x),
            Mode::Train { rng } => {
                let keep = 1.0 - p;
                let n = self.nodes[x.0].value.numel();
                let mut mult = vec![0.0; n];
                for m in mult.iter_mut() {
                    if rng.uniform() >= p {
                        *m = 1.0 / keep;
                    }
                }
                let out: Vec<f64> = self
                    .data_of(x)
                    .iter()
                    .zip(&mult)
                    .map(|(&v, &m)| v * m)
                    .collect();
                let req = self.requires(x);
                let shape = self.shape_of(x).to_vec();
                self.push("dropout", shape, out, Op::Dropout { x: x.0, mult }, req)
            }
        }
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every parameter leaf
    /// reachable from `loss` are accumulated into `store`. Consumes the
    /// graph: the tape does not outlive its backward pass.
    pub fn backward(self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        for (name, grad) in self.backward_grads(loss)? {
            store.accumulate_grad(&name, &grad)?;
        }
        Ok(())
    }

    /// As [`Graph::backward`], but returns the parameter gradients as a
    /// name-sorted list instead of writing them into a store. Lets callers
    /// run independent tapes in parallel and merge in a fixed order.
    pub fn backward_grads(mut self, loss: Var) -> Result<Vec<(String, Vec<f64>)>> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward: empty tape"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut collected: std::collections::BTreeMap<String, Vec<f64>> = Default::default();

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                // A parameter leaf the loss never reached still gets its
                // (zero) gradient accumulated, so optimizer steps see a
                // complete gradient set.
                None => match (&self.nodes[i].op, &self.nodes[i].param) {
                    (Op::Leaf, Some(_)) => vec![0.0; self.nodes[i].value.numel()],
                    _ => continue,
                },
            };
            // Split borrows: the node being processed vs. the gradient table.
            let (op, param) = (&self.nodes[i].op, &self.nodes[i].param);

            macro_rules! acc {
                ($src:expr, $f:expr) => {{
                    let src: usize = $src;
                    if self.nodes[src].requires_grad {
                        let numel = self.nodes[src].value.numel();
                        let slot = grads[src].get_or_insert_with(|| vec![0.0; numel]);
                        #[allow(clippy::redundant_closure_call)]
                        ($f)(slot.as_mut_slice());
                    }
                }};
            }

            match op {
                Op::Leaf => {
                    if let Some(name) = param {
                        let slot = collected
                            .entry(name.clone())
                            .or_insert_with(|| vec![0.0; g.len()]);
                        for (d, &gv) in slot.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let sa = self.nodes[*a].value.shape();
                    let sb = self.nodes[*b].value.shape();
                    let (m, k, nn) = (sa[0], sa[1], sb[1]);
                    let ad = self.nodes[*a].value.data();
                    let bd = self.nodes[*b].value.data();
                    acc!(*a, |da: &mut [f64]| super::matmul_nt(&g, bd, m, nn, k, da));
                    acc!(*b, |db: &mut [f64]| super::matmul_tn(ad, &g, k, m, nn, db));
                }
                Op::Transpose { x } => {
                    let s = self.nodes[i].value.shape();
                    let (r, c) = (s[0], s[1]); // shape of the OUTPUT (transposed)
                    acc!(*x, |dx: &mut [f64]| {
                        for a in 0..r {
                            for b in 0..c {
                                dx[b * r + a] += g[a * c + b];
                            }
                        }
                    });
                }
                Op::Add { a, b } => {
                    acc!(*a, |da: &mut [f64]| add_assign(da, &g));
                    acc!(*b, |db: &mut [f64]| add_assign(db, &g));
                }
                Op::Sub { a, b } => {
                    acc!(*a, |da: &mut [f64]| add_assign(da, &g));
                    acc!(*b, |db: &mut [f64]| {
                        for (d, &gv) in db.iter_mut().zip(&g) {
                            *d -= gv;
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let ad = self.nodes[*a].value.data();
                    let bd = self.nodes[*b].value.data();
                    acc!(*a, |da: &mut [f64]| {
                        for ((d, &gv), &bv) in da.iter_mut().zip(&g).zip(bd) {
                            *d += gv * bv;
                        }
                    });
                    acc!(*b, |db: &mut [f64]| {
                        for ((d, &gv), &av) in db.iter_mut().zip(&g).zip(ad) {
                            *d += gv * av;
                        }
                    });
                }
                Op::AddRow { x, v } => {
                    let cols = *self.nodes[i].value.shape().last().unwrap();
                    acc!(*x, |dx: &mut [f64]| add_assign(dx, &g));
                    acc!(*v, |dv: &mut [f64]| {
                        for (r, chunk) in g.chunks(cols).enumerate() {
                            let _ = r;
                            for (d, &gv) in dv.iter_mut().zip(chunk) {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::MulRow { x, v } => {
                    let cols = *self.nodes[i].value.shape().last().unwrap();
                    let xd = self.nodes[*x].value.data();
                    let vd = self.nodes[*v].value.data();
                    acc!(*x, |dx: &mut [f64]| {
                        for (row, (dchunk, gchunk)) in
                            dx.chunks_mut(cols).zip(g.chunks(cols)).enumerate()
                        {
                            let _ = row;
                            for ((d, &gv), &vv) in dchunk.iter_mut().zip(gchunk).zip(vd) {
                                *d += gv * vv;
                            }
                        }
                    });
                    acc!(*v, |dv: &mut [f64]| {
                        for (gchunk, xchunk) in g.chunks(cols).zip(xd.chunks(cols)) {
                            for ((d, &gv), &xv) in dv.iter_mut().zip(gchunk).zip(xchunk) {
                                *d += gv * xv;
                            }
                        }
                    });
                }
                Op::AddCol { x, v } => {
                    let cols = *self.nodes[i].value.shape().last().unwrap();
                    acc!(*x, |dx: &mut [f64]| add_assign(dx, &g));
                    acc!(*v, |dv: &mut [f64]| {
                        for (r, chunk) in g.chunks(cols).enumerate() {
                            dv[r] += chunk.iter().sum::<f64>();
                        }
                    });
                }
                Op::MulCol { x, v } => {
                    let cols = *self.nodes[i].value.shape().last().unwrap();
                    let xd = self.nodes[*x].value.data();
                    let vd = self.nodes[*v].value.data();
                    acc!(*x, |dx: &mut [f64]| {
                        for (r, (dchunk, gchunk)) in
                            dx.chunks_mut(cols).zip(g.chunks(cols)).enumerate()
                        {
                            for (d, &gv) in dchunk.iter_mut().zip(gchunk) {
                                *d += gv * vd[r];
                            }
                        }
                    });
                    acc!(*v, |dv: &mut [f64]| {
                        for (r, (gchunk, xchunk)) in g.chunks(cols).zip(xd.chunks(cols)).enumerate()
                        {
                            dv[r] += gchunk
                                .iter()
                                .zip(xchunk)
                                .map(|(&gv, &xv)| gv * xv)
                                .sum::<f64>();
                        }
                    });
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    acc!(*x, |dx: &mut [f64]| {
                        for (d, &gv) in dx.iter_mut().zip(&g) {
                            *d += gv * c;
                        }
                    });
                }
                Op::Relu { x } => {
                    let xd = self.nodes[*x].value.data();
                    acc!(*x, |dx: &mut [f64]| {
                        for ((d, &gv), &xv) in dx.iter_mut().zip(&g).zip(xd) {
                            if xv > 0.0 {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Sin { x } => {
                    let xd = self.nodes[*x].value.data();
                    acc!(*x, |dx: &mut [f64]| {
                        for ((d, &gv), &xv) in dx.iter_mut().zip(&g).zip(xd) {
                            *d += gv * xv.cos();
                        }
                    });
                }
                Op::Cos { x } => {
                    let xd = self.nodes[*x].value.data();
                    acc!(*x, |dx: &mut [f64]| {
                        for ((d, &gv), &xv) in dx.iter_mut().zip(&g).zip(xd) {
                            *d -= gv * xv.sin();
                        }
                    });
                }
                Op::SoftmaxLast { x } => {
                    let cols = *self.nodes[i].value.shape().last().unwrap();
                    let yd = self.nodes[i].value.data();
                    acc!(*x, |dx: &mut [f64]| {
                        for ((dchunk, gchunk), ychunk) in
                            dx.chunks_mut(cols).zip(g.chunks(cols)).zip(yd.chunks(cols))
                        {
                            let dot: f64 = gchunk.iter().zip(ychunk).map(|(&a, &b)| a * b).sum();
                            for ((d, &gv), &yv) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                                *d += yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let cols = *self.nodes[i].value.shape().last().unwrap();
                    let gd = self.nodes[*gamma].value.data();
                    acc!(*beta, |db: &mut [f64]| {
                        for gchunk in g.chunks(cols) {
                            for (d, &gv) in db.iter_mut().zip(gchunk) {
                                *d += gv;
                            }
                        }
                    });
                    acc!(*gamma, |dg: &mut [f64]| {
                        for (gchunk, hchunk) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for ((d, &gv), &hv) in dg.iter_mut().zip(gchunk).zip(hchunk) {
                                *d += gv * hv;
                            }
                        }
                    });
                    acc!(*x, |dx: &mut [f64]| {
                        for (r, ((dchunk, gchunk), hchunk)) in dx
                            .chunks_mut(cols)
                            .zip(g.chunks(cols))
                            .zip(xhat.chunks(cols))
                            .enumerate()
                        {
                            let is = inv_std[r];
                            let mut mh = 0.0;
                            let mut mhx = 0.0;
                            for ((&gv, &hv), &gam) in gchunk.iter().zip(hchunk).zip(gd) {
                                let h = gv * gam;
                                mh += h;
                                mhx += h * hv;
                            }
                            mh /= cols as f64;
                            mhx /= cols as f64;
                            for ((d, (&gv, &gam)), &hv) in
                                dchunk.iter_mut().zip(gchunk.iter().zip(gd)).zip(hchunk)
                            {
                                *d += is * (gv * gam - mh - hv * mhx);
                            }
                        }
                    });
                }
                Op::MaxAxis { x, axis, argmax } => {
                    let s = self.nodes[*x].value.shape().to_vec();
                    let (_, len, inner) = axis_split(&s, *axis);
                    acc!(*x, |dx: &mut [f64]| {
                        for (out_flat, &l) in argmax.iter().enumerate() {
                            let o = out_flat / inner;
                            let ii = out_flat % inner;
                            dx[(o * len + l) * inner + ii] += g[out_flat];
                        }
                    });
                }
                Op::SumAxis { x, axis } => {
                    let s = self.nodes[*x].value.shape().to_vec();
                    let (outer, len, inner) = axis_split(&s, *axis);
                    acc!(*x, |dx: &mut [f64]| {
                        for o in 0..outer {
                            for l in 0..len {
                                for ii in 0..inner {
                                    dx[(o * len + l) * inner + ii] += g[o * inner + ii];
                                }
                            }
                        }
                    });
                }
                Op::SumAll { x } => {
                    let gv = g[0];
                    acc!(*x, |dx: &mut [f64]| {
                        for d in dx.iter_mut() {
                            *d += gv;
                        }
                    });
                }
                Op::ConcatLast { parts } => {
                    let cols = *self.nodes[i].value.shape().last().unwrap();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = *self.nodes[p].value.shape().last().unwrap();
                        acc!(p, |dp: &mut [f64]| {
                            for (r, dchunk) in dp.chunks_mut(pc).enumerate() {
                                let src = &g[r * cols + offset..r * cols + offset + pc];
                                for (d, &gv) in dchunk.iter_mut().zip(src) {
                                    *d += gv;
                                }
                            }
                        });
                        offset += pc;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.numel();
                        acc!(p, |dp: &mut [f64]| {
                            add_assign(dp, &g[offset..offset + len]);
                        });
                        offset += len;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let row = self.nodes[i].value.numel() / idx.len();
                    acc!(*x, |dx: &mut [f64]| {
                        for (out_r, &src_r) in idx.iter().enumerate() {
                            let dst = &mut dx[src_r * row..(src_r + 1) * row];
                            let src = &g[out_r * row..(out_r + 1) * row];
                            for (d, &gv) in dst.iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Reshape { x } => {
                    acc!(*x, |dx: &mut [f64]| add_assign(dx, &g));
                }
                Op::NarrowLast { x, start } => {
                    let len = *self.nodes[i].value.shape().last().unwrap();
                    let cols = *self.nodes[*x].value.shape().last().unwrap();
                    let start = *start;
                    acc!(*x, |dx: &mut [f64]| {
                        for (r, gchunk) in g.chunks(len).enumerate() {
                            let dst = &mut dx[r * cols + start..r * cols + start + len];
                            for (d, &gv) in dst.iter_mut().zip(gchunk) {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Dropout { x, mult } => {
                    acc!(*x, |dx: &mut [f64]| {
                        for ((d, &gv), &m) in dx.iter_mut().zip(&g).zip(mult) {
                            *d += gv * m;
                        }
                    });
                }
            }
        }

        // Tape cleared: the graph was consumed by value.
        self.nodes.clear();
        Ok(collected.into_iter().collect())
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Splits a shape at `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
