//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly and
//! caches its forward value on the node, so a node can only reference nodes
//! created before it and the tape order is already a topological order.
//! [`Graph::backward`] walks the tape in reverse.
//!
//! Conventions:
//! - `relu'(0) = 0` and `d|x|/dx` at `0` is `0`.
//! - `layernorm` normalizes over the last dimension with `1e-5` added to the
//!   variance, and has no affine parameters.
//! - The only broadcast is a length-`n` bias added to every row of an
//!   `m x n` matrix.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::params::ParamMap;
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Parameter(String),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `matrix + bias` with the bias repeated over rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm(Var),
    Softmax(Var),
    Mean(Var),
    Sum(Var),
    Reshape(Var),
    SliceRows {
        src: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    /// Mean negative log-likelihood of integer labels under row-wise softmax.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    /// `Σ (a − b)²`.
    SquaredError(Var, Var),
    /// `Σ |a|`.
    L1Norm(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameter name to graph node, as produced by [`Graph::bind`].
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnboundLeaf(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Input, value, false)
    }

    pub fn parameter(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        self.push(Op::Parameter(name.into()), value, true)
    }

    /// Adds every entry of `params` as a parameter leaf.
    pub fn bind(&mut self, params: &ParamMap) -> Result<ParamVars> {
        let mut vars = ParamVars::default();
        for (name, t) in params.iter() {
            let v = self.parameter(name, t.clone())?;
            vars.insert(name, v);
        }
        Ok(vars)
    }

    /// Adds every entry of `params` as a constant leaf.
    pub fn bind_constants(&mut self, params: &ParamMap) -> Result<ParamVars> {
        let mut vars = ParamVars::default();
        for (name, t) in params.iter() {
            let v = self.input(t.clone())?;
            vars.insert(name, v);
        }
        Ok(vars)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), value, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        self.push(Op::Transpose(a), value, rg)
    }

    /// `a · bᵀ`, the usual `x Wᵀ` of a linear layer.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.transpose(b)?;
        self.matmul(a, bt)
    }

    /// Same-shape addition, or a row-broadcast bias add when `b` is a
    /// vector matching the column count of matrix `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        if va.shape() == vb.shape() {
            let value = va.add(vb)?;
            self.push(Op::Add(a, b), value, rg)
        } else {
            let value = va.add_row_vector(vb)?;
            self.push(Op::AddRow(a, b), value, rg)
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(Op::Sub(a, b), value, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, c), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn layernorm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = *x.shape().last().ok_or_else(|| shape_err("layernorm", "scalar input"))?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            let (mean, inv_std) = row_stats(row);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv_std;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Op::LayerNorm(a), out, rg)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_rows()?;
        let rg = self.rg(&[a]);
        self.push(Op::Softmax(a), value, rg)
    }

    /// Mean over all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::scalar(x.sum() / x.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), value, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), value, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(Op::Reshape(a), value, rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(&[a]);
        self.push(Op::SliceRows { src: a, start }, value, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let rg = self.rg(parts);
        self.push(Op::ConcatRows(parts.to_vec()), value, rg)
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (n, c) = z.dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(shape_err("cross_entropy", format!("label {bad} with {c} classes")));
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| log_sum_exp(z.row(i)) - z.row(i)[y])
            .sum();
        let rg = self.rg(&[logits]);
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::scalar(total / n as f64),
            rg,
        )
    }

    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(Op::SquaredError(a, b), Tensor::scalar(d.sq_norm()), rg)
    }

    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().map(|v| v.abs()).sum());
        let rg = self.rg(&[a]);
        self.push(Op::L1Norm(a), value, rg)
    }

    /// Gradients of scalar `root` with respect to every node on the tape.
    /// Entries are `None` for nodes that do not influence `root` through a
    /// parameter.
    pub fn backward(&self, root: Var) -> Result<Vec<Option<Tensor>>> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (child, cg) in self.vjp(idx, &g)? {
                if !self.nodes[child.0].requires_grad {
                    continue;
                }
                match &mut grads[child.0] {
                    Some(acc) => acc.add_assign(&cg)?,
                    slot @ None => *slot = Some(cg),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Gradient of scalar `root` for each named parameter in `wrt`.
    /// A parameter bound but unused by `root` gets a zero gradient.
    pub fn gradient(&self, root: Var, wrt: &[&str]) -> Result<ParamMap> {
        let grads = self.backward(root)?;
        let mut out = ParamMap::new();
        for &name in wrt {
            let mut acc: Option<Tensor> = None;
            for (idx, node) in self.nodes.iter().enumerate() {
                if !matches!(&node.op, Op::Parameter(n) if n == name) {
                    continue;
                }
                let g = grads
                    .get(idx)
                    .and_then(Clone::clone)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match &mut acc {
                    Some(a) => a.add_assign(&g)?,
                    None => acc = Some(g),
                }
            }
            let g = acc.ok_or_else(|| Error::UnboundLeaf(name.to_string()))?;
            out.insert(name, g);
        }
        Ok(out)
    }

    /// Vector-Jacobian products of node `idx` for each of its children.
    fn vjp(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Input | Op::Parameter(_) => Vec::new(),
            Op::MatMul(a, b) => vec![
                (*a, g.matmul(&val(*b).transpose()?)?),
                (*b, val(*a).transpose()?.matmul(g)?),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, b) => vec![(*a, g.clone()), (*b, g.sum_rows()?)],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Relu(a) => vec![(
                *a,
                val(*a).zip_with(g, "relu'", |x, gi| if x > 0.0 { gi } else { 0.0 })?,
            )],
            Op::LayerNorm(a) => {
                let x = val(*a);
                let y = &node.value;
                let n = *x.shape().last().unwrap_or(&1);
                let mut dx = g.clone();
                for ((dx_row, x_row), y_row) in dx
                    .data_mut()
                    .chunks_exact_mut(n)
                    .zip(x.data().chunks_exact(n))
                    .zip(y.data().chunks_exact(n))
                {
                    let (_, inv_std) = row_stats(x_row);
                    let g_mean = dx_row.iter().sum::<f64>() / n as f64;
                    let gy_mean = dx_row.iter().zip(y_row).map(|(gi, yi)| gi * yi).sum::<f64>() / n as f64;
                    for (d, yi) in dx_row.iter_mut().zip(y_row) {
                        *d = inv_std * (*d - g_mean - yi * gy_mean);
                    }
                }
                vec![(*a, dx)]
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let c = *s.shape().last().unwrap_or(&1);
                let mut dx = g.clone();
                for (dx_row, s_row) in dx.data_mut().chunks_exact_mut(c).zip(s.data().chunks_exact(c)) {
                    let dot: f64 = dx_row.iter().zip(s_row).map(|(gi, si)| gi * si).sum();
                    for (d, si) in dx_row.iter_mut().zip(s_row) {
                        *d = si * (*d - dot);
                    }
                }
                vec![(*a, dx)]
            }
            Op::Mean(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(x.shape(), g.item()? / x.numel() as f64))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()?))],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::SliceRows { src, start } => {
                let x = val(*src);
                let (_, c) = x.dims2("slice_rows'")?;
                let mut dx = Tensor::zeros(x.shape());
                dx.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                vec![(*src, dx)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let rows = val(p).shape()[0];
                    out.push((p, g.slice_rows(offset, rows)?));
                    offset += rows;
                }
                out
            }
            Op::CrossEntropy { logits, labels } => {
                let z = val(*logits);
                let n = labels.len() as f64;
                let mut dz = z.softmax_rows()?;
                let c = z.shape()[1];
                let scale = g.item()? / n;
                for (i, &y) in labels.iter().enumerate() {
                    dz.data_mut()[i * c + y] -= 1.0;
                }
                vec![(*logits, dz.scale(scale))]
            }
            Op::SquaredError(a, b) => {
                let gi = g.item()?;
                let d = val(*a).sub(val(*b))?.scale(2.0 * gi);
                let neg = d.scale(-1.0);
                vec![(*a, d), (*b, neg)]
            }
            Op::L1Norm(a) => {
                let gi = g.item()?;
                vec![(*a, val(*a).map(|x| sign(x) * gi))]
            }
        })
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYERNORM_EPS).sqrt())
}

/// Builds an objective on a fresh graph with `params` bound as parameters.
pub fn evaluate<F>(build: F, params: &ParamMap) -> Result<Tensor>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = g.bind(params)?;
    let root = build(&mut g, &vars)?;
    Ok(g.value(root).clone())
}

/// Value and gradient of a scalar objective with respect to `wrt`.
pub fn gradient<F>(build: F, params: &ParamMap, wrt: &[&str]) -> Result<(f64, ParamMap)>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = g.bind(params)?;
    let root = build(&mut g, &vars)?;
    let value = g.value(root).item()?;
    Ok((value, g.gradient(root, wrt)?))
}

/// Largest relative disagreement between the analytic gradient and central
/// finite differences, `|fd − analytic| / max(1, |analytic|)`, over every
/// coordinate of every parameter in `wrt`.
pub fn finite_difference_check<F>(build: F, params: &ParamMap, wrt: &[&str], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps}")));
    }
    let (_, analytic) = gradient(&build, params, wrt)?;
    let mut worst = 0.0_f64;
    let mut probe = params.clone();
    for &name in wrt {
        let grad = analytic.require(name)?.clone();
        for i in 0..grad.numel() {
            let original = params.require(name)?.data()[i];
            let mut at = |x: f64| -> Result<f64> {
                probe.get_mut(name).expect("bound above").data_mut()[i] = x;
                evaluate(&build, &probe)?.item()
            };
            let plus = at(original + eps)?;
            let minus = at(original - eps)?;
            at(original)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            worst = worst.max((numeric - a).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
