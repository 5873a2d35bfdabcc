//! Reverse-mode differentiation over [`DenseMatrix`] values.
//!
//! Every op evaluates eagerly when recorded, so a tape doubles as the
//! inference path: build it, read [`Tape::value`], drop it.

use std::collections::BTreeMap;

use super::matrix::{self, DenseMatrix};
use super::params::ParamStore;
use super::recurrence;
use crate::error::{Error, Result};

/// Lower clamp for probabilities inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    MeanOf(Vec<Var>),
    Row(Var, usize),
    Scan {
        x: Var,
        a: Var,
        b: Var,
        c: Var,
        states: DenseMatrix,
    },
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a named parameter; repeated lookups share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let v = self.push(store.get(name)?.clone(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(matrix::sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = matrix::softmax_rows(self.value(x))?;
        Ok(self.push(value, Op::SoftmaxRows(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&DenseMatrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = DenseMatrix::concat_rows(&mats)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).mean_rows();
        self.push(value, Op::MeanRows(x))
    }

    /// Elementwise mean of same-shaped values.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("mean of zero tensors".into()))?;
        let mut acc = self.value(*first).clone();
        for p in &parts[1..] {
            acc.add_assign(self.value(*p))?;
        }
        let value = acc.scale(1.0 / parts.len() as f64);
        Ok(self.push(value, Op::MeanOf(parts.to_vec())))
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let m = self.value(x);
        if index >= m.rows() {
            return Err(Error::dim("row", m.shape(), (index, m.cols())));
        }
        let value = DenseMatrix::row_vector(m.row(index));
        Ok(self.push(value, Op::Row(x, index)))
    }

    /// Linear recurrence over the rows of `x` (already input-projected).
    pub fn scan(&mut self, x: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let trace = recurrence::run(self.value(x), self.value(a), self.value(b), self.value(c))?;
        Ok(self.push(
            trace.outputs,
            Op::Scan {
                x,
                a,
                b,
                c,
                states: trace.states,
            },
        ))
    }

    /// Mean binary cross-entropy of a `1 × N` probability row.
    pub fn bce(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let loss = bce_value(self.value(pred).data(), target)?;
        Ok(self.push(
            DenseMatrix::filled(1, 1, loss),
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// Summed squared error of a row against `target`.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let loss = mse_value(self.value(pred).data(), target)?;
        Ok(self.push(
            DenseMatrix::filled(1, 1, loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::dim("backward", self.value(loss).shape(), (1, 1)));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &DenseMatrix,
        grads: &mut [Option<DenseMatrix>],
    ) -> Result<()> {
        let mut send = |v: Var, d: DenseMatrix| -> Result<()> {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => {
                    *slot = Some(d);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                send(*a, g.matmul(&self.value(*b).transpose())?)?;
                send(*b, self.value(*a).transpose().matmul(g)?)?;
            }
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::AddRow(x, bias) => {
                send(*x, g.clone())?;
                send(*bias, g.mean_rows().scale(g.rows() as f64))?;
            }
            Op::Scale(x, f) => send(*x, g.scale(*f))?,
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut d = g.clone();
                for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *dv = 0.0;
                    }
                }
                send(*x, d)?;
            }
            Op::Sigmoid(x) => {
                let mut d = g.clone();
                for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *dv *= y * (1.0 - y);
                }
                send(*x, d)?;
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = DenseMatrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (k, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = yr[k] * (gr[k] - dot);
                    }
                }
                send(*x, d)?;
            }
            Op::Transpose(x) => send(*x, g.transpose())?,
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    let cols = g.cols();
                    let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    send(*p, DenseMatrix::new(rows, cols, slice)?)?;
                    offset += rows;
                }
            }
            Op::MeanRows(x) => {
                let rows = self.value(*x).rows();
                if rows > 0 {
                    let share = g.scale(1.0 / rows as f64);
                    let mut d = DenseMatrix::zeros(rows, g.cols());
                    for r in 0..rows {
                        d.row_mut(r).copy_from_slice(share.data());
                    }
                    send(*x, d)?;
                }
            }
            Op::MeanOf(parts) => {
                let share = g.scale(1.0 / parts.len() as f64);
                for p in parts {
                    send(*p, share.clone())?;
                }
            }
            Op::Row(x, index) => {
                let src = self.value(*x);
                let mut d = DenseMatrix::zeros(src.rows(), src.cols());
                d.row_mut(*index).copy_from_slice(g.data());
                send(*x, d)?;
            }
            Op::Scan { x, a, b, c, states } => {
                let rg = recurrence::backward(
                    self.value(*x),
                    self.value(*a),
                    self.value(*b),
                    self.value(*c),
                    states,
                    g,
                );
                send(*x, rg.x)?;
                send(*a, rg.a)?;
                send(*b, rg.b)?;
                send(*c, rg.c)?;
            }
            Op::Bce { pred, target } => {
                let p = self.value(*pred);
                let n = target.len() as f64;
                let scale = g.get(0, 0);
                let mut d = DenseMatrix::zeros(p.rows(), p.cols());
                for (i, dv) in d.data_mut().iter_mut().enumerate() {
                    let pi = p.data()[i];
                    if pi < BCE_EPS || pi > 1.0 - BCE_EPS {
                        continue;
                    }
                    let y = target[i];
                    *dv = -scale / n * (y / pi - (1.0 - y) / (1.0 - pi));
                }
                send(*pred, d)?;
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let scale = g.get(0, 0);
                let mut d = DenseMatrix::zeros(p.rows(), p.cols());
                for (i, dv) in d.data_mut().iter_mut().enumerate() {
                    *dv = 2.0 * (p.data()[i] - target[i]) * scale;
                }
                send(*pred, d)?;
            }
        }
        Ok(())
    }

    /// Accumulates parameter gradients into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (name, var) in &self.params {
            if let Some(g) = grads.get(*var) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Parameter names referenced by this tape.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub fn bce_value(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim("bce_loss", (1, target.len()), (1, pred.len())));
    }
    if pred.is_empty() {
        return Err(Error::Domain("bce_loss over zero classes".into()));
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-sum / pred.len() as f64)
}

pub fn mse_value(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim("mse_loss", (1, target.len()), (1, pred.len())));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (t - p) * (t - p)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DenseMatrix {
        DenseMatrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_gradient_by_hand() {
        let mut t = Tape::new();
        let a = t.constant(mat(1, 2, &[1.0, 2.0]));
        let b = t.constant(mat(2, 1, &[3.0, 4.0]));
        let y = t.matmul(a, b).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(t.value(y).data(), &[11.0]);
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut t = Tape::new();
        let x = t.constant(mat(1, 1, &[3.0]));
        let y = t.add(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.constant(DenseMatrix::zeros(2, 2));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn loss_values() {
        assert!((bce_value(&[0.5], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_value(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let near = bce_value(&[BCE_EPS, 1.0 - BCE_EPS], &[0.0, 1.0]).unwrap();
        assert!(near >= 0.0 && near < 1e-6, "{near}");
        assert_eq!(mse_value(&[1.0; 4], &[0.0; 4]).unwrap(), 4.0);
        assert_eq!(mse_value(&[0.5, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap(), 0.25);
        assert!(mse_value(&[0.0; 3], &[0.0; 4]).is_err());
        assert!(bce_value(&[0.5], &[1.0, 0.0]).is_err());
    }
}
