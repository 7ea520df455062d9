//! A small array-level reverse-mode engine.
//!
//! Computations are written once against the [`Graph`] trait. [`Eval`] runs
//! them forward only; [`Tape`] additionally records every node so that
//! [`Tape::backward`] can return gradients for the registered parameters.
//! Heavy interaction terms enter as [`CustomOp`]s with hand-written
//! vector-Jacobian products.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

/// A node whose forward value and vector-Jacobian product are supplied by the caller.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Array2<f64>]) -> Array2<f64>;

    /// Gradients with respect to each input, given the output gradient.
    fn backward(&self, inputs: &[&Array2<f64>], output: &Array2<f64>, grad: &Array2<f64>) -> Vec<Array2<f64>>;
}

/// Operation vocabulary.
#[derive(Clone)]
pub enum Op {
    /// `a · b`
    MatMul,
    /// `a + b` with `b` a `1 x m` row broadcast over the rows of `a`.
    AddRow,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    Scale(f64),
    Tanh,
    Cos,
    Sin,
    /// Row-wise squared norm, `n x m -> n x 1`.
    RowSumSq,
    /// Mean of all entries, `-> 1 x 1`.
    Mean,
    /// Sum of all entries, `-> 1 x 1`.
    Sum,
    /// Column concatenation.
    Concat,
    /// Column range `[start, end)`.
    Slice { start: usize, end: usize },
    Custom(Rc<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Custom(c) => write!(f, "Custom({})", c.name()),
            Op::MatMul => f.write_str("MatMul"),
            Op::AddRow => f.write_str("AddRow"),
            Op::Add => f.write_str("Add"),
            Op::Sub => f.write_str("Sub"),
            Op::Mul => f.write_str("Mul"),
            Op::Scale(c) => write!(f, "Scale({c})"),
            Op::Tanh => f.write_str("Tanh"),
            Op::Cos => f.write_str("Cos"),
            Op::Sin => f.write_str("Sin"),
            Op::RowSumSq => f.write_str("RowSumSq"),
            Op::Mean => f.write_str("Mean"),
            Op::Sum => f.write_str("Sum"),
            Op::Concat => f.write_str("Concat"),
            Op::Slice { start, end } => write!(f, "Slice({start}..{end})"),
        }
    }
}

fn same_shape(op: &Op, a: &Array2<f64>, b: &Array2<f64>) {
    assert_eq!(a.dim(), b.dim(), "{op:?}: operand shapes differ");
}

/// Forward value of a primitive.
pub fn forward(op: &Op, inputs: &[&Array2<f64>]) -> Array2<f64> {
    match op {
        Op::MatMul => inputs[0].dot(inputs[1]),
        Op::AddRow => {
            assert_eq!(inputs[1].nrows(), 1, "AddRow expects a 1 x m row");
            inputs[0] + inputs[1]
        }
        Op::Add => {
            same_shape(op, inputs[0], inputs[1]);
            inputs[0] + inputs[1]
        }
        Op::Sub => {
            same_shape(op, inputs[0], inputs[1]);
            inputs[0] - inputs[1]
        }
        Op::Mul => {
            same_shape(op, inputs[0], inputs[1]);
            inputs[0] * inputs[1]
        }
        Op::Scale(c) => inputs[0] * *c,
        Op::Tanh => inputs[0].mapv(f64::tanh),
        Op::Cos => inputs[0].mapv(f64::cos),
        Op::Sin => inputs[0].mapv(f64::sin),
        Op::RowSumSq => inputs[0].map_axis(Axis(1), |r| r.dot(&r)).insert_axis(Axis(1)),
        Op::Mean => Array2::from_elem((1, 1), inputs[0].mean().unwrap_or(0.0)),
        Op::Sum => Array2::from_elem((1, 1), inputs[0].sum()),
        Op::Concat => {
            let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat operands share row count")
        }
        Op::Slice { start, end } => inputs[0].slice(s![.., *start..*end]).to_owned(),
        Op::Custom(c) => c.forward(inputs),
    }
}

fn backward_primitive(op: &Op, inputs: &[&Array2<f64>], output: &Array2<f64>, g: &Array2<f64>) -> Vec<Array2<f64>> {
    match op {
        Op::MatMul => vec![g.dot(&inputs[1].t()), inputs[0].t().dot(g)],
        Op::AddRow => vec![g.clone(), g.sum_axis(Axis(0)).insert_axis(Axis(0))],
        Op::Add => vec![g.clone(), g.clone()],
        Op::Sub => vec![g.clone(), -g],
        Op::Mul => vec![g * inputs[1], g * inputs[0]],
        Op::Scale(c) => vec![g * *c],
        Op::Tanh => {
            let mut out = g.clone();
            out.zip_mut_with(output, |gi, y| *gi *= 1.0 - y * y);
            vec![out]
        }
        Op::Cos => {
            let mut out = g.clone();
            out.zip_mut_with(inputs[0], |gi, x| *gi *= -x.sin());
            vec![out]
        }
        Op::Sin => {
            let mut out = g.clone();
            out.zip_mut_with(inputs[0], |gi, x| *gi *= x.cos());
            vec![out]
        }
        Op::RowSumSq => {
            let mut out = inputs[0] * 2.0;
            for (mut row, gi) in out.rows_mut().into_iter().zip(g.column(0)) {
                row *= *gi;
            }
            vec![out]
        }
        Op::Mean => {
            let n = inputs[0].len().max(1) as f64;
            vec![Array2::from_elem(inputs[0].raw_dim(), g[[0, 0]] / n)]
        }
        Op::Sum => vec![Array2::from_elem(inputs[0].raw_dim(), g[[0, 0]])],
        Op::Concat => {
            let mut start = 0;
            inputs
                .iter()
                .map(|a| {
                    let end = start + a.ncols();
                    let part = g.slice(s![.., start..end]).to_owned();
                    start = end;
                    part
                })
                .collect()
        }
        Op::Slice { start, end } => {
            let mut out = Array2::zeros(inputs[0].raw_dim());
            out.slice_mut(s![.., *start..*end]).assign(g);
            vec![out]
        }
        Op::Custom(c) => c.backward(inputs, output, g),
    }
}

/// Something that can evaluate the operation vocabulary.
pub trait Graph {
    type Var: Clone;

    fn constant(&mut self, value: Array2<f64>) -> Self::Var;

    /// A differentiable leaf tracked under `index`.
    fn parameter(&mut self, index: usize, value: &Array2<f64>) -> Self::Var;

    fn apply(&mut self, op: Op, inputs: &[&Self::Var]) -> Self::Var;

    fn value<'a>(&'a self, var: &'a Self::Var) -> &'a Array2<f64>;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        self.apply(Op::MatMul, &[a, b])
    }
    fn add_row(&mut self, a: &Self::Var, row: &Self::Var) -> Self::Var {
        self.apply(Op::AddRow, &[a, row])
    }
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        self.apply(Op::Mul, &[a, b])
    }
    fn scale(&mut self, a: &Self::Var, c: f64) -> Self::Var {
        self.apply(Op::Scale(c), &[a])
    }
    fn tanh(&mut self, a: &Self::Var) -> Self::Var {
        self.apply(Op::Tanh, &[a])
    }
    fn cos(&mut self, a: &Self::Var) -> Self::Var {
        self.apply(Op::Cos, &[a])
    }
    fn sin(&mut self, a: &Self::Var) -> Self::Var {
        self.apply(Op::Sin, &[a])
    }
    fn row_sum_sq(&mut self, a: &Self::Var) -> Self::Var {
        self.apply(Op::RowSumSq, &[a])
    }
    fn mean(&mut self, a: &Self::Var) -> Self::Var {
        self.apply(Op::Mean, &[a])
    }
    fn sum(&mut self, a: &Self::Var) -> Self::Var {
        self.apply(Op::Sum, &[a])
    }
    fn concat(&mut self, parts: &[&Self::Var]) -> Self::Var {
        self.apply(Op::Concat, parts)
    }
    fn slice_cols(&mut self, a: &Self::Var, start: usize, end: usize) -> Self::Var {
        self.apply(Op::Slice { start, end }, &[a])
    }
    fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[&Self::Var]) -> Self::Var {
        self.apply(Op::Custom(op), inputs)
    }
}

/// Forward-only evaluation.
#[derive(Debug, Default)]
pub struct Eval;

impl Graph for Eval {
    type Var = Rc<Array2<f64>>;

    fn constant(&mut self, value: Array2<f64>) -> Self::Var {
        Rc::new(value)
    }

    fn parameter(&mut self, _index: usize, value: &Array2<f64>) -> Self::Var {
        Rc::new(value.clone())
    }

    fn apply(&mut self, op: Op, inputs: &[&Self::Var]) -> Self::Var {
        let values: Vec<&Array2<f64>> = inputs.iter().map(|v| v.as_ref()).collect();
        Rc::new(forward(&op, &values))
    }

    fn value<'a>(&'a self, var: &'a Self::Var) -> &'a Array2<f64> {
        var
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeVar(usize);

struct Node {
    value: Array2<f64>,
    op: Option<Op>,
    inputs: Vec<usize>,
    param: Option<usize>,
}

/// Records values and operations for one evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads(pub BTreeMap<usize, Array2<f64>>);

impl ParamGrads {
    pub fn get(&self, index: usize) -> Option<&Array2<f64>> {
        self.0.get(&index)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Option<Op>, inputs: Vec<usize>, param: Option<usize>) -> TapeVar {
        self.nodes.push(Node { value, op, inputs, param });
        TapeVar(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss` node; `seed` scales the output gradient.
    pub fn backward(&self, loss: TapeVar, seed: f64) -> Result<ParamGrads> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Shape(format!("loss node {} is not on this tape ({} nodes)", loss.0, self.len())))?;
        if node.value.dim() != (1, 1) {
            return Err(Error::Shape(format!("loss must be 1x1, got {:?}", node.value.dim())));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::from_elem((1, 1), seed));
        let mut out = ParamGrads::default();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(index) = node.param {
                match out.0.get_mut(&index) {
                    Some(acc) => *acc += &g,
                    None => {
                        out.0.insert(index, g);
                    }
                }
                continue;
            }
            let Some(op) = &node.op else { continue };
            let inputs: Vec<&Array2<f64>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = backward_primitive(op, &inputs, &node.value, &g);
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                match &mut grads[input] {
                    Some(acc) => *acc += &ig,
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(out)
    }
}

impl Graph for Tape {
    type Var = TapeVar;

    fn constant(&mut self, value: Array2<f64>) -> TapeVar {
        self.push(value, None, Vec::new(), None)
    }

    fn parameter(&mut self, index: usize, value: &Array2<f64>) -> TapeVar {
        self.push(value.clone(), None, Vec::new(), Some(index))
    }

    fn apply(&mut self, op: Op, inputs: &[&TapeVar]) -> TapeVar {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let values: Vec<&Array2<f64>> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let value = forward(&op, &values);
        self.push(value, Some(op), ids, None)
    }

    fn value<'a>(&'a self, var: &'a TapeVar) -> &'a Array2<f64> {
        &self.nodes[var.0].value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Runs `f` on a tape with `x` as parameter 0 and checks the gradient
    /// against central differences along every coordinate.
    fn check<F>(x: Array2<f64>, f: F)
    where
        F: Fn(&mut Tape, &TapeVar) -> TapeVar,
    {
        let mut tape = Tape::new();
        let xv = tape.parameter(0, &x);
        let loss = f(&mut tape, &xv);
        let grad = tape.backward(loss, 1.0).unwrap().get(0).cloned().unwrap_or_else(|| Array2::zeros(x.raw_dim()));
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let eval = |x: &Array2<f64>| {
                let mut t = Tape::new();
                let v = t.parameter(0, x);
                let l = f(&mut t, &v);
                t.value(&l)[[0, 0]]
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = grad.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-7 * (1.0 + an.abs()), "coordinate {idx}: fd {fd} vs tape {an}");
        }
    }

    #[test]
    fn primitive_gradients() {
        let x = array![[0.3, -0.7, 1.1], [0.5, 0.2, -0.4]];
        let w = array![[0.2, -1.0], [0.4, 0.3], [-0.6, 0.9]];
        let b = array![[0.1, -0.2]];
        check(x.clone(), |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let z = t.matmul(x, &wv);
            let z = t.add_row(&z, &bv);
            let h = t.tanh(&z);
            let s = t.row_sum_sq(&h);
            t.mean(&s)
        });
        check(w.clone(), |t, w| {
            let xv = t.constant(x.clone());
            let z = t.matmul(&xv, w);
            let c = t.cos(&z);
            let s = t.sin(&z);
            let p = t.mul(&c, &s);
            let q = t.sub(&p, &z);
            let q = t.scale(&q, 1.7);
            t.sum(&q)
        });
        check(x.clone(), |t, x| {
            let a = t.slice_cols(x, 0, 2);
            let b = t.slice_cols(x, 1, 3);
            let c = t.concat(&[&a, &b, x]);
            let d = t.add(&c, &c);
            let e = t.mul(&d, &d);
            t.sum(&e)
        });
    }

    #[test]
    fn eval_and_tape_agree() {
        let x = array![[0.3, -0.7], [0.5, 0.2]];
        let mut e = Eval;
        let mut t = Tape::new();
        let xe = e.parameter(0, &x);
        let xt = t.parameter(0, &x);
        let ye = {
            let a = e.tanh(&xe);
            e.row_sum_sq(&a)
        };
        let yt = {
            let a = t.tanh(&xt);
            t.row_sum_sq(&a)
        };
        assert_eq!(e.value(&ye), t.value(&yt));
    }

    #[test]
    fn seed_scales_gradient_linearly() {
        let x = array![[0.3, -0.7], [0.5, 0.2]];
        let mut t = Tape::new();
        let xv = t.parameter(3, &x);
        let y = t.tanh(&xv);
        let l = t.sum(&y);
        let g1 = t.backward(l, 1.0).unwrap();
        let g2 = t.backward(l, 2.0).unwrap();
        assert_eq!(g1.get(3).unwrap() * 2.0, g2.get(3).unwrap());
    }

    #[test]
    fn loss_without_parameters_has_zero_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[2.0]]);
        let l = t.scale(&c, 3.0);
        assert!(t.backward(l, 1.0).unwrap().0.is_empty());
    }

    #[test]
    fn incomplete_tape_is_an_error() {
        let empty = Tape::new();
        assert!(empty.backward(TapeVar(0), 1.0).is_err());
        let mut t = Tape::new();
        let v = t.constant(array![[1.0, 2.0]]);
        assert!(t.backward(v, 1.0).is_err());
    }
}
