// SPDX-License-Identifier: Apache-2.0

use super::{Backward, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryBackward(Binary);

impl Backward for BinaryBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let gd = g.data();
        let shape = inputs[0].shape();
        let (da, db): (Vec<f64>, Vec<f64>) = match self.0 {
            Binary::Add => (gd.to_vec(), gd.to_vec()),
            Binary::Sub => (gd.to_vec(), gd.iter().map(|v| -v).collect()),
            Binary::Mul => (
                gd.iter().zip(b).map(|(g, b)| g * b).collect(),
                gd.iter().zip(a).map(|(g, a)| g * a).collect(),
            ),
            Binary::Div => (
                gd.iter().zip(b).map(|(g, b)| g / b).collect(),
                gd.iter()
                    .zip(a.iter().zip(b))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect(),
            ),
        };
        vec![
            Some(Tensor::new(shape, da).expect("shape")),
            Some(Tensor::new(shape, db).expect("shape")),
        ]
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Affine(f64),
    LeakyRelu(f64),
    Sigmoid,
    Sqrt,
    Square,
}

struct UnaryBackward(Unary);

impl Backward for UnaryBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], out: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0].data();
        let y = out.data();
        let d: Vec<f64> = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gv)| {
                gv * match self.0 {
                    Unary::Affine(a) => a,
                    Unary::LeakyRelu(slope) => {
                        if x[i] > 0.0 {
                            1.0
                        } else {
                            slope
                        }
                    }
                    Unary::Sigmoid => y[i] * (1.0 - y[i]),
                    Unary::Sqrt => 0.5 / y[i],
                    Unary::Square => 2.0 * x[i],
                }
            })
            .collect();
        vec![Some(Tensor::new(inputs[0].shape(), d).expect("shape"))]
    }
}

struct SumBackward;

impl Backward for SumBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape(), g.item()))]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    fn binary(&mut self, a: Var, b: Var, op: Binary, name: &'static str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match op {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            })
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, &[a, b], Box::new(BinaryBackward(op))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div, "div")
    }

    fn unary(&mut self, x: Var, op: Unary) -> Var {
        let out = self.value(x).map(|v| match op {
            Unary::Affine(_) => unreachable!(),
            Unary::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
            Unary::Sigmoid => sigmoid(v),
            Unary::Sqrt => v.sqrt(),
            Unary::Square => v * v,
        });
        self.push(out, &[x], Box::new(UnaryBackward(op)))
    }

    /// `a·x + b` elementwise.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let out = self.value(x).map(|v| a * v + b);
        self.push(out, &[x], Box::new(UnaryBackward(Unary::Affine(a))))
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), &[x], Box::new(SumBackward))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Σᵢ wᵢ·xᵢ over scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let t = self.scale(v, w);
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        acc.ok_or_else(|| Error::shape("weighted_sum", "no terms"))
    }
}
