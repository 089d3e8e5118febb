//! Reverse-mode recording of scalar losses built from field evaluations.
//!
//! Field outputs are evaluated eagerly in batches (caching what the backward
//! pass needs); everything downstream is a small scalar graph.

use thiserror::Error;

use super::{FieldBatch, FieldModel};
use crate::geometry::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("nothing has been recorded on the tape")]
    EmptyTape,
    #[error("backward already ran on this tape")]
    DoubleBackward,
    #[error("variable does not belong to this tape")]
    ForeignVar,
}

/// Handle to a recorded scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Const,
    Param(usize),
    Field { batch: usize, index: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Square(usize),
    /// Terms live in `Tape::terms[start..start + len]`.
    WeightedSum { start: usize, len: usize },
}

pub struct Tape<'m> {
    model: &'m FieldModel,
    ops: Vec<Op>,
    values: Vec<f64>,
    terms: Vec<(usize, f64)>,
    batches: Vec<FieldBatch>,
    consumed: bool,
}

impl<'m> Tape<'m> {
    pub fn new(model: &'m FieldModel) -> Self {
        Tape {
            model,
            ops: Vec::new(),
            values: Vec::new(),
            terms: Vec::new(),
            batches: Vec::new(),
            consumed: false,
        }
    }

    pub fn model(&self) -> &FieldModel {
        self.model
    }

    fn push(&mut self, op: Op, value: f64) -> Var {
        self.ops.push(op);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn constant(&mut self, c: f64) -> Var {
        self.push(Op::Const, c)
    }

    /// A model parameter used directly as a leaf.
    pub fn param(&mut self, i: usize) -> Var {
        let v = self.model.params()[i];
        self.push(Op::Param(i), v)
    }

    /// Evaluates the field at every point in one batched pass.
    pub fn field(&mut self, points: &[Vec3]) -> Vec<Var> {
        let batch = self.model.forward_batch(points);
        let b = self.batches.len();
        let vars = batch
            .mu
            .iter()
            .enumerate()
            .map(|(index, &mu)| self.push(Op::Field { batch: b, index }, mu))
            .collect();
        self.batches.push(batch);
        vars
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0] + self.values[b.0];
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0] - self.values[b.0];
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0] * self.values[b.0];
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.values[a.0] * k;
        self.push(Op::Scale(a.0, k), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.values[a.0].exp();
        self.push(Op::Exp(a.0), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.values[a.0];
        self.push(Op::Square(a.0), x * x)
    }

    /// `Σ w_i·x_i`, summed in the given order.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let start = self.terms.len();
        let mut v = 0.0;
        for &(x, w) in terms {
            v += self.values[x.0] * w;
            self.terms.push((x.0, w));
        }
        self.push(Op::WeightedSum { start, len: terms.len() }, v)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let terms: Vec<(Var, f64)> = xs.iter().map(|&x| (x, 1.0)).collect();
        self.weighted_sum(&terms)
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        let w = 1.0 / xs.len().max(1) as f64;
        let terms: Vec<(Var, f64)> = xs.iter().map(|&x| (x, w)).collect();
        self.weighted_sum(&terms)
    }

    /// Gradient of `loss` with respect to every model parameter. A tape can
    /// be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<f64>, TapeError> {
        if self.consumed {
            return Err(TapeError::DoubleBackward);
        }
        if self.ops.is_empty() {
            return Err(TapeError::EmptyTape);
        }
        if loss.0 >= self.ops.len() {
            return Err(TapeError::ForeignVar);
        }
        self.consumed = true;
        let mut adj = vec![0.0; loss.0 + 1];
        adj[loss.0] = 1.0;
        let mut grad = vec![0.0; self.model.param_count()];
        let mut field_adj: Vec<Vec<f64>> = self.batches.iter().map(|b| vec![0.0; b.mu.len()]).collect();
        for i in (0..=loss.0).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Const => {}
                Op::Param(p) => grad[p] += g,
                Op::Field { batch, index } => field_adj[batch][index] += g,
                Op::Add(a, b) => {
                    adj[a] += g;
                    adj[b] += g;
                }
                Op::Sub(a, b) => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a] += g * self.values[b];
                    adj[b] += g * self.values[a];
                }
                Op::Scale(a, k) => adj[a] += g * k,
                Op::Exp(a) => adj[a] += g * self.values[i],
                Op::Square(a) => adj[a] += 2.0 * g * self.values[a],
                Op::WeightedSum { start, len } => {
                    for &(x, w) in &self.terms[start..start + len] {
                        adj[x] += g * w;
                    }
                }
            }
        }
        for (batch, dmu) in self.batches.iter().zip(&field_adj) {
            self.model.backward_batch(batch, dmu, &mut grad);
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{EncodingConfig, FieldConfig};
    use rand::{Rng, SeedableRng};

    fn model() -> FieldModel {
        FieldModel::new(
            FieldConfig {
                encoding: EncodingConfig::Fourier {
                    n_frequencies: 2,
                    base_frequency: 1.0,
                },
                hidden: vec![6],
                bound: 10.0,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let m = model();
        let mut t = Tape::new(&m);
        let c = t.constant(3.0);
        let l = t.square(c);
        assert!(t.backward(l).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn half_squared_norm_gives_params() {
        let m = model();
        let mut t = Tape::new(&m);
        let sq: Vec<Var> = (0..m.param_count())
            .map(|i| {
                let p = t.param(i);
                t.square(p)
            })
            .collect();
        let s = t.sum(&sq);
        let l = t.scale(s, 0.5);
        let g = t.backward(l).unwrap();
        for (gi, pi) in g.iter().zip(m.params()) {
            assert!((gi - pi).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_and_double_backward_are_rejected() {
        let m = model();
        let mut t = Tape::new(&m);
        assert_eq!(t.backward(Var(0)), Err(TapeError::EmptyTape));
        let x = t.param(0);
        t.backward(x).unwrap();
        assert_eq!(t.backward(x), Err(TapeError::DoubleBackward));
    }

    #[test]
    fn scalar_primitives_match_finite_differences() {
        // l = exp(0.3·p0·p1) + (p2 − p3)² + mean(p4, p5) − 2·p6
        let mut m = model();
        let f = |m: &FieldModel, rec: bool| -> (f64, Option<Vec<f64>>) {
            let mut t = Tape::new(m);
            let p: Vec<Var> = (0..7).map(|i| t.param(i)).collect();
            let prod = t.mul(p[0], p[1]);
            let sc = t.scale(prod, 0.3);
            let e = t.exp(sc);
            let d = t.sub(p[2], p[3]);
            let sq = t.square(d);
            let mn = t.mean(&[p[4], p[5]]);
            let a = t.add(e, sq);
            let b = t.add(a, mn);
            let l = t.weighted_sum(&[(b, 1.0), (p[6], -2.0)]);
            let v = t.value(l);
            (v, rec.then(|| t.backward(l).unwrap()))
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for i in 0..7 {
            m.params_mut()[i] = rng.gen_range(-1.0..1.0);
        }
        let g = f(&m, true).1.unwrap();
        let h = 1e-6;
        for (i, &gi) in g.iter().enumerate().take(7) {
            let x0 = m.params()[i];
            m.params_mut()[i] = x0 + h;
            let fp = f(&m, false).0;
            m.params_mut()[i] = x0 - h;
            let fm = f(&m, false).0;
            m.params_mut()[i] = x0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - gi).abs() <= 1e-4 * fd.abs().max(1e-6), "{i}: {fd} vs {gi}");
        }
    }
}
