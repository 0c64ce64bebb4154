//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records a straight-line program over scalars; [`Tape::backward`]
//! runs one reverse sweep and returns the adjoint of every node. Fused `Sum`
//! and `Dot` nodes keep tapes short where the forward math reduces over
//! atoms or coordinates.

use crate::scalar::Real;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    /// Position of the node on its tape (indexes backward-sweep adjoints).
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    /// Input or constant; adjoints accumulate here and the sweep stops.
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Exp(u32),
    Ln(u32),
    Silu(u32),
    /// Sum of the aux-slice `[start, start+len)`.
    Sum { start: u32, len: u32 },
    /// Dot product over interleaved aux pairs `(a_0, b_0, a_1, b_1, …)`.
    Dot { start: u32, pairs: u32 },
}

/// Recorded computation. Cleared and reused across forward passes.
#[derive(Debug, Default)]
pub struct Tape<F> {
    ops: Vec<Op>,
    vals: Vec<F>,
    aux: Vec<u32>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            vals: Vec::new(),
            aux: Vec::new(),
        }
    }

    pub fn clear(&mut self) {
        self.ops.clear();
        self.vals.clear();
        self.aux.clear();
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> F {
        self.vals[v.0 as usize]
    }

    fn push(&mut self, op: Op, val: F) -> Var {
        let idx = self.ops.len() as u32;
        self.ops.push(op);
        self.vals.push(val);
        Var(idx)
    }

    /// New leaf (differentiation input or constant).
    pub fn leaf(&mut self, val: F) -> Var {
        self.push(Op::Leaf, val)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0 as usize] + self.vals[b.0 as usize];
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0 as usize] - self.vals[b.0 as usize];
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0 as usize] * self.vals[b.0 as usize];
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0 as usize] / self.vals[b.0 as usize];
        self.push(Op::Div(a.0, b.0), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.vals[a.0 as usize];
        self.push(Op::Neg(a.0), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.vals[a.0 as usize].exp();
        self.push(Op::Exp(a.0), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.vals[a.0 as usize].ln();
        self.push(Op::Ln(a.0), v)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.vals[a.0 as usize];
        let v = x / (F::one() + (-x).exp());
        self.push(Op::Silu(a.0), v)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let start = self.aux.len() as u32;
        let mut v = F::zero();
        for x in xs {
            self.aux.push(x.0);
            v += self.vals[x.0 as usize];
        }
        self.push(
            Op::Sum {
                start,
                len: xs.len() as u32,
            },
            v,
        )
    }

    pub fn dot(&mut self, xs: &[Var], ys: &[Var]) -> Var {
        assert_eq!(xs.len(), ys.len());
        let start = self.aux.len() as u32;
        let mut v = F::zero();
        for (x, y) in xs.iter().zip(ys) {
            self.aux.push(x.0);
            self.aux.push(y.0);
            v += self.vals[x.0 as usize] * self.vals[y.0 as usize];
        }
        self.push(
            Op::Dot {
                start,
                pairs: xs.len() as u32,
            },
            v,
        )
    }

    /// Max-stabilized log-sum-exp. The running maximum enters as a detached
    /// constant; its adjoint contributions cancel exactly because the softmax
    /// weights sum to one, so gradients are unchanged.
    pub fn logsumexp(&mut self, xs: &[Var]) -> Var {
        let m = xs
            .iter()
            .map(|x| self.vals[x.0 as usize])
            .fold(F::neg_infinity(), F::max);
        let m_leaf = self.leaf(m);
        let exps: Vec<Var> = xs
            .iter()
            .map(|&x| {
                let shifted = self.sub(x, m_leaf);
                self.exp(shifted)
            })
            .collect();
        let total = self.sum(&exps);
        let log_total = self.ln(total);
        self.add(log_total, m_leaf)
    }

    /// Reverse sweep from `output`; returns one adjoint per node.
    pub fn backward(&self, output: Var) -> Vec<F> {
        let mut adj = vec![F::zero(); self.ops.len()];
        adj[output.0 as usize] = F::one();
        for idx in (0..=output.0 as usize).rev() {
            let g = adj[idx];
            if g == F::zero() {
                continue;
            }
            match self.ops[idx] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] += g;
                }
                Op::Sub(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a as usize] += g * self.vals[b as usize];
                    adj[b as usize] += g * self.vals[a as usize];
                }
                Op::Div(a, b) => {
                    let bv = self.vals[b as usize];
                    adj[a as usize] += g / bv;
                    adj[b as usize] -= g * self.vals[idx] / bv;
                }
                Op::Neg(a) => adj[a as usize] -= g,
                Op::Exp(a) => adj[a as usize] += g * self.vals[idx],
                Op::Ln(a) => adj[a as usize] += g / self.vals[a as usize],
                Op::Silu(a) => {
                    let x = self.vals[a as usize];
                    let sig = F::one() / (F::one() + (-x).exp());
                    adj[a as usize] += g * sig * (F::one() + x * (F::one() - sig));
                }
                Op::Sum { start, len } => {
                    for k in start..start + len {
                        adj[self.aux[k as usize] as usize] += g;
                    }
                }
                Op::Dot { start, pairs } => {
                    for p in 0..pairs {
                        let a = self.aux[(start + 2 * p) as usize] as usize;
                        let b = self.aux[(start + 2 * p + 1) as usize] as usize;
                        adj[a] += g * self.vals[b];
                        adj[b] += g * self.vals[a];
                    }
                }
            }
        }
        adj
    }
}

/// Reads the adjoints of a set of leaves out of a backward sweep.
pub fn gradients_of<F: Real>(adjoints: &[F], vars: &[Var]) -> Vec<F> {
    vars.iter().map(|v| adjoints[v.0 as usize]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.leaf(1.3);
        let y = t.leaf(-0.4);
        let p = t.mul(x, y);
        let adj = t.backward(p);
        assert_eq!(adj[x.0 as usize], -0.4);
        assert_eq!(adj[y.0 as usize], 1.3);
    }

    #[test]
    fn composite_expression_matches_finite_differences() {
        let f = |x: f64| ((x * x + 1.0).ln() + (-x).exp()) / (x + 2.0);
        let eval = |x0: f64| {
            let mut t = Tape::new();
            let x = t.leaf(x0);
            let one = t.leaf(1.0);
            let two = t.leaf(2.0);
            let xx = t.mul(x, x);
            let xx1 = t.add(xx, one);
            let l = t.ln(xx1);
            let nx = t.neg(x);
            let e = t.exp(nx);
            let num = t.add(l, e);
            let den = t.add(x, two);
            let out = t.div(num, den);
            (t.value(out), {
                let adj = t.backward(out);
                adj[x.0 as usize]
            })
        };
        for &x0 in &[0.3, 1.7, -0.9] {
            let (v, g) = eval(x0);
            assert!((v - f(x0)).abs() <= 1e-12);
            assert!((g - finite_diff(f, x0)).abs() <= 1e-7, "x0 = {x0}");
        }
    }

    #[test]
    fn silu_gradient_matches_finite_differences() {
        let f = |x: f64| x / (1.0 + (-x).exp());
        for &x0 in &[-2.0, -0.1, 0.0, 0.5, 3.0] {
            let mut t = Tape::new();
            let x = t.leaf(x0);
            let s = t.silu(x);
            let adj = t.backward(s);
            assert!((adj[x.0 as usize] - finite_diff(f, x0)).abs() <= 1e-7);
        }
    }

    #[test]
    fn fused_dot_matches_expanded_products() {
        let xs = [0.3, -0.7, 1.1];
        let ys = [0.9, 0.4, -0.2];
        let mut t = Tape::new();
        let xv: Vec<Var> = xs.iter().map(|&v| t.leaf(v)).collect();
        let yv: Vec<Var> = ys.iter().map(|&v| t.leaf(v)).collect();
        let d = t.dot(&xv, &yv);
        let want: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum();
        assert!((t.value(d) - want).abs() <= 1e-15);
        let adj = t.backward(d);
        for k in 0..3 {
            assert_eq!(adj[xv[k].0 as usize], ys[k]);
            assert_eq!(adj[yv[k].0 as usize], xs[k]);
        }
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let vals = [0.2, 1.9, -0.5, 0.2];
        let mut t = Tape::new();
        let xs: Vec<Var> = vals.iter().map(|&v| t.leaf(v)).collect();
        let l = t.logsumexp(&xs);
        let direct = vals.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((t.value(l) - direct).abs() <= 1e-12);
        let adj = t.backward(l);
        let z: f64 = vals.iter().map(|v| v.exp()).sum();
        for (k, &v) in vals.iter().enumerate() {
            assert!((adj[xs[k].0 as usize] - v.exp() / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn logsumexp_is_stable_for_large_magnitudes() {
        let mut t = Tape::new();
        let xs: Vec<Var> = [1000.0, 999.0].iter().map(|&v| t.leaf(v)).collect();
        let l = t.logsumexp(&xs);
        let want = 1000.0 + (1.0 + (-1.0f64).exp()).ln();
        assert!((t.value(l) - want).abs() <= 1e-9);
    }

    #[test]
    fn shared_subexpressions_accumulate_adjoints() {
        // f(x) = x·x + x: adjoint of x must be 2x + 1.
        let mut t = Tape::new();
        let x = t.leaf(0.7);
        let sq = t.mul(x, x);
        let f = t.add(sq, x);
        let adj = t.backward(f);
        assert!((adj[x.0 as usize] - (2.0 * 0.7 + 1.0)).abs() <= 1e-15);
    }
}
