//! Entropy-regularized optimal transport.
//!
//! Solves `min_π Σ c·π + ε·KL(π ∥ μ⊗ν)` over couplings of two discrete
//! measures by alternating scaling (Sinkhorn) in the log domain, exposes the
//! entropic objective and KL divergence, an exact Wasserstein-1 oracle backed
//! by a transportation simplex, and stability probes for the solution map
//! `cost ↦ plan`.

mod w1;

pub use w1::{coupling_w1, coupling_w1_report, exact_w1, W1Report, EXACT_W1_MAX_SUPPORT};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::measures::{Coupling, DiscreteMeasure};
use crate::scalar::{fl, Real};

/// Finite cost matrix between the atoms of two measures, with a declared
/// uniform bound `B ≥ max|c|`.
#[derive(Debug, Clone)]
pub struct CostMatrix<F> {
    values: Array2<F>,
    bound: F,
}

impl<F: Real> CostMatrix<F> {
    /// Builds a cost matrix; the bound is taken as `max|c|`.
    pub fn new(values: Array2<F>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("cost matrix has non-finite entries".into()));
        }
        let bound = values.iter().fold(F::zero(), |acc, &v| acc.max(v.abs()));
        Ok(Self { values, bound })
    }

    /// Builds a cost matrix with an explicitly declared bound.
    pub fn with_bound(values: Array2<F>, bound: F) -> Result<Self> {
        let c = Self::new(values)?;
        if c.bound > bound {
            return Err(Error::Invalid(format!(
                "max|c| = {} exceeds the declared bound {bound}",
                c.bound
            )));
        }
        Ok(Self { bound, ..c })
    }

    pub fn zero(n: usize, m: usize) -> Self {
        Self {
            values: Array2::zeros((n, m)),
            bound: F::zero(),
        }
    }

    pub fn values(&self) -> &Array2<F> {
        &self.values
    }

    pub fn bound(&self) -> F {
        self.bound
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Entrywise `self + t·other`.
    pub fn add_scaled(&self, other: &CostMatrix<F>, t: F) -> Result<CostMatrix<F>> {
        if self.dim() != other.dim() {
            return Err(Error::DimMismatch("cost matrices have different shapes".into()));
        }
        CostMatrix::new(Array2::from_shape_fn(self.dim(), |(i, j)| {
            self.values[(i, j)] + t * other.values[(i, j)]
        }))
    }

    /// `max_{ij} |self - other|`.
    pub fn sup_distance(&self, other: &CostMatrix<F>) -> Result<F> {
        if self.dim() != other.dim() {
            return Err(Error::DimMismatch("cost matrices have different shapes".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max))
    }
}

/// Solver configuration.
#[derive(Debug, Clone)]
pub struct SinkhornConfig<F> {
    /// Entropic regularization strength.
    pub epsilon: F,
    pub max_iters: usize,
    /// Stopping threshold on the L1 column-marginal violation measured after a
    /// row-feasible update.
    pub tol: F,
    /// Iterate on log-potentials (overflow-safe). The plain scaling loop is
    /// kept for cross-checks on benign costs.
    pub log_domain: bool,
}

impl<F: Real> Default for SinkhornConfig<F> {
    fn default() -> Self {
        Self {
            epsilon: F::one(),
            max_iters: 10_000,
            tol: fl(1e-9),
            log_domain: true,
        }
    }
}

impl<F: Real> SinkhornConfig<F> {
    pub fn with_epsilon(epsilon: F) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > F::zero()) || !self.epsilon.is_finite() {
            return Err(Error::Invalid(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.tol > F::zero()) {
            return Err(Error::Invalid(format!("tol {} must be positive", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Invalid("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Converged entropic plan with its scaling potentials and diagnostics.
///
/// The mass factorizes as `mass[i,j] = u[i]·exp(-c[i,j]/ε)·v[j]·a_i·b_j`; the
/// final explicit row rescale is folded into `u`, so the identity holds at
/// machine precision while row marginals are exact.
#[derive(Debug, Clone)]
pub struct SinkhornSolution<F> {
    pub coupling: Coupling<F>,
    pub u: Vec<F>,
    pub v: Vec<F>,
    pub iters: usize,
    /// L1 column-marginal violation at the accepted iterate.
    pub final_violation: F,
}

/// log-sum-exp with max subtraction; empty input yields `-inf`.
pub(crate) fn logsumexp<F: Real>(terms: &[F]) -> F {
    let m = terms.iter().copied().fold(F::neg_infinity(), F::max);
    if !m.is_finite() {
        return m;
    }
    let s = terms
        .iter()
        .map(|&t| (t - m).exp())
        .fold(F::zero(), |acc, t| acc + t);
    m + s.ln()
}

/// Entropic OT solver. Requires strictly positive weights (callers drop
/// zero-weight atoms; silently dropping them here would desynchronize the
/// coupling from the supports used elsewhere).
pub fn sinkhorn_solve<F: Real>(
    cost: &CostMatrix<F>,
    mu: &DiscreteMeasure<F>,
    nu: &DiscreteMeasure<F>,
    cfg: &SinkhornConfig<F>,
) -> Result<SinkhornSolution<F>> {
    cfg.validate()?;
    let (n, m) = cost.dim();
    if n != mu.len() || m != nu.len() {
        return Err(Error::DimMismatch(format!(
            "cost is {n}x{m} but measures have {} and {} atoms",
            mu.len(),
            nu.len()
        )));
    }
    let a = mu.weights();
    let b = nu.weights();
    if a.iter().chain(b).any(|&w| w <= F::zero()) {
        return Err(Error::Invalid(
            "weights must be strictly positive; drop zero-weight atoms before solving".into(),
        ));
    }

    let (log_u, log_v, iters, violation) = if cfg.log_domain {
        log_domain_potentials(cost, a, b, cfg)?
    } else {
        plain_scaling_potentials(cost, a, b, cfg)?
    };

    // Materialize the plan and make row marginals exact with one rescale pass,
    // folding the per-row factor into u so the factorization stays an identity.
    let eps = cfg.epsilon;
    let mut u: Vec<F> = log_u.iter().map(|&f| f.exp()).collect();
    let v: Vec<F> = log_v.iter().map(|&g| g.exp()).collect();
    let mut mass = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            mass[(i, j)] =
                (log_u[i] + log_v[j] - cost.values()[(i, j)] / eps).exp() * a[i] * b[j];
        }
    }
    for i in 0..n {
        // Compensated row sum so the rescale lands within ~1 ulp of a_i.
        let mut s = F::zero();
        let mut comp = F::zero();
        for j in 0..m {
            let y = mass[(i, j)] - comp;
            let t = s + y;
            comp = (t - s) - y;
            s = t;
        }
        if !(s > F::zero()) || !s.is_finite() {
            return Err(Error::Numeric(format!(
                "row {i} of the plan degenerated (sum {s}); try log_domain = true"
            )));
        }
        let scale = a[i] / s;
        for j in 0..m {
            mass[(i, j)] = mass[(i, j)] * scale;
        }
        u[i] = u[i] * scale;
    }

    let coupling = Coupling::new(
        mu.support().to_vec(),
        nu.support().to_vec(),
        mass,
        a.to_vec(),
        b.to_vec(),
        // Column sums are within cfg.tol in L1, hence also entrywise.
        cfg.tol,
    )?;
    Ok(SinkhornSolution {
        coupling,
        u,
        v,
        iters,
        final_violation: violation,
    })
}

/// Alternating updates on log-potentials. Returns (log u, log v, iters, L1
/// column violation); the state is row-feasible on return.
fn log_domain_potentials<F: Real>(
    cost: &CostMatrix<F>,
    a: &[F],
    b: &[F],
    cfg: &SinkhornConfig<F>,
) -> Result<(Vec<F>, Vec<F>, usize, F)> {
    let (n, m) = cost.dim();
    let eps = cfg.epsilon;
    let la: Vec<F> = a.iter().map(|&w| w.ln()).collect();
    let lb: Vec<F> = b.iter().map(|&w| w.ln()).collect();
    let scaled = |i: usize, j: usize| cost.values()[(i, j)] / eps;

    let mut phi = vec![F::zero(); n]; // log u
    let mut psi = vec![F::zero(); m]; // log v
    let mut col_buf = vec![F::zero(); n];
    let mut row_buf = vec![F::zero(); m];

    let col_update = |phi: &[F], psi_out: &mut Vec<F>, buf: &mut Vec<F>| {
        for j in 0..m {
            for i in 0..n {
                buf[i] = la[i] + phi[i] - scaled(i, j);
            }
            psi_out[j] = -logsumexp(buf);
        }
    };

    // First full (column, row) pair.
    col_update(&phi, &mut psi, &mut col_buf);
    for i in 0..n {
        for j in 0..m {
            row_buf[j] = lb[j] + psi[j] - scaled(i, j);
        }
        phi[i] = -logsumexp(&row_buf);
    }

    let mut psi_next = vec![F::zero(); m];
    for iter in 1..=cfg.max_iters {
        // With rows feasible, column sums equal b_j·exp(ψ_j - ψ*_j) where ψ*
        // is the next column update; measure the violation from that identity.
        col_update(&phi, &mut psi_next, &mut col_buf);
        let mut violation = F::zero();
        for j in 0..m {
            violation += b[j] * ((psi[j] - psi_next[j]).exp() - F::one()).abs();
        }
        if !violation.is_finite() {
            return Err(Error::Numeric("sinkhorn potentials became non-finite".into()));
        }
        if violation <= cfg.tol {
            return Ok((phi, psi, iter, violation));
        }
        if iter == cfg.max_iters {
            return Err(Error::NoConvergence {
                iters: iter,
                violation: violation.to_f64().unwrap_or(f64::NAN),
                tol: cfg.tol.to_f64().unwrap_or(f64::NAN),
            });
        }
        std::mem::swap(&mut psi, &mut psi_next);
        for i in 0..n {
            for j in 0..m {
                row_buf[j] = lb[j] + psi[j] - scaled(i, j);
            }
            phi[i] = -logsumexp(&row_buf);
        }
    }
    unreachable!("loop either converges or errors at max_iters");
}

/// Plain (non-log) scaling loop; detects overflow/underflow and advises the
/// log-domain path.
fn plain_scaling_potentials<F: Real>(
    cost: &CostMatrix<F>,
    a: &[F],
    b: &[F],
    cfg: &SinkhornConfig<F>,
) -> Result<(Vec<F>, Vec<F>, usize, F)> {
    let (n, m) = cost.dim();
    let eps = cfg.epsilon;
    let kernel = Array2::from_shape_fn((n, m), |(i, j)| (-cost.values()[(i, j)] / eps).exp());

    let bad = |x: F| !x.is_finite() || x <= F::zero();
    let mut u = vec![F::one(); n];
    let mut v = vec![F::one(); m];

    let col_update = |u: &[F], v: &mut Vec<F>| {
        for j in 0..m {
            let mut s = F::zero();
            for i in 0..n {
                s += kernel[(i, j)] * a[i] * u[i];
            }
            v[j] = F::one() / s;
        }
    };
    let row_update = |v: &[F], u: &mut Vec<F>| {
        for i in 0..n {
            let mut s = F::zero();
            for j in 0..m {
                s += kernel[(i, j)] * b[j] * v[j];
            }
            u[i] = F::one() / s;
        }
    };

    col_update(&u, &mut v);
    row_update(&v, &mut u);
    let mut v_next = vec![F::one(); m];
    for iter in 1..=cfg.max_iters {
        if u.iter().chain(v.iter()).any(|&x| bad(x)) {
            return Err(Error::Numeric(
                "scaling factors overflowed or vanished; enable log_domain".into(),
            ));
        }
        col_update(&u, &mut v_next);
        let mut violation = F::zero();
        for j in 0..m {
            violation += b[j] * (v[j] / v_next[j] - F::one()).abs();
        }
        if !violation.is_finite() {
            return Err(Error::Numeric(
                "marginal violation became non-finite; enable log_domain".into(),
            ));
        }
        if violation <= cfg.tol {
            let lu = u.iter().map(|&x| x.ln()).collect();
            let lv = v.iter().map(|&x| x.ln()).collect();
            return Ok((lu, lv, iter, violation));
        }
        if iter == cfg.max_iters {
            return Err(Error::NoConvergence {
                iters: iter,
                violation: violation.to_f64().unwrap_or(f64::NAN),
                tol: cfg.tol.to_f64().unwrap_or(f64::NAN),
            });
        }
        std::mem::swap(&mut v, &mut v_next);
        row_update(&v, &mut u);
    }
    unreachable!("loop either converges or errors at max_iters");
}

/// `Σ c·π + ε·Σ π·ln(π/ref)` with `0·ln 0 = 0`. Mass of `pi` outside the
/// support of `reference` makes the KL term infinite.
pub fn entropic_objective<F: Real>(
    pi: &Coupling<F>,
    cost: &CostMatrix<F>,
    epsilon: F,
    reference: &Coupling<F>,
) -> Result<F> {
    if pi.mass().dim() != cost.dim() || pi.mass().dim() != reference.mass().dim() {
        return Err(Error::DimMismatch(
            "coupling, cost and reference shapes disagree".into(),
        ));
    }
    let mut linear = F::zero();
    for (p, c) in pi.mass().iter().zip(cost.values().iter()) {
        linear += *p * *c;
    }
    let kl = kl_matrix(pi.mass(), reference.mass());
    Ok(linear + epsilon * kl)
}

/// `KL(p ∥ q) = Σ p·ln(p/q)` over identically shaped couplings; infinite when
/// `p` charges a cell where `q` vanishes.
pub fn kl_divergence<F: Real>(p: &Coupling<F>, q: &Coupling<F>) -> Result<F> {
    if p.mass().dim() != q.mass().dim() {
        return Err(Error::DimMismatch("couplings have different shapes".into()));
    }
    Ok(kl_matrix(p.mass(), q.mass()))
}

fn kl_matrix<F: Real>(p: &Array2<F>, q: &Array2<F>) -> F {
    let mut acc = F::zero();
    for (&pv, &qv) in p.iter().zip(q.iter()) {
        if pv > F::zero() {
            if qv > F::zero() {
                acc += pv * (pv / qv).ln();
            } else {
                return F::infinity();
            }
        }
    }
    acc
}

/// Raw numbers behind one empirical-Lipschitz observation for the map
/// `cost ↦ plan` at fixed marginals.
#[derive(Debug, Clone)]
pub struct LipschitzReport<F> {
    /// `coupling_w1(plan(c1), plan(c2)) / max|c1-c2|`.
    pub ratio: F,
    pub w1: F,
    pub cost_gap: F,
}

/// Solves both costs on the same marginals and reports the W1-vs-cost-gap
/// ratio. A zero gap is a guard error rather than an infinite ratio.
pub fn lipschitz_probe<F: Real>(
    c1: &CostMatrix<F>,
    c2: &CostMatrix<F>,
    mu: &DiscreteMeasure<F>,
    nu: &DiscreteMeasure<F>,
    cfg: &SinkhornConfig<F>,
) -> Result<LipschitzReport<F>> {
    let cost_gap = c1.sup_distance(c2)?;
    if cost_gap == F::zero() {
        return Err(Error::ZeroCostGap);
    }
    let s1 = sinkhorn_solve(c1, mu, nu, cfg)?;
    let s2 = sinkhorn_solve(c2, mu, nu, cfg)?;
    let w1 = coupling_w1(&s1.coupling, &s2.coupling)?;
    Ok(LipschitzReport {
        ratio: w1 / cost_gap,
        w1,
        cost_gap,
    })
}

/// Per-step record of the cost-sequence stability probe: solve `c + dir/n`
/// for decreasing perturbations and compare against the plan at `c`.
#[derive(Debug, Clone)]
pub struct CostSequenceStep<F> {
    pub n: u32,
    /// `coupling_w1(plan(c_n), plan(c))`.
    pub w1_gap: F,
    /// Objective suboptimality of `plan(c_n)` under the limit cost `c`.
    pub objective_gap: F,
}

/// Stability of the plan and of the objective along `c_n = c + dir/n`.
/// `direction` is rescaled to sup-norm 1 so that `max|c_n - c| = 1/n`.
pub fn cost_sequence_probe<F: Real>(
    cost: &CostMatrix<F>,
    direction: &CostMatrix<F>,
    mu: &DiscreteMeasure<F>,
    nu: &DiscreteMeasure<F>,
    cfg: &SinkhornConfig<F>,
    ns: &[u32],
) -> Result<Vec<CostSequenceStep<F>>> {
    let sup = direction.bound();
    if sup == F::zero() {
        return Err(Error::ZeroCostGap);
    }
    let base = sinkhorn_solve(cost, mu, nu, cfg)?;
    let reference = Coupling::product(mu, nu);
    let base_obj = entropic_objective(&base.coupling, cost, cfg.epsilon, &reference)?;
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        let t = F::one() / (sup * F::from_u32(n).unwrap());
        let cn = cost.add_scaled(direction, t)?;
        let sol = sinkhorn_solve(&cn, mu, nu, cfg)?;
        let w1_gap = coupling_w1(&sol.coupling, &base.coupling)?;
        let obj = entropic_objective(&sol.coupling, cost, cfg.epsilon, &reference)?;
        out.push(CostSequenceStep {
            n,
            w1_gap,
            objective_gap: obj - base_obj,
        });
    }
    Ok(out)
}
