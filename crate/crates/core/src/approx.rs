//! Constructive coupling approximation machinery.
//!
//! Partitions a support with a greedy closed-ball cover, averages a coupling
//! over the product partition (block approximation: marginals survive
//! exactly, integrals of Lipschitz test functions move by at most twice the
//! cell diameter), represents strictly positive couplings as entropic plans
//! via the `cost = -ε·ln density` construction, regularizes arbitrary plans
//! into strictly positive ones under a W1 budget, and probes the stability of
//! Schrödinger potentials under marginal perturbation.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::measures::{Coupling, Density, DiscreteMeasure, Point};
use crate::scalar::{euclidean, fl, Real};
use crate::transport::{coupling_w1, sinkhorn_solve, CostMatrix, SinkhornConfig};

/// Disjoint cover of a support by indexed cells; every cell fits inside a
/// closed ball of radius `1/(4k)`, so its diameter is at most `1/(2k)`.
#[derive(Debug, Clone)]
pub struct Partition {
    cells: Vec<Vec<usize>>,
    k: u32,
}

impl Partition {
    pub fn cells(&self) -> &[Vec<usize>] {
        &self.cells
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    /// Cell index of each atom.
    pub fn cell_of(&self, n_atoms: usize) -> Vec<usize> {
        let mut owner = vec![usize::MAX; n_atoms];
        for (c, cell) in self.cells.iter().enumerate() {
            for &i in cell {
                owner[i] = c;
            }
        }
        owner
    }
}

/// Greedy ball cover in atom-index order: ball `i` is centered at atom `i`
/// with radius `1/(4k)`; cell `i` is ball `i` minus all earlier cells, and
/// empty cells are dropped.
pub fn build_partition<F: Real>(support: &[Point<F>], k: u32) -> Result<Partition> {
    if support.is_empty() {
        return Err(Error::Empty("partition support"));
    }
    if k == 0 {
        return Err(Error::Invalid("partition parameter k must be positive".into()));
    }
    let radius = 1.0 / (4.0 * k as f64);
    let n = support.len();
    let mut assigned = vec![false; n];
    let mut cells = Vec::new();
    for center in 0..n {
        let mut cell = Vec::new();
        for j in 0..n {
            if !assigned[j] {
                let d = euclidean(&support[center].coords, &support[j].coords)
                    .to_f64()
                    .unwrap();
                if d <= radius {
                    cell.push(j);
                }
            }
        }
        if !cell.is_empty() {
            for &j in &cell {
                assigned[j] = true;
            }
            cells.push(cell);
        }
    }
    debug_assert!(assigned.iter().all(|&a| a));
    Ok(Partition { cells, k })
}

/// Block approximation of a coupling over a product partition: the mass of
/// each rectangle of cells is spread product-proportionally inside it, which
/// keeps both marginals exactly. Cells with zero marginal mass contribute
/// nothing (their coupling mass is zero too). Returns the averaged coupling
/// and its piecewise-constant density.
pub fn block_coupling<F: Real>(
    pi: &Coupling<F>,
    px: &Partition,
    py: &Partition,
) -> Result<(Coupling<F>, Density<F>)> {
    let n = pi.nrows();
    let m = pi.ncols();
    let row_cell = px.cell_of(n);
    let col_cell = py.cell_of(m);
    if row_cell.iter().any(|&c| c == usize::MAX) || col_cell.iter().any(|&c| c == usize::MAX) {
        return Err(Error::Invalid("partition does not cover the coupling support".into()));
    }
    let (a, b) = pi.declared_marginals();

    let nc = px.cells.len();
    let mc = py.cells.len();
    let mut cell_mass = Array2::<F>::zeros((nc, mc));
    for i in 0..n {
        for j in 0..m {
            cell_mass[(row_cell[i], col_cell[j])] += pi.mass()[(i, j)];
        }
    }
    let mut cell_mu = vec![F::zero(); nc];
    for i in 0..n {
        cell_mu[row_cell[i]] += a[i];
    }
    let mut cell_nu = vec![F::zero(); mc];
    for j in 0..m {
        cell_nu[col_cell[j]] += b[j];
    }

    let mut density = Array2::<F>::zeros((n, m));
    let mut mass = Array2::<F>::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let (ci, cj) = (row_cell[i], col_cell[j]);
            let denom = cell_mu[ci] * cell_nu[cj];
            let f = if denom > F::zero() {
                cell_mass[(ci, cj)] / denom
            } else {
                F::zero()
            };
            density[(i, j)] = f;
            mass[(i, j)] = f * a[i] * b[j];
        }
    }
    let out = pi.with_mass(mass, fl(crate::measures::EXACT_MARGINAL_TOL))?;
    Ok((out, Density::new(density)?))
}

/// Outcome of the entropic-representation round-trip: recover a strictly
/// positive coupling as the plan of the problem with cost `-ε·ln ρ`.
#[derive(Debug)]
pub struct RoundtripReport<F> {
    pub cost: CostMatrix<F>,
    pub recovered: Coupling<F>,
    pub w1_gap: F,
}

/// Builds `cost = -ε·ln(dπ/d(μ⊗ν))`, re-solves, and reports the W1 gap
/// between the plan and the original coupling. Requires a strictly positive
/// density (regularize first otherwise).
pub fn entropic_representation_roundtrip<F: Real>(
    pi: &Coupling<F>,
    epsilon: F,
    cfg: &SinkhornConfig<F>,
) -> Result<RoundtripReport<F>> {
    let density = Density::from_coupling(pi)?;
    let min = density.min_entry();
    if !(min > F::zero()) {
        return Err(Error::NotStrictlyPositive {
            min: min.to_f64().unwrap_or(f64::NAN),
        });
    }
    let cost = CostMatrix::new(
        density.values().map(|&r| -(epsilon * r.ln())),
    )?;
    let mu = pi.row_measure()?;
    let nu = pi.col_measure()?;
    let mut solve_cfg = cfg.clone();
    solve_cfg.epsilon = epsilon;
    let sol = sinkhorn_solve(&cost, &mu, &nu, &solve_cfg)?;
    let w1_gap = coupling_w1(&sol.coupling, pi)?;
    Ok(RoundtripReport {
        cost,
        recovered: sol.coupling,
        w1_gap,
    })
}

/// Convex mixing with the product of the marginals:
/// `(1-δ)·π + δ·(μ⊗ν)`. Marginals are unchanged and the density acquires the
/// lower bound `δ`.
pub fn regularize_mix<F: Real>(pi: &Coupling<F>, delta: F) -> Result<Coupling<F>> {
    if !(F::zero()..=F::one()).contains(&delta) {
        return Err(Error::Invalid(format!("mixing parameter {delta} outside [0, 1]")));
    }
    let mu = pi.row_measure()?;
    let nu = pi.col_measure()?;
    let product = Coupling::product(&mu, &nu);
    pi.mix(&product, delta)
}

/// Output of the three-stage regularization pipeline.
#[derive(Debug)]
pub struct PipelineReport<F> {
    pub regularized: Coupling<F>,
    pub density: Density<F>,
    pub achieved_w1: F,
    /// Mixing amounts accepted by the two bisection stages.
    pub delta_first: F,
    pub delta_last: F,
}

/// Replaces a coupling by a strictly-positive-density plan within a W1
/// budget, splitting the budget in thirds: (1) mix with the product until
/// the W1 move fits, (2) re-solve entropically with cost `-ln ρ` (certifying
/// the factorized form; on finite supports the density is already continuous
/// so this stage moves the plan only by solver tolerance), (3) a final small
/// mix keeping a uniform positive lower bound.
pub fn regularization_pipeline<F: Real>(
    pi: &Coupling<F>,
    target_w1: F,
    cfg: &SinkhornConfig<F>,
) -> Result<PipelineReport<F>> {
    if !(target_w1 >= F::zero()) {
        return Err(Error::Invalid(format!("target W1 {target_w1} must be nonnegative")));
    }
    let stage_budget = target_w1 / fl(3.0);
    let max_halvings = 60;

    // Stage 1: positivity by mixing. Shrink δ until the W1 move fits.
    let mut delta = fl::<F>(0.5);
    let mut stage1 = None;
    for round in 0..max_halvings {
        let mixed = regularize_mix(pi, delta)?;
        let moved = coupling_w1(&mixed, pi)?;
        if moved <= stage_budget && delta > F::zero() {
            stage1 = Some((mixed, delta));
            break;
        }
        delta = delta / fl(2.0);
        if round + 1 == max_halvings {
            return Err(Error::BudgetUnattainable {
                budget: target_w1.to_f64().unwrap_or(f64::NAN),
                achieved: moved.to_f64().unwrap_or(f64::NAN),
                rounds: max_halvings,
            });
        }
    }
    let (pi1, delta_first) = stage1.expect("loop either breaks or errors");

    // Stage 2: entropic re-solve against the mixed plan's own density.
    let roundtrip = entropic_representation_roundtrip(&pi1, F::one(), cfg)?;
    let pi2 = roundtrip.recovered;

    // Stage 3: final mix for a uniform lower bound, within the last third.
    let mut delta3 = delta_first.min(fl(0.1));
    let mut stage3 = None;
    for round in 0..max_halvings {
        let mixed = regularize_mix(&pi2, delta3)?;
        let moved = coupling_w1(&mixed, &pi2)?;
        if moved <= stage_budget && delta3 > F::zero() {
            stage3 = Some(mixed);
            break;
        }
        delta3 = delta3 / fl(2.0);
        if round + 1 == max_halvings {
            return Err(Error::BudgetUnattainable {
                budget: target_w1.to_f64().unwrap_or(f64::NAN),
                achieved: moved.to_f64().unwrap_or(f64::NAN),
                rounds: max_halvings,
            });
        }
    }
    let pi3 = stage3.expect("loop either breaks or errors");

    let achieved_w1 = coupling_w1(&pi3, pi)?;
    if achieved_w1 > target_w1 {
        return Err(Error::BudgetUnattainable {
            budget: target_w1.to_f64().unwrap_or(f64::NAN),
            achieved: achieved_w1.to_f64().unwrap_or(f64::NAN),
            rounds: 2 * max_halvings,
        });
    }
    let density = Density::from_coupling(&pi3)?;
    Ok(PipelineReport {
        regularized: pi3,
        density,
        achieved_w1,
        delta_first,
        delta_last: delta3,
    })
}

/// One row of the Schrödinger-potential perturbation probe.
#[derive(Debug, Clone)]
pub struct PerturbationStep<F> {
    /// `max_{i,j} |u_n[i]·v_n[j] - 1|` after gauge normalization.
    pub uv_deviation: F,
    /// W1 distance of the perturbed plan to the unperturbed one.
    pub w1_to_limit: F,
}

/// Solves the entropic problem with cost `-ε·ln s0` against each perturbed
/// marginal pair and reports how far the potentials drift from the constant
/// pair `(1, 1)` that solves the unperturbed problem. Supports must match
/// exactly: the probe perturbs weights only.
pub fn schrodinger_perturbation_probe<F: Real>(
    s0: &Density<F>,
    mu0: &DiscreteMeasure<F>,
    nu0: &DiscreteMeasure<F>,
    perturbed: &[(DiscreteMeasure<F>, DiscreteMeasure<F>)],
    cfg: &SinkhornConfig<F>,
) -> Result<Vec<PerturbationStep<F>>> {
    let min = s0.min_entry();
    if !(min > F::zero()) {
        return Err(Error::NotStrictlyPositive {
            min: min.to_f64().unwrap_or(f64::NAN),
        });
    }
    let (n, m) = s0.values().dim();
    if n != mu0.len() || m != nu0.len() {
        return Err(Error::DimMismatch("density shape does not match the base measures".into()));
    }
    // The base density must couple (μ0, ν0): u = v = 1 solves the entropic
    // problem there, which is the gauge every step is compared against.
    let a0 = mu0.weights();
    let b0 = nu0.weights();
    let feasible_tol = fl::<F>(1e-8);
    for i in 0..n {
        let mut s = F::zero();
        for j in 0..m {
            s += s0.values()[(i, j)] * b0[j];
        }
        if (s - F::one()).abs() > feasible_tol {
            return Err(Error::Invalid(format!(
                "base density row {i} integrates to {s}, not 1: s0 must couple the base measures"
            )));
        }
    }
    for j in 0..m {
        let mut s = F::zero();
        for i in 0..n {
            s += s0.values()[(i, j)] * a0[i];
        }
        if (s - F::one()).abs() > feasible_tol {
            return Err(Error::Invalid(format!(
                "base density column {j} integrates to {s}, not 1: s0 must couple the base measures"
            )));
        }
    }

    let cost = CostMatrix::new(s0.values().map(|&r| -(cfg.epsilon * r.ln())))?;
    let base_mass = Array2::from_shape_fn((n, m), |(i, j)| s0.values()[(i, j)] * a0[i] * b0[j]);
    let base_plan = Coupling::new(
        mu0.support().to_vec(),
        nu0.support().to_vec(),
        base_mass,
        a0.to_vec(),
        b0.to_vec(),
        fl(1e-7),
    )?;

    let mut out = Vec::with_capacity(perturbed.len());
    for (mu_n, nu_n) in perturbed {
        if mu_n.support() != mu0.support() || nu_n.support() != nu0.support() {
            return Err(Error::Invalid(
                "perturbed measures must keep the base supports (weights-only perturbation)".into(),
            ));
        }
        let sol = sinkhorn_solve(&cost, mu_n, nu_n, cfg)?;
        // Potentials are unique up to a scalar gauge; pin u[0] = 1 to match
        // the unperturbed solution (the products u_i·v_j are gauge-free).
        let g = sol.u[0];
        let u: Vec<F> = sol.u.iter().map(|&x| x / g).collect();
        let v: Vec<F> = sol.v.iter().map(|&x| x * g).collect();
        let mut dev = F::zero();
        for &ui in &u {
            for &vj in &v {
                dev = dev.max((ui * vj - F::one()).abs());
            }
        }
        let w1 = coupling_w1(&sol.coupling, &base_plan)?;
        out.push(PerturbationStep {
            uv_deviation: dev,
            w1_to_limit: w1,
        });
    }
    Ok(out)
}

/// Random 1-Lipschitz test functions on the product space (sum metric):
/// lower envelopes of cones `α_k - d(z, anchor_k)`.
pub fn random_lipschitz_functions<F: Real>(
    dim_x: usize,
    dim_y: usize,
    count: usize,
    seed: u64,
) -> Vec<Box<dyn Fn(&Point<F>, &Point<F>) -> F>> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let anchors: Vec<(Vec<F>, Vec<F>, F)> = (0..3)
                .map(|_| {
                    let ax: Vec<F> = (0..dim_x).map(|_| fl(rng.random_range(0.0..1.0))).collect();
                    let ay: Vec<F> = (0..dim_y).map(|_| fl(rng.random_range(0.0..1.0))).collect();
                    let level: F = fl(rng.random_range(0.0..1.0));
                    (ax, ay, level)
                })
                .collect();
            let f = move |x: &Point<F>, y: &Point<F>| {
                anchors
                    .iter()
                    .map(|(ax, ay, level)| {
                        *level - (euclidean(&x.coords, ax) + euclidean(&y.coords, ay))
                    })
                    .fold(F::neg_infinity(), F::max)
            };
            Box::new(f) as Box<dyn Fn(&Point<F>, &Point<F>) -> F>
        })
        .collect()
}
