//! Finitely supported probability measures over an embedding space, product
//! measures, couplings with prescribed marginals, and marginal arithmetic.
//!
//! A "text" is a measure: atoms are token embeddings, weights are atom masses.
//! A contextual relation between two texts is a coupling: a nonnegative matrix
//! over the pair of supports whose row sums and column sums reproduce the two
//! marginal weight vectors.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::{fl, Real};

/// Absolute tolerance on the total mass of a probability measure.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Absolute tolerance on the total mass of a coupling.
pub const COUPLING_MASS_TOL: f64 = 1e-10;
/// Default tolerance on coupling marginals.
pub const MARGINAL_TOL: f64 = 1e-8;
/// Tolerance expected of couplings built analytically (products, block averages).
pub const EXACT_MARGINAL_TOL: f64 = 1e-12;

/// A point of the embedding space. Positional information, if any, is already
/// appended into the coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Point<F> {
    pub coords: Vec<F>,
}

impl<F: Real> Point<F> {
    pub fn new(coords: Vec<F>) -> Result<Self> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Invalid("point has non-finite coordinates".into()));
        }
        Ok(Self { coords })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// Finitely supported probability measure (atoms need not be distinct).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure<F> {
    support: Vec<Point<F>>,
    weights: Vec<F>,
}

impl<F: Real> DiscreteMeasure<F> {
    /// Builds a measure, checking normalization and nonnegativity.
    pub fn new(support: Vec<Point<F>>, weights: Vec<F>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Empty("measure support"));
        }
        if support.len() != weights.len() {
            return Err(Error::DimMismatch(format!(
                "{} atoms vs {} weights",
                support.len(),
                weights.len()
            )));
        }
        let d = support[0].dim();
        if support.iter().any(|p| p.dim() != d) {
            return Err(Error::DimMismatch(
                "atoms of one measure must share a dimension".into(),
            ));
        }
        for &w in &weights {
            if !w.is_finite() || w < F::zero() {
                return Err(Error::Invalid(format!("weight {w} is not a finite nonnegative real")));
            }
        }
        let total: F = weights.iter().copied().sum();
        if (total - F::one()).abs() > fl(WEIGHT_SUM_TOL) {
            return Err(Error::Invalid(format!(
                "weights sum to {total}, expected 1 within {WEIGHT_SUM_TOL:e}"
            )));
        }
        Ok(Self { support, weights })
    }

    /// Empirical measure of a token sequence: uniform weights `1/n`.
    pub fn from_tokens(embeddings: Vec<Point<F>>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Empty("token list"));
        }
        let n = embeddings.len();
        let w = F::one() / F::from_usize(n).unwrap();
        // Force exact normalization: the last weight absorbs rounding.
        let mut weights = vec![w; n];
        let partial: F = weights[..n - 1].iter().copied().sum();
        weights[n - 1] = F::one() - partial;
        Self::new(embeddings, weights)
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.support[0].dim()
    }

    pub fn support(&self) -> &[Point<F>] {
        &self.support
    }

    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    /// `Σ w_i f(x_i)`. Errors if `f` is non-finite on an atom.
    pub fn integrate(&self, f: impl Fn(&Point<F>) -> F) -> Result<F> {
        let mut acc = F::zero();
        for (p, &w) in self.support.iter().zip(&self.weights) {
            let v = f(p);
            if !v.is_finite() {
                return Err(Error::Numeric("test function is non-finite on an atom".into()));
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// Largest pairwise distance between support atoms.
    pub fn diameter(&self, metric: impl Fn(&Point<F>, &Point<F>) -> F) -> F {
        let mut d = F::zero();
        for i in 0..self.support.len() {
            for j in (i + 1)..self.support.len() {
                d = d.max(metric(&self.support[i], &self.support[j]));
            }
        }
        d
    }
}

/// Joint measure over a pair of supports with declared marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling<F> {
    row_support: Vec<Point<F>>,
    col_support: Vec<Point<F>>,
    mass: Array2<F>,
    row_marginal: Vec<F>,
    col_marginal: Vec<F>,
}

impl<F: Real> Coupling<F> {
    /// Builds a coupling and verifies it against the declared marginals, both
    /// within `marginal_tol` (L∞ on row/column sums).
    pub fn new(
        row_support: Vec<Point<F>>,
        col_support: Vec<Point<F>>,
        mass: Array2<F>,
        row_marginal: Vec<F>,
        col_marginal: Vec<F>,
        marginal_tol: F,
    ) -> Result<Self> {
        let (n, m) = mass.dim();
        if row_support.len() != n || col_support.len() != m {
            return Err(Error::DimMismatch(format!(
                "mass is {n}x{m} but supports are {}x{}",
                row_support.len(),
                col_support.len()
            )));
        }
        if row_marginal.len() != n || col_marginal.len() != m {
            return Err(Error::DimMismatch("marginal lengths disagree with mass".into()));
        }
        let mut total = F::zero();
        for &v in mass.iter() {
            if !v.is_finite() || v < F::zero() {
                return Err(Error::Invalid(format!("mass entry {v} is not a finite nonnegative real")));
            }
            total += v;
        }
        if (total - F::one()).abs() > fl(COUPLING_MASS_TOL) {
            return Err(Error::Invalid(format!(
                "coupling total mass {total} differs from 1 beyond {COUPLING_MASS_TOL:e}"
            )));
        }
        let c = Self {
            row_support,
            col_support,
            mass,
            row_marginal,
            col_marginal,
        };
        let (rdev, cdev) = c.marginal_deviation();
        if rdev > marginal_tol || cdev > marginal_tol {
            return Err(Error::Invalid(format!(
                "marginal deviation (rows {rdev}, cols {cdev}) exceeds tol {marginal_tol}"
            )));
        }
        Ok(c)
    }

    /// Independence coupling `μ⊗ν`: `mass[i,j] = a_i b_j`. Marginals are exact.
    pub fn product(mu: &DiscreteMeasure<F>, nu: &DiscreteMeasure<F>) -> Self {
        let n = mu.len();
        let m = nu.len();
        let mass = Array2::from_shape_fn((n, m), |(i, j)| mu.weights[i] * nu.weights[j]);
        Self {
            row_support: mu.support.clone(),
            col_support: nu.support.clone(),
            mass,
            row_marginal: mu.weights.clone(),
            col_marginal: nu.weights.clone(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.mass.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.mass.ncols()
    }

    pub fn mass(&self) -> &Array2<F> {
        &self.mass
    }

    pub fn row_support(&self) -> &[Point<F>] {
        &self.row_support
    }

    pub fn col_support(&self) -> &[Point<F>] {
        &self.col_support
    }

    /// The marginals the coupling was declared against.
    pub fn declared_marginals(&self) -> (&[F], &[F]) {
        (&self.row_marginal, &self.col_marginal)
    }

    /// Row and column sums of the mass matrix.
    pub fn marginals(&self) -> (Vec<F>, Vec<F>) {
        let n = self.nrows();
        let m = self.ncols();
        let mut rows = vec![F::zero(); n];
        let mut cols = vec![F::zero(); m];
        for i in 0..n {
            for j in 0..m {
                let v = self.mass[(i, j)];
                rows[i] += v;
                cols[j] += v;
            }
        }
        (rows, cols)
    }

    /// L∞ deviation of the actual marginals from the declared ones.
    pub fn marginal_deviation(&self) -> (F, F) {
        let (rows, cols) = self.marginals();
        let rdev = rows
            .iter()
            .zip(&self.row_marginal)
            .map(|(&s, &a)| (s - a).abs())
            .fold(F::zero(), F::max);
        let cdev = cols
            .iter()
            .zip(&self.col_marginal)
            .map(|(&s, &b)| (s - b).abs())
            .fold(F::zero(), F::max);
        (rdev, cdev)
    }

    /// `Σ mass[i,j] f(x_i, y_j)`.
    pub fn integrate(&self, f: impl Fn(&Point<F>, &Point<F>) -> F) -> Result<F> {
        let mut acc = F::zero();
        for i in 0..self.nrows() {
            for j in 0..self.ncols() {
                let v = f(&self.row_support[i], &self.col_support[j]);
                if !v.is_finite() {
                    return Err(Error::Numeric(
                        "test function is non-finite on a support pair".into(),
                    ));
                }
                acc += self.mass[(i, j)] * v;
            }
        }
        Ok(acc)
    }

    /// View of the row marginal as a measure.
    pub fn row_measure(&self) -> Result<DiscreteMeasure<F>> {
        DiscreteMeasure::new(self.row_support.clone(), self.row_marginal.clone())
    }

    /// View of the column marginal as a measure.
    pub fn col_measure(&self) -> Result<DiscreteMeasure<F>> {
        DiscreteMeasure::new(self.col_support.clone(), self.col_marginal.clone())
    }

    /// Convex combination `(1-t)·self + t·other` over identical supports and
    /// marginals. Marginals are preserved exactly.
    pub fn mix(&self, other: &Coupling<F>, t: F) -> Result<Coupling<F>> {
        if self.nrows() != other.nrows() || self.ncols() != other.ncols() {
            return Err(Error::DimMismatch("couplings have different shapes".into()));
        }
        if t < F::zero() || t > F::one() {
            return Err(Error::Invalid(format!("mix parameter {t} outside [0, 1]")));
        }
        let mass = Array2::from_shape_fn(self.mass.dim(), |(i, j)| {
            (F::one() - t) * self.mass[(i, j)] + t * other.mass[(i, j)]
        });
        Ok(Coupling {
            row_support: self.row_support.clone(),
            col_support: self.col_support.clone(),
            mass,
            row_marginal: self.row_marginal.clone(),
            col_marginal: self.col_marginal.clone(),
        })
    }

    /// Replaces the mass matrix, revalidating against the declared marginals.
    pub fn with_mass(&self, mass: Array2<F>, marginal_tol: F) -> Result<Coupling<F>> {
        Coupling::new(
            self.row_support.clone(),
            self.col_support.clone(),
            mass,
            self.row_marginal.clone(),
            self.col_marginal.clone(),
            marginal_tol,
        )
    }
}

/// Density of a coupling with respect to the product of its marginals, on the
/// product of the supports.
#[derive(Debug, Clone, PartialEq)]
pub struct Density<F> {
    values: Array2<F>,
}

impl<F: Real> Density<F> {
    pub fn new(values: Array2<F>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("density has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    /// `dπ/d(μ⊗ν)` entrywise: `mass[i,j] / (a_i b_j)` with `0/0 = 0`.
    /// Positive mass over a null product cell is rejected.
    pub fn from_coupling(pi: &Coupling<F>) -> Result<Self> {
        let (a, b) = pi.declared_marginals();
        let mut values = Array2::zeros(pi.mass().dim());
        for i in 0..pi.nrows() {
            for j in 0..pi.ncols() {
                let ref_mass = a[i] * b[j];
                let m = pi.mass()[(i, j)];
                if ref_mass > F::zero() {
                    values[(i, j)] = m / ref_mass;
                } else if m > F::zero() {
                    return Err(Error::Invalid(
                        "coupling mass on a product-null cell has no density".into(),
                    ));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<F> {
        &self.values
    }

    pub fn min_entry(&self) -> F {
        self.values.iter().copied().fold(F::infinity(), F::min)
    }

    pub fn max_entry(&self) -> F {
        self.values.iter().copied().fold(F::neg_infinity(), F::max)
    }

    /// Checks `Σ values[i,j]·a_i·b_j = 1` within `COUPLING_MASS_TOL`.
    pub fn check_probability(&self, a: &[F], b: &[F]) -> Result<()> {
        let mut total = F::zero();
        for i in 0..self.values.nrows() {
            for j in 0..self.values.ncols() {
                total += self.values[(i, j)] * a[i] * b[j];
            }
        }
        if (total - F::one()).abs() > fl(COUPLING_MASS_TOL) {
            return Err(Error::Invalid(format!(
                "density integrates to {total}, expected 1 within {COUPLING_MASS_TOL:e}"
            )));
        }
        Ok(())
    }
}

/// Uniform measure over the given coordinates (test/CLI convenience).
pub fn uniform_measure<F: Real>(coords: Vec<Vec<F>>) -> Result<DiscreteMeasure<F>> {
    let pts = coords
        .into_iter()
        .map(Point::new)
        .collect::<Result<Vec<_>>>()?;
    DiscreteMeasure::from_tokens(pts)
}

/// Weight vector of the product reference measure, as a flat row-major array.
pub fn product_weights<F: Real>(a: &[F], b: &[F]) -> Array1<F> {
    let mut out = Array1::zeros(a.len() * b.len());
    let mut k = 0;
    for &ai in a {
        for &bj in b {
            out[k] = ai * bj;
            k += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::euclidean;
    use proptest::prelude::*;

    fn pt(coords: &[f64]) -> Point<f64> {
        Point::new(coords.to_vec()).unwrap()
    }

    #[test]
    fn from_tokens_single_atom() {
        let mu = DiscreteMeasure::from_tokens(vec![pt(&[1.0, 2.0])]).unwrap();
        assert_eq!(mu.weights(), &[1.0]);
    }

    #[test]
    fn from_tokens_uniform_thirds() {
        let mu =
            DiscreteMeasure::from_tokens(vec![pt(&[0.0]), pt(&[1.0]), pt(&[2.0])]).unwrap();
        for &w in mu.weights() {
            assert!((w - 1.0 / 3.0).abs() <= 1e-15);
        }
        let total: f64 = mu.weights().iter().sum();
        assert!((total - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn duplicate_atoms_integrate_like_merged_atom() {
        let dup = DiscreteMeasure::from_tokens(vec![pt(&[0.3, 0.7]), pt(&[0.3, 0.7])]).unwrap();
        assert_eq!(dup.weights(), &[0.5, 0.5]);
        let single = DiscreteMeasure::from_tokens(vec![pt(&[0.3, 0.7])]).unwrap();
        let f = |p: &Point<f64>| (p.coords[0] * 2.0 + p.coords[1]).sin();
        let a = dup.integrate(f).unwrap();
        let b = single.integrate(f).unwrap();
        assert!((a - b).abs() <= 1e-15);
    }

    #[test]
    fn from_tokens_rejects_empty_and_mixed_dims() {
        assert!(matches!(
            DiscreteMeasure::<f64>::from_tokens(vec![]),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            DiscreteMeasure::from_tokens(vec![pt(&[0.0]), pt(&[0.0, 1.0])]),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn product_coupling_uniform_two_by_two() {
        let mu = uniform_measure(vec![vec![0.0], vec![1.0]]).unwrap();
        let nu = uniform_measure(vec![vec![0.5], vec![1.5]]).unwrap();
        let pi = Coupling::product(&mu, &nu);
        for v in pi.mass().iter() {
            assert!((v - 0.25).abs() <= 1e-15);
        }
    }

    #[test]
    fn product_coupling_single_row_is_forced() {
        let mu = DiscreteMeasure::new(vec![pt(&[0.0])], vec![1.0]).unwrap();
        let nu =
            DiscreteMeasure::new(vec![pt(&[1.0]), pt(&[2.0])], vec![0.3, 0.7]).unwrap();
        let pi = Coupling::product(&mu, &nu);
        assert!((pi.mass()[(0, 0)] - 0.3).abs() <= 1e-15);
        assert!((pi.mass()[(0, 1)] - 0.7).abs() <= 1e-15);
    }

    #[test]
    fn product_coupling_outer_product_values() {
        let mu =
            DiscreteMeasure::new(vec![pt(&[0.0]), pt(&[1.0])], vec![0.2, 0.8]).unwrap();
        let nu =
            DiscreteMeasure::new(vec![pt(&[0.0]), pt(&[1.0])], vec![0.5, 0.5]).unwrap();
        let pi = Coupling::product(&mu, &nu);
        let expect = [[0.1, 0.1], [0.4, 0.4]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((pi.mass()[(i, j)] - expect[i][j]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn marginals_of_product_recover_inputs() {
        let mu =
            DiscreteMeasure::new(vec![pt(&[0.0]), pt(&[1.0])], vec![0.2, 0.8]).unwrap();
        let nu = uniform_measure(vec![vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let pi = Coupling::product(&mu, &nu);
        let (rows, cols) = pi.marginals();
        for (r, w) in rows.iter().zip(mu.weights()) {
            assert!((r - w).abs() <= 1e-15);
        }
        for (c, w) in cols.iter().zip(nu.weights()) {
            assert!((c - w).abs() <= 1e-15);
        }
    }

    #[test]
    fn marginals_match_brute_force_double_loop() {
        // Fixed 3x4 nonnegative matrix normalized to total mass 1.
        let raw = [
            [0.3, 1.1, 0.2, 0.9],
            [0.0, 0.5, 1.3, 0.4],
            [0.7, 0.2, 0.6, 0.8],
        ];
        let total: f64 = raw.iter().flatten().sum();
        let mass = Array2::from_shape_fn((3, 4), |(i, j)| raw[i][j] / total);
        let rows: Vec<f64> = (0..3).map(|i| (0..4).map(|j| mass[(i, j)]).sum()).collect();
        let cols: Vec<f64> = (0..4).map(|j| (0..3).map(|i| mass[(i, j)]).sum()).collect();
        let rs: Vec<Point<f64>> = (0..3).map(|i| pt(&[i as f64])).collect();
        let cs: Vec<Point<f64>> = (0..4).map(|j| pt(&[j as f64])).collect();
        let pi = Coupling::new(rs, cs, mass.clone(), rows, cols, fl(EXACT_MARGINAL_TOL)).unwrap();

        // Independent summation oracle.
        let (r, c) = pi.marginals();
        for i in 0..3 {
            let mut s = 0.0;
            for j in 0..4 {
                s += mass[(i, j)];
            }
            assert!((r[i] - s).abs() <= 1e-15);
        }
        for j in 0..4 {
            let mut s = 0.0;
            for i in 0..3 {
                s += mass[(i, j)];
            }
            assert!((c[j] - s).abs() <= 1e-15);
        }
    }

    #[test]
    fn integrate_constant_is_one() {
        let mu = uniform_measure(vec![vec![0.0], vec![1.0], vec![5.0]]).unwrap();
        let v = mu.integrate(|_| 1.0).unwrap();
        assert!((v - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn integrate_first_coordinate_on_uniform_zero_one() {
        let mu = uniform_measure(vec![vec![0.0], vec![1.0]]).unwrap();
        let v = mu.integrate(|p| p.coords[0]).unwrap();
        assert!((v - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn integrate_lipschitz_bump_matches_hand_sum() {
        let coords = [[0.1, 0.2], [0.9, 0.4], [0.5, 0.5], [0.3, 0.8], [0.7, 0.1]];
        let weights = [0.1, 0.2, 0.3, 0.15, 0.25];
        let pts: Vec<Point<f64>> = coords.iter().map(|c| pt(c)).collect();
        let mu = DiscreteMeasure::new(pts.clone(), weights.to_vec()).unwrap();
        let anchor = pt(&[0.4, 0.6]);
        let bump = |p: &Point<f64>| (1.0 - euclidean(&p.coords, &anchor.coords)).max(0.0);
        let got = mu.integrate(bump).unwrap();
        let mut want = 0.0;
        for (p, w) in pts.iter().zip(weights) {
            want += w * bump(p);
        }
        assert!((got - want).abs() <= 1e-15);
    }

    #[test]
    fn integrate_rejects_non_finite_values() {
        let mu = uniform_measure(vec![vec![0.0], vec![1.0]]).unwrap();
        let r = mu.integrate(|p| 1.0 / p.coords[0]);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn separable_integrand_factorizes_over_product() {
        let mu =
            DiscreteMeasure::new(vec![pt(&[0.2]), pt(&[0.9])], vec![0.4, 0.6]).unwrap();
        let nu = uniform_measure(vec![vec![0.1], vec![0.5], vec![0.8]]).unwrap();
        let pi = Coupling::product(&mu, &nu);
        let f = |p: &Point<f64>| (p.coords[0] + 1.0).ln();
        let g = |p: &Point<f64>| p.coords[0].cos();
        let joint = pi.integrate(|x, y| f(x) * g(y)).unwrap();
        let split = mu.integrate(f).unwrap() * nu.integrate(g).unwrap();
        assert!((joint - split).abs() <= 1e-10);
    }

    #[test]
    fn entrywise_limit_of_fixed_marginal_sequence_keeps_marginals() {
        // π_t = (1-2^-t)·π + 2^-t·π' with common marginals; the entrywise
        // limit is π and must satisfy the same marginal contract.
        let mu = uniform_measure(vec![vec![0.0], vec![1.0]]).unwrap();
        let nu = uniform_measure(vec![vec![0.0], vec![1.0]]).unwrap();
        let prod = Coupling::product(&mu, &nu);
        let diag = prod
            .with_mass(
                Array2::from_shape_fn((2, 2), |(i, j)| if i == j { 0.5 } else { 0.0 }),
                fl(EXACT_MARGINAL_TOL),
            )
            .unwrap();
        let mut seq = Vec::new();
        for t in 0..30 {
            let mix = diag.mix(&prod, 0.5f64.powi(t)).unwrap();
            seq.push(mix);
        }
        // Numerical entrywise limit = last element of the convergent sequence.
        let limit = seq.last().unwrap();
        let (rdev, cdev) = limit.marginal_deviation();
        assert!(rdev <= 1e-10 && cdev <= 1e-10);
    }

    proptest! {
        #[test]
        fn measure_invariants_hold_for_arbitrary_token_lists(
            n in 1usize..12,
            d in 1usize..4,
            seed in 0u64..1000,
        ) {
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let pts: Vec<Point<f64>> = (0..n)
                .map(|_| Point::new((0..d).map(|_| next()).collect()).unwrap())
                .collect();
            let mu = DiscreteMeasure::from_tokens(pts).unwrap();
            let total: f64 = mu.weights().iter().sum();
            prop_assert!((total - 1.0).abs() <= WEIGHT_SUM_TOL);
            prop_assert!(mu.weights().iter().all(|&w| w >= 0.0));
        }

        #[test]
        fn product_coupling_marginals_within_exact_tol(
            na in 1usize..7,
            nb in 1usize..7,
            seed in 0u64..1000,
        ) {
            let mut state = seed.wrapping_add(7);
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                0.05 + 0.95 * ((state >> 11) as f64 / (1u64 << 53) as f64)
            };
            let mk = |n: usize, next: &mut dyn FnMut() -> f64| {
                let raw: Vec<f64> = (0..n).map(|_| next()).collect();
                let s: f64 = raw.iter().sum();
                let pts: Vec<Point<f64>> = (0..n).map(|i| Point::new(vec![i as f64]).unwrap()).collect();
                DiscreteMeasure::new(pts, raw.iter().map(|w| w / s).collect()).unwrap()
            };
            let mu = mk(na, &mut next);
            let nu = mk(nb, &mut next);
            let pi = Coupling::product(&mu, &nu);
            let (rdev, cdev) = pi.marginal_deviation();
            prop_assert!(rdev.max(cdev) <= EXACT_MARGINAL_TOL);
        }
    }
}
