//! Measure-valued multi-head attention, pointwise MLPs, context-operator
//! pushforward and layer composition.
//!
//! Attention here integrates a score-weighted softmax against a probability
//! measure instead of summing over rows; on empirical measures the atom
//! weights cancel and the classical row-softmax formulation is recovered
//! exactly, which [`classical_attention_rows`] implements independently as a
//! cross-check.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, Point};
use crate::scalar::{fl, Real};

/// One attention head: query/key projections (`k_h × d`), value projection
/// (`d_v × d`) and output mix (`d × d_v`). Parameter containers are generic
/// over the element so the same structure can carry scalars or autodiff
/// variables.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeadParams<E> {
    pub q_mat: Array2<E>,
    pub k_mat: Array2<E>,
    pub v_mat: Array2<E>,
    pub w_mat: Array2<E>,
}

impl<E> AttentionHeadParams<E> {
    pub fn key_dim(&self) -> usize {
        self.q_mat.nrows()
    }

    pub fn map<T>(&self, mut f: impl FnMut(&E) -> T) -> AttentionHeadParams<T> {
        AttentionHeadParams {
            q_mat: self.q_mat.map(&mut f),
            k_mat: self.k_mat.map(&mut f),
            v_mat: self.v_mat.map(&mut f),
            w_mat: self.w_mat.map(&mut f),
        }
    }
}

/// Two-layer perceptron `x ↦ W2·silu(W1·x + b1) + b2` acting pointwise.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<E> {
    pub w1: Array2<E>,
    pub b1: Array1<E>,
    pub w2: Array2<E>,
    pub b2: Array1<E>,
}

impl<E> MlpParams<E> {
    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn map<T>(&self, mut f: impl FnMut(&E) -> T) -> MlpParams<T> {
        MlpParams {
            w1: self.w1.map(&mut f),
            b1: self.b1.map(&mut f),
            w2: self.w2.map(&mut f),
            b2: self.b2.map(&mut f),
        }
    }
}

/// One encoder layer: attention heads with the residual add, then an optional
/// pointwise map. `None` is the exact identity (an MLP with a smooth
/// activation can only approximate it).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<E> {
    pub heads: Vec<AttentionHeadParams<E>>,
    pub mlp: Option<MlpParams<E>>,
}

impl<E> EncoderLayer<E> {
    pub fn map<T>(&self, mut f: impl FnMut(&E) -> T) -> EncoderLayer<T> {
        EncoderLayer {
            heads: self.heads.iter().map(|h| h.map(&mut f)).collect(),
            mlp: self.mlp.as_ref().map(|m| m.map(&mut f)),
        }
    }
}

/// Stacked layers of one encoder branch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<E> {
    pub layers: Vec<EncoderLayer<E>>,
}

impl<E> EncoderParams<E> {
    pub fn map<T>(&self, mut f: impl FnMut(&E) -> T) -> EncoderParams<T> {
        EncoderParams {
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
        }
    }

    /// Visits every parameter entry in a fixed order (layers, then heads with
    /// q/k/v/w, then mlp w1/b1/w2/b2); the flattening order used everywhere.
    pub fn for_each(&self, mut f: impl FnMut(&E)) {
        for layer in &self.layers {
            for head in &layer.heads {
                head.q_mat.iter().for_each(&mut f);
                head.k_mat.iter().for_each(&mut f);
                head.v_mat.iter().for_each(&mut f);
                head.w_mat.iter().for_each(&mut f);
            }
            if let Some(mlp) = &layer.mlp {
                mlp.w1.iter().for_each(&mut f);
                mlp.b1.iter().for_each(&mut f);
                mlp.w2.iter().for_each(&mut f);
                mlp.b2.iter().for_each(&mut f);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_| n += 1);
        n
    }
}

impl<E> EncoderParams<E> {
    /// Rebuilds parameters shaped like `self` from a flat slice (same order
    /// as [`EncoderParams::flatten`]), possibly with a new element type.
    pub fn rebuild<T: Copy>(&self, flat: &[T]) -> EncoderParams<T> {
        let mut iter = flat.iter();
        let out = self.map(|_| *iter.next().expect("flat parameter vector too short"));
        assert!(iter.next().is_none(), "flat parameter vector too long");
        out
    }
}

impl<E: Copy> EncoderParams<E> {
    pub fn flatten(&self) -> Vec<E> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each(|&e| out.push(e));
        out
    }

    pub fn from_flat(&self, flat: &[E]) -> EncoderParams<E> {
        self.rebuild(flat)
    }
}

impl<F: Real> EncoderParams<F> {
    /// Validates the dimension chain and returns the output dimension for a
    /// given input dimension. The residual add forces every attention block
    /// to preserve the dimension; only the pointwise maps may change it.
    pub fn validate(&self, input_dim: usize) -> Result<usize> {
        if self.layers.is_empty() {
            return Err(Error::Empty("encoder layers"));
        }
        let mut d = input_dim;
        for (li, layer) in self.layers.iter().enumerate() {
            for (hi, head) in layer.heads.iter().enumerate() {
                let k_h = head.q_mat.nrows();
                if head.q_mat.ncols() != d
                    || head.k_mat.ncols() != d
                    || head.k_mat.nrows() != k_h
                    || head.v_mat.ncols() != d
                    || head.w_mat.ncols() != head.v_mat.nrows()
                    || head.w_mat.nrows() != d
                {
                    return Err(Error::DimMismatch(format!(
                        "layer {li} head {hi} is inconsistent with width {d}"
                    )));
                }
            }
            if let Some(mlp) = &layer.mlp {
                if mlp.input_dim() != d
                    || mlp.b1.len() != mlp.w1.nrows()
                    || mlp.w2.ncols() != mlp.w1.nrows()
                    || mlp.b2.len() != mlp.w2.nrows()
                {
                    return Err(Error::DimMismatch(format!(
                        "layer {li} mlp is inconsistent with width {d}"
                    )));
                }
                d = mlp.output_dim();
            }
        }
        Ok(d)
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|&x| ok &= x.is_finite());
        ok
    }
}

/// Architecture description used to draw fresh parameters.
#[derive(Debug, Clone)]
pub struct EncoderShape {
    pub input_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub output_dim: usize,
}

impl EncoderShape {
    /// Uniform `[-s, s]` entries with `s = 1/√fan_in`; biases start at zero.
    /// Internal layers keep the input width; the final pointwise map changes
    /// it to `output_dim`.
    pub fn init<F: Real>(&self, rng: &mut ChaCha12Rng) -> EncoderParams<F> {
        let d = self.input_dim;
        let mut mat = |rows: usize, cols: usize| {
            let s = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| fl::<F>(rng.random_range(-s..s)))
        };
        let layers = (0..self.layers)
            .map(|li| {
                let heads = (0..self.heads)
                    .map(|_| AttentionHeadParams {
                        q_mat: mat(self.key_dim, d),
                        k_mat: mat(self.key_dim, d),
                        v_mat: mat(self.value_dim, d),
                        w_mat: mat(d, self.value_dim),
                    })
                    .collect();
                let out_dim = if li + 1 == self.layers { self.output_dim } else { d };
                let mlp = MlpParams {
                    w1: mat(self.hidden_dim, d),
                    b1: Array1::zeros(self.hidden_dim),
                    w2: mat(out_dim, self.hidden_dim),
                    b2: Array1::zeros(out_dim),
                };
                EncoderLayer {
                    heads,
                    mlp: Some(mlp),
                }
            })
            .collect();
        EncoderParams { layers }
    }
}

/// `x·σ(x)`, the smooth activation used by every pointwise map.
pub fn silu<F: Real>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

/// Measure-weighted softmax over the atoms of `mu` at query point `x`:
/// `w_j = a_j·exp(s_j - M) / Σ_i a_i·exp(s_i - M)` with scores
/// `s_j = ⟨Qx, Ky_j⟩/√k_h` and `M = max s`.
pub fn softmax_measure_weights<F: Real>(
    head: &AttentionHeadParams<F>,
    mu: &DiscreteMeasure<F>,
    x: &Point<F>,
) -> Result<Vec<F>> {
    let scores = attention_scores(head, mu, x)?;
    Ok(weighted_softmax(&scores, mu.weights()))
}

fn attention_scores<F: Real>(
    head: &AttentionHeadParams<F>,
    mu: &DiscreteMeasure<F>,
    x: &Point<F>,
) -> Result<Vec<F>> {
    if head.q_mat.ncols() != x.dim() || head.k_mat.ncols() != mu.dim() {
        return Err(Error::DimMismatch(
            "attention head does not match the point/measure dimension".into(),
        ));
    }
    let scale = F::one() / F::from_usize(head.key_dim()).unwrap().sqrt();
    let qx = matvec(&head.q_mat, &x.coords);
    Ok(mu
        .support()
        .iter()
        .map(|y| {
            let ky = matvec(&head.k_mat, &y.coords);
            crate::scalar::dot(&qx, &ky) * scale
        })
        .collect())
}

fn weighted_softmax<F: Real>(scores: &[F], weights: &[F]) -> Vec<F> {
    let m = scores.iter().copied().fold(F::neg_infinity(), F::max);
    let raw: Vec<F> = scores
        .iter()
        .zip(weights)
        .map(|(&s, &a)| a * (s - m).exp())
        .collect();
    let total: F = raw.iter().copied().sum();
    raw.into_iter().map(|r| r / total).collect()
}

fn matvec<F: Real>(mat: &Array2<F>, x: &[F]) -> Vec<F> {
    let (rows, cols) = mat.dim();
    debug_assert_eq!(cols, x.len());
    (0..rows)
        .map(|r| {
            let mut acc = F::zero();
            for c in 0..cols {
                acc += mat[(r, c)] * x[c];
            }
            acc
        })
        .collect()
}

/// Multi-head attention with the residual add:
/// `x + Σ_h W^h · Σ_j w^h_j · V^h y_j` where `w^h` is the measure-weighted
/// softmax (the atom weights inside `w` absorb the `dμ` factor).
pub fn attention_forward<F: Real>(
    heads: &[AttentionHeadParams<F>],
    mu: &DiscreteMeasure<F>,
    x: &Point<F>,
) -> Result<Point<F>> {
    let d = x.dim();
    let mut out = x.coords.clone();
    for head in heads {
        if head.w_mat.nrows() != d {
            return Err(Error::DimMismatch(
                "head output dimension must match the query point for the residual add".into(),
            ));
        }
        let w = softmax_measure_weights(head, mu, x)?;
        let dv = head.v_mat.nrows();
        let mut agg = vec![F::zero(); dv];
        for (y, &wj) in mu.support().iter().zip(&w) {
            let vy = matvec(&head.v_mat, &y.coords);
            for (acc, val) in agg.iter_mut().zip(&vy) {
                *acc += wj * *val;
            }
        }
        let mixed = matvec(&head.w_mat, &agg);
        for (o, m) in out.iter_mut().zip(&mixed) {
            *o += *m;
        }
    }
    Ok(Point { coords: out })
}

/// Classical multi-head attention over a token list: row softmax over
/// unweighted scores, no measure construction. Serves as the independent
/// reference for the weight-cancellation identity on empirical measures.
pub fn classical_attention_rows<F: Real>(
    heads: &[AttentionHeadParams<F>],
    tokens: &[Point<F>],
) -> Result<Vec<Point<F>>> {
    if tokens.is_empty() {
        return Err(Error::Empty("token list"));
    }
    let scale = |head: &AttentionHeadParams<F>| {
        F::one() / F::from_usize(head.key_dim()).unwrap().sqrt()
    };
    let mut outputs = Vec::with_capacity(tokens.len());
    for x in tokens {
        let mut out = x.coords.clone();
        for head in heads {
            let qx = matvec(&head.q_mat, &x.coords);
            let s: Vec<F> = tokens
                .iter()
                .map(|y| crate::scalar::dot(&qx, &matvec(&head.k_mat, &y.coords)) * scale(head))
                .collect();
            let m = s.iter().copied().fold(F::neg_infinity(), F::max);
            let e: Vec<F> = s.iter().map(|&v| (v - m).exp()).collect();
            let z: F = e.iter().copied().sum();
            let dv = head.v_mat.nrows();
            let mut agg = vec![F::zero(); dv];
            for (y, &ej) in tokens.iter().zip(&e) {
                let vy = matvec(&head.v_mat, &y.coords);
                for (acc, val) in agg.iter_mut().zip(&vy) {
                    *acc += (ej / z) * *val;
                }
            }
            let mixed = matvec(&head.w_mat, &agg);
            for (o, v) in out.iter_mut().zip(&mixed) {
                *o += *v;
            }
        }
        outputs.push(Point { coords: out });
    }
    Ok(outputs)
}

/// Applies one layer's map `mlp ∘ attention(μ, ·)` to a point.
pub fn layer_map<F: Real>(
    layer: &EncoderLayer<F>,
    mu: &DiscreteMeasure<F>,
    x: &Point<F>,
) -> Result<Point<F>> {
    let attended = attention_forward(&layer.heads, mu, x)?;
    match &layer.mlp {
        Some(mlp) => Ok(Point {
            coords: apply_mlp(mlp, &attended.coords),
        }),
        None => Ok(attended),
    }
}

pub(crate) fn apply_mlp<F: Real>(mlp: &MlpParams<F>, x: &[F]) -> Vec<F> {
    let mut hidden = matvec(&mlp.w1, x);
    for (h, b) in hidden.iter_mut().zip(mlp.b1.iter()) {
        *h = silu(*h + *b);
    }
    let mut out = matvec(&mlp.w2, &hidden);
    for (o, b) in out.iter_mut().zip(mlp.b2.iter()) {
        *o += *b;
    }
    out
}

/// Pushforward of an atomic measure through one layer's map: atoms are
/// relabelled `Γ(μ, x_i)`, weights are untouched. All atoms are mapped under
/// the same input measure.
pub fn context_pushforward<F: Real>(
    layer: &EncoderLayer<F>,
    mu: &DiscreteMeasure<F>,
) -> Result<DiscreteMeasure<F>> {
    let mapped = mu
        .support()
        .iter()
        .map(|x| layer_map(layer, mu, x))
        .collect::<Result<Vec<_>>>()?;
    DiscreteMeasure::new(mapped, mu.weights().to_vec())
}

/// Full encoder pass for a tracked point: fold the layers, advancing the
/// measure by pushforward. The measure entering layer `ℓ` is fixed while all
/// atoms (and the tracked point) cross that layer, as in batched transformer
/// layers; in-place sequential atom updates would compute a different map.
pub fn encoder_forward<F: Real>(
    enc: &EncoderParams<F>,
    mu: &DiscreteMeasure<F>,
    x: &Point<F>,
) -> Result<Point<F>> {
    enc.validate(x.dim())?;
    let mut current = x.clone();
    let mut measure = mu.clone();
    for layer in &enc.layers {
        let next_point = layer_map(layer, &measure, &current)?;
        let next_measure = context_pushforward(layer, &measure)?;
        current = next_point;
        measure = next_measure;
    }
    Ok(current)
}

/// Images of every atom of `mu` under the full encoder (the support of the
/// final pushforward, in atom order).
pub fn encoder_forward_atoms<F: Real>(
    enc: &EncoderParams<F>,
    mu: &DiscreteMeasure<F>,
) -> Result<Vec<Point<F>>> {
    enc.validate(mu.dim())?;
    let mut measure = mu.clone();
    for layer in &enc.layers {
        measure = context_pushforward(layer, &measure)?;
    }
    Ok(measure.support().to_vec())
}

/// Deterministic parameter draw for tests and experiments.
pub fn random_encoder<F: Real>(shape: &EncoderShape, seed: u64) -> EncoderParams<F> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    shape.init(&mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::uniform_measure;

    fn pt(coords: &[f64]) -> Point<f64> {
        Point::new(coords.to_vec()).unwrap()
    }

    fn zero_v_head(d: usize, k_h: usize) -> AttentionHeadParams<f64> {
        AttentionHeadParams {
            q_mat: Array2::from_elem((k_h, d), 0.3),
            k_mat: Array2::from_elem((k_h, d), -0.2),
            v_mat: Array2::zeros((d, d)),
            w_mat: Array2::from_elem((d, d), 0.5),
        }
    }

    fn small_shape(d: usize) -> EncoderShape {
        EncoderShape {
            input_dim: d,
            key_dim: 3,
            value_dim: 3,
            heads: 2,
            hidden_dim: 4,
            layers: 2,
            output_dim: d,
        }
    }

    #[test]
    fn zero_query_reduces_softmax_to_base_weights() {
        let mu = DiscreteMeasure::new(
            vec![pt(&[0.0, 1.0]), pt(&[2.0, -1.0]), pt(&[0.5, 0.5])],
            vec![0.2, 0.5, 0.3],
        )
        .unwrap();
        let mut head = zero_v_head(2, 3);
        head.q_mat = Array2::zeros((3, 2));
        let w = softmax_measure_weights(&head, &mu, &pt(&[1.0, 1.0])).unwrap();
        for (wi, ai) in w.iter().zip(mu.weights()) {
            assert!((wi - ai).abs() <= 1e-15);
        }
    }

    #[test]
    fn single_atom_gets_full_weight() {
        let mu = uniform_measure(vec![vec![0.7, 0.1]]).unwrap();
        let head = zero_v_head(2, 2);
        let w = softmax_measure_weights(&head, &mu, &pt(&[0.0, 0.0])).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn two_atom_scores_zero_and_ln_three() {
        // d = 1, k_h = 1, Q = K = [1]: scores are x·y_j; with x = 1 and atoms
        // (0, ln 3) the weights must be (0.25, 0.75).
        let head = AttentionHeadParams {
            q_mat: Array2::from_elem((1, 1), 1.0),
            k_mat: Array2::from_elem((1, 1), 1.0),
            v_mat: Array2::zeros((1, 1)),
            w_mat: Array2::zeros((1, 1)),
        };
        let mu = uniform_measure(vec![vec![0.0], vec![3.0f64.ln()]]).unwrap();
        let w = softmax_measure_weights(&head, &mu, &pt(&[1.0])).unwrap();
        assert!((w[0] - 0.25).abs() <= 1e-12);
        assert!((w[1] - 0.75).abs() <= 1e-12);
    }

    #[test]
    fn softmax_weights_sum_to_one() {
        let enc = random_encoder::<f64>(&small_shape(3), 11);
        let head = &enc.layers[0].heads[0];
        let mu = uniform_measure(vec![
            vec![0.1, 0.2, 0.3],
            vec![0.9, -0.4, 0.0],
            vec![0.5, 0.5, -0.5],
            vec![-0.2, 0.8, 0.1],
        ])
        .unwrap();
        let w = softmax_measure_weights(head, &mu, &pt(&[0.4, 0.1, -0.3])).unwrap();
        let s: f64 = w.iter().sum();
        assert!((s - 1.0).abs() <= 1e-14);
    }

    #[test]
    fn zero_values_leave_only_the_residual() {
        let mu = uniform_measure(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let heads = vec![zero_v_head(2, 3), zero_v_head(2, 2)];
        let x = pt(&[0.4, -0.7]);
        let y = attention_forward(&heads, &mu, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_atom_attention_is_residual_plus_mixed_value() {
        let head = AttentionHeadParams {
            q_mat: Array2::from_elem((2, 2), 0.7),
            k_mat: Array2::from_elem((2, 2), -0.1),
            v_mat: Array2::from_shape_fn((2, 2), |(i, j)| (i + 2 * j) as f64 * 0.25),
            w_mat: Array2::from_shape_fn((2, 2), |(i, j)| if i == j { 1.5 } else { -0.5 }),
        };
        let y_atom = pt(&[0.3, 0.9]);
        let mu = DiscreteMeasure::new(vec![y_atom.clone()], vec![1.0]).unwrap();
        let x = pt(&[1.0, -1.0]);
        let got = attention_forward(std::slice::from_ref(&head), &mu, &x).unwrap();
        let vy = matvec(&head.v_mat, &y_atom.coords);
        let wvy = matvec(&head.w_mat, &vy);
        for k in 0..2 {
            assert!((got.coords[k] - (x.coords[k] + wvy[k])).abs() <= 1e-15);
        }
    }

    #[test]
    fn attention_matches_brute_force_double_loop() {
        let enc = random_encoder::<f64>(
            &EncoderShape {
                heads: 2,
                ..small_shape(3)
            },
            5,
        );
        let heads = &enc.layers[0].heads;
        let mu = uniform_measure(vec![
            vec![0.1, 0.9, -0.4],
            vec![0.8, 0.2, 0.3],
            vec![-0.5, 0.4, 0.6],
        ])
        .unwrap();
        let x = pt(&[0.25, -0.75, 0.5]);
        let got = attention_forward(heads, &mu, &x).unwrap();

        // Independent re-derivation, loops only.
        let mut want = x.coords.clone();
        for head in heads {
            let kh = head.q_mat.nrows();
            let scale = 1.0 / (kh as f64).sqrt();
            let mut scores = vec![0.0; mu.len()];
            for (j, y) in mu.support().iter().enumerate() {
                let mut s = 0.0;
                for r in 0..kh {
                    let mut qx = 0.0;
                    let mut ky = 0.0;
                    for c in 0..3 {
                        qx += head.q_mat[(r, c)] * x.coords[c];
                        ky += head.k_mat[(r, c)] * y.coords[c];
                    }
                    s += qx * ky;
                }
                scores[j] = s * scale;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut den = 0.0;
            for (j, &s) in scores.iter().enumerate() {
                den += mu.weights()[j] * (s - mx).exp();
            }
            for d_out in 0..3 {
                let mut acc = 0.0;
                for (j, y) in mu.support().iter().enumerate() {
                    let wj = mu.weights()[j] * (scores[j] - mx).exp() / den;
                    for dv in 0..head.v_mat.nrows() {
                        let mut vy = 0.0;
                        for c in 0..3 {
                            vy += head.v_mat[(dv, c)] * y.coords[c];
                        }
                        acc += head.w_mat[(d_out, dv)] * wj * vy;
                    }
                }
                want[d_out] += acc;
            }
        }
        for k in 0..3 {
            assert!((got.coords[k] - want[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn classical_rows_equal_measure_attention_on_empirical_measures() {
        for seed in 0..20u64 {
            let n = 2 + (seed as usize % 7);
            let d = 2 + (seed as usize % 7);
            let enc = random_encoder::<f64>(
                &EncoderShape {
                    input_dim: d,
                    key_dim: 3,
                    value_dim: 4,
                    heads: 2,
                    hidden_dim: 4,
                    layers: 1,
                    output_dim: d,
                },
                seed,
            );
            let heads = &enc.layers[0].heads;
            let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(999));
            let tokens: Vec<Point<f64>> = (0..n)
                .map(|_| {
                    Point::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
                })
                .collect();
            let mu = DiscreteMeasure::from_tokens(tokens.clone()).unwrap();
            let classical = classical_attention_rows(heads, &tokens).unwrap();
            for (token, want) in tokens.iter().zip(&classical) {
                let got = attention_forward(heads, &mu, token).unwrap();
                for k in 0..d {
                    assert!(
                        (got.coords[k] - want.coords[k]).abs() <= 1e-12,
                        "seed {seed} coordinate {k}: {} vs {}",
                        got.coords[k],
                        want.coords[k]
                    );
                }
            }
        }
    }

    #[test]
    fn classical_single_token_is_residual_plus_self_value() {
        let enc = random_encoder::<f64>(&small_shape(2), 3);
        let heads = &enc.layers[0].heads;
        let x = pt(&[0.6, -0.2]);
        let out = classical_attention_rows(heads, std::slice::from_ref(&x)).unwrap();
        let mut want = x.coords.clone();
        for head in heads {
            let vy = matvec(&head.v_mat, &x.coords);
            let wvy = matvec(&head.w_mat, &vy);
            for k in 0..2 {
                want[k] += wvy[k];
            }
        }
        for k in 0..2 {
            assert!((out[0].coords[k] - want[k]).abs() <= 1e-14);
        }
    }

    #[test]
    fn duplicated_token_list_matches_single_token() {
        let enc = random_encoder::<f64>(&small_shape(2), 8);
        let heads = &enc.layers[0].heads;
        let x = pt(&[0.2, 0.9]);
        let single = classical_attention_rows(heads, std::slice::from_ref(&x)).unwrap();
        let doubled = classical_attention_rows(heads, &[x.clone(), x.clone()]).unwrap();
        for k in 0..2 {
            assert!((single[0].coords[k] - doubled[0].coords[k]).abs() <= 1e-14);
            assert!((doubled[0].coords[k] - doubled[1].coords[k]).abs() <= 1e-14);
        }
    }

    #[test]
    fn identity_layer_pushforward_preserves_the_measure() {
        let layer = EncoderLayer::<f64> {
            heads: vec![zero_v_head(2, 2)],
            mlp: None,
        };
        let mu = uniform_measure(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let out = context_pushforward(&layer, &mu).unwrap();
        assert_eq!(out, mu);
    }

    #[test]
    fn pushforward_preserves_weights_for_any_layer() {
        let enc = random_encoder::<f64>(&small_shape(3), 21);
        let mu = DiscreteMeasure::new(
            vec![pt(&[0.0, 0.2, 0.4]), pt(&[1.0, -0.3, 0.3]), pt(&[0.2, 0.2, 0.2])],
            vec![0.6, 0.3, 0.1],
        )
        .unwrap();
        let out = context_pushforward(&enc.layers[0], &mu).unwrap();
        assert_eq!(out.weights(), mu.weights());
    }

    #[test]
    fn colliding_atoms_integrate_like_a_merged_atom() {
        // A constant-output pointwise map sends distinct atoms to the same
        // image point; integration then agrees with the merged-atom measure.
        let layer = EncoderLayer::<f64> {
            heads: vec![zero_v_head(1, 2)],
            mlp: Some(MlpParams {
                w1: Array2::from_elem((2, 1), 0.4),
                b1: Array1::from_elem(2, 0.1),
                w2: Array2::zeros((1, 2)),
                b2: Array1::from_elem(1, 0.7),
            }),
        };
        let mu = uniform_measure(vec![vec![0.3], vec![0.9]]).unwrap();
        let out = context_pushforward(&layer, &mu).unwrap();
        assert_eq!(out.support()[0], out.support()[1]);
        assert_eq!(out.support()[0], pt(&[0.7]));
        let merged = DiscreteMeasure::new(vec![out.support()[0].clone()], vec![1.0]).unwrap();
        let f = |p: &Point<f64>| (3.0 * p.coords[0] + 0.2).cos();
        let a = out.integrate(f).unwrap();
        let b = merged.integrate(f).unwrap();
        assert!((a - b).abs() <= 1e-15);
    }

    #[test]
    fn encoder_single_identity_layer_is_identity() {
        let enc = EncoderParams::<f64> {
            layers: vec![EncoderLayer {
                heads: vec![zero_v_head(2, 2)],
                mlp: None,
            }],
        };
        let mu = uniform_measure(vec![vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let x = pt(&[0.3, 0.4]);
        assert_eq!(encoder_forward(&enc, &mu, &x).unwrap(), x);
    }

    #[test]
    fn stack_of_identity_layers_is_identity() {
        let enc = EncoderParams::<f64> {
            layers: (0..4)
                .map(|_| EncoderLayer {
                    heads: vec![zero_v_head(2, 3)],
                    mlp: None,
                })
                .collect(),
        };
        let mu = uniform_measure(vec![vec![0.5, -0.5], vec![0.1, 0.9], vec![0.7, 0.3]]).unwrap();
        let x = pt(&[-0.2, 0.6]);
        assert_eq!(encoder_forward(&enc, &mu, &x).unwrap(), x);
    }

    #[test]
    fn two_layer_encoder_matches_hand_unrolled_composition() {
        let enc = random_encoder::<f64>(&small_shape(3), 17);
        let mu = uniform_measure(vec![
            vec![0.3, 0.3, 0.3],
            vec![-0.1, 0.5, 0.2],
            vec![0.9, -0.6, 0.1],
        ])
        .unwrap();
        let x = pt(&[0.2, 0.4, -0.8]);
        let got = encoder_forward(&enc, &mu, &x).unwrap();

        // Explicit two-step composition: μ₁ first, then layer 2 against μ₁.
        let x1 = layer_map(&enc.layers[0], &mu, &x).unwrap();
        let mu1 = context_pushforward(&enc.layers[0], &mu).unwrap();
        let x2 = layer_map(&enc.layers[1], &mu1, &x1).unwrap();
        for k in 0..3 {
            assert!((got.coords[k] - x2.coords[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn tracked_atoms_agree_with_pushforward_support() {
        let enc = random_encoder::<f64>(&small_shape(2), 29);
        let mu = uniform_measure(vec![vec![0.1, 0.1], vec![0.9, -0.9], vec![0.4, 0.7]]).unwrap();
        let atoms = encoder_forward_atoms(&enc, &mu).unwrap();
        for (i, atom) in mu.support().iter().enumerate() {
            let via_point = encoder_forward(&enc, &mu, atom).unwrap();
            for k in 0..2 {
                assert!((atoms[i].coords[k] - via_point.coords[k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance_over_atoms() {
        let enc = random_encoder::<f64>(&small_shape(2), 41);
        let coords = [
            vec![0.1, 0.4],
            vec![0.8, -0.3],
            vec![-0.6, 0.2],
            vec![0.3, 0.3],
        ];
        let mu = uniform_measure(coords.to_vec()).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted = uniform_measure(perm.iter().map(|&i| coords[i].clone()).collect()).unwrap();

        let atoms = encoder_forward_atoms(&enc, &mu).unwrap();
        let atoms_perm = encoder_forward_atoms(&enc, &permuted).unwrap();
        for (slot, &orig) in perm.iter().enumerate() {
            for k in 0..2 {
                assert!((atoms_perm[slot].coords[k] - atoms[orig].coords[k]).abs() <= 1e-12);
            }
        }

        let head = &enc.layers[0].heads[0];
        let x = pt(&[0.25, 0.5]);
        let w = softmax_measure_weights(head, &mu, &x).unwrap();
        let wp = softmax_measure_weights(head, &permuted, &x).unwrap();
        for (slot, &orig) in perm.iter().enumerate() {
            assert!((wp[slot] - w[orig]).abs() <= 1e-14);
        }
    }

    #[test]
    fn duplicate_atom_weights_merge_consistently() {
        let enc = random_encoder::<f64>(&small_shape(2), 55);
        let head = &enc.layers[0].heads[0];
        let x = pt(&[0.7, -0.1]);
        let split = DiscreteMeasure::new(
            vec![pt(&[0.2, 0.2]), pt(&[0.2, 0.2]), pt(&[0.9, -0.5])],
            vec![0.25, 0.25, 0.5],
        )
        .unwrap();
        let merged = DiscreteMeasure::new(
            vec![pt(&[0.2, 0.2]), pt(&[0.9, -0.5])],
            vec![0.5, 0.5],
        )
        .unwrap();
        let ws = softmax_measure_weights(head, &split, &x).unwrap();
        let wm = softmax_measure_weights(head, &merged, &x).unwrap();
        assert!(((ws[0] + ws[1]) - wm[0]).abs() <= 1e-12);
        assert!((ws[2] - wm[1]).abs() <= 1e-12);
    }

    #[test]
    fn atom_perturbation_scales_linearly() {
        // Perturbing one atom by h changes the output by O(h): the ratio of
        // output deltas for h = 1e-3 vs 1e-4 sits near 10 for a C¹ map.
        let enc = random_encoder::<f64>(&small_shape(2), 70);
        let base = [vec![0.1, 0.3], vec![0.7, -0.2], vec![-0.4, 0.5]];
        let x = pt(&[0.2, 0.2]);
        let out0 = encoder_forward(&enc, &uniform_measure(base.to_vec()).unwrap(), &x).unwrap();
        let delta = |h: f64| {
            let mut coords = base.to_vec();
            coords[1][0] += h;
            let out = encoder_forward(&enc, &uniform_measure(coords).unwrap(), &x).unwrap();
            out.coords
                .iter()
                .zip(&out0.coords)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let d3 = delta(1e-3);
        let d4 = delta(1e-4);
        let ratio = d3 / d4;
        assert!(
            (5.0..=20.0).contains(&ratio),
            "first-order scaling violated: ratio {ratio}"
        );
    }

    #[test]
    fn dimension_chain_violations_are_reported() {
        let mut enc = random_encoder::<f64>(&small_shape(3), 2);
        enc.layers[0].heads[0].q_mat = Array2::zeros((3, 4));
        let mu = uniform_measure(vec![vec![0.0, 0.0, 0.0]]).unwrap();
        let r = encoder_forward(&enc, &mu, &pt(&[0.0, 0.0, 0.0]));
        assert!(matches!(r, Err(Error::DimMismatch(_))));
    }
}
