//! Differentiable forward pass: encoders, cost, a fixed-length Sinkhorn
//! unroll and the loss, recorded on the reverse-mode tape. A plain-scalar
//! mirror of the same computation ([`unrolled_loss`]) backs finite-difference
//! checks and value cross-checks.

use ndarray::Array2;

use crate::attention::{EncoderLayer, EncoderParams};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::measures::{Coupling, DiscreteMeasure};
use crate::scalar::Real;
use crate::transport::logsumexp;

use super::{LossKind, SinkhornTransformerParams, UnrollConfig};

fn matvec_vars<F: Real>(tape: &mut Tape<F>, mat: &Array2<Var>, x: &[Var]) -> Vec<Var> {
    let (rows, cols) = mat.dim();
    debug_assert_eq!(cols, x.len());
    (0..rows)
        .map(|r| {
            let row: Vec<Var> = (0..cols).map(|c| mat[(r, c)]).collect();
            tape.dot(&row, x)
        })
        .collect()
}

fn mlp_vars<F: Real>(
    tape: &mut Tape<F>,
    mlp: &crate::attention::MlpParams<Var>,
    x: &[Var],
) -> Vec<Var> {
    let mut hidden = matvec_vars(tape, &mlp.w1, x);
    for (h, b) in hidden.iter_mut().zip(mlp.b1.iter()) {
        let shifted = tape.add(*h, *b);
        *h = tape.silu(shifted);
    }
    let mut out = matvec_vars(tape, &mlp.w2, &hidden);
    for (o, b) in out.iter_mut().zip(mlp.b2.iter()) {
        *o = tape.add(*o, *b);
    }
    out
}

/// One attention layer applied to every atom simultaneously (the measure
/// entering the layer is the pre-update atom set).
fn layer_atoms_vars<F: Real>(
    tape: &mut Tape<F>,
    layer: &EncoderLayer<Var>,
    atoms: &[Vec<Var>],
    weight_leaves: &[Var],
) -> Vec<Vec<Var>> {
    let n = atoms.len();
    let mut next: Vec<Vec<Var>> = atoms.to_vec();
    for head in &layer.heads {
        let k_h = head.q_mat.nrows();
        let scale = F::one() / F::from_usize(k_h).unwrap().sqrt();
        let scale_leaf = tape.leaf(scale);
        let keys: Vec<Vec<Var>> = atoms
            .iter()
            .map(|y| matvec_vars(tape, &head.k_mat, y))
            .collect();
        let values: Vec<Vec<Var>> = atoms
            .iter()
            .map(|y| matvec_vars(tape, &head.v_mat, y))
            .collect();
        let dv = head.v_mat.nrows();
        for (i, x) in atoms.iter().enumerate() {
            let qx = matvec_vars(tape, &head.q_mat, x);
            // Measure-weighted softmax: a_j·exp(s_j - M) normalized.
            let scores: Vec<Var> = keys
                .iter()
                .map(|ky| {
                    let raw = tape.dot(&qx, ky);
                    tape.mul(raw, scale_leaf)
                })
                .collect();
            let m = scores
                .iter()
                .map(|&s| tape.value(s))
                .fold(F::neg_infinity(), F::max);
            let m_leaf = tape.leaf(m);
            let exps: Vec<Var> = scores
                .iter()
                .zip(weight_leaves)
                .map(|(&s, &a)| {
                    let shifted = tape.sub(s, m_leaf);
                    let e = tape.exp(shifted);
                    tape.mul(a, e)
                })
                .collect();
            let denom = tape.sum(&exps);
            let w: Vec<Var> = exps.iter().map(|&e| tape.div(e, denom)).collect();
            // agg[d] = Σ_j w_j · (V y_j)[d], then mix through W and add.
            let agg: Vec<Var> = (0..dv)
                .map(|d| {
                    let col: Vec<Var> = values.iter().map(|vy| vy[d]).collect();
                    tape.dot(&w, &col)
                })
                .collect();
            let mixed = matvec_vars(tape, &head.w_mat, &agg);
            for (o, mx) in next[i].iter_mut().zip(&mixed) {
                *o = tape.add(*o, *mx);
            }
        }
    }
    if let Some(mlp) = &layer.mlp {
        next = next.iter().map(|x| mlp_vars(tape, mlp, x)).collect();
    }
    next
}

/// Images of every atom of `mu` through an encoder, on the tape.
fn encoder_atoms_vars<F: Real>(
    tape: &mut Tape<F>,
    enc: &EncoderParams<Var>,
    mu: &DiscreteMeasure<F>,
) -> Vec<Vec<Var>> {
    let weight_leaves: Vec<Var> = mu.weights().iter().map(|&w| tape.leaf(w)).collect();
    let mut atoms: Vec<Vec<Var>> = mu
        .support()
        .iter()
        .map(|p| p.coords.iter().map(|&c| tape.leaf(c)).collect())
        .collect();
    for layer in &enc.layers {
        atoms = layer_atoms_vars(tape, layer, &atoms, &weight_leaves);
    }
    atoms
}

/// Cost entries `c[i,j] = -⟨Q(μ,x_i), K(ν,y_j)⟩` on the tape.
fn cost_vars<F: Real>(
    tape: &mut Tape<F>,
    params: &SinkhornTransformerParams<Var>,
    mu: &DiscreteMeasure<F>,
    nu: &DiscreteMeasure<F>,
) -> Vec<Vec<Var>> {
    let q_out = encoder_atoms_vars(tape, &params.q_encoder, mu);
    let k_out = encoder_atoms_vars(tape, params.k_params(), nu);
    q_out
        .iter()
        .map(|q| {
            k_out
                .iter()
                .map(|k| {
                    let d = tape.dot(q, k);
                    tape.neg(d)
                })
                .collect()
        })
        .collect()
}

/// Fixed-length log-domain Sinkhorn unroll followed by the exact row rescale;
/// returns `(p_ij, ln p_ij)` on the tape.
#[allow(clippy::type_complexity)]
fn sinkhorn_unroll_vars<F: Real>(
    tape: &mut Tape<F>,
    cost: &[Vec<Var>],
    a: &[F],
    b: &[F],
    cfg: &UnrollConfig<F>,
) -> (Vec<Vec<Var>>, Vec<Vec<Var>>) {
    let n = a.len();
    let m = b.len();
    let inv_eps = tape.leaf(F::one() / cfg.epsilon);
    let d: Vec<Vec<Var>> = cost
        .iter()
        .map(|row| row.iter().map(|&c| tape.mul(c, inv_eps)).collect())
        .collect();
    let la: Vec<Var> = a.iter().map(|&w| tape.leaf(w.ln())).collect();
    let lb: Vec<Var> = b.iter().map(|&w| tape.leaf(w.ln())).collect();
    let zero = tape.leaf(F::zero());

    let mut phi: Vec<Var> = vec![zero; n];
    let mut psi: Vec<Var> = vec![zero; m];
    for _ in 0..cfg.iterations {
        let a_phi: Vec<Var> = (0..n).map(|i| tape.add(la[i], phi[i])).collect();
        psi = (0..m)
            .map(|j| {
                let terms: Vec<Var> = (0..n).map(|i| tape.sub(a_phi[i], d[i][j])).collect();
                let lse = tape.logsumexp(&terms);
                tape.neg(lse)
            })
            .collect();
        let b_psi: Vec<Var> = (0..m).map(|j| tape.add(lb[j], psi[j])).collect();
        phi = (0..n)
            .map(|i| {
                let terms: Vec<Var> = (0..m).map(|j| tape.sub(b_psi[j], d[i][j])).collect();
                let lse = tape.logsumexp(&terms);
                tape.neg(lse)
            })
            .collect();
    }

    let a_phi: Vec<Var> = (0..n).map(|i| tape.add(la[i], phi[i])).collect();
    let b_psi: Vec<Var> = (0..m).map(|j| tape.add(lb[j], psi[j])).collect();
    let mut plan = Vec::with_capacity(n);
    let mut log_plan = Vec::with_capacity(n);
    let a_leaves: Vec<Var> = a.iter().map(|&w| tape.leaf(w)).collect();
    for i in 0..n {
        let log_raw: Vec<Var> = (0..m)
            .map(|j| {
                let s = tape.add(a_phi[i], b_psi[j]);
                tape.sub(s, d[i][j])
            })
            .collect();
        let raw: Vec<Var> = log_raw.iter().map(|&l| tape.exp(l)).collect();
        let row_sum = tape.sum(&raw);
        let log_row_sum = tape.ln(row_sum);
        let mut p_row = Vec::with_capacity(m);
        let mut lp_row = Vec::with_capacity(m);
        for j in 0..m {
            let scaled = tape.mul(raw[j], a_leaves[i]);
            p_row.push(tape.div(scaled, row_sum));
            let shifted = tape.sub(log_raw[j], log_row_sum);
            lp_row.push(tape.add(shifted, la[i]));
        }
        plan.push(p_row);
        log_plan.push(lp_row);
    }
    (plan, log_plan)
}

fn loss_vars<F: Real>(
    tape: &mut Tape<F>,
    plan: &[Vec<Var>],
    log_plan: &[Vec<Var>],
    target: &Coupling<F>,
    kind: LossKind,
) -> Var {
    let n = plan.len();
    let m = plan[0].len();
    match kind {
        LossKind::Kl => {
            // KL(t ∥ p) = Σ t·ln t - Σ t·ln p with 0·ln 0 = 0; the first term
            // is a constant of the data.
            let mut entropy_term = F::zero();
            for t in target.mass().iter() {
                if *t > F::zero() {
                    entropy_term += *t * t.ln();
                }
            }
            let t_leaves: Vec<Var> = target.mass().iter().map(|&t| tape.leaf(t)).collect();
            let lp_flat: Vec<Var> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j)))
                .map(|(i, j)| log_plan[i][j])
                .collect();
            let cross = tape.dot(&t_leaves, &lp_flat);
            let neg_cross = tape.neg(cross);
            let const_leaf = tape.leaf(entropy_term);
            tape.add(const_leaf, neg_cross)
        }
        LossKind::Frobenius => {
            let mut terms = Vec::with_capacity(n * m);
            for i in 0..n {
                for j in 0..m {
                    let t = tape.leaf(target.mass()[(i, j)]);
                    let diff = tape.sub(plan[i][j], t);
                    terms.push(tape.mul(diff, diff));
                }
            }
            tape.sum(&terms)
        }
    }
}

/// Records the full per-sample loss on the tape and returns its node.
pub(super) fn sample_loss_var<F: Real>(
    tape: &mut Tape<F>,
    params: &SinkhornTransformerParams<Var>,
    mu: &DiscreteMeasure<F>,
    nu: &DiscreteMeasure<F>,
    target: &Coupling<F>,
    cfg: &UnrollConfig<F>,
    kind: LossKind,
) -> Var {
    let cost = cost_vars(tape, params, mu, nu);
    let (plan, log_plan) = sinkhorn_unroll_vars(tape, &cost, mu.weights(), nu.weights(), cfg);
    loss_vars(tape, &plan, &log_plan, target, kind)
}

/// Plain-scalar mirror of the differentiable pipeline: encoder cost, exactly
/// `cfg.iterations` log-domain Sinkhorn rounds, row rescale, loss. Used as
/// the independent value for finite-difference gradient checks.
pub fn unrolled_loss<F: Real>(
    params: &SinkhornTransformerParams<F>,
    mu: &DiscreteMeasure<F>,
    nu: &DiscreteMeasure<F>,
    target: &Coupling<F>,
    cfg: &UnrollConfig<F>,
    kind: LossKind,
) -> Result<F> {
    let plan = unrolled_plan(params, mu, nu, cfg)?;
    let n = mu.len();
    let m = nu.len();
    let mut loss = F::zero();
    match kind {
        LossKind::Kl => {
            for i in 0..n {
                for j in 0..m {
                    let t = target.mass()[(i, j)];
                    if t > F::zero() {
                        loss += t * (t.ln() - plan[(i, j)].ln());
                    }
                }
            }
        }
        LossKind::Frobenius => {
            for i in 0..n {
                for j in 0..m {
                    let d = plan[(i, j)] - target.mass()[(i, j)];
                    loss += d * d;
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("unrolled loss is non-finite".into()));
    }
    Ok(loss)
}

/// The plan after a fixed unroll (plain scalars).
pub fn unrolled_plan<F: Real>(
    params: &SinkhornTransformerParams<F>,
    mu: &DiscreteMeasure<F>,
    nu: &DiscreteMeasure<F>,
    cfg: &UnrollConfig<F>,
) -> Result<Array2<F>> {
    let cost = super::cost_from_encoders(params, mu, nu)?;
    let a = mu.weights();
    let b = nu.weights();
    let n = a.len();
    let m = b.len();
    let eps = cfg.epsilon;
    let la: Vec<F> = a.iter().map(|&w| w.ln()).collect();
    let lb: Vec<F> = b.iter().map(|&w| w.ln()).collect();
    let mut phi = vec![F::zero(); n];
    let mut psi = vec![F::zero(); m];
    let mut buf_n = vec![F::zero(); n];
    let mut buf_m = vec![F::zero(); m];
    for _ in 0..cfg.iterations {
        for j in 0..m {
            for i in 0..n {
                buf_n[i] = la[i] + phi[i] - cost.values()[(i, j)] / eps;
            }
            psi[j] = -logsumexp(&buf_n);
        }
        for i in 0..n {
            for j in 0..m {
                buf_m[j] = lb[j] + psi[j] - cost.values()[(i, j)] / eps;
            }
            phi[i] = -logsumexp(&buf_m);
        }
    }
    let mut plan = Array2::zeros((n, m));
    for i in 0..n {
        let mut row_sum = F::zero();
        for j in 0..m {
            let v = (la[i] + phi[i] + lb[j] + psi[j] - cost.values()[(i, j)] / eps).exp();
            plan[(i, j)] = v;
            row_sum += v;
        }
        let scale = a[i] / row_sum;
        for j in 0..m {
            plan[(i, j)] = plan[(i, j)] * scale;
        }
    }
    Ok(plan)
}
