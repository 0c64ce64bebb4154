//! End-to-end architecture: two encoder branches produce an inner-product
//! cost, a final Sinkhorn layer normalizes it into a coupling of the two
//! input measures. Whatever the parameters, the output satisfies the marginal
//! contract — the structural property that separates this interaction layer
//! from row-softmax attention.
//!
//! Also here: synthetic coupling-system families for experiments, training
//! losses, reverse-mode gradients through a fixed Sinkhorn unroll, and a
//! plain gradient-descent loop that tracks held-out sup-W1.

mod diff;

pub use diff::{unrolled_loss, unrolled_plan};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::attention::{encoder_forward_atoms, EncoderParams, EncoderShape};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::measures::{Coupling, DiscreteMeasure, Point};
use crate::scalar::{dot, euclidean, fl, Real};
use crate::transport::{coupling_w1, sinkhorn_solve, CostMatrix, SinkhornConfig, SinkhornSolution};

/// Parameters of both encoder branches. In shared (single-text) mode the two
/// branches are the same parameter set: gradients tie and updates keep them
/// identical.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornTransformerParams<E> {
    pub q_encoder: EncoderParams<E>,
    pub k_encoder: EncoderParams<E>,
    pub shared: bool,
}

impl<E> SinkhornTransformerParams<E> {
    pub fn new(q_encoder: EncoderParams<E>, k_encoder: EncoderParams<E>) -> Self {
        Self {
            q_encoder,
            k_encoder,
            shared: false,
        }
    }

    pub fn map<T>(&self, mut f: impl FnMut(&E) -> T) -> SinkhornTransformerParams<T> {
        SinkhornTransformerParams {
            q_encoder: self.q_encoder.map(&mut f),
            k_encoder: self.k_encoder.map(&mut f),
            shared: self.shared,
        }
    }

    /// The branch applied to the second input.
    pub fn k_params(&self) -> &EncoderParams<E> {
        if self.shared {
            &self.q_encoder
        } else {
            &self.k_encoder
        }
    }
}

impl<E: Clone> SinkhornTransformerParams<E> {
    pub fn new_shared(encoder: EncoderParams<E>) -> Self {
        Self {
            q_encoder: encoder.clone(),
            k_encoder: encoder,
            shared: true,
        }
    }
}

impl<E> SinkhornTransformerParams<E> {
    /// Rebuilds from a flat slice in [`Self::flatten`] order, possibly with a
    /// new element type. In shared mode both branches rebuild from the single
    /// parameter block, keeping them tied.
    pub fn rebuild<T: Copy>(&self, flat: &[T]) -> SinkhornTransformerParams<T> {
        let nq = self.q_encoder.param_count();
        if self.shared {
            assert_eq!(flat.len(), nq, "flat vector length mismatch");
            SinkhornTransformerParams::new_shared(self.q_encoder.rebuild(flat))
        } else {
            let q = self.q_encoder.rebuild(&flat[..nq]);
            let k = self.k_encoder.rebuild(&flat[nq..]);
            SinkhornTransformerParams::new(q, k)
        }
    }
}

impl<E: Copy> SinkhornTransformerParams<E> {
    /// Free parameters in fixed order: the q branch, then the k branch unless
    /// shared.
    pub fn flatten(&self) -> Vec<E> {
        let mut out = self.q_encoder.flatten();
        if !self.shared {
            out.extend(self.k_encoder.flatten());
        }
        out
    }

    pub fn from_flat(&self, flat: &[E]) -> Self {
        self.rebuild(flat)
    }
}

impl<F: Real> SinkhornTransformerParams<F> {
    /// Fresh parameters for a two-branch model.
    pub fn init(q_shape: &EncoderShape, k_shape: &EncoderShape, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let q = q_shape.init(&mut rng);
        let k = k_shape.init(&mut rng);
        Self::new(q, k)
    }

    /// Fresh parameters with tied branches.
    pub fn init_shared(shape: &EncoderShape, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Self::new_shared(shape.init(&mut rng))
    }

    fn check_finite_grads(&self) -> Result<()> {
        for (name, enc) in [("q", &self.q_encoder), ("k", &self.k_encoder)] {
            for (li, layer) in enc.layers.iter().enumerate() {
                for (hi, head) in layer.heads.iter().enumerate() {
                    for (mat_name, mat) in [
                        ("q_mat", &head.q_mat),
                        ("k_mat", &head.k_mat),
                        ("v_mat", &head.v_mat),
                        ("w_mat", &head.w_mat),
                    ] {
                        if mat.iter().any(|g| !g.is_finite()) {
                            return Err(Error::Numeric(format!(
                                "non-finite gradient in {name}-encoder layer {li} head {hi} {mat_name}"
                            )));
                        }
                    }
                }
                if let Some(mlp) = &layer.mlp {
                    let finite = mlp.w1.iter().all(|g| g.is_finite())
                        && mlp.b1.iter().all(|g| g.is_finite())
                        && mlp.w2.iter().all(|g| g.is_finite())
                        && mlp.b2.iter().all(|g| g.is_finite());
                    if !finite {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient in {name}-encoder layer {li} mlp"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One supervised example: two texts and their target contextual relation.
#[derive(Debug, Clone)]
pub struct CouplingSystemSample<F> {
    pub mu: DiscreteMeasure<F>,
    pub nu: DiscreteMeasure<F>,
    pub target: Coupling<F>,
}

impl<F: Real> CouplingSystemSample<F> {
    pub fn new(mu: DiscreteMeasure<F>, nu: DiscreteMeasure<F>, target: Coupling<F>) -> Result<Self> {
        let (rdev, cdev) = target.marginal_deviation();
        let tol = fl(1e-10);
        if rdev > tol || cdev > tol {
            return Err(Error::Invalid(format!(
                "target is not a coupling of the sample measures (deviation {rdev}/{cdev})"
            )));
        }
        Ok(Self { mu, nu, target })
    }

    /// Product-space diameter of the sample supports under the sum metric.
    pub fn support_diameter(&self) -> F {
        let dx = self.mu.diameter(|p, q| euclidean(&p.coords, &q.coords));
        let dy = self.nu.diameter(|p, q| euclidean(&p.coords, &q.coords));
        dx + dy
    }
}

/// `c[i,j] = -⟨Q(μ,x_i), K(ν,y_j)⟩` from the two encoder branches.
pub fn cost_from_encoders<F: Real>(
    params: &SinkhornTransformerParams<F>,
    mu: &DiscreteMeasure<F>,
    nu: &DiscreteMeasure<F>,
) -> Result<CostMatrix<F>> {
    let q_out = encoder_forward_atoms(&params.q_encoder, mu)?;
    let k_out = encoder_forward_atoms(params.k_params(), nu)?;
    let dq = q_out[0].dim();
    let dk = k_out[0].dim();
    if dq != dk {
        return Err(Error::DimMismatch(format!(
            "encoder outputs live in different spaces ({dq} vs {dk})"
        )));
    }
    let values = Array2::from_shape_fn((q_out.len(), k_out.len()), |(i, j)| {
        -dot(&q_out[i].coords, &k_out[j].coords)
    });
    CostMatrix::new(values)
}

/// Full forward pass: encoder cost, then the Sinkhorn layer run to
/// convergence. The result is a coupling of `(μ, ν)` within `cfg.tol` for any
/// parameter values.
pub fn forward<F: Real>(
    params: &SinkhornTransformerParams<F>,
    mu: &DiscreteMeasure<F>,
    nu: &DiscreteMeasure<F>,
    cfg: &SinkhornConfig<F>,
) -> Result<SinkhornSolution<F>> {
    let cost = cost_from_encoders(params, mu, nu)?;
    sinkhorn_solve(&cost, mu, nu, cfg)
}

/// Training losses. KL is taken as `KL(target ∥ prediction)`: predictions are
/// Sinkhorn plans, strictly positive, so the divergence is always finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Kl,
    Frobenius,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(Self::Kl),
            "frobenius" => Ok(Self::Frobenius),
            other => Err(Error::Parse(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// Loss of a converged prediction against a target on the same supports.
pub fn loss<F: Real>(
    pred: &SinkhornSolution<F>,
    target: &Coupling<F>,
    kind: LossKind,
) -> Result<F> {
    let p = pred.coupling.mass();
    let t = target.mass();
    if p.dim() != t.dim() {
        return Err(Error::DimMismatch("prediction and target shapes disagree".into()));
    }
    let mut acc = F::zero();
    match kind {
        LossKind::Kl => {
            for (&tv, &pv) in t.iter().zip(p.iter()) {
                if tv > F::zero() {
                    if pv <= F::zero() {
                        return Err(Error::Numeric(
                            "target charges a cell the prediction gives zero mass".into(),
                        ));
                    }
                    acc += tv * (tv / pv).ln();
                }
            }
        }
        LossKind::Frobenius => {
            for (&tv, &pv) in t.iter().zip(p.iter()) {
                acc += (pv - tv) * (pv - tv);
            }
        }
    }
    Ok(acc)
}

/// Synthetic coupling-system families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Targets are the independence couplings `μ⊗ν`.
    Product,
    /// Targets are entropic plans of a hidden smooth inner-product cost
    /// `c*(x,y) = -⟨g(x), h(y)⟩`, with `g`, `h` drawn once per dataset —
    /// expressible by the architecture, hence learnable.
    PlantedEntropic,
    /// Block-averaged planted-entropic targets.
    Block,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product" => Ok(Self::Product),
            "planted-entropic" => Ok(Self::PlantedEntropic),
            "block" => Ok(Self::Block),
            other => Err(Error::Parse(format!("unknown dataset family {other:?}"))),
        }
    }
}

/// Dataset generation settings.
#[derive(Debug, Clone)]
pub struct SynthConfig<F> {
    pub seed: u64,
    /// Per-sample support sizes `(n, m)`; each must be ≤ 16.
    pub sizes: Vec<(usize, usize)>,
    /// Embedding dimension of the sampled supports.
    pub dim: usize,
    pub epsilon: F,
    /// Partition parameter for the block family.
    pub block_k: u32,
    /// Hidden width and output dimension of the planted maps.
    pub teacher_hidden: usize,
    pub teacher_out: usize,
}

impl<F: Real> SynthConfig<F> {
    pub fn new(seed: u64, sizes: Vec<(usize, usize)>, dim: usize) -> Self {
        Self {
            seed,
            sizes,
            dim,
            epsilon: F::one(),
            block_k: 2,
            teacher_hidden: 8,
            teacher_out: 3,
        }
    }
}

const MAX_SYNTH_ATOMS: usize = 16;

/// Entropic plan of the hidden cost `-⟨g(x), h(y)⟩` for two point maps.
pub fn planted_entropic_target<F: Real>(
    g: &dyn Fn(&Point<F>) -> Vec<F>,
    h: &dyn Fn(&Point<F>) -> Vec<F>,
    mu: &DiscreteMeasure<F>,
    nu: &DiscreteMeasure<F>,
    epsilon: F,
) -> Result<Coupling<F>> {
    let gx: Vec<Vec<F>> = mu.support().iter().map(|p| g(p)).collect();
    let hy: Vec<Vec<F>> = nu.support().iter().map(|p| h(p)).collect();
    let values = Array2::from_shape_fn((mu.len(), nu.len()), |(i, j)| -dot(&gx[i], &hy[j]));
    let cost = CostMatrix::new(values)?;
    let cfg = SinkhornConfig {
        epsilon,
        tol: fl(1e-12),
        ..SinkhornConfig::default()
    };
    Ok(sinkhorn_solve(&cost, mu, nu, &cfg)?.coupling)
}

/// Generates a dataset. Identical seeds give bitwise-identical datasets.
pub fn synth_coupling_system<F: Real>(
    family: Family,
    cfg: &SynthConfig<F>,
) -> Result<Vec<CouplingSystemSample<F>>> {
    if cfg.sizes.is_empty() {
        return Err(Error::Empty("dataset sizes"));
    }
    for &(n, m) in &cfg.sizes {
        if n == 0 || m == 0 || n > MAX_SYNTH_ATOMS || m > MAX_SYNTH_ATOMS {
            return Err(Error::Invalid(format!(
                "sample size {n}x{m} outside 1..={MAX_SYNTH_ATOMS}"
            )));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    // The hidden maps are drawn once per dataset so targets form one system.
    let teacher: Option<(crate::attention::MlpParams<F>, crate::attention::MlpParams<F>)> =
        match family {
            Family::Product => None,
            Family::PlantedEntropic | Family::Block => Some((
                random_mlp(&mut rng, cfg.dim, cfg.teacher_hidden, cfg.teacher_out, fl(3.0)),
                random_mlp(&mut rng, cfg.dim, cfg.teacher_hidden, cfg.teacher_out, fl(3.0)),
            )),
        };

    let mut samples = Vec::with_capacity(cfg.sizes.len());
    for &(n, m) in &cfg.sizes {
        let mu = random_token_measure(&mut rng, n, cfg.dim)?;
        let nu = random_token_measure(&mut rng, m, cfg.dim)?;
        let target = match family {
            Family::Product => Coupling::product(&mu, &nu),
            Family::PlantedEntropic | Family::Block => {
                let (g_mlp, h_mlp) = teacher.as_ref().unwrap();
                let g = |p: &Point<F>| crate::attention::apply_mlp(g_mlp, &p.coords);
                let h = |p: &Point<F>| crate::attention::apply_mlp(h_mlp, &p.coords);
                let plan = planted_entropic_target(&g, &h, &mu, &nu, cfg.epsilon)?;
                if family == Family::Block {
                    let px = crate::approx::build_partition(mu.support(), cfg.block_k)?;
                    let py = crate::approx::build_partition(nu.support(), cfg.block_k)?;
                    crate::approx::block_coupling(&plan, &px, &py)?.0
                } else {
                    plan
                }
            }
        };
        samples.push(CouplingSystemSample::new(mu, nu, target)?);
    }
    Ok(samples)
}

fn random_token_measure<F: Real>(
    rng: &mut ChaCha12Rng,
    n: usize,
    dim: usize,
) -> Result<DiscreteMeasure<F>> {
    let pts = (0..n)
        .map(|_| Point::new((0..dim).map(|_| fl(rng.random_range(0.0..1.0))).collect()))
        .collect::<Result<Vec<_>>>()?;
    DiscreteMeasure::from_tokens(pts)
}

fn rand_mat<F: Real>(rng: &mut ChaCha12Rng, rows: usize, cols: usize, gain: F) -> Array2<F> {
    let s = 1.0 / (cols as f64).sqrt();
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            out[(r, c)] = gain * fl::<F>(rng.random_range(-s..s));
        }
    }
    out
}

fn rand_vec<F: Real>(rng: &mut ChaCha12Rng, len: usize, half_width: f64) -> ndarray::Array1<F> {
    let mut out = ndarray::Array1::zeros(len);
    for k in 0..len {
        out[k] = fl(rng.random_range(-half_width..half_width));
    }
    out
}

fn random_mlp<F: Real>(
    rng: &mut ChaCha12Rng,
    input: usize,
    hidden: usize,
    output: usize,
    gain: F,
) -> crate::attention::MlpParams<F> {
    crate::attention::MlpParams {
        w1: rand_mat(rng, hidden, input, gain),
        b1: rand_vec(rng, hidden, 0.5),
        w2: rand_mat(rng, output, hidden, gain),
        b2: rand_vec(rng, output, 0.5),
    }
}

/// Settings for the differentiable Sinkhorn unroll: gradients flow through
/// exactly `iterations` alternating updates.
#[derive(Debug, Clone)]
pub struct UnrollConfig<F> {
    pub epsilon: F,
    pub iterations: usize,
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig<F> {
    pub seed: u64,
    pub learning_rate: F,
    pub momentum: F,
    pub iterations: usize,
    pub batch_size: usize,
    pub epsilon: F,
    /// Differentiation unrolls exactly this many Sinkhorn rounds.
    pub unroll: usize,
    pub loss: LossKind,
    /// Convergence tolerance of the evaluation-time forward pass (held-out
    /// W1 is always the evaluation metric).
    pub eval_tol: F,
}

impl<F: Real> Default for TrainConfig<F> {
    fn default() -> Self {
        Self {
            seed: 0,
            learning_rate: fl(0.25),
            momentum: fl(0.9),
            iterations: 200,
            batch_size: usize::MAX,
            epsilon: F::one(),
            unroll: 50,
            loss: LossKind::Kl,
            eval_tol: fl(1e-9),
        }
    }
}

impl<F: Real> TrainConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if self.unroll < 5 {
            return Err(Error::Invalid(format!(
                "unroll length {} below the minimum of 5",
                self.unroll
            )));
        }
        if !(self.learning_rate > F::zero()) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        if !(self.momentum >= F::zero() && self.momentum < F::one()) {
            return Err(Error::Invalid("momentum must lie in [0, 1)".into()));
        }
        if !(self.epsilon > F::zero()) {
            return Err(Error::Invalid("epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        Ok(())
    }

    fn unroll_cfg(&self) -> UnrollConfig<F> {
        UnrollConfig {
            epsilon: self.epsilon,
            iterations: self.unroll,
        }
    }

    fn eval_cfg(&self) -> SinkhornConfig<F> {
        SinkhornConfig {
            epsilon: self.epsilon,
            tol: self.eval_tol,
            ..SinkhornConfig::default()
        }
    }
}

/// Mean loss over a batch and its gradient with respect to every free
/// parameter, via one reverse sweep per sample through the fixed unroll.
pub fn grad<F: Real>(
    params: &SinkhornTransformerParams<F>,
    batch: &[CouplingSystemSample<F>],
    cfg: &TrainConfig<F>,
) -> Result<(F, SinkhornTransformerParams<F>)> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient batch"));
    }
    cfg.validate()?;
    let unroll = cfg.unroll_cfg();
    let flat = params.flatten();
    let count = flat.len();
    let mut grad_sum = vec![F::zero(); count];
    let mut loss_sum = F::zero();
    let mut tape: Tape<F> = Tape::new();
    for sample in batch {
        tape.clear();
        let leaves: Vec<crate::autodiff::Var> = flat.iter().map(|&x| tape.leaf(x)).collect();
        let var_params = params.rebuild(&leaves);
        let loss_var = diff::sample_loss_var(
            &mut tape,
            &var_params,
            &sample.mu,
            &sample.nu,
            &sample.target,
            &unroll,
            cfg.loss,
        );
        loss_sum += tape.value(loss_var);
        let adj = tape.backward(loss_var);
        for (g, leaf) in grad_sum.iter_mut().zip(&leaves) {
            *g += adj[leaf.index()];
        }
    }
    let scale = F::one() / F::from_usize(batch.len()).unwrap();
    let mean_loss = loss_sum * scale;
    let grads_flat: Vec<F> = grad_sum.into_iter().map(|g| g * scale).collect();
    let grads = params.from_flat(&grads_flat);
    grads.check_finite_grads()?;
    Ok((mean_loss, grads))
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainResult<F> {
    pub params: SinkhornTransformerParams<F>,
    /// Held-out sup-W1 before training and after every iteration.
    pub history: Vec<F>,
    /// Mean training loss per iteration.
    pub losses: Vec<F>,
}

const DIVERGENCE_CAP: f64 = 1e6;

/// Gradient descent (with momentum) on the mean batch loss. The last fifth of
/// the dataset (at least one sample) is held out; `history` records the
/// maximum held-out `coupling_w1(forward, target)` per iteration.
pub fn train<F: Real>(
    dataset: &[CouplingSystemSample<F>],
    params0: &SinkhornTransformerParams<F>,
    cfg: &TrainConfig<F>,
) -> Result<TrainResult<F>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let holdout_n = (dataset.len() / 5).max(1);
    let train_n = dataset.len() - holdout_n;
    if cfg.iterations > 0 && train_n == 0 {
        return Err(Error::Invalid(
            "dataset too small to split into train and held-out parts".into(),
        ));
    }
    let (train_set, holdout) = dataset.split_at(train_n);

    let eval_cfg = cfg.eval_cfg();
    let eval = |p: &SinkhornTransformerParams<F>| -> Result<F> {
        let mut worst = F::zero();
        for s in holdout {
            let sol = forward(p, &s.mu, &s.nu, &eval_cfg)?;
            worst = worst.max(coupling_w1(&sol.coupling, &s.target)?);
        }
        Ok(worst)
    };

    let mut params = params0.clone();
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    let mut losses = Vec::with_capacity(cfg.iterations);
    history.push(eval(&params)?);

    let mut flat = params.flatten();
    let mut velocity = vec![F::zero(); flat.len()];
    let mut order: Vec<usize> = (0..train_n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let batch_size = cfg.batch_size.min(train_n.max(1));
    let mut cursor = 0usize;

    for iter in 0..cfg.iterations {
        let batch: Vec<CouplingSystemSample<F>> = if batch_size >= train_n {
            train_set.to_vec()
        } else {
            if cursor == 0 {
                // Fisher-Yates reshuffle once per epoch, seeded.
                for i in (1..order.len()).rev() {
                    let j = rng.random_range(0..=i);
                    order.swap(i, j);
                }
            }
            let mut b = Vec::with_capacity(batch_size);
            for k in 0..batch_size {
                b.push(train_set[order[(cursor + k) % train_n]].clone());
            }
            cursor = (cursor + batch_size) % train_n;
            b
        };

        let (mean_loss, grads) = grad(&params, &batch, cfg)?;
        let loss_f64 = mean_loss.to_f64().unwrap_or(f64::NAN);
        if !loss_f64.is_finite() || loss_f64 > DIVERGENCE_CAP {
            return Err(Error::Diverged {
                iter,
                loss: loss_f64,
            });
        }
        losses.push(mean_loss);

        let gflat = grads.flatten();
        for ((p, v), g) in flat.iter_mut().zip(velocity.iter_mut()).zip(&gflat) {
            *v = cfg.momentum * *v + *g;
            *p = *p - cfg.learning_rate * *v;
        }
        params = params.from_flat(&flat);
        history.push(eval(&params)?);
    }

    Ok(TrainResult {
        params,
        history,
        losses,
    })
}
