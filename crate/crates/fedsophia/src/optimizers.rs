//! Local optimizer procedures: the clipped, EMA-smoothed,
//! diagonal-curvature-preconditioned update; its stochastic
//! Gauss-Newton-Bartlett curvature estimator; and the plain-SGD and
//! Richardson-iteration baseline updates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::models::{Batch, LogitModel};

/// Hyperparameters of the preconditioned local update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SophiaConfig {
    /// Learning rate.
    pub eta: f64,
    /// Weight-decay coefficient.
    pub lambda: f64,
    /// EMA coefficient for the gradient.
    pub beta1: f64,
    /// EMA coefficient for the curvature estimate.
    pub beta2: f64,
    /// Division guard added under the preconditioner.
    pub epsilon: f64,
    /// Componentwise clip radius of the preconditioned update.
    pub rho: f64,
    /// Curvature refresh interval in local steps.
    pub tau: u64,
    /// Local iterations per communication round.
    pub local_iters: usize,
    /// Mini-batch size (capped at the shard size).
    pub batch_size: usize,
    /// Reset the EMA state whenever the global model is received, instead
    /// of letting it persist across rounds.
    pub reset_moments_on_broadcast: bool,
}

impl Default for SophiaConfig {
    fn default() -> Self {
        Self {
            eta: 0.003,
            lambda: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-12,
            rho: 1.0,
            tau: 5,
            local_iters: 10,
            batch_size: 512,
            reset_moments_on_broadcast: false,
        }
    }
}

impl SophiaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config("eta must be > 0".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config("rho must be > 0".into()));
        }
        if self.tau == 0 {
            return Err(Error::Config("tau must be >= 1".into()));
        }
        if self.local_iters == 0 {
            return Err(Error::Config("local_iters must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-device optimizer state: EMA gradient `m`, EMA curvature diagonal `h`
/// (entries stay nonnegative: the estimator emits squares and the EMA of
/// nonnegatives from a zero init is nonnegative), and the local step
/// counter that drives the refresh schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ParamVector,
    pub h: ParamVector,
    pub step: u64,
}

impl OptimizerState {
    pub fn zeros(dim: usize) -> Self {
        Self {
            m: ParamVector::zeros(dim),
            h: ParamVector::zeros(dim),
            step: 0,
        }
    }
}

/// Componentwise truncation to `[-rho, rho]`.
pub fn clip(z: &ParamVector, rho: f64) -> ParamVector {
    ParamVector::from_vec(z.iter().map(|&v| v.clamp(-rho, rho)).collect())
}

/// `beta * prev + (1 - beta) * sample`, componentwise.
fn ema(prev: &ParamVector, sample: &ParamVector, beta: f64) -> ParamVector {
    let keep = 1.0 - beta;
    ParamVector::from_vec(
        prev.iter()
            .zip(sample.iter())
            .map(|(&p, &s)| beta * p + keep * s)
            .collect(),
    )
}

/// The clipped preconditioned direction `clip(m / max(h, eps), rho)`.
pub fn preconditioned_direction(
    m: &ParamVector,
    h: &ParamVector,
    epsilon: f64,
    rho: f64,
) -> ParamVector {
    let denom = h.max_scalar(epsilon);
    clip(&m.div(&denom).expect("denominator floored above zero"), rho)
}

pub(crate) fn gnb_scale(batch_size: usize, ghat: &ParamVector) -> ParamVector {
    ghat.mul(ghat).expect("same vector").scale(batch_size as f64)
}

/// Gauss-Newton-Bartlett estimate of the curvature diagonal.
///
/// Computes the logits on the mini-batch, samples one label per row from
/// the row softmax, takes the gradient `ghat` of the mean cross-entropy
/// against those sampled labels, and returns `B * ghat (.) ghat`. Entries
/// are nonnegative by construction; the mean over draws approaches the
/// Gauss-Newton diagonal of the mean batch loss.
pub fn gnb_estimate<M: LogitModel>(
    model: &M,
    theta: &ParamVector,
    batch: &Batch,
    rng: &mut impl Rng,
) -> Result<ParamVector> {
    if batch.is_empty() {
        return Err(Error::Capacity("estimator needs a nonempty batch".into()));
    }
    let logits = model.logits(theta, &batch.features)?;
    let probs = logits.row_softmax()?;
    let sampled: Vec<usize> = (0..probs.rows())
        .map(|r| {
            let u: f64 = rng.gen();
            let row = probs.row(r);
            let mut cum = 0.0;
            for (c, &p) in row.iter().enumerate() {
                cum += p;
                if u < cum {
                    return c;
                }
            }
            row.len() - 1
        })
        .collect();
    let ghat = model.gradient_for_labels(theta, &batch.features, &sampled)?;
    Ok(gnb_scale(batch.len(), &ghat))
}

/// Everything produced by one local preconditioned step. `theta_next` is
/// `weight_decayed - update`; the pieces are exposed so the clipping bound
/// and the EMA recurrences can be checked against the exact values used.
#[derive(Debug, Clone)]
pub struct SophiaStep {
    pub theta_next: ParamVector,
    /// `theta - eta * lambda * theta`, before the descent update.
    pub weight_decayed: ParamVector,
    /// `eta * clip(m / max(h, eps), rho)`, the update actually subtracted.
    pub update: ParamVector,
    /// Raw mini-batch gradient that entered the gradient EMA.
    pub gradient: ParamVector,
    /// Raw curvature sample when this step refreshed the estimate.
    pub curvature_sample: Option<ParamVector>,
    pub state: OptimizerState,
}

/// One local step of the preconditioned method.
///
/// The gradient EMA advances every step; the curvature EMA advances only on
/// steps where `step mod tau = 0` (the step counter persists across
/// communication rounds, so the estimate refreshes on the device's own
/// schedule regardless of round boundaries). Weight decay is applied before
/// the clipped descent update.
pub fn sophia_local_step<M: LogitModel>(
    model: &M,
    theta: &ParamVector,
    state: &OptimizerState,
    cfg: &SophiaConfig,
    batch: &Batch,
    rng: &mut impl Rng,
) -> Result<SophiaStep> {
    let gradient = model.gradient_for_labels(theta, &batch.features, &batch.labels)?;
    let m = ema(&state.m, &gradient, cfg.beta1);

    let (h, curvature_sample) = if state.step % cfg.tau == 0 {
        let sample = gnb_estimate(model, theta, batch, rng)?;
        (ema(&state.h, &sample, cfg.beta2), Some(sample))
    } else {
        (state.h.clone(), None)
    };

    let decay = cfg.eta * cfg.lambda;
    let weight_decayed = theta.sub(&theta.scale(decay))?;
    let update = preconditioned_direction(&m, &h, cfg.epsilon, cfg.rho).scale(cfg.eta);
    let theta_next = weight_decayed.sub(&update)?;

    Ok(SophiaStep {
        theta_next,
        weight_decayed,
        update,
        gradient,
        curvature_sample,
        state: OptimizerState {
            m,
            h,
            step: state.step + 1,
        },
    })
}

/// One plain-SGD local step: `theta - eta * gradient`.
pub fn fedavg_local_step<M: LogitModel>(
    model: &M,
    theta: &ParamVector,
    eta: f64,
    batch: &Batch,
) -> Result<ParamVector> {
    if !(eta > 0.0) {
        return Err(Error::Config("eta must be > 0".into()));
    }
    let g = model.gradient_for_labels(theta, &batch.features, &batch.labels)?;
    theta.sub(&g.scale(eta))
}

/// Central-difference Hessian-vector product of a gradient oracle:
/// `(grad(theta + delta v) - grad(theta - delta v)) / (2 delta)` with
/// `delta = 1e-4 / max(1, |v|_inf)`.
pub fn finite_difference_hvp<F>(
    grad: F,
    theta: &ParamVector,
    v: &ParamVector,
) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> Result<ParamVector>,
{
    if !v.all_finite() {
        return Err(Error::Domain("non-finite direction".into()));
    }
    let delta = 1e-4 / v.inf_norm().max(1.0);
    let plus = grad(&theta.add(&v.scale(delta))?)?;
    let minus = grad(&theta.sub(&v.scale(delta))?)?;
    plus.sub(&minus).map(|d| d.scale(1.0 / (2.0 * delta)))
}

/// Hessian-vector product of the model's batch loss at `theta`.
pub fn hessian_vector_product<M: LogitModel>(
    model: &M,
    theta: &ParamVector,
    batch: &Batch,
    v: &ParamVector,
) -> Result<ParamVector> {
    finite_difference_hvp(
        |t| model.gradient_for_labels(t, &batch.features, &batch.labels),
        theta,
        v,
    )
}

const RICHARDSON_DIVERGENCE_LIMIT: f64 = 1e8;

/// Richardson iteration `d <- d + alpha (g - H d)` from `d = 0`, converging
/// to `H^{-1} g` for SPD `H` whenever `alpha < 2 / lambda_max(H)`. Aborts
/// with a divergence error when the iterate's max-norm exceeds `1e8`.
pub fn richardson_direction<F>(
    hv: F,
    gradient: &ParamVector,
    alpha: f64,
    iterations: usize,
) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> Result<ParamVector>,
{
    if !(alpha > 0.0) {
        return Err(Error::Config("alpha must be > 0".into()));
    }
    if iterations == 0 {
        return Err(Error::Config("iteration count must be >= 1".into()));
    }
    let mut d = ParamVector::zeros(gradient.len());
    for r in 0..iterations {
        let residual = gradient.sub(&hv(&d)?)?;
        d = d.add(&residual.scale(alpha))?;
        if d.inf_norm() > RICHARDSON_DIVERGENCE_LIMIT {
            return Err(Error::Divergence(format!(
                "Richardson iterate exceeded {RICHARDSON_DIVERGENCE_LIMIT:e} at step {r} \
                 (step size too large)"
            )));
        }
    }
    Ok(d)
}

/// Approximate Newton direction `H^{-1} g` for the model's batch loss, with
/// the Hessian applied through finite differences. This is the local search
/// direction of the Richardson-iteration baseline.
pub fn done_local_direction<M: LogitModel>(
    model: &M,
    theta: &ParamVector,
    global_gradient: &ParamVector,
    batch: &Batch,
    alpha: f64,
    iterations: usize,
) -> Result<ParamVector> {
    richardson_direction(
        |d| hessian_vector_product(model, theta, batch, d),
        global_gradient,
        alpha,
        iterations,
    )
}

/// Descent flavor on the demonstration quadratic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum QuadraticMethod {
    /// Uniform step size along the raw gradient.
    Gradient,
    /// Gradient divided componentwise by the curvature diagonal (2, 6).
    DiagNewton,
    /// Exact Newton step through the full inverse curvature matrix.
    FullNewton,
}

impl std::fmt::Display for QuadraticMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QuadraticMethod::Gradient => "gradient",
            QuadraticMethod::DiagNewton => "diag-newton",
            QuadraticMethod::FullNewton => "full-newton",
        })
    }
}

/// One row of a demonstration trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub theta: [f64; 2],
    pub value: f64,
}

fn quad_value(t: [f64; 2]) -> f64 {
    t[0] * t[0] + 2.0 * t[0] * t[1] + 3.0 * t[1] * t[1]
}

fn quad_gradient(t: [f64; 2]) -> [f64; 2] {
    [2.0 * t[0] + 2.0 * t[1], 2.0 * t[0] + 6.0 * t[1]]
}

/// Iterates of the chosen method on `f(t) = t1^2 + 2 t1 t2 + 3 t2^2`,
/// whose curvature matrix is `[[2, 2], [2, 6]]`.
///
/// The trajectory starts with the initial point and stops after
/// `max_steps` iterations or as soon as `|theta|_inf <= 1e-12`.
pub fn quadratic_demo(
    start: [f64; 2],
    method: QuadraticMethod,
    eta: f64,
    max_steps: usize,
) -> Vec<TrajectoryPoint> {
    let mut theta = start;
    let mut out = vec![TrajectoryPoint {
        step: 0,
        theta,
        value: quad_value(theta),
    }];
    for step in 1..=max_steps {
        if theta[0].abs().max(theta[1].abs()) <= 1e-12 {
            break;
        }
        let g = quad_gradient(theta);
        let d = match method {
            QuadraticMethod::Gradient => g,
            QuadraticMethod::DiagNewton => [g[0] / 2.0, g[1] / 6.0],
            // H^{-1} = [[0.75, -0.25], [-0.25, 0.25]]
            QuadraticMethod::FullNewton => {
                [0.75 * g[0] - 0.25 * g[1], -0.25 * g[0] + 0.25 * g[1]]
            }
        };
        theta = [theta[0] - eta * d[0], theta[1] - eta * d[1]];
        out.push(TrajectoryPoint {
            step,
            theta,
            value: quad_value(theta),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use crate::models::{BinaryLogistic, MlpSpec};
    use crate::seeding::{stream, Purpose};

    #[test]
    fn clip_examples() {
        let z = ParamVector::from_vec(vec![2.0, -3.0, 0.5]);
        assert_eq!(clip(&z, 1.0).as_slice(), &[1.0, -1.0, 0.5]);

        let small = ParamVector::from_vec(vec![0.3, -0.9]);
        assert_eq!(clip(&small, 1.0), small);
    }

    proptest::proptest! {
        #[test]
        fn clip_odd_symmetry(v in proptest::collection::vec(-10.0..10.0f64, 1..16),
                             rho in 0.1..5.0f64) {
            let z = ParamVector::from_vec(v);
            let neg = z.scale(-1.0);
            let lhs = clip(&z, rho);
            let rhs = clip(&neg, rho).scale(-1.0);
            proptest::prop_assert_eq!(lhs.as_slice(), rhs.as_slice());
            proptest::prop_assert!(lhs.inf_norm() <= rho);
        }
    }

    #[test]
    fn gnb_scale_formula() {
        let ghat = ParamVector::from_vec(vec![0.5, -1.0]);
        assert_eq!(gnb_scale(2, &ghat).as_slice(), &[0.5, 2.0]);
    }

    #[test]
    fn gnb_zero_gradient_gives_zero_estimate() {
        // Saturated logits: softmax is exactly (1, 0) in f64, the sampled
        // label is forced, and ghat = p - onehot = 0 exactly.
        let model = BinaryLogistic::new(1).unwrap();
        let theta = ParamVector::from_vec(vec![1000.0, 0.0]);
        let batch = Batch::new(DenseMatrix::from_rows(&[vec![1.0]]).unwrap(), vec![0]).unwrap();
        let mut rng = stream(1, Purpose::DeviceGnb, 0);
        let est = gnb_estimate(&model, &theta, &batch, &mut rng).unwrap();
        assert_eq!(est.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn gnb_outputs_nonnegative() {
        let spec = MlpSpec::new(vec![3, 4, 2]).unwrap();
        let mut rng = stream(2, Purpose::DeviceGnb, 1);
        let theta = spec.init_params(&mut rng);
        let batch = Batch::new(
            DenseMatrix::from_rows(&[vec![0.1, -0.2, 0.4], vec![1.0, 0.3, -0.6]]).unwrap(),
            vec![0, 1],
        )
        .unwrap();
        let est = gnb_estimate(&spec, &theta, &batch, &mut rng).unwrap();
        assert!(est.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn preconditioned_direction_worked_example() {
        // m = (0.2, -3), h = (0.1, 0), eps = 1e-12, rho = 1:
        // m / max(h, eps) = (2, -3e12) -> clip -> (1, -1).
        let m = ParamVector::from_vec(vec![0.2, -3.0]);
        let h = ParamVector::from_vec(vec![0.1, 0.0]);
        let dir = preconditioned_direction(&m, &h, 1e-12, 1.0);
        assert!((dir[0] - 1.0).abs() < 1e-12);
        assert_eq!(dir[1], -1.0);
    }

    fn constant_loss_batch() -> (MlpSpec, Batch) {
        // Zero features with balanced labels: gradient is exactly zero.
        let spec = MlpSpec::new(vec![2, 2]).unwrap();
        let batch = Batch::new(DenseMatrix::zeros(2, 2), vec![0, 1]).unwrap();
        (spec, batch)
    }

    #[test]
    fn sophia_pure_weight_decay_when_history_is_zero() {
        // Equal biases keep the logits uniform, so the gradient is exactly
        // zero every step and only the decay moves theta.
        let (spec, batch) = constant_loss_batch();
        let theta = ParamVector::from_vec(vec![1.0, -2.0, 0.5, 0.25, 3.0, 3.0]);
        let cfg = SophiaConfig {
            eta: 0.1,
            lambda: 0.1,
            ..SophiaConfig::default()
        };
        let state = OptimizerState::zeros(theta.len());
        let mut rng = stream(3, Purpose::DeviceGnb, 0);
        let step = sophia_local_step(&spec, &theta, &state, &cfg, &batch, &mut rng).unwrap();
        for (next, orig) in step.theta_next.iter().zip(theta.iter()) {
            assert!((next - 0.99 * orig).abs() < 1e-15);
        }
        assert_eq!(step.update.inf_norm(), 0.0);
    }

    #[test]
    fn curvature_refreshes_on_schedule() {
        let spec = MlpSpec::new(vec![2, 3, 2]).unwrap();
        let mut init_rng = stream(4, Purpose::ModelInit, 0);
        let theta = spec.init_params(&mut init_rng);
        let batch = Batch::new(
            DenseMatrix::from_rows(&[vec![0.9, -0.4], vec![-0.2, 1.4], vec![0.4, 0.3]]).unwrap(),
            vec![0, 1, 0],
        )
        .unwrap();
        let cfg = SophiaConfig {
            tau: 2,
            ..SophiaConfig::default()
        };
        let mut rng = stream(4, Purpose::DeviceGnb, 0);

        let s0 = OptimizerState::zeros(theta.len());
        let step1 = sophia_local_step(&spec, &theta, &s0, &cfg, &batch, &mut rng).unwrap();
        assert!(step1.curvature_sample.is_some(), "step 0 refreshes");
        assert!(step1.state.h.inf_norm() > 0.0);

        let step2 =
            sophia_local_step(&spec, &step1.theta_next, &step1.state, &cfg, &batch, &mut rng)
                .unwrap();
        assert!(step2.curvature_sample.is_none(), "step 1 does not refresh");
        assert_eq!(step2.state.h, step1.state.h);
        assert_eq!(step2.state.step, 2);
    }

    #[test]
    fn bounded_update_invariant() {
        // The update actually subtracted obeys the clip bound with zero
        // tolerance. The stored iterate difference can pick up one ulp when
        // `theta_wd - update` lands in a coarser binade, so the theta-space
        // check carries exactly that quantization allowance.
        use rand::Rng as _;
        let spec = MlpSpec::new(vec![3, 4, 3]).unwrap();
        let mut rng = stream(5, Purpose::ModelInit, 3);
        let cfg = SophiaConfig {
            eta: 0.125,
            rho: 1.0,
            lambda: 1e-4,
            ..SophiaConfig::default()
        };
        let mut state = OptimizerState::zeros(spec.param_dim());
        let mut theta = spec.init_params(&mut rng);
        let mut gnb_rng = stream(5, Purpose::DeviceGnb, 3);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let labels = (0..3).map(|_| rng.gen_range(0..3)).collect();
            let batch = Batch::new(DenseMatrix::from_rows(&rows).unwrap(), labels).unwrap();
            let step = sophia_local_step(&spec, &theta, &state, &cfg, &batch, &mut gnb_rng).unwrap();
            let bound = cfg.eta * cfg.rho;
            assert!(step.update.inf_norm() <= bound, "exact update bound");
            let diff = step.theta_next.sub(&step.weight_decayed).unwrap();
            let quantum = (bound + step.weight_decayed.inf_norm()) * f64::EPSILON;
            assert!(diff.inf_norm() <= bound + quantum);
            assert!(step.state.h.iter().all(|&v| v >= 0.0));
            theta = step.theta_next;
            state = step.state;
        }
    }

    #[test]
    fn ema_replay_is_bitwise() {
        use rand::Rng as _;
        let spec = MlpSpec::new(vec![2, 3, 2]).unwrap();
        let mut rng = stream(6, Purpose::ModelInit, 4);
        let cfg = SophiaConfig {
            tau: 2,
            ..SophiaConfig::default()
        };
        let mut theta = spec.init_params(&mut rng);
        let mut state = OptimizerState::zeros(spec.param_dim());
        let mut gnb_rng = stream(6, Purpose::DeviceGnb, 4);

        let mut grads = Vec::new();
        let mut samples = Vec::new();
        for _ in 0..7 {
            let rows: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let labels = (0..2).map(|_| rng.gen_range(0..2)).collect();
            let batch = Batch::new(DenseMatrix::from_rows(&rows).unwrap(), labels).unwrap();
            let step = sophia_local_step(&spec, &theta, &state, &cfg, &batch, &mut gnb_rng).unwrap();
            grads.push(step.gradient.clone());
            samples.push(step.curvature_sample.clone());
            theta = step.theta_next;
            state = step.state;
        }

        // Replay the recorded sequence through the recurrences directly.
        let d = spec.param_dim();
        let mut m = vec![0.0; d];
        let mut h = vec![0.0; d];
        for (g, s) in grads.iter().zip(&samples) {
            for j in 0..d {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            }
            if let Some(sample) = s {
                for j in 0..d {
                    h[j] = cfg.beta2 * h[j] + (1.0 - cfg.beta2) * sample[j];
                }
            }
        }
        assert_eq!(state.m.as_slice(), &m[..]);
        assert_eq!(state.h.as_slice(), &h[..]);
    }

    #[test]
    fn fedavg_fixed_point_on_zero_gradient() {
        let (spec, batch) = constant_loss_batch();
        let theta = ParamVector::from_vec(vec![0.3, -0.7, 1.0, 0.0, 2.0, 2.0]);
        let next = fedavg_local_step(&spec, &theta, 0.5, &batch).unwrap();
        assert_eq!(next, theta);
    }

    #[test]
    fn fedavg_closed_form_bias_update() {
        // Zero features, all labels 0: gradient w.r.t. the biases is
        // softmax(0) - (1, 0) = (-0.5, 0.5); eta = 0.5 moves the biases by
        // (0.25, -0.25) and leaves the weights alone.
        let spec = MlpSpec::new(vec![2, 2]).unwrap();
        let batch = Batch::new(DenseMatrix::zeros(2, 2), vec![0, 0]).unwrap();
        let theta = ParamVector::zeros(spec.param_dim());
        let next = fedavg_local_step(&spec, &theta, 0.5, &batch).unwrap();
        assert_eq!(&next.as_slice()[..4], &[0.0; 4]);
        assert!((next[4] - 0.25).abs() < 1e-15);
        assert!((next[5] + 0.25).abs() < 1e-15);
    }

    fn quadratic_grad(t: &ParamVector) -> Result<ParamVector> {
        // f = theta^T H theta / 2 with H = [[2, 2], [2, 6]].
        Ok(ParamVector::from_vec(vec![
            2.0 * t[0] + 2.0 * t[1],
            2.0 * t[0] + 6.0 * t[1],
        ]))
    }

    #[test]
    fn hvp_matches_exact_quadratic_curvature() {
        let theta = ParamVector::from_vec(vec![0.3, -0.8]);
        let v = ParamVector::from_vec(vec![1.0, 1.0]);
        let hv = finite_difference_hvp(quadratic_grad, &theta, &v).unwrap();
        assert!((hv[0] - 4.0).abs() < 1e-6);
        assert!((hv[1] - 8.0).abs() < 1e-6);
    }

    #[test]
    fn hvp_zero_direction() {
        let theta = ParamVector::from_vec(vec![0.3, -0.8]);
        let hv = finite_difference_hvp(quadratic_grad, &theta, &ParamVector::zeros(2)).unwrap();
        assert_eq!(hv.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn hvp_symmetric_bilinear_form_on_mlp() {
        use rand::Rng as _;
        let spec = MlpSpec::new(vec![2, 3, 2]).unwrap();
        let mut rng = stream(7, Purpose::ModelInit, 5);
        let theta = spec.init_params(&mut rng);
        let batch = Batch::new(
            DenseMatrix::from_rows(&[vec![0.5, -0.3], vec![-1.1, 0.8]]).unwrap(),
            vec![0, 1],
        )
        .unwrap();
        for _ in 0..5 {
            let d = spec.param_dim();
            let u = ParamVector::from_vec((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let v = ParamVector::from_vec((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let hu = hessian_vector_product(&spec, &theta, &batch, &u).unwrap();
            let hv = hessian_vector_product(&spec, &theta, &batch, &v).unwrap();
            let lhs = v.dot(&hu).unwrap();
            let rhs = u.dot(&hv).unwrap();
            assert!((lhs - rhs).abs() < 1e-6, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn richardson_identity_one_step() {
        let g = ParamVector::from_vec(vec![0.4, -2.5, 7.0]);
        let d = richardson_direction(|v| Ok(v.clone()), &g, 1.0, 1).unwrap();
        assert_eq!(d, g);
    }

    #[test]
    fn richardson_solves_quadratic() {
        // H^{-1} (4, 8) = (1, 1) from the direct 2x2 solve.
        let g = ParamVector::from_vec(vec![4.0, 8.0]);
        let hv = |d: &ParamVector| {
            Ok(ParamVector::from_vec(vec![
                2.0 * d[0] + 2.0 * d[1],
                2.0 * d[0] + 6.0 * d[1],
            ]))
        };
        let d = richardson_direction(hv, &g, 0.1, 200).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-4);
        assert!((d[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn richardson_diverges_past_spectral_limit() {
        // lambda_max of [[2, 2], [2, 6]] is 4 + 2 sqrt(2) ~ 6.83, so the
        // stability limit is 2 / 6.83 ~ 0.293; alpha = 0.5 must blow up.
        let g = ParamVector::from_vec(vec![4.0, 8.0]);
        let hv = |d: &ParamVector| {
            Ok(ParamVector::from_vec(vec![
                2.0 * d[0] + 2.0 * d[1],
                2.0 * d[0] + 6.0 * d[1],
            ]))
        };
        let err = richardson_direction(hv, &g, 0.5, 1000).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
    }

    #[test]
    fn done_direction_near_newton_on_mlp() {
        // The finite-difference route and the generic Richardson solver must
        // agree when fed the same operator.
        let spec = MlpSpec::new(vec![2, 2]).unwrap();
        let mut rng = stream(8, Purpose::ModelInit, 6);
        let theta = spec.init_params(&mut rng);
        let batch = Batch::new(
            DenseMatrix::from_rows(&[vec![0.5, -0.3], vec![-1.1, 0.8], vec![0.2, 0.9]]).unwrap(),
            vec![0, 1, 0],
        )
        .unwrap();
        let g = spec.gradient(&theta, &batch).unwrap();
        let via_done = done_local_direction(&spec, &theta, &g, &batch, 0.5, 80).unwrap();
        let via_generic = richardson_direction(
            |d| hessian_vector_product(&spec, &theta, &batch, d),
            &g,
            0.5,
            80,
        )
        .unwrap();
        assert!(via_done.sub(&via_generic).unwrap().inf_norm() < 1e-12);
    }

    #[test]
    fn quadratic_demo_full_newton_converges_in_one_step() {
        let traj = quadratic_demo([1.0, 1.0], QuadraticMethod::FullNewton, 1.0, 50);
        assert_eq!(traj.len(), 2);
        assert_eq!(traj[1].theta, [0.0, 0.0]);
    }

    #[test]
    fn quadratic_demo_diag_newton_hand_step() {
        let traj = quadratic_demo([1.0, 1.0], QuadraticMethod::DiagNewton, 1.0, 1);
        assert!((traj[1].theta[0] + 1.0).abs() < 1e-12);
        assert!((traj[1].theta[1] + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_demo_stationary_at_origin() {
        for method in [
            QuadraticMethod::Gradient,
            QuadraticMethod::DiagNewton,
            QuadraticMethod::FullNewton,
        ] {
            let traj = quadratic_demo([0.0, 0.0], method, 0.5, 10);
            assert_eq!(traj.len(), 1);
            assert_eq!(traj[0].theta, [0.0, 0.0]);
        }
    }

    #[test]
    fn quadratic_demo_gradient_needs_many_steps() {
        let traj = quadratic_demo([1.0, 1.0], QuadraticMethod::Gradient, 0.1, 200);
        let steps_to_tol = traj
            .iter()
            .find(|p| p.theta[0].abs().max(p.theta[1].abs()) <= 1e-3)
            .map(|p| p.step)
            .expect("gradient descent converges eventually");
        assert!(steps_to_tol > 10, "took {steps_to_tol} steps");
    }
}
