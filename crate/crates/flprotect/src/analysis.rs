//! Closed-form protection machinery.
//!
//! Everything here treats the innovation/mismatch sequences as deterministic
//! inputs and takes expectations only over the participation and interception
//! coin flips. The central objects:
//!
//! * the innovation gain `G` mapping a broadcast-point gradient to the local
//!   GD displacement, and the one-round transition `xi_t = A xi_t' + B zeta_t`
//!   (exact for quadratic objectives);
//! * the linear map governing the joint error covariance and its stability;
//! * the per-round protection lower bound and the perfect-eavesdropping
//!   closed form, both cross-checked elsewhere against exhaustive enumeration.

use nalgebra::DMatrix;

use crate::adversary::{check_stability, StabilityReport};
use crate::error::{Error, Result};
use crate::fl::{ModelVector, QuadraticObjective};

/// One-round innovation linearization. With a constant Hessian the gain does
/// not depend on the broadcast point, so a single `gain` serves both rounds.
#[derive(Debug, Clone)]
pub struct InnovationTransition {
    /// Coefficient on the previous innovation.
    pub a: DMatrix<f64>,
    /// Coefficient on the current server-client mismatch.
    pub b: DMatrix<f64>,
    /// GD displacement gain `G = -eta * sum_{k<L} (I - eta Q)^k`.
    pub gain: DMatrix<f64>,
}

/// Displacement gain of `steps` local GD steps on `obj`:
/// `G = -eta * (I + F + ... + F^{L-1})` with `F = I - eta Q`, so that the
/// innovation equals `G * grad f(x_s)`.
pub fn innovation_gain(obj: &QuadraticObjective, eta: f64, steps: usize) -> Result<DMatrix<f64>> {
    if steps == 0 {
        return Err(Error::Config("local step count must be at least 1".into()));
    }
    obj.validate_step_size(eta)?;
    let d = obj.dim();
    let f = DMatrix::identity(d, d) - eta * obj.hessian();
    let mut term = DMatrix::identity(d, d);
    let mut sum = DMatrix::identity(d, d);
    for _ in 1..steps {
        term = &term * &f;
        sum += &term;
    }
    Ok(-eta * sum)
}

/// Exact innovation transition for a quadratic objective:
/// `A = I + G Q` and `B = G Q`.
pub fn innovation_transition(
    obj: &QuadraticObjective,
    eta: f64,
    steps: usize,
) -> Result<InnovationTransition> {
    let gain = innovation_gain(obj, eta, steps)?;
    let gq = &gain * obj.hessian();
    let d = obj.dim();
    Ok(InnovationTransition {
        a: DMatrix::identity(d, d) + &gq,
        b: gq,
        gain,
    })
}

/// Joint error/estimation-gap transition for one round outcome.
pub fn joint_transition(delta: bool, mu: bool, m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    let mut a = DMatrix::zeros(2 * d, 2 * d);
    a.view_mut((0, 0), (d, d)).fill_with_identity();
    if delta {
        if !mu {
            a.view_mut((0, d), (d, d)).copy_from(m);
            a.view_mut((d, d), (d, d)).copy_from(m);
        }
    } else {
        a.view_mut((d, d), (d, d)).fill_with_identity();
    }
    a
}

/// Expectation of [`joint_transition`] over both coin flips.
pub fn mean_joint_transition(p: f64, gamma: f64, m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    let m1 = p * (1.0 - gamma) * m;
    let mut a = DMatrix::zeros(2 * d, 2 * d);
    a.view_mut((0, 0), (d, d)).fill_with_identity();
    a.view_mut((0, d), (d, d)).copy_from(&m1);
    a.view_mut((d, d), (d, d))
        .copy_from(&((1.0 - p) * DMatrix::identity(d, d) + &m1));
    a
}

/// Applies the covariance map `Sigma -> E[A Sigma A']` in closed form:
/// `(1-p) Sigma + p K1 Sigma K1' + p gamma (1-gamma) K2 Sigma K2'`.
pub fn covariance_map(
    sigma: &DMatrix<f64>,
    p: f64,
    gamma: f64,
    m: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    if sigma.nrows() != 2 * d || sigma.ncols() != 2 * d {
        return Err(Error::Contract(format!(
            "covariance must be {0}x{0} for a {1}-dimensional model",
            2 * d,
            d
        )));
    }
    let asym = (sigma - sigma.transpose()).norm();
    if asym > 1e-9 * (1.0 + sigma.norm()) {
        return Err(Error::Contract("covariance input must be symmetric".into()));
    }
    let shrunk = (1.0 - gamma) * m;
    let mut k1 = DMatrix::zeros(2 * d, 2 * d);
    k1.view_mut((0, 0), (d, d)).fill_with_identity();
    k1.view_mut((0, d), (d, d)).copy_from(&shrunk);
    k1.view_mut((d, d), (d, d)).copy_from(&shrunk);
    let mut k2 = DMatrix::zeros(2 * d, 2 * d);
    k2.view_mut((0, d), (d, d)).copy_from(m);
    k2.view_mut((d, d), (d, d)).copy_from(m);
    Ok((1.0 - p) * sigma
        + p * (&k1 * sigma * k1.transpose())
        + p * gamma * (1.0 - gamma) * (&k2 * sigma * k2.transpose()))
}

/// Distribution of the most recent participation round strictly before `t`:
/// weight `(1-p)^t` on "never" and `p (1-p)^{t-1-k}` on each `k < t`.
/// Returned as `(never_weight, per_round_weights)`.
pub fn selection_distribution(p: f64, t: usize) -> (f64, Vec<f64>) {
    let q = 1.0 - p;
    let never = q.powi(t as i32);
    let weights = (0..t).map(|k| p * q.powi((t - 1 - k) as i32)).collect();
    (never, weights)
}

/// Mean innovation at the last participation time,
/// `sum_{s<t} p (1-p)^{t-1-s} xi_s` (zero when the client has never
/// participated, by the convention that the pre-history innovation is zero).
pub fn innovation_selection_mean(xi_history: &[ModelVector], p: f64, t: usize) -> ModelVector {
    assert!(xi_history.len() >= t, "innovation history shorter than t");
    let d = xi_history.first().map_or(0, |v| v.len());
    let (_, weights) = selection_distribution(p, t);
    let mut mean = ModelVector::zeros(d);
    for (k, w) in weights.iter().enumerate() {
        mean += *w * &xi_history[k];
    }
    mean
}

/// Variance of the last-selected innovation around its mean:
/// `(1-p)^t ||l_t||^2 + sum_{k<t} p (1-p)^{t-1-k} ||xi_k - l_t||^2`.
pub fn innovation_variance(xi_history: &[ModelVector], p: f64, t: usize) -> f64 {
    let ell = innovation_selection_mean(xi_history, p, t);
    let (never, weights) = selection_distribution(p, t);
    let mut var = never * ell.norm_squared();
    for (k, w) in weights.iter().enumerate() {
        var += w * (&xi_history[k] - &ell).norm_squared();
    }
    var
}

/// Covariance matrix of the last-selected innovation around its mean.
pub fn innovation_selection_covariance(
    xi_history: &[ModelVector],
    p: f64,
    t: usize,
) -> DMatrix<f64> {
    let ell = innovation_selection_mean(xi_history, p, t);
    let (never, weights) = selection_distribution(p, t);
    let mut cov = never * (&ell * ell.transpose());
    for (k, w) in weights.iter().enumerate() {
        let dev = &xi_history[k] - &ell;
        cov += *w * (&dev * dev.transpose());
    }
    cov
}

/// Residual innovation after removing the surrogate-propagated mean:
/// `xi_t - M l_t`.
pub fn innovation_residual(
    xi_t: &ModelVector,
    m: &DMatrix<f64>,
    ell_t: &ModelVector,
) -> ModelVector {
    xi_t - m * ell_t
}

/// The same residual written as the explicit participation-history expansion
/// `(1-p)^t xi_t + sum_{k<t} (1-p)^{t-k-1} p (xi_t - M xi_k)`. Kept as an
/// independent route for consistency checks.
pub fn innovation_residual_expanded(
    xi_history: &[ModelVector],
    m: &DMatrix<f64>,
    p: f64,
    t: usize,
) -> ModelVector {
    assert!(xi_history.len() > t, "expanded residual needs xi at round t");
    let xi_t = &xi_history[t];
    let q = 1.0 - p;
    let mut out = q.powi(t as i32) * xi_t;
    for k in 0..t {
        out += q.powi((t - k - 1) as i32) * p * (xi_t - m * &xi_history[k]);
    }
    out
}

/// Expected estimation gap `E[q_t]` for `t = 0..=horizon`:
/// `E[q_{t+1}] = ((1-p) I + p(1-gamma) M) E[q_t] + p(1-gamma)(xi_t - M l_t)`.
pub fn expected_estimation_gap(
    xi_history: &[ModelVector],
    p: f64,
    gamma: f64,
    m: &DMatrix<f64>,
    horizon: usize,
) -> Vec<ModelVector> {
    assert!(xi_history.len() >= horizon);
    let d = m.nrows();
    let m2 = (1.0 - p) * DMatrix::identity(d, d) + p * (1.0 - gamma) * m;
    let drive = p * (1.0 - gamma);
    let mut series = Vec::with_capacity(horizon + 1);
    series.push(ModelVector::zeros(d));
    for t in 0..horizon {
        let ell = innovation_selection_mean(xi_history, p, t);
        let h = innovation_residual(&xi_history[t], m, &ell);
        let prev = &series[t];
        series.push(&m2 * prev + drive * h);
    }
    series
}

/// Per-round covariance injected into the error block by one round's
/// randomness, and its trace. The last term is the propagated innovation
/// spread `M Cov M'`.
pub struct FluctuationCovariance {
    pub matrix: DMatrix<f64>,
    pub trace: f64,
}

pub fn fluctuation_covariance(
    s_t: &ModelVector,
    r_t: &ModelVector,
    xi_history: &[ModelVector],
    p: f64,
    gamma: f64,
    m: &DMatrix<f64>,
    t: usize,
) -> FluctuationCovariance {
    let sr = s_t + r_t;
    let cov = innovation_selection_covariance(xi_history, p, t);
    let propagated = m * cov * m.transpose();
    let matrix = p * (1.0 - p) * (1.0 - gamma) * (&sr * sr.transpose())
        + p * p * gamma * (1.0 - gamma) * (s_t * s_t.transpose())
        + p * (1.0 - p) * gamma * (r_t * r_t.transpose())
        + p * (1.0 - gamma) * propagated;
    let trace = matrix.trace();
    FluctuationCovariance { matrix, trace }
}

/// Per-round output of the protection lower-bound pipeline.
///
/// Round quantities driven by that round's inputs (`r`, `h`, `s`, `g`,
/// `bound_stationary`) have length `horizon`; state quantities defined at
/// every time index (`ell`, `q_mean`, `var`, `mean_error`, `bound`) have
/// length `horizon + 1`.
#[derive(Debug, Clone)]
pub struct BoundSeries {
    pub p: f64,
    pub gamma: f64,
    pub m: DMatrix<f64>,
    /// Initial client-adversary gap.
    pub initial_gap: ModelVector,
    /// Mean innovation at the last selection time.
    pub ell: Vec<ModelVector>,
    /// Expected estimation gap.
    pub q_mean: Vec<ModelVector>,
    /// Innovation selection variance (unpropagated).
    pub var: Vec<f64>,
    /// Mismatch estimation error `zeta_t - zeta_hat_t`.
    pub r: Vec<ModelVector>,
    /// Innovation residual `xi_t - M l_t`.
    pub h: Vec<ModelVector>,
    /// Residual plus propagated expected gap.
    pub s: Vec<ModelVector>,
    /// Asymptotic mean drift (steady-state resolvent form).
    pub g: Vec<ModelVector>,
    /// Exact mean error (finite-horizon recursion).
    pub mean_error: Vec<ModelVector>,
    /// Finite-horizon lower bound on the expected squared error,
    /// valid round by round.
    pub bound: Vec<f64>,
    /// Steady-state per-round bound value; meaningful in the tail,
    /// where it converges to the same limit as `bound`.
    pub bound_stationary: Vec<f64>,
    pub tail_window: usize,
    /// Minimum of `bound` over the final `tail_window` rounds.
    pub tail_min_bound: f64,
    /// Minimum of `bound_stationary` over the final `tail_window` rounds.
    pub tail_min_stationary: f64,
    pub stability: StabilityReport,
    /// Condition number of the mean-drift resolvent `I - (1-gamma) M`;
    /// values above 1e10 make the drift term numerically unreliable.
    pub resolvent_condition: f64,
}

/// Condition threshold above which resolvent-based quantities are suspect.
pub const CONDITION_WARN_THRESHOLD: f64 = 1e10;

fn tail_min(values: &[f64], window: usize) -> f64 {
    let w = window.clamp(1, values.len());
    values[values.len() - w..]
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Default tail used as the liminf proxy: the last quarter of the horizon.
pub fn default_tail_window(horizon: usize) -> usize {
    (horizon / 4).max(1)
}

/// Runs the full lower-bound pipeline on scripted innovation and mismatch
/// sequences.
///
/// Two bound series come out. `bound` accumulates each round's fluctuation
/// injection with its geometric survival factor and adds the exact mean
/// drift; it lower-bounds the expected squared error at every round.
/// `bound_stationary` is the steady-state form (fluctuation injection scaled
/// by its stationary accumulation factor plus the resolvent mean drift); the
/// two converge to the same tail limit. With `gamma = 1` the pipeline reduces
/// exactly to [`perfect_eavesdrop_protection`].
#[allow(clippy::too_many_arguments)]
pub fn protection_lower_bound(
    xi_history: &[ModelVector],
    zeta_history: &[ModelVector],
    zeta_hat_history: &[ModelVector],
    p: f64,
    gamma: f64,
    m: &DMatrix<f64>,
    x_c0: &ModelVector,
    x_a0: &ModelVector,
    horizon: usize,
    tail_window: Option<usize>,
) -> Result<BoundSeries> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!(
            "participation probability must be in (0, 1], got {p}"
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!(
            "interception probability must be in [0, 1], got {gamma}"
        )));
    }
    if xi_history.len() < horizon || zeta_history.len() < horizon || zeta_hat_history.len() < horizon
    {
        return Err(Error::Config(
            "scripted sequences must cover every round of the horizon".into(),
        ));
    }
    let d = x_c0.len();
    if x_a0.len() != d || m.nrows() != d || m.ncols() != d {
        return Err(Error::Config("dimension mismatch in bound inputs".into()));
    }
    let window = tail_window.unwrap_or_else(|| default_tail_window(horizon));

    let initial_gap = x_c0 - x_a0;
    let stability = check_stability(m, p, gamma);
    let r: Vec<ModelVector> = (0..horizon)
        .map(|t| &zeta_history[t] - &zeta_hat_history[t])
        .collect();

    if gamma >= 1.0 {
        return Ok(perfect_eavesdrop_bound_series(
            xi_history, &r, p, m, initial_gap, horizon, window, stability,
        ));
    }

    let identity = DMatrix::identity(d, d);
    let resolvent_base = &identity - (1.0 - gamma) * m;
    let singular_values = resolvent_base.clone().svd(false, false).singular_values;
    let (s_max, s_min) = singular_values
        .iter()
        .fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
    let resolvent_condition = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    let resolvent = resolvent_base.try_inverse().ok_or_else(|| {
        Error::Config(
            "I - (1-gamma) M is singular; the surrogate matrix violates the spectral stability \
             condition"
                .into(),
        )
    })?;
    let m1 = p * (1.0 - gamma) * m;

    let q_mean = expected_estimation_gap(xi_history, p, gamma, m, horizon);
    let mut ell = Vec::with_capacity(horizon + 1);
    let mut var = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        ell.push(innovation_selection_mean(xi_history, p, t));
        var.push(innovation_variance(xi_history, p, t));
    }

    let mut h = Vec::with_capacity(horizon);
    let mut s = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let h_t = innovation_residual(&xi_history[t], m, &ell[t]);
        s.push(&h_t + m * &q_mean[t]);
        h.push(h_t);
    }

    // Exact mean recursion and geometric fluctuation accumulation.
    let survival = 1.0 - p + p * gamma;
    let mut mean_error = Vec::with_capacity(horizon + 1);
    let mut bound = Vec::with_capacity(horizon + 1);
    let mut g = Vec::with_capacity(horizon);
    let mut bound_stationary = Vec::with_capacity(horizon);
    let mut mean = initial_gap.clone();
    let mut fluct = 0.0f64;
    let mut r_sum = ModelVector::zeros(d);
    let mut h_sum = ModelVector::zeros(d);
    mean_error.push(mean.clone());
    bound.push(fluct + mean.norm_squared());
    let stationary_scale = 1.0 / (p * (1.0 - gamma));
    for t in 0..horizon {
        let v_t = fluctuation_covariance(&s[t], &r[t], xi_history, p, gamma, m, t);
        r_sum += &r[t];
        h_sum += &h[t];
        let g_t = &initial_gap + p * &r_sum + p * (1.0 - gamma) * (&resolvent * &h_sum);
        bound_stationary.push(stationary_scale * v_t.trace + g_t.norm_squared());
        g.push(g_t);

        mean = &mean + &m1 * &q_mean[t] + p * &r[t] + p * (1.0 - gamma) * &h[t];
        fluct = survival * fluct + v_t.trace;
        mean_error.push(mean.clone());
        bound.push(fluct + mean.norm_squared());
    }

    let tail_min_bound = tail_min(&bound, window);
    let tail_min_stationary = tail_min(&bound_stationary, window);
    Ok(BoundSeries {
        p,
        gamma,
        m: m.clone(),
        initial_gap,
        ell,
        q_mean,
        var,
        r,
        h,
        s,
        g,
        mean_error,
        bound,
        bound_stationary,
        tail_window: window,
        tail_min_bound,
        tail_min_stationary,
        stability,
        resolvent_condition,
    })
}

/// Builds a [`BoundSeries`] for the perfect-eavesdropping case, where the
/// closed form is an equality and the residual machinery degenerates.
#[allow(clippy::too_many_arguments)]
fn perfect_eavesdrop_bound_series(
    xi_history: &[ModelVector],
    r: &[ModelVector],
    p: f64,
    m: &DMatrix<f64>,
    initial_gap: ModelVector,
    horizon: usize,
    window: usize,
    stability: StabilityReport,
) -> BoundSeries {
    let d = initial_gap.len();
    let series = perfect_eavesdrop_protection_from_r(r, p, &initial_gap, horizon, Some(window));
    let mut ell = Vec::with_capacity(horizon + 1);
    let mut var = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        ell.push(innovation_selection_mean(xi_history, p, t));
        var.push(innovation_variance(xi_history, p, t));
    }
    let h: Vec<ModelVector> = (0..horizon)
        .map(|t| innovation_residual(&xi_history[t], m, &ell[t]))
        .collect();
    let mut mean_error = Vec::with_capacity(horizon + 1);
    let mut g = Vec::with_capacity(horizon);
    let mut mean = initial_gap.clone();
    mean_error.push(mean.clone());
    for r_t in r.iter().take(horizon) {
        mean = &mean + p * r_t;
        g.push(mean.clone());
        mean_error.push(mean.clone());
    }
    BoundSeries {
        p,
        gamma: 1.0,
        m: m.clone(),
        initial_gap,
        ell,
        q_mean: vec![ModelVector::zeros(d); horizon + 1],
        var,
        r: r.to_vec(),
        s: h.clone(),
        h,
        g,
        mean_error,
        bound_stationary: series.values[1..].to_vec(),
        tail_min_bound: tail_min(&series.values, window),
        tail_min_stationary: tail_min(&series.values[1..], window.min(horizon.max(1))),
        bound: series.values,
        tail_window: window,
        stability,
        resolvent_condition: 1.0,
    }
}

/// Exact protection under guaranteed interception.
#[derive(Debug, Clone)]
pub struct PerfectEavesdropSeries {
    /// `values[t]` is the expected squared error at round `t`:
    /// `p(1-p) sum_{k<t} ||r_k||^2 + ||gap + p sum_{k<t} r_k||^2`.
    pub values: Vec<f64>,
    /// Minimum over the tail window, the liminf proxy.
    pub tail_min: f64,
}

/// Closed-form protection when every participation round is intercepted.
/// This is an equality, not a bound: only the mismatch estimation errors and
/// the initial gap matter.
pub fn perfect_eavesdrop_protection(
    r_history: &[ModelVector],
    p: f64,
    x_c0: &ModelVector,
    x_a0: &ModelVector,
    horizon: usize,
    tail_window: Option<usize>,
) -> Result<PerfectEavesdropSeries> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!(
            "participation probability must be in [0, 1], got {p}"
        )));
    }
    if r_history.len() < horizon {
        return Err(Error::Config(
            "mismatch-error history must cover every round of the horizon".into(),
        ));
    }
    Ok(perfect_eavesdrop_protection_from_r(
        r_history,
        p,
        &(x_c0 - x_a0),
        horizon,
        tail_window,
    ))
}

fn perfect_eavesdrop_protection_from_r(
    r_history: &[ModelVector],
    p: f64,
    gap: &ModelVector,
    horizon: usize,
    tail_window: Option<usize>,
) -> PerfectEavesdropSeries {
    let window = tail_window.unwrap_or_else(|| default_tail_window(horizon));
    let mut values = Vec::with_capacity(horizon + 1);
    let mut fluct = 0.0;
    let mut mean = gap.clone();
    values.push(mean.norm_squared());
    for r_k in r_history.iter().take(horizon) {
        fluct += p * (1.0 - p) * r_k.norm_squared();
        mean += p * r_k;
        values.push(fluct + mean.norm_squared());
    }
    let tail_min = tail_min(&values, window);
    PerfectEavesdropSeries { values, tail_min }
}

/// Result of maximizing the perfect-eavesdropping protection over the
/// participation probability.
#[derive(Debug, Clone, Copy)]
pub struct OptimalSampling {
    pub p_star: f64,
    pub value: f64,
    /// Set when the objective does not depend on `p` at all.
    pub flat: bool,
}

/// Maximizes the perfect-eavesdropping protection at the given horizon over
/// `p` in `[0, 1]`. The objective is quadratic in `p`, so the maximizer is
/// the parabola vertex clamped to the interval, or the better endpoint when
/// the parabola opens upward.
pub fn optimal_sampling_probability(
    r_history: &[ModelVector],
    x_c0: &ModelVector,
    x_a0: &ModelVector,
    horizon: usize,
) -> Result<OptimalSampling> {
    if r_history.len() < horizon {
        return Err(Error::Config(
            "mismatch-error history must cover every round of the horizon".into(),
        ));
    }
    let gap = x_c0 - x_a0;
    let d = gap.len();
    let mut r_sq = 0.0;
    let mut r_sum = ModelVector::zeros(d);
    for r_k in r_history.iter().take(horizon) {
        r_sq += r_k.norm_squared();
        r_sum += r_k;
    }
    // value(p) = a p^2 + b p + c
    let a = r_sum.norm_squared() - r_sq;
    let b = r_sq + 2.0 * gap.dot(&r_sum);
    let c = gap.norm_squared();
    let eval = |p: f64| a * p * p + b * p + c;

    if a == 0.0 && b == 0.0 {
        return Ok(OptimalSampling {
            p_star: 0.0,
            value: c,
            flat: true,
        });
    }
    let p_star = if a < 0.0 {
        (-b / (2.0 * a)).clamp(0.0, 1.0)
    } else if a > 0.0 {
        if eval(1.0) >= eval(0.0) {
            1.0
        } else {
            0.0
        }
    } else if b > 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(OptimalSampling {
        p_star,
        value: eval(p_star),
        flat: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::fl::{generate_objectives, local_update, ObjectiveSpec};

    fn scalar_obj(q: f64) -> QuadraticObjective {
        QuadraticObjective::new(DMatrix::from_element(1, 1, q), DVector::zeros(1)).unwrap()
    }

    fn scalars(values: &[f64]) -> Vec<ModelVector> {
        values.iter().map(|&v| DVector::from_element(1, v)).collect()
    }

    #[test]
    fn gain_single_step_is_minus_eta() {
        let g = innovation_gain(&scalar_obj(1.0), 0.1, 1).unwrap();
        assert_eq!(g[(0, 0)], -0.1);
    }

    #[test]
    fn gain_two_steps_scalar() {
        let g = innovation_gain(&scalar_obj(1.0), 0.1, 2).unwrap();
        assert!((g[(0, 0)] - (-0.19)).abs() < 1e-15);
        // Cross-check against direct GD displacement from x = 1.
        let xi = local_update(&DVector::from_element(1, 1.0), &scalar_obj(1.0), 0.1, 2).unwrap();
        assert!((g[(0, 0)] * 1.0 - xi[0]).abs() < 1e-15);
    }

    #[test]
    fn zero_hessian_gain_accumulates_steps() {
        let obj = QuadraticObjective::new(DMatrix::zeros(2, 2), DVector::zeros(2)).unwrap();
        let g = innovation_gain(&obj, 0.05, 4).unwrap();
        assert_eq!(g, DMatrix::identity(2, 2) * (-0.2));
    }

    #[test]
    fn transition_zero_hessian_is_identity() {
        let obj = QuadraticObjective::new(DMatrix::zeros(2, 2), DVector::zeros(2)).unwrap();
        let tr = innovation_transition(&obj, 0.05, 3).unwrap();
        assert_eq!(tr.a, DMatrix::identity(2, 2));
        assert_eq!(tr.b, DMatrix::zeros(2, 2));
    }

    #[test]
    fn transition_scalar_hand_values() {
        let tr = innovation_transition(&scalar_obj(1.0), 0.1, 1).unwrap();
        assert!((tr.a[(0, 0)] - 0.9).abs() < 1e-15);
        assert!((tr.b[(0, 0)] - (-0.1)).abs() < 1e-15);
    }

    #[test]
    fn transition_is_exact_on_quadratics() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let spec = ObjectiveSpec::default();
        for _ in 0..20 {
            let obj = &generate_objectives(3, 1, &spec, &mut rng).unwrap()[0];
            let eta = 0.3 / obj.curvature();
            let steps = 1 + (rng.random::<u32>() % 4) as usize;
            let tr = innovation_transition(obj, eta, steps).unwrap();

            let xs_prev = DVector::from_fn(3, |_, _| 2.0 * (rng.random::<f64>() - 0.5));
            let zeta = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
            let xi_prev = local_update(&xs_prev, obj, eta, steps).unwrap();
            let xs_now = &xs_prev + &xi_prev + &zeta;
            let xi_now = local_update(&xs_now, obj, eta, steps).unwrap();

            let predicted = &tr.a * &xi_prev + &tr.b * &zeta;
            let rel = (&xi_now - &predicted).norm() / (1.0 + xi_now.norm());
            assert!(rel <= 1e-10, "relative residual {rel}");
        }
    }

    fn random_symmetric(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let raw = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
        (&raw + raw.transpose()) * 0.5
    }

    /// Expectation of `A Sigma A'` by direct enumeration of the four round
    /// outcomes; the independent route for the closed-form map.
    fn covariance_map_enumerated(
        sigma: &DMatrix<f64>,
        p: f64,
        gamma: f64,
        m: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let outcomes = [
            (false, false, (1.0 - p) * (1.0 - gamma)),
            (false, true, (1.0 - p) * gamma),
            (true, false, p * (1.0 - gamma)),
            (true, true, p * gamma),
        ];
        let mut acc = DMatrix::zeros(sigma.nrows(), sigma.ncols());
        for (delta, mu, w) in outcomes {
            let a = joint_transition(delta, mu, m);
            acc += w * (&a * sigma * a.transpose());
        }
        acc
    }

    #[test]
    fn covariance_map_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let d = 1 + (rng.random::<u32>() % 3) as usize;
            let sigma = random_symmetric(2 * d, &mut rng);
            let m = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
            let p: f64 = rng.random();
            let gamma: f64 = rng.random();
            let closed = covariance_map(&sigma, p, gamma, &m).unwrap();
            let brute = covariance_map_enumerated(&sigma, p, gamma, &m);
            let err = (&closed - &brute).abs().max();
            assert!(err <= 1e-12, "elementwise error {err}");
        }
    }

    #[test]
    fn covariance_map_identity_at_p_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sigma = random_symmetric(4, &mut rng);
        let m = DMatrix::identity(2, 2) * 0.5;
        let out = covariance_map(&sigma, 0.0, 0.3, &m).unwrap();
        assert!(((&out - &sigma).norm()) < 1e-14);
    }

    #[test]
    fn covariance_map_of_zero_is_zero() {
        let m = DMatrix::identity(2, 2);
        let out = covariance_map(&DMatrix::zeros(4, 4), 0.4, 0.6, &m).unwrap();
        assert_eq!(out, DMatrix::zeros(4, 4));
    }

    #[test]
    fn covariance_map_rejects_asymmetric_input() {
        let mut sigma = DMatrix::zeros(2, 2);
        sigma[(0, 1)] = 1.0;
        let m = DMatrix::identity(1, 1);
        assert!(covariance_map(&sigma, 0.5, 0.5, &m).is_err());
    }

    #[test]
    fn selection_mean_examples() {
        let xi = scalars(&[1.0; 10]);
        assert_eq!(innovation_selection_mean(&xi, 0.3, 0)[0], 0.0);
        // Constant history: geometric series 1 - (1-p)^t.
        for t in 1..=10 {
            let ell = innovation_selection_mean(&xi, 0.3, t)[0];
            let expected = 1.0 - 0.7f64.powi(t as i32);
            assert!((ell - expected).abs() < 1e-12);
        }
        // p = 1: the previous round is selected surely.
        let xi = scalars(&[3.0, 5.0, 7.0]);
        assert_eq!(innovation_selection_mean(&xi, 1.0, 3)[0], 7.0);
    }

    #[test]
    fn variance_examples() {
        let xi = scalars(&[2.0; 8]);
        // Deterministic selection: zero variance for t >= 1.
        for t in 1..=8 {
            assert!(innovation_variance(&xi, 1.0, t).abs() < 1e-15);
        }
        // Two-point distribution for constant history.
        let p = 0.4f64;
        for t in 1..=8 {
            let ell = 2.0 * (1.0 - (1.0 - p).powi(t as i32));
            let expected =
                (1.0 - p).powi(t as i32) * ell * ell + (1.0 - (1.0 - p).powi(t as i32)) * (2.0 - ell).powi(2);
            let got = innovation_variance(&xi, p, t);
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_matches_sampled_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let xi = scalars(&[1.0, 0.9, 0.81, 0.5, 0.2, -0.3, 0.7, 0.05]);
        let p = 0.35;
        let t = 8;
        let ell = innovation_selection_mean(&xi, p, t)[0];
        let trials = 100_000;
        let mut samples = Vec::with_capacity(trials);
        for _ in 0..trials {
            // Draw the participation history directly.
            let mut tau: i64 = -1;
            for round in 0..t {
                if rng.random::<f64>() < p {
                    tau = round as i64;
                }
            }
            let value = if tau < 0 { 0.0 } else { xi[tau as usize][0] };
            samples.push((value - ell) * (value - ell));
        }
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let sd = (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (trials as f64 - 1.0))
            .sqrt();
        let se = sd / (trials as f64).sqrt();
        let formula = innovation_variance(&xi, p, t);
        assert!(
            (mean - formula).abs() <= 3.0 * se,
            "sampled {mean}, formula {formula}, se {se}"
        );
    }

    #[test]
    fn expected_gap_degenerate_cases() {
        let xi = scalars(&[1.0, 0.5, 0.25]);
        let m = DMatrix::identity(1, 1) * 0.5;
        for q in expected_estimation_gap(&xi, 0.6, 1.0, &m, 3) {
            assert_eq!(q[0], 0.0);
        }
        for q in expected_estimation_gap(&xi, 0.0, 0.3, &m, 3) {
            assert_eq!(q[0], 0.0);
        }
        // One-step value: E[q_1] = p (1-gamma) xi_0.
        let q = expected_estimation_gap(&xi, 0.6, 0.25, &m, 1);
        assert!((q[1][0] - 0.6 * 0.75 * 1.0).abs() < 1e-15);
    }

    #[test]
    fn residual_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let len = 2 + (rng.random::<u32>() % 10) as usize;
            let d = 1 + (rng.random::<u32>() % 3) as usize;
            let xi: Vec<ModelVector> = (0..len)
                .map(|_| DVector::from_fn(d, |_, _| 2.0 * rng.random::<f64>() - 1.0))
                .collect();
            let m = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
            let p = 0.05 + 0.9 * rng.random::<f64>();
            let t = (rng.random::<u32>() as usize) % (len - 1);
            let direct =
                innovation_residual(&xi[t], &m, &innovation_selection_mean(&xi, p, t));
            let expanded = innovation_residual_expanded(&xi, &m, p, t);
            assert!((&direct - &expanded).norm() <= 1e-12 * (1.0 + direct.norm()));
        }
    }

    #[test]
    fn fluctuation_trace_hand_value() {
        // p = 1, gamma = 0.5, s = 1, r = 0, constant history: only the
        // interception-jitter term survives: p^2 g (1-g) ||s||^2 = 0.25.
        let xi = scalars(&[0.7; 6]);
        let s = DVector::from_element(1, 1.0);
        let r = DVector::zeros(1);
        let m = DMatrix::identity(1, 1) * 0.5;
        let v = fluctuation_covariance(&s, &r, &xi, 1.0, 0.5, &m, 4);
        assert!((v.trace - 0.25).abs() < 1e-13);
    }

    #[test]
    fn fluctuation_zero_for_deterministic_selection() {
        let xi = scalars(&[0.3; 5]);
        let z = DVector::zeros(1);
        let m = DMatrix::identity(1, 1) * 0.5;
        let v = fluctuation_covariance(&z, &z, &xi, 1.0, 0.5, &m, 3);
        assert!(v.trace.abs() < 1e-15);
    }

    fn geometric_script(horizon: usize, ratio: f64) -> Vec<ModelVector> {
        (0..horizon)
            .map(|t| DVector::from_element(1, ratio.powi(t as i32)))
            .collect()
    }

    #[test]
    fn bound_zero_for_degenerate_problem() {
        let horizon = 10;
        let zeros = vec![DVector::zeros(1); horizon];
        let m = DMatrix::identity(1, 1) * 0.5;
        let series = protection_lower_bound(
            &zeros.clone(),
            &zeros.clone(),
            &zeros,
            0.5,
            0.5,
            &m,
            &DVector::zeros(1),
            &DVector::zeros(1),
            horizon,
            None,
        )
        .unwrap();
        for &b in &series.bound {
            assert_eq!(b, 0.0);
        }
        for &b in &series.bound_stationary {
            assert_eq!(b, 0.0);
        }
    }

    #[test]
    fn bound_mean_matches_powered_form() {
        // The forward mean recursion must equal the explicit resolvent form
        // with matrix powers.
        let horizon = 9;
        let xi = geometric_script(horizon, 0.9);
        let zeta = scalars(&[0.1; 9]);
        let zeros = vec![DVector::zeros(1); horizon];
        let p = 0.5;
        let gamma = 0.5;
        let m = DMatrix::identity(1, 1) * 0.5;
        let series = protection_lower_bound(
            &xi,
            &zeta,
            &zeros,
            p,
            gamma,
            &m,
            &DVector::from_element(1, 0.3),
            &DVector::zeros(1),
            horizon,
            None,
        )
        .unwrap();

        let m1 = p * (1.0 - gamma) * &m;
        let m2 = (1.0 - p) * DMatrix::identity(1, 1) + &m1;
        let base = DMatrix::identity(1, 1) - &m2;
        let inv = base.try_inverse().unwrap();
        for t in 0..=horizon {
            let mut expected = series.initial_gap.clone();
            for k in 0..t {
                expected += p * &series.r[k];
            }
            for k in 0..t {
                let pow = matrix_power(&m2, t - 1 - k);
                let coeff = p * (1.0 - gamma) * &inv * (p * DMatrix::identity(1, 1) - &m1 * pow);
                expected += coeff * &series.h[k];
            }
            let got = &series.mean_error[t];
            assert!(
                (got - &expected).norm() <= 1e-12 * (1.0 + expected.norm()),
                "t = {t}"
            );
        }
    }

    fn matrix_power(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        let mut out = DMatrix::identity(m.nrows(), m.ncols());
        for _ in 0..k {
            out = &out * m;
        }
        out
    }

    #[test]
    fn bound_stationary_and_finite_converge_together() {
        // On a long horizon with decaying innovations the two series approach
        // the same tail value.
        let horizon = 400;
        let xi = geometric_script(horizon, 0.9);
        let zeta = vec![DVector::from_element(1, 0.1); horizon];
        let zeros = vec![DVector::zeros(1); horizon];
        let m = DMatrix::identity(1, 1) * 0.5;
        let series = protection_lower_bound(
            &xi,
            &zeta,
            &zeros,
            0.5,
            0.5,
            &m,
            &DVector::zeros(1),
            &DVector::zeros(1),
            horizon,
            None,
        )
        .unwrap();
        let finite = series.bound[horizon];
        let stationary = series.bound_stationary[horizon - 1];
        assert!(
            (finite - stationary).abs() <= 1e-6 * (1.0 + finite.abs()),
            "finite {finite} stationary {stationary}"
        );
    }

    #[test]
    fn bound_handles_never_intercepting_adversary() {
        // gamma = 0 removes the interception-jitter terms; the series must
        // still be finite and nonnegative.
        let horizon = 8;
        let xi = geometric_script(horizon, 0.9);
        let zeta = scalars(&[0.1; 8]);
        let zeros = vec![DVector::zeros(1); horizon];
        let m = DMatrix::identity(1, 1) * 0.5;
        let series = protection_lower_bound(
            &xi,
            &zeta,
            &zeros,
            0.5,
            0.0,
            &m,
            &DVector::from_element(1, 1.0),
            &DVector::zeros(1),
            horizon,
            None,
        )
        .unwrap();
        for t in 0..=horizon {
            assert!(series.bound[t].is_finite());
            assert!(series.bound[t] >= 0.0);
        }
        for t in 0..horizon {
            assert!(series.bound_stationary[t].is_finite());
            assert!(series.bound_stationary[t] >= 0.0);
        }
    }

    #[test]
    fn bound_rejects_singular_resolvent() {
        // (1-gamma) M has eigenvalue exactly 1.
        let horizon = 3;
        let zeros = vec![DVector::zeros(1); horizon];
        let m = DMatrix::identity(1, 1) * 2.0;
        let err = protection_lower_bound(
            &zeros.clone(),
            &zeros.clone(),
            &zeros,
            0.5,
            0.5,
            &m,
            &DVector::zeros(1),
            &DVector::zeros(1),
            horizon,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("stability"));
    }

    #[test]
    fn bound_delegates_at_gamma_one() {
        let horizon = 12;
        let xi = geometric_script(horizon, 0.8);
        let zeta = vec![DVector::from_element(1, 0.2); horizon];
        let zeros = vec![DVector::zeros(1); horizon];
        let x_c0 = DVector::from_element(1, 1.0);
        let x_a0 = DVector::zeros(1);
        let m = DMatrix::identity(1, 1) * 0.5;
        let series = protection_lower_bound(
            &xi, &zeta, &zeros, 0.5, 1.0, &m, &x_c0, &x_a0, horizon, None,
        )
        .unwrap();
        let eq = perfect_eavesdrop_protection(&zeta, 0.5, &x_c0, &x_a0, horizon, None).unwrap();
        for t in 0..=horizon {
            assert!((series.bound[t] - eq.values[t]).abs() < 1e-14);
        }
    }

    #[test]
    fn perfect_eavesdrop_examples() {
        let x_c0 = DVector::from_element(1, 2.0);
        let x_a0 = DVector::from_element(1, -1.0);
        // No mismatch error: constant at the initial squared gap.
        let zeros = vec![DVector::zeros(1); 20];
        let series =
            perfect_eavesdrop_protection(&zeros, 0.7, &x_c0, &x_a0, 20, None).unwrap();
        for &v in &series.values {
            assert!((v - 9.0).abs() < 1e-12);
        }
        // p = 1: the jitter term vanishes.
        let r = scalars(&[0.5, -0.25, 0.125]);
        let series = perfect_eavesdrop_protection(&r, 1.0, &x_c0, &x_a0, 3, None).unwrap();
        let mean = 3.0 + 0.5 - 0.25 + 0.125;
        assert!((series.values[3] - mean * mean).abs() < 1e-12);
    }

    #[test]
    fn perfect_eavesdrop_four_pulse_limit() {
        // r = 1 for four rounds then 0, equal initializations, p = 1/2:
        // limit = 0.25 * 4 + (0.5 * 4)^2 = 5.
        let mut r = vec![DVector::from_element(1, 1.0); 4];
        r.extend(vec![DVector::zeros(1); 60]);
        let zero = DVector::zeros(1);
        let series = perfect_eavesdrop_protection(&r, 0.5, &zero, &zero, 64, None).unwrap();
        assert!((series.values[64] - 5.0).abs() < 1e-12);
        assert!((series.tail_min - 5.0).abs() < 1e-12);
    }

    #[test]
    fn optimal_p_flat_when_no_mismatch_error() {
        let zeros = vec![DVector::zeros(1); 10];
        let gap = DVector::from_element(1, 1.5);
        let out =
            optimal_sampling_probability(&zeros, &gap, &DVector::zeros(1), 10).unwrap();
        assert!(out.flat);
        assert!((out.value - 2.25).abs() < 1e-12);
    }

    #[test]
    fn optimal_p_single_pulse() {
        // Equal inits, single r_0 = 1, horizon 1: value(p) = p(1-p) + p^2 = p,
        // maximized at p = 1.
        let r = scalars(&[1.0]);
        let zero = DVector::zeros(1);
        let out = optimal_sampling_probability(&r, &zero, &zero, 1).unwrap();
        assert_eq!(out.p_star, 1.0);
        assert!((out.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn optimal_p_beats_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let horizon = 12;
            let r: Vec<ModelVector> = (0..horizon)
                .map(|k| {
                    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                    DVector::from_element(1, sign * (0.5 + rng.random::<f64>()))
                })
                .collect();
            let x_c0 = DVector::from_element(1, rng.random::<f64>() - 0.5);
            let x_a0 = DVector::from_element(1, rng.random::<f64>() - 0.5);
            let out = optimal_sampling_probability(&r, &x_c0, &x_a0, horizon).unwrap();
            for i in 0..=10_000 {
                let p = i as f64 / 10_000.0;
                let v = perfect_eavesdrop_protection(&r, p, &x_c0, &x_a0, horizon, None)
                    .unwrap()
                    .values[horizon];
                assert!(
                    out.value >= v - 1e-9,
                    "grid p {p} beats closed form: {v} > {}",
                    out.value
                );
            }
        }
    }

    proptest! {
        // Linearity of the covariance map.
        #[test]
        fn covariance_map_is_linear(seed in 0u64..200, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s1 = random_symmetric(4, &mut rng);
            let s2 = random_symmetric(4, &mut rng);
            let m = DMatrix::from_fn(2, 2, |_, _| rng.random::<f64>() - 0.5);
            let p = rng.random::<f64>();
            let gamma = rng.random::<f64>();
            let combined = covariance_map(&(a * &s1 + b * &s2), p, gamma, &m).unwrap();
            let separate = a * covariance_map(&s1, p, gamma, &m).unwrap()
                + b * covariance_map(&s2, p, gamma, &m).unwrap();
            prop_assert!((combined - separate).abs().max() <= 1e-12);
        }

        // Symmetry and positive semi-definiteness are preserved.
        #[test]
        fn covariance_map_preserves_psd(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let half = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>() - 0.5);
            let psd = &half * half.transpose();
            let m = DMatrix::from_fn(2, 2, |_, _| rng.random::<f64>() - 0.5);
            let out = covariance_map(&psd, rng.random(), rng.random(), &m).unwrap();
            prop_assert!((&out - out.transpose()).abs().max() <= 1e-12);
            let min_eig = out.symmetric_eigen().eigenvalues.iter().copied()
                .fold(f64::INFINITY, f64::min);
            prop_assert!(min_eig >= -1e-10);
        }
    }
}
