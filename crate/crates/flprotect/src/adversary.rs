//! Eavesdropper state estimation.
//!
//! The adversary watches one client's uplink. On each participation round it
//! either intercepts the payload (probability `gamma`) or propagates its last
//! innovation estimate through a surrogate transition matrix `M`. The spectral
//! size of `M` admissible for a stable error covariance is bounded by
//! [`stability_threshold`].

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fl::ModelVector;

/// Round index used before the client has ever participated.
pub const NEVER_SELECTED: i64 = -1;

/// Advances the most-recent-selection clock: after round `t-1` with
/// participation indicator `delta_prev`, returns the latest participation
/// round strictly before `t` (or [`NEVER_SELECTED`]).
pub fn update_tau(tau: i64, delta_prev: bool, t: usize) -> i64 {
    if delta_prev {
        t as i64 - 1
    } else {
        tau
    }
}

/// The eavesdropper's evolving estimate of the monitored client.
#[derive(Debug, Clone)]
pub struct Adversary {
    /// Surrogate innovation transition applied between interceptions.
    m: DMatrix<f64>,
    /// Current model estimate.
    estimate: ModelVector,
    /// Innovation estimate formed at the last participation round.
    xi_estimate: ModelVector,
    /// Last participation round observed, or [`NEVER_SELECTED`].
    tau: i64,
}

impl Adversary {
    pub fn new(initial_estimate: ModelVector, m: DMatrix<f64>) -> Result<Self> {
        let d = initial_estimate.len();
        if m.nrows() != d || m.ncols() != d {
            return Err(Error::Config(format!(
                "surrogate matrix is {}x{} but model dimension is {d}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self {
            m,
            estimate: initial_estimate,
            xi_estimate: ModelVector::zeros(d),
            tau: NEVER_SELECTED,
        })
    }

    pub fn estimate(&self) -> &ModelVector {
        &self.estimate
    }

    pub fn xi_estimate(&self) -> &ModelVector {
        &self.xi_estimate
    }

    pub fn tau(&self) -> i64 {
        self.tau
    }

    pub fn surrogate(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Innovation estimate for a participation round: the intercepted value
    /// when `mu` is set, otherwise the stored estimate pushed through `M`.
    /// Before any participation the stored estimate is zero, so a failed
    /// first interception yields zero.
    pub fn next_xi_estimate(
        &self,
        mu: bool,
        observed_xi: Option<&ModelVector>,
    ) -> Result<ModelVector> {
        if mu {
            let xi = observed_xi.ok_or_else(|| {
                Error::Contract("interception succeeded but no payload was supplied".into())
            })?;
            Ok(xi.clone())
        } else {
            debug_assert!(self.tau != NEVER_SELECTED || self.xi_estimate.iter().all(|x| *x == 0.0));
            Ok(&self.m * &self.xi_estimate)
        }
    }

    /// One round of increment-uplink estimation. `observed_xi` must be
    /// present exactly when `delta && mu`. Round index `t` drives the
    /// selection clock.
    pub fn step_flip(
        &mut self,
        t: usize,
        delta: bool,
        mu: bool,
        observed_xi: Option<&ModelVector>,
        zeta_hat: &ModelVector,
    ) -> Result<()> {
        if !delta {
            if observed_xi.is_some() {
                return Err(Error::Contract(
                    "payload supplied on a non-participation round".into(),
                ));
            }
            return Ok(());
        }
        let xi_hat = self.next_xi_estimate(mu, observed_xi)?;
        self.estimate += &xi_hat + zeta_hat;
        self.xi_estimate = xi_hat;
        self.tau = update_tau(self.tau, true, t + 1);
        Ok(())
    }

    /// One round of full-model-uplink estimation. On an intercepted round the
    /// estimate is replaced by the uploaded model outright and the carried
    /// innovation estimate resets to zero (the new estimate has no residual
    /// displacement to propagate); otherwise the estimate advances by the
    /// propagated innovation.
    pub fn step_flop(
        &mut self,
        t: usize,
        delta: bool,
        mu: bool,
        observed_model: Option<&ModelVector>,
        zeta_hat: &ModelVector,
    ) -> Result<()> {
        if !delta {
            if observed_model.is_some() {
                return Err(Error::Contract(
                    "payload supplied on a non-participation round".into(),
                ));
            }
            return Ok(());
        }
        if mu {
            let model = observed_model.ok_or_else(|| {
                Error::Contract("interception succeeded but no payload was supplied".into())
            })?;
            self.estimate = model + zeta_hat;
            self.xi_estimate = ModelVector::zeros(self.estimate.len());
        } else {
            let xi_hat = &self.m * &self.xi_estimate;
            self.estimate += &xi_hat + zeta_hat;
            self.xi_estimate = xi_hat;
        }
        self.tau = update_tau(self.tau, true, t + 1);
        Ok(())
    }
}

/// Outcome of checking a surrogate matrix against the covariance stability
/// condition. The condition is necessary, not sufficient: a violated check
/// guarantees divergence potential, a satisfied one does not certify
/// stability.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StabilityReport {
    /// Largest admissible eigenvalue magnitude, infinite when the error
    /// recursion forgets `M` entirely (`p = 0` or `gamma = 1`).
    pub threshold: f64,
    pub spectral_radius_m: f64,
    pub satisfied: bool,
    /// Unset when power iteration failed to settle within its budget.
    pub converged: bool,
}

/// Largest eigenvalue magnitude of `M` compatible with a stable error
/// covariance: `(p (1-gamma) max(gamma, 1-gamma))^(-1/2)`.
pub fn stability_threshold(p: f64, gamma: f64) -> f64 {
    let base = p * (1.0 - gamma) * gamma.max(1.0 - gamma);
    if base <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / base.sqrt()
    }
}

/// Spectral-radius estimate from power iteration.
#[derive(Debug, Clone, Copy)]
pub struct SpectralRadius {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

const POWER_TOLERANCE: f64 = 1e-10;
const POWER_MAX_ITERATIONS: usize = 10_000;

/// Estimates the spectral radius of a square matrix by power iteration,
/// tracking the growth ratio of iterate norms. Matrices with a rotational
/// dominant pair keep a constant growth ratio and still settle; defective
/// dominant structure may not, which the `converged` flag reports.
pub fn spectral_radius(m: &DMatrix<f64>) -> SpectralRadius {
    let d = m.nrows();
    assert_eq!(d, m.ncols(), "spectral radius requires a square matrix");
    if d == 0 {
        return SpectralRadius {
            value: 0.0,
            converged: true,
            iterations: 0,
        };
    }
    // Deterministic start with incommensurate components so no eigenspace is
    // missed by symmetry.
    let mut x = ModelVector::from_fn(d, |i, _| 1.0 + (i as f64 + 1.0).sqrt());
    x /= x.norm();
    let mut estimate = 0.0f64;
    for it in 0..POWER_MAX_ITERATIONS {
        let y = m * &x;
        let growth = y.norm();
        if growth == 0.0 {
            return SpectralRadius {
                value: 0.0,
                converged: true,
                iterations: it,
            };
        }
        if (growth - estimate).abs() <= POWER_TOLERANCE * (1.0 + growth) {
            return SpectralRadius {
                value: growth,
                converged: true,
                iterations: it,
            };
        }
        estimate = growth;
        x = y / growth;
    }
    SpectralRadius {
        value: estimate,
        converged: false,
        iterations: POWER_MAX_ITERATIONS,
    }
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

/// Checks a surrogate matrix against [`stability_threshold`]. Diagonal
/// matrices are resolved exactly; everything else goes through power
/// iteration.
pub fn check_stability(m: &DMatrix<f64>, p: f64, gamma: f64) -> StabilityReport {
    let threshold = stability_threshold(p, gamma);
    let (radius, converged) = if is_diagonal(m) {
        let r = m.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        (r, true)
    } else {
        let est = spectral_radius(m);
        (est.value, est.converged)
    };
    StabilityReport {
        threshold,
        spectral_radius_m: radius,
        satisfied: radius < threshold,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn vec2(a: f64, b: f64) -> ModelVector {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn tau_tracks_latest_selection() {
        assert_eq!(update_tau(3, true, 8), 7);
        assert_eq!(update_tau(NEVER_SELECTED, false, 5), NEVER_SELECTED);
        assert_eq!(update_tau(NEVER_SELECTED, true, 1), 0);
    }

    #[test]
    fn interception_passes_through() {
        let adv = Adversary::new(vec2(0.0, 0.0), DMatrix::identity(2, 2) * 0.5).unwrap();
        let xi = vec2(3.0, -7.0);
        let out = adv.next_xi_estimate(true, Some(&xi)).unwrap();
        assert_eq!(out, xi);
    }

    #[test]
    fn first_failed_interception_yields_zero() {
        let adv = Adversary::new(vec2(0.0, 0.0), DMatrix::identity(2, 2) * 0.5).unwrap();
        let out = adv.next_xi_estimate(false, None).unwrap();
        assert_eq!(out, vec2(0.0, 0.0));
    }

    #[test]
    fn failed_interception_propagates_through_m() {
        let mut adv = Adversary::new(vec2(0.0, 0.0), DMatrix::identity(2, 2) * 0.5).unwrap();
        // Seed the stored estimate via an intercepted round.
        adv.step_flip(0, true, true, Some(&vec2(2.0, -4.0)), &vec2(0.0, 0.0))
            .unwrap();
        let out = adv.next_xi_estimate(false, None).unwrap();
        assert_eq!(out, vec2(1.0, -2.0));
    }

    #[test]
    fn missing_payload_is_contract_violation() {
        let adv = Adversary::new(vec2(0.0, 0.0), DMatrix::identity(2, 2)).unwrap();
        assert!(adv.next_xi_estimate(true, None).is_err());
    }

    #[test]
    fn flip_skips_non_participation_rounds() {
        let mut adv = Adversary::new(vec2(1.0, 2.0), DMatrix::identity(2, 2) * 0.5).unwrap();
        adv.step_flip(0, false, true, None, &vec2(9.0, 9.0)).unwrap();
        assert_eq!(adv.estimate(), &vec2(1.0, 2.0));
        assert_eq!(adv.tau(), NEVER_SELECTED);
    }

    #[test]
    fn flip_intercepted_round_adds_innovation() {
        let mut adv = Adversary::new(vec2(1.0, 1.0), DMatrix::identity(2, 2) * 0.5).unwrap();
        adv.step_flip(3, true, true, Some(&vec2(0.5, -0.5)), &vec2(0.0, 0.0))
            .unwrap();
        assert_eq!(adv.estimate(), &vec2(1.5, 0.5));
        assert_eq!(adv.tau(), 3);
    }

    #[test]
    fn flip_failed_round_composes_surrogate() {
        let mut adv = Adversary::new(vec2(0.0, 0.0), DMatrix::identity(2, 2) * 0.5).unwrap();
        adv.step_flip(0, true, true, Some(&vec2(2.0, -4.0)), &vec2(0.0, 0.0))
            .unwrap();
        adv.estimate = vec2(0.0, 0.0);
        adv.step_flip(1, true, false, None, &vec2(0.0, 0.0)).unwrap();
        assert_eq!(adv.estimate(), &vec2(1.0, -2.0));
    }

    #[test]
    fn flop_interception_copies_model() {
        let mut adv = Adversary::new(vec2(5.0, 5.0), DMatrix::identity(2, 2) * 0.5).unwrap();
        let model = vec2(-1.0, 2.0);
        adv.step_flop(0, true, true, Some(&model), &vec2(0.0, 0.0))
            .unwrap();
        assert_eq!(adv.estimate(), &model);
        assert_eq!(adv.xi_estimate(), &vec2(0.0, 0.0));
    }

    #[test]
    fn flop_failed_round_applies_surrogate() {
        let mut adv = Adversary::new(vec2(0.0, 0.0), DMatrix::identity(2, 2) * 0.5).unwrap();
        adv.xi_estimate = vec2(2.0, -4.0);
        adv.tau = 0;
        adv.step_flop(1, true, false, None, &vec2(0.0, 0.0)).unwrap();
        assert_eq!(adv.estimate(), &vec2(1.0, -2.0));
    }

    #[test]
    fn flop_skips_non_participation_rounds() {
        let mut adv = Adversary::new(vec2(1.0, 2.0), DMatrix::identity(2, 2)).unwrap();
        adv.step_flop(0, false, false, None, &vec2(0.0, 0.0)).unwrap();
        assert_eq!(adv.estimate(), &vec2(1.0, 2.0));
    }

    #[test]
    fn threshold_matches_hand_values() {
        assert!((stability_threshold(0.5, 0.5) - 2.0 * 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(stability_threshold(1.0, 0.0), 1.0);
        assert_eq!(stability_threshold(0.0, 0.3), f64::INFINITY);
        assert_eq!(stability_threshold(0.7, 1.0), f64::INFINITY);
    }

    #[test]
    fn threshold_nonincreasing_in_p() {
        let gamma = 0.4;
        let mut prev = f64::INFINITY;
        for i in 0..=20 {
            let p = i as f64 / 20.0;
            let t = stability_threshold(p, gamma);
            assert!(t <= prev + 1e-12);
            prev = t;
        }
    }

    #[test]
    fn check_stability_examples() {
        let report = check_stability(&(DMatrix::identity(2, 2) * 0.5), 0.5, 0.5);
        assert!(report.satisfied);
        assert!((report.spectral_radius_m - 0.5).abs() < 1e-12);

        let report = check_stability(&DMatrix::zeros(2, 2), 0.9, 0.2);
        assert!(report.satisfied);
        assert_eq!(report.spectral_radius_m, 0.0);

        let report = check_stability(&(DMatrix::identity(2, 2) * 3.0), 0.5, 0.5);
        assert!(!report.satisfied);
    }

    #[test]
    fn power_iteration_matches_symmetric_eigensolver() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let raw = DMatrix::from_fn(4, 4, |_, _| rand::Rng::random::<f64>(&mut rng) - 0.5);
            let sym = (&raw + raw.transpose()) * 0.5;
            let expected = sym
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .fold(0.0f64, |a, &b| a.max(b.abs()));
            let est = spectral_radius(&sym);
            assert!(est.converged);
            assert!(
                (est.value - expected).abs() < 1e-8 * (1.0 + expected),
                "power {} vs eig {expected}",
                est.value
            );
        }
    }

    #[test]
    fn rotation_block_converges_to_modulus() {
        // Normal matrix with complex pair 1.5 +- i; growth ratio is constant.
        let m = DMatrix::from_row_slice(2, 2, &[1.5, 1.0, -1.0, 1.5]);
        let est = spectral_radius(&m);
        assert!(est.converged);
        assert!((est.value - (1.5f64 * 1.5 + 1.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn defective_matrix_reports_non_convergence() {
        // Jordan block: norm growth approaches 1 only algebraically.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let est = spectral_radius(&m);
        assert!(!est.converged);
        assert!((est.value - 1.0).abs() < 1e-2);
    }

    proptest! {
        // Scaling M scales the reported spectral radius.
        #[test]
        fn stability_check_is_scale_consistent(c in 0.1f64..5.0) {
            let m = DMatrix::from_row_slice(2, 2, &[0.6, 0.2, 0.1, 0.4]);
            let base = check_stability(&m, 0.5, 0.5);
            let scaled = check_stability(&(&m * c), 0.5, 0.5);
            prop_assert!(base.converged && scaled.converged);
            prop_assert!((scaled.spectral_radius_m - c * base.spectral_radius_m).abs()
                < 1e-7 * (1.0 + scaled.spectral_radius_m));
        }

        // tau never decreases along any indicator sequence.
        #[test]
        fn tau_is_monotone(deltas in proptest::collection::vec(any::<bool>(), 1..40)) {
            let mut tau = NEVER_SELECTED;
            for (idx, &d) in deltas.iter().enumerate() {
                let t = idx + 1;
                let next = update_tau(tau, d, t);
                prop_assert!(next >= tau);
                if d {
                    prop_assert_eq!(next, t as i64 - 1);
                }
                tau = next;
            }
        }
    }
}
