//! Oracle cross-checks wiring the closed forms to independent routes:
//! outcome enumeration for operators and bounds, direct GD for the innovation
//! transition, and Monte Carlo for the perfect-eavesdropping equality. The
//! CLI exposes these as a batch report; the acceptance suite drives the same
//! checks at pinned tolerances.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{
    covariance_map, expected_estimation_gap, fluctuation_covariance, innovation_residual,
    innovation_selection_mean, innovation_transition, joint_transition,
    perfect_eavesdrop_protection, protection_lower_bound,
};
use crate::error::{Error, Result};
use crate::experiments::{
    advance_scripted, brute_force_protection, monte_carlo_protection, run_trial, Dynamics,
    EnumState, Scenario, ScriptSet,
};
use crate::fl::{local_update, ModelVector, ProtocolKind, QuadraticObjective};

/// Result of one oracle check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

/// Batch report over all oracle checks.
#[derive(Debug, Clone, serde::Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
    pub all_passed: bool,
}

fn outcome(name: &str, started: Instant, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        millis: started.elapsed().as_millis(),
    }
}

/// Closed-form covariance map against direct enumeration of the four round
/// outcomes, over random symmetric inputs in dimensions 1..=3.
pub fn check_covariance_map_oracle(samples: usize, tolerance: f64, seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let d = 1 + (rng.random::<u32>() % 3) as usize;
        let raw = DMatrix::from_fn(2 * d, 2 * d, |_, _| rng.random::<f64>() - 0.5);
        let sigma = (&raw + raw.transpose()) * 0.5;
        let m = DMatrix::from_fn(d, d, |_, _| 2.0 * rng.random::<f64>() - 1.0);
        let p: f64 = rng.random();
        let gamma: f64 = rng.random();

        let closed = covariance_map(&sigma, p, gamma, &m).expect("symmetric by construction");
        let outcomes = [
            (false, false, (1.0 - p) * (1.0 - gamma)),
            (false, true, (1.0 - p) * gamma),
            (true, false, p * (1.0 - gamma)),
            (true, true, p * gamma),
        ];
        let mut brute = DMatrix::zeros(2 * d, 2 * d);
        for (delta, mu, w) in outcomes {
            let a = joint_transition(delta, mu, &m);
            brute += w * (&a * &sigma * a.transpose());
        }
        worst = worst.max((&closed - &brute).abs().max());
    }
    outcome(
        "covariance-map vs outcome enumeration",
        started,
        worst <= tolerance,
        format!("max elementwise error {worst:.3e} (tolerance {tolerance:.1e})"),
    )
}

/// Innovation transition exactness on random quadratic instances: the
/// linearized one-round map must reproduce direct gradient descent.
pub fn check_innovation_transition_exactness(
    instances: usize,
    dimension: usize,
    tolerance: f64,
    seed: u64,
) -> CheckOutcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = crate::fl::ObjectiveSpec::default();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let obj: QuadraticObjective =
            crate::fl::generate_objectives(dimension, 1, &spec, &mut rng)
                .expect("valid spec")
                .remove(0);
        let eta = (0.1 + 0.3 * rng.random::<f64>()) / obj.curvature();
        let steps = 1 + (rng.random::<u32>() % 5) as usize;
        let tr = innovation_transition(&obj, eta, steps).expect("step size admissible");

        let xs_prev = DVector::from_fn(dimension, |_, _| 4.0 * (rng.random::<f64>() - 0.5));
        let zeta = DVector::from_fn(dimension, |_, _| 2.0 * (rng.random::<f64>() - 0.5));
        let xi_prev = local_update(&xs_prev, &obj, eta, steps).expect("admissible");
        let xs_now = &xs_prev + &xi_prev + &zeta;
        let xi_now = local_update(&xs_now, &obj, eta, steps).expect("admissible");
        let predicted = &tr.a * &xi_prev + &tr.b * &zeta;
        worst = worst.max((&xi_now - &predicted).norm() / (1.0 + xi_now.norm()));
    }
    outcome(
        "innovation transition vs direct gradient descent",
        started,
        worst <= tolerance,
        format!("max relative residual {worst:.3e} (tolerance {tolerance:.1e})"),
    )
}

/// The scripted scenario pinned throughout the bound checks: geometric
/// innovations, constant mismatch error.
pub fn geometric_scenario(
    horizon: usize,
    p: f64,
    gamma: f64,
    m_scalar: f64,
    xi_scale: f64,
    xi_ratio: f64,
    r_value: f64,
    initial_gap: f64,
) -> Scenario {
    let xi = (0..horizon)
        .map(|t| DVector::from_element(1, xi_scale * xi_ratio.powi(t as i32)))
        .collect();
    let zeta = vec![DVector::from_element(1, r_value); horizon];
    let zeta_hat = vec![DVector::zeros(1); horizon];
    Scenario {
        protocol: ProtocolKind::Flip,
        p,
        gamma,
        m: DMatrix::from_element(1, 1, m_scalar),
        horizon,
        x_c0: DVector::from_element(1, initial_gap),
        x_a0: DVector::zeros(1),
        force_mu_one: false,
        dynamics: Dynamics::Scripted(ScriptSet { xi, zeta, zeta_hat }),
    }
}

fn randomized_bound_scenario(horizon: usize, rng: &mut ChaCha8Rng) -> Scenario {
    let scale = 0.5 + rng.random::<f64>();
    let ratio = 0.7 + 0.25 * rng.random::<f64>();
    let r_value = 0.3 * rng.random::<f64>();
    let p = 0.3 + 0.5 * rng.random::<f64>();
    let gamma = 0.2 + 0.6 * rng.random::<f64>();
    let m_scalar = 0.1 + 0.6 * rng.random::<f64>();
    let gap = rng.random::<f64>() - 0.5;
    geometric_scenario(horizon, p, gamma, m_scalar, scale, ratio, r_value, gap)
}

fn bound_violation(scenario: &Scenario) -> Result<f64> {
    let script = match &scenario.dynamics {
        Dynamics::Scripted(s) => s,
        Dynamics::FullFl(_) => return Err(Error::Config("scripted scenario required".into())),
    };
    let series = protection_lower_bound(
        &script.xi,
        &script.zeta,
        &script.zeta_hat,
        scenario.p,
        scenario.gamma,
        &scenario.m,
        &scenario.x_c0,
        &scenario.x_a0,
        scenario.horizon,
        None,
    )?;
    let exact = brute_force_protection(scenario)?;
    let mut worst: f64 = f64::NEG_INFINITY;
    for t in 0..=scenario.horizon {
        worst = worst.max(series.bound[t] - exact[t]);
    }
    Ok(worst)
}

/// Lower bound against exhaustive enumeration: the pinned geometric scenario
/// plus `randomized` random ones, every round up to the horizon.
pub fn check_bound_vs_enumeration(
    horizon: usize,
    randomized: usize,
    slack: f64,
    seed: u64,
) -> CheckOutcome {
    let started = Instant::now();
    let pinned = geometric_scenario(horizon, 0.5, 0.5, 0.5, 1.0, 0.9, 0.1, 0.0);
    let mut worst = match bound_violation(&pinned) {
        Ok(v) => v,
        Err(e) => {
            return outcome(
                "protection bound vs enumeration",
                started,
                false,
                format!("pipeline failed: {e}"),
            )
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..randomized {
        let scenario = randomized_bound_scenario(horizon, &mut rng);
        match bound_violation(&scenario) {
            Ok(v) => worst = worst.max(v),
            Err(e) => {
                return outcome(
                    "protection bound vs enumeration",
                    started,
                    false,
                    format!("pipeline failed: {e}"),
                )
            }
        }
    }
    outcome(
        "protection bound vs enumeration",
        started,
        worst <= slack,
        format!("max bound excess {worst:.3e} (allowed {slack:.1e})"),
    )
}

fn pulse_r_script(horizon: usize, rng: &mut ChaCha8Rng) -> Vec<ModelVector> {
    (0..horizon)
        .map(|t| {
            let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
            let decay = 0.95f64.powi(t as i32);
            DVector::from_element(1, sign * decay * (0.2 + 0.8 * rng.random::<f64>()))
        })
        .collect()
}

/// Perfect-eavesdropping closed form against (a) exhaustive enumeration at a
/// short horizon and (b) Monte Carlo at a long horizon, for each `p`.
pub fn check_perfect_eavesdrop(
    ps: &[f64],
    enum_horizon: usize,
    enum_tolerance: f64,
    mc_horizon: usize,
    mc_trials: usize,
    seed: u64,
    threads: Option<usize>,
) -> CheckOutcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_enum = 0.0f64;
    let mut worst_sigma = 0.0f64;
    for &p in ps {
        // Short horizon: both routes are exact.
        let r = pulse_r_script(enum_horizon, &mut rng);
        let x_c0 = DVector::from_element(1, 1.0);
        let x_a0 = DVector::from_element(1, 0.25);
        let scenario = Scenario {
            protocol: ProtocolKind::Flip,
            p,
            gamma: 1.0,
            m: DMatrix::from_element(1, 1, 0.5),
            horizon: enum_horizon,
            x_c0: x_c0.clone(),
            x_a0: x_a0.clone(),
            force_mu_one: true,
            dynamics: Dynamics::Scripted(ScriptSet {
                xi: vec![DVector::from_element(1, 0.3); enum_horizon],
                zeta: r.clone(),
                zeta_hat: vec![DVector::zeros(1); enum_horizon],
            }),
        };
        let exact = brute_force_protection(&scenario).expect("within budget");
        let closed =
            perfect_eavesdrop_protection(&r, p, &x_c0, &x_a0, enum_horizon, None).expect("valid");
        for t in 0..=enum_horizon {
            worst_enum = worst_enum.max((exact[t] - closed.values[t]).abs());
        }

        // Long horizon: Monte Carlo within three standard errors per round.
        let r = pulse_r_script(mc_horizon, &mut rng);
        let scenario = Scenario {
            horizon: mc_horizon,
            dynamics: Dynamics::Scripted(ScriptSet {
                xi: vec![DVector::from_element(1, 0.3); mc_horizon],
                zeta: r.clone(),
                zeta_hat: vec![DVector::zeros(1); mc_horizon],
            }),
            ..scenario
        };
        let closed =
            perfect_eavesdrop_protection(&r, p, &x_c0, &x_a0, mc_horizon, None).expect("valid");
        let mc = monte_carlo_protection(&scenario, mc_trials, seed ^ 0x5eed, threads)
            .expect("valid scenario");
        for t in 0..=mc_horizon {
            let dev = (mc.mean[t] - closed.values[t]).abs();
            // Degenerate rounds have zero sample spread; allow float dust.
            let se = mc.stderr[t].max(1e-12 * (1.0 + closed.values[t].abs()));
            worst_sigma = worst_sigma.max(dev / se);
        }
    }
    let passed = worst_enum <= enum_tolerance && worst_sigma <= 3.0;
    outcome(
        "perfect-eavesdropping equality",
        started,
        passed,
        format!(
            "enumeration deviation {worst_enum:.3e} (tolerance {enum_tolerance:.1e}); \
             Monte Carlo max deviation {worst_sigma:.2} standard errors (allowed 3)"
        ),
    )
}

/// Full-model uplinks are unprotected: almost every trial ends with an
/// exactly-zero error, and the error is exactly zero right after every
/// intercepted participation round.
pub fn check_flop_zero_protection(
    p: f64,
    gamma: f64,
    trials: usize,
    horizon: usize,
    min_fraction: f64,
    seed: u64,
) -> CheckOutcome {
    let started = Instant::now();
    let d = 1;
    let scenario = Scenario {
        protocol: ProtocolKind::Flop,
        p,
        gamma,
        m: DMatrix::from_element(1, 1, 0.5),
        horizon,
        x_c0: DVector::from_element(d, 1.0),
        x_a0: DVector::zeros(d),
        force_mu_one: false,
        dynamics: Dynamics::Scripted(ScriptSet::zeros(d, horizon)),
    };
    let mut zero_finals = 0usize;
    let mut sync_violations = 0usize;
    let mut post_sync_violations = 0usize;
    for trial in 0..trials {
        let result = run_trial(&scenario, crate::experiments::derive_seed(seed, trial as u64))
            .expect("valid scenario");
        if result.errors_sq[horizon] == 0.0 {
            zero_finals += 1;
        }
        let mut synced = false;
        for round in &result.rounds {
            if round.delta && round.mu {
                synced = true;
                if result.errors_sq[round.t + 1] != 0.0 {
                    sync_violations += 1;
                }
            } else if synced && result.errors_sq[round.t + 1] != 0.0 {
                post_sync_violations += 1;
            }
        }
    }
    let fraction = zero_finals as f64 / trials as f64;
    let passed = fraction >= min_fraction && sync_violations == 0 && post_sync_violations == 0;
    outcome(
        "full-model uplink zero protection",
        started,
        passed,
        format!(
            "zero-final fraction {fraction:.4} (required {min_fraction}); \
             {sync_violations} post-interception violations, \
             {post_sync_violations} post-sync violations"
        ),
    )
}

/// Enumerated mean of the joint state `[error; estimation gap]` at time `t`.
fn enumerate_sigma_mean(scenario: &Scenario, script: &ScriptSet, t: usize) -> Result<ModelVector> {
    let d = scenario.dimension();
    let mut acc = ModelVector::zeros(2 * d);
    walk_nodes(scenario, script, t, &mut |weight, state| {
        acc += weight * joint_state(scenario, script, state);
    })?;
    Ok(acc)
}

fn joint_state(scenario: &Scenario, script: &ScriptSet, state: &EnumState) -> ModelVector {
    let d = scenario.dimension();
    let e = &state.client - state.adversary.estimate();
    let tau = state.adversary.tau();
    let xi_at_tau = if tau < 0 {
        ModelVector::zeros(d)
    } else {
        script.xi[tau as usize].clone()
    };
    let q = xi_at_tau - state.adversary.xi_estimate();
    let mut out = ModelVector::zeros(2 * d);
    out.rows_mut(0, d).copy_from(&e);
    out.rows_mut(d, d).copy_from(&q);
    out
}

fn drive_vector(
    scenario: &Scenario,
    script: &ScriptSet,
    state: &EnumState,
    t: usize,
    delta: bool,
    mu: bool,
) -> ModelVector {
    let d = scenario.dimension();
    let r = &script.zeta[t] - &script.zeta_hat[t];
    let tau = state.adversary.tau();
    let xi_at_tau = if tau < 0 {
        ModelVector::zeros(d)
    } else {
        script.xi[tau as usize].clone()
    };
    let residual = if delta && !mu {
        &script.xi[t] - &scenario.m * xi_at_tau
    } else {
        ModelVector::zeros(d)
    };
    let mut out = ModelVector::zeros(2 * d);
    if delta {
        out.rows_mut(0, d).copy_from(&(&r + &residual));
    } else {
        out.rows_mut(0, d).copy_from(&residual);
    }
    out.rows_mut(d, d).copy_from(&residual);
    out
}

fn round_outcomes(p: f64, gamma: f64) -> [(bool, bool, f64); 4] {
    [
        (false, false, (1.0 - p) * (1.0 - gamma)),
        (false, true, (1.0 - p) * gamma),
        (true, false, p * (1.0 - gamma)),
        (true, true, p * gamma),
    ]
}

fn walk_nodes(
    scenario: &Scenario,
    script: &ScriptSet,
    depth: usize,
    visit: &mut dyn FnMut(f64, &EnumState),
) -> Result<()> {
    fn recurse(
        scenario: &Scenario,
        script: &ScriptSet,
        state: &EnumState,
        t: usize,
        weight: f64,
        depth: usize,
        visit: &mut dyn FnMut(f64, &EnumState),
    ) -> Result<()> {
        if t == depth {
            visit(weight, state);
            return Ok(());
        }
        let gamma = if scenario.force_mu_one {
            1.0
        } else {
            scenario.gamma
        };
        let branches = [
            (false, false, 1.0 - scenario.p),
            (true, true, scenario.p * gamma),
            (true, false, scenario.p * (1.0 - gamma)),
        ];
        for (delta, mu, w) in branches {
            if w == 0.0 {
                continue;
            }
            let mut next = EnumState {
                client: state.client.clone(),
                adversary: state.adversary.clone(),
            };
            advance_scripted(scenario, script, &mut next, t, delta, mu)?;
            recurse(scenario, script, &next, t + 1, weight * w, depth, visit)?;
        }
        Ok(())
    }
    let root = EnumState {
        client: scenario.x_c0.clone(),
        adversary: crate::adversary::Adversary::new(scenario.x_a0.clone(), scenario.m.clone())?,
    };
    recurse(scenario, script, &root, 0, 1.0, depth, visit)
}

/// Exhaustively enumerated error-block covariance of the round-`t` drive
/// deviation: `[I 0] E[v v'] [I 0]'` with `v = (A - E[A]) E[sigma] + (u -
/// E[u])`, all means computed by enumeration.
pub fn enumerate_fluctuation_block(scenario: &Scenario, t: usize) -> Result<DMatrix<f64>> {
    let script = match &scenario.dynamics {
        Dynamics::Scripted(s) => s,
        Dynamics::FullFl(_) => return Err(Error::Config("scripted scenario required".into())),
    };
    let d = scenario.dimension();
    let gamma = if scenario.force_mu_one {
        1.0
    } else {
        scenario.gamma
    };
    let outcomes = round_outcomes(scenario.p, gamma);

    let sigma_mean = enumerate_sigma_mean(scenario, script, t)?;
    let mut a_mean = DMatrix::zeros(2 * d, 2 * d);
    for (delta, mu, w) in outcomes {
        a_mean += w * joint_transition(delta, mu, &scenario.m);
    }
    let mut u_mean = ModelVector::zeros(2 * d);
    walk_nodes(scenario, script, t, &mut |weight, state| {
        for (delta, mu, w) in outcomes {
            u_mean += weight * w * drive_vector(scenario, script, state, t, delta, mu);
        }
    })?;

    let mut block = DMatrix::zeros(d, d);
    walk_nodes(scenario, script, t, &mut |weight, state| {
        for (delta, mu, w) in outcomes {
            let a = joint_transition(delta, mu, &scenario.m);
            let u = drive_vector(scenario, script, state, t, delta, mu);
            let v = (&a - &a_mean) * &sigma_mean + (&u - &u_mean);
            let top = v.rows(0, d);
            block += weight * w * (top * top.transpose());
        }
    })?;
    Ok(block)
}

/// Closed-form per-round fluctuation covariance against the enumerated drive
/// deviation block, across random scripted scenarios and every round up to
/// the horizon.
pub fn check_fluctuation_covariance_oracle(
    scenarios: usize,
    horizon: usize,
    tolerance: f64,
    seed: u64,
) -> CheckOutcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..scenarios {
        let scenario = randomized_bound_scenario(horizon, &mut rng);
        let script = match &scenario.dynamics {
            Dynamics::Scripted(s) => s.clone(),
            Dynamics::FullFl(_) => unreachable!(),
        };
        let q_mean = expected_estimation_gap(
            &script.xi,
            scenario.p,
            scenario.gamma,
            &scenario.m,
            horizon,
        );
        for t in 0..horizon {
            let ell = innovation_selection_mean(&script.xi, scenario.p, t);
            let h = innovation_residual(&script.xi[t], &scenario.m, &ell);
            let s = &h + &scenario.m * &q_mean[t];
            let r = &script.zeta[t] - &script.zeta_hat[t];
            let closed = fluctuation_covariance(
                &s,
                &r,
                &script.xi,
                scenario.p,
                scenario.gamma,
                &scenario.m,
                t,
            );
            let enumerated = match enumerate_fluctuation_block(&scenario, t) {
                Ok(b) => b,
                Err(e) => {
                    return outcome(
                        "fluctuation covariance vs enumeration",
                        started,
                        false,
                        format!("enumeration failed: {e}"),
                    )
                }
            };
            worst = worst.max((closed.trace - enumerated.trace()).abs());
            worst = worst.max((&closed.matrix - &enumerated).abs().max());
        }
    }
    outcome(
        "fluctuation covariance vs enumeration",
        started,
        worst <= tolerance,
        format!("max deviation {worst:.3e} (tolerance {tolerance:.1e})"),
    )
}

/// Monte Carlo estimate of the joint-state/drive cross moment on a generic
/// scripted scenario. Informational: the covariance split drops this term,
/// and the probe reports how far from zero it actually sits; it never fails
/// the battery.
pub fn probe_cross_term(trials: usize, seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let scenario = geometric_scenario(12, 0.5, 0.5, 0.5, 1.0, 0.9, 0.1, 0.0);
    match crate::experiments::cross_term_probe(&scenario, trials, seed) {
        Ok(probe) => {
            let mut max_norm = 0.0f64;
            let mut max_ratio = 0.0f64;
            for t in 0..probe.norm.len() {
                max_norm = max_norm.max(probe.norm[t]);
                if probe.stderr[t] > 0.0 {
                    max_ratio = max_ratio.max(probe.norm[t] / probe.stderr[t]);
                }
            }
            outcome(
                "joint-state cross-term probe (informational)",
                started,
                true,
                format!(
                    "max |E[A sigma~ v']| = {max_norm:.3e}, up to {max_ratio:.1} standard \
                     errors from zero over {trials} trials; logged, not asserted"
                ),
            )
        }
        Err(e) => outcome(
            "joint-state cross-term probe (informational)",
            started,
            true,
            format!("probe unavailable: {e}"),
        ),
    }
}

/// Runs the default oracle battery. Seeds are pinned so the report is
/// reproducible; they match the acceptance suite.
pub fn run_all(threads: Option<usize>) -> VerifyReport {
    let checks = vec![
        check_covariance_map_oracle(100, 1e-12, 0xC1),
        check_fluctuation_covariance_oracle(5, 10, 1e-9, 0xC8),
        check_innovation_transition_exactness(50, 3, 1e-10, 0xC3),
        check_bound_vs_enumeration(12, 10, 1e-9, 0xC4),
        check_perfect_eavesdrop(&[0.3, 0.7], 12, 1e-9, 100, 100_000, 0xC5, threads),
        check_flop_zero_protection(0.5, 0.1, 1000, 200, 0.999, 0xC6),
        probe_cross_term(20_000, 0xC7),
    ];
    let all_passed = checks.iter().all(|c| c.passed);
    VerifyReport { checks, all_passed }
}
