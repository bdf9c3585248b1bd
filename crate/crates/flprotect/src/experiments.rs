//! Trial execution: seeded Monte Carlo, exhaustive enumeration over the
//! participation/interception coin flips, and parameter sweeps.
//!
//! Scripted scenarios drive the client with deterministic innovation and
//! mismatch sequences, leaving the coins as the only randomness; that is the
//! regime the closed forms describe, and the one the exact enumerator can
//! integrate. Full-federation scenarios simulate every client.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{check_stability, Adversary};
use crate::analysis::{
    self, innovation_residual, innovation_selection_mean, joint_transition, mean_joint_transition,
};
use crate::config::{RunConfig, RunMode};
use crate::error::{Error, Result};
use crate::fl::{
    self, client_round, server_round, ModelVector, ProtocolKind, QuadraticObjective, RoundTrace,
};

/// Deterministic per-stream seed derivation (splitmix64 over the root seed).
/// Stream `i` always maps to the same seed regardless of execution order or
/// thread count.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed stream reserved for objective generation in full-federation mode.
const OBJECTIVE_STREAM: u64 = u64::MAX;

/// Deterministic per-round inputs for the monitored client.
#[derive(Debug, Clone)]
pub struct ScriptSet {
    pub xi: Vec<ModelVector>,
    pub zeta: Vec<ModelVector>,
    pub zeta_hat: Vec<ModelVector>,
}

impl ScriptSet {
    /// All-zero scripts: a frozen client and an adversary with no mismatch
    /// information.
    pub fn zeros(d: usize, horizon: usize) -> Self {
        let zeros = vec![ModelVector::zeros(d); horizon];
        Self {
            xi: zeros.clone(),
            zeta: zeros.clone(),
            zeta_hat: zeros,
        }
    }
}

/// Client dynamics of a scenario.
#[derive(Debug, Clone)]
pub enum Dynamics {
    Scripted(ScriptSet),
    FullFl(FederationSpec),
}

/// Multi-client federation parameters.
#[derive(Debug, Clone)]
pub struct FederationSpec {
    pub objectives: Vec<QuadraticObjective>,
    pub n_sampled: usize,
    pub eta: f64,
    pub local_steps: usize,
}

/// A fully materialized experiment.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub protocol: ProtocolKind,
    pub p: f64,
    pub gamma: f64,
    pub m: DMatrix<f64>,
    pub horizon: usize,
    pub x_c0: ModelVector,
    pub x_a0: ModelVector,
    pub force_mu_one: bool,
    pub dynamics: Dynamics,
}

impl Scenario {
    /// Builds a scenario from a run configuration. Scripted runs default to
    /// all-zero scripts unless `scripts` is supplied; full-federation runs
    /// generate client objectives from the config seed.
    pub fn from_config(config: &RunConfig, scripts: Option<ScriptSet>) -> Result<Self> {
        config.validate()?;
        let d = config.dimension;
        let x_c0 = config.x_c0.materialize(d)?;
        let x_a0 = config.x_a0.materialize(d)?;
        let m = config.surrogate.materialize(d)?;
        let dynamics = match config.mode {
            RunMode::Scripted => {
                let scripts = scripts.unwrap_or_else(|| ScriptSet::zeros(d, config.horizon));
                Dynamics::Scripted(scripts)
            }
            RunMode::FullFl => {
                if scripts.is_some() {
                    return Err(Error::Config(
                        "scripted sequences cannot be combined with full_fl mode".into(),
                    ));
                }
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(config.seed, OBJECTIVE_STREAM));
                let objectives =
                    fl::generate_objectives(d, config.n_total, &config.objective, &mut rng)?;
                for obj in &objectives {
                    obj.validate_step_size(config.eta)?;
                }
                Dynamics::FullFl(FederationSpec {
                    objectives,
                    n_sampled: config.n_sampled,
                    eta: config.eta,
                    local_steps: config.local_steps,
                })
            }
        };
        let scenario = Self {
            protocol: config.protocol,
            p: config.p(),
            gamma: config.gamma,
            m,
            horizon: config.horizon,
            x_c0,
            x_a0,
            force_mu_one: config.force_mu_one,
            dynamics,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.x_c0.len();
        if self.x_a0.len() != d {
            return Err(Error::Config("initial vectors differ in dimension".into()));
        }
        if self.m.nrows() != d || self.m.ncols() != d {
            return Err(Error::Config("surrogate matrix dimension mismatch".into()));
        }
        if !(0.0..=1.0).contains(&self.p) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        match &self.dynamics {
            Dynamics::Scripted(s) => {
                for (name, seq) in [("xi", &s.xi), ("zeta", &s.zeta), ("zeta_hat", &s.zeta_hat)] {
                    if seq.len() != self.horizon {
                        return Err(Error::Config(format!(
                            "{name} script has {} rounds but the horizon is {}",
                            seq.len(),
                            self.horizon
                        )));
                    }
                    if let Some(bad) = seq.iter().find(|v| v.len() != d) {
                        return Err(Error::Config(format!(
                            "{name} script entry has dimension {} (model dimension {d})",
                            bad.len()
                        )));
                    }
                }
            }
            Dynamics::FullFl(f) => {
                if f.objectives.is_empty() || f.n_sampled == 0 || f.n_sampled > f.objectives.len()
                {
                    return Err(Error::Config(
                        "federation needs 1 <= n_sampled <= client count".into(),
                    ));
                }
                if f.objectives.iter().any(|o| o.dim() != d) {
                    return Err(Error::Config("objective dimension mismatch".into()));
                }
            }
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.x_c0.len()
    }

    pub fn is_scripted(&self) -> bool {
        matches!(self.dynamics, Dynamics::Scripted(_))
    }

    fn effective_gamma(&self) -> f64 {
        if self.force_mu_one {
            1.0
        } else {
            self.gamma
        }
    }
}

/// Everything observed along one simulated trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    /// Per-round records, `rounds[t]` describing round `t`.
    pub rounds: Vec<RoundTrace>,
    /// Squared client-adversary error at every time index `0..=horizon`.
    pub errors_sq: Vec<f64>,
}

/// Runs one seeded trial and returns the full trace.
pub fn run_trial(scenario: &Scenario, seed: u64) -> Result<TrialResult> {
    let (errors_sq, rounds) = simulate(scenario, seed, true)?;
    Ok(TrialResult {
        rounds: rounds.unwrap_or_default(),
        errors_sq,
    })
}

/// Runs one seeded trial, keeping only the error series.
pub fn run_trial_errors(scenario: &Scenario, seed: u64) -> Result<Vec<f64>> {
    Ok(simulate(scenario, seed, false)?.0)
}

fn check_finite(v: &ModelVector, round: usize, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Simulation {
            round,
            message: format!("{what} diverged"),
        })
    }
}

fn simulate(
    scenario: &Scenario,
    seed: u64,
    record: bool,
) -> Result<(Vec<f64>, Option<Vec<RoundTrace>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = scenario.horizon;
    let mut adversary = Adversary::new(scenario.x_a0.clone(), scenario.m.clone())?;
    let mut errors = Vec::with_capacity(horizon + 1);
    let mut rounds = record.then(|| Vec::with_capacity(horizon));

    match &scenario.dynamics {
        Dynamics::Scripted(script) => {
            let mut client = scenario.x_c0.clone();
            errors.push((&client - adversary.estimate()).norm_squared());
            for t in 0..horizon {
                let (delta, mut mu) =
                    fl::sample_round_randomness(&mut rng, scenario.p, scenario.gamma);
                if scenario.force_mu_one {
                    mu = true;
                }
                let xi = &script.xi[t];
                let zeta = &script.zeta[t];
                let zeta_hat = &script.zeta_hat[t];

                let next_client = if delta {
                    client.clone() + xi + zeta
                } else {
                    client.clone()
                };
                let uplink = delta.then(|| match scenario.protocol {
                    ProtocolKind::Flip => xi.clone(),
                    ProtocolKind::Flop => next_client.clone(),
                });
                if let Some(rounds) = rounds.as_mut() {
                    rounds.push(RoundTrace {
                        t,
                        delta,
                        mu,
                        xi: Some(xi.clone()),
                        zeta: zeta.clone(),
                        client_model: client.clone(),
                        uplink: uplink.clone(),
                        error_sq: errors[t],
                    });
                }

                let observed = if delta && mu { uplink.as_ref() } else { None };
                match scenario.protocol {
                    ProtocolKind::Flip => adversary.step_flip(t, delta, mu, observed, zeta_hat)?,
                    ProtocolKind::Flop => adversary.step_flop(t, delta, mu, observed, zeta_hat)?,
                }
                client = next_client;
                check_finite(&client, t, "client state")?;
                check_finite(adversary.estimate(), t, "adversary estimate")?;
                errors.push((&client - adversary.estimate()).norm_squared());
            }
        }
        Dynamics::FullFl(fed) => {
            let n_total = fed.objectives.len();
            let zero = ModelVector::zeros(scenario.dimension());
            // All clients start from the monitored client's initialization,
            // which also serves as the first broadcast model.
            let mut clients = vec![scenario.x_c0.clone(); n_total];
            let mut server = scenario.x_c0.clone();
            let mut indices: Vec<usize> = (0..n_total).collect();
            errors.push((&clients[0] - adversary.estimate()).norm_squared());
            for t in 0..horizon {
                // Uniform subset draw: partial Fisher-Yates, then the
                // interception coin.
                for i in 0..fed.n_sampled {
                    let j = i + rng.random_range(0..n_total - i);
                    indices.swap(i, j);
                }
                let subset = &indices[..fed.n_sampled];
                let delta = subset.contains(&0);
                let mu = scenario.force_mu_one || rng.random::<f64>() < scenario.gamma;

                let zeta = &server - &clients[0];
                let monitored_before = clients[0].clone();
                let mut uplinks = Vec::with_capacity(fed.n_sampled);
                let mut monitored_uplink = None;
                let mut monitored_xi = None;
                for &i in subset {
                    let (updated, uplink) = client_round(
                        &clients[i],
                        &server,
                        true,
                        &fed.objectives[i],
                        fed.eta,
                        fed.local_steps,
                        scenario.protocol,
                    )?;
                    let uplink = uplink.expect("participants always uplink");
                    if i == 0 {
                        monitored_xi = Some(&updated - &server);
                        monitored_uplink = Some(uplink.clone());
                    }
                    uplinks.push(uplink);
                    clients[i] = updated;
                }

                if let Some(rounds) = rounds.as_mut() {
                    rounds.push(RoundTrace {
                        t,
                        delta,
                        mu,
                        xi: monitored_xi.clone(),
                        zeta: zeta.clone(),
                        client_model: monitored_before,
                        uplink: monitored_uplink.clone(),
                        error_sq: errors[t],
                    });
                }

                let observed = if delta && mu {
                    monitored_uplink.as_ref()
                } else {
                    None
                };
                match scenario.protocol {
                    ProtocolKind::Flip => adversary.step_flip(t, delta, mu, observed, &zero)?,
                    ProtocolKind::Flop => adversary.step_flop(t, delta, mu, observed, &zero)?,
                }
                server = server_round(&server, &uplinks, scenario.protocol)?;
                check_finite(&server, t, "server state")?;
                check_finite(&clients[0], t, "client state")?;
                check_finite(adversary.estimate(), t, "adversary estimate")?;
                errors.push((&clients[0] - adversary.estimate()).norm_squared());
            }
        }
    }
    Ok((errors, rounds))
}

/// Per-round protection statistics from independent trials.
#[derive(Debug, Clone)]
pub struct ProtectionEstimate {
    /// Sample mean of the squared error at each time index.
    pub mean: Vec<f64>,
    /// Standard error of that mean (unbiased sample variance).
    pub stderr: Vec<f64>,
    pub trials: usize,
    /// Exact per-round values, when an enumeration was attached.
    pub exact: Option<Vec<f64>>,
}

/// Trials per work unit. Blocks are processed independently and reduced in
/// index order, so results do not depend on the thread count.
const TRIAL_BLOCK: usize = 256;

struct BlockAccum {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

fn run_block(scenario: &Scenario, seed0: u64, range: std::ops::Range<usize>) -> Result<BlockAccum> {
    let len = scenario.horizon + 1;
    let mut acc = BlockAccum {
        sum: vec![0.0; len],
        sum_sq: vec![0.0; len],
    };
    for trial in range {
        let errors = run_trial_errors(scenario, derive_seed(seed0, trial as u64))?;
        for (t, &e) in errors.iter().enumerate() {
            acc.sum[t] += e;
            acc.sum_sq[t] += e * e;
        }
    }
    Ok(acc)
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}

/// Estimates per-round protection over `trials` independent seeded trials.
/// Trial `i` always uses the seed derived from `(seed0, i)`; block sums are
/// combined in a fixed order, so the output is byte-identical for any
/// `threads` setting.
pub fn monte_carlo_protection(
    scenario: &Scenario,
    trials: usize,
    seed0: u64,
    threads: Option<usize>,
) -> Result<ProtectionEstimate> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    scenario.validate()?;
    let blocks: Vec<std::ops::Range<usize>> = (0..trials)
        .step_by(TRIAL_BLOCK)
        .map(|start| start..(start + TRIAL_BLOCK).min(trials))
        .collect();
    let accs: Vec<Result<BlockAccum>> = with_pool(threads, || {
        use rayon::prelude::*;
        blocks
            .par_iter()
            .map(|range| run_block(scenario, seed0, range.clone()))
            .collect()
    })?;

    let len = scenario.horizon + 1;
    let mut sum = vec![0.0; len];
    let mut sum_sq = vec![0.0; len];
    for acc in accs {
        let acc = acc?;
        for t in 0..len {
            sum[t] += acc.sum[t];
            sum_sq[t] += acc.sum_sq[t];
        }
    }
    let n = trials as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stderr: Vec<f64> = (0..len)
        .map(|t| {
            if trials < 2 {
                0.0
            } else {
                let var = ((sum_sq[t] - sum[t] * sum[t] / n) / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            }
        })
        .collect();
    Ok(ProtectionEstimate {
        mean,
        stderr,
        trials,
        exact: None,
    })
}

/// Mean and standard error of the per-trial tail-averaged squared error
/// (average over the final `window` time indices).
pub fn monte_carlo_tail(
    scenario: &Scenario,
    trials: usize,
    seed0: u64,
    window: usize,
    threads: Option<usize>,
) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let w = window.clamp(1, scenario.horizon + 1);
    let blocks: Vec<std::ops::Range<usize>> = (0..trials)
        .step_by(TRIAL_BLOCK)
        .map(|start| start..(start + TRIAL_BLOCK).min(trials))
        .collect();
    let accs: Vec<Result<(f64, f64)>> = with_pool(threads, || {
        use rayon::prelude::*;
        blocks
            .par_iter()
            .map(|range| {
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                for trial in range.clone() {
                    let errors = run_trial_errors(scenario, derive_seed(seed0, trial as u64))?;
                    let tail =
                        errors[errors.len() - w..].iter().sum::<f64>() / w as f64;
                    sum += tail;
                    sum_sq += tail * tail;
                }
                Ok((sum, sum_sq))
            })
            .collect()
    })?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for acc in accs {
        let (s, q) = acc?;
        sum += s;
        sum_sq += q;
    }
    let n = trials as f64;
    let mean = sum / n;
    let stderr = if trials < 2 {
        0.0
    } else {
        let var = ((sum_sq - sum * sum / n) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    };
    Ok((mean, stderr))
}

/// Largest horizon the exact enumerator accepts.
pub const ENUMERATION_MAX_HORIZON: usize = 14;

/// Compensated accumulator: summing hundreds of thousands of leaf weights
/// naively loses more than the 1e-12 the weight-sum contract allows.
#[derive(Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    fn add(&mut self, value: f64) {
        let y = value - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

pub(crate) struct EnumState {
    pub(crate) client: ModelVector,
    pub(crate) adversary: Adversary,
}

/// Exact per-round expected squared error for a scripted scenario, by
/// enumerating every participation/interception history with its probability
/// weight. Rounds without participation collapse the interception dimension,
/// so the effective branching factor is three.
pub fn brute_force_protection(scenario: &Scenario) -> Result<Vec<f64>> {
    let script = match &scenario.dynamics {
        Dynamics::Scripted(s) => s,
        Dynamics::FullFl(_) => {
            return Err(Error::Config(
                "exact enumeration requires scripted dynamics".into(),
            ))
        }
    };
    if scenario.horizon > ENUMERATION_MAX_HORIZON {
        return Err(Error::EnumerationBudget {
            requested: scenario.horizon,
            max: ENUMERATION_MAX_HORIZON,
        });
    }
    let gamma = scenario.effective_gamma();
    let p = scenario.p;
    let mut acc = vec![KahanSum::default(); scenario.horizon + 1];
    let mut leaf_weight = KahanSum::default();
    let root = EnumState {
        client: scenario.x_c0.clone(),
        adversary: Adversary::new(scenario.x_a0.clone(), scenario.m.clone())?,
    };
    enumerate(
        scenario, script, p, gamma, &root, 0, 1.0, &mut acc, &mut leaf_weight,
    )?;
    let total = leaf_weight.value();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Simulation {
            round: scenario.horizon,
            message: format!("enumeration weights sum to {total}"),
        });
    }
    Ok(acc.iter().map(KahanSum::value).collect())
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    scenario: &Scenario,
    script: &ScriptSet,
    p: f64,
    gamma: f64,
    state: &EnumState,
    t: usize,
    weight: f64,
    acc: &mut [KahanSum],
    leaf_weight: &mut KahanSum,
) -> Result<()> {
    acc[t].add(weight * (&state.client - state.adversary.estimate()).norm_squared());
    if t == scenario.horizon {
        leaf_weight.add(weight);
        return Ok(());
    }
    let branches = [
        (false, false, 1.0 - p),
        (true, true, p * gamma),
        (true, false, p * (1.0 - gamma)),
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
        enumerate(
            scenario,
            script,
            p,
            gamma,
            &next,
            t + 1,
            weight * w,
            acc,
            leaf_weight,
        )?;
    }
    Ok(())
}

pub(crate) fn advance_scripted(
    scenario: &Scenario,
    script: &ScriptSet,
    state: &mut EnumState,
    t: usize,
    delta: bool,
    mu: bool,
) -> Result<()> {
    let xi = &script.xi[t];
    let zeta = &script.zeta[t];
    let zeta_hat = &script.zeta_hat[t];
    let next_client = if delta {
        &state.client + xi + zeta
    } else {
        state.client.clone()
    };
    match scenario.protocol {
        ProtocolKind::Flip => {
            let observed = (delta && mu).then_some(xi);
            state.adversary.step_flip(t, delta, mu, observed, zeta_hat)?;
        }
        ProtocolKind::Flop => {
            let observed = (delta && mu).then_some(&next_client);
            state.adversary.step_flop(t, delta, mu, observed, zeta_hat)?;
        }
    }
    state.client = next_client;
    Ok(())
}

/// Monte Carlo estimate of the joint-state/noise cross moment that the
/// covariance split treats as negligible. Reported, never asserted.
#[derive(Debug, Clone)]
pub struct CrossTermProbe {
    /// Frobenius norm of the sample mean matrix, per round.
    pub norm: Vec<f64>,
    /// Frobenius norm of the entrywise standard errors, per round.
    pub stderr: Vec<f64>,
    pub trials: usize,
}

/// Estimates `E[A_t (sigma_t - mean) v_t']` per round for a scripted FLIP
/// scenario, where `v_t` is the deviation of the joint-state drive from its
/// mean.
pub fn cross_term_probe(scenario: &Scenario, trials: usize, seed0: u64) -> Result<CrossTermProbe> {
    let script = match &scenario.dynamics {
        Dynamics::Scripted(s) => s,
        Dynamics::FullFl(_) => {
            return Err(Error::Config("cross-term probe requires scripts".into()))
        }
    };
    if scenario.protocol != ProtocolKind::Flip {
        return Err(Error::Config(
            "cross-term probe applies to increment uplinks".into(),
        ));
    }
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let d = scenario.dimension();
    let horizon = scenario.horizon;
    let p = scenario.p;
    let gamma = scenario.effective_gamma();
    let m = &scenario.m;

    // Deterministic mean trajectories of the joint state and its drive.
    let q_mean = analysis::expected_estimation_gap(&script.xi, p, gamma, m, horizon);
    let mut e_mean = vec![&scenario.x_c0 - &scenario.x_a0];
    let mut u_mean = Vec::with_capacity(horizon);
    let m1 = p * (1.0 - gamma) * m;
    for t in 0..horizon {
        let ell = innovation_selection_mean(&script.xi, p, t);
        let h = innovation_residual(&script.xi[t], m, &ell);
        let r = &script.zeta[t] - &script.zeta_hat[t];
        let u_top = p * &r + p * (1.0 - gamma) * &h;
        let u_bottom = p * (1.0 - gamma) * &h;
        u_mean.push(stack(&u_top, &u_bottom));
        let next = &e_mean[t] + &m1 * &q_mean[t] + p * &r + p * (1.0 - gamma) * &h;
        e_mean.push(next);
    }
    let sigma_mean: Vec<ModelVector> = (0..=horizon)
        .map(|t| stack(&e_mean[t], &q_mean[t]))
        .collect();
    let mean_a = mean_joint_transition(p, gamma, m);

    let mut sum = vec![DMatrix::zeros(2 * d, 2 * d); horizon];
    let mut sum_sq = vec![DMatrix::zeros(2 * d, 2 * d); horizon];
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed0, trial as u64));
        let mut client = scenario.x_c0.clone();
        let mut adversary = Adversary::new(scenario.x_a0.clone(), scenario.m.clone())?;
        for t in 0..horizon {
            let (delta, mut mu) = fl::sample_round_randomness(&mut rng, p, scenario.gamma);
            if scenario.force_mu_one {
                mu = true;
            }
            let xi = &script.xi[t];
            let zeta = &script.zeta[t];
            let zeta_hat = &script.zeta_hat[t];
            let r = zeta - zeta_hat;

            // Realized joint state entering the round.
            let tau = adversary.tau();
            let xi_at_tau = if tau < 0 {
                ModelVector::zeros(d)
            } else {
                script.xi[tau as usize].clone()
            };
            let q = &xi_at_tau - adversary.xi_estimate();
            let e = &client - adversary.estimate();
            let sigma = stack(&e, &q);

            let a = joint_transition(delta, mu, m);
            let du = if delta && !mu { 1.0 } else { 0.0 };
            let residual = du * (xi - m * &xi_at_tau);
            let delta_r = if delta { r.clone() } else { ModelVector::zeros(d) };
            let u = stack(&(delta_r + &residual), &residual);

            let v = (&a - &mean_a) * &sigma_mean[t] + (&u - &u_mean[t]);
            let sample = &a * (&sigma - &sigma_mean[t]) * v.transpose();
            sum[t] += &sample;
            sum_sq[t] += sample.map(|x| x * x);

            // Advance the realized trajectory.
            let observed = (delta && mu).then_some(xi);
            adversary.step_flip(t, delta, mu, observed, zeta_hat)?;
            if delta {
                client += xi + zeta;
            }
        }
    }

    let n = trials as f64;
    let mut norm = Vec::with_capacity(horizon);
    let mut stderr = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mean = &sum[t] / n;
        norm.push(mean.norm());
        if trials < 2 {
            stderr.push(0.0);
        } else {
            let var = (&sum_sq[t] / n - mean.map(|x| x * x)).map(|x| x.max(0.0) * n / (n - 1.0));
            stderr.push(var.map(|x| (x / n).sqrt()).norm());
        }
    }
    Ok(CrossTermProbe {
        norm,
        stderr,
        trials,
    })
}

fn stack(top: &ModelVector, bottom: &ModelVector) -> ModelVector {
    let mut out = ModelVector::zeros(top.len() + bottom.len());
    out.rows_mut(0, top.len()).copy_from(top);
    out.rows_mut(top.len(), bottom.len()).copy_from(bottom);
    out
}

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    Participation,
    Interception,
    SurrogateScale,
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p" => Ok(SweepParameter::Participation),
            "gamma" => Ok(SweepParameter::Interception),
            "m_scale" | "m-scale" => Ok(SweepParameter::SurrogateScale),
            other => Err(Error::Config(format!(
                "unknown sweep parameter `{other}` (expected `p`, `gamma`, or `m_scale`)"
            ))),
        }
    }
}

/// One grid point of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub tail_mean: f64,
    pub tail_stderr: f64,
    /// Tail of the lower-bound pipeline; present for scripted FLIP scenarios.
    pub tail_bound: Option<f64>,
    pub stability_satisfied: bool,
}

/// Evaluates tail protection across a parameter grid. Trials reuse the same
/// seed stream at every grid point, so adjacent points are compared under
/// common randomness.
pub fn protection_sweep(
    base: &Scenario,
    parameter: SweepParameter,
    grid: &[f64],
    trials: usize,
    seed0: u64,
    tail_window: Option<usize>,
    threads: Option<usize>,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let window = tail_window.unwrap_or_else(|| analysis::default_tail_window(base.horizon));
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut scenario = base.clone();
        match parameter {
            SweepParameter::Participation => {
                if !scenario.is_scripted() {
                    return Err(Error::Config(
                        "participation sweeps need scripted dynamics (client counts fix p \
                         otherwise)"
                            .into(),
                    ));
                }
                scenario.p = value;
            }
            SweepParameter::Interception => scenario.gamma = value,
            SweepParameter::SurrogateScale => scenario.m = &base.m * value,
        }
        scenario.validate()?;
        let (tail_mean, tail_stderr) =
            monte_carlo_tail(&scenario, trials, seed0, window, threads)?;
        let tail_bound = match (&scenario.dynamics, scenario.protocol) {
            (Dynamics::Scripted(script), ProtocolKind::Flip) if scenario.p > 0.0 => {
                let series = analysis::protection_lower_bound(
                    &script.xi,
                    &script.zeta,
                    &script.zeta_hat,
                    scenario.p,
                    scenario.effective_gamma(),
                    &scenario.m,
                    &scenario.x_c0,
                    &scenario.x_a0,
                    scenario.horizon,
                    Some(window),
                )
                .ok();
                series.map(|s| s.tail_min_bound)
            }
            _ => None,
        };
        let stability_satisfied =
            check_stability(&scenario.m, scenario.p, scenario.effective_gamma()).satisfied;
        rows.push(SweepRow {
            value,
            tail_mean,
            tail_stderr,
            tail_bound,
            stability_satisfied,
        });
    }
    Ok(rows)
}
