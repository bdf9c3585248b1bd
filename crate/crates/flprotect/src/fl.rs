//! Federated-learning round dynamics.
//!
//! Models a single global round: the server broadcasts its model, sampled
//! clients run a fixed number of deterministic gradient-descent steps on a
//! local quadratic objective, and upload either the resulting increment
//! (FLIP) or their full updated model (FLOP). The increment produced by `L`
//! local steps from the broadcast point is the *innovation* of the round.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A point in model-parameter space.
pub type ModelVector = DVector<f64>;

/// Which payload participating clients upload to the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ProtocolKind {
    /// Clients upload the model increment produced by local training.
    Flip,
    /// Clients upload their full updated local model.
    Flop,
}

impl std::fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProtocolKind::Flip => write!(f, "flip"),
            ProtocolKind::Flop => write!(f, "flop"),
        }
    }
}

impl std::str::FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flip" => Ok(ProtocolKind::Flip),
            "flop" => Ok(ProtocolKind::Flop),
            other => Err(Error::Config(format!(
                "unknown protocol `{other}` (expected `flip` or `flop`)"
            ))),
        }
    }
}

/// Local client objective `f(x) = 0.5 x'Qx + b'x` with constant Hessian `Q`.
///
/// The constant Hessian makes every linearization used by the analysis module
/// exact, so closed forms can be checked against simulation to machine
/// precision.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
}

/// Eigenvalues below this are treated as zero when checking semi-definiteness.
const PSD_TOLERANCE: f64 = 1e-10;

impl QuadraticObjective {
    /// Builds an objective, validating that `hessian` is symmetric positive
    /// semi-definite and matches the dimension of `linear`.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Result<Self> {
        if !hessian.is_square() || hessian.nrows() != linear.len() {
            return Err(Error::Config(format!(
                "hessian is {}x{} but linear term has dimension {}",
                hessian.nrows(),
                hessian.ncols(),
                linear.len()
            )));
        }
        let asym = (&hessian - hessian.transpose()).norm();
        if asym > PSD_TOLERANCE * (1.0 + hessian.norm()) {
            return Err(Error::Config("hessian must be symmetric".into()));
        }
        let min_eig = hessian
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        if min_eig < -PSD_TOLERANCE {
            return Err(Error::Config(format!(
                "hessian must be positive semi-definite (min eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(Self { hessian, linear })
    }

    /// Dimension of the parameter space.
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn gradient(&self, x: &ModelVector) -> ModelVector {
        &self.hessian * x + &self.linear
    }

    pub fn value(&self, x: &ModelVector) -> f64 {
        0.5 * (x.transpose() * &self.hessian * x)[(0, 0)] + self.linear.dot(x)
    }

    /// Largest eigenvalue magnitude of the Hessian.
    pub fn curvature(&self) -> f64 {
        self.hessian
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    }

    /// Checks the step-size condition `eta < 1 / lambda_max(Q)` that keeps
    /// every local GD step a positive-definite contraction.
    pub fn validate_step_size(&self, eta: f64) -> Result<()> {
        if !eta.is_finite() || eta <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        let lambda_max = self.curvature();
        if lambda_max > 0.0 && eta >= 1.0 / lambda_max {
            return Err(Error::Config(format!(
                "learning rate {eta} violates eta < 1/lambda_max(Q) = {}",
                1.0 / lambda_max
            )));
        }
        Ok(())
    }

    /// Minimizer `-Q^{-1} b`; fails when the Hessian is singular.
    pub fn minimizer(&self) -> Result<ModelVector> {
        self.hessian
            .clone()
            .lu()
            .solve(&(-&self.linear))
            .ok_or_else(|| Error::Config("hessian is singular; no unique minimizer".into()))
    }
}

/// One round of a simulated trace, recorded before the round's update is
/// applied: `client_model` and `error_sq` describe the state entering round
/// `t`, while `delta`/`mu`/`xi`/`zeta`/`uplink` describe what happened during
/// it.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub t: usize,
    pub delta: bool,
    pub mu: bool,
    /// Innovation of the round. Absent on non-participation rounds of a live
    /// simulation, where the client never computes it.
    pub xi: Option<ModelVector>,
    /// Server-minus-client mismatch entering the round.
    pub zeta: ModelVector,
    /// Client model entering the round.
    pub client_model: ModelVector,
    /// Payload on the wire; present iff `delta` is set.
    pub uplink: Option<ModelVector>,
    /// Squared client-adversary error entering the round.
    pub error_sq: f64,
}

fn ensure_finite(v: &ModelVector, round: usize, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Simulation {
            round,
            message: format!("{what} became non-finite"),
        })
    }
}

/// Runs `steps` deterministic GD steps from `server_model` and returns the
/// accumulated displacement `x_L - x_0 = -eta * sum_k grad f(x_k)`.
pub fn local_update(
    server_model: &ModelVector,
    obj: &QuadraticObjective,
    eta: f64,
    steps: usize,
) -> Result<ModelVector> {
    if steps == 0 {
        return Err(Error::Config("local step count must be at least 1".into()));
    }
    obj.validate_step_size(eta)?;
    let mut x = server_model.clone();
    let mut displacement = ModelVector::zeros(server_model.len());
    for k in 0..steps {
        let grad = obj.gradient(&x);
        ensure_finite(&grad, k, "local gradient")?;
        let step = eta * grad;
        x -= &step;
        displacement -= step;
    }
    Ok(displacement)
}

/// Applies one client round. With `delta` unset the client is untouched and
/// nothing is uplinked; with it set the client restarts from the broadcast
/// server model, trains locally, and uplinks per `protocol`.
pub fn client_round(
    client_model: &ModelVector,
    server_model: &ModelVector,
    delta: bool,
    obj: &QuadraticObjective,
    eta: f64,
    steps: usize,
    protocol: ProtocolKind,
) -> Result<(ModelVector, Option<ModelVector>)> {
    if !delta {
        return Ok((client_model.clone(), None));
    }
    let xi = local_update(server_model, obj, eta, steps)?;
    let updated = server_model + xi;
    // The FLIP payload is recomputed from the realized model change so the
    // wire value matches `x_{t+1} - x_s` bit for bit.
    let uplink = match protocol {
        ProtocolKind::Flip => &updated - server_model,
        ProtocolKind::Flop => updated.clone(),
    };
    Ok((updated, Some(uplink)))
}

/// Aggregates participant uplinks into the next server model: the uniform
/// average of increments is applied on top of the current model for FLIP,
/// while FLOP replaces the model with the average of the uploaded ones. With
/// no participants the server is unchanged.
pub fn server_round(
    server_model: &ModelVector,
    uplinks: &[ModelVector],
    protocol: ProtocolKind,
) -> Result<ModelVector> {
    if uplinks.is_empty() {
        return Ok(server_model.clone());
    }
    let d = server_model.len();
    if let Some(bad) = uplinks.iter().find(|u| u.len() != d) {
        return Err(Error::Config(format!(
            "uplink dimension {} does not match server dimension {d}",
            bad.len()
        )));
    }
    let mut mean = ModelVector::zeros(d);
    for u in uplinks {
        mean += u;
    }
    mean /= uplinks.len() as f64;
    Ok(match protocol {
        ProtocolKind::Flip => server_model + mean,
        ProtocolKind::Flop => mean,
    })
}

/// Draws the round's participation and interception indicators,
/// `delta ~ Bernoulli(p)` and `mu ~ Bernoulli(gamma)`, independently.
pub fn sample_round_randomness(rng: &mut ChaCha8Rng, p: f64, gamma: f64) -> (bool, bool) {
    let delta = rng.random::<f64>() < p;
    let mu = rng.random::<f64>() < gamma;
    (delta, mu)
}

/// Parameters for generating a family of per-client quadratic objectives.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ObjectiveSpec {
    /// Eigenvalue range of each Hessian.
    pub curvature_min: f64,
    pub curvature_max: f64,
    /// Standard deviation of client minimizers around the origin.
    pub minimizer_spread: f64,
    /// When set, all clients share one Hessian and differ only in minimizer.
    pub shared_curvature: bool,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            curvature_min: 0.5,
            curvature_max: 2.0,
            minimizer_spread: 1.0,
            shared_curvature: false,
        }
    }
}

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let gaussian = DMatrix::from_fn(d, d, |_, _| standard_normal(rng));
    gaussian.qr().q()
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u is bounded away from 0 so ln is finite.
    let u: f64 = rng.random::<f64>().max(1e-300);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

fn random_hessian(d: usize, spec: &ObjectiveSpec, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let basis = random_orthogonal(d, rng);
    let eigs = DVector::from_fn(d, |_, _| {
        spec.curvature_min + rng.random::<f64>() * (spec.curvature_max - spec.curvature_min)
    });
    &basis * DMatrix::from_diagonal(&eigs) * basis.transpose()
}

/// Generates `count` client objectives with the given heterogeneity profile.
pub fn generate_objectives(
    d: usize,
    count: usize,
    spec: &ObjectiveSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<QuadraticObjective>> {
    if spec.curvature_min < 0.0 || spec.curvature_max < spec.curvature_min {
        return Err(Error::Config(
            "curvature range must satisfy 0 <= min <= max".into(),
        ));
    }
    let shared = if spec.shared_curvature {
        Some(random_hessian(d, spec, rng))
    } else {
        None
    };
    (0..count)
        .map(|_| {
            let q = shared
                .clone()
                .unwrap_or_else(|| random_hessian(d, spec, rng));
            let minimizer =
                DVector::from_fn(d, |_, _| spec.minimizer_spread * standard_normal(rng));
            let b = -(&q * minimizer);
            QuadraticObjective::new(q, b)
        })
        .collect()
}
