//! Run configuration shared by the simulator and the CLI.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fl::{ModelVector, ObjectiveSpec, ProtocolKind};

/// Which dynamics drive the monitored client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RunMode {
    /// Innovation and mismatch sequences are deterministic inputs; only the
    /// participation and interception coins are random. This is the regime in
    /// which the closed forms are exact.
    Scripted,
    /// A full multi-client federation is simulated and the monitored client's
    /// sequences emerge from it.
    FullFl,
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scripted" => Ok(RunMode::Scripted),
            "full_fl" | "full-fl" | "fullfl" => Ok(RunMode::FullFl),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected `scripted` or `full_fl`)"
            ))),
        }
    }
}

/// How the surrogate transition matrix is specified.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum SurrogateSpec {
    /// `m * I`, the constant-per-coordinate choice that keeps the adversary's
    /// per-round work linear in the model dimension.
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl SurrogateSpec {
    pub fn materialize(&self, d: usize) -> Result<DMatrix<f64>> {
        match self {
            SurrogateSpec::Scalar(m) => Ok(DMatrix::identity(d, d) * *m),
            SurrogateSpec::Diagonal(diag) => {
                if diag.len() != d {
                    return Err(Error::Config(format!(
                        "diagonal surrogate has {} entries for dimension {d}",
                        diag.len()
                    )));
                }
                Ok(DMatrix::from_diagonal(&ModelVector::from_vec(diag.clone())))
            }
            SurrogateSpec::Full(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Config(format!(
                        "full surrogate must be {d}x{d}"
                    )));
                }
                Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
            }
        }
    }
}

/// Initialization of a model vector.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum InitSpec {
    /// Every coordinate set to the given value.
    Constant(f64),
    /// Explicit coordinates.
    Vector(Vec<f64>),
}

impl InitSpec {
    pub fn materialize(&self, d: usize) -> Result<ModelVector> {
        match self {
            InitSpec::Constant(v) => Ok(ModelVector::from_element(d, *v)),
            InitSpec::Vector(coords) => {
                if coords.len() != d {
                    return Err(Error::Config(format!(
                        "initial vector has {} coordinates for dimension {d}",
                        coords.len()
                    )));
                }
                Ok(ModelVector::from_vec(coords.clone()))
            }
        }
    }
}

/// Complete description of one experiment.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub protocol: ProtocolKind,
    pub mode: RunMode,
    /// Total client count.
    pub n_total: usize,
    /// Clients sampled per round.
    pub n_sampled: usize,
    /// Direct participation-probability override. When unset, `n_sampled /
    /// n_total` is used.
    pub p_override: Option<f64>,
    /// Per-round interception probability.
    pub gamma: f64,
    pub eta: f64,
    pub local_steps: usize,
    pub horizon: usize,
    pub dimension: usize,
    pub surrogate: SurrogateSpec,
    pub objective: ObjectiveSpec,
    pub x_c0: InitSpec,
    pub x_a0: InitSpec,
    pub seed: u64,
    pub trials: usize,
    pub force_mu_one: bool,
    /// Liminf proxy window; defaults to the last quarter of the horizon.
    pub tail_window: Option<usize>,
}

/// Fixed default seed so unseeded runs are still reproducible.
pub const DEFAULT_SEED: u64 = 42;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolKind::Flip,
            mode: RunMode::Scripted,
            n_total: 8,
            n_sampled: 4,
            p_override: None,
            gamma: 0.5,
            eta: 0.1,
            local_steps: 3,
            horizon: 50,
            dimension: 2,
            surrogate: SurrogateSpec::Scalar(0.5),
            objective: ObjectiveSpec::default(),
            x_c0: InitSpec::Constant(1.0),
            x_a0: InitSpec::Constant(0.0),
            seed: DEFAULT_SEED,
            trials: 1000,
            force_mu_one: false,
            tail_window: None,
        }
    }
}

impl RunConfig {
    /// Participation probability of the monitored client.
    pub fn p(&self) -> f64 {
        self.p_override
            .unwrap_or(self.n_sampled as f64 / self.n_total as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_total == 0 || self.n_sampled == 0 || self.n_sampled > self.n_total {
            return Err(Error::Config(format!(
                "client counts must satisfy 1 <= n <= N (got n = {}, N = {})",
                self.n_sampled, self.n_total
            )));
        }
        let p = self.p();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("p must be in [0, 1], got {p}")));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma must be in [0, 1], got {}",
                self.gamma
            )));
        }
        if self.eta <= 0.0 {
            return Err(Error::Config("eta must be positive".into()));
        }
        if self.local_steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.dimension == 0 {
            return Err(Error::Config("d must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.tail_window == Some(0) {
            return Err(Error::Config("tail window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn tail_window_or_default(&self) -> usize {
        self.tail_window
            .unwrap_or_else(|| crate::analysis::default_tail_window(self.horizon))
    }
}
