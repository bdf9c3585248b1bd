//! Configuration overlay: a key/value config file first, then command-line
//! flags on top. Flags always win.

use std::path::Path;

use anyhow::{bail, Context, Result};
use flprotect::config::{InitSpec, RunConfig, RunMode, SurrogateSpec};
use flprotect::fl::ProtocolKind;

/// Partial configuration collected from one source.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub protocol: Option<ProtocolKind>,
    pub mode: Option<RunMode>,
    pub n_total: Option<usize>,
    pub n_sampled: Option<usize>,
    pub p: Option<f64>,
    pub gamma: Option<f64>,
    pub eta: Option<f64>,
    pub steps: Option<usize>,
    pub horizon: Option<usize>,
    pub dimension: Option<usize>,
    pub surrogate: Option<SurrogateSpec>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub force_mu_one: Option<bool>,
    pub tail_window: Option<usize>,
    pub x_c0: Option<InitSpec>,
    pub x_a0: Option<InitSpec>,
    pub curvature_min: Option<f64>,
    pub curvature_max: Option<f64>,
    pub minimizer_spread: Option<f64>,
    pub shared_curvature: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(v) = self.protocol {
            config.protocol = v;
        }
        if let Some(v) = self.mode {
            config.mode = v;
        }
        if let Some(v) = self.n_total {
            config.n_total = v;
        }
        if let Some(v) = self.n_sampled {
            config.n_sampled = v;
        }
        if let Some(v) = self.p {
            config.p_override = Some(v);
        }
        if let Some(v) = self.gamma {
            config.gamma = v;
        }
        if let Some(v) = self.eta {
            config.eta = v;
        }
        if let Some(v) = self.steps {
            config.local_steps = v;
        }
        if let Some(v) = self.horizon {
            config.horizon = v;
        }
        if let Some(v) = self.dimension {
            config.dimension = v;
        }
        if let Some(v) = &self.surrogate {
            config.surrogate = v.clone();
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.trials {
            config.trials = v;
        }
        if let Some(v) = self.force_mu_one {
            config.force_mu_one = v;
        }
        if let Some(v) = self.tail_window {
            config.tail_window = Some(v);
        }
        if let Some(v) = &self.x_c0 {
            config.x_c0 = v.clone();
        }
        if let Some(v) = &self.x_a0 {
            config.x_a0 = v.clone();
        }
        if let Some(v) = self.curvature_min {
            config.objective.curvature_min = v;
        }
        if let Some(v) = self.curvature_max {
            config.objective.curvature_max = v;
        }
        if let Some(v) = self.minimizer_spread {
            config.objective.minimizer_spread = v;
        }
        if let Some(v) = self.shared_curvature {
            config.objective.shared_curvature = v;
        }
    }
}

fn parse_float_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|field| parse_field::<f64>(key, field.trim()))
        .collect()
}

/// Loads a full surrogate matrix: one row per line, comma-separated.
fn load_matrix_file(key: &str, path: &str) -> Result<SurrogateSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("config key `{key}`: reading {path}"))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim().to_string())
        .filter(|l| !l.is_empty())
        .map(|l| parse_float_list(key, &l))
        .collect::<Result<_>>()?;
    Ok(SurrogateSpec::Full(rows))
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| anyhow::anyhow!("config key `{key}`: cannot parse `{value}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => bail!("config key `{key}`: expected a boolean, got `{other}`"),
    }
}

/// Parses a `key = value` config file (one pair per line, `#` comments).
pub fn parse_config_file(path: &Path) -> Result<Overrides> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let mut out = Overrides::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(
                "{}:{}: expected `key = value`, got `{line}`",
                path.display(),
                lineno + 1
            );
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "protocol" => out.protocol = Some(parse_field(key, value)?),
            "mode" => out.mode = Some(parse_field(key, value)?),
            "N" | "n_total" => out.n_total = Some(parse_field(key, value)?),
            "n" | "n_sampled" => out.n_sampled = Some(parse_field(key, value)?),
            "p" => out.p = Some(parse_field(key, value)?),
            "gamma" => out.gamma = Some(parse_field(key, value)?),
            "eta" => out.eta = Some(parse_field(key, value)?),
            "steps" => out.steps = Some(parse_field(key, value)?),
            "horizon" => out.horizon = Some(parse_field(key, value)?),
            "d" | "dimension" => out.dimension = Some(parse_field(key, value)?),
            "m_scalar" | "M_scalar" => {
                out.surrogate = Some(SurrogateSpec::Scalar(parse_field(key, value)?))
            }
            "m_diagonal" | "M_diagonal" => {
                out.surrogate = Some(SurrogateSpec::Diagonal(parse_float_list(key, value)?))
            }
            "m_file" | "M_file" => out.surrogate = Some(load_matrix_file(key, value)?),
            "seed" => out.seed = Some(parse_field(key, value)?),
            "trials" => out.trials = Some(parse_field(key, value)?),
            "force_mu_one" => out.force_mu_one = Some(parse_bool(key, value)?),
            "tail_window" => out.tail_window = Some(parse_field(key, value)?),
            "x_c0" => out.x_c0 = Some(InitSpec::Constant(parse_field(key, value)?)),
            "x_a0" => out.x_a0 = Some(InitSpec::Constant(parse_field(key, value)?)),
            "x_c0_vec" => out.x_c0 = Some(InitSpec::Vector(parse_float_list(key, value)?)),
            "x_a0_vec" => out.x_a0 = Some(InitSpec::Vector(parse_float_list(key, value)?)),
            "curvature_min" => out.curvature_min = Some(parse_field(key, value)?),
            "curvature_max" => out.curvature_max = Some(parse_field(key, value)?),
            "minimizer_spread" => out.minimizer_spread = Some(parse_field(key, value)?),
            "shared_curvature" => out.shared_curvature = Some(parse_bool(key, value)?),
            other => bail!(
                "{}:{}: unknown config key `{other}`",
                path.display(),
                lineno + 1
            ),
        }
    }
    Ok(out)
}
