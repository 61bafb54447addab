//! Experiment configuration: a line-oriented `section.key = value` format
//! with defaults that reproduce the reference experiment (20x20 mesh,
//! V_bi = 0.6, U = 2, Matern sigma^2 = 0.01 / nu = 1 / ell = 0.7, pCN with
//! beta = 0.2 and 1e5 samples, 1% observation noise). Unknown keys are
//! errors: a typo must not silently change a long run.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::DeviceParams;
use crate::mcmc::{ChainConfig, NoiseModel, SamplerKind};
use crate::prior::MaternParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// m0 = true potential + perturb_scale * seeded prior draw.
    PerturbTruth,
    /// m0 = equilibrium potential of a constant doping guess.
    PoissonGuess,
}

impl std::str::FromStr for MeanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perturb_truth" => Ok(MeanMode::PerturbTruth),
            "poisson_guess" => Ok(MeanMode::PoissonGuess),
            other => Err(Error::Config(format!(
                "unknown mean mode '{other}' (expected perturb_truth or poisson_guess)"
            ))),
        }
    }
}

impl std::fmt::Display for MeanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MeanMode::PerturbTruth => write!(f, "perturb_truth"),
            MeanMode::PoissonGuess => write!(f, "poisson_guess"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mesh: MeshConfig,
    pub device: DeviceConfig,
    pub truth: TruthConfig,
    pub prior: PriorConfig,
    pub noise: NoiseConfig,
    pub sampler: SamplerConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub lambda: f64,
    pub delta: f64,
    pub mu_n: f64,
    pub v_bi: f64,
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthConfig {
    /// Doping level on the n-side (y > 0).
    pub c_n: f64,
    /// Doping magnitude on the p-side; the profile there is -c_p.
    pub c_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub sigma2: f64,
    pub nu: f64,
    pub ell: f64,
    /// Number of KL modes; 0 means every mode of the mesh.
    pub n_kl: usize,
    pub mean_mode: MeanMode,
    pub perturb_scale: f64,
    pub mean_seed: u64,
    /// Constant doping guess used by the poisson_guess mean mode.
    pub guess_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_n2: f64,
    pub data_seed: u64,
    /// Synthetic data is generated on a mesh refined by this factor to keep
    /// the inverse crime at bay; 1 reuses the inversion mesh.
    pub data_mesh_refine: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub beta: f64,
    pub n_total: usize,
    /// Burn-in length; unset means 20% of n_total.
    pub n_burn: Option<usize>,
    pub thin: usize,
    pub chain_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub directory: String,
    pub trace_nodes: Vec<usize>,
    pub store_full_chain: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mesh: MeshConfig { nx: 20, ny: 20 },
            device: DeviceConfig {
                lambda: 1.0,
                delta: 1.0,
                mu_n: 1.0,
                v_bi: 0.6,
                u: 2.0,
            },
            truth: TruthConfig { c_n: 1.0, c_p: 2.0 },
            prior: PriorConfig {
                sigma2: 0.01,
                nu: 1.0,
                ell: 0.7,
                n_kl: 0,
                mean_mode: MeanMode::PerturbTruth,
                perturb_scale: 0.02,
                mean_seed: 101,
                guess_c: 0.0,
            },
            noise: NoiseConfig {
                sigma_n2: 0.01,
                data_seed: 202,
                data_mesh_refine: 1,
            },
            sampler: SamplerConfig {
                kind: SamplerKind::Pcn,
                beta: 0.2,
                n_total: 100_000,
                n_burn: None,
                thin: 10,
                chain_seed: 303,
            },
            output: OutputConfig {
                directory: "out".into(),
                trace_nodes: vec![1, 200, 400],
                store_full_chain: false,
            },
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| {
        Error::Config(format!("bad value '{value}' for {key}: {e}"))
    })
}

fn parse_node_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let trimmed = value.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|part| parse_value(key, part))
        .collect()
}

impl ExperimentConfig {
    /// Applies one dotted-key override. Unknown keys are configuration
    /// errors.
    pub fn apply_set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mesh.nx" => self.mesh.nx = parse_value(key, value)?,
            "mesh.ny" => self.mesh.ny = parse_value(key, value)?,
            "device.lambda" => self.device.lambda = parse_value(key, value)?,
            "device.delta" => self.device.delta = parse_value(key, value)?,
            "device.mu_n" => self.device.mu_n = parse_value(key, value)?,
            "device.v_bi" => self.device.v_bi = parse_value(key, value)?,
            "device.u" => self.device.u = parse_value(key, value)?,
            "truth.c_n" => self.truth.c_n = parse_value(key, value)?,
            "truth.c_p" => self.truth.c_p = parse_value(key, value)?,
            "prior.sigma2" => self.prior.sigma2 = parse_value(key, value)?,
            "prior.nu" => self.prior.nu = parse_value(key, value)?,
            "prior.ell" => self.prior.ell = parse_value(key, value)?,
            "prior.n_kl" => self.prior.n_kl = parse_value(key, value)?,
            "prior.mean_mode" => self.prior.mean_mode = parse_value(key, value)?,
            "prior.perturb_scale" => self.prior.perturb_scale = parse_value(key, value)?,
            "prior.mean_seed" => self.prior.mean_seed = parse_value(key, value)?,
            "prior.guess_c" => self.prior.guess_c = parse_value(key, value)?,
            "noise.sigma_n2" => self.noise.sigma_n2 = parse_value(key, value)?,
            "noise.data_seed" => self.noise.data_seed = parse_value(key, value)?,
            "noise.data_mesh_refine" => {
                self.noise.data_mesh_refine = parse_value(key, value)?
            }
            "sampler.kind" => self.sampler.kind = parse_value(key, value)?,
            "sampler.beta" => self.sampler.beta = parse_value(key, value)?,
            "sampler.n_total" => self.sampler.n_total = parse_value(key, value)?,
            "sampler.n_burn" => self.sampler.n_burn = Some(parse_value(key, value)?),
            "sampler.thin" => self.sampler.thin = parse_value(key, value)?,
            "sampler.chain_seed" => self.sampler.chain_seed = parse_value(key, value)?,
            "output.directory" => self.output.directory = value.trim().to_string(),
            "output.trace_nodes" => self.output.trace_nodes = parse_node_list(key, value)?,
            "output.store_full_chain" => {
                self.output.store_full_chain = parse_value(key, value)?
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses the line-oriented format. `#` starts a full-line comment;
    /// blank lines are skipped; a repeated key keeps its last value.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            config.apply_set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Emits every key in canonical order; parse(to_config_string()) is the
    /// identity. An unset burn-in stays unset.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mesh.nx = {}", self.mesh.nx);
        let _ = writeln!(s, "mesh.ny = {}", self.mesh.ny);
        let _ = writeln!(s, "device.lambda = {}", self.device.lambda);
        let _ = writeln!(s, "device.delta = {}", self.device.delta);
        let _ = writeln!(s, "device.mu_n = {}", self.device.mu_n);
        let _ = writeln!(s, "device.v_bi = {}", self.device.v_bi);
        let _ = writeln!(s, "device.u = {}", self.device.u);
        let _ = writeln!(s, "truth.c_n = {}", self.truth.c_n);
        let _ = writeln!(s, "truth.c_p = {}", self.truth.c_p);
        let _ = writeln!(s, "prior.sigma2 = {}", self.prior.sigma2);
        let _ = writeln!(s, "prior.nu = {}", self.prior.nu);
        let _ = writeln!(s, "prior.ell = {}", self.prior.ell);
        let _ = writeln!(s, "prior.n_kl = {}", self.prior.n_kl);
        let _ = writeln!(s, "prior.mean_mode = {}", self.prior.mean_mode);
        let _ = writeln!(s, "prior.perturb_scale = {}", self.prior.perturb_scale);
        let _ = writeln!(s, "prior.mean_seed = {}", self.prior.mean_seed);
        let _ = writeln!(s, "prior.guess_c = {}", self.prior.guess_c);
        let _ = writeln!(s, "noise.sigma_n2 = {}", self.noise.sigma_n2);
        let _ = writeln!(s, "noise.data_seed = {}", self.noise.data_seed);
        let _ = writeln!(s, "noise.data_mesh_refine = {}", self.noise.data_mesh_refine);
        let _ = writeln!(s, "sampler.kind = {}", self.sampler.kind);
        let _ = writeln!(s, "sampler.beta = {}", self.sampler.beta);
        let _ = writeln!(s, "sampler.n_total = {}", self.sampler.n_total);
        if let Some(b) = self.sampler.n_burn {
            let _ = writeln!(s, "sampler.n_burn = {b}");
        }
        let _ = writeln!(s, "sampler.thin = {}", self.sampler.thin);
        let _ = writeln!(s, "sampler.chain_seed = {}", self.sampler.chain_seed);
        let _ = writeln!(s, "output.directory = {}", self.output.directory);
        let trace: Vec<String> = self.output.trace_nodes.iter().map(|n| n.to_string()).collect();
        let _ = writeln!(s, "output.trace_nodes = {}", trace.join(","));
        let _ = writeln!(s, "output.store_full_chain = {}", self.output.store_full_chain);
        s
    }

    pub fn num_nodes(&self) -> usize {
        (self.mesh.nx + 1) * (self.mesh.ny + 1)
    }

    /// n_kl with the 0-means-all sentinel resolved against the mesh.
    pub fn resolved_n_kl(&self) -> usize {
        if self.prior.n_kl == 0 {
            self.num_nodes()
        } else {
            self.prior.n_kl
        }
    }

    pub fn resolved_n_burn(&self) -> usize {
        self.sampler.n_burn.unwrap_or(self.sampler.n_total / 5)
    }

    pub fn device_params(&self) -> DeviceParams {
        DeviceParams {
            lambda: self.device.lambda,
            delta: self.device.delta,
            mu_n: self.device.mu_n,
            v_bi: self.device.v_bi,
            u: self.device.u,
        }
    }

    pub fn matern_params(&self) -> MaternParams {
        MaternParams {
            sigma2: self.prior.sigma2,
            nu: self.prior.nu,
            ell: self.prior.ell,
        }
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel {
            sigma_n2: self.noise.sigma_n2,
        }
    }

    pub fn chain_config(&self) -> ChainConfig {
        ChainConfig {
            sampler: self.sampler.kind,
            beta: self.sampler.beta,
            n_total: self.sampler.n_total,
            n_burn: self.resolved_n_burn(),
            thin: self.sampler.thin,
            store_full_states: self.output.store_full_chain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mesh.nx == 0 || self.mesh.ny == 0 {
            return Err(Error::Config("mesh.nx and mesh.ny must be positive".into()));
        }
        self.device_params().validate()?;
        self.matern_params().validate()?;
        if self.prior.n_kl > self.num_nodes() {
            return Err(Error::Config(format!(
                "prior.n_kl = {} exceeds the {} mesh nodes",
                self.prior.n_kl,
                self.num_nodes()
            )));
        }
        if !self.prior.perturb_scale.is_finite() || !self.prior.guess_c.is_finite() {
            return Err(Error::Config("prior scales must be finite".into()));
        }
        if !self.truth.c_n.is_finite() || !self.truth.c_p.is_finite() {
            return Err(Error::Config("truth levels must be finite".into()));
        }
        self.noise_model().validate()?;
        if self.noise.data_mesh_refine == 0 {
            return Err(Error::Config("noise.data_mesh_refine must be at least 1".into()));
        }
        self.chain_config().validate().map_err(|e| {
            Error::Config(format!("sampler section invalid: {e}"))
        })?;
        if self.output.directory.is_empty() {
            return Err(Error::Config("output.directory must not be empty".into()));
        }
        for &node in &self.output.trace_nodes {
            if node >= self.num_nodes() {
                return Err(Error::Config(format!(
                    "trace node {node} out of range for {} nodes",
                    self.num_nodes()
                )));
            }
        }
        Ok(())
    }
}

/// One sweep case: dotted-key overrides applied on top of a base config.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCase {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

/// Expands a matrix file (`section.key = v1, v2, ...` per line) into the
/// cartesian product of its values, first line outermost. List-valued keys
/// cannot be swept because the commas are taken as separators.
pub fn expand_sweep(matrix: &str) -> Result<Vec<SweepCase>> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for (lineno, raw) in matrix.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, values) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "matrix line {}: expected 'key = v1, v2, ...', got '{line}'",
                lineno + 1
            ))
        })?;
        let key = key.trim().to_string();
        if key == "output.trace_nodes" {
            return Err(Error::Config(
                "output.trace_nodes cannot be swept (its value is itself a list)".into(),
            ));
        }
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .collect();
        if values.is_empty() || values.iter().any(|v| v.is_empty()) {
            return Err(Error::Config(format!(
                "matrix key '{key}' has an empty value"
            )));
        }
        axes.push((key, values));
    }
    if axes.is_empty() {
        return Err(Error::Config("sweep matrix defines no axes".into()));
    }

    let mut cases = vec![SweepCase {
        label: String::new(),
        overrides: Vec::new(),
    }];
    for (key, values) in &axes {
        let short = key.rsplit('.').next().unwrap_or(key);
        let mut next = Vec::with_capacity(cases.len() * values.len());
        for case in &cases {
            for value in values {
                let mut c = case.clone();
                let clean: String = value
                    .chars()
                    .map(|ch| {
                        if ch.is_ascii_alphanumeric() || ".=-".contains(ch) {
                            ch
                        } else {
                            '-'
                        }
                    })
                    .collect();
                if !c.label.is_empty() {
                    c.label.push('_');
                }
                let _ = write!(c.label, "{short}={clean}");
                c.overrides.push((key.clone(), value.clone()));
                next.push(c);
            }
        }
        cases = next;
    }
    Ok(cases)
}
