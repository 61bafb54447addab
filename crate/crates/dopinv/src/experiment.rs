//! The experiment driver: truth generation, synthetic data, prior assembly,
//! sampling, reconstruction, and every file the pipelines emit. The four
//! stages (forward, synth, invert, reconstruct) can run independently; the
//! full pipeline chains them in memory and adds a report.
//!
//! Every stochastic input is seed-injected, so identical configs give
//! byte-identical numeric files. The report and manifest are exempt: the
//! report carries wall time, and the manifest hashes the report.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MeanMode};
use crate::error::{Error, Result};
use crate::field::{FieldRole, ScalarField};
use crate::forward::{forward_map, solve_continuity, solve_equilibrium_poisson, Observation};
use crate::io;
use crate::mcmc::{apply_noise, chain_summary, run_chain, Chain};
use crate::mesh::Mesh;
use crate::prior::{
    build_covariance, build_prior_mean, build_prior_mean_poisson_guess, kl_decompose, KlBasis,
    MaternPrior,
};
use crate::reconstruct::{doping_from_potential, field_mse, junction_band_share};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Output file names, fixed so figure scripts can rely on them.
pub mod files {
    pub const MESH_STEM: &str = "mesh";
    pub const C_TRUE: &str = "c_true.csv";
    pub const V_E_TRUE: &str = "v_e_true.csv";
    pub const U_HAT_TRUE: &str = "u_hat_true.csv";
    pub const C_TRUE_GRID: &str = "c_true_grid.csv";
    pub const V_E_TRUE_GRID: &str = "v_e_true_grid.csv";
    pub const U_HAT_TRUE_GRID: &str = "u_hat_true_grid.csv";
    pub const OBSERVATIONS: &str = "y.csv";
    pub const KL_CACHE: &str = "kl_cache.bin";
    pub const PRIOR_MEAN: &str = "prior_mean.csv";
    pub const POSTERIOR_MEAN: &str = "posterior_mean.csv";
    pub const POSTERIOR_VAR: &str = "posterior_var.csv";
    pub const POSTERIOR_MEAN_GRID: &str = "posterior_mean_grid.csv";
    pub const FULL_CHAIN: &str = "full_chain.csv";
    pub const CHAIN_SUMMARY: &str = "chain_summary.json";
    pub const C_REC: &str = "c_rec.csv";
    pub const C_REC_GRID: &str = "c_rec_grid.csv";
    pub const DOPING_TABLE: &str = "doping.csv";
    pub const METRICS: &str = "metrics.json";
    pub const REPORT: &str = "report.json";

    pub fn trace_node(node: usize) -> String {
        format!("trace_node_{node}.csv")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Forward,
    Synth,
    Invert,
    Reconstruct,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Forward => "forward",
            Stage::Synth => "synth",
            Stage::Invert => "invert",
            Stage::Reconstruct => "reconstruct",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Stage> {
        match s {
            "forward" => Ok(Stage::Forward),
            "synth" => Ok(Stage::Synth),
            "invert" => Ok(Stage::Invert),
            "reconstruct" => Ok(Stage::Reconstruct),
            other => Err(Error::Config(format!(
                "unknown stage '{other}' (expected forward, synth, invert, or reconstruct)"
            ))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub mean_seed: u64,
    pub data_seed: u64,
    pub chain_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mse_doping: f64,
    pub mse_potential: f64,
    pub acceptance_rate: f64,
    pub wall_time_seconds: f64,
    /// The fully resolved configuration in its own file format; feeding it
    /// back reproduces the run.
    pub config_echo: String,
    pub seeds: SeedRecord,
}

/// Reconstruction quality record written by the reconstruct stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse_doping: f64,
    pub mse_potential: f64,
    /// Share of squared doping error within one grid row of the junction.
    pub junction_band_share: f64,
}

#[derive(Debug, Clone, Serialize)]
struct NodeSummaryFile {
    node: usize,
    mean: f64,
    variance: f64,
    hist_lo: f64,
    hist_hi: f64,
    hist_counts: Vec<u64>,
    trace_file: String,
}

#[derive(Debug, Clone, Serialize)]
struct ChainSummaryFile {
    acceptance_rate: f64,
    n_total: usize,
    n_burn: usize,
    thin: usize,
    beta: f64,
    posterior_mean_file: String,
    posterior_var_file: String,
    failed_solves: usize,
    nodes: Vec<NodeSummaryFile>,
}

fn tag<T>(stage: Stage, result: Result<T>) -> Result<T> {
    result.map_err(|e| e.in_stage(stage.name()))
}

struct TruthFields {
    c_true: ScalarField,
    v_e_true: ScalarField,
    u_hat_true: ScalarField,
}

fn compute_truth(config: &ExperimentConfig, mesh: &Mesh) -> Result<TruthFields> {
    let c_true = ScalarField::piecewise_doping(mesh, config.truth.c_n, config.truth.c_p)?;
    let device = config.device_params();
    let v_e_true = solve_equilibrium_poisson(mesh, &c_true, &device)?.potential;
    let u_hat_true = solve_continuity(mesh, &v_e_true, &device)?;
    Ok(TruthFields {
        c_true,
        v_e_true,
        u_hat_true,
    })
}

fn write_truth(dir: &Path, mesh: &Mesh, truth: &TruthFields) -> Result<()> {
    io::write_mesh_csv(dir, files::MESH_STEM, mesh)?;
    io::write_field_csv(&dir.join(files::C_TRUE), mesh, &truth.c_true)?;
    io::write_field_csv(&dir.join(files::V_E_TRUE), mesh, &truth.v_e_true)?;
    io::write_field_csv(&dir.join(files::U_HAT_TRUE), mesh, &truth.u_hat_true)?;
    io::write_grid_csv(&dir.join(files::C_TRUE_GRID), mesh, &truth.c_true)?;
    io::write_grid_csv(&dir.join(files::V_E_TRUE_GRID), mesh, &truth.v_e_true)?;
    io::write_grid_csv(&dir.join(files::U_HAT_TRUE_GRID), mesh, &truth.u_hat_true)?;
    Ok(())
}

/// Synthetic data, generated on a `data_mesh_refine`-times finer mesh to
/// avoid committing the inverse crime, then recorded at the coarse-mesh
/// contact nodes.
fn synthesize(config: &ExperimentConfig, mesh: &Mesh) -> Result<Observation> {
    let device = config.device_params();
    let refine = config.noise.data_mesh_refine;
    let coarse_points = mesh.gamma_n_nodes();
    let clean = if refine == 1 {
        let c_true = ScalarField::piecewise_doping(mesh, config.truth.c_n, config.truth.c_p)?;
        forward_map(mesh, &c_true, &device, &coarse_points)?
    } else {
        let fine = Mesh::build(config.mesh.nx * refine, config.mesh.ny * refine)?;
        let c_fine = ScalarField::piecewise_doping(&fine, config.truth.c_n, config.truth.c_p)?;
        let fine_points: Vec<usize> = (0..=config.mesh.nx)
            .map(|ix| fine.node_index(ix * refine, config.mesh.ny * refine))
            .collect();
        forward_map(&fine, &c_fine, &device, &fine_points)?
    };
    let mut rng = ChaCha12Rng::seed_from_u64(config.noise.data_seed);
    let values = apply_noise(&clean, config.noise.sigma_n2, &mut rng);
    Ok(Observation {
        values,
        points: coarse_points,
        sigma_n2: config.noise.sigma_n2,
        noiseless: Some(clean),
    })
}

/// Eigendecomposition of the prior covariance, read from the run cache when
/// the key matches, recomputed and cached otherwise.
fn load_or_build_basis(config: &ExperimentConfig, mesh: &Mesh, dir: &Path) -> Result<KlBasis> {
    let n_kl = config.resolved_n_kl();
    let key = io::KlCacheKey {
        mesh_hash: mesh.hash().to_string(),
        sigma2: config.prior.sigma2,
        nu: config.prior.nu,
        ell: config.prior.ell,
        n_kl,
    };
    let cache_path = dir.join(files::KL_CACHE);
    if let Some(basis) = io::read_kl_cache(&cache_path, &key) {
        log::info!("kl cache hit: {}", cache_path.display());
        return Ok(basis);
    }
    let cov = build_covariance(mesh, &config.matern_params())?;
    let basis = kl_decompose(&cov, n_kl)?;
    io::write_kl_cache(&cache_path, &key, &basis)?;
    Ok(basis)
}

fn build_prior(
    config: &ExperimentConfig,
    mesh: &Mesh,
    basis: KlBasis,
) -> Result<MaternPrior> {
    let device = config.device_params();
    let mean = match config.prior.mean_mode {
        MeanMode::PerturbTruth => {
            let c_true =
                ScalarField::piecewise_doping(mesh, config.truth.c_n, config.truth.c_p)?;
            // The mean offset is a draw from the full prior, not from the
            // truncated sampling basis, so truncation sweeps keep the same
            // mean field.
            let full;
            let mean_basis = if basis.n_kl() == mesh.num_nodes() {
                &basis
            } else {
                let cov = build_covariance(mesh, &config.matern_params())?;
                full = kl_decompose(&cov, mesh.num_nodes())?;
                &full
            };
            build_prior_mean(
                mesh,
                &c_true,
                &device,
                mean_basis,
                config.prior.perturb_scale,
                config.prior.mean_seed,
            )?
        }
        MeanMode::PoissonGuess => {
            build_prior_mean_poisson_guess(mesh, config.prior.guess_c, &device)?
        }
    };
    MaternPrior::new(mean, basis)
}

fn run_sampler(
    config: &ExperimentConfig,
    mesh: &Mesh,
    prior: &MaternPrior,
    y: &Observation,
) -> Result<Chain> {
    let device = config.device_params();
    let points = y.points.clone();
    run_chain(
        &config.chain_config(),
        y,
        prior,
        |v| forward_map(mesh, v, &device, &points),
        config.sampler.chain_seed,
    )
}

fn write_chain_outputs(
    dir: &Path,
    mesh: &Mesh,
    config: &ExperimentConfig,
    prior: &MaternPrior,
    chain: &Chain,
) -> Result<()> {
    io::write_field_csv(&dir.join(files::PRIOR_MEAN), mesh, &prior.mean)?;
    io::write_field_csv(&dir.join(files::POSTERIOR_MEAN), mesh, &chain.running_mean)?;
    let var = ScalarField::new(mesh, chain.posterior_variance(), FieldRole::Potential)?;
    io::write_field_csv(&dir.join(files::POSTERIOR_VAR), mesh, &var)?;
    io::write_grid_csv(&dir.join(files::POSTERIOR_MEAN_GRID), mesh, &chain.running_mean)?;

    let summary = chain_summary(chain, &config.output.trace_nodes)?;
    let mut nodes = Vec::with_capacity(summary.nodes.len());
    for node in &summary.nodes {
        let trace_file = files::trace_node(node.node);
        io::write_trace_csv(&dir.join(&trace_file), &node.iters, &node.values)?;
        nodes.push(NodeSummaryFile {
            node: node.node,
            mean: node.mean,
            variance: node.variance,
            hist_lo: node.hist_lo,
            hist_hi: node.hist_hi,
            hist_counts: node.hist_counts.clone(),
            trace_file,
        });
    }
    io::write_json(
        &dir.join(files::CHAIN_SUMMARY),
        &ChainSummaryFile {
            acceptance_rate: summary.acceptance_rate,
            n_total: summary.n_total,
            n_burn: summary.n_burn,
            thin: summary.thin,
            beta: summary.beta,
            posterior_mean_file: files::POSTERIOR_MEAN.into(),
            posterior_var_file: files::POSTERIOR_VAR.into(),
            failed_solves: summary.failed_solves,
            nodes,
        },
    )?;

    if let Some(full) = &chain.full_states {
        use std::io::Write;
        let path = dir.join(files::FULL_CHAIN);
        let file = fs::File::create(&path)?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "# mesh_hash={}", mesh.hash())?;
        writeln!(w, "# nodes={}", mesh.num_nodes())?;
        for (iter, state) in full.iter().enumerate() {
            write!(w, "{}", iter + 1)?;
            for v in state {
                write!(w, ",{}", io::fmt_f64(*v))?;
            }
            writeln!(w)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn reconstruct_outputs(
    dir: &Path,
    mesh: &Mesh,
    config: &ExperimentConfig,
    posterior_mean: &ScalarField,
    truth: &TruthFields,
) -> Result<Metrics> {
    let device = config.device_params();
    let c_rec = doping_from_potential(mesh, posterior_mean, &device)?;
    io::write_field_csv(&dir.join(files::C_REC), mesh, &c_rec)?;
    io::write_grid_csv(&dir.join(files::C_REC_GRID), mesh, &c_rec)?;
    io::write_doping_csv(&dir.join(files::DOPING_TABLE), mesh, &c_rec, &truth.c_true)?;
    let metrics = Metrics {
        mse_doping: field_mse(&c_rec, &truth.c_true)?,
        mse_potential: field_mse(posterior_mean, &truth.v_e_true)?,
        junction_band_share: junction_band_share(&c_rec, &truth.c_true, mesh, 1)?,
    };
    io::write_json(&dir.join(files::METRICS), &metrics)?;
    Ok(metrics)
}

/// The configuration with every default made explicit, echoed in config-file
/// form.
fn resolved_echo(config: &ExperimentConfig) -> String {
    let mut resolved = config.clone();
    resolved.sampler.n_burn = Some(config.resolved_n_burn());
    resolved.prior.n_kl = config.resolved_n_kl();
    resolved.to_config_string()
}

fn output_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&config.output.directory);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Truth, data, chain, reconstruction, report, manifest. Stage failures
/// abort with a stage-tagged error; files already written stay on disk.
pub fn run_full_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    config.validate()?;
    let dir = output_dir(config)?;
    let mesh = Mesh::build(config.mesh.nx, config.mesh.ny)?;

    let truth = tag(Stage::Forward, compute_truth(config, &mesh))?;
    tag(Stage::Forward, write_truth(&dir, &mesh, &truth))?;

    let y = tag(Stage::Synth, synthesize(config, &mesh))?;
    tag(
        Stage::Synth,
        io::write_observation_csv(&dir.join(files::OBSERVATIONS), &mesh, &y),
    )?;

    let basis = tag(Stage::Invert, load_or_build_basis(config, &mesh, &dir))?;
    let prior = tag(Stage::Invert, build_prior(config, &mesh, basis))?;
    let chain = tag(Stage::Invert, run_sampler(config, &mesh, &prior, &y))?;
    tag(
        Stage::Invert,
        write_chain_outputs(&dir, &mesh, config, &prior, &chain),
    )?;

    let metrics = tag(
        Stage::Reconstruct,
        reconstruct_outputs(&dir, &mesh, config, &chain.running_mean, &truth),
    )?;

    let report = ExperimentReport {
        mse_doping: metrics.mse_doping,
        mse_potential: metrics.mse_potential,
        acceptance_rate: chain.acceptance_rate(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        config_echo: resolved_echo(config),
        seeds: SeedRecord {
            mean_seed: config.prior.mean_seed,
            data_seed: config.noise.data_seed,
            chain_seed: config.sampler.chain_seed,
        },
    };
    io::write_json(&dir.join(files::REPORT), &report)?;
    io::write_manifest(&dir)?;
    log::info!(
        "experiment done: mse_doping {:.4}, acceptance {:.3}, {:.1}s",
        report.mse_doping,
        report.acceptance_rate,
        report.wall_time_seconds
    );
    Ok(report)
}

/// Runs one pipeline stage against the output directory. Stage inputs:
/// forward and synth need only the config; invert reads `y.csv`;
/// reconstruct reads `posterior_mean.csv`. Every stage refreshes the
/// manifest.
pub fn run_stage(stage: Stage, config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    let dir = output_dir(config)?;
    let mesh = Mesh::build(config.mesh.nx, config.mesh.ny)?;

    let work = || -> Result<()> {
        match stage {
            Stage::Forward => {
                let truth = compute_truth(config, &mesh)?;
                write_truth(&dir, &mesh, &truth)
            }
            Stage::Synth => {
                let y = synthesize(config, &mesh)?;
                io::write_observation_csv(&dir.join(files::OBSERVATIONS), &mesh, &y)
            }
            Stage::Invert => {
                let y = io::read_observation_csv(&dir.join(files::OBSERVATIONS), &mesh)?;
                let basis = load_or_build_basis(config, &mesh, &dir)?;
                let prior = build_prior(config, &mesh, basis)?;
                let chain = run_sampler(config, &mesh, &prior, &y)?;
                write_chain_outputs(&dir, &mesh, config, &prior, &chain)
            }
            Stage::Reconstruct => {
                let posterior_mean = io::read_field_csv(
                    &dir.join(files::POSTERIOR_MEAN),
                    &mesh,
                    FieldRole::Potential,
                )?;
                let truth = compute_truth(config, &mesh)?;
                reconstruct_outputs(&dir, &mesh, config, &posterior_mean, &truth)?;
                Ok(())
            }
        }
    };
    tag(stage, work())?;
    io::write_manifest(&dir)?;
    Ok(())
}
