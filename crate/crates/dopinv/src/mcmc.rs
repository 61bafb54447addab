//! Observation synthesis, Gaussian likelihood, preconditioned Crank-Nicolson
//! and random-walk Metropolis samplers, and chain bookkeeping.
//!
//! The pCN proposal Vt = m0 + sqrt(1-beta^2)(V - m0) + beta xi with xi drawn
//! from the centered prior leaves the prior invariant, so the acceptance
//! ratio depends on the likelihood alone. The random-walk baseline Vt = V +
//! beta xi needs the prior density ratio as well, evaluated in KL
//! coordinates. All randomness flows through a single seeded stream per
//! chain: n_kl proposal normals first, one uniform second, every iteration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::field::{FieldRole, ScalarField};
use crate::forward::{forward_map, DeviceParams, Observation};
use crate::mesh::Mesh;
use crate::prior::{standard_normals, MaternPrior};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma_n2: f64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_n2 > 0.0) {
            return Err(Error::Domain(format!(
                "noise variance must be positive, got {}",
                self.sigma_n2
            )));
        }
        Ok(())
    }
}

/// Adds independent N(0, sigma_n2) noise to each entry.
pub fn apply_noise(clean: &[f64], sigma_n2: f64, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let sigma = sigma_n2.sqrt();
    clean
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + sigma * z
        })
        .collect()
}

/// Runs the forward map on the true doping profile and perturbs the output
/// with seeded Gaussian noise. The noiseless vector rides along for
/// diagnostics.
pub fn synthesize_observations(
    mesh: &Mesh,
    c_true: &ScalarField,
    params: &DeviceParams,
    points: &[usize],
    noise: &NoiseModel,
    seed: u64,
) -> Result<Observation> {
    noise.validate()?;
    let clean = forward_map(mesh, c_true, params, points)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let values = apply_noise(&clean, noise.sigma_n2, &mut rng);
    Ok(Observation {
        values,
        points: points.to_vec(),
        sigma_n2: noise.sigma_n2,
        noiseless: Some(clean),
    })
}

/// Phi(V) = ||y - g||^2 / (2 sigma_n2) for diagonal noise covariance.
pub fn neg_log_likelihood(y: &Observation, g: &[f64]) -> Result<f64> {
    if g.len() != y.values.len() {
        return Err(Error::Domain(format!(
            "prediction has {} entries for {} observations",
            g.len(),
            y.values.len()
        )));
    }
    let ss: f64 = y
        .values
        .iter()
        .zip(g)
        .map(|(yi, gi)| (yi - gi) * (yi - gi))
        .sum();
    Ok(ss / (2.0 * y.sigma_n2))
}

/// Vt = m0 + sqrt(1 - beta^2)(V - m0) + beta * (prior fluctuation from xi).
pub fn pcn_propose(
    current: &ScalarField,
    prior: &MaternPrior,
    beta: f64,
    xi: &[f64],
) -> Result<ScalarField> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Domain(format!("pcn beta must be in [0, 1], got {beta}")));
    }
    let contraction = (1.0 - beta * beta).sqrt();
    let fluct = prior.basis.fluctuation(xi)?;
    let m0 = prior.mean.values();
    let values = current
        .values()
        .iter()
        .zip(m0)
        .zip(&fluct)
        .map(|((v, m), f)| m + contraction * (v - m) + beta * f)
        .collect();
    ScalarField::like(current, values, FieldRole::Potential)
}

/// Accept iff log u <= phi_current - phi_proposed. Log space only; safe for
/// likelihood magnitudes far beyond exp overflow.
pub fn pcn_accept(phi_current: f64, phi_proposed: f64, u: f64) -> bool {
    u.ln() <= phi_current - phi_proposed
}

/// Vt = V + beta * (prior fluctuation from xi).
pub fn rw_propose(
    current: &ScalarField,
    prior: &MaternPrior,
    beta: f64,
    xi: &[f64],
) -> Result<ScalarField> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Domain(format!("rw beta must be nonnegative, got {beta}")));
    }
    let fluct = prior.basis.fluctuation(xi)?;
    let values = current
        .values()
        .iter()
        .zip(&fluct)
        .map(|(v, f)| v + beta * f)
        .collect();
    ScalarField::like(current, values, FieldRole::Potential)
}

/// Random-walk Metropolis acceptance: the symmetric proposal leaves the
/// prior-density ratio in the acceptance probability.
pub fn rw_accept(
    phi_current: f64,
    phi_proposed: f64,
    log_prior_current: f64,
    log_prior_proposed: f64,
    u: f64,
) -> bool {
    u.ln() <= (phi_current - phi_proposed) + (log_prior_proposed - log_prior_current)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Pcn,
    Rw,
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplerKind::Pcn => write!(f, "pcn"),
            SamplerKind::Rw => write!(f, "rw"),
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcn" => Ok(SamplerKind::Pcn),
            "rw" => Ok(SamplerKind::Rw),
            other => Err(Error::Config(format!(
                "unknown sampler '{other}' (expected pcn or rw)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub sampler: SamplerKind,
    pub beta: f64,
    pub n_total: usize,
    /// Iterations discarded before averaging.
    pub n_burn: usize,
    /// Every thin-th post-burn-in state is stored.
    pub thin: usize,
    /// Keep every state of the whole run in memory. Costs
    /// n_total * num_nodes * 8 bytes; meant for short diagnostic runs.
    pub store_full_states: bool,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_total == 0 {
            return Err(Error::Config("n_total must be positive".into()));
        }
        if self.n_burn >= self.n_total {
            return Err(Error::Config(format!(
                "n_burn {} leaves no post-burn-in states out of {}",
                self.n_burn, self.n_total
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be positive".into()));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be nonnegative, got {}", self.beta)));
        }
        if self.sampler == SamplerKind::Pcn && self.beta > 1.0 {
            return Err(Error::Config(format!("pcn beta must be in [0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

/// Per-node mean and second central moment over a stream of states.
#[derive(Debug, Clone)]
struct Welford {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Welford {
        Welford {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, state: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for (i, &x) in state.iter().enumerate() {
            let d = x - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x - self.mean[i]);
        }
    }

}

#[derive(Debug, Clone)]
pub struct Chain {
    /// Thinned post-burn-in states.
    pub states: Vec<Vec<f64>>,
    /// Iteration index (1-based) of each stored state.
    pub state_iters: Vec<usize>,
    pub accept_log: Vec<bool>,
    /// Mean over every post-burn-in state, not just the stored ones.
    pub running_mean: ScalarField,
    /// Second central moment accumulator matching running_mean.
    pub running_m2: Vec<f64>,
    /// Number of states folded into running_mean.
    pub n_averaged: usize,
    pub beta: f64,
    pub n_total: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub accepted: usize,
    /// Proposals rejected because the forward solve failed.
    pub failed_solves: usize,
    /// Phi of the current state after each iteration.
    pub phi_log: Vec<f64>,
    /// Every state of the run, present only when requested.
    pub full_states: Option<Vec<Vec<f64>>>,
}

impl Chain {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.n_total as f64
    }

    /// Unbiased per-node posterior variance from the running accumulator.
    pub fn posterior_variance(&self) -> Vec<f64> {
        if self.n_averaged < 2 {
            return vec![0.0; self.running_m2.len()];
        }
        let denom = (self.n_averaged - 1) as f64;
        self.running_m2.iter().map(|m| m / denom).collect()
    }
}

/// Runs one Metropolis chain. The initial state is a prior draw; each
/// iteration consumes n_kl proposal normals and then one uniform. A failed
/// forward solve at a proposal counts as a rejection with telemetry rather
/// than aborting the run.
pub fn run_chain<G>(
    config: &ChainConfig,
    y: &Observation,
    prior: &MaternPrior,
    mut forward: G,
    seed: u64,
) -> Result<Chain>
where
    G: FnMut(&ScalarField) -> Result<Vec<f64>>,
{
    config.validate()?;
    y.validate()?;
    let n_kl = prior.n_kl();
    let dim = prior.mean.len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let xi0 = standard_normals(&mut rng, n_kl);
    let mut current = prior.sample_field(&xi0)?;
    // The random walk tracks its KL coefficients alongside the field so the
    // prior density never needs a projection.
    let mut coeffs: Vec<f64> = prior
        .basis
        .eigenvalues()
        .iter()
        .zip(&xi0)
        .map(|(l, x)| l.sqrt() * x)
        .collect();
    let g0 = forward(&current)
        .map_err(|e| e.in_stage("chain initial state"))?;
    let mut phi = neg_log_likelihood(y, &g0)?;
    let mut log_prior = prior.basis.log_density(&coeffs);

    let mut accept_log = Vec::with_capacity(config.n_total);
    let mut phi_log = Vec::with_capacity(config.n_total);
    let mut welford = Welford::new(dim);
    let n_stored = (config.n_total - config.n_burn).div_ceil(config.thin);
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(n_stored);
    let mut state_iters = Vec::with_capacity(n_stored);
    let mut full_states = config
        .store_full_states
        .then(|| Vec::with_capacity(config.n_total));
    let mut accepted = 0usize;
    let mut failed_solves = 0usize;

    for iter in 1..=config.n_total {
        let xi = standard_normals(&mut rng, n_kl);
        let u: f64 = rng.random();

        let proposal = match config.sampler {
            SamplerKind::Pcn => pcn_propose(&current, prior, config.beta, &xi)?,
            SamplerKind::Rw => rw_propose(&current, prior, config.beta, &xi)?,
        };

        match forward(&proposal) {
            Ok(g) => {
                let phi_prop = neg_log_likelihood(y, &g)?;
                let accept = match config.sampler {
                    SamplerKind::Pcn => pcn_accept(phi, phi_prop, u),
                    SamplerKind::Rw => {
                        let coeffs_prop: Vec<f64> = coeffs
                            .iter()
                            .zip(prior.basis.eigenvalues())
                            .zip(&xi)
                            .map(|((c, l), x)| c + config.beta * l.sqrt() * x)
                            .collect();
                        let lp_prop = prior.basis.log_density(&coeffs_prop);
                        let ok = rw_accept(phi, phi_prop, log_prior, lp_prop, u);
                        if ok {
                            coeffs = coeffs_prop;
                            log_prior = lp_prop;
                        }
                        ok
                    }
                };
                if accept {
                    current = proposal;
                    phi = phi_prop;
                    accepted += 1;
                }
                accept_log.push(accept);
            }
            Err(e) => {
                log::warn!("forward solve failed at iteration {iter}, rejecting: {e}");
                failed_solves += 1;
                accept_log.push(false);
            }
        }
        phi_log.push(phi);

        if iter > config.n_burn {
            welford.push(current.values());
            if (iter - config.n_burn - 1) % config.thin == 0 {
                states.push(current.values().to_vec());
                state_iters.push(iter);
            }
        }
        if let Some(fs) = full_states.as_mut() {
            fs.push(current.values().to_vec());
        }
    }

    let running_mean = ScalarField::like(&prior.mean, welford.mean.clone(), FieldRole::Potential)?;
    Ok(Chain {
        states,
        state_iters,
        accept_log,
        running_mean,
        running_m2: welford.m2,
        n_averaged: welford.count,
        beta: config.beta,
        n_total: config.n_total,
        n_burn: config.n_burn,
        thin: config.thin,
        accepted,
        failed_solves,
        phi_log,
        full_states,
    })
}

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, serde::Serialize)]
pub struct NodeSummary {
    pub node: usize,
    /// Iteration indices of the thinned trace.
    pub iters: Vec<usize>,
    pub values: Vec<f64>,
    pub hist_lo: f64,
    pub hist_hi: f64,
    pub hist_counts: Vec<u64>,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ChainSummary {
    pub acceptance_rate: f64,
    pub n_total: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub beta: f64,
    pub failed_solves: usize,
    pub nodes: Vec<NodeSummary>,
}

/// Per-node traces, 64-bin histograms over the observed range, and posterior
/// moments. A node whose trace has zero spread gets a single occupied bin.
pub fn chain_summary(chain: &Chain, node_ids: &[usize]) -> Result<ChainSummary> {
    if chain.states.is_empty() || chain.n_averaged == 0 {
        return Err(Error::Domain("chain holds no post-burn-in states".into()));
    }
    let dim = chain.running_mean.len();
    let variance = chain.posterior_variance();
    let mut nodes = Vec::with_capacity(node_ids.len());
    for &node in node_ids {
        if node >= dim {
            return Err(Error::Domain(format!(
                "trace node {node} out of range for {dim} nodes"
            )));
        }
        let values: Vec<f64> = chain.states.iter().map(|s| s[node]).collect();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (hist_lo, hist_hi, hist_counts) = if hi > lo {
            let mut counts = vec![0u64; HISTOGRAM_BINS];
            let width = (hi - lo) / HISTOGRAM_BINS as f64;
            for &v in &values {
                let bin = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
                counts[bin] += 1;
            }
            (lo, hi, counts)
        } else {
            (lo, hi, vec![values.len() as u64])
        };
        nodes.push(NodeSummary {
            node,
            iters: chain.state_iters.clone(),
            values,
            hist_lo,
            hist_hi,
            hist_counts,
            mean: chain.running_mean.get(node),
            variance: variance[node],
        });
    }
    Ok(ChainSummary {
        acceptance_rate: chain.acceptance_rate(),
        n_total: chain.n_total,
        n_burn: chain.n_burn,
        thin: chain.thin,
        beta: chain.beta,
        failed_solves: chain.failed_solves,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{build_covariance, kl_decompose, MaternParams};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn small_prior(mesh: &Mesh, mean_value: f64) -> MaternPrior {
        let params = MaternParams {
            sigma2: 0.01,
            nu: 1.0,
            ell: 0.7,
        };
        let cov = build_covariance(mesh, &params).unwrap();
        let basis = kl_decompose(&cov, mesh.num_nodes()).unwrap();
        let mean = ScalarField::constant(mesh, mean_value, FieldRole::Potential).unwrap();
        MaternPrior::new(mean, basis).unwrap()
    }

    fn obs(values: Vec<f64>, sigma_n2: f64) -> Observation {
        let points = (0..values.len()).collect();
        Observation {
            values,
            points,
            sigma_n2,
            noiseless: None,
        }
    }

    #[test]
    fn likelihood_examples() {
        let y = obs(vec![1.0, 2.0], 0.01);
        assert_eq!(neg_log_likelihood(&y, &[1.0, 2.0]).unwrap(), 0.0);
        // residual (0.1, 0): 0.01 / 0.02 = 0.5
        let phi = neg_log_likelihood(&y, &[0.9, 2.0]).unwrap();
        assert_abs_diff_eq!(phi, 0.5, epsilon = 1e-14);
        // doubling every residual quadruples the quadratic form
        let phi2 = neg_log_likelihood(&y, &[0.8, 2.0]).unwrap();
        assert_abs_diff_eq!(phi2, 4.0 * phi, epsilon = 1e-12);
        assert!(neg_log_likelihood(&y, &[1.0]).is_err());
    }

    #[test]
    fn pcn_proposal_limits() {
        let mesh = Mesh::build(3, 3).unwrap();
        let prior = small_prior(&mesh, 0.6);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let xi = standard_normals(&mut rng, prior.n_kl());
        let current =
            ScalarField::constant(&mesh, 1.0, FieldRole::Potential).unwrap();

        // beta = 0 keeps the state bitwise.
        let same = pcn_propose(&current, &prior, 0.0, &xi).unwrap();
        assert_eq!(same.values(), current.values());

        // beta = 1 forgets the state entirely.
        let fresh = pcn_propose(&current, &prior, 1.0, &xi).unwrap();
        let other = ScalarField::constant(&mesh, -5.0, FieldRole::Potential).unwrap();
        let fresh2 = pcn_propose(&other, &prior, 1.0, &xi).unwrap();
        for i in 0..mesh.num_nodes() {
            assert_abs_diff_eq!(fresh.get(i), fresh2.get(i), epsilon = 1e-12);
        }

        assert!(pcn_propose(&current, &prior, 1.5, &xi).is_err());
        assert!(pcn_propose(&current, &prior, -0.1, &xi).is_err());
    }

    #[test]
    fn acceptance_rules() {
        // Equal energies accept any u < 1.
        assert!(pcn_accept(3.0, 3.0, 0.999_999));
        // Energy increase of ln 2 accepts exactly below u = 0.5.
        assert!(pcn_accept(1.0, 1.0 + std::f64::consts::LN_2, 0.49));
        assert!(!pcn_accept(1.0, 1.0 + std::f64::consts::LN_2, 0.51));
        // A large decrease accepts for any u.
        assert!(pcn_accept(100.0, 1.0, 0.999_999));
        // Log space survives |Phi| up to 1e6 in both directions.
        assert!(pcn_accept(1e6, 0.0, 0.999_999));
        assert!(!pcn_accept(0.0, 1e6, 1e-12));
        // Identical proposal in the random walk always accepts.
        assert!(rw_accept(2.0, 2.0, -1.0, -1.0, 0.999_999));
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let clean = vec![0.0; 10_000];
        let noisy = apply_noise(&clean, 0.01, &mut rng);
        let mean: f64 = noisy.iter().sum::<f64>() / noisy.len() as f64;
        let var: f64 =
            noisy.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (noisy.len() - 1) as f64;
        assert_relative_eq!(var.sqrt(), 0.1, max_relative = 0.05);

        let mesh = Mesh::build(6, 6).unwrap();
        let params = DeviceParams {
            lambda: 1.0,
            delta: 1.0,
            mu_n: 1.0,
            v_bi: 0.6,
            u: 2.0,
        };
        let c = ScalarField::piecewise_doping(&mesh, 1.0, 2.0).unwrap();
        let pts = mesh.gamma_n_nodes();
        let noise = NoiseModel { sigma_n2: 0.01 };
        let a = synthesize_observations(&mesh, &c, &params, &pts, &noise, 42).unwrap();
        let b = synthesize_observations(&mesh, &c, &params, &pts, &noise, 42).unwrap();
        assert_eq!(a.values, b.values);
        let clean = forward_map(&mesh, &c, &params, &pts).unwrap();
        assert_eq!(a.noiseless.as_deref(), Some(clean.as_slice()));
        // The noise actually moved the data.
        assert!(a.values.iter().zip(&clean).any(|(y, g)| y != g));
    }

    #[test]
    fn frozen_chain_at_beta_zero() {
        let mesh = Mesh::build(3, 3).unwrap();
        let prior = small_prior(&mesh, 0.6);
        let y = obs(vec![0.0, 0.0], 0.01);
        let config = ChainConfig {
            sampler: SamplerKind::Pcn,
            beta: 0.0,
            n_total: 40,
            n_burn: 10,
            thin: 3,
            store_full_states: false,
        };
        let chain = run_chain(&config, &y, &prior, |_| Ok(vec![0.0, 0.0]), 5).unwrap();
        // Never moves: every stored state equals the initial draw and the
        // posterior mean is that state exactly.
        assert_eq!(chain.acceptance_rate(), 1.0);
        let first = &chain.states[0];
        for s in &chain.states {
            assert_eq!(s, first);
        }
        for i in 0..mesh.num_nodes() {
            assert_eq!(chain.running_mean.get(i), first[i]);
        }
        assert_eq!(chain.posterior_variance(), vec![0.0; mesh.num_nodes()]);
    }

    #[test]
    fn running_mean_matches_stored_states() {
        let mesh = Mesh::build(3, 3).unwrap();
        let prior = small_prior(&mesh, 0.0);
        let y = obs(vec![0.5], 0.01);
        let config = ChainConfig {
            sampler: SamplerKind::Pcn,
            beta: 0.4,
            n_total: 60,
            n_burn: 20,
            thin: 1,
            store_full_states: false,
        };
        // A forward map that actually varies with the state so the chain
        // accepts and rejects both.
        let chain = run_chain(&config, &y, &prior, |v| Ok(vec![v.get(0)]), 17).unwrap();
        assert_eq!(chain.states.len(), 40);
        for i in 0..mesh.num_nodes() {
            let mean: f64 =
                chain.states.iter().map(|s| s[i]).sum::<f64>() / chain.states.len() as f64;
            assert_abs_diff_eq!(chain.running_mean.get(i), mean, epsilon = 1e-12);
        }
        assert!(chain.accepted > 0 && chain.accepted < config.n_total);
    }

    #[test]
    fn chain_reproducible_from_seed() {
        let mesh = Mesh::build(3, 3).unwrap();
        let prior = small_prior(&mesh, 0.6);
        let y = obs(vec![0.3, -0.2], 0.01);
        let config = ChainConfig {
            sampler: SamplerKind::Rw,
            beta: 0.3,
            n_total: 30,
            n_burn: 5,
            thin: 2,
            store_full_states: true,
        };
        let f = |v: &ScalarField| Ok(vec![v.get(0), v.get(3)]);
        let a = run_chain(&config, &y, &prior, f, 123).unwrap();
        let b = run_chain(&config, &y, &prior, f, 123).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.accept_log, b.accept_log);
        assert_eq!(a.phi_log, b.phi_log);
        assert_eq!(a.full_states.as_ref().unwrap().len(), 30);
        let c = run_chain(&config, &y, &prior, f, 124).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn failed_solves_reject_and_count() {
        let mesh = Mesh::build(3, 3).unwrap();
        let prior = small_prior(&mesh, 0.6);
        let y = obs(vec![0.0], 0.01);
        let config = ChainConfig {
            sampler: SamplerKind::Pcn,
            beta: 0.5,
            n_total: 20,
            n_burn: 0,
            thin: 1,
            store_full_states: false,
        };
        let mut calls = 0usize;
        let chain = run_chain(
            &config,
            &y,
            &prior,
            move |_| {
                calls += 1;
                // The first call evaluates the initial state and must
                // succeed; after that every third proposal fails.
                if calls > 1 && calls % 3 == 0 {
                    Err(Error::Solver("synthetic failure".into()))
                } else {
                    Ok(vec![0.0])
                }
            },
            9,
        )
        .unwrap();
        assert!(chain.failed_solves > 0);
        assert_eq!(chain.accepted + chain.failed_solves, config.n_total);
        assert_eq!(chain.accept_log.iter().filter(|a| !**a).count(), chain.failed_solves);
    }

    #[test]
    fn prior_invariance_small() {
        // Phi constant: pCN accepts everything and preserves the prior, so
        // the chain mean approaches m0.
        let mesh = Mesh::build(3, 3).unwrap();
        let prior = small_prior(&mesh, 0.6);
        let y = obs(vec![0.0], 0.01);
        let config = ChainConfig {
            sampler: SamplerKind::Pcn,
            beta: 0.5,
            n_total: 4000,
            n_burn: 500,
            thin: 10,
            store_full_states: false,
        };
        let chain = run_chain(&config, &y, &prior, |_| Ok(vec![0.0]), 31).unwrap();
        assert_eq!(chain.acceptance_rate(), 1.0);
        // AR(1) correction: tau = (1 + rho) / (1 - rho) with rho = sqrt(1 - beta^2).
        let rho = (1.0f64 - config.beta * config.beta).sqrt();
        let tau = (1.0 + rho) / (1.0 - rho);
        let var = prior.basis.truncated_variance();
        for i in 0..mesh.num_nodes() {
            let se = (var[i] * tau / chain.n_averaged as f64).sqrt();
            assert_abs_diff_eq!(chain.running_mean.get(i), 0.6, epsilon = 4.0 * se);
        }
    }

    #[test]
    fn summary_of_constant_and_alternating_chains() {
        let mesh = Mesh::build(1, 1).unwrap();
        let n = mesh.num_nodes();
        let a = vec![1.0; n];
        let b = vec![3.0; n];

        let mut welford = Welford::new(n);
        for s in [&a, &b, &a, &b] {
            welford.push(s);
        }
        let mean_field =
            ScalarField::new(&mesh, welford.mean.clone(), FieldRole::Potential).unwrap();
        let chain = Chain {
            states: vec![a.clone(), b.clone(), a.clone(), b.clone()],
            state_iters: vec![1, 2, 3, 4],
            accept_log: vec![true; 4],
            running_mean: mean_field,
            running_m2: welford.m2.clone(),
            n_averaged: welford.count,
            beta: 0.2,
            n_total: 4,
            n_burn: 0,
            thin: 1,
            accepted: 4,
            failed_solves: 0,
            phi_log: vec![0.0; 4],
            full_states: None,
        };
        let summary = chain_summary(&chain, &[0]).unwrap();
        assert_eq!(summary.acceptance_rate, 1.0);
        let node = &summary.nodes[0];
        assert_abs_diff_eq!(node.mean, 2.0, epsilon = 1e-15);
        // Two-point sample {1, 3, 1, 3}: unbiased variance 4/3.
        assert_abs_diff_eq!(node.variance, 4.0 / 3.0, epsilon = 1e-14);
        assert_eq!(node.hist_counts.len(), HISTOGRAM_BINS);
        assert_eq!(node.hist_counts.iter().sum::<u64>(), 4);
        assert_eq!(node.hist_counts[0], 2);
        assert_eq!(node.hist_counts[HISTOGRAM_BINS - 1], 2);

        // A constant chain collapses to one bin and zero variance.
        let mut welford_c = Welford::new(n);
        welford_c.push(&a);
        welford_c.push(&a);
        let const_chain = Chain {
            states: vec![a.clone(), a.clone()],
            state_iters: vec![1, 2],
            accept_log: vec![true; 2],
            running_mean: ScalarField::new(&mesh, welford_c.mean.clone(), FieldRole::Potential)
                .unwrap(),
            running_m2: welford_c.m2.clone(),
            n_averaged: welford_c.count,
            beta: 0.0,
            n_total: 2,
            n_burn: 0,
            thin: 1,
            accepted: 2,
            failed_solves: 0,
            phi_log: vec![0.0; 2],
            full_states: None,
        };
        let s = chain_summary(&const_chain, &[1]).unwrap();
        assert_eq!(s.nodes[0].variance, 0.0);
        assert_eq!(s.nodes[0].hist_counts, vec![2]);

        // Out-of-range node and empty chain are domain errors.
        assert!(chain_summary(&chain, &[99]).is_err());
    }

    #[test]
    fn acceptance_stays_high_near_truth() {
        // Noiseless data evaluated at the truth, plus a prior concentrated
        // tightly around it, keeps Phi small from the first state on; the
        // proposal perturbations then barely move the misfit and nearly
        // everything is accepted.
        let mesh = Mesh::build(4, 4).unwrap();
        let tight = MaternParams {
            sigma2: 1e-4,
            nu: 1.0,
            ell: 0.7,
        };
        let cov = build_covariance(&mesh, &tight).unwrap();
        let basis = kl_decompose(&cov, mesh.num_nodes()).unwrap();
        let mean = ScalarField::constant(&mesh, 0.6, FieldRole::Potential).unwrap();
        let prior = MaternPrior::new(mean, basis).unwrap();
        let params = DeviceParams {
            lambda: 1.0,
            delta: 1.0,
            mu_n: 1.0,
            v_bi: 0.6,
            u: 2.0,
        };
        let pts = mesh.gamma_n_nodes();
        let truth = ScalarField::constant(&mesh, 0.6, FieldRole::Potential).unwrap();
        let g_true = forward_map(&mesh, &truth, &params, &pts).unwrap();
        let y = Observation {
            values: g_true.clone(),
            points: pts.clone(),
            sigma_n2: 0.01,
            noiseless: Some(g_true),
        };
        let config = ChainConfig {
            sampler: SamplerKind::Pcn,
            beta: 0.1,
            n_total: 100,
            n_burn: 0,
            thin: 1,
            store_full_states: false,
        };
        let chain = run_chain(
            &config,
            &y,
            &prior,
            |v| forward_map(&mesh, v, &params, &pts),
            77,
        )
        .unwrap();
        let early: usize = chain.accept_log[..50].iter().filter(|a| **a).count();
        assert!(early >= 40, "early acceptance {early}/50 too low");
        assert!(chain.phi_log[0] < 5.0);
    }

    #[test]
    fn config_validation() {
        let base = ChainConfig {
            sampler: SamplerKind::Pcn,
            beta: 0.2,
            n_total: 10,
            n_burn: 2,
            thin: 1,
            store_full_states: false,
        };
        assert!(base.validate().is_ok());
        let mut c = base.clone();
        c.n_total = 0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.n_burn = 10;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.thin = 0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.beta = 1.5;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.sampler = SamplerKind::Rw;
        c.beta = 1.5;
        assert!(c.validate().is_ok(), "rw beta has no upper cap");
    }
}
