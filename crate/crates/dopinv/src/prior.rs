//! Matern Gaussian random-field prior on the equilibrium potential:
//! kernel evaluation, dense covariance assembly on the mesh nodes, truncated
//! Karhunen-Loeve decomposition, and sampling.
//!
//! The kernel's correlation length is named `ell` here; the source material
//! overloads the symbol lambda for both this length and the Debye length, so
//! the two are kept apart by name.

use crate::bessel::modified_bessel_k;
use crate::error::{Error, Result};
use crate::field::{FieldRole, ScalarField};
use crate::forward::{solve_equilibrium_poisson, DeviceParams};
use crate::mesh::Mesh;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternParams {
    /// Marginal variance sigma^2.
    pub sigma2: f64,
    /// Smoothness nu; must be one of the orders the Bessel module supports.
    pub nu: f64,
    /// Correlation length.
    pub ell: f64,
}

impl MaternParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) || !(self.nu > 0.0) || !(self.ell > 0.0) {
            return Err(Error::Domain(format!(
                "matern params must be positive: sigma2={}, nu={}, ell={}",
                self.sigma2, self.nu, self.ell
            )));
        }
        // Fail early rather than on the first kernel call.
        modified_bessel_k(self.nu, 1.0).map(|_| ())
    }

    fn gamma_of_nu(&self) -> Result<f64> {
        // Gamma(nu) for the supported smoothness orders.
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let table = [
            (0.5, sqrt_pi),
            (1.0, 1.0),
            (1.5, 0.5 * sqrt_pi),
            (2.0, 1.0),
            (2.5, 0.75 * sqrt_pi),
        ];
        for (nu, g) in table {
            if (self.nu - nu).abs() < 1e-12 {
                return Ok(g);
            }
        }
        Err(Error::Domain(format!(
            "unsupported matern smoothness nu = {}",
            self.nu
        )))
    }
}

/// Stationary isotropic Matern covariance
/// sigma^2 * 2^{1-nu} / Gamma(nu) * (d/ell)^nu * K_nu(d/ell),
/// with the analytic limit sigma^2 at d = 0.
pub fn matern_kernel(x: [f64; 2], y: [f64; 2], p: &MaternParams) -> f64 {
    let d = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
    if d < 1e-14 {
        return p.sigma2;
    }
    let s = d / p.ell;
    let gamma_nu = p.gamma_of_nu().expect("validated matern params");
    let k = modified_bessel_k(p.nu, s).expect("validated matern params, s > 0");
    p.sigma2 * (1.0 - p.nu).exp2() / gamma_nu * s.powf(p.nu) * k
}

/// Dense covariance matrix over the mesh nodes; diagonal exactly sigma^2.
pub fn build_covariance(mesh: &Mesh, p: &MaternParams) -> Result<DMatrix<f64>> {
    p.validate()?;
    let n = mesh.num_nodes();
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        cov[(i, i)] = p.sigma2;
        for j in (i + 1)..n {
            let v = matern_kernel(mesh.node(i), mesh.node(j), p);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// Truncated KL basis: leading eigenpairs of a covariance matrix.
#[derive(Debug, Clone)]
pub struct KlBasis {
    /// Descending, nonnegative (negative numerical eigenvalues clipped to 0).
    eigenvalues: Vec<f64>,
    /// n x n_kl; columns are orthonormal nodal eigenfields.
    modes: DMatrix<f64>,
    /// How many retained eigenvalues were clipped.
    clipped: usize,
}

impl KlBasis {
    pub fn n_kl(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn dim(&self) -> usize {
        self.modes.nrows()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn clipped(&self) -> usize {
        self.clipped
    }

    pub fn from_parts(eigenvalues: Vec<f64>, modes: DMatrix<f64>, clipped: usize) -> Result<Self> {
        if modes.ncols() != eigenvalues.len() {
            return Err(Error::Numerical(format!(
                "eigenvalue count {} does not match mode count {}",
                eigenvalues.len(),
                modes.ncols()
            )));
        }
        Ok(KlBasis {
            eigenvalues,
            modes,
            clipped,
        })
    }

    /// The zero-mean fluctuation sum_i sqrt(lambda_i) xi_i phi_i.
    pub fn fluctuation(&self, xi: &[f64]) -> Result<Vec<f64>> {
        if xi.len() != self.n_kl() {
            return Err(Error::Domain(format!(
                "expected {} coefficients, got {}",
                self.n_kl(),
                xi.len()
            )));
        }
        let scaled = DVector::from_iterator(
            xi.len(),
            xi.iter()
                .zip(&self.eigenvalues)
                .map(|(x, l)| x * l.sqrt()),
        );
        Ok((&self.modes * scaled).iter().cloned().collect())
    }

    /// Projects a nodal fluctuation onto the modes: c_i = phi_i^T v.
    pub fn coefficients(&self, fluctuation: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(fluctuation);
        (self.modes.transpose() * v).iter().cloned().collect()
    }

    /// Truncated pointwise variance sum_i lambda_i phi_i(x)^2 per node.
    pub fn truncated_variance(&self) -> Vec<f64> {
        let mut var = vec![0.0; self.dim()];
        for (i, l) in self.eigenvalues.iter().enumerate() {
            let col = self.modes.column(i);
            for (node, v) in var.iter_mut().enumerate() {
                *v += l * col[node] * col[node];
            }
        }
        var
    }

    /// Gaussian log-density (up to a constant) of KL coefficients:
    /// -1/2 sum c_i^2 / lambda_i. Modes with clipped (zero) eigenvalues are
    /// excluded from the sum.
    pub fn log_density(&self, coeffs: &[f64]) -> f64 {
        coeffs
            .iter()
            .zip(&self.eigenvalues)
            .filter(|(_, &l)| l > 0.0)
            .map(|(c, l)| -0.5 * c * c / l)
            .sum()
    }
}

/// Leading n_kl eigenpairs of a dense symmetric covariance matrix.
pub fn kl_decompose(cov: &DMatrix<f64>, n_kl: usize) -> Result<KlBasis> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::Domain("covariance matrix must be square".into()));
    }
    if n_kl == 0 || n_kl > n {
        return Err(Error::Domain(format!(
            "n_kl must be in 1..={n}, got {n_kl}"
        )));
    }
    let eig = cov
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });

    let sigma2_scale = cov.diagonal().amax();
    let mut eigenvalues = Vec::with_capacity(n_kl);
    let mut modes = DMatrix::zeros(n, n_kl);
    let mut clipped = 0;
    for (k, &src) in order.iter().take(n_kl).enumerate() {
        let mut l = eig.eigenvalues[src];
        if l < 0.0 {
            if l.abs() > 1e-8 * sigma2_scale {
                log::warn!(
                    "clipping eigenvalue {l:.3e} (beyond roundoff for scale {sigma2_scale:.3e})"
                );
            }
            l = 0.0;
            clipped += 1;
        }
        eigenvalues.push(l);
        let col = eig.eigenvectors.column(src);
        // Canonical sign: largest-magnitude component positive, so cached and
        // freshly computed bases agree.
        let pivot = col.iter().cloned().fold(0.0f64, |m, v| {
            if v.abs() > m.abs() {
                v
            } else {
                m
            }
        });
        modes.column_mut(k).copy_from(&col);
        if pivot < 0.0 {
            modes.column_mut(k).neg_mut();
        }
    }
    KlBasis::from_parts(eigenvalues, modes, clipped)
}

/// Gaussian prior N(m0, Sigma0) represented by its mean field and the
/// truncated KL basis of Sigma0. Immutable once built; sampling is pure
/// given the coefficient vector.
#[derive(Debug, Clone)]
pub struct MaternPrior {
    pub mean: ScalarField,
    pub basis: KlBasis,
}

impl MaternPrior {
    pub fn new(mean: ScalarField, basis: KlBasis) -> Result<MaternPrior> {
        if mean.len() != basis.dim() {
            return Err(Error::Domain(format!(
                "mean field has {} nodes but basis has {}",
                mean.len(),
                basis.dim()
            )));
        }
        Ok(MaternPrior { mean, basis })
    }

    pub fn n_kl(&self) -> usize {
        self.basis.n_kl()
    }

    /// m0 + sum_i sqrt(lambda_i) xi_i phi_i evaluated nodally.
    pub fn sample_field(&self, xi: &[f64]) -> Result<ScalarField> {
        let fluct = self.basis.fluctuation(xi)?;
        let values = self
            .mean
            .values()
            .iter()
            .zip(&fluct)
            .map(|(m, f)| m + f)
            .collect();
        ScalarField::like(&self.mean, values, FieldRole::Potential)
    }
}

/// Draws n standard normals from a seeded stream.
pub fn standard_normals(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v
        })
        .collect()
}

/// Prior mean as a perturbation of the true equilibrium potential:
/// m0 = V_e,true + perturb_scale * s with s one seeded draw from N(0, Sigma0).
pub fn build_prior_mean(
    mesh: &Mesh,
    c_true: &ScalarField,
    params: &DeviceParams,
    basis: &KlBasis,
    perturb_scale: f64,
    seed: u64,
) -> Result<ScalarField> {
    if !perturb_scale.is_finite() {
        return Err(Error::Domain("perturb_scale must be finite".into()));
    }
    let v_true = solve_equilibrium_poisson(mesh, c_true, params)?.potential;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let xi = standard_normals(&mut rng, basis.n_kl());
    let s = basis.fluctuation(&xi)?;
    let values = v_true
        .values()
        .iter()
        .zip(&s)
        .map(|(v, si)| v + perturb_scale * si)
        .collect();
    ScalarField::new(mesh, values, FieldRole::Potential)
}

/// Physics-informed alternative mean: the equilibrium potential of a constant
/// guess doping.
pub fn build_prior_mean_poisson_guess(
    mesh: &Mesh,
    guess_c: f64,
    params: &DeviceParams,
) -> Result<ScalarField> {
    let guess = ScalarField::constant(mesh, guess_c, FieldRole::Doping)?;
    Ok(solve_equilibrium_poisson(mesh, &guess, params)?.potential)
}
