//! The semiconductor forward problem.
//!
//! Equilibrium Poisson (semilinear): lambda^2 Lap(V_e) = delta^2 e^{V_e} - C
//! with V_e = V_bi on both contacts and natural conditions on the sides,
//! solved by Newton with a lumped-mass reaction term so the Jacobian stays
//! symmetric positive definite and the discrete comparison principle holds.
//!
//! Continuity (linear, Slotboom form): div(e^{V_e} grad u) = 0 with u = U on
//! the bottom contact, u = 0 on the grounded top contact.
//!
//! Observation: the normal current density J . nu = mu_n delta^2 e^{V_bi}
//! (grad u . nu) at top-contact nodes, nu = (0, 1); the nodal normal gradient
//! is the area-weighted average of the constant P1 gradients on adjacent
//! triangles.

use crate::error::{Error, Result};
use crate::fem::{assemble_operators, lumped_mass, solve_dirichlet_system};
use crate::field::{FieldRole, ScalarField};
use crate::mesh::{BoundaryTag, Mesh};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceParams {
    /// Scaled Debye length.
    pub lambda: f64,
    /// Scaled intrinsic number.
    pub delta: f64,
    /// Scaled electron mobility.
    pub mu_n: f64,
    /// Scaled built-in potential (contact Dirichlet value for V_e).
    pub v_bi: f64,
    /// Applied voltage on the bottom contact.
    pub u: f64,
}

impl DeviceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.delta > 0.0) || !(self.mu_n > 0.0) {
            return Err(Error::Domain(format!(
                "lambda, delta, mu_n must be positive: {self:?}"
            )));
        }
        if !self.v_bi.is_finite() || !self.u.is_finite() {
            return Err(Error::Domain(format!("v_bi and u must be finite: {self:?}")));
        }
        Ok(())
    }
}

/// Noisy boundary observations y = G + eta with diagonal covariance
/// sigma_n2 * I at the listed top-contact nodes.
#[derive(Debug, Clone)]
pub struct Observation {
    pub values: Vec<f64>,
    pub points: Vec<usize>,
    pub sigma_n2: f64,
    /// The noiseless forward output, kept for diagnostics.
    pub noiseless: Option<Vec<f64>>,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.points.len() {
            return Err(Error::Domain(format!(
                "observation has {} values for {} points",
                self.values.len(),
                self.points.len()
            )));
        }
        if !(self.sigma_n2 > 0.0) {
            return Err(Error::Domain(format!(
                "noise variance must be positive, got {}",
                self.sigma_n2
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Newton iterations stop when the residual sup-norm falls below this.
pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;
/// Any iterate with |V| beyond this is declared divergent (e^V overflows
/// long before f64 does, but the physics is already gone at 50).
pub const NEWTON_OVERFLOW_GUARD: f64 = 50.0;

#[derive(Debug, Clone)]
pub struct PoissonSolve {
    pub potential: ScalarField,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves the equilibrium Poisson equation for the potential generated by a
/// doping profile.
pub fn solve_equilibrium_poisson(
    mesh: &Mesh,
    c: &ScalarField,
    params: &DeviceParams,
) -> Result<PoissonSolve> {
    params.validate()?;
    c.check_mesh(mesh)?;
    c.expect_role(FieldRole::Doping)?;

    let n = mesh.num_nodes();
    let ones = ScalarField::constant(mesh, 1.0, FieldRole::Gamma)?;
    let (stiffness, _) = assemble_operators(mesh, &ones)?;
    let m_lumped = lumped_mass(mesh);
    let contacts = mesh.contact_nodes();
    let is_contact: Vec<bool> = {
        let mut v = vec![false; n];
        for &i in &contacts {
            v[i] = true;
        }
        v
    };
    let bc_zero: Vec<(usize, f64)> = contacts.iter().map(|&i| (i, 0.0)).collect();
    let lambda2 = params.lambda * params.lambda;
    let delta2 = params.delta * params.delta;

    // F(V) = lambda^2 K V + M_L (delta^2 e^V - C), zeroed on contact rows
    // (where V is pinned to V_bi).
    let residual = |v: &[f64]| -> Vec<f64> {
        let kv = stiffness.matvec(v);
        (0..n)
            .map(|i| {
                if is_contact[i] {
                    0.0
                } else {
                    lambda2 * kv[i] + m_lumped[i] * (delta2 * v[i].exp() - c.get(i))
                }
            })
            .collect()
    };
    let sup = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    // Initial guess: the boundary value extended to the whole domain.
    let mut v = vec![params.v_bi; n];
    let mut f = residual(&v);
    let mut f_norm = sup(&f);
    let mut iterations = 0;

    while f_norm > NEWTON_TOL {
        if iterations >= NEWTON_MAX_ITER {
            return Err(Error::NewtonDiverged {
                iterations,
                residual: f_norm,
            });
        }
        // J = lambda^2 K + delta^2 M_L diag(e^V); SPD after the Dirichlet
        // reduction, so the banded Cholesky applies.
        let mut k_scaled = stiffness.clone();
        k_scaled.scale(lambda2);
        let diag: Vec<f64> = (0..n).map(|i| delta2 * m_lumped[i] * v[i].exp()).collect();
        let jacobian = k_scaled.add_diagonal(&diag)?;
        let neg_f: Vec<f64> = f.iter().map(|x| -x).collect();
        let dv = solve_dirichlet_system(&jacobian, &neg_f, &bc_zero)?;

        // Undamped step, halving while the residual fails to decrease. The
        // monotone exponential makes the Newton direction a descent
        // direction, so a decrease exists; ten halvings is plenty.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..10 {
            let trial: Vec<f64> = v.iter().zip(&dv).map(|(vi, di)| vi + step * di).collect();
            if trial.iter().any(|t| t.abs() > NEWTON_OVERFLOW_GUARD) {
                step *= 0.5;
                continue;
            }
            let f_trial = residual(&trial);
            let norm_trial = sup(&f_trial);
            if norm_trial < f_norm {
                v = trial;
                f = f_trial;
                f_norm = norm_trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            return Err(Error::NewtonDiverged {
                iterations,
                residual: f_norm,
            });
        }
    }

    log::debug!("poisson newton: {iterations} iterations, residual {f_norm:.3e}");
    Ok(PoissonSolve {
        potential: ScalarField::new(mesh, v, FieldRole::Potential)?,
        iterations,
        residual: f_norm,
    })
}

/// Solves the continuity equation div(e^{V_e} grad u) = 0 with u = U on the
/// bottom contact and u = 0 on the top contact.
pub fn solve_continuity(mesh: &Mesh, v_e: &ScalarField, params: &DeviceParams) -> Result<ScalarField> {
    params.validate()?;
    v_e.check_mesh(mesh)?;
    v_e.expect_role(FieldRole::Potential)?;

    let gamma_vals: Vec<f64> = v_e.values().iter().map(|v| v.exp()).collect();
    let gamma = ScalarField::new(mesh, gamma_vals, FieldRole::Gamma)?;
    let (stiffness, _) = assemble_operators(mesh, &gamma)?;

    let mut bc: Vec<(usize, f64)> = mesh.gamma_p_nodes().iter().map(|&i| (i, params.u)).collect();
    bc.extend(mesh.gamma_n_nodes().iter().map(|&i| (i, 0.0)));
    let rhs = vec![0.0; mesh.num_nodes()];
    let u = solve_dirichlet_system(&stiffness, &rhs, &bc)?;

    // Discrete maximum principle: the M-matrix structure of the non-obtuse
    // mesh pins the solution between its boundary values.
    #[cfg(debug_assertions)]
    {
        let lo = params.u.min(0.0) - 1e-9;
        let hi = params.u.max(0.0) + 1e-9;
        for (i, &ui) in u.iter().enumerate() {
            debug_assert!(
                (lo..=hi).contains(&ui),
                "maximum principle violated at node {i}: {ui} outside [{lo}, {hi}]"
            );
        }
    }

    ScalarField::new(mesh, u, FieldRole::Slotboom)
}

/// Normal current density mu_n delta^2 e^{V_bi} (grad u . nu) at the given
/// top-contact nodes, nu = (0, 1).
pub fn observe_current_density(
    mesh: &Mesh,
    u_hat: &ScalarField,
    params: &DeviceParams,
    points: &[usize],
) -> Result<Vec<f64>> {
    params.validate()?;
    u_hat.check_mesh(mesh)?;
    u_hat.expect_role(FieldRole::Slotboom)?;

    let factor = params.mu_n * params.delta * params.delta * params.v_bi.exp();
    let mut out = Vec::with_capacity(points.len());
    for &p in points {
        if p >= mesh.num_nodes() || mesh.node_tag(p) != BoundaryTag::GammaN {
            return Err(Error::Domain(format!(
                "observation point {p} is not on the top contact"
            )));
        }
        let mut weighted = 0.0;
        let mut total_area = 0.0;
        for &t in mesh.triangles_at_node(p) {
            let tri = mesh.triangle(t);
            let pt: Vec<[f64; 2]> = tri.iter().map(|&i| mesh.node(i)).collect();
            let area = 0.5
                * ((pt[1][0] - pt[0][0]) * (pt[2][1] - pt[0][1])
                    - (pt[2][0] - pt[0][0]) * (pt[1][1] - pt[0][1]));
            // d(phi_i)/dy = c_i / (2 area) with c the cyclic x-differences.
            let c = [pt[2][0] - pt[1][0], pt[0][0] - pt[2][0], pt[1][0] - pt[0][0]];
            let mut du_dy = 0.0;
            for k in 0..3 {
                du_dy += u_hat.get(tri[k]) * c[k] / (2.0 * area);
            }
            weighted += area * du_dy;
            total_area += area;
        }
        out.push(factor * weighted / total_area);
    }
    Ok(out)
}

/// The parameter-to-observable map G. A potential field is used directly
/// (the MCMC path); a doping field first goes through the equilibrium
/// Poisson solve (the truth-generation path).
pub fn forward_map(
    mesh: &Mesh,
    field: &ScalarField,
    params: &DeviceParams,
    points: &[usize],
) -> Result<Vec<f64>> {
    let v_e = match field.role() {
        FieldRole::Potential => field.clone(),
        FieldRole::Doping => solve_equilibrium_poisson(mesh, field, params)?.potential,
        other => {
            return Err(Error::Domain(format!(
                "forward map takes a potential or doping field, got {other:?}"
            )))
        }
    };
    let u_hat = solve_continuity(mesh, &v_e, params)?;
    observe_current_density(mesh, &u_hat, params, points)
}
