//! Doping recovery from a potential field: C = delta^2 e^{V} - lambda^2 Lap V
//! with the Laplacian taken by finite differences on the structured grid,
//! plus the error metrics used to judge reconstructions.
//!
//! Lap(ln gamma) is computed as Lap(V) directly; gamma = e^V is never formed
//! and re-logged.

use crate::error::{Error, Result};
use crate::field::{FieldRole, ScalarField};
use crate::forward::DeviceParams;
use crate::mesh::Mesh;

/// Nodal values laid out on the structured grid, row-major by y then x,
/// matching the mesh node ordering exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    values: Vec<f64>,
}

impl GridField {
    pub fn from_field(mesh: &Mesh, field: &ScalarField) -> Result<GridField> {
        field.check_mesh(mesh)?;
        Ok(GridField {
            nx: mesh.nx(),
            ny: mesh.ny(),
            hx: mesh.hx(),
            hy: mesh.hy(),
            values: field.values().to_vec(),
        })
    }

    /// The inverse of from_field; the grid layout is the node ordering.
    pub fn into_field(self, mesh: &Mesh, role: FieldRole) -> Result<ScalarField> {
        if self.nx != mesh.nx() || self.ny != mesh.ny() {
            return Err(Error::Domain(format!(
                "grid is {}x{} but mesh is {}x{}",
                self.nx,
                self.ny,
                mesh.nx(),
                mesh.ny()
            )));
        }
        ScalarField::new(mesh, self.values, role)
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * (self.nx + 1) + ix]
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Second derivative along one grid line at position `i` of `n+1` samples
/// fetched through `f`, spacing `h`. Centered 3-point stencil inside;
/// one-sided 4-point (2, -5, 4, -1)/h^2 at the ends, falling back to the
/// 3-point one-sided stencil when the line only has 3 samples. Every branch
/// is exact on quadratics.
fn second_difference(f: &dyn Fn(usize) -> f64, i: usize, n: usize, h: f64) -> f64 {
    let h2 = h * h;
    if i > 0 && i < n {
        (f(i + 1) - 2.0 * f(i) + f(i - 1)) / h2
    } else if n == 2 {
        let base = if i == 0 { 0 } else { n - 2 };
        (f(base) - 2.0 * f(base + 1) + f(base + 2)) / h2
    } else if i == 0 {
        (2.0 * f(0) - 5.0 * f(1) + 4.0 * f(2) - f(3)) / h2
    } else {
        (2.0 * f(n) - 5.0 * f(n - 1) + 4.0 * f(n - 2) - f(n - 3)) / h2
    }
}

/// Five-point Laplacian at interior nodes; one-sided second differences in
/// the outward direction on the boundary, centered tangentially.
pub fn fd_laplacian(f: &GridField) -> Result<GridField> {
    let (nx, ny) = (f.nx, f.ny);
    if nx < 2 || ny < 2 {
        return Err(Error::Domain(format!(
            "laplacian needs at least a 2x2 grid, got {nx}x{ny}"
        )));
    }
    let mut out = vec![0.0; f.values.len()];
    for iy in 0..=ny {
        for ix in 0..=nx {
            let along_x = |i: usize| f.get(i, iy);
            let along_y = |j: usize| f.get(ix, j);
            let dxx = second_difference(&along_x, ix, nx, f.hx);
            let dyy = second_difference(&along_y, iy, ny, f.hy);
            out[iy * (nx + 1) + ix] = dxx + dyy;
        }
    }
    Ok(GridField {
        nx,
        ny,
        hx: f.hx,
        hy: f.hy,
        values: out,
    })
}

/// C = delta^2 e^{V_e} - lambda^2 Lap(V_e) on every node.
pub fn doping_from_potential(
    mesh: &Mesh,
    v_e: &ScalarField,
    params: &DeviceParams,
) -> Result<ScalarField> {
    params.validate()?;
    v_e.check_mesh(mesh)?;
    v_e.expect_role(FieldRole::Potential)?;
    let grid = GridField::from_field(mesh, v_e)?;
    let lap = fd_laplacian(&grid)?;
    let delta2 = params.delta * params.delta;
    let lambda2 = params.lambda * params.lambda;
    let values = v_e
        .values()
        .iter()
        .zip(lap.values())
        .map(|(v, l)| delta2 * v.exp() - lambda2 * l)
        .collect();
    ScalarField::new(mesh, values, FieldRole::Doping)
}

/// Mean over all nodes of the squared difference.
pub fn field_mse(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    a.check_same_mesh(b)?;
    let n = a.len() as f64;
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// True for nodes within `half_width` grid rows of the junction line y = 0.
/// half_width = 1 marks the usual 3-row band on an even mesh.
pub fn junction_band_mask(mesh: &Mesh, half_width: usize) -> Vec<bool> {
    let limit = (half_width as f64 + 0.5) * mesh.hy();
    (0..mesh.num_nodes())
        .map(|i| mesh.node(i)[1].abs() < limit)
        .collect()
}

/// Fraction of the total squared error that falls inside the junction band.
/// A reconstruction with zero total error counts as fully banded.
pub fn junction_band_share(
    a: &ScalarField,
    b: &ScalarField,
    mesh: &Mesh,
    half_width: usize,
) -> Result<f64> {
    a.check_mesh(mesh)?;
    a.check_same_mesh(b)?;
    let mask = junction_band_mask(mesh, half_width);
    let mut inside = 0.0;
    let mut total = 0.0;
    for i in 0..a.len() {
        let d = a.get(i) - b.get(i);
        total += d * d;
        if mask[i] {
            inside += d * d;
        }
    }
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(inside / total)
}

/// Largest pointwise relative error |a - b| / |b| over nodes outside the
/// junction band. The reference must be nonzero off the band.
pub fn max_relative_error_outside_band(
    a: &ScalarField,
    b: &ScalarField,
    mesh: &Mesh,
    half_width: usize,
) -> Result<f64> {
    a.check_mesh(mesh)?;
    a.check_same_mesh(b)?;
    let mask = junction_band_mask(mesh, half_width);
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        if mask[i] {
            continue;
        }
        let denom = b.get(i).abs();
        if denom == 0.0 {
            return Err(Error::Domain(format!(
                "reference field vanishes at node {i} outside the band"
            )));
        }
        worst = worst.max((a.get(i) - b.get(i)).abs() / denom);
    }
    Ok(worst)
}
