//! Nodal scalar fields keyed to a mesh by its hash.

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Region};

/// What a field's values mean physically. Solvers check roles so that, e.g.,
/// a doping profile is never passed where a potential is expected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldRole {
    /// Equilibrium potential V_e.
    Potential,
    /// Slotboom variable u-hat (transformed carrier density).
    Slotboom,
    /// gamma = exp(V_e), the continuity-equation coefficient.
    Gamma,
    /// Doping profile C.
    Doping,
}

#[derive(Debug, Clone)]
pub struct ScalarField {
    values: Vec<f64>,
    role: FieldRole,
    mesh_hash: String,
}

impl ScalarField {
    pub fn new(mesh: &Mesh, values: Vec<f64>, role: FieldRole) -> Result<ScalarField> {
        if values.len() != mesh.num_nodes() {
            return Err(Error::Field(format!(
                "expected {} nodal values, got {}",
                mesh.num_nodes(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Field(format!("non-finite value at node {i}")));
        }
        Ok(ScalarField {
            values,
            role,
            mesh_hash: mesh.hash().to_string(),
        })
    }

    pub fn constant(mesh: &Mesh, value: f64, role: FieldRole) -> Result<ScalarField> {
        ScalarField::new(mesh, vec![value; mesh.num_nodes()], role)
    }

    /// The piecewise-constant diode doping: C_N in the n-region (y >= 0),
    /// -C_P in the p-region (y < 0).
    pub fn piecewise_doping(mesh: &Mesh, c_n: f64, c_p: f64) -> Result<ScalarField> {
        let values = (0..mesh.num_nodes())
            .map(|i| match mesh.node_region(i) {
                Region::OmegaN => c_n,
                Region::OmegaP => -c_p,
            })
            .collect();
        ScalarField::new(mesh, values, FieldRole::Doping)
    }

    /// Builds a field on the same mesh as `like` without needing the mesh itself.
    pub fn like(like: &ScalarField, values: Vec<f64>, role: FieldRole) -> Result<ScalarField> {
        if values.len() != like.values.len() {
            return Err(Error::Field(format!(
                "expected {} nodal values, got {}",
                like.values.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Field(format!("non-finite value at node {i}")));
        }
        Ok(ScalarField {
            values,
            role,
            mesh_hash: like.mesh_hash.clone(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn role(&self) -> FieldRole {
        self.role
    }

    pub fn mesh_hash(&self) -> &str {
        &self.mesh_hash
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn max(&self) -> f64 {
        self.values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// Errors unless the field was built on `mesh`.
    pub fn check_mesh(&self, mesh: &Mesh) -> Result<()> {
        if self.mesh_hash != mesh.hash() {
            return Err(Error::Field(format!(
                "field belongs to mesh {} but {} was given",
                self.mesh_hash,
                mesh.hash()
            )));
        }
        Ok(())
    }

    /// Errors unless both fields live on the same mesh.
    pub fn check_same_mesh(&self, other: &ScalarField) -> Result<()> {
        if self.mesh_hash != other.mesh_hash {
            return Err(Error::Field(format!(
                "fields belong to different meshes ({} vs {})",
                self.mesh_hash, other.mesh_hash
            )));
        }
        Ok(())
    }

    pub fn expect_role(&self, role: FieldRole) -> Result<()> {
        if self.role != role {
            return Err(Error::Field(format!(
                "expected a {role:?} field, got {:?}",
                self.role
            )));
        }
        Ok(())
    }
}
