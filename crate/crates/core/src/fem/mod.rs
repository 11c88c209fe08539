//! Finite-element assembly and implicit-Euler time stepping for coupled
//! thermoelasticity, coupled poroelasticity, and the mechanics-only solve the
//! hybrid driver uses.
//!
//! Unknown layout is field-major: all displacement dofs first
//! (node * dim + component), then one scalar dof per node for the coupled
//! field. The thermal unknown is the temperature change relative to the
//! reference temperature, which makes the momentum coupling term homogeneous.

mod assembly;
mod transient;

pub use assembly::{
    assemble_mechanics_only, assemble_poroelastic_monolithic, assemble_thermoelastic_monolithic,
    solve_sparse, strain_trace_field, AssembledSystem, SparseSystem,
};
pub use transient::{run_monolithic_transient, scalar_reactions, StepRecord};

use crate::error::{CoreError, Result};
use crate::mesh::StructuredMesh;

/// Thermoelastic constitutive parameters.
#[derive(Debug, Clone)]
pub struct ThermoMaterial {
    /// First Lame constant (Pa).
    pub lambda: f64,
    /// Shear modulus (Pa).
    pub mu: f64,
    /// Thermal expansion coefficient (1/K).
    pub alpha: f64,
    /// Mass density (kg/m^3).
    pub rho: f64,
    /// Specific heat at constant strain (J/(kg K)).
    pub c_eps: f64,
    /// Thermal conductivity (W/(m K)).
    pub k_cond: f64,
    /// Reference temperature (K).
    pub t_ref: f64,
    pub n_dim: usize,
}

impl ThermoMaterial {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !(self.lambda + 2.0 * self.mu / 3.0 > 0.0) {
            return Err(CoreError::invalid("elastic moduli out of range"));
        }
        if !(self.rho > 0.0 && self.c_eps > 0.0 && self.k_cond > 0.0) {
            return Err(CoreError::invalid("thermal parameters must be positive"));
        }
        Ok(())
    }

    /// alpha * (n_dim * lambda + 2 mu): the isotropic thermal-stress modulus.
    pub fn thermal_stress_coeff(&self) -> f64 {
        self.alpha * (self.n_dim as f64 * self.lambda + 2.0 * self.mu)
    }
}

/// Poroelastic constitutive parameters; Biot quantities are derived.
#[derive(Debug, Clone)]
pub struct PoroMaterial {
    pub lambda: f64,
    pub mu: f64,
    /// Solid grain bulk modulus (Pa).
    pub k_solid: f64,
    /// Fluid bulk modulus (Pa).
    pub k_fluid: f64,
    pub porosity: f64,
    /// Isotropic hydraulic conductivity (m/s).
    pub hydraulic_conductivity: f64,
    /// Fluid weight density (N/m^3).
    pub fluid_weight_density: f64,
    /// Unit vector opposite to gravity; all zeros disables the gravity term.
    pub gravity_dir: Vec<f64>,
    pub n_dim: usize,
}

impl PoroMaterial {
    pub fn validate(&self) -> Result<()> {
        if !(self.porosity > 0.0 && self.porosity < 1.0) {
            return Err(CoreError::invalid("porosity must lie in (0,1)"));
        }
        if !(self.mu > 0.0) || !(self.skeleton_bulk() > 0.0) {
            return Err(CoreError::invalid("elastic moduli out of range"));
        }
        if self.biot_modulus_inv() < 0.0 {
            return Err(CoreError::invalid("negative storage 1/M"));
        }
        if !(self.hydraulic_conductivity > 0.0 && self.fluid_weight_density > 0.0) {
            return Err(CoreError::invalid("hydraulic parameters must be positive"));
        }
        Ok(())
    }

    /// Bulk modulus of the solid skeleton, lambda + 2 mu / 3.
    pub fn skeleton_bulk(&self) -> f64 {
        self.lambda + 2.0 * self.mu / 3.0
    }

    /// Biot coefficient, 1 - K_b / K_s.
    pub fn biot_alpha(&self) -> f64 {
        1.0 - self.skeleton_bulk() / self.k_solid
    }

    /// Inverse Biot modulus, phi/K_f + (alpha' - phi)/K_s.
    pub fn biot_modulus_inv(&self) -> f64 {
        self.porosity / self.k_fluid + (self.biot_alpha() - self.porosity) / self.k_solid
    }

    /// Darcy mobility K_I / mu_f = K_H / gamma_f.
    pub fn mobility(&self) -> f64 {
        self.hydraulic_conductivity / self.fluid_weight_density
    }
}

/// Which coupled problem a solver run addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Problem {
    Thermo,
    Poro,
}

impl Problem {
    pub fn z_name(&self) -> &'static str {
        match self {
            Problem::Thermo => "temperature_change",
            Problem::Poro => "pressure",
        }
    }
}

pub type ScalarField = Box<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;
pub type VectorField = Box<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;

/// Per-component displacement constraint: `None` leaves a component free
/// (roller supports).
pub type ComponentConstraints = Vec<Option<ScalarField>>;

/// All transient loading and boundary data for one simulation.
///
/// Every field is evaluable at any point and time; tags must exist in the
/// mesh, which assembly validates up front.
#[derive(Default)]
pub struct LoadSpec {
    /// Mechanical body force b (N/m^3) over the domain.
    pub body_force: Option<VectorField>,
    /// Boundary tractions (tag, t-bar in Pa).
    pub tractions: Vec<(String, VectorField)>,
    /// Heat source r (W/m^3) or fluid source Q_f (1/s).
    pub volume_source: Option<ScalarField>,
    /// Outward boundary flux (tag, Q-bar in W/m^2 or q-bar_f in m/s).
    pub boundary_flux: Vec<(String, ScalarField)>,
    /// Displacement constraints per tag, one optional function per component.
    pub dirichlet_u: Vec<(String, ComponentConstraints)>,
    /// Scalar-field constraints per tag (temperature change or pressure).
    pub dirichlet_z: Vec<(String, ScalarField)>,
}

impl LoadSpec {
    pub fn validate_tags(&self, mesh: &StructuredMesh) -> Result<()> {
        let mut check = |tag: &str| -> Result<()> {
            if mesh.has_tag(tag) {
                Ok(())
            } else {
                Err(CoreError::not_found(format!("boundary tag '{tag}' in load spec")))
            }
        };
        for (t, _) in &self.tractions {
            check(t)?;
        }
        for (t, _) in &self.boundary_flux {
            check(t)?;
        }
        for (t, _) in &self.dirichlet_u {
            check(t)?;
        }
        for (t, _) in &self.dirichlet_z {
            check(t)?;
        }
        Ok(())
    }

    /// Fix all displacement components to zero on a tag.
    pub fn clamp_u(&mut self, tag: &str, dim: usize) {
        let comps: ComponentConstraints = (0..dim)
            .map(|_| Some(Box::new(|_: &[f64], _: f64| 0.0) as ScalarField))
            .collect();
        self.dirichlet_u.push((tag.to_string(), comps));
    }

    /// Fix a single displacement component to zero on a tag (roller).
    pub fn roller(&mut self, tag: &str, dim: usize, component: usize) {
        let comps: ComponentConstraints = (0..dim)
            .map(|c| {
                if c == component {
                    Some(Box::new(|_: &[f64], _: f64| 0.0) as ScalarField)
                } else {
                    None
                }
            })
            .collect();
        self.dirichlet_u.push((tag.to_string(), comps));
    }
}

/// Nodal fields at one time step.
#[derive(Debug, Clone)]
pub struct TransientState {
    pub step: usize,
    pub time: f64,
    /// Displacements, flat node-major: u[node * dim + component].
    pub u: Vec<f64>,
    /// Coupled scalar field: temperature change (thermo) or pressure (poro).
    pub z: Vec<f64>,
    /// Nodal strain trace tr(eps), recomputable from u.
    pub strain_trace: Vec<f64>,
}

impl TransientState {
    pub fn zeros(mesh: &StructuredMesh) -> TransientState {
        TransientState {
            step: 0,
            time: 0.0,
            u: vec![0.0; mesh.n_nodes() * mesh.dim],
            z: vec![0.0; mesh.n_nodes()],
            strain_trace: vec![0.0; mesh.n_nodes()],
        }
    }
}

/// Field-major dof numbering: displacements first, then the scalar field.
#[derive(Debug, Clone, Copy)]
pub struct DofMap {
    pub n_nodes: usize,
    pub n_dim: usize,
    pub has_scalar: bool,
}

impl DofMap {
    pub fn u_dof(&self, node: usize, comp: usize) -> usize {
        node * self.n_dim + comp
    }

    pub fn z_dof(&self, node: usize) -> usize {
        debug_assert!(self.has_scalar);
        self.n_nodes * self.n_dim + node
    }

    pub fn total(&self) -> usize {
        self.n_nodes * self.n_dim + if self.has_scalar { self.n_nodes } else { 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn biot_relations() {
        // Excavation-style parameters.
        let m = PoroMaterial {
            lambda: 8.375e6,
            mu: 5.58e6,
            k_solid: 55556e6,
            k_fluid: 2200e6,
            porosity: 0.4,
            hydraulic_conductivity: 1e-4,
            fluid_weight_density: 9810.0,
            gravity_dir: vec![0.0, 1.0],
            n_dim: 2,
        };
        m.validate().unwrap();
        let kb = 8.375e6 + 2.0 * 5.58e6 / 3.0;
        assert!((m.skeleton_bulk() - kb).abs() < 1.0);
        assert!((m.biot_alpha() - (1.0 - kb / 55556e6)).abs() < 1e-12);
        let inv_m = 0.4 / 2200e6 + (m.biot_alpha() - 0.4) / 55556e6;
        assert!((m.biot_modulus_inv() - inv_m).abs() < 1e-20);
        assert!(m.biot_alpha() > 0.99); // nearly incompressible grains
    }

    #[test]
    fn thermal_stress_coeff_plane() {
        let m = ThermoMaterial {
            lambda: 40e9,
            mu: 27e9,
            alpha: 2.31e-5,
            rho: 2700.0,
            c_eps: 910.0,
            k_cond: 237.0,
            t_ref: 293.0,
            n_dim: 3,
        };
        m.validate().unwrap();
        let expect = 2.31e-5 * (3.0 * 40e9 + 2.0 * 27e9);
        assert!((m.thermal_stress_coeff() - expect).abs() < 1e-3);
    }

    #[test]
    fn dof_map_layout() {
        let d = DofMap {
            n_nodes: 10,
            n_dim: 2,
            has_scalar: true,
        };
        assert_eq!(d.u_dof(3, 1), 7);
        assert_eq!(d.z_dof(0), 20);
        assert_eq!(d.total(), 30);
        let m = DofMap {
            has_scalar: false,
            ..d
        };
        assert_eq!(m.total(), 20);
    }
}
