//! Implicit-Euler transient driver for the monolithic coupled solvers.

use super::assembly::{
    assemble_poroelastic_monolithic, assemble_thermoelastic_monolithic, solve_sparse,
    AssembledSystem,
};
use super::{LoadSpec, PoroMaterial, Problem, ThermoMaterial, TransientState};
use crate::error::{CoreError, Result};
use crate::fem::strain_trace_field;
use crate::mesh::StructuredMesh;

/// Either coupled material, tagging which problem a run solves.
pub enum Material {
    Thermo(ThermoMaterial),
    Poro(PoroMaterial),
}

impl Material {
    pub fn problem(&self) -> Problem {
        match self {
            Material::Thermo(_) => Problem::Thermo,
            Material::Poro(_) => Problem::Poro,
        }
    }
}

/// Per-step solve diagnostics for the metrics CSV.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub residual: f64,
    pub u_norm: f64,
    pub z_norm: f64,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn assemble_monolithic(
    mesh: &StructuredMesh,
    mat: &Material,
    state_n: &TransientState,
    loads: &LoadSpec,
    dt: f64,
) -> Result<AssembledSystem> {
    match mat {
        Material::Thermo(m) => assemble_thermoelastic_monolithic(mesh, m, state_n, loads, dt),
        Material::Poro(m) => assemble_poroelastic_monolithic(mesh, m, state_n, loads, dt),
    }
}

/// March the fully coupled solver `n_steps` implicit-Euler steps from zero
/// initial conditions. Returns the state at every step, including the initial
/// one, so states[k] is step k.
pub fn run_monolithic_transient(
    mesh: &StructuredMesh,
    mat: &Material,
    loads: &LoadSpec,
    dt: f64,
    n_steps: usize,
) -> Result<(Vec<TransientState>, Vec<StepRecord>)> {
    if n_steps == 0 {
        return Err(CoreError::invalid("n_steps must be >= 1"));
    }
    let nn = mesh.n_nodes();
    let dim = mesh.dim;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut records = Vec::with_capacity(n_steps);
    states.push(TransientState::zeros(mesh));

    for step in 1..=n_steps {
        let annotate = |e: CoreError| match e {
            CoreError::Assembly(m) => CoreError::Assembly(format!("step {step}: {m}")),
            CoreError::Solver { iterations, residual } => CoreError::Assembly(format!(
                "step {step}: solver failed after {iterations} iterations (residual {residual:e})"
            )),
            other => other,
        };
        let prev = states.last().unwrap();
        let assembled = assemble_monolithic(mesh, mat, prev, loads, dt).map_err(annotate)?;
        let system = assembled.constrain().map_err(annotate)?;
        let x = solve_sparse(&system).map_err(annotate)?;

        let mut u = vec![0.0; nn * dim];
        let mut z = vec![0.0; nn];
        u.copy_from_slice(&x[..nn * dim]);
        z.copy_from_slice(&x[nn * dim..]);
        let strain_trace = strain_trace_field(mesh, &u)?;
        let time = prev.time + dt;

        let mut ax = vec![0.0; x.len()];
        system.matrix.matvec(&x, &mut ax);
        let rnorm = ax
            .iter()
            .zip(&system.rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let bnorm = l2(&system.rhs).max(1e-300);

        records.push(StepRecord {
            step,
            time,
            residual: rnorm / bnorm,
            u_norm: l2(&u),
            z_norm: l2(&z),
        });
        states.push(TransientState {
            step,
            time,
            u,
            z,
            strain_trace,
        });
    }
    Ok((states, records))
}

/// Residual of the unconstrained operator at constrained scalar rows: the
/// discrete reaction fluxes through Dirichlet boundaries.
pub fn scalar_reactions(assembled: &AssembledSystem, solution: &[f64]) -> Vec<(usize, f64)> {
    let d = assembled.dof_map;
    assembled
        .reactions(solution)
        .into_iter()
        .filter(|(dof, _)| *dof >= d.n_nodes * d.n_dim)
        .map(|(dof, r)| (dof - d.n_nodes * d.n_dim, r))
        .collect()
}
