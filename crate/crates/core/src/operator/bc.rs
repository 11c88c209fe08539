//! Hard Dirichlet enforcement on network output.
//!
//! For boundary parts Gamma_D1..Gamma_Dn with prescribed values g_i, the
//! constrained output is
//!
//!   G(x, t) = raw(x, t) * prod_i ell_i(x) + sum_i (1 - ell_i(x)) g_i(x, t)
//!
//! where ell_i vanishes on part i, equals 1 on the other parts' interiors, and
//! lies in (0, 1] elsewhere. Exact by construction wherever the parts'
//! prescribed values are mutually consistent.

use crate::error::{CoreError, Result};

/// Closed-form ell functions; kept as data so configurations serialize.
#[derive(Debug, Clone, PartialEq)]
pub enum DistanceFn {
    /// min(1, |x[axis] - face| / width): zero on the plane x[axis] = face,
    /// one beyond a single width.
    AxisRamp { axis: usize, face: f64, width: f64 },
}

impl DistanceFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            DistanceFn::AxisRamp { axis, face, width } => {
                ((x[*axis] - face).abs() / width).min(1.0)
            }
        }
    }
}

/// Closed-form boundary value functions g_i(x, t).
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryValueFn {
    Zero,
    Constant(f64),
    /// coeff * x[axis] * min(t / t_scale, 1): the spatially linear ramp load.
    AxisLinearRamp { coeff: f64, axis: usize, t_scale: f64 },
}

impl BoundaryValueFn {
    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        match self {
            BoundaryValueFn::Zero => 0.0,
            BoundaryValueFn::Constant(c) => *c,
            BoundaryValueFn::AxisLinearRamp { coeff, axis, t_scale } => {
                coeff * x[*axis] * (t / t_scale).min(1.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcPart {
    pub ell: DistanceFn,
    pub g: BoundaryValueFn,
}

/// The multiplicative/additive constraint wrapper, applied to every output
/// component.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BcEnforcement {
    pub parts: Vec<BcPart>,
}

impl BcEnforcement {
    pub fn ell_product(&self, x: &[f64]) -> f64 {
        self.parts.iter().map(|p| p.ell.eval(x)).product()
    }

    /// sum_i (1 - ell_i(x)) g_i(x, t)
    pub fn offset(&self, x: &[f64], t: f64) -> f64 {
        self.parts
            .iter()
            .map(|p| (1.0 - p.ell.eval(x)) * p.g.eval(x, t))
            .sum()
    }

    /// Pointwise constrained value.
    pub fn apply(&self, raw: f64, x: &[f64], t: f64) -> f64 {
        raw * self.ell_product(x) + self.offset(x, t)
    }

    /// Sample-check the ell invariants over a set of points with a part-membership
    /// predicate: on part i, ell_i = 0; on other parts' points, ell_i = 1.
    pub fn check_invariants(&self, points: &[(Vec<f64>, Option<usize>)]) -> Result<()> {
        for (x, on_part) in points {
            for (i, p) in self.parts.iter().enumerate() {
                let v = p.ell.eval(x);
                match on_part {
                    Some(k) if *k == i => {
                        if v != 0.0 {
                            return Err(CoreError::invalid(format!(
                                "ell_{i} = {v} on its own part at {x:?}"
                            )));
                        }
                    }
                    Some(_) => {
                        if (v - 1.0).abs() > 1e-12 {
                            return Err(CoreError::invalid(format!(
                                "ell_{i} = {v} on another part's interior at {x:?}"
                            )));
                        }
                    }
                    None => {
                        if !(v > 0.0 && v <= 1.0) {
                            return Err(CoreError::invalid(format!(
                                "ell_{i} = {v} outside (0,1] at {x:?}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Apply enforcement to a raw output block laid out [rows][n_nodes] for a
/// single component, with one time per row.
pub fn apply_bc_to_block(
    bc: &BcEnforcement,
    raw: &[f64],
    coords: &[f64],
    dim: usize,
    times_per_row: &[f64],
    n_nodes: usize,
) -> Vec<f64> {
    let rows = times_per_row.len();
    debug_assert_eq!(raw.len(), rows * n_nodes);
    let ell: Vec<f64> = (0..n_nodes).map(|n| bc.ell_product(&coords[n * dim..(n + 1) * dim])).collect();
    let mut out = vec![0.0; raw.len()];
    for r in 0..rows {
        let t = times_per_row[r];
        for n in 0..n_nodes {
            out[r * n_nodes + n] =
                raw[r * n_nodes + n] * ell[n] + bc.offset(&coords[n * dim..(n + 1) * dim], t);
        }
    }
    out
}
