//! Structured quad/hex meshes with boundary tagging and sensor grids.
//!
//! Meshes are tensor-product grids of bilinear quads (2D) or trilinear hexes
//! (3D). Nodes are ordered lexicographically with x fastest, i.e. by (z, y, x),
//! so dataset files are deterministic across runs. Curved geometries (the
//! annulus) are realized by mapping node coordinates of a parameter-space box;
//! connectivity, boundary tags, and sensor placement always live in parameter
//! space.
//!
//! Boundary tag convention (parameter axes):
//! - 2D: `left`/`right` on axis 0, `bottom`/`top` on axis 1.
//! - 3D: `left`/`right` on axis 0, `front`/`back` on axis 1, `bottom`/`top` on axis 2.

use crate::error::{CoreError, Result};

/// One exterior cell face: its node indices and the tag it carries.
#[derive(Debug, Clone)]
pub struct BoundaryFace {
    /// Node indices of the face (2 in 2D, 4 in 3D), consistent orientation.
    pub nodes: Vec<usize>,
    /// Owning cell index.
    pub cell: usize,
    /// Tag label, e.g. "left".
    pub tag: String,
}

/// Tensor-product mesh of bilinear quads / trilinear hexes.
#[derive(Debug, Clone)]
pub struct StructuredMesh {
    pub dim: usize,
    /// Cells per axis.
    pub divisions: Vec<usize>,
    /// Physical length per parameter axis (m).
    pub extent: Vec<f64>,
    /// Physical node coordinates, flat row-major: node i at nodes[i*dim..(i+1)*dim].
    nodes: Vec<f64>,
    /// Parameter-space node coordinates (identical to `nodes` for unmapped meshes).
    param_nodes: Vec<f64>,
    /// Cell connectivity, flat with `nodes_per_cell` stride, VTK vertex order.
    cells: Vec<usize>,
    boundary_faces: Vec<BoundaryFace>,
}

/// Fixed locations where an input function is sampled for a branch network.
#[derive(Debug, Clone)]
pub struct SensorGrid {
    /// Physical coordinates, flat row-major (`count` x `dim`).
    pub locations: Vec<f64>,
    /// Parameter-space coordinates used for field interpolation.
    pub param_locations: Vec<f64>,
    /// "domain" or a boundary tag.
    pub source: String,
    pub count: usize,
    pub dim: usize,
}

impl StructuredMesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len() / self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len() / self.nodes_per_cell()
    }

    pub fn nodes_per_cell(&self) -> usize {
        1 << self.dim
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn param_node(&self, i: usize) -> &[f64] {
        &self.param_nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cell(&self, c: usize) -> &[usize] {
        let npc = self.nodes_per_cell();
        &self.cells[c * npc..(c + 1) * npc]
    }

    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.boundary_faces
    }

    /// All faces carrying `tag`, in construction order.
    pub fn faces_with_tag<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a BoundaryFace> {
        self.boundary_faces.iter().filter(move |f| f.tag == tag)
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.boundary_faces.iter().any(|f| f.tag == tag)
    }

    pub fn tags(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for f in &self.boundary_faces {
            if !out.iter().any(|t| t == &f.tag) {
                out.push(f.tag.clone());
            }
        }
        out
    }

    /// Node indices on faces tagged `tag`, sorted ascending.
    pub fn boundary_nodes(&self, tag: &str) -> Result<Vec<usize>> {
        if !self.has_tag(tag) {
            return Err(CoreError::not_found(format!("boundary tag '{tag}'")));
        }
        let mut seen = vec![false; self.n_nodes()];
        for f in self.faces_with_tag(tag) {
            for &n in &f.nodes {
                seen[n] = true;
            }
        }
        Ok((0..self.n_nodes()).filter(|&i| seen[i]).collect())
    }

    /// Apply a coordinate mapping to every node, keeping parameter-space data.
    ///
    /// Fails if the mapping folds any cell (non-positive Jacobian at a
    /// quadrature point).
    pub fn map_coordinates<F>(&self, f: F) -> Result<StructuredMesh>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let mut mapped = self.clone();
        for i in 0..self.n_nodes() {
            let x = f(self.param_node(i));
            if x.len() != self.dim {
                return Err(CoreError::invalid("mapping changed coordinate dimension"));
            }
            mapped.nodes[i * self.dim..(i + 1) * self.dim].copy_from_slice(&x);
        }
        mapped.validate()?;
        Ok(mapped)
    }

    /// Check the cell-Jacobian invariant: strictly positive at all 2^dim Gauss points.
    pub fn validate(&self) -> Result<()> {
        let quad = gauss_points(self.dim);
        for c in 0..self.n_cells() {
            for (pt, _) in &quad {
                let det = self.jacobian_det(c, pt);
                if det <= 0.0 {
                    return Err(CoreError::Assembly(format!(
                        "cell {c} has non-positive Jacobian ({det:e})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn jacobian_det(&self, cell: usize, xi: &[f64]) -> f64 {
        let dim = self.dim;
        let conn = self.cell(cell);
        let grads = shape_grads(dim, xi);
        let mut j = vec![0.0; dim * dim];
        for (l, &n) in conn.iter().enumerate() {
            let x = self.node(n);
            for a in 0..dim {
                for b in 0..dim {
                    j[a * dim + b] += x[a] * grads[l * dim + b];
                }
            }
        }
        det(&j, dim)
    }

    /// Multilinear interpolation of a nodal scalar field at a parameter-space point.
    pub fn interpolate_param(&self, field: &[f64], p: &[f64]) -> f64 {
        debug_assert_eq!(field.len(), self.n_nodes());
        let dim = self.dim;
        let mut idx = vec![0usize; dim];
        let mut loc = vec![0.0f64; dim];
        for a in 0..dim {
            let h = self.extent[a] / self.divisions[a] as f64;
            let mut i = (p[a] / h).floor() as isize;
            i = i.clamp(0, self.divisions[a] as isize - 1);
            idx[a] = i as usize;
            loc[a] = (p[a] - idx[a] as f64 * h) / h; // in [0,1] within the cell
        }
        let cell = self.cell_index(&idx);
        let conn = self.cell(cell);
        let mut value = 0.0;
        // Reference coords of the VTK-ordered vertices are {-1,1}^dim.
        for (l, &n) in conn.iter().enumerate() {
            let mut w = 1.0;
            let corner = vertex_offset(dim, l);
            for a in 0..dim {
                w *= if corner[a] == 1 { loc[a] } else { 1.0 - loc[a] };
            }
            value += w * field[n];
        }
        value
    }

    fn cell_index(&self, idx: &[usize]) -> usize {
        match self.dim {
            2 => idx[1] * self.divisions[0] + idx[0],
            3 => (idx[2] * self.divisions[1] + idx[1]) * self.divisions[0] + idx[0],
            _ => unreachable!(),
        }
    }
}

/// Per-axis offsets of the VTK-ordered cell vertices (0 = low side, 1 = high side).
pub(crate) fn vertex_offset(dim: usize, local: usize) -> [usize; 3] {
    // 2D: (0,0) (1,0) (1,1) (0,1); 3D adds the same square shifted in z.
    const QUAD: [[usize; 2]; 4] = [[0, 0], [1, 0], [1, 1], [0, 1]];
    match dim {
        2 => {
            let q = QUAD[local];
            [q[0], q[1], 0]
        }
        3 => {
            let q = QUAD[local % 4];
            [q[0], q[1], local / 4]
        }
        _ => unreachable!(),
    }
}

/// Shape-function values of the 2^dim multilinear element at reference point xi.
pub fn shape_values(dim: usize, xi: &[f64]) -> Vec<f64> {
    let npc = 1 << dim;
    let mut out = vec![0.0; npc];
    for l in 0..npc {
        let corner = vertex_offset(dim, l);
        let mut v = 1.0;
        for a in 0..dim {
            let s = if corner[a] == 1 { 1.0 } else { -1.0 };
            v *= 0.5 * (1.0 + s * xi[a]);
        }
        out[l] = v;
    }
    out
}

/// Reference-space gradients, flat [local_node][axis].
pub fn shape_grads(dim: usize, xi: &[f64]) -> Vec<f64> {
    let npc = 1 << dim;
    let mut out = vec![0.0; npc * dim];
    for l in 0..npc {
        let corner = vertex_offset(dim, l);
        for b in 0..dim {
            let mut v = 1.0;
            for a in 0..dim {
                let s = if corner[a] == 1 { 1.0 } else { -1.0 };
                if a == b {
                    v *= 0.5 * s;
                } else {
                    v *= 0.5 * (1.0 + s * xi[a]);
                }
            }
            out[l * dim + b] = v;
        }
    }
    out
}

/// 2-point Gauss rule per axis: (reference point, weight) pairs.
pub fn gauss_points(dim: usize) -> Vec<(Vec<f64>, f64)> {
    let g = 1.0 / 3.0_f64.sqrt();
    let pts = [-g, g];
    let mut out = Vec::with_capacity(1 << dim);
    match dim {
        2 => {
            for &b in &pts {
                for &a in &pts {
                    out.push((vec![a, b], 1.0));
                }
            }
        }
        3 => {
            for &c in &pts {
                for &b in &pts {
                    for &a in &pts {
                        out.push((vec![a, b, c], 1.0));
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

fn det(m: &[f64], dim: usize) -> f64 {
    match dim {
        2 => m[0] * m[3] - m[1] * m[2],
        3 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => unreachable!(),
    }
}

/// Build an axis-aligned structured grid.
///
/// Nodes are ordered lexicographically with x fastest; cells likewise.
pub fn build_structured_grid(dim: usize, divisions: &[usize], extent: &[f64]) -> Result<StructuredMesh> {
    if dim != 2 && dim != 3 {
        return Err(CoreError::invalid(format!("dim must be 2 or 3, got {dim}")));
    }
    if divisions.len() != dim || extent.len() != dim {
        return Err(CoreError::invalid("divisions/extent length must equal dim"));
    }
    if divisions.iter().any(|&d| d == 0) {
        return Err(CoreError::invalid("all divisions must be >= 1"));
    }
    if extent.iter().any(|&e| !(e > 0.0)) {
        return Err(CoreError::invalid("all extents must be > 0"));
    }

    let nd: Vec<usize> = divisions.iter().map(|&d| d + 1).collect();
    let n_nodes: usize = nd.iter().product();
    let h: Vec<f64> = (0..dim).map(|a| extent[a] / divisions[a] as f64).collect();

    let mut nodes = Vec::with_capacity(n_nodes * dim);
    if dim == 2 {
        for j in 0..nd[1] {
            for i in 0..nd[0] {
                nodes.push(i as f64 * h[0]);
                nodes.push(j as f64 * h[1]);
            }
        }
    } else {
        for k in 0..nd[2] {
            for j in 0..nd[1] {
                for i in 0..nd[0] {
                    nodes.push(i as f64 * h[0]);
                    nodes.push(j as f64 * h[1]);
                    nodes.push(k as f64 * h[2]);
                }
            }
        }
    }

    let node_id = |i: usize, j: usize, k: usize| -> usize {
        if dim == 2 {
            j * nd[0] + i
        } else {
            (k * nd[1] + j) * nd[0] + i
        }
    };

    let mut cells = Vec::new();
    if dim == 2 {
        for j in 0..divisions[1] {
            for i in 0..divisions[0] {
                cells.extend_from_slice(&[
                    node_id(i, j, 0),
                    node_id(i + 1, j, 0),
                    node_id(i + 1, j + 1, 0),
                    node_id(i, j + 1, 0),
                ]);
            }
        }
    } else {
        for k in 0..divisions[2] {
            for j in 0..divisions[1] {
                for i in 0..divisions[0] {
                    cells.extend_from_slice(&[
                        node_id(i, j, k),
                        node_id(i + 1, j, k),
                        node_id(i + 1, j + 1, k),
                        node_id(i, j + 1, k),
                        node_id(i, j, k + 1),
                        node_id(i + 1, j, k + 1),
                        node_id(i + 1, j + 1, k + 1),
                        node_id(i, j + 1, k + 1),
                    ]);
                }
            }
        }
    }

    let mut boundary_faces = Vec::new();
    let tag_for = |axis: usize, high: bool| -> &'static str {
        match (dim, axis, high) {
            (_, 0, false) => "left",
            (_, 0, true) => "right",
            (2, 1, false) => "bottom",
            (2, 1, true) => "top",
            (3, 1, false) => "front",
            (3, 1, true) => "back",
            (3, 2, false) => "bottom",
            (3, 2, true) => "top",
            _ => unreachable!(),
        }
    };

    if dim == 2 {
        let cid = |i: usize, j: usize| j * divisions[0] + i;
        for j in 0..divisions[1] {
            boundary_faces.push(BoundaryFace {
                nodes: vec![node_id(0, j, 0), node_id(0, j + 1, 0)],
                cell: cid(0, j),
                tag: tag_for(0, false).into(),
            });
            boundary_faces.push(BoundaryFace {
                nodes: vec![node_id(divisions[0], j, 0), node_id(divisions[0], j + 1, 0)],
                cell: cid(divisions[0] - 1, j),
                tag: tag_for(0, true).into(),
            });
        }
        for i in 0..divisions[0] {
            boundary_faces.push(BoundaryFace {
                nodes: vec![node_id(i, 0, 0), node_id(i + 1, 0, 0)],
                cell: cid(i, 0),
                tag: tag_for(1, false).into(),
            });
            boundary_faces.push(BoundaryFace {
                nodes: vec![node_id(i, divisions[1], 0), node_id(i + 1, divisions[1], 0)],
                cell: cid(i, divisions[1] - 1),
                tag: tag_for(1, true).into(),
            });
        }
    } else {
        let cid = |i: usize, j: usize, k: usize| (k * divisions[1] + j) * divisions[0] + i;
        for k in 0..divisions[2] {
            for j in 0..divisions[1] {
                boundary_faces.push(BoundaryFace {
                    nodes: vec![
                        node_id(0, j, k),
                        node_id(0, j + 1, k),
                        node_id(0, j + 1, k + 1),
                        node_id(0, j, k + 1),
                    ],
                    cell: cid(0, j, k),
                    tag: tag_for(0, false).into(),
                });
                boundary_faces.push(BoundaryFace {
                    nodes: vec![
                        node_id(divisions[0], j, k),
                        node_id(divisions[0], j + 1, k),
                        node_id(divisions[0], j + 1, k + 1),
                        node_id(divisions[0], j, k + 1),
                    ],
                    cell: cid(divisions[0] - 1, j, k),
                    tag: tag_for(0, true).into(),
                });
            }
        }
        for k in 0..divisions[2] {
            for i in 0..divisions[0] {
                boundary_faces.push(BoundaryFace {
                    nodes: vec![
                        node_id(i, 0, k),
                        node_id(i + 1, 0, k),
                        node_id(i + 1, 0, k + 1),
                        node_id(i, 0, k + 1),
                    ],
                    cell: cid(i, 0, k),
                    tag: tag_for(1, false).into(),
                });
                boundary_faces.push(BoundaryFace {
                    nodes: vec![
                        node_id(i, divisions[1], k),
                        node_id(i + 1, divisions[1], k),
                        node_id(i + 1, divisions[1], k + 1),
                        node_id(i, divisions[1], k + 1),
                    ],
                    cell: cid(i, divisions[1] - 1, k),
                    tag: tag_for(1, true).into(),
                });
            }
        }
        for j in 0..divisions[1] {
            for i in 0..divisions[0] {
                boundary_faces.push(BoundaryFace {
                    nodes: vec![
                        node_id(i, j, 0),
                        node_id(i + 1, j, 0),
                        node_id(i + 1, j + 1, 0),
                        node_id(i, j + 1, 0),
                    ],
                    cell: cid(i, j, 0),
                    tag: tag_for(2, false).into(),
                });
                boundary_faces.push(BoundaryFace {
                    nodes: vec![
                        node_id(i, j, divisions[2]),
                        node_id(i + 1, j, divisions[2]),
                        node_id(i + 1, j + 1, divisions[2]),
                        node_id(i, j + 1, divisions[2]),
                    ],
                    cell: cid(i, j, divisions[2] - 1),
                    tag: tag_for(2, true).into(),
                });
            }
        }
    }

    let mesh = StructuredMesh {
        dim,
        divisions: divisions.to_vec(),
        extent: extent.to_vec(),
        param_nodes: nodes.clone(),
        nodes,
        cells,
        boundary_faces,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Select equally spaced sensor locations spanning the domain or one boundary.
///
/// A count of 1 along an axis degenerates to that axis' midpoint; otherwise the
/// points include both extremes. For a boundary source the counts refer to the
/// face's intrinsic axes.
pub fn select_sensor_grid(
    mesh: &StructuredMesh,
    per_axis_counts: &[usize],
    source: &str,
) -> Result<SensorGrid> {
    if per_axis_counts.iter().any(|&c| c == 0) {
        return Err(CoreError::invalid("sensor counts must be >= 1"));
    }

    // Parameter-space ranges to span: whole box, or one face with its axis pinned.
    let (axes, pinned): (Vec<usize>, Vec<(usize, f64)>) = if source == "domain" {
        if per_axis_counts.len() != mesh.dim {
            return Err(CoreError::invalid("domain sensor grid needs one count per axis"));
        }
        ((0..mesh.dim).collect(), Vec::new())
    } else {
        if !mesh.has_tag(source) {
            return Err(CoreError::not_found(format!("boundary tag '{source}'")));
        }
        let (axis, high) = face_axis(mesh.dim, source)?;
        let free: Vec<usize> = (0..mesh.dim).filter(|&a| a != axis).collect();
        if per_axis_counts.len() != free.len() {
            return Err(CoreError::invalid(
                "boundary sensor grid needs one count per intrinsic axis",
            ));
        }
        let coord = if high { mesh.extent[axis] } else { 0.0 };
        (free, vec![(axis, coord)])
    };

    let positions: Vec<Vec<f64>> = axes
        .iter()
        .zip(per_axis_counts)
        .map(|(&a, &c)| axis_positions(mesh.extent[a], c))
        .collect();

    let count: usize = per_axis_counts.iter().product();
    let mut param = Vec::with_capacity(count * mesh.dim);
    let mut idx = vec![0usize; axes.len()];
    loop {
        let mut p = vec![0.0; mesh.dim];
        for (k, &a) in axes.iter().enumerate() {
            p[a] = positions[k][idx[k]];
        }
        for &(a, v) in &pinned {
            p[a] = v;
        }
        param.extend_from_slice(&p);
        // odometer increment, first axis fastest
        let mut k = 0;
        loop {
            if k == idx.len() {
                break;
            }
            idx[k] += 1;
            if idx[k] < positions[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == idx.len() {
            break;
        }
    }

    // Physical coordinates via multilinear interpolation of nodal coordinates
    // (identity for unmapped meshes).
    let mut locations = Vec::with_capacity(param.len());
    for s in 0..count {
        let p = &param[s * mesh.dim..(s + 1) * mesh.dim];
        for a in 0..mesh.dim {
            let comp: Vec<f64> = (0..mesh.n_nodes()).map(|n| mesh.node(n)[a]).collect();
            locations.push(mesh.interpolate_param(&comp, p));
        }
    }

    Ok(SensorGrid {
        locations,
        param_locations: param,
        source: source.to_string(),
        count,
        dim: mesh.dim,
    })
}

fn axis_positions(extent: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        vec![extent / 2.0]
    } else {
        (0..count)
            .map(|i| extent * i as f64 / (count - 1) as f64)
            .collect()
    }
}

fn face_axis(dim: usize, tag: &str) -> Result<(usize, bool)> {
    let r = match (dim, tag) {
        (_, "left") => (0, false),
        (_, "right") => (0, true),
        (2, "bottom") => (1, false),
        (2, "top") => (1, true),
        (3, "front") => (1, false),
        (3, "back") => (1, true),
        (3, "bottom") => (2, false),
        (3, "top") => (2, true),
        _ => return Err(CoreError::not_found(format!("boundary tag '{tag}'"))),
    };
    Ok(r)
}

/// Sample a nodal scalar field at every sensor of a grid.
pub fn sample_field_at_sensors(mesh: &StructuredMesh, grid: &SensorGrid, field: &[f64]) -> Vec<f64> {
    (0..grid.count)
        .map(|s| mesh.interpolate_param(field, &grid.param_locations[s * grid.dim..(s + 1) * grid.dim]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cube_grid_counts_match_closed_form() {
        let m = build_structured_grid(3, &[10, 10, 10], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(m.n_nodes(), 1331);
        assert_eq!(m.n_cells(), 1000);
    }

    #[test]
    fn smallest_grid() {
        let m = build_structured_grid(2, &[1, 1], &[1.0, 1.0]).unwrap();
        assert_eq!(m.n_nodes(), 4);
        assert_eq!(m.n_cells(), 1);
    }

    #[test]
    fn lexicographic_ordering() {
        // Hand enumeration: 2x3 cells on [0,2]x[0,3], unit spacing, x fastest.
        let m = build_structured_grid(2, &[2, 3], &[2.0, 3.0]).unwrap();
        assert_eq!(m.n_nodes(), 12);
        assert_eq!(m.n_cells(), 6);
        assert_eq!(m.node(0), &[0.0, 0.0]);
        assert_eq!(m.node(1), &[1.0, 0.0]);
        assert_eq!(m.node(3), &[0.0, 1.0]);
        assert_eq!(m.node(11), &[2.0, 3.0]);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(build_structured_grid(2, &[0, 1], &[1.0, 1.0]).is_err());
        assert!(build_structured_grid(2, &[1, 1], &[0.0, 1.0]).is_err());
        assert!(build_structured_grid(4, &[1, 1, 1, 1], &[1.0; 4]).is_err());
    }

    #[test]
    fn domain_sensor_grid_cube() {
        let m = build_structured_grid(3, &[10, 10, 10], &[1.0, 1.0, 1.0]).unwrap();
        let g = select_sensor_grid(&m, &[8, 8, 8], "domain").unwrap();
        assert_eq!(g.count, 512);
    }

    #[test]
    fn domain_sensor_grid_unit_square_3x3() {
        let m = build_structured_grid(2, &[2, 2], &[1.0, 1.0]).unwrap();
        let g = select_sensor_grid(&m, &[3, 3], "domain").unwrap();
        assert_eq!(g.count, 9);
        let expect = [0.0, 0.5, 1.0];
        let mut found = 0;
        for &ex in &expect {
            for &ey in &expect {
                for s in 0..9 {
                    let p = &g.locations[s * 2..s * 2 + 2];
                    if (p[0] - ex).abs() < 1e-14 && (p[1] - ey).abs() < 1e-14 {
                        found += 1;
                        break;
                    }
                }
            }
        }
        assert_eq!(found, 9);
    }

    #[test]
    fn boundary_sensor_midpoint() {
        let m = build_structured_grid(2, &[4, 4], &[2.0, 2.0]).unwrap();
        let g = select_sensor_grid(&m, &[1], "left").unwrap();
        assert_eq!(g.count, 1);
        assert_eq!(&g.locations, &[0.0, 1.0]);
        assert!(select_sensor_grid(&m, &[1], "nope").is_err());
    }

    #[test]
    fn boundary_nodes_examples() {
        let m = build_structured_grid(2, &[2, 2], &[1.0, 1.0]).unwrap();
        let left = m.boundary_nodes("left").unwrap();
        assert_eq!(left.len(), 3);
        for &n in &left {
            assert_eq!(m.node(n)[0], 0.0);
        }

        let one = build_structured_grid(2, &[1, 1], &[1.0, 1.0]).unwrap();
        assert_eq!(one.boundary_nodes("top").unwrap().len(), 2);

        let cube = build_structured_grid(3, &[10, 10, 10], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(cube.boundary_nodes("left").unwrap().len(), 121);
        assert!(cube.boundary_nodes("nope").is_err());
    }

    #[test]
    fn every_exterior_face_tagged_once() {
        for (dim, div) in [(2usize, vec![3usize, 2]), (3, vec![2, 3, 2])] {
            let ext = vec![1.0; dim];
            let m = build_structured_grid(dim, &div, &ext).unwrap();
            let expected: usize = match dim {
                2 => 2 * (div[0] + div[1]),
                _ => 2 * (div[0] * div[1] + div[1] * div[2] + div[0] * div[2]),
            };
            assert_eq!(m.boundary_faces().len(), expected);
        }
    }

    #[test]
    fn annulus_mapping_keeps_positive_jacobians() {
        // Parameter box (r in [1,2], theta in [0, pi]) mapped to a half annulus.
        let base = build_structured_grid(2, &[4, 8], &[1.0, std::f64::consts::PI]).unwrap();
        let annulus = base
            .map_coordinates(|p| {
                let r = 1.0 + p[0];
                let th = p[1];
                vec![r * th.cos(), r * th.sin()]
            })
            .unwrap();
        assert_eq!(annulus.n_nodes(), base.n_nodes());
        annulus.validate().unwrap();
    }

    #[test]
    fn interpolation_reproduces_multilinear_fields() {
        let m = build_structured_grid(2, &[3, 4], &[1.5, 2.0]).unwrap();
        let field: Vec<f64> = (0..m.n_nodes())
            .map(|i| 2.0 + 3.0 * m.node(i)[0] - 0.5 * m.node(i)[1] + m.node(i)[0] * m.node(i)[1])
            .collect();
        for p in [[0.31, 0.77], [1.49, 1.99], [0.0, 0.0], [0.75, 1.0]] {
            let v = m.interpolate_param(&field, &p);
            let exact = 2.0 + 3.0 * p[0] - 0.5 * p[1] + p[0] * p[1];
            assert!((v - exact).abs() < 1e-12, "{v} vs {exact}");
        }
    }

    proptest! {
        #[test]
        fn counts_follow_products(dx in 1usize..5, dy in 1usize..5, dz in 1usize..4) {
            let m = build_structured_grid(3, &[dx, dy, dz], &[1.0, 2.0, 0.5]).unwrap();
            prop_assert_eq!(m.n_nodes(), (dx + 1) * (dy + 1) * (dz + 1));
            prop_assert_eq!(m.n_cells(), dx * dy * dz);
        }

        #[test]
        fn sensors_symmetric_under_reflection(c in 2usize..6) {
            let m = build_structured_grid(2, &[4, 4], &[1.0, 1.0]).unwrap();
            let g = select_sensor_grid(&m, &[c, c], "domain").unwrap();
            for s in 0..g.count {
                let p = &g.locations[s * 2..s * 2 + 2];
                let mirrored = [1.0 - p[0], p[1]];
                let hit = (0..g.count).any(|t| {
                    let q = &g.locations[t * 2..t * 2 + 2];
                    (q[0] - mirrored[0]).abs() < 1e-12 && (q[1] - mirrored[1]).abs() < 1e-12
                });
                prop_assert!(hit);
            }
        }
    }
}
