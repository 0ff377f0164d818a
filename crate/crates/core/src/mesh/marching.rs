//! Table-driven isosurface extraction from an [`SdfGrid`].
//!
//! Cells are processed in parallel z-slabs; vertices are welded across cells
//! by canonical edge keys (lower node index + axis), so identical zero
//! crossings are computed once per edge and shared faces stay watertight for
//! non-ambiguous cube configurations. Slab results merge in slab order,
//! keeping vertex numbering deterministic.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::grid::SdfGrid;
use crate::mesh::tables::{CORNERS, EDGE_ENDPOINTS, TRI_TABLE};
use crate::mesh::TriangleMesh;

type Vec3 = nalgebra::Vector3<f64>;

/// Edge identity: linear node index of the lower endpoint plus axis (0..3).
type EdgeKey = (usize, u8);

struct SlabOutput {
    /// Welded vertices in creation order, keyed for cross-slab dedup.
    vertices: Vec<(EdgeKey, Vec3)>,
    /// Triangles as local vertex indices.
    triangles: Vec<[u32; 3]>,
}

/// Extract the `iso` level set as a triangle mesh with outward orientation
/// (face normals point toward positive SDF). Grids without a sign change
/// yield an empty mesh.
pub fn marching_cubes(grid: &SdfGrid, iso: f64) -> TriangleMesh {
    let [nx, ny, nz] = grid.resolution();
    let cells_z = nz - 1;
    let slab_size = 8usize;
    let n_slabs = cells_z.div_ceil(slab_size);

    let slabs: Vec<SlabOutput> = (0..n_slabs)
        .into_par_iter()
        .map(|s| {
            let z0 = s * slab_size;
            let z1 = ((s + 1) * slab_size).min(cells_z);
            extract_slab(grid, iso, z0, z1)
        })
        .collect();

    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut global: HashMap<EdgeKey, u32> = HashMap::new();
    for slab in slabs {
        let mut remap = Vec::with_capacity(slab.vertices.len());
        for (key, pos) in slab.vertices {
            let idx = *global.entry(key).or_insert_with(|| {
                vertices.push(pos);
                (vertices.len() - 1) as u32
            });
            remap.push(idx);
        }
        for tri in slab.triangles {
            faces.push([
                remap[tri[0] as usize],
                remap[tri[1] as usize],
                remap[tri[2] as usize],
            ]);
        }
    }

    let colors = vertices
        .iter()
        .map(|&v| grid.sample_color(v).unwrap_or([0.5; 3]))
        .collect();
    let _ = (nx, ny);
    TriangleMesh::new(vertices, faces, Some(colors))
        .expect("marching cubes produced invalid indices")
}

fn extract_slab(grid: &SdfGrid, iso: f64, z0: usize, z1: usize) -> SlabOutput {
    let [nx, ny, _] = grid.resolution();
    let mut vertices: Vec<(EdgeKey, Vec3)> = Vec::new();
    let mut lookup: HashMap<EdgeKey, u32> = HashMap::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();

    for z in z0..z1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let mut corner_vals = [0f64; 8];
                let mut case = 0usize;
                for (i, (dx, dy, dz)) in CORNERS.iter().enumerate() {
                    let v = grid.sdf[grid.node_index(x + dx, y + dy, z + dz)];
                    corner_vals[i] = v;
                    if v < iso {
                        case |= 1 << i;
                    }
                }
                let row = &TRI_TABLE[case];
                let mut k = 0;
                while row[k] >= 0 {
                    let tri_edges = [row[k] as usize, row[k + 1] as usize, row[k + 2] as usize];
                    let mut idx = [0u32; 3];
                    for (slot, &edge) in tri_edges.iter().enumerate() {
                        let key = edge_key(grid, x, y, z, edge);
                        idx[slot] = *lookup.entry(key).or_insert_with(|| {
                            let pos = edge_vertex(grid, iso, &corner_vals, x, y, z, edge);
                            vertices.push((key, pos));
                            (vertices.len() - 1) as u32
                        });
                    }
                    // table order winds clockwise seen from the positive
                    // side under our corner layout; swap for outward normals
                    triangles.push([idx[0], idx[2], idx[1]]);
                    k += 3;
                }
            }
        }
    }
    SlabOutput {
        vertices,
        triangles,
    }
}

fn edge_key(grid: &SdfGrid, x: usize, y: usize, z: usize, edge: usize) -> EdgeKey {
    let (a, b) = EDGE_ENDPOINTS[edge];
    let ca = CORNERS[a];
    let cb = CORNERS[b];
    let base = (
        x + ca.0.min(cb.0),
        y + ca.1.min(cb.1),
        z + ca.2.min(cb.2),
    );
    let axis = if ca.0 != cb.0 {
        0
    } else if ca.1 != cb.1 {
        1
    } else {
        2
    };
    (grid.node_index(base.0, base.1, base.2), axis)
}

/// Linear zero crossing along the edge, interpolated from the canonical
/// (lower) endpoint so both adjacent cells produce bit-identical vertices.
fn edge_vertex(
    grid: &SdfGrid,
    iso: f64,
    corner_vals: &[f64; 8],
    x: usize,
    y: usize,
    z: usize,
    edge: usize,
) -> Vec3 {
    let (a, b) = EDGE_ENDPOINTS[edge];
    let (mut lo, mut hi) = (a, b);
    let ca = CORNERS[a];
    let cb = CORNERS[b];
    if (ca.0, ca.1, ca.2) > (cb.0, cb.1, cb.2) {
        std::mem::swap(&mut lo, &mut hi);
    }
    let (v0, v1) = (corner_vals[lo], corner_vals[hi]);
    let t = if (v1 - v0).abs() < 1e-300 {
        0.5
    } else {
        (iso - v0) / (v1 - v0)
    };
    let cl = CORNERS[lo];
    let ch = CORNERS[hi];
    let p0 = grid.node_pos(x + cl.0, y + cl.1, z + cl.2);
    let p1 = grid.node_pos(x + ch.0, y + ch.1, z + ch.2);
    p0 + t * (p1 - p0)
}
