//! Triangle meshes: marching-cubes extraction, largest-component floater
//! removal, and mesh -> depth-map rasterization.

mod marching;
pub mod tables;

pub use marching::marching_cubes;

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};

type Vec3 = Vector3<f64>;

/// Indexed triangle mesh with optional per-vertex RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriangleMesh {
    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            faces: Vec::new(),
            colors: None,
        }
    }

    /// Validates indices, drops exactly-degenerate faces (repeated vertex or
    /// zero area), and checks coordinates are finite.
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[u32; 3]>,
        colors: Option<Vec<[f64; 3]>>,
    ) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(c) = &colors {
            if c.len() != vertices.len() {
                return Err(Error::InvalidInput(format!(
                    "color count {} != vertex count {}",
                    c.len(),
                    vertices.len()
                )));
            }
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput("non-finite vertex coordinate".into()));
        }
        let mut kept = Vec::with_capacity(faces.len());
        for f in faces {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidInput(format!(
                    "face index {f:?} out of range (|V| = {n})"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                continue;
            }
            let a = vertices[f[0] as usize];
            let e1 = vertices[f[1] as usize] - a;
            let e2 = vertices[f[2] as usize] - a;
            if e1.cross(&e2).norm_squared() == 0.0 {
                continue;
            }
            kept.push(f);
        }
        Ok(Self {
            vertices,
            faces: kept,
            colors,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        let p = self.vertices[a as usize];
        let e1 = self.vertices[b as usize] - p;
        let e2 = self.vertices[c as usize] - p;
        0.5 * e1.cross(&e2).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f];
        let p = self.vertices[a as usize];
        let e1 = self.vertices[b as usize] - p;
        let e2 = self.vertices[c as usize] - p;
        e1.cross(&e2).normalize()
    }
}

/// Keep exactly the largest edge-connected face cluster; ties go to the
/// cluster containing the lowest face index. Unreferenced vertices are
/// dropped and indices remapped.
pub fn clean_mesh(mesh: &TriangleMesh) -> TriangleMesh {
    let keep = match largest_cluster(mesh) {
        Some(k) => k,
        None => return TriangleMesh::empty(),
    };
    rebuild_with_faces(mesh, &keep)
}

/// Relaxed variant: keep every cluster whose face count is at least
/// `min_fraction` of the largest cluster's.
pub fn clean_mesh_keep(mesh: &TriangleMesh, min_fraction: f64) -> TriangleMesh {
    if mesh.is_empty() {
        return TriangleMesh::empty();
    }
    let clusters = face_clusters(mesh);
    let max_size = clusters.iter().map(|c| c.len()).max().unwrap_or(0);
    let threshold = (min_fraction * max_size as f64).ceil() as usize;
    let mut keep: Vec<u32> = clusters
        .into_iter()
        .filter(|c| c.len() >= threshold.max(1))
        .flatten()
        .collect();
    keep.sort_unstable();
    rebuild_with_faces(mesh, &keep)
}

fn largest_cluster(mesh: &TriangleMesh) -> Option<Vec<u32>> {
    if mesh.is_empty() {
        return None;
    }
    let clusters = face_clusters(mesh);
    // largest size wins; ties resolved by smallest contained face index
    clusters
        .into_iter()
        .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
}

/// Edge-connected face clusters via union-find; each cluster's face list is
/// sorted ascending.
fn face_clusters(mesh: &TriangleMesh) -> Vec<Vec<u32>> {
    let n = mesh.faces.len();
    let mut parent: Vec<u32> = (0..n as u32).collect();
    fn find(parent: &mut [u32], mut i: u32) -> u32 {
        while parent[i as usize] != i {
            parent[i as usize] = parent[parent[i as usize] as usize];
            i = parent[i as usize];
        }
        i
    }
    let mut edge_owner: HashMap<(u32, u32), u32> = HashMap::new();
    for (f, face) in mesh.faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (face[k], face[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            match edge_owner.get(&key) {
                Some(&other) => {
                    let ra = find(&mut parent, f as u32);
                    let rb = find(&mut parent, other);
                    if ra != rb {
                        parent[ra.max(rb) as usize] = ra.min(rb);
                    }
                }
                None => {
                    edge_owner.insert(key, f as u32);
                }
            }
        }
    }
    let mut by_root: HashMap<u32, Vec<u32>> = HashMap::new();
    for f in 0..n as u32 {
        let r = find(&mut parent, f);
        by_root.entry(r).or_default().push(f);
    }
    let mut clusters: Vec<Vec<u32>> = by_root.into_values().collect();
    clusters.sort_by_key(|c| c[0]);
    clusters
}

fn rebuild_with_faces(mesh: &TriangleMesh, keep: &[u32]) -> TriangleMesh {
    let mut vertex_map: Vec<i64> = vec![-1; mesh.vertices.len()];
    let mut vertices = Vec::new();
    let mut colors = mesh.colors.as_ref().map(|_| Vec::new());
    let mut faces = Vec::with_capacity(keep.len());
    for &f in keep {
        let mut tri = [0u32; 3];
        for (k, &vi) in mesh.faces[f as usize].iter().enumerate() {
            if vertex_map[vi as usize] < 0 {
                vertex_map[vi as usize] = vertices.len() as i64;
                vertices.push(mesh.vertices[vi as usize]);
                if let (Some(dst), Some(src)) = (&mut colors, &mesh.colors) {
                    dst.push(src[vi as usize]);
                }
            }
            tri[k] = vertex_map[vi as usize] as u32;
        }
        faces.push(tri);
    }
    TriangleMesh {
        vertices,
        faces,
        colors,
    }
}

/// Sentinel for pixels no triangle covers.
pub const INVALID_DEPTH: f64 = f64::INFINITY;

/// Per-pixel camera-space z of the nearest surface.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![INVALID_DEPTH; (width as usize) * (height as usize)],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[(y as usize) * (self.width as usize) + (x as usize)]
    }

    #[inline]
    pub fn is_valid(&self, x: u32, y: u32) -> bool {
        self.get(x, y).is_finite()
    }

    /// Pixel indices with valid depth, row-major order.
    pub fn valid_pixels(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_valid(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// Z-buffered rasterization: each covered pixel gets the camera-space depth
/// of the nearest triangle along the ray through its center. Triangles with
/// any vertex at or behind the near plane are dropped.
pub fn render_depth(mesh: &TriangleMesh, camera: &Camera) -> DepthMap {
    let k = &camera.intrinsics;
    let (w, h) = (k.width, k.height);
    let mut depth = DepthMap::new(w, h);
    if mesh.is_empty() {
        return depth;
    }

    struct ScreenTri {
        cam: [Vec3; 3],
        x0: u32,
        x1: u32,
        y0: u32,
        y1: u32,
    }

    let tris: Vec<ScreenTri> = mesh
        .faces
        .iter()
        .filter_map(|f| {
            let cam: [Vec3; 3] = [
                camera.pose.world_to_camera(mesh.vertices[f[0] as usize]),
                camera.pose.world_to_camera(mesh.vertices[f[1] as usize]),
                camera.pose.world_to_camera(mesh.vertices[f[2] as usize]),
            ];
            if cam.iter().any(|v| v.z <= 1e-9) {
                return None;
            }
            let mut umin = f64::INFINITY;
            let mut umax = f64::NEG_INFINITY;
            let mut vmin = f64::INFINITY;
            let mut vmax = f64::NEG_INFINITY;
            for v in &cam {
                let u = k.fx * v.x / v.z + k.cx;
                let vv = k.fy * v.y / v.z + k.cy;
                umin = umin.min(u);
                umax = umax.max(u);
                vmin = vmin.min(vv);
                vmax = vmax.max(vv);
            }
            // pixel centers sit at index + 0.5
            let x0 = (umin - 0.5).floor().max(0.0) as i64;
            let x1 = (umax - 0.5).ceil().min(f64::from(w - 1)) as i64;
            let y0 = (vmin - 0.5).floor().max(0.0) as i64;
            let y1 = (vmax - 0.5).ceil().min(f64::from(h - 1)) as i64;
            if x0 > x1 || y0 > y1 || x1 < 0 || y1 < 0 {
                return None;
            }
            Some(ScreenTri {
                cam,
                x0: x0.max(0) as u32,
                x1: x1 as u32,
                y0: y0.max(0) as u32,
                y1: y1 as u32,
            })
        })
        .collect();

    // bin triangles by row so rows rasterize independently
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h as usize];
    for (i, t) in tris.iter().enumerate() {
        for y in t.y0..=t.y1 {
            rows[y as usize].push(i as u32);
        }
    }

    depth
        .data
        .par_chunks_mut(w as usize)
        .enumerate()
        .for_each(|(y, row_buf)| {
            for &ti in &rows[y] {
                let t = &tris[ti as usize];
                for x in t.x0..=t.x1 {
                    let dir = Vec3::new(
                        (f64::from(x) + 0.5 - k.cx) / k.fx,
                        (y as f64 + 0.5 - k.cy) / k.fy,
                        1.0,
                    );
                    if let Some(z) = ray_triangle_depth(dir, &t.cam) {
                        let cell = &mut row_buf[x as usize];
                        if z < *cell {
                            *cell = z;
                        }
                    }
                }
            }
        });
    depth
}

/// Moller-Trumbore against a camera-space triangle for the ray from the
/// origin along `dir` (z component 1), returning camera-space depth.
#[inline]
pub fn ray_triangle_depth(dir: Vec3, tri: &[Vec3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = -tri[0];
    let u = tvec.dot(&pvec) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qvec) * inv;
    if t <= 1e-12 {
        return None;
    }
    // dir.z == 1, so the ray parameter is the camera-space depth
    Some(t)
}

/// Symmetric chamfer distance between uniform surface samples of `mesh` and
/// a reference cloud. Thin wrapper over the metrics module.
pub fn chamfer_to_points(
    mesh: &TriangleMesh,
    reference: &[Vec3],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if mesh.is_empty() || reference.is_empty() {
        return Err(Error::InvalidInput(
            "chamfer_to_points needs a non-empty mesh and reference cloud".into(),
        ));
    }
    let samples = crate::metrics::sample_mesh_surface(mesh, n_samples, seed)?;
    crate::metrics::chamfer_distance(&samples, reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraIntrinsics, CameraPose};
    use crate::grid::{Aabb, SdfGrid};
    use approx::assert_relative_eq;
    use std::collections::HashMap;

    fn sphere_grid(n: usize) -> SdfGrid {
        let mut grid = SdfGrid::new([n, n, n], Aabb::centered_cube(1.0)).unwrap();
        grid.fill_from(|p| p.norm() - 0.5);
        grid
    }

    #[test]
    fn all_positive_grid_gives_empty_mesh() {
        let mut grid = SdfGrid::new([8, 8, 8], Aabb::centered_cube(1.0)).unwrap();
        grid.fill_from(|_| 1.0);
        let mesh = marching_cubes(&grid, 0.0);
        assert!(mesh.is_empty());
        assert!(mesh.vertices.is_empty());
    }

    #[test]
    fn sphere_vertices_near_radius() {
        let grid = sphere_grid(32);
        let mesh = marching_cubes(&grid, 0.0);
        assert!(!mesh.is_empty());
        let cell = 2.0 / 31.0;
        for v in &mesh.vertices {
            assert!(
                (v.norm() - 0.5).abs() <= cell,
                "vertex {v:?} off the sphere by {}",
                (v.norm() - 0.5).abs()
            );
        }
    }

    #[test]
    fn sphere_area_close_to_analytic() {
        let grid = sphere_grid(64);
        let mesh = marching_cubes(&grid, 0.0);
        let area = mesh.total_area();
        let expect = 4.0 * std::f64::consts::PI * 0.25;
        assert!(
            (area - expect).abs() / expect < 0.05,
            "area {area} vs {expect}"
        );
    }

    #[test]
    fn sphere_mesh_is_watertight_and_oriented() {
        let grid = sphere_grid(32);
        let mesh = marching_cubes(&grid, 0.0);
        // every undirected edge borders exactly two faces, once per direction
        let mut directed: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &mesh.faces {
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        for (&(a, b), &count) in &directed {
            assert_eq!(count, 1, "directed edge ({a},{b}) repeated");
            assert_eq!(
                directed.get(&(b, a)),
                Some(&1),
                "edge ({a},{b}) missing opposite direction"
            );
        }
        // Euler characteristic of a sphere
        let e = directed.len() / 2;
        let chi = mesh.vertices.len() as i64 - e as i64 + mesh.faces.len() as i64;
        assert_eq!(chi, 2);
        // outward orientation: normals point away from the center
        for f in 0..mesh.faces.len() {
            let centroid: Vec3 = mesh.faces[f]
                .iter()
                .map(|&i| mesh.vertices[i as usize])
                .sum::<Vec3>()
                / 3.0;
            assert!(
                mesh.face_normal(f).dot(&centroid.normalize()) > 0.0,
                "inward-facing triangle {f}"
            );
        }
    }

    #[test]
    fn vertices_sit_on_the_iso_level() {
        let mut grid = SdfGrid::new([16, 16, 16], Aabb::centered_cube(1.0)).unwrap();
        grid.fill_from(|p| p.norm() - 0.45);
        let iso = 0.1;
        let mesh = marching_cubes(&grid, iso);
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            let s = grid.sample_sdf(*v).unwrap();
            assert!((s - iso).abs() < 1e-9, "residual {}", s - iso);
        }
    }

    #[test]
    fn clean_keeps_sphere_and_drops_floater_cube() {
        // sphere plus a small detached cube in the corner
        let mut grid = SdfGrid::new([48, 48, 48], Aabb::centered_cube(1.0)).unwrap();
        grid.fill_from(|p| {
            let sphere = p.norm() - 0.45;
            let q = (p - Vec3::new(0.75, 0.75, 0.75)).abs().add_scalar(-0.1);
            let cube = q.sup(&Vec3::zeros()).norm() + q.max().min(0.0);
            sphere.min(cube)
        });
        let mesh = marching_cubes(&grid, 0.0);
        let cleaned = clean_mesh(&mesh);
        assert!(cleaned.faces.len() < mesh.faces.len());
        // everything that survives lies on the sphere
        for v in &cleaned.vertices {
            assert!((v.norm() - 0.45).abs() < 0.1, "floater vertex {v:?}");
        }
        // idempotent
        let again = clean_mesh(&cleaned);
        assert_eq!(again, cleaned);
    }

    #[test]
    fn clean_single_component_only_reindexes() {
        let grid = sphere_grid(24);
        let mesh = marching_cubes(&grid, 0.0);
        let cleaned = clean_mesh(&mesh);
        assert_eq!(cleaned.faces.len(), mesh.faces.len());
        assert_eq!(cleaned.total_area(), mesh.total_area());
    }

    #[test]
    fn clean_two_disjoint_triangles_keeps_first() {
        let vertices = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(5.0, 0.0, 0.0),
            Vec3::new(6.0, 0.0, 0.0),
            Vec3::new(5.0, 1.0, 0.0),
        ];
        let faces = vec![[0, 1, 2], [3, 4, 5]];
        let mesh = TriangleMesh::new(vertices, faces, None).unwrap();
        let cleaned = clean_mesh(&mesh);
        assert_eq!(cleaned.faces.len(), 1);
        assert_eq!(cleaned.vertices[0], Vec3::new(0.0, 0.0, 0.0));
    }

    #[test]
    fn clean_empty_mesh_is_empty() {
        assert!(clean_mesh(&TriangleMesh::empty()).is_empty());
    }

    fn test_camera(size: u32) -> Camera {
        Camera::new(
            CameraIntrinsics::new(
                f64::from(size),
                f64::from(size),
                f64::from(size) / 2.0,
                f64::from(size) / 2.0,
                size,
                size,
            )
            .unwrap(),
            CameraPose::identity(),
        )
    }

    #[test]
    fn depth_of_single_triangle_at_z2() {
        let cam = test_camera(32);
        // triangle in the z=2 plane covering the image center but not corners
        let mesh = TriangleMesh::new(
            vec![
                Vec3::new(-0.5, -0.5, 2.0),
                Vec3::new(0.5, -0.5, 2.0),
                Vec3::new(0.0, 0.5, 2.0),
            ],
            vec![[0, 1, 2]],
            None,
        )
        .unwrap();
        let depth = render_depth(&mesh, &cam);
        assert_relative_eq!(depth.get(16, 16), 2.0, epsilon = 1e-12);
        // corners of the image miss the triangle
        assert!(!depth.is_valid(0, 0));
    }

    #[test]
    fn sphere_center_pixel_depth() {
        let grid = sphere_grid(48);
        let mesh = marching_cubes(&grid, 0.0);
        let pose = CameraPose::look_at(Vec3::new(0.0, 0.0, -2.0), Vec3::zeros()).unwrap();
        let cam = Camera::new(
            CameraIntrinsics::new(64.0, 64.0, 32.0, 32.0, 64, 64).unwrap(),
            pose,
        );
        let depth = render_depth(&mesh, &cam);
        let d = depth.get(32, 32);
        assert!(
            (d - 1.5).abs() < grid.voxel_size(),
            "center depth {d} vs 1.5"
        );
    }

    #[test]
    fn depth_multiview_consistency_on_sphere() {
        let grid = sphere_grid(64);
        let mesh = marching_cubes(&grid, 0.0);
        let cam = |c: Vec3| {
            Camera::new(
                CameraIntrinsics::new(80.0, 80.0, 32.0, 32.0, 64, 64).unwrap(),
                CameraPose::look_at(c, Vec3::zeros()).unwrap(),
            )
        };
        let cam_a = cam(Vec3::new(0.0, -2.0, 0.5));
        let cam_b = cam(Vec3::new(0.6, -1.9, 0.5));
        let da = render_depth(&mesh, &cam_a);
        let db = render_depth(&mesh, &cam_b);
        let mut checked = 0usize;
        for (x, y) in da.valid_pixels() {
            let p = cam_a
                .back_project(f64::from(x) + 0.5, f64::from(y) + 0.5, da.get(x, y))
                .unwrap();
            let Ok((u, v, d)) = cam_b.project_point(p) else {
                continue;
            };
            let (xi, yi) = ((u - 0.5).round() as i64, (v - 0.5).round() as i64);
            if xi < 1 || yi < 1 || xi >= 63 || yi >= 63 {
                continue;
            }
            // reprojection is allowed 1 pixel of slack; look at the 3x3 patch
            let mut stored = Vec::new();
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let s = db.get((xi + dx) as u32, (yi + dy) as u32);
                    if s.is_finite() {
                        stored.push(s);
                    }
                }
            }
            if stored.len() < 9 {
                continue; // silhouette of view b
            }
            let nearest = stored.iter().cloned().fold(f64::INFINITY, f64::min);
            if nearest < 0.98 * d {
                continue; // occluded by a closer surface in view b
            }
            let best = stored
                .iter()
                .map(|s| (s - d).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(
                best <= 0.02 * d,
                "depth mismatch at ({x},{y}): best diff {best} at depth {d}"
            );
            checked += 1;
        }
        assert!(checked > 200, "only {checked} pixels cross-checked");
    }

    #[test]
    fn degenerate_faces_are_dropped() {
        let mesh = TriangleMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(2.0, 0.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 0, 1]],
            None,
        )
        .unwrap();
        assert!(mesh.faces.is_empty(), "collinear + repeated faces kept");
    }
}
