//! Dense voxel SDF field with a co-located RGB grid.
//!
//! Values live on grid nodes; queries are trilinear over the 8 enclosing
//! corners, so the interpolant is exact at nodes and reproduces affine
//! fields. Storage is x-fastest (`idx = x + nx*(y + ny*z)`), matching the
//! on-disk layout.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Axis-aligned box in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(Error::InvalidArgument(format!(
                "box must have positive extent: min {min:?}, max {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    /// Cube of half-extent `h` centered at the origin.
    pub fn centered_cube(h: f64) -> Self {
        Self {
            min: Vec3::new(-h, -h, -h),
            max: Vec3::new(h, h, h),
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (self.min.x..=self.max.x).contains(&p.x)
            && (self.min.y..=self.max.y).contains(&p.y)
            && (self.min.z..=self.max.z).contains(&p.z)
    }

    /// Slab intersection of the ray segment `[t0, t1]` with the box.
    /// Returns the clipped parameter interval, or `None` if the ray misses.
    pub fn clip_ray(&self, origin: Vec3, dir: Vec3, t0: f64, t1: f64) -> Option<(f64, f64)> {
        let mut lo = t0;
        let mut hi = t1;
        for a in 0..3 {
            let d = dir[a];
            if d.abs() < 1e-300 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut ta = (self.min[a] - origin[a]) * inv;
            let mut tb = (self.max[a] - origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            lo = lo.max(ta);
            hi = hi.min(tb);
            if lo > hi {
                return None;
            }
        }
        Some((lo, hi))
    }
}

/// Trilinear interpolation stencil at a query point: the 8 corner indices,
/// their weights, and the weight gradients w.r.t. the world position.
#[derive(Debug, Clone, Copy)]
pub struct TrilinearStencil {
    pub corners: [usize; 8],
    pub weights: [f64; 8],
    pub dweights: [[f64; 3]; 8],
}

/// Dense voxel grid of signed distances plus co-located RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    res: [usize; 3],
    bounds: Aabb,
    /// nx*ny*nz signed distances, x-fastest.
    pub sdf: Vec<f64>,
    /// 3 * nx*ny*nz interleaved RGB in [0, 1], x-fastest.
    pub color: Vec<f64>,
}

impl SdfGrid {
    pub fn new(res: [usize; 3], bounds: Aabb) -> Result<Self> {
        if res.iter().any(|&n| n < 2) {
            return Err(Error::InvalidArgument(format!(
                "grid resolution must be >= 2 per axis, got {res:?}"
            )));
        }
        let n = res[0] * res[1] * res[2];
        Ok(Self {
            res,
            bounds,
            sdf: vec![0.0; n],
            color: vec![0.5; 3 * n],
        })
    }

    /// Generic blob prior: signed distance of a sphere of radius
    /// `0.45 * min half-extent`, negative inside.
    pub fn with_sphere_init(res: [usize; 3], bounds: Aabb) -> Result<Self> {
        let mut grid = Self::new(res, bounds)?;
        let c = bounds.center();
        let half = 0.5 * bounds.extent();
        let r = 0.45 * half.x.min(half.y).min(half.z);
        grid.fill_from(|p| (p - c).norm() - r);
        Ok(grid)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.res
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn n_nodes(&self) -> usize {
        self.res[0] * self.res[1] * self.res[2]
    }

    /// Node spacing per axis.
    pub fn spacing(&self) -> Vec3 {
        let e = self.bounds.extent();
        Vec3::new(
            e.x / (self.res[0] - 1) as f64,
            e.y / (self.res[1] - 1) as f64,
            e.z / (self.res[2] - 1) as f64,
        )
    }

    /// Largest node spacing; the "voxel size" used by mesh tolerances.
    pub fn voxel_size(&self) -> f64 {
        let h = self.spacing();
        h.x.max(h.y).max(h.z)
    }

    #[inline]
    pub fn node_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.res[0] * (y + self.res[1] * z)
    }

    pub fn node_pos(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let h = self.spacing();
        self.bounds.min + Vec3::new(x as f64 * h.x, y as f64 * h.y, z as f64 * h.z)
    }

    /// Fill SDF values by evaluating `f` at every node.
    pub fn fill_from(&mut self, f: impl Fn(Vec3) -> f64) {
        for z in 0..self.res[2] {
            for y in 0..self.res[1] {
                for x in 0..self.res[0] {
                    let idx = self.node_index(x, y, z);
                    self.sdf[idx] = f(self.node_pos(x, y, z));
                }
            }
        }
    }

    /// Fill colors by evaluating `f` at every node.
    pub fn fill_color_from(&mut self, f: impl Fn(Vec3) -> [f64; 3]) {
        for z in 0..self.res[2] {
            for y in 0..self.res[1] {
                for x in 0..self.res[0] {
                    let idx = self.node_index(x, y, z);
                    let rgb = f(self.node_pos(x, y, z));
                    self.color[3 * idx..3 * idx + 3].copy_from_slice(&rgb);
                }
            }
        }
    }

    /// Interpolation stencil for a point inside the bounds.
    pub fn stencil(&self, p: Vec3) -> Result<TrilinearStencil> {
        if !self.bounds.contains(p) {
            return Err(Error::OutOfDomain(p.x, p.y, p.z));
        }
        let h = self.spacing();
        let mut cell = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let t = (p[a] - self.bounds.min[a]) / h[a];
            let c = (t.floor() as usize).min(self.res[a] - 2);
            cell[a] = c;
            frac[a] = t - c as f64;
        }
        let base = [
            (1.0 - frac[0], -1.0),
            (1.0 - frac[1], -1.0),
            (1.0 - frac[2], -1.0),
        ];
        let upper = [(frac[0], 1.0), (frac[1], 1.0), (frac[2], 1.0)];
        let mut corners = [0usize; 8];
        let mut weights = [0f64; 8];
        let mut dweights = [[0f64; 3]; 8];
        for (k, (dx, dy, dz)) in CORNER_OFFSETS.iter().enumerate() {
            let wx = if *dx == 0 { base[0] } else { upper[0] };
            let wy = if *dy == 0 { base[1] } else { upper[1] };
            let wz = if *dz == 0 { base[2] } else { upper[2] };
            corners[k] = self.node_index(cell[0] + dx, cell[1] + dy, cell[2] + dz);
            weights[k] = wx.0 * wy.0 * wz.0;
            dweights[k] = [
                wx.1 * wy.0 * wz.0 / h.x,
                wx.0 * wy.1 * wz.0 / h.y,
                wx.0 * wy.0 * wz.1 / h.z,
            ];
        }
        Ok(TrilinearStencil {
            corners,
            weights,
            dweights,
        })
    }

    /// Trilinear SDF sample; exact at nodes.
    pub fn sample_sdf(&self, p: Vec3) -> Result<f64> {
        let st = self.stencil(p)?;
        Ok(st
            .corners
            .iter()
            .zip(st.weights.iter())
            .map(|(&c, &w)| w * self.sdf[c])
            .sum())
    }

    /// Trilinear RGB sample.
    pub fn sample_color(&self, p: Vec3) -> Result<[f64; 3]> {
        let st = self.stencil(p)?;
        let mut rgb = [0.0; 3];
        for (&c, &w) in st.corners.iter().zip(st.weights.iter()) {
            for ch in 0..3 {
                rgb[ch] += w * self.color[3 * c + ch];
            }
        }
        Ok(rgb)
    }

    /// Analytic spatial gradient of the trilinear interpolant.
    pub fn sdf_gradient(&self, p: Vec3) -> Result<Vec3> {
        let st = self.stencil(p)?;
        let mut g = Vec3::zeros();
        for (&c, dw) in st.corners.iter().zip(st.dweights.iter()) {
            let v = self.sdf[c];
            g.x += dw[0] * v;
            g.y += dw[1] * v;
            g.z += dw[2] * v;
        }
        Ok(g)
    }

    /// Mean squared difference over axis-adjacent node pairs, with gradient.
    pub fn tv_loss(&self) -> (f64, Vec<f64>) {
        tv_loss_with_grad(self.res, &self.sdf)
    }

    /// Mean squared cell-gradient difference over adjacent cells, with gradient.
    pub fn smoothness_loss(&self) -> (f64, Vec<f64>) {
        smoothness_loss_with_grad(self.res, self.spacing(), &self.sdf)
    }

    /// Resample onto a finer grid over the same bounds. Both SDF and color
    /// nodes become trilinear samples of the current grid.
    pub fn upsample(&self, new_res: [usize; 3]) -> Result<SdfGrid> {
        for a in 0..3 {
            if new_res[a] < self.res[a] {
                return Err(Error::InvalidArgument(format!(
                    "upsample cannot reduce resolution: {:?} -> {new_res:?}",
                    self.res
                )));
            }
        }
        if new_res == self.res {
            return Ok(self.clone());
        }
        let mut out = SdfGrid::new(new_res, self.bounds)?;
        for z in 0..new_res[2] {
            for y in 0..new_res[1] {
                for x in 0..new_res[0] {
                    // interpolate in index space to dodge boundary rounding
                    let mut cell = [0usize; 3];
                    let mut frac = [0f64; 3];
                    let coord = [x, y, z];
                    for a in 0..3 {
                        let t = coord[a] as f64 * (self.res[a] - 1) as f64
                            / (new_res[a] - 1) as f64;
                        let c = (t.floor() as usize).min(self.res[a] - 2);
                        cell[a] = c;
                        frac[a] = t - c as f64;
                    }
                    let idx = out.node_index(x, y, z);
                    let mut sdf = 0.0;
                    let mut rgb = [0.0; 3];
                    for (dx, dy, dz) in CORNER_OFFSETS {
                        let w = (if dx == 0 { 1.0 - frac[0] } else { frac[0] })
                            * (if dy == 0 { 1.0 - frac[1] } else { frac[1] })
                            * (if dz == 0 { 1.0 - frac[2] } else { frac[2] });
                        let c = self.node_index(cell[0] + dx, cell[1] + dy, cell[2] + dz);
                        sdf += w * self.sdf[c];
                        for ch in 0..3 {
                            rgb[ch] += w * self.color[3 * c + ch];
                        }
                    }
                    out.sdf[idx] = sdf;
                    out.color[3 * idx..3 * idx + 3].copy_from_slice(&rgb);
                }
            }
        }
        Ok(out)
    }

    /// Binary grid file: magic "SDFG", u32 version, u32 nx/ny/nz,
    /// f64 bounds[6], f32 sdf (x-fastest), f32 interleaved RGB.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(b"SDFG")?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        for n in self.res {
            w.write_u32::<LittleEndian>(n as u32)?;
        }
        for v in [self.bounds.min, self.bounds.max] {
            for a in 0..3 {
                w.write_f64::<LittleEndian>(v[a])?;
            }
        }
        for &v in &self.sdf {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        for &v in &self.color {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SdfGrid> {
        let file = fs::File::open(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SDFG" {
            return Err(Error::Format(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported grid version {version}",
                path.display()
            )));
        }
        let mut res = [0usize; 3];
        for n in res.iter_mut() {
            *n = r.read_u32::<LittleEndian>()? as usize;
        }
        let mut b = [0f64; 6];
        for v in b.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let bounds = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))?;
        let mut grid = SdfGrid::new(res, bounds)?;
        for v in grid.sdf.iter_mut() {
            *v = f64::from(r.read_f32::<LittleEndian>()?);
        }
        for v in grid.color.iter_mut() {
            *v = f64::from(r.read_f32::<LittleEndian>()?);
        }
        Ok(grid)
    }
}

const FORMAT_VERSION: u32 = 1;

/// Corner offsets in (dx, dy, dz), x-fastest: index = dx + 2*dy + 4*dz.
const CORNER_OFFSETS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (0, 1, 0),
    (1, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (0, 1, 1),
    (1, 1, 1),
];

/// Total-variation loss over raw node values: mean squared difference of all
/// axis-adjacent pairs. Standalone so degenerate shapes (single pair) can be
/// exercised directly.
pub fn tv_loss_with_grad(res: [usize; 3], values: &[f64]) -> (f64, Vec<f64>) {
    let [nx, ny, nz] = res;
    assert_eq!(values.len(), nx * ny * nz);
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let n_pairs = (nx.saturating_sub(1)) * ny * nz
        + nx * (ny.saturating_sub(1)) * nz
        + nx * ny * (nz.saturating_sub(1));
    let mut grad = vec![0.0; values.len()];
    if n_pairs == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / n_pairs as f64;
    let mut sum = 0.0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let a = idx(x, y, z);
                if x + 1 < nx {
                    let b = idx(x + 1, y, z);
                    let d = values[b] - values[a];
                    sum += d * d;
                    grad[b] += 2.0 * d * inv;
                    grad[a] -= 2.0 * d * inv;
                }
                if y + 1 < ny {
                    let b = idx(x, y + 1, z);
                    let d = values[b] - values[a];
                    sum += d * d;
                    grad[b] += 2.0 * d * inv;
                    grad[a] -= 2.0 * d * inv;
                }
                if z + 1 < nz {
                    let b = idx(x, y, z + 1);
                    let d = values[b] - values[a];
                    sum += d * d;
                    grad[b] += 2.0 * d * inv;
                    grad[a] -= 2.0 * d * inv;
                }
            }
        }
    }
    (sum * inv, grad)
}

/// Smoothness loss: mean squared difference of cell-center gradients over
/// adjacent cell pairs. Cell gradients average the four parallel edge
/// differences per axis, so each is linear in the 8 corner values.
pub fn smoothness_loss_with_grad(res: [usize; 3], spacing: Vec3, values: &[f64]) -> (f64, Vec<f64>) {
    let [nx, ny, nz] = res;
    assert_eq!(values.len(), nx * ny * nz);
    let (mx, my, mz) = (nx - 1, ny - 1, nz - 1);
    let node = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let cell = |x: usize, y: usize, z: usize| x + mx * (y + my * z);
    let n_cells = mx * my * mz;
    let mut grad = vec![0.0; values.len()];

    // cell-center gradients of the trilinear interpolant
    let mut g = vec![[0.0f64; 3]; n_cells];
    for z in 0..mz {
        for y in 0..my {
            for x in 0..mx {
                let mut gc = [0.0f64; 3];
                for (dx, dy, dz) in CORNER_OFFSETS {
                    let v = values[node(x + dx, y + dy, z + dz)];
                    gc[0] += if dx == 1 { v } else { -v };
                    gc[1] += if dy == 1 { v } else { -v };
                    gc[2] += if dz == 1 { v } else { -v };
                }
                g[cell(x, y, z)] = [
                    gc[0] / (4.0 * spacing.x),
                    gc[1] / (4.0 * spacing.y),
                    gc[2] / (4.0 * spacing.z),
                ];
            }
        }
    }

    let n_pairs = mx.saturating_sub(1) * my * mz
        + mx * my.saturating_sub(1) * mz
        + mx * my * mz.saturating_sub(1);
    if n_pairs == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / n_pairs as f64;

    let mut sum = 0.0;
    let mut dg = vec![[0.0f64; 3]; n_cells];
    let accum = |a: usize, b: usize, sum: &mut f64, dg: &mut Vec<[f64; 3]>| {
        for c in 0..3 {
            let d = g[b][c] - g[a][c];
            *sum += d * d;
            dg[b][c] += 2.0 * d * inv;
            dg[a][c] -= 2.0 * d * inv;
        }
    };
    for z in 0..mz {
        for y in 0..my {
            for x in 0..mx {
                let a = cell(x, y, z);
                if x + 1 < mx {
                    accum(a, cell(x + 1, y, z), &mut sum, &mut dg);
                }
                if y + 1 < my {
                    accum(a, cell(x, y + 1, z), &mut sum, &mut dg);
                }
                if z + 1 < mz {
                    accum(a, cell(x, y, z + 1), &mut sum, &mut dg);
                }
            }
        }
    }

    // scatter cell-gradient adjoints back to the corner nodes
    for z in 0..mz {
        for y in 0..my {
            for x in 0..mx {
                let d = dg[cell(x, y, z)];
                for (dx, dy, dz) in CORNER_OFFSETS {
                    let n = node(x + dx, y + dy, z + dz);
                    let sx = if dx == 1 { 1.0 } else { -1.0 };
                    let sy = if dy == 1 { 1.0 } else { -1.0 };
                    let sz = if dz == 1 { 1.0 } else { -1.0 };
                    grad[n] += sx * d[0] / (4.0 * spacing.x)
                        + sy * d[1] / (4.0 * spacing.y)
                        + sz * d[2] / (4.0 * spacing.z);
                }
            }
        }
    }
    (sum * inv, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn unit_grid(n: usize) -> SdfGrid {
        SdfGrid::new(
            [n, n, n],
            Aabb::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn nodal_exactness() {
        let mut grid = unit_grid(4);
        let idx = grid.node_index(2, 1, 3);
        grid.sdf[idx] = 0.37;
        let p = grid.node_pos(2, 1, 3);
        assert_eq!(grid.sample_sdf(p).unwrap(), 0.37);
    }

    #[test]
    fn cell_center_symmetry() {
        let mut grid = unit_grid(2);
        // corners ordered x-fastest: z=0 layer {0,0,0,0}, z=1 layer {1,1,1,1}
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let idx = grid.node_index(x, y, z);
                    grid.sdf[idx] = z as f64;
                }
            }
        }
        let v = grid.sample_sdf(Vec3::new(0.5, 0.5, 0.5)).unwrap();
        assert_relative_eq!(v, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn trilinear_reproduces_affine_fields() {
        let mut rng = crate::seeds::rng(11, "affine");
        for _ in 0..3 {
            let a = Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let b: f64 = rng.gen_range(-1.0..1.0);
            let mut grid = unit_grid(5);
            grid.fill_from(|p| a.dot(&p) + b);
            for _ in 0..50 {
                let p = Vec3::new(rng.gen(), rng.gen(), rng.gen());
                assert_relative_eq!(grid.sample_sdf(p).unwrap(), a.dot(&p) + b, epsilon = 1e-12);
                assert_relative_eq!(grid.sdf_gradient(p).unwrap(), a, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn linear_field_x_sampling() {
        let mut grid = unit_grid(6);
        grid.fill_from(|p| p.x);
        let p = Vec3::new(0.333, 0.71, 0.22);
        assert_relative_eq!(grid.sample_sdf(p).unwrap(), 0.333, epsilon = 1e-12);
    }

    #[test]
    fn gradient_of_linear_z_field() {
        let mut grid = unit_grid(5);
        grid.fill_from(|p| p.z);
        let g = grid.sdf_gradient(Vec3::new(0.4, 0.6, 0.3)).unwrap();
        assert_relative_eq!(g, Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn gradient_of_constant_grid_is_zero() {
        let mut grid = unit_grid(4);
        grid.fill_from(|_| 3.5);
        let g = grid.sdf_gradient(Vec3::new(0.2, 0.9, 0.5)).unwrap();
        assert_relative_eq!(g, Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn sphere_gradient_matches_analytic_normal() {
        let bounds = Aabb::centered_cube(1.0);
        let mut grid = SdfGrid::new([64, 64, 64], bounds).unwrap();
        grid.fill_from(|p| p.norm() - 0.5);
        let g = grid.sdf_gradient(Vec3::new(0.4, 0.0, 0.0)).unwrap();
        assert!((g - Vec3::x()).norm() < 0.05, "gradient {g:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::seeds::rng(21, "fd-grad");
        let mut grid = unit_grid(9);
        grid.fill_from(|p| (3.0 * p.x).sin() * (2.0 * p.y).cos() + p.z * p.z);
        let h = grid.spacing();
        let step = 1e-5;
        let mut checked = 0;
        while checked < 500 {
            let p = Vec3::new(
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            );
            // stay a full cell away from faces so FD does not cross cells
            let near_face = (0..3).any(|a| {
                let t = p[a] / h[a];
                (t - t.round()).abs() * h[a] < 2.0 * step
            });
            if near_face || !grid.bounds().contains(p) {
                continue;
            }
            let g = grid.sdf_gradient(p).unwrap();
            for a in 0..3 {
                let mut lo = p;
                let mut hi = p;
                lo[a] -= step;
                hi[a] += step;
                let fd = (grid.sample_sdf(hi).unwrap() - grid.sample_sdf(lo).unwrap())
                    / (2.0 * step);
                let denom = fd.abs().max(1.0);
                assert!(
                    (g[a] - fd).abs() / denom < 1e-4,
                    "axis {a}: analytic {} vs fd {fd}",
                    g[a]
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn out_of_domain_errors() {
        let grid = unit_grid(3);
        assert!(matches!(
            grid.sample_sdf(Vec3::new(1.5, 0.5, 0.5)),
            Err(Error::OutOfDomain(..))
        ));
    }

    #[test]
    fn tv_loss_cases() {
        // constant grid
        let mut grid = unit_grid(4);
        grid.fill_from(|_| 2.0);
        let (loss, grad) = grid.tv_loss();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));

        // single pair, squared difference
        let (loss, _) = tv_loss_with_grad([2, 1, 1], &[0.0, 1.0]);
        assert_relative_eq!(loss, 1.0);

        // invariance under constant shift
        let mut rng = crate::seeds::rng(5, "tv-shift");
        let vals: Vec<f64> = (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = vals.iter().map(|v| v + 10.0).collect();
        let (a, _) = tv_loss_with_grad([3, 3, 3], &vals);
        let (b, _) = tv_loss_with_grad([3, 3, 3], &shifted);
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let mut rng = crate::seeds::rng(6, "tv-fd");
        let mut vals: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, grad) = tv_loss_with_grad([8, 8, 8], &vals);
        let step = 1e-6;
        for i in (0..512).step_by(37) {
            let orig = vals[i];
            vals[i] = orig + step;
            let (hi, _) = tv_loss_with_grad([8, 8, 8], &vals);
            vals[i] = orig - step;
            let (lo, _) = tv_loss_with_grad([8, 8, 8], &vals);
            vals[i] = orig;
            let fd = (hi - lo) / (2.0 * step);
            assert!(
                (grad[i] - fd).abs() / fd.abs().max(1e-6) < 1e-4,
                "node {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn smoothness_zero_for_linear_and_constant_fields() {
        let mut grid = unit_grid(5);
        grid.fill_from(|p| 2.0 * p.x - 0.3 * p.y + 0.8 * p.z + 1.0);
        let (loss, _) = grid.smoothness_loss();
        assert_relative_eq!(loss, 0.0, epsilon = 1e-24);

        grid.fill_from(|_| 4.0);
        let (loss, _) = grid.smoothness_loss();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn smoothness_positive_and_shrinking_with_resolution() {
        let field = |p: Vec3| p.x * p.x;
        let mut losses = Vec::new();
        for n in [5usize, 9] {
            let mut grid = unit_grid(n);
            grid.fill_from(field);
            let (loss, _) = grid.smoothness_loss();
            assert!(loss > 0.0);
            losses.push(loss);
        }
        assert!(
            losses[1] < losses[0],
            "smoothness should drop with resolution: {losses:?}"
        );
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let mut rng = crate::seeds::rng(7, "smooth-fd");
        let spacing = Vec3::new(1.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0);
        let mut vals: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, grad) = smoothness_loss_with_grad([8, 8, 8], spacing, &vals);
        let step = 1e-6;
        for i in (0..512).step_by(29) {
            let orig = vals[i];
            vals[i] = orig + step;
            let (hi, _) = smoothness_loss_with_grad([8, 8, 8], spacing, &vals);
            vals[i] = orig - step;
            let (lo, _) = smoothness_loss_with_grad([8, 8, 8], spacing, &vals);
            vals[i] = orig;
            let fd = (hi - lo) / (2.0 * step);
            assert!(
                (grad[i] - fd).abs() / fd.abs().max(1e-6) < 1e-4,
                "node {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn upsample_identity_and_linear_reproduction() {
        let mut grid = unit_grid(4);
        let mut rng = crate::seeds::rng(8, "upsample");
        for v in grid.sdf.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let same = grid.upsample([4, 4, 4]).unwrap();
        assert_eq!(grid.sdf, same.sdf);
        assert_eq!(grid.color, same.color);

        let mut lin = unit_grid(4);
        lin.fill_from(|p| 1.5 * p.x - 0.25 * p.y + 0.5 * p.z);
        let up = lin.upsample([7, 7, 7]).unwrap();
        for z in 0..7 {
            for y in 0..7 {
                for x in 0..7 {
                    let p = up.node_pos(x, y, z);
                    let expect = 1.5 * p.x - 0.25 * p.y + 0.5 * p.z;
                    let got = up.sdf[up.node_index(x, y, z)];
                    assert_relative_eq!(got, expect, epsilon = 1e-12);
                }
            }
        }

        let mut konst = unit_grid(3);
        konst.fill_from(|_| -0.7);
        let up = konst.upsample([5, 6, 7]).unwrap();
        assert!(up.sdf.iter().all(|&v| (v + 0.7).abs() < 1e-12));
    }

    #[test]
    fn upsample_rejects_downsampling_and_keeps_sign() {
        let grid = unit_grid(4);
        assert!(grid.upsample([3, 4, 4]).is_err());

        let bounds = Aabb::centered_cube(1.0);
        let mut sph = SdfGrid::new([9, 9, 9], bounds).unwrap();
        sph.fill_from(|p| p.norm() - 0.5);
        let up = sph.upsample([17, 17, 17]).unwrap();
        for z in 0..9 {
            for y in 0..9 {
                for x in 0..9 {
                    let old = sph.sdf[sph.node_index(x, y, z)];
                    let new = up.sdf[up.node_index(2 * x, 2 * y, 2 * z)];
                    assert!(
                        old.signum() == new.signum() || old == 0.0,
                        "sign flip at ({x},{y},{z}): {old} -> {new}"
                    );
                }
            }
        }
    }

    #[test]
    fn grid_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.sdfg");
        let bounds = Aabb::new(Vec3::new(-1.0, -0.5, 0.0), Vec3::new(1.0, 0.5, 2.0)).unwrap();
        let mut grid = SdfGrid::new([3, 4, 5], bounds).unwrap();
        let mut rng = crate::seeds::rng(10, "gridfile");
        for v in grid.sdf.iter_mut() {
            *v = f64::from(rng.gen_range(-1.0f32..1.0f32));
        }
        for v in grid.color.iter_mut() {
            *v = f64::from(rng.gen_range(0.0f32..1.0f32));
        }
        grid.save(&path).unwrap();
        let back = SdfGrid::load(&path).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn ray_clip_hits_and_misses() {
        let b = Aabb::centered_cube(1.0);
        let (t0, t1) = b
            .clip_ray(Vec3::new(0.0, 0.0, -3.0), Vec3::z(), 0.0, 100.0)
            .unwrap();
        assert_relative_eq!(t0, 2.0);
        assert_relative_eq!(t1, 4.0);
        assert!(b
            .clip_ray(Vec3::new(5.0, 5.0, -3.0), Vec3::z(), 0.0, 100.0)
            .is_none());
    }
}
