//! Binary little-endian PLY read/write for the three artifact kinds that
//! cross the pipeline's file boundary: triangle meshes (optional vertex
//! colors), tagged point clouds, and gaussian sets. ASCII OBJ export is
//! provided for quick inspection in external viewers.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::sampling::{PointCloud, PointSource};
use crate::splat::Gaussian;

type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl ScalarType {
    fn parse(word: &str) -> Result<Self> {
        Ok(match word {
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            "uchar" | "uint8" => ScalarType::U8,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            other => {
                return Err(Error::Format(format!("unsupported PLY type {other}")));
            }
        })
    }

    fn read(self, r: &mut impl Read) -> Result<f64> {
        Ok(match self {
            ScalarType::F32 => f64::from(r.read_f32::<LittleEndian>()?),
            ScalarType::F64 => r.read_f64::<LittleEndian>()?,
            ScalarType::U8 => f64::from(r.read_u8()?),
            ScalarType::I32 => f64::from(r.read_i32::<LittleEndian>()?),
            ScalarType::U32 => f64::from(r.read_u32::<LittleEndian>()?),
        })
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(ScalarType, String),
    List(ScalarType, ScalarType, String),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

fn parse_header(r: &mut impl Read, path: &Path) -> Result<Vec<Element>> {
    let mut line = Vec::new();
    let mut read_line = |r: &mut dyn Read| -> Result<String> {
        line.clear();
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
            if line.len() > 4096 {
                return Err(Error::ingestion(path, "unterminated PLY header line"));
            }
        }
        Ok(String::from_utf8_lossy(&line).trim().to_string())
    };

    if read_line(r)? != "ply" {
        return Err(Error::ingestion(path, "missing 'ply' magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    loop {
        let l = read_line(r)?;
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", "1.0"] => format_seen = true,
            ["format", other, ..] => {
                return Err(Error::ingestion(
                    path,
                    format!("unsupported PLY format {other} (binary_little_endian required)"),
                ));
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::ingestion(path, "bad element count"))?;
                elements.push(Element {
                    name: (*name).to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count_ty, item_ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::ingestion(path, "property before element"))?;
                el.properties.push(Property::List(
                    ScalarType::parse(count_ty)?,
                    ScalarType::parse(item_ty)?,
                    (*name).to_string(),
                ));
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::ingestion(path, "property before element"))?;
                el.properties
                    .push(Property::Scalar(ScalarType::parse(ty)?, (*name).to_string()));
            }
            ["end_header"] => break,
            _ => {
                return Err(Error::ingestion(path, format!("bad header line: {l}")));
            }
        }
    }
    if !format_seen {
        return Err(Error::ingestion(path, "PLY header missing format line"));
    }
    Ok(elements)
}

/// Scalar rows of one element, column-indexed by property name, plus any
/// list-typed property rows.
struct ElementData {
    columns: HashMap<String, Vec<f64>>,
    lists: HashMap<String, Vec<Vec<i64>>>,
    count: usize,
}

fn read_element(r: &mut impl Read, el: &Element) -> Result<ElementData> {
    let mut columns: HashMap<String, Vec<f64>> = HashMap::new();
    let mut lists: HashMap<String, Vec<Vec<i64>>> = HashMap::new();
    for p in &el.properties {
        match p {
            Property::Scalar(_, name) => {
                columns.insert(name.clone(), Vec::with_capacity(el.count));
            }
            Property::List(_, _, name) => {
                lists.insert(name.clone(), Vec::with_capacity(el.count));
            }
        }
    }
    for _ in 0..el.count {
        for p in &el.properties {
            match p {
                Property::Scalar(ty, name) => {
                    let v = ty.read(r)?;
                    columns.get_mut(name).unwrap().push(v);
                }
                Property::List(count_ty, item_ty, name) => {
                    let n = count_ty.read(r)? as usize;
                    let mut row = Vec::with_capacity(n);
                    for _ in 0..n {
                        row.push(item_ty.read(r)? as i64);
                    }
                    lists.get_mut(name).unwrap().push(row);
                }
            }
        }
    }
    Ok(ElementData {
        columns,
        lists,
        count: el.count,
    })
}

fn column<'a>(data: &'a ElementData, name: &str, path: &Path) -> Result<&'a Vec<f64>> {
    data.columns
        .get(name)
        .ok_or_else(|| Error::ingestion(path, format!("missing property '{name}'")))
}

/// Write a mesh as binary PLY (f32 positions, u8 colors when present,
/// u32-count face lists are standard uchar/int).
pub fn write_mesh(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "ply\nformat binary_little_endian 1.0\n")?;
    write!(w, "element vertex {}\n", mesh.vertices.len())?;
    write!(w, "property float x\nproperty float y\nproperty float z\n")?;
    if mesh.colors.is_some() {
        write!(
            w,
            "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        )?;
    }
    write!(w, "element face {}\n", mesh.faces.len())?;
    write!(w, "property list uchar int vertex_indices\nend_header\n")?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for a in 0..3 {
            w.write_f32::<LittleEndian>(v[a] as f32)?;
        }
        if let Some(colors) = &mesh.colors {
            for c in colors[i] {
                w.write_u8((c.clamp(0.0, 1.0) * 255.0).round() as u8)?;
            }
        }
    }
    for f in &mesh.faces {
        w.write_u8(3)?;
        for &i in f {
            w.write_i32::<LittleEndian>(i as i32)?;
        }
    }
    Ok(())
}

pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let file = fs::File::open(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let mut r = BufReader::new(file);
    let elements = parse_header(&mut r, path)?;
    let mut vertices = Vec::new();
    let mut colors: Option<Vec<[f64; 3]>> = None;
    let mut faces = Vec::new();
    for el in &elements {
        let data = read_element(&mut r, el)?;
        match el.name.as_str() {
            "vertex" => {
                let x = column(&data, "x", path)?;
                let y = column(&data, "y", path)?;
                let z = column(&data, "z", path)?;
                vertices = (0..data.count)
                    .map(|i| Vec3::new(x[i], y[i], z[i]))
                    .collect();
                if data.columns.contains_key("red") {
                    let r_ = column(&data, "red", path)?;
                    let g = column(&data, "green", path)?;
                    let b = column(&data, "blue", path)?;
                    colors = Some(
                        (0..data.count)
                            .map(|i| [r_[i] / 255.0, g[i] / 255.0, b[i] / 255.0])
                            .collect(),
                    );
                }
            }
            "face" => {
                let idx = data
                    .lists
                    .get("vertex_indices")
                    .or_else(|| data.lists.get("vertex_index"))
                    .ok_or_else(|| Error::ingestion(path, "face element without indices"))?;
                for row in idx {
                    if row.len() != 3 {
                        return Err(Error::ingestion(
                            path,
                            format!("non-triangle face with {} vertices", row.len()),
                        ));
                    }
                    faces.push([row[0] as u32, row[1] as u32, row[2] as u32]);
                }
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces, colors)
}

/// ASCII OBJ export (positions and faces only).
pub fn write_mesh_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

/// Point cloud PLY: f32 positions, u8 colors, u8 source tag.
pub fn write_point_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "ply\nformat binary_little_endian 1.0\n")?;
    write!(w, "element vertex {}\n", cloud.len())?;
    write!(w, "property float x\nproperty float y\nproperty float z\n")?;
    write!(
        w,
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
    )?;
    write!(w, "property uchar source\nend_header\n")?;
    for i in 0..cloud.len() {
        for a in 0..3 {
            w.write_f32::<LittleEndian>(cloud.positions[i][a] as f32)?;
        }
        for c in cloud.colors[i] {
            w.write_u8((c.clamp(0.0, 1.0) * 255.0).round() as u8)?;
        }
        w.write_u8(cloud.sources[i].to_u8())?;
    }
    Ok(())
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let file = fs::File::open(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let mut r = BufReader::new(file);
    let elements = parse_header(&mut r, path)?;
    let mut cloud = PointCloud::empty();
    for el in &elements {
        let data = read_element(&mut r, el)?;
        if el.name != "vertex" {
            continue;
        }
        let x = column(&data, "x", path)?;
        let y = column(&data, "y", path)?;
        let z = column(&data, "z", path)?;
        let has_color = data.columns.contains_key("red");
        let has_source = data.columns.contains_key("source");
        for i in 0..data.count {
            let color = if has_color {
                [
                    data.columns["red"][i] / 255.0,
                    data.columns["green"][i] / 255.0,
                    data.columns["blue"][i] / 255.0,
                ]
            } else {
                [0.5, 0.5, 0.5]
            };
            let source = if has_source {
                PointSource::from_u8(data.columns["source"][i] as u8)?
            } else {
                PointSource::BackgroundFile
            };
            cloud.push(Vec3::new(x[i], y[i], z[i]), color, source);
        }
    }
    Ok(cloud)
}

const GAUSSIAN_PROPS: [&str; 14] = [
    "x",
    "y",
    "z",
    "log_scale_0",
    "log_scale_1",
    "log_scale_2",
    "rot_0",
    "rot_1",
    "rot_2",
    "rot_3",
    "opacity_logit",
    "r",
    "g",
    "b",
];

/// Gaussian set PLY: all fourteen parameters as f32.
pub fn write_gaussians(gaussians: &[Gaussian], path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "ply\nformat binary_little_endian 1.0\n")?;
    write!(w, "element vertex {}\n", gaussians.len())?;
    for p in GAUSSIAN_PROPS {
        write!(w, "property float {p}\n")?;
    }
    write!(w, "end_header\n")?;
    for g in gaussians {
        for a in 0..3 {
            w.write_f32::<LittleEndian>(g.mean[a] as f32)?;
        }
        for a in 0..3 {
            w.write_f32::<LittleEndian>(g.log_scale[a] as f32)?;
        }
        for a in 0..4 {
            w.write_f32::<LittleEndian>(g.rot[a] as f32)?;
        }
        w.write_f32::<LittleEndian>(g.opacity_logit as f32)?;
        for c in g.color {
            w.write_f32::<LittleEndian>(c as f32)?;
        }
    }
    Ok(())
}

pub fn read_gaussians(path: &Path) -> Result<Vec<Gaussian>> {
    let file = fs::File::open(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let mut r = BufReader::new(file);
    let elements = parse_header(&mut r, path)?;
    let mut out = Vec::new();
    for el in &elements {
        let data = read_element(&mut r, el)?;
        if el.name != "vertex" {
            continue;
        }
        for p in GAUSSIAN_PROPS {
            if !data.columns.contains_key(p) {
                return Err(Error::ingestion(path, format!("missing property '{p}'")));
            }
        }
        let c = &data.columns;
        for i in 0..data.count {
            let mut rot = [
                c["rot_0"][i],
                c["rot_1"][i],
                c["rot_2"][i],
                c["rot_3"][i],
            ];
            // repair badly scaled quaternions; f32 storage noise (~1e-7)
            // stays untouched so read -> write is byte-stable
            let n = crate::splat::quat_norm(&rot);
            if n < 1e-12 {
                rot = [1.0, 0.0, 0.0, 0.0];
            } else if (n - 1.0).abs() > 1e-5 {
                for v in rot.iter_mut() {
                    *v /= n;
                }
            }
            out.push(Gaussian {
                mean: Vec3::new(c["x"][i], c["y"][i], c["z"][i]),
                log_scale: Vec3::new(
                    c["log_scale_0"][i],
                    c["log_scale_1"][i],
                    c["log_scale_2"][i],
                ),
                rot,
                opacity_logit: c["opacity_logit"][i],
                color: [c["r"][i], c["g"][i], c["b"][i]],
            });
        }
    }
    Ok(out)
}
