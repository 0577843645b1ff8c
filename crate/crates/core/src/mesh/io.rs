//! PLY (ASCII and binary little-endian), OBJ and binary STL readers and
//! writers.
//!
//! PLY is the interchange format: face labels live in a `uchar label`
//! property on the face element and vertex coordinates are written as
//! doubles so binary files round-trip exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Point3, Vector3};

use super::LabeledMesh;
use crate::error::{Error, Result, Warning};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Ply,
    Obj,
    Stl,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<MeshFormat> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("ply") => Ok(MeshFormat::Ply),
            Some("obj") => Ok(MeshFormat::Obj),
            Some("stl") => Ok(MeshFormat::Stl),
            _ => Err(Error::InvalidArgument(format!(
                "cannot infer mesh format from {}",
                path.display()
            ))),
        }
    }
}

pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<LabeledMesh> {
    let bytes = fs::read(path)?;
    let mesh = match format {
        MeshFormat::Ply => read_ply(&bytes)?,
        MeshFormat::Obj => read_obj(&bytes)?,
        MeshFormat::Stl => read_stl(&bytes)?,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Writes `mesh`; the returned warnings note anything the format could not
/// carry.
pub fn save_mesh(mesh: &LabeledMesh, path: &Path, format: MeshFormat) -> Result<Vec<Warning>> {
    mesh.validate()?;
    let mut warnings = Vec::new();
    let bytes = match format {
        MeshFormat::Ply => write_ply(mesh, PlyEncoding::BinaryLittleEndian),
        MeshFormat::Obj => {
            if mesh.face_labels.is_some() {
                warnings.push(Warning::LabelsDropped {
                    format: "OBJ".into(),
                });
            }
            write_obj(mesh).into_bytes()
        }
        MeshFormat::Stl => {
            if mesh.face_labels.is_some() {
                return Err(Error::Unsupported("STL cannot store face labels".into()));
            }
            write_stl(mesh)
        }
    };
    fs::write(path, bytes)?;
    Ok(warnings)
}

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

impl Property {
    fn name(&self) -> &str {
        match self {
            Property::Scalar { name, .. } | Property::List { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Reads scalar values from either encoding while tracking the byte offset.
struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    ascii: bool,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(parse_err(self.pos, "unexpected end of file"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn ascii_token(&mut self) -> Result<(&'a str, usize)> {
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, "unexpected end of file"));
        }
        let tok = std::str::from_utf8(&self.data[start..self.pos])
            .map_err(|_| parse_err(start, "non-UTF-8 token"))?;
        Ok((tok, start))
    }

    fn read(&mut self, ty: Scalar) -> Result<f64> {
        if self.ascii {
            let (tok, at) = self.ascii_token()?;
            return tok
                .parse::<f64>()
                .map_err(|_| parse_err(at, format!("invalid number '{tok}'")));
        }
        let b = self.take(ty.size())?;
        Ok(match ty {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b.try_into().unwrap()),
        })
    }

    fn read_index(&mut self, ty: Scalar) -> Result<u32> {
        let at = self.pos;
        let v = self.read(ty)?;
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(parse_err(at, format!("invalid vertex index {v}")));
        }
        Ok(v as u32)
    }
}

pub fn read_ply(data: &[u8]) -> Result<LabeledMesh> {
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let mut ascii = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let start = pos;
        let end = data[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| parse_err(start, "header is not terminated by end_header"))?;
        pos = end + 1;
        let line = std::str::from_utf8(&data[start..end])
            .map_err(|_| parse_err(start, "non-UTF-8 header"))?
            .trim_end_matches('\r')
            .trim();
        line_no += 1;
        if line_no == 1 {
            if line != "ply" {
                return Err(parse_err(start, "missing 'ply' magic"));
            }
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                ascii = Some(match toks.get(1).copied() {
                    Some("ascii") => true,
                    Some("binary_little_endian") => false,
                    Some(other) => {
                        return Err(parse_err(start, format!("unsupported PLY format '{other}'")))
                    }
                    None => return Err(parse_err(start, "format line without encoding")),
                });
            }
            Some("element") => {
                if toks.len() != 3 {
                    return Err(parse_err(start, "malformed element line"));
                }
                let count = toks[2]
                    .parse()
                    .map_err(|_| parse_err(start, format!("invalid element count '{}'", toks[2])))?;
                elements.push(Element {
                    name: toks[1].to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(start, "property before any element"))?;
                let bad = || parse_err(start, format!("malformed property line '{line}'"));
                let prop = if toks.get(1) == Some(&"list") {
                    if toks.len() != 5 {
                        return Err(bad());
                    }
                    Property::List {
                        count: Scalar::parse(toks[2]).ok_or_else(bad)?,
                        item: Scalar::parse(toks[3]).ok_or_else(bad)?,
                        name: toks[4].to_string(),
                    }
                } else {
                    if toks.len() != 3 {
                        return Err(bad());
                    }
                    Property::Scalar {
                        ty: Scalar::parse(toks[1]).ok_or_else(bad)?,
                        name: toks[2].to_string(),
                    }
                };
                el.props.push(prop);
            }
            Some("end_header") => break,
            Some(other) => return Err(parse_err(start, format!("unknown header keyword '{other}'"))),
        }
    }
    let ascii = ascii.ok_or_else(|| parse_err(0, "missing format line"))?;
    let mut cur = Cursor { data, pos, ascii };

    let mut vertices = Vec::new();
    let mut normals: Vec<Vector3<f64>> = Vec::new();
    let mut has_normals = false;
    let mut faces = Vec::new();
    let mut labels = Vec::new();
    let mut has_labels = false;

    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let idx = |n: &str| el.props.iter().position(|p| p.name() == n);
                let (xi, yi, zi) = match (idx("x"), idx("y"), idx("z")) {
                    (Some(a), Some(b), Some(c)) => (a, b, c),
                    _ => return Err(parse_err(cur.pos, "vertex element lacks x/y/z")),
                };
                let ni = match (idx("nx"), idx("ny"), idx("nz")) {
                    (Some(a), Some(b), Some(c)) => Some((a, b, c)),
                    _ => None,
                };
                has_normals = ni.is_some();
                vertices.reserve(el.count);
                let mut vals = vec![0.0; el.props.len()];
                for _ in 0..el.count {
                    for (k, p) in el.props.iter().enumerate() {
                        vals[k] = match p {
                            Property::Scalar { ty, .. } => cur.read(*ty)?,
                            Property::List { count, item, .. } => {
                                let n = cur.read_index(*count)?;
                                for _ in 0..n {
                                    cur.read(*item)?;
                                }
                                0.0
                            }
                        };
                    }
                    vertices.push(Point3::new(vals[xi], vals[yi], vals[zi]));
                    if let Some((a, b, c)) = ni {
                        normals.push(Vector3::new(vals[a], vals[b], vals[c]));
                    }
                }
            }
            "face" => {
                has_labels = el.props.iter().any(|p| p.name() == "label");
                faces.reserve(el.count);
                for _ in 0..el.count {
                    let mut tri = None;
                    let mut label = 0u8;
                    for p in &el.props {
                        match p {
                            Property::List { name, count, item }
                                if name == "vertex_indices" || name == "vertex_index" =>
                            {
                                let at = cur.pos;
                                let n = cur.read_index(*count)?;
                                let mut idx = Vec::with_capacity(n as usize);
                                for _ in 0..n {
                                    idx.push(cur.read_index(*item)?);
                                }
                                if idx.len() < 3 {
                                    return Err(parse_err(at, format!("face with {} vertices", idx.len())));
                                }
                                tri = Some(idx);
                            }
                            Property::List { count, item, .. } => {
                                let n = cur.read_index(*count)?;
                                for _ in 0..n {
                                    cur.read(*item)?;
                                }
                            }
                            Property::Scalar { name, ty } => {
                                let at = cur.pos;
                                let v = cur.read(*ty)?;
                                if name == "label" {
                                    if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                                        return Err(parse_err(at, format!("invalid label {v}")));
                                    }
                                    label = v as u8;
                                }
                            }
                        }
                    }
                    let idx = tri.ok_or_else(|| parse_err(cur.pos, "face element lacks vertex_indices"))?;
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                        labels.push(label);
                    }
                }
            }
            _ => {
                for _ in 0..el.count {
                    for p in &el.props {
                        match p {
                            Property::Scalar { ty, .. } => {
                                cur.read(*ty)?;
                            }
                            Property::List { count, item, .. } => {
                                let n = cur.read_index(*count)?;
                                for _ in 0..n {
                                    cur.read(*item)?;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mesh = LabeledMesh {
        vertices,
        faces,
        vertex_normals: has_normals.then_some(normals),
        face_labels: has_labels.then_some(labels),
    };
    mesh.validate()?;
    Ok(mesh)
}

pub fn write_ply(mesh: &LabeledMesh, encoding: PlyEncoding) -> Vec<u8> {
    let mut header = String::from("ply\n");
    header.push_str(match encoding {
        PlyEncoding::Ascii => "format ascii 1.0\n",
        PlyEncoding::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    let _ = writeln!(header, "element vertex {}", mesh.vertices.len());
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    if mesh.vertex_normals.is_some() {
        header.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    let _ = writeln!(header, "element face {}", mesh.faces.len());
    header.push_str("property list uchar int vertex_indices\n");
    if mesh.face_labels.is_some() {
        header.push_str("property uchar label\n");
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();

    match encoding {
        PlyEncoding::Ascii => {
            let mut body = String::new();
            for (i, p) in mesh.vertices.iter().enumerate() {
                let _ = write!(body, "{:?} {:?} {:?}", p.x, p.y, p.z);
                if let Some(ns) = &mesh.vertex_normals {
                    let n = ns[i];
                    let _ = write!(body, " {:?} {:?} {:?}", n.x, n.y, n.z);
                }
                body.push('\n');
            }
            for (i, f) in mesh.faces.iter().enumerate() {
                let _ = write!(body, "3 {} {} {}", f[0], f[1], f[2]);
                if let Some(l) = &mesh.face_labels {
                    let _ = write!(body, " {}", l[i]);
                }
                body.push('\n');
            }
            out.extend_from_slice(body.as_bytes());
        }
        PlyEncoding::BinaryLittleEndian => {
            for (i, p) in mesh.vertices.iter().enumerate() {
                for v in [p.x, p.y, p.z] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(ns) = &mesh.vertex_normals {
                    for v in ns[i].iter() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            for (i, f) in mesh.faces.iter().enumerate() {
                out.push(3);
                for &v in f {
                    out.extend_from_slice(&(v as i32).to_le_bytes());
                }
                if let Some(l) = &mesh.face_labels {
                    out.push(l[i]);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------- OBJ

pub fn read_obj(data: &[u8]) -> Result<LabeledMesh> {
    let text = std::str::from_utf8(data).map_err(|e| parse_err(e.valid_up_to(), "non-UTF-8 OBJ"))?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut offset = 0usize;
    for raw in text.split_inclusive('\n') {
        let line_start = offset;
        offset += raw.len();
        let line = raw.trim();
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let vals: Vec<f64> = toks
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| parse_err(line_start, format!("invalid vertex '{line}'")))?;
                if vals.len() != 3 {
                    return Err(parse_err(line_start, format!("vertex needs 3 coordinates: '{line}'")));
                }
                vertices.push(Point3::new(vals[0], vals[1], vals[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for t in toks {
                    let head = t.split('/').next().unwrap_or("");
                    let v: i64 = head
                        .parse()
                        .map_err(|_| parse_err(line_start, format!("invalid face index '{t}'")))?;
                    let resolved = if v > 0 {
                        v - 1
                    } else if v < 0 {
                        vertices.len() as i64 + v
                    } else {
                        return Err(parse_err(line_start, "face index 0"));
                    };
                    if resolved < 0 || resolved > u32::MAX as i64 {
                        return Err(Error::Validation(format!("face index {v} out of range")));
                    }
                    idx.push(resolved as u32);
                }
                if idx.len() < 3 {
                    return Err(parse_err(line_start, format!("face with {} vertices", idx.len())));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let mesh = LabeledMesh {
        vertices,
        faces,
        vertex_normals: None,
        face_labels: None,
    };
    mesh.validate()?;
    Ok(mesh)
}

pub fn write_obj(mesh: &LabeledMesh) -> String {
    let mut s = String::new();
    for p in &mesh.vertices {
        let _ = writeln!(s, "v {:?} {:?} {:?}", p.x, p.y, p.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

// ---------------------------------------------------------------- STL

/// Binary STL. Vertices with bit-identical coordinates are merged.
pub fn read_stl(data: &[u8]) -> Result<LabeledMesh> {
    if data.len() < 84 {
        return Err(parse_err(data.len(), "binary STL shorter than its 84-byte header"));
    }
    let n = u32::from_le_bytes(data[80..84].try_into().unwrap()) as usize;
    let need = 84 + n * 50;
    if data.len() < need {
        return Err(parse_err(data.len(), format!("{n} triangles need {need} bytes")));
    }
    let mut vertices = Vec::new();
    let mut lookup: HashMap<[u32; 3], u32> = HashMap::new();
    let mut faces = Vec::with_capacity(n);
    for t in 0..n {
        let base = 84 + t * 50 + 12;
        let mut f = [0u32; 3];
        for (k, slot) in f.iter_mut().enumerate() {
            let o = base + k * 12;
            let bits: [u32; 3] = std::array::from_fn(|c| {
                u32::from_le_bytes(data[o + 4 * c..o + 4 * c + 4].try_into().unwrap())
            });
            *slot = *lookup.entry(bits).or_insert_with(|| {
                vertices.push(Point3::new(
                    f32::from_bits(bits[0]) as f64,
                    f32::from_bits(bits[1]) as f64,
                    f32::from_bits(bits[2]) as f64,
                ));
                (vertices.len() - 1) as u32
            });
        }
        faces.push(f);
    }
    Ok(LabeledMesh {
        vertices,
        faces,
        vertex_normals: None,
        face_labels: None,
    })
}

pub fn write_stl(mesh: &LabeledMesh) -> Vec<u8> {
    let mut out = vec![0u8; 80];
    out.extend_from_slice(&(mesh.faces.len() as u32).to_le_bytes());
    for f in 0..mesh.faces.len() {
        let n = mesh.face_normal(f).unwrap_or_else(Vector3::zeros);
        for v in n.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for p in mesh.triangle(f) {
            for v in p.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}
