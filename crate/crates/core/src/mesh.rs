//! Triangle meshes, OBJ/PLY files and a bounding-volume hierarchy for
//! nearest-point and ray-crossing queries.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Mat4, Vec3};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh<T> {
    pub vertices: Vec<Vec3<T>>,
    pub triangles: Vec<[u32; 3]>,
    /// Per-vertex unit normals.
    pub normals: Option<Vec<Vec3<T>>>,
}

impl<T: Real> Mesh<T> {
    pub fn new(vertices: Vec<Vec3<T>>, triangles: Vec<[u32; 3]>, normals: Option<Vec<Vec3<T>>>) -> Result<Self> {
        let n = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(Error::invalid(format!("triangle {t:?} indexes past {n} vertices")));
        }
        if let Some(ns) = &normals {
            if ns.len() != n {
                return Err(Error::invalid(format!("{} normals for {n} vertices", ns.len())));
            }
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite vertex coordinate"));
        }
        Ok(Mesh {
            vertices,
            triangles,
            normals,
        })
    }

    /// Triangle sets connected through shared vertices, largest first.
    pub fn component_triangles(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn root(parent: &mut [usize], mut v: usize) -> usize {
            while parent[v] != v {
                parent[v] = parent[parent[v]];
                v = parent[v];
            }
            v
        }
        for t in &self.triangles {
            let a = root(&mut parent, t[0] as usize);
            for &v in &t[1..] {
                let b = root(&mut parent, v as usize);
                parent[b] = a;
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
        for (i, t) in self.triangles.iter().enumerate() {
            groups.entry(root(&mut parent, t[0] as usize)).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.sort_by_key(|g| std::cmp::Reverse(g.len()));
        out
    }

    /// The given triangles with their vertices compacted, in first-use order.
    pub fn submesh(&self, triangles: &[usize]) -> Self {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut normals = self.normals.as_ref().map(|_| Vec::new());
        let mut tris = Vec::with_capacity(triangles.len());
        for &t in triangles {
            let mut out = [0u32; 3];
            for (slot, &v) in self.triangles[t].iter().enumerate() {
                let v = v as usize;
                if remap[v] == u32::MAX {
                    remap[v] = vertices.len() as u32;
                    vertices.push(self.vertices[v]);
                    if let (Some(dst), Some(src)) = (normals.as_mut(), &self.normals) {
                        dst.push(src[v]);
                    }
                }
                out[slot] = remap[v];
            }
            tris.push(out);
        }
        Mesh {
            vertices,
            triangles: tris,
            normals,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    #[inline]
    pub fn corners(&self, t: usize) -> [Vec3<T>; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    /// Unnormalized face normal; its length is twice the area.
    pub fn face_cross(&self, t: usize) -> Vec3<T> {
        let [a, b, c] = self.corners(t);
        (b - a).cross(c - a)
    }

    pub fn triangle_area(&self, t: usize) -> T {
        self.face_cross(t).norm() * T::lit(0.5)
    }

    pub fn area(&self) -> T {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn bounds(&self) -> Aabb<T> {
        Aabb::from_points(&self.vertices)
    }

    /// Volume enclosed by the surface, positive for outward winding.
    pub fn signed_volume(&self) -> T {
        let mut v = T::zero();
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.corners(t);
            v += a.dot(b.cross(c));
        }
        v / T::lit(6.0)
    }

    pub fn flip_winding(&mut self) {
        for t in &mut self.triangles {
            t.swap(1, 2);
        }
    }

    /// Drops triangles with repeated indices or area at most `min_area`,
    /// then unused vertices.
    pub fn remove_degenerate(&mut self, min_area: T) -> usize {
        let before = self.triangles.len();
        let keep: Vec<[u32; 3]> = (0..before)
            .filter(|&t| {
                let [a, b, c] = self.triangles[t];
                a != b && b != c && a != c && self.triangle_area(t) > min_area
            })
            .map(|t| self.triangles[t])
            .collect();
        self.triangles = keep;
        self.compact();
        before - self.triangles.len()
    }

    fn compact(&mut self) {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut verts = Vec::new();
        let mut norms = self.normals.as_ref().map(|_| Vec::new());
        for t in &mut self.triangles {
            for i in t.iter_mut() {
                let old = *i as usize;
                if remap[old] == u32::MAX {
                    remap[old] = verts.len() as u32;
                    verts.push(self.vertices[old]);
                    if let (Some(dst), Some(src)) = (&mut norms, &self.normals) {
                        dst.push(src[old]);
                    }
                }
                *i = remap[old];
            }
        }
        self.vertices = verts;
        self.normals = norms;
    }

    /// Area-weighted average of incident face normals, per vertex.
    pub fn vertex_normals_from_faces(&self) -> Vec<Vec3<T>> {
        let mut acc = vec![Vec3::zero(); self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let n = self.face_cross(t);
            for &i in tri {
                acc[i as usize] += n;
            }
        }
        acc.into_iter()
            .map(|n| n.try_normalize(T::lit(1e-30)).unwrap_or(Vec3::new(T::zero(), T::zero(), T::one())))
            .collect()
    }

    /// Every undirected edge must border exactly two triangles with opposite
    /// directions.
    pub fn check_watertight(&self) -> Result<()> {
        if self.triangles.is_empty() {
            return Err(Error::NotWatertight("mesh has no triangles".into()));
        }
        let mut directed: HashMap<(u32, u32), u32> = HashMap::with_capacity(self.triangles.len() * 3);
        for tri in &self.triangles {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                if a == b {
                    return Err(Error::NotWatertight(format!("collapsed edge at vertex {a}")));
                }
                *directed.entry((a, b)).or_insert(0) += 1;
            }
        }
        for (&(a, b), &count) in &directed {
            if count != 1 {
                return Err(Error::NotWatertight(format!(
                    "edge ({a}, {b}) used {count} times in the same direction"
                )));
            }
            if !directed.contains_key(&(b, a)) {
                return Err(Error::NotWatertight(format!("boundary edge ({a}, {b})")));
            }
        }
        Ok(())
    }

    pub fn transformed(&self, m: &Mat4<T>) -> Self {
        Mesh {
            vertices: self.vertices.iter().map(|v| m.transform_point(*v)).collect(),
            triangles: self.triangles.clone(),
            normals: self.normals.as_ref().map(|ns| {
                ns.iter()
                    .map(|n| m.transform_vector(*n).try_normalize(T::lit(1e-30)).unwrap_or(*n))
                    .collect()
            }),
        }
    }

    /// `n` area-uniform surface points with the triangle each came from.
    pub fn sample_surface<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<(Vec3<T>, usize)>> {
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0f64;
        for t in 0..self.triangles.len() {
            total += self.triangle_area(t).as_f64();
            cdf.push(total);
        }
        if !(total > 0.0) {
            return Err(Error::invalid("cannot sample a mesh with zero surface area"));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.gen::<f64>() * total;
            let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            let (a, b, c) = (1.0 - s, s * (1.0 - r2), s * r2);
            let [p0, p1, p2] = self.corners(t);
            let p = p0.scale(T::lit(a)) + p1.scale(T::lit(b)) + p2.scale(T::lit(c));
            out.push((p, t));
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Mesh<U> {
        Mesh {
            vertices: self.vertices.iter().map(|v| v.cast()).collect(),
            triangles: self.triangles.clone(),
            normals: self.normals.as_ref().map(|ns| ns.iter().map(|n| n.cast()).collect()),
        }
    }
}

/// Mesh file formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    PlyAscii,
    PlyBinary,
}

impl MeshFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MeshFormat::Obj => "obj",
            MeshFormat::PlyAscii | MeshFormat::PlyBinary => "ply",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "obj" => Some(MeshFormat::Obj),
            "ply" | "ply-ascii" => Some(MeshFormat::PlyAscii),
            "ply-binary" => Some(MeshFormat::PlyBinary),
            _ => None,
        }
    }
}

pub fn write_mesh<T: Real>(mesh: &Mesh<T>, path: &Path, format: MeshFormat) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    match format {
        MeshFormat::Obj => write_obj(mesh, &mut w),
        MeshFormat::PlyAscii => write_ply(mesh, &mut w, false),
        MeshFormat::PlyBinary => write_ply(mesh, &mut w, true),
    }
    .and_then(|_| w.flush())
    .map_err(io)
}

/// Reads OBJ or PLY, chosen by extension.
pub fn read_mesh(path: &Path) -> Result<Mesh<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => read_obj(&mut r, path),
        Some("ply") => read_ply(&mut r, path),
        _ => Err(Error::invalid(format!("{}: unknown mesh extension", path.display()))),
    }
}

pub fn write_obj<T: Real, W: Write>(mesh: &Mesh<T>, w: &mut W) -> std::io::Result<()> {
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x().as_f32(), v.y().as_f32(), v.z().as_f32())?;
    }
    if let Some(ns) = &mesh.normals {
        for n in ns {
            writeln!(w, "vn {} {} {}", n.x().as_f32(), n.y().as_f32(), n.z().as_f32())?;
        }
        for [a, b, c] in &mesh.triangles {
            let (a, b, c) = (a + 1, b + 1, c + 1);
            writeln!(w, "f {a}//{a} {b}//{b} {c}//{c}")?;
        }
    } else {
        for [a, b, c] in &mesh.triangles {
            writeln!(w, "f {} {} {}", a + 1, b + 1, c + 1)?;
        }
    }
    Ok(())
}

pub fn read_obj<R: BufRead>(r: &mut R, path: &Path) -> Result<Mesh<f32>> {
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut triangles = Vec::new();
    let perr = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    for (no, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let no = no + 1;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") | Some("vn") => {
                let xs: Vec<f32> = it
                    .take(3)
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| perr(no, format!("bad coordinate: {e}")))?;
                if xs.len() != 3 {
                    return Err(perr(no, "expected three coordinates".into()));
                }
                let v = Vec3([xs[0], xs[1], xs[2]]);
                if line.starts_with("vn") {
                    normals.push(v);
                } else {
                    vertices.push(v);
                }
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|e| perr(no, format!("bad index `{tok}`: {e}")))?;
                    let i = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                    if i < 0 || i as usize >= vertices.len() {
                        return Err(perr(no, format!("index `{tok}` out of range")));
                    }
                    idx.push(i as u32);
                }
                if idx.len() < 3 {
                    return Err(perr(no, "face with fewer than three vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let normals = (!normals.is_empty() && normals.len() == vertices.len()).then_some(normals);
    Mesh::new(vertices, triangles, normals)
}

pub fn write_ply<T: Real, W: Write>(mesh: &Mesh<T>, w: &mut W, binary: bool) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(
        w,
        "format {} 1.0",
        if binary { "binary_little_endian" } else { "ascii" }
    )?;
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    for p in ["x", "y", "z"] {
        writeln!(w, "property float {p}")?;
    }
    if mesh.normals.is_some() {
        for p in ["nx", "ny", "nz"] {
            writeln!(w, "property float {p}")?;
        }
    }
    writeln!(w, "element face {}", mesh.triangles.len())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        let mut vals = vec![v.x(), v.y(), v.z()];
        if let Some(ns) = &mesh.normals {
            vals.extend_from_slice(&ns[i].0);
        }
        if binary {
            for x in vals {
                w.write_all(&x.as_f32().to_le_bytes())?;
            }
        } else {
            let s: Vec<String> = vals.iter().map(|x| x.as_f32().to_string()).collect();
            writeln!(w, "{}", s.join(" "))?;
        }
    }
    for t in &mesh.triangles {
        if binary {
            w.write_all(&[3u8])?;
            for &i in t {
                w.write_all(&(i as i32).to_le_bytes())?;
            }
        } else {
            writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            PlyType::I8 => b[0] as i8 as f64,
            PlyType::U8 => b[0] as f64,
            PlyType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyType::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

enum PlyProperty {
    Scalar(String, PlyType),
    List(String, PlyType, PlyType),
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
}

pub fn read_ply<R: BufRead>(r: &mut R, path: &Path) -> Result<Mesh<f32>> {
    let perr = |line: usize, reason: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.to_string(),
    };
    let mut line = String::new();
    let mut no = 0;
    let mut next_line = |r: &mut R, line: &mut String| -> Result<usize> {
        line.clear();
        no += 1;
        let n = r.read_line(line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: no,
                reason: "unexpected end of header".into(),
            });
        }
        Ok(no)
    };
    let no0 = next_line(r, &mut line)?;
    if line.trim() != "ply" {
        return Err(perr(no0, "missing `ply` magic"));
    }
    let mut binary = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let n = next_line(r, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", ..] => return Err(perr(n, "unsupported PLY format")),
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count.parse().map_err(|_| perr(n, "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, name] => {
                let el = elements.last_mut().ok_or_else(|| perr(n, "property before element"))?;
                let ct = PlyType::parse(ct).ok_or_else(|| perr(n, "unknown type"))?;
                let it = PlyType::parse(it).ok_or_else(|| perr(n, "unknown type"))?;
                el.props.push(PlyProperty::List(name.to_string(), ct, it));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| perr(n, "property before element"))?;
                let ty = PlyType::parse(ty).ok_or_else(|| perr(n, "unknown type"))?;
                el.props.push(PlyProperty::Scalar(name.to_string(), ty));
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    let binary = binary.ok_or_else(|| perr(no0, "missing format line"))?;

    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    let mut values = PlyValues {
        bytes: &rest,
        pos: 0,
        text: if binary {
            None
        } else {
            Some(std::str::from_utf8(&rest).map_err(|_| perr(no, "non-UTF-8 ASCII body"))?.split_whitespace())
        },
    };

    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut triangles = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [0.0f32; 3];
            let mut nrm = [0.0f32; 3];
            let mut has_n = false;
            for prop in &el.props {
                match prop {
                    PlyProperty::Scalar(name, ty) => {
                        let v = values.next(*ty).ok_or_else(|| perr(no, "truncated PLY body"))? as f32;
                        match name.as_str() {
                            "x" => xyz[0] = v,
                            "y" => xyz[1] = v,
                            "z" => xyz[2] = v,
                            "nx" => (nrm[0], has_n) = (v, true),
                            "ny" => nrm[1] = v,
                            "nz" => nrm[2] = v,
                            _ => {}
                        }
                    }
                    PlyProperty::List(name, ct, it) => {
                        let count = values.next(*ct).ok_or_else(|| perr(no, "truncated PLY body"))? as usize;
                        let mut idx = Vec::with_capacity(count);
                        for _ in 0..count {
                            idx.push(values.next(*it).ok_or_else(|| perr(no, "truncated PLY body"))? as i64);
                        }
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            if idx.len() < 3 || idx.iter().any(|&i| i < 0) {
                                return Err(perr(no, "invalid face"));
                            }
                            for k in 1..idx.len() - 1 {
                                triangles.push([idx[0] as u32, idx[k] as u32, idx[k + 1] as u32]);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                vertices.push(Vec3(xyz));
                if has_n {
                    normals.push(Vec3(nrm));
                }
            }
        }
    }
    let normals = (!normals.is_empty() && normals.len() == vertices.len()).then_some(normals);
    Mesh::new(vertices, triangles, normals)
}

struct PlyValues<'a> {
    bytes: &'a [u8],
    pos: usize,
    text: Option<std::str::SplitWhitespace<'a>>,
}

impl PlyValues<'_> {
    fn next(&mut self, ty: PlyType) -> Option<f64> {
        match &mut self.text {
            Some(it) => it.next()?.parse().ok(),
            None => {
                let s = ty.size();
                let b = self.bytes.get(self.pos..self.pos + s)?;
                self.pos += s;
                Some(ty.decode(b))
            }
        }
    }
}

/// Closest point to `p` on triangle `abc`.
pub fn closest_point_on_triangle(p: Vec3<f64>, a: Vec3<f64>, b: Vec3<f64>, c: Vec3<f64>) -> Vec3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab.scale(d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac.scale(d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b).scale((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab.scale(vb * denom) + ac.scale(vc * denom)
}

/// Result of a nearest-surface query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nearest {
    pub distance_squared: f64,
    pub triangle: usize,
    pub point: Vec3<f64>,
}

/// Ray crossing count, or `None` when the ray grazed an edge or vertex.
pub type Crossings = Option<usize>;

#[derive(Clone, Debug)]
struct Node {
    bounds: Aabb<f64>,
    /// Leaf: first triangle slot and count. Inner: left child index and 0.
    start: u32,
    count: u32,
    right: u32,
}

/// Bounding-volume hierarchy over a mesh's triangles, in double precision.
#[derive(Clone, Debug)]
pub struct MeshIndex {
    tris: Vec<[Vec3<f64>; 3]>,
    /// Original triangle index per slot.
    order: Vec<u32>,
    nodes: Vec<Node>,
}

const LEAF_SIZE: usize = 4;

impl MeshIndex {
    pub fn new<T: Real>(mesh: &Mesh<T>) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::invalid("cannot index an empty mesh"));
        }
        let tris: Vec<[Vec3<f64>; 3]> = (0..mesh.triangles.len())
            .map(|t| mesh.corners(t).map(|v| v.cast::<f64>()))
            .collect();
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let centroids: Vec<Vec3<f64>> = tris.iter().map(|t| (t[0] + t[1] + t[2]).scale(1.0 / 3.0)).collect();
        let mut nodes = Vec::with_capacity(2 * tris.len() / LEAF_SIZE + 1);
        build(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        let tris = order.iter().map(|&i| tris[i as usize]).collect();
        Ok(MeshIndex { tris, order, nodes })
    }

    pub fn triangle_count(&self) -> usize {
        self.tris.len()
    }

    pub fn nearest(&self, p: Vec3<f64>) -> Nearest {
        let mut best = Nearest {
            distance_squared: f64::INFINITY,
            triangle: 0,
            point: p,
        };
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if node.bounds.distance_squared(p) >= best.distance_squared {
                continue;
            }
            if node.count > 0 {
                for s in node.start as usize..(node.start + node.count) as usize {
                    let [a, b, c] = self.tris[s];
                    let q = closest_point_on_triangle(p, a, b, c);
                    let d = (q - p).norm_squared();
                    if d < best.distance_squared
                        || (d == best.distance_squared && (self.order[s] as usize) < best.triangle)
                    {
                        best = Nearest {
                            distance_squared: d,
                            triangle: self.order[s] as usize,
                            point: q,
                        };
                    }
                }
            } else {
                let (l, r) = (ni + 1, node.right);
                let dl = self.nodes[l as usize].bounds.distance_squared(p);
                let dr = self.nodes[r as usize].bounds.distance_squared(p);
                if dl < dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best
    }

    /// Counts crossings of the ray `origin + t·dir`, `t > 0`.
    pub fn ray_crossings(&self, origin: Vec3<f64>, dir: Vec3<f64>) -> Crossings {
        let inv = Vec3([1.0 / dir[0], 1.0 / dir[1], 1.0 / dir[2]]);
        let mut count = 0;
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if !node.bounds.ray_hits(origin, inv, f64::INFINITY) {
                continue;
            }
            if node.count > 0 {
                for s in node.start as usize..(node.start + node.count) as usize {
                    match ray_triangle(origin, dir, &self.tris[s]) {
                        RayHit::Miss => {}
                        RayHit::Hit => count += 1,
                        RayHit::Degenerate => return None,
                    }
                }
            } else {
                stack.push(ni + 1);
                stack.push(node.right);
            }
        }
        Some(count)
    }
}

fn build(
    tris: &[[Vec3<f64>; 3]],
    centroids: &[Vec3<f64>],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let mut bounds = Aabb::empty();
    let mut cb = Aabb::empty();
    for &i in &order[start..end] {
        for v in &tris[i as usize] {
            bounds.grow(*v);
        }
        cb.grow(centroids[i as usize]);
    }
    let id = nodes.len() as u32;
    nodes.push(Node {
        bounds,
        start: start as u32,
        count: (end - start) as u32,
        right: 0,
    });
    if end - start <= LEAF_SIZE {
        return id;
    }
    let ext = cb.extent();
    let axis = if ext[0] >= ext[1] && ext[0] >= ext[2] {
        0
    } else if ext[1] >= ext[2] {
        1
    } else {
        2
    };
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        centroids[a as usize][axis].total_cmp(&centroids[b as usize][axis]).then(a.cmp(&b))
    });
    build(tris, centroids, order, start, mid, nodes);
    let right = build(tris, centroids, order, mid, end, nodes);
    let node = &mut nodes[id as usize];
    node.count = 0;
    node.right = right;
    id
}

enum RayHit {
    Miss,
    Hit,
    Degenerate,
}

// Möller-Trumbore with a band around the edges treated as degenerate.
fn ray_triangle(o: Vec3<f64>, d: Vec3<f64>, tri: &[Vec3<f64>; 3]) -> RayHit {
    const EDGE_EPS: f64 = 1e-9;
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let pv = d.cross(e2);
    let det = e1.dot(pv);
    let scale = e1.norm() * e2.norm() * d.norm();
    if det.abs() <= 1e-12 * scale {
        return RayHit::Miss;
    }
    let inv = 1.0 / det;
    let tv = o - tri[0];
    let u = tv.dot(pv) * inv;
    let qv = tv.cross(e1);
    let v = d.dot(qv) * inv;
    let t = e2.dot(qv) * inv;
    let w = 1.0 - u - v;
    if u < -EDGE_EPS || v < -EDGE_EPS || w < -EDGE_EPS || t < 0.0 {
        return RayHit::Miss;
    }
    if u <= EDGE_EPS || v <= EDGE_EPS || w <= EDGE_EPS {
        return RayHit::Degenerate;
    }
    RayHit::Hit
}

/// Nearest surface point by scanning every triangle.
pub fn nearest_brute_force<T: Real>(mesh: &Mesh<T>, p: Vec3<f64>) -> Nearest {
    let mut best = Nearest {
        distance_squared: f64::INFINITY,
        triangle: 0,
        point: p,
    };
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.corners(t).map(|v| v.cast::<f64>());
        let q = closest_point_on_triangle(p, a, b, c);
        let d = (q - p).norm_squared();
        if d < best.distance_squared {
            best = Nearest {
                distance_squared: d,
                triangle: t,
                point: q,
            };
        }
    }
    best
}

/// A closed icosphere, refined `subdivisions` times.
pub fn icosphere(center: Vec3<f64>, radius: f64, subdivisions: usize) -> Mesh<f64> {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3<f64>> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vec3(*p).try_normalize(0.0).expect("nonzero"))
    .collect();
    let mut f: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(f.len() * 4);
        let mut midpoint = |a: u32, b: u32, v: &mut Vec<Vec3<f64>>| -> u32 {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let m = (v[a as usize] + v[b as usize]).try_normalize(0.0).expect("nonzero");
                v.push(m);
                v.len() as u32 - 1
            })
        };
        for [a, b, c] in f {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = next;
    }
    let vertices = v.into_iter().map(|p| center + p.scale(radius)).collect();
    Mesh {
        vertices,
        triangles: f,
        normals: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tetra() -> Mesh<f64> {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        Mesh::new(v, vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]], None).unwrap()
    }

    #[test]
    fn tetra_is_closed_and_outward() {
        let m = tetra();
        m.check_watertight().unwrap();
        assert!((m.signed_volume() - 1.0 / 6.0).abs() < 1e-12);
        let mut open = m.clone();
        open.triangles.pop();
        assert!(matches!(open.check_watertight(), Err(Error::NotWatertight(_))));
    }

    #[test]
    fn icosphere_is_closed() {
        let s = icosphere(Vec3::zero(), 1.0, 2);
        s.check_watertight().unwrap();
        assert!(s.signed_volume() > 3.9);
    }

    #[test]
    fn out_of_range_index_rejected() {
        assert!(Mesh::<f64>::new(vec![Vec3::zero()], vec![[0, 0, 1]], None).is_err());
    }

    #[test]
    fn single_triangle_obj_lines() {
        let m = Mesh::new(
            vec![Vec3::new(0.0f32, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
            None,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_obj(&m, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(s.lines().filter(|l| l.starts_with("f ")).count(), 1);
        assert!(s.contains("f 1 2 3"));
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
        let q = closest_point_on_triangle(Vec3::new(0.2, 0.2, 1.0), a, b, c);
        assert!((q - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        let q = closest_point_on_triangle(Vec3::new(-1.0, -1.0, 0.0), a, b, c);
        assert_eq!(q, a);
        let q = closest_point_on_triangle(Vec3::new(1.0, 1.0, 0.0), a, b, c);
        assert!((q - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn index_matches_brute_force() {
        let s = icosphere(Vec3::new(0.1, 0.0, -0.2), 0.7, 3);
        let idx = MeshIndex::new(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let a = idx.nearest(p);
            let b = nearest_brute_force(&s, p);
            assert_eq!(a.distance_squared, b.distance_squared);
        }
    }

    #[test]
    fn ray_crossings_of_sphere() {
        let s = icosphere(Vec3::zero(), 1.0, 2);
        let idx = MeshIndex::new(&s).unwrap();
        let d = Vec3::new(0.3, 0.5, 0.8);
        assert_eq!(idx.ray_crossings(Vec3::zero(), d), Some(1));
        assert_eq!(idx.ray_crossings(Vec3::new(0.0, 0.0, -3.0), Vec3::new(0.011, 0.013, 1.0)), Some(2));
        assert_eq!(idx.ray_crossings(Vec3::new(3.0, 0.0, 0.0), d), Some(0));
    }

    #[test]
    fn surface_samples_lie_on_triangles() {
        let s = icosphere(Vec3::zero(), 1.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (p, t) in s.sample_surface(500, &mut rng).unwrap() {
            let [a, b, c] = s.corners(t);
            assert!((closest_point_on_triangle(p, a, b, c) - p).norm() < 1e-12);
        }
    }
}
