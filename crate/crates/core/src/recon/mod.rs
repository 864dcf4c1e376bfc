//! Surface reconstruction: dense field evaluation, marching cubes, normals.

mod tables;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::sign_by_ray_parity;
use crate::error::{Error, Result};
use crate::fields::{NeuralGif, PoseContext, WeightPrior};
use crate::geometry::{Aabb, Vec3};
use crate::mesh::{Mesh, MeshIndex};
use crate::scalar::Real;

use tables::{CORNER_OFFSETS, EDGE_CORNERS, TRIANGLE_TABLE};

pub use crate::mesh::{read_mesh, write_mesh as export_mesh, MeshFormat};

/// Margin around the posed joints used when no bounds are given. End
/// segments reach about 0.31 past their joint on the default body.
pub const AUTO_BOUNDS_MARGIN: f64 = 0.4;
/// Voxels evaluated per batch.
pub const DEFAULT_CHUNK: usize = 4096;

/// Samples on a regular grid, stored with z varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField<T> {
    pub res: [usize; 3],
    pub bounds: Aabb<T>,
    pub values: Vec<T>,
}

impl<T: Real> ScalarField<T> {
    pub fn new(res: [usize; 3], bounds: Aabb<T>, values: Vec<T>) -> Result<Self> {
        if res.iter().any(|&r| r < 2) {
            return Err(Error::invalid(format!("grid resolution {res:?} below 2")));
        }
        let n = res[0] * res[1] * res[2];
        if values.len() != n {
            return Err(Error::invalid(format!("{} values for a {n}-voxel grid", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite field value"));
        }
        let e = bounds.extent();
        if !(e[0] > T::zero() && e[1] > T::zero() && e[2] > T::zero()) {
            return Err(Error::invalid("grid bounds have no volume"));
        }
        Ok(ScalarField { res, bounds, values })
    }

    /// Edge lengths of one voxel.
    pub fn voxel_size(&self) -> Vec3<T> {
        let e = self.bounds.extent();
        Vec3::new(
            e[0] / T::from_usize_lossy(self.res[0]),
            e[1] / T::from_usize_lossy(self.res[1]),
            e[2] / T::from_usize_lossy(self.res[2]),
        )
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.res[1] + j) * self.res[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.values[self.index(i, j, k)]
    }

    /// Center of voxel `(i, j, k)`.
    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3<T> {
        let h = self.voxel_size();
        let half = T::lit(0.5);
        Vec3::new(
            self.bounds.min[0] + (T::from_usize_lossy(i) + half) * h[0],
            self.bounds.min[1] + (T::from_usize_lossy(j) + half) * h[1],
            self.bounds.min[2] + (T::from_usize_lossy(k) + half) * h[2],
        )
    }

    pub fn centers(res: [usize; 3], bounds: Aabb<T>) -> Vec<Vec3<T>> {
        let probe = ScalarField {
            res,
            bounds,
            values: Vec::new(),
        };
        let mut out = Vec::with_capacity(res[0] * res[1] * res[2]);
        for i in 0..res[0] {
            for j in 0..res[1] {
                for k in 0..res[2] {
                    out.push(probe.center(i, j, k));
                }
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        ScalarField {
            res: self.res,
            bounds: self.bounds,
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Raises border samples below `floor` to it, so every level set under
    /// `floor` is closed by the grid boundary. Returns how many were raised.
    pub fn cap_border(&mut self, floor: T) -> usize {
        let [nx, ny, nz] = self.res;
        let mut raised = 0;
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let edge = i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1;
                    let at = self.index(i, j, k);
                    if edge && self.values[at] < floor {
                        self.values[at] = floor;
                        raised += 1;
                    }
                }
            }
        }
        raised
    }

    /// Debug dump: magic, resolution, bounds, then values, all little-endian
    /// with float32 payload.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let mut put = |b: &[u8]| w.write_all(b).map_err(io);
        put(FIELD_MAGIC)?;
        for r in self.res {
            put(&(r as u32).to_le_bytes())?;
        }
        for v in self.bounds.min.0.iter().chain(&self.bounds.max.0) {
            put(&v.as_f32().to_le_bytes())?;
        }
        for v in &self.values {
            put(&v.as_f32().to_le_bytes())?;
        }
        w.flush().map_err(io)
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: reason.into(),
        };
        if bytes.len() < 44 || &bytes[..8] != FIELD_MAGIC {
            return Err(bad("not a field dump"));
        }
        let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let f = |o: usize| T::lit(f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as f64);
        let res = [u(8) as usize, u(12) as usize, u(16) as usize];
        let min = Vec3::new(f(20), f(24), f(28));
        let max = Vec3::new(f(32), f(36), f(40));
        let n = res[0] * res[1] * res[2];
        if bytes.len() != 44 + 4 * n {
            return Err(bad("payload length does not match resolution"));
        }
        let values = (0..n).map(|i| f(44 + 4 * i)).collect();
        ScalarField::new(res, Aabb { min, max }, values)
    }
}

const FIELD_MAGIC: &[u8; 8] = b"NGIFFLD1";

/// Anything that can be evaluated over a batch of points. `None` marks a
/// point the source could not evaluate.
pub trait FieldSource<T: Real>: Sync {
    fn eval(&self, points: &[Vec3<T>]) -> Result<Vec<Option<T>>>;
}

/// A plain function of position.
pub struct FnField<F>(pub F);

impl<T: Real, F: Fn(Vec3<T>) -> T + Sync> FieldSource<T> for FnField<F> {
    fn eval(&self, points: &[Vec3<T>]) -> Result<Vec<Option<T>>> {
        Ok(points.iter().map(|p| Some((self.0)(*p))).collect())
    }
}

/// The learned posed SDF of one pose.
pub struct ModelField<'a, T: Real> {
    pub model: &'a NeuralGif<T>,
    pub context: &'a PoseContext<T>,
    pub prior: Option<&'a dyn WeightPrior<T>>,
}

impl<T: Real> FieldSource<T> for ModelField<'_, T> {
    fn eval(&self, points: &[Vec3<T>]) -> Result<Vec<Option<T>>> {
        self.model.eval_sdf_batch(points, self.context, self.prior)
    }
}

/// Bounds enclosing `joints` with `margin` on every side.
pub fn auto_bounds<T: Real>(joints: &[Vec3<T>], margin: T) -> Aabb<T> {
    Aabb::from_points(joints).expanded(margin)
}

/// Grid of field values plus the number of voxels that could not be
/// evaluated; those are set to the largest value found (outside).
#[derive(Clone, Debug)]
pub struct GridEval<T> {
    pub field: ScalarField<T>,
    pub singular: usize,
}

pub fn eval_grid<T: Real>(
    source: &dyn FieldSource<T>,
    bounds: Aabb<T>,
    res: usize,
    chunk: usize,
) -> Result<GridEval<T>> {
    if res < 8 {
        return Err(Error::config("res", format!("{res} is below the minimum of 8")));
    }
    let chunk = chunk.max(1);
    let pts = ScalarField::centers([res; 3], bounds);
    let parts: Vec<Result<Vec<Option<T>>>> = pts.par_chunks(chunk).map(|c| source.eval(c)).collect();
    let mut raw = Vec::with_capacity(pts.len());
    for p in parts {
        raw.extend(p?);
    }
    let fill = raw
        .iter()
        .flatten()
        .fold(None, |m: Option<T>, v| Some(m.map_or(*v, |m| m.max(*v))))
        .ok_or_else(|| Error::invalid("no voxel of the grid could be evaluated"))?;
    let fill = fill.max(T::zero());
    let singular = raw.iter().filter(|v| v.is_none()).count();
    let values = raw.into_iter().map(|v| v.unwrap_or(fill)).collect();
    if singular > 0 {
        log::warn!("{singular} voxels had a singular blended transform");
    }
    Ok(GridEval {
        field: ScalarField::new([res; 3], bounds, values)?,
        singular,
    })
}

// Lattice indices 0, s, 2s, .. plus the last index.
fn lattice(res: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..res).step_by(stride).collect();
    if *v.last().expect("res > 0") != res - 1 {
        v.push(res - 1);
    }
    v
}

/// Like [`eval_grid`], but exact only near the surface. The field is first
/// evaluated on every `stride`-th voxel; a coarse cell whose corners all
/// share a sign and sit at least one cell diagonal from zero is filled by
/// trilinear interpolation, every other cell is evaluated voxel by voxel.
/// For a field that is close to 1-Lipschitz the zero crossings, and so the
/// extracted mesh, match the dense grid.
pub fn eval_grid_banded<T: Real>(
    source: &dyn FieldSource<T>,
    bounds: Aabb<T>,
    res: usize,
    stride: usize,
    chunk: usize,
) -> Result<GridEval<T>> {
    if res < 8 {
        return Err(Error::config("res", format!("{res} is below the minimum of 8")));
    }
    if stride < 2 {
        return eval_grid(source, bounds, res, chunk);
    }
    let chunk = chunk.max(1);
    let probe = ScalarField {
        res: [res; 3],
        bounds,
        values: Vec::new(),
    };
    let nodes = lattice(res, stride);
    let m = nodes.len();
    let eval = |idx: &[usize]| -> Result<Vec<Option<T>>> {
        let pts: Vec<Vec3<T>> = idx
            .iter()
            .map(|&v| probe.center(v / (res * res), (v / res) % res, v % res))
            .collect();
        let parts: Vec<Result<Vec<Option<T>>>> = pts.par_chunks(chunk).map(|c| source.eval(c)).collect();
        let mut out = Vec::with_capacity(pts.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    };

    let mut known: Vec<Option<Option<T>>> = vec![None; res * res * res];
    let mut coarse = Vec::with_capacity(m * m * m);
    for &i in &nodes {
        for &j in &nodes {
            coarse.extend(nodes.iter().map(|&k| probe.index(i, j, k)));
        }
    }
    let coarse_values = eval(&coarse)?;
    for (v, val) in coarse.iter().zip(&coarse_values) {
        known[*v] = Some(*val);
    }
    let node = |a: usize, b: usize, c: usize| coarse_values[(a * m + b) * m + c];
    let h = probe.voxel_size();

    let mut exact = Vec::new();
    let mut far_cells = Vec::new();
    for a in 0..m - 1 {
        for b in 0..m - 1 {
            for c in 0..m - 1 {
                let corners: Vec<Option<T>> = CORNER_OFFSETS
                    .iter()
                    .map(|o| node(a + o[0], b + o[1], c + o[2]))
                    .collect();
                let span = Vec3::new(
                    h[0] * T::from_usize_lossy(nodes[a + 1] - nodes[a]),
                    h[1] * T::from_usize_lossy(nodes[b + 1] - nodes[b]),
                    h[2] * T::from_usize_lossy(nodes[c + 1] - nodes[c]),
                );
                let band = span.norm();
                let far = corners.iter().all(|v| v.is_some_and(|v| v.abs() >= band))
                    && (corners.iter().all(|v| v.is_some_and(|v| v > T::zero()))
                        || corners.iter().all(|v| v.is_some_and(|v| v < T::zero())));
                if far {
                    far_cells.push((a, b, c));
                    continue;
                }
                for i in nodes[a]..=nodes[a + 1] {
                    for j in nodes[b]..=nodes[b + 1] {
                        for k in nodes[c]..=nodes[c + 1] {
                            let v = probe.index(i, j, k);
                            if known[v].is_none() {
                                exact.push(v);
                            }
                        }
                    }
                }
            }
        }
    }
    exact.sort_unstable();
    exact.dedup();
    for (v, val) in exact.iter().zip(eval(&exact)?) {
        known[*v] = Some(val);
    }
    for (a, b, c) in far_cells {
        let (i0, j0, k0) = (nodes[a], nodes[b], nodes[c]);
        let (di, dj, dk) = (nodes[a + 1] - i0, nodes[b + 1] - j0, nodes[c + 1] - k0);
        let corner = |o: usize, p: usize, q: usize| node(a + o, b + p, c + q).expect("far cells have values");
        for i in i0..=i0 + di {
            for j in j0..=j0 + dj {
                for k in k0..=k0 + dk {
                    let v = probe.index(i, j, k);
                    if known[v].is_some() {
                        continue;
                    }
                    let t = [
                        T::from_usize_lossy(i - i0) / T::from_usize_lossy(di),
                        T::from_usize_lossy(j - j0) / T::from_usize_lossy(dj),
                        T::from_usize_lossy(k - k0) / T::from_usize_lossy(dk),
                    ];
                    let mut acc = T::zero();
                    for o in CORNER_OFFSETS {
                        let wgt = (0..3).fold(T::one(), |w, ax| w * if o[ax] == 1 { t[ax] } else { T::one() - t[ax] });
                        acc += wgt * corner(o[0], o[1], o[2]);
                    }
                    known[v] = Some(Some(acc));
                }
            }
        }
    }
    let raw: Vec<Option<T>> = known.into_iter().map(|v| v.expect("every voxel assigned")).collect();
    let fill = raw
        .iter()
        .flatten()
        .fold(None, |m: Option<T>, v| Some(m.map_or(*v, |m| m.max(*v))))
        .ok_or_else(|| Error::invalid("no voxel of the grid could be evaluated"))?
        .max(T::zero());
    let singular = raw.iter().filter(|v| v.is_none()).count();
    if singular > 0 {
        log::warn!("{singular} voxels had a singular blended transform");
    }
    let evaluated = coarse.len() + exact.len();
    log::debug!("banded grid: {evaluated} of {} voxels evaluated", raw.len());
    Ok(GridEval {
        field: ScalarField::new([res; 3], bounds, raw.into_iter().map(|v| v.unwrap_or(fill)).collect())?,
        singular,
    })
}

/// The learned field of one pose on a `res³` grid; bounds default to the
/// posed joints plus [`AUTO_BOUNDS_MARGIN`].
pub fn eval_model_grid<T: Real>(
    model: &NeuralGif<T>,
    context: &PoseContext<T>,
    prior: Option<&dyn WeightPrior<T>>,
    bounds: Option<Aabb<T>>,
    res: usize,
) -> Result<GridEval<T>> {
    let bounds = bounds.unwrap_or_else(|| auto_bounds(&context.posed_joints, T::lit(AUTO_BOUNDS_MARGIN)));
    let src = ModelField { model, context, prior };
    eval_grid(&src, bounds, res, DEFAULT_CHUNK)
}

// Keeps interpolated vertices off grid corners so no triangle collapses.
const EDGE_T_CLAMP: f64 = 1e-4;

/// Extracts the `iso` level set. Corners below `iso` are inside; triangles
/// wind counter-clockwise seen from outside, toward increasing values.
pub fn marching_cubes<T: Real>(field: &ScalarField<T>, iso: T) -> Result<Mesh<T>> {
    let [nx, ny, nz] = field.res;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut edge_vertex: HashMap<(usize, u8), u32> = HashMap::new();
    let lo = T::lit(EDGE_T_CLAMP);
    let hi = T::one() - lo;
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            for k in 0..nz - 1 {
                let mut vals = [T::zero(); 8];
                let mut case = 0usize;
                for (c, off) in CORNER_OFFSETS.iter().enumerate() {
                    vals[c] = field.get(i + off[0], j + off[1], k + off[2]);
                    if vals[c] < iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRIANGLE_TABLE[case];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let [a, b] = EDGE_CORNERS[e as usize];
                        let (oa, ob) = (CORNER_OFFSETS[a], CORNER_OFFSETS[b]);
                        let ga = (i + oa[0], j + oa[1], k + oa[2]);
                        let gb = (i + ob[0], j + ob[1], k + ob[2]);
                        let (g0, g1, v0, v1) = if ga <= gb {
                            (ga, gb, vals[a], vals[b])
                        } else {
                            (gb, ga, vals[b], vals[a])
                        };
                        let axis = if g0.0 != g1.0 {
                            0u8
                        } else if g0.1 != g1.1 {
                            1
                        } else {
                            2
                        };
                        let key = (field.index(g0.0, g0.1, g0.2), axis);
                        ids[slot] = *edge_vertex.entry(key).or_insert_with(|| {
                            let t = ((iso - v0) / (v1 - v0)).max(lo).min(hi);
                            let p0 = field.center(g0.0, g0.1, g0.2);
                            let p1 = field.center(g1.0, g1.1, g1.2);
                            vertices.push(p0 + (p1 - p0).scale(t));
                            vertices.len() as u32 - 1
                        });
                    }
                    triangles.push(ids);
                }
            }
        }
    }
    if triangles.is_empty() {
        return Err(Error::EmptySurface(iso.as_f64()));
    }
    for t in &mut triangles {
        t.swap(1, 2);
    }
    Mesh::new(vertices, triangles, None)
}

/// Closed shell around the `|f| = tau` level set, for open surfaces.
pub fn thin_surface_mesh<T: Real>(field: &ScalarField<T>, tau: T) -> Result<Mesh<T>> {
    if !(tau > T::zero()) {
        return Err(Error::config("tau", format!("must be positive, got {tau}")));
    }
    marching_cubes(&field.map(|v| v.abs() - tau), T::zero())
}

/// Keeps the connected components that enclose at least one anchor point,
/// typically the posed joints; returns the kept mesh and how many components
/// were dropped. When no component encloses an anchor the mesh is returned
/// whole.
pub fn keep_anchored_components<T: Real>(mesh: &Mesh<T>, anchors: &[Vec3<T>]) -> Result<(Mesh<T>, usize)> {
    let groups = mesh.component_triangles();
    if groups.len() < 2 {
        return Ok((mesh.clone(), 0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut keep = Vec::new();
    for g in &groups {
        let part = mesh.submesh(g);
        let index = MeshIndex::new(&part)?;
        let mut hit = false;
        for a in anchors {
            if sign_by_ray_parity(&index, a.cast(), ANCHOR_RAYS, &mut rng)? < 0.0 {
                hit = true;
                break;
            }
        }
        if hit {
            keep.extend_from_slice(g);
        }
    }
    if keep.is_empty() {
        return Ok((mesh.clone(), 0));
    }
    keep.sort_unstable();
    let dropped = groups.len() - groups.iter().filter(|g| keep.binary_search(&g[0]).is_ok()).count();
    Ok((mesh.submesh(&keep), dropped))
}

const ANCHOR_RAYS: usize = 5;

/// Sets per-vertex normals from the normal network; vertices where it
/// fails fall back to area-weighted face normals. Returns the fallback count.
pub fn attach_normals<T: Real>(
    mesh: &mut Mesh<T>,
    model: &NeuralGif<T>,
    context: &PoseContext<T>,
    prior: Option<&dyn WeightPrior<T>>,
) -> usize {
    let predicted: Vec<Option<Vec3<T>>> = mesh
        .vertices
        .par_chunks(DEFAULT_CHUNK)
        .map(|c| {
            model
                .eval_normal_batch(c, context, prior)
                .unwrap_or_else(|_| vec![None; c.len()])
        })
        .collect::<Vec<_>>()
        .concat();
    let faces = mesh.vertex_normals_from_faces();
    let mut fallback = 0;
    let normals = predicted
        .into_iter()
        .zip(faces)
        .map(|(p, f)| match p {
            Some(n) if n.is_finite() => n,
            _ => {
                fallback += 1;
                f
            }
        })
        .collect();
    mesh.normals = Some(normals);
    fallback
}
