//! Point cloud loading, synthetic sampling and bounding boxes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{from_na, to_na, vec_na};

pub const MIN_POINTS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum CloudSource {
    File(PathBuf),
    Synthetic(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    AsciiPly,
    XyzCsv,
}

impl CloudFormat {
    /// Guesses the format from the file extension (`.ply` or anything else).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ply") => CloudFormat::AsciiPly,
            _ => CloudFormat::XyzCsv,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    normals: Option<Vec<[f64; 3]>>,
    source: CloudSource,
    rejected: usize,
}

impl PointCloud {
    pub fn new(
        points: Vec<[f64; 3]>,
        normals: Option<Vec<[f64; 3]>>,
        source: CloudSource,
    ) -> Result<Self> {
        if points.len() < MIN_POINTS {
            return Err(Error::InsufficientData {
                found: points.len(),
                required: MIN_POINTS,
            });
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite point coordinate".into()));
        }
        if let Some(n) = &normals {
            if n.len() != points.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} normals for {} points",
                    n.len(),
                    points.len()
                )));
            }
            for v in n {
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if (len - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!(
                        "normal {v:?} is not unit length"
                    )));
                }
            }
        }
        Ok(PointCloud {
            points,
            normals,
            source,
            rejected: 0,
        })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[[f64; 3]]> {
        self.normals.as_deref()
    }

    pub fn source(&self) -> &CloudSource {
        &self.source
    }

    /// Rows dropped while loading because of non-finite values.
    pub fn rejected(&self) -> usize {
        self.rejected
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for i in 0..3 {
                c[i] += p[i] / n;
            }
        }
        c
    }

    pub fn translated(&self, d: [f64; 3]) -> PointCloud {
        let mut out = self.clone();
        for p in &mut out.points {
            for i in 0..3 {
                p[i] += d[i];
            }
        }
        out
    }

    /// Averages points (and normals) falling into the same cubic voxel of
    /// the given edge length. Output order follows the voxel index.
    pub fn voxel_downsample(&self, edge: f64) -> Result<PointCloud> {
        if !(edge > 0.0) {
            return Err(Error::InvalidArgument(format!("voxel edge {edge} must be positive")));
        }
        let mut cells: BTreeMap<[i64; 3], ([f64; 3], [f64; 3], usize)> = BTreeMap::new();
        for (i, p) in self.points.iter().enumerate() {
            let key = [
                (p[0] / edge).floor() as i64,
                (p[1] / edge).floor() as i64,
                (p[2] / edge).floor() as i64,
            ];
            let e = cells.entry(key).or_insert(([0.0; 3], [0.0; 3], 0));
            for k in 0..3 {
                e.0[k] += p[k];
            }
            if let Some(n) = &self.normals {
                for k in 0..3 {
                    e.1[k] += n[i][k];
                }
            }
            e.2 += 1;
        }
        let mut points = Vec::with_capacity(cells.len());
        let mut normals = self.normals.as_ref().map(|_| Vec::with_capacity(cells.len()));
        for (_, (sum, nsum, count)) in cells {
            let c = count as f64;
            points.push([sum[0] / c, sum[1] / c, sum[2] / c]);
            if let Some(ns) = normals.as_mut() {
                let len = (nsum[0] * nsum[0] + nsum[1] * nsum[1] + nsum[2] * nsum[2]).sqrt();
                if len > 1e-12 {
                    ns.push([nsum[0] / len, nsum[1] / len, nsum[2] / len]);
                } else {
                    ns.push([0.0, 0.0, 1.0]);
                }
            }
        }
        let mut out = PointCloud::new(points, normals, self.source.clone())?;
        out.rejected = self.rejected;
        Ok(out)
    }

    /// Voxel-downsamples with edge `edge`, growing the edge geometrically
    /// until at most `max_points` remain.
    pub fn downsample_capped(&self, edge: f64, max_points: usize) -> Result<PointCloud> {
        let mut e = edge;
        let mut out = self.voxel_downsample(e)?;
        while out.len() > max_points {
            e *= 1.15;
            out = self.voxel_downsample(e)?;
        }
        Ok(out)
    }
}

pub fn load_point_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (points, normals, rejected) = match format {
        CloudFormat::AsciiPly => parse_ply(&text)?,
        CloudFormat::XyzCsv => parse_xyz(&text)?,
    };
    if rejected > 0 {
        log::warn!("{}: rejected {rejected} non-finite rows", path.display());
    }
    let mut cloud = PointCloud::new(points, normals, CloudSource::File(path.to_path_buf()))?;
    cloud.rejected = rejected;
    Ok(cloud)
}

type Parsed = (Vec<[f64; 3]>, Option<Vec<[f64; 3]>>, usize);

fn parse_number(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::Format {
        line,
        msg: format!("cannot parse number {tok:?}"),
    })
}

/// Keeps a row if every value is finite and the normal (if any) has nonzero
/// length; normals are renormalised.
fn accept_row(
    vals: &[f64],
    with_normals: bool,
    points: &mut Vec<[f64; 3]>,
    normals: &mut Vec<[f64; 3]>,
) -> bool {
    if vals.iter().any(|v| !v.is_finite()) {
        return false;
    }
    if with_normals {
        let n = [vals[3], vals[4], vals[5]];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len < 1e-12 {
            return false;
        }
        normals.push([n[0] / len, n[1] / len, n[2] / len]);
    }
    points.push([vals[0], vals[1], vals[2]]);
    true
}

fn parse_xyz(text: &str) -> Result<Parsed> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut columns: Option<usize> = None;
    let mut rejected = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .collect();
        if toks.len() != 3 && toks.len() != 6 {
            return Err(Error::Format {
                line,
                msg: format!("expected 3 or 6 columns, found {}", toks.len()),
            });
        }
        match columns {
            None => columns = Some(toks.len()),
            Some(c) if c != toks.len() => {
                return Err(Error::Format {
                    line,
                    msg: format!("column count changed from {c} to {}", toks.len()),
                })
            }
            _ => {}
        }
        let vals = toks
            .iter()
            .map(|t| parse_number(t, line))
            .collect::<Result<Vec<_>>>()?;
        if !accept_row(&vals, vals.len() == 6, &mut points, &mut normals) {
            rejected += 1;
        }
    }
    let normals = (columns == Some(6)).then_some(normals);
    Ok((points, normals, rejected))
}

fn parse_ply(text: &str) -> Result<Parsed> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => {
            return Err(Error::Format {
                line: 1,
                msg: "missing `ply` magic".into(),
            })
        }
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut seen_vertex = false;
    let mut elements_before = 0usize;
    let mut props: Vec<String> = Vec::new();
    let mut ascii = false;
    let mut header_end = None;
    for (i, raw) in lines.by_ref() {
        let line = i + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", "1.0"] => ascii = true,
            ["format", ..] => {
                return Err(Error::Format {
                    line,
                    msg: "only `format ascii 1.0` is supported".into(),
                })
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                let n: usize = n.parse().map_err(|_| Error::Format {
                    line,
                    msg: format!("bad element count {n:?}"),
                })?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(n);
                    seen_vertex = true;
                } else if !seen_vertex {
                    elements_before += n;
                }
            }
            ["property", "list", ..] => {}
            ["property", _ty, name] => {
                if in_vertex {
                    props.push((*name).to_string());
                }
            }
            ["end_header"] => {
                header_end = Some(line);
                break;
            }
            _ => {
                return Err(Error::Format {
                    line,
                    msg: format!("unexpected header line {raw:?}"),
                })
            }
        }
    }
    let header_end = header_end.ok_or(Error::Format {
        line: text.lines().count(),
        msg: "missing end_header".into(),
    })?;
    if !ascii {
        return Err(Error::Format {
            line: header_end,
            msg: "missing format line".into(),
        });
    }
    let count = vertex_count.ok_or(Error::Format {
        line: header_end,
        msg: "no vertex element".into(),
    })?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => {
            return Err(Error::Format {
                line: header_end,
                msg: "vertex element lacks x/y/z".into(),
            })
        }
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };

    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::new();
    let mut rejected = 0;
    let mut body = lines.filter(|(_, l)| !l.trim().is_empty()).skip(elements_before);
    for _ in 0..count {
        let (i, raw) = body.next().ok_or(Error::Format {
            line: text.lines().count(),
            msg: format!("expected {count} vertices"),
        })?;
        let line = i + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.len() < props.len() {
            return Err(Error::Format {
                line,
                msg: format!("expected {} values, found {}", props.len(), toks.len()),
            });
        }
        let mut vals = vec![
            parse_number(toks[ix], line)?,
            parse_number(toks[iy], line)?,
            parse_number(toks[iz], line)?,
        ];
        if let Some(nc) = normal_cols {
            for c in nc {
                vals.push(parse_number(toks[c], line)?);
            }
        }
        if !accept_row(&vals, normal_cols.is_some(), &mut points, &mut normals) {
            rejected += 1;
        }
    }
    Ok((points, normal_cols.map(|_| normals), rejected))
}

fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn save_point_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let mut out = String::new();
    let normals = cloud.normals();
    match format {
        CloudFormat::AsciiPly => {
            out.push_str("ply\nformat ascii 1.0\n");
            let _ = writeln!(out, "element vertex {}", cloud.len());
            out.push_str("property double x\nproperty double y\nproperty double z\n");
            if normals.is_some() {
                out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
            }
            out.push_str("end_header\n");
        }
        CloudFormat::XyzCsv => out.push_str("# x,y,z[,nx,ny,nz]\n"),
    }
    let sep = if format == CloudFormat::AsciiPly { " " } else { "," };
    for (i, p) in cloud.points().iter().enumerate() {
        let mut cols: Vec<String> = p.iter().map(|v| fmt9(*v)).collect();
        if let Some(n) = normals {
            cols.extend(n[i].iter().map(|v| fmt9(*v)));
        }
        out.push_str(&cols.join(sep));
        out.push('\n');
    }
    crate::io::write_atomic(path, out.as_bytes())
}

/// Box given by center, positive half-extents and an orientation whose
/// columns are the box axes in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundingBox {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub rotation: [[f64; 3]; 3],
}

impl BoundingBox {
    pub fn axis_aligned(center: [f64; 3], half_extents: [f64; 3]) -> Result<Self> {
        Self::new(
            center,
            half_extents,
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        )
    }

    pub fn new(center: [f64; 3], half_extents: [f64; 3], rotation: [[f64; 3]; 3]) -> Result<Self> {
        if half_extents.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::DegenerateGeometry(format!(
                "half extents {half_extents:?} must be positive"
            )));
        }
        if !crate::geometry::is_rotation(&rotation, 1e-9) {
            return Err(Error::InvalidArgument("box rotation is not a proper rotation".into()));
        }
        Ok(BoundingBox {
            center,
            half_extents,
            rotation,
        })
    }

    pub fn longest_edge(&self) -> f64 {
        2.0 * self.half_extents.iter().cloned().fold(0.0, f64::max)
    }

    pub fn diagonal(&self) -> f64 {
        2.0 * self.half_extents.iter().map(|h| h * h).sum::<f64>().sqrt()
    }

    /// Maps a point given in box coordinates to world coordinates.
    pub fn to_world(&self, local: [f64; 3]) -> [f64; 3] {
        let w = to_na(&self.rotation) * vec_na(&local) + vec_na(&self.center);
        [w.x, w.y, w.z]
    }

    pub fn contains(&self, p: [f64; 3], tol: f64) -> bool {
        let local = to_na(&self.rotation).transpose() * (vec_na(&p) - vec_na(&self.center));
        (0..3).all(|i| local[i].abs() <= self.half_extents[i] + tol)
    }

    pub fn corners(&self) -> Vec<[f64; 3]> {
        let h = self.half_extents;
        let mut out = Vec::with_capacity(8);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    out.push(self.to_world([sx * h[0], sy * h[1], sz * h[2]]));
                }
            }
        }
        out
    }

    pub fn face_centers(&self) -> Vec<[f64; 3]> {
        let h = self.half_extents;
        let mut out = Vec::with_capacity(6);
        for axis in 0..3 {
            for s in [-1.0, 1.0] {
                let mut l = [0.0; 3];
                l[axis] = s * h[axis];
                out.push(self.to_world(l));
            }
        }
        out
    }
}

/// Axis-aligned box of the cloud scaled by `scale` about its center.
/// Axes with zero extent get a tiny positive half-extent so that planar
/// clouds remain usable; a cloud with zero extent on every axis is rejected.
pub fn scaled_aabb(cloud: &PointCloud, scale: f64) -> Result<BoundingBox> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale {scale} must be positive")));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in cloud.points() {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let raw: Vec<f64> = (0..3).map(|i| 0.5 * (hi[i] - lo[i])).collect();
    let largest = raw.iter().cloned().fold(0.0, f64::max);
    if largest <= 0.0 {
        return Err(Error::DegenerateGeometry("cloud has zero extent on all axes".into()));
    }
    let floor = largest * 1e-9;
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
    let half = [
        scale * raw[0].max(floor),
        scale * raw[1].max(floor),
        scale * raw[2].max(floor),
    ];
    BoundingBox::axis_aligned(center, half)
}

fn covariance(points: &[[f64; 3]], c: &[f64; 3]) -> Matrix3<f64> {
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::new(p[0] - c[0], p[1] - c[1], p[2] - c[2]);
        cov += d * d.transpose();
    }
    cov / points.len() as f64
}

fn extent_box(points: &[[f64; 3]], axes: Matrix3<f64>) -> Result<BoundingBox> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        let l = axes.transpose() * vec_na(p);
        for i in 0..3 {
            lo[i] = lo[i].min(l[i]);
            hi[i] = hi[i].max(l[i]);
        }
    }
    let mid = Vector3::new(0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2]));
    let c = axes * mid;
    let half = [
        (0.5 * (hi[0] - lo[0])).max(1e-9),
        (0.5 * (hi[1] - lo[1])).max(1e-9),
        (0.5 * (hi[2] - lo[2])).max(1e-9),
    ];
    BoundingBox::new([c.x, c.y, c.z], half, from_na(&axes))
}

/// Oriented box from the principal axes of the point covariance, largest
/// variance first. Axis signs are fixed so that each axis' largest
/// component is positive and the frame is right-handed.
pub fn oriented_bbox(cloud: &PointCloud) -> Result<BoundingBox> {
    let c = cloud.centroid();
    let eig = SymmetricEigen::new(covariance(cloud.points(), &c));
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Matrix3::zeros();
    for (k, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        axes.set_column(k, &v);
    }
    let third = axes.column(0).cross(&axes.column(1));
    axes.set_column(2, &third);
    extent_box(cloud.points(), axes)
}

/// Oriented box whose third axis stays vertical (+z, gravity aligned); the
/// horizontal axes come from the principal axes of the xy-covariance.
pub fn upright_oriented_bbox(cloud: &PointCloud) -> Result<BoundingBox> {
    let c = cloud.centroid();
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in cloud.points() {
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    // major axis angle of the 2x2 covariance; isotropic clouds keep x
    let iso = (sxx - syy).abs() <= 1e-9 * (sxx + syy) && sxy.abs() <= 1e-9 * (sxx + syy);
    let phi = if iso { 0.0 } else { 0.5 * (2.0 * sxy).atan2(sxx - syy) };
    let (s, co) = phi.sin_cos();
    let axes = Matrix3::new(co, -s, 0.0, s, co, 0.0, 0.0, 0.0, 1.0);
    extent_box(cloud.points(), axes)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Full edge lengths along x, y, z.
    Box { ex: f64, ey: f64, ez: f64 },
    /// Axis along z, centered at the origin.
    Cylinder { radius: f64, height: f64 },
}

impl Shape {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Box { ex, ey, ez } => ex > 0.0 && ey > 0.0 && ez > 0.0,
            Shape::Cylinder { radius, height } => radius > 0.0 && height > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("shape parameters must be positive: {self:?}")))
        }
    }

    pub fn name(&self) -> String {
        match *self {
            Shape::Sphere { radius } => format!("sphere({radius})"),
            Shape::Box { ex, ey, ez } => format!("box({ex},{ey},{ez})"),
            Shape::Cylinder { radius, height } => format!("cylinder({radius},{height})"),
        }
    }

    /// Exact signed distance, negative inside.
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        match *self {
            Shape::Sphere { radius } => (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - radius,
            Shape::Box { ex, ey, ez } => {
                let q = [p[0].abs() - ex / 2.0, p[1].abs() - ey / 2.0, p[2].abs() - ez / 2.0];
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside + inside
            }
            Shape::Cylinder { radius, height } => {
                let d = [(p[0] * p[0] + p[1] * p[1]).sqrt() - radius, p[2].abs() - height / 2.0];
                let outside = (d[0].max(0.0).powi(2) + d[1].max(0.0).powi(2)).sqrt();
                outside + d[0].max(d[1]).min(0.0)
            }
        }
    }

    /// Outward unit normal from the central-difference gradient of the SDF.
    pub fn normal(&self, p: [f64; 3]) -> [f64; 3] {
        let h = 1e-7;
        let mut g = [0.0; 3];
        for i in 0..3 {
            let (mut a, mut b) = (p, p);
            a[i] += h;
            b[i] -= h;
            g[i] = (self.sdf(a) - self.sdf(b)) / (2.0 * h);
        }
        let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        [g[0] / n, g[1] / n, g[2] / n]
    }

    /// Uniform-by-area surface sample with its exact outward normal.
    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
        match *self {
            Shape::Sphere { radius } => loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-9 {
                    let u = [v[0] / n, v[1] / n, v[2] / n];
                    return ([u[0] * radius, u[1] * radius, u[2] * radius], u);
                }
            },
            Shape::Box { ex, ey, ez } => {
                let h = [ex / 2.0, ey / 2.0, ez / 2.0];
                let areas = [ey * ez, ex * ez, ex * ey];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = i;
                        break;
                    }
                    pick -= a;
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                for i in 0..3 {
                    p[i] = if i == axis {
                        sign * h[i]
                    } else {
                        (rng.random::<f64>() * 2.0 - 1.0) * h[i]
                    };
                }
                let mut n = [0.0; 3];
                n[axis] = sign;
                (p, n)
            }
            Shape::Cylinder { radius, height } => {
                let side = 2.0 * std::f64::consts::PI * radius * height;
                let cap = std::f64::consts::PI * radius * radius;
                let pick = rng.random::<f64>() * (side + 2.0 * cap);
                if pick < side {
                    let th = rng.random::<f64>() * std::f64::consts::TAU;
                    let z = (rng.random::<f64>() - 0.5) * height;
                    let (s, c) = th.sin_cos();
                    ([radius * c, radius * s, z], [c, s, 0.0])
                } else {
                    let sign = if pick < side + cap { 1.0 } else { -1.0 };
                    let r = radius * rng.random::<f64>().sqrt();
                    let th = rng.random::<f64>() * std::f64::consts::TAU;
                    let (s, c) = th.sin_cos();
                    ([r * c, r * s, sign * height / 2.0], [0.0, 0.0, sign])
                }
            }
        }
    }
}

/// Samples `n` surface points with exact normals. Noise is Gaussian along
/// the normal, truncated at four standard deviations.
pub fn sample_synthetic(shape: Shape, n: usize, noise_sigma: f64, seed: u64) -> Result<PointCloud> {
    shape.validate()?;
    if n < MIN_POINTS {
        return Err(Error::InsufficientData {
            found: n,
            required: MIN_POINTS,
        });
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise sigma must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, nrm) = shape.sample_surface(&mut rng);
        let offset = if noise_sigma > 0.0 {
            loop {
                let z: f64 = StandardNormal.sample(&mut rng);
                if z.abs() <= 4.0 {
                    break z * noise_sigma;
                }
            }
        } else {
            0.0
        };
        points.push([p[0] + offset * nrm[0], p[1] + offset * nrm[1], p[2] + offset * nrm[2]]);
        normals.push(nrm);
    }
    PointCloud::new(points, Some(normals), CloudSource::Synthetic(shape.name()))
}
