//! Gaussian process implicit surface over signed distance.
//!
//! Training targets are signed distances at surface (0), exterior (> 0) and
//! interior (< 0) points with per-point noise. The covariance is the
//! thin-plate kernel `k(r) = 2r³ − 3Rr² + R³` for `r < R` and zero beyond,
//! where `R` is the diagonal of the scaled bounding box.
//! The GP models the residual of a rounded-box prior mean fitted to the
//! surface points, so the mean keeps growing away from the object.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::geometry::{vals, V3};
use crate::io;
use crate::pointcloud::{scaled_aabb, upright_oriented_bbox, BoundingBox, CloudSource, PointCloud};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GpisConfig {
    pub bbox_scale: f64,
    pub surface_noise: f64,
    pub exterior_noise: f64,
    pub interior_noise: f64,
    pub interior_count: usize,
    pub softmax_temperature: f64,
    /// Voxel edge (m) for downsampling the surface points.
    pub voxel_edge: f64,
    /// Surface points kept after downsampling; the voxel edge grows until
    /// the count fits.
    pub max_surface_points: usize,
    /// Upper bound on the total training-set size.
    pub max_points: usize,
    /// Floor on the posterior standard deviation used by `surface_pdf`.
    pub sigma_floor: f64,
    pub rng_seed: u64,
    pub prior: PriorKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Zero,
    #[default]
    RoundedBox,
}

impl Default for GpisConfig {
    fn default() -> Self {
        GpisConfig {
            bbox_scale: 1.2,
            surface_noise: 0.005,
            exterior_noise: 0.2,
            interior_noise: 0.05,
            interior_count: 50,
            softmax_temperature: 1.0,
            voxel_edge: 0.005,
            max_surface_points: 200,
            max_points: 2000,
            sigma_floor: 1e-6,
            rng_seed: 0x5eed,
            prior: PriorKind::RoundedBox,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointClass {
    Surface,
    Exterior,
    Interior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpisTrainingSet {
    pub points: Vec<[f64; 3]>,
    pub values: Vec<f64>,
    pub noise: Vec<f64>,
    pub classes: Vec<PointClass>,
    /// Kernel scale `R` in meters.
    pub kernel_scale: f64,
    #[serde(default)]
    pub prior: PriorKind,
}

impl GpisTrainingSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count(&self, class: PointClass) -> usize {
        self.classes.iter().filter(|c| **c == class).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if self.values.len() != n || self.noise.len() != n || self.classes.len() != n {
            return Err(Error::InvalidArgument("training lists differ in length".into()));
        }
        if !(self.kernel_scale > 0.0) {
            return Err(Error::InvalidArgument("kernel scale must be positive".into()));
        }
        for i in 0..n {
            let v = self.values[i];
            let ok = match self.classes[i] {
                PointClass::Surface => v == 0.0,
                PointClass::Exterior => v > 0.0,
                PointClass::Interior => v < 0.0,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "point {i}: value {v} inconsistent with class {:?}",
                    self.classes[i]
                )));
            }
            if !(self.noise[i] > 0.0) {
                return Err(Error::InvalidArgument(format!("point {i}: noise must be positive")));
            }
        }
        Ok(())
    }
}

/// Surface, exterior and interior training points for a cloud.
///
/// Exterior points are the 8 corners and 6 face centers of the scaled
/// axis-aligned box; interior points are convex combinations of the surface
/// points with softmax-normalised random weights.
pub fn build_training_set(cloud: &PointCloud, cfg: &GpisConfig) -> Result<GpisTrainingSet> {
    let bbox = scaled_aabb(cloud, cfg.bbox_scale)?;
    let surface = cloud.downsample_capped(cfg.voxel_edge, cfg.max_surface_points)?;
    let longest = bbox.longest_edge();

    let mut set = GpisTrainingSet {
        points: Vec::new(),
        values: Vec::new(),
        noise: Vec::new(),
        classes: Vec::new(),
        kernel_scale: bbox.diagonal(),
        prior: cfg.prior,
    };
    let mut push = |p: [f64; 3], v: f64, s: f64, c: PointClass| {
        set.points.push(p);
        set.values.push(v);
        set.noise.push(s);
        set.classes.push(c);
    };
    for p in surface.points() {
        push(*p, 0.0, cfg.surface_noise, PointClass::Surface);
    }
    for p in exterior_points(&bbox) {
        push(p, 0.5 * longest, cfg.exterior_noise, PointClass::Exterior);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let pts = surface.points();
    for _ in 0..cfg.interior_count {
        let raw: Vec<f64> = (0..pts.len())
            .map(|_| rng.random::<f64>() / cfg.softmax_temperature)
            .collect();
        let top = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = raw.iter().map(|r| (r - top).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut p = [0.0; 3];
        for (wi, q) in w.iter().zip(pts) {
            for k in 0..3 {
                p[k] += wi / total * q[k];
            }
        }
        push(p, -0.25 * longest, cfg.interior_noise, PointClass::Interior);
    }
    if set.len() > cfg.max_points {
        return Err(Error::InvalidArgument(format!(
            "training set of {} points exceeds the cap of {}",
            set.len(),
            cfg.max_points
        )));
    }
    Ok(set)
}

fn exterior_points(bbox: &BoundingBox) -> Vec<[f64; 3]> {
    let mut out = bbox.corners();
    out.extend(bbox.face_centers());
    out
}

#[inline]
fn kernel(r: f64, scale: f64) -> f64 {
    if r >= scale {
        return 0.0;
    }
    2.0 * r * r * r - 3.0 * scale * r * r + scale * scale * scale
}

/// Posterior at one query point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceQuery {
    pub mean: f64,
    pub variance: f64,
    pub grad_mean: [f64; 3],
}

/// Signed distance of an upright extruded rounded rectangle with rounded
/// cap edges, fitted to the surface points.
///
/// `corner` rounds the vertical edges (a cylinder when it equals the smaller
/// horizontal half-extent), `edge` rounds the cap edges (a sphere when both
/// equal the common half-extent, a box when both are zero). Yaw and both
/// radii are picked on a grid to minimise the squared prior value over the
/// surface points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapePrior {
    pub center: [f64; 3],
    pub yaw: f64,
    pub half_extents: [f64; 3],
    pub corner: f64,
    pub edge: f64,
}

const PRIOR_GRID: usize = 20;

impl ShapePrior {
    fn from_surface(train: &GpisTrainingSet) -> Result<Option<Self>> {
        let pts: Vec<[f64; 3]> = train
            .points
            .iter()
            .zip(&train.classes)
            .filter(|(_, c)| **c == PointClass::Surface)
            .map(|(p, _)| *p)
            .collect();
        if pts.len() < crate::pointcloud::MIN_POINTS {
            return Ok(None);
        }
        let cloud = PointCloud::new(pts, None, CloudSource::Synthetic("surface".into()))?;
        let pca_yaw = {
            let r = upright_oriented_bbox(&cloud)?.rotation;
            r[1][0].atan2(r[0][0])
        };
        let yaws = (0..18).map(|i| (i as f64 * 5.0).to_radians()).chain([pca_yaw]);
        let mut best: Option<(f64, ShapePrior)> = None;
        for yaw in yaws {
            let (s, c) = yaw.sin_cos();
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for p in cloud.points() {
                let l = [c * p[0] + s * p[1], -s * p[0] + c * p[1], p[2]];
                for k in 0..3 {
                    lo[k] = lo[k].min(l[k]);
                    hi[k] = hi[k].max(l[k]);
                }
            }
            let mid: [f64; 3] = std::array::from_fn(|k| 0.5 * (lo[k] + hi[k]));
            let center = [c * mid[0] - s * mid[1], s * mid[0] + c * mid[1], mid[2]];
            let half_extents: [f64; 3] = std::array::from_fn(|k| (0.5 * (hi[k] - lo[k])).max(1e-9));
            let max_corner = half_extents[0].min(half_extents[1]);
            for i in 0..=PRIOR_GRID {
                let corner = max_corner * i as f64 / PRIOR_GRID as f64;
                let max_edge = half_extents[2].min(max_corner);
                for j in 0..=PRIOR_GRID {
                    let prior = ShapePrior {
                        center,
                        yaw,
                        half_extents,
                        corner,
                        edge: max_edge * j as f64 / PRIOR_GRID as f64,
                    };
                    let err: f64 = cloud.points().iter().map(|p| prior.value(p).powi(2)).sum();
                    if best.as_ref().is_none_or(|(e, _)| err < *e) {
                        best = Some((err, prior));
                    }
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }

    pub fn value(&self, x: &[f64; 3]) -> f64 {
        self.derivatives(x).0
    }

    fn derivatives(&self, x: &[f64; 3]) -> (f64, [f64; 3], [[f64; 3]; 3]) {
        let (s, c) = self.yaw.sin_cos();
        let d = [x[0] - self.center[0], x[1] - self.center[1], x[2] - self.center[2]];
        let y = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
        let sg = y.map(|v| if v < 0.0 { -1.0 } else { 1.0 });
        let h = self.half_extents;

        // horizontal rounded rectangle
        let q = [y[0].abs() - (h[0] - self.corner), y[1].abs() - (h[1] - self.corner)];
        let o = [q[0].max(0.0), q[1].max(0.0)];
        let len = (o[0] * o[0] + o[1] * o[1]).sqrt();
        let mut g2 = [0.0; 2];
        let mut h2 = [[0.0; 2]; 2];
        let d2 = if len > 0.0 {
            let u = [o[0] / len, o[1] / len];
            for a in 0..2 {
                g2[a] = sg[a] * u[a];
                for b in 0..2 {
                    let act = if a == b && q[a] > 0.0 { 1.0 } else { 0.0 };
                    h2[a][b] = sg[a] * sg[b] * (act - u[a] * u[b]) / len;
                }
            }
            len - self.corner
        } else {
            let k = if q[1] > q[0] { 1 } else { 0 };
            g2[k] = sg[k];
            q[k] - self.corner
        };

        // extrusion with rounded cap edges
        let w = [d2 + self.edge, y[2].abs() - (h[2] - self.edge)];
        let ow = [w[0].max(0.0), w[1].max(0.0)];
        let lw = (ow[0] * ow[0] + ow[1] * ow[1]).sqrt();
        let mut fw = [0.0; 2];
        let mut fww = [[0.0; 2]; 2];
        let value = if lw > 0.0 {
            let u = [ow[0] / lw, ow[1] / lw];
            for a in 0..2 {
                fw[a] = u[a];
                for b in 0..2 {
                    let act = if a == b && w[a] > 0.0 { 1.0 } else { 0.0 };
                    fww[a][b] = (act - u[a] * u[b]) / lw;
                }
            }
            lw - self.edge
        } else {
            let k = if w[1] > w[0] { 1 } else { 0 };
            fw[k] = 1.0;
            w[k] - self.edge
        };

        // J = ∂w/∂y
        let jac = [[g2[0], g2[1], 0.0], [0.0, 0.0, sg[2]]];
        let gl: [f64; 3] = std::array::from_fn(|i| fw[0] * jac[0][i] + fw[1] * jac[1][i]);
        let mut hl = [[0.0; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                let mut v = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        v += jac[a][i] * fww[a][b] * jac[b][k];
                    }
                }
                if i < 2 && k < 2 {
                    v += fw[0] * h2[i][k];
                }
                hl[i][k] = v;
            }
        }
        // world = Rz(yaw) local
        let r = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let g: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| r[i][j] * gl[j]).sum());
        let mut hw = [[0.0; 3]; 3];
        for i in 0..3 {
            for l in 0..3 {
                hw[i][l] = (0..3)
                    .map(|j| (0..3).map(|k| r[i][j] * hl[j][k] * r[l][k]).sum::<f64>())
                    .sum();
            }
        }
        (value, g, hw)
    }
}

#[derive(Clone, Debug)]
pub struct GpisModel {
    train: GpisTrainingSet,
    prior: Option<ShapePrior>,
    weights: Vec<f64>,
    /// Row-major inverse of the Gram-plus-noise matrix.
    gram_inv: Vec<f64>,
    sigma_floor: f64,
}

pub fn fit(train: &GpisTrainingSet) -> Result<GpisModel> {
    train.validate()?;
    let n = train.len();
    let r = train.kernel_scale;
    let mut gram = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let d = dist(&train.points[i], &train.points[j]);
            let k = kernel(d, r);
            gram[(i, j)] = k;
            gram[(j, i)] = k;
        }
        gram[(i, i)] += train.noise[i] * train.noise[i];
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::IllConditioned(format!("{n} training points")))?;
    let prior = match train.prior {
        PriorKind::Zero => None,
        PriorKind::RoundedBox => ShapePrior::from_surface(train)?,
    };
    let y = nalgebra::DVector::from_iterator(
        n,
        train
            .points
            .iter()
            .zip(&train.values)
            .map(|(p, v)| v - prior.map_or(0.0, |m| m.value(p))),
    );
    let weights = chol.solve(&y);
    let inv = chol.inverse();
    let mut gram_inv = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            gram_inv.push(inv[(i, j)]);
        }
    }
    Ok(GpisModel {
        train: train.clone(),
        prior,
        weights: weights.iter().cloned().collect(),
        gram_inv,
        sigma_floor: GpisConfig::default().sigma_floor,
    })
}

#[inline]
fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl GpisModel {
    pub fn training_set(&self) -> &GpisTrainingSet {
        &self.train
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kernel_scale(&self) -> f64 {
        self.train.kernel_scale
    }

    pub fn with_sigma_floor(mut self, floor: f64) -> Self {
        self.sigma_floor = floor;
        self
    }

    pub fn sigma_floor(&self) -> f64 {
        self.sigma_floor
    }

    pub fn prior(&self) -> Option<&ShapePrior> {
        self.prior.as_ref()
    }

    pub fn mean(&self, x: &[f64; 3]) -> f64 {
        let r = self.train.kernel_scale;
        let residual: f64 = self
            .train
            .points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * kernel(dist(x, p), r))
            .sum();
        residual + self.prior.map_or(0.0, |m| m.value(x))
    }

    /// Mean, its gradient and its Hessian (row-major).
    pub fn mean_derivatives(&self, x: &[f64; 3]) -> (f64, [f64; 3], [[f64; 3]; 3]) {
        let scale = self.train.kernel_scale;
        let (mut m, mut g, mut h) = match &self.prior {
            Some(prior) => prior.derivatives(x),
            None => (0.0, [0.0; 3], [[0.0; 3]; 3]),
        };
        for (p, w) in self.train.points.iter().zip(&self.weights) {
            let d = [x[0] - p[0], x[1] - p[1], x[2] - p[2]];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if r >= scale {
                continue;
            }
            m += w * kernel(r, scale);
            // grad k = 6 (r - R) d ; hess k = 6 d dᵀ / r + 6 (r - R) I
            let c = 6.0 * (r - scale) * w;
            for a in 0..3 {
                g[a] += c * d[a];
                h[a][a] += c;
            }
            if r > 1e-12 {
                let s = 6.0 * w / r;
                for a in 0..3 {
                    for b in 0..3 {
                        h[a][b] += s * d[a] * d[b];
                    }
                }
            }
        }
        (m, g, h)
    }

    /// Posterior variance and its gradient.
    pub fn variance_with_grad(&self, x: &[f64; 3]) -> (f64, [f64; 3]) {
        let scale = self.train.kernel_scale;
        let n = self.train.len();
        let mut kstar = Vec::with_capacity(n);
        let mut diffs = Vec::with_capacity(n);
        for p in &self.train.points {
            let d = [x[0] - p[0], x[1] - p[1], x[2] - p[2]];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            kstar.push(kernel(r, scale));
            diffs.push((d, r));
        }
        let mut quad = 0.0;
        let mut g = [0.0; 3];
        for i in 0..n {
            let row = &self.gram_inv[i * n..(i + 1) * n];
            let a: f64 = row.iter().zip(&kstar).map(|(u, v)| u * v).sum();
            quad += a * kstar[i];
            let (d, r) = diffs[i];
            let c = -2.0 * a * 6.0 * (r - scale).min(0.0);
            for k in 0..3 {
                g[k] += c * d[k];
            }
        }
        let var = (scale * scale * scale - quad).max(0.0);
        (var, g)
    }

    pub fn variance(&self, x: &[f64; 3]) -> f64 {
        self.variance_with_grad(x).0
    }

    pub fn query(&self, x: &[f64; 3]) -> SurfaceQuery {
        let (mean, grad_mean, _) = self.mean_derivatives(x);
        SurfaceQuery {
            mean,
            variance: self.variance(x),
            grad_mean,
        }
    }

    /// Density of the event "x lies on the surface" under the posterior.
    pub fn surface_pdf(&self, x: &[f64; 3]) -> f64 {
        let mean = self.mean(x);
        let var = self.variance(x);
        let sigma = var.sqrt();
        if sigma < self.sigma_floor {
            log::debug!("posterior sigma {sigma:e} below floor at {x:?}; clamped");
        }
        gaussian_zero_density(mean, var.max(self.sigma_floor * self.sigma_floor))
    }

    /// Mean as a differentiable scalar.
    pub fn mean_ad<T: Scalar>(&self, x: &V3<T>) -> T {
        let xv = vals(x);
        let (m, g, _) = self.mean_derivatives(&xv);
        T::custom(m, &[(x[0], g[0]), (x[1], g[1]), (x[2], g[2])])
    }

    /// Mean and outward unit normal (normalised mean gradient), both
    /// differentiable in `x`.
    pub fn mean_normal_ad<T: Scalar>(&self, x: &V3<T>) -> (T, V3<T>) {
        let xv = vals(x);
        let (m, g, h) = self.mean_derivatives(&xv);
        let mean = T::custom(m, &[(x[0], g[0]), (x[1], g[1]), (x[2], g[2])]);
        let len = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-12);
        let n = [g[0] / len, g[1] / len, g[2] / len];
        // d n / d x = (I - n nᵀ) H / |g|
        let mut normal = [T::zero(); 3];
        for a in 0..3 {
            let mut row = [0.0; 3];
            for b in 0..3 {
                let mut s = 0.0;
                for c in 0..3 {
                    let proj = if a == c { 1.0 } else { 0.0 } - n[a] * n[c];
                    s += proj * h[c][b];
                }
                row[b] = s / len;
            }
            normal[a] = T::custom(n[a], &[(x[0], row[0]), (x[1], row[1]), (x[2], row[2])]);
        }
        (mean, normal)
    }

    /// Surface density as a differentiable scalar.
    pub fn surface_pdf_ad<T: Scalar>(&self, x: &V3<T>) -> T {
        let xv = vals(x);
        let (m, gm, _) = self.mean_derivatives(&xv);
        let (var, gv) = self.variance_with_grad(&xv);
        let floor2 = self.sigma_floor * self.sigma_floor;
        let (v, gv) = if var > floor2 { (var, gv) } else { (floor2, [0.0; 3]) };
        let pdf = gaussian_zero_density(m, v);
        let dm = -pdf * m / v;
        let dv = pdf * (m * m / (2.0 * v * v) - 0.5 / v);
        T::custom(
            pdf,
            &[
                (x[0], dm * gm[0] + dv * gv[0]),
                (x[1], dm * gm[1] + dv * gv[1]),
                (x[2], dm * gm[2] + dv * gv[2]),
            ],
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = toml::to_string(&self.train)
            .map_err(|e| Error::Numerical(format!("serialising model: {e}")))?;
        let mut text = io::schema_line("gpis", 1);
        text.push_str(&body);
        io::write_atomic(path, text.as_bytes())
    }

    /// Loads a saved training set and refits (the factorization is not stored).
    pub fn load(path: &Path) -> Result<GpisModel> {
        let text = io::read_to_string(path)?;
        let body = io::strip_schema(&text, "gpis", 1)?;
        let train: GpisTrainingSet = toml::from_str(body).map_err(|e| Error::Format {
            line: 2,
            msg: e.to_string(),
        })?;
        fit(&train)
    }
}

/// `N(0; mean, var)`: the Gaussian density at zero.
pub fn gaussian_zero_density(mean: f64, var: f64) -> f64 {
    (-mean * mean / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Density for explicit `(d_mu, d_sigma)`, flooring sigma.
pub fn surface_pdf_from(mean: f64, sigma: f64, floor: f64) -> f64 {
    let s = sigma.max(floor);
    gaussian_zero_density(mean, s * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, reset_tape, Var};
    use crate::pointcloud::{sample_synthetic, Shape};

    fn norm3(x: &[f64; 3]) -> f64 {
        (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
    }

    fn sphere_model() -> GpisModel {
        let cloud = sample_synthetic(Shape::Sphere { radius: 0.05 }, 500, 0.0, 11).unwrap();
        fit(&build_training_set(&cloud, &GpisConfig::default()).unwrap()).unwrap()
    }

    #[test]
    fn pdf_reference_values() {
        assert!((surface_pdf_from(0.0, 1.0, 1e-6) - 0.398_942_280_4).abs() < 1e-9);
        let s = 0.3;
        assert!((surface_pdf_from(s, s, 1e-6) - 0.241_970_724_5 / s).abs() < 1e-9);
        let tiny = surface_pdf_from(0.1, 0.01, 1e-6);
        assert!((tiny - 7.694_598_626_7e-21).abs() < 1e-28, "{tiny:e}");
    }

    #[test]
    fn training_set_counts_and_values() {
        let cloud = sample_synthetic(Shape::Sphere { radius: 0.05 }, 500, 0.0, 1).unwrap();
        let cfg = GpisConfig {
            max_surface_points: 1000,
            voxel_edge: 1e-4,
            ..Default::default()
        };
        let t = build_training_set(&cloud, &cfg).unwrap();
        assert_eq!(t.count(PointClass::Surface), 500);
        assert_eq!(t.count(PointClass::Exterior), 14);
        assert_eq!(t.count(PointClass::Interior), 50);
        let longest = scaled_aabb(&cloud, 1.2).unwrap().longest_edge();
        for i in 0..t.len() {
            match t.classes[i] {
                PointClass::Surface => assert_eq!((t.values[i], t.noise[i]), (0.0, 0.005)),
                PointClass::Exterior => assert_eq!((t.values[i], t.noise[i]), (0.5 * longest, 0.2)),
                PointClass::Interior => {
                    assert_eq!((t.values[i], t.noise[i]), (-0.25 * longest, 0.05))
                }
            }
        }
    }

    #[test]
    fn cube_exterior_and_interior_values() {
        let mut pts = Vec::new();
        for x in [-0.1, 0.1] {
            for y in [-0.1, 0.1] {
                for z in [-0.1, 0.1] {
                    pts.push([x, y, z]);
                }
            }
        }
        let cloud = PointCloud::new(pts, None, crate::pointcloud::CloudSource::Synthetic("c".into()))
            .unwrap();
        let t = build_training_set(&cloud, &GpisConfig::default()).unwrap();
        let ext = t.classes.iter().position(|c| *c == PointClass::Exterior).unwrap();
        let int = t.classes.iter().position(|c| *c == PointClass::Interior).unwrap();
        assert!((t.values[ext] - 0.12).abs() < 1e-12);
        assert!((t.values[int] + 0.06).abs() < 1e-12);
        // interior points are convex combinations: inside the cube
        for (p, c) in t.points.iter().zip(&t.classes) {
            if *c == PointClass::Interior {
                assert!(p.iter().all(|v| v.abs() <= 0.1 + 1e-15));
            }
        }
    }

    #[test]
    fn prior_derivatives_match_finite_differences() {
        let prior = ShapePrior {
            center: [0.01, -0.02, 0.03],
            yaw: 0.4,
            half_extents: [0.05, 0.03, 0.04],
            corner: 0.01,
            edge: 0.015,
        };
        let h = 1e-6;
        for x in [[0.09, 0.02, 0.05], [0.02, 0.0, 0.1], [-0.07, 0.06, -0.04], [0.015, -0.01, 0.04]] {
            let (_, g, hess) = prior.derivatives(&x);
            for k in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let (vp, gp, _) = prior.derivatives(&xp);
                let (vm, gm, _) = prior.derivatives(&xm);
                assert!(((vp - vm) / (2.0 * h) - g[k]).abs() < 1e-6, "grad {x:?} {k}");
                for i in 0..3 {
                    assert!(((gp[i] - gm[i]) / (2.0 * h) - hess[i][k]).abs() < 1e-4, "hess {x:?} {i}{k}");
                }
            }
        }
    }

    #[test]
    fn prior_recovers_primitive_distances() {
        let sphere = |x: &[f64; 3]| norm3(x) - 0.05;
        let cube = |x: &[f64; 3]| {
            let q = x.map(|v| v.abs() - 0.05);
            let out = norm3(&q.map(|v| v.max(0.0)));
            out + q[0].max(q[1]).max(q[2]).min(0.0)
        };
        let cylinder = |x: &[f64; 3]| {
            let q = [x[0].hypot(x[1]) - 0.04, x[2].abs() - 0.06];
            q[0].max(0.0).hypot(q[1].max(0.0)) + q[0].max(q[1]).min(0.0)
        };
        // voxel centroids near sharp edges sit inside the shape, so the fit
        // rounds edges by up to about one voxel
        let cases: [(Shape, &dyn Fn(&[f64; 3]) -> f64, f64); 3] = [
            (Shape::Sphere { radius: 0.05 }, &sphere, 3e-3),
            (Shape::Box { ex: 0.1, ey: 0.1, ez: 0.1 }, &cube, 1e-2),
            (Shape::Cylinder { radius: 0.04, height: 0.12 }, &cylinder, 1e-2),
        ];
        for (shape, sdf, tol) in cases {
            let cloud = sample_synthetic(shape, 500, 0.0, 3).unwrap();
            let m = fit(&build_training_set(&cloud, &GpisConfig::default()).unwrap()).unwrap();
            let prior = m.prior().unwrap();
            for x in [[0.1, 0.02, 0.0], [0.0, -0.12, 0.05], [0.06, 0.06, 0.09], [0.0, 0.0, 0.2]] {
                let err = (prior.value(&x) - sdf(&x)).abs();
                assert!(err < tol, "{shape:?} at {x:?}: {err}");
            }
        }
    }

    #[test]
    fn fit_reproduces_training_targets() {
        let m = sphere_model();
        let t = m.training_set();
        for i in 0..t.len() {
            let q = m.mean(&t.points[i]);
            assert!((q - t.values[i]).abs() <= 3.0 * t.noise[i], "point {i}");
            assert!(m.variance(&t.points[i]) <= t.noise[i] * t.noise[i] + 1e-9);
        }
    }

    #[test]
    fn sphere_queries() {
        let m = sphere_model();
        assert!(m.mean(&[0.05, 0.0, 0.0]).abs() <= 0.01);
        assert!(m.mean(&[0.0, 0.0, 0.0]) < 0.0);
        let g = m.query(&[0.05, 0.0, 0.0]).grad_mean;
        let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        let angle = (g[0] / n).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 5.0, "normal off by {angle} deg");
    }

    #[test]
    fn refit_is_bit_identical() {
        let a = sphere_model();
        let b = sphere_model();
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let m = sphere_model();
        let h = 1e-6;
        for x in [[0.03, -0.02, 0.045], [0.07, 0.01, -0.01], [-0.02, 0.0, 0.02]] {
            let (_, g, hess) = m.mean_derivatives(&x);
            let (_, gv) = m.variance_with_grad(&x);
            for k in 0..3 {
                let (mut a, mut b) = (x, x);
                a[k] += h;
                b[k] -= h;
                let fd = (m.mean(&a) - m.mean(&b)) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1.0));
                let fdv = (m.variance(&a) - m.variance(&b)) / (2.0 * h);
                assert!((fdv - gv[k]).abs() <= 1e-5 * gv[k].abs().max(1e-3));
                let ga = m.mean_derivatives(&a).1;
                let gb = m.mean_derivatives(&b).1;
                for r in 0..3 {
                    let fdh = (ga[r] - gb[r]) / (2.0 * h);
                    assert!((fdh - hess[r][k]).abs() <= 1e-5 * hess[r][k].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn pdf_ad_matches_finite_differences() {
        let m = sphere_model();
        let x0 = [0.045, 0.01, 0.02];
        reset_tape();
        let x = [Var::input(x0[0]), Var::input(x0[1]), Var::input(x0[2])];
        let p = m.surface_pdf_ad(&x);
        assert!((p.value() - m.surface_pdf(&x0)).abs() < 1e-9 * p.value().abs());
        let g = backward(p);
        let h = 1e-7;
        for k in 0..3 {
            let (mut a, mut b) = (x0, x0);
            a[k] += h;
            b[k] -= h;
            let fd = (m.surface_pdf(&a) - m.surface_pdf(&b)) / (2.0 * h);
            assert!((fd - g.wrt(x[k])).abs() <= 1e-4 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let m = sphere_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");
        m.save(&path).unwrap();
        let back = GpisModel::load(&path).unwrap();
        assert_eq!(back.training_set(), m.training_set());
        assert_eq!(back.weights(), m.weights());
    }

    #[test]
    fn invalid_training_set_rejected() {
        let t = GpisTrainingSet {
            points: vec![[0.0; 3]; 2],
            values: vec![0.0, 1.0],
            noise: vec![0.1, 0.1],
            classes: vec![PointClass::Surface, PointClass::Interior],
            kernel_scale: 1.0,
            prior: PriorKind::Zero,
        };
        assert!(fit(&t).is_err());
    }
}
