//! Planar grasp coverage: for sampled triangle poses, compare compliant
//! grasps (the object may move before settling) with direct force closure
//! at the initial contacts under the same joint-torque limits.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Scalar};
use crate::error::{Error, Result};
use crate::hand::HandModel;
use crate::io;
use crate::spring::{contact_margin_generic, margin_energy, solve_planar_equilibrium, SpringSystem};

use super::closure::{force_closure_feasible, ClosureStatus, Dim, TorqueModel};
use super::dynamics::{margin_trace, simulate, ForceMode, NormalSource, SimOptions, SimStatus};

/// Two-link planar finger with revolute joints about `z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanarFinger {
    pub base: [f64; 2],
    /// Direction of the first link at zero joint angle.
    pub yaw: f64,
    pub l1: f64,
    pub l2: f64,
    /// `+1` puts the elbow left of the base-to-tip line, `-1` right.
    pub elbow: f64,
}

/// Elbow position, or `None` when the point is out of reach.
fn elbow_point<T: Scalar>(f: &PlanarFinger, p: &[T; 2]) -> Option<[T; 2]> {
    let dx = p[0] - f.base[0];
    let dy = p[1] - f.base[1];
    let d2 = dx * dx + dy * dy;
    let d = d2.value().sqrt();
    if d > f.l1 + f.l2 || d < (f.l1 - f.l2).abs() || d == 0.0 {
        return None;
    }
    let d = d2.sqrt();
    let a = (d2 + (f.l1 * f.l1 - f.l2 * f.l2)) / (d * 2.0);
    let h2 = (a * a - f.l1 * f.l1) * -1.0;
    let h = h2.max_c(0.0).sqrt();
    let (ux, uy) = (dx / d, dy / d);
    Some([
        a * ux - h * uy * f.elbow + f.base[0],
        a * uy + h * ux * f.elbow + f.base[1],
    ])
}

impl PlanarFinger {
    pub fn reach(&self) -> f64 {
        self.l1 + self.l2
    }

    /// Joint angles placing the tip at `p`.
    pub fn inverse_kinematics(&self, p: &[f64; 2]) -> Option<[f64; 2]> {
        let e = elbow_point(self, p)?;
        let a1 = (e[1] - self.base[1]).atan2(e[0] - self.base[0]);
        let a2 = (p[1] - e[1]).atan2(p[0] - e[0]);
        let wrap = |x: f64| (x + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
        Some([wrap(a1 - self.yaw), wrap(a2 - a1)])
    }

    /// `2 × 2` Jacobian at the tip position `p`.
    pub fn jacobian(&self, p: &[f64; 2]) -> Option<DMatrix<f64>> {
        let e = elbow_point(self, p)?;
        Some(DMatrix::from_row_slice(
            2,
            2,
            &[-(p[1] - self.base[1]), -(p[1] - e[1]), p[0] - self.base[0], p[0] - e[0]],
        ))
    }

    /// Joint torques for tip force `f`; `None` when out of reach.
    pub fn torques<T: Scalar>(&self, p: &[T; 2], f: &[T; 2]) -> Option<[T; 2]> {
        let e = elbow_point(self, p)?;
        let cross = |o: [T; 2]| (p[0] - o[0]) * f[1] - (p[1] - o[1]) * f[0];
        Some([cross([T::cst(self.base[0]), T::cst(self.base[1])]), cross(e)])
    }
}

/// Reads the planar fingers from a hand with two `z` joints per finger.
pub fn planar_fingers(hand: &HandModel) -> Result<Vec<PlanarFinger>> {
    let bad = |msg: &str| Error::Config(format!("{}: {msg}", hand.name));
    hand.fingertips
        .iter()
        .map(|tip| {
            let l2_idx = tip.link.ok_or_else(|| bad("fingertip on the palm"))?;
            let l2 = &hand.links[l2_idx];
            let l1_idx = l2.parent.ok_or_else(|| bad("finger needs two links"))?;
            let l1 = &hand.links[l1_idx];
            if l1.parent.is_some() {
                return Err(bad("finger needs exactly two links"));
            }
            for link in [l1, l2] {
                let j = link.joint.ok_or_else(|| bad("finger links need joints"))?;
                if hand.joints[j].axis != [0.0, 0.0, 1.0] {
                    return Err(bad("planar joints must turn about z"));
                }
            }
            let planar = |v: &[f64; 3]| v[2] == 0.0 && v[1] == 0.0 && v[0] > 0.0;
            if !planar(&l2.offset) || !planar(&tip.offset) {
                return Err(bad("links must extend along x"));
            }
            Ok(PlanarFinger {
                base: [l1.offset[0], l1.offset[1]],
                yaw: l1.rotation[1][0].atan2(l1.rotation[0][0]),
                l1: l2.offset[0],
                l2: tip.offset[0],
                elbow: 1.0,
            })
        })
        .collect()
}

/// Triangle with contact locations, in its local frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triangle {
    pub name: String,
    pub vertices: [[f64; 2]; 3],
}

impl Triangle {
    pub fn centroid(&self) -> [f64; 2] {
        let v = &self.vertices;
        [(v[0][0] + v[1][0] + v[2][0]) / 3.0, (v[0][1] + v[1][1] + v[2][1]) / 3.0]
    }

    /// Outward unit normal of the edge through `p`.
    pub fn edge_normal(&self, p: &[f64; 2]) -> Result<[f64; 2]> {
        let c = self.centroid();
        let mut best: Option<(f64, [f64; 2])> = None;
        for i in 0..3 {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % 3];
            let e = [b[0] - a[0], b[1] - a[1]];
            let l = e[0].hypot(e[1]);
            let mut n = [e[1] / l, -e[0] / l];
            if n[0] * (c[0] - a[0]) + n[1] * (c[1] - a[1]) > 0.0 {
                n = [-n[0], -n[1]];
            }
            let t = ((p[0] - a[0]) * e[0] + (p[1] - a[1]) * e[1]) / (l * l);
            let dist = (n[0] * (p[0] - a[0]) + n[1] * (p[1] - a[1])).abs();
            if (-1e-9..=1.0 + 1e-9).contains(&t) && best.is_none_or(|(d, _)| dist < d) {
                best = Some((dist, n));
            }
        }
        match best {
            Some((d, n)) if d < 1e-9 => Ok(n),
            _ => Err(Error::InvalidArgument(format!("{p:?} is not on the boundary of {}", self.name))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactConfig {
    pub name: String,
    pub triangle: usize,
    pub contacts: Vec<[f64; 2]>,
}

/// The two triangles and three contact configurations each.
pub fn default_scenarios() -> (Vec<Triangle>, Vec<ContactConfig>) {
    let triangles = vec![
        Triangle { name: "triangle1".into(), vertices: [[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]] },
        Triangle { name: "triangle2".into(), vertices: [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]] },
    ];
    let table: [[[[f64; 2]; 3]; 3]; 2] = [
        [
            [[0.5, 0.0], [0.75, 0.5], [0.25, 0.5]],
            [[0.4, 0.0], [0.8, 0.4], [0.2, 0.4]],
            [[0.6, 0.0], [0.7, 0.6], [0.3, 0.6]],
        ],
        [
            [[0.5, 0.0], [1.0, 0.5], [0.5, 0.5]],
            [[0.4, 0.0], [1.0, 0.4], [0.4, 0.4]],
            [[0.6, 0.0], [1.0, 0.6], [0.6, 0.6]],
        ],
    ];
    let mut configs = Vec::new();
    for (t, rows) in table.iter().enumerate() {
        for (c, pts) in rows.iter().enumerate() {
            configs.push(ContactConfig {
                name: format!("config{}", c + 1),
                triangle: t,
                contacts: pts.to_vec(),
            });
        }
    }
    (triangles, configs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageOptions {
    pub n_poses: usize,
    pub restarts: usize,
    pub tau_max: f64,
    pub mu: f64,
    /// Minimum normal force of every contact in a held grasp.
    pub min_force: f64,
    /// Triangle centroids are drawn uniformly from a disk of this radius.
    pub spawn_radius: f64,
    /// Initial gains are log-uniform in this range.
    pub gain_range: [f64; 2],
    /// Initial targets are uniform within this distance of the centroid.
    pub target_radius: f64,
    pub iterations: usize,
    pub step: f64,
    pub seed: u64,
    pub sim: SimOptions,
}

impl Default for CoverageOptions {
    fn default() -> Self {
        CoverageOptions {
            n_poses: 100,
            restarts: 2000,
            tau_max: 1.0,
            mu: 0.5,
            min_force: 1.1,
            spawn_radius: 0.2,
            gain_range: [1.0, 50.0],
            target_radius: 0.6,
            iterations: 60,
            step: 0.02,
            seed: 0,
            sim: SimOptions { planar: true, t_max: 200.0, ..Default::default() },
        }
    }
}

impl CoverageOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_poses == 0 || self.restarts == 0 {
            return Err(Error::InvalidArgument("n_poses and restarts must be positive".into()));
        }
        if !(self.tau_max >= 0.0) || !(self.mu >= 0.0) || !(self.min_force > 0.0) {
            return Err(Error::InvalidArgument("tau_max, mu must be non-negative and min_force positive".into()));
        }
        if !(self.gain_range[0] > 0.0 && self.gain_range[1] >= self.gain_range[0]) {
            return Err(Error::InvalidArgument("gain range must be positive and ordered".into()));
        }
        self.sim.validate()
    }
}

/// One sampled triangle pose with contacts assigned to fingers.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarScene {
    pub contacts: Vec<[f64; 2]>,
    /// Outward normals, world frame.
    pub normals: Vec<[f64; 2]>,
}

fn rot2(theta: f64, v: &[f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Places the triangle at `(theta, center)` and gives each finger the
/// contact that minimises the summed base distance.
pub fn place(tri: &Triangle, cfg: &ContactConfig, fingers: &[PlanarFinger], theta: f64, center: [f64; 2]) -> Result<PlanarScene> {
    if cfg.contacts.len() != fingers.len() {
        return Err(Error::InvalidArgument("one contact per finger required".into()));
    }
    let c0 = tri.centroid();
    let world: Vec<([f64; 2], [f64; 2])> = cfg
        .contacts
        .iter()
        .map(|p| {
            let n = tri.edge_normal(p)?;
            let r = rot2(theta, &[p[0] - c0[0], p[1] - c0[1]]);
            Ok(([r[0] + center[0], r[1] + center[1]], rot2(theta, &n)))
        })
        .collect::<Result<_>>()?;
    let m = fingers.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(m) {
        let cost: f64 = perm
            .iter()
            .enumerate()
            .map(|(i, j)| {
                let (p, _) = world[*j];
                (p[0] - fingers[i].base[0]).hypot(p[1] - fingers[i].base[1])
            })
            .sum();
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, perm));
        }
    }
    let perm = best.expect("at least one permutation").1;
    Ok(PlanarScene {
        contacts: perm.iter().map(|j| world[*j].0).collect(),
        normals: perm.iter().map(|j| world[*j].1).collect(),
    })
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(m - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, m - 1);
            out.push(p);
        }
    }
    out
}

/// Direct force closure at the initial contacts under the torque limits.
pub fn direct_closure(scene: &PlanarScene, fingers: &[PlanarFinger], opts: &CoverageOptions) -> Result<bool> {
    let mut jac = Vec::with_capacity(fingers.len());
    for (f, p) in fingers.iter().zip(&scene.contacts) {
        match f.jacobian(p) {
            Some(j) => jac.push(j),
            None => return Ok(false),
        }
    }
    let c3: Vec<[f64; 3]> = scene.contacts.iter().map(|p| [p[0], p[1], 0.0]).collect();
    let n3: Vec<[f64; 3]> = scene.normals.iter().map(|n| [n[0], n[1], 0.0]).collect();
    let tm = TorqueModel { jacobians: jac, tau_max: opts.tau_max };
    let r = force_closure_feasible(&c3, &n3, opts.mu, opts.min_force, Some(&tm), Dim::Two)?;
    Ok(r.status == ClosureStatus::Feasible)
}

/// Number of decision variables per finger: target (2) and log-gain (1).
const PER_FINGER: usize = 3;
const FINGERS: usize = 3;
const NV: usize = PER_FINGER * FINGERS;
const TORQUE_WEIGHT: f64 = 100.0;
const FORCE_WEIGHT: f64 = 100.0;
const REACH_WEIGHT: f64 = 1e4;

#[derive(Clone, Debug, PartialEq)]
pub struct PlanarCandidate {
    pub targets: Vec<[f64; 2]>,
    pub gains: Vec<f64>,
    pub energy: f64,
    /// Margins at the initial and equilibrium states, torque and force
    /// limits at equilibrium all hold.
    pub admissible: bool,
}

/// Energy of targets and log-gains `x` with the contacts held fixed.
fn planar_energy<T: Scalar>(scene: &PlanarScene, fingers: &[PlanarFinger], opts: &CoverageOptions, x: &[T]) -> (T, bool) {
    let m = fingers.len();
    let p0: Vec<[T; 2]> = scene.contacts.iter().map(|p| [T::cst(p[0]), T::cst(p[1])]).collect();
    let o: Vec<[T; 2]> = (0..m).map(|i| [x[2 * i], x[2 * i + 1]]).collect();
    let k: Vec<T> = (0..m).map(|i| x[2 * m + i].exp()).collect();
    let Ok((theta, t)) = solve_planar_equilibrium(&p0, &o, &k) else {
        return (T::cst(f64::INFINITY), false);
    };
    let (s, c) = (theta.sin(), theta.cos());
    let mut e = T::zero();
    let mut ok = true;
    for i in 0..m {
        let n0 = scene.normals[i];
        let peq = [c * p0[i][0] - s * p0[i][1] + t[0], s * p0[i][0] + c * p0[i][1] + t[1]];
        let neq = [c * n0[0] - s * n0[1], s * n0[0] + c * n0[1]];
        let f0 = [(o[i][0] - p0[i][0]) * k[i], (o[i][1] - p0[i][1]) * k[i]];
        let feq = [(o[i][0] - peq[0]) * k[i], (o[i][1] - peq[1]) * k[i]];
        let m0 = contact_margin_generic(&[f0[0], f0[1], T::zero()], &[T::cst(n0[0]), T::cst(n0[1]), T::zero()], opts.mu);
        let meq = contact_margin_generic(&[feq[0], feq[1], T::zero()], &[neq[0], neq[1], T::zero()], opts.mu);
        ok &= m0.value() >= 0.0 && meq.value() >= 0.0;
        e = e + margin_energy(m0, opts.mu) + margin_energy(meq, opts.mu);
        let normal = -(feq[0] * neq[0] + feq[1] * neq[1]);
        if normal.value() < opts.min_force {
            ok = false;
            let gap = -normal + opts.min_force;
            e = e + gap * gap * FORCE_WEIGHT;
        }
        match fingers[i].torques(&peq, &feq) {
            Some(tau) => {
                for tj in tau {
                    let excess = tj.abs() - opts.tau_max;
                    if excess.value() > 0.0 {
                        ok = false;
                        e = e + excess * excess * TORQUE_WEIGHT;
                    }
                }
            }
            None => {
                ok = false;
                let d = ((peq[0] - fingers[i].base[0]) * (peq[0] - fingers[i].base[0])
                    + (peq[1] - fingers[i].base[1]) * (peq[1] - fingers[i].base[1]))
                    .sqrt();
                let over = d - fingers[i].reach();
                e = e + over * over * REACH_WEIGHT + 1.0;
            }
        }
    }
    (e, ok)
}

/// RMSProp from one initialisation of targets and gains.
pub fn optimize_planar(
    scene: &PlanarScene,
    fingers: &[PlanarFinger],
    opts: &CoverageOptions,
    targets: &[[f64; 2]],
    gains: &[f64],
) -> Result<PlanarCandidate> {
    if fingers.len() != FINGERS || targets.len() != FINGERS || gains.len() != FINGERS {
        return Err(Error::InvalidArgument(format!("the planar search expects {FINGERS} fingers")));
    }
    let mut x = [0.0; NV];
    for i in 0..FINGERS {
        x[2 * i] = targets[i][0];
        x[2 * i + 1] = targets[i][1];
        x[2 * FINGERS + i] = gains[i].ln();
    }
    let mut v = [0.0; NV];
    let mut best: Option<(f64, bool, [f64; NV])> = None;
    for it in 0..=opts.iterations {
        let xd: [Dual<NV>; NV] = std::array::from_fn(|i| Dual::variable(x[i], i));
        let (e, ok) = planar_energy(scene, fingers, opts, &xd);
        if !e.re.is_finite() {
            break;
        }
        let better = match &best {
            None => true,
            Some((be, bok, _)) => (ok && !bok) || (ok == *bok && e.re < *be),
        };
        if better {
            best = Some((e.re, ok, x));
        }
        if it == opts.iterations {
            break;
        }
        for i in 0..NV {
            let g = e.eps[i];
            v[i] = 0.99 * v[i] + 0.01 * g * g;
            x[i] -= opts.step * g / (v[i].sqrt() + 1e-8);
        }
    }
    let (energy, admissible, x) = best.unwrap_or((f64::INFINITY, false, x));
    Ok(PlanarCandidate {
        targets: (0..FINGERS).map(|i| [x[2 * i], x[2 * i + 1]]).collect(),
        gains: (0..FINGERS).map(|i| x[2 * FINGERS + i].exp()).collect(),
        energy,
        admissible,
    })
}

/// Simulates a candidate and checks reach and margins along the whole
/// process plus force and torque limits at rest.
pub fn verify_planar(scene: &PlanarScene, fingers: &[PlanarFinger], opts: &CoverageOptions, cand: &PlanarCandidate) -> Result<bool> {
    let contacts: Vec<[f64; 3]> = scene.contacts.iter().map(|p| [p[0], p[1], 0.0]).collect();
    let targets: Vec<[f64; 3]> = cand.targets.iter().map(|o| [o[0], o[1], 0.0]).collect();
    let normals: Vec<[f64; 3]> = scene.normals.iter().map(|n| [n[0], n[1], 0.0]).collect();
    let sys = SpringSystem::at_origin(contacts, targets, cand.gains.clone())?;
    let traj = simulate(&sys, &opts.sim)?;
    if traj.status != SimStatus::Settled {
        return Ok(false);
    }
    let reachable = traj
        .fingertips
        .iter()
        .all(|tips| fingers.iter().zip(tips).all(|(f, p)| f.inverse_kinematics(&[p[0], p[1]]).is_some()));
    if !reachable {
        return Ok(false);
    }
    let margins = margin_trace(&traj, &NormalSource::Fixed(&normals), opts.mu, ForceMode::Damped)?;
    if margins.iter().flatten().any(|e| !e.is_some_and(|e| e >= 0.0)) {
        return Ok(false);
    }
    let last = traj.len() - 1;
    let forces = traj.forces_at(last, ForceMode::Spring);
    let rot = traj.relative_rotation(last);
    for (i, f) in fingers.iter().enumerate() {
        let p = traj.fingertips[last][i];
        let n = [rot[0][0] * normals[i][0] + rot[0][1] * normals[i][1], rot[1][0] * normals[i][0] + rot[1][1] * normals[i][1]];
        let fi = [forces[i][0], forces[i][1]];
        if -(fi[0] * n[0] + fi[1] * n[1]) < opts.min_force {
            return Ok(false);
        }
        match f.torques(&[p[0], p[1]], &fi) {
            Some(tau) if tau.iter().all(|t| t.abs() <= opts.tau_max) => {}
            _ => return Ok(false),
        }
    }
    Ok(true)
}

/// Outcome for one pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseOutcome {
    pub theta: f64,
    pub center: [f64; 2],
    pub compliant: bool,
    pub direct: bool,
    /// Restarts used before a verified compliant grasp (all when none).
    pub restarts_used: usize,
}

/// Random restarts until a verified compliant grasp is found. Fails at
/// once when a contact is out of reach.
pub fn compliant_search(scene: &PlanarScene, fingers: &[PlanarFinger], opts: &CoverageOptions, rng: &mut ChaCha8Rng) -> Result<(bool, usize)> {
    if fingers.iter().zip(&scene.contacts).any(|(f, p)| f.inverse_kinematics(p).is_none()) {
        return Ok((false, 0));
    }
    let center = {
        let s = scene.contacts.iter().fold([0.0; 2], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / FINGERS as f64, s[1] / FINGERS as f64]
    };
    let (lo, hi) = (opts.gain_range[0].ln(), opts.gain_range[1].ln());
    for r in 0..opts.restarts {
        let targets: Vec<[f64; 2]> = (0..FINGERS)
            .map(|_| {
                let rad = opts.target_radius * rng.random::<f64>().sqrt();
                let ang = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                [center[0] + rad * ang.cos(), center[1] + rad * ang.sin()]
            })
            .collect();
        let gains: Vec<f64> = (0..FINGERS).map(|_| rng.random_range(lo..=hi).exp()).collect();
        let cand = optimize_planar(scene, fingers, opts, &targets, &gains)?;
        if cand.admissible && verify_planar(scene, fingers, opts, &cand)? {
            return Ok((true, r + 1));
        }
    }
    Ok((false, opts.restarts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigCoverage {
    pub triangle: String,
    pub config: String,
    pub poses: usize,
    pub compliant: usize,
    pub direct: usize,
    /// Poses where direct closure holds but no compliant grasp was found.
    pub direct_only: usize,
    pub outcomes: Vec<PoseOutcome>,
}

impl ConfigCoverage {
    /// Direct-closure count over compliant count.
    pub fn ratio(&self) -> Option<f64> {
        (self.compliant > 0).then(|| self.direct as f64 / self.compliant as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub configs: Vec<ConfigCoverage>,
}

impl CoverageReport {
    pub fn total_compliant(&self) -> usize {
        self.configs.iter().map(|c| c.compliant).sum()
    }

    pub fn total_direct(&self) -> usize {
        self.configs.iter().map(|c| c.direct).sum()
    }

    pub fn subset_violations(&self) -> usize {
        self.configs.iter().map(|c| c.direct_only).sum()
    }

    pub fn aggregate_ratio(&self) -> Option<f64> {
        let c = self.total_compliant();
        (c > 0).then(|| self.total_direct() as f64 / c as f64)
    }

    /// CSV with one row per configuration and an aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = io::schema_line("coverage", 1);
        out.push_str("triangle,config,poses,compliant,direct,direct_only,ratio\n");
        let fmt = |r: Option<f64>| r.map_or("nan".to_string(), |r| format!("{r:.6}"));
        for c in &self.configs {
            writeln!(out, "{},{},{},{},{},{},{}", c.triangle, c.config, c.poses, c.compliant, c.direct, c.direct_only, fmt(c.ratio())).unwrap();
        }
        let poses: usize = self.configs.iter().map(|c| c.poses).sum();
        writeln!(
            out,
            "all,all,{poses},{},{},{},{}",
            self.total_compliant(),
            self.total_direct(),
            self.subset_violations(),
            fmt(self.aggregate_ratio())
        )
        .unwrap();
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_csv().as_bytes())
    }

    /// Per-pose CSV for plotting.
    pub fn poses_csv(&self) -> String {
        let mut out = io::schema_line("coverage-poses", 1);
        out.push_str("triangle,config,pose,theta,cx,cy,compliant,direct,restarts_used\n");
        for c in &self.configs {
            for (i, o) in c.outcomes.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{i},{:.9},{:.9},{:.9},{},{},{}",
                    c.triangle, c.config, o.theta, o.center[0], o.center[1], o.compliant as u8, o.direct as u8, o.restarts_used
                )
                .unwrap();
            }
        }
        out
    }
}

/// Evaluates one pose from its own random stream.
pub fn evaluate_pose(
    tri: &Triangle,
    cfg: &ContactConfig,
    fingers: &[PlanarFinger],
    opts: &CoverageOptions,
    stream: u64,
) -> Result<PoseOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(stream);
    let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let rad = opts.spawn_radius * rng.random::<f64>().sqrt();
    let ang = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let center = [rad * ang.cos(), rad * ang.sin()];
    let scene = place(tri, cfg, fingers, theta, center)?;
    let direct = direct_closure(&scene, fingers, opts)?;
    let (compliant, restarts_used) = compliant_search(&scene, fingers, opts, &mut rng)?;
    Ok(PoseOutcome { theta, center, compliant, direct, restarts_used })
}

/// Runs every configuration over `n_poses` sampled poses in parallel; the
/// report does not depend on scheduling.
pub fn coverage_experiment(
    triangles: &[Triangle],
    configs: &[ContactConfig],
    hand: &HandModel,
    opts: &CoverageOptions,
) -> Result<CoverageReport> {
    opts.validate()?;
    if !hand.wrist_fixed {
        return Err(Error::InvalidArgument("the coverage experiment needs a fixed-wrist hand".into()));
    }
    let fingers = planar_fingers(hand)?;
    if fingers.len() != FINGERS {
        return Err(Error::InvalidArgument(format!("the planar search expects {FINGERS} fingers")));
    }
    for c in configs {
        if c.triangle >= triangles.len() {
            return Err(Error::InvalidArgument(format!("{} refers to a missing triangle", c.name)));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..configs.len()).flat_map(|c| (0..opts.n_poses).map(move |p| (c, p))).collect();
    let outcomes: Vec<PoseOutcome> = jobs
        .par_iter()
        .map(|(c, p)| {
            let cfg = &configs[*c];
            evaluate_pose(&triangles[cfg.triangle], cfg, &fingers, opts, (*c * opts.n_poses + *p) as u64)
        })
        .collect::<Result<_>>()?;
    let configs = configs
        .iter()
        .enumerate()
        .map(|(c, cfg)| {
            let outcomes = outcomes[c * opts.n_poses..(c + 1) * opts.n_poses].to_vec();
            ConfigCoverage {
                triangle: triangles[cfg.triangle].name.clone(),
                config: cfg.name.clone(),
                poses: opts.n_poses,
                compliant: outcomes.iter().filter(|o| o.compliant).count(),
                direct: outcomes.iter().filter(|o| o.direct).count(),
                direct_only: outcomes.iter().filter(|o| o.direct && !o.compliant).count(),
                outcomes,
            }
        })
        .collect();
    Ok(CoverageReport { configs })
}
