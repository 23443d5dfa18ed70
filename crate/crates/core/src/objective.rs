//! The grasp objective: every energy term, their weighted sum and its
//! gradient with respect to the decision variables
//! `(q, {o_i}, {log k_i})`.
//!
//! Terms are generic over [`Scalar`] so the same code yields values (`f64`),
//! reverse-mode gradients ([`Var`]) and directional derivatives.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, reset_tape, Scalar, Var};
use crate::error::{Error, Result};
use crate::geometry::{add, mat_vec, norm, norm_sq, scale, scale_f, sub, v3c, vals, V3};
use crate::gpis::GpisModel;
use crate::hand::{initial_gains, initial_targets, pregrasp_contact, FkResult, HandModel, HandPose, WRIST_DOF};
use crate::io;
use crate::spring::{
    contact_margin_generic, cone_cosine, solve_equilibrium_generic, springgrasp_energy, static_forces,
    AUX_SWITCH,
};

/// Below this clearance (m) the collision barriers continue linearly.
pub const COLLISION_LINEAR_BELOW: f64 = 1e-3;
/// Floor for self-collision distances.
const DISTANCE_FLOOR: f64 = 1e-6;
/// Smoothing inside the unsquared pose-goal norm.
/// Smoothing length for segment norms (m).
const SEGMENT_EPS: f64 = 1e-6;
const POSE_NORM_EPS: f64 = 1e-12;
/// Forces shorter than this leave the margin undefined.
const FORCE_FLOOR: f64 = 1e-12;

/// Source of the surface normal at the equilibrium contacts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EquilibriumNormals {
    /// Query the implicit surface at the moved fingertip positions.
    #[default]
    Requery,
    /// Rotate the initial normals with the object.
    Transported,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyWeights {
    pub w_sp: f64,
    pub w_dist: f64,
    pub w_uncer: f64,
    pub w_gain: f64,
    pub w_tar: f64,
    pub w_col: f64,
    pub w_reg: f64,
    pub w_force: f64,
    /// Weight of the pose-goal term (used only with a motion goal).
    pub w_pose: f64,
    pub f_min: f64,
    /// Pregrasp extrapolation coefficient.
    pub c: f64,
    pub mu: f64,
    pub k_samples: usize,
    pub normals: EquilibriumNormals,
    /// Height of the supporting table plane (m).
    pub table_height: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        EnergyWeights {
            w_sp: 200.0,
            w_dist: 10000.0,
            w_uncer: 20.0,
            w_gain: 0.5,
            w_tar: 1000.0,
            w_col: 1.0,
            w_reg: 10.0,
            w_force: 200.0,
            w_pose: 10000.0,
            f_min: 2.0,
            c: 0.7,
            mu: 0.5,
            k_samples: 16,
            normals: EquilibriumNormals::Requery,
            table_height: 0.0,
        }
    }
}

impl EnergyWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.w_sp, self.w_dist, self.w_uncer, self.w_gain, self.w_tar, self.w_col, self.w_reg,
            self.w_force, self.w_pose,
        ];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("weights must be finite and non-negative".into()));
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(Error::Config(format!("c = {} outside (0, 1]", self.c)));
        }
        if self.k_samples < 2 {
            return Err(Error::Config("k_samples must be at least 2".into()));
        }
        if !(self.f_min > 0.0) {
            return Err(Error::Config("f_min must be positive".into()));
        }
        if !(self.mu > 0.0) {
            return Err(Error::Config("mu must be positive".into()));
        }
        Ok(())
    }

    pub fn zero() -> Self {
        EnergyWeights {
            w_sp: 0.0,
            w_dist: 0.0,
            w_uncer: 0.0,
            w_gain: 0.0,
            w_tar: 0.0,
            w_col: 0.0,
            w_reg: 0.0,
            w_force: 0.0,
            w_pose: 0.0,
            ..Default::default()
        }
    }

    fn as_array(&self) -> [f64; TERM_COUNT] {
        [
            self.w_sp, self.w_dist, self.w_uncer, self.w_gain, self.w_tar, self.w_col, self.w_reg,
            self.w_force, self.w_pose,
        ]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let body = io::strip_schema(&text, "weights", 1)?;
        let w: EnergyWeights = toml::from_str(body).map_err(|e| Error::Config(e.to_string()))?;
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = toml::to_string(self).map_err(|e| Error::Numerical(e.to_string()))?;
        io::write_atomic(path, format!("{}{body}", io::schema_line("weights", 1)).as_bytes())
    }
}

pub const TERM_COUNT: usize = 9;
pub const TERM_NAMES: [&str; TERM_COUNT] =
    ["sp", "dist", "uncer", "gain", "tar", "col", "reg", "force", "pose"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionVars {
    pub q: Vec<f64>,
    pub targets: Vec<[f64; 3]>,
    pub log_gains: Vec<f64>,
}

impl DecisionVars {
    pub fn gains(&self) -> Vec<f64> {
        self.log_gains.iter().map(|v| v.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.q.len() + 3 * self.targets.len() + self.log_gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.q.clone();
        v.extend(self.targets.iter().flatten());
        v.extend(&self.log_gains);
        v
    }

    pub fn from_vec(hand: &HandModel, x: &[f64]) -> Result<Self> {
        let (q, o, k) = split(hand, x)?;
        Ok(DecisionVars {
            q: q.to_vec(),
            targets: o,
            log_gains: k.to_vec(),
        })
    }

    /// Seed from a hand pose: targets halfway toward the fingertip centroid
    /// and the default gains.
    pub fn from_pose(hand: &HandModel, pose: &HandPose) -> Result<Self> {
        let fk = hand.forward_kinematics(&pose.q)?;
        Ok(DecisionVars {
            q: pose.q.clone(),
            targets: initial_targets(&fk.fingertips),
            log_gains: initial_gains(hand.finger_count()).iter().map(|k| k.ln()).collect(),
        })
    }

    pub fn validate(&self, hand: &HandModel) -> Result<()> {
        if self.q.len() != hand.dof()
            || self.targets.len() != hand.finger_count()
            || self.log_gains.len() != hand.finger_count()
        {
            return Err(Error::InvalidArgument("decision variables do not match the hand".into()));
        }
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("decision variables are not finite".into()));
        }
        Ok(())
    }
}

type Split<'a, T> = (&'a [T], Vec<V3<T>>, &'a [T]);

fn split<'a, T: Scalar>(hand: &HandModel, x: &'a [T]) -> Result<Split<'a, T>> {
    let n = hand.dof();
    let m = hand.finger_count();
    if x.len() != n + 4 * m {
        return Err(Error::InvalidArgument(format!(
            "decision vector has {} entries; expected {}",
            x.len(),
            n + 4 * m
        )));
    }
    let targets = (0..m).map(|i| [x[n + 3 * i], x[n + 3 * i + 1], x[n + 3 * i + 2]]).collect();
    Ok((&x[..n], targets, &x[n + 3 * m..]))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub sp: f64,
    pub dist: f64,
    pub uncer: f64,
    pub gain: f64,
    pub tar: f64,
    pub col: f64,
    pub reg: f64,
    pub force: f64,
    pub pose: f64,
    pub total: f64,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

impl EnergyBreakdown {
    pub fn terms(&self) -> [f64; TERM_COUNT] {
        [
            self.sp, self.dist, self.uncer, self.gain, self.tar, self.col, self.reg, self.force, self.pose,
        ]
    }

    /// `Σ w · E` recomputed from the stored terms.
    pub fn reassemble(&self, w: &EnergyWeights) -> f64 {
        self.terms().iter().zip(w.as_array()).map(|(e, w)| e * w).sum()
    }
}

/// Desired fingertip motion at equilibrium.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseGoal {
    /// Absolute desired positions, one per finger.
    Positions(Vec<[f64; 3]>),
    /// Desired displacement of every contact from its initial position.
    Displacement([f64; 3]),
}

/// Everything the objective reads besides the decision variables.
#[derive(Clone, Copy, Debug)]
pub struct Scene<'a> {
    pub model: &'a GpisModel,
    pub hand: &'a HandModel,
    pub weights: &'a EnergyWeights,
    /// Desired fingertip positions at equilibrium; replaces the motion part
    /// of the regulariser when present.
    pub pose_goal: Option<&'a PoseGoal>,
}

impl<'a> Scene<'a> {
    pub fn new(model: &'a GpisModel, hand: &'a HandModel, weights: &'a EnergyWeights) -> Self {
        Scene { model, hand, weights, pose_goal: None }
    }

    pub fn with_pose_goal(mut self, goal: &'a PoseGoal) -> Self {
        self.pose_goal = Some(goal);
        self
    }
}

/// Full intermediate state of one objective evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub terms: [T; TERM_COUNT],
    pub total: T,
    pub fk: FkResult<T>,
    pub contacts: Vec<V3<T>>,
    pub gains: Vec<T>,
    pub rotation: [[T; 3]; 3],
    pub translation: V3<T>,
    pub equilibrium_contacts: Vec<V3<T>>,
    pub normals_t0: Vec<V3<T>>,
    pub normals_teq: Vec<V3<T>>,
    pub forces_t0: Vec<V3<T>>,
    pub forces_teq: Vec<V3<T>>,
    pub margins_t0: Vec<T>,
    pub margins_teq: Vec<T>,
    /// Smallest distance of any active quantity to a branch switch.
    pub branch_gap: f64,
    pub diagnostics: Vec<String>,
}

impl<T: Scalar> Evaluation<T> {
    pub fn breakdown(&self) -> EnergyBreakdown {
        let t = self.terms.map(|v| v.value());
        EnergyBreakdown {
            sp: t[0],
            dist: t[1],
            uncer: t[2],
            gain: t[3],
            tar: t[4],
            col: t[5],
            reg: t[6],
            force: t[7],
            pose: t[8],
            total: self.total.value(),
            diagnostics: self.diagnostics.clone(),
        }
    }
}

/// `Σ |d_μ(p_i)|`.
pub fn e_dist<T: Scalar>(model: &GpisModel, contacts: &[V3<T>]) -> T {
    contacts.iter().fold(T::zero(), |a, p| a + model.mean_ad(p).abs())
}

/// Surface density along each finger's closing segment relative to the
/// density at its pregrasp contact, integrated over arc length as a left
/// Riemann sum with `k` samples.
pub fn e_uncer<T: Scalar>(model: &GpisModel, tips: &[V3<T>], targets: &[V3<T>], c: f64, k: usize) -> T {
    let mut total = T::zero();
    let da = 1.0 / k as f64;
    for (tip, o) in tips.iter().zip(targets) {
        let dir = sub(o, tip);
        let length = (norm_sq(&dir) + SEGMENT_EPS * SEGMENT_EPS).sqrt();
        let anchor = model.surface_pdf_ad(&add(tip, &scale_f(&dir, 1.0 - c)));
        let mut sum = T::zero();
        for s in 0..k {
            let x = add(tip, &scale_f(&dir, s as f64 * da));
            sum = sum + (model.surface_pdf_ad(&x) - anchor);
        }
        total = total + sum * length * da;
    }
    total
}

pub fn e_gain<T: Scalar>(gains: &[T]) -> T {
    gains.iter().fold(T::zero(), |a, k| a + *k * *k)
}

/// `Σ d_μ(o_i)`.
pub fn e_tar<T: Scalar>(model: &GpisModel, targets: &[V3<T>]) -> T {
    targets.iter().fold(T::zero(), |a, o| a + model.mean_ad(o))
}

/// `1/d` barrier, continued along its tangent below [`COLLISION_LINEAR_BELOW`].
fn barrier<T: Scalar>(d: T) -> T {
    let lin = COLLISION_LINEAR_BELOW;
    if d.value() > lin {
        T::cst(1.0) / d
    } else {
        (d - lin) * (-1.0 / (lin * lin)) + 1.0 / lin
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CollisionParts {
    pub self_collision: f64,
    pub hand_object: f64,
    pub hand_table: f64,
}

/// Self, hand-object and hand-table collision energy with its parts.
pub fn e_col<T: Scalar>(
    fk: &FkResult<T>,
    model: &GpisModel,
    pairs: &[(usize, usize)],
    table_height: f64,
) -> (T, CollisionParts) {
    let s = &fk.sphere_centers;
    let r = &fk.sphere_radii;
    let mut e_self = T::zero();
    for &(a, b) in pairs {
        let d = norm(&sub(&s[a], &s[b]));
        if d.value() <= r[a] + r[b] {
            e_self = e_self + T::cst(1.0) / d.max_c(DISTANCE_FLOOR);
        }
    }
    let mut e_ho = T::zero();
    let mut e_ht = T::zero();
    for (c, radius) in s.iter().zip(r) {
        let d = model.mean_ad(c);
        if d.value() <= *radius {
            e_ho = e_ho + barrier(d);
        }
        let h = c[2] - table_height;
        if h.value() <= *radius {
            e_ht = e_ht + barrier(h);
        }
    }
    let parts = CollisionParts {
        self_collision: e_self.value(),
        hand_object: e_ho.value(),
        hand_table: e_ht.value(),
    };
    (e_self + e_ho + e_ht, parts)
}

/// Joint-space and motion regulariser, and the minimum-force reward.
pub fn e_reg_force<T: Scalar>(
    joints: &[T],
    joints_ref: &[f64],
    contacts_t0: &[V3<T>],
    contacts_teq: &[V3<T>],
    forces_teq: &[V3<T>],
    f_min: f64,
) -> (T, T) {
    let q = joints
        .iter()
        .zip(joints_ref)
        .fold(T::zero(), |a, (q, r)| a + (*q - *r) * (*q - *r));
    let motion = contacts_t0
        .iter()
        .zip(contacts_teq)
        .fold(T::zero(), |a, (p, e)| a + norm_sq(&sub(p, e)));
    let force = forces_teq.iter().fold(T::zero(), |a, f| a - norm(f).min_c(f_min));
    (q + motion, force)
}

/// `Σ |p_des − p_eq|`.
pub fn e_pose<T: Scalar>(desired: &[V3<T>], contacts_teq: &[V3<T>]) -> T {
    desired.iter().zip(contacts_teq).fold(T::zero(), |a, (d, p)| {
        a + (norm_sq(&sub(d, p)) + POSE_NORM_EPS).sqrt()
    })
}

fn margins<T: Scalar>(
    forces: &[V3<T>],
    normals: &[V3<T>],
    mu: f64,
    state: &str,
    diag: &mut Vec<String>,
) -> Vec<T> {
    forces
        .iter()
        .zip(normals)
        .enumerate()
        .map(|(i, (f, n))| {
            if norm(f).value() <= FORCE_FLOOR {
                diag.push(format!("undefined margin: zero force on finger {i} at {state}"));
                T::cst(-cone_cosine(mu))
            } else {
                contact_margin_generic(f, n, mu)
            }
        })
        .collect()
}

/// Evaluates every term for the flattened decision vector `x`.
pub fn evaluate<T: Scalar>(scene: &Scene, x: &[T]) -> Result<Evaluation<T>> {
    let w = scene.weights;
    let hand = scene.hand;
    let model = scene.model;
    let (q, targets, log_gains) = split(hand, x)?;
    let mut diagnostics = Vec::new();
    let mut gap = f64::INFINITY;

    let fk = hand.forward_kinematics(q)?;
    let contacts: Vec<V3<T>> = fk
        .fingertips
        .iter()
        .zip(&targets)
        .map(|(t, o)| pregrasp_contact(t, o, w.c))
        .collect();
    let gains: Vec<T> = log_gains.iter().map(|v| v.exp()).collect();

    let mut mu_t0 = Vec::with_capacity(contacts.len());
    let mut normals_t0 = Vec::with_capacity(contacts.len());
    for p in &contacts {
        let (m, n) = model.mean_normal_ad(p);
        mu_t0.push(m);
        normals_t0.push(n);
    }
    let forces_t0 = static_forces(&targets, &contacts, &gains);
    let margins_t0 = margins(&forces_t0, &normals_t0, w.mu, "t0", &mut diagnostics);

    let identity = crate::geometry::identity::<f64>();
    let (rotation, translation, eq_contacts) =
        match solve_equilibrium_generic(&contacts, &targets, &gains, &identity, &[0.0; 3]) {
            Ok(eq) => (eq.rotation, eq.translation, eq.fingertips),
            Err(Error::DegenerateRotation { rank }) => {
                diagnostics.push(format!("degenerate rotation (rank {rank}); translation-only equilibrium used"));
                let total = gains.iter().fold(T::zero(), |a, k| a + *k);
                let mut t = [T::zero(); 3];
                for ((o, p), k) in targets.iter().zip(&contacts).zip(&gains) {
                    t = add(&t, &scale(&sub(o, p), *k));
                }
                let t = scale(&t, T::cst(1.0) / total);
                let moved = contacts.iter().map(|p| add(p, &t)).collect();
                (crate::geometry::identity(), t, moved)
            }
            Err(e) => return Err(e),
        };
    let normals_teq: Vec<V3<T>> = match w.normals {
        EquilibriumNormals::Requery => eq_contacts.iter().map(|p| model.mean_normal_ad(p).1).collect(),
        EquilibriumNormals::Transported => normals_t0.iter().map(|n| mat_vec(&rotation, n)).collect(),
    };
    let forces_teq = static_forces(&targets, &eq_contacts, &gains);
    let margins_teq = margins(&forces_teq, &normals_teq, w.mu, "teq", &mut diagnostics);

    for e in margins_t0.iter().chain(&margins_teq) {
        gap = gap.min((e.value() - (-1.0 + AUX_SWITCH)).abs());
    }
    for m in &mu_t0 {
        gap = gap.min(m.value().abs());
    }
    for f in &forces_teq {
        gap = gap.min((norm(f).value() - w.f_min).abs());
    }

    let sp = springgrasp_energy(&margins_t0, &margins_teq, w.mu);
    let dist = mu_t0.iter().fold(T::zero(), |a, m| a + m.abs());
    let uncer = if w.w_uncer != 0.0 {
        e_uncer(model, &fk.fingertips, &targets, w.c, w.k_samples)
    } else {
        T::zero()
    };
    let gain = e_gain(&gains);
    let tar = e_tar(model, &targets);
    let (col, parts) = e_col(&fk, model, &hand.self_collision, w.table_height);
    if col.value() > 0.0 {
        diagnostics.push(format!(
            "collision: self {:.4}, hand-object {:.4}, hand-table {:.4}",
            parts.self_collision, parts.hand_object, parts.hand_table
        ));
    }
    gap = gap.min(collision_gap(&fk, model, &hand.self_collision, w.table_height));
    let joints = &q[WRIST_DOF..];
    let (reg, force, pose) = match scene.pose_goal {
        None => {
            let (reg, force) =
                e_reg_force(joints, &hand.reference_joints(), &contacts, &eq_contacts, &forces_teq, w.f_min);
            (reg, force, T::zero())
        }
        Some(goal) => {
            let desired: Vec<V3<T>> = match goal {
                PoseGoal::Positions(p) => {
                    if p.len() != contacts.len() {
                        return Err(Error::InvalidArgument("pose goal does not match the finger count".into()));
                    }
                    p.iter().map(|d| v3c(*d)).collect()
                }
                PoseGoal::Displacement(d) => contacts.iter().map(|p| add(p, &v3c(*d))).collect(),
            };
            let (reg, force) =
                e_reg_force(joints, &hand.reference_joints(), &[], &[], &forces_teq, w.f_min);
            (reg, force, e_pose(&desired, &eq_contacts))
        }
    };

    let terms = [sp, dist, uncer, gain, tar, col, reg, force, pose];
    let total = terms
        .iter()
        .zip(w.as_array())
        .fold(T::zero(), |a, (e, wt)| if wt == 0.0 { a } else { a + *e * wt });
    Ok(Evaluation {
        terms,
        total,
        fk,
        contacts,
        gains,
        rotation,
        translation,
        equilibrium_contacts: eq_contacts,
        normals_t0,
        normals_teq,
        forces_t0,
        forces_teq,
        margins_t0,
        margins_teq,
        branch_gap: gap,
        diagnostics,
    })
}

fn collision_gap<T: Scalar>(fk: &FkResult<T>, model: &GpisModel, pairs: &[(usize, usize)], table: f64) -> f64 {
    let s: Vec<[f64; 3]> = fk.sphere_centers.iter().map(vals).collect();
    let r = &fk.sphere_radii;
    let mut gap = f64::INFINITY;
    for &(a, b) in pairs {
        gap = gap.min((norm(&sub(&s[a], &s[b])) - r[a] - r[b]).abs());
    }
    for (c, radius) in s.iter().zip(r) {
        let d = model.mean(c);
        gap = gap.min((d - radius).abs()).min((d - COLLISION_LINEAR_BELOW).abs());
        let h = c[2] - table;
        gap = gap.min((h - radius).abs()).min((h - COLLISION_LINEAR_BELOW).abs());
    }
    gap
}

pub fn total_energy(scene: &Scene, vars: &DecisionVars) -> Result<EnergyBreakdown> {
    Ok(evaluate::<f64>(scene, &vars.to_vec())?.breakdown())
}

/// Value and gradient of the weighted objective.
pub fn value_and_gradient(scene: &Scene, x: &[f64]) -> Result<(EnergyBreakdown, Vec<f64>)> {
    value_gradient_feasibility(scene, x).map(|(b, g, _)| (b, g))
}

/// [`value_and_gradient`] plus the feasibility of `x`.
pub fn value_gradient_feasibility(scene: &Scene, x: &[f64]) -> Result<(EnergyBreakdown, Vec<f64>, bool)> {
    reset_tape();
    let vars: Vec<Var> = x.iter().map(|v| Var::input(*v)).collect();
    let eval = evaluate(scene, &vars)?;
    let grad = backward(eval.total);
    let g: Vec<f64> = vars.iter().map(|v| grad.wrt(*v)).collect();
    let breakdown = eval.breakdown();
    let feasible = is_feasible(&eval);
    reset_tape();
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        let per_term = term_gradients(scene, x)?;
        let name = (0..TERM_COUNT)
            .find(|t| !per_term[*t][i].is_finite())
            .map(|t| TERM_NAMES[t])
            .unwrap_or("unknown");
        return Err(Error::Numerical(format!("non-finite gradient in term {name}, coordinate {i}")));
    }
    Ok((breakdown, g, feasible))
}

pub fn gradient(scene: &Scene, vars: &DecisionVars) -> Result<Vec<f64>> {
    Ok(value_and_gradient(scene, &vars.to_vec())?.1)
}

/// Gradient of each unweighted term, in [`TERM_NAMES`] order.
pub fn term_gradients(scene: &Scene, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(TERM_COUNT);
    for t in 0..TERM_COUNT {
        reset_tape();
        let vars: Vec<Var> = x.iter().map(|v| Var::input(*v)).collect();
        let eval = evaluate(scene, &vars)?;
        let g = backward(eval.terms[t]);
        out.push(vars.iter().map(|v| g.wrt(*v)).collect());
    }
    reset_tape();
    Ok(out)
}

/// Feasibility of a compliant grasp: every margin non-negative at both
/// states and no collision.
pub fn is_feasible<T: Scalar>(eval: &Evaluation<T>) -> bool {
    eval.margins_t0.iter().chain(&eval.margins_teq).all(|e| e.value() >= 0.0)
        && eval.terms[5].value() == 0.0
        && !eval.diagnostics.iter().any(|d| d.starts_with("undefined margin"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpis::{build_training_set, fit, GpisConfig};
    use crate::pointcloud::{sample_synthetic, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn sphere() -> &'static GpisModel {
        static M: OnceLock<GpisModel> = OnceLock::new();
        M.get_or_init(|| {
            let cloud = sample_synthetic(Shape::Sphere { radius: 0.05 }, 500, 0.0, 11).unwrap();
            fit(&build_training_set(&cloud, &GpisConfig::default()).unwrap()).unwrap()
        })
    }

    fn sphere_sdf(p: &[f64; 3]) -> f64 {
        norm(p) - 0.05
    }

    #[test]
    fn dist_term_cases() {
        let m = sphere();
        let on: Vec<[f64; 3]> = vec![[0.05, 0.0, 0.0], [0.0, -0.05, 0.0]];
        assert!(e_dist(m, &on) < 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f64; 3]> = (0..4)
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.045..0.045)))
            .map(|p: [f64; 3]| scale_f(&p, 0.055 / norm(&p)))
            .collect();
        let oracle: f64 = pts.iter().map(|p| sphere_sdf(p).abs()).sum();
        assert!((e_dist(m, &pts) - oracle).abs() < 0.01);
    }

    #[test]
    fn gain_term_cases() {
        assert_eq!(e_gain(&[80.0, 80.0, 80.0, 160.0]), 44800.0);
        assert_eq!(e_gain(&[160.0, 160.0, 160.0, 320.0]), 4.0 * 44800.0);
        assert!(e_gain(&[1e-9; 4]) < 1e-17);
    }

    #[test]
    fn target_term_cases() {
        let m = sphere();
        // independent posterior mean at the center: dense LU solve of the
        // Gram system on the prior residuals
        let t = m.training_set();
        let n = t.len();
        let r = t.kernel_scale;
        let k = |a: &[f64; 3], b: &[f64; 3]| {
            let d = norm(&sub(a, b)).min(r);
            2.0 * d.powi(3) - 3.0 * r * d * d + r.powi(3)
        };
        let prior = |x: &[f64; 3]| m.prior().map_or(0.0, |p| p.value(x));
        let resid: Vec<f64> = t.values.iter().zip(&t.points).map(|(v, x)| v - prior(x)).collect();
        let gram = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            k(&t.points[i], &t.points[j]) + if i == j { t.noise[i] * t.noise[i] } else { 0.0 }
        });
        let alpha = gram.lu().solve(&nalgebra::DVector::from_column_slice(&resid)).unwrap();
        let center: f64 = prior(&[0.0; 3]) + (0..n).map(|i| alpha[i] * k(&t.points[i], &[0.0; 3])).sum::<f64>();
        let e = e_tar(m, &[[0.0; 3]; 4]);
        assert!(e < 0.0);
        assert!((e - 4.0 * center).abs() < 1e-6 * center.abs(), "{e} vs {}", 4.0 * center);
        let n = [0.6, 0.0, 0.8];
        let inner = e_tar(m, &[scale_f(&n, 0.045)]);
        let outer = e_tar(m, &[scale_f(&n, 0.055)]);
        assert!(outer > inner);
    }

    #[test]
    fn collision_term_cases() {
        let m = sphere();
        let far = FkResult {
            fingertips: vec![],
            sphere_centers: vec![[0.3, 0.0, 0.3], [0.3, 0.1, 0.3]],
            sphere_radii: vec![0.01, 0.01],
        };
        assert_eq!(e_col(&far, m, &[(0, 1)], -1.0).0, 0.0);
        let table = FkResult {
            fingertips: vec![],
            sphere_centers: vec![[0.3, 0.0, 0.005]],
            sphere_radii: vec![0.01],
        };
        assert!((e_col(&table, m, &[], 0.0).0 - 200.0).abs() < 1e-9);
        let pair = FkResult {
            fingertips: vec![],
            sphere_centers: vec![[0.3, 0.0, 0.3], [0.3, 0.015, 0.3]],
            sphere_radii: vec![0.01, 0.01],
        };
        assert!((e_col(&pair, m, &[(0, 1)], -1.0).0 - 1.0 / 0.015).abs() < 1e-9);
    }

    #[test]
    fn barrier_is_positive_and_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..400 {
            let d = -0.01 + i as f64 * 5e-5;
            let b = barrier(d);
            assert!(b > 0.0 && b < prev);
            prev = b;
        }
    }

    #[test]
    fn reg_force_cases() {
        let p = vec![[0.1, 0.0, 0.0]; 4];
        let (reg, _) = e_reg_force(&[0.3, 0.4], &[0.3, 0.4], &p, &p, &[[3.0, 0.0, 0.0]; 4], 2.0);
        assert_eq!(reg, 0.0);
        let (_, f) = e_reg_force::<f64>(&[], &[], &[], &[], &[[3.0, 0.0, 0.0]; 4], 2.0);
        assert_eq!(f, -8.0);
        let forces = [[0.5, 0.0, 0.0], [0.0, 2.5, 0.0], [0.0, 0.0, 2.0], [2.0, 2.0, 0.0]];
        let (_, f) = e_reg_force::<f64>(&[], &[], &[], &[], &forces, 2.0);
        assert!((f + 6.5).abs() < 1e-12);
    }

    #[test]
    fn pose_term_reduces_to_motion_identity() {
        let p = vec![[0.1, 0.0, 0.0], [0.0, 0.2, 0.0]];
        assert!(e_pose(&p, &p) < 1e-5);
        let q = vec![[0.1, 0.0, 0.01], [0.0, 0.2, 0.01]];
        assert!((e_pose(&p, &q) - 0.02).abs() < 1e-9);
    }

    #[test]
    fn uncertainty_term_cases() {
        let m = sphere();
        // zero-length segments: constant density
        let tips = vec![[0.06, 0.0, 0.0]];
        assert_eq!(e_uncer(m, &tips, &tips, 0.7, 16), 0.0);
        // closing segment that crosses the surface exactly at the pregrasp point
        let tip = [[0.08, 0.0, 0.0]];
        let o = [[0.0, 0.0, 0.0]];
        let anchor_at_surface = e_uncer(m, &tip, &o, 0.05 / 0.08 + 0.0, 16);
        assert!(anchor_at_surface < 0.0, "{anchor_at_surface}");
    }

    #[test]
    fn uncertainty_riemann_sum_converges() {
        let m = sphere();
        let tip = [[0.09, 0.02, 0.01]];
        let o = [[0.0, 0.0, 0.0]];
        let norm_at = |k: usize| e_uncer(m, &tip, &o, 0.7, k);
        let a = norm_at(64);
        let b = norm_at(1000);
        assert!(((a - b) / b).abs() < 0.05, "{a} {b}");
    }

    fn seed_scene_vars(hand: &HandModel) -> DecisionVars {
        let bbox = crate::pointcloud::BoundingBox::axis_aligned([0.0; 3], [0.05; 3]).unwrap();
        let seeds = crate::hand::initial_seeds(&bbox, hand);
        DecisionVars::from_pose(hand, &seeds[0]).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let hand = HandModel::allegro_like();
        let w = EnergyWeights::zero();
        let scene = Scene::new(sphere(), &hand, &w);
        let b = total_energy(&scene, &seed_scene_vars(&hand)).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn breakdown_reassembles_with_table_weights() {
        let hand = HandModel::allegro_like();
        let w = EnergyWeights { table_height: -1.0, ..Default::default() };
        let scene = Scene::new(sphere(), &hand, &w);
        let b = total_energy(&scene, &seed_scene_vars(&hand)).unwrap();
        let manual = 200.0 * b.sp + 10000.0 * b.dist + 20.0 * b.uncer + 0.5 * b.gain + 1000.0 * b.tar
            + b.col + 10.0 * b.reg + 200.0 * b.force;
        assert!((b.total - manual).abs() < 1e-9 * b.total.abs().max(1.0));
        assert!((b.total - b.reassemble(&w)).abs() < 1e-9 * b.total.abs().max(1.0));
        assert!(b.col >= 0.0 && b.gain >= 0.0);
    }

    #[test]
    fn zero_displacement_goal_swaps_motion_term() {
        let hand = HandModel::allegro_like();
        let w = EnergyWeights { table_height: -1.0, ..Default::default() };
        let x = seed_scene_vars(&hand).to_vec();
        let plain = evaluate::<f64>(&Scene::new(sphere(), &hand, &w), &x).unwrap();
        let goal = PoseGoal::Displacement([0.0; 3]);
        let with = evaluate::<f64>(&Scene::new(sphere(), &hand, &w).with_pose_goal(&goal), &x).unwrap();
        let (mut sq, mut abs) = (0.0, 0.0);
        for (a, b) in plain.contacts.iter().zip(&plain.equilibrium_contacts) {
            let d2: f64 = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum();
            sq += d2;
            abs += d2.sqrt();
        }
        assert!((plain.terms[6] - with.terms[6] - sq).abs() < 1e-12);
        assert!((with.terms[8] - abs).abs() < 1e-6 * 4.0);
        assert_eq!(plain.terms[8], 0.0);
    }

    #[test]
    fn gain_gradient_through_log() {
        let hand = HandModel::allegro_like();
        let w = EnergyWeights { w_gain: 0.5, ..EnergyWeights::zero() };
        let scene = Scene::new(sphere(), &hand, &w);
        let vars = seed_scene_vars(&hand);
        let g = gradient(&scene, &vars).unwrap();
        let k = vars.gains();
        let off = hand.dof() + 12;
        for i in 0..4 {
            assert!((g[off + i] - 2.0 * k[i] * k[i] * 0.5).abs() < 1e-9 * k[i] * k[i]);
        }
    }

    #[test]
    fn gradient_matches_directional_finite_differences() {
        let hand = HandModel::allegro_like();
        let w = EnergyWeights { table_height: -1.0, ..Default::default() };
        let scene = Scene::new(sphere(), &hand, &w);
        let x0 = seed_scene_vars(&hand).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (_, g) = value_and_gradient(&scene, &x0).unwrap();
        let h = 1e-5;
        for _ in 0..20 {
            let d: Vec<f64> = (0..x0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let step = |s: f64| -> Vec<f64> { x0.iter().zip(&d).map(|(x, di)| x + s * di).collect() };
            let ep = evaluate::<f64>(&scene, &step(h)).unwrap();
            let em = evaluate::<f64>(&scene, &step(-h)).unwrap();
            let e0 = evaluate::<f64>(&scene, &x0).unwrap();
            if e0.branch_gap < 1e-4 || ep.branch_gap < 1e-4 || em.branch_gap < 1e-4 {
                continue;
            }
            let fd = (ep.total - em.total) / (2.0 * h);
            let ad: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            assert!((fd - ad).abs() <= 1e-3 * fd.abs().max(1.0), "fd {fd} ad {ad}");
        }
    }

    #[test]
    fn toy_single_finger_minimum_has_zero_gradient() {
        // minimum of the gain term alone lies where the gradient vanishes
        let hand = HandModel::allegro_like();
        let w = EnergyWeights { w_reg: 1.0, ..EnergyWeights::zero() };
        let scene = Scene::new(sphere(), &hand, &w);
        let mut vars = seed_scene_vars(&hand);
        // targets at the contacts would need c = 1; joint part alone is minimal at q_ref
        let fk = hand.forward_kinematics(&vars.q).unwrap();
        vars.targets = fk.fingertips.clone();
        let g = gradient(&scene, &vars).unwrap();
        let n: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n < 1e-6, "{n}");
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.toml");
        let w = EnergyWeights { mu: 0.8, ..Default::default() };
        w.save(&path).unwrap();
        assert_eq!(EnergyWeights::load(&path).unwrap(), w);
    }
}
