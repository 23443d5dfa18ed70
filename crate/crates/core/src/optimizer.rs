//! Multi-seed RMSProp over the grasp objective, feasibility filtering,
//! ranking and grasp export.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::quaternion;
use crate::gpis::{build_training_set, fit, GpisConfig, GpisModel};
use crate::hand::{initial_seeds, HandModel, WRIST_DOF};
use crate::io;
use crate::objective::{
    evaluate, is_feasible, value_gradient_feasibility, DecisionVars, EnergyBreakdown, EnergyWeights, PoseGoal, Scene,
};
use crate::pointcloud::{upright_oriented_bbox, PointCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    /// Step for wrist pose, joint angles and targets.
    pub step: f64,
    /// Step for log-gains.
    pub gain_step: f64,
    pub decay: f64,
    pub eps: f64,
    pub max_iterations: usize,
    /// Stop once the gradient norm drops below this.
    pub grad_tol: f64,
    /// Number of seeds taken from the seed table (at most 7).
    pub seeds: usize,
    /// Keep every n-th energy in the trace.
    pub trace_every: usize,
    /// Worker threads; `None` uses the current rayon pool.
    pub threads: Option<usize>,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            step: 1e-3,
            gain_step: 1e-2,
            decay: 0.99,
            eps: 1e-8,
            max_iterations: 2000,
            grad_tol: 1e-6,
            seeds: 7,
            trace_every: 1,
            threads: None,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.gain_step > 0.0) {
            return Err(Error::Config("steps must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config("decay must lie in (0, 1)".into()));
        }
        if self.max_iterations < 1 || self.trace_every < 1 {
            return Err(Error::Config("max_iterations and trace_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizedGrasp {
    pub seed_index: usize,
    pub vars: DecisionVars,
    pub gains: Vec<f64>,
    pub energy: EnergyBreakdown,
    pub contacts: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub equilibrium_contacts: Vec<[f64; 3]>,
    pub margins_t0: Vec<f64>,
    pub margins_teq: Vec<f64>,
    pub feasible: bool,
    pub diverged: bool,
    pub iterations: usize,
    pub trace: Vec<f64>,
}

impl OptimizedGrasp {
    pub fn worst_margin(&self) -> f64 {
        self.margins_t0
            .iter()
            .chain(&self.margins_teq)
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// Mean predicted fingertip displacement from `t0` to equilibrium.
    pub fn mean_displacement(&self) -> [f64; 3] {
        let m = self.contacts.len() as f64;
        let mut d = [0.0; 3];
        for (a, b) in self.contacts.iter().zip(&self.equilibrium_contacts) {
            for k in 0..3 {
                d[k] += (b[k] - a[k]) / m;
            }
        }
        d
    }

    pub fn save(&self, path: &Path, mu: f64) -> Result<()> {
        let file = GraspFile::from_grasp(self, mu);
        let body = toml::to_string(&file).map_err(|e| Error::Numerical(e.to_string()))?;
        io::write_atomic(path, format!("{}{body}", io::schema_line("grasp", 1)).as_bytes())
    }
}

/// Exported compliant grasp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspFile {
    pub seed_index: usize,
    pub feasible: bool,
    pub mu: f64,
    pub q: Vec<f64>,
    pub targets: Vec<[f64; 3]>,
    pub gains: Vec<f64>,
    pub contacts: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    /// Equilibrium rotation as a unit quaternion `[w, x, y, z]`.
    pub rotation_quaternion: [f64; 4],
    pub translation: [f64; 3],
    pub equilibrium_contacts: Vec<[f64; 3]>,
    pub margins_t0: Vec<f64>,
    pub margins_teq: Vec<f64>,
    pub energy: EnergyBreakdown,
}

impl GraspFile {
    pub fn from_grasp(g: &OptimizedGrasp, mu: f64) -> Self {
        GraspFile {
            seed_index: g.seed_index,
            feasible: g.feasible,
            mu,
            q: g.vars.q.clone(),
            targets: g.vars.targets.clone(),
            gains: g.gains.clone(),
            contacts: g.contacts.clone(),
            normals: g.normals.clone(),
            rotation_quaternion: quaternion(&g.rotation),
            translation: g.translation,
            equilibrium_contacts: g.equilibrium_contacts.clone(),
            margins_t0: g.margins_t0.clone(),
            margins_teq: g.margins_teq.clone(),
            energy: g.energy.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let body = io::strip_schema(&text, "grasp", 1)?;
        let g: GraspFile = toml::from_str(body).map_err(|e| Error::Format {
            line: 0,
            msg: e.to_string(),
        })?;
        let m = g.contacts.len();
        if m < 3 || g.targets.len() != m || g.gains.len() != m || g.normals.len() != m {
            return Err(Error::Format {
                line: 0,
                msg: "per-finger lists differ in length".into(),
            });
        }
        Ok(g)
    }
}

/// Result of evaluating the final iterate from scratch.
fn finalize(scene: &Scene, seed_index: usize, x: &[f64], iterations: usize, trace: Vec<f64>, diverged: bool) -> Result<OptimizedGrasp> {
    let vars = DecisionVars::from_vec(scene.hand, x)?;
    let e = evaluate::<f64>(scene, x)?;
    Ok(OptimizedGrasp {
        seed_index,
        gains: vars.gains(),
        vars,
        energy: e.breakdown(),
        contacts: e.contacts.clone(),
        normals: e.normals_t0.clone(),
        rotation: e.rotation,
        translation: e.translation,
        equilibrium_contacts: e.equilibrium_contacts.clone(),
        margins_t0: e.margins_t0.clone(),
        margins_teq: e.margins_teq.clone(),
        feasible: is_feasible(&e),
        diverged,
        iterations,
        trace,
    })
}

/// Runs RMSProp from one seed.
///
/// Returns the lowest-energy feasible iterate if one was visited, otherwise
/// the lowest-energy iterate.
pub fn optimize_seed(scene: &Scene, seed_index: usize, seed: &DecisionVars, opts: &OptimizerOptions) -> Result<OptimizedGrasp> {
    opts.validate()?;
    seed.validate(scene.hand)?;
    let hand = scene.hand;
    let n = hand.dof();
    let m = hand.finger_count();
    let mut x = seed.to_vec();
    hand.clamp_joints(&mut x[..n]);
    let steps: Vec<f64> = (0..x.len())
        .map(|i| if i >= n + 3 * m { opts.gain_step } else { opts.step })
        .collect();
    let mut v = vec![0.0; x.len()];
    let mut trace = Vec::new();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut best_feasible: Option<(f64, Vec<f64>)> = None;
    let mut diverged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iterations {
        let (b, mut g, feasible) = match value_gradient_feasibility(scene, &x) {
            Ok(r) if r.0.total.is_finite() => r,
            Ok(_) | Err(Error::Numerical(_)) => {
                log::warn!("seed {seed_index}: non-finite objective at iteration {it}; rolled back");
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if it % opts.trace_every == 0 {
            trace.push(b.total);
        }
        for (slot, ok) in [(&mut best, true), (&mut best_feasible, feasible)] {
            if ok && slot.as_ref().is_none_or(|(e, _)| b.total < *e) {
                *slot = Some((b.total, x.clone()));
            }
        }
        if hand.wrist_fixed {
            g[..WRIST_DOF].iter_mut().for_each(|gi| *gi = 0.0);
        }
        let gnorm = g.iter().map(|gi| gi * gi).sum::<f64>().sqrt();
        if gnorm < opts.grad_tol {
            break;
        }
        iterations = it + 1;
        for i in 0..x.len() {
            v[i] = opts.decay * v[i] + (1.0 - opts.decay) * g[i] * g[i];
            x[i] -= steps[i] * g[i] / (v[i].sqrt() + opts.eps);
        }
        hand.clamp_joints(&mut x[..n]);
    }
    let x = match best_feasible.or(best) {
        Some((_, x)) => x,
        None => return Err(Error::Numerical(format!("seed {seed_index}: objective not finite at the seed"))),
    };
    finalize(scene, seed_index, &x, iterations, trace, diverged)
}

/// Per-seed summary for seeds that did not produce a feasible grasp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDiagnostic {
    pub seed_index: usize,
    pub worst_margin: f64,
    pub collision: f64,
    pub diverged: bool,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct PlanResult {
    pub model: GpisModel,
    /// One entry per seed, in seed order.
    pub grasps: Vec<OptimizedGrasp>,
    /// Indices into `grasps` of feasible grasps, best first.
    pub ranking: Vec<usize>,
}

impl PlanResult {
    pub fn best(&self) -> Option<&OptimizedGrasp> {
        self.ranking.first().map(|i| &self.grasps[*i])
    }

    pub fn diagnostics(&self) -> Vec<SeedDiagnostic> {
        self.grasps
            .iter()
            .filter(|g| !g.feasible)
            .map(|g| SeedDiagnostic {
                seed_index: g.seed_index,
                worst_margin: g.worst_margin(),
                collision: g.energy.col,
                diverged: g.diverged,
                notes: g.energy.diagnostics.clone(),
            })
            .collect()
    }
}

/// Feasible grasps ordered by weighted energy, ties broken by seed index.
pub fn rank(grasps: &[OptimizedGrasp]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..grasps.len()).filter(|i| grasps[*i].feasible).collect();
    idx.sort_by(|a, b| {
        grasps[*a]
            .energy
            .total
            .total_cmp(&grasps[*b].energy.total)
            .then(grasps[*a].seed_index.cmp(&grasps[*b].seed_index))
    });
    idx
}

/// Seeds for a fitted scene: the seed table around the upright bounding box.
pub fn seed_vars(cloud: &PointCloud, hand: &HandModel, count: usize) -> Result<Vec<DecisionVars>> {
    let bbox = upright_oriented_bbox(cloud)?;
    initial_seeds(&bbox, hand)
        .iter()
        .take(count)
        .map(|p| DecisionVars::from_pose(hand, p))
        .collect()
}

/// Optimises every seed against an already fitted model.
pub fn plan_with_model(
    model: GpisModel,
    cloud: &PointCloud,
    hand: &HandModel,
    weights: &EnergyWeights,
    opts: &OptimizerOptions,
    goal: Option<&PoseGoal>,
) -> Result<PlanResult> {
    weights.validate()?;
    opts.validate()?;
    let seeds = seed_vars(cloud, hand, opts.seeds)?;
    let run = || -> Result<Vec<OptimizedGrasp>> {
        seeds
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut scene = Scene::new(&model, hand, weights);
                if let Some(g) = goal {
                    scene = scene.with_pose_goal(g);
                }
                optimize_seed(&scene, i, s, opts)
            })
            .collect()
    };
    let grasps = match opts.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run)?,
        None => run()?,
    };
    let ranking = rank(&grasps);
    Ok(PlanResult { model, grasps, ranking })
}

/// Fits the surface model, then optimises all seeds.
pub fn plan(
    cloud: &PointCloud,
    hand: &HandModel,
    weights: &EnergyWeights,
    opts: &OptimizerOptions,
    gpis: &GpisConfig,
) -> Result<PlanResult> {
    let model = fit(&build_training_set(cloud, gpis)?)?;
    plan_with_model(model, cloud, hand, weights, opts, None)
}

/// Like [`plan`] with a desired fingertip motion at equilibrium.
pub fn plan_with_pose_goal(
    cloud: &PointCloud,
    hand: &HandModel,
    weights: &EnergyWeights,
    opts: &OptimizerOptions,
    gpis: &GpisConfig,
    goal: &PoseGoal,
) -> Result<PlanResult> {
    let model = fit(&build_training_set(cloud, gpis)?)?;
    plan_with_model(model, cloud, hand, weights, opts, Some(goal))
}

/// RMSProp on an arbitrary differentiable function; used to exercise the
/// update rule in isolation.
pub fn rmsprop_minimize<F>(f: F, x0: &[f64], step: f64, opts: &OptimizerOptions) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0.to_vec();
    let mut v = vec![0.0; x.len()];
    let mut trace = Vec::new();
    for _ in 0..opts.max_iterations {
        let (val, g) = f(&x);
        trace.push(val);
        if g.iter().map(|gi| gi * gi).sum::<f64>().sqrt() < opts.grad_tol {
            break;
        }
        for i in 0..x.len() {
            v[i] = opts.decay * v[i] + (1.0 - opts.decay) * g[i] * g[i];
            x[i] -= step * g[i] / (v[i].sqrt() + opts.eps);
        }
    }
    (x, trace)
}
