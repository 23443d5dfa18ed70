//! Central finite-difference check of the analytic gradient of every energy
//! term at randomly perturbed seeds.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpis::GpisModel;
use crate::hand::{HandModel, WRIST_DOF};
use crate::objective::{evaluate, term_gradients, DecisionVars, EnergyWeights, PoseGoal, Scene, TERM_COUNT, TERM_NAMES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckOptions {
    pub instances: usize,
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tol: f64,
    /// Coordinates whose stencil comes this close to a branch switch are skipped.
    pub branch_margin: f64,
    pub seed: u64,
    /// Negates the analytic gradient of this term; exercises failure reporting.
    pub flip_term: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { instances: 20, step: 1e-5, tol: 1e-3, branch_margin: 1e-4, seed: 0, flip_term: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_instance: usize,
    pub worst_coordinate: usize,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub tol: f64,
    pub terms: Vec<TermCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing().is_empty()
    }

    pub fn failing(&self) -> Vec<&TermCheck> {
        self.terms.iter().filter(|t| !(t.max_rel_error < self.tol)).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.terms.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    /// Plain-text summary, one line per term plus a verdict.
    pub fn to_text(&self) -> String {
        let mut out = format!("gradient check: {} instances, tolerance {:e}\n", self.instances, self.tol);
        for t in &self.terms {
            writeln!(
                out,
                "{:<6} max_rel_error {:.3e}  checked {}  skipped {}  worst instance {} coordinate {}",
                t.name, t.max_rel_error, t.checked, t.skipped, t.worst_instance, t.worst_coordinate
            )
            .unwrap();
        }
        let fails = self.failing();
        if fails.is_empty() {
            out.push_str("PASS\n");
        } else {
            let names: Vec<&str> = fails.iter().map(|t| t.name.as_str()).collect();
            writeln!(out, "FAIL: {}", names.join(", ")).unwrap();
        }
        out
    }
}

fn perturb(seed: &DecisionVars, rng: &mut ChaCha8Rng) -> DecisionVars {
    let mut v = seed.clone();
    for (i, q) in v.q.iter_mut().enumerate() {
        let r = match i {
            0..3 => 0.005,
            3..WRIST_DOF => 0.05,
            _ => 0.1,
        };
        *q += rng.random_range(-r..r);
    }
    for o in &mut v.targets {
        for c in o.iter_mut() {
            *c += rng.random_range(-0.005..0.005);
        }
    }
    for k in &mut v.log_gains {
        *k += rng.random_range(-0.3..0.3);
    }
    v
}

/// Compares analytic and central-difference gradients per term and
/// coordinate. Instance `i` starts from `seeds[i % seeds.len()]`; odd
/// instances add an upward motion goal so the pose term is active.
///
/// The relative error of a coordinate is `|fd − ad| / max(|fd|, |ad|, s)`
/// where `s` is `1e-3` times the largest analytic component of that term at
/// that instance (at least `1e-6`).
pub fn gradient_check(
    model: &GpisModel,
    hand: &HandModel,
    weights: &EnergyWeights,
    seeds: &[DecisionVars],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if seeds.is_empty() || opts.instances == 0 {
        return Err(Error::InvalidArgument("gradient check needs seeds and instances".into()));
    }
    if !(opts.step > 0.0 && opts.tol > 0.0) {
        return Err(Error::InvalidArgument("step and tolerance must be positive".into()));
    }
    weights.validate()?;
    let goal = PoseGoal::Displacement([0.0, 0.0, 0.01]);
    let mut terms: Vec<TermCheck> = TERM_NAMES
        .iter()
        .map(|n| TermCheck {
            name: n.to_string(),
            max_rel_error: 0.0,
            worst_instance: 0,
            worst_coordinate: 0,
            checked: 0,
            skipped: 0,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for inst in 0..opts.instances {
        let x = perturb(&seeds[inst % seeds.len()], &mut rng).to_vec();
        let mut scene = Scene::new(model, hand, weights);
        if inst % 2 == 1 {
            scene = scene.with_pose_goal(&goal);
        }
        let mut ad = term_gradients(&scene, &x)?;
        if let Some(t) = opts.flip_term {
            ad[t].iter_mut().for_each(|g| *g = -*g);
        }
        let scale: Vec<f64> = ad
            .iter()
            .map(|g| (1e-3 * g.iter().fold(0.0f64, |a, v| a.max(v.abs()))).max(1e-6))
            .collect();
        let e0 = evaluate::<f64>(&scene, &x)?;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += opts.step;
            let mut xm = x.clone();
            xm[i] -= opts.step;
            let ep = evaluate::<f64>(&scene, &xp)?;
            let em = evaluate::<f64>(&scene, &xm)?;
            let near = e0.branch_gap.min(ep.branch_gap).min(em.branch_gap) < opts.branch_margin;
            for t in 0..TERM_COUNT {
                let tc = &mut terms[t];
                if near {
                    tc.skipped += 1;
                    continue;
                }
                tc.checked += 1;
                let fd = (ep.terms[t] - em.terms[t]) / (2.0 * opts.step);
                let a = ad[t][i];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(scale[t]);
                if !(rel <= tc.max_rel_error) {
                    tc.max_rel_error = rel;
                    tc.worst_instance = inst;
                    tc.worst_coordinate = i;
                }
            }
        }
    }
    Ok(GradCheckReport { instances: opts.instances, tol: opts.tol, terms })
}
