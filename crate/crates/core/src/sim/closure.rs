//! Force-closure feasibility as a convex QP over contact forces.
//!
//! Minimises the squared net wrench subject to friction cones, a minimum
//! normal force and optional joint-torque limits. Torques are divided by the
//! RMS contact distance from the center, so the decision does not depend on
//! the object's scale.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual below which the net wrench counts as balanced.
pub const CLOSURE_TOL: f64 = 1e-6;
/// Facets of the pyramid inscribed in each 3D friction cone.
pub const PYRAMID_EDGES: usize = 8;

/// Per-finger Jacobians mapping joint rates to fingertip velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct TorqueModel {
    /// One `d × n_j` matrix per contact, `d` the problem dimension.
    pub jacobians: Vec<DMatrix<f64>>,
    pub tau_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClosureStatus {
    Feasible,
    Infeasible,
    /// The solver neither converged nor proved infeasibility.
    Indeterminate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosureResult {
    pub status: ClosureStatus,
    /// Squared scale-normalised net wrench over `min_force²`.
    pub residual: f64,
    /// Contact forces on the object; zero-filled unless solved.
    pub forces: Vec<[f64; 3]>,
}

impl ClosureResult {
    pub fn is_feasible(&self) -> bool {
        self.status == ClosureStatus::Feasible
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dim {
    /// Contacts and normals in the xy-plane.
    Two,
    Three,
}

impl Dim {
    fn size(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 3,
        }
    }
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let l = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::DegenerateGeometry("zero contact normal".into()));
    }
    Ok(v.iter().map(|x| x / l).collect())
}

/// Two unit vectors spanning the plane orthogonal to `n`.
fn tangent_basis(n: &[f64]) -> ([f64; 3], [f64; 3]) {
    let a = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let d = a[0] * n[0] + a[1] * n[1] + a[2] * n[2];
    let e1 = [a[0] - d * n[0], a[1] - d * n[1], a[2] - d * n[2]];
    let l = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    let e1 = [e1[0] / l, e1[1] / l, e1[2] / l];
    let e2 = [n[1] * e1[2] - n[2] * e1[1], n[2] * e1[0] - n[0] * e1[2], n[0] * e1[1] - n[1] * e1[0]];
    (e1, e2)
}

/// Wrench map rows (force, then scaled torque) over stacked contact forces.
fn wrench_matrix(points: &[Vec<f64>], dim: Dim) -> DMatrix<f64> {
    let d = dim.size();
    let m = points.len();
    let center: Vec<f64> = (0..d).map(|k| points.iter().map(|p| p[k]).sum::<f64>() / m as f64).collect();
    let arms: Vec<Vec<f64>> = points.iter().map(|p| (0..d).map(|k| p[k] - center[k]).collect()).collect();
    let rms = (arms.iter().map(|a| a.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / m as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    let rows = if d == 2 { 3 } else { 6 };
    let mut w = DMatrix::zeros(rows, d * m);
    for (i, r) in arms.iter().enumerate() {
        let c = d * i;
        for k in 0..d {
            w[(k, c + k)] = 1.0;
        }
        if d == 2 {
            // τ = r_x f_y − r_y f_x
            w[(2, c)] = -r[1] * scale;
            w[(2, c + 1)] = r[0] * scale;
        } else {
            // τ = r × f
            w[(3, c + 1)] = -r[2] * scale;
            w[(3, c + 2)] = r[1] * scale;
            w[(4, c)] = r[2] * scale;
            w[(4, c + 2)] = -r[0] * scale;
            w[(5, c)] = -r[1] * scale;
            w[(5, c + 1)] = r[0] * scale;
        }
    }
    w
}

/// Decides whether the contacts can hold the object in force closure.
///
/// `normals` point out of the object. Forces act on the object, so each
/// must lie in the cone around the inward normal with normal component at
/// least `min_force`. With a torque model, `|Jᵢᵀ fᵢ| ≤ τ_max` per joint.
pub fn force_closure_feasible(
    contacts: &[[f64; 3]],
    normals: &[[f64; 3]],
    mu: f64,
    min_force: f64,
    torque: Option<&TorqueModel>,
    dim: Dim,
) -> Result<ClosureResult> {
    let m = contacts.len();
    let d = dim.size();
    let need = if dim == Dim::Two { 2 } else { 3 };
    if m < need {
        return Err(Error::InvalidArgument(format!("{m} contacts; at least {need} required")));
    }
    if normals.len() != m {
        return Err(Error::InvalidArgument("one normal per contact required".into()));
    }
    if !(mu >= 0.0 && mu.is_finite()) || !(min_force > 0.0 && min_force.is_finite()) {
        return Err(Error::InvalidArgument("mu must be non-negative and min_force positive".into()));
    }
    if let Some(t) = torque {
        if t.jacobians.len() != m || t.jacobians.iter().any(|j| j.nrows() != d) {
            return Err(Error::InvalidArgument("one d-row Jacobian per contact required".into()));
        }
        if !(t.tau_max >= 0.0) {
            return Err(Error::InvalidArgument("tau_max must be non-negative".into()));
        }
    }
    let points: Vec<Vec<f64>> = contacts.iter().map(|p| p[..d].to_vec()).collect();
    let inward: Vec<Vec<f64>> = normals
        .iter()
        .map(|n| unit(&n[..d]).map(|u| u.iter().map(|x| -x).collect()))
        .collect::<Result<_>>()?;

    let n = d * m;
    let w = wrench_matrix(&points, dim);
    let p = (w.transpose() * &w) * 2.0;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    for (i, u) in inward.iter().enumerate() {
        let c = d * i;
        // u·f ≥ min_force
        let mut r = vec![0.0; n];
        for k in 0..d {
            r[c + k] = -u[k];
        }
        rows.push(r);
        b.push(-min_force);
        let facets: Vec<(Vec<f64>, f64)> = if d == 2 {
            let t = vec![-u[1], u[0]];
            vec![(t.clone(), mu), (t.iter().map(|x| -x).collect(), mu)]
        } else {
            let (e1, e2) = tangent_basis(u);
            let half = std::f64::consts::PI / PYRAMID_EDGES as f64;
            (0..PYRAMID_EDGES)
                .map(|j| {
                    let a = (2 * j + 1) as f64 * half;
                    let t = (0..3).map(|k| a.cos() * e1[k] + a.sin() * e2[k]).collect();
                    (t, mu * half.cos())
                })
                .collect()
        };
        // t·f − μ u·f ≤ 0
        for (t, mu_eff) in facets {
            let mut r = vec![0.0; n];
            for k in 0..d {
                r[c + k] = t[k] - mu_eff * u[k];
            }
            rows.push(r);
            b.push(0.0);
        }
        if let Some(tm) = torque {
            let j = &tm.jacobians[i];
            for q in 0..j.ncols() {
                for sign in [1.0, -1.0] {
                    let mut r = vec![0.0; n];
                    for k in 0..d {
                        r[c + k] = sign * j[(k, q)];
                    }
                    rows.push(r);
                    b.push(tm.tau_max);
                }
            }
        }
    }

    let p_rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if j >= i { p[(i, j)] } else { 0.0 }).collect()).collect();
    let p_csc = CscMatrix::from(&p_rows);
    let a_csc = CscMatrix::from(&rows);
    let q = vec![0.0; n];
    let cones = [NonnegativeConeT(rows.len())];
    let settings = DefaultSettings::<f64> { verbose: false, ..Default::default() };
    let mut solver = DefaultSolver::new(&p_csc, &q, &a_csc, &b, &cones, settings)
        .map_err(|e| Error::Numerical(format!("{e:?}")))?;
    solver.solve();
    let status = solver.solution.status;
    let x = solver.solution.x.clone();
    let pack = |x: &[f64]| -> Vec<[f64; 3]> {
        (0..m)
            .map(|i| {
                let mut f = [0.0; 3];
                f[..d].copy_from_slice(&x[d * i..d * i + d]);
                f
            })
            .collect()
    };
    match status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            let xv = nalgebra::DVector::from_column_slice(&x);
            let residual = (&w * xv).norm_squared() / (min_force * min_force);
            let status = if residual < CLOSURE_TOL { ClosureStatus::Feasible } else { ClosureStatus::Infeasible };
            Ok(ClosureResult { status, residual, forces: pack(&x) })
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Ok(ClosureResult {
            status: ClosureStatus::Infeasible,
            residual: f64::INFINITY,
            forces: vec![[0.0; 3]; m],
        }),
        other => {
            log::warn!("force-closure solve ended with {other:?}");
            Ok(ClosureResult {
                status: ClosureStatus::Indeterminate,
                residual: f64::NAN,
                forces: vec![[0.0; 3]; m],
            })
        }
    }
}
