//! Rigid body driven by fingertip spring-dampers, integrated with
//! semi-implicit Euler until it comes to rest.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, from_na, norm, quaternion, sub, to_na, vec_na};
use crate::gpis::GpisModel;
use crate::io;
use crate::spring::{cone_cosine, spring_force, SpringSystem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    pub dt: f64,
    /// Rest is declared once kinetic energy (J) falls below this ...
    pub settle_ke: f64,
    /// ... and the net static spring wrench norm below this.
    pub settle_wrench: f64,
    pub t_max: f64,
    /// Record every n-th step (the first and last steps are always kept).
    pub sample_every: usize,
    pub mass: f64,
    /// Object-frame center of mass; the contact centroid when absent.
    pub com: Option<[f64; 3]>,
    /// Body-frame inertia about the center of mass; derived from the
    /// contacts when absent.
    pub inertia: Option<[[f64; 3]; 3]>,
    /// Inertia eigenvalues are raised to at least this fraction of the largest.
    pub inertia_floor: f64,
    /// Restrict motion to translation in xy and rotation about z.
    pub planar: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            dt: 1e-3,
            settle_ke: 1e-10,
            settle_wrench: 1e-6,
            t_max: 20.0,
            sample_every: 10,
            mass: 1.0,
            com: None,
            inertia: None,
            inertia_floor: 1e-3,
            planar: false,
        }
    }
}

impl SimOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.t_max > 0.0 && self.settle_ke > 0.0 && self.settle_wrench > 0.0 && self.mass > 0.0) {
            return Err(Error::InvalidArgument("t_max, thresholds and mass must be positive".into()));
        }
        if self.com.is_some_and(|c| c.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidArgument("com must be finite".into()));
        }
        if self.sample_every == 0 {
            return Err(Error::InvalidArgument("sample_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidBodyState {
    /// Object pose in the convention of the equilibrium solver.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    /// Velocity of the center of mass (m/s).
    pub linear_velocity: [f64; 3],
    /// World-frame angular velocity (rad/s).
    pub angular_velocity: [f64; 3],
    pub mass: f64,
    /// Body-frame inertia about the center of mass.
    pub inertia: [[f64; 3]; 3],
    /// Center of mass in the body frame.
    pub com: [f64; 3],
}

impl RigidBodyState {
    pub fn kinetic_energy(&self) -> f64 {
        let v = vec_na(&self.linear_velocity);
        let w = vec_na(&self.angular_velocity);
        let r = to_na(&self.rotation);
        let iw = r * to_na(&self.inertia) * r.transpose();
        0.5 * self.mass * v.norm_squared() + 0.5 * w.dot(&(iw * w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimStatus {
    Settled,
    Timeout,
}

#[derive(Clone, Debug)]
pub struct SimTrajectory {
    pub times: Vec<f64>,
    pub rotations: Vec<[[f64; 3]; 3]>,
    pub translations: Vec<[f64; 3]>,
    pub fingertips: Vec<Vec<[f64; 3]>>,
    pub fingertip_velocities: Vec<Vec<[f64; 3]>>,
    /// Spring-damper forces on the object.
    pub forces: Vec<Vec<[f64; 3]>>,
    pub kinetic_energy: Vec<f64>,
    pub potential_energy: Vec<f64>,
    pub targets: Vec<[f64; 3]>,
    pub gains: Vec<f64>,
    pub status: SimStatus,
    /// Time at which the body came to rest.
    pub settle_time: Option<f64>,
    pub steps: usize,
    pub final_state: RigidBodyState,
}

impl SimTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_rotation(&self) -> [[f64; 3]; 3] {
        *self.rotations.last().expect("trajectory has samples")
    }

    pub fn final_translation(&self) -> [f64; 3] {
        *self.translations.last().expect("trajectory has samples")
    }

    /// Forces at sample `s` under `mode`.
    pub fn forces_at(&self, s: usize, mode: ForceMode) -> Vec<[f64; 3]> {
        match mode {
            ForceMode::Damped => self.forces[s].clone(),
            ForceMode::Spring => self.fingertips[s]
                .iter()
                .zip(&self.targets)
                .zip(&self.gains)
                .map(|((p, o), k)| spring_force(o, p, &[0.0; 3], *k))
                .collect(),
        }
    }

    /// Rotation from the initial pose to the pose at sample `s`.
    pub fn relative_rotation(&self, s: usize) -> [[f64; 3]; 3] {
        from_na(&(to_na(&self.rotations[s]) * to_na(&self.rotations[0]).transpose()))
    }
}

fn default_inertia(points: &[[f64; 3]], com: &[f64; 3], mass: f64, floor: f64) -> [[f64; 3]; 3] {
    let w = mass / points.len() as f64;
    let mut i = Matrix3::zeros();
    for p in points {
        let r = vec_na(&sub(p, com));
        i += w * (Matrix3::identity() * r.norm_squared() - r * r.transpose());
    }
    let eig = SymmetricEigen::new(i);
    let top = eig.eigenvalues.max().max(0.0);
    let lo = (floor * top).max(1e-12 * mass);
    let vals = eig.eigenvalues.map(|v| v.max(lo));
    from_na(&(eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

struct Body<'a> {
    sys: &'a SpringSystem,
    /// Contacts relative to the center of mass, body frame.
    arms: Vec<Vector3<f64>>,
    com: Vector3<f64>,
    orient: UnitQuaternion<f64>,
    /// World position of the center of mass.
    x: Vector3<f64>,
    v: Vector3<f64>,
    w: Vector3<f64>,
    inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
    mass: f64,
    planar: bool,
}

impl Body<'_> {
    fn rotation(&self) -> Matrix3<f64> {
        *self.orient.to_rotation_matrix().matrix()
    }

    fn translation(&self) -> Vector3<f64> {
        self.x - self.rotation() * self.com
    }

    /// Fingertip positions, velocities and damped forces.
    fn contacts(&self) -> (Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<[f64; 3]>) {
        let r = self.rotation();
        let mut pos = Vec::with_capacity(self.arms.len());
        let mut vel = Vec::with_capacity(self.arms.len());
        let mut frc = Vec::with_capacity(self.arms.len());
        for (i, a) in self.arms.iter().enumerate() {
            let arm = r * a;
            let p = self.x + arm;
            let pd = self.v + self.w.cross(&arm);
            let p = [p.x, p.y, p.z];
            let pd = [pd.x, pd.y, pd.z];
            frc.push(spring_force(&self.sys.targets[i], &p, &pd, self.sys.gains[i]));
            pos.push(p);
            vel.push(pd);
        }
        (pos, vel, frc)
    }

    fn wrench(&self, points: &[[f64; 3]], forces: &[[f64; 3]]) -> (Vector3<f64>, Vector3<f64>) {
        let mut f = Vector3::zeros();
        let mut tau = Vector3::zeros();
        for (p, fi) in points.iter().zip(forces) {
            let fi = vec_na(fi);
            f += fi;
            tau += (vec_na(p) - self.x).cross(&fi);
        }
        if self.planar {
            f.z = 0.0;
            tau.x = 0.0;
            tau.y = 0.0;
        }
        (f, tau)
    }

    fn state(&self) -> RigidBodyState {
        let t = self.translation();
        RigidBodyState {
            rotation: from_na(&self.rotation()),
            translation: [t.x, t.y, t.z],
            linear_velocity: [self.v.x, self.v.y, self.v.z],
            angular_velocity: [self.w.x, self.w.y, self.w.z],
            mass: self.mass,
            inertia: from_na(&self.inertia),
            com: [self.com.x, self.com.y, self.com.z],
        }
    }

    fn potential(&self, points: &[[f64; 3]]) -> f64 {
        points
            .iter()
            .zip(&self.sys.targets)
            .zip(&self.sys.gains)
            .map(|((p, o), k)| 0.5 * k * crate::geometry::norm_sq(&sub(p, o)))
            .sum()
    }

    fn step(&mut self, dt: f64, force: Vector3<f64>, torque: Vector3<f64>) {
        let r = self.rotation();
        let iw = r * self.inertia * r.transpose();
        let iw_inv = r * self.inertia_inv * r.transpose();
        let mut wdot = iw_inv * (torque - self.w.cross(&(iw * self.w)));
        if self.planar {
            wdot.x = 0.0;
            wdot.y = 0.0;
        }
        self.v += dt * force / self.mass;
        self.w += dt * wdot;
        self.x += dt * self.v;
        self.orient = UnitQuaternion::from_scaled_axis(self.w * dt) * self.orient;
    }
}

/// Forward-simulates the grasping process from the system's initial pose.
///
/// Returns the trajectory with status [`SimStatus::Timeout`] when the body
/// has not come to rest by `t_max`.
pub fn simulate(sys: &SpringSystem, opts: &SimOptions) -> Result<SimTrajectory> {
    opts.validate()?;
    let local = sys.object_frame_contacts();
    let m = local.len() as f64;
    let com = opts.com.unwrap_or_else(|| {
        let s = local.iter().fold([0.0; 3], |a, p| crate::geometry::add(&a, p));
        [s[0] / m, s[1] / m, s[2] / m]
    });
    let inertia = match opts.inertia {
        Some(i) => i,
        None => default_inertia(&local, &com, opts.mass, opts.inertia_floor),
    };
    let inertia = to_na(&inertia);
    let inertia_inv = inertia
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("inertia is singular".into()))?;
    let r0 = to_na(&sys.r0);
    let com_v = vec_na(&com);
    let mut body = Body {
        sys,
        arms: local.iter().map(|p| vec_na(p) - com_v).collect(),
        com: com_v,
        orient: UnitQuaternion::from_matrix(&r0),
        x: vec_na(&sys.t0) + r0 * com_v,
        v: Vector3::zeros(),
        w: Vector3::zeros(),
        inertia,
        inertia_inv,
        mass: opts.mass,
        planar: opts.planar,
    };

    let mut traj = SimTrajectory {
        times: Vec::new(),
        rotations: Vec::new(),
        translations: Vec::new(),
        fingertips: Vec::new(),
        fingertip_velocities: Vec::new(),
        forces: Vec::new(),
        kinetic_energy: Vec::new(),
        potential_energy: Vec::new(),
        targets: sys.targets.clone(),
        gains: sys.gains.clone(),
        status: SimStatus::Timeout,
        settle_time: None,
        steps: 0,
        final_state: body.state(),
    };
    let record = |traj: &mut SimTrajectory, body: &Body, t: f64, data: &(Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<[f64; 3]>)| {
        let s = body.state();
        traj.times.push(t);
        traj.rotations.push(s.rotation);
        traj.translations.push(s.translation);
        traj.fingertips.push(data.0.clone());
        traj.fingertip_velocities.push(data.1.clone());
        traj.forces.push(data.2.clone());
        traj.kinetic_energy.push(s.kinetic_energy());
        traj.potential_energy.push(body.potential(&data.0));
    };

    let max_steps = (opts.t_max / opts.dt).ceil() as usize;
    let mut step = 0;
    loop {
        let data = body.contacts();
        let statics: Vec<[f64; 3]> = data
            .0
            .iter()
            .zip(&sys.targets)
            .zip(&sys.gains)
            .map(|((p, o), k)| spring_force(o, p, &[0.0; 3], *k))
            .collect();
        let (fs, ts) = body.wrench(&data.0, &statics);
        let ke = body.state().kinetic_energy();
        if !ke.is_finite() {
            return Err(Error::Numerical(format!("kinetic energy diverged at step {step}")));
        }
        let at_rest = ke < opts.settle_ke && (fs.norm_squared() + ts.norm_squared()).sqrt() < opts.settle_wrench;
        let t = step as f64 * opts.dt;
        if at_rest || step >= max_steps {
            record(&mut traj, &body, t, &data);
            if at_rest {
                traj.status = SimStatus::Settled;
                traj.settle_time = Some(t);
            }
            break;
        }
        if step % opts.sample_every == 0 {
            record(&mut traj, &body, t, &data);
        }
        let (f, tau) = body.wrench(&data.0, &data.2);
        body.step(opts.dt, f, tau);
        step += 1;
    }
    traj.steps = step;
    traj.final_state = body.state();
    Ok(traj)
}

/// Which force enters the margin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceMode {
    /// Spring plus damping, as applied during the simulation.
    Damped,
    /// Spring term only, `k (o − p)`.
    Spring,
}

/// Source of outward contact normals at the initial pose; normals rotate
/// with the body afterwards.
#[derive(Clone, Copy, Debug)]
pub enum NormalSource<'a> {
    Fixed(&'a [[f64; 3]]),
    Gpis(&'a GpisModel),
}

impl NormalSource<'_> {
    fn initial(&self, contacts: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        let raw: Vec<[f64; 3]> = match self {
            NormalSource::Fixed(n) => {
                if n.len() != contacts.len() {
                    return Err(Error::InvalidArgument("one normal per contact required".into()));
                }
                n.to_vec()
            }
            NormalSource::Gpis(model) => contacts.iter().map(|p| model.query(p).grad_mean).collect(),
        };
        raw.iter()
            .map(|n| {
                let l = norm(n);
                if l > 0.0 && l.is_finite() {
                    Ok([n[0] / l, n[1] / l, n[2] / l])
                } else {
                    Err(Error::DegenerateGeometry("zero contact normal".into()))
                }
            })
            .collect()
    }
}

/// Outward normals at every sample.
pub fn normals_along(traj: &SimTrajectory, source: &NormalSource) -> Result<Vec<Vec<[f64; 3]>>> {
    let n0 = source.initial(&traj.fingertips[0])?;
    Ok((0..traj.len())
        .map(|s| {
            let r = to_na(&traj.relative_rotation(s));
            n0.iter()
                .map(|n| {
                    let v = r * vec_na(n);
                    [v.x, v.y, v.z]
                })
                .collect()
        })
        .collect())
}

/// Angle between each force and the inward normal, per sample and finger;
/// `None` where the force vanishes.
pub fn force_normal_angles(traj: &SimTrajectory, source: &NormalSource, mode: ForceMode) -> Result<Vec<Vec<Option<f64>>>> {
    let normals = normals_along(traj, source)?;
    Ok((0..traj.len())
        .map(|s| {
            traj.forces_at(s, mode)
                .iter()
                .zip(&normals[s])
                .map(|(f, n)| {
                    let l = norm(f);
                    (l > 0.0).then(|| (-dot(f, n) / l).clamp(-1.0, 1.0).acos())
                })
                .collect()
        })
        .collect())
}

/// Contact margins per sample and finger; `None` where the force vanishes.
pub fn margin_trace(
    traj: &SimTrajectory,
    source: &NormalSource,
    mu: f64,
    mode: ForceMode,
) -> Result<Vec<Vec<Option<f64>>>> {
    if traj.status != SimStatus::Settled {
        return Err(Error::InvalidArgument("trajectory did not settle".into()));
    }
    let c = cone_cosine(mu);
    Ok(force_normal_angles(traj, source, mode)?
        .into_iter()
        .map(|row| row.into_iter().map(|a| a.map(|a| a.cos() - c)).collect())
        .collect())
}

/// Writes the trajectory as CSV with an optional margin column per finger.
pub fn write_trajectory_csv(path: &Path, traj: &SimTrajectory, margins: Option<&[Vec<Option<f64>>]>) -> Result<()> {
    let m = traj.targets.len();
    let mut out = io::schema_line("trajectory", 1);
    out.push_str("t,qw,qx,qy,qz,tx,ty,tz");
    for i in 0..m {
        write!(out, ",p{i}_x,p{i}_y,p{i}_z,f{i}_x,f{i}_y,f{i}_z").unwrap();
        if margins.is_some() {
            write!(out, ",eps{i}").unwrap();
        }
    }
    out.push('\n');
    for s in 0..traj.len() {
        let q = quaternion(&traj.rotations[s]);
        let t = traj.translations[s];
        write!(out, "{:.6}", traj.times[s]).unwrap();
        for v in q.iter().chain(&t) {
            write!(out, ",{v:.9e}").unwrap();
        }
        for i in 0..m {
            for v in traj.fingertips[s][i].iter().chain(&traj.forces[s][i]) {
                write!(out, ",{v:.9e}").unwrap();
            }
            if let Some(mg) = margins {
                match mg[s][i] {
                    Some(e) => write!(out, ",{e:.9e}").unwrap(),
                    None => out.push_str(",nan"),
                }
            }
        }
        out.push('\n');
    }
    io::write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{identity, rotation_angle_between};
    use crate::spring::{contact_margin, solve_equilibrium};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_system(rng: &mut ChaCha8Rng, m: usize) -> SpringSystem {
        let p: Vec<[f64; 3]> = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(-0.05..0.05))).collect();
        let o: Vec<[f64; 3]> = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(-0.05..0.05))).collect();
        let k: Vec<f64> = (0..m).map(|_| rng.random_range(10.0..500.0)).collect();
        SpringSystem::at_origin(p, o, k).unwrap()
    }

    fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
        norm(&sub(a, b))
    }

    #[test]
    fn relaxed_system_settles_at_step_zero() {
        let p = vec![[0.03, 0.0, 0.0], [-0.02, 0.02, 0.0], [0.0, -0.03, 0.01]];
        let sys = SpringSystem::at_origin(p.clone(), p, vec![50.0, 80.0, 120.0]).unwrap();
        let tr = simulate(&sys, &SimOptions::default()).unwrap();
        assert_eq!(tr.status, SimStatus::Settled);
        assert_eq!((tr.steps, tr.len()), (0, 1));
        assert_eq!(tr.settle_time, Some(0.0));
        assert_eq!(tr.final_translation(), [0.0; 3]);
    }

    #[test]
    fn uniform_offset_translates_the_body() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<[f64; 3]> = (0..4).map(|_| std::array::from_fn(|_| rng.random_range(-0.05..0.05))).collect();
        let d = [0.01, -0.02, 0.015];
        let o = p.iter().map(|x| [x[0] + d[0], x[1] + d[1], x[2] + d[2]]).collect();
        let sys = SpringSystem::at_origin(p, o, vec![200.0; 4]).unwrap();
        let tr = simulate(&sys, &SimOptions::default()).unwrap();
        assert_eq!(tr.status, SimStatus::Settled);
        assert!(dist(&tr.final_translation(), &d) < 1e-4);
        assert!(rotation_angle_between(&tr.final_rotation(), &identity()) < 1e-4);
        // equal gains and the default COM leave no torque at any time
        assert!(tr.rotations.iter().all(|r| rotation_angle_between(r, &identity()) < 1e-12));
    }

    #[test]
    fn settled_pose_matches_closed_form_equilibrium() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let sys = random_system(&mut rng, 4);
            let eq = solve_equilibrium(&sys).unwrap();
            let tr = simulate(&sys, &SimOptions { t_max: 100.0, ..Default::default() }).unwrap();
            assert_eq!(tr.status, SimStatus::Settled);
            assert!(dist(&tr.final_translation(), &eq.translation) < 1e-3);
            assert!(rotation_angle_between(&tr.final_rotation(), &eq.rotation) < 1e-3);
        }
    }

    #[test]
    fn nonidentity_initial_pose_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random_system(&mut rng, 3);
        let r0 = crate::geometry::euler_xyz(0.3, -0.7, 1.1);
        let sys = SpringSystem::new(base.contacts, base.targets, base.gains, r0, [0.1, 0.2, -0.1]).unwrap();
        let tr = simulate(&sys, &SimOptions { t_max: 100.0, ..Default::default() }).unwrap();
        assert!(rotation_angle_between(&tr.rotations[0], &r0) < 1e-12);
        for (a, b) in tr.fingertips[0].iter().zip(&sys.contacts) {
            assert!(dist(a, b) < 1e-12);
        }
        let eq = solve_equilibrium(&sys).unwrap();
        assert!(dist(&tr.final_translation(), &eq.translation) < 1e-3);
        assert!(rotation_angle_between(&tr.final_rotation(), &eq.rotation) < 1e-3);
    }

    #[test]
    fn timeout_keeps_the_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sys = random_system(&mut rng, 3);
        let tr = simulate(&sys, &SimOptions { t_max: 0.05, ..Default::default() }).unwrap();
        assert_eq!(tr.status, SimStatus::Timeout);
        assert_eq!(tr.settle_time, None);
        assert_eq!(tr.steps, 50);
        assert_eq!(tr.len(), 6);
        let n = vec![[1.0, 0.0, 0.0]; 3];
        assert!(margin_trace(&tr, &NormalSource::Fixed(&n), 0.5, ForceMode::Damped).is_err());
    }

    #[test]
    fn planar_mode_stays_in_plane() {
        let p = vec![[0.03, 0.0, 0.0], [-0.02, 0.02, 0.0], [0.0, -0.03, 0.0]];
        let o = vec![[0.04, 0.01, 0.02], [-0.02, 0.03, -0.01], [0.01, -0.02, 0.03]];
        let sys = SpringSystem::at_origin(p, o, vec![100.0, 60.0, 150.0]).unwrap();
        let tr = simulate(&sys, &SimOptions { planar: true, ..Default::default() }).unwrap();
        assert_eq!(tr.status, SimStatus::Settled);
        for (r, t) in tr.rotations.iter().zip(&tr.translations) {
            assert!(t[2].abs() < 1e-15);
            assert!((r[2][2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_options_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sys = random_system(&mut rng, 3);
        for opts in [
            SimOptions { dt: 0.0, ..Default::default() },
            SimOptions { sample_every: 0, ..Default::default() },
            SimOptions { mass: -1.0, ..Default::default() },
            SimOptions { com: Some([f64::NAN, 0.0, 0.0]), ..Default::default() },
            SimOptions { inertia: Some([[0.0; 3]; 3]), ..Default::default() },
        ] {
            assert!(simulate(&sys, &opts).is_err());
        }
    }

    #[test]
    fn margins_agree_with_pointwise_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sys = random_system(&mut rng, 4);
        let n: Vec<[f64; 3]> = (0..4).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let tr = simulate(&sys, &SimOptions { t_max: 100.0, ..Default::default() }).unwrap();
        let normals = normals_along(&tr, &NormalSource::Fixed(&n)).unwrap();
        for mode in [ForceMode::Damped, ForceMode::Spring] {
            let mg = margin_trace(&tr, &NormalSource::Fixed(&n), 0.4, mode).unwrap();
            for s in 0..tr.len() {
                let f = tr.forces_at(s, mode);
                for i in 0..4 {
                    let want = contact_margin(&f[i], &normals[s][i], 0.4).unwrap();
                    assert!((mg[s][i].unwrap() - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn normals_follow_the_body() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sys = random_system(&mut rng, 3);
        let n = vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, -1.0]];
        let tr = simulate(&sys, &SimOptions { t_max: 100.0, ..Default::default() }).unwrap();
        let normals = normals_along(&tr, &NormalSource::Fixed(&n)).unwrap();
        let last = tr.len() - 1;
        let r = tr.relative_rotation(last);
        let y = crate::geometry::mat_vec(&r, &[0.0, 1.0, 0.0]);
        assert!(dist(&normals[last][1], &y) < 1e-12);
    }

    #[test]
    fn zero_force_gives_undefined_margin() {
        let p = vec![[0.03, 0.0, 0.0], [-0.02, 0.02, 0.0], [0.0, -0.03, 0.01]];
        let sys = SpringSystem::at_origin(p.clone(), p, vec![50.0; 3]).unwrap();
        let tr = simulate(&sys, &SimOptions::default()).unwrap();
        let n = vec![[1.0, 0.0, 0.0]; 3];
        let mg = margin_trace(&tr, &NormalSource::Fixed(&n), 0.5, ForceMode::Spring).unwrap();
        assert!(mg[0].iter().all(Option::is_none));
    }

    #[test]
    fn static_equilibrium_gives_constant_margins() {
        // squeeze toward the centroid with equal gains: balanced from the start
        let p = vec![[0.03, 0.0, 0.0], [-0.015, 0.026, 0.0], [-0.015, -0.026, 0.0]];
        let o = p.iter().map(|x| [0.5 * x[0], 0.5 * x[1], 0.0]).collect();
        let sys = SpringSystem::at_origin(p.clone(), o, vec![100.0; 3]).unwrap();
        let opts = SimOptions { settle_ke: 1e-30, settle_wrench: 1e-30, t_max: 0.5, sample_every: 1, ..Default::default() };
        let mut tr = simulate(&sys, &opts).unwrap();
        assert!(tr.rotations.iter().all(|r| rotation_angle_between(r, &identity()) < 1e-12));
        // margin_trace only accepts settled runs
        tr.status = SimStatus::Settled;
        let n: Vec<[f64; 3]> = p.iter().map(|x| [x[0] + 0.01, x[1], 0.0]).collect();
        let mg = margin_trace(&tr, &NormalSource::Fixed(&n), 0.5, ForceMode::Damped).unwrap();
        for row in &mg {
            for (a, b) in row.iter().zip(&mg[0]) {
                assert!((a.unwrap() - b.unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_has_header_and_one_row_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = random_system(&mut rng, 3);
        let tr = simulate(&sys, &SimOptions { t_max: 100.0, ..Default::default() }).unwrap();
        let n = vec![[1.0, 0.0, 0.0]; 3];
        let mg = margin_trace(&tr, &NormalSource::Fixed(&n), 0.5, ForceMode::Damped).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        write_trajectory_csv(&path, &tr, Some(&mg)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# schema: springgrasp.trajectory/1");
        assert!(lines[1].starts_with("t,qw,qx,qy,qz,tx,ty,tz,p0_x"));
        assert!(lines[1].ends_with(",eps2"));
        assert_eq!(lines.len(), 2 + tr.len());
        let cols = lines[1].split(',').count();
        assert!(lines[2..].iter().all(|l| l.split(',').count() == cols));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn energy_never_grows(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sys = random_system(&mut rng, 4);
            let tr = simulate(&sys, &SimOptions { t_max: 2.0, sample_every: 1, ..Default::default() }).unwrap();
            for w in 0..tr.len() - 1 {
                let e0 = tr.kinetic_energy[w] + tr.potential_energy[w];
                let e1 = tr.kinetic_energy[w + 1] + tr.potential_energy[w + 1];
                prop_assert!(e1 <= e0 + 1e-6, "step {w}: {e0} -> {e1}");
            }
        }

        #[test]
        fn fingertips_move_rigidly(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sys = random_system(&mut rng, 5);
            let tr = simulate(&sys, &SimOptions { t_max: 2.0, ..Default::default() }).unwrap();
            let d0 = &tr.fingertips[0];
            for tips in &tr.fingertips {
                for i in 0..5 {
                    for j in i + 1..5 {
                        prop_assert!((dist(&tips[i], &tips[j]) - dist(&d0[i], &d0[j])).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn translation_keeps_margins_between_endpoints(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.random_range(3..=5);
            let p: Vec<[f64; 3]> = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(-0.05..0.05))).collect();
            let c: [f64; 3] = std::array::from_fn(|j| p.iter().map(|x| x[j]).sum::<f64>() / m as f64);
            let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
            let rho = rng.random_range(-0.6..-0.05);
            let o: Vec<[f64; 3]> = p.iter().map(|x| std::array::from_fn(|j| x[j] + shift[j] + rho * (x[j] - c[j]))).collect();
            let unit = |v: [f64; 3]| { let l = norm(&v); [v[0] / l, v[1] / l, v[2] / l] };
            let n: Vec<[f64; 3]> = (0..m)
                .map(|i| {
                    let a = unit(sub(&o[i], &p[i]));
                    let b = unit(sub(&c, &p[i]));
                    unit(std::array::from_fn(|j| -(a[j] + b[j]) + rng.random_range(-0.2..0.2)))
                })
                .collect();
            let sys = SpringSystem::at_origin(p, o, vec![rng.random_range(10.0..500.0); m]).unwrap();
            let tr = simulate(&sys, &SimOptions { t_max: 100.0, sample_every: 1, ..Default::default() }).unwrap();
            prop_assert!(rotation_angle_between(&tr.final_rotation(), &identity()) < 1e-3);
            let mg = margin_trace(&tr, &NormalSource::Fixed(&n), 0.5, ForceMode::Spring).unwrap();
            for i in 0..m {
                let series: Vec<f64> = mg.iter().map(|row| row[i].unwrap()).collect();
                let bound = series[0].min(*series.last().unwrap());
                let low = series.iter().copied().fold(f64::INFINITY, f64::min);
                prop_assert!(low >= bound - 1e-3, "finger {i}: {low} < {bound}");
            }
        }
    }
}
