//! Kinematic hand model: chained revolute joints under a 6-DoF wrist,
//! collision spheres, pregrasp contacts and initial seeds.
//!
//! The decision vector is `q = [x, y, z, a, b, c, θ_1 … θ_J]`: wrist
//! position, wrist orientation as intrinsic X-Y-Z Euler angles
//! (`R = Rx(a) Ry(b) Rz(c)`) and joint angles in config order.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::geometry::{
    add, axis_angle, euler_xyz, euler_xyz_from_matrix, m3c, mat_mul, mat_vec, scale_f, sub, v3c,
    M3, V3,
};
use crate::io;
use crate::pointcloud::BoundingBox;

pub const ROOT_LINK: &str = "palm";
pub const WRIST_DOF: usize = 6;

const ALLEGRO_LIKE: &str = include_str!("../configs/allegro_like.toml");
const PLANAR: &str = include_str!("../configs/planar_3x2.toml");

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HandFile {
    name: String,
    #[serde(default)]
    wrist_fixed: bool,
    #[serde(default)]
    self_collision: Vec<[usize; 2]>,
    #[serde(default)]
    link: Vec<LinkSpec>,
    #[serde(default)]
    fingertip: Vec<FingertipSpec>,
    #[serde(default)]
    sphere: Vec<SphereSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkSpec {
    name: String,
    parent: String,
    #[serde(default)]
    xyz: [f64; 3],
    #[serde(default)]
    rpy: [f64; 3],
    joint: Option<JointSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointSpec {
    axis: [f64; 3],
    lower: f64,
    upper: f64,
    #[serde(default)]
    reference: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FingertipSpec {
    finger: String,
    link: String,
    #[serde(default)]
    offset: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SphereSpec {
    link: String,
    #[serde(default)]
    offset: [f64; 3],
    radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub axis: [f64; 3],
    pub lower: f64,
    pub upper: f64,
    pub reference: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub name: String,
    /// Index of the parent link; `None` for links attached to the palm.
    pub parent: Option<usize>,
    pub rotation: [[f64; 3]; 3],
    pub offset: [f64; 3],
    /// Joint index into the joint-angle block of `q`.
    pub joint: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fingertip {
    pub finger: String,
    /// Link index; `None` for the palm.
    pub link: Option<usize>,
    pub offset: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollisionSphere {
    pub link: Option<usize>,
    pub offset: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandModel {
    pub name: String,
    pub wrist_fixed: bool,
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    pub fingertips: Vec<Fingertip>,
    pub spheres: Vec<CollisionSphere>,
    /// Zero-based sphere index pairs checked for self-collision.
    pub self_collision: Vec<(usize, usize)>,
}

/// Fixed rotation from roll-pitch-yaw: `Rz(yaw) Ry(pitch) Rx(roll)`.
fn rpy_matrix(rpy: [f64; 3]) -> [[f64; 3]; 3] {
    let rx = axis_angle([1.0, 0.0, 0.0], rpy[0]);
    let ry = axis_angle([0.0, 1.0, 0.0], rpy[1]);
    let rz = axis_angle([0.0, 0.0, 1.0], rpy[2]);
    mat_mul(&mat_mul(&rz, &ry), &rx)
}

impl HandModel {
    pub fn allegro_like() -> HandModel {
        Self::from_toml(ALLEGRO_LIKE).expect("built-in hand config is valid")
    }

    pub fn planar_three_finger() -> HandModel {
        Self::from_toml(PLANAR).expect("built-in planar config is valid")
    }

    pub fn load(path: &Path) -> Result<HandModel> {
        Self::from_toml(&io::read_to_string(path)?)
    }

    pub fn from_toml(text: &str) -> Result<HandModel> {
        let body = io::strip_schema(text, "hand", 1)?;
        let file: HandFile = toml::from_str(body).map_err(|e| Error::Config(e.to_string()))?;
        Self::build(file)
    }

    fn build(file: HandFile) -> Result<HandModel> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut links = Vec::new();
        let mut joints = Vec::new();
        for spec in &file.link {
            if spec.name == ROOT_LINK || index.contains_key(&spec.name) {
                return Err(Error::Config(format!("link {:?} defined twice", spec.name)));
            }
            let parent = if spec.parent == ROOT_LINK {
                None
            } else {
                Some(*index.get(&spec.parent).ok_or_else(|| {
                    Error::Config(format!(
                        "link {:?} references missing or later parent {:?}",
                        spec.name, spec.parent
                    ))
                })?)
            };
            let joint = match &spec.joint {
                None => None,
                Some(j) => {
                    let n = (j.axis.iter().map(|v| v * v).sum::<f64>()).sqrt();
                    if !(n > 0.0) {
                        return Err(Error::Config(format!("link {:?}: zero joint axis", spec.name)));
                    }
                    if !(j.lower < j.upper) {
                        return Err(Error::Config(format!(
                            "link {:?}: joint limits {} .. {} are empty",
                            spec.name, j.lower, j.upper
                        )));
                    }
                    if !(j.lower..=j.upper).contains(&j.reference) {
                        return Err(Error::Config(format!(
                            "link {:?}: reference angle outside limits",
                            spec.name
                        )));
                    }
                    joints.push(Joint {
                        axis: scale_f(&j.axis, 1.0 / n),
                        lower: j.lower,
                        upper: j.upper,
                        reference: j.reference,
                    });
                    Some(joints.len() - 1)
                }
            };
            index.insert(spec.name.clone(), links.len());
            links.push(Link {
                name: spec.name.clone(),
                parent,
                rotation: rpy_matrix(spec.rpy),
                offset: spec.xyz,
                joint,
            });
        }
        let resolve = |name: &str, what: &str| -> Result<Option<usize>> {
            if name == ROOT_LINK {
                Ok(None)
            } else {
                index
                    .get(name)
                    .map(|i| Some(*i))
                    .ok_or_else(|| Error::Config(format!("{what} references missing link {name:?}")))
            }
        };
        let fingertips = file
            .fingertip
            .iter()
            .map(|f| {
                Ok(Fingertip {
                    finger: f.finger.clone(),
                    link: resolve(&f.link, &format!("fingertip {:?}", f.finger))?,
                    offset: f.offset,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if fingertips.len() < 3 {
            return Err(Error::Config(format!("{} fingertips; at least 3 required", fingertips.len())));
        }
        let spheres = file
            .sphere
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if !(s.radius > 0.0) {
                    return Err(Error::Config(format!("sphere {} has non-positive radius", i + 1)));
                }
                Ok(CollisionSphere {
                    link: resolve(&s.link, &format!("sphere {}", i + 1))?,
                    offset: s.offset,
                    radius: s.radius,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let self_collision = file
            .self_collision
            .iter()
            .map(|[a, b]| {
                if *a == 0 || *b == 0 || *a > spheres.len() || *b > spheres.len() || a == b {
                    Err(Error::Config(format!("invalid self-collision pair ({a}, {b})")))
                } else {
                    Ok((a - 1, b - 1))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HandModel {
            name: file.name,
            wrist_fixed: file.wrist_fixed,
            links,
            joints,
            fingertips,
            spheres,
            self_collision,
        })
    }

    pub fn finger_count(&self) -> usize {
        self.fingertips.len()
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn dof(&self) -> usize {
        WRIST_DOF + self.joints.len()
    }

    /// Reference joint angles.
    pub fn reference_joints(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.reference).collect()
    }

    /// Full reference configuration with the wrist at the origin.
    pub fn reference_pose(&self) -> HandPose {
        let mut q = vec![0.0; WRIST_DOF];
        q.extend(self.reference_joints());
        HandPose { q, clamped: Vec::new() }
    }

    /// Clamps joint angles of `q` into their limits in place.
    pub fn clamp_joints(&self, q: &mut [f64]) -> Vec<usize> {
        let mut hit = Vec::new();
        for (j, joint) in self.joints.iter().enumerate() {
            let v = &mut q[WRIST_DOF + j];
            if *v < joint.lower || *v > joint.upper {
                *v = v.clamp(joint.lower, joint.upper);
                hit.push(j);
            }
        }
        hit
    }

    /// Forward kinematics generic over the scalar type.
    pub fn forward_kinematics<T: Scalar>(&self, q: &[T]) -> Result<FkResult<T>> {
        if q.len() != self.dof() {
            return Err(Error::InvalidArgument(format!(
                "q has {} entries; the hand needs {}",
                q.len(),
                self.dof()
            )));
        }
        let wrist_r = euler_xyz(q[3], q[4], q[5]);
        let wrist_p = [q[0], q[1], q[2]];
        let mut frames: Vec<(M3<T>, V3<T>)> = Vec::with_capacity(self.links.len());
        for link in &self.links {
            let (pr, pp) = match link.parent {
                None => (wrist_r, wrist_p),
                Some(i) => frames[i],
            };
            let p = add(&pp, &mat_vec(&pr, &v3c(link.offset)));
            let mut r = mat_mul(&pr, &m3c(&link.rotation));
            if let Some(j) = link.joint {
                r = mat_mul(&r, &axis_angle(self.joints[j].axis, q[WRIST_DOF + j]));
            }
            frames.push((r, p));
        }
        let place = |link: Option<usize>, offset: &[f64; 3]| -> V3<T> {
            let (r, p) = match link {
                None => (wrist_r, wrist_p),
                Some(i) => frames[i],
            };
            add(&p, &mat_vec(&r, &v3c(*offset)))
        };
        Ok(FkResult {
            fingertips: self.fingertips.iter().map(|f| place(f.link, &f.offset)).collect(),
            sphere_centers: self.spheres.iter().map(|s| place(s.link, &s.offset)).collect(),
            sphere_radii: self.spheres.iter().map(|s| s.radius).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandPose {
    pub q: Vec<f64>,
    /// Joint indices clamped into limits on construction.
    pub clamped: Vec<usize>,
}

impl HandPose {
    pub fn new(model: &HandModel, mut q: Vec<f64>) -> Result<HandPose> {
        if q.len() != model.dof() {
            return Err(Error::InvalidArgument(format!(
                "q has {} entries; the hand needs {}",
                q.len(),
                model.dof()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("q is not finite".into()));
        }
        let clamped = model.clamp_joints(&mut q);
        if !clamped.is_empty() {
            log::debug!("joints {clamped:?} clamped into limits");
        }
        Ok(HandPose { q, clamped })
    }

    pub fn wrist_position(&self) -> [f64; 3] {
        [self.q[0], self.q[1], self.q[2]]
    }

    pub fn wrist_rotation(&self) -> [[f64; 3]; 3] {
        euler_xyz(self.q[3], self.q[4], self.q[5])
    }

    pub fn joints(&self) -> &[f64] {
        &self.q[WRIST_DOF..]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FkResult<T> {
    pub fingertips: Vec<V3<T>>,
    pub sphere_centers: Vec<V3<T>>,
    pub sphere_radii: Vec<f64>,
}

/// Pregrasp contact `c (tip − o) + o`.
pub fn pregrasp_contact<T: Scalar>(fk_tip: &V3<T>, target: &V3<T>, c: f64) -> V3<T> {
    add(&scale_f(&sub(fk_tip, target), c), target)
}

/// Wrist seeds in the bounding-box frame: offset (m) and intrinsic X-Y-Z
/// Euler angles (deg).
pub const SEED_TABLE: [([f64; 3], [f64; 3]); 7] = [
    ([-0.05, 0.0, 0.06], [0.0, 0.0, 0.0]),
    ([-0.04, 0.03, 0.03], [0.0, 0.0, -45.0]),
    ([-0.04, -0.03, 0.03], [0.0, 0.0, 45.0]),
    ([0.1, 0.06, -0.05], [-90.0, 90.0, 0.0]),
    ([0.0, 0.06, 0.05], [-90.0, 0.0, 0.0]),
    ([0.0, -0.06, 0.03], [0.0, 0.0, 90.0]),
    ([0.02, -0.04, 0.03], [0.0, 0.0, 135.0]),
];

/// The seven initial hand poses around an oriented bounding box.
pub fn initial_seeds(bbox: &BoundingBox, model: &HandModel) -> Vec<HandPose> {
    SEED_TABLE
        .iter()
        .map(|(offset, deg)| {
            let p = add(&bbox.center, &mat_vec(&bbox.rotation, offset));
            let local = euler_xyz(deg[0].to_radians(), deg[1].to_radians(), deg[2].to_radians());
            let e = euler_xyz_from_matrix(&mat_mul(&bbox.rotation, &local));
            let mut q = vec![p[0], p[1], p[2], e[0], e[1], e[2]];
            q.extend(model.reference_joints());
            HandPose { q, clamped: Vec::new() }
        })
        .collect()
}

/// Initial targets halfway from each fingertip toward the fingertip centroid.
pub fn initial_targets(tips: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = tips.len() as f64;
    let mean = tips.iter().fold([0.0; 3], |a, t| add(&a, t));
    let mean = scale_f(&mean, 1.0 / n);
    tips.iter().map(|t| scale_f(&add(t, &mean), 0.5)).collect()
}

/// Initial gains: 80 N/m per finger and 160 N/m for the last (opposing) one.
pub fn initial_gains(m: usize) -> Vec<f64> {
    (0..m).map(|i| if i + 1 == m { 160.0 } else { 80.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Dual, Scalar};
    use crate::geometry::{norm, rotation_angle_between};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn built_in_configs() {
        let h = HandModel::allegro_like();
        assert_eq!(h.dof(), 22);
        assert_eq!(h.spheres.len(), 16);
        assert_eq!(h.finger_count(), 4);
        assert_eq!(h.self_collision.len(), 8);
        assert_eq!(h.self_collision[0], (0, 3));
        let radii: Vec<f64> = h.spheres.iter().map(|s| s.radius).collect();
        assert!(radii[..12].iter().all(|r| *r == 0.01));
        assert!(radii[12..].iter().all(|r| *r == 0.02));
        let p = HandModel::planar_three_finger();
        assert_eq!((p.finger_count(), p.joint_count()), (3, 6));
        assert!(p.wrist_fixed);
    }

    #[test]
    fn missing_parent_is_a_config_error() {
        let text = "# schema: springgrasp.hand/1\nname = \"x\"\n[[link]]\nname = \"a\"\nparent = \"ghost\"\n";
        match HandModel::from_toml(text) {
            Err(Error::Config(msg)) => assert!(msg.contains("\"a\"") && msg.contains("ghost")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_pose_tips_are_composed_offsets() {
        // with all angles zero each finger is a straight chain along its base x-axis
        let h = HandModel::allegro_like();
        let fk = h.forward_kinematics(&vec![0.0; 22]).unwrap();
        let expect = [
            [0.05 + 0.05 + 0.035 + 0.045, 0.045, 0.0],
            [0.05 + 0.05 + 0.035 + 0.045, 0.0, 0.0],
            [0.05 + 0.05 + 0.035 + 0.045, -0.045, 0.0],
            [-0.05, 0.0, -(0.05 + 0.04 + 0.05)],
        ];
        for (t, e) in fk.fingertips.iter().zip(&expect) {
            assert!(norm(&sub(t, e)) < 1e-12, "{t:?} vs {e:?}");
        }
    }

    #[test]
    fn flexion_curls_toward_palm_side() {
        let h = HandModel::allegro_like();
        let fk = h.forward_kinematics(&h.reference_pose().q).unwrap();
        assert!(fk.fingertips[..3].iter().all(|t| t[2] < 0.0));
        // thumb curls toward +x (toward the fingers)
        assert!(fk.fingertips[3][0] > -0.05);
    }

    #[test]
    fn wrist_translation_and_rotation() {
        let h = HandModel::allegro_like();
        let q0 = h.reference_pose().q;
        let base = h.forward_kinematics(&q0).unwrap();
        let mut q = q0.clone();
        q[0] += 0.1;
        q[1] -= 0.2;
        q[2] += 0.3;
        let moved = h.forward_kinematics(&q).unwrap();
        for (a, b) in base.fingertips.iter().chain(&base.sphere_centers).zip(moved.fingertips.iter().chain(&moved.sphere_centers)) {
            assert!(norm(&sub(&sub(b, a), &[0.1, -0.2, 0.3])) < 1e-12);
        }
        let mut q = q0;
        q[5] = std::f64::consts::FRAC_PI_2;
        let rot = h.forward_kinematics(&q).unwrap();
        for (a, b) in base.fingertips.iter().zip(&rot.fingertips) {
            assert!(norm(&sub(b, &[-a[1], a[0], a[2]])) < 1e-12);
        }
    }

    #[test]
    fn pregrasp_cases() {
        assert_eq!(pregrasp_contact(&[1.0, 0.0, 0.0], &[0.0; 3], 0.7), [0.7, 0.0, 0.0]);
        let tip = [0.3, -0.2, 0.5];
        assert!(norm(&sub(&pregrasp_contact(&tip, &[0.1, 0.1, 0.1], 1.0), &tip)) < 1e-15);
    }

    #[test]
    fn seeds_follow_table() {
        let h = HandModel::allegro_like();
        let b = BoundingBox::axis_aligned([0.0; 3], [0.05; 3]).unwrap();
        let s = initial_seeds(&b, &h);
        assert_eq!(s.len(), 7);
        assert_eq!(s[0].wrist_position(), [-0.05, 0.0, 0.06]);
        let r7 = euler_xyz(0.0, 0.0, 135f64.to_radians());
        assert!(rotation_angle_between(&s[6].wrist_rotation(), &r7) < 1e-12);
        assert_eq!(s[0].joints(), h.reference_joints().as_slice());
        // palm normal: five seeds face down, two are perpendicular to the table
        let down = s.iter().filter(|p| mat_vec(&p.wrist_rotation(), &[0.0, 0.0, -1.0])[2] < -0.99).count();
        let side = s.iter().filter(|p| mat_vec(&p.wrist_rotation(), &[0.0, 0.0, -1.0])[2].abs() < 1e-9).count();
        assert_eq!((down, side), (5, 2));
    }

    #[test]
    fn seeds_rotate_with_box() {
        let h = HandModel::allegro_like();
        let r = euler_xyz(0.3, -0.2, 1.1);
        let c = [0.1, 0.2, 0.3];
        let a = initial_seeds(&BoundingBox::axis_aligned([0.0; 3], [0.05; 3]).unwrap(), &h);
        let b = initial_seeds(&BoundingBox::new(c, [0.05; 3], r).unwrap(), &h);
        for (sa, sb) in a.iter().zip(&b) {
            let expect = add(&c, &mat_vec(&r, &sa.wrist_position()));
            assert!(norm(&sub(&expect, &sb.wrist_position())) < 1e-12);
            assert!(rotation_angle_between(&mat_mul(&r, &sa.wrist_rotation()), &sb.wrist_rotation()) < 1e-9);
        }
    }

    #[test]
    fn target_and_gain_initialisation() {
        let tips = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let o = initial_targets(&tips);
        assert_eq!(o[1], [0.625, 0.125, 0.125]);
        assert_eq!(initial_gains(4), vec![80.0, 80.0, 80.0, 160.0]);
    }

    #[test]
    fn clamping_records_violations() {
        let h = HandModel::allegro_like();
        let mut q = h.reference_pose().q;
        q[7] = 5.0;
        let p = HandPose::new(&h, q).unwrap();
        assert_eq!(p.clamped, vec![1]);
        assert_eq!(p.q[7], h.joints[1].upper);
    }

    fn fk_objective<T: Scalar>(h: &HandModel, q: &[T]) -> Vec<T> {
        let fk = h.forward_kinematics(q).unwrap();
        fk.fingertips.iter().chain(&fk.sphere_centers).flat_map(|p| p.iter().copied()).collect()
    }

    #[test]
    fn fk_dual_derivatives_match_finite_differences() {
        let h = HandModel::allegro_like();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let q: Vec<f64> = (0..22).map(|i| if i < 3 { rng.random_range(-0.1..0.1) } else { rng.random_range(-1.0..1.0) }).collect();
            let j = rng.random_range(0..22);
            let qd: Vec<Dual<1>> = q.iter().enumerate().map(|(i, v)| if i == j { Dual::variable(*v, 0) } else { Dual::constant(*v) }).collect();
            let ad = fk_objective(&h, &qd);
            let hstep = 1e-6;
            let (mut a, mut b) = (q.clone(), q.clone());
            a[j] += hstep;
            b[j] -= hstep;
            let fa = fk_objective(&h, &a);
            let fb = fk_objective(&h, &b);
            for k in 0..ad.len() {
                let fd = (fa[k] - fb[k]) / (2.0 * hstep);
                let err = (fd - ad[k].eps[0]).abs() / fd.abs().max(1e-2);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    proptest! {
        #[test]
        fn terminal_spheres_move_rigidly(seed in 0u64..1000) {
            let h = HandModel::allegro_like();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<f64> = (0..22).map(|_| rng.random_range(-0.5..0.5)).collect();
            let a = h.forward_kinematics(&q).unwrap();
            let b = h.forward_kinematics(&h.reference_pose().q).unwrap();
            for (f, tip) in [0usize, 3, 6, 9].iter().zip(0..4) {
                let da = norm(&sub(&a.sphere_centers[*f], &a.fingertips[tip]));
                let db = norm(&sub(&b.sphere_centers[*f], &b.fingertips[tip]));
                prop_assert!((da - db).abs() < 1e-12);
            }
        }

        #[test]
        fn pregrasp_is_affine(t in prop::array::uniform3(-1.0f64..1.0), o in prop::array::uniform3(-1.0f64..1.0),
                              u in prop::array::uniform3(-1.0f64..1.0), c in 0.01f64..1.0, s in -2.0f64..2.0) {
            let mix = |a: &[f64; 3], b: &[f64; 3]| add(&scale_f(a, s), &scale_f(b, 1.0 - s));
            let lhs = pregrasp_contact(&mix(&t, &u), &o, c);
            let rhs = mix(&pregrasp_contact(&t, &o, c), &pregrasp_contact(&u, &o, c));
            prop_assert!(norm(&sub(&lhs, &rhs)) < 1e-12);
            let p = pregrasp_contact(&t, &o, c);
            // collinear, between target and tip
            let along = sub(&t, &o);
            let rel = sub(&p, &o);
            prop_assert!(norm(&sub(&rel, &scale_f(&along, c))) < 1e-12);
        }
    }
}
