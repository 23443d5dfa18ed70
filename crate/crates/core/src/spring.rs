//! Spring-driven rigid-body equilibrium, spring forces, contact margins and
//! the margin energy.
//!
//! The equilibrium pose minimises `½ Σ k_i |R R0ᵀ (p_i − t0) + t − o_i|²`
//! and is found in closed form by a gain-weighted Kabsch fit. The fit is
//! generic over [`Scalar`]: the polar factor is evaluated in `f64` and its
//! derivative with respect to the cross-covariance is attached implicitly,
//! so no derivative ever passes through the SVD.

use nalgebra::{Matrix3, SVD};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::geometry::{
    self, add, cross, dot, from_na, is_rotation, m3_vals, mat_vec, norm, scale, scale_f, sub,
    to_na, transpose, v3c, M3, V3,
};

/// Relative singular-value threshold below which the rotation is unconstrained.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct SpringSystem {
    pub contacts: Vec<[f64; 3]>,
    pub targets: Vec<[f64; 3]>,
    pub gains: Vec<f64>,
    pub r0: [[f64; 3]; 3],
    pub t0: [f64; 3],
}

impl SpringSystem {
    pub fn new(
        contacts: Vec<[f64; 3]>,
        targets: Vec<[f64; 3]>,
        gains: Vec<f64>,
        r0: [[f64; 3]; 3],
        t0: [f64; 3],
    ) -> Result<Self> {
        let m = contacts.len();
        if m < 3 {
            return Err(Error::InvalidArgument(format!("{m} fingers; at least 3 required")));
        }
        if targets.len() != m || gains.len() != m {
            return Err(Error::InvalidArgument("contacts, targets and gains differ in length".into()));
        }
        if let Some(k) = gains.iter().find(|k| !(**k > 0.0) || !k.is_finite()) {
            return Err(Error::InvalidArgument(format!("gain {k} is not positive")));
        }
        if !is_rotation(&r0, 1e-9) {
            return Err(Error::InvalidArgument("initial rotation is not a proper rotation".into()));
        }
        Ok(SpringSystem { contacts, targets, gains, r0, t0 })
    }

    /// System with the object frame at the world origin.
    pub fn at_origin(contacts: Vec<[f64; 3]>, targets: Vec<[f64; 3]>, gains: Vec<f64>) -> Result<Self> {
        Self::new(contacts, targets, gains, geometry::identity(), [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.contacts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contacts.is_empty()
    }

    /// Contacts expressed in the object frame at `t0`.
    pub fn object_frame_contacts(&self) -> Vec<[f64; 3]> {
        let rt = transpose(&self.r0);
        self.contacts.iter().map(|p| mat_vec(&rt, &sub(p, &self.t0))).collect()
    }

    /// Total spring potential with the object at `(r, t)`.
    pub fn potential(&self, r: &[[f64; 3]; 3], t: &[f64; 3]) -> f64 {
        self.object_frame_contacts()
            .iter()
            .zip(&self.targets)
            .zip(&self.gains)
            .map(|((p, o), k)| 0.5 * k * geometry::norm_sq(&sub(&add(&mat_vec(r, p), t), o)))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquilibriumState {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub fingertips: Vec<[f64; 3]>,
    pub residual: f64,
}

/// Generic equilibrium: rotation, translation and fingertip positions.
#[derive(Clone, Debug)]
pub struct Equilibrium<T> {
    pub rotation: M3<T>,
    pub translation: V3<T>,
    pub fingertips: Vec<V3<T>>,
}

pub fn solve_equilibrium(sys: &SpringSystem) -> Result<EquilibriumState> {
    let eq = solve_equilibrium_generic::<f64>(&sys.contacts, &sys.targets, &sys.gains, &sys.r0, &sys.t0)?;
    let residual = sys.potential(&eq.rotation, &eq.translation);
    Ok(EquilibriumState {
        rotation: eq.rotation,
        translation: eq.translation,
        fingertips: eq.fingertips,
        residual,
    })
}

/// Fingertip positions for a given object pose.
pub fn fingertips_at_equilibrium(
    sys: &SpringSystem,
    r_eq: &[[f64; 3]; 3],
    t_eq: &[f64; 3],
) -> Vec<[f64; 3]> {
    let rel = geometry::mat_mul(r_eq, &transpose(&sys.r0));
    let shift = sub(t_eq, &mat_vec(&rel, &sys.t0));
    sys.contacts.iter().map(|p| add(&mat_vec(&rel, p), &shift)).collect()
}

/// Gain-weighted Kabsch fit generic over the scalar type.
pub fn solve_equilibrium_generic<T: Scalar>(
    contacts: &[V3<T>],
    targets: &[V3<T>],
    gains: &[T],
    r0: &[[f64; 3]; 3],
    t0: &[f64; 3],
) -> Result<Equilibrium<T>> {
    let (local, cp, co, h) = weighted_cross_covariance(contacts, targets, gains, r0, t0)?;
    let rotation = polar_rotation(&h)?;
    let translation = sub(&co, &mat_vec(&rotation, &cp));
    let fingertips = local.iter().map(|p| add(&mat_vec(&rotation, p), &translation)).collect();
    Ok(Equilibrium { rotation, translation, fingertips })
}

type Covariance<T> = (Vec<V3<T>>, V3<T>, V3<T>, M3<T>);

fn weighted_cross_covariance<T: Scalar>(
    contacts: &[V3<T>],
    targets: &[V3<T>],
    gains: &[T],
    r0: &[[f64; 3]; 3],
    t0: &[f64; 3],
) -> Result<Covariance<T>> {
    let m = contacts.len();
    if m == 0 || targets.len() != m || gains.len() != m {
        return Err(Error::InvalidArgument("contacts, targets and gains differ in length".into()));
    }
    let rt = v3_rows_t::<T>(r0);
    let t0c = v3c::<T>(*t0);
    let local: Vec<V3<T>> = contacts.iter().map(|p| mat_vec(&rt, &sub(p, &t0c))).collect();
    let total = gains.iter().fold(T::zero(), |a, k| a + *k);
    let mut cp = [T::zero(); 3];
    let mut co = [T::zero(); 3];
    for i in 0..m {
        cp = add(&cp, &scale(&local[i], gains[i]));
        co = add(&co, &scale(&targets[i], gains[i]));
    }
    let cp = scale(&cp, T::cst(1.0) / total);
    let co = scale(&co, T::cst(1.0) / total);
    let mut h = [[T::zero(); 3]; 3];
    for i in 0..m {
        let a = scale(&sub(&local[i], &cp), gains[i]);
        let b = sub(&targets[i], &co);
        for r in 0..3 {
            for c in 0..3 {
                h[r][c] = h[r][c] + a[r] * b[c];
            }
        }
    }
    Ok((local, cp, co, h))
}

fn v3_rows_t<T: Scalar>(r: &[[f64; 3]; 3]) -> M3<T> {
    geometry::m3c(&transpose(r))
}

/// Proper rotation maximising `tr(R H)`, with its derivative attached.
fn polar_rotation<T: Scalar>(h: &M3<T>) -> Result<M3<T>> {
    let hv = m3_vals(h);
    let r = polar_rotation_f64(&hv)?;
    let partials = polar_derivatives(&r, &hv);
    let mut out = [[T::zero(); 3]; 3];
    let hs: Vec<T> = h.iter().flat_map(|row| row.iter().copied()).collect();
    for a in 0..3 {
        for b in 0..3 {
            let parts: Vec<(T, f64)> = (0..9).map(|k| (hs[k], partials[k][a][b])).collect();
            out[a][b] = T::custom(r[a][b], &parts);
        }
    }
    Ok(out)
}

/// SVD-based fit with the determinant sign fix.
pub fn polar_rotation_f64(h: &[[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let hm = to_na(h);
    if !hm.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite cross-covariance".into()));
    }
    let svd = SVD::try_new(hm, true, true, f64::EPSILON, 500)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Numerical("SVD factors missing".into())),
    };
    let mut sv: Vec<(f64, usize)> = svd.singular_values.iter().cloned().zip(0..3).collect();
    sv.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let rank = sv.iter().filter(|(s, _)| *s > RANK_TOL * sv[0].0.max(f64::MIN_POSITIVE)).count();
    if sv[0].0 == 0.0 || rank < 2 {
        return Err(Error::DegenerateRotation { rank });
    }
    let mut v = vt.transpose();
    let d = (v * u.transpose()).determinant();
    if d < 0.0 {
        // flip the direction paired with the smallest singular value
        let smallest = sv[2].1;
        let col = -v.column(smallest);
        v.set_column(smallest, &col);
    }
    Ok(from_na(&(v * u.transpose())))
}

/// `∂R/∂H_cd` for each of the nine entries (row-major `c*3+d`).
///
/// Differentiating the optimality condition `R H = (R H)ᵀ` gives
/// `dR = [ω]× R` with `(tr Q · I − Q) ω = vee(Xᵀ − X)`, `Q = R H`, `X = R dH`.
fn polar_derivatives(r: &[[f64; 3]; 3], h: &[[f64; 3]; 3]) -> [[[f64; 3]; 3]; 9] {
    let rm = to_na(r);
    let q = rm * to_na(h);
    let q = 0.5 * (q + q.transpose());
    let m = Matrix3::identity() * q.trace() - q;
    let mut out = [[[0.0; 3]; 3]; 9];
    let inv = match m.try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => inv,
        _ => {
            log::debug!("polar derivative undefined; zeroed");
            return out;
        }
    };
    for c in 0..3 {
        for d in 0..3 {
            let mut dh = Matrix3::zeros();
            dh[(c, d)] = 1.0;
            let x = rm * dh;
            let s = x.transpose() - x;
            let rhs = nalgebra::Vector3::new(s[(2, 1)], s[(0, 2)], s[(1, 0)]);
            let w = inv * rhs;
            let dr = w.cross_matrix() * rm;
            out[c * 3 + d] = from_na(&dr);
        }
    }
    out
}

/// Rotation about `z` minimising the planar spring potential; contacts and
/// targets are taken in the xy-plane with the object frame at the origin.
pub fn solve_planar_equilibrium<T: Scalar>(
    contacts: &[[T; 2]],
    targets: &[[T; 2]],
    gains: &[T],
) -> Result<(T, [T; 2])> {
    let m = contacts.len();
    if m == 0 || targets.len() != m || gains.len() != m {
        return Err(Error::InvalidArgument("contacts, targets and gains differ in length".into()));
    }
    let total = gains.iter().fold(T::zero(), |a, k| a + *k);
    let mut cp = [T::zero(); 2];
    let mut co = [T::zero(); 2];
    for i in 0..m {
        for j in 0..2 {
            cp[j] = cp[j] + contacts[i][j] * gains[i];
            co[j] = co[j] + targets[i][j] * gains[i];
        }
    }
    for j in 0..2 {
        cp[j] = cp[j] / total;
        co[j] = co[j] / total;
    }
    let mut s = T::zero();
    let mut c = T::zero();
    for i in 0..m {
        let p = [contacts[i][0] - cp[0], contacts[i][1] - cp[1]];
        let o = [targets[i][0] - co[0], targets[i][1] - co[1]];
        s = s + gains[i] * (p[0] * o[1] - p[1] * o[0]);
        c = c + gains[i] * (p[0] * o[0] + p[1] * o[1]);
    }
    if s.value().hypot(c.value()) <= f64::MIN_POSITIVE {
        return Err(Error::DegenerateRotation { rank: 0 });
    }
    let theta = s.atan2(c);
    let (st, ct) = (theta.sin(), theta.cos());
    let t = [
        co[0] - (ct * cp[0] - st * cp[1]),
        co[1] - (st * cp[0] + ct * cp[1]),
    ];
    Ok((theta, t))
}

/// Spring-damper force `k (o − p) − 2√k ṗ`.
pub fn spring_force(target: &[f64; 3], position: &[f64; 3], velocity: &[f64; 3], gain: f64) -> [f64; 3] {
    let damping = 2.0 * gain.sqrt();
    let mut f = [0.0; 3];
    for i in 0..3 {
        f[i] = gain * (target[i] - position[i]) - damping * velocity[i];
    }
    f
}

/// Static spring force (zero velocity), generic.
pub fn static_spring_force<T: Scalar>(target: &V3<T>, position: &V3<T>, gain: T) -> V3<T> {
    scale(&sub(target, position), gain)
}

/// `1 / √(1 + μ²)`: cosine of the friction-cone half-angle.
pub fn cone_cosine(mu: f64) -> f64 {
    1.0 / (1.0 + mu * mu).sqrt()
}

/// Contact margin of a force against the outward normal.
pub fn contact_margin(force: &[f64; 3], outward_normal: &[f64; 3], mu: f64) -> Result<f64> {
    let len = norm(force);
    if !(len > 0.0) || !len.is_finite() {
        return Err(Error::UndefinedMargin);
    }
    Ok(-dot(force, outward_normal) / len - cone_cosine(mu))
}

/// Contact margin, generic; the force must be nonzero.
pub fn contact_margin_generic<T: Scalar>(force: &V3<T>, outward_normal: &V3<T>, mu: f64) -> T {
    let len = norm(force);
    -(dot(force, outward_normal) / len) - cone_cosine(mu)
}

/// Distance above `−1` at which the log branch hands over to the auxiliary one.
pub const AUX_SWITCH: f64 = 1e-4;
const AUX_FLOOR: f64 = 1e-12;

/// Per-margin energy: `−ln(ε + 1)` above the switch, auxiliary branch below.
///
/// The auxiliary branch is `−ln δ − ln((1 + s)/(1 + s_c))` where
/// `s = −f̂·n = ε + 1/√(1+μ²)` is the cosine between the force and the
/// inward normal and `s_c` its value at the switch. It joins the log branch
/// continuously, decreases in `ε` and stays finite down to `ε = −1 − 1/√(1+μ²)`.
pub fn margin_energy<T: Scalar>(eps: T, mu: f64) -> T {
    let switch = -1.0 + AUX_SWITCH;
    if eps.value() > switch {
        -(eps + 1.0).ln()
    } else {
        let c = cone_cosine(mu);
        let s = eps + c;
        let ratio = (s + 1.0) / (c + AUX_SWITCH);
        let ratio = ratio.max_c(AUX_FLOOR).min_c(1.0);
        -ratio.ln() - AUX_SWITCH.ln()
    }
}

/// `E_sp` summed over both evaluated states.
pub fn springgrasp_energy<T: Scalar>(margins_t0: &[T], margins_teq: &[T], mu: f64) -> T {
    margins_t0
        .iter()
        .chain(margins_teq)
        .fold(T::zero(), |acc, e| acc + margin_energy(*e, mu))
}

/// Spring forces at rest (zero velocity) for every finger, generic.
pub fn static_forces<T: Scalar>(targets: &[V3<T>], positions: &[V3<T>], gains: &[T]) -> Vec<V3<T>> {
    targets
        .iter()
        .zip(positions)
        .zip(gains)
        .map(|((o, p), k)| static_spring_force(o, p, *k))
        .collect()
}

/// Net torque of forces applied at `points` about `center`.
pub fn net_torque(points: &[[f64; 3]], forces: &[[f64; 3]], center: &[f64; 3]) -> [f64; 3] {
    points.iter().zip(forces).fold([0.0; 3], |acc, (p, f)| add(&acc, &cross(&sub(p, center), f)))
}

/// Net force.
pub fn net_force(forces: &[[f64; 3]]) -> [f64; 3] {
    forces.iter().fold([0.0; 3], |acc, f| add(&acc, f))
}

/// Weighted mean helper shared with the simulator.
pub fn weighted_centroid(points: &[[f64; 3]], weights: &[f64]) -> [f64; 3] {
    let total: f64 = weights.iter().sum();
    let s = points.iter().zip(weights).fold([0.0; 3], |acc, (p, w)| add(&acc, &scale_f(p, *w)));
    scale_f(&s, 1.0 / total)
}
