//! Rigid-body quadrotor simulator.
//!
//! A single floating body driven by four rotor thrusts in a "+" layout:
//! rotors 1 and 3 sit on the body x axis at `+l`/`-l`, rotors 2 and 4 on the
//! body y axis. Rotors 1 and 3 spin opposite to rotors 2 and 4, so yaw
//! authority comes from the reaction torque `kappa * (T1 - T2 + T3 - T4)`.
//! With that convention the rotor positions are `r1 = (l,0,0)`,
//! `r2 = (0,l,0)`, `r3 = (-l,0,0)`, `r4 = (0,-l,0)` and the torque from the
//! thrust forces is `tau = sum r_i x (0,0,T_i)`, giving
//! `tau_x = l (T2 - T4)` and `tau_y = l (T3 - T1)`.
//!
//! Integration is semi-implicit Euler for the translational part and the
//! SO(3) exponential map for the rotation, at a fixed 0.01 s step.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::so3;
use crate::{Error, Result};

/// Full rigid-body state.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadState {
    /// Position, world frame, meters.
    pub position: Vector3<f64>,
    /// Body-to-world rotation matrix.
    pub rotation: Matrix3<f64>,
    /// Linear velocity, world frame, m/s.
    pub velocity: Vector3<f64>,
    /// Angular velocity, body frame, rad/s.
    pub angular_velocity: Vector3<f64>,
}

impl QuadState {
    /// At rest at the origin with identity attitude.
    pub fn hover() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
            velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.angular_velocity.iter().all(|v| v.is_finite())
    }
}

/// Physical and integration parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadParams {
    /// Vehicle mass, kg.
    pub mass: f64,
    /// Diagonal inertia (Ixx, Iyy, Izz), kg m^2.
    pub inertia: [f64; 3],
    /// Rotor arm length, m.
    pub arm_length: f64,
    /// Yaw reaction torque per unit thrust, m.
    pub kappa: f64,
    /// Gravitational acceleration, m/s^2.
    pub gravity: f64,
    /// Integration timestep, s.
    pub dt: f64,
    /// Angular rate above which a step is reported as divergent, rad/s.
    pub omega_cap: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 0.665,
            inertia: [0.007, 0.007, 0.012],
            arm_length: 0.17,
            kappa: 0.016,
            gravity: 9.81,
            dt: 0.01,
            omega_cap: 100.0,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mass > 0.0
            && self.inertia.iter().all(|&i| i > 0.0)
            && self.arm_length > 0.0
            && self.kappa >= 0.0
            && self.dt > 0.0
            && self.omega_cap > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid quad parameters: {self:?}")))
        }
    }

    /// Per-rotor thrust that exactly balances gravity at identity attitude.
    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity / 4.0
    }

    /// Linear map from rotor thrusts to (total body-z force, body torque):
    /// rows are force, tau_x, tau_y, tau_z.
    pub fn allocation_matrix(&self) -> Matrix4<f64> {
        let l = self.arm_length;
        let k = self.kappa;
        Matrix4::new(
            1.0, 1.0, 1.0, 1.0, //
            0.0, l, 0.0, -l, //
            -l, 0.0, l, 0.0, //
            k, -k, k, -k,
        )
    }

    /// Rotor thrusts realizing a desired (force, torque) wrench. The
    /// allocation map is invertible for `l > 0`, `kappa > 0`.
    pub fn thrusts_for_wrench(&self, force: f64, torque: &Vector3<f64>) -> Vector4<f64> {
        let a = self.allocation_matrix();
        let inv = a.try_inverse().expect("allocation map invertible");
        inv * Vector4::new(force, torque.x, torque.y, torque.z)
    }
}

/// Four rotor thrusts, newtons, along body +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThrustCommand(pub Vector4<f64>);

/// Componentwise clamp to non-negative thrust; the propellers cannot pull.
pub fn threshold(raw: &Vector4<f64>) -> Result<ThrustCommand> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!("non-finite thrust {raw:?}")));
    }
    Ok(ThrustCommand(raw.map(|v| v.max(0.0))))
}

/// Net body-z force and body torque produced by a thrust command.
pub fn allocate(t: &ThrustCommand, params: &QuadParams) -> (f64, Vector3<f64>) {
    let w = params.allocation_matrix() * t.0;
    (w[0], Vector3::new(w[1], w[2], w[3]))
}

/// PD attitude gains, applied per body axis.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdGains {
    pub kp: [f64; 3],
    pub kd: [f64; 3],
}

impl Default for PdGains {
    fn default() -> Self {
        // z gains one sixth of the others.
        Self {
            kp: [-0.2, -0.2, -0.2 / 6.0],
            kd: [-0.06, -0.06, -0.06 / 6.0],
        }
    }
}

/// Attitude PD: `tau = kp .* (R^T q) + kd .* omega_body` with `q` the Euler
/// vector of the attitude. Works across all orientations, unlike PD on
/// Euler angles, and commands torque along the minimum rotation path.
pub fn pd_attitude(state: &QuadState, gains: &PdGains) -> Vector3<f64> {
    let q = so3::log(&state.rotation);
    let q_body = state.rotation.transpose() * q;
    // Angular velocity is stored in the body frame already, which equals
    // R^T omega_world.
    Vector3::new(
        gains.kp[0] * q_body.x + gains.kd[0] * state.angular_velocity.x,
        gains.kp[1] * q_body.y + gains.kd[1] * state.angular_velocity.y,
        gains.kp[2] * q_body.z + gains.kd[2] * state.angular_velocity.z,
    )
}

/// One semi-implicit Euler step.
///
/// Linear part: `v' = v + a dt`, `p' = p + v' dt`. Angular part in the body
/// frame: `omega' = omega + I^-1 (tau - omega x I omega) dt`, then
/// `R' = R Exp(omega' dt)`. The rotation is re-orthonormalized only when
/// drift exceeds 1e-9.
pub fn step(state: &QuadState, thrust: &ThrustCommand, params: &QuadParams) -> Result<QuadState> {
    let (force, torque) = allocate(thrust, params);
    let world_force = state.rotation * Vector3::new(0.0, 0.0, force);
    let accel = world_force / params.mass + Vector3::new(0.0, 0.0, -params.gravity);

    let velocity = state.velocity + accel * params.dt;
    let position = state.position + velocity * params.dt;

    let inertia = Vector3::new(params.inertia[0], params.inertia[1], params.inertia[2]);
    let i_omega = inertia.component_mul(&state.angular_velocity);
    let omega_dot =
        (torque - state.angular_velocity.cross(&i_omega)).component_div(&inertia);
    let angular_velocity = state.angular_velocity + omega_dot * params.dt;
    let mut rotation = state.rotation * so3::exp(&(angular_velocity * params.dt));
    if so3::orthonormality_drift(&rotation) > 1e-9 {
        rotation = so3::reorthonormalize(&rotation);
    }

    let next = QuadState {
        position,
        rotation,
        velocity,
        angular_velocity,
    };
    if !next.is_finite() {
        return Err(Error::Divergence("state became non-finite".into()));
    }
    if next.angular_velocity.norm() > params.omega_cap {
        return Err(Error::Divergence(format!(
            "angular rate {:.1} rad/s above cap {}",
            next.angular_velocity.norm(),
            params.omega_cap
        )));
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_clamps_negatives() {
        let t = threshold(&Vector4::new(1.0, -1.0, 0.5, 0.0)).unwrap();
        assert_eq!(t.0, Vector4::new(1.0, 0.0, 0.5, 0.0));
        let all_neg = threshold(&Vector4::new(-1.0, -2.0, -0.1, -0.5)).unwrap();
        assert_eq!(all_neg.0, Vector4::zeros());
        let pos = Vector4::new(0.3, 0.1, 2.0, 0.7);
        assert_eq!(threshold(&pos).unwrap().0, pos);
    }

    #[test]
    fn threshold_rejects_non_finite() {
        let res = threshold(&Vector4::new(f64::NAN, 0.0, 0.0, 0.0));
        assert!(matches!(res, Err(Error::Divergence(_))));
    }

    #[test]
    fn symmetric_thrust_produces_no_torque() {
        let params = QuadParams::default();
        let (f, tau) = allocate(&ThrustCommand(Vector4::repeat(1.25)), &params);
        assert_abs_diff_eq!(f, 5.0);
        assert!(tau.norm() < 1e-15);
    }

    #[test]
    fn hover_thrust_matches_weight() {
        let params = QuadParams::default();
        let c = params.hover_thrust();
        assert_abs_diff_eq!(c, 0.665 * 9.81 / 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c, 1.6309125, epsilon = 1e-6);
        let (f, _) = allocate(&ThrustCommand(Vector4::repeat(c)), &params);
        assert_abs_diff_eq!(f, 6.523650, epsilon = 1e-6);
    }

    /// Torque oracle: cross-product sum over explicit rotor positions.
    fn torque_oracle(t: &Vector4<f64>, params: &QuadParams) -> Vector3<f64> {
        let l = params.arm_length;
        let rotors = [
            Vector3::new(l, 0.0, 0.0),
            Vector3::new(0.0, l, 0.0),
            Vector3::new(-l, 0.0, 0.0),
            Vector3::new(0.0, -l, 0.0),
        ];
        let spins = [1.0, -1.0, 1.0, -1.0];
        let mut tau = Vector3::zeros();
        for i in 0..4 {
            tau += rotors[i].cross(&Vector3::new(0.0, 0.0, t[i]));
            tau.z += params.kappa * spins[i] * t[i];
        }
        tau
    }

    #[test]
    fn differential_thrust_torque_matches_cross_product_sum() {
        let params = QuadParams::default();
        let (c, d) = (1.6, 0.3);
        let t = Vector4::new(c + d, c, c - d, c);
        let (_, tau) = allocate(&ThrustCommand(t), &params);
        let expect = torque_oracle(&t, &params);
        assert!((tau - expect).norm() < 1e-12);
        assert_abs_diff_eq!(tau.x, 0.0);
        assert_abs_diff_eq!(tau.y, -2.0 * params.arm_length * d, epsilon = 1e-12);
    }

    #[test]
    fn allocate_matches_oracle_on_random_commands() {
        let params = QuadParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let t = Vector4::from_fn(|_, _| rng.gen_range(0.0..4.0));
            let (f, tau) = allocate(&ThrustCommand(t), &params);
            assert_abs_diff_eq!(f, t.sum(), epsilon = 1e-12);
            assert!((tau - torque_oracle(&t, &params)).norm() < 1e-12);
        }
    }

    #[test]
    fn allocation_roundtrip() {
        let params = QuadParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = Vector4::from_fn(|_, _| rng.gen_range(0.1..4.0));
            let (f, tau) = allocate(&ThrustCommand(t), &params);
            let back = params.thrusts_for_wrench(f, &tau);
            assert!((back - t).norm() < 1e-10);
        }
    }

    #[test]
    fn hover_is_a_fixed_point() {
        let params = QuadParams::default();
        let mut state = QuadState::hover();
        let cmd = ThrustCommand(Vector4::repeat(params.hover_thrust()));
        for _ in 0..10 {
            state = step(&state, &cmd, &params).unwrap();
        }
        assert!(state.position.norm() < 1e-12);
        assert!(state.velocity.norm() < 1e-12);
        assert!(state.angular_velocity.norm() < 1e-12);
    }

    #[test]
    fn free_fall_first_step() {
        let params = QuadParams::default();
        let next = step(
            &QuadState::hover(),
            &ThrustCommand(Vector4::zeros()),
            &params,
        )
        .unwrap();
        assert_abs_diff_eq!(next.velocity.z, -0.0981, epsilon = 1e-12);
        assert_abs_diff_eq!(next.position.z, -0.000981, epsilon = 1e-12);
    }

    #[test]
    fn ballistic_closed_form() {
        // Semi-implicit Euler closed form with zero thrust:
        // v_n = v0 - g n dt, p_n = p0 + sum v_k dt.
        let params = QuadParams::default();
        let mut state = QuadState::hover();
        state.velocity = Vector3::new(0.4, -0.2, 1.0);
        let v0 = state.velocity;
        let p0 = state.position;
        let cmd = ThrustCommand(Vector4::zeros());
        let mut s = state.clone();
        for n in 1..=100 {
            s = step(&s, &cmd, &params).unwrap();
            let nf = n as f64;
            let g = Vector3::new(0.0, 0.0, -params.gravity);
            let v_expect = v0 + g * nf * params.dt;
            let p_expect =
                p0 + v0 * nf * params.dt + g * params.dt * params.dt * (nf * (nf + 1.0) / 2.0);
            assert!((s.velocity - v_expect).norm() < 1e-10, "step {n}");
            assert!((s.position - p_expect).norm() < 1e-10, "step {n}");
        }
    }

    #[test]
    fn pure_yaw_spin_rotates_about_z() {
        let params = QuadParams::default();
        // tau_z only: equal force, alternating differential.
        let c = params.hover_thrust();
        let d = 0.5;
        let t = Vector4::new(c + d, c - d, c + d, c - d);
        let cmd = threshold(&t).unwrap();
        let state = QuadState::hover();
        let next = step(&state, &cmd, &params).unwrap();
        // Diagonal inertia, torque about z only from rest: omega' stays on z.
        assert_abs_diff_eq!(next.angular_velocity.x, 0.0);
        assert_abs_diff_eq!(next.angular_velocity.y, 0.0);
        let tau_z = params.kappa * 4.0 * d;
        let wz = tau_z / params.inertia[2] * params.dt;
        assert_abs_diff_eq!(next.angular_velocity.z, wz, epsilon = 1e-12);
        let expect = so3::exp(&Vector3::new(0.0, 0.0, wz * params.dt));
        assert!((next.rotation - expect).norm() < 1e-12);
    }

    #[test]
    fn omega_cap_reports_divergence() {
        let params = QuadParams::default();
        let mut state = QuadState::hover();
        state.angular_velocity = Vector3::new(0.0, 0.0, 99.999);
        let c = params.hover_thrust();
        let t = Vector4::new(c + 2.0, c - 2.0, c + 2.0, c - 2.0);
        let mut res = Ok(state);
        for _ in 0..200 {
            let s = match &res {
                Ok(s) => s.clone(),
                Err(_) => break,
            };
            res = step(&s, &threshold(&t).unwrap(), &params);
        }
        assert!(matches!(res, Err(Error::Divergence(_))));
    }

    #[test]
    fn orthonormality_drift_stays_bounded() {
        let params = QuadParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state = QuadState::hover();
        for _ in 0..10_000 {
            let t = Vector4::from_fn(|_, _| rng.gen_range(1.2..2.1));
            state = step(&state, &threshold(&t).unwrap(), &params).unwrap();
            assert!(so3::orthonormality_drift(&state.rotation) <= 1e-9);
        }
    }

    #[test]
    fn energy_changes_slowly_without_thrust() {
        let params = QuadParams::default();
        let mut state = QuadState::hover();
        state.velocity = Vector3::new(1.0, 0.0, 2.0);
        let energy = |s: &QuadState| {
            0.5 * params.mass * s.velocity.norm_squared()
                + params.mass * params.gravity * s.position.z
        };
        let cmd = ThrustCommand(Vector4::zeros());
        let mut prev = energy(&state);
        for _ in 0..100 {
            state = step(&state, &cmd, &params).unwrap();
            let e = energy(&state);
            // Semi-implicit Euler gains m g^2 dt^2 / 2 per step here.
            let bound = params.mass * params.gravity * params.gravity * params.dt * params.dt;
            assert!((e - prev).abs() <= bound);
            prev = e;
        }
    }

    #[test]
    fn pd_zero_at_equilibrium() {
        let tau = pd_attitude(&QuadState::hover(), &PdGains::default());
        assert_eq!(tau, Vector3::zeros());
    }

    #[test]
    fn pd_on_quarter_roll() {
        use std::f64::consts::PI;
        let mut state = QuadState::hover();
        state.rotation = so3::exp(&Vector3::new(PI / 2.0, 0.0, 0.0));
        let tau = pd_attitude(&state, &PdGains::default());
        assert_abs_diff_eq!(tau.x, -0.2 * PI / 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(tau.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tau.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pd_matches_independent_log_map_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let mut state = QuadState::hover();
            state.rotation = so3::exp(&axis);
            state.angular_velocity = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let gains = PdGains::default();
            let tau = pd_attitude(&state, &gains);
            let q_body = state.rotation.transpose() * so3::log(&state.rotation);
            for i in 0..3 {
                let expect = gains.kp[i] * q_body[i] + gains.kd[i] * state.angular_velocity[i];
                assert_abs_diff_eq!(tau[i], expect, epsilon = 1e-12);
            }
        }
    }
}
