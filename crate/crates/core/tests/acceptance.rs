//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion outside `KNOWN_FAILURES` fails.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, SMatrix, SVector, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use qukf_core::dynamics::{
    self, allocate, build_config_matrix, compact_matrices, observer_derivative, system_derivative, wrench_estimate,
};
use qukf_core::estimation::{tangent, ObservationPoints, StateBlocks};
use qukf_core::perf;
use qukf_core::quat::{ominus_vec, oplus, quat_diff, quat_mul, Mat3};
use qukf_core::simulation::{convergence_time, CONVERGENCE_BAND};
use qukf_core::{
    compute_metrics, run_scenario, AugmentedState, BodyState, Channel, ControlInput, Discretization, Ekf,
    ErrorCovariance, Estimator, FilterConfig, ForceProfile, Measurement, ObserverState, Qukf, RotationVector,
    ScenarioConfig, SystemParams, TransitionModel, UnitQuaternion, Vec3, Wrench,
};

/// Criteria expected to fail; see the project notes for the analysis.
const KNOWN_FAILURES: &[u32] = &[8];

const CASES: usize = 10_000;
const QUAT_TOL: f64 = 1e-9;
const QUAT_BUDGET_S: f64 = 10.0;
const COMPACT_TOL: f64 = 1e-9;
const ALLOCATION_RESIDUAL_TOL: f64 = 1e-9;
const DECAY_RATE_REL_TOL: f64 = 0.01;
const LINEAR_TOL: f64 = 1e-9;
const LINEAR_STEPS: usize = 100;
const SEEDS: std::ops::RangeInclusive<u64> = 1..=20;
const SEED_BUDGET_S: f64 = 120.0;
const STEP_FORCE_N: f64 = 2.0;
const CONVERGENCE_LIMIT_S: f64 = 0.675;
const LATENCY_LIMIT_MS: f64 = 10.0;
const LATENCY_ITERATIONS: usize = 10_000;
const SWEEP_ITERATIONS: usize = 30;
const CUBIC_R2_MIN: f64 = 0.95;
const NORM_TOL: f64 = 1e-9;
const ASYMMETRY_TOL: f64 = 1e-9;
const MIN_EIGEN_TOL: f64 = -1e-9;
/// Two-sided 95% quantiles of χ² with 9 degrees of freedom.
const CHI2_9_LOW: f64 = 2.700389;
const CHI2_9_HIGH: f64 = 19.022768;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn random_quat(r: &mut ChaCha8Rng) -> UnitQuaternion {
    UnitQuaternion::new(normal(r), normal(r), normal(r), normal(r))
}

fn uniform_vec(r: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::new(r.random_range(-scale..scale), r.random_range(-scale..scale), r.random_range(-scale..scale))
}

/// Rotation vector uniform in the ball of radius `0.999 π`.
fn random_rotvec(r: &mut ChaCha8Rng) -> RotationVector {
    let dir = Vec3::new(normal(r), normal(r), normal(r)).normalize();
    RotationVector(dir * (0.999 * PI * r.random::<f64>().cbrt()))
}

fn c1_quaternion_algebra() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = [0.0f64; 4];
    for _ in 0..CASES {
        let (q1, q2) = (random_quat(&mut r), random_quat(&mut r));
        let hom = (quat_mul(&q1, &q2).to_rotation() - q1.to_rotation() * q2.to_rotation()).norm();
        let cover = (q1.negated().to_rotation() - q1.to_rotation()).norm().max(quat_diff(&q1, &q1.negated()).angle());
        let p = random_rotvec(&mut r);
        let moved = oplus(&q1, &p);
        let trip = ominus_vec(&moved, &p).distance_to(&q1).max((quat_diff(&moved, &q1).0 - p.0).norm());
        let rot = q1.to_rotation();
        let so3 = (rot * rot.transpose() - Mat3::identity()).norm().max((rot.determinant() - 1.0).abs());
        for (w, v) in worst.iter_mut().zip([hom, cover, trip, so3]) {
            *w = w.max(v);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|w| *w < QUAT_TOL) && secs < QUAT_BUDGET_S;
    outcome(
        pass,
        format!(
            "{CASES} cases each; max err homomorphism {:.1e}, double cover {:.1e}, oplus/ominus {:.1e}, SO(3) {:.1e}; {secs:.2} s",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn random_state(r: &mut ChaCha8Rng) -> BodyState {
    BodyState { q: random_quat(r), r: uniform_vec(r, 5.0), v: uniform_vec(r, 2.0), omega: uniform_vec(r, 1.5) }
}

fn c2_compact_model() -> Outcome {
    let p = SystemParams::default();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let s = random_state(&mut r);
        let u = ControlInput::new(r.random_range(0.0..70.0), uniform_vec(&mut r, 3.0));
        let tau = Wrench::new(uniform_vec(&mut r, 5.0), uniform_vec(&mut r, 1.0));
        let d = system_derivative(&s, &u, &tau, &p);
        let cm = compact_matrices(&s, &p);
        let acc = Vector6::new(d.v_dot.x, d.v_dot.y, d.v_dot.z, d.omega_dot.x, d.omega_dot.y, d.omega_dot.z);
        let recovered = cm.m * acc + cm.g + cm.w * u.as_vector();
        worst = worst.max((recovered - tau.as_vector()).norm());
    }
    outcome(worst < COMPACT_TOL, format!("{CASES} states; max |tau - tau_recovered| = {worst:.2e} (tol {COMPACT_TOL:.0e})"))
}

fn c3_allocation() -> Outcome {
    let mut r = rng(3);
    let mut p = SystemParams::default();
    for k in p.lambda_weights.iter_mut() {
        *k = r.random_range(0.5..2.0);
    }
    let c = build_config_matrix(&p);
    let cost = |u: &SVector<f64, 8>| u.iter().zip(&p.lambda_weights).map(|(x, k)| k * x * x).sum::<f64>().sqrt();
    // Null space of the configuration matrix from the full SVD of its transpose.
    let svd = DMatrix::from_column_slice(8, 4, c.transpose().as_slice()).svd(true, false);
    let basis = svd.u.expect("left singular vectors");
    let mut q = SMatrix::<f64, 8, 8>::from_fn(|i, j| if j < 4 { basis[(i, j)] } else { 0.0 });
    // Complete the orthonormal basis so the last four columns span ker C.
    for j in 4..8 {
        let mut v = SVector::<f64, 8>::from_fn(|_, _| normal(&mut r));
        for k in 0..j {
            let col = q.column(k).into_owned();
            v -= col * col.dot(&v);
        }
        q.set_column(j, &v.normalize());
    }
    let (mut worst_residual, mut losses, mut min_gap) = (0.0f64, 0usize, f64::INFINITY);
    for _ in 0..CASES {
        let demand = ControlInput::new(r.random_range(0.0..70.0), uniform_vec(&mut r, 3.0));
        let u = allocate(&demand, &p).expect("allocation");
        worst_residual = worst_residual.max((c * u - demand.as_vector()).norm());
        let null: SVector<f64, 8> = (4..8).map(|j| q.column(j).into_owned() * normal(&mut r)).sum();
        let alt = u + null * r.random_range(1e-3..10.0);
        let alt_residual = (c * alt - demand.as_vector()).norm();
        assert!(alt_residual < 1e-8, "alternative must be feasible");
        let gap = cost(&alt) - cost(&u);
        min_gap = min_gap.min(gap);
        if gap <= 0.0 {
            losses += 1;
        }
    }
    outcome(
        losses == 0 && worst_residual < ALLOCATION_RESIDUAL_TOL,
        format!(
            "{CASES} trials; optimum beaten {losses} times, smallest cost margin {min_gap:.2e}, max residual {worst_residual:.1e}"
        ),
    )
}

fn rk4_joint(s: &BodyState, obs: &ObserverState, u: &ControlInput, tau: &Wrench, p: &SystemParams, h: f64) -> (BodyState, ObserverState) {
    let deriv = |s: &BodyState, o: &ObserverState| (system_derivative(s, u, tau, p), observer_derivative(o, s, u, p));
    let shift = |s: &BodyState, o: &ObserverState, d: &(dynamics::BodyRates, Vector6<f64>), k: f64| {
        let q = UnitQuaternion::from_vector4(&(s.q.as_vector4() + d.0.q_dot * k));
        (
            BodyState { q, r: s.r + d.0.r_dot * k, v: s.v + d.0.v_dot * k, omega: s.omega + d.0.omega_dot * k },
            ObserverState { upsilon: o.upsilon + d.1 * k },
        )
    };
    let k1 = deriv(s, obs);
    let (s2, o2) = shift(s, obs, &k1, h / 2.0);
    let k2 = deriv(&s2, &o2);
    let (s3, o3) = shift(s, obs, &k2, h / 2.0);
    let k3 = deriv(&s3, &o3);
    let (s4, o4) = shift(s, obs, &k3, h);
    let k4 = deriv(&s4, &o4);
    let q = s.q.as_vector4() + (k1.0.q_dot + k2.0.q_dot * 2.0 + k3.0.q_dot * 2.0 + k4.0.q_dot) * (h / 6.0);
    let comb = |a: Vec3, b: Vec3, c: Vec3, d: Vec3| (a + b * 2.0 + c * 2.0 + d) * (h / 6.0);
    (
        BodyState {
            q: UnitQuaternion::from_vector4(&q),
            r: s.r + comb(k1.0.r_dot, k2.0.r_dot, k3.0.r_dot, k4.0.r_dot),
            v: s.v + comb(k1.0.v_dot, k2.0.v_dot, k3.0.v_dot, k4.0.v_dot),
            omega: s.omega + comb(k1.0.omega_dot, k2.0.omega_dot, k3.0.omega_dot, k4.0.omega_dot),
        },
        ObserverState { upsilon: obs.upsilon + (k1.1 + k2.1 * 2.0 + k3.1 * 2.0 + k4.1) * (h / 6.0) },
    )
}

fn c4_observer_decay() -> Outcome {
    let p = SystemParams::default();
    let tau = Wrench::new(Vec3::new(2.0, -1.0, 0.5), Vec3::new(0.05, 0.01, 0.2));
    let u = ControlInput::hover(&p);
    let (mut s, mut obs) = (BodyState::default(), ObserverState::zero());
    let h = 1e-5;
    let mut series: Vec<Vec<(f64, f64)>> = vec![Vec::new(); 6];
    let e0 = tau.as_vector() - wrench_estimate(&obs, &s, &p).as_vector();
    for k in 1..=2000 {
        (s, obs) = rk4_joint(&s, &obs, &u, &tau, &p, h);
        let e = tau.as_vector() - wrench_estimate(&obs, &s, &p).as_vector();
        for i in 0..6 {
            // Fit only while the error is well above round-off.
            if (e[i] / e0[i]).abs() > 1e-6 {
                series[i].push((k as f64 * h, (e[i] / e0[i]).abs().ln()));
            }
        }
    }
    let a = p.observer_gain();
    let mut worst = 0.0f64;
    let mut rates = Vec::new();
    for (i, pts) in series.iter().enumerate() {
        let n = pts.len() as f64;
        let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        let rel = (-slope / a[(i, i)] - 1.0).abs();
        worst = worst.max(rel);
        rates.push(format!("{:.4}", -slope));
    }
    outcome(
        worst < DECAY_RATE_REL_TOL,
        format!(
            "fitted rates [{}] 1/s vs A_ii [{:.4}, .., {:.4}]; worst rel err {:.2e}",
            rates.join(", "),
            a[(0, 0)],
            a[(4, 4)],
            worst
        ),
    )
}

/// Closed-form Kalman filter on `z = [r, v, Υ]` with attitude held at the
/// identity and zero body rate, where the process model is affine.
struct LinearKf {
    f: SMatrix<f64, 12, 12>,
    b: SVector<f64, 12>,
    q: SMatrix<f64, 12, 12>,
    r: f64,
    z: SVector<f64, 12>,
    p: SMatrix<f64, 12, 12>,
}

impl LinearKf {
    fn new(params: &SystemParams, cfg: &FilterConfig, thrust: f64, dt: f64, z: SVector<f64, 12>) -> Self {
        let inertia = [params.inertia[(0, 0)], params.inertia[(1, 1)], params.inertia[(2, 2)]];
        let gains = [params.mass, params.mass, params.mass, inertia[0], inertia[1], inertia[2]].map(|m| params.delta / m);
        let decay = gains.map(|a| (-a * dt).exp());
        let accel = thrust / params.mass - params.gravity;
        let mut f = SMatrix::<f64, 12, 12>::identity();
        let mut b = SVector::<f64, 12>::zeros();
        for i in 0..3 {
            f[(i, 3 + i)] = dt;
            f[(6 + i, 3 + i)] = -params.delta * (1.0 - decay[i]);
        }
        b[2] = 0.5 * dt * dt * accel;
        b[5] = dt * accel;
        for i in 0..6 {
            f[(6 + i, 6 + i)] = decay[i];
        }
        b[8] = (1.0 - decay[2]) * (params.mass * params.gravity - thrust);
        let n = &cfg.noise.process;
        let mut qd = [n.position; 12];
        qd[3..6].fill(n.velocity);
        qd[6..].fill(n.wrench);
        let q = SMatrix::from_diagonal(&SVector::from_column_slice(&qd)) * dt;
        let c = &cfg.initial_covariance;
        let mut pd = [c.position; 12];
        pd[3..6].fill(c.velocity);
        pd[6..].fill(c.wrench);
        Self { f, b, q, r: cfg.noise.measurement.position, z, p: SMatrix::from_diagonal(&SVector::from_column_slice(&pd)) }
    }

    fn step(&mut self, y: &Vec3) {
        let z = self.f * self.z + self.b;
        let p = self.f * self.p * self.f.transpose() + self.q;
        let h = SMatrix::<f64, 3, 12>::from_fn(|i, j| if i == j { 1.0 } else { 0.0 });
        let s = h * p * h.transpose() + nalgebra::Matrix3::identity() * self.r;
        let k = p * h.transpose() * s.try_inverse().expect("innovation covariance");
        self.z = z + k * (y - h * z);
        self.p = (SMatrix::<f64, 12, 12>::identity() - k * h) * p * (SMatrix::<f64, 12, 12>::identity() - k * h).transpose()
            + k * k.transpose() * self.r;
    }
}

/// Runs both filters beside the linear oracle and returns the largest
/// state or covariance deviation of each.
fn linear_run(cfg: &FilterConfig) -> Result<(f64, f64), String> {
    // Finite-difference rounding in the EKF grows with |x| / h, so the
    // subsystem runs at a small operating point: zero gravity, a weak thrust
    // and states of order 1e-2.
    let params = SystemParams { gravity: 0.0, ..SystemParams::default() };
    let dt = 0.01;
    let thrust = 0.05;
    let u = ControlInput::new(thrust, Vec3::zeros());
    let model = TransitionModel::new(params.clone(), dt, Discretization::Structured).map_err(|e| e.to_string())?;

    let x0 = AugmentedState {
        r: Vec3::new(0.01, -0.02, 0.03),
        v: Vec3::new(0.005, 0.0, -0.002),
        upsilon: Vector6::new(0.03, -0.01, 0.02, 0.001, 0.0, -0.002),
        ..AugmentedState::default()
    };
    let mut z0 = SVector::<f64, 12>::zeros();
    z0.fixed_rows_mut::<3>(0).copy_from(&x0.r);
    z0.fixed_rows_mut::<3>(3).copy_from(&x0.v);
    z0.fixed_rows_mut::<6>(6).copy_from(&x0.upsilon);
    let mut oracle = LinearKf::new(&params, cfg, thrust, dt, z0);

    let p0 = cfg.initial_matrix();
    let mut qukf = Qukf::with_state(model.clone(), cfg, x0.clone(), p0.clone()).map_err(|e| e.to_string())?;
    let mut lifted_p0 = DMatrix::zeros(dynamics::layout::DIM, dynamics::layout::DIM);
    lifted_p0
        .view_mut((dynamics::layout::R, dynamics::layout::R), (15, 15))
        .copy_from(&p0.matrix().view((tangent::R, tangent::R), (15, 15)));
    let mut ekf = Ekf::with_state(model, cfg, &x0, lifted_p0);

    let qukf_idx: Vec<usize> = (tangent::R..tangent::R + 6).chain(tangent::UPSILON..tangent::UPSILON + 6).collect();
    let ekf_idx: Vec<usize> =
        (dynamics::layout::R..dynamics::layout::R + 6).chain(dynamics::layout::UPSILON..dynamics::layout::UPSILON + 6).collect();
    let compare = |x: &AugmentedState, p: &DMatrix<f64>, idx: &[usize], oracle: &LinearKf| -> f64 {
        let mut z = SVector::<f64, 12>::zeros();
        z.fixed_rows_mut::<3>(0).copy_from(&x.r);
        z.fixed_rows_mut::<3>(3).copy_from(&x.v);
        z.fixed_rows_mut::<6>(6).copy_from(&x.upsilon);
        let pz = SMatrix::<f64, 12, 12>::from_fn(|i, j| p[(idx[i], idx[j])]);
        (z - oracle.z).amax().max((pz - oracle.p).amax())
    };

    let mut r = rng(5);
    let (mut worst_q, mut worst_e) = (0.0f64, 0.0f64);
    for k in 0..LINEAR_STEPS {
        let y = Vec3::new(0.01, -0.02, 0.03 + 5e-5 * k as f64) + Vec3::new(normal(&mut r), normal(&mut r), normal(&mut r)) * 1e-3;
        let meas = Measurement::new(UnitQuaternion::identity(), y, Vec3::zeros());
        oracle.step(&y);
        qukf.step(&u, &meas).map_err(|e| format!("qukf at step {k}: {e}"))?;
        ekf.step(&u, &meas).map_err(|e| format!("ekf at step {k}: {e}"))?;
        worst_q = worst_q.max(compare(&qukf.estimate(), qukf.error_covariance().matrix(), &qukf_idx, &oracle));
        worst_e = worst_e.max(compare(&ekf.estimate(), ekf.lifted_covariance(), &ekf_idx, &oracle));
    }
    Ok((worst_q, worst_e))
}

fn c5_linear_equivalence() -> Outcome {
    // Attitude and body rate carry no uncertainty, which leaves an affine
    // model on [r, v, Υ]. Scaling P0, Q and R together leaves the gain
    // unchanged; a factor of 1e-2 keeps the wrench covariance near one so the
    // finite-difference rounding in the EKF stays below the tolerance.
    const SCALE: f64 = 1e-2;
    let mut base = FilterConfig::default();
    let scale = |b: StateBlocks| StateBlocks {
        rotation: 0.0,
        angular_velocity: 0.0,
        position: b.position * SCALE,
        velocity: b.velocity * SCALE,
        wrench: b.wrench * SCALE,
        dummy: b.dummy * SCALE,
    };
    base.noise.process = scale(base.noise.process);
    base.initial_covariance = scale(base.initial_covariance);
    base.noise.measurement = base.noise.measurement.scaled(SCALE);
    let noiseless = FilterConfig {
        noise: qukf_core::estimation::NoiseConfig {
            process: StateBlocks { rotation: 0.0, position: 0.0, velocity: 0.0, angular_velocity: 0.0, wrench: 0.0, dummy: 0.0 },
            ..base.noise
        },
        ..base.clone()
    };
    let redrawn = FilterConfig { observation_points: ObservationPoints::Redrawn, ..base.clone() };
    let runs = [("default, Q = 0", &noiseless, true), ("redrawn points, Q > 0", &redrawn, true), ("default, Q > 0", &base, false)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, cfg, asserted) in runs {
        match linear_run(cfg) {
            Ok((q, e)) => {
                if asserted {
                    pass &= q < LINEAR_TOL && e < LINEAR_TOL;
                }
                parts.push(format!("{label}: QUKF {q:.1e}, EKF {e:.1e}{}", if asserted { "" } else { " (reported only)" }));
            }
            Err(msg) => {
                pass = false;
                parts.push(format!("{label}: {msg}"));
            }
        }
    }
    outcome(pass, format!("{LINEAR_STEPS} steps, max deviation from the linear KF (tol {LINEAR_TOL:.0e}); {}", parts.join("; ")))
}

fn c6_stiffness() -> Outcome {
    let p = SystemParams::default();
    let dt = 0.01;
    let a_pitch = p.observer_gain()[(4, 4)];
    let model = TransitionModel::new(p.clone(), dt, Discretization::Structured).expect("model");
    let s = BodyState::default();
    let u = ControlInput::hover(&p);
    let start = ObserverState { upsilon: Vector6::new(0.0, 0.0, 0.0, 0.0, 1.0, 0.0) };
    let (mut exp_obs, mut euler) = (start, start);
    let (mut exp_max, mut euler_max) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        exp_obs = model.propagate(&s, &exp_obs, &u).expect("propagate").1;
        euler = ObserverState { upsilon: euler.upsilon + observer_derivative(&euler, &s, &u, &p) * dt };
        exp_max = exp_max.max(exp_obs.upsilon.amax());
        euler_max = euler_max.max(euler.upsilon.amax());
    }
    let euler_factor = 1.0 - a_pitch * dt;
    let pass = (a_pitch - 1180.33).abs() < 0.01 && exp_max <= 1.0 && euler_max > 1e50;
    outcome(
        pass,
        format!(
            "A_ii = {a_pitch:.2} 1/s; exponential max |Y| over 100 steps {exp_max:.2e}; Euler factor {euler_factor:.4}, max |Y| {euler_max:.2e}"
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn c7_directional() -> Outcome {
    let start = Instant::now();
    let channels = [Channel::P, Channel::Q, Channel::R, Channel::Mz];
    let mut qukf: Vec<Vec<f64>> = vec![Vec::new(); channels.len()];
    let mut ekf: Vec<Vec<f64>> = vec![Vec::new(); channels.len()];
    for seed in SEEDS {
        let mut cfg = ScenarioConfig::default();
        cfg.run.seed = seed;
        let out = match run_scenario(&cfg) {
            Ok(o) => o,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        let m = compute_metrics(&out.records, cfg.run.metric_window_start);
        for (i, c) in channels.iter().enumerate() {
            let cm = m.channel(*c).expect("channel");
            qukf[i].push(cm.qukf_rmse.expect("qukf"));
            ekf[i].push(cm.ekf_rmse.expect("ekf"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut pass = secs < SEED_BUDGET_S;
    let mut parts = Vec::new();
    for (i, c) in channels.iter().enumerate() {
        let (mq, me) = (median(qukf[i].clone()), median(ekf[i].clone()));
        pass &= mq <= me;
        parts.push(format!("{} {:+.2}% ({:.4e} vs {:.4e})", c.label(), (me - mq) / me * 100.0, mq, me));
    }
    outcome(pass, format!("{} seeds, median QUKF vs EKF: {}; {secs:.1} s", SEEDS.count(), parts.join(", ")))
}

fn c8_convergence() -> Outcome {
    let onset = 1.0;
    let mut cfg = ScenarioConfig::default();
    cfg.run.duration = 6.0;
    cfg.run.metric_window_start = onset;
    cfg.run.noise_scale = 0.0;
    cfg.profile = ForceProfile::step(onset, 60.0, Vec3::new(STEP_FORCE_N, 0.0, 0.0));
    let out = match run_scenario(&cfg) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let window: Vec<_> = out.records.iter().filter(|r| r.t >= onset).collect();
    let times: Vec<f64> = window.iter().map(|r| r.t).collect();
    let mut parts = Vec::new();
    let mut qukf_tc = None;
    for (name, pick) in [("QUKF", 0usize), ("EKF", 1)] {
        let errors: Vec<f64> = window
            .iter()
            .map(|r| {
                let e = if pick == 0 { r.qukf.as_ref() } else { r.ekf.as_ref() };
                e.expect("estimate").wrench.force.x - r.truth_wrench.force.x
            })
            .collect();
        let tc = convergence_time(&times, &errors, CONVERGENCE_BAND);
        let last = window.last().expect("samples");
        let final_est = if pick == 0 { last.qukf.as_ref() } else { last.ekf.as_ref() }.expect("estimate").wrench.force.x;
        if pick == 0 {
            qukf_tc = tc;
        }
        parts.push(format!(
            "{name} t_c {} , F_x estimate at {:.1} s = {final_est:.3} N",
            tc.map_or("none".to_string(), |t| format!("{t:.3} s")),
            last.t
        ));
    }
    outcome(
        qukf_tc.is_some_and(|t| t <= CONVERGENCE_LIMIT_S),
        format!("{STEP_FORCE_N} N step, noise-free sensors, 5% band; {} (limit {CONVERGENCE_LIMIT_S} s)", parts.join("; ")),
    )
}

fn c9_performance() -> Outcome {
    let cfg = ScenarioConfig::default();
    let run = || -> Result<(perf::LatencyStats, perf::CubicFit), qukf_core::SimulationError> {
        let inputs = perf::record_inputs(&cfg, 1000)?;
        let latency = perf::qukf_latency(&cfg, &inputs, LATENCY_ITERATIONS, 0)?;
        let sweep = perf::scaling_sweep(&cfg, &inputs, &perf::DEFAULT_PADDINGS, SWEEP_ITERATIONS)?;
        Ok((latency, perf::fit_cubic(&sweep)))
    };
    match run() {
        Ok((lat, fit)) => outcome(
            lat.mean_ms < LATENCY_LIMIT_MS && fit.r_squared > CUBIC_R2_MIN,
            format!(
                "qukf_step mean {:.4} ms, p99 {:.4} ms over {} updates; cubic fit R^2 {:.4} (log-log slope {:.2}) for N = 19..120",
                lat.mean_ms, lat.p99_ms, lat.iterations, fit.r_squared, fit.loglog_slope
            ),
        ),
        Err(e) => outcome(false, format!("bench failed: {e}")),
    }
}

/// Wilson–Hilferty approximation of the χ² quantile.
fn chi2_quantile(dof: f64, z: f64) -> f64 {
    let c = 2.0 / (9.0 * dof);
    dof * (1.0 - c + z * c.sqrt()).powi(3)
}

fn c10_health() -> Outcome {
    let cfg = ScenarioConfig::default();
    let steps = cfg.run.steps();
    let inputs = match perf::record_inputs(&cfg, steps) {
        Ok(i) => i,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let model = TransitionModel::new(cfg.system_params(), cfg.run.dt, cfg.filter.discretization).expect("model");
    let mut qukf = Qukf::new(model.clone(), &cfg.filter, &inputs.first).expect("qukf");
    let mut ekf = Ekf::new(model, &cfg.filter, &inputs.first);
    let mut filters: [(&str, &mut dyn Estimator); 2] = [("QUKF", &mut qukf), ("EKF", &mut ekf)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, f) in filters.iter_mut() {
        let (mut norm_err, mut asym, mut min_eig) = (0.0f64, 0.0f64, f64::INFINITY);
        let mut nis = Vec::with_capacity(steps);
        for (k, (u, y)) in inputs.steps.iter().enumerate() {
            match f.step(u, y) {
                Ok(rep) => nis.push(rep.nis),
                Err(e) => return outcome(false, format!("{name} failed at step {k}: {e}")),
            }
            norm_err = norm_err.max((f.estimate().q.norm() - 1.0).abs());
            let p = f.covariance();
            asym = asym.max((&p - p.transpose()).norm());
            min_eig = min_eig.min(ErrorCovariance::new(p).min_eigenvalue());
        }
        let n = nis.len() as f64;
        let mean = nis.iter().sum::<f64>() / n;
        let inside = nis.iter().filter(|v| (CHI2_9_LOW..=CHI2_9_HIGH).contains(*v)).count() as f64 / n;
        let (lo, hi) = (chi2_quantile(9.0 * n, -1.959964) / n, chi2_quantile(9.0 * n, 1.959964) / n);
        let ok = norm_err < NORM_TOL && asym < ASYMMETRY_TOL && min_eig > MIN_EIGEN_TOL && (CHI2_9_LOW..=CHI2_9_HIGH).contains(&mean);
        pass &= ok;
        parts.push(format!(
            "{name}: max |‖q‖-1| {norm_err:.1e}, max asym {asym:.1e}, min eig {min_eig:.1e}, mean NIS {mean:.3} \
             ({:.1}% of steps in [{CHI2_9_LOW:.3}, {CHI2_9_HIGH:.3}]; pooled-sum band [{lo:.3}, {hi:.3}])",
            inside * 100.0
        ));
    }
    outcome(pass, format!("{} steps; {}", inputs.steps.len(), parts.join("; ")))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "quaternion algebra", c1_quaternion_algebra),
        (2, "compact-model consistency", c2_compact_model),
        (3, "allocation optimality", c3_allocation),
        (4, "observer decay rate", c4_observer_decay),
        (5, "linear-equivalence oracle", c5_linear_equivalence),
        (6, "stiffness regression", c6_stiffness),
        (7, "directional RMSE ordering", c7_directional),
        (8, "wrench convergence time", c8_convergence),
        (9, "performance", c9_performance),
        (10, "filter health", c10_health),
    ];
    let mut unexpected = Vec::new();
    for (id, name, check) in criteria {
        let o = check();
        let known = KNOWN_FAILURES.contains(&id);
        let tag = match (o.pass, known) {
            (true, false) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
            (true, true) => "PASS (listed as known failure)",
        };
        println!("criterion {id:>2} {name}: {tag} | {}", o.detail);
        if o.pass == known {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
