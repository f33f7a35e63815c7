//! Single scattering events.
//!
//! A particle enters the scattering ball with velocity `v` at
//! `q(0) = b - e/2` (`e = v/|v|`, `b . v = 0`) and moves under
//! `q'' = -lambda grad V(q, omega t + phi)` until it leaves the ball again.
//!
//! The bump potential is radial, so the force is central and the motion stays
//! in the plane spanned by `e` and `b`. Collisions are integrated in that plane
//! and embedded back into `R^d`. The integrated unknowns are the deviations
//! from free flight, `y = q - q(0) - v t` and `w = q' - v`, so the momentum
//! transfer `R = w(exit)` is resolved to the integrator tolerance even when
//! `|R| << |v|`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{self, Control, Dopri5Config, OdeSystem, Step, Termination};
use crate::potential::{norm2, PotentialSpec, SUPPORT_RADIUS};

/// Collisions lasting longer than this many chord-crossing times `1/|v|` are
/// declared trapped.
pub const TIME_CAP_CROSSINGS: f64 = 64.0;

/// Multiplier in the no-trapping speed threshold `12 |lambda| sup|grad V|`.
pub const TRAPPING_FACTOR: f64 = 12.0;

/// Incoming state and scatterer parameters `(v, b, phi, lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionInput {
    pub v: Vec<f64>,
    pub b: Vec<f64>,
    pub phi: Vec<f64>,
    pub lambda: f64,
}

impl CollisionInput {
    pub fn validate(&self, spec: &PotentialSpec) -> Result<()> {
        let d = spec.dim();
        if self.v.len() != d || self.b.len() != d {
            return Err(Error::InvalidInput(format!(
                "v and b must have dimension {d} (got {} and {})",
                self.v.len(),
                self.b.len()
            )));
        }
        if self.phi.len() != spec.torus_dim() {
            return Err(Error::InvalidInput(format!(
                "phi must have {} components",
                spec.torus_dim()
            )));
        }
        let vn = norm2(&self.v).sqrt();
        if !(vn > 0.0 && vn.is_finite()) {
            return Err(Error::ZeroVelocity);
        }
        let bn = norm2(&self.b).sqrt();
        if bn > SUPPORT_RADIUS * (1.0 + 1e-12) {
            return Err(Error::InvalidInput(format!("|b| = {bn} exceeds 1/2")));
        }
        let vb: f64 = self.v.iter().zip(&self.b).map(|(a, b)| a * b).sum();
        if vb.abs() > 1e-12 * vn * bn.max(f64::MIN_POSITIVE) && bn > 0.0 {
            return Err(Error::InvalidInput(format!("v . b = {vb} is not zero")));
        }
        if !(self.lambda.abs() <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "lambda = {} outside [-1, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Result of one collision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionOutcome {
    /// Momentum transfer `R = q'(exit) - v`.
    pub r: Vec<f64>,
    pub delta_e: f64,
    pub exit_time: f64,
    pub trapped: bool,
    pub steps: usize,
}

/// Collision reduced to the `(e, b_hat)` plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarCollision {
    /// Transfer along `e`.
    pub r_par: f64,
    /// Transfer along `b_hat`.
    pub r_perp: f64,
    pub delta_e: f64,
    pub exit_time: f64,
    pub trapped: bool,
    pub steps: usize,
}

/// `Delta E = v . R + |R|^2 / 2`.
pub fn energy_transfer(v: &[f64], r: &[f64]) -> f64 {
    let vr: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
    vr + 0.5 * norm2(r)
}

/// Speed above which no particle can be trapped, `12 |lambda| sup|grad V|`.
pub fn trapping_threshold(spec: &PotentialSpec, lambda: f64) -> f64 {
    TRAPPING_FACTOR * lambda.abs() * spec.grad_max()
}

struct PlanarSystem<'a> {
    spec: &'a PotentialSpec,
    speed: f64,
    b_norm: f64,
    phase0: f64,
    omega1: f64,
    lambda: f64,
}

const X0: f64 = -0.5;

impl PlanarSystem<'_> {
    #[inline]
    fn position(&self, t: f64, y: &[f64]) -> (f64, f64) {
        (X0 + self.speed * t + y[0], self.b_norm + y[1])
    }

    #[inline]
    fn accel(&self, t: f64, qx: f64, qz: f64) -> (f64, f64) {
        let r2 = qx * qx + qz * qz;
        if r2 >= 0.25 {
            return (0.0, 0.0);
        }
        let s = self.spec.radial_gradient_factor(r2, self.omega1 * t + self.phase0);
        (-self.lambda * s * qx, -self.lambda * s * qz)
    }
}

impl OdeSystem<4> for PlanarSystem<'_> {
    #[inline]
    fn rhs(&self, t: f64, y: &[f64; 4], dy: &mut [f64; 4]) {
        let (qx, qz) = self.position(t, y);
        let (ax, az) = self.accel(t, qx, qz);
        dy[0] = y[2];
        dy[1] = y[3];
        dy[2] = ax;
        dy[3] = az;
    }
}

/// Accepted-step node of a stored trajectory (planar deviation variables).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub t: f64,
    pub y: [f64; 2],
    pub w: [f64; 2],
    pub a: [f64; 2],
}

/// Dense record of a collision: accepted-step nodes plus the planar frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub knots: Vec<Knot>,
    pub exit_time: f64,
    pub trapped: bool,
    speed: f64,
    b_norm: f64,
    e: Vec<f64>,
    b_hat: Vec<f64>,
}

impl Trajectory {
    /// Position in `R^d` at time `t`, from quintic Hermite interpolation of the
    /// stored nodes.
    pub fn position(&self, t: f64) -> Vec<f64> {
        let (px, pz) = self.planar_position(t);
        self.embed(px, pz)
    }

    fn planar_position(&self, t: f64) -> (f64, f64) {
        let i = match self.knots.binary_search_by(|k| k.t.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(self.knots.len().saturating_sub(2)),
            Err(i) => i.saturating_sub(1).min(self.knots.len().saturating_sub(2)),
        };
        let (y, _) = hermite(&self.knots[i], &self.knots[i + 1], t);
        (X0 + self.speed * t + y[0], self.b_norm + y[1])
    }

    fn embed(&self, par: f64, perp: f64) -> Vec<f64> {
        self.e.iter().zip(&self.b_hat).map(|(e, b)| par * e + perp * b).collect()
    }
}

/// Quintic Hermite interpolation of `y` (and its derivative `w`) between two
/// nodes using values, first and second derivatives.
fn hermite(k0: &Knot, k1: &Knot, t: f64) -> ([f64; 2], [f64; 2]) {
    let h = k1.t - k0.t;
    let s = if h > 0.0 { (t - k0.t) / h } else { 0.0 };
    let (s2, s3) = (s * s, s * s * s);
    let (s4, s5) = (s3 * s, s3 * s2);
    let h0 = 1.0 - 10.0 * s3 + 15.0 * s4 - 6.0 * s5;
    let h1 = s - 6.0 * s3 + 8.0 * s4 - 3.0 * s5;
    let h2 = 0.5 * s2 - 1.5 * s3 + 1.5 * s4 - 0.5 * s5;
    let h3 = 10.0 * s3 - 15.0 * s4 + 6.0 * s5;
    let h4 = -4.0 * s3 + 7.0 * s4 - 3.0 * s5;
    let h5 = 0.5 * s3 - s4 + 0.5 * s5;
    let d0 = -30.0 * s2 + 60.0 * s3 - 30.0 * s4;
    let d1 = 1.0 - 18.0 * s2 + 32.0 * s3 - 15.0 * s4;
    let d2 = s - 4.5 * s2 + 6.0 * s3 - 2.5 * s4;
    let d4 = -12.0 * s2 + 28.0 * s3 - 15.0 * s4;
    let d5 = 1.5 * s2 - 4.0 * s3 + 2.5 * s4;
    let mut y = [0.0; 2];
    let mut w = [0.0; 2];
    for i in 0..2 {
        y[i] = h0 * k0.y[i]
            + h * h1 * k0.w[i]
            + h * h * h2 * k0.a[i]
            + h3 * k1.y[i]
            + h * h4 * k1.w[i]
            + h * h * h5 * k1.a[i];
        w[i] = if h > 0.0 {
            (d0 * (k0.y[i] - k1.y[i])) / h
                + d1 * k0.w[i]
                + h * d2 * k0.a[i]
                + d4 * k1.w[i]
                + h * d5 * k1.a[i]
        } else {
            k0.w[i]
        };
    }
    (y, w)
}

fn knot(step_t: f64, y: &[f64; 4], f: &[f64; 4]) -> Knot {
    Knot { t: step_t, y: [y[0], y[1]], w: [y[2], y[3]], a: [f[2], f[3]] }
}

fn validate_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0 && tol <= 1e-3) {
        return Err(Error::InvalidInput(format!("tol = {tol} outside (0, 1e-3]")));
    }
    Ok(())
}

/// Integrates one collision in its plane of motion.
///
/// `speed = |v|`, `b_norm = |b|`, `phi1` is the first phase component.
pub fn collide(
    spec: &PotentialSpec,
    speed: f64,
    b_norm: f64,
    phi1: f64,
    lambda: f64,
    tol: f64,
) -> PlanarCollision {
    run_planar(spec, speed, b_norm, phi1, lambda, tol, TIME_CAP_CROSSINGS / speed, None)
}

fn run_planar(
    spec: &PotentialSpec,
    speed: f64,
    b_norm: f64,
    phi1: f64,
    lambda: f64,
    tol: f64,
    t_cap: f64,
    mut record: Option<&mut Vec<Knot>>,
) -> PlanarCollision {
    let omega1 = spec.omega()[0];
    if lambda == 0.0 {
        // free flight: the chord of the ball
        let half = (0.25 - b_norm * b_norm).max(0.0).sqrt();
        let exit_time = (0.5 + half) / speed;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(Knot { t: 0.0, y: [0.0; 2], w: [0.0; 2], a: [0.0; 2] });
            rec.push(Knot { t: exit_time, y: [0.0; 2], w: [0.0; 2], a: [0.0; 2] });
        }
        return PlanarCollision {
            r_par: 0.0,
            r_perp: 0.0,
            delta_e: 0.0,
            exit_time,
            trapped: false,
            steps: 0,
        };
    }
    let sys = PlanarSystem { spec, speed, b_norm, phase0: phi1, omega1, lambda };
    // slow particles are dominated by the potential, not by free flight
    let u = speed.max(1.0);
    let atol_w = tol * spec.grad_max() / u;
    let atol_y = atol_w / u;
    let mut h_max = 1.0 / (16.0 * u);
    if omega1 != 0.0 {
        h_max = h_max.min(0.25 / omega1.abs());
    }
    let cfg = Dopri5Config {
        rtol: tol,
        atol: [atol_y, atol_y, atol_w, atol_w],
        h_init: h_max,
        h_max,
        h_min: 1e-12 * h_max,
        max_steps: 10_000_000,
    };

    let g = |t: f64, y: &[f64]| {
        let (qx, qz) = sys.position(t, y);
        qx * qx + qz * qz - 0.25
    };
    let radial = |t: f64, y: &[f64], w: &[f64]| {
        let (qx, qz) = sys.position(t, y);
        qx * (speed + w[0]) + qz * w[1]
    };

    if let Some(rec) = record.as_deref_mut() {
        let mut f0 = [0.0; 4];
        sys.rhs(0.0, &[0.0; 4], &mut f0);
        rec.push(knot(0.0, &[0.0; 4], &f0));
    }

    let mut entered = false;
    let mut exit: Option<(f64, [f64; 2])> = None;
    let out = ode::integrate(&sys, 0.0, [0.0; 4], t_cap, &cfg, |s: &Step<4>| {
        if let Some(rec) = record.as_deref_mut() {
            rec.push(knot(s.t1, &s.y1, &s.f1));
        }
        let g1 = g(s.t1, &s.y1);
        if g1 < 0.0 {
            entered = true;
            return Control::Continue;
        }
        if radial(s.t1, &s.y1, &s.y1[2..]) <= 0.0 {
            return Control::Continue;
        }
        let k0 = knot(s.t0, &s.y0, &s.f0);
        let k1 = knot(s.t1, &s.y1, &s.f1);
        let g_at = |t: f64| g(t, &hermite(&k0, &k1, t).0);
        let radial_at = |t: f64| {
            let (y, w) = hermite(&k0, &k1, t);
            radial(t, &y, &w)
        };
        let width_tol = tol / speed;
        let t_exit = if g(s.t0, &s.y0) < 0.0 {
            bisect(g_at, s.t0, s.t1, width_tol)
        } else {
            // last inside sample within the step, if any
            const PROBES: usize = 64;
            let inside = (0..PROBES).rev().map(|i| s.t0 + (s.t1 - s.t0) * i as f64 / PROBES as f64).find(|&t| g_at(t) < 0.0);
            match inside {
                Some(lo) => bisect(g_at, lo, s.t1, width_tol),
                None if !entered && radial_at(s.t0) <= 0.0 => {
                    // never entered: closest approach
                    bisect(radial_at, s.t0, s.t1, width_tol)
                }
                None => s.t0,
            }
        };
        exit = Some((t_exit, [s.y1[2], s.y1[3]]));
        Control::Stop
    });

    match exit {
        Some((exit_time, w)) => {
            debug_assert_eq!(out.termination, Termination::Stopped);
            let (r_par, r_perp) = (w[0], w[1]);
            PlanarCollision {
                r_par,
                r_perp,
                delta_e: speed * r_par + 0.5 * (r_par * r_par + r_perp * r_perp),
                exit_time,
                trapped: false,
                steps: out.accepted,
            }
        }
        None => PlanarCollision {
            r_par: out.y[2],
            r_perp: out.y[3],
            delta_e: f64::NAN,
            exit_time: out.t,
            trapped: true,
            steps: out.accepted,
        },
    }
}

/// Root of a function that is negative at `lo` and nonnegative at `hi`.
fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, width: f64) -> f64 {
    let neg_at_lo = f(lo) < 0.0;
    for _ in 0..200 {
        if hi - lo <= width {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if (f(mid) < 0.0) == neg_at_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Orthonormal pair `(e, b_hat)` spanning the plane of motion.
fn frame(input: &CollisionInput) -> (Vec<f64>, Vec<f64>, f64, f64) {
    let speed = norm2(&input.v).sqrt();
    let e: Vec<f64> = input.v.iter().map(|x| x / speed).collect();
    let b_norm = norm2(&input.b).sqrt();
    let b_hat: Vec<f64> = if b_norm > 0.0 {
        input.b.iter().map(|x| x / b_norm).collect()
    } else {
        vec![0.0; input.b.len()]
    };
    (e, b_hat, speed, b_norm.min(SUPPORT_RADIUS))
}

fn outcome_from(pc: &PlanarCollision, e: &[f64], b_hat: &[f64], v: &[f64]) -> CollisionOutcome {
    let r: Vec<f64> = e.iter().zip(b_hat).map(|(e, b)| pc.r_par * e + pc.r_perp * b).collect();
    let delta_e = if pc.trapped { f64::NAN } else { energy_transfer(v, &r) };
    CollisionOutcome {
        r,
        delta_e,
        exit_time: pc.exit_time,
        trapped: pc.trapped,
        steps: pc.steps,
    }
}

/// Integrates a scattering event; trapping is reported through the flag.
pub fn integrate_collision(
    spec: &PotentialSpec,
    input: &CollisionInput,
    tol: f64,
) -> Result<CollisionOutcome> {
    input.validate(spec)?;
    validate_tol(tol)?;
    let (e, b_hat, speed, b_norm) = frame(input);
    let pc = collide(spec, speed, b_norm, input.phi[0], input.lambda, tol);
    Ok(outcome_from(&pc, &e, &b_hat, &input.v))
}

/// Like [`integrate_collision`], also returning the stored trajectory.
pub fn integrate_collision_traced(
    spec: &PotentialSpec,
    input: &CollisionInput,
    tol: f64,
) -> Result<(CollisionOutcome, Trajectory)> {
    input.validate(spec)?;
    validate_tol(tol)?;
    let speed = norm2(&input.v).sqrt();
    traced(spec, input, tol, TIME_CAP_CROSSINGS / speed)
}

fn traced(
    spec: &PotentialSpec,
    input: &CollisionInput,
    tol: f64,
    t_cap: f64,
) -> Result<(CollisionOutcome, Trajectory)> {
    let (e, b_hat, speed, b_norm) = frame(input);
    let mut knots = Vec::new();
    let pc = run_planar(spec, speed, b_norm, input.phi[0], input.lambda, tol, t_cap, Some(&mut knots));
    let traj = Trajectory {
        knots,
        exit_time: pc.exit_time,
        trapped: pc.trapped,
        speed,
        b_norm,
        e: e.clone(),
        b_hat: b_hat.clone(),
    };
    Ok((outcome_from(&pc, &e, &b_hat, &input.v), traj))
}

// 5-point Gauss–Legendre on [-1, 1]
const GL5_X: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
];
const GL5_W: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Momentum transfer as the time integral of the force `-lambda grad V` along
/// the stored trajectory.
pub fn momentum_transfer_integral(
    spec: &PotentialSpec,
    input: &CollisionInput,
    trajectory: &Trajectory,
) -> Result<Vec<f64>> {
    if trajectory.trapped {
        return Err(Error::TrappedTrajectory);
    }
    input.validate(spec)?;
    let sys = PlanarSystem {
        spec,
        speed: trajectory.speed,
        b_norm: trajectory.b_norm,
        phase0: input.phi[0],
        omega1: spec.omega()[0],
        lambda: input.lambda,
    };
    let (mut ix, mut iz) = (0.0, 0.0);
    for pair in trajectory.knots.windows(2) {
        let (k0, k1) = (&pair[0], &pair[1]);
        let t0 = k0.t;
        let t1 = k1.t.min(trajectory.exit_time);
        if t1 <= t0 {
            break;
        }
        let (mid, half) = (0.5 * (t0 + t1), 0.5 * (t1 - t0));
        for (x, w) in GL5_X.iter().zip(GL5_W) {
            let t = mid + half * x;
            let (y, _) = hermite(k0, k1, t);
            let (qx, qz) = sys.position(t, &y);
            let (ax, az) = sys.accel(t, qx, qz);
            ix += w * half * ax;
            iz += w * half * az;
        }
    }
    Ok(trajectory.embed(ix, iz))
}

/// First-order coefficient `alpha1(e, kappa) = -lambda * integral of grad V`
/// along the straight chord `b + (y - 1/2) e`, with phase frozen at `phi`.
pub fn alpha1(
    spec: &PotentialSpec,
    e: &[f64],
    b: &[f64],
    phi: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    alpha1_with_tol(spec, e, b, phi, lambda, 1e-13)
}

pub fn alpha1_with_tol(
    spec: &PotentialSpec,
    e: &[f64],
    b: &[f64],
    phi: &[f64],
    lambda: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    let d = spec.dim();
    if e.len() != d || b.len() != d || phi.len() != spec.torus_dim() {
        return Err(Error::InvalidInput("dimension mismatch".into()));
    }
    if (norm2(e).sqrt() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput("e must be a unit vector".into()));
    }
    let b_norm = norm2(b).sqrt();
    if b_norm > SUPPORT_RADIUS * (1.0 + 1e-12) {
        return Err(Error::InvalidInput(format!("|b| = {b_norm} exceeds 1/2")));
    }
    let eb: f64 = e.iter().zip(b).map(|(a, c)| a * c).sum();
    if eb.abs() > 1e-12 * b_norm.max(f64::MIN_POSITIVE) && b_norm > 0.0 {
        return Err(Error::InvalidInput("e . b must vanish".into()));
    }
    let half = (0.25 - b_norm * b_norm).max(0.0).sqrt();
    if lambda == 0.0 || half == 0.0 {
        return Ok(vec![0.0; d]);
    }
    let phi1 = phi[0];
    let integrand = |s: f64, out: &mut [f64]| {
        let mut r2 = 0.0;
        for i in 0..d {
            out[i] = b[i] + s * e[i];
            r2 += out[i] * out[i];
        }
        let f = -lambda * spec.radial_gradient_factor(r2, phi1);
        for o in out.iter_mut() {
            *o *= f;
        }
    };
    let scale = spec.grad_max() * 2.0 * half;
    Ok(adaptive_gk15(integrand, d, -half, half, tol * scale))
}

// Gauss–Kronrod 7/15 nodes and weights on [-1, 1]
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15_panel(
    f: &impl Fn(f64, &mut [f64]),
    d: usize,
    a: f64,
    b: f64,
    buf: &mut [f64],
) -> (Vec<f64>, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kron = vec![0.0; d];
    let mut gauss = vec![0.0; d];
    for (j, (&x, &wk)) in XGK.iter().zip(WGK.iter()).enumerate() {
        let nodes: &[f64] = if x == 0.0 { &[0.0] } else { &[-x, x] };
        for &xn in nodes {
            f(c + h * xn, buf);
            for i in 0..d {
                kron[i] += wk * buf[i];
                if j % 2 == 1 {
                    gauss[i] += WG[j / 2] * buf[i];
                }
            }
        }
    }
    let mut err = 0.0f64;
    for i in 0..d {
        kron[i] *= h;
        gauss[i] *= h;
        err = err.max((kron[i] - gauss[i]).abs());
    }
    (kron, err)
}

/// Globally adaptive Gauss–Kronrod quadrature of a vector integrand, bisecting
/// the worst panel until the summed error estimate drops below `abs_tol`.
fn adaptive_gk15(f: impl Fn(f64, &mut [f64]), d: usize, a: f64, b: f64, abs_tol: f64) -> Vec<f64> {
    let mut buf = vec![0.0; d];
    let mut panels: Vec<(f64, f64, Vec<f64>, f64)> = Vec::new();
    // start from a few panels so the flat tails do not hide the bulk
    const START: usize = 4;
    for i in 0..START {
        let lo = a + (b - a) * i as f64 / START as f64;
        let hi = a + (b - a) * (i + 1) as f64 / START as f64;
        let (v, e) = gk15_panel(&f, d, lo, hi, &mut buf);
        panels.push((lo, hi, v, e));
    }
    for _ in 0..2000 {
        let total: f64 = panels.iter().map(|p| p.3).sum();
        if total <= abs_tol {
            break;
        }
        let (idx, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.partial_cmp(&y.1 .3).unwrap())
            .unwrap();
        let (lo, hi, _, _) = panels.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15_panel(&f, d, lo, mid, &mut buf);
        let (v2, e2) = gk15_panel(&f, d, mid, hi, &mut buf);
        panels.push((lo, mid, v1, e1));
        panels.push((mid, hi, v2, e2));
    }
    panels.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let mut out = vec![0.0; d];
    for p in &panels {
        for i in 0..d {
            out[i] += p.2[i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use std::f64::consts::PI;

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn scaled(v: &[f64], s: f64) -> Vec<f64> {
        v.iter().map(|x| x * s).collect()
    }

    /// Random admissible input in dimension d with the given speed.
    fn random_input(rng: &mut impl Rng, d: usize, speed: f64) -> CollisionInput {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vn = norm2(&v).sqrt();
        v.iter_mut().for_each(|x| *x *= speed / vn);
        let mut b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj: f64 = b.iter().zip(&v).map(|(a, c)| a * c).sum::<f64>() / (speed * speed);
        for (bi, vi) in b.iter_mut().zip(&v) {
            *bi -= proj * vi;
        }
        let bn = norm2(&b).sqrt();
        let target = 0.5 * rng.random::<f64>();
        b.iter_mut().for_each(|x| *x *= target / bn);
        CollisionInput {
            v,
            b,
            phi: vec![rng.random_range(0.0..2.0 * PI)],
            lambda: rng.random_range(-1.0..1.0),
        }
    }

    /// Independent oracle: fixed-step classical RK4 on the full d-dimensional
    /// equations of motion, stepping until the particle leaves the ball.
    fn rk4_full(spec: &PotentialSpec, input: &CollisionInput, n_steps_per_chord: usize) -> Vec<f64> {
        let d = spec.dim();
        let speed = norm2(&input.v).sqrt();
        let h = 1.0 / (speed * n_steps_per_chord as f64);
        let mut q: Vec<f64> = input.b.iter().zip(&input.v).map(|(b, v)| b - 0.5 * v / speed).collect();
        let mut p = input.v.clone();
        let acc = |t: f64, q: &[f64]| -> Vec<f64> {
            let phi = [spec.omega()[0] * t + input.phi[0]];
            spec.grad_q(q, &phi).iter().map(|g| -input.lambda * g).collect()
        };
        let mut t = 0.0;
        loop {
            let k1q = p.clone();
            let k1p = acc(t, &q);
            let q2: Vec<f64> = (0..d).map(|i| q[i] + 0.5 * h * k1q[i]).collect();
            let p2: Vec<f64> = (0..d).map(|i| p[i] + 0.5 * h * k1p[i]).collect();
            let k2p = acc(t + 0.5 * h, &q2);
            let q3: Vec<f64> = (0..d).map(|i| q[i] + 0.5 * h * p2[i]).collect();
            let p3: Vec<f64> = (0..d).map(|i| p[i] + 0.5 * h * k2p[i]).collect();
            let k3p = acc(t + 0.5 * h, &q3);
            let q4: Vec<f64> = (0..d).map(|i| q[i] + h * p3[i]).collect();
            let p4: Vec<f64> = (0..d).map(|i| p[i] + h * k3p[i]).collect();
            let k4p = acc(t + h, &q4);
            for i in 0..d {
                q[i] += h / 6.0 * (k1q[i] + 2.0 * p2[i] + 2.0 * p3[i] + p4[i]);
                p[i] += h / 6.0 * (k1p[i] + 2.0 * k2p[i] + 2.0 * k3p[i] + k4p[i]);
            }
            t += h;
            let qp: f64 = q.iter().zip(&p).map(|(a, b)| a * b).sum();
            if norm2(&q) > 0.25 && qp > 0.0 {
                break;
            }
        }
        p.iter().zip(&input.v).map(|(a, b)| a - b).collect()
    }

    #[test]
    fn planar_reduction_matches_full_dimensional_rk4() {
        let spec = PotentialSpec::new(8, 0.25, vec![3.0]).unwrap();
        let mut rng = stream(21, 0);
        for _ in 0..5 {
            let input = random_input(&mut rng, 8, 40.0);
            let out = integrate_collision(&spec, &input, 1e-10).unwrap();
            let oracle = rk4_full(&spec, &input, 4000);
            let diff: f64 = out.r.iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(diff < 1e-9 + 1e-6 * norm2(&oracle).sqrt(), "diff {diff}");
        }
    }

    #[test]
    fn zero_coupling_is_free_flight() {
        let spec = PotentialSpec::new(4, 1.0, vec![1.0]).unwrap();
        let input = CollisionInput { v: scaled(&unit(4, 0), 5.0), b: vec![0.0; 4], phi: vec![0.3], lambda: 0.0 };
        let out = integrate_collision(&spec, &input, 1e-8).unwrap();
        assert_eq!(out.r, vec![0.0; 4]);
        assert_eq!(out.delta_e, 0.0);
        assert!((out.exit_time - 1.0 / 5.0).abs() < 1e-15);
        assert!(!out.trapped);
    }

    #[test]
    fn static_potential_conserves_energy() {
        let spec = PotentialSpec::new(8, 0.25, vec![0.0]).unwrap();
        let mut rng = stream(5, 2);
        let tol = 1e-8;
        for _ in 0..200 {
            let speed = rng.random_range(30.0..200.0);
            let input = random_input(&mut rng, 8, speed);
            let out = integrate_collision(&spec, &input, tol).unwrap();
            assert!(!out.trapped);
            assert!(out.delta_e.abs() <= 10.0 * tol * speed * speed, "{}", out.delta_e);
        }
    }

    #[test]
    fn energy_transfer_examples() {
        assert_eq!(energy_transfer(&[1.0, 2.0], &[0.0, 0.0]), 0.0);
        assert_eq!(energy_transfer(&[1.0, 2.0], &[-2.0, -4.0]), 0.0);
        assert_eq!(energy_transfer(&[3.0, 0.0, 0.0], &[1.0, 0.0, 0.0]), 3.5);
    }

    #[test]
    fn threshold_examples() {
        let spec = PotentialSpec::default();
        assert_eq!(trapping_threshold(&spec, 0.0), 0.0);
        assert!((trapping_threshold(&spec, -1.0) - 12.0 * spec.grad_max()).abs() < 1e-14);
    }

    #[test]
    fn no_trapping_at_twice_threshold() {
        let spec = PotentialSpec::default();
        let speed = 2.0 * trapping_threshold(&spec, 1.0);
        let mut rng = stream(8, 8);
        for _ in 0..2000 {
            let input = random_input(&mut rng, 8, speed);
            assert!(!integrate_collision(&spec, &input, 1e-6).unwrap().trapped);
        }
    }

    #[test]
    fn exceeding_the_time_cap_flags_trapping() {
        let spec = PotentialSpec::new(2, 1.0, vec![1.0]).unwrap();
        let input = CollisionInput { v: vec![0.5, 0.0], b: vec![0.0, 0.1], phi: vec![0.0], lambda: -1.0 };
        let (out, traj) = traced(&spec, &input, 1e-6, 0.5).unwrap();
        assert!(out.trapped && traj.trapped);
        assert!(out.delta_e.is_nan());
        assert_eq!(momentum_transfer_integral(&spec, &input, &traj), Err(Error::TrappedTrajectory));
        let (free, _) = traced(&spec, &input, 1e-6, 64.0 / 0.5).unwrap();
        assert!(!free.trapped);
    }

    #[test]
    fn two_routes_agree() {
        let spec = PotentialSpec::default();
        let mut rng = stream(13, 1);
        for tol in [1e-6, 1e-9] {
            for _ in 0..100 {
                let speed = rng.random_range(30.0..300.0);
                let input = random_input(&mut rng, 8, speed);
                let (out, traj) = integrate_collision_traced(&spec, &input, tol).unwrap();
                let quad = momentum_transfer_integral(&spec, &input, &traj).unwrap();
                let rn = norm2(&out.r).sqrt();
                let diff: f64 = out.r.iter().zip(&quad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(diff <= 10.0 * tol * (rn + 1.0), "diff {diff} |R| {rn}");
            }
        }
    }

    #[test]
    fn exit_point_lies_on_sphere() {
        let spec = PotentialSpec::default();
        let mut rng = stream(14, 1);
        for _ in 0..50 {
            let input = random_input(&mut rng, 8, 60.0);
            let (out, traj) = integrate_collision_traced(&spec, &input, 1e-9).unwrap();
            let q = traj.position(out.exit_time);
            assert!((norm2(&q).sqrt() - 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn grazing_trajectory_has_no_transfer() {
        let spec = PotentialSpec::new(3, 1.0, vec![2.0]).unwrap();
        let input = CollisionInput { v: vec![10.0, 0.0, 0.0], b: vec![0.0, 0.5, 0.0], phi: vec![0.0], lambda: 1.0 };
        let (out, traj) = integrate_collision_traced(&spec, &input, 1e-8).unwrap();
        let quad = momentum_transfer_integral(&spec, &input, &traj).unwrap();
        assert!(norm2(&quad).sqrt() < 1e-12);
        assert!(norm2(&out.r).sqrt() < 1e-12);
        assert!((out.exit_time - 0.05).abs() < 1e-6);
    }

    #[test]
    fn invalid_inputs() {
        let spec = PotentialSpec::new(3, 1.0, vec![1.0]).unwrap();
        let good = CollisionInput { v: vec![1.0, 0.0, 0.0], b: vec![0.0, 0.2, 0.0], phi: vec![0.0], lambda: 0.5 };
        assert!(integrate_collision(&spec, &good, 1e-6).is_ok());
        assert!(integrate_collision(&spec, &good, 1e-2).is_err());
        let mut bad = good.clone();
        bad.b = vec![0.1, 0.2, 0.0];
        assert!(matches!(integrate_collision(&spec, &bad, 1e-6), Err(Error::InvalidInput(_))));
        let mut bad = good.clone();
        bad.b = vec![0.0, 0.6, 0.0];
        assert!(integrate_collision(&spec, &bad, 1e-6).is_err());
        let mut bad = good.clone();
        bad.v = vec![0.0; 3];
        assert_eq!(integrate_collision(&spec, &bad, 1e-6), Err(Error::ZeroVelocity));
    }

    #[test]
    fn alpha1_orthogonal_and_converged() {
        let spec = PotentialSpec::default();
        let mut rng = stream(4, 4);
        for _ in 0..1000 {
            let input = random_input(&mut rng, 8, 1.0);
            let a = alpha1(&spec, &input.v, &input.b, &input.phi, input.lambda).unwrap();
            let an = norm2(&a).sqrt();
            let ea: f64 = a.iter().zip(&input.v).map(|(x, y)| x * y).sum();
            assert!(ea.abs() <= 1e-9 * an + 1e-13, "{ea} vs {an}");
        }
        let input = random_input(&mut rng, 8, 1.0);
        let coarse = alpha1_with_tol(&spec, &input.v, &input.b, &input.phi, input.lambda, 1e-10).unwrap();
        let fine = alpha1_with_tol(&spec, &input.v, &input.b, &input.phi, input.lambda, 5e-11).unwrap();
        let diff: f64 = coarse.iter().zip(&fine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-8);
        assert_eq!(alpha1(&spec, &input.v, &input.b, &input.phi, 0.0).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn transfer_approaches_first_order_coefficient() {
        // |v|^2 |R - alpha1/|v|| stays bounded as the speed doubles
        let spec = PotentialSpec::default();
        let mut rng = stream(31, 0);
        let base = random_input(&mut rng, 8, 1.0);
        let a1 = alpha1(&spec, &base.v, &base.b, &base.phi, base.lambda).unwrap();
        let mut scaled_residuals = Vec::new();
        for speed in [50.0, 100.0, 200.0] {
            let input = CollisionInput { v: scaled(&base.v, speed), ..base.clone() };
            let out = integrate_collision(&spec, &input, 1e-11).unwrap();
            let res: f64 = out.r.iter().zip(&a1).map(|(r, a)| (r - a / speed).powi(2)).sum::<f64>().sqrt();
            scaled_residuals.push(res * speed * speed);
        }
        let slope = (scaled_residuals[2] / scaled_residuals[0]).log2() / 2.0;
        assert!(slope.abs() < 0.35, "{scaled_residuals:?}");
    }
}
