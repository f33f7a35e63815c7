//! The coupled chain for arrival times, velocities and positions of a particle
//! crossing a sequence of scatterers a fixed distance apart.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::potential::{norm2, PotentialSpec, SUPPORT_RADIUS};
use crate::scattering::{collide, trapping_threshold};

/// Law of the coupling constants `lambda_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LambdaLaw {
    /// Uniform on `[-1, 1]`.
    #[default]
    Uniform,
    Constant(f64),
}

impl LambdaLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            LambdaLaw::Uniform => rng.random_range(-1.0..=1.0),
            LambdaLaw::Constant(c) => c,
        }
    }

    /// `E[lambda^2]`.
    pub fn mean_square(&self) -> f64 {
        match *self {
            LambdaLaw::Uniform => 1.0 / 3.0,
            LambdaLaw::Constant(c) => c * c,
        }
    }

    pub fn sup_abs(&self) -> f64 {
        match *self {
            LambdaLaw::Uniform => 1.0,
            LambdaLaw::Constant(c) => c.abs(),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LambdaLaw::Constant(c) if !(c.abs() <= 1.0) => Err(Error::InvalidInput(format!(
                "constant lambda {c} outside [-1, 1]"
            ))),
            _ => Ok(()),
        }
    }
}

/// Scatterer parameters drawn for one collision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub b: Vec<f64>,
    pub phi: Vec<f64>,
    pub lambda: f64,
}

/// Applies the Householder reflection sending `sign(e_k) * unit_k` to `e`,
/// where `k` is the largest component of `e`. Vectors with `y_k = 0` are
/// mapped into `e^perp`.
fn reflect_into(e: &[f64], k: usize, y: &mut [f64]) {
    let s = if e[k] >= 0.0 { 1.0 } else { -1.0 };
    // u = e - s * unit_k
    let uu = 2.0 - 2.0 * e[k].abs();
    if uu <= 0.0 {
        return;
    }
    let mut uy = 0.0;
    for i in 0..e.len() {
        let ui = if i == k { e[i] - s } else { e[i] };
        uy += ui * y[i];
    }
    let c = 2.0 * uy / uu;
    for i in 0..e.len() {
        let ui = if i == k { e[i] - s } else { e[i] };
        y[i] -= c * ui;
    }
}

/// Uniform point of the `(n)`-ball of radius `r`, written into `out`.
pub(crate) fn uniform_ball<R: Rng + ?Sized>(rng: &mut R, r: f64, out: &mut [f64]) {
    loop {
        let mut s = 0.0;
        for x in out.iter_mut() {
            *x = StandardNormal.sample(rng);
            s += *x * *x;
        }
        if s > 0.0 {
            let scale = r * rng.random::<f64>().powf(1.0 / out.len() as f64) / s.sqrt();
            out.iter_mut().for_each(|x| *x *= scale);
            return;
        }
    }
}

/// Draws `b` uniformly on the radius-1/2 disk of `v^perp`, `phi` uniformly on
/// the torus and `lambda` from `law`.
pub fn sample_kappa<R: Rng + ?Sized>(
    rng: &mut R,
    v: &[f64],
    torus_dim: usize,
    law: LambdaLaw,
) -> Result<Kappa> {
    let speed = norm2(v).sqrt();
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(Error::ZeroVelocity);
    }
    let d = v.len();
    let e: Vec<f64> = v.iter().map(|x| x / speed).collect();
    let k = (0..d)
        .max_by(|&i, &j| e[i].abs().partial_cmp(&e[j].abs()).unwrap())
        .unwrap();
    let mut x = vec![0.0; d - 1];
    uniform_ball(rng, SUPPORT_RADIUS, &mut x);
    let mut b = vec![0.0; d];
    let mut it = x.into_iter();
    for (i, bi) in b.iter_mut().enumerate() {
        if i != k {
            *bi = it.next().unwrap();
        }
    }
    reflect_into(&e, k, &mut b);
    // remove the rounding residue along e
    let eb: f64 = e.iter().zip(&b).map(|(a, c)| a * c).sum();
    b.iter_mut().zip(&e).for_each(|(bi, ei)| *bi -= eb * ei);
    let phi = (0..torus_dim).map(|_| rng.random::<f64>() * TAU).collect();
    Ok(Kappa { b, phi, lambda: law.sample(rng) })
}

fn default_mean_free_path() -> f64 {
    1.0
}

fn default_tol() -> f64 {
    1e-9
}

/// Configuration of a single-particle chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    #[serde(default)]
    pub spec: PotentialSpec,
    #[serde(default = "default_mean_free_path")]
    pub mean_free_path: f64,
    pub v0: Vec<f64>,
    pub max_collisions: usize,
    #[serde(default)]
    pub lambda_law: LambdaLaw,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Keep the positions `q_n` in the trace.
    #[serde(default)]
    pub record_positions: bool,
}

impl ChainConfig {
    pub fn new(spec: PotentialSpec, v0: Vec<f64>, max_collisions: usize) -> Self {
        ChainConfig {
            spec,
            mean_free_path: default_mean_free_path(),
            v0,
            max_collisions,
            lambda_law: LambdaLaw::Uniform,
            tol: default_tol(),
            record_positions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.mean_free_path > 0.0 && self.mean_free_path.is_finite()) {
            problems.push(format!("mean_free_path must be > 0, got {}", self.mean_free_path));
        }
        if self.v0.len() != self.spec.dim() {
            problems.push(format!(
                "v0 has dimension {}, expected {}",
                self.v0.len(),
                self.spec.dim()
            ));
        }
        let speed = norm2(&self.v0).sqrt();
        let threshold = trapping_threshold(&self.spec, 1.0);
        if !(speed > threshold) {
            problems.push(format!("|v0| = {speed} must exceed the trapping threshold {threshold}"));
        }
        if !(self.tol > 0.0 && self.tol <= 1e-3) {
            problems.push(format!("tol = {} outside (0, 1e-3]", self.tol));
        }
        if let Err(e) = self.lambda_law.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// State `(t_n, v_n, q_n)` of the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub t: f64,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
}

impl ChainState {
    pub fn initial(v0: &[f64]) -> Self {
        ChainState { t: 0.0, v: v0.to_vec(), q: vec![0.0; v0.len()] }
    }
}

/// Recorded chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleTrace {
    pub times: Vec<f64>,
    pub speeds: Vec<f64>,
    pub positions: Option<Vec<Vec<f64>>>,
    pub trapped_at: Option<usize>,
    pub final_velocity: Vec<f64>,
    pub mean_free_path: f64,
}

impl ParticleTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// Checks `t_{n+1} - t_n = l / |v_{n+1}|` and
    /// `q_{n+1} - q_n = v_{n+1} (t_{n+1} - t_n)` (the latter in norm) up to
    /// floating-point rounding of the accumulated sums.
    pub fn check_kinematics(&self) -> std::result::Result<(), String> {
        let ulp = 8.0 * f64::EPSILON;
        for n in 0..self.times.len().saturating_sub(1) {
            let dt = self.times[n + 1] - self.times[n];
            let expect = self.mean_free_path / self.speeds[n + 1];
            if !(dt > 0.0) || (dt - expect).abs() > ulp * self.times[n + 1] + ulp * expect {
                return Err(format!("time increment mismatch at n = {n}: {dt} vs {expect}"));
            }
            if let Some(pos) = &self.positions {
                let step: f64 = pos[n + 1].iter().zip(&pos[n]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let scale = norm2(&pos[n + 1]).sqrt() + self.mean_free_path;
                if (step - self.mean_free_path).abs() > 1e3 * ulp * scale {
                    return Err(format!("position increment mismatch at n = {n}: {step}"));
                }
            }
        }
        Ok(())
    }
}

/// One collision followed by free flight to the next scatterer.
///
/// `index` is only used to label a trapping error.
pub fn step_chain<R: Rng + ?Sized>(
    cfg: &ChainConfig,
    rng: &mut R,
    state: &ChainState,
    index: usize,
) -> Result<ChainState> {
    let speed = norm2(&state.v).sqrt();
    let kappa = sample_kappa(rng, &state.v, cfg.spec.torus_dim(), cfg.lambda_law)?;
    let b_norm = norm2(&kappa.b).sqrt();
    let out = collide(&cfg.spec, speed, b_norm.min(SUPPORT_RADIUS), kappa.phi[0], kappa.lambda, cfg.tol);
    if out.trapped {
        return Err(Error::TrappedEvent { index });
    }
    let mut v = state.v.clone();
    for i in 0..v.len() {
        let b_hat = if b_norm > 0.0 { kappa.b[i] / b_norm } else { 0.0 };
        v[i] += out.r_par * state.v[i] / speed + out.r_perp * b_hat;
    }
    let new_speed = norm2(&v).sqrt();
    let dt = cfg.mean_free_path / new_speed;
    let q = state.q.iter().zip(&v).map(|(q, v)| q + v * dt).collect();
    Ok(ChainState { t: state.t + dt, v, q })
}

/// Runs the chain for `max_collisions` steps or until a trapping event.
pub fn run_trajectory<R: Rng + ?Sized>(cfg: &ChainConfig, rng: &mut R) -> Result<ParticleTrace> {
    cfg.validate()?;
    let n = cfg.max_collisions;
    let mut state = ChainState::initial(&cfg.v0);
    let mut times = Vec::with_capacity(n + 1);
    let mut speeds = Vec::with_capacity(n + 1);
    let mut positions = cfg.record_positions.then(|| Vec::with_capacity(n + 1));
    times.push(0.0);
    speeds.push(norm2(&state.v).sqrt());
    if let Some(p) = positions.as_mut() {
        p.push(state.q.clone());
    }
    let mut trapped_at = None;
    for i in 0..n {
        match step_chain(cfg, rng, &state, i) {
            Ok(next) => state = next,
            Err(Error::TrappedEvent { index }) => {
                trapped_at = Some(index);
                break;
            }
            Err(e) => return Err(e),
        }
        times.push(state.t);
        speeds.push(norm2(&state.v).sqrt());
        if let Some(p) = positions.as_mut() {
            p.push(state.q.clone());
        }
    }
    Ok(ParticleTrace {
        times,
        speeds,
        positions,
        trapped_at,
        final_velocity: state.v,
        mean_free_path: cfg.mean_free_path,
    })
}

/// Speed of the piecewise-linear trajectory at time `t`: `|v_{n+1}|` on
/// `(t_n, t_{n+1}]` and `|v_0|` at `t = 0`.
pub fn speed_at_time(trace: &ParticleTrace, t: f64) -> Result<f64> {
    let t_max = trace.last_time();
    if trace.is_empty() {
        return Err(Error::EmptyPath);
    }
    if !(t >= 0.0 && t <= t_max) {
        return Err(Error::OutOfRange { t, t_max });
    }
    if t == 0.0 {
        return Ok(trace.speeds[0]);
    }
    let n = trace.times.partition_point(|&x| x < t);
    Ok(trace.speeds[n])
}
