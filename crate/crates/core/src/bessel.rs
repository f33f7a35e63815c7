//! Bessel process `dR = dB + gamma / R dt` of dimension `2 gamma + 1`: an
//! Euler–Maruyama simulator, closed-form exit probabilities and the constants
//! `p_+` and `mu` of the dyadic level process.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ensemble::par_map;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::stats::{wilson_interval, Moments, Z99};

/// Subdivision depth after which a path is declared degenerate.
pub const MAX_SUBDIVISION: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BesselParams {
    pub gamma: f64,
    #[serde(default = "one")]
    pub r0: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

fn one() -> f64 {
    1.0
}

fn default_dt() -> f64 {
    1e-4
}

fn default_horizon() -> f64 {
    2.0
}

impl BesselParams {
    pub fn new(gamma: f64) -> Self {
        BesselParams { gamma, r0: 1.0, dt: default_dt(), horizon: default_horizon() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.5) {
            return Err(Error::SubcriticalGamma(self.gamma));
        }
        let mut problems = Vec::new();
        if !(self.r0 > 0.0) {
            problems.push(format!("r0 must be > 0, got {}", self.r0));
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            problems.push(format!("need 0 < dt <= horizon, got dt = {} and T = {}", self.dt, self.horizon));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// One Euler–Maruyama step of length `dt` driven by the Brownian increment
/// `w`. A proposal at or below `sqrt(dt)/100` is replaced by two half steps
/// whose increments are drawn from the Brownian bridge with the same total.
fn advance<R: Rng + ?Sized>(
    gamma: f64,
    r: f64,
    dt: f64,
    w: f64,
    level: u32,
    rng: &mut R,
    subdivisions: &mut u64,
) -> Result<f64> {
    let proposal = r + w + gamma * dt / r;
    if proposal > dt.sqrt() / 100.0 {
        return Ok(proposal);
    }
    if level >= MAX_SUBDIVISION {
        return Err(Error::DegeneratePath);
    }
    *subdivisions += 1;
    let z: f64 = StandardNormal.sample(rng);
    let w1 = 0.5 * w + 0.5 * dt.sqrt() * z;
    let mid = advance(gamma, r, 0.5 * dt, w1, level + 1, rng, subdivisions)?;
    advance(gamma, mid, 0.5 * dt, w - w1, level + 1, rng, subdivisions)
}

/// Streams a path, calling `visit(i, R(t_i))` for `i = 0..=n_steps`; stops
/// early when `visit` returns `false`. Returns the number of subdivisions.
pub fn simulate_bessel_with<R: Rng + ?Sized>(
    params: &BesselParams,
    rng: &mut R,
    mut visit: impl FnMut(usize, f64) -> bool,
) -> Result<u64> {
    params.validate()?;
    let sdt = params.dt.sqrt();
    let mut r = params.r0;
    let mut subdivisions = 0;
    if !visit(0, r) {
        return Ok(0);
    }
    for i in 1..=params.n_steps() {
        let z: f64 = StandardNormal.sample(rng);
        r = advance(params.gamma, r, params.dt, sdt * z, 0, rng, &mut subdivisions)?;
        if !visit(i, r) {
            break;
        }
    }
    Ok(subdivisions)
}

/// Simulated path on the grid `t_i = i dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BesselPath {
    pub dt: f64,
    pub values: Vec<f64>,
    pub subdivisions: u64,
}

pub fn simulate_bessel<R: Rng + ?Sized>(params: &BesselParams, rng: &mut R) -> Result<BesselPath> {
    let mut values = Vec::with_capacity(params.n_steps() + 1);
    let subdivisions = simulate_bessel_with(params, rng, |_, r| {
        values.push(r);
        true
    })?;
    Ok(BesselPath { dt: params.dt, values, subdivisions })
}

/// `P(T_{a+} < T_{a-})` for the process started at 1.
pub fn exit_prob_exact(gamma: f64, a_minus: f64, a_plus: f64) -> Result<f64> {
    if !(a_minus > 0.0 && a_minus < 1.0 && a_plus > 1.0) {
        return Err(Error::InvalidInterval { a_minus, a_plus });
    }
    if !(gamma > 0.5) {
        return Err(Error::SubcriticalGamma(gamma));
    }
    let c = 1.0 - 2.0 * gamma;
    if a_plus.is_infinite() {
        return Ok(-(-c * a_minus.ln()).exp_m1());
    }
    // (a-^c - 1) / (a-^c - a+^c), written with expm1 to keep gamma near 1/2
    let num = (c * a_minus.ln()).exp_m1();
    let den = num - (c * a_plus.ln()).exp_m1();
    Ok(num / den)
}

/// Up-jump probability of the dyadic level process.
pub fn p_plus(gamma: f64) -> Result<f64> {
    exit_prob_exact(gamma, 0.5, 2.0)
}

/// `mu = 2 p_+ - 1`.
pub fn mu(gamma: f64) -> Result<f64> {
    Ok(2.0 * p_plus(gamma)? - 1.0)
}

/// First-passage statistics on `(a_minus, a_plus)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitMc {
    pub n_paths: usize,
    /// Paths reaching `a_plus` first.
    pub up: usize,
    /// Paths still inside at the horizon.
    pub censored: usize,
    pub degenerate: usize,
    pub p_hat: f64,
    pub ci: (f64, f64),
    pub p_censored: f64,
    pub censored_ci: (f64, f64),
    /// Mean exit time over the uncensored paths.
    pub mean_exit_time: f64,
    pub mean_exit_time_se: f64,
}

enum Exit {
    Up(f64),
    Down(f64),
    Censored,
    Degenerate,
}

/// Monte Carlo first passage out of `(a_minus, a_plus)` for paths started at
/// `params.r0`, run up to `params.horizon`. Path `i` uses
/// `stream(seed, i)`; degenerate paths are excluded and counted.
pub fn bessel_exit_time_mc(
    params: &BesselParams,
    a_minus: f64,
    a_plus: f64,
    n_paths: usize,
    seed: u64,
    workers: usize,
) -> Result<ExitMc> {
    params.validate()?;
    if !(a_minus < params.r0 && params.r0 < a_plus) {
        return Err(Error::InvalidInterval { a_minus, a_plus });
    }
    let outcomes = par_map(n_paths, workers, |i| {
        let mut rng = stream(seed, i as u64);
        let mut exit = Exit::Censored;
        let res = simulate_bessel_with(params, &mut rng, |k, r| {
            let t = k as f64 * params.dt;
            if r >= a_plus {
                exit = Exit::Up(t);
                false
            } else if r <= a_minus {
                exit = Exit::Down(t);
                false
            } else {
                true
            }
        });
        match res {
            Ok(_) => exit,
            Err(_) => Exit::Degenerate,
        }
    });
    let (mut up, mut censored, mut degenerate) = (0, 0, 0);
    let mut times = Moments::new();
    for o in &outcomes {
        match *o {
            Exit::Up(t) => {
                up += 1;
                times.push(t);
            }
            Exit::Down(t) => times.push(t),
            Exit::Censored => censored += 1,
            Exit::Degenerate => degenerate += 1,
        }
    }
    let valid = (n_paths - degenerate) as u64;
    Ok(ExitMc {
        n_paths,
        up,
        censored,
        degenerate,
        p_hat: up as f64 / valid as f64,
        ci: wilson_interval(up as u64, valid, Z99),
        p_censored: censored as f64 / valid as f64,
        censored_ci: wilson_interval(censored as u64, valid, Z99),
        mean_exit_time: times.mean,
        mean_exit_time_se: times.std_err(),
    })
}

/// Ensemble mean of `R_t^2` on the grid, every `stride` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSquare {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub degenerate: usize,
    pub subdivisions: u64,
}

pub fn mean_square_curve(
    params: &BesselParams,
    n_paths: usize,
    stride: usize,
    seed: u64,
    workers: usize,
) -> Result<MeanSquare> {
    params.validate()?;
    let stride = stride.max(1);
    let n_points = params.n_steps() / stride + 1;
    let per_path = par_map(n_paths, workers, |i| {
        let mut rng = stream(seed, i as u64);
        let mut sq = Vec::with_capacity(n_points);
        let res = simulate_bessel_with(params, &mut rng, |k, r| {
            if k % stride == 0 {
                sq.push(r * r);
            }
            true
        });
        res.map(|s| (sq, s))
    });
    let mut acc = vec![Moments::new(); n_points];
    let (mut degenerate, mut subdivisions) = (0, 0);
    for p in per_path {
        match p {
            Ok((sq, s)) => {
                subdivisions += s;
                for (m, x) in acc.iter_mut().zip(sq) {
                    m.push(x);
                }
            }
            Err(_) => degenerate += 1,
        }
    }
    Ok(MeanSquare {
        times: (0..n_points).map(|j| (j * stride) as f64 * params.dt).collect(),
        mean: acc.iter().map(|m| m.mean).collect(),
        se: acc.iter().map(|m| m.std_err()).collect(),
        degenerate,
        subdivisions,
    })
}
