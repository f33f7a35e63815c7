//! Monte Carlo estimators used by the verification suite: the collision
//! moment constants, the `D^2` quadrature, growth-exponent fits, envelope
//! checks, exit probabilities and the second moment of the scalar chain.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::par_map;
use crate::error::{Error, Result};
use crate::particle_chain::{sample_kappa, speed_at_time, uniform_ball, LambdaLaw, ParticleTrace};
use crate::potential::{norm2, PotentialSpec, SUPPORT_RADIUS};
use crate::rng::stream;
use crate::scattering::{collide, trapping_threshold};
use crate::stats::{binomial_se, linear_fit, quantile, weighted_fit, wilson_interval, LineFit, Moments, Z99};
use crate::xi_chain::{
    drive_pure_lanes, simulate_xi, Lane, LaneControl, NoiseLaw, NoiseSource, XiChainSpec, XiPath,
};

/// Volume of the radius-`r` ball in `R^n`.
pub fn ball_volume(n: usize, r: f64) -> f64 {
    let unit = match n {
        0 => 1.0,
        1 => 2.0,
        _ => {
            let (mut v, mut k) = (if n % 2 == 0 { 1.0 } else { 2.0 }, if n % 2 == 0 { 2 } else { 3 });
            while k <= n {
                v *= TAU / k as f64;
                k += 2;
            }
            v
        }
    };
    unit * r.powi(n as i32)
}

fn default_phases() -> usize {
    4
}

fn default_moment_tol() -> f64 {
    1e-10
}

/// Work split of the moment estimator; fixed so results do not depend on the
/// worker count.
const MOMENT_CHUNKS: usize = 64;

/// Largest tolerated fraction of trapped collisions.
pub const MAX_TRAPPED_FRACTION: f64 = 1e-3;

/// Settings of [`estimate_transfer_moments`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentConfig {
    pub speeds: Vec<f64>,
    /// Collisions per speed.
    pub n_samples: usize,
    /// Equispaced phases per impact/coupling draw.
    #[serde(default = "default_phases")]
    pub phases: usize,
    #[serde(default = "default_moment_tol")]
    pub tol: f64,
    #[serde(default)]
    pub lambda_law: LambdaLaw,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "crate::ensemble::default_workers")]
    pub workers: usize,
}

impl MomentConfig {
    pub fn new(speeds: Vec<f64>, n_samples: usize) -> Self {
        MomentConfig {
            speeds,
            n_samples,
            phases: default_phases(),
            tol: default_moment_tol(),
            lambda_law: LambdaLaw::Uniform,
            seed: 0,
            workers: crate::ensemble::default_workers(),
        }
    }
}

/// Sample means at one speed. `scaled_*` fields carry the powers of `|v|`
/// that make them converge to the moment constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedMoments {
    pub speed: f64,
    pub collisions: u64,
    pub trapped: u64,
    /// `mean(dE) |v|^4`.
    pub scaled_mean: f64,
    pub scaled_mean_se: f64,
    /// `mean(dE^2) |v|^2`.
    pub scaled_square: f64,
    pub scaled_square_se: f64,
    /// `mean(dE) |v|` from one collision per draw, an iid sample of the
    /// collision law.
    pub plain_v1_mean: f64,
    pub plain_v1_se: f64,
    /// `mean(dE) |v|` with the variance-reduced average.
    pub reduced_v1_mean: f64,
    pub reduced_v1_se: f64,
}

impl SpeedMoments {
    pub fn mean_de(&self) -> f64 {
        self.scaled_mean / self.speed.powi(4)
    }

    pub fn mean_de_se(&self) -> f64 {
        self.scaled_mean_se / self.speed.powi(4)
    }

    pub fn mean_de2(&self) -> f64 {
        self.scaled_square / self.speed.powi(2)
    }

    pub fn mean_de2_se(&self) -> f64 {
        self.scaled_square_se / self.speed.powi(2)
    }
}

/// Fitted moment constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentFit {
    pub b_hat: f64,
    pub b_se: f64,
    pub d2_hat: f64,
    pub d2_se: f64,
    pub ratio: f64,
    pub ratio_se: f64,
    pub speeds_used: Vec<f64>,
    pub per_speed: Vec<SpeedMoments>,
    /// Fitted model of the scaled means against `|v|`.
    pub model: String,
}

#[derive(Clone, Copy, Default)]
struct MomentAcc {
    mean4: Moments,
    square2: Moments,
    plain1: Moments,
    reduced1: Moments,
    collisions: u64,
    trapped: u64,
}

impl MomentAcc {
    fn merge(&mut self, o: &MomentAcc) {
        self.mean4.merge(&o.mean4);
        self.square2.merge(&o.square2);
        self.plain1.merge(&o.plain1);
        self.reduced1.merge(&o.reduced1);
        self.collisions += o.collisions;
        self.trapped += o.trapped;
    }
}

fn moment_chunk(spec: &PotentialSpec, cfg: &MomentConfig, speed: f64, groups: usize, seed_index: u64) -> Result<MomentAcc> {
    let mut rng = stream(cfg.seed, seed_index);
    let mut acc = MomentAcc::default();
    let d = spec.dim();
    let mut v = vec![0.0; d];
    v[0] = speed;
    let k = cfg.phases;
    let v2 = speed * speed;
    let v4 = v2 * v2;
    for _ in 0..groups {
        let kappa = sample_kappa(&mut rng, &v, spec.torus_dim(), cfg.lambda_law)?;
        let b = norm2(&kappa.b).sqrt().min(SUPPORT_RADIUS);
        let (mut sum, mut sum_sq, mut first, mut trapped) = (0.0, 0.0, 0.0, 0);
        for j in 0..k {
            let phi = kappa.phi[0] + TAU * j as f64 / k as f64;
            for (s, lambda) in [kappa.lambda, -kappa.lambda].into_iter().enumerate() {
                let out = collide(spec, speed, b, phi, lambda, cfg.tol);
                if out.trapped {
                    trapped += 1;
                    continue;
                }
                if j == 0 && s == 0 {
                    first = out.delta_e;
                }
                sum += out.delta_e;
                sum_sq += out.delta_e * out.delta_e;
            }
        }
        acc.collisions += 2 * k as u64;
        acc.trapped += trapped;
        if trapped > 0 {
            // the antithetic group is incomplete; drop it
            continue;
        }
        let n = (2 * k) as f64;
        acc.mean4.push(sum / n * v4);
        acc.square2.push(sum_sq / n * v2);
        acc.plain1.push(first * speed);
        acc.reduced1.push(sum / n * speed);
    }
    Ok(acc)
}

fn fit_intercept(x: &[f64], y: &[f64], se: &[f64]) -> (f64, f64) {
    if x.len() == 1 {
        return (y[0], se[0]);
    }
    let fit = if se.iter().all(|s| *s > 0.0) {
        let w: Vec<f64> = se.iter().map(|s| 1.0 / (s * s)).collect();
        weighted_fit(x, y, &w)
    } else {
        linear_fit(x, y).map(|f| LineFit { intercept_se: 0.0, ..f })
    };
    fit.map(|f| (f.intercept, f.intercept_se)).unwrap_or((f64::NAN, f64::NAN))
}

/// Estimates `B` and `D^2` from direct collisions.
///
/// Each draw of `(b, phi, lambda)` from the collision law is evaluated at
/// `phases` equispaced rotations of the phase and at `+-lambda`; every member
/// of the group has the collision law, so the group average is an unbiased
/// estimate with much smaller variance. The scaled means at each speed are
/// fitted as `c0 + c1 / |v|`, and the intercepts are the constants.
pub fn estimate_transfer_moments(spec: &PotentialSpec, cfg: &MomentConfig) -> Result<MomentFit> {
    let mut problems = Vec::new();
    let mut speeds = cfg.speeds.clone();
    speeds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    speeds.dedup();
    if speeds.is_empty() {
        problems.push("no speeds given".to_string());
    }
    let threshold = trapping_threshold(spec, cfg.lambda_law.sup_abs());
    for &s in &speeds {
        if !(s > threshold && s.is_finite()) {
            problems.push(format!("speed {s} is not above the trapping threshold {threshold}"));
        }
    }
    if cfg.phases == 0 {
        problems.push("phases must be >= 1".into());
    }
    if cfg.n_samples == 0 {
        problems.push("n_samples must be >= 1".into());
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let per_group = 2 * cfg.phases;
    let groups = cfg.n_samples.div_ceil(per_group);
    let n_tasks = speeds.len() * MOMENT_CHUNKS;
    let accs = par_map(n_tasks, cfg.workers, |task| {
        let (si, c) = (task / MOMENT_CHUNKS, task % MOMENT_CHUNKS);
        let lo = groups * c / MOMENT_CHUNKS;
        let hi = groups * (c + 1) / MOMENT_CHUNKS;
        moment_chunk(spec, cfg, speeds[si], hi - lo, task as u64)
    });
    let mut per_speed = Vec::with_capacity(speeds.len());
    for (si, &speed) in speeds.iter().enumerate() {
        let mut acc = MomentAcc::default();
        for a in &accs[si * MOMENT_CHUNKS..(si + 1) * MOMENT_CHUNKS] {
            acc.merge(a.as_ref().map_err(Clone::clone)?);
        }
        if acc.trapped as f64 > MAX_TRAPPED_FRACTION * acc.collisions as f64 {
            return Err(Error::TrappedSamples {
                speed,
                trapped: acc.trapped as usize,
                total: acc.collisions as usize,
            });
        }
        per_speed.push(SpeedMoments {
            speed,
            collisions: acc.collisions,
            trapped: acc.trapped,
            scaled_mean: acc.mean4.mean,
            scaled_mean_se: acc.mean4.std_err(),
            scaled_square: acc.square2.mean,
            scaled_square_se: acc.square2.std_err(),
            plain_v1_mean: acc.plain1.mean,
            plain_v1_se: acc.plain1.std_err(),
            reduced_v1_mean: acc.reduced1.mean,
            reduced_v1_se: acc.reduced1.std_err(),
        });
    }
    let x: Vec<f64> = speeds.iter().map(|s| 1.0 / s).collect();
    let col = |f: fn(&SpeedMoments) -> f64| per_speed.iter().map(f).collect::<Vec<f64>>();
    let (b_hat, b_se) = fit_intercept(&x, &col(|m| m.scaled_mean), &col(|m| m.scaled_mean_se));
    let (d2_hat, d2_se) = fit_intercept(&x, &col(|m| m.scaled_square), &col(|m| m.scaled_square_se));
    let ratio = b_hat / d2_hat;
    let ratio_se = ratio.abs() * ((b_se / b_hat).powi(2) + (d2_se / d2_hat).powi(2)).sqrt();
    Ok(MomentFit {
        b_hat,
        b_se,
        d2_hat,
        d2_se,
        ratio,
        ratio_se,
        speeds_used: speeds,
        per_speed,
        model: if x.len() > 1 { "c0 + c1/|v|".into() } else { "c0".into() },
    })
}

/// Monte Carlo value with standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    pub value: f64,
    pub se: f64,
    pub n: u64,
}

const QUADRATURE_CHUNKS: usize = 64;

/// `D^2 = (E[lambda^2] / C_d) (2 / |S^{d-1}|) avg_phi int int |q - q'|^{1-d} dtV(q) dtV(q')`.
///
/// With `q'= q + r u`, the kernel cancels the radial Jacobian, so `q` is
/// drawn uniformly on the support ball, `r` uniformly on `(0, 1]` and `u`
/// uniformly on the sphere. `C_d` is the volume of the radius-1/2 ball in
/// `R^(d-1)`.
pub fn d_squared_quadrature(
    spec: &PotentialSpec,
    law: LambdaLaw,
    n_mc: usize,
    seed: u64,
    workers: usize,
) -> Result<Quadrature> {
    if n_mc < 10_000 {
        return Err(Error::InvalidInput(format!("n_mc = {n_mc} is below 10^4")));
    }
    let d = spec.dim();
    let parts = par_map(QUADRATURE_CHUNKS, workers, |c| {
        let mut rng = stream(seed, c as u64);
        let lo = n_mc * c / QUADRATURE_CHUNKS;
        let hi = n_mc * (c + 1) / QUADRATURE_CHUNKS;
        let mut m = Moments::new();
        let (mut q, mut u, mut q2) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut phi = vec![0.0; spec.torus_dim()];
        for _ in lo..hi {
            uniform_ball(&mut rng, SUPPORT_RADIUS, &mut q);
            random_direction(&mut rng, &mut u);
            let r: f64 = 1.0 - rng.random::<f64>();
            phi.iter_mut().for_each(|p| *p = rng.random::<f64>() * TAU);
            for i in 0..d {
                q2[i] = q[i] + r * u[i];
            }
            let f = if norm2(&q2) < SUPPORT_RADIUS * SUPPORT_RADIUS {
                spec.dt(&q, &phi) * spec.dt(&q2, &phi)
            } else {
                0.0
            };
            m.push(f);
        }
        m
    });
    let mut m = Moments::new();
    parts.iter().for_each(|p| m.merge(p));
    let scale = law.mean_square() / ball_volume(d - 1, SUPPORT_RADIUS) * 2.0 * ball_volume(d, SUPPORT_RADIUS);
    Ok(Quadrature { value: scale * m.mean, se: scale * m.std_err(), n: m.n })
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let mut s = 0.0;
        for x in out.iter_mut() {
            *x = StandardNormal.sample(rng);
            s += *x * *x;
        }
        if s > 0.0 {
            let k = 1.0 / s.sqrt();
            out.iter_mut().for_each(|x| *x *= k);
            return;
        }
    }
}

/// Log-log fit of the median speed against time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub slope: f64,
    pub slope_se: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub n_points: usize,
}

/// Minimum number of grid points of an exponent fit.
pub const MIN_FIT_POINTS: usize = 10;

/// `n` log-uniform points from `t_min` to `t_max`.
pub fn log_grid(t_min: f64, t_max: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![t_min];
    }
    let (a, b) = (t_min.ln(), t_max.ln());
    (0..n)
        .map(|i| match i {
            0 => t_min,
            _ if i == n - 1 => t_max,
            _ => (a + (b - a) * i as f64 / (n - 1) as f64).exp(),
        })
        .collect()
}

/// Fits `ln median_i(samples[i][j])` against `ln grid[j]`. Missing samples
/// are NaN and are left out of the median.
pub fn fit_median_power_law(grid: &[f64], samples: &[Vec<f64>]) -> Result<ExponentFit> {
    if grid.len() < MIN_FIT_POINTS {
        return Err(Error::WindowTooNarrow(format!("{} grid points, need {MIN_FIT_POINTS}", grid.len())));
    }
    let (t_min, t_max) = (grid[0], grid[grid.len() - 1]);
    if !(t_min > 0.0 && t_max > t_min) {
        return Err(Error::WindowTooNarrow(format!("empty window ({t_min}, {t_max})")));
    }
    let mut x = Vec::with_capacity(grid.len());
    let mut y = Vec::with_capacity(grid.len());
    for (j, &t) in grid.iter().enumerate() {
        let col: Vec<f64> = samples.iter().map(|s| s[j]).filter(|v| v.is_finite()).collect();
        if col.is_empty() {
            continue;
        }
        x.push(t.ln());
        y.push(quantile(&col, 0.5).ln());
    }
    if x.len() < MIN_FIT_POINTS {
        return Err(Error::WindowTooNarrow(format!("only {} grid points are covered by the traces", x.len())));
    }
    let f = linear_fit(&x, &y).ok_or_else(|| Error::WindowTooNarrow("degenerate fit".into()))?;
    Ok(ExponentFit {
        slope: f.slope,
        slope_se: f.slope_se,
        intercept: f.intercept,
        r_squared: f.r_squared,
        window: (t_min, t_max),
        n_points: x.len(),
    })
}

/// Growth exponent of the median speed of an ensemble of particle traces on
/// a log-uniform grid of `n_points` times in `window`. Traces that stop
/// before a grid time do not contribute to it.
pub fn fit_growth_exponent(traces: &[ParticleTrace], window: (f64, f64), n_points: usize) -> Result<ExponentFit> {
    let first = traces
        .iter()
        .filter_map(|t| t.times.get(1).copied())
        .fold(0.0, f64::max);
    if window.0 < 100.0 * first {
        return Err(Error::WindowTooNarrow(format!(
            "t_min = {} is inside the initial transient (100 t_1 = {})",
            window.0,
            100.0 * first
        )));
    }
    if !(window.1 > window.0) || n_points < MIN_FIT_POINTS {
        return Err(Error::WindowTooNarrow(format!("window {window:?} with {n_points} points")));
    }
    let grid = log_grid(window.0, window.1, n_points);
    let samples: Vec<Vec<f64>> = traces
        .iter()
        .map(|tr| grid.iter().map(|&t| speed_at_time(tr, t).unwrap_or(f64::NAN)).collect())
        .collect();
    fit_median_power_law(&grid, &samples)
}

/// Times `t_n = l * sum_{j=1..n} 1 / |v_j|` and speeds `|v_n|` of the reduced
/// model, with `|v| = (3 D xi)^(1/3)`.
pub fn reduced_time_series(path: &XiPath, d2: f64, mean_free_path: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(d2 > 0.0) {
        return Err(Error::NonPositive(d2));
    }
    let mut times = Vec::with_capacity(path.values.len());
    let mut speeds = Vec::with_capacity(path.values.len());
    let mut t = 0.0;
    for (n, &xi) in path.values.iter().enumerate() {
        let v = crate::xi_chain::speed_from_xi(xi, d2)?;
        if n > 0 {
            t += mean_free_path / v;
        }
        times.push(t);
        speeds.push(v);
    }
    Ok((times, speeds))
}

/// Streams one reduced-model path and returns its speed at each grid time
/// (`|v_{n+1}|` on `(t_n, t_{n+1}]`), NaN past the end of the path.
pub fn reduced_model_speeds<R: rand::RngCore>(
    spec: &XiChainSpec,
    xi0: f64,
    d2: f64,
    mean_free_path: f64,
    max_steps: u64,
    grid: &[f64],
    noise: &mut NoiseSource<R>,
) -> Result<Vec<f64>> {
    if !(d2 > 0.0) {
        return Err(Error::NonPositive(d2));
    }
    let mut out = vec![f64::NAN; grid.len()];
    let mut next = grid.partition_point(|&g| g <= 0.0);
    let c = 3.0 * d2;
    let mut t = 0.0;
    simulate_xi(spec, xi0, max_steps, noise, |k, xi| {
        if k == 0 {
            let v = (c * xi).cbrt();
            out[..next].iter_mut().for_each(|o| *o = v);
            return next < grid.len();
        }
        let v = (c * xi).cbrt();
        t += mean_free_path / v;
        while next < grid.len() && grid[next] <= t {
            out[next] = v;
            next += 1;
        }
        next < grid.len()
    })?;
    Ok(out)
}

/// Two-sided envelope `(xi0 + sqrt k)^(1-nu) <= xi_k <= (xi0 + sqrt k)^(1+nu)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeResult {
    pub holds: bool,
    pub first_violation: Option<u64>,
    pub checked: u64,
}

/// Streaming envelope check. Values are buffered in blocks; since both bounds
/// increase with `k`, a block whose extremes clear the bounds at its ends is
/// accepted without checking each step.
#[derive(Debug, Clone)]
pub struct EnvelopeMonitor {
    xi0: f64,
    nu: f64,
    block: Vec<f64>,
    start: u64,
    violation: Option<u64>,
}

const ENVELOPE_BLOCK: usize = 1024;

impl EnvelopeMonitor {
    pub fn new(xi0: f64, nu: f64) -> Result<Self> {
        if !(nu > 0.0) {
            return Err(Error::InvalidInput(format!("nu must be > 0, got {nu}")));
        }
        if !(xi0 > 0.0) {
            return Err(Error::NonPositive(xi0));
        }
        Ok(EnvelopeMonitor { xi0, nu, block: Vec::with_capacity(ENVELOPE_BLOCK), start: 0, violation: None })
    }

    pub fn lower(&self, k: u64) -> f64 {
        (self.xi0 + (k as f64).sqrt()).powf(1.0 - self.nu)
    }

    pub fn upper(&self, k: u64) -> f64 {
        (self.xi0 + (k as f64).sqrt()).powf(1.0 + self.nu)
    }

    /// Feeds the next value; returns false once a violation was found.
    #[inline]
    pub fn push(&mut self, xi: f64) -> bool {
        if self.violation.is_some() {
            return false;
        }
        self.block.push(xi);
        if self.block.len() == ENVELOPE_BLOCK {
            self.flush();
        }
        self.violation.is_none()
    }

    fn flush(&mut self) {
        if self.block.is_empty() {
            return;
        }
        let end = self.start + self.block.len() as u64 - 1;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &x in &self.block {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        if !(lo >= self.lower(end) && hi <= self.upper(self.start)) {
            for (i, &x) in self.block.iter().enumerate() {
                let k = self.start + i as u64;
                if !(x >= self.lower(k) && x <= self.upper(k)) {
                    self.violation = Some(k);
                    break;
                }
            }
        }
        self.start = end + 1;
        self.block.clear();
    }

    pub fn finish(mut self) -> EnvelopeResult {
        self.flush();
        let checked = match self.violation {
            Some(k) => k + 1,
            None => self.start,
        };
        EnvelopeResult { holds: self.violation.is_none(), first_violation: self.violation, checked }
    }
}

/// Envelope check over a whole stored path, with `xi_0` taken from the path.
pub fn envelope_check(path: &XiPath, nu: f64) -> Result<EnvelopeResult> {
    let xi0 = *path.values.first().ok_or(Error::EmptyPath)?;
    let mut m = EnvelopeMonitor::new(xi0, nu)?;
    for &x in &path.values {
        if !m.push(x) {
            break;
        }
    }
    Ok(m.finish())
}

/// Fraction of paths leaving `(a_minus xi0, a_plus xi0)` through the top.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitEstimate {
    pub p_hat: f64,
    /// 99% Wilson interval.
    pub ci: (f64, f64),
    pub se: f64,
    pub up: u64,
    pub n: u64,
    /// Paths that hit the step budget without leaving.
    pub censored: u64,
}

const EXIT_CHUNKS: usize = 64;

/// Step budget of one exit path, far beyond the typical `O(xi0^2)` exit time.
fn exit_budget(xi0: f64, a_plus: f64) -> u64 {
    (1e3 * (a_plus * xi0).powi(2)).max(1e6) as u64
}

/// Exit probability of the scalar chain through the upper barrier.
pub fn exit_prob_mc(
    spec: &XiChainSpec,
    xi0: f64,
    a_minus: f64,
    a_plus: f64,
    n_paths: usize,
    seed: u64,
    workers: usize,
) -> Result<ExitEstimate> {
    spec.validate()?;
    if !(0.0 < a_minus && a_minus < 1.0 && a_plus > 1.0) {
        return Err(Error::InvalidInterval { a_minus, a_plus });
    }
    if !(a_minus * xi0 > spec.xi_plus()) {
        return Err(Error::HypothesisRegionViolated { lower: a_minus * xi0, xi_plus: spec.xi_plus() });
    }
    let (lo, hi) = (a_minus * xi0, a_plus * xi0);
    let budget = exit_budget(xi0, a_plus);
    // 0 = down, 1 = up, 2 = censored
    let parts = par_map(EXIT_CHUNKS, workers, |c| -> Result<[u64; 3]> {
        let first = n_paths * c / EXIT_CHUNKS;
        let last = n_paths * (c + 1) / EXIT_CHUNKS;
        let mut counts = [0u64; 3];
        if spec.is_pure() && spec.noise == NoiseLaw::Rademacher {
            let mut next = first;
            drive_pure_lanes::<_, 4>(
                spec.gamma,
                || {
                    (next < last).then(|| {
                        next += 1;
                        Lane {
                            id: next - 1,
                            noise: NoiseSource::new(stream(seed, (next - 1) as u64), NoiseLaw::Rademacher),
                            xi: xi0,
                            lo,
                            hi,
                            budget,
                            steps: 0,
                        }
                    })
                },
                |l| {
                    counts[if l.xi >= l.hi { 1 } else if l.xi <= l.lo { 0 } else { 2 }] += 1;
                    LaneControl::Finish
                },
            );
        } else {
            for i in first..last {
                let mut noise = NoiseSource::new(stream(seed, i as u64), spec.noise);
                let (_, x) = simulate_xi(spec, xi0, budget, &mut noise, |_, x| x > lo && x < hi)?;
                counts[if x >= hi { 1 } else if x <= lo { 0 } else { 2 }] += 1;
            }
        }
        Ok(counts)
    });
    let mut counts = [0u64; 3];
    for p in parts {
        let p = p?;
        (0..3).for_each(|i| counts[i] += p[i]);
    }
    let n = counts[0] + counts[1];
    let p_hat = if n == 0 { f64::NAN } else { counts[1] as f64 / n as f64 };
    Ok(ExitEstimate {
        p_hat,
        ci: wilson_interval(counts[1], n, Z99),
        se: binomial_se(p_hat, n),
        up: counts[1],
        n,
        censored: counts[2],
    })
}

/// Growth rate of `E[xi_k^2]` from per-path least-squares slopes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondMomentSlope {
    pub slope: f64,
    pub se: f64,
    pub n_paths: usize,
    pub n_steps: u64,
    /// Ensemble mean of `xi_n^2` at the last step.
    pub final_mean_square: f64,
}

/// Mean over paths of the least-squares slope of `xi_k^2` against `k` for
/// `k = 0..=n_steps`; equals the slope of the ensemble-mean curve.
pub fn second_moment_slope(
    spec: &XiChainSpec,
    xi0: f64,
    n_steps: u64,
    n_paths: usize,
    seed: u64,
    workers: usize,
) -> Result<SecondMomentSlope> {
    spec.validate()?;
    if n_steps < 2 {
        return Err(Error::InvalidInput("need at least two steps".into()));
    }
    let n = (n_steps + 1) as f64;
    let kbar = n_steps as f64 / 2.0;
    let skk = n * (n * n - 1.0) / 12.0;
    let per_path = par_map(n_paths, workers, |i| -> Result<(f64, f64)> {
        let mut noise = NoiseSource::new(stream(seed, i as u64), spec.noise);
        let mut sky = 0.0;
        let mut last = xi0 * xi0;
        simulate_xi(spec, xi0, n_steps, &mut noise, |k, x| {
            let y = x * x;
            sky += (k as f64 - kbar) * y;
            last = y;
            true
        })?;
        Ok((sky / skk, last))
    });
    let mut slope = Moments::new();
    let mut fin = Moments::new();
    for r in per_path {
        let (s, l) = r?;
        slope.push(s);
        fin.push(l);
    }
    Ok(SecondMomentSlope {
        slope: slope.mean,
        se: slope.std_err(),
        n_paths,
        n_steps,
        final_mean_square: fin.mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::particle_chain::{run_trajectory, ChainConfig};
    use crate::xi_chain::run_xi;
    use std::f64::consts::PI;

    #[test]
    fn ball_volumes() {
        assert!((ball_volume(2, 1.0) - PI).abs() < 1e-14);
        assert!((ball_volume(3, 1.0) - 4.0 * PI / 3.0).abs() < 1e-14);
        assert!((ball_volume(8, 1.0) - PI.powi(4) / 24.0).abs() < 1e-13);
        assert!((ball_volume(7, 0.5) - 16.0 * PI.powi(3) / 105.0 / 128.0).abs() < 1e-14);
    }

    #[test]
    fn static_potential_gives_zero_moments() {
        let spec = PotentialSpec::new(8, 0.25, vec![0.0]).unwrap();
        let mut cfg = MomentConfig::new(vec![30.0, 80.0], 4000);
        cfg.tol = 1e-9;
        let fit = estimate_transfer_moments(&spec, &cfg).unwrap();
        assert!(fit.b_hat.abs() <= 3.0 * fit.b_se + 1e-9, "{fit:?}");
        assert!(fit.d2_hat.abs() <= 3.0 * fit.d2_se + 1e-9, "{fit:?}");
        for m in &fit.per_speed {
            assert!(m.mean_de2() < 1e-12);
        }
    }

    #[test]
    fn zero_coupling_gives_exact_zeros() {
        let spec = PotentialSpec::default();
        let mut cfg = MomentConfig::new(vec![30.0, 50.0], 800);
        cfg.lambda_law = LambdaLaw::Constant(0.0);
        let fit = estimate_transfer_moments(&spec, &cfg).unwrap();
        assert_eq!((fit.b_hat, fit.d2_hat), (0.0, 0.0));
    }

    #[test]
    fn moments_are_independent_of_worker_count() {
        let spec = PotentialSpec::default();
        let mut cfg = MomentConfig::new(vec![30.0, 60.0], 1024);
        cfg.workers = 1;
        let a = estimate_transfer_moments(&spec, &cfg).unwrap();
        cfg.workers = 3;
        let b = estimate_transfer_moments(&spec, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn low_speed_is_rejected() {
        let spec = PotentialSpec::default();
        let cfg = MomentConfig::new(vec![1.0, 30.0], 100);
        assert!(matches!(estimate_transfer_moments(&spec, &cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn quadrature_vanishes_for_static_potential() {
        let spec = PotentialSpec::new(8, 0.25, vec![0.0]).unwrap();
        let q = d_squared_quadrature(&spec, LambdaLaw::Uniform, 10_000, 1, 1).unwrap();
        assert_eq!(q.value, 0.0);
        assert!(d_squared_quadrature(&spec, LambdaLaw::Uniform, 100, 1, 1).is_err());
    }

    #[test]
    fn quadrature_is_positive_for_default_potential() {
        let q = d_squared_quadrature(&PotentialSpec::default(), LambdaLaw::Uniform, 200_000, 2, 1).unwrap();
        assert!(q.value > 5.0 * q.se, "{q:?}");
        // scales with E[lambda^2]
        let c = d_squared_quadrature(&PotentialSpec::default(), LambdaLaw::Constant(1.0), 200_000, 2, 1).unwrap();
        assert!((c.value - 3.0 * q.value).abs() < 1e-12 * c.value);
    }

    #[test]
    fn quadrature_on_a_closed_form_integrand() {
        // the sampling scheme alone: for two radius-R balls at distance s R the
        // overlap fraction is 1 - 3s/4 + s^3/16, which averages to 3/8 over r
        let mut rng = stream(3, 0);
        let (mut q, mut u) = ([0.0; 3], [0.0; 3]);
        let mut m = Moments::new();
        for _ in 0..400_000 {
            uniform_ball(&mut rng, 0.5, &mut q);
            random_direction(&mut rng, &mut u);
            let r: f64 = 1.0 - rng.random::<f64>();
            let inside = (0..3).map(|i| (q[i] + r * u[i]).powi(2)).sum::<f64>() < 0.25;
            m.push(inside as u8 as f64);
        }
        let exact = 0.375;
        assert!((m.mean - exact).abs() < 4.0 * m.std_err(), "{} vs {exact}", m.mean);
    }

    #[test]
    fn exact_power_law_is_recovered() {
        let grid = log_grid(1.0, 1e4, 20);
        let samples: Vec<Vec<f64>> = (0..5).map(|i| grid.iter().map(|t| (1.0 + i as f64 * 0.1) * t.powf(0.2)).collect()).collect();
        let f = fit_median_power_law(&grid, &samples).unwrap();
        assert!((f.slope - 0.2).abs() < 1e-10);
        let scaled: Vec<f64> = grid.iter().map(|t| t * 7.5).collect();
        let g = fit_median_power_law(&scaled, &samples).unwrap();
        assert!((g.slope - f.slope).abs() < 1e-12);
        assert!((g.intercept - f.intercept).abs() > 0.1);
        assert!(matches!(fit_median_power_law(&grid[..5], &samples), Err(Error::WindowTooNarrow(_))));
    }

    #[test]
    fn particle_trace_fit_rejects_transient_window() {
        let cfg = ChainConfig::new(PotentialSpec::default(), {
            let mut v = vec![0.0; 8];
            v[0] = 30.0;
            v
        }, 200);
        let tr = run_trajectory(&cfg, &mut stream(0, 0)).unwrap();
        let t1 = tr.times[1];
        assert!(matches!(fit_growth_exponent(&[tr.clone()], (10.0 * t1, 150.0 * t1), 12), Err(Error::WindowTooNarrow(_))));
        let f = fit_growth_exponent(&[tr], (100.0 * t1, 190.0 * t1), 12).unwrap();
        assert!(f.slope.is_finite());
    }

    #[test]
    fn reduced_series_and_streaming_agree() {
        let spec = XiChainSpec::pure(1.0);
        let path = run_xi(&spec, 10.0, 5000, stream(4, 0)).unwrap();
        let (t, v) = reduced_time_series(&path, 1e-3, 1.0).unwrap();
        let grid = log_grid(t[10], t[4000], 15);
        let mut noise = NoiseSource::new(stream(4, 0), NoiseLaw::Rademacher);
        let s = reduced_model_speeds(&spec, 10.0, 1e-3, 1.0, 5000, &grid, &mut noise).unwrap();
        for (g, sv) in grid.iter().zip(&s) {
            let n = t.partition_point(|x| x < g);
            assert!((v[n] - sv).abs() <= 1e-12 * sv, "{g}");
        }
        for n in 1..t.len() {
            assert!((t[n] - t[n - 1] - 1.0 / v[n]).abs() < 1e-9);
        }
    }

    #[test]
    fn reduced_model_grows_like_t_to_one_fifth() {
        let spec = XiChainSpec::pure(1.0);
        let grid = log_grid(2e3, 2e4, 12);
        let samples: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let mut noise = NoiseSource::new(stream(6, i), NoiseLaw::Rademacher);
                reduced_model_speeds(&spec, 10.0, 1.0, 1.0, 1_000_000, &grid, &mut noise).unwrap()
            })
            .collect();
        let f = fit_median_power_law(&grid, &samples).unwrap();
        assert!((0.15..0.25).contains(&f.slope), "{f:?}");
    }

    #[test]
    fn envelope_examples() {
        let mk = |values: Vec<f64>| XiPath { values, spec: XiChainSpec::pure(1.0), seed: None };
        let center = mk((0..5000).map(|k| 50.0 + (k as f64).sqrt()).collect());
        for nu in [1e-3, 0.1, 0.9] {
            assert!(envelope_check(&center, nu).unwrap().holds);
        }
        let constant = mk(vec![2.0; 4]);
        assert!(envelope_check(&constant, 1.0).unwrap().holds);
        // a constant path falls below the lower bound once sqrt(k) is large
        let flat = mk(vec![50.0; 100_000]);
        let r = envelope_check(&flat, 0.1).unwrap();
        let m = EnvelopeMonitor::new(50.0, 0.1).unwrap();
        let first = (0..100_000u64).find(|&k| m.lower(k) > 50.0).unwrap();
        assert_eq!(r.first_violation, Some(first));
        assert!(envelope_check(&flat, 0.0).is_err());
    }

    #[test]
    fn exit_probability_rejects_low_barrier() {
        let spec = XiChainSpec::pure(1.0);
        assert!(matches!(
            exit_prob_mc(&spec, 1.5, 0.5, 2.0, 10, 0, 1),
            Err(Error::HypothesisRegionViolated { .. })
        ));
        assert!(matches!(exit_prob_mc(&spec, 100.0, 1.5, 2.0, 10, 0, 1), Err(Error::InvalidInterval { .. })));
    }

    #[test]
    fn exit_probability_near_upper_barrier_is_high() {
        let spec = XiChainSpec::pure(1.0);
        let e = exit_prob_mc(&spec, 100.0, 0.5, 1.05, 2000, 1, 1).unwrap();
        assert!(e.p_hat > 0.5, "{e:?}");
        assert_eq!(e.censored, 0);
    }

    #[test]
    fn exit_probability_matches_bessel_value_and_paths_are_shared() {
        let spec = XiChainSpec::pure(1.0);
        let e = exit_prob_mc(&spec, 100.0, 0.5, 2.0, 4000, 2, 1).unwrap();
        assert!((e.p_hat - 2.0 / 3.0).abs() < 4.0 * e.se, "{e:?}");
        // the general path gives the same counts as the lane driver
        let mut general = spec.clone();
        general.g1 = Some(crate::xi_chain::Perturbation::Power { coefficient: 0.0, exponent: 2.0 });
        let g = exit_prob_mc(&general, 100.0, 0.5, 2.0, 300, 2, 2).unwrap();
        let p = exit_prob_mc(&spec, 100.0, 0.5, 2.0, 300, 2, 3).unwrap();
        assert_eq!((g.up, g.n), (p.up, p.n));
    }

    #[test]
    fn second_moment_grows_at_rate_two_gamma_plus_one() {
        let spec = XiChainSpec::pure(1.0);
        let s = second_moment_slope(&spec, 10.0, 2000, 2000, 3, 1).unwrap();
        assert!((s.slope - 3.0).abs() < 4.0 * s.se + 0.05, "{s:?}");
    }
}
