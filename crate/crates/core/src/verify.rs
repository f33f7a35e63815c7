//! Acceptance suite: one statistical check per criterion, with the sample
//! sizes and tolerances fixed here.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::aux_process::{
    drift_slope, dwell_stats, jump_prob_estimate, pure_aux_ensemble, AuxParams, AuxRun, AuxTrace,
};
use crate::bessel::{mean_square_curve, mu, p_plus, BesselParams};
use crate::ensemble::par_map;
use crate::error::Result;
use crate::estimators::{
    d_squared_quadrature, estimate_transfer_moments, exit_prob_mc, fit_median_power_law, log_grid,
    reduced_model_speeds, second_moment_slope, EnvelopeMonitor, MomentConfig, MomentFit,
};
use crate::particle_chain::{run_trajectory, sample_kappa, speed_at_time, ChainConfig, LambdaLaw};
use crate::potential::{norm2, PotentialSpec};
use crate::rng::{derive_seed, stream};
use crate::scattering::{alpha1, integrate_collision, CollisionInput};
use crate::stats::{linear_fit, Moments};
use crate::xi_chain::{simulate_xi, NoiseLaw, NoiseSource, XiChainSpec};

/// Sample sizes: `Full` is the acceptance scale, `Quick` a smoke-test scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Full,
    Quick,
}

impl Scale {
    fn pick<T>(self, full: T, quick: T) -> T {
        match self {
            Scale::Full => full,
            Scale::Quick => quick,
        }
    }
}

pub const ALL_CRITERIA: [u32; 13] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13];

// pinned tolerances
pub const RATIO_RANGE: (f64, f64) = (2.1, 2.9);
pub const SIGMA: f64 = 3.0;
pub const ELASTIC_REL: f64 = 1e-5;
pub const BESSEL_SLOPE_REL: f64 = 0.05;
pub const ENVELOPE_NU: f64 = 0.1;
pub const ENVELOPE_FRACTION: f64 = 0.95;
pub const SECOND_MOMENT_RANGE: (f64, f64) = (3.0, 4.0);
pub const DRIFT_REL: f64 = 0.15;
pub const DWELL_MEDIAN_FACTOR: f64 = 2.0;
pub const FULL_MODEL_SLOPE: (f64, f64) = (0.15, 0.25);
pub const REDUCED_SLOPE: (f64, f64) = (0.17, 0.23);
pub const ALPHA1_ORTHOGONALITY: f64 = 1e-9;

/// Outcome of one criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub measured: String,
    pub tolerance: String,
    pub passed: bool,
    pub seconds: f64,
    pub details: serde_json::Value,
}

impl CriterionResult {
    /// One-line summary.
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {}: {} (tolerance: {}; {:.1} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.measured,
            self.tolerance,
            self.seconds
        )
    }
}

/// Structural invariants checked on the samples drawn by the suite.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantTally {
    pub kinematics_checked: u64,
    pub kinematics_failures: u64,
    pub aux_checked: u64,
    pub aux_failures: u64,
    pub alpha1_checked: u64,
    pub alpha1_failures: u64,
}

impl InvariantTally {
    pub fn failures(&self) -> u64 {
        self.kinematics_failures + self.aux_failures + self.alpha1_failures
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyConfig {
    #[serde(default)]
    pub scale: Scale,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "crate::ensemble::default_workers")]
    pub workers: usize,
    /// Subset of criteria; all when `None`.
    #[serde(default)]
    pub criteria: Option<Vec<u32>>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { scale: Scale::Full, seed: 0, workers: crate::ensemble::default_workers(), criteria: None }
    }
}

/// Shared state across criteria.
pub struct Suite {
    pub cfg: VerifyConfig,
    pub tally: InvariantTally,
    moments: Option<MomentFit>,
    aux: Option<(Vec<AuxTrace>, AuxParams, i32)>,
}

const MOMENT_SPEEDS: [f64; 5] = [30.0, 50.0, 80.0, 130.0, 210.0];

impl Suite {
    pub fn new(cfg: VerifyConfig) -> Self {
        Suite { cfg, tally: InvariantTally::default(), moments: None, aux: None }
    }

    fn seed(&self, id: u32) -> u64 {
        derive_seed(self.cfg.seed, id as u64)
    }

    fn scale(&self) -> Scale {
        self.cfg.scale
    }

    /// Runs the selected criteria in order and returns one result each.
    pub fn run_all(&mut self, mut on_result: impl FnMut(&CriterionResult)) -> Result<Vec<CriterionResult>> {
        let ids = self.cfg.criteria.clone().unwrap_or_else(|| ALL_CRITERIA.to_vec());
        let mut out = Vec::new();
        for id in ids {
            let r = self.run(id)?;
            on_result(&r);
            out.push(r);
        }
        Ok(out)
    }

    pub fn run(&mut self, id: u32) -> Result<CriterionResult> {
        let start = Instant::now();
        let mut r = match id {
            1 => self.moment_ratio(),
            2 => self.d2_cross_oracle(),
            3 => self.zero_low_order_means(),
            4 => self.elastic_limit(),
            5 => self.exit_probability(),
            6 => self.bessel_mean_square(),
            7 => self.envelope(),
            8 => self.second_moment(),
            9 => self.jump_probability(),
            10 => self.dwell_scaling(),
            11 => self.growth_full_model(),
            12 => self.growth_reduced_model(),
            13 => self.infrastructure(),
            _ => return Err(crate::Error::InvalidInput(format!("unknown criterion {id}"))),
        }?;
        r.seconds = start.elapsed().as_secs_f64();
        Ok(r)
    }

    fn moments(&mut self) -> Result<MomentFit> {
        if let Some(m) = &self.moments {
            return Ok(m.clone());
        }
        let spec = PotentialSpec::default();
        let mut cfg = MomentConfig::new(MOMENT_SPEEDS.to_vec(), self.scale().pick(1_000_000, 20_000));
        cfg.seed = self.seed(1);
        cfg.workers = self.cfg.workers;
        let fit = estimate_transfer_moments(&spec, &cfg)?;
        self.check_alpha1(&spec)?;
        self.moments = Some(fit.clone());
        Ok(fit)
    }

    fn check_alpha1(&mut self, spec: &PotentialSpec) -> Result<()> {
        let n = self.scale().pick(1000, 100);
        let mut rng = stream(self.seed(1), u64::MAX);
        for i in 0..n {
            let mut v = vec![0.0; spec.dim()];
            v[i % spec.dim()] = MOMENT_SPEEDS[i % MOMENT_SPEEDS.len()];
            let k = sample_kappa(&mut rng, &v, spec.torus_dim(), LambdaLaw::Uniform)?;
            let speed = norm2(&v).sqrt();
            let e: Vec<f64> = v.iter().map(|x| x / speed).collect();
            let a = alpha1(spec, &e, &k.b, &k.phi, k.lambda)?;
            let ea: f64 = a.iter().zip(&e).map(|(x, y)| x * y).sum();
            self.tally.alpha1_checked += 1;
            if ea.abs() > ALPHA1_ORTHOGONALITY * norm2(&a).sqrt() + 1e-13 {
                self.tally.alpha1_failures += 1;
            }
        }
        Ok(())
    }

    fn moment_ratio(&mut self) -> Result<CriterionResult> {
        let m = self.moments()?;
        Ok(CriterionResult {
            id: 1,
            name: "moment ratio B/D^2".into(),
            measured: format!("{:.4} +- {:.4} (B = {:.4e}, D^2 = {:.4e})", m.ratio, m.ratio_se, m.b_hat, m.d2_hat),
            tolerance: format!("in [{}, {}]", RATIO_RANGE.0, RATIO_RANGE.1),
            passed: m.ratio >= RATIO_RANGE.0 && m.ratio <= RATIO_RANGE.1,
            seconds: 0.0,
            details: serde_json::to_value(&m).unwrap(),
        })
    }

    fn d2_cross_oracle(&mut self) -> Result<CriterionResult> {
        let m = self.moments()?;
        let q = d_squared_quadrature(
            &PotentialSpec::default(),
            LambdaLaw::Uniform,
            self.scale().pick(1_000_000, 100_000),
            self.seed(2),
            self.cfg.workers,
        )?;
        let se = (q.se * q.se + m.d2_se * m.d2_se).sqrt();
        let diff = (q.value - m.d2_hat).abs();
        Ok(CriterionResult {
            id: 2,
            name: "D^2 quadrature vs collisions".into(),
            measured: format!(
                "|{:.4e} - {:.4e}| = {:.2e} = {:.2} SE",
                q.value,
                m.d2_hat,
                diff,
                diff / se
            ),
            tolerance: format!("<= {SIGMA} combined SE"),
            passed: diff <= SIGMA * se,
            seconds: 0.0,
            details: json!({ "quadrature": q, "d2_hat": m.d2_hat, "d2_se": m.d2_se, "combined_se": se }),
        })
    }

    fn zero_low_order_means(&mut self) -> Result<CriterionResult> {
        let m = self.moments()?;
        let z: Vec<f64> = m.per_speed.iter().map(|s| s.plain_v1_mean / s.plain_v1_se).collect();
        let z_reduced: Vec<f64> = m.per_speed.iter().map(|s| s.reduced_v1_mean / s.reduced_v1_se).collect();
        let worst = z.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        Ok(CriterionResult {
            id: 3,
            name: "|v|-scaled mean energy transfer vanishes".into(),
            measured: format!("max |mean|/SE = {worst:.2} over {} speeds", z.len()),
            tolerance: format!("<= {SIGMA} at every speed"),
            passed: worst <= SIGMA,
            seconds: 0.0,
            details: json!({
                "speeds": m.speeds_used,
                "plain_mean": m.per_speed.iter().map(|s| s.plain_v1_mean).collect::<Vec<_>>(),
                "plain_se": m.per_speed.iter().map(|s| s.plain_v1_se).collect::<Vec<_>>(),
                "z": z,
                "variance_reduced_z": z_reduced,
            }),
        })
    }

    fn elastic_limit(&mut self) -> Result<CriterionResult> {
        let spec = PotentialSpec::new(8, crate::potential::DEFAULT_AMPLITUDE, vec![0.0])?;
        let n = self.scale().pick(1000, 100);
        let mut rng = stream(self.seed(4), 0);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let speed = MOMENT_SPEEDS[i % MOMENT_SPEEDS.len()];
            let mut v = vec![0.0; 8];
            crate::particle_chain::uniform_ball(&mut rng, 1.0, &mut v);
            let s = norm2(&v).sqrt();
            v.iter_mut().for_each(|x| *x *= speed / s);
            let k = sample_kappa(&mut rng, &v, spec.torus_dim(), LambdaLaw::Uniform)?;
            let out = integrate_collision(&spec, &CollisionInput { v, b: k.b, phi: k.phi, lambda: k.lambda }, 1e-9)?;
            worst = worst.max(out.delta_e.abs() / (speed * speed));
        }
        Ok(CriterionResult {
            id: 4,
            name: "elastic limit omega = 0".into(),
            measured: format!("max |dE|/|v|^2 = {worst:.2e} over {n} collisions"),
            tolerance: format!("<= {ELASTIC_REL:e}"),
            passed: worst <= ELASTIC_REL,
            seconds: 0.0,
            details: json!({ "max_rel": worst, "collisions": n }),
        })
    }

    fn exit_probability(&mut self) -> Result<CriterionResult> {
        let spec = XiChainSpec::pure(1.0);
        let n = self.scale().pick(10_000, 1000);
        let p = p_plus(1.0)?;
        let mut est = Vec::new();
        for (j, xi0) in [50.0, 200.0, 800.0].into_iter().enumerate() {
            est.push(exit_prob_mc(&spec, xi0, 0.5, 2.0, n, derive_seed(self.seed(5), j as u64), self.cfg.workers)?);
        }
        let sigma = |e: &crate::estimators::ExitEstimate| (p * (1.0 - p) / e.n as f64).sqrt();
        let dev = |e: &crate::estimators::ExitEstimate| (e.p_hat - p).abs();
        let main_ok = dev(&est[1]) <= SIGMA * sigma(&est[1]);
        let slack = SIGMA * (sigma(&est[0]).powi(2) + sigma(&est[2]).powi(2)).sqrt();
        let trend_ok = dev(&est[2]) <= dev(&est[0]) + slack;
        Ok(CriterionResult {
            id: 5,
            name: "exit probability of the rescaled chain".into(),
            measured: format!(
                "p(200) = {:.4} ({:.2} sigma); deviations at 50/800: {:.4}/{:.4}",
                est[1].p_hat,
                dev(&est[1]) / sigma(&est[1]),
                dev(&est[0]),
                dev(&est[2])
            ),
            tolerance: format!("within {SIGMA} sigma of 2/3; dev(800) <= dev(50) + {SIGMA} combined sigma"),
            passed: main_ok && trend_ok,
            seconds: 0.0,
            details: json!({ "xi0": [50, 200, 800], "estimates": est, "p_plus": p }),
        })
    }

    fn bessel_mean_square(&mut self) -> Result<CriterionResult> {
        let n = self.scale().pick(10_000, 500);
        let dt = self.scale().pick(1e-4, 1e-3);
        let mut rows = Vec::new();
        let mut ok = true;
        let mut worst: f64 = 0.0;
        for (j, gamma) in [0.75, 1.0, 2.0].into_iter().enumerate() {
            let params = BesselParams { gamma, r0: 1.0, dt, horizon: 1.0 };
            let stride = params.n_steps() / 100;
            let ms = mean_square_curve(&params, n, stride, derive_seed(self.seed(6), j as u64), self.cfg.workers)?;
            let fit = linear_fit(&ms.times, &ms.mean).unwrap();
            let target = 2.0 * gamma + 1.0;
            let rel = (fit.slope - target).abs() / target;
            worst = worst.max(rel);
            ok &= rel <= BESSEL_SLOPE_REL;
            rows.push(json!({ "gamma": gamma, "slope": fit.slope, "target": target, "rel_error": rel,
                "degenerate": ms.degenerate, "subdivisions": ms.subdivisions }));
        }
        Ok(CriterionResult {
            id: 6,
            name: "Bessel mean-square law".into(),
            measured: format!("worst relative slope error {worst:.4}"),
            tolerance: format!("<= {BESSEL_SLOPE_REL} for gamma in {{0.75, 1, 2}}"),
            passed: ok,
            seconds: 0.0,
            details: json!({ "paths": n, "dt": dt, "rows": rows }),
        })
    }

    fn envelope(&mut self) -> Result<CriterionResult> {
        let n = self.scale().pick(1000, 50);
        let steps: u64 = self.scale().pick(1_000_000, 100_000);
        let spec = XiChainSpec::pure(1.0);
        let seed = self.seed(7);
        let xi0 = 50.0;
        let results = par_map(n, self.cfg.workers, |i| -> Result<(bool, Option<u64>)> {
            let mut m = EnvelopeMonitor::new(xi0, ENVELOPE_NU)?;
            let mut noise = NoiseSource::new(stream(seed, i as u64), NoiseLaw::Rademacher);
            simulate_xi(&spec, xi0, steps, &mut noise, |_, x| m.push(x))?;
            let r = m.finish();
            Ok((r.holds, r.first_violation))
        });
        let mut holds = 0;
        let mut first = Vec::new();
        for r in results {
            let (h, v) = r?;
            holds += h as usize;
            if let Some(k) = v {
                first.push(k);
            }
        }
        let frac = holds as f64 / n as f64;
        first.sort_unstable();
        Ok(CriterionResult {
            id: 7,
            name: "pathwise envelope".into(),
            measured: format!("holds on {holds}/{n} paths ({frac:.3})"),
            tolerance: format!(">= {ENVELOPE_FRACTION}"),
            passed: frac >= ENVELOPE_FRACTION,
            seconds: 0.0,
            details: json!({
                "xi0": xi0, "nu": ENVELOPE_NU, "steps": steps,
                "median_first_violation": first.get(first.len() / 2),
                "violations": first.len(),
            }),
        })
    }

    fn second_moment(&mut self) -> Result<CriterionResult> {
        let spec = XiChainSpec::pure(1.0);
        let s = second_moment_slope(
            &spec,
            10.0,
            self.scale().pick(10_000, 2000),
            self.scale().pick(10_000, 1000),
            self.seed(8),
            self.cfg.workers,
        )?;
        let (lo, hi) = SECOND_MOMENT_RANGE;
        let passed = s.slope + SIGMA * s.se >= lo && s.slope - SIGMA * s.se <= hi;
        Ok(CriterionResult {
            id: 8,
            name: "second-moment growth".into(),
            measured: format!("slope {:.4} +- {:.4}", s.slope, s.se),
            tolerance: format!("{SIGMA}-SE interval meets [{lo}, {hi}]"),
            passed,
            seconds: 0.0,
            details: serde_json::to_value(s).unwrap(),
        })
    }

    fn aux_traces(&mut self) -> Result<(Vec<AuxTrace>, AuxParams, i32)> {
        if let Some(a) = &self.aux {
            return Ok(a.clone());
        }
        let params = AuxParams::for_spec(&XiChainSpec::pure(1.0), 0.2)?;
        let eta0 = self.scale().pick(12, 8);
        let run = AuxRun {
            xi0: 2f64.powi(eta0),
            n_paths: self.scale().pick(500, 100),
            max_transitions: 8,
            stop_level: eta0 + 3,
            step_budget: u64::MAX,
        };
        let traces = pure_aux_ensemble(1.0, &params, &run, self.seed(9), self.cfg.workers)?;
        for t in &traces {
            self.tally.aux_checked += 1;
            if t.check_structure(params.l).is_err() {
                self.tally.aux_failures += 1;
            }
        }
        self.aux = Some((traces.clone(), params, eta0));
        Ok((traces, params, eta0))
    }

    fn jump_probability(&mut self) -> Result<CriterionResult> {
        let (traces, _, eta0) = self.aux_traces()?;
        let p = p_plus(1.0)?;
        let m = mu(1.0)?;
        let threshold = eta0 - 3;
        let j = jump_prob_estimate(&traces, threshold)?;
        let drift = drift_slope(&traces, 8).unwrap();
        let p_ok = j.ci.0 <= p && p <= j.ci.1;
        let drift_ok = (drift.slope - m).abs() <= DRIFT_REL * m;
        Ok(CriterionResult {
            id: 9,
            name: "level jump probability and drift".into(),
            measured: format!(
                "p_hat = {:.4} [{:.4}, {:.4}] over {} jumps; drift slope {:.4}",
                j.p_hat, j.ci.0, j.ci.1, j.total, drift.slope
            ),
            tolerance: format!("2/3 in the 99% CI; slope within {}% of 1/3", DRIFT_REL * 100.0),
            passed: p_ok && drift_ok,
            seconds: 0.0,
            details: json!({
                "jump": j, "eta_min": threshold + 1, "drift": drift,
                "mean_levels": crate::aux_process::mean_level_curve(&traces, 8),
            }),
        })
    }

    fn dwell_scaling(&mut self) -> Result<CriterionResult> {
        let (traces, _, eta0) = self.aux_traces()?;
        let ms: Vec<f64> = (1..=8).map(|i| 0.5 * i as f64).collect();
        let s = dwell_stats(&traces, &ms);
        let levels: Vec<_> = s.per_level.iter().filter(|l| l.eta >= eta0 - 2 && l.eta <= eta0 + 2).collect();
        let med: Vec<f64> = levels.iter().map(|l| l.median).collect();
        let spread = med.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / med.iter().cloned().fold(f64::INFINITY, f64::min);
        let s1 = s.survival_at(1.0).unwrap();
        let s3 = s.survival_at(3.0).unwrap();
        let geometric = s3.survival <= s1.survival * s1.survival + SIGMA * s3.se.max(1.0 / s.n as f64);
        let tail = s.tail_fit.unwrap();
        let decaying = tail.slope + SIGMA * tail.slope_se < 0.0;
        let stable = levels.len() == 5 && spread <= DWELL_MEDIAN_FACTOR;
        Ok(CriterionResult {
            id: 10,
            name: "dwell-time scaling".into(),
            measured: format!(
                "median spread {spread:.3} over levels {}..{}; S(1) = {:.4}, S(3) = {:.4}, log-survival slope {:.3}",
                eta0 - 2,
                eta0 + 2,
                s1.survival,
                s3.survival,
                tail.slope
            ),
            tolerance: format!("spread <= {DWELL_MEDIAN_FACTOR}; S(3) <= S(1)^2; slope < 0 by {SIGMA} SE"),
            passed: stable && geometric && decaying,
            seconds: 0.0,
            details: serde_json::to_value(&s).unwrap(),
        })
    }

    fn growth_full_model(&mut self) -> Result<CriterionResult> {
        let n = self.scale().pick(200, 8);
        let collisions = self.scale().pick(100_000, 2000);
        let mut v0 = vec![0.0; 8];
        v0[0] = 30.0;
        let cfg = ChainConfig::new(PotentialSpec::default(), v0, collisions);
        let t1 = cfg.mean_free_path / 30.0;
        // every trace reaches l * collisions / max speed; speeds stay near 30
        let t_min = 100.0 * t1;
        let t_max = 0.9 * collisions as f64 * cfg.mean_free_path / 40.0;
        let grid = log_grid(t_min, t_max, 20);
        let seed = self.seed(11);
        let rows = par_map(n, self.cfg.workers, |i| -> Result<(Vec<f64>, bool, f64)> {
            let tr = run_trajectory(&cfg, &mut stream(seed, i as u64))?;
            let ok = tr.check_kinematics().is_ok();
            let s = grid.iter().map(|&t| speed_at_time(&tr, t).unwrap_or(f64::NAN)).collect();
            Ok((s, ok, *tr.speeds.last().unwrap()))
        });
        let mut samples = Vec::new();
        let mut final_speed = Moments::new();
        for r in rows {
            let (s, ok, v) = r?;
            self.tally.kinematics_checked += 1;
            self.tally.kinematics_failures += (!ok) as u64;
            samples.push(s);
            final_speed.push(v);
        }
        let f = fit_median_power_law(&grid, &samples)?;
        let (lo, hi) = FULL_MODEL_SLOPE;
        Ok(CriterionResult {
            id: 11,
            name: "growth exponent, full model".into(),
            measured: format!("slope {:.4} +- {:.4} (mean final speed {:.2})", f.slope, f.slope_se, final_speed.mean),
            tolerance: format!("in [{lo}, {hi}]"),
            passed: f.slope >= lo && f.slope <= hi,
            seconds: 0.0,
            details: json!({ "fit": f, "traces": n, "collisions": collisions, "final_speed_mean": final_speed.mean }),
        })
    }

    fn growth_reduced_model(&mut self) -> Result<CriterionResult> {
        let n = self.scale().pick(1000, 100);
        let steps: u64 = self.scale().pick(1_000_000, 100_000);
        let xi0 = 10.0;
        let d2 = REDUCED_MODEL_D;
        let t_at = |k: u64| -> f64 {
            (1..=k).map(|j| 1.0 / (3.0 * d2 * (xi0 * xi0 + 3.0 * j as f64).sqrt()).cbrt()).sum()
        };
        let grid = log_grid(t_at(steps / 100), 0.5 * t_at(steps), 20);
        let spec = XiChainSpec::pure(1.0);
        let seed = self.seed(12);
        let rows = par_map(n, self.cfg.workers, |i| {
            let mut noise = NoiseSource::new(stream(seed, i as u64), NoiseLaw::Rademacher);
            reduced_model_speeds(&spec, xi0, d2, 1.0, steps, &grid, &mut noise)
        });
        let samples = rows.into_iter().collect::<Result<Vec<_>>>()?;
        let missing = samples.iter().flatten().filter(|x| x.is_nan()).count();
        let f = fit_median_power_law(&grid, &samples)?;
        let (lo, hi) = REDUCED_SLOPE;
        Ok(CriterionResult {
            id: 12,
            name: "growth exponent, reduced model".into(),
            measured: format!("slope {:.4} +- {:.4}", f.slope, f.slope_se),
            tolerance: format!("in [{lo}, {hi}]"),
            passed: f.slope >= lo && f.slope <= hi,
            seconds: 0.0,
            details: json!({ "fit": f, "paths": n, "steps": steps, "xi0": xi0, "missing_samples": missing }),
        })
    }

    fn infrastructure(&mut self) -> Result<CriterionResult> {
        let mut identical = true;
        let mut compared = Vec::new();
        for text in DETERMINISM_CONFIGS {
            let mut runs = Vec::new();
            for workers in [1, 8] {
                let mut cfg = crate::harness::parse_config(text)?;
                cfg.master_seed = self.cfg.seed;
                cfg.workers = workers;
                runs.push(crate::harness::run(&cfg)?);
            }
            let same = runs[0].data == runs[1].data && runs[0].summary == runs[1].summary;
            identical &= same;
            compared.push(json!({ "experiment": runs[0].manifest.experiment, "files": runs[0].data.keys().collect::<Vec<_>>(), "identical": same }));
        }
        let t = self.tally;
        Ok(CriterionResult {
            id: 13,
            name: "determinism and structural invariants".into(),
            measured: format!(
                "reruns identical: {identical}; invariant failures {} of {} checks",
                t.failures(),
                t.kinematics_checked + t.aux_checked + t.alpha1_checked
            ),
            tolerance: "identical data at workers 1 and 8; zero invariant failures".into(),
            passed: identical && t.failures() == 0,
            seconds: 0.0,
            details: json!({ "runs": compared, "invariants": t }),
        })
    }
}

/// Scale of the speed map of the reduced model, close to the fitted `D^2` of
/// the default potential; the exponent does not depend on it.
pub const REDUCED_MODEL_D: f64 = 1e-3;

const DETERMINISM_CONFIGS: [&str; 4] = [
    r#"{"experiment":"xi_chain","params":{"gamma":1.0,"xi0":50,"steps":20000,"n_paths":40,"stride":100}}"#,
    r#"{"experiment":"full_chain","params":{"collisions":200,"n_traces":12,"stride":10}}"#,
    r#"{"experiment":"moments","params":{"speeds":[30,60],"n_samples":2000,"n_mc":20000}}"#,
    r#"{"experiment":"aux","params":{"gamma":1.0,"xi0":256,"n_paths":40,"max_transitions":4}}"#,
];

/// Runs the suite with the given configuration.
pub fn run_verify(cfg: VerifyConfig, on_result: impl FnMut(&CriterionResult)) -> Result<(Vec<CriterionResult>, InvariantTally)> {
    let mut suite = Suite::new(cfg);
    let results = suite.run_all(on_result)?;
    Ok((results, suite.tally))
}
