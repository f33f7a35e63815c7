//! Run configuration, experiment dispatch and result bundles.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::aux_process::{
    drift_slope, dwell_stats, g_set_occupancy, jump_prob_estimate, pure_aux_ensemble, AuxParams, AuxRun,
};
use crate::bessel::{bessel_exit_time_mc, exit_prob_exact, mean_square_curve, mu, BesselParams};
use crate::ensemble::{default_workers, par_map};
use crate::error::{Error, Result};
use crate::estimators::{d_squared_quadrature, estimate_transfer_moments, exit_prob_mc, MomentConfig};
use crate::particle_chain::{run_trajectory, ChainConfig, LambdaLaw};
use crate::potential::{PotentialSpec, DEFAULT_AMPLITUDE, DEFAULT_OMEGA};
use crate::rng::stream;
use crate::stats::linear_fit;
use crate::verify::{run_verify, CriterionResult, Scale, VerifyConfig};
use crate::xi_chain::{gamma_from_dim, simulate_xi, NoiseLaw, NoiseSource, XiChainSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    FullChain,
    #[default]
    XiChain,
    Bessel,
    Moments,
    Aux,
    ExitProb,
    Verify,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::FullChain => "full_chain",
            Experiment::XiChain => "xi_chain",
            Experiment::Bessel => "bessel",
            Experiment::Moments => "moments",
            Experiment::Aux => "aux",
            Experiment::ExitProb => "exit_prob",
            Experiment::Verify => "verify",
        }
    }
}

/// Experiment parameters. Each experiment reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub d: usize,
    /// Defaults to `(d - 2) / 6`.
    pub gamma: Option<f64>,
    pub mean_free_path: f64,
    pub noise: NoiseLaw,
    pub amplitude: f64,
    pub omega: Vec<f64>,
    pub lambda_law: LambdaLaw,
    pub tol: Option<f64>,
    pub xi0: f64,
    pub steps: u64,
    pub n_paths: usize,
    /// Keep every `stride`-th point in the CSV output.
    pub stride: usize,
    pub v0: f64,
    pub collisions: usize,
    pub n_traces: usize,
    pub speeds: Vec<f64>,
    pub n_samples: usize,
    pub n_mc: usize,
    pub dt: f64,
    pub horizon: f64,
    pub a_minus: f64,
    pub a_plus: f64,
    pub delta: f64,
    pub max_transitions: usize,
    pub stop_level: Option<i32>,
    pub scale: Scale,
    pub criteria: Option<Vec<u32>>,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            d: 8,
            gamma: None,
            mean_free_path: 1.0,
            noise: NoiseLaw::Rademacher,
            amplitude: DEFAULT_AMPLITUDE,
            omega: vec![DEFAULT_OMEGA],
            lambda_law: LambdaLaw::Uniform,
            tol: None,
            xi0: 50.0,
            steps: 100_000,
            n_paths: 100,
            stride: 1000,
            v0: 30.0,
            collisions: 1000,
            n_traces: 10,
            speeds: vec![30.0, 50.0, 80.0, 130.0, 210.0],
            n_samples: 100_000,
            n_mc: 100_000,
            dt: 1e-4,
            horizon: 1.0,
            a_minus: 0.5,
            a_plus: 2.0,
            delta: 0.2,
            max_transitions: 8,
            stop_level: None,
            scale: Scale::Full,
            criteria: None,
        }
    }
}

impl Params {
    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or_else(|| gamma_from_dim(self.d))
    }

    fn xi_spec(&self) -> XiChainSpec {
        let mut s = XiChainSpec::pure(self.gamma());
        s.noise = self.noise;
        s
    }

    fn potential(&self) -> Result<PotentialSpec> {
        PotentialSpec::new(self.d, self.amplitude, self.omega.clone())
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// One experiment invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub experiment: Experiment,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let mut v = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                v.push(msg)
            }
        };
        need(self.workers >= 1, "workers must be >= 1".into());
        need(p.d >= 2, format!("params.d = {} must be >= 2", p.d));
        need(p.gamma().is_finite(), "params.gamma must be finite".into());
        need(p.mean_free_path > 0.0, format!("params.mean_free_path = {} must be > 0", p.mean_free_path));
        need(p.amplitude.is_finite(), "params.amplitude must be finite".into());
        need(!p.omega.is_empty(), "params.omega must have at least one component".into());
        if let Some(t) = p.tol {
            need(t > 0.0 && t <= 1e-3, format!("params.tol = {t} outside (0, 1e-3]"));
        }
        need(p.xi0 > 0.0, format!("params.xi0 = {} must be > 0", p.xi0));
        need(p.steps >= 1, "params.steps must be >= 1".into());
        need(p.n_paths >= 1, "params.n_paths must be >= 1".into());
        need(p.stride >= 1, "params.stride must be >= 1".into());
        need(p.v0 > 0.0, format!("params.v0 = {} must be > 0", p.v0));
        need(p.n_traces >= 1, "params.n_traces must be >= 1".into());
        need(!p.speeds.is_empty() && p.speeds.iter().all(|s| *s > 0.0), "params.speeds must be positive and nonempty".into());
        need(p.dt > 0.0 && p.dt < p.horizon, format!("need 0 < params.dt < params.horizon, got {} and {}", p.dt, p.horizon));
        need(
            p.a_minus > 0.0 && p.a_minus < 1.0 && p.a_plus > 1.0,
            format!("need 0 < a_minus < 1 < a_plus, got {} and {}", p.a_minus, p.a_plus),
        );
        need(p.delta >= 0.0, format!("params.delta = {} must be >= 0", p.delta));
        let transient = matches!(
            self.experiment,
            Experiment::Verify | Experiment::Bessel | Experiment::Aux
        );
        if transient {
            need(p.gamma() > 0.5, format!("{} requires gamma > 1/2, got {}", self.experiment.name(), p.gamma()));
        }
        if let Err(e) = p.potential() {
            v.push(format!("potential: {e}"));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

/// Parses and validates a JSON configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
        location: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub config: RunConfig,
    pub code_version: String,
    pub master_seed: u64,
    pub workers: usize,
    /// Seconds since the Unix epoch; the only field that changes on reruns.
    pub created_unix: u64,
}

/// Failure of one trace that did not stop its siblings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceError {
    pub index: usize,
    pub error: String,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub manifest: Manifest,
    /// CSV files by name.
    pub data: BTreeMap<String, Vec<u8>>,
    pub summary: Value,
    pub criteria: Vec<CriterionResult>,
    pub errors: Vec<TraceError>,
}

struct Table {
    w: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(header: &[&str]) -> Result<Self> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        Ok(Table { w })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        self.w.write_record(fields)?;
        Ok(())
    }

    fn bytes(self) -> Result<Vec<u8>> {
        self.w.into_inner().map_err(|e| Error::Io(e.to_string()))
    }
}

fn manifest(cfg: &RunConfig) -> Manifest {
    Manifest {
        experiment: cfg.experiment.name().into(),
        config: cfg.clone(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        master_seed: cfg.master_seed,
        workers: cfg.workers,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    }
}

/// Runs the configured experiment in memory.
pub fn run(cfg: &RunConfig) -> Result<ResultBundle> {
    run_with(cfg, |_| {})
}

/// Like [`run`]; `on_result` sees each verify criterion as it finishes.
pub fn run_with(cfg: &RunConfig, on_result: impl FnMut(&CriterionResult)) -> Result<ResultBundle> {
    cfg.validate()?;
    let mut bundle = ResultBundle {
        manifest: manifest(cfg),
        data: BTreeMap::new(),
        summary: Value::Null,
        criteria: Vec::new(),
        errors: Vec::new(),
    };
    let p = &cfg.params;
    let (seed, workers) = (cfg.master_seed, cfg.workers);
    match cfg.experiment {
        Experiment::XiChain => {
            let spec = p.xi_spec();
            spec.validate()?;
            let rows = par_map(p.n_paths, workers, |i| {
                let mut noise = NoiseSource::new(stream(seed, i as u64), spec.noise);
                let mut kept = Vec::new();
                let r = simulate_xi(&spec, p.xi0, p.steps, &mut noise, |k, x| {
                    if k % p.stride as u64 == 0 || k == p.steps {
                        kept.push((k, x));
                    }
                    true
                });
                (kept, r.err())
            });
            let mut t = Table::new(&["path", "k", "xi"])?;
            let mut finals = Vec::new();
            for (i, (kept, err)) in rows.into_iter().enumerate() {
                if let Some(e) = err {
                    bundle.errors.push(TraceError { index: i, error: e.to_string() });
                } else if let Some(&(_, x)) = kept.last() {
                    finals.push(x * x);
                }
                for (k, x) in kept {
                    t.row(&[i.to_string(), k.to_string(), x.to_string()])?;
                }
            }
            bundle.data.insert("paths.csv".into(), t.bytes()?);
            let mean_sq = finals.iter().sum::<f64>() / finals.len().max(1) as f64;
            bundle.summary = json!({
                "gamma": spec.gamma, "xi0": p.xi0, "steps": p.steps, "paths": p.n_paths,
                "final_mean_square": mean_sq,
                "predicted_mean_square_lower_bound": p.xi0 * p.xi0 + (2.0 * spec.gamma + 1.0) * p.steps as f64,
            });
        }
        Experiment::FullChain => {
            let mut v0 = vec![0.0; p.d];
            v0[0] = p.v0;
            let mut chain = ChainConfig::new(p.potential()?, v0, p.collisions);
            chain.mean_free_path = p.mean_free_path;
            chain.lambda_law = p.lambda_law;
            if let Some(t) = p.tol {
                chain.tol = t;
            }
            chain.validate()?;
            let traces = par_map(p.n_traces, workers, |i| run_trajectory(&chain, &mut stream(seed, i as u64)));
            let mut t = Table::new(&["trace", "n", "t", "speed"])?;
            let mut trapped = 0;
            for (i, tr) in traces.iter().enumerate() {
                match tr {
                    Ok(tr) => {
                        trapped += tr.trapped_at.is_some() as usize;
                        for n in (0..tr.len()).filter(|n| n % p.stride == 0 || *n + 1 == tr.len()) {
                            t.row(&[i.to_string(), n.to_string(), tr.times[n].to_string(), tr.speeds[n].to_string()])?;
                        }
                    }
                    Err(e) => bundle.errors.push(TraceError { index: i, error: e.to_string() }),
                }
            }
            bundle.data.insert("traces.csv".into(), t.bytes()?);
            bundle.summary = json!({ "traces": p.n_traces, "collisions": p.collisions, "trapped": trapped });
        }
        Experiment::Bessel => {
            let params = BesselParams { gamma: p.gamma(), r0: 1.0, dt: p.dt, horizon: p.horizon };
            let stride = (params.n_steps() / 100).max(1);
            let ms = mean_square_curve(&params, p.n_paths, stride, seed, workers)?;
            let mut t = Table::new(&["t", "mean_r2", "se"])?;
            for i in 0..ms.times.len() {
                t.row(&[ms.times[i].to_string(), ms.mean[i].to_string(), ms.se[i].to_string()])?;
            }
            bundle.data.insert("mean_square.csv".into(), t.bytes()?);
            let fit = linear_fit(&ms.times, &ms.mean);
            let exit = bessel_exit_time_mc(&params, p.a_minus, p.a_plus, p.n_paths, crate::rng::derive_seed(seed, 1), workers)?;
            bundle.summary = json!({
                "gamma": params.gamma, "mean_square_slope": fit.map(|f| f.slope), "predicted_slope": 2.0 * params.gamma + 1.0,
                "exit": exit, "exit_exact": exit_prob_exact(params.gamma, p.a_minus, p.a_plus)?,
                "degenerate": ms.degenerate, "subdivisions": ms.subdivisions,
            });
        }
        Experiment::Moments => {
            let spec = p.potential()?;
            let mut mc = MomentConfig::new(p.speeds.clone(), p.n_samples);
            mc.lambda_law = p.lambda_law;
            if let Some(t) = p.tol {
                mc.tol = t;
            }
            mc.seed = seed;
            mc.workers = workers;
            let fit = estimate_transfer_moments(&spec, &mc)?;
            let q = d_squared_quadrature(&spec, p.lambda_law, p.n_mc, crate::rng::derive_seed(seed, 2), workers)?;
            let mut t = Table::new(&["speed", "mean_de", "mean_de_se", "mean_de2", "mean_de2_se", "collisions", "trapped"])?;
            for m in &fit.per_speed {
                t.row(&[
                    m.speed.to_string(),
                    m.mean_de().to_string(),
                    m.mean_de_se().to_string(),
                    m.mean_de2().to_string(),
                    m.mean_de2_se().to_string(),
                    m.collisions.to_string(),
                    m.trapped.to_string(),
                ])?;
            }
            bundle.data.insert("moments.csv".into(), t.bytes()?);
            bundle.summary = json!({ "fit": fit, "d2_quadrature": q, "predicted_ratio": (p.d as f64 - 3.0) / 2.0 });
        }
        Experiment::Aux => {
            let spec = p.xi_spec();
            if spec.noise != NoiseLaw::Rademacher {
                return Err(Error::Validation(vec!["aux runs use Rademacher noise".into()]));
            }
            let params = AuxParams::for_spec(&spec, p.delta)?;
            let eta0 = params.level_of(p.xi0).ok_or(Error::OffGridStart { xi0: p.xi0 })?;
            let run = AuxRun {
                xi0: p.xi0,
                n_paths: p.n_paths,
                max_transitions: p.max_transitions,
                stop_level: p.stop_level.unwrap_or(i32::MAX),
                step_budget: p.steps,
            };
            let traces = pure_aux_ensemble(spec.gamma, &params, &run, seed, workers)?;
            let mut t = Table::new(&["path", "ell", "eta", "tau", "offset", "censored"])?;
            for (i, tr) in traces.iter().enumerate() {
                let last = tr.levels.len() - 1;
                for ell in 0..=last {
                    t.row(&[
                        i.to_string(),
                        ell.to_string(),
                        tr.levels[ell].to_string(),
                        tr.stop_times[ell].to_string(),
                        tr.offsets[ell].to_string(),
                        (ell == last && tr.censored()).to_string(),
                    ])?;
                }
            }
            bundle.data.insert("aux_traces.csv".into(), t.bytes()?);
            let m = mu(spec.gamma)?;
            bundle.summary = json!({
                "params": params, "eta0": eta0,
                "jump": jump_prob_estimate(&traces, eta0 - 3).ok(),
                "drift": drift_slope(&traces, p.max_transitions),
                "mu": m,
                "dwell": dwell_stats(&traces, &[0.5, 1.0, 2.0, 3.0]),
                "occupancy": g_set_occupancy(&traces, &params, m),
            });
        }
        Experiment::ExitProb => {
            let e = exit_prob_mc(&p.xi_spec(), p.xi0, p.a_minus, p.a_plus, p.n_paths, seed, workers)?;
            bundle.summary = json!({
                "estimate": e,
                "bessel_limit": if p.gamma() > 0.5 { exit_prob_exact(p.gamma(), p.a_minus, p.a_plus).ok() } else { None },
            });
        }
        Experiment::Verify => {
            let vc = VerifyConfig { scale: p.scale, seed, workers, criteria: p.criteria.clone() };
            let (results, tally) = run_verify(vc, on_result)?;
            bundle.summary = json!({
                "passed": results.iter().filter(|r| r.passed).count(),
                "total": results.len(),
                "invariants": tally,
            });
            bundle.criteria = results;
        }
    }
    Ok(bundle)
}

impl ResultBundle {
    /// Directory name of the bundle inside the output directory.
    pub fn dir_name(&self) -> String {
        format!("{}_seed{}", self.manifest.experiment, self.manifest.master_seed)
    }

    /// Writes the bundle under `output_dir` through a staging directory and a
    /// rename, so an interrupted write leaves no partial bundle. An existing
    /// bundle of the same name is replaced; any other existing directory is
    /// left alone and reported as an error.
    pub fn write(&self, output_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(output_dir)?;
        let target = output_dir.join(self.dir_name());
        let staging = output_dir.join(format!(".{}.partial-{}", self.dir_name(), std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging)?;
        let write_all = || -> Result<()> {
            fs::write(staging.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest).unwrap())?;
            fs::write(staging.join("summary.json"), serde_json::to_vec_pretty(&self.summary).unwrap())?;
            if !self.criteria.is_empty() {
                fs::write(staging.join("criteria.json"), serde_json::to_vec_pretty(&self.criteria).unwrap())?;
            }
            if !self.errors.is_empty() {
                fs::write(staging.join("errors.json"), serde_json::to_vec_pretty(&self.errors).unwrap())?;
            }
            for (name, bytes) in &self.data {
                fs::write(staging.join(name), bytes)?;
            }
            Ok(())
        };
        if let Err(e) = write_all() {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
        if target.exists() {
            if !target.join("manifest.json").exists() {
                let _ = fs::remove_dir_all(&staging);
                return Err(Error::Io(format!("{} exists and is not a result bundle", target.display())));
            }
            fs::remove_dir_all(&target)?;
        }
        fs::rename(&staging, &target)?;
        Ok(target)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty() && self.criteria.is_empty() && self.summary.is_null()
    }
}

/// Human-readable summary and the process exit code: 0 when every criterion
/// passed (or none were run), 1 when any failed, 2 for an empty bundle.
pub fn emit_report(bundle: &ResultBundle) -> (String, i32) {
    if bundle.is_empty() {
        return ("error: empty result bundle\n".into(), 2);
    }
    let mut out = format!(
        "experiment {} (seed {}, workers {})\n",
        bundle.manifest.experiment, bundle.manifest.master_seed, bundle.manifest.workers
    );
    for (name, bytes) in &bundle.data {
        out.push_str(&format!("  {name}: {} bytes\n", bytes.len()));
    }
    if !bundle.errors.is_empty() {
        out.push_str(&format!("  {} trace(s) failed\n", bundle.errors.len()));
    }
    if bundle.criteria.is_empty() {
        out.push_str(&serde_json::to_string_pretty(&bundle.summary).unwrap());
        out.push('\n');
        return (out, 0);
    }
    out.push_str(&format!("{:<4} {:>3}  {:<44} {:<60} {}\n", "", "id", "criterion", "measured", "tolerance"));
    for c in &bundle.criteria {
        out.push_str(&format!(
            "{:<4} {:>3}  {:<44} {:<60} {}{}\n",
            if c.passed { "ok" } else { "FAIL" },
            c.id,
            c.name,
            c.measured,
            c.tolerance,
            if c.passed { "" } else { "   <--" }
        ));
    }
    let failed = bundle.criteria.iter().filter(|c| !c.passed).count();
    out.push_str(&format!("{} of {} criteria passed\n", bundle.criteria.len() - failed, bundle.criteria.len()));
    (out, if failed > 0 { 1 } else { 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = parse_config("{}").unwrap();
        assert_eq!(c.master_seed, 0);
        assert_eq!(c.params, Params::default());
        assert_eq!(c.params.gamma(), 1.0);
        assert_eq!(c.params.mean_free_path, 1.0);
        assert_eq!(c.params.noise, NoiseLaw::Rademacher);
    }

    #[test]
    fn xi_chain_config_is_accepted() {
        let c = parse_config(r#"{"experiment":"xi_chain","params":{"gamma":1.0,"xi0":50,"steps":1000000}}"#).unwrap();
        assert_eq!(c.experiment, Experiment::XiChain);
        assert_eq!(c.params.steps, 1_000_000);
    }

    #[test]
    fn verify_requires_transient_gamma() {
        let e = parse_config(r#"{"experiment":"verify","params":{"gamma":0.4}}"#).unwrap_err();
        assert!(matches!(e, Error::Validation(ref v) if v.iter().any(|m| m.contains("gamma > 1/2"))), "{e}");
    }

    #[test]
    fn every_violation_is_listed() {
        let e = parse_config(r#"{"workers":0,"params":{"xi0":-1,"dt":5,"a_minus":2}}"#).unwrap_err();
        match e {
            Error::Validation(v) => assert!(v.len() >= 4, "{v:?}"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn parse_errors_carry_location_and_field() {
        let e = parse_config("{\n  \"params\": {\"xi_0\": 3}\n}").unwrap_err();
        match e {
            Error::Parse { location, message } => {
                assert!(location.starts_with("line 2"), "{location}");
                assert!(message.contains("xi_0"), "{message}");
            }
            other => panic!("{other}"),
        }
        assert!(matches!(parse_config("{"), Err(Error::Parse { .. })));
    }

    #[test]
    fn reruns_and_worker_counts_give_identical_data() {
        let mut c = parse_config(r#"{"params":{"xi0":20,"steps":5000,"n_paths":9,"stride":50}}"#).unwrap();
        c.workers = 1;
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        c.workers = 4;
        let d = run(&c).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.data, d.data);
    }

    #[test]
    fn failing_traces_do_not_abort_siblings() {
        let c = parse_config(r#"{"params":{"gamma":0.0,"xi0":1.5,"steps":20000,"n_paths":20,"stride":1000}}"#).unwrap();
        let b = run(&c).unwrap();
        assert!(!b.errors.is_empty());
        let text = String::from_utf8(b.data["paths.csv"].clone()).unwrap();
        assert!(text.lines().count() > 20);
    }

    #[test]
    fn bundle_is_written_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = parse_config(r#"{"params":{"steps":100,"n_paths":2,"stride":10}}"#).unwrap();
        c.output_dir = dir.path().to_path_buf();
        let b = run(&c).unwrap();
        let target = b.write(dir.path()).unwrap();
        assert!(target.join("manifest.json").exists());
        assert_eq!(fs::read(target.join("paths.csv")).unwrap(), b.data["paths.csv"]);
        // rewriting replaces the previous bundle
        b.write(dir.path()).unwrap();
        let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
        // a foreign directory with the bundle's name is not touched
        let other = tempfile::tempdir().unwrap();
        fs::create_dir(other.path().join(b.dir_name())).unwrap();
        assert!(b.write(other.path()).is_err());
        assert_eq!(fs::read_dir(other.path()).unwrap().count(), 1);
    }

    fn bundle_with(criteria: Vec<CriterionResult>) -> ResultBundle {
        ResultBundle {
            manifest: manifest(&parse_config("{}").unwrap()),
            data: BTreeMap::new(),
            summary: json!({}),
            criteria,
            errors: vec![],
        }
    }

    fn criterion(id: u32, passed: bool) -> CriterionResult {
        CriterionResult {
            id,
            name: "c".into(),
            measured: "m".into(),
            tolerance: "t".into(),
            passed,
            seconds: 0.0,
            details: Value::Null,
        }
    }

    #[test]
    fn report_exit_codes() {
        assert_eq!(emit_report(&bundle_with(vec![criterion(1, true), criterion(2, true)])).1, 0);
        let (text, code) = emit_report(&bundle_with(vec![criterion(1, true), criterion(2, false)]));
        assert_eq!(code, 1);
        assert!(text.lines().any(|l| l.starts_with("FAIL") && l.ends_with("<--")));
        let mut empty = bundle_with(vec![]);
        empty.summary = Value::Null;
        assert_eq!(emit_report(&empty).1, 2);
    }
}
