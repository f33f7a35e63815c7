//! Dyadic level process of the scalar chain.
//!
//! The chain is watched on the intervals `J_eta = [2^eta - L, 2^eta + L]`.
//! Starting in `J_eta0`, each stop time is the first later visit to one of the
//! two neighbouring intervals, and the level moves up or down by one. When the
//! level reaches `eta_plus` the process is frozen.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{linear_fit, quantile_sorted, wilson_interval, LineFit, Z99};
use crate::xi_chain::{XiChainSpec, XiPath};

/// Bound on one step of the chain above `xi_plus`.
pub fn step_bound(spec: &XiChainSpec) -> Result<f64> {
    let m = spec.noise.bound();
    let xp = spec.xi_plus();
    if xp < spec.gamma.abs() / m {
        return Err(Error::InvalidInput(format!("xi_plus = {xp} is below |gamma| / M")));
    }
    let mut c = m + spec.gamma.abs() / xp;
    for g in [&spec.g0, &spec.g1].into_iter().flatten() {
        c += g.bound(m)?.at(xp);
    }
    Ok(c)
}

/// Smallest `eta >= 0` with `2^eta > 2 max(xi_plus, c_step)`.
pub fn eta_plus_of(xi_plus: f64, c_step: f64) -> i32 {
    let target = 2.0 * xi_plus.max(c_step);
    let mut eta = 0;
    while 2f64.powi(eta) <= target {
        eta += 1;
    }
    eta
}

/// Midpoint of the admissible range `c_step < L < 2^(eta_plus - 1)`.
pub fn choose_l(c_step: f64, eta_plus: i32) -> Result<f64> {
    let limit = 2f64.powi(eta_plus - 1);
    if !(c_step < limit) {
        return Err(Error::InfeasibleL { c_step, limit });
    }
    Ok(0.5 * (c_step + limit))
}

/// Constants of the level process and the rule sequences of the good sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxParams {
    pub l: f64,
    pub eta_plus: i32,
    pub c_step: f64,
    pub delta: f64,
}

impl AuxParams {
    /// Constants derived from a chain specification.
    pub fn for_spec(spec: &XiChainSpec, delta: f64) -> Result<Self> {
        let c_step = step_bound(spec)?;
        let eta_plus = eta_plus_of(spec.xi_plus(), c_step);
        let l = choose_l(c_step, eta_plus)?;
        let p = AuxParams { l, eta_plus, c_step, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let limit = 2f64.powi(self.eta_plus - 1);
        if !(self.c_step < self.l && self.l < limit) {
            problems.push(format!("need c_step < L < 2^(eta_plus-1), got {} < {} < {limit}", self.c_step, self.l));
        }
        if !(2f64.powi(self.eta_plus) > 2.0 * self.c_step) {
            problems.push(format!("2^eta_plus must exceed 2 c_step = {}", 2.0 * self.c_step));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            problems.push(format!("delta must be finite and >= 0, got {}", self.delta));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Centre of `J_eta`.
    pub fn center(&self, eta: i32) -> f64 {
        2f64.powi(eta)
    }

    /// Thresholds `(lo, hi)`: while the level is `eta`, the next stop happens
    /// as soon as `xi <= lo` (entry into `J_{eta-1}`) or `xi >= hi` (entry
    /// into `J_{eta+1}`).
    pub fn window(&self, eta: i32) -> (f64, f64) {
        (self.center(eta - 1) + self.l, self.center(eta + 1) - self.l)
    }

    /// Level `eta > eta_plus` whose interval contains `xi`, if any.
    pub fn level_of(&self, xi: f64) -> Option<i32> {
        if !(xi > 0.0) {
            return None;
        }
        let eta = xi.log2().round() as i32;
        (eta > self.eta_plus && (xi - self.center(eta)).abs() <= self.l).then_some(eta)
    }

    /// `k^+_ell = ceil(2^(2 delta (eta0 + ell)))`.
    pub fn k_plus(&self, ell: usize, eta0: i32) -> f64 {
        2f64.powf(2.0 * self.delta * (eta0 as f64 + ell as f64)).ceil()
    }

    /// `k^-_ell = min(ceil(delta (eta0 + ell)), ell)`.
    pub fn k_minus(&self, ell: usize, eta0: i32) -> usize {
        let rule = (self.delta * (eta0 as f64 + ell as f64)).ceil().max(0.0) as usize;
        rule.min(ell)
    }

    /// Dwell lower threshold `a_ell`.
    pub fn a(&self, ell: usize, eta0: i32, mu: f64) -> f64 {
        let km = self.k_minus(ell, eta0) as f64;
        let d = self.delta;
        let e = 2.0 * ((1.0 - d) * eta0 as f64 + (mu - d) * (ell as f64 - 1.0 - km));
        2f64.powf(e) * 2f64.powf(-d * km)
    }
}

/// Recorded levels and stop times of one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxTrace {
    /// `eta_0, eta_1, ...` up to absorption or the end of the path.
    pub levels: Vec<i32>,
    /// `tau_0 = 0 < tau_1 < ...`.
    pub stop_times: Vec<u64>,
    /// `xi_{tau_ell} - 2^{eta_ell}`.
    pub offsets: Vec<f64>,
    pub absorbed: bool,
    /// Index of the last value scanned.
    pub scan_end: u64,
}

impl AuxTrace {
    pub fn eta0(&self) -> i32 {
        self.levels[0]
    }

    /// Number of completed transitions.
    pub fn transitions(&self) -> usize {
        self.levels.len() - 1
    }

    /// The path ended before absorption, in the middle of a dwell.
    pub fn censored(&self) -> bool {
        !self.absorbed
    }

    /// Steps spent in the last, unfinished dwell.
    pub fn open_dwell(&self) -> Option<u64> {
        self.censored().then(|| self.scan_end - self.stop_times.last().unwrap())
    }

    /// Completed dwell times `tau_ell - tau_{ell-1}` for `ell >= 1`.
    pub fn dwells(&self) -> impl Iterator<Item = u64> + '_ {
        self.stop_times.windows(2).map(|w| w[1] - w[0])
    }

    /// Checks the definitional invariants.
    pub fn check_structure(&self, l: f64) -> std::result::Result<(), String> {
        let n = self.levels.len();
        if n == 0 || self.stop_times.len() != n || self.offsets.len() != n {
            return Err("inconsistent lengths".into());
        }
        if self.stop_times[0] != 0 {
            return Err("tau_0 must be 0".into());
        }
        for i in 1..n {
            if (self.levels[i] - self.levels[i - 1]).abs() != 1 {
                return Err(format!("level jump {} -> {} at ell = {i}", self.levels[i - 1], self.levels[i]));
            }
            if self.stop_times[i] <= self.stop_times[i - 1] {
                return Err(format!("stop times not increasing at ell = {i}"));
            }
        }
        if let Some(i) = self.offsets.iter().position(|o| !(o.abs() <= l)) {
            return Err(format!("xi_tau outside J at ell = {i} (offset {})", self.offsets[i]));
        }
        if self.scan_end < *self.stop_times.last().unwrap() {
            return Err("scan ended before the last stop time".into());
        }
        Ok(())
    }

    /// CSV rows `ell, eta, tau, offset, censored`; only the last row of a
    /// censored trace is marked.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["ell", "eta", "tau", "offset", "censored"])?;
        let last = self.levels.len() - 1;
        for i in 0..=last {
            out.write_record([
                i.to_string(),
                self.levels[i].to_string(),
                self.stop_times[i].to_string(),
                self.offsets[i].to_string(),
                (i == last && self.censored()).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Incremental construction of an [`AuxTrace`] from a stream of chain values.
#[derive(Debug, Clone)]
pub struct AuxScanner {
    params: AuxParams,
    trace: AuxTrace,
    lo: f64,
    hi: f64,
}

impl AuxScanner {
    /// Starts a trace at `xi0`, which must lie in some `J_eta0`, `eta0 > eta_plus`.
    pub fn new(params: AuxParams, xi0: f64) -> Result<Self> {
        let eta0 = params.level_of(xi0).ok_or(Error::OffGridStart { xi0 })?;
        let (lo, hi) = params.window(eta0);
        Ok(AuxScanner {
            params,
            trace: AuxTrace {
                levels: vec![eta0],
                stop_times: vec![0],
                offsets: vec![xi0 - params.center(eta0)],
                absorbed: false,
                scan_end: 0,
            },
            lo,
            hi,
        })
    }

    pub fn level(&self) -> i32 {
        *self.trace.levels.last().unwrap()
    }

    pub fn absorbed(&self) -> bool {
        self.trace.absorbed
    }

    pub fn transitions(&self) -> usize {
        self.trace.transitions()
    }

    /// Current thresholds, see [`AuxParams::window`].
    pub fn window(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Feeds `xi_k`. Returns true when this value is a stop time.
    #[inline]
    pub fn observe(&mut self, k: u64, xi: f64) -> bool {
        if self.trace.absorbed {
            return false;
        }
        self.trace.scan_end = k;
        let eta = self.level();
        let next = if xi >= self.hi {
            eta + 1
        } else if xi <= self.lo {
            eta - 1
        } else {
            return false;
        };
        self.trace.levels.push(next);
        self.trace.stop_times.push(k);
        self.trace.offsets.push(xi - self.params.center(next));
        if next <= self.params.eta_plus {
            self.trace.absorbed = true;
        } else {
            (self.lo, self.hi) = self.params.window(next);
        }
        true
    }

    /// Marks `k` as the last index scanned and returns the trace.
    pub fn finish(mut self, k: u64) -> AuxTrace {
        if !self.trace.absorbed {
            self.trace.scan_end = self.trace.scan_end.max(k);
        }
        self.trace
    }
}

/// Level process of a stored path.
pub fn build_aux_trace(path: &XiPath, params: &AuxParams) -> Result<AuxTrace> {
    let (&xi0, rest) = path.values.split_first().ok_or(Error::EmptyPath)?;
    let mut scan = AuxScanner::new(*params, xi0)?;
    for (i, &xi) in rest.iter().enumerate() {
        scan.observe(i as u64 + 1, xi);
        if scan.absorbed() {
            break;
        }
    }
    Ok(scan.finish(rest.len() as u64))
}

/// Stopping rule of an ensemble of level traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxRun {
    pub xi0: f64,
    pub n_paths: usize,
    /// Stop after this many transitions.
    pub max_transitions: usize,
    /// Stop on arrival at this level.
    pub stop_level: i32,
    /// Stop after this many chain steps.
    pub step_budget: u64,
}

const AUX_CHUNKS: usize = 64;

/// Level traces of independent pure Rademacher chains; path `i` uses
/// `stream(seed, i)`. Paths stopped by the rule are censored traces.
pub fn pure_aux_ensemble(gamma: f64, params: &AuxParams, run: &AuxRun, seed: u64, workers: usize) -> Result<Vec<AuxTrace>> {
    use crate::ensemble::par_map;
    use crate::rng::stream;
    use crate::xi_chain::{drive_pure_lanes, Lane, LaneControl, NoiseLaw, NoiseSource};

    let probe = AuxScanner::new(*params, run.xi0)?;
    let parts = par_map(AUX_CHUNKS, workers, |c| {
        let first = run.n_paths * c / AUX_CHUNKS;
        let last = run.n_paths * (c + 1) / AUX_CHUNKS;
        let mut scanners: Vec<Option<AuxScanner>> = vec![Some(probe.clone()); last - first];
        let mut done: Vec<Option<AuxTrace>> = vec![None; last - first];
        let mut next = first;
        let (lo, hi) = probe.window();
        drive_pure_lanes::<_, 4>(
            gamma,
            || {
                (next < last).then(|| {
                    next += 1;
                    Lane {
                        id: next - 1 - first,
                        noise: NoiseSource::new(stream(seed, (next - 1) as u64), NoiseLaw::Rademacher),
                        xi: run.xi0,
                        lo,
                        hi,
                        budget: run.step_budget,
                        steps: 0,
                    }
                })
            },
            |lane| {
                let scan = scanners[lane.id].as_mut().unwrap();
                scan.observe(lane.steps, lane.xi);
                let stop = scan.absorbed()
                    || lane.steps >= run.step_budget
                    || scan.transitions() >= run.max_transitions
                    || scan.level() >= run.stop_level;
                if stop {
                    done[lane.id] = Some(scanners[lane.id].take().unwrap().finish(lane.steps));
                    LaneControl::Finish
                } else {
                    let (lo, hi) = scan.window();
                    LaneControl::Continue { lo, hi, budget: run.step_budget }
                }
            },
        );
        done.into_iter().map(|t| t.expect("every lane finishes")).collect::<Vec<_>>()
    });
    Ok(parts.into_iter().flatten().collect())
}

/// Pooled up-jump frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEstimate {
    pub p_hat: f64,
    /// 99% Wilson interval.
    pub ci: (f64, f64),
    pub up: u64,
    pub total: u64,
}

/// Up-fraction over all transitions leaving a level `eta_ell > eta_threshold`.
pub fn jump_prob_estimate(traces: &[AuxTrace], eta_threshold: i32) -> Result<JumpEstimate> {
    if traces.is_empty() {
        return Err(Error::InvalidInput("no traces".into()));
    }
    let (mut up, mut total) = (0u64, 0u64);
    for t in traces {
        for w in t.levels.windows(2) {
            if w[0] > eta_threshold {
                total += 1;
                up += (w[1] > w[0]) as u64;
            }
        }
    }
    if total == 0 {
        return Err(Error::NoTransitions);
    }
    Ok(JumpEstimate { p_hat: up as f64 / total as f64, ci: wilson_interval(up, total, Z99), up, total })
}

/// Mean level `E[eta_ell]` for `ell = 0..=max_ell`, built from the mean
/// increment at each step over the traces that reached it. Absorbed traces
/// contribute zero increments after absorption; censored traces drop out.
pub fn mean_level_curve(traces: &[AuxTrace], max_ell: usize) -> Vec<(usize, f64, u64)> {
    if traces.is_empty() {
        return Vec::new();
    }
    let eta0 = traces.iter().map(|t| t.eta0() as f64).sum::<f64>() / traces.len() as f64;
    let mut out = vec![(0, eta0, traces.len() as u64)];
    let mut level = eta0;
    for j in 0..max_ell {
        let (mut sum, mut n, mut live) = (0.0, 0u64, 0u64);
        for t in traces {
            if j < t.transitions() {
                sum += (t.levels[j + 1] - t.levels[j]) as f64;
                n += 1;
                live += 1;
            } else if t.absorbed {
                n += 1;
            }
        }
        if live == 0 {
            break;
        }
        level += sum / n as f64;
        out.push((j + 1, level, n));
    }
    out
}

/// Least-squares slope of the mean level against `ell`.
pub fn drift_slope(traces: &[AuxTrace], max_ell: usize) -> Option<LineFit> {
    let curve = mean_level_curve(traces, max_ell);
    let x: Vec<f64> = curve.iter().map(|c| c.0 as f64).collect();
    let y: Vec<f64> = curve.iter().map(|c| c.1).collect();
    linear_fit(&x, &y)
}

/// Median normalized dwell at one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelDwell {
    pub eta: i32,
    pub n: usize,
    pub median: f64,
}

/// `P(X > m)` for the normalized dwell `X`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalPoint {
    pub m: f64,
    pub survival: f64,
    pub se: f64,
}

/// Statistics of `X = (tau_ell - tau_{ell-1}) / 2^(2 eta_{ell-1})` over
/// completed dwells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwellStats {
    pub n: usize,
    pub censored: usize,
    /// Quantiles at 0.1, 0.25, 0.5, 0.75, 0.9.
    pub quantiles: [f64; 5],
    pub per_level: Vec<LevelDwell>,
    pub survival: Vec<SurvivalPoint>,
    /// Fit of `ln P(X > m)` against `m` over the survival points.
    pub tail_fit: Option<LineFit>,
}

impl DwellStats {
    pub fn median(&self) -> f64 {
        self.quantiles[2]
    }

    pub fn survival_at(&self, m: f64) -> Option<SurvivalPoint> {
        self.survival.iter().copied().find(|s| s.m == m)
    }
}

/// Normalized dwells `(eta_{ell-1}, X)` of a set of traces.
pub fn normalized_dwells(traces: &[AuxTrace]) -> Vec<(i32, f64)> {
    let mut out = Vec::new();
    for t in traces {
        for (i, d) in t.dwells().enumerate() {
            let eta = t.levels[i];
            out.push((eta, d as f64 / 4f64.powi(eta)));
        }
    }
    out
}

/// Dwell-time summary; `survival_m` are the points where `P(X > m)` is
/// evaluated.
pub fn dwell_stats(traces: &[AuxTrace], survival_m: &[f64]) -> DwellStats {
    let pairs = normalized_dwells(traces);
    let censored = traces.iter().filter(|t| t.censored()).count();
    let mut xs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    let quantiles = if n == 0 {
        [f64::NAN; 5]
    } else {
        [0.1, 0.25, 0.5, 0.75, 0.9].map(|q| quantile_sorted(&xs, q))
    };
    let mut levels: Vec<i32> = pairs.iter().map(|p| p.0).collect();
    levels.sort_unstable();
    levels.dedup();
    let per_level = levels
        .into_iter()
        .map(|eta| {
            let mut v: Vec<f64> = pairs.iter().filter(|p| p.0 == eta).map(|p| p.1).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            LevelDwell { eta, n: v.len(), median: quantile_sorted(&v, 0.5) }
        })
        .collect();
    let survival: Vec<SurvivalPoint> = survival_m
        .iter()
        .map(|&m| {
            let above = n - xs.partition_point(|&x| x <= m);
            let p = if n == 0 { f64::NAN } else { above as f64 / n as f64 };
            SurvivalPoint { m, survival: p, se: (p * (1.0 - p) / n as f64).sqrt() }
        })
        .collect();
    let usable: Vec<&SurvivalPoint> = survival.iter().filter(|s| s.survival > 0.0).collect();
    let tail_fit = linear_fit(
        &usable.iter().map(|s| s.m).collect::<Vec<_>>(),
        &usable.iter().map(|s| s.survival.ln()).collect::<Vec<_>>(),
    );
    DwellStats { n, censored, quantiles, per_level, survival, tail_fit }
}

/// Fractions of traces in the good sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GOccupancy {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub g_all: f64,
    pub n: usize,
}

/// Membership of one trace in `(G1, G2, G3)` over its realized horizon.
pub fn g_membership(trace: &AuxTrace, params: &AuxParams, mu: f64) -> (bool, bool, bool) {
    let eta0 = trace.eta0();
    let d = params.delta;
    let e0 = eta0 as f64;
    let g1 = trace
        .levels
        .iter()
        .enumerate()
        .all(|(ell, &eta)| (eta as f64 - mu * ell as f64 - e0).abs() <= d * (ell as f64 + e0));
    let dwells: Vec<f64> = trace.dwells().map(|x| x as f64).collect();
    let upper = |ell: usize| params.k_plus(ell - 1, eta0) * 4f64.powi(trace.levels[ell - 1]);
    let mut g2 = dwells.iter().enumerate().all(|(i, &dt)| dt <= upper(i + 1));
    // an unfinished dwell that already exceeds its bound is a known violation
    if let Some(open) = trace.open_dwell() {
        let ell = trace.levels.len();
        g2 &= (open as f64) <= params.k_plus(ell - 1, eta0) * 4f64.powi(trace.levels[ell - 1]);
    }
    let g3 = (1..=dwells.len()).all(|ell| {
        let a = params.a(ell, eta0, mu);
        let first = (ell - params.k_minus(ell, eta0)).max(1);
        (first..=ell).any(|k| dwells[k - 1] >= a)
    });
    (g1, g2, g3)
}

pub fn g_set_occupancy(traces: &[AuxTrace], params: &AuxParams, mu: f64) -> GOccupancy {
    let n = traces.len();
    let (mut c1, mut c2, mut c3, mut call) = (0usize, 0usize, 0usize, 0usize);
    for t in traces {
        let (a, b, c) = g_membership(t, params, mu);
        c1 += a as usize;
        c2 += b as usize;
        c3 += c as usize;
        call += (a && b && c) as usize;
    }
    let f = |c: usize| if n == 0 { f64::NAN } else { c as f64 / n as f64 };
    GOccupancy { g1: f(c1), g2: f(c2), g3: f(c3), g_all: f(call), n }
}
