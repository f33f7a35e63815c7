//! Scalar chain `xi_{k+1} = xi_k + omega_k + gamma / xi_k (+ G0 + G1)` for the
//! cube of the speed, and its diffusive rescaling.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// `gamma = (d - 2) / 6`.
pub fn gamma_from_dim(d: usize) -> f64 {
    (d as f64 - 2.0) / 6.0
}

/// `xi = |v|^3 / (3 D)`.
pub fn xi_from_speed(speed: f64, d: f64) -> Result<f64> {
    if !(speed > 0.0) {
        return Err(Error::NonPositive(speed));
    }
    if !(d > 0.0) {
        return Err(Error::NonPositive(d));
    }
    Ok(speed.powi(3) / (3.0 * d))
}

/// Inverse of [`xi_from_speed`].
pub fn speed_from_xi(xi: f64, d: f64) -> Result<f64> {
    if !(xi > 0.0) {
        return Err(Error::NonPositive(xi));
    }
    if !(d > 0.0) {
        return Err(Error::NonPositive(d));
    }
    Ok((3.0 * d * xi).cbrt())
}

/// Centered, unit-variance, bounded noise laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLaw {
    /// `+1` or `-1` with probability 1/2.
    #[default]
    Rademacher,
    /// Uniform on `[-sqrt 3, sqrt 3]`.
    UniformSym,
}

impl NoiseLaw {
    /// Almost-sure bound `M`.
    pub fn bound(self) -> f64 {
        match self {
            NoiseLaw::Rademacher => 1.0,
            NoiseLaw::UniformSym => 3f64.sqrt(),
        }
    }
}

/// Draws noise values from an RNG. Rademacher signs are taken one bit at a
/// time, least significant first, from successive 64-bit outputs.
pub struct NoiseSource<R> {
    rng: R,
    law: NoiseLaw,
    bits: u64,
    left: u32,
}

impl<R: RngCore> NoiseSource<R> {
    pub fn new(rng: R, law: NoiseLaw) -> Self {
        NoiseSource { rng, law, bits: 0, left: 0 }
    }

    #[inline]
    pub fn next_bit(&mut self) -> bool {
        if self.left == 0 {
            self.bits = self.rng.next_u64();
            self.left = 64;
        }
        let b = self.bits & 1 == 1;
        self.bits >>= 1;
        self.left -= 1;
        b
    }

    #[inline]
    pub fn draw(&mut self) -> f64 {
        match self.law {
            NoiseLaw::Rademacher => {
                if self.next_bit() {
                    1.0
                } else {
                    -1.0
                }
            }
            NoiseLaw::UniformSym => {
                let s = 3f64.sqrt();
                self.rng.random_range(-s..=s)
            }
        }
    }

    pub fn into_inner(self) -> R {
        self.rng
    }
}

/// Declared sup-bound `coefficient * xi^(-exponent)` of a perturbation term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayBound {
    pub coefficient: f64,
    pub exponent: f64,
}

impl DecayBound {
    pub fn at(&self, xi: f64) -> f64 {
        self.coefficient * xi.powf(-self.exponent)
    }
}

pub type PerturbationFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Correction term `G(xi, omega)` added to the pure chain.
#[derive(Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Perturbation {
    /// `coefficient * omega * xi^(-exponent)`.
    NoiseScaled { coefficient: f64, exponent: f64 },
    /// `coefficient * xi^(-exponent)`.
    Power { coefficient: f64, exponent: f64 },
    #[serde(skip)]
    Custom { f: PerturbationFn, bound: Option<DecayBound> },
}

impl fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::NoiseScaled { coefficient, exponent } => f
                .debug_struct("NoiseScaled")
                .field("coefficient", coefficient)
                .field("exponent", exponent)
                .finish(),
            Perturbation::Power { coefficient, exponent } => f
                .debug_struct("Power")
                .field("coefficient", coefficient)
                .field("exponent", exponent)
                .finish(),
            Perturbation::Custom { bound, .. } => {
                f.debug_struct("Custom").field("bound", bound).finish_non_exhaustive()
            }
        }
    }
}

impl PartialEq for Perturbation {
    fn eq(&self, other: &Self) -> bool {
        use Perturbation::*;
        match (self, other) {
            (NoiseScaled { coefficient: a, exponent: b }, NoiseScaled { coefficient: c, exponent: d }) => {
                a == c && b == d
            }
            (Power { coefficient: a, exponent: b }, Power { coefficient: c, exponent: d }) => a == c && b == d,
            (Custom { f: f1, bound: b1 }, Custom { f: f2, bound: b2 }) => Arc::ptr_eq(f1, f2) && b1 == b2,
            _ => false,
        }
    }
}

impl Perturbation {
    /// `c0 * omega * xi^(-1/3)`, the shape of the zero-mean remainder.
    pub fn canned_g0(c0: f64) -> Self {
        Perturbation::NoiseScaled { coefficient: c0, exponent: 1.0 / 3.0 }
    }

    /// `c1 * xi^(-4/3)`.
    pub fn canned_g1(c1: f64) -> Self {
        Perturbation::Power { coefficient: c1, exponent: 4.0 / 3.0 }
    }

    pub fn custom(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static, bound: Option<DecayBound>) -> Self {
        Perturbation::Custom { f: Arc::new(f), bound }
    }

    #[inline]
    pub fn eval(&self, xi: f64, omega: f64) -> f64 {
        match self {
            Perturbation::NoiseScaled { coefficient, exponent } => coefficient * omega * xi.powf(-exponent),
            Perturbation::Power { coefficient, exponent } => coefficient * xi.powf(-exponent),
            Perturbation::Custom { f, .. } => f(xi, omega),
        }
    }

    /// Sup over the noise of `|G(xi, .)|` as a decay law, given the noise bound.
    pub fn bound(&self, noise_bound: f64) -> Result<DecayBound> {
        match *self {
            Perturbation::NoiseScaled { coefficient, exponent } => {
                Ok(DecayBound { coefficient: coefficient.abs() * noise_bound, exponent })
            }
            Perturbation::Power { coefficient, exponent } => {
                Ok(DecayBound { coefficient: coefficient.abs(), exponent })
            }
            Perturbation::Custom { bound, .. } => bound.ok_or(Error::MissingBound),
        }
    }

    fn declared_exponent(&self) -> Option<f64> {
        match self {
            Perturbation::NoiseScaled { exponent, .. } | Perturbation::Power { exponent, .. } => Some(*exponent),
            Perturbation::Custom { bound, .. } => bound.map(|b| b.exponent),
        }
    }
}

/// What happens when the chain reaches `xi <= xi_minus`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BelowBehavior {
    #[default]
    Forbid,
    Reflect,
}

fn default_gamma() -> f64 {
    gamma_from_dim(8)
}

fn default_xi_minus() -> f64 {
    0.1
}

/// Parameters of the scalar chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiChainSpec {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub noise: NoiseLaw,
    #[serde(default)]
    pub g0: Option<Perturbation>,
    #[serde(default)]
    pub g1: Option<Perturbation>,
    #[serde(default = "default_xi_minus")]
    pub xi_minus: f64,
    /// Defaults to `max(1, |gamma| / M)`.
    #[serde(default)]
    pub xi_plus: Option<f64>,
    #[serde(default)]
    pub below_behavior: BelowBehavior,
}

impl Default for XiChainSpec {
    fn default() -> Self {
        XiChainSpec::pure(default_gamma())
    }
}

impl XiChainSpec {
    /// Pure chain with Rademacher noise.
    pub fn pure(gamma: f64) -> Self {
        XiChainSpec {
            gamma,
            noise: NoiseLaw::Rademacher,
            g0: None,
            g1: None,
            xi_minus: default_xi_minus(),
            xi_plus: None,
            below_behavior: BelowBehavior::Forbid,
        }
    }

    pub fn xi_plus(&self) -> f64 {
        self.xi_plus.unwrap_or_else(|| 1f64.max(self.gamma.abs() / self.noise.bound()))
    }

    pub fn is_pure(&self) -> bool {
        self.g0.is_none() && self.g1.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !self.gamma.is_finite() {
            problems.push(format!("gamma = {} is not finite", self.gamma));
        }
        let xp = self.xi_plus();
        if !(self.xi_minus > 0.0 && self.xi_minus < xp) {
            problems.push(format!("need 0 < xi_minus < xi_plus, got {} and {xp}", self.xi_minus));
        }
        if xp < self.gamma.abs() / self.noise.bound() {
            problems.push(format!("xi_plus = {xp} is below |gamma| / M"));
        }
        if let Some(a) = self.g0.as_ref().and_then(Perturbation::declared_exponent) {
            if !(a > 0.0) {
                problems.push(format!("G0 decay exponent must be > 0, got {a}"));
            }
        }
        if let Some(b) = self.g1.as_ref().and_then(Perturbation::declared_exponent) {
            if !(b > 1.0) {
                problems.push(format!("G1 decay exponent must be > 1, got {b}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    #[inline]
    fn raw_step(&self, xi: f64, omega: f64) -> f64 {
        let mut next = xi + omega + self.gamma / xi;
        if let Some(g) = &self.g0 {
            next += g.eval(xi, omega);
        }
        if let Some(g) = &self.g1 {
            next += g.eval(xi, omega);
        }
        next
    }

    #[inline]
    fn apply_below(&self, next: f64) -> f64 {
        if self.below_behavior == BelowBehavior::Reflect && next < self.xi_minus {
            next.abs() + self.xi_minus
        } else {
            next
        }
    }
}

/// One transition of the chain for a given noise value.
pub fn step_xi(spec: &XiChainSpec, xi: f64, omega_draw: f64) -> Result<f64> {
    if xi <= spec.xi_minus && spec.below_behavior == BelowBehavior::Forbid {
        return Err(Error::BelowDomain { index: 0, xi, xi_minus: spec.xi_minus });
    }
    Ok(spec.apply_below(spec.raw_step(xi, omega_draw)))
}

/// Stored path `xi_0, ..., xi_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiPath {
    pub values: Vec<f64>,
    pub spec: XiChainSpec,
    pub seed: Option<u64>,
}

/// Streams the chain from `xi0`, calling `visit(k, xi_k)` for `k = 0, 1, ...`
/// until `visit` returns `false` or `max_steps` transitions were made.
/// Returns the number of transitions and the last value.
pub fn simulate_xi<R: RngCore>(
    spec: &XiChainSpec,
    xi0: f64,
    max_steps: u64,
    noise: &mut NoiseSource<R>,
    mut visit: impl FnMut(u64, f64) -> bool,
) -> Result<(u64, f64)> {
    if !(xi0 > 0.0) {
        return Err(Error::NonPositive(xi0));
    }
    let forbid = spec.below_behavior == BelowBehavior::Forbid;
    let mut xi = xi0;
    if !visit(0, xi) {
        return Ok((0, xi));
    }
    for k in 0..max_steps {
        if forbid && xi <= spec.xi_minus {
            return Err(Error::BelowDomain { index: k as usize, xi, xi_minus: spec.xi_minus });
        }
        let w = noise.draw();
        xi = spec.apply_below(spec.raw_step(xi, w));
        if !visit(k + 1, xi) {
            return Ok((k + 1, xi));
        }
    }
    Ok((max_steps, xi))
}

/// Runs `n_steps` transitions and stores the whole path.
pub fn run_xi<R: RngCore>(spec: &XiChainSpec, xi0: f64, n_steps: usize, rng: R) -> Result<XiPath> {
    spec.validate()?;
    let mut values = Vec::with_capacity(n_steps + 1);
    let mut noise = NoiseSource::new(rng, spec.noise);
    simulate_xi(spec, xi0, n_steps as u64, &mut noise, |_, x| {
        values.push(x);
        true
    })?;
    if spec.below_behavior == BelowBehavior::Forbid {
        if let Some(last) = values.last().copied() {
            if values.len() == n_steps + 1 && last <= spec.xi_minus && n_steps > 0 {
                return Err(Error::BelowDomain { index: n_steps, xi: last, xi_minus: spec.xi_minus });
            }
        }
    }
    Ok(XiPath { values, spec: spec.clone(), seed: None })
}

/// Pure chain advanced until it leaves the open interval `(lo, hi)` or
/// `max_steps` transitions were made. Returns the final value and the number
/// of transitions. Only valid for the pure chain (no perturbations) in the
/// region where `Forbid` cannot trigger, i.e. `lo >= xi_minus`.
#[inline]
pub fn run_pure_until_exit<R: RngCore>(
    gamma: f64,
    noise: &mut NoiseSource<R>,
    mut xi: f64,
    lo: f64,
    hi: f64,
    max_steps: u64,
) -> (f64, u64) {
    let mut k = 0;
    if noise.law == NoiseLaw::Rademacher {
        while k < max_steps && xi > lo && xi < hi {
            // consume the buffered bits without re-checking the buffer each step
            if noise.left == 0 {
                noise.bits = noise.rng.next_u64();
                noise.left = 64;
            }
            let take = (noise.left as u64).min(max_steps - k);
            let mut bits = noise.bits;
            let mut used = 0;
            while used < take {
                let w = if bits & 1 == 1 { 1.0 } else { -1.0 };
                bits >>= 1;
                xi = xi + w + gamma / xi;
                used += 1;
                if !(xi > lo && xi < hi) {
                    break;
                }
            }
            noise.bits = bits;
            noise.left -= used as u32;
            k += used;
        }
    } else {
        while k < max_steps && xi > lo && xi < hi {
            let w = noise.draw();
            xi = xi + w + gamma / xi;
            k += 1;
        }
    }
    (xi, k)
}

/// Independent pure-chain path advanced by [`drive_pure_lanes`].
pub struct Lane<R> {
    pub id: usize,
    pub noise: NoiseSource<R>,
    pub xi: f64,
    /// The lane stops when `xi` leaves `(lo, hi)` ...
    pub lo: f64,
    pub hi: f64,
    /// ... or when `steps` reaches `budget`.
    pub budget: u64,
    pub steps: u64,
}

pub enum LaneControl {
    Continue { lo: f64, hi: f64, budget: u64 },
    Finish,
}

/// Advances up to `K` Rademacher pure-chain lanes in lockstep. Each lane is a
/// separate path with its own noise stream, so results are the same as
/// running them one by one with [`run_pure_until_exit`]; interleaving only
/// hides the latency of the division in the update. `on_exit` is called
/// whenever a lane leaves its interval or exhausts its budget and decides how
/// it continues; `feed` supplies new lanes.
pub fn drive_pure_lanes<R: RngCore, const K: usize>(
    gamma: f64,
    mut feed: impl FnMut() -> Option<Lane<R>>,
    mut on_exit: impl FnMut(&mut Lane<R>) -> LaneControl,
) {
    let mut lanes: Vec<Lane<R>> = Vec::with_capacity(K);
    let mut exhausted = false;
    loop {
        while lanes.len() < K && !exhausted {
            match feed() {
                Some(l) => {
                    assert_eq!(l.noise.law, NoiseLaw::Rademacher);
                    lanes.push(l)
                }
                None => exhausted = true,
            }
        }
        if lanes.is_empty() {
            return;
        }
        // lanes already outside their interval are handled before stepping
        let mut i = 0;
        while i < lanes.len() {
            let l = &mut lanes[i];
            if l.xi > l.lo && l.xi < l.hi && l.steps < l.budget {
                i += 1;
                continue;
            }
            match on_exit(l) {
                LaneControl::Continue { lo, hi, budget } => {
                    l.lo = lo;
                    l.hi = hi;
                    l.budget = budget;
                    if l.xi > l.lo && l.xi < l.hi && l.steps < l.budget {
                        i += 1;
                    }
                }
                LaneControl::Finish => {
                    lanes.swap_remove(i);
                }
            }
        }
        if lanes.len() < K && !exhausted {
            continue;
        }
        if lanes.is_empty() {
            continue;
        }
        // run every lane until the first one stops
        'outer: loop {
            for l in lanes.iter_mut() {
                let n = &mut l.noise;
                if n.left == 0 {
                    n.bits = n.rng.next_u64();
                    n.left = 64;
                }
                let w = if n.bits & 1 == 1 { 1.0 } else { -1.0 };
                n.bits >>= 1;
                n.left -= 1;
                l.xi = l.xi + w + gamma / l.xi;
                l.steps += 1;
            }
            for l in lanes.iter() {
                if !(l.xi > l.lo && l.xi < l.hi && l.steps < l.budget) {
                    break 'outer;
                }
            }
        }
    }
}

/// Piecewise-linear interpolation of `epsilon * xi_n` on the grid
/// `t_n = n epsilon^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledProcess {
    epsilon: f64,
    dt: f64,
    values: Vec<f64>,
}

/// Diffusive rescaling of a path; `epsilon = 1 / xi_0` gives `R(0) = 1`.
pub fn rescaled_process(path: &XiPath, epsilon: f64) -> Result<RescaledProcess> {
    if !(epsilon > 0.0) {
        return Err(Error::NonPositive(epsilon));
    }
    if path.values.is_empty() {
        return Err(Error::EmptyPath);
    }
    Ok(RescaledProcess {
        epsilon,
        dt: epsilon * epsilon,
        values: path.values.iter().map(|x| epsilon * x).collect(),
    })
}

impl RescaledProcess {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn horizon(&self) -> f64 {
        (self.values.len() - 1) as f64 * self.dt
    }

    /// Value at grid point `n`.
    pub fn at_grid(&self, n: usize) -> f64 {
        self.values[n]
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        let t_max = self.horizon();
        if !(t >= 0.0 && t <= t_max) {
            return Err(Error::OutOfRange { t, t_max });
        }
        let mut s = t / self.dt;
        // snap queries that land on the grid up to rounding
        if (s - s.round()).abs() <= 1e-9 * s.max(1.0) {
            s = s.round();
        }
        let n = (s.floor() as usize).min(self.values.len() - 1);
        let frac = s - n as f64;
        if frac == 0.0 || n + 1 == self.values.len() {
            return Ok(self.values[n]);
        }
        Ok(self.values[n] + frac * (self.values[n + 1] - self.values[n]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::stats::Moments;

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma_from_dim(2), 0.0);
        assert_eq!(gamma_from_dim(8), 1.0);
        assert_eq!(gamma_from_dim(5), 0.5);
    }

    #[test]
    fn speed_map_examples() {
        let d = 0.37;
        assert!((xi_from_speed((3.0 * d as f64).cbrt(), d).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(xi_from_speed(3.0, 1.0).unwrap(), 9.0);
        for xi in [0.01, 1.0, 123.4, 5e7] {
            let back = xi_from_speed(speed_from_xi(xi, d).unwrap(), d).unwrap();
            assert!((back - xi).abs() <= 1e-12 * xi);
        }
        assert_eq!(xi_from_speed(0.0, 1.0), Err(Error::NonPositive(0.0)));
        assert_eq!(speed_from_xi(1.0, -1.0), Err(Error::NonPositive(-1.0)));
    }

    #[test]
    fn step_examples() {
        let spec = XiChainSpec::pure(1.0);
        assert_eq!(step_xi(&spec, 2.0, 1.0).unwrap(), 3.5);
        let rw = XiChainSpec { xi_minus: 0.01, ..XiChainSpec::pure(0.0) };
        assert_eq!(step_xi(&rw, 5.0, -1.0).unwrap(), 4.0);
        assert!(matches!(step_xi(&spec, 0.05, 1.0), Err(Error::BelowDomain { .. })));
        let refl = XiChainSpec { below_behavior: BelowBehavior::Reflect, xi_minus: 0.5, ..XiChainSpec::pure(0.0) };
        assert_eq!(step_xi(&refl, 0.7, -1.0).unwrap(), 0.3 + 0.5);
    }

    #[test]
    fn noise_moments_and_bounds() {
        let n = 1_000_000;
        for law in [NoiseLaw::Rademacher, NoiseLaw::UniformSym] {
            let mut src = NoiseSource::new(stream(1, law as u64), law);
            let mut m = Moments::new();
            for _ in 0..n {
                let w = src.draw();
                assert!(w.abs() <= law.bound());
                m.push(w);
            }
            let tol = 1.0 / (n as f64).sqrt();
            assert!(m.mean.abs() <= 4.0 * tol, "{law:?} mean {}", m.mean);
            assert!((m.variance() - 1.0).abs() <= 8.0 * tol, "{law:?} var {}", m.variance());
        }
    }

    #[test]
    fn second_moment_recursion_by_enumeration() {
        for gamma in [0.5, 1.0, 2.0] {
            let spec = XiChainSpec::pure(gamma);
            for xi in [1.0, 2.5, 17.0, 1000.0] {
                let up = step_xi(&spec, xi, 1.0).unwrap();
                let down = step_xi(&spec, xi, -1.0).unwrap();
                let lhs = 0.5 * (up * up + down * down);
                let rhs = xi * xi + 2.0 * gamma + 1.0 + gamma * gamma / (xi * xi);
                assert!((lhs - rhs).abs() <= 1e-12 * rhs);
            }
        }
    }

    #[test]
    fn pure_chain_stays_positive() {
        let spec = XiChainSpec::pure(1.0);
        for seed in 0..20 {
            let mut src = NoiseSource::new(stream(7, seed), spec.noise);
            let mut min = f64::INFINITY;
            simulate_xi(&spec, 1.0, 1_000_000, &mut src, |_, x| {
                min = min.min(x);
                true
            })
            .unwrap();
            assert!(min > 0.0);
        }
    }

    #[test]
    fn run_xi_shapes() {
        let spec = XiChainSpec::pure(1.0);
        assert_eq!(run_xi(&spec, 50.0, 0, stream(1, 1)).unwrap().values, vec![50.0]);
        let p = run_xi(&spec, 50.0, 1000, stream(1, 1)).unwrap();
        assert_eq!(p.values.len(), 1001);
        assert_eq!(p, run_xi(&spec, 50.0, 1000, stream(1, 1)).unwrap());
        let rw = XiChainSpec { xi_minus: 1.0, xi_plus: Some(10.0), ..XiChainSpec::pure(0.0) };
        assert!(matches!(run_xi(&rw, 2.0, 100_000, stream(1, 2)), Err(Error::BelowDomain { .. })));
    }

    #[test]
    fn fast_kernel_matches_generic_steps() {
        let spec = XiChainSpec::pure(1.0);
        for law in [NoiseLaw::Rademacher, NoiseLaw::UniformSym] {
            let spec = XiChainSpec { noise: law, ..spec.clone() };
            let mut a = NoiseSource::new(stream(3, 0), law);
            let mut b = NoiseSource::new(stream(3, 0), law);
            let (mut xa, mut xb) = (40.0, 40.0);
            for (lo, hi) in [(20.0, 80.0), (10.0, 200.0), (5.0, 1e9)] {
                let (x, k) = run_pure_until_exit(1.0, &mut a, xa, lo, hi, 5000);
                let mut steps = 0;
                simulate_xi(&spec, xb, 5000, &mut b, |i, x| {
                    xb = x;
                    steps = i;
                    i == 0 || (x > lo && x < hi)
                })
                .unwrap();
                assert_eq!((x, k), (xb, steps));
                xa = x;
            }
        }
    }

    #[test]
    fn lockstep_lanes_match_single_paths() {
        // each lane walks up through nested intervals and finishes after 4 exits
        let run = |k: usize| {
            let mut out = vec![Vec::new(); 10];
            let mut next = 0;
            let feed = || {
                if next == 10 {
                    return None;
                }
                next += 1;
                Some(Lane {
                    id: next - 1,
                    noise: NoiseSource::new(stream(11, next as u64), NoiseLaw::Rademacher),
                    xi: 30.0,
                    lo: 20.0,
                    hi: 40.0,
                    budget: 100_000,
                    steps: 0,
                })
            };
            let on_exit = |l: &mut Lane<_>| {
                out[l.id].push((l.xi, l.steps));
                if out[l.id].len() == 4 {
                    LaneControl::Finish
                } else {
                    LaneControl::Continue { lo: l.xi - 10.0, hi: l.xi + 10.0, budget: l.steps + 100_000 }
                }
            };
            match k {
                1 => drive_pure_lanes::<_, 1>(1.0, feed, on_exit),
                _ => drive_pure_lanes::<_, 4>(1.0, feed, on_exit),
            }
            out
        };
        let single = run(1);
        assert_eq!(single, run(4));
        for (id, exits) in single.iter().enumerate() {
            let mut src = NoiseSource::new(stream(11, id as u64 + 1), NoiseLaw::Rademacher);
            let (mut xi, mut steps, mut lo, mut hi) = (30.0, 0, 20.0, 40.0);
            for &(x, s) in exits {
                let (nx, k) = run_pure_until_exit(1.0, &mut src, xi, lo, hi, 100_000);
                xi = nx;
                steps += k;
                assert_eq!((x, s), (xi, steps));
                lo = xi - 10.0;
                hi = xi + 10.0;
            }
        }
    }

    #[test]
    fn perturbations_and_bounds() {
        let spec = XiChainSpec {
            g0: Some(Perturbation::canned_g0(0.5)),
            g1: Some(Perturbation::canned_g1(2.0)),
            ..XiChainSpec::pure(1.0)
        };
        spec.validate().unwrap();
        let x = step_xi(&spec, 8.0, 1.0).unwrap();
        assert!((x - (8.0 + 1.0 + 0.125 + 0.5 * 0.5 + 2.0 / 16.0)).abs() < 1e-14);
        let b = spec.g0.as_ref().unwrap().bound(1.0).unwrap();
        assert_eq!(b, DecayBound { coefficient: 0.5, exponent: 1.0 / 3.0 });
        let custom = Perturbation::custom(|x, _| 1.0 / x, None);
        assert_eq!(custom.bound(1.0), Err(Error::MissingBound));
        let bad = XiChainSpec { g1: Some(Perturbation::Power { coefficient: 1.0, exponent: 0.5 }), ..XiChainSpec::pure(1.0) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = XiChainSpec {
            noise: NoiseLaw::UniformSym,
            g0: Some(Perturbation::canned_g0(0.1)),
            ..XiChainSpec::pure(2.0)
        };
        let s = serde_json::to_string(&spec).unwrap();
        let back: XiChainSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
        let d: XiChainSpec = serde_json::from_str("{}").unwrap();
        assert_eq!(d, XiChainSpec::default());
    }

    #[test]
    fn rescaled_process_examples() {
        let spec = XiChainSpec::pure(1.0);
        let path = run_xi(&spec, 20.0, 100, stream(2, 0)).unwrap();
        let r = rescaled_process(&path, 1.0 / 20.0).unwrap();
        assert_eq!(r.eval(0.0).unwrap(), 1.0);
        let dt = 1.0 / 400.0;
        for n in [1usize, 17, 100] {
            assert_eq!(r.eval(n as f64 * dt).unwrap(), path.values[n] / 20.0);
            assert_eq!(r.at_grid(n), path.values[n] / 20.0);
        }
        let mid = r.eval(10.5 * dt).unwrap();
        assert!((mid - 0.5 * (r.at_grid(10) + r.at_grid(11))).abs() < 1e-15);
        assert!(matches!(r.eval(r.horizon() * 1.01), Err(Error::OutOfRange { .. })));
    }
}
