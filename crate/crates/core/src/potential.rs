//! Compactly supported, quasi-periodically driven scattering potential.
//!
//! The potential is the separable form
//!
//! ```text
//! V(q, phi) = A * chi(|q|) * (1 + cos phi_1),
//! chi(r)    = exp(1 - 1 / (1 - 4 r^2))   for r < 1/2, 0 otherwise,
//! ```
//!
//! a C-infinity bump supported in the ball of radius 1/2. The phase advances as
//! `phi(t) = omega * t + phi_0` on the m-torus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radius of the support ball.
pub const SUPPORT_RADIUS: f64 = 0.5;

/// Radial cutoff profile.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    #[default]
    SmoothBump,
}

impl Shape {
    /// Profile value `chi(r)`.
    #[inline]
    pub fn profile(self, r2: f64) -> f64 {
        match self {
            Shape::SmoothBump => {
                let s = 1.0 - 4.0 * r2;
                if s <= 0.0 {
                    0.0
                } else {
                    (1.0 - 1.0 / s).exp()
                }
            }
        }
    }

    /// Returns `(chi, chi'(r) / r)` as functions of `r^2`. The second factor
    /// turns the radial derivative into a gradient: `grad chi = (chi'/r) q`.
    #[inline]
    pub fn profile_and_radial_factor(self, r2: f64) -> (f64, f64) {
        match self {
            Shape::SmoothBump => {
                let s = 1.0 - 4.0 * r2;
                if s <= 0.0 {
                    (0.0, 0.0)
                } else {
                    let chi = (1.0 - 1.0 / s).exp();
                    (chi, -8.0 * chi / (s * s))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PotentialConfig {
    #[serde(default = "default_dim")]
    d: usize,
    #[serde(default)]
    m: Option<usize>,
    #[serde(default = "default_amplitude")]
    amplitude: f64,
    #[serde(default = "default_omega")]
    omega: Vec<f64>,
    #[serde(default)]
    shape: Shape,
}

fn default_dim() -> usize {
    8
}
fn default_amplitude() -> f64 {
    DEFAULT_AMPLITUDE
}
fn default_omega() -> Vec<f64> {
    vec![DEFAULT_OMEGA]
}

/// Default amplitude of the bump.
pub const DEFAULT_AMPLITUDE: f64 = 0.25;
/// Default driving frequency (m = 1).
pub const DEFAULT_OMEGA: f64 = 4.0;

/// Immutable potential description with cached sup-norm bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PotentialConfig", into = "PotentialConfig")]
pub struct PotentialSpec {
    d: usize,
    amplitude: f64,
    omega: Vec<f64>,
    shape: Shape,
    v_max: f64,
    grad_max: f64,
}

impl TryFrom<PotentialConfig> for PotentialSpec {
    type Error = Error;

    fn try_from(c: PotentialConfig) -> Result<Self> {
        if let Some(m) = c.m {
            if m != c.omega.len() {
                return Err(Error::InvalidInput(format!(
                    "m = {m} but omega has {} components",
                    c.omega.len()
                )));
            }
        }
        let mut spec = PotentialSpec::new(c.d, c.amplitude, c.omega)?;
        spec.shape = c.shape;
        Ok(spec)
    }
}

impl From<PotentialSpec> for PotentialConfig {
    fn from(s: PotentialSpec) -> Self {
        PotentialConfig {
            d: s.d,
            m: Some(s.omega.len()),
            amplitude: s.amplitude,
            omega: s.omega,
            shape: s.shape,
        }
    }
}

impl Default for PotentialSpec {
    fn default() -> Self {
        PotentialSpec::new(8, DEFAULT_AMPLITUDE, vec![DEFAULT_OMEGA]).expect("valid default")
    }
}

impl PotentialSpec {
    pub fn new(d: usize, amplitude: f64, omega: Vec<f64>) -> Result<Self> {
        let mut problems = Vec::new();
        if d < 2 {
            problems.push(format!("d = {d} must be at least 2"));
        }
        if omega.is_empty() {
            problems.push("omega must have at least one component (m >= 1)".into());
        }
        if !(amplitude > 0.0 && amplitude.is_finite()) {
            problems.push(format!("amplitude = {amplitude} must be positive and finite"));
        }
        if omega.iter().any(|w| !w.is_finite()) {
            problems.push("omega must be finite".into());
        }
        if !problems.is_empty() {
            return Err(Error::InvalidInput(problems.join("; ")));
        }
        let shape = Shape::SmoothBump;
        let (v_max, grad_max) = sup_bounds(shape, amplitude);
        Ok(Self {
            d,
            amplitude,
            omega,
            shape,
            v_max,
            grad_max,
        })
    }

    /// Same potential in another spatial dimension.
    pub fn with_dim(&self, d: usize) -> Result<Self> {
        Self::new(d, self.amplitude, self.omega.clone())
    }

    /// Same potential with a different frequency vector.
    pub fn with_omega(&self, omega: Vec<f64>) -> Result<Self> {
        Self::new(self.d, self.amplitude, omega)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn torus_dim(&self) -> usize {
        self.omega.len()
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Cached `sup |V|`.
    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    /// Cached `sup |grad_q V|`.
    pub fn grad_max(&self) -> f64 {
        self.grad_max
    }

    /// True when the potential actually depends on time.
    pub fn is_driven(&self) -> bool {
        self.omega[0] != 0.0
    }

    /// Angular factor `1 + cos phi_1`.
    #[inline]
    pub fn angular(&self, phi1: f64) -> f64 {
        1.0 + phi1.cos()
    }

    /// `V(q, phi)`.
    pub fn eval(&self, q: &[f64], phi: &[f64]) -> f64 {
        let r2 = norm2(q);
        self.amplitude * self.shape.profile(r2) * self.angular(phi[0])
    }

    /// Spatial gradient `grad_q V(q, phi)`, written into `out`.
    pub fn grad_q_into(&self, q: &[f64], phi: &[f64], out: &mut [f64]) {
        let s = self.radial_gradient_factor(norm2(q), phi[0]);
        for (o, qi) in out.iter_mut().zip(q) {
            *o = s * qi;
        }
    }

    pub fn grad_q(&self, q: &[f64], phi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; q.len()];
        self.grad_q_into(q, phi, &mut out);
        out
    }

    /// Scalar `s` with `grad_q V = s * q`; the force field is central.
    #[inline]
    pub fn radial_gradient_factor(&self, r2: f64, phi1: f64) -> f64 {
        let (_, f) = self.shape.profile_and_radial_factor(r2);
        if f == 0.0 {
            0.0
        } else {
            self.amplitude * self.angular(phi1) * f
        }
    }

    /// Time derivative `(omega . grad_phi) V`.
    pub fn dt(&self, q: &[f64], phi: &[f64]) -> f64 {
        self.dt_r2(norm2(q), phi[0])
    }

    #[inline]
    pub fn dt_r2(&self, r2: f64, phi1: f64) -> f64 {
        let chi = self.shape.profile(r2);
        if chi == 0.0 || self.omega[0] == 0.0 {
            0.0
        } else {
            -self.amplitude * chi * self.omega[0] * phi1.sin()
        }
    }
}

#[inline]
pub(crate) fn norm2(q: &[f64]) -> f64 {
    q.iter().map(|x| x * x).sum()
}

/// `(sup |V|, sup |grad V|)` from a dense radial grid, with the gradient
/// maximum refined by golden-section search around the best grid point.
fn sup_bounds(shape: Shape, amplitude: f64) -> (f64, f64) {
    const N: usize = 20_000;
    let radial = |r: f64| {
        let (_, f) = shape.profile_and_radial_factor(r * r);
        (f * r).abs()
    };
    let h = SUPPORT_RADIUS / N as f64;
    let (mut best_i, mut best) = (0usize, 0.0f64);
    let mut chi_max = 0.0f64;
    for i in 0..=N {
        let r = i as f64 * h;
        chi_max = chi_max.max(shape.profile(r * r));
        let g = radial(r);
        if g > best {
            best = g;
            best_i = i;
        }
    }
    let (mut a, mut b) = (
        (best_i.saturating_sub(1)) as f64 * h,
        ((best_i + 1).min(N)) as f64 * h,
    );
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if radial(c) > radial(d) {
            b = d;
        } else {
            a = c;
        }
    }
    best = best.max(radial(0.5 * (a + b)));
    // max of the angular factor 1 + cos is 2
    (2.0 * amplitude * chi_max, 2.0 * amplitude * best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use std::f64::consts::PI;

    fn spec() -> PotentialSpec {
        PotentialSpec::new(3, 1.0, vec![1.0]).unwrap()
    }

    #[test]
    fn eval_examples() {
        let s = spec();
        assert_eq!(s.eval(&[0.6, 0.0, 0.0], &[0.3]), 0.0);
        assert!(s.eval(&[0.0; 3], &[PI]).abs() < 1e-15);
        assert_eq!(s.eval(&[0.0; 3], &[0.0]), 2.0);
    }

    #[test]
    fn gradient_examples() {
        let s = spec();
        assert_eq!(s.grad_q(&[0.0, 0.5, 0.0], &[0.2]), vec![0.0; 3]);
        assert_eq!(s.grad_q(&[0.0; 3], &[0.2]), vec![0.0; 3]);
    }

    #[test]
    fn dt_examples() {
        let s = spec();
        let static_spec = s.with_omega(vec![0.0]).unwrap();
        assert_eq!(static_spec.dt(&[0.1, 0.0, 0.0], &[1.0]), 0.0);
        assert_eq!(s.dt(&[0.1, 0.0, 0.0], &[0.0]), 0.0);
        assert!((s.dt(&[0.0; 3], &[PI / 2.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = PotentialSpec::new(8, 0.7, vec![2.0]).unwrap();
        let mut rng = stream(11, 0);
        let h = 1e-5;
        for _ in 0..200 {
            let q: Vec<f64> = (0..8).map(|_| rng.random_range(-0.2..0.2)).collect();
            if norm2(&q).sqrt() > 0.42 {
                continue;
            }
            let phi = [rng.random_range(0.0..2.0 * PI)];
            let g = s.grad_q(&q, &phi);
            for i in 0..8 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += h;
                qm[i] -= h;
                let fd = (s.eval(&qp, &phi) - s.eval(&qm, &phi)) / (2.0 * h);
                let scale = g.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-3);
                assert!((fd - g[i]).abs() <= 1e-6 * scale, "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn dt_matches_phase_differences() {
        let s = PotentialSpec::new(3, 1.3, vec![2.5]).unwrap();
        let q = [0.1, -0.2, 0.05];
        let phi = 0.7;
        let h = 1e-6;
        let fd = (s.eval(&q, &[phi + h]) - s.eval(&q, &[phi - h])) / (2.0 * h) * 2.5;
        assert!((fd - s.dt(&q, &[phi])).abs() < 1e-8);
    }

    #[test]
    fn gradient_fd_converges_at_second_order() {
        let s = PotentialSpec::new(4, 1.0, vec![1.0]).unwrap();
        let q = [0.21, -0.13, 0.08, 0.17];
        let phi = [0.4];
        let g = s.grad_q(&q, &phi);
        let err = |h: f64| {
            let mut qp = q;
            let mut qm = q;
            qp[0] += h;
            qm[0] -= h;
            ((s.eval(&qp, &phi) - s.eval(&qm, &phi)) / (2.0 * h) - g[0]).abs()
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn support_and_bounds() {
        let s = PotentialSpec::new(8, 1.0, vec![3.0]).unwrap();
        assert!((s.v_max() - 2.0).abs() < 1e-15);
        let mut rng = stream(3, 1);
        let mut max_grad = 0.0f64;
        for _ in 0..100_000 {
            let dir: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = norm2(&dir).sqrt();
            let phi = [rng.random_range(0.0..2.0 * PI)];
            let r_out = 0.5 + rng.random_range(0.0..2.0);
            let q_out: Vec<f64> = dir.iter().map(|x| x / n * r_out).collect();
            assert_eq!(s.eval(&q_out, &phi), 0.0);
            assert_eq!(s.dt(&q_out, &phi), 0.0);
            assert!(s.grad_q(&q_out, &phi).iter().all(|&g| g == 0.0));
            let r_in = rng.random_range(0.0..0.5);
            let q_in: Vec<f64> = dir.iter().map(|x| x / n * r_in).collect();
            max_grad = max_grad.max(norm2(&s.grad_q(&q_in, &phi)).sqrt());
            assert!(s.eval(&q_in, &phi).abs() <= s.v_max());
        }
        assert!(max_grad <= s.grad_max());
        assert!(max_grad > 0.9 * s.grad_max());
    }

    #[test]
    fn json_round_trip() {
        let s: PotentialSpec =
            serde_json::from_str(r#"{"d": 5, "m": 1, "amplitude": 0.5, "omega": [2.0]}"#).unwrap();
        assert_eq!(s.dim(), 5);
        let back: PotentialSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<PotentialSpec>(r#"{"d": 1}"#).is_err());
        assert!(serde_json::from_str::<PotentialSpec>(r#"{"m": 2, "omega": [1.0]}"#).is_err());
    }
}
