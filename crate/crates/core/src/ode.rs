//! Dormand–Prince 5(4) embedded Runge–Kutta integrator with adaptive step
//! control and a per-step observer hook for event detection.

/// Right-hand side of `dy/dt = f(t, y)`.
pub trait OdeSystem<const N: usize> {
    fn rhs(&self, t: f64, y: &[f64; N], dy: &mut [f64; N]);
}

#[derive(Debug, Clone, Copy)]
pub struct Dopri5Config<const N: usize> {
    pub rtol: f64,
    pub atol: [f64; N],
    pub h_init: f64,
    pub h_max: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

/// An accepted step `[t0, t1]` with states and derivatives at both ends.
#[derive(Debug, Clone, Copy)]
pub struct Step<const N: usize> {
    pub t0: f64,
    pub y0: [f64; N],
    pub f0: [f64; N],
    pub t1: f64,
    pub y1: [f64; N],
    pub f1: [f64; N],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// The observer asked to stop.
    Stopped,
    /// Reached `t_end`.
    End,
    MaxSteps,
    StepUnderflow,
}

#[derive(Debug, Clone, Copy)]
pub struct Outcome<const N: usize> {
    pub t: f64,
    pub y: [f64; N],
    pub termination: Termination,
    pub accepted: usize,
    pub rejected: usize,
}

// Butcher tableau
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// 5th minus 4th order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[inline]
fn combo<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        let hc = h * c;
        for i in 0..N {
            out[i] += hc * k[i];
        }
    }
    out
}

/// Integrates from `(t0, y0)` towards `t_end`, calling `observe` after every
/// accepted step.
pub fn integrate<const N: usize, S, F>(
    sys: &S,
    t0: f64,
    y0: [f64; N],
    t_end: f64,
    cfg: &Dopri5Config<N>,
    mut observe: F,
) -> Outcome<N>
where
    S: OdeSystem<N>,
    F: FnMut(&Step<N>) -> Control,
{
    let mut t = t0;
    let mut y = y0;
    let mut k1 = [0.0; N];
    sys.rhs(t, &y, &mut k1);
    let mut h = cfg.h_init.min(cfg.h_max);
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) =
        ([0.0; N], [0.0; N], [0.0; N], [0.0; N], [0.0; N], [0.0; N]);

    loop {
        if t >= t_end {
            return Outcome { t, y, termination: Termination::End, accepted, rejected };
        }
        if accepted + rejected >= cfg.max_steps {
            return Outcome { t, y, termination: Termination::MaxSteps, accepted, rejected };
        }
        if h < cfg.h_min {
            return Outcome { t, y, termination: Termination::StepUnderflow, accepted, rejected };
        }
        let h_step = h.min(t_end - t);

        let y2 = combo(&y, h_step, &[(A21, &k1)]);
        sys.rhs(t + C2 * h_step, &y2, &mut k2);
        let y3 = combo(&y, h_step, &[(A31, &k1), (A32, &k2)]);
        sys.rhs(t + C3 * h_step, &y3, &mut k3);
        let y4 = combo(&y, h_step, &[(A41, &k1), (A42, &k2), (A43, &k3)]);
        sys.rhs(t + C4 * h_step, &y4, &mut k4);
        let y5 = combo(&y, h_step, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]);
        sys.rhs(t + C5 * h_step, &y5, &mut k5);
        let y6 = combo(
            &y,
            h_step,
            &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
        );
        sys.rhs(t + h_step, &y6, &mut k6);
        let y_new = combo(
            &y,
            h_step,
            &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
        );
        sys.rhs(t + h_step, &y_new, &mut k7);

        let mut err2 = 0.0;
        for i in 0..N {
            let e = h_step
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = cfg.atol[i] + cfg.rtol * y[i].abs().max(y_new[i].abs());
            let r = if sc > 0.0 { e / sc } else if e == 0.0 { 0.0 } else { f64::INFINITY };
            err2 += r * r;
        }
        let err = (err2 / N as f64).sqrt();

        if err <= 1.0 {
            let step = Step { t0: t, y0: y, f0: k1, t1: t + h_step, y1: y_new, f1: k7 };
            accepted += 1;
            t += h_step;
            y = y_new;
            k1 = k7;
            let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h_step * grow).min(cfg.h_max);
            if observe(&step) == Control::Stop {
                return Outcome { t, y, termination: Termination::Stopped, accepted, rejected };
            }
        } else {
            rejected += 1;
            h = h_step * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Oscillator;
    impl OdeSystem<2> for Oscillator {
        fn rhs(&self, _t: f64, y: &[f64; 2], dy: &mut [f64; 2]) {
            dy[0] = y[1];
            dy[1] = -y[0];
        }
    }

    fn cfg(tol: f64) -> Dopri5Config<2> {
        Dopri5Config {
            rtol: tol,
            atol: [tol; 2],
            h_init: 0.01,
            h_max: 1.0,
            h_min: 1e-14,
            max_steps: 1_000_000,
        }
    }

    #[test]
    fn harmonic_oscillator_accuracy_scales_with_tolerance() {
        let t_end: f64 = 10.0;
        let exact = [t_end.cos(), -t_end.sin()];
        let e6 = integrate(&Oscillator, 0.0, [1.0, 0.0], t_end, &cfg(1e-6), |_| Control::Continue);
        let e10 = integrate(&Oscillator, 0.0, [1.0, 0.0], t_end, &cfg(1e-10), |_| Control::Continue);
        assert_eq!(e6.termination, Termination::End);
        let err = |o: &Outcome<2>| ((o.y[0] - exact[0]).powi(2) + (o.y[1] - exact[1]).powi(2)).sqrt();
        assert!(err(&e6) < 1e-4);
        assert!(err(&e10) < 1e-8);
        assert!(e10.accepted > e6.accepted);
    }

    #[test]
    fn observer_can_stop() {
        let mut seen = 0;
        let out = integrate(&Oscillator, 0.0, [1.0, 0.0], 100.0, &cfg(1e-8), |s| {
            seen += 1;
            assert!(s.t1 > s.t0);
            if s.t1 > 1.0 { Control::Stop } else { Control::Continue }
        });
        assert_eq!(out.termination, Termination::Stopped);
        assert_eq!(seen, out.accepted);
        assert!(out.t > 1.0 && out.t < 3.0);
    }

    #[test]
    fn fifth_order_convergence_with_fixed_steps() {
        // huge tolerance forces every step to be accepted at h_max
        let run = |h: f64| {
            let c = Dopri5Config { rtol: 1e300, atol: [1e300; 2], h_init: h, h_max: h, h_min: 0.0, max_steps: usize::MAX };
            let o = integrate(&Oscillator, 0.0, [1.0, 0.0], 2.0, &c, |_| Control::Continue);
            (o.y[0] - 2f64.cos()).abs()
        };
        let ratio = run(0.05) / run(0.025);
        assert!(ratio > 25.0 && ratio < 45.0, "ratio {ratio}");
    }
}
