//! Variance-exploding noise schedule and the closed-form coefficients of the
//! Gaussian Schrödinger bridge between a clean signal `x0` and its degraded
//! observation `y`.
//!
//! With zero drift and `g²(t) = c·k^(2t)` the scaling `α_t` is identically one
//! and the accumulated variance is `σ_t² = c·(k^(2t) − 1) / (2 ln k)`. The
//! bridge marginal is
//!
//! ```text
//! x_t | x0, y ~ N(w_x(t)·x0 + w_y(t)·y, σ_x²(t))
//! w_x = σ̄_t²/σ_T²,  w_y = σ_t²/σ_T²,  σ_x² = σ̄_t²·σ_t²/σ_T²,  σ̄_t² = σ_T² − σ_t²
//! ```
//!
//! All schedule math is `f64`; the endpoint cancellations (`σ̄_T = 0`) are not
//! representable reliably in single precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Horizon `T`. Fixed.
pub const T_END: f64 = 1.0;

/// Transition variances in `[-VAR_CLAMP, 0)` are treated as rounding noise.
pub const VAR_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    /// Magnitude of the diffusion coefficient.
    pub c: f64,
    /// Growth rate, strictly greater than one.
    pub k: f64,
    /// Smallest grid time `t_0`.
    pub t_eps: f64,
    /// Grid resolution `N`; grid times are `n/N` for `n = 1..=N`.
    pub n_steps: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { c: 0.40, k: 2.6, t_eps: 0.03, n_steps: 4 }
    }
}

/// Marginal quantities of the bridge at a single time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeCoefficients {
    pub t: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    /// `σ_t²`, variance accumulated from 0 to t.
    pub sigma2: f64,
    /// `σ̄_t² = σ_T² − σ_t²`.
    pub sigma2_bar: f64,
    pub w_x: f64,
    pub w_y: f64,
    /// Standard deviation of the marginal, `σ_x(t)`.
    pub sigma_x: f64,
}

impl BridgeCoefficients {
    pub fn marginal_var(&self) -> f64 {
        self.sigma_x * self.sigma_x
    }
}

/// Gaussian forward transition `x_to | x_from, y ~ N(a·x_from + b·y, var)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionParams {
    pub t_from: f64,
    pub t_to: f64,
    pub coef_x: f64,
    pub coef_y: f64,
    pub var: f64,
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=T_END).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, {T_END}]")));
    }
    Ok(())
}

impl ScheduleParams {
    pub fn new(c: f64, k: f64, t_eps: f64, n_steps: usize) -> Result<Self> {
        let s = Self { c, k, t_eps, n_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::Config(format!("schedule c must be > 0, got {}", self.c)));
        }
        if !(self.k.is_finite() && self.k > 1.0) {
            return Err(Error::Config(format!("schedule k must be > 1, got {}", self.k)));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("schedule n_steps must be >= 1".into()));
        }
        let first = T_END / self.n_steps as f64;
        if !(self.t_eps > 0.0 && self.t_eps < first) {
            return Err(Error::Config(format!(
                "schedule t_eps must lie in (0, 1/N = {first}), got {}",
                self.t_eps
            )));
        }
        Ok(())
    }

    /// Same schedule constants on a different grid.
    pub fn with_steps(&self, n_steps: usize) -> Result<Self> {
        Self::new(self.c, self.k, self.t_eps, n_steps)
    }

    /// Grid time `t_n`; `t_0` is `t_eps`.
    pub fn grid_time(&self, n: usize) -> f64 {
        if n == 0 {
            self.t_eps
        } else {
            n as f64 / self.n_steps as f64
        }
    }

    /// `[t_0, t_1, ..., t_N]`.
    pub fn grid(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|n| self.grid_time(n)).collect()
    }

    /// Squared diffusion coefficient `g²(t) = c·k^(2t)`.
    pub fn diffusion_sq(&self, t: f64) -> f64 {
        self.c * self.k.powf(2.0 * t)
    }

    /// Accumulated variance `σ_t²`.
    pub fn sigma_sq(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.sigma_sq_unchecked(t))
    }

    fn sigma_sq_unchecked(&self, t: f64) -> f64 {
        let ln_k = self.k.ln();
        self.c * (2.0 * t * ln_k).exp_m1() / (2.0 * ln_k)
    }

    /// `σ_T²`.
    pub fn sigma_sq_end(&self) -> f64 {
        self.sigma_sq_unchecked(T_END)
    }

    pub fn marginal_coeffs(&self, t: f64) -> Result<BridgeCoefficients> {
        check_time(t)?;
        let s2_end = self.sigma_sq_end();
        let s2 = self.sigma_sq_unchecked(t);
        let s2_bar = s2_end - s2;
        Ok(BridgeCoefficients {
            t,
            alpha: 1.0,
            alpha_bar: 1.0,
            sigma2: s2,
            sigma2_bar: s2_bar,
            w_x: s2_bar / s2_end,
            w_y: s2 / s2_end,
            sigma_x: (s2_bar * s2 / s2_end).sqrt(),
        })
    }

    /// Coefficients of `q(x_to | x_from, y)`.
    ///
    /// `a = w_x(to)/w_x(from)`, `b = w_y(to) − a·w_y(from)` and
    /// `var = σ_x²(to) − a²·σ_x²(from)`. For the VE schedule these reduce to
    /// `a = σ̄_to²/σ̄_from²`, `b = (σ_to² − σ_from²)/σ̄_from²` and
    /// `var = σ̄_to²·(σ_to² − σ_from²)/σ̄_from²`, which are evaluated directly
    /// because they avoid the subtraction of nearly equal terms.
    pub fn transition_params(&self, t_from: f64, t_to: f64) -> Result<TransitionParams> {
        check_time(t_from)?;
        check_time(t_to)?;
        if t_from >= t_to {
            return Err(Error::Ordering { from: t_from, to: t_to });
        }
        let s2_end = self.sigma_sq_end();
        let s2_from = self.sigma_sq_unchecked(t_from);
        let s2_to = self.sigma_sq_unchecked(t_to);
        let bar_from = s2_end - s2_from;
        let bar_to = s2_end - s2_to;
        if bar_from <= 0.0 {
            return Err(Error::Domain(format!(
                "transition out of t = {t_from}: w_x(t_from) = 0"
            )));
        }
        let coef_x = bar_to / bar_from;
        let coef_y = (s2_to - s2_from) / bar_from;
        let mut var = bar_to * (s2_to - s2_from) / bar_from;
        if (-VAR_CLAMP..0.0).contains(&var) {
            var = 0.0;
        }
        if var < 0.0 {
            return Err(Error::Domain(format!("negative transition variance {var}")));
        }
        Ok(TransitionParams { t_from, t_to, coef_x, coef_y, var })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let inner: f64 = (1..n).map(|i| f(a + i as f64 * h)).sum();
        h * (0.5 * f(a) + inner + 0.5 * f(b))
    }

    #[test]
    fn sigma_sq_boundaries_and_monotonicity() {
        let s = ScheduleParams::default();
        assert_eq!(s.sigma_sq(0.0).unwrap(), 0.0);
        assert!(s.sigma_sq(0.5).unwrap() > s.sigma_sq(0.25).unwrap());
        assert!(matches!(s.sigma_sq(1.5), Err(Error::Domain(_))));
        assert!(matches!(s.sigma_sq(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn sigma_sq_matches_quadrature_of_diffusion() {
        let s = ScheduleParams::default();
        let closed = 0.4 * (2.6f64 * 2.6 - 1.0) / (2.0 * 2.6f64.ln());
        let quad = trapezoid(|tau| s.diffusion_sq(tau), 0.0, 1.0, 1_000_000);
        let got = s.sigma_sq(1.0).unwrap();
        assert!(((got - closed) / closed).abs() < 1e-12);
        assert!(((got - quad) / quad).abs() < 1e-8, "{got} vs {quad}");
        for t in [0.1, 0.37, 0.8] {
            let q = trapezoid(|tau| s.diffusion_sq(tau), 0.0, t, 1_000_000);
            let g = s.sigma_sq(t).unwrap();
            assert!(((g - q) / q).abs() < 1e-8);
        }
    }

    #[test]
    fn marginal_endpoints_are_exact() {
        let s = ScheduleParams::default();
        let c0 = s.marginal_coeffs(0.0).unwrap();
        assert_eq!((c0.w_x, c0.w_y, c0.sigma_x), (1.0, 0.0, 0.0));
        let c1 = s.marginal_coeffs(1.0).unwrap();
        assert_eq!((c1.w_x, c1.w_y, c1.sigma_x), (0.0, 1.0, 0.0));
    }

    #[test]
    fn marginal_midpoint_relations() {
        let s = ScheduleParams::default();
        let c = s.marginal_coeffs(0.5).unwrap();
        assert!((c.w_x + c.w_y - 1.0).abs() < 1e-12);
        let expect = c.sigma2_bar * c.sigma2 / s.sigma_sq_end();
        assert!((c.marginal_var() - expect).abs() < 1e-14);
        assert!(c.sigma_x > 0.0);
    }

    #[test]
    fn transition_into_end_collapses_to_y() {
        let s = ScheduleParams::default();
        let p = s.transition_params(s.grid_time(3), 1.0).unwrap();
        assert_eq!((p.coef_x, p.coef_y, p.var), (0.0, 1.0, 0.0));
    }

    #[test]
    fn transition_errors() {
        let s = ScheduleParams::default();
        assert!(matches!(s.transition_params(0.5, 0.5), Err(Error::Ordering { .. })));
        assert!(matches!(s.transition_params(0.6, 0.5), Err(Error::Ordering { .. })));
        assert!(matches!(s.transition_params(1.0, 1.0), Err(Error::Ordering { .. })));
    }

    #[test]
    fn degenerate_transition_is_identity() {
        let s = ScheduleParams::default();
        let p = s.transition_params(0.4, 0.4 + 1e-9).unwrap();
        assert!((p.coef_x - 1.0).abs() < 1e-8);
        assert!(p.coef_y.abs() < 1e-8);
        assert!(p.var.abs() < 1e-8);
    }

    #[test]
    fn composition_identities_random_schedules() {
        let mut rng = crate::rng::stream(11, &[]);
        for _ in 0..100 {
            let s = ScheduleParams::new(rng.random_range(0.05..2.0), rng.random_range(1.1..10.0), 0.01, 4)
                .unwrap();
            for _ in 0..200 {
                let a: f64 = rng.random();
                let b: f64 = rng.random();
                let (from, to) = if a < b { (a, b) } else { (b, a) };
                if from == to {
                    continue;
                }
                let cf = s.marginal_coeffs(from).unwrap();
                let ct = s.marginal_coeffs(to).unwrap();
                let p = s.transition_params(from, to).unwrap();
                let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1e-300);
                assert!((p.coef_x * cf.w_x - ct.w_x).abs() <= 1e-10 * ct.w_x.abs().max(1e-12));
                assert!(rel(p.coef_x * cf.w_y + p.coef_y, ct.w_y) < 1e-10);
                let lhs = p.coef_x * p.coef_x * cf.marginal_var() + p.var;
                assert!((lhs - ct.marginal_var()).abs() <= 1e-10 * ct.marginal_var().max(1e-300));
            }
        }
    }

    #[test]
    fn validation() {
        assert!(ScheduleParams::new(0.0, 2.0, 0.01, 4).is_err());
        assert!(ScheduleParams::new(1.0, 1.0, 0.01, 4).is_err());
        assert!(ScheduleParams::new(1.0, 2.0, 0.3, 4).is_err());
        assert!(ScheduleParams::new(1.0, 2.0, 0.01, 0).is_err());
        let s = ScheduleParams::default();
        assert_eq!(s.grid(), vec![0.03, 0.25, 0.5, 0.75, 1.0]);
    }
}
