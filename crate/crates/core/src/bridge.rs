//! Sampling on the bridge: marginals, forward transitions, the bridge
//! posterior, reverse samplers and the few-step inference loop.
//!
//! Every function works elementwise, so a tensor may hold one waveform or a
//! batch; `x` and `y` only need matching shapes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::normal;
use crate::schedule::{ScheduleParams, T_END};

/// Current point of a reverse trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeState {
    pub t: f64,
    pub x: Tensor,
    pub y: Tensor,
}

impl BridgeState {
    /// The start of every reverse trajectory: `x_T = y`.
    pub fn at_end(y: Tensor) -> Self {
        Self { t: T_END, x: y.clone(), y }
    }
}

/// Gaussian `q(x_s | x_t, x0, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mean: Tensor,
    pub var: f64,
}

/// How inference moves from one grid time to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Re-noise the prediction through the forward marginal.
    Marginal,
    /// Sample the bridge posterior.
    Stochastic,
    /// Keep the current noise direction, no fresh noise.
    Deterministic,
}

impl SamplerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerMode::Marginal => "marginal",
            SamplerMode::Stochastic => "stochastic",
            SamplerMode::Deterministic => "deterministic",
        }
    }
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal" => Ok(Self::Marginal),
            "stochastic" => Ok(Self::Stochastic),
            "deterministic" => Ok(Self::Deterministic),
            _ => Err(Error::Config(format!("unknown sampler mode {s:?}"))),
        }
    }
}

/// Anything that maps `(x_t, y, t)` to an estimate of `x0`.
pub trait Denoiser {
    fn denoise(&mut self, x_t: &Tensor, y: &Tensor, t: f64) -> Result<Tensor>;
}

/// Returns the true clean signal regardless of its input.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub x0: Tensor,
    pub calls: usize,
}

impl OracleDenoiser {
    pub fn new(x0: Tensor) -> Self {
        Self { x0, calls: 0 }
    }
}

impl Denoiser for OracleDenoiser {
    fn denoise(&mut self, _x_t: &Tensor, _y: &Tensor, _t: f64) -> Result<Tensor> {
        self.calls += 1;
        Ok(self.x0.clone())
    }
}

/// Returns `y`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn denoise(&mut self, _x_t: &Tensor, y: &Tensor, _t: f64) -> Result<Tensor> {
        Ok(y.clone())
    }
}

impl<F> Denoiser for F
where
    F: FnMut(&Tensor, &Tensor, f64) -> Result<Tensor>,
{
    fn denoise(&mut self, x_t: &Tensor, y: &Tensor, t: f64) -> Result<Tensor> {
        self(x_t, y, t)
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    a.expect_shape(b.shape())
}

/// `p·a + q·b + s·z`, with `z` standard normal drawn only when `s ≠ 0`.
fn affine_noise(a: &Tensor, p: f64, b: &Tensor, q: f64, s: f64, rng: &mut impl Rng) -> Tensor {
    let mut out = a.zip_map(b, |u, v| p * u + q * v).expect("shapes checked by caller");
    if s != 0.0 {
        out.data_mut().iter_mut().for_each(|v| *v += s * normal(rng));
    }
    out
}

/// Draws `x_t ~ N(w_x·x0 + w_y·y, σ_x²)`.
pub fn marginal_sample(
    x0: &Tensor,
    y: &Tensor,
    t: f64,
    sched: &ScheduleParams,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    same_shape(x0, y)?;
    let c = sched.marginal_coeffs(t)?;
    Ok(affine_noise(x0, c.w_x, y, c.w_y, c.sigma_x, rng))
}

/// Draws `x_to ~ N(a·x_prev + b·y, var)`.
pub fn transition_sample(
    x_prev: &Tensor,
    y: &Tensor,
    t_from: f64,
    t_to: f64,
    sched: &ScheduleParams,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    same_shape(x_prev, y)?;
    let p = sched.transition_params(t_from, t_to)?;
    Ok(affine_noise(x_prev, p.coef_x, y, p.coef_y, p.var.sqrt(), rng))
}

/// Exact posterior of `x_s` given `x_t`, with `x0_hat` standing in for `x0`.
///
/// The prior `N(m_s, P)` comes from the marginal at `s`; the observation
/// `x_t = a·x_s + b·y + noise(var)` from the transition. The update is written
/// in gain form, `K = a·P/(a²P + var)`, which covers both degenerate cases:
/// `P = 0` pins the result to `m_s`, `var = 0` makes it a deterministic
/// inversion of the transition.
pub fn posterior_params(
    x_t: &Tensor,
    x0_hat: &Tensor,
    y: &Tensor,
    s: f64,
    t: f64,
    sched: &ScheduleParams,
) -> Result<PosteriorParams> {
    same_shape(x_t, y)?;
    same_shape(x0_hat, y)?;
    if s >= t {
        return Err(Error::Ordering { from: s, to: t });
    }
    let cs = sched.marginal_coeffs(s)?;
    let prior = cs.marginal_var();
    if prior == 0.0 {
        // Pinned endpoint; also covers s = 0.
        let mean = x0_hat.zip_map(y, |x0, y| cs.w_x * x0 + cs.w_y * y)?;
        return Ok(PosteriorParams { mean, var: 0.0 });
    }
    let tr = sched.transition_params(s, t)?;
    let (a, b) = (tr.coef_x, tr.coef_y);
    let denom = a * a * prior + tr.var;
    let (gain, var) = if denom > 0.0 { (a * prior / denom, prior * tr.var / denom) } else { (0.0, prior) };
    let mut mean = x0_hat.zip_map(y, |x0, y| cs.w_x * x0 + cs.w_y * y)?;
    for ((m, &xt), &yv) in mean.data_mut().iter_mut().zip(x_t.data()).zip(y.data()) {
        *m += gain * (xt - a * *m - b * yv);
    }
    Ok(PosteriorParams { mean, var })
}

fn check_reverse(state: &BridgeState, t_to: f64) -> Result<()> {
    if t_to >= state.t {
        return Err(Error::Ordering { from: t_to, to: state.t });
    }
    same_shape(&state.x, &state.y)
}

/// One ancestral step: samples the bridge posterior at `t_to`.
pub fn reverse_step_stochastic(
    state: &BridgeState,
    x0_hat: &Tensor,
    t_to: f64,
    sched: &ScheduleParams,
    rng: &mut impl Rng,
) -> Result<BridgeState> {
    check_reverse(state, t_to)?;
    let post = posterior_params(&state.x, x0_hat, &state.y, t_to, state.t, sched)?;
    let sd = post.var.sqrt();
    let mut x = post.mean;
    if sd != 0.0 {
        x.data_mut().iter_mut().for_each(|v| *v += sd * normal(rng));
    }
    Ok(BridgeState { t: t_to, x, y: state.y.clone() })
}

/// Noise-direction-preserving step: the standardized residual
/// `r = (x − w_x·x0_hat − w_y·y)/σ_x` at the current time is carried over to
/// `t_to` unchanged. `r` is zero where `σ_x` vanishes.
pub fn reverse_step_deterministic(
    state: &BridgeState,
    x0_hat: &Tensor,
    t_to: f64,
    sched: &ScheduleParams,
) -> Result<BridgeState> {
    check_reverse(state, t_to)?;
    same_shape(x0_hat, &state.y)?;
    let from = sched.marginal_coeffs(state.t)?;
    let to = sched.marginal_coeffs(t_to)?;
    let mut x = Vec::with_capacity(state.x.len());
    for ((&xv, &x0), &yv) in state.x.data().iter().zip(x0_hat.data()).zip(state.y.data()) {
        let r = if from.sigma_x > 0.0 { (xv - from.w_x * x0 - from.w_y * yv) / from.sigma_x } else { 0.0 };
        x.push(to.w_x * x0 + to.w_y * yv + to.sigma_x * r);
    }
    Ok(BridgeState { t: t_to, x: Tensor::new(state.y.shape(), x)?, y: state.y.clone() })
}

/// Few-step inference from `x_T = y`.
///
/// The `n_steps` generator calls happen at `t = k/n_steps` for
/// `k = n_steps..1`. Between calls the state moves to the next time according
/// to `mode`; the last prediction is returned as is.
pub fn ufogen_infer<D: Denoiser + ?Sized>(
    y: &Tensor,
    generator: &mut D,
    n_steps: usize,
    sched: &ScheduleParams,
    rng: &mut impl Rng,
    mode: SamplerMode,
) -> Result<Tensor> {
    if n_steps == 0 || n_steps > sched.n_steps {
        return Err(Error::Config(format!(
            "inference steps must lie in 1..={}, got {n_steps}",
            sched.n_steps
        )));
    }
    let time = |k: usize| k as f64 / n_steps as f64;
    let mut state = BridgeState::at_end(y.clone());
    for k in (1..=n_steps).rev() {
        let x0_hat = generator.denoise(&state.x, y, state.t)?;
        same_shape(&x0_hat, y)?;
        if k == 1 {
            return Ok(x0_hat);
        }
        let t_next = time(k - 1);
        state = match mode {
            SamplerMode::Marginal => {
                BridgeState { t: t_next, x: marginal_sample(&x0_hat, y, t_next, sched, rng)?, y: y.clone() }
            }
            SamplerMode::Stochastic => reverse_step_stochastic(&state, &x0_hat, t_next, sched, rng)?,
            SamplerMode::Deterministic => reverse_step_deterministic(&state, &x0_hat, t_next, sched)?,
        };
    }
    unreachable!("loop returns at k = 1")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn s(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    #[test]
    fn marginal_endpoints_are_exact() {
        let sched = ScheduleParams::default();
        let x0 = Tensor::vector(vec![0.3, -1.7, 2.5]);
        let y = Tensor::vector(vec![1.1, 0.4, -0.2]);
        let mut rng = stream(1, &[]);
        assert_eq!(marginal_sample(&x0, &y, 0.0, &sched, &mut rng).unwrap(), x0);
        assert_eq!(marginal_sample(&x0, &y, 1.0, &sched, &mut rng).unwrap(), y);
        assert!(marginal_sample(&x0, &s(1.0), 0.5, &sched, &mut rng).is_err());
    }

    #[test]
    fn transition_to_end_is_y() {
        let sched = ScheduleParams::default();
        let y = Tensor::vector(vec![1.1, 0.4]);
        let x = Tensor::vector(vec![-5.0, 9.0]);
        let mut rng = stream(2, &[]);
        assert_eq!(transition_sample(&x, &y, 0.75, 1.0, &sched, &mut rng).unwrap(), y);
        assert!(matches!(transition_sample(&x, &y, 1.0, 1.0, &sched, &mut rng), Err(Error::Ordering { .. })));
        let near = transition_sample(&x, &y, 0.4, 0.4 + 1e-14, &sched, &mut rng).unwrap();
        assert!(near.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn posterior_limits() {
        let sched = ScheduleParams::default();
        let (xt, x0, y) = (s(0.7), s(-0.4), s(1.3));
        let p = posterior_params(&xt, &x0, &y, 0.0, 0.6, &sched).unwrap();
        assert_eq!(p.mean, x0);
        assert_eq!(p.var, 0.0);
        let p = posterior_params(&xt, &x0, &y, 0.6 - 1e-12, 0.6, &sched).unwrap();
        assert!((p.mean.item() - 0.7).abs() < 1e-9 && p.var < 1e-10);
        assert!(matches!(posterior_params(&xt, &x0, &y, 0.6, 0.6, &sched), Err(Error::Ordering { .. })));
    }

    #[test]
    fn posterior_from_end_ignores_x_t() {
        // x_T = y carries no information about x_s, so the posterior is the prior.
        let sched = ScheduleParams::default();
        let c = sched.marginal_coeffs(0.5).unwrap();
        let p = posterior_params(&s(1.3), &s(-0.4), &s(1.3), 0.5, 1.0, &sched).unwrap();
        assert!((p.mean.item() - (c.w_x * -0.4 + c.w_y * 1.3)).abs() < 1e-12);
        assert!((p.var - c.marginal_var()).abs() < 1e-12);
    }

    #[test]
    fn reverse_steps_land_on_prediction_at_zero() {
        let sched = ScheduleParams::default();
        let st = BridgeState { t: 0.25, x: s(0.9), y: s(1.0) };
        let x0 = s(-0.35);
        let a = reverse_step_stochastic(&st, &x0, 0.0, &sched, &mut stream(3, &[])).unwrap();
        let b = reverse_step_deterministic(&st, &x0, 0.0, &sched).unwrap();
        assert_eq!(a.x, x0);
        assert_eq!(b.x, x0);
        assert!(reverse_step_deterministic(&st, &x0, 0.5, &sched).is_err());
    }

    #[test]
    fn deterministic_from_end_follows_mean_path() {
        let sched = ScheduleParams::default();
        let y = Tensor::vector(vec![1.0, -2.0]);
        let x0 = Tensor::vector(vec![0.5, 0.25]);
        let out = reverse_step_deterministic(&BridgeState::at_end(y.clone()), &x0, 0.5, &sched).unwrap();
        let c = sched.marginal_coeffs(0.5).unwrap();
        let mean = x0.zip_map(&y, |a, b| c.w_x * a + c.w_y * b).unwrap();
        assert_eq!(out.x, mean);
    }

    #[test]
    fn deterministic_with_y_prediction() {
        let sched = ScheduleParams::default();
        let y = s(0.8);
        let st = BridgeState { t: 0.75, x: s(1.4), y: y.clone() };
        let out = reverse_step_deterministic(&st, &y, 0.5, &sched).unwrap();
        let (from, to) = (sched.marginal_coeffs(0.75).unwrap(), sched.marginal_coeffs(0.5).unwrap());
        let r = (1.4 - 0.8) / from.sigma_x;
        assert!((out.x.item() - (0.8 + to.sigma_x * r)).abs() < 1e-12);
    }

    #[test]
    fn one_step_is_one_generator_call() {
        let sched = ScheduleParams::default();
        let y = Tensor::vector(vec![0.2, -0.1, 0.4]);
        let mut seen = Vec::new();
        let mut gen = |xt: &Tensor, yy: &Tensor, t: f64| {
            seen.push((xt.clone(), yy.clone(), t));
            Ok(xt.map(|v| 2.0 * v))
        };
        let out = ufogen_infer(&y, &mut gen, 1, &sched, &mut stream(0, &[]), SamplerMode::Marginal).unwrap();
        assert_eq!(seen, vec![(y.clone(), y.clone(), 1.0)]);
        assert_eq!(out, y.map(|v| 2.0 * v));
    }

    #[test]
    fn oracle_inference_is_exact() {
        let sched = ScheduleParams::default();
        let x0 = Tensor::vector(vec![0.2, -0.9, 0.0, 3.0]);
        let y = Tensor::vector(vec![1.0, 1.0, -1.0, 0.5]);
        for mode in [SamplerMode::Marginal, SamplerMode::Stochastic, SamplerMode::Deterministic] {
            for n in 1..=4 {
                let mut oracle = OracleDenoiser::new(x0.clone());
                let out = ufogen_infer(&y, &mut oracle, n, &sched, &mut stream(4, &[]), mode).unwrap();
                assert_eq!(out, x0);
                assert_eq!(oracle.calls, n);
            }
        }
        let mut oracle = OracleDenoiser::new(x0.clone());
        for n in [0, 5] {
            let r = ufogen_infer(&y, &mut oracle, n, &sched, &mut stream(4, &[]), SamplerMode::Marginal);
            assert!(matches!(r, Err(Error::Config(_))));
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let sched = ScheduleParams::default();
        let x0 = Tensor::vector(vec![0.1; 16]);
        let y = Tensor::vector(vec![0.7; 16]);
        let a = marginal_sample(&x0, &y, 0.4, &sched, &mut stream(9, &[1])).unwrap();
        let b = marginal_sample(&x0, &y, 0.4, &sched, &mut stream(9, &[1])).unwrap();
        assert_eq!(a, b);
    }
}
