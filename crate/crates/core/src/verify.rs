//! Self-checks run by `sbuf verify`: analytic schedule identities,
//! Monte-Carlo bridge properties, gradient checks and signal round trips.
//!
//! Reports hold no timings, so a fixed seed gives identical output bytes.

use std::fmt;

use rand::Rng;

use crate::autodiff::{gradcheck, Tape};
use crate::bridge::{posterior_params, reverse_step_deterministic, reverse_step_stochastic, ufogen_infer, BridgeState, SamplerMode};
use crate::error::Result;
use crate::nets::{Arch, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, InputRep};
use crate::rng::{normal_vec, stream};
use crate::schedule::{BridgeCoefficients, ScheduleParams};
use crate::signal::compress::CompressionConfig;
use crate::signal::stft::StftConfig;
use crate::signal::synth::{mix_at_snr, snr_db};
use crate::Tensor;

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Negative control: flips the sign of `w_y` inside the identity suite.
    pub corrupt_w_y: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub group: &'static str,
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}.{} measured={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.group,
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

fn check(group: &'static str, name: &'static str, measured: f64, tolerance: f64) -> CheckResult {
    CheckResult { group, name, measured, tolerance, passed: measured <= tolerance }
}

/// `|a − b| / max(|a|, |b|)`, 0 when both are 0.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Random schedule with `c ∈ [0.05, 2]`, `k ∈ [1.1, 5]`.
pub fn random_schedule(rng: &mut impl Rng) -> ScheduleParams {
    ScheduleParams { c: rng.random_range(0.05..2.0), k: rng.random_range(1.1..5.0), t_eps: 0.01, n_steps: 4 }
}

/// Worst relative error of each schedule identity.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IdentityErrors {
    pub weights_sum: f64,
    pub variance_split: f64,
    pub compose_a: f64,
    pub compose_b: f64,
    pub compose_var: f64,
    pub marginal_consistency: f64,
}

/// Checks the schedule identities over `n_sched` random schedules and
/// `n_pairs` time triples `s < t < u` each.
pub fn schedule_identities(seed: u64, n_sched: usize, n_pairs: usize, corrupt_w_y: bool) -> Result<IdentityErrors> {
    let mut rng = stream(seed, &[0x1D]);
    let mut e = IdentityErrors::default();
    let upd = |slot: &mut f64, v: f64| *slot = slot.max(v);
    for _ in 0..n_sched {
        let sched = random_schedule(&mut rng);
        let coeffs = |t: f64| -> Result<BridgeCoefficients> {
            let mut c = sched.marginal_coeffs(t)?;
            if corrupt_w_y {
                c.w_y = -c.w_y;
            }
            Ok(c)
        };
        let end = sched.sigma_sq_end();
        for _ in 0..n_pairs {
            let mut ts = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            ts.sort_by(f64::total_cmp);
            let [s, t, u] = ts;
            if !(s < t && t < u) {
                continue;
            }
            let cs = coeffs(s)?;
            let cu = coeffs(u)?;
            upd(&mut e.weights_sum, rel_err(cs.w_x + cs.w_y, 1.0));
            upd(&mut e.variance_split, rel_err(cs.sigma2 + cs.sigma2_bar, end));
            let st = sched.transition_params(s, t)?;
            let tu = sched.transition_params(t, u)?;
            let su = sched.transition_params(s, u)?;
            upd(&mut e.compose_a, rel_err(su.coef_x, st.coef_x * tu.coef_x));
            upd(&mut e.compose_b, rel_err(su.coef_y, tu.coef_x * st.coef_y + tu.coef_y));
            upd(&mut e.compose_var, rel_err(su.var, tu.coef_x * tu.coef_x * st.var + tu.var));
            let mc = rel_err(cu.w_x, su.coef_x * cs.w_x)
                .max(rel_err(cu.w_y, su.coef_x * cs.w_y + su.coef_y))
                .max(rel_err(cu.marginal_var(), su.coef_x * su.coef_x * cs.marginal_var() + su.var));
            upd(&mut e.marginal_consistency, mc);
        }
    }
    Ok(e)
}

/// Largest standardized deviation (in standard errors) of sample mean and
/// variance from `(mean, var)`. Exact targets with zero variance must match
/// exactly or give infinity.
pub fn moment_z(samples: &[f64], mean: f64, var: f64) -> f64 {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    let v = samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        let off = samples.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
        return if off <= 1e-12 * mean.abs().max(1.0) { 0.0 } else { f64::INFINITY };
    }
    let z_mean = (m - mean).abs() / (var / n).sqrt();
    let z_var = (v - var).abs() / (var * (2.0 / (n - 1.0)).sqrt());
    z_mean.max(z_var)
}

/// Composes forward transitions from `t_0` over the grid, `x0 = 0`, `y = 1`,
/// and returns the worst moment deviation across grid times.
pub fn chapman_kolmogorov(sched: &ScheduleParams, draws: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, &[0xC4]);
    let grid = sched.grid();
    let c0 = sched.marginal_coeffs(grid[0])?;
    let mut x: Vec<f64> = normal_vec(&mut rng, draws).into_iter().map(|z| c0.w_y + c0.sigma_x * z).collect();
    let mut worst = moment_z(&x, c0.w_y, c0.marginal_var());
    for w in grid.windows(2) {
        let tr = sched.transition_params(w[0], w[1])?;
        let sd = tr.var.sqrt();
        for v in x.iter_mut() {
            *v = tr.coef_x * *v + tr.coef_y + sd * crate::rng::normal(&mut rng);
        }
        let c = sched.marginal_coeffs(w[1])?;
        worst = worst.max(moment_z(&x, c.w_y, c.marginal_var()));
    }
    Ok(worst)
}

/// Posterior of `x_s | x_t` by conditioning the bivariate Gaussian
/// `(x_s, x_t)` with Brownian-bridge covariance `σ_s²·σ̄_t²/σ_T²`.
pub fn posterior_by_conditioning(sched: &ScheduleParams, x0: f64, y: f64, x_t: f64, s: f64, t: f64) -> Result<(f64, f64)> {
    let cs = sched.marginal_coeffs(s)?;
    let ct = sched.marginal_coeffs(t)?;
    let end = sched.sigma_sq_end();
    let (m_s, m_t) = (cs.w_x * x0 + cs.w_y * y, ct.w_x * x0 + ct.w_y * y);
    let (v_s, v_t) = (cs.sigma2 * cs.sigma2_bar / end, ct.sigma2 * ct.sigma2_bar / end);
    let cov = cs.sigma2 * ct.sigma2_bar / end;
    if v_t == 0.0 {
        return Ok((m_s, v_s));
    }
    Ok((m_s + cov / v_t * (x_t - m_t), v_s - cov * cov / v_t))
}

/// Worst error of [`posterior_params`] against [`posterior_by_conditioning`]
/// over random scalar instances; errors are relative to `max(1, |value|)`.
pub fn posterior_oracle(seed: u64, instances: usize) -> Result<f64> {
    let mut rng = stream(seed, &[0x90]);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let sched = random_schedule(&mut rng);
        let (mut s, mut t) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        if s > t {
            std::mem::swap(&mut s, &mut t);
        }
        if s == t {
            continue;
        }
        let (x0, y, x_t) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let p = posterior_params(&Tensor::vector(vec![x_t]), &Tensor::vector(vec![x0]), &Tensor::vector(vec![y]), s, t, &sched)?;
        let (m, v) = posterior_by_conditioning(&sched, x0, y, x_t, s, t)?;
        let err_m = (p.mean.item() - m).abs() / m.abs().max(1.0);
        let err_v = (p.var - v).abs() / v.abs().max(1.0);
        worst = worst.max(err_m).max(err_v);
    }
    Ok(worst)
}

/// Oracle inference: every mode and step count returns `x0` bit for bit.
/// Returns the number of mismatching runs.
pub fn oracle_exactness(sched: &ScheduleParams, seed: u64) -> Result<usize> {
    let x0 = Tensor::new([2, 5], (0..10).map(|i| (i as f64 * 0.7).sin()).collect())?;
    let y = Tensor::new([2, 5], (0..10).map(|i| (i as f64 * 1.3).cos()).collect())?;
    let mut bad = 0;
    for mode in [SamplerMode::Marginal, SamplerMode::Stochastic, SamplerMode::Deterministic] {
        for n in 1..=sched.n_steps {
            let mut rng = stream(seed, &[0x0A, n as u64]);
            let mut oracle = |_: &Tensor, _: &Tensor, _: f64| Ok(x0.clone());
            if ufogen_infer(&y, &mut oracle, n, sched, &mut rng, mode)? != x0 {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

/// Runs a reverse sampler with an oracle over `draws` scalar chains
/// (`x0 = 0`, `y = 1`) and returns the worst moment deviation at the visited
/// grid times. The stochastic chain starts at `x_T = y`; the deterministic one
/// starts from a marginal draw at `t_{N−1}`, since `x_T = y` carries no noise
/// direction to preserve.
pub fn reverse_marginals(sched: &ScheduleParams, mode: SamplerMode, draws: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, &[0x4E, mode as u64]);
    let x0 = Tensor::zeros([draws]);
    let y = Tensor::full([draws], 1.0);
    let n = sched.n_steps;
    let mut state = match mode {
        SamplerMode::Deterministic if n >= 2 => {
            let t = sched.grid_time(n - 1);
            BridgeState { t, x: crate::bridge::marginal_sample(&x0, &y, t, sched, &mut rng)?, y: y.clone() }
        }
        _ => BridgeState::at_end(y.clone()),
    };
    let mut worst: f64 = 0.0;
    let start = (0..=n).rev().find(|&k| sched.grid_time(k) < state.t || k == 0).unwrap_or(0);
    for k in (0..=start).rev() {
        let t = sched.grid_time(k);
        if t >= state.t {
            continue;
        }
        state = match mode {
            SamplerMode::Deterministic => reverse_step_deterministic(&state, &x0, t, sched)?,
            _ => reverse_step_stochastic(&state, &x0, t, sched, &mut rng)?,
        };
        let c = sched.marginal_coeffs(t)?;
        worst = worst.max(moment_z(state.x.data(), c.w_y, c.marginal_var()));
    }
    Ok(worst)
}

/// Gradient checks of small generator and discriminator instances.
pub fn network_gradchecks(seed: u64) -> Result<f64> {
    let stft = StftConfig { fft_size: 16, hop: 4 };
    let gens = [
        GeneratorConfig { base_channels: 2, depth: 1, time_embed_dim: 4, stft, ..Default::default() },
        GeneratorConfig { base_channels: 2, depth: 1, time_embed_dim: 4, stft, input_rep: InputRep::Waveform, ..Default::default() },
        GeneratorConfig { arch: Arch::Mlp, base_channels: 4, time_embed_dim: 4, ..Default::default() },
    ];
    let mut worst: f64 = 0.0;
    let mut rng = stream(seed, &[0x6C]);
    for cfg in &gens {
        let (g, mut p) = Generator::new(cfg, seed)?;
        // Nonzero output layer so every path carries gradient.
        for t in p.tensors.iter_mut() {
            if t.data().iter().all(|&v| v == 0.0) {
                *t = Tensor::new(t.shape(), normal_vec(&mut rng, t.len()).into_iter().map(|v| 0.1 * v).collect())?;
            }
        }
        let len = if cfg.arch == Arch::Mlp { 3 } else { 24 };
        let x = Tensor::new([1, len], normal_vec(&mut rng, len))?;
        let y = Tensor::new([1, len], normal_vec(&mut rng, len))?;
        let mut inputs = vec![x, y];
        inputs.extend(p.tensors.iter().cloned());
        let rep = gradcheck(&inputs, 1e-5, |_: &Tape, v| {
            let out = g.forward(&v[2..], v[0], v[1], &[0.4])?;
            Ok(out.square().sum())
        })?;
        worst = worst.max(rep.max_rel_err);
    }
    let dcfg = DiscriminatorConfig {
        scales: vec![StftConfig { fft_size: 16, hop: 4 }, StftConfig { fft_size: 8, hop: 2 }],
        channels: 2,
        time_embed_dim: 4,
        compression: CompressionConfig::default(),
        ..Default::default()
    };
    let (d, p) = Discriminator::new(&dcfg, seed)?;
    let x = Tensor::new([1, 20], normal_vec(&mut rng, 20))?;
    let y = Tensor::new([1, 20], normal_vec(&mut rng, 20))?;
    let mut inputs = vec![x, y];
    inputs.extend(p.tensors.iter().cloned());
    let rep = gradcheck(&inputs, 1e-5, |_: &Tape, v| {
        let outs = d.forward(&v[2..], v[0], v[1], &[0.6])?;
        let mut total = outs[0].square().sum();
        for o in &outs[1..] {
            total = total.add(o.square().sum())?;
        }
        Ok(total)
    })?;
    Ok(worst.max(rep.max_rel_err))
}

/// Round-trip and exactness checks of the signal substrate.
pub fn signal_checks(seed: u64) -> Result<(f64, f64, f64)> {
    let mut rng = stream(seed, &[0x51]);
    let x = normal_vec(&mut rng, 8000);
    let cfg = StftConfig { fft_size: 256, hop: 64 };
    let back = crate::signal::stft::istft(&crate::signal::stft::stft(&x, &cfg)?, &cfg, x.len())?;
    let stft_err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let comp = CompressionConfig::default();
    let spec = crate::signal::stft::stft(&x[..1024], &cfg)?;
    let rt = comp.decompress(&comp.compress(&spec));
    let comp_err = spec.data.iter().zip(&rt.data).map(|(a, b)| (a - b).norm() / a.norm().max(1e-300)).fold(0.0, f64::max);

    let mut snr_err: f64 = 0.0;
    for _ in 0..20 {
        let clean = normal_vec(&mut rng, 1000);
        let noise = normal_vec(&mut rng, 1000);
        let target = rng.random_range(-10.0..30.0);
        let (noisy, _) = mix_at_snr(&clean, &noise, target)?;
        snr_err = snr_err.max((snr_db(&clean, &noisy) - target).abs());
    }
    Ok((stft_err, comp_err, snr_err))
}

/// Runs every suite. Failures are reported, not returned as errors.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let seed = opts.seed;
    let mut out = Vec::new();
    let id = schedule_identities(seed, 100, 1000, opts.corrupt_w_y)?;
    out.push(check("schedule", "weights_sum_to_one", id.weights_sum, 1e-10));
    out.push(check("schedule", "variance_split", id.variance_split, 1e-10));
    out.push(check("schedule", "compose_coef_x", id.compose_a, 1e-10));
    out.push(check("schedule", "compose_coef_y", id.compose_b, 1e-10));
    out.push(check("schedule", "compose_var", id.compose_var, 1e-10));
    out.push(check("schedule", "transition_of_marginal", id.marginal_consistency, 1e-10));

    let sched = ScheduleParams::default();
    out.push(check("bridge", "chapman_kolmogorov_z", chapman_kolmogorov(&sched, 100_000, seed)?, 3.0));
    out.push(check("bridge", "posterior_vs_conditioning", posterior_oracle(seed, 1000)?, 1e-8));
    out.push(check("bridge", "oracle_inference_mismatches", oracle_exactness(&sched, seed)? as f64, 0.0));
    out.push(check("bridge", "stochastic_reverse_marginal_z", reverse_marginals(&sched, SamplerMode::Stochastic, 100_000, seed)?, 3.0));
    out.push(check("bridge", "deterministic_reverse_marginal_z", reverse_marginals(&sched, SamplerMode::Deterministic, 100_000, seed)?, 3.0));

    out.push(check("autodiff", "network_gradcheck", network_gradchecks(seed)?, 1e-5));

    let (stft_err, comp_err, snr_err) = signal_checks(seed)?;
    out.push(check("signal", "stft_round_trip", stft_err, 1e-6));
    out.push(check("signal", "compression_round_trip", comp_err, 1e-6));
    out.push(check("signal", "mix_at_snr_db", snr_err, 1e-9));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_w_y_breaks_identities() {
        let good = schedule_identities(1, 5, 50, false).unwrap();
        let bad = schedule_identities(1, 5, 50, true).unwrap();
        assert!(good.marginal_consistency < 1e-10);
        assert!(bad.marginal_consistency > 1e-3 && bad.weights_sum > 1e-3);
        assert_eq!(good.compose_a, bad.compose_a);
    }

    #[test]
    fn moment_z_flags_wrong_moments() {
        let mut rng = stream(0, &[]);
        let x = normal_vec(&mut rng, 20_000);
        assert!(moment_z(&x, 0.0, 1.0) < 4.0);
        assert!(moment_z(&x, 0.2, 1.0) > 10.0);
        assert!(moment_z(&x, 0.0, 2.0) > 10.0);
        assert_eq!(moment_z(&[1.0; 10], 1.0, 0.0), 0.0);
    }

    #[test]
    fn conditioning_oracle_at_endpoints() {
        let sched = ScheduleParams::default();
        // x_T = y is uninformative: the posterior equals the marginal at s.
        let (m, v) = posterior_by_conditioning(&sched, 0.5, 2.0, 2.0, 0.3, 1.0).unwrap();
        let c = sched.marginal_coeffs(0.3).unwrap();
        assert!((m - (0.5 * c.w_x + 2.0 * c.w_y)).abs() < 1e-15);
        assert!((v - c.marginal_var()).abs() < 1e-15);
    }
}
