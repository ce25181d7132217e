//! Step-count × SNR evaluation sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{lsd, si_sdr};
use crate::bridge::{ufogen_infer, Denoiser, SamplerMode};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};
use crate::schedule::ScheduleParams;
use crate::signal::io::{read_wav, Manifest};
use crate::signal::stft::StftConfig;
use crate::signal::synth::Task;
use crate::Tensor;

const PURPOSE_SWEEP: u64 = 0x5357;

pub const CSV_HEADER: [&str; 8] = ["item", "task", "snr_db", "n_steps", "mode", "si_sdr_db", "lsd_db", "proc_per_sec"];

/// Bins whose edges are fixed by the reference evaluation; all other bins
/// are this implementation's choice.
const FIXED_BINS: [(f64, f64); 2] = [(-2.5, 2.5), (12.5, 17.5)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub steps: Vec<usize>,
    pub modes: Vec<SamplerMode>,
    /// Ascending SNR bin edges in dB; bin `i` is `[e_i, e_{i+1})`, the last
    /// one closed.
    pub snr_bins: Vec<f64>,
    /// Finest inference grid; step counts above the training grid run on
    /// this one.
    pub max_steps: usize,
    pub lsd_stft: StftConfig,
    /// Measure wall-clock time per cell. Off gives byte-stable CSVs.
    pub timing: bool,
    /// Also write an SVG of SI-SDR against steps per bin.
    pub plot: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: vec![1, 2, 4, 8],
            modes: vec![SamplerMode::Marginal, SamplerMode::Stochastic],
            snr_bins: vec![-7.5, -2.5, 2.5, 7.5, 12.5, 17.5],
            max_steps: 8,
            lsd_stft: StftConfig { fft_size: 256, hop: 64 },
            timing: false,
            plot: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("eval needs at least one step count and one mode".into()));
        }
        if let Some(&s) = self.steps.iter().find(|&&s| s == 0 || s > self.max_steps) {
            return Err(Error::Config(format!("eval step count {s} outside 1..={}", self.max_steps)));
        }
        if self.snr_bins.len() < 2 || self.snr_bins.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("snr_bins must be at least two strictly increasing edges".into()));
        }
        self.lsd_stft.validate()
    }

    /// Index of the bin holding `snr`, if any.
    pub fn bin_of(&self, snr: f64) -> Option<usize> {
        let e = &self.snr_bins;
        let last = e.len() - 2;
        (0..=last).find(|&i| snr >= e[i] && (snr < e[i + 1] || (i == last && snr <= e[i + 1])))
    }
}

/// One evaluation item.
#[derive(Debug, Clone, PartialEq)]
pub struct TestItem {
    pub id: String,
    pub task: Task,
    pub snr_db: f64,
    pub clean: Vec<f64>,
    pub degraded: Vec<f64>,
    pub sample_rate: u32,
}

/// Reads every item of a manifest.
pub fn load_manifest_items(manifest: &Manifest) -> Result<Vec<TestItem>> {
    if manifest.entries.is_empty() {
        return Err(Error::Config("manifest has no entries".into()));
    }
    manifest
        .entries
        .iter()
        .map(|e| {
            let (clean, sr_c) = read_wav(manifest.resolve(&e.clean))?;
            let (degraded, sr_d) = read_wav(manifest.resolve(&e.degraded))?;
            if sr_c != sr_d || clean.len() != degraded.len() {
                return Err(Error::Format(format!("item {}: clean and degraded files disagree", e.id)));
            }
            Ok(TestItem { id: e.id.clone(), task: e.task, snr_db: e.snr_db, clean, degraded, sample_rate: sr_c })
        })
        .collect()
}

/// Anything that maps a degraded item to an estimate of its clean signal.
pub trait Enhancer: Send {
    fn enhance_item(&mut self, item: &TestItem, n_steps: usize, mode: SamplerMode, rng: &mut StreamRng) -> Result<Vec<f64>>;
}

/// Runs a bare [`Denoiser`] through the inference loop without scaling.
#[derive(Debug, Clone)]
pub struct DenoiserEnhancer<D> {
    pub denoiser: D,
    pub sched: ScheduleParams,
}

impl<D: Denoiser + Send> Enhancer for DenoiserEnhancer<D> {
    fn enhance_item(&mut self, item: &TestItem, n_steps: usize, mode: SamplerMode, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let y = Tensor::new([1, item.degraded.len()], item.degraded.clone())?;
        Ok(ufogen_infer(&y, &mut self.denoiser, n_steps, &self.sched, rng, mode)?.into_data())
    }
}

/// Returns each item's clean signal from every generator call.
#[derive(Debug, Clone)]
pub struct OracleEnhancer {
    pub sched: ScheduleParams,
}

impl Enhancer for OracleEnhancer {
    fn enhance_item(&mut self, item: &TestItem, n_steps: usize, mode: SamplerMode, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let x0 = Tensor::new([1, item.clean.len()], item.clean.clone())?;
        let y = Tensor::new([1, item.degraded.len()], item.degraded.clone())?;
        let mut oracle = |_: &Tensor, _: &Tensor, _: f64| Ok(x0.clone());
        Ok(ufogen_infer(&y, &mut oracle, n_steps, &self.sched, rng, mode)?.into_data())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item: String,
    pub task: Task,
    pub snr_db: f64,
    pub n_steps: usize,
    pub mode: SamplerMode,
    pub si_sdr_db: f64,
    pub lsd_db: f64,
    /// Processing seconds per second of audio; 0 with timing off.
    pub proc_per_sec: f64,
}

impl EvalRecord {
    pub fn saturated(&self) -> bool {
        self.si_sdr_db.abs() >= super::SI_SDR_SATURATION
    }
}

/// Evaluates every `(item, n_steps, mode)` cell. Rows come back in item,
/// step, mode order whatever the worker count; only `proc_per_sec` depends
/// on scheduling.
pub fn sweep<E: Enhancer + Clone + Sync>(
    enhancer: &E,
    items: &[TestItem],
    cfg: &EvalConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Config("sweep needs at least one test item".into()));
    }
    let cells: Vec<(usize, usize, usize)> = (0..items.len())
        .flat_map(|i| {
            cfg.steps
                .iter()
                .flat_map(move |&s| (0..cfg.modes.len()).map(move |m| (i, s, m)))
        })
        .collect();
    let eval = |enh: &mut E, &(i, n_steps, m): &(usize, usize, usize)| -> Result<EvalRecord> {
        let item = &items[i];
        let mode = cfg.modes[m];
        let mut rng = stream(seed, &[PURPOSE_SWEEP, i as u64, n_steps as u64, m as u64]);
        let start = Instant::now();
        let est = enh.enhance_item(item, n_steps, mode, &mut rng)?;
        let elapsed = start.elapsed().as_secs_f64();
        let audio_s = item.degraded.len() as f64 / item.sample_rate as f64;
        Ok(EvalRecord {
            item: item.id.clone(),
            task: item.task,
            snr_db: item.snr_db,
            n_steps,
            mode,
            si_sdr_db: si_sdr(&est, &item.clean)?,
            lsd_db: lsd(&est, &item.clean, &cfg.lsd_stft)?,
            proc_per_sec: if cfg.timing { elapsed / audio_s } else { 0.0 },
        })
    };
    if workers <= 1 {
        let mut enh = enhancer.clone();
        return cells.iter().map(|c| eval(&mut enh, c)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| cells.par_iter().map_init(|| enhancer.clone(), |enh, c| eval(enh, c)).collect())
}

pub fn write_csv(records: &[EvalRecord], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    out.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        out.write_record([
            r.item.clone(),
            r.task.as_str().to_string(),
            r.snr_db.to_string(),
            r.n_steps.to_string(),
            r.mode.as_str().to_string(),
            r.si_sdr_db.to_string(),
            r.lsd_db.to_string(),
            r.proc_per_sec.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Mean metrics of one `(bin, n_steps, mode)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin: String,
    pub lo_db: f64,
    pub hi_db: f64,
    /// Edges picked by this implementation rather than fixed externally.
    pub implementation_chosen: bool,
    pub n_steps: usize,
    pub mode: SamplerMode,
    pub count: usize,
    pub mean_si_sdr_db: f64,
    pub mean_lsd_db: f64,
    /// SI-SDR of the unprocessed inputs of the bin.
    pub mean_input_si_sdr_db: f64,
    pub mean_proc_per_sec: f64,
}

/// Per-bin means. Summation runs over records sorted by item id, so the
/// result does not depend on row order.
pub fn summarize(records: &[EvalRecord], items: &[TestItem], cfg: &EvalConfig) -> Result<Vec<BinSummary>> {
    let mut input_sdr = BTreeMap::new();
    for it in items {
        input_sdr.insert(it.id.as_str(), si_sdr(&it.degraded, &it.clean)?);
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.item.cmp(&b.item));
    let mut groups: BTreeMap<(usize, usize, usize), Vec<&EvalRecord>> = BTreeMap::new();
    for r in sorted {
        let Some(bin) = cfg.bin_of(r.snr_db) else { continue };
        let m = cfg.modes.iter().position(|&m| m == r.mode).unwrap_or(usize::MAX);
        groups.entry((bin, r.n_steps, m)).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((bin, n_steps, _), rs) in groups {
        let (lo, hi) = (cfg.snr_bins[bin], cfg.snr_bins[bin + 1]);
        let n = rs.len() as f64;
        let mean = |f: &dyn Fn(&EvalRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        let input = rs
            .iter()
            .map(|r| input_sdr.get(r.item.as_str()).copied().ok_or_else(|| Error::Contract(format!("unknown item {}", r.item))))
            .sum::<Result<f64>>()?;
        out.push(BinSummary {
            bin: format!("[{lo}, {hi}] dB"),
            lo_db: lo,
            hi_db: hi,
            implementation_chosen: !FIXED_BINS.contains(&(lo, hi)),
            n_steps,
            mode: rs[0].mode,
            count: rs.len(),
            mean_si_sdr_db: mean(&|r| r.si_sdr_db),
            mean_lsd_db: mean(&|r| r.lsd_db),
            mean_input_si_sdr_db: input / n,
            mean_proc_per_sec: mean(&|r| r.proc_per_sec),
        });
    }
    Ok(out)
}

/// Mean SI-SDR over all records with the given step count and mode.
pub fn mean_si_sdr(records: &[EvalRecord], n_steps: usize, mode: SamplerMode) -> Option<f64> {
    let mut vals: Vec<(&str, f64)> = records
        .iter()
        .filter(|r| r.n_steps == n_steps && r.mode == mode)
        .map(|r| (r.item.as_str(), r.si_sdr_db))
        .collect();
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.0.cmp(b.0));
    Some(vals.iter().map(|v| v.1).sum::<f64>() / vals.len() as f64)
}

/// Line plot of mean SI-SDR against step count, one line per bin and mode.
pub fn render_svg(summary: &[BinSummary]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    let mut lines: BTreeMap<(String, &str), Vec<(usize, f64)>> = BTreeMap::new();
    for s in summary {
        lines.entry((s.bin.clone(), s.mode.as_str())).or_default().push((s.n_steps, s.mean_si_sdr_db));
    }
    let max_step = summary.iter().map(|s| s.n_steps).max().unwrap_or(1).max(2) as f64;
    let (mut lo, mut hi) = summary.iter().fold((f64::MAX, f64::MIN), |(a, b), s| {
        (a.min(s.mean_si_sdr_db), b.max(s.mean_si_sdr_db))
    });
    if !(lo < hi) {
        lo = lo.min(0.0) - 1.0;
        hi = hi.max(0.0) + 1.0;
    }
    // log2 step axis
    let x = |s: usize| M + (s as f64).log2() / max_step.log2() * (W - 2.0 * M);
    let y = |v: f64| H - M - (v - lo) / (hi - lo) * (H - 2.0 * M);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#, b = H - M, r = W - M);
    let _ = writeln!(svg, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#, b = H - M);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">steps</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(svg, r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">SI-SDR (dB)</text>"#, H / 2.0, H / 2.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{lo:.1}</text>"#, M - 4.0, H - M);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{hi:.1}</text>"#, M - 4.0, M + 4.0);
    let mut steps: Vec<usize> = summary.iter().map(|s| s.n_steps).collect();
    steps.sort_unstable();
    steps.dedup();
    for s in steps {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{s}</text>"#, x(s), H - M + 14.0);
    }
    for (i, ((bin, mode), pts)) in lines.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let dash = if *mode == "marginal" { "" } else { r#" stroke-dasharray="4 3""# };
        let path: Vec<String> = pts.iter().map(|&(s, v)| format!("{:.1},{:.1}", x(s), y(v))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}"{dash} points="{}"/>"#, path.join(" "));
        let _ = writeln!(svg, r#"<text x="{}" y="{}" fill="{color}">{bin} {mode}</text>"#, W - M - 150.0, M + 14.0 * i as f64);
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::IdentityDenoiser;

    fn items(n: usize) -> Vec<TestItem> {
        (0..n)
            .map(|i| {
                let clean: Vec<f64> = (0..512).map(|t| (t as f64 * 0.05 * (i + 1) as f64).sin()).collect();
                let degraded = clean.iter().enumerate().map(|(t, c)| c + 0.3 * ((t * 7919 % 101) as f64 / 50.0 - 1.0)).collect();
                TestItem { id: format!("item{i:03}"), task: Task::Denoise, snr_db: [-5.0, 15.0][i % 2], clean, degraded, sample_rate: 8000 }
            })
            .collect()
    }

    #[test]
    fn bins_are_half_open_except_last() {
        let cfg = EvalConfig::default();
        assert_eq!(cfg.bin_of(-7.5), Some(0));
        assert_eq!(cfg.bin_of(-2.5), Some(1));
        assert_eq!(cfg.bin_of(17.5), Some(4));
        assert_eq!(cfg.bin_of(18.0), None);
        assert_eq!(cfg.bin_of(-8.0), None);
    }

    #[test]
    fn oracle_saturates_every_cell() {
        let items = items(3);
        let cfg = EvalConfig { modes: vec![SamplerMode::Marginal, SamplerMode::Stochastic, SamplerMode::Deterministic], ..Default::default() };
        let sched = ScheduleParams::default().with_steps(8).unwrap();
        let recs = sweep(&OracleEnhancer { sched }, &items, &cfg, 1, 1).unwrap();
        assert_eq!(recs.len(), 3 * 4 * 3);
        assert!(recs.iter().all(|r| r.si_sdr_db == crate::metrics::SI_SDR_SATURATION && r.lsd_db == 0.0));
    }

    #[test]
    fn identity_one_step_reports_input_quality() {
        let items = items(4);
        let cfg = EvalConfig { steps: vec![1], modes: vec![SamplerMode::Marginal], ..Default::default() };
        let enh = DenoiserEnhancer { denoiser: IdentityDenoiser, sched: ScheduleParams::default() };
        let recs = sweep(&enh, &items, &cfg, 1, 1).unwrap();
        for (r, it) in recs.iter().zip(&items) {
            assert_eq!(r.si_sdr_db, si_sdr(&it.degraded, &it.clean).unwrap());
        }
        let summary = summarize(&recs, &items, &cfg).unwrap();
        assert_eq!(summary.len(), 2);
        for s in &summary {
            assert!((s.mean_si_sdr_db - s.mean_input_si_sdr_db).abs() < 1e-12);
        }
        assert!(!summary[0].implementation_chosen || summary[0].lo_db == -7.5);
        assert!(!summary[1].implementation_chosen);
    }

    #[test]
    fn worker_count_does_not_change_rows() {
        let items = items(5);
        let cfg = EvalConfig::default();
        let sched = ScheduleParams::default().with_steps(8).unwrap();
        let enh = DenoiserEnhancer { denoiser: IdentityDenoiser, sched };
        let a = sweep(&enh, &items, &cfg, 9, 1).unwrap();
        let b = sweep(&enh, &items, &cfg, 9, 3).unwrap();
        assert_eq!(a, b);
        let mut csv_a = Vec::new();
        write_csv(&a, &mut csv_a).unwrap();
        let text = String::from_utf8(csv_a).unwrap();
        assert!(text.starts_with("item,task,snr_db,n_steps,mode,si_sdr_db,lsd_db,proc_per_sec\n"));
        assert_eq!(text.lines().count(), 1 + 5 * 4 * 2);
    }

    #[test]
    fn svg_has_one_line_per_bin_and_mode() {
        let items = items(2);
        let cfg = EvalConfig::default();
        let sched = ScheduleParams::default().with_steps(8).unwrap();
        let recs = sweep(&OracleEnhancer { sched }, &items, &cfg, 0, 1).unwrap();
        let svg = render_svg(&summarize(&recs, &items, &cfg).unwrap());
        assert_eq!(svg.matches("<polyline").count(), 2 * 2);
    }

    #[test]
    fn rejects_bad_configs() {
        let sched = ScheduleParams::default();
        let bad = EvalConfig { steps: vec![9], ..Default::default() };
        assert!(sweep(&OracleEnhancer { sched }, &items(1), &bad, 0, 1).is_err());
        assert!(sweep(&OracleEnhancer { sched }, &[], &EvalConfig::default(), 0, 1).is_err());
    }
}
