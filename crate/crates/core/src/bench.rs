//! Monte-Carlo comparison of the EM-tuned smoother against block-wise sine
//! fits.
//!
//! Errors are always taken against the true frequency averaged over the
//! samples of each estimation block, so both estimators are scored on the
//! quantity they report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit_em, EmConfig};
use crate::error::{Error, Result};
use crate::kalman::TrackResult;
use crate::real::Real;
use crate::scf::{fit_blocks, LmConfig, ScfBlockFit};
use crate::signal::{simulate_fpd, FrequencyTrack, SimParams, TimeSeries};

/// Per-block frequency estimates positioned on the sample grid.
pub trait BlockFrequencies<T> {
    /// `(first sample, sample count, estimated frequency)` per block.
    fn block_frequencies(&self) -> Vec<(usize, usize, T)>;
}

impl<T: Real> BlockFrequencies<T> for TrackResult<T> {
    fn block_frequencies(&self) -> Vec<(usize, usize, T)> {
        (0..self.len())
            .map(|k| (k * self.n_bl, self.n_bl, self.frequency(k)))
            .collect()
    }
}

impl<T: Real> BlockFrequencies<T> for [ScfBlockFit<T>] {
    fn block_frequencies(&self) -> Vec<(usize, usize, T)> {
        self.iter()
            .map(|b| (b.start_sample, b.n_samples, b.f))
            .collect()
    }
}

impl<T: Real> BlockFrequencies<T> for Vec<ScfBlockFit<T>> {
    fn block_frequencies(&self) -> Vec<(usize, usize, T)> {
        self.as_slice().block_frequencies()
    }
}

/// RMSE of the block estimates against the block-averaged truth.
pub fn rmse_frequency<T: Real, E: BlockFrequencies<T> + ?Sized>(
    estimate: &E,
    truth: &FrequencyTrack<T>,
) -> Result<T> {
    let blocks = estimate.block_frequencies();
    if blocks.is_empty() {
        return Err(Error::invalid("estimate contains no blocks"));
    }
    let mut acc = T::zero();
    for &(start, n, f) in &blocks {
        if start + n > truth.len() {
            return Err(Error::invalid(format!(
                "estimate spans samples up to {} but truth has {}",
                start + n,
                truth.len()
            )));
        }
        let e = f - truth.block_mean(start, n)?;
        acc += e * e;
    }
    Ok((acc / T::from_count(blocks.len())).sqrt())
}

/// `log2(rmse_eks / rmse_scf)`; negative values favour the smoother.
pub fn rho<T: Real>(rmse_eks: T, rmse_scf: T) -> Result<T> {
    if !(rmse_eks > T::zero() && rmse_scf > T::zero()) {
        return Err(Error::invalid(format!(
            "log-ratio needs positive RMSEs, got {rmse_eks:e} and {rmse_scf:e}"
        )));
    }
    if !(rmse_eks.is_finite() && rmse_scf.is_finite()) {
        return Err(Error::invalid("log-ratio needs finite RMSEs"));
    }
    Ok((rmse_eks / rmse_scf).log2())
}

/// Outcome of [`scf_block_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult<T> {
    pub best_block: T,
    pub rmse: T,
    /// `(block length, RMSE)` in candidate order.
    pub per_candidate: Vec<(T, T)>,
}

/// Index of the smallest value; ties go to the longest block.
fn argmin_prefer_longer<T: Real>(blocks: &[T], values: &[T]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) if v < values[b] || (v == values[b] && blocks[i] > blocks[b]) => Some(i),
            keep => keep,
        };
    }
    best
}

/// Fits every candidate block length and keeps the one closest to the truth.
pub fn scf_block_sweep<T: Real>(
    ts: &TimeSeries<T>,
    truth: &FrequencyTrack<T>,
    candidates: &[T],
    search: (T, T),
    cfg: &LmConfig,
) -> Result<SweepResult<T>> {
    if candidates.is_empty() {
        return Err(Error::invalid("no block-length candidates"));
    }
    let per_candidate = candidates
        .iter()
        .map(|&bl| {
            let fits = fit_blocks(ts, bl, search, cfg)?;
            Ok((bl, rmse_frequency(&fits, truth)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let blocks: Vec<T> = per_candidate.iter().map(|c| c.0).collect();
    let rmses: Vec<T> = per_candidate.iter().map(|c| c.1).collect();
    let i = argmin_prefer_longer(&blocks, &rmses)
        .ok_or_else(|| Error::numerical("no candidate produced a finite RMSE"))?;
    let best = per_candidate[i];
    debug_assert!(rmses.iter().all(|&r| best.1 <= r));
    Ok(SweepResult {
        best_block: best.0,
        rmse: best.1,
        per_candidate,
    })
}

/// Single-tone frequency variance bound in Hz² for `n` samples at `fs`.
pub fn crlb_freq<T: Real>(amplitude: T, sigma_eta: T, n: usize, fs: T) -> Result<T> {
    if n < 3 {
        return Err(Error::invalid(format!(
            "bound needs at least 3 samples, got {n}"
        )));
    }
    if !(sigma_eta > T::zero()) {
        return Err(Error::invalid("noise std must be positive"));
    }
    let eta = amplitude * amplitude / (T::two() * sigma_eta * sigma_eta);
    let n_t = T::from_count(n);
    let tau = T::tau();
    Ok(T::lit(12.0) * fs * fs / (tau * tau * eta * n_t * (n_t * n_t - T::one())))
}

fn default_l_half() -> usize {
    1
}

/// Grid study over diffusion constants and initial SNRs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub d_values: Vec<f64>,
    pub snr0_values: Vec<f64>,
    pub n_reps: usize,
    /// Template for every simulation; `d`, `a0` and `seed` are overwritten.
    pub base: SimParams,
    pub eks_t_bl: f64,
    #[serde(default = "default_l_half")]
    pub eks_l_half: usize,
    pub scf_blocks: Vec<f64>,
    pub seed_base: u64,
    /// Carrier search range in Hz; defaults to `f_c ± 10 %`.
    #[serde(default)]
    pub search: Option<[f64; 2]>,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub lm: LmConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            d_values: vec![1e-12, 1e-7],
            snr0_values: vec![1e2, 1e4],
            n_reps: 20,
            base: SimParams {
                sigma_eta: 0.01,
                ..SimParams::default()
            },
            eks_t_bl: 4.5,
            eks_l_half: 1,
            scf_blocks: vec![5.0, 10.0, 20.0, 50.0, 100.0, 200.0],
            seed_base: 1,
            search: None,
            em: EmConfig::default(),
            lm: LmConfig::default(),
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_reps < 1 {
            return Err(Error::invalid("n_reps must be at least 1"));
        }
        if self.d_values.is_empty() || self.snr0_values.is_empty() || self.scf_blocks.is_empty() {
            return Err(Error::invalid(
                "grid axes and block candidates must be non-empty",
            ));
        }
        if self.d_values.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::invalid(
                "diffusion constants must be finite and non-negative",
            ));
        }
        if self
            .snr0_values
            .iter()
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::invalid("SNR values must be finite and positive"));
        }
        if self
            .scf_blocks
            .iter()
            .any(|b| !(b.is_finite() && *b > 0.0) || *b > self.base.duration)
        {
            return Err(Error::invalid(
                "block candidates must be positive and fit the record",
            ));
        }
        if !(self.eks_t_bl > 0.0 && 2.0 * self.eks_t_bl <= self.base.duration) {
            return Err(Error::invalid(
                "smoother block must leave at least two blocks",
            ));
        }
        self.base.validate()?;
        self.em.validate()?;
        let (lo, hi) = self.search_range();
        if !(lo > 0.0 && lo < hi && hi < self.base.fs / 2.0) {
            return Err(Error::invalid("search range must lie inside (0, fs/2)"));
        }
        Ok(())
    }

    pub fn search_range(&self) -> (f64, f64) {
        match self.search {
            Some([lo, hi]) => (lo, hi),
            None => (0.9 * self.base.f_c, 1.1 * self.base.f_c),
        }
    }

    /// Seed of repetition `rep` in cell `cell` (cells in row-major `D × SNR₀` order).
    pub fn seed(&self, cell: usize, rep: usize) -> u64 {
        self.seed_base
            .wrapping_add((cell * self.n_reps + rep) as u64)
    }

    /// Simulation parameters of one repetition.
    pub fn sim_params(&self, d: f64, snr0: f64, seed: u64) -> SimParams {
        let p = SimParams {
            d,
            seed,
            ..self.base.clone()
        };
        // With zero noise the SNR is unbounded; keep the template amplitude.
        if p.sigma_eta > 0.0 {
            p.with_snr0(snr0)
        } else {
            p
        }
    }
}

/// Raw outcome of one simulated record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub seed: u64,
    pub rmse_eks: f64,
    /// RMSE per SCF candidate, in configuration order.
    pub rmse_scf: Vec<f64>,
    pub amp_rmse_eks: f64,
    pub amp_rmse_scf: Vec<f64>,
    /// Fraction of smoother blocks whose 2σ interval covers the truth.
    pub eks_coverage: f64,
    pub em_iterations: usize,
    pub em_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub seed: Option<u64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub d: f64,
    pub snr0: f64,
    /// SCF block length with the lowest mean squared error over repetitions.
    pub best_scf_block: Option<f64>,
    /// Mean over repetitions of the smoother RMSE.
    pub rmse_eks: Option<f64>,
    /// Mean over repetitions of the SCF RMSE at `best_scf_block`.
    pub rmse_scf_best: Option<f64>,
    /// Per-repetition `log2(rmse_eks / rmse_scf_best)`.
    pub rho_per_rep: Vec<f64>,
    /// Mean of `rho_per_rep`.
    pub rho: Option<f64>,
    pub mean_coverage: Option<f64>,
    pub reps: Vec<RepResult>,
    pub errors: Vec<CellError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: GridConfig,
    pub cells: Vec<CellReport>,
}

impl BenchReport {
    pub fn cell(&self, d: f64, snr0: f64) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.d == d && c.snr0 == snr0)
    }
}

/// Block-averaged `A0·exp(−t/T2*)`.
fn amplitude_truth(p: &SimParams, start: usize, n: usize) -> f64 {
    let decay = (-1.0 / (p.t2star * p.fs)).exp();
    // Geometric series of the per-sample decay factor.
    let first = p.a0 * decay.powi(start as i32);
    let sum = if (1.0 - decay).abs() < 1e-300 {
        first * n as f64
    } else {
        first * (1.0 - decay.powi(n as i32)) / (1.0 - decay)
    };
    sum / n as f64
}

fn amp_rmse(blocks: impl Iterator<Item = (usize, usize, f64)>, p: &SimParams) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (start, n, a) in blocks {
        let e = a - amplitude_truth(p, start, n);
        acc += e * e;
        count += 1;
    }
    (acc / count.max(1) as f64).sqrt()
}

/// Simulates and scores one repetition.
pub fn run_rep(cfg: &GridConfig, d: f64, snr0: f64, seed: u64) -> Result<RepResult> {
    let p = cfg.sim_params(d, snr0, seed);
    let (ts, truth) = simulate_fpd::<f64>(&p)?;
    let search = cfg.search_range();
    let (report, track) = fit_em(&ts, cfg.eks_t_bl, cfg.eks_l_half, &cfg.em, Some(search))?;
    let rmse_eks = rmse_frequency(&track, &truth)?;
    let mut covered = 0usize;
    for (k, &(start, n, f)) in track.block_frequencies().iter().enumerate() {
        if (f - truth.block_mean(start, n)?).abs() <= 2.0 * track.frequency_std(k) {
            covered += 1;
        }
    }
    let amp_rmse_eks = amp_rmse(
        (0..track.len()).map(|k| (k * track.n_bl, track.n_bl, track.amplitude(k))),
        &p,
    );
    let mut rmse_scf = Vec::with_capacity(cfg.scf_blocks.len());
    let mut amp_rmse_scf = Vec::with_capacity(cfg.scf_blocks.len());
    for &bl in &cfg.scf_blocks {
        let fits = fit_blocks(&ts, bl, search, &cfg.lm)?;
        rmse_scf.push(rmse_frequency(&fits, &truth)?);
        amp_rmse_scf.push(amp_rmse(
            fits.iter()
                .map(|b| (b.start_sample, b.n_samples, b.amplitude)),
            &p,
        ));
    }
    Ok(RepResult {
        seed,
        rmse_eks,
        rmse_scf,
        amp_rmse_eks,
        amp_rmse_scf,
        eks_coverage: covered as f64 / track.len() as f64,
        em_iterations: report.iterations_used,
        em_converged: report.converged,
    })
}

/// Relative size below which a frequency RMSE is indistinguishable from
/// rounding error.
const RESOLUTION: f64 = 64.0 * f64::EPSILON;

fn summarize(
    cfg: &GridConfig,
    d: f64,
    snr0: f64,
    outcomes: Vec<(u64, Result<RepResult>)>,
) -> CellReport {
    let mut reps = Vec::new();
    let mut errors = Vec::new();
    for (seed, r) in outcomes {
        match r {
            Ok(r) => reps.push(r),
            Err(e) => errors.push(CellError {
                seed: Some(seed),
                message: e.to_string(),
            }),
        }
    }
    let mut cell = CellReport {
        d,
        snr0,
        best_scf_block: None,
        rmse_eks: None,
        rmse_scf_best: None,
        rho_per_rep: Vec::new(),
        rho: None,
        mean_coverage: None,
        reps,
        errors,
    };
    if cell.reps.is_empty() {
        return cell;
    }
    let n = cell.reps.len() as f64;
    let mse: Vec<f64> = (0..cfg.scf_blocks.len())
        .map(|j| cell.reps.iter().map(|r| r.rmse_scf[j].powi(2)).sum::<f64>() / n)
        .collect();
    let Some(best) = argmin_prefer_longer(&cfg.scf_blocks, &mse) else {
        cell.errors.push(CellError {
            seed: None,
            message: "no SCF candidate produced a finite error".into(),
        });
        return cell;
    };
    cell.best_scf_block = Some(cfg.scf_blocks[best]);
    cell.rmse_eks = Some(cell.reps.iter().map(|r| r.rmse_eks).sum::<f64>() / n);
    cell.rmse_scf_best = Some(cell.reps.iter().map(|r| r.rmse_scf[best]).sum::<f64>() / n);
    cell.mean_coverage = Some(cell.reps.iter().map(|r| r.eks_coverage).sum::<f64>() / n);
    let floor = RESOLUTION * cfg.base.f_c;
    for r in &cell.reps {
        let (e, s) = (r.rmse_eks, r.rmse_scf[best]);
        let value = if e <= floor || s <= floor {
            Err(Error::invalid(format!(
                "log-ratio undefined: RMSE at rounding level ({e:e}, {s:e})"
            )))
        } else {
            rho(e, s)
        };
        match value {
            Ok(v) => cell.rho_per_rep.push(v),
            Err(e) => cell.errors.push(CellError {
                seed: Some(r.seed),
                message: e.to_string(),
            }),
        }
    }
    if !cell.rho_per_rep.is_empty() {
        cell.rho = Some(cell.rho_per_rep.iter().sum::<f64>() / cell.rho_per_rep.len() as f64);
    }
    cell
}

/// Runs the whole grid; repetitions execute in parallel and are reduced in
/// a fixed order, so the report only depends on the configuration.
pub fn run_grid(cfg: &GridConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let cells: Vec<(f64, f64)> = cfg
        .d_values
        .iter()
        .flat_map(|&d| cfg.snr0_values.iter().map(move |&s| (d, s)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.n_reps).map(move |r| (c, r)))
        .collect();
    let outcomes: Vec<(u64, Result<RepResult>)> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let seed = cfg.seed(c, r);
            let (d, s) = cells[c];
            (seed, run_rep(cfg, d, s, seed))
        })
        .collect();
    let mut it = outcomes.into_iter();
    let reports = cells
        .iter()
        .map(|&(d, s)| summarize(cfg, d, s, it.by_ref().take(cfg.n_reps).collect()))
        .collect();
    Ok(BenchReport {
        config: cfg.clone(),
        cells: reports,
    })
}
