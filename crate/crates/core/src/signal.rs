//! Free-precession-decay simulator and the time-series container.
//!
//! Simulated records follow `y_k = A0·exp(−t_k/T2*)·sin(Φ_k) + η_k` where the
//! instantaneous frequency performs a Gaussian random walk around a carrier
//! `f_c` with diffusion constant `D` (increment variance `2D/f_s`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Uniformly sampled real signal.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries<T> {
    samples: Vec<T>,
    fs: T,
    t0: T,
}

impl<T: Real> TimeSeries<T> {
    pub fn new(samples: Vec<T>, fs: T, t0: T) -> Result<Self> {
        if !(fs > T::zero()) || !fs.is_finite() {
            return Err(Error::invalid(format!(
                "sampling rate must be positive, got {fs}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::invalid("time series needs at least one sample"));
        }
        if !t0.is_finite() {
            return Err(Error::invalid("start time must be finite"));
        }
        Ok(Self { samples, fs, t0 })
    }

    #[inline]
    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    #[inline]
    pub fn fs(&self) -> T {
        self.fs
    }

    #[inline]
    pub fn t0(&self) -> T {
        self.t0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Time of sample `k`: `t0 + k / f_s`.
    #[inline]
    pub fn time(&self, k: usize) -> T {
        self.t0 + T::from_count(k) / self.fs
    }

    pub fn duration(&self) -> T {
        T::from_count(self.samples.len()) / self.fs
    }

    /// Multiplies every sample by `s`.
    pub fn scaled(&self, s: T) -> Self {
        Self {
            samples: self.samples.iter().map(|&x| x * s).collect(),
            fs: self.fs,
            t0: self.t0,
        }
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }
}

/// Ground-truth instantaneous frequency, one value per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTrack<T> {
    pub freqs: Vec<T>,
    pub fs: T,
}

impl<T: Real> FrequencyTrack<T> {
    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    /// Mean frequency over samples `[start, start + n)`.
    pub fn block_mean(&self, start: usize, n: usize) -> Result<T> {
        if n == 0 || start + n > self.freqs.len() {
            return Err(Error::invalid(format!(
                "block [{start}, {}) outside truth of length {}",
                start + n,
                self.freqs.len()
            )));
        }
        let sum = self.freqs[start..start + n]
            .iter()
            .fold(T::zero(), |a, &b| a + b);
        Ok(sum / T::from_count(n))
    }
}

/// How the simulator turns the frequency track into a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseModel {
    /// `Φ_k = φ0 + 2π Σ_{i<k} f_i / f_s`, the phase of a precessing spin.
    #[default]
    Integrated,
    /// `Φ_k = φ0 + 2π f(t_k)·t_k`: frequency multiplies absolute time.
    Product,
}

/// Parameters of a simulated decay record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub a0: f64,
    pub t2star: f64,
    pub f_c: f64,
    /// Frequency diffusion constant in Hz²/s.
    pub d: f64,
    pub sigma_eta: f64,
    #[serde(default)]
    pub phi0: f64,
    pub fs: f64,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub phase_model: PhaseModel,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            a0: 1.0,
            t2star: 3000.0,
            f_c: 84.6,
            d: 1e-6,
            sigma_eta: 0.1,
            phi0: 0.0,
            fs: 1000.0,
            duration: 200.0,
            seed: 0,
            phase_model: PhaseModel::Integrated,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.a0,
            self.t2star,
            self.f_c,
            self.d,
            self.sigma_eta,
            self.phi0,
            self.fs,
            self.duration,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err(Error::invalid("simulation parameters must be finite"));
        }
        if self.a0 < 0.0 {
            return Err(Error::invalid("A0 must be non-negative"));
        }
        if self.t2star <= 0.0 {
            return Err(Error::invalid("T2* must be positive"));
        }
        if self.d < 0.0 {
            return Err(Error::invalid("diffusion constant must be non-negative"));
        }
        if self.sigma_eta < 0.0 {
            return Err(Error::invalid("noise std must be non-negative"));
        }
        if self.fs <= 0.0 {
            return Err(Error::invalid("sampling rate must be positive"));
        }
        if self.fs <= 2.0 * self.f_c {
            return Err(Error::invalid(format!(
                "sampling rate {} Hz violates Nyquist for carrier {} Hz",
                self.fs, self.f_c
            )));
        }
        if self.sample_count() == 0 {
            return Err(Error::invalid("duration yields no samples"));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        (self.duration * self.fs).round().max(0.0) as usize
    }

    /// Sets `a0` so that the initial SNR equals `snr0` at the current noise level.
    pub fn with_snr0(mut self, snr0: f64) -> Self {
        self.a0 = (2.0 * snr0).sqrt() * self.sigma_eta;
        self
    }
}

fn walk_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Increment variance of a random walk with diffusion constant `d`.
pub fn step_variance<T: Real>(d: T, fs: T) -> T {
    T::two() * d / fs
}

/// Inverse of [`step_variance`]: `D = σ²_δf · f_s / 2`.
pub fn diffusion_constant<T: Real>(step_var: T, fs: T) -> T {
    step_var * fs / T::two()
}

/// Random-walk frequency starting exactly at `f_c`.
///
/// `freqs[k] = f_c + Σ_{i=1..k} δf_i` with `δf_i ~ N(0, 2D/f_s)`.
pub fn gen_random_walk_frequency<T: Real>(
    f_c: T,
    d: T,
    fs: T,
    n: usize,
    seed: u64,
) -> Result<FrequencyTrack<T>> {
    if !(fs > T::zero()) {
        return Err(Error::invalid("sampling rate must be positive"));
    }
    if n == 0 {
        return Err(Error::invalid("random walk needs at least one sample"));
    }
    if !(d >= T::zero()) {
        return Err(Error::invalid("diffusion constant must be non-negative"));
    }
    let step_std = step_variance(d, fs).sqrt();
    let mut rng = walk_rng(seed);
    let mut freqs = Vec::with_capacity(n);
    // Offset is accumulated separately so that D = 0 gives f_c bit for bit.
    let mut offset = T::zero();
    freqs.push(f_c);
    for _ in 1..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        offset += step_std * T::lit(z);
        freqs.push(f_c + offset);
    }
    Ok(FrequencyTrack { freqs, fs })
}

/// Simulates a decaying precession record together with its true frequency.
pub fn simulate_fpd<T: Real>(p: &SimParams) -> Result<(TimeSeries<T>, FrequencyTrack<T>)> {
    p.validate()?;
    let n = p.sample_count();
    let fs = T::lit(p.fs);
    let f_c = T::lit(p.f_c);
    let track = gen_random_walk_frequency(f_c, T::lit(p.d), fs, n, p.seed)?;
    let a0 = T::lit(p.a0);
    let t2 = T::lit(p.t2star);
    let phi0 = T::lit(p.phi0);
    let sigma = T::lit(p.sigma_eta);
    let tau = T::tau();
    let mut noise = noise_rng(p.seed);

    let mut samples = Vec::with_capacity(n);
    // Phase deviation from the carrier, accumulated in cycles.
    let mut excess_cycles = T::zero();
    for (k, &f) in track.freqs.iter().enumerate() {
        let t = T::from_count(k) / fs;
        let phase = match p.phase_model {
            PhaseModel::Integrated => {
                let ph = tau * (f_c * t + excess_cycles) + phi0;
                excess_cycles += (f - f_c) / fs;
                ph
            }
            PhaseModel::Product => tau * (f * t) + phi0,
        };
        let clean = a0 * (-t / t2).exp() * phase.sin();
        let eta = if p.sigma_eta > 0.0 {
            let z: f64 = StandardNormal.sample(&mut noise);
            sigma * T::lit(z)
        } else {
            T::zero()
        };
        samples.push(clean + eta);
    }
    Ok((TimeSeries::new(samples, fs, T::zero())?, track))
}

/// Initial signal-to-noise ratio `A0² / (2 σ_η²)`.
pub fn snr0<T: Real>(a0: T, sigma_eta: T) -> Result<T> {
    if sigma_eta == T::zero() {
        return Err(Error::DivisionByZero("SNR0 with zero noise std".into()));
    }
    Ok(a0 * a0 / (T::two() * sigma_eta * sigma_eta))
}
