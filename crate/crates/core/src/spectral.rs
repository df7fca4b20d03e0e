//! Block segmentation, normalized block DFTs and the analytic measurement model.
//!
//! A record is cut into non-overlapping rectangular blocks of `n_bl` samples.
//! Within block `k` the signal is modelled as
//! `A cos(2π(f0 + δf)t + φ)` with `t` restarting at zero, `f0 = M / T_bl` an
//! exact bin frequency. The measurement is the set of `2L + 1` DFT
//! coefficients around bin `M`, scaled by `2 / n_bl` so that white noise of
//! variance `σ²` maps to `2σ²/n_bl` per real and imaginary component.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::kalman::{MeasurementModel, State5};
use crate::linalg::Matrix;
use crate::real::Real;
use crate::signal::TimeSeries;

/// Below this value of `|1 − e^{iθ}|` the geometric series is summed directly.
pub const SINGULAR_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec<T> {
    pub n_bl: usize,
    /// Block duration `n_bl / f_s`.
    pub t_bl: T,
    pub n_blocks: usize,
    pub remainder_dropped: usize,
    pub fs: T,
}

impl<T: Real> BlockSpec<T> {
    #[inline]
    pub fn dt(&self) -> T {
        T::one() / self.fs
    }

    /// First sample index of block `k`.
    #[inline]
    pub fn start(&self, k: usize) -> usize {
        k * self.n_bl
    }

    /// Time of the block centre relative to the series start.
    pub fn center_time(&self, k: usize) -> T {
        (T::from_count(k) + T::lit(0.5)) * self.t_bl
    }
}

/// Splits `ts` into blocks of `round(t_bl · f_s)` samples.
pub fn segment<T: Real>(ts: &TimeSeries<T>, t_bl: T) -> Result<BlockSpec<T>> {
    if !(t_bl > T::zero()) || !t_bl.is_finite() {
        return Err(Error::invalid(format!(
            "block duration must be positive, got {t_bl}"
        )));
    }
    let n_bl = (t_bl * ts.fs())
        .round()
        .to_usize()
        .ok_or_else(|| Error::invalid("block length not representable"))?;
    if n_bl < 2 {
        return Err(Error::invalid(format!(
            "block of {n_bl} samples is too short"
        )));
    }
    if n_bl > ts.len() {
        return Err(Error::invalid(format!(
            "block of {n_bl} samples is longer than the series ({} samples)",
            ts.len()
        )));
    }
    Ok(BlockSpec {
        n_bl,
        t_bl: T::from_count(n_bl) / ts.fs(),
        n_blocks: ts.len() / n_bl,
        remainder_dropped: ts.len() % n_bl,
        fs: ts.fs(),
    })
}

/// Bins `M − L ..= M + L` used as the measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralWindow<T> {
    pub m_center: usize,
    pub l_half: usize,
    /// `M / T_bl`
    pub f0: T,
}

impl<T: Real> SpectralWindow<T> {
    pub fn new(m_center: usize, l_half: usize, spec: &BlockSpec<T>) -> Result<Self> {
        if m_center < l_half + 1 || m_center + l_half > spec.n_bl - 1 {
            return Err(Error::invalid(format!(
                "window M = {m_center}, L = {l_half} does not fit a block of {} bins",
                spec.n_bl
            )));
        }
        Ok(Self {
            m_center,
            l_half,
            f0: T::from_count(m_center) / spec.t_bl,
        })
    }

    pub fn bins(&self) -> impl Iterator<Item = usize> {
        self.m_center - self.l_half..=self.m_center + self.l_half
    }

    #[inline]
    pub fn width(&self) -> usize {
        2 * self.l_half + 1
    }

    /// Number of real measurement components, `2(2L + 1)`.
    #[inline]
    pub fn measurement_dim(&self) -> usize {
        2 * self.width()
    }
}

/// Magnitude spectrum peak of `samples` restricted to `[lo, hi]` Hz.
///
/// Returns the bin index and the bin spacing `f_s / len`.
pub fn spectrum_peak<T: Real>(samples: &[T], fs: T, lo: T, hi: T) -> Result<(usize, T)> {
    check_search_range(fs, lo, hi)?;
    let n = samples.len();
    let df = fs / T::from_count(n);
    let first = (lo / df).ceil().to_usize().unwrap_or(0).max(1);
    let last = (hi / df).floor().to_usize().unwrap_or(0).min(n / 2);
    if first > last {
        return Err(Error::invalid(format!(
            "search range [{lo}, {hi}] Hz contains no DFT bin at resolution {df} Hz"
        )));
    }
    let fft: Arc<dyn rustfft::Fft<T>> = FftPlanner::new().plan_fft_forward(n);
    let mut buf: Vec<Complex<T>> = samples
        .iter()
        .map(|&x| Complex::new(x, T::zero()))
        .collect();
    fft.process(&mut buf);
    let mut best = first;
    let mut best_mag = T::neg_infinity();
    for (m, c) in buf.iter().enumerate().take(last + 1).skip(first) {
        let mag = c.norm_sqr();
        if mag > best_mag {
            best_mag = mag;
            best = m;
        }
    }
    Ok((best, df))
}

fn check_search_range<T: Real>(fs: T, lo: T, hi: T) -> Result<()> {
    if !(lo > T::zero()) || !(hi < fs / T::two()) || !(lo <= hi) {
        return Err(Error::invalid(format!(
            "search range [{lo}, {hi}] Hz must be non-empty and inside (0, {})",
            fs / T::two()
        )));
    }
    Ok(())
}

/// Picks the carrier bin from the first block's spectrum.
pub fn select_center_bin<T: Real>(
    ts: &TimeSeries<T>,
    spec: &BlockSpec<T>,
    l_half: usize,
    search_lo: T,
    search_hi: T,
) -> Result<SpectralWindow<T>> {
    let (m, _) = spectrum_peak(&ts.samples()[..spec.n_bl], ts.fs(), search_lo, search_hi)?;
    SpectralWindow::new(m, l_half, spec)
}

/// Normalized DFT coefficients of one block, ordered by bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMeasurement<T> {
    pub coeffs: Vec<Complex<T>>,
    pub block_index: usize,
}

impl<T: Real> BlockMeasurement<T> {
    /// `[Re c_0 … Re c_2L, Im c_0 … Im c_2L]`
    pub fn stacked(&self) -> Vec<T> {
        stack(&self.coeffs)
    }
}

pub(crate) fn stack<T: Real>(coeffs: &[Complex<T>]) -> Vec<T> {
    coeffs
        .iter()
        .map(|c| c.re)
        .chain(coeffs.iter().map(|c| c.im))
        .collect()
}

/// Precomputed twiddles for the window bins, reused across blocks.
#[derive(Debug, Clone)]
pub struct BlockTransform<T> {
    spec: BlockSpec<T>,
    window: SpectralWindow<T>,
    twiddles: Vec<Vec<Complex<T>>>,
}

impl<T: Real> BlockTransform<T> {
    pub fn new(spec: BlockSpec<T>, window: SpectralWindow<T>) -> Self {
        let n = spec.n_bl;
        let twiddles = window
            .bins()
            .map(|m| {
                (0..n)
                    .map(|i| {
                        // Exact integer reduction keeps the angle small.
                        let r = (m * i) % n;
                        let ang = -T::tau() * T::from_count(r) / T::from_count(n);
                        Complex::new(ang.cos(), ang.sin())
                    })
                    .collect()
            })
            .collect();
        Self {
            spec,
            window,
            twiddles,
        }
    }

    pub fn measure(&self, ts: &TimeSeries<T>, k: usize) -> Result<BlockMeasurement<T>> {
        if k >= self.spec.n_blocks {
            return Err(Error::invalid(format!(
                "block {k} out of range ({} blocks)",
                self.spec.n_blocks
            )));
        }
        let start = self.spec.start(k);
        let block = &ts.samples()[start..start + self.spec.n_bl];
        let norm = T::two() / T::from_count(self.spec.n_bl);
        let coeffs = self
            .twiddles
            .iter()
            .map(|tw| {
                let mut acc = Complex::new(T::zero(), T::zero());
                for (&z, w) in block.iter().zip(tw) {
                    acc += w * z;
                }
                acc * norm
            })
            .collect();
        Ok(BlockMeasurement {
            coeffs,
            block_index: k,
        })
    }

    pub fn measure_all(&self, ts: &TimeSeries<T>) -> Result<Vec<BlockMeasurement<T>>> {
        (0..self.spec.n_blocks)
            .map(|k| self.measure(ts, k))
            .collect()
    }

    pub fn spec(&self) -> &BlockSpec<T> {
        &self.spec
    }

    pub fn window(&self) -> &SpectralWindow<T> {
        &self.window
    }
}

/// Normalized DFT of block `k` at the window bins.
pub fn block_dft<T: Real>(
    ts: &TimeSeries<T>,
    spec: &BlockSpec<T>,
    win: &SpectralWindow<T>,
    k: usize,
) -> Result<BlockMeasurement<T>> {
    if k >= spec.n_blocks {
        return Err(Error::invalid(format!(
            "block {k} out of range ({} blocks)",
            spec.n_blocks
        )));
    }
    BlockTransform::new(*spec, *win).measure(ts, k)
}

/// `Σ_{n<N} e^{iθn}` with `θ = 2π(δ·Δt + j/N)`, and its derivative in `δ`.
///
/// Uses `(1 − e^{iα}) / (1 − e^{iθ})` in the Dirichlet form
/// `e^{i(α−θ)/2} sin(α/2) / sin(θ/2)`, `α = 2πδT`, unless the denominator is
/// below [`SINGULAR_THRESHOLD`], in which case the series is summed directly.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GeometricKernel<T> {
    n: usize,
    dt: T,
    t_bl: T,
}

impl<T: Real> GeometricKernel<T> {
    pub(crate) fn new(spec: &BlockSpec<T>) -> Self {
        Self {
            n: spec.n_bl,
            dt: spec.dt(),
            t_bl: spec.t_bl,
        }
    }

    fn theta(&self, delta: T, j: i64) -> T {
        let n = self.n as i64;
        // Reduce j into (−N/2, N/2] so θ stays near the origin.
        let mut jr = j.rem_euclid(n);
        if 2 * jr > n {
            jr -= n;
        }
        T::tau() * (delta * self.dt + T::lit(jr as f64) / T::from_count(self.n))
    }

    pub(crate) fn is_singular(&self, delta: T, j: i64) -> bool {
        let theta = self.theta(delta, j);
        (T::two() * (theta / T::two()).sin()).abs() < T::lit(SINGULAR_THRESHOLD)
    }

    /// Value and `d/dδ`.
    pub(crate) fn eval(&self, delta: T, j: i64) -> (Complex<T>, Complex<T>) {
        if self.is_singular(delta, j) {
            self.eval_direct(delta, j)
        } else {
            self.eval_closed(delta, j)
        }
    }

    pub(crate) fn eval_closed(&self, delta: T, j: i64) -> (Complex<T>, Complex<T>) {
        let half = T::lit(0.5);
        let theta = self.theta(delta, j);
        let alpha = T::tau() * delta * self.t_bl;
        let dalpha = T::tau() * self.t_bl;
        let dtheta = T::tau() * self.dt;
        let (sa, ca) = (alpha * half).sin_cos();
        let (st, ct) = (theta * half).sin_cos();
        let ph = (alpha - theta) * half;
        let rot = Complex::new(ph.cos(), ph.sin());
        let ratio = sa / st;
        let value = rot * ratio;
        let i = Complex::new(T::zero(), T::one());
        let deriv = rot
            * (i * ((dalpha - dtheta) * half * ratio)
                + Complex::from(dalpha * half * ca / st - dtheta * half * sa * ct / (st * st)));
        (value, deriv)
    }

    pub(crate) fn eval_direct(&self, delta: T, j: i64) -> (Complex<T>, Complex<T>) {
        let theta = self.theta(delta, j);
        let dtheta = T::tau() * self.dt;
        let mut value = Complex::new(T::zero(), T::zero());
        let mut deriv = Complex::new(T::zero(), T::zero());
        for k in 0..self.n {
            let nk = T::from_count(k);
            let (s, c) = (theta * nk).sin_cos();
            value.re += c;
            value.im += s;
            // d/dδ e^{iθn} = i n θ' e^{iθn}
            deriv.re -= dtheta * nk * s;
            deriv.im += dtheta * nk * c;
        }
        (value, deriv)
    }
}

struct BinTerms<T> {
    value: Complex<T>,
    d_phi: Complex<T>,
    d_df: Complex<T>,
    /// Coefficient per unit amplitude.
    unit: Complex<T>,
}

fn bin_terms<T: Real>(
    x: &State5<T>,
    m: usize,
    win: &SpectralWindow<T>,
    kernel: &GeometricKernel<T>,
) -> BinTerms<T> {
    let big_m = win.m_center as i64;
    let m = m as i64;
    let (g1, dg1) = kernel.eval(x.df, big_m - m);
    let (g2, dg2) = kernel.eval(x.df, big_m + m);
    let e = Complex::new(x.phi.cos(), x.phi.sin());
    let ec = e.conj();
    let inv_n = T::one() / T::from_count(kernel.n);
    let i = Complex::new(T::zero(), T::one());
    let unit = (e * g1 + ec * g2.conj()) * inv_n;
    let d_phi_unit = (i * e * g1 - i * ec * g2.conj()) * inv_n;
    let d_df_unit = (e * dg1 + ec * dg2.conj()) * inv_n;
    BinTerms {
        value: unit * x.a,
        d_phi: d_phi_unit * x.a,
        d_df: d_df_unit * x.a,
        unit,
    }
}

fn check_state<T: Real>(x: &State5<T>) -> Result<()> {
    if x.as_array().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("state contains non-finite values"))
    }
}

/// Model prediction of the normalized window coefficients for state `x`.
pub fn h_measure<T: Real>(
    x: &State5<T>,
    win: &SpectralWindow<T>,
    spec: &BlockSpec<T>,
) -> Result<Vec<Complex<T>>> {
    check_state(x)?;
    let kernel = GeometricKernel::new(spec);
    Ok(win
        .bins()
        .map(|m| bin_terms(x, m, win, &kernel).value)
        .collect())
}

/// Jacobian of the stacked `[Re; Im]` prediction with respect to
/// `(A, ΔA, φ, δf, Δδf)`; the ΔA and Δδf columns are zero.
pub fn h_jacobian<T: Real>(
    x: &State5<T>,
    win: &SpectralWindow<T>,
    spec: &BlockSpec<T>,
) -> Result<Matrix<T>> {
    check_state(x)?;
    let kernel = GeometricKernel::new(spec);
    Ok(jacobian_with(x, win, &kernel))
}

fn jacobian_with<T: Real>(
    x: &State5<T>,
    win: &SpectralWindow<T>,
    kernel: &GeometricKernel<T>,
) -> Matrix<T> {
    let w = win.width();
    let mut jac = Matrix::zeros(2 * w, 5);
    for (row, m) in win.bins().enumerate() {
        let t = bin_terms(x, m, win, kernel);
        jac[(row, 0)] = t.unit.re;
        jac[(row + w, 0)] = t.unit.im;
        jac[(row, 2)] = t.d_phi.re;
        jac[(row + w, 2)] = t.d_phi.im;
        jac[(row, 3)] = t.d_df.re;
        jac[(row + w, 3)] = t.d_df.im;
    }
    jac
}

/// The block-DFT measurement model as seen by the filter.
#[derive(Debug, Clone, Copy)]
pub struct SpectralModel<T> {
    spec: BlockSpec<T>,
    window: SpectralWindow<T>,
    kernel: GeometricKernel<T>,
}

impl<T: Real> SpectralModel<T> {
    pub fn new(spec: BlockSpec<T>, window: SpectralWindow<T>) -> Self {
        Self {
            spec,
            window,
            kernel: GeometricKernel::new(&spec),
        }
    }

    pub fn spec(&self) -> &BlockSpec<T> {
        &self.spec
    }

    pub fn window(&self) -> &SpectralWindow<T> {
        &self.window
    }
}

impl<T: Real> MeasurementModel<T> for SpectralModel<T> {
    fn dim(&self) -> usize {
        self.window.measurement_dim()
    }

    fn predict(&self, x: &State5<T>) -> Vec<T> {
        let coeffs: Vec<_> = self
            .window
            .bins()
            .map(|m| bin_terms(x, m, &self.window, &self.kernel).value)
            .collect();
        stack(&coeffs)
    }

    fn jacobian(&self, x: &State5<T>) -> Matrix<T> {
        jacobian_with(x, &self.window, &self.kernel)
    }
}

/// Coarse single-tone estimate `(A, δf, φ)` from one block's coefficients.
///
/// The offset comes from three-bin interpolation around `M`; amplitude and
/// phase are corrected for the rectangular-window Dirichlet response.
pub fn tone_from_block<T: Real>(
    meas: &BlockMeasurement<T>,
    win: &SpectralWindow<T>,
    spec: &BlockSpec<T>,
) -> (T, T, T) {
    let c = &meas.coeffs;
    let mid = win.l_half;
    let center = c[mid];
    let frac = if win.l_half >= 1 {
        let (lo, hi) = (c[mid - 1], c[mid + 1]);
        let den = center * T::two() - lo - hi;
        if den.norm_sqr() > T::zero() {
            let d = ((lo - hi) / den).re;
            d.max(-T::lit(0.5)).min(T::lit(0.5))
        } else {
            T::zero()
        }
    } else {
        T::zero()
    };
    let n = T::from_count(spec.n_bl);
    let pf = T::PI() * frac;
    let dirichlet = if frac.abs() > T::lit(1e-12) {
        (pf.sin() / (n * (pf / n).sin())).abs()
    } else {
        T::one()
    };
    let amplitude = center.norm() / dirichlet;
    let phase = center.arg() - pf * (n - T::one()) / n;
    (amplitude, frac / spec.t_bl, phase)
}
