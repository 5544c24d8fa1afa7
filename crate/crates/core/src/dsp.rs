//! Windowed STFT analysis and weighted overlap-add (WOLA) synthesis.
//!
//! Synthesis uses the analysis window again and divides by the overlapped
//! squared-window sum, so `istft(stft(x)) == x` up to rounding for any
//! configuration whose squared windows cover every retained sample.

use std::sync::Arc;

use num_complex::Complex;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::audio_io::AudioBuffer;
use crate::{Error, Result, Scalar};

const WOLA_FLOOR: f64 = 1e-8;

/// Periodic Hann window, `w[i] = 0.5 * (1 - cos(2*pi*i/n))`.
pub fn hann_window<T: Scalar>(n: usize) -> Result<Vec<T>> {
    if n < 2 {
        return Err(Error::arg(format!("hann window length {n} < 2")));
    }
    let step = 2.0 * std::f64::consts::PI / n as f64;
    Ok((0..n).map(|i| T::of(0.5 * (1.0 - (step * i as f64).cos()))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig<T: Scalar = f64> {
    fft_size: usize,
    hop: usize,
    window: Vec<T>,
    center: bool,
}

impl<T: Scalar> StftConfig<T> {
    /// `fft_size` must be even; `0 < hop <= fft_size`; window values in `[0, 1]`.
    pub fn new(fft_size: usize, hop: usize, window: Vec<T>, center: bool) -> Result<Self> {
        if fft_size < 2 || !fft_size.is_multiple_of(2) {
            return Err(Error::arg(format!("fft size {fft_size} must be even and >= 2")));
        }
        if hop == 0 || hop > fft_size {
            return Err(Error::arg(format!("hop {hop} outside 1..={fft_size}")));
        }
        if window.len() != fft_size {
            return Err(Error::arg(format!(
                "window length {} != fft size {fft_size}",
                window.len()
            )));
        }
        if window.iter().any(|&w| !(w >= T::zero() && w <= T::one())) {
            return Err(Error::arg("window values must lie in [0, 1]"));
        }
        Ok(Self { fft_size, hop, window, center })
    }

    pub fn hann(fft_size: usize, hop: usize, center: bool) -> Result<Self> {
        Self::new(fft_size, hop, hann_window(fft_size)?, center)
    }

    pub fn rectangular(fft_size: usize, hop: usize, center: bool) -> Result<Self> {
        Self::new(fft_size, hop, vec![T::one(); fft_size], center)
    }

    /// Hann 1024 / hop 256, centered: 23.4 Hz bins at 24 kHz.
    pub fn band_split_default() -> Self {
        Self::hann(1024, 256, true).expect("static config is valid")
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    pub fn center(&self) -> bool {
        self.center
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    fn pad(&self) -> usize {
        if self.center {
            self.fft_size / 2
        } else {
            0
        }
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        let padded = len + 2 * self.pad();
        if padded < self.fft_size {
            0
        } else {
            (padded - self.fft_size) / self.hop + 1
        }
    }
}

/// One-sided complex spectrogram, frames stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T: Scalar = f64> {
    data: Vec<Complex<T>>,
    num_frames: usize,
    config: StftConfig<T>,
    sample_rate: u32,
    original_length: usize,
}

impl<T: Scalar> Spectrogram<T> {
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_bins(&self) -> usize {
        self.config.num_bins()
    }

    pub fn config(&self) -> &StftConfig<T> {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    pub fn frame(&self, m: usize) -> &[Complex<T>] {
        let nb = self.num_bins();
        &self.data[m * nb..(m + 1) * nb]
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &[Complex<T>]> + '_ {
        self.data.chunks_exact(self.num_bins())
    }

    pub fn get(&self, m: usize, k: usize) -> Complex<T> {
        self.data[m * self.num_bins() + k]
    }

    pub fn bin_frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate as f64 / self.config.fft_size as f64
    }

    /// Multiplies every frame elementwise by a per-bin gain (e.g. a band mask).
    pub fn masked(&self, gains: &[T]) -> Result<Self> {
        if gains.len() != self.num_bins() {
            return Err(Error::arg(format!(
                "mask has {} bins, spectrogram has {}",
                gains.len(),
                self.num_bins()
            )));
        }
        let nb = self.num_bins();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &c)| c * gains[i % nb])
            .collect();
        Ok(Self { data, ..self.clone() })
    }

    /// Bin-wise sum of two spectrograms with identical layout.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.num_frames != other.num_frames
            || self.config != other.config
            || self.original_length != other.original_length
        {
            return Err(Error::arg("spectrogram layouts differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { data, ..self.clone() })
    }

    pub fn zeros_like(&self) -> Self {
        Self { data: vec![Complex::new(T::zero(), T::zero()); self.data.len()], ..self.clone() }
    }

    /// `|X(m, k)|^2` summed with one-sided weighting, i.e. the full two-sided
    /// spectral energy of every frame.
    pub fn two_sided_energy(&self) -> f64 {
        let nb = self.num_bins();
        self.frames()
            .map(|f| {
                f.iter()
                    .enumerate()
                    .map(|(k, c)| {
                        let e = c.norm_sqr().widen();
                        if k == 0 || k == nb - 1 {
                            e
                        } else {
                            2.0 * e
                        }
                    })
                    .sum::<f64>()
            })
            .sum()
    }
}

fn reflect_pad<T: Scalar>(x: &[T], pad: usize) -> Result<Vec<T>> {
    if pad == 0 {
        return Ok(x.to_vec());
    }
    if x.len() <= pad {
        return Err(Error::arg(format!(
            "signal of {} samples too short for reflect padding of {pad}",
            x.len()
        )));
    }
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|j| x[n - 2 - j]));
    Ok(out)
}

fn plan<T: Scalar>(n: usize, inverse: bool) -> Arc<dyn Fft<T>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    }
}

/// Short-time Fourier transform; frame `m` covers padded samples
/// `[m*hop, m*hop + fft_size)` and keeps bins `0..=fft_size/2`.
pub fn stft<T: Scalar>(x: &AudioBuffer<T>, cfg: &StftConfig<T>) -> Result<Spectrogram<T>> {
    let padded = reflect_pad(x.samples(), cfg.pad())?;
    let n = cfg.fft_size;
    if padded.len() < n {
        return Err(Error::arg(format!(
            "signal of {} samples shorter than one {n}-sample frame",
            x.len()
        )));
    }
    let num_frames = (padded.len() - n) / cfg.hop + 1;
    let nb = cfg.num_bins();
    let fft = plan::<T>(n, false);
    let mut data = vec![Complex::new(T::zero(), T::zero()); num_frames * nb];
    data.par_chunks_mut(nb).enumerate().for_each_init(
        || vec![Complex::new(T::zero(), T::zero()); n],
        |buf, (m, out)| {
            let start = m * cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(padded[start + i] * cfg.window[i], T::zero());
            }
            fft.process(buf);
            out.copy_from_slice(&buf[..nb]);
        },
    );
    Ok(Spectrogram {
        data,
        num_frames,
        config: cfg.clone(),
        sample_rate: x.sample_rate(),
        original_length: x.len(),
    })
}

/// Inverse STFT by weighted overlap-add, trimmed to the original length.
///
/// Fails with [`Error::Numeric`] if a retained sample is covered by no
/// nonzero window value.
pub fn istft<T: Scalar>(spec: &Spectrogram<T>) -> Result<AudioBuffer<T>> {
    let cfg = &spec.config;
    let n = cfg.fft_size;
    let nb = cfg.num_bins();
    let pad = cfg.pad();
    let total = if spec.num_frames == 0 { 0 } else { (spec.num_frames - 1) * cfg.hop + n };
    let ifft = plan::<T>(n, true);
    let scale = T::one() / T::of(n as f64);

    let frames: Vec<Vec<T>> = spec
        .data
        .par_chunks(nb)
        .map_init(
            || vec![Complex::new(T::zero(), T::zero()); n],
            |buf, half| {
                buf[..nb].copy_from_slice(half);
                for k in nb..n {
                    buf[k] = half[n - k].conj();
                }
                // DC and Nyquist of a real signal are real
                buf[0].im = T::zero();
                buf[n / 2].im = T::zero();
                ifft.process(buf);
                buf.iter().zip(&cfg.window).map(|(c, &w)| c.re * scale * w).collect()
            },
        )
        .collect();

    let mut acc = vec![T::zero(); total];
    let mut norm = vec![T::zero(); total];
    for (m, frame) in frames.iter().enumerate() {
        let start = m * cfg.hop;
        for i in 0..n {
            acc[start + i] += frame[i];
            norm[start + i] += cfg.window[i] * cfg.window[i];
        }
    }

    let floor = T::of(WOLA_FLOOR);
    let mut out = Vec::with_capacity(spec.original_length);
    for j in 0..spec.original_length {
        let p = j + pad;
        let den = if p < total { norm[p] } else { T::zero() };
        if den == T::zero() {
            return Err(Error::Numeric(format!(
                "zero window overlap at output sample {j}; configuration cannot reconstruct it"
            )));
        }
        out.push(acc[p] / den.max(floor));
    }
    AudioBuffer::new(out, spec.sample_rate)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColaReport {
    pub max_deviation: f64,
}

/// Steady-state deviation of the overlapped squared-window sum from its median.
pub fn check_cola<T: Scalar>(cfg: &StftConfig<T>) -> ColaReport {
    // In steady state the sum is periodic in the hop, so one period suffices.
    let sums: Vec<f64> = (0..cfg.hop)
        .map(|r| {
            (r..cfg.fft_size)
                .step_by(cfg.hop)
                .map(|i| {
                    let w = cfg.window[i].widen();
                    w * w
                })
                .sum()
        })
        .collect();
    let mut sorted = sums.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let max_deviation = sums.iter().map(|s| (s - median).abs()).fold(0.0, f64::max);
    ColaReport { max_deviation }
}
