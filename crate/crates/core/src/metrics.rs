//! Multi-scale mel distance and multi-scale STFT distance.
//!
//! Both are L1 distances between log magnitudes floored at `1e-5`, averaged
//! over (bin, frame) at each scale and then over scales. The mel distance
//! uses Hann windows of 64..=2048 samples with hop = window / 4 and an
//! 80-filter mel bank; the STFT distance uses (2048, 512) and (512, 128).

use rayon::prelude::*;

use crate::audio_io::AudioBuffer;
use crate::dsp::{stft, StftConfig};
use crate::{Error, Result, Scalar};

pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-5;
pub const MEL_WINDOWS: [usize; 6] = [64, 128, 256, 512, 1024, 2048];
pub const STFT_SCALES: [(usize, usize); 2] = [(2048, 512), (512, 128)];

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `n_mels x (n_fft/2 + 1)`, row-major.
    weights: Vec<f64>,
    n_mels: usize,
    num_bins: usize,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.num_bins..(i + 1) * self.num_bins]
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply(&self, magnitudes: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(magnitudes).map(|(w, m)| w * m).sum();
        }
    }
}

/// 80 triangular filters with centres equally spaced on the mel scale
/// between 0 Hz and Nyquist.
///
/// At small FFT sizes the lowest triangles are narrower than one bin; such a
/// filter falls back to a unit weight on the bin nearest its centre so every
/// row has support.
pub fn mel_filterbank(n_fft: usize, sample_rate: u32) -> Result<MelFilterbank> {
    if n_fft < 64 || !n_fft.is_power_of_two() {
        return Err(Error::arg(format!("mel filterbank needs a power-of-two fft size >= 64, got {n_fft}")));
    }
    let nb = n_fft / 2 + 1;
    let fs = sample_rate as f64;
    let top = hz_to_mel(fs / 2.0);
    let points: Vec<f64> =
        (0..N_MELS + 2).map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64)).collect();
    let bin_hz = fs / n_fft as f64;
    let mut weights = vec![0.0; N_MELS * nb];
    for i in 0..N_MELS {
        let (lo, mid, hi) = (points[i], points[i + 1], points[i + 2]);
        let row = &mut weights[i * nb..(i + 1) * nb];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let up = (f - lo) / (mid - lo);
            let down = (hi - f) / (hi - mid);
            *w = up.min(down).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            let k = ((mid / bin_hz).round() as usize).min(nb - 1);
            row[k] = 1.0;
        }
    }
    Ok(MelFilterbank { weights, n_mels: N_MELS, num_bins: nb, centers_hz: points[1..=N_MELS].to_vec() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub mel_distance: f64,
    pub stft_distance: f64,
    pub mel_per_scale: Vec<f64>,
    pub stft_per_scale: Vec<f64>,
}

fn check_pair<T: Scalar>(x: &AudioBuffer<T>, y: &AudioBuffer<T>) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::arg(format!("signal lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.sample_rate() != y.sample_rate() {
        return Err(Error::arg(format!(
            "sample rates differ: {} vs {}",
            x.sample_rate(),
            y.sample_rate()
        )));
    }
    Ok(())
}

fn magnitudes(x: &AudioBuffer<f64>, cfg: &StftConfig<f64>) -> Result<Vec<Vec<f64>>> {
    Ok(stft(x, cfg)?.frames().map(|f| f.iter().map(|c| c.norm()).collect()).collect())
}

fn mel_scale_distance(x: &AudioBuffer<f64>, y: &AudioBuffer<f64>, window: usize) -> Result<f64> {
    let cfg = StftConfig::hann(window, window / 4, true)?;
    let bank = mel_filterbank(window, x.sample_rate())?;
    let (mx, my) = (magnitudes(x, &cfg)?, magnitudes(y, &cfg)?);
    let mut a = vec![0.0; N_MELS];
    let mut b = vec![0.0; N_MELS];
    let mut total = 0.0;
    for (fx, fy) in mx.iter().zip(&my) {
        bank.apply(fx, &mut a);
        bank.apply(fy, &mut b);
        total += a
            .iter()
            .zip(&b)
            .map(|(p, q)| ((p + LOG_FLOOR).ln() - (q + LOG_FLOOR).ln()).abs())
            .sum::<f64>();
    }
    Ok(total / (mx.len() * N_MELS) as f64)
}

fn stft_scale_distance(x: &AudioBuffer<f64>, y: &AudioBuffer<f64>, window: usize, hop: usize) -> Result<f64> {
    let cfg = StftConfig::hann(window, hop, true)?;
    let (mx, my) = (magnitudes(x, &cfg)?, magnitudes(y, &cfg)?);
    let count = mx.len() * cfg.num_bins();
    let total: f64 = mx
        .iter()
        .zip(&my)
        .flat_map(|(fx, fy)| fx.iter().zip(fy))
        .map(|(p, q)| ((p + LOG_FLOOR).ln() - (q + LOG_FLOOR).ln()).abs())
        .sum();
    Ok(total / count as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mel_per_scale<T: Scalar>(x: &AudioBuffer<T>, y: &AudioBuffer<T>) -> Result<Vec<f64>> {
    check_pair(x, y)?;
    let (x, y) = (x.convert::<f64>(), y.convert::<f64>());
    MEL_WINDOWS.par_iter().map(|&w| mel_scale_distance(&x, &y, w)).collect()
}

fn stft_per_scale<T: Scalar>(x: &AudioBuffer<T>, y: &AudioBuffer<T>) -> Result<Vec<f64>> {
    check_pair(x, y)?;
    let (x, y) = (x.convert::<f64>(), y.convert::<f64>());
    STFT_SCALES.par_iter().map(|&(w, h)| stft_scale_distance(&x, &y, w, h)).collect()
}

/// Signals must be longer than 1024 samples (reflect padding at the largest
/// window).
pub fn mel_distance<T: Scalar>(x: &AudioBuffer<T>, y: &AudioBuffer<T>) -> Result<f64> {
    Ok(mean(&mel_per_scale(x, y)?))
}

pub fn stft_distance<T: Scalar>(x: &AudioBuffer<T>, y: &AudioBuffer<T>) -> Result<f64> {
    Ok(mean(&stft_per_scale(x, y)?))
}

pub fn distance_report<T: Scalar>(x: &AudioBuffer<T>, y: &AudioBuffer<T>) -> Result<DistanceReport> {
    let mel_per_scale = mel_per_scale(x, y)?;
    let stft_per_scale = stft_per_scale(x, y)?;
    Ok(DistanceReport {
        mel_distance: mean(&mel_per_scale),
        stft_distance: mean(&stft_per_scale),
        mel_per_scale,
        stft_per_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, amp: f64, seed: u64) -> AudioBuffer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..len).map(|_| amp * rng.random_range(-1.0..1.0)).collect(), 24000).unwrap()
    }

    fn scaled(x: &AudioBuffer<f64>, s: f64) -> AudioBuffer<f64> {
        AudioBuffer::new(x.samples().iter().map(|v| v * s).collect(), x.sample_rate()).unwrap()
    }

    #[test]
    fn mel_scale_closed_form() {
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_structure() {
        for n_fft in MEL_WINDOWS {
            let fb = mel_filterbank(n_fft, 24000).unwrap();
            assert_eq!(fb.n_mels(), 80);
            assert!(fb.centers_hz().windows(2).all(|w| w[0] < w[1]));
            for i in 0..80 {
                assert!(fb.row(i).iter().all(|&w| w >= 0.0));
                assert!(fb.row(i).iter().sum::<f64>() > 0.0, "n_fft {n_fft} row {i}");
            }
            for k in 1..fb.num_bins() - 1 {
                assert!((0..80).any(|i| fb.row(i)[k] > 0.0), "n_fft {n_fft} bin {k} uncovered");
            }
        }
        assert!(mel_filterbank(32, 24000).is_err());
        assert!(mel_filterbank(100, 24000).is_err());
    }

    #[test]
    fn identical_inputs_are_zero() {
        let x = noise(12000, 0.5, 1);
        assert_eq!(mel_distance(&x, &x).unwrap(), 0.0);
        assert_eq!(stft_distance(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_and_sign_invariant() {
        let x = noise(8000, 0.5, 2);
        let y = noise(8000, 0.3, 3);
        assert_eq!(mel_distance(&x, &y).unwrap(), mel_distance(&y, &x).unwrap());
        assert_eq!(stft_distance(&x, &y).unwrap(), stft_distance(&y, &x).unwrap());
        let (nx, ny) = (scaled(&x, -1.0), scaled(&y, -1.0));
        assert!((mel_distance(&nx, &ny).unwrap() - mel_distance(&x, &y).unwrap()).abs() < 1e-12);
        assert!((stft_distance(&nx, &ny).unwrap() - stft_distance(&x, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn half_amplitude_is_log_half() {
        let x = noise(24000, 0.5, 4);
        let d = mel_distance(&x, &scaled(&x, 0.5)).unwrap();
        let expect = 0.5f64.ln().abs();
        assert!((d - expect).abs() / expect < 0.05, "{d}");
    }

    #[test]
    fn noise_sweep_is_monotone() {
        let x = noise(24000, 0.5, 5);
        let n = noise(24000, 1.0, 6);
        let dists: Vec<f64> = [1e-3, 1e-2, 1e-1]
            .iter()
            .map(|&a| {
                let y = AudioBuffer::new(
                    x.samples().iter().zip(n.samples()).map(|(p, q)| p + a * q).collect(),
                    24000,
                )
                .unwrap();
                stft_distance(&x, &y).unwrap()
            })
            .collect();
        assert!(dists[0] < dists[1] && dists[1] < dists[2], "{dists:?}");
    }

    #[test]
    fn hop_aligned_shift_of_periodic_tone() {
        let period = 128;
        let long: Vec<f64> = (0..12000 + 512)
            .map(|n| 0.4 * (2.0 * std::f64::consts::PI * (n % period) as f64 / period as f64).sin())
            .collect();
        let x = AudioBuffer::new(long[..12000].to_vec(), 24000).unwrap();
        let y = AudioBuffer::new(long[512..].to_vec(), 24000).unwrap();
        assert!(stft_distance(&x, &y).unwrap() < 1e-6);
    }

    #[test]
    fn interpolation_path_is_monotone() {
        let x = noise(12000, 0.5, 7);
        let y = AudioBuffer::new(
            (0..12000).map(|n| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 24000.0).sin()).collect(),
            24000,
        )
        .unwrap();
        let dists: Vec<f64> = [1.0, 0.75, 0.5, 0.25, 0.1]
            .iter()
            .map(|&t| {
                let yt = AudioBuffer::new(
                    x.samples().iter().zip(y.samples()).map(|(a, b)| a + t * (b - a)).collect(),
                    24000,
                )
                .unwrap();
                mel_distance(&x, &yt).unwrap()
            })
            .collect();
        assert!(dists.windows(2).all(|w| w[1] < w[0]), "{dists:?}");
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let x = noise(4000, 0.5, 1);
        let y = noise(4001, 0.5, 1);
        assert!(mel_distance(&x, &y).is_err());
        let z = AudioBuffer::new(x.samples().to_vec(), 16000).unwrap();
        assert!(stft_distance(&x, &z).is_err());
    }

    #[test]
    fn report_matches_individual_metrics() {
        let x = noise(6000, 0.5, 9);
        let y = noise(6000, 0.5, 10);
        let r = distance_report(&x, &y).unwrap();
        assert_eq!(r.mel_per_scale.len(), 6);
        assert_eq!(r.stft_per_scale.len(), 2);
        assert_eq!(r.mel_distance, mel_distance(&x, &y).unwrap());
        assert_eq!(r.stft_distance, stft_distance(&x, &y).unwrap());
    }
}
