//! Codebook utilization and corpus energy profiles.
//!
//! Utilization is the empirical entropy of code usage in bits divided by its
//! maximum: `U = H(c) / log2 K` for one layer and
//! `U_{i,i+1} = H(c_i, c_{i+1}) / (2 log2 K)` for adjacent pairs. Pair counts
//! are kept in a hash map since a dense `K^2` table is out of reach at
//! `K = 2^17`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::audio_io::AudioBuffer;
use crate::dsp::{stft, StftConfig};
use crate::fsutil::write_atomic;
use crate::tokens::TokenStream;
use crate::{Error, Result, Scalar};

pub const PROFILE_FFT_SIZE: usize = 2048;
pub const PROFILE_HOP: usize = 512;
pub const PROFILE_SAMPLE_RATE: u32 = 24000;
pub const PROFILE_TARGET_DB: f64 = -23.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl IndexHistogram {
    pub fn new(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn from_indices(indices: &[u32], k: usize) -> Result<Self> {
        let mut counts = vec![0u64; k];
        for &i in indices {
            *counts
                .get_mut(i as usize)
                .ok_or_else(|| Error::arg(format!("index {i} outside codebook of size {k}")))? += 1;
        }
        Ok(Self::new(counts))
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn codebook_size(&self) -> usize {
        self.counts.len()
    }

    pub fn used(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn entropy_bits(&self) -> f64 {
        entropy_bits(self.counts.iter().copied(), self.total)
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::arg("histograms over different codebook sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }
}

/// `-sum p log2 p` over nonzero counts.
fn entropy_bits(counts: impl Iterator<Item = u64>, total: u64) -> f64 {
    let n = total as f64;
    let h: f64 = counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

fn log2_size(k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::arg(format!("codebook size {k} < 2 has no entropy range")));
    }
    Ok((k as f64).log2())
}

pub fn single_utilization(h: &IndexHistogram) -> Result<f64> {
    let denom = log2_size(h.codebook_size())?;
    if h.total == 0 {
        return Err(Error::arg("histogram is empty"));
    }
    Ok(h.entropy_bits() / denom)
}

fn pair_counts(first: &[u32], second: &[u32]) -> HashMap<u64, u64> {
    let mut counts: HashMap<u64, u64> = HashMap::new();
    for (&a, &b) in first.iter().zip(second) {
        *counts.entry(((a as u64) << 32) | b as u64).or_default() += 1;
    }
    counts
}

fn joint_entropy(first: &[u32], second: &[u32]) -> f64 {
    let counts = pair_counts(first, second);
    // sorted so the floating-point sum does not depend on hash order
    let mut values: Vec<u64> = counts.into_values().collect();
    values.sort_unstable();
    entropy_bits(values.into_iter(), first.len() as u64)
}

/// Joint utilization of paired indices drawn from two size-`k` codebooks.
pub fn joint_utilization(pairs: &[(u32, u32)], k: usize) -> Result<f64> {
    let denom = 2.0 * log2_size(k)?;
    if pairs.is_empty() {
        return Err(Error::arg("no index pairs"));
    }
    if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a as usize >= k || b as usize >= k) {
        return Err(Error::arg(format!("pair ({a}, {b}) outside codebook of size {k}")));
    }
    let (first, second): (Vec<u32>, Vec<u32>) = pairs.iter().copied().unzip();
    Ok(joint_entropy(&first, &second) / denom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationReport {
    pub per_layer: Vec<f64>,
    /// `pairwise[i]` covers layers `i` and `i + 1`.
    pub pairwise: Vec<f64>,
    pub codebook_sizes: Vec<usize>,
    pub frames: usize,
}

impl UtilizationReport {
    /// Report over token files that agree on band count and bit widths;
    /// each band is one layer and frames are pooled across files.
    pub fn from_token_streams(streams: &[TokenStream]) -> Result<Self> {
        let first = streams.first().ok_or_else(|| Error::arg("no token streams"))?;
        let mut layers = vec![Vec::new(); first.band_count()];
        for t in streams {
            if t.bits_per_band() != first.bits_per_band() {
                return Err(Error::arg("token streams disagree on band layout"));
            }
            for (layer, band) in layers.iter_mut().zip(t.indices()) {
                layer.extend_from_slice(band);
            }
        }
        let sizes: Vec<usize> = first.bits_per_band().iter().map(|&b| 1usize << b).collect();
        utilization_report_with_sizes(&layers, &sizes)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "layers: {}", self.per_layer.len()).unwrap();
        writeln!(s, "frames: {}", self.frames).unwrap();
        for (i, (u, k)) in self.per_layer.iter().zip(&self.codebook_sizes).enumerate() {
            writeln!(s, "layer{}_codebook_size: {k}", i + 1).unwrap();
            writeln!(s, "layer{}_utilization: {u:.6}", i + 1).unwrap();
        }
        for (i, u) in self.pairwise.iter().enumerate() {
            writeln!(s, "pair{}_{}_joint_utilization: {u:.6}", i + 1, i + 2).unwrap();
        }
        s
    }
}

pub fn utilization_report(streams: &[Vec<u32>], k: usize) -> Result<UtilizationReport> {
    utilization_report_with_sizes(streams, &vec![k; streams.len()])
}

/// Pairs of layers with different sizes are normalized by
/// `log2 K_i + log2 K_{i+1}`, which reduces to `2 log2 K` for equal sizes.
pub fn utilization_report_with_sizes(streams: &[Vec<u32>], sizes: &[usize]) -> Result<UtilizationReport> {
    if streams.is_empty() {
        return Err(Error::arg("no layers"));
    }
    if sizes.len() != streams.len() {
        return Err(Error::arg("one codebook size per layer is required"));
    }
    let frames = streams[0].len();
    if streams.iter().any(|s| s.len() != frames) {
        return Err(Error::arg("layers have different lengths"));
    }
    let histograms: Vec<IndexHistogram> = streams
        .par_iter()
        .zip(sizes)
        .map(|(s, &k)| IndexHistogram::from_indices(s, k))
        .collect::<Result<_>>()?;
    let per_layer = histograms.iter().map(single_utilization).collect::<Result<Vec<_>>>()?;
    let pairwise = (0..streams.len().saturating_sub(1))
        .into_par_iter()
        .map(|i| {
            let denom = log2_size(sizes[i])? + log2_size(sizes[i + 1])?;
            Ok(joint_entropy(&streams[i], &streams[i + 1]) / denom)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UtilizationReport { per_layer, pairwise, codebook_sizes: sizes.to_vec(), frames })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoudnessNormalized<T: Scalar = f64> {
    pub buffer: AudioBuffer<T>,
    pub gain: f64,
    /// Set when the input was silent and returned unchanged.
    pub silent: bool,
}

pub fn rms_db<T: Scalar>(x: &AudioBuffer<T>) -> f64 {
    let n = x.len().max(1) as f64;
    let ms = x.samples().iter().map(|s| s.widen() * s.widen()).sum::<f64>() / n;
    10.0 * ms.log10()
}

/// Scales `x` so `20 log10(rms) == target_db`. This is plain RMS level, not
/// gated BS.1770 loudness.
pub fn normalize_loudness<T: Scalar>(x: &AudioBuffer<T>, target_db: f64) -> LoudnessNormalized<T> {
    let level = rms_db(x);
    if !level.is_finite() {
        return LoudnessNormalized { buffer: x.clone(), gain: 1.0, silent: true };
    }
    let gain = 10f64.powf((target_db - level) / 20.0);
    let samples = x.samples().iter().map(|&s| T::of(s.widen() * gain)).collect();
    LoudnessNormalized {
        buffer: AudioBuffer::new(samples, x.sample_rate()).expect("finite gain keeps samples finite"),
        gain,
        silent: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyProfile {
    /// Mean `|X|^2` per bin, bins `0..=n_fft/2`.
    pub per_bin: Vec<f64>,
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub total_frames: usize,
}

impl EnergyProfile {
    pub fn bin_frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate as f64 / self.n_fft as f64
    }

    pub fn peak_bin(&self) -> usize {
        self.per_bin
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(k, _)| k)
            .unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,frequency_hz,energy\n");
        for (k, e) in self.per_bin.iter().enumerate() {
            writeln!(s, "{k},{:.4},{e:.9e}", self.bin_frequency(k)).unwrap();
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }
}

/// Frame-weighted mean power spectrum of a corpus: each file is RMS-normalized
/// to -23 dB, analysed with a centered 2048/512 Hann STFT, and all frames of
/// all files are pooled.
pub fn energy_profile<T: Scalar>(files: &[AudioBuffer<T>]) -> Result<EnergyProfile> {
    if files.is_empty() {
        return Err(Error::arg("energy profile needs at least one file"));
    }
    if let Some(f) = files.iter().find(|f| f.sample_rate() != PROFILE_SAMPLE_RATE) {
        return Err(Error::arg(format!(
            "file at {} Hz; energy profiles are computed at {PROFILE_SAMPLE_RATE} Hz",
            f.sample_rate()
        )));
    }
    let cfg = StftConfig::<f64>::hann(PROFILE_FFT_SIZE, PROFILE_HOP, true)?;
    let nb = cfg.num_bins();
    let partials: Vec<(Vec<f64>, usize)> = files
        .par_iter()
        .map(|f| {
            let normalized = normalize_loudness(&f.convert::<f64>(), PROFILE_TARGET_DB).buffer;
            let spec = stft(&normalized, &cfg)?;
            let mut sums = vec![0.0; nb];
            for frame in spec.frames() {
                for (s, c) in sums.iter_mut().zip(frame) {
                    *s += c.norm_sqr();
                }
            }
            Ok((sums, spec.num_frames()))
        })
        .collect::<Result<_>>()?;
    let mut per_bin = vec![0.0; nb];
    let mut total_frames = 0;
    for (sums, frames) in &partials {
        for (a, s) in per_bin.iter_mut().zip(sums) {
            *a += s;
        }
        total_frames += frames;
    }
    for v in &mut per_bin {
        *v /= total_frames as f64;
    }
    Ok(EnergyProfile {
        per_bin,
        n_fft: PROFILE_FFT_SIZE,
        hop: PROFILE_HOP,
        sample_rate: PROFILE_SAMPLE_RATE,
        total_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, secs: f64, amp: f64) -> AudioBuffer<f64> {
        let n = (secs * 24000.0) as usize;
        AudioBuffer::new(
            (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 24000.0).sin()).collect(),
            24000,
        )
        .unwrap()
    }

    #[test]
    fn single_layer_examples() {
        let uniform = IndexHistogram::new(vec![3; 16]);
        assert!((single_utilization(&uniform).unwrap() - 1.0).abs() < 1e-12);
        let spike = IndexHistogram::new(vec![0, 0, 9, 0]);
        assert_eq!(single_utilization(&spike).unwrap(), 0.0);
        let h = IndexHistogram::from_indices(&[0, 1, 2, 2], 4).unwrap();
        assert!((h.entropy_bits() - 1.5).abs() < 1e-15);
        assert!((single_utilization(&h).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_layer_errors() {
        assert!(single_utilization(&IndexHistogram::new(vec![5])).is_err());
        assert!(single_utilization(&IndexHistogram::new(vec![0, 0])).is_err());
        assert!(IndexHistogram::from_indices(&[4], 4).is_err());
    }

    #[test]
    fn joint_examples() {
        let same: Vec<(u32, u32)> = (0..1600).map(|i| (i % 16, i % 16)).collect();
        assert!((joint_utilization(&same, 16).unwrap() - 0.5).abs() < 1e-12);
        let constant = vec![(3u32, 7u32); 50];
        assert_eq!(joint_utilization(&constant, 16).unwrap(), 0.0);
        assert!(joint_utilization(&[(16, 0)], 16).is_err());
        assert!(joint_utilization(&[], 16).is_err());
    }

    #[test]
    fn independent_uniform_pairs_approach_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let pairs: Vec<(u32, u32)> =
            (0..200_000).map(|_| (rng.random_range(0..16), rng.random_range(0..16))).collect();
        let u = joint_utilization(&pairs, 16).unwrap();
        assert!((0.98..=1.0).contains(&u), "{u}");
    }

    #[test]
    fn report_shapes() {
        let single = utilization_report(&[vec![0, 1, 2, 3]], 4).unwrap();
        assert!(single.pairwise.is_empty());
        assert_eq!(single.per_layer, vec![1.0]);

        let layer: Vec<u32> = vec![0, 1, 1, 2, 3, 3, 3, 0];
        let r = utilization_report(&[layer.clone(), layer.clone()], 4).unwrap();
        assert_eq!(r.pairwise[0], r.per_layer[0] / 2.0);

        assert!(utilization_report(&[vec![0, 1], vec![0]], 4).is_err());
        assert!(utilization_report(&[], 4).is_err());
    }

    #[test]
    fn report_from_tokens_pools_files() {
        let a = TokenStream::new(vec![2, 2], 24000, 0, vec![vec![0, 1], vec![2, 3]]).unwrap();
        let b = TokenStream::new(vec![2, 2], 24000, 0, vec![vec![2, 3], vec![0, 1]]).unwrap();
        let r = UtilizationReport::from_token_streams(&[a, b]).unwrap();
        assert_eq!(r.frames, 4);
        assert_eq!(r.per_layer, vec![1.0, 1.0]);
        assert!((r.pairwise[0] - 0.5).abs() < 1e-15);
        assert!(r.to_text().contains("pair1_2_joint_utilization: 0.500000"));
        let c = TokenStream::new(vec![3, 2], 24000, 0, vec![vec![0], vec![0]]).unwrap();
        assert!(UtilizationReport::from_token_streams(&[r_stream(), c]).is_err());
    }

    fn r_stream() -> TokenStream {
        TokenStream::new(vec![2, 2], 24000, 0, vec![vec![0], vec![1]]).unwrap()
    }

    #[test]
    fn loudness_normalization() {
        let x = sine(1000.0, 1.0, 1.0);
        let level = rms_db(&x);
        assert!((level + 3.0103).abs() < 1e-3);
        let out = normalize_loudness(&x, -23.0);
        assert!((out.gain - 10f64.powf((-23.0 - level) / 20.0)).abs() < 1e-12);
        assert!((out.gain - 10f64.powf(-19.99 / 20.0)).abs() / out.gain < 1e-3);
        assert!((rms_db(&out.buffer) + 23.0).abs() < 1e-9);

        let again = normalize_loudness(&out.buffer, -23.0);
        assert!((again.gain - 1.0).abs() < 1e-9);

        let silent = AudioBuffer::<f64>::silence(100, 24000).unwrap();
        let out = normalize_loudness(&silent, -23.0);
        assert!(out.silent);
        assert_eq!(out.buffer, silent);
    }

    #[test]
    fn sine_profile_peaks_at_bin_85() {
        let p = energy_profile(&[sine(1000.0, 2.0, 0.5)]).unwrap();
        assert_eq!(p.per_bin.len(), 1025);
        assert_eq!(p.peak_bin(), (1000.0f64 / (24000.0 / 2048.0)).round() as usize);
        assert_eq!(p.peak_bin(), 85);
    }

    #[test]
    fn duplicate_files_do_not_change_profile() {
        let x = sine(440.0, 1.0, 0.3);
        let one = energy_profile(std::slice::from_ref(&x)).unwrap();
        let two = energy_profile(&[x.clone(), x]).unwrap();
        assert_eq!(two.total_frames, 2 * one.total_frames);
        for (a, b) in one.per_bin.iter().zip(&two.per_bin) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-30));
        }
    }

    #[test]
    fn profile_errors() {
        assert!(energy_profile::<f64>(&[]).is_err());
        let x = AudioBuffer::new(vec![0.1; 48000], 48000).unwrap();
        assert!(energy_profile(&[x]).is_err());
    }

    #[test]
    fn csv_layout() {
        let p = energy_profile(&[sine(1000.0, 0.5, 0.5)]).unwrap();
        let csv = p.to_csv();
        assert!(csv.starts_with("bin,frequency_hz,energy\n0,0.0000,"));
        assert_eq!(csv.lines().count(), 1026);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn rates_bounded_and_subadditive(
                a in proptest::collection::vec(0u32..8, 1..300),
                seed in any::<u64>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b: Vec<u32> = a.iter().map(|&x| if rng.random_bool(0.5) { x } else { rng.random_range(0..8) }).collect();
                let r = utilization_report(&[a, b], 8).unwrap();
                for u in r.per_layer.iter().chain(&r.pairwise) {
                    prop_assert!((0.0..=1.0 + 1e-12).contains(u));
                }
                prop_assert!(r.pairwise[0] <= (r.per_layer[0] + r.per_layer[1]) / 2.0 + 1e-12);
            }
        }
    }
}
