//! Band decomposition by binary STFT masks, and merge by summation.
//!
//! A [`BandConfig`] lists ascending boundaries `f_0 = 0 < f_1 < ... < f_B`.
//! Bin `k` (centre frequency `k * fs / N`) belongs to band `b` when
//! `f_{b-1} <= k * fs / N < f_b`. When `f_B` equals the Nyquist frequency the
//! Nyquist bin is assigned to the last band, so the masks partition every
//! one-sided bin and `merge(split(x))` reconstructs `x`.
//!
//! Energy above `f_B` is discarded when `f_B` is below Nyquist; exact
//! reconstruction needs `f_B == fs / 2`.

use std::fmt;

use rayon::prelude::*;

use crate::audio_io::AudioBuffer;
use crate::dsp::{istft, stft, StftConfig};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct BandConfig {
    boundaries: Vec<f64>,
    name: Option<String>,
}

impl BandConfig {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::arg("a band config needs at least two boundaries"));
        }
        if boundaries[0] != 0.0 {
            return Err(Error::arg("first band boundary must be 0 Hz"));
        }
        if boundaries.iter().any(|f| !f.is_finite()) {
            return Err(Error::arg("band boundaries must be finite"));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("band boundaries must be strictly ascending"));
        }
        Ok(Self { boundaries, name: None })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    /// `bands5`, `bands3` or `bands2`, all spanning 0..12 kHz.
    pub fn preset(name: &str) -> Result<Self> {
        let boundaries: &[f64] = match name {
            "bands5" => &[0.0, 500.0, 2000.0, 4000.0, 8000.0, 12000.0],
            "bands3" => &[0.0, 2000.0, 4000.0, 12000.0],
            "bands2" => &[0.0, 2000.0, 12000.0],
            other => {
                return Err(Error::arg(format!(
                    "unknown band preset {other:?} (expected bands5, bands3 or bands2)"
                )))
            }
        };
        Ok(Self::new(boundaries.to_vec())?.named(name))
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn num_bands(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn upper_edge(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    /// The top boundary must be the Nyquist frequency of `sample_rate`, so
    /// that the bands cover every bin.
    pub fn validate_for_rate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.upper_edge() != nyquist {
            return Err(Error::arg(format!(
                "top band edge {} Hz must equal Nyquist {nyquist} Hz",
                self.upper_edge()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for BandConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(name) = &self.name {
            write!(f, "{name} ")?;
        }
        let parts: Vec<String> = self.boundaries.iter().map(|b| format!("{b}")).collect();
        write!(f, "{{{}}} Hz", parts.join(", "))
    }
}

/// Binary mask over one-sided bins; `band_index` counts from 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandMask {
    pub band_index: usize,
    pub values: Vec<u8>,
}

impl BandMask {
    pub fn gains<T: Scalar>(&self) -> Vec<T> {
        self.values.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect()
    }

    pub fn active_bins(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.iter().enumerate().filter(|(_, &v)| v == 1).map(|(k, _)| k)
    }
}

pub fn make_masks<T: Scalar>(
    bands: &BandConfig,
    cfg: &StftConfig<T>,
    sample_rate: u32,
) -> Result<Vec<BandMask>> {
    bands.validate_for_rate(sample_rate)?;
    let n = cfg.fft_size();
    let nb = cfg.num_bins();
    let fs = sample_rate as f64;
    let at_nyquist = bands.upper_edge() == fs / 2.0;
    let edges = bands.boundaries();
    Ok((1..=bands.num_bands())
        .map(|b| {
            let values = (0..nb)
                .map(|k| {
                    let f = k as f64 * fs / n as f64;
                    let inside = edges[b - 1] <= f && f < edges[b];
                    let nyquist_bin = at_nyquist && k == n / 2 && b == bands.num_bands();
                    u8::from(inside || nyquist_bin)
                })
                .collect();
            BandMask { band_index: b, values }
        })
        .collect())
}

/// Band-limited waveforms of equal length and rate, ordered by band index.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSet<T: Scalar = f64> {
    bands: Vec<AudioBuffer<T>>,
}

impl<T: Scalar> BandSet<T> {
    pub fn new(bands: Vec<AudioBuffer<T>>) -> Result<Self> {
        let first = bands.first().ok_or_else(|| Error::arg("a band set needs at least one band"))?;
        for (i, b) in bands.iter().enumerate().skip(1) {
            if b.len() != first.len() || b.sample_rate() != first.sample_rate() {
                return Err(Error::arg(format!(
                    "band {} has {} samples at {} Hz, band 1 has {} at {} Hz",
                    i + 1,
                    b.len(),
                    b.sample_rate(),
                    first.len(),
                    first.sample_rate()
                )));
            }
        }
        Ok(Self { bands })
    }

    pub fn bands(&self) -> &[AudioBuffer<T>] {
        &self.bands
    }

    pub fn into_bands(self) -> Vec<AudioBuffer<T>> {
        self.bands
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }
}

/// Splits `x` into one waveform per band. The transform runs in `f64`
/// whatever the storage type.
pub fn split_bands<T: Scalar>(
    x: &AudioBuffer<T>,
    bands: &BandConfig,
    cfg: &StftConfig<T>,
) -> Result<BandSet<T>> {
    let cfg64: StftConfig<f64> = StftConfig::new(
        cfg.fft_size(),
        cfg.hop(),
        cfg.window().iter().map(|w| w.widen()).collect(),
        cfg.center(),
    )?;
    let masks = make_masks(bands, &cfg64, x.sample_rate())?;
    let spec = stft(&x.convert::<f64>(), &cfg64)?;
    let outputs: Result<Vec<AudioBuffer<T>>> = masks
        .par_iter()
        .map(|mask| Ok(istft(&spec.masked(&mask.gains())?)?.convert()))
        .collect();
    BandSet::new(outputs?)
}

/// Pointwise sum of all bands, accumulated in `f64` in band order.
pub fn merge_bands<T: Scalar>(set: &BandSet<T>) -> Result<AudioBuffer<T>> {
    let first = &set.bands[0];
    let mut acc = vec![0.0f64; first.len()];
    for band in &set.bands {
        for (a, s) in acc.iter_mut().zip(band.samples()) {
            *a += s.widen();
        }
    }
    AudioBuffer::new(acc.into_iter().map(T::of).collect(), first.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> AudioBuffer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 24000).unwrap()
    }

    fn energy(x: &AudioBuffer<f64>) -> f64 {
        x.samples().iter().map(|v| v * v).sum()
    }

    #[test]
    fn presets() {
        let b5 = BandConfig::preset("bands5").unwrap();
        assert_eq!(b5.boundaries(), &[0.0, 500.0, 2000.0, 4000.0, 8000.0, 12000.0]);
        assert_eq!(b5.num_bands(), 5);
        assert_eq!(BandConfig::preset("bands3").unwrap().boundaries(), &[0.0, 2000.0, 4000.0, 12000.0]);
        assert_eq!(BandConfig::preset("bands2").unwrap().boundaries(), &[0.0, 2000.0, 12000.0]);
        assert!(matches!(BandConfig::preset("bands4"), Err(Error::Argument(_))));
    }

    #[test]
    fn config_validation() {
        assert!(BandConfig::new(vec![0.0]).is_err());
        assert!(BandConfig::new(vec![10.0, 20.0]).is_err());
        assert!(BandConfig::new(vec![0.0, 20.0, 20.0]).is_err());
        assert!(BandConfig::new(vec![0.0, 1000.0]).is_ok());
    }

    #[test]
    fn small_mask_example() {
        let cfg = StftConfig::<f64>::hann(8, 2, true).unwrap();
        let masks = make_masks(&BandConfig::preset("bands2").unwrap(), &cfg, 24000).unwrap();
        assert_eq!(masks[0].values, vec![1, 0, 0, 0, 0]);
        assert_eq!(masks[1].values, vec![0, 1, 1, 1, 1]);
        assert_eq!(masks[1].band_index, 2);
    }

    #[test]
    fn first_band_of_five_stops_at_bin_21() {
        let cfg = StftConfig::<f64>::band_split_default();
        let masks = make_masks(&BandConfig::preset("bands5").unwrap(), &cfg, 24000).unwrap();
        assert_eq!(masks[0].active_bins().collect::<Vec<_>>(), (0..=21).collect::<Vec<_>>());
    }

    #[test]
    fn masks_partition_bins() {
        let cfg = StftConfig::<f64>::band_split_default();
        for name in ["bands5", "bands3", "bands2"] {
            let masks = make_masks(&BandConfig::preset(name).unwrap(), &cfg, 24000).unwrap();
            for k in 0..cfg.num_bins() {
                assert_eq!(masks.iter().map(|m| m.values[k] as u32).sum::<u32>(), 1);
            }
        }
    }

    #[test]
    fn top_edge_must_be_nyquist() {
        let cfg = StftConfig::<f64>::band_split_default();
        let r = make_masks(&BandConfig::preset("bands2").unwrap(), &cfg, 16000);
        assert!(matches!(r, Err(Error::Argument(_))));
        let short = BandConfig::new(vec![0.0, 2000.0, 8000.0]).unwrap();
        assert!(matches!(make_masks(&short, &cfg, 24000), Err(Error::Argument(_))));
        assert!(make_masks(&short, &cfg, 16000).is_ok());
    }

    #[test]
    fn sine_stays_in_its_band() {
        let x = AudioBuffer::new(
            (0..24000)
                .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 24000.0).sin())
                .collect(),
            24000,
        )
        .unwrap();
        let set = split_bands(&x, &BandConfig::preset("bands3").unwrap(), &StftConfig::band_split_default()).unwrap();
        let total = energy(&x);
        assert!(energy(&set.bands()[0]) / total >= 0.999);
        assert!(energy(&set.bands()[1]) / total <= 1e-3);
        assert!(energy(&set.bands()[2]) / total <= 1e-3);
    }

    #[test]
    fn silence_splits_to_silence() {
        let x = AudioBuffer::<f64>::silence(4000, 24000).unwrap();
        let set = split_bands(&x, &BandConfig::preset("bands5").unwrap(), &StftConfig::band_split_default()).unwrap();
        assert_eq!(set.len(), 5);
        assert!(set.bands().iter().all(|b| b.samples().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn white_noise_low_band_share() {
        let x = noise(48000, 21);
        let set = split_bands(&x, &BandConfig::preset("bands2").unwrap(), &StftConfig::band_split_default()).unwrap();
        let share = energy(&set.bands()[0]) / energy(&x);
        let expected = 2000.0 / 12000.0;
        assert!((share - expected).abs() / expected < 0.2, "share {share}");
    }

    #[test]
    fn merge_inverts_split() {
        let x = noise(24000, 5);
        let cfg = StftConfig::band_split_default();
        for name in ["bands5", "bands3", "bands2"] {
            let set = split_bands(&x, &BandConfig::preset(name).unwrap(), &cfg).unwrap();
            let y = merge_bands(&set).unwrap();
            assert!(x.max_abs_diff(&y).unwrap() <= 1e-6);
        }
        let single = BandConfig::new(vec![0.0, 12000.0]).unwrap();
        let set = split_bands(&x, &single, &cfg).unwrap();
        assert!(x.max_abs_diff(&set.bands()[0]).unwrap() < 1e-10);
    }

    #[test]
    fn merge_of_scaled_copies() {
        let x = noise(1000, 8);
        let part = AudioBuffer::new(x.samples().iter().map(|v| v / 4.0).collect(), 24000).unwrap();
        let y = merge_bands(&BandSet::new(vec![part; 4]).unwrap()).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() < 1e-15);
    }

    #[test]
    fn mismatched_bands_rejected() {
        let a = noise(100, 1);
        let b = noise(101, 2);
        assert!(BandSet::new(vec![a.clone(), b]).is_err());
        let c = AudioBuffer::new(a.samples().to_vec(), 16000).unwrap();
        assert!(BandSet::new(vec![a, c]).is_err());
        assert!(BandSet::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn band_energies_sum_to_total() {
        // Masks are disjoint, so with a COLA window pair the per-band STFT
        // energies add up to the full-signal STFT energy.
        let x = noise(24000, 13);
        let cfg = StftConfig::band_split_default();
        let bands = BandConfig::preset("bands5").unwrap();
        let full = stft(&x, &cfg).unwrap();
        let masks = make_masks(&bands, &cfg, 24000).unwrap();
        let per_band: f64 = masks
            .iter()
            .map(|m| full.masked(&m.gains()).unwrap().two_sided_energy())
            .sum();
        let total = full.two_sided_energy();
        assert!((per_band - total).abs() / total < 1e-9);
    }

    #[test]
    fn split_is_linear() {
        let cfg = StftConfig::band_split_default();
        let bands = BandConfig::preset("bands3").unwrap();
        let a = noise(6000, 1);
        let b = noise(6000, 2);
        let ab = AudioBuffer::new(
            a.samples().iter().zip(b.samples()).map(|(x, y)| 3.0 * x - y).collect(),
            24000,
        )
        .unwrap();
        let sa = split_bands(&a, &bands, &cfg).unwrap();
        let sb = split_bands(&b, &bands, &cfg).unwrap();
        let sab = split_bands(&ab, &bands, &cfg).unwrap();
        for i in 0..3 {
            for n in 0..6000 {
                let expect = 3.0 * sa.bands()[i].samples()[n] - sb.bands()[i].samples()[n];
                assert!((sab.bands()[i].samples()[n] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn f32_storage_reconstructs() {
        let x: AudioBuffer<f32> = noise(24000, 6).convert();
        let set = split_bands(&x, &BandConfig::preset("bands5").unwrap(), &StftConfig::band_split_default()).unwrap();
        let y = merge_bands(&set).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() < 1e-6);
    }
}
