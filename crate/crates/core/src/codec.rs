//! Toy per-band codec: band split, a linear frame encoder, a SimVQ (or plain
//! VQ) codebook and a linear frame decoder per band, with band outputs summed.
//!
//! Frames are non-overlapping `frame_len`-sample blocks, so at 24 kHz with
//! 320-sample frames each band emits 75 tokens per second.
//!
//! For one band with frames `X` (`F x L`), encoder `E` (`L x D`), decoder `G`
//! (`D x L`) and codebook rows `c_j` with transform `W`:
//!
//! ```text
//! z   = X E                 q_f = argmin_j |z_f - c_j W|
//! e_f = c_{q_f} W           x^  = e G           (forward value of z_q)
//! recon  = 1/F sum_f |x^_f - x_f|^2
//! commit = 1/F sum_f |sg[z_f] - e_f|^2 + lambda |z_f - sg[e_f]|^2
//! loss   = recon + beta * commit
//! ```
//!
//! Gradient routing: the reconstruction gradient reaches `G` directly and
//! reaches `E` by passing `d recon / d z_q` through unchanged to `z`
//! (straight-through). The first commitment term trains the codebook and `W`
//! only; the lambda term trains `E` only.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::audio_io::AudioBuffer;
use crate::bandsplit::{merge_bands, split_bands, BandConfig, BandSet};
use crate::dsp::StftConfig;
use crate::fsutil::{write_atomic, Reader};
use crate::quantizer::{kmeans_init, nearest_code, nearest_codes, sq_dist, Codebook, SimVqCodebook};
use crate::tokens::TokenStream;
use crate::{Error, Result, Scalar};

pub const TOKEN_RATE_HZ: u32 = 75;
pub const MODEL_MAGIC: &[u8; 4] = b"BSCM";
pub const MODEL_VERSION: u16 = 1;
pub const MAX_BITS_PER_BAND: u8 = 17;
const TRANSFORM_INIT_SIGMA: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub latent_dim: usize,
    pub band_config: BandConfig,
    /// `log2 K` for each band's codebook.
    pub per_band_bits: Vec<u8>,
    /// FFT size and hop of the Hann band-split analysis.
    pub split_fft_size: usize,
    pub split_hop: usize,
    pub seed: u64,
    pub learn_rate: f64,
    pub epochs: usize,
    /// Weight of the commitment loss in the total (beta).
    pub commit_weight: f64,
    pub lambda: f64,
    /// SimVQ transform on the codebook; plain VQ when false.
    pub simvq: bool,
    /// Keep codebook rows fixed and train only `W`.
    pub freeze_codebook: bool,
    pub kmeans_iters: usize,
}

impl CodecConfig {
    /// 24 kHz, 320-sample frames, 64-dim latents, SimVQ with lambda 0.25.
    pub fn new(band_config: BandConfig, per_band_bits: Vec<u8>) -> Self {
        Self {
            sample_rate: 24000,
            frame_len: 320,
            latent_dim: 64,
            band_config,
            per_band_bits,
            split_fft_size: 1024,
            split_hop: 256,
            seed: 0,
            learn_rate: 0.02,
            epochs: 100,
            commit_weight: 1.0,
            lambda: crate::quantizer::DEFAULT_LAMBDA,
            simvq: true,
            freeze_codebook: false,
            kmeans_iters: 20,
        }
    }

    pub fn preset(name: &str, per_band_bits: Vec<u8>) -> Result<Self> {
        Ok(Self::new(BandConfig::preset(name)?, per_band_bits))
    }

    pub fn num_bands(&self) -> usize {
        self.band_config.num_bands()
    }

    pub fn codebook_size(&self, band: usize) -> usize {
        1usize << self.per_band_bits[band]
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.frame_len as f64
    }

    pub fn split_config<T: Scalar>(&self) -> Result<StftConfig<T>> {
        StftConfig::hann(self.split_fft_size, self.split_hop, true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || self.latent_dim == 0 {
            return Err(Error::arg("frame length and latent dimension must be positive"));
        }
        if self.sample_rate == 0 || !(self.sample_rate as usize).is_multiple_of(self.frame_len) {
            return Err(Error::arg(format!(
                "frame length {} does not divide sample rate {}",
                self.frame_len, self.sample_rate
            )));
        }
        self.band_config.validate_for_rate(self.sample_rate)?;
        if self.per_band_bits.len() != self.num_bands() {
            return Err(Error::arg(format!(
                "{} bit widths for {} bands",
                self.per_band_bits.len(),
                self.num_bands()
            )));
        }
        if let Some(b) = self.per_band_bits.iter().find(|&&b| !(1..=MAX_BITS_PER_BAND).contains(&b)) {
            return Err(Error::arg(format!("{b} bits per band outside 1..={MAX_BITS_PER_BAND}")));
        }
        if !(self.learn_rate.is_finite() && self.learn_rate > 0.0) {
            return Err(Error::arg("learning rate must be positive"));
        }
        if !(self.commit_weight.is_finite() && self.commit_weight >= 0.0) {
            return Err(Error::arg("commit weight must be >= 0"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::arg("lambda must be >= 0"));
        }
        self.split_config::<f64>()?;
        Ok(())
    }
}

/// Exact bitrate in bits per second: `sum(bits) * sample_rate / frame_len`.
pub fn bitrate(cfg: &CodecConfig) -> Result<u64> {
    cfg.validate()?;
    let bits: u64 = cfg.per_band_bits.iter().map(|&b| b as u64).sum();
    Ok(bits * cfg.sample_rate as u64 / cfg.frame_len as u64)
}

/// `"3825 bps (3.83 kbps)"`, kbps rounded half-up to two decimals.
pub fn format_bitrate(bps: u64) -> String {
    let hundredths = (bps + 5) / 10;
    format!("{bps} bps ({}.{:02} kbps)", hundredths / 100, hundredths % 100)
}

/// Parameters of one band. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BandCodec<T: Scalar = f64> {
    /// `frame_len x latent_dim`
    pub analysis: Vec<T>,
    /// `latent_dim x frame_len`
    pub synthesis: Vec<T>,
    pub codebook: SimVqCodebook<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandCodecModel<T: Scalar = f64> {
    config: CodecConfig,
    bands: Vec<BandCodec<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub total_loss: f64,
    pub recon_loss: f64,
    pub commit_loss: f64,
    /// Distinct codes used, summed over bands.
    pub codes_used: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }
}

// Row-major dense products. `m x k` times `k x n`.
fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    });
    out
}

// `a^T b` for `a: m x k`, `b: m x n`, giving `k x n`.
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    out.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[i * n..(i + 1) * n]) {
                *o += av * bv;
            }
        }
    });
    out
}

// `a b^T` for `a: m x k`, `b: n x k`, giving `m x n`.
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = ar.iter().zip(&b[j * k..(j + 1) * k]).fold(T::zero(), |s, (&x, &y)| s + x * y);
        }
    });
    out
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, sigma: f64) -> Vec<T> {
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    (0..len).map(|_| T::of(normal.sample(rng))).collect()
}

fn band_rng(seed: u64, band: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((band as u64) << 8) | stream);
    rng
}

/// Cuts `x` into `frame_len` blocks, zero-padding the tail.
fn frames_of<T: Scalar>(x: &[T], frame_len: usize) -> Vec<T> {
    let n = x.len().div_ceil(frame_len);
    let mut out = x.to_vec();
    out.resize(n * frame_len, T::zero());
    out
}

/// Band split that also accepts signals shorter than the split FFT by
/// zero-extending and trimming; splitting is linear, so this is exact.
fn split_any_length<T: Scalar>(x: &AudioBuffer<T>, cfg: &CodecConfig) -> Result<BandSet<T>> {
    let stft_cfg = cfg.split_config::<T>()?;
    let min_len = cfg.split_fft_size;
    if x.len() >= min_len {
        return split_bands(x, &cfg.band_config, &stft_cfg);
    }
    let mut padded = x.samples().to_vec();
    padded.resize(min_len, T::zero());
    let set = split_bands(&AudioBuffer::new(padded, x.sample_rate())?, &cfg.band_config, &stft_cfg)?;
    let bands = set
        .into_bands()
        .into_iter()
        .map(|b| AudioBuffer::new(b.samples()[..x.len()].to_vec(), b.sample_rate()))
        .collect::<Result<Vec<_>>>()?;
    BandSet::new(bands)
}

/// Which parameter blocks receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    Analysis,
    Synthesis,
    Transform,
    Codebook,
}

impl ParamBlock {
    pub fn name(self) -> &'static str {
        match self {
            ParamBlock::Analysis => "analysis",
            ParamBlock::Synthesis => "synthesis",
            ParamBlock::Transform => "transform",
            ParamBlock::Codebook => "codebook",
        }
    }
}

#[derive(Debug, Clone)]
struct BandGrads<T: Scalar> {
    analysis: Vec<T>,
    synthesis: Vec<T>,
    transform: Option<Vec<T>>,
    codebook: Option<Vec<T>>,
}

#[derive(Debug, Clone, Copy, Default)]
struct BandLoss {
    recon: f64,
    commit: f64,
    total: f64,
    codes_used: usize,
}

/// Forward pass state for one band over a fixed frame matrix.
struct Forward<T: Scalar> {
    z: Vec<T>,
    indices: Vec<usize>,
    /// quantized latents (rows of the effective codebook)
    e: Vec<T>,
    residual: Vec<T>,
}

struct Dims {
    frames: usize,
    frame_len: usize,
    dim: usize,
}

impl<T: Scalar> BandCodec<T> {
    fn forward(&self, x: &[T], d: &Dims) -> Forward<T> {
        let z = matmul(x, &self.analysis, d.frames, d.frame_len, d.dim);
        let eff = self.codebook.effective_entries();
        let indices = nearest_codes(&z, &eff, d.dim);
        self.forward_fixed(x, d, z, indices, &eff)
    }

    fn forward_fixed(&self, x: &[T], d: &Dims, z: Vec<T>, indices: Vec<usize>, eff: &[T]) -> Forward<T> {
        let mut e = Vec::with_capacity(d.frames * d.dim);
        for &j in &indices {
            e.extend_from_slice(&eff[j * d.dim..(j + 1) * d.dim]);
        }
        let xhat = matmul(&e, &self.synthesis, d.frames, d.dim, d.frame_len);
        let residual = xhat.iter().zip(x).map(|(&a, &b)| a - b).collect();
        Forward { z, indices, e, residual }
    }

    fn losses(&self, fw: &Forward<T>, d: &Dims, beta: f64) -> BandLoss {
        let f = d.frames as f64;
        let recon = fw.residual.iter().map(|r| r.widen() * r.widen()).sum::<f64>() / f;
        let gap = sq_dist(&fw.z, &fw.e).widen() / f;
        let commit = gap * (1.0 + self.codebook.lambda().widen());
        let mut used = fw.indices.clone();
        used.sort_unstable();
        used.dedup();
        BandLoss { recon, commit, total: recon + beta * commit, codes_used: used.len() }
    }

    fn gradients(&self, x: &[T], fw: &Forward<T>, d: &Dims, beta: f64, freeze: bool) -> BandGrads<T> {
        let inv_f = T::of(2.0 / d.frames as f64);
        let beta_t = T::of(beta);
        let lambda = self.codebook.lambda();

        let g_xhat: Vec<T> = fw.residual.iter().map(|&r| r * inv_f).collect();
        let synthesis = matmul_tn(&fw.e, &g_xhat, d.frames, d.dim, d.frame_len);

        // straight-through: d recon / d z_q is applied to z unchanged
        let mut g_z = matmul_nt(&g_xhat, &self.synthesis, d.frames, d.frame_len, d.dim);
        let gap: Vec<T> = fw.z.iter().zip(&fw.e).map(|(&z, &e)| z - e).collect();
        for (g, &dz) in g_z.iter_mut().zip(&gap) {
            *g += beta_t * lambda * inv_f * dz;
        }
        let analysis = matmul_tn(x, &g_z, d.frames, d.frame_len, d.dim);

        // codebook side of the commitment loss
        let g_e: Vec<T> = gap.iter().map(|&dz| -beta_t * inv_f * dz).collect();
        let k = self.codebook.size();
        let dim = d.dim;
        let base = self.codebook.base();
        let transform = self.codebook.transform().map(|_| {
            let mut gw = vec![T::zero(); dim * dim];
            for (f, &j) in fw.indices.iter().enumerate() {
                let c = base.row(j);
                let ge = &g_e[f * dim..(f + 1) * dim];
                for (a, &cv) in c.iter().enumerate() {
                    for (slot, &gv) in gw[a * dim..(a + 1) * dim].iter_mut().zip(ge) {
                        *slot += cv * gv;
                    }
                }
            }
            gw
        });
        let codebook = (!freeze).then(|| {
            let mut gc = vec![T::zero(); k * dim];
            for (f, &j) in fw.indices.iter().enumerate() {
                let ge = &g_e[f * dim..(f + 1) * dim];
                let row = &mut gc[j * dim..(j + 1) * dim];
                match self.codebook.transform() {
                    Some(w) => {
                        for (a, slot) in row.iter_mut().enumerate() {
                            *slot += ge.iter().zip(&w[a * dim..(a + 1) * dim]).fold(T::zero(), |s, (&g, &wv)| s + g * wv);
                        }
                    }
                    None => {
                        for (slot, &g) in row.iter_mut().zip(ge) {
                            *slot += g;
                        }
                    }
                }
            }
            gc
        });
        BandGrads { analysis, synthesis, transform, codebook }
    }

    fn apply(&mut self, g: &BandGrads<T>, lr: T) {
        for (p, &gv) in self.analysis.iter_mut().zip(&g.analysis) {
            *p -= lr * gv;
        }
        for (p, &gv) in self.synthesis.iter_mut().zip(&g.synthesis) {
            *p -= lr * gv;
        }
        if let (Some(w), Some(gw)) = (self.codebook.transform_mut(), &g.transform) {
            for (p, &gv) in w.iter_mut().zip(gw) {
                *p -= lr * gv;
            }
        }
        if let Some(gc) = &g.codebook {
            for (p, &gv) in self.codebook.base_mut().entries_mut().iter_mut().zip(gc) {
                *p -= lr * gv;
            }
        }
    }
}

impl<T: Scalar> BandCodecModel<T> {
    pub fn from_parts(config: CodecConfig, bands: Vec<BandCodec<T>>) -> Result<Self> {
        config.validate()?;
        if bands.len() != config.num_bands() {
            return Err(Error::arg(format!("{} band codecs for {} bands", bands.len(), config.num_bands())));
        }
        let (l, d) = (config.frame_len, config.latent_dim);
        for (b, band) in bands.iter().enumerate() {
            if band.analysis.len() != l * d || band.synthesis.len() != d * l {
                return Err(Error::arg(format!("band {} matrices do not match {l} x {d}", b + 1)));
            }
            if band.codebook.dim() != d || band.codebook.size() != config.codebook_size(b) {
                return Err(Error::arg(format!("band {} codebook shape mismatch", b + 1)));
            }
            if band.codebook.is_simvq() != config.simvq {
                return Err(Error::arg(format!("band {} codebook kind disagrees with config", b + 1)));
            }
        }
        Ok(Self { config, bands })
    }

    /// Seeded random parameters with a Gaussian codebook; mostly useful for
    /// tests and gradient checks. [`train`] initializes codebooks from data.
    pub fn random(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let (l, d) = (config.frame_len, config.latent_dim);
        let bands = (0..config.num_bands())
            .map(|b| {
                let mut rng = band_rng(config.seed, b, 0);
                let (analysis, synthesis) = init_linear(&mut rng, l, d);
                let k = config.codebook_size(b);
                let base = Codebook::new(gaussian(&mut rng, k * d, 0.1), k, d)?;
                let codebook = make_codebook(&config, base, b)?;
                Ok(BandCodec { analysis, synthesis, codebook })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, bands })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn bands(&self) -> &[BandCodec<T>] {
        &self.bands
    }

    pub fn bands_mut(&mut self) -> &mut [BandCodec<T>] {
        &mut self.bands
    }

    fn dims(&self, frames: usize) -> Dims {
        Dims { frames, frame_len: self.config.frame_len, dim: self.config.latent_dim }
    }

    fn band_frames(&self, x: &AudioBuffer<T>) -> Result<Vec<Vec<T>>> {
        if x.sample_rate() != self.config.sample_rate {
            return Err(Error::arg(format!(
                "audio at {} Hz, model runs at {} Hz",
                x.sample_rate(),
                self.config.sample_rate
            )));
        }
        if x.is_empty() {
            return Err(Error::arg("cannot encode empty audio"));
        }
        let set = split_any_length(x, &self.config)?;
        Ok(set.bands().iter().map(|b| frames_of(b.samples(), self.config.frame_len)).collect())
    }

    pub fn encode(&self, x: &AudioBuffer<T>) -> Result<TokenStream> {
        let frames = self.band_frames(x)?;
        let n = x.len().div_ceil(self.config.frame_len);
        let indices = self
            .bands
            .par_iter()
            .zip(&frames)
            .map(|(band, xf)| {
                let d = self.dims(n);
                let z = matmul(xf, &band.analysis, n, d.frame_len, d.dim);
                let eff = band.codebook.effective_entries();
                nearest_codes(&z, &eff, d.dim).into_iter().map(|j| j as u32).collect()
            })
            .collect();
        TokenStream::new(self.config.per_band_bits.clone(), self.config.sample_rate, x.len() as u64, indices)
    }

    pub fn decode(&self, tokens: &TokenStream) -> Result<AudioBuffer<T>> {
        if tokens.band_count() != self.bands.len() {
            return Err(Error::arg(format!(
                "token stream has {} bands, model has {}",
                tokens.band_count(),
                self.bands.len()
            )));
        }
        if tokens.sample_rate() != self.config.sample_rate {
            return Err(Error::arg("token stream sample rate differs from model"));
        }
        let len = tokens.original_length() as usize;
        if len.div_ceil(self.config.frame_len) != tokens.frame_count() {
            return Err(Error::corrupt("frame count inconsistent with original length"));
        }
        let (l, d) = (self.config.frame_len, self.config.latent_dim);
        let decoded: Vec<AudioBuffer<T>> = self
            .bands
            .par_iter()
            .zip(tokens.indices())
            .enumerate()
            .map(|(b, (band, idx))| {
                let k = band.codebook.size();
                if let Some(&bad) = idx.iter().find(|&&i| i as usize >= k) {
                    return Err(Error::corrupt(format!("band {}: token {bad} >= codebook size {k}", b + 1)));
                }
                let eff = band.codebook.effective_entries();
                let mut e = Vec::with_capacity(idx.len() * d);
                for &j in idx {
                    e.extend_from_slice(&eff[j as usize * d..(j as usize + 1) * d]);
                }
                let mut out = matmul(&e, &band.synthesis, idx.len(), d, l);
                out.truncate(len);
                AudioBuffer::new(out, self.config.sample_rate)
            })
            .collect::<Result<_>>()?;
        merge_bands(&BandSet::new(decoded)?)
    }

    /// Encode then decode.
    pub fn reconstruct(&self, x: &AudioBuffer<T>) -> Result<AudioBuffer<T>> {
        self.decode(&self.encode(x)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&c.sample_rate.to_le_bytes());
        out.extend_from_slice(&(c.frame_len as u32).to_le_bytes());
        out.extend_from_slice(&(c.latent_dim as u32).to_le_bytes());
        out.extend_from_slice(&(c.split_fft_size as u32).to_le_bytes());
        out.extend_from_slice(&(c.split_hop as u32).to_le_bytes());
        out.push(c.num_bands() as u8);
        for f in c.band_config.boundaries() {
            out.extend_from_slice(&f.to_le_bytes());
        }
        let name = c.band_config.name().unwrap_or("").as_bytes();
        out.push(name.len() as u8);
        out.extend_from_slice(name);
        out.extend_from_slice(&c.per_band_bits);
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&c.learn_rate.to_le_bytes());
        out.extend_from_slice(&(c.epochs as u32).to_le_bytes());
        out.extend_from_slice(&c.commit_weight.to_le_bytes());
        out.extend_from_slice(&c.lambda.to_le_bytes());
        out.push(u8::from(c.simvq));
        out.push(u8::from(c.freeze_codebook));
        out.extend_from_slice(&(c.kmeans_iters as u32).to_le_bytes());
        for band in &self.bands {
            for v in band.analysis.iter().chain(&band.synthesis) {
                out.extend_from_slice(&(v.widen() as f32).to_le_bytes());
            }
            out.extend_from_slice(&band.codebook.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "model");
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::format("bad model magic"));
        }
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(Error::format(format!("model version {version} not supported")));
        }
        let sample_rate = r.u32()?;
        let frame_len = r.u32()? as usize;
        let latent_dim = r.u32()? as usize;
        let split_fft_size = r.u32()? as usize;
        let split_hop = r.u32()? as usize;
        let nbands = r.u8()? as usize;
        let boundaries = (0..=nbands).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let name_len = r.u8()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::corrupt("band config name is not utf-8"))?;
        let per_band_bits = r.take(nbands)?.to_vec();
        let mut band_config = BandConfig::new(boundaries).map_err(|e| Error::corrupt(e.to_string()))?;
        if !name.is_empty() {
            band_config = band_config.named(name);
        }
        let config = CodecConfig {
            sample_rate,
            frame_len,
            latent_dim,
            band_config,
            per_band_bits,
            split_fft_size,
            split_hop,
            seed: r.u64()?,
            learn_rate: r.f64()?,
            epochs: r.u32()? as usize,
            commit_weight: r.f64()?,
            lambda: r.f64()?,
            simvq: r.u8()? != 0,
            freeze_codebook: r.u8()? != 0,
            kmeans_iters: r.u32()? as usize,
        };
        config.validate().map_err(|e| Error::corrupt(e.to_string()))?;
        let block = frame_len
            .checked_mul(latent_dim)
            .ok_or_else(|| Error::corrupt("model dimensions overflow"))?;
        let mut bands = Vec::with_capacity(nbands);
        for _ in 0..nbands {
            if r.remaining() < 8 * block {
                return Err(Error::corrupt("model weights truncated"));
            }
            let mut read = |n: usize| (0..n).map(|_| Ok(T::of(r.f32()? as f64))).collect::<Result<Vec<T>>>();
            let analysis = read(block)?;
            let synthesis = read(block)?;
            let codebook = SimVqCodebook::read_from(&mut r)?;
            bands.push(BandCodec { analysis, synthesis, codebook });
        }
        if r.remaining() != 0 {
            return Err(Error::corrupt(format!("{} trailing bytes after model", r.remaining())));
        }
        Self::from_parts(config, bands).map_err(|e| Error::corrupt(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn init_linear<T: Scalar>(rng: &mut ChaCha8Rng, frame_len: usize, dim: usize) -> (Vec<T>, Vec<T>) {
    let analysis = gaussian(rng, frame_len * dim, 1.0 / (frame_len as f64).sqrt());
    let synthesis = gaussian(rng, dim * frame_len, 1.0 / (frame_len as f64).sqrt());
    (analysis, synthesis)
}

fn make_codebook<T: Scalar>(cfg: &CodecConfig, base: Codebook<T>, band: usize) -> Result<SimVqCodebook<T>> {
    let lambda = T::of(cfg.lambda);
    if cfg.simvq {
        let seed = cfg.seed ^ (0x5157_0000 + band as u64);
        SimVqCodebook::with_noisy_identity(base, lambda, TRANSFORM_INIT_SIGMA, seed)
    } else {
        SimVqCodebook::plain(base, lambda)
    }
}

/// k-means codebook from latents. With fewer latents than entries, the
/// surplus entries are copies of random latents plus small noise.
fn init_codebook<T: Scalar>(z: &[T], dim: usize, k: usize, seed: u64, iters: usize) -> Result<Codebook<T>> {
    let m = z.len() / dim;
    if m >= k {
        return kmeans_init(z, dim, k, seed, iters);
    }
    let fitted = kmeans_init(z, dim, m, seed, iters)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0DE);
    let scale = (z.iter().map(|v| v.widen() * v.widen()).sum::<f64>() / z.len() as f64).sqrt().max(1e-6);
    let normal = Normal::new(0.0, 1e-2 * scale).expect("positive scale");
    let mut entries = fitted.entries().to_vec();
    for _ in m..k {
        let src = rng.random_range(0..m);
        for a in 0..dim {
            entries.push(T::of(z[src * dim + a].widen() + normal.sample(&mut rng)));
        }
    }
    Codebook::new(entries, k, dim)
}

/// Full-batch gradient descent on the whole dataset, one independent model
/// per band. Deterministic given the dataset and `cfg.seed`.
pub fn train<T: Scalar>(dataset: &[AudioBuffer<T>], cfg: &CodecConfig) -> Result<(BandCodecModel<T>, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::arg("training dataset is empty"));
    }
    if let Some(x) = dataset.iter().find(|x| x.sample_rate() != cfg.sample_rate) {
        return Err(Error::arg(format!("training audio at {} Hz, config expects {} Hz", x.sample_rate(), cfg.sample_rate)));
    }
    if dataset.iter().any(|x| x.is_empty()) {
        return Err(Error::arg("training dataset contains empty audio"));
    }

    let (l, d) = (cfg.frame_len, cfg.latent_dim);
    let mut per_band: Vec<Vec<T>> = vec![Vec::new(); cfg.num_bands()];
    for x in dataset {
        let set = split_any_length(x, cfg)?;
        for (acc, band) in per_band.iter_mut().zip(set.bands()) {
            acc.extend(frames_of(band.samples(), l));
        }
    }
    let frames = per_band[0].len() / l;
    let dims = Dims { frames, frame_len: l, dim: d };

    let mut bands = (0..cfg.num_bands())
        .into_par_iter()
        .map(|b| {
            let mut rng = band_rng(cfg.seed, b, 0);
            let (analysis, synthesis) = init_linear::<T>(&mut rng, l, d);
            let z = matmul(&per_band[b], &analysis, frames, l, d);
            let base = init_codebook(&z, d, cfg.codebook_size(b), cfg.seed.wrapping_add(b as u64), cfg.kmeans_iters)?;
            Ok(BandCodec { analysis, synthesis, codebook: make_codebook(cfg, base, b)? })
        })
        .collect::<Result<Vec<_>>>()?;

    let lr = T::of(cfg.learn_rate);
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let losses: Vec<BandLoss> = bands
            .par_iter_mut()
            .zip(&per_band)
            .map(|(band, x)| {
                let fw = band.forward(x, &dims);
                let loss = band.losses(&fw, &dims, cfg.commit_weight);
                if loss.total.is_finite() {
                    let g = band.gradients(x, &fw, &dims, cfg.commit_weight, cfg.freeze_codebook);
                    band.apply(&g, lr);
                }
                loss
            })
            .collect();
        let stats = EpochStats {
            total_loss: losses.iter().map(|l| l.total).sum(),
            recon_loss: losses.iter().map(|l| l.recon).sum(),
            commit_loss: losses.iter().map(|l| l.commit).sum(),
            codes_used: losses.iter().map(|l| l.codes_used).sum(),
        };
        if !stats.total_loss.is_finite() {
            return Err(Error::Training { epoch, reason: format!("loss is {}", stats.total_loss) });
        }
        let params_finite = bands.iter().all(|b| {
            b.analysis.iter().chain(&b.synthesis).chain(b.codebook.base().entries()).all(|v| v.is_finite())
                && b.codebook.transform().is_none_or(|w| w.iter().all(|v| v.is_finite()))
        });
        if !params_finite {
            return Err(Error::Training { epoch, reason: "parameters became non-finite".into() });
        }
        log.epochs.push(stats);
    }
    Ok((BandCodecModel { config: cfg.clone(), bands }, log))
}

/// Time-domain SNR in dB of `estimate` against `reference`.
pub fn snr_db<T: Scalar>(reference: &AudioBuffer<T>, estimate: &AudioBuffer<T>) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::arg("snr inputs differ in length"));
    }
    let signal: f64 = reference.samples().iter().map(|s| s.widen().powi(2)).sum();
    let noise: f64 = reference
        .samples()
        .iter()
        .zip(estimate.samples())
        .map(|(a, b)| (a.widen() - b.widen()).powi(2))
        .sum();
    Ok(10.0 * (signal / noise).log10())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub band: usize,
    pub block: ParamBlock,
    pub checked: usize,
    pub rejected: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub blocks: Vec<BlockCheck>,
}

const GRADCHECK_SAMPLES: usize = 32;
const GRADCHECK_RETRIES: usize = 3;
const GRADCHECK_DENOM_FLOOR: f64 = 1e-6;

/// Compares the routed analytic gradients against central finite differences
/// of each block's active loss terms, with code assignments held fixed.
///
/// The active terms are: reconstruction for the decoder; reconstruction
/// through the straight-through path plus the lambda commitment term for the
/// encoder; the codebook-side commitment term for `W` and the codebook rows.
/// A sampled entry whose perturbation changes any code assignment is retried
/// with a smaller step and rejected if that keeps happening.
pub fn gradient_check<T: Scalar>(model: &BandCodecModel<T>, x: &AudioBuffer<T>, eps: f64) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::arg(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let cfg = &model.config;
    let frames = model.band_frames(x)?;
    let n = x.len().div_ceil(cfg.frame_len);
    let dims = model.dims(n);
    let beta = cfg.commit_weight;
    let mut blocks = Vec::new();

    for (b, (band, xf)) in model.bands.iter().zip(&frames).enumerate() {
        let fw = band.forward(xf, &dims);
        let grads = band.gradients(xf, &fw, &dims, beta, cfg.freeze_codebook);
        let z0 = fw.z.clone();
        let e0 = fw.e.clone();
        let idx0 = fw.indices.clone();

        let mut plan: Vec<(ParamBlock, &Vec<T>)> =
            vec![(ParamBlock::Analysis, &grads.analysis), (ParamBlock::Synthesis, &grads.synthesis)];
        if beta > 0.0 {
            if let Some(gw) = &grads.transform {
                plan.push((ParamBlock::Transform, gw));
            }
            if let Some(gc) = &grads.codebook {
                plan.push((ParamBlock::Codebook, gc));
            }
        }

        for (block, analytic) in plan {
            let surrogate = |p: &BandCodec<T>| block_terms(p, block, xf, &dims, &z0, &e0, &idx0, beta);
            let mut rng = band_rng(cfg.seed ^ 0x6AD, b, block as u64);
            let len = analytic.len();
            let picks: Vec<usize> = if len <= GRADCHECK_SAMPLES {
                (0..len).collect()
            } else {
                (0..GRADCHECK_SAMPLES).map(|_| rng.random_range(0..len)).collect()
            };
            let mut check = BlockCheck { band: b, block, checked: 0, rejected: 0, max_rel_err: 0.0 };
            for i in picks {
                let mut step = eps;
                let mut numeric = None;
                for _ in 0..GRADCHECK_RETRIES {
                    let mut plus = band.clone();
                    perturb(&mut plus, block, i, step);
                    let mut minus = band.clone();
                    perturb(&mut minus, block, i, -step);
                    let (lp, ok_p) = surrogate(&plus);
                    let (lm, ok_m) = surrogate(&minus);
                    if ok_p && ok_m {
                        numeric = Some(loss_difference(&lp, &lm) / (2.0 * step));
                        break;
                    }
                    step /= 10.0;
                }
                match numeric {
                    Some(num) => {
                        let a = analytic[i].widen();
                        let denom = a.abs().max(num.abs()).max(GRADCHECK_DENOM_FLOOR);
                        check.max_rel_err = check.max_rel_err.max((a - num).abs() / denom);
                        check.checked += 1;
                    }
                    None => check.rejected += 1,
                }
            }
            blocks.push(check);
        }
    }
    let max_rel_err = blocks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, blocks })
}

fn perturb<T: Scalar>(p: &mut BandCodec<T>, block: ParamBlock, i: usize, step: f64) {
    let s = T::of(step);
    match block {
        ParamBlock::Analysis => p.analysis[i] += s,
        ParamBlock::Synthesis => p.synthesis[i] += s,
        ParamBlock::Transform => p.codebook.transform_mut().expect("simvq")[i] += s,
        ParamBlock::Codebook => p.codebook.base_mut().entries_mut()[i] += s,
    }
}

/// Active loss terms of `block` as weighted residual groups, so that the
/// loss is `sum_g w_g |r_g|^2`; the flag reports whether the code
/// assignments still match `idx0`.
#[allow(clippy::too_many_arguments)]
fn block_terms<T: Scalar>(
    p: &BandCodec<T>,
    block: ParamBlock,
    x: &[T],
    d: &Dims,
    z0: &[T],
    e0: &[T],
    idx0: &[usize],
    beta: f64,
) -> (Vec<(f64, Vec<f64>)>, bool) {
    let inv_f = 1.0 / d.frames as f64;
    let recon_residual = |latent: &[T]| -> Vec<f64> {
        let xhat = matmul(latent, &p.synthesis, d.frames, d.dim, d.frame_len);
        xhat.iter().zip(x).map(|(&a, &b)| a.widen() - b.widen()).collect()
    };
    let diff = |a: &[T], b: &[T]| -> Vec<f64> { a.iter().zip(b).map(|(&u, &v)| u.widen() - v.widen()).collect() };
    match block {
        ParamBlock::Synthesis => (vec![(inv_f, recon_residual(e0))], true),
        ParamBlock::Analysis => {
            let z = matmul(x, &p.analysis, d.frames, d.frame_len, d.dim);
            let eff = p.codebook.effective_entries();
            let same = z.chunks(d.dim).zip(idx0).all(|(zf, &j)| nearest_code(zf, &eff) == j);
            // z_q = z + (e0 - z0): value of the quantized latent, gradient of z
            let zq: Vec<T> = z.iter().zip(e0).zip(z0).map(|((&zv, &ev), &z0v)| zv + (ev - z0v)).collect();
            let lambda = p.codebook.lambda().widen();
            (vec![(inv_f, recon_residual(&zq)), (beta * lambda * inv_f, diff(&z, e0))], same)
        }
        ParamBlock::Transform | ParamBlock::Codebook => {
            let eff = p.codebook.effective_entries();
            let same = z0.chunks(d.dim).zip(idx0).all(|(zf, &j)| nearest_code(zf, &eff) == j);
            let mut gap = Vec::with_capacity(z0.len());
            for (zf, &j) in z0.chunks(d.dim).zip(idx0) {
                gap.extend(diff(zf, &eff[j * d.dim..(j + 1) * d.dim]));
            }
            (vec![(beta * inv_f, gap)], same)
        }
    }
}

/// `L(plus) - L(minus)` as `sum w (r+ - r-)(r+ + r-)`, which avoids the
/// cancellation of subtracting two nearly equal totals.
fn loss_difference(plus: &[(f64, Vec<f64>)], minus: &[(f64, Vec<f64>)]) -> f64 {
    plus.iter()
        .zip(minus)
        .map(|((w, rp), (_, rm))| w * rp.iter().zip(rm).map(|(a, b)| (a - b) * (a + b)).sum::<f64>())
        .sum()
}
