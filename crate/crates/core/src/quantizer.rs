//! Plain VQ and SimVQ codebooks.
//!
//! SimVQ matches and decodes against the transformed entries `c_j W` rather
//! than the raw rows `c_j`. A plain VQ codebook is the same thing with no
//! transform. Quantization is straight-through: the forward value is the
//! matched transformed entry, while gradients are routed by the trainer in
//! [`crate::codec`].
//!
//! # File format (`BSCB`)
//!
//! Little-endian: magic `BSCB`, version `u16`, `K` as `u32`, `D` as `u32`,
//! SimVQ flag `u8`, `K * D` row-major `f32` entries, then the `D * D`
//! transform if the flag is set, then `lambda` as `f32`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::fsutil::{write_atomic, Reader};
use crate::{Error, Result, Scalar};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"BSCB";
pub const CODEBOOK_VERSION: u16 = 1;
pub const DEFAULT_LAMBDA: f64 = 0.25;
/// Largest codebook the token format and search are sized for (2^17).
pub const MAX_CODEBOOK_SIZE: usize = 1 << 17;

/// `K x D` table of code vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T: Scalar = f64> {
    entries: Vec<T>,
    size: usize,
    dim: usize,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(entries: Vec<T>, size: usize, dim: usize) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::arg("codebook needs K >= 1 and D >= 1"));
        }
        if entries.len() != size * dim {
            return Err(Error::arg(format!(
                "{} values do not form a {size} x {dim} codebook",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("codebook entries must be finite"));
        }
        Ok(Self { entries, size, dim })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [T] {
        &mut self.entries
    }

    pub fn row(&self, j: usize) -> &[T] {
        &self.entries[j * self.dim..(j + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimVqCodebook<T: Scalar = f64> {
    base: Codebook<T>,
    /// `D x D`, row-major. `None` means plain VQ.
    transform: Option<Vec<T>>,
    lambda: T,
}

impl<T: Scalar> SimVqCodebook<T> {
    pub fn new(base: Codebook<T>, transform: Vec<T>, lambda: T) -> Result<Self> {
        let d = base.dim();
        if transform.len() != d * d {
            return Err(Error::arg(format!(
                "transform has {} values, expected {d} x {d}",
                transform.len()
            )));
        }
        if transform.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("transform must be finite"));
        }
        check_lambda(lambda)?;
        Ok(Self { base, transform: Some(transform), lambda })
    }

    pub fn plain(base: Codebook<T>, lambda: T) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self { base, transform: None, lambda })
    }

    /// SimVQ codebook with `W = I + N(0, sigma^2)` noise drawn from `seed`.
    pub fn with_noisy_identity(base: Codebook<T>, lambda: T, sigma: f64, seed: u64) -> Result<Self> {
        let d = base.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::arg(e.to_string()))?;
        let transform = (0..d * d)
            .map(|i| {
                let eye = if i / d == i % d { 1.0 } else { 0.0 };
                T::of(eye + normal.sample(&mut rng))
            })
            .collect();
        Self::new(base, transform, lambda)
    }

    pub fn base(&self) -> &Codebook<T> {
        &self.base
    }

    pub(crate) fn base_mut(&mut self) -> &mut Codebook<T> {
        &mut self.base
    }

    pub fn transform(&self) -> Option<&[T]> {
        self.transform.as_deref()
    }

    pub(crate) fn transform_mut(&mut self) -> Option<&mut [T]> {
        self.transform.as_deref_mut()
    }

    pub fn is_simvq(&self) -> bool {
        self.transform.is_some()
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn size(&self) -> usize {
        self.base.size
    }

    pub fn dim(&self) -> usize {
        self.base.dim
    }

    pub fn effective_entries(&self) -> Vec<T> {
        effective_entries(self)
    }

    pub fn quantize(&self, z: &[T]) -> QuantResult<T> {
        quantize_st(z, self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (k, d) = (self.size(), self.dim());
        let mut out = Vec::with_capacity(15 + 4 * (k * d + d * d + 1));
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.push(u8::from(self.is_simvq()));
        let values = self.base.entries.iter().chain(self.transform.iter().flatten());
        for v in values.chain(std::iter::once(&self.lambda)) {
            out.extend_from_slice(&(v.widen() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "codebook");
        let cb = Self::read_from(&mut r)?;
        if r.remaining() != 0 {
            return Err(Error::corrupt(format!("{} trailing bytes after codebook", r.remaining())));
        }
        Ok(cb)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        if r.take(4)? != CODEBOOK_MAGIC {
            return Err(Error::format("bad codebook magic"));
        }
        let version = r.u16()?;
        if version != CODEBOOK_VERSION {
            return Err(Error::format(format!("codebook version {version} not supported")));
        }
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let simvq = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::corrupt(format!("simvq flag {other}"))),
        };
        let needed = k
            .checked_mul(d)
            .and_then(|kd| kd.checked_add(if simvq { d * d } else { 0 }))
            .and_then(|n| n.checked_add(1))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::corrupt("codebook dimensions overflow"))?;
        if needed > r.remaining() {
            return Err(Error::corrupt("codebook payload truncated"));
        }
        let mut read_block = |n: usize| -> Result<Vec<T>> {
            (0..n).map(|_| Ok(T::of(r.f32()? as f64))).collect()
        };
        let entries = read_block(k * d)?;
        let transform = if simvq { Some(read_block(d * d)?) } else { None };
        let lambda = T::of(r.f32()? as f64);
        let base = Codebook::new(entries, k, d).map_err(|e| Error::corrupt(e.to_string()))?;
        let cb = match transform {
            Some(w) => Self::new(base, w, lambda),
            None => Self::plain(base, lambda),
        };
        cb.map_err(|e| Error::corrupt(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_lambda<T: Scalar>(lambda: T) -> Result<()> {
    if !(lambda.is_finite() && lambda >= T::zero()) {
        return Err(Error::arg(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult<T: Scalar = f64> {
    pub index: usize,
    /// Forward value of the straight-through output, a row of the effective entries.
    pub quantized: Vec<T>,
    pub commit_loss: T,
}

/// Rows `c_j W` for every entry (the raw rows for plain VQ).
pub fn effective_entries<T: Scalar>(cb: &SimVqCodebook<T>) -> Vec<T> {
    let d = cb.dim();
    let Some(w) = cb.transform.as_deref() else {
        return cb.base.entries.clone();
    };
    let mut out = vec![T::zero(); cb.size() * d];
    out.par_chunks_mut(d).zip(cb.base.entries.par_chunks(d)).for_each(|(dst, c)| {
        for (i, &ci) in c.iter().enumerate() {
            let wrow = &w[i * d..(i + 1) * d];
            for (o, &wv) in dst.iter_mut().zip(wrow) {
                *o += ci * wv;
            }
        }
    });
    out
}

#[inline]
pub(crate) fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// Index of the effective row closest to `z` in squared Euclidean distance;
/// ties go to the lowest index.
pub fn nearest_code<T: Scalar>(z: &[T], effective: &[T]) -> usize {
    let d = z.len();
    let mut best = 0;
    let mut best_dist = T::infinity();
    for (j, row) in effective.chunks_exact(d).enumerate() {
        let dist = sq_dist(z, row);
        if dist < best_dist {
            best_dist = dist;
            best = j;
        }
    }
    best
}

/// [`nearest_code`] for every row of `zs`, in parallel.
pub fn nearest_codes<T: Scalar>(zs: &[T], effective: &[T], dim: usize) -> Vec<usize> {
    zs.par_chunks(dim).map(|z| nearest_code(z, effective)).collect()
}

/// `||z - qW||^2 + lambda * ||z - qW||^2`: the codebook-side and
/// encoder-side terms have equal forward values and differ only in where
/// their gradients go.
pub fn commitment_loss<T: Scalar>(z: &[T], qw: &[T], lambda: T) -> T {
    let codebook_term = sq_dist(z, qw);
    let encoder_term = sq_dist(z, qw);
    codebook_term + lambda * encoder_term
}

pub fn quantize_st<T: Scalar>(z: &[T], cb: &SimVqCodebook<T>) -> QuantResult<T> {
    let effective = effective_entries(cb);
    quantize_against(z, &effective, cb.lambda)
}

pub(crate) fn quantize_against<T: Scalar>(z: &[T], effective: &[T], lambda: T) -> QuantResult<T> {
    let d = z.len();
    let index = nearest_code(z, effective);
    let quantized = effective[index * d..(index + 1) * d].to_vec();
    let commit_loss = commitment_loss(z, &quantized, lambda);
    QuantResult { index, quantized, commit_loss }
}

/// Result of [`kmeans`]: the centroids and the inertia after seeding and
/// after each Lloyd update.
#[derive(Debug, Clone)]
pub struct KMeansFit<T: Scalar = f64> {
    pub codebook: Codebook<T>,
    pub inertia: Vec<f64>,
}

pub fn kmeans_init<T: Scalar>(data: &[T], dim: usize, k: usize, seed: u64, iters: usize) -> Result<Codebook<T>> {
    Ok(kmeans(data, dim, k, seed, iters)?.codebook)
}

/// k-means++ seeding followed by up to `iters` Lloyd iterations.
///
/// `data` holds `M` rows of `dim` values. Empty clusters are moved to the
/// point farthest from its current centroid.
pub fn kmeans<T: Scalar>(data: &[T], dim: usize, k: usize, seed: u64, iters: usize) -> Result<KMeansFit<T>> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::arg("data length is not a multiple of the dimension"));
    }
    let m = data.len() / dim;
    if k == 0 {
        return Err(Error::arg("k must be >= 1"));
    }
    if m < k {
        return Err(Error::arg(format!("{m} points cannot seed {k} clusters")));
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<T> = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..m)));
    let mut closest: Vec<f64> = (0..m).map(|i| sq_dist(row(i), &centroids[..dim]).widen()).collect();
    for _ in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in closest.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave target just past the last increment
            chosen.unwrap_or_else(|| closest.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.random_range(0..m)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        let c = &centroids[start..];
        for (i, slot) in closest.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(row(i), c).widen());
        }
    }

    let assign = |centroids: &[T]| -> (Vec<usize>, Vec<f64>) {
        data.par_chunks(dim)
            .map(|x| {
                let j = nearest_code(x, centroids);
                (j, sq_dist(x, &centroids[j * dim..(j + 1) * dim]).widen())
            })
            .unzip()
    };

    let (mut labels, mut dists) = assign(&centroids);
    let mut inertia = vec![dists.iter().sum()];
    for _ in 0..iters {
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &j) in labels.iter().enumerate() {
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(row(i)) {
                *s += v.widen();
            }
        }
        let mut taken = vec![false; m];
        for j in 0..k {
            let dst = &mut centroids[j * dim..(j + 1) * dim];
            if counts[j] > 0 {
                let n = counts[j] as f64;
                for (c, s) in dst.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = T::of(s / n);
                }
            } else {
                let far = (0..m)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    taken[i] = true;
                    dst.copy_from_slice(row(i));
                }
            }
        }
        let (new_labels, new_dists) = assign(&centroids);
        let converged = new_labels == labels;
        labels = new_labels;
        dists = new_dists;
        inertia.push(dists.iter().sum());
        if converged {
            break;
        }
    }
    Ok(KMeansFit { codebook: Codebook::new(centroids, k, dim)?, inertia })
}
