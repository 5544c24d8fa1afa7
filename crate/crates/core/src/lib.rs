//! Signal path and quantization machinery for a band-split neural audio codec.
//!
//! The crate covers everything that is deterministic or trainable at desk scale:
//!
//! * [`audio_io`]: mono WAV reading/writing and a utility-grade linear resampler.
//! * [`dsp`]: windowed STFT and weighted overlap-add ISTFT.
//! * [`bandsplit`]: binary spectral band masks, band splitting and merging.
//! * [`quantizer`]: plain VQ and SimVQ codebooks, straight-through quantization,
//!   commitment loss and k-means initialization.
//! * [`codec`]: a toy per-band linear codec at a 75 Hz token rate, trained with
//!   hand-derived gradients.
//! * [`tokens`]: bit-packed `.bstk` token streams.
//! * [`analysis`]: codebook utilization entropy and energy profiles.
//! * [`metrics`]: multi-scale mel and STFT distances.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases below
//! name the common concrete instantiations.

pub mod analysis;
pub mod audio_io;
pub mod bandsplit;
pub mod codec;
pub mod dsp;
mod error;
pub(crate) mod fsutil;
pub mod metrics;
pub mod quantizer;
mod scalar;
pub mod tokens;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use analysis::{EnergyProfile, IndexHistogram, UtilizationReport};
pub use audio_io::{AudioBuffer, WavEncoding};
pub use bandsplit::{BandConfig, BandMask, BandSet};
pub use codec::{BandCodecModel, CodecConfig, TrainLog};
pub use dsp::{Spectrogram, StftConfig};
pub use quantizer::{Codebook, QuantResult, SimVqCodebook};
pub use tokens::TokenStream;

pub type AudioBufferF32 = AudioBuffer<f32>;
pub type AudioBufferF64 = AudioBuffer<f64>;
pub type BandSetF32 = BandSet<f32>;
pub type BandSetF64 = BandSet<f64>;
pub type SpectrogramF32 = Spectrogram<f32>;
pub type SpectrogramF64 = Spectrogram<f64>;
pub type StftConfigF32 = StftConfig<f32>;
pub type StftConfigF64 = StftConfig<f64>;
pub type CodebookF32 = Codebook<f32>;
pub type CodebookF64 = Codebook<f64>;
pub type SimVqCodebookF32 = SimVqCodebook<f32>;
pub type SimVqCodebookF64 = SimVqCodebook<f64>;
pub type BandCodecModelF32 = BandCodecModel<f32>;
pub type BandCodecModelF64 = BandCodecModel<f64>;
