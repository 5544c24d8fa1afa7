//! Mono audio buffers, RIFF/WAVE I/O and linear resampling.
//!
//! Only PCM16 and IEEE float32 WAV files with one or two channels are
//! understood. Stereo input is downmixed to mono by the channel mean.

use std::fs;
use std::path::Path;

use crate::fsutil::{write_atomic, Reader};
use crate::{Error, Result, Scalar};

const WAVE_FORMAT_PCM: u16 = 0x0001;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 0x0003;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Mono sample buffer at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer<T: Scalar = f64> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Scalar> AudioBuffer<T> {
    /// Fails if `sample_rate` is zero or any sample is NaN/Inf.
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::arg("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::arg(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![T::zero(); len], sample_rate)
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Converts the sample type, e.g. `f32` storage to an `f64` working copy.
    pub fn convert<U: Scalar>(&self) -> AudioBuffer<U> {
        AudioBuffer {
            samples: self.samples.iter().map(|&s| U::of(s.widen())).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.len() != other.len() {
            return None;
        }
        Some(
            self.samples
                .iter()
                .zip(&other.samples)
                .map(|(a, b)| (a.widen() - b.widen()).abs())
                .fold(0.0, f64::max),
        )
    }
}

/// Sample encoding used by [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn read_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<AudioBuffer<T>> {
    let bytes = fs::read(path.as_ref())?;
    decode_wav(&bytes)
}

/// Parses an in-memory RIFF/WAVE file.
pub fn decode_wav<T: Scalar>(bytes: &[u8]) -> Result<AudioBuffer<T>> {
    let mut r = Reader::new(bytes, "wav file");
    if r.take(4)? != b"RIFF" {
        return Err(Error::format("missing RIFF header"));
    }
    let _riff_len = r.u32()?;
    if r.take(4)? != b"WAVE" {
        return Err(Error::format("RIFF container is not WAVE"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while r.remaining() > 0 {
        if r.remaining() < 8 {
            return Err(Error::corrupt("trailing bytes shorter than a chunk header"));
        }
        let id: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = r.u32()? as usize;
        let body = r.take(len)?;
        // chunks are word aligned
        if len % 2 == 1 && r.remaining() > 0 {
            r.take(1)?;
        }
        match &id {
            b"fmt " => fmt = Some(parse_fmt(body)?),
            b"data" => {
                data = Some(body);
                break;
            }
            _ => {}
        }
    }

    let (format, channels, sample_rate, bits) =
        fmt.ok_or_else(|| Error::corrupt("missing fmt chunk"))?;
    let data = data.ok_or_else(|| Error::corrupt("missing data chunk"))?;
    if channels != 1 && channels != 2 {
        return Err(Error::format(format!("{channels} channels (expected 1 or 2)")));
    }
    if sample_rate == 0 {
        return Err(Error::corrupt("sample rate of zero"));
    }
    let width = match (format, bits) {
        (WAVE_FORMAT_PCM, 16) => 2,
        (WAVE_FORMAT_IEEE_FLOAT, 32) => 4,
        _ => {
            return Err(Error::format(format!(
                "format tag {format:#06x} with {bits} bits per sample"
            )))
        }
    };
    let frame_bytes = width * channels as usize;
    if data.len() % frame_bytes != 0 {
        return Err(Error::corrupt("data chunk is not a whole number of frames"));
    }

    let decode_one = |chunk: &[u8]| -> f64 {
        if width == 2 {
            i16::from_le_bytes([chunk[0], chunk[1]]) as f64 / 32768.0
        } else {
            f32::from_le_bytes(chunk.try_into().unwrap()) as f64
        }
    };
    let mut samples = Vec::with_capacity(data.len() / frame_bytes);
    for frame in data.chunks_exact(frame_bytes) {
        let mut acc = 0.0;
        for ch in frame.chunks_exact(width) {
            acc += decode_one(ch);
        }
        let v = acc / channels as f64;
        if !v.is_finite() {
            return Err(Error::corrupt(format!("non-finite sample at frame {}", samples.len())));
        }
        samples.push(T::of(v));
    }
    AudioBuffer::new(samples, sample_rate)
}

fn parse_fmt(body: &[u8]) -> Result<(u16, u16, u32, u16)> {
    let mut r = Reader::new(body, "fmt chunk");
    let mut format = r.u16()?;
    let channels = r.u16()?;
    let sample_rate = r.u32()?;
    let _byte_rate = r.u32()?;
    let _block_align = r.u16()?;
    let bits = r.u16()?;
    if format == WAVE_FORMAT_EXTENSIBLE {
        let ext_len = r.u16()?;
        if ext_len < 22 {
            return Err(Error::corrupt("extensible fmt chunk too short"));
        }
        let _valid_bits = r.u16()?;
        let _channel_mask = r.u32()?;
        // first two bytes of the subformat GUID carry the plain format tag
        format = r.u16()?;
    }
    Ok((format, channels, sample_rate, bits))
}

/// Writes a mono WAV file. The file appears only once fully written.
pub fn write_wav<T: Scalar>(
    buffer: &AudioBuffer<T>,
    path: impl AsRef<Path>,
    encoding: WavEncoding,
) -> Result<()> {
    if buffer.is_empty() {
        return Err(Error::arg("cannot write an empty buffer"));
    }
    write_atomic(path.as_ref(), &encode_wav(buffer, encoding))
}

pub fn encode_wav<T: Scalar>(buffer: &AudioBuffer<T>, encoding: WavEncoding) -> Vec<u8> {
    let (tag, width) = match encoding {
        WavEncoding::Pcm16 => (WAVE_FORMAT_PCM, 2u16),
        WavEncoding::Float32 => (WAVE_FORMAT_IEEE_FLOAT, 4u16),
    };
    let data_len = buffer.len() * width as usize;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buffer.sample_rate().to_le_bytes());
    out.extend_from_slice(&(buffer.sample_rate() * width as u32).to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&(width * 8).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in buffer.samples() {
        match encoding {
            WavEncoding::Pcm16 => out.extend_from_slice(&pcm16_word(s.widen()).to_le_bytes()),
            WavEncoding::Float32 => out.extend_from_slice(&(s.widen() as f32).to_le_bytes()),
        }
    }
    out
}

fn pcm16_word(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Linear-interpolation resampler. Utility grade: no anti-aliasing filter.
///
/// Output sample `i` reads the input at position `i * source / target`,
/// holding the last sample past the end.
pub fn resample_linear<T: Scalar>(buffer: &AudioBuffer<T>, target_rate: u32) -> Result<AudioBuffer<T>> {
    if target_rate == 0 {
        return Err(Error::arg("target rate must be positive"));
    }
    let source_rate = buffer.sample_rate();
    if source_rate == target_rate || buffer.is_empty() {
        return Ok(AudioBuffer { samples: buffer.samples.clone(), sample_rate: target_rate });
    }
    let input = buffer.samples();
    let out_len =
        ((input.len() as f64) * target_rate as f64 / source_rate as f64).round() as usize;
    let step = source_rate as f64 / target_rate as f64;
    let last = input.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let idx = pos.floor() as usize;
            if idx >= last {
                return input[last];
            }
            let frac = T::of(pos - idx as f64);
            let (a, b) = (input[idx], input[idx + 1]);
            a + (b - a) * frac
        })
        .collect();
    Ok(AudioBuffer { samples, sample_rate: target_rate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm16_file(channels: u16, words: &[i16]) -> Vec<u8> {
        let data_len = words.len() * 2;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&24000u32.to_le_bytes());
        out.extend_from_slice(&(24000 * 2 * channels as u32).to_le_bytes());
        out.extend_from_slice(&(2 * channels).to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data_len as u32).to_le_bytes());
        for w in words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    #[test]
    fn pcm16_scaling() {
        let buf: AudioBuffer = decode_wav(&pcm16_file(1, &[32767])).unwrap();
        assert_eq!(buf.samples(), &[32767.0 / 32768.0]);
        assert_eq!(buf.sample_rate(), 24000);
    }

    #[test]
    fn stereo_downmix_is_channel_mean() {
        let buf: AudioBuffer = decode_wav(&pcm16_file(2, &[16384, -16384, 8192, 0])).unwrap();
        assert_eq!(buf.samples(), &[0.0, 0.125]);
    }

    #[test]
    fn stereo_float_downmix() {
        let mut bytes = encode_wav(&AudioBuffer::<f64>::new(vec![1.0, -1.0], 8000).unwrap(), WavEncoding::Float32);
        // relabel as one stereo frame
        bytes[22] = 2;
        bytes[32] = 8;
        let buf: AudioBuffer = decode_wav(&bytes).unwrap();
        assert_eq!(buf.samples(), &[0.0]);
    }

    #[test]
    fn pcm16_write_rounds_and_clamps() {
        let buf = AudioBuffer::<f64>::new(vec![0.0, 1.5, -2.0, 0.5 / 32768.0 * 0.99], 24000).unwrap();
        let bytes = encode_wav(&buf, WavEncoding::Pcm16);
        let words: Vec<i16> = bytes[44..]
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect();
        assert_eq!(words, vec![0, 32767, -32768, 0]);
    }

    #[test]
    fn float32_bits_survive() {
        let samples: Vec<f32> = vec![0.1, -0.7, 1e-30, f32::MIN_POSITIVE, 0.999_999_9];
        let buf = AudioBuffer::new(samples.clone(), 48000).unwrap();
        let back: AudioBuffer<f32> = decode_wav(&encode_wav(&buf, WavEncoding::Float32)).unwrap();
        let bits: Vec<u32> = back.samples().iter().map(|s| s.to_bits()).collect();
        assert_eq!(bits, samples.iter().map(|s| s.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_unsupported_and_truncated() {
        let mut bytes = pcm16_file(1, &[1, 2, 3]);
        bytes[34] = 24; // 24-bit PCM
        assert!(matches!(decode_wav::<f64>(&bytes), Err(Error::Format(_))));

        let bytes = pcm16_file(1, &[1, 2, 3]);
        assert!(matches!(decode_wav::<f64>(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
        assert!(matches!(decode_wav::<f64>(&bytes[..30]), Err(Error::Corrupt(_))));
        assert!(matches!(decode_wav::<f64>(b"RIFX0000WAVE"), Err(Error::Format(_))));

        let mut bytes = pcm16_file(3, &[1, 2, 3]);
        bytes[22] = 3;
        assert!(matches!(decode_wav::<f64>(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_non_finite_float() {
        let buf = AudioBuffer::<f32>::new(vec![0.0], 8000).unwrap();
        let mut bytes = encode_wav(&buf, WavEncoding::Float32);
        bytes[44..48].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_wav::<f32>(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn buffer_invariants() {
        assert!(AudioBuffer::<f64>::new(vec![0.0], 0).is_err());
        assert!(AudioBuffer::<f64>::new(vec![f64::NAN], 1).is_err());
        assert!(write_wav(&AudioBuffer::<f64>::new(vec![], 1).unwrap(), "/nonexistent/x.wav", WavEncoding::Pcm16).is_err());
    }

    #[test]
    fn resample_hand_evaluated() {
        let buf = AudioBuffer::<f64>::new(vec![0.0, 1.0], 2).unwrap();
        let out = resample_linear(&buf, 4).unwrap();
        assert_eq!(out.samples(), &[0.0, 0.5, 1.0, 1.0]);
        assert_eq!(out.sample_rate(), 4);
    }

    #[test]
    fn resample_identity_constant_and_empty() {
        let buf = AudioBuffer::<f64>::new(vec![0.3, -0.2, 0.9], 24000).unwrap();
        assert_eq!(resample_linear(&buf, 24000).unwrap(), buf);

        let c = AudioBuffer::<f64>::new(vec![0.25; 441], 44100).unwrap();
        for rate in [8000, 16000, 24000, 96000] {
            let out = resample_linear(&c, rate).unwrap();
            assert_eq!(out.len(), (441.0 * rate as f64 / 44100.0).round() as usize);
            assert!(out.samples().iter().all(|&s| s == 0.25));
        }

        let empty = AudioBuffer::<f64>::new(vec![], 8000).unwrap();
        assert!(resample_linear(&empty, 16000).unwrap().is_empty());
        assert!(resample_linear(&buf, 0).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let buf = AudioBuffer::<f32>::new(vec![0.5, -0.25, 0.125], 24000).unwrap();
        write_wav(&buf, &path, WavEncoding::Float32).unwrap();
        assert_eq!(read_wav::<f32>(&path).unwrap(), buf);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn resample_stays_within_input_bounds(
                xs in proptest::collection::vec(-1.0f64..1.0, 1..200),
                src in 1u32..48000,
                dst in 1u32..48000,
            ) {
                let buf = AudioBuffer::new(xs.clone(), src).unwrap();
                let out = resample_linear(&buf, dst).unwrap();
                let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.samples().iter().all(|&s| s >= lo && s <= hi));
            }

            #[test]
            fn float32_wav_round_trip(xs in proptest::collection::vec(-1.0f32..1.0, 1..300)) {
                let buf = AudioBuffer::new(xs, 24000).unwrap();
                let back: AudioBuffer<f32> = decode_wav(&encode_wav(&buf, WavEncoding::Float32)).unwrap();
                prop_assert_eq!(back, buf);
            }
        }
    }
}
