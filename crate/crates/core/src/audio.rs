//! WAV input/output, channel down-mixing and sample-rate conversion.
//!
//! Everything downstream of this module works on 16 kHz mono buffers; the
//! helpers here bring arbitrary PCM16 / float32 WAV material into that
//! format and back.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Rate every model and training routine operates at.
pub const PROCESSING_RATE: u32 = 16_000;

/// Interleaved time-domain samples with their sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
    channels: u16,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32, channels: u16) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidAudio("sample rate must be positive".into()));
        }
        if channels == 0 {
            return Err(Error::InvalidAudio("channel count must be positive".into()));
        }
        if samples.len() % channels as usize != 0 {
            return Err(Error::InvalidAudio(format!(
                "{} samples not divisible by {} channels",
                samples.len(),
                channels
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidAudio(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
            channels,
        })
    }

    /// Mono buffer. Panics on non-finite samples or a zero rate; meant for
    /// internally generated signals.
    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self::new(samples, sample_rate, 1).expect("valid mono buffer")
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self::mono(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channels(&self) -> u16 {
        self.channels
    }

    /// Number of frames (samples per channel).
    pub fn len(&self) -> usize {
        self.samples.len() / self.channels as usize
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    pub fn is_silent(&self) -> bool {
        self.samples.iter().all(|&s| s == 0.0)
    }

    /// Scales the buffer down so that its peak is 1, only when it exceeds 1.
    pub fn peak_normalize(mut self) -> Self {
        let peak = self.peak();
        if peak > 1.0 {
            for s in &mut self.samples {
                *s /= peak;
            }
        }
        self
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            ..self.clone()
        }
    }

    /// Frames `start..end` of a mono buffer.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        assert_eq!(self.channels, 1, "slice is defined on mono buffers");
        Self::mono(self.samples[start..end].to_vec(), self.sample_rate)
    }

    /// Zero-pads (or truncates) a mono buffer to `len` frames.
    pub fn fit_to(&self, len: usize) -> Self {
        assert_eq!(self.channels, 1, "fit_to is defined on mono buffers");
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self::mono(samples, self.sample_rate)
    }
}

pub fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Sample encodings supported by [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Pcm16,
    Float32,
}

impl std::str::FromStr for BitDepth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "16" => Ok(BitDepth::Pcm16),
            "32f" | "32" => Ok(BitDepth::Float32),
            other => Err(Error::InvalidBitDepth(other.to_string())),
        }
    }
}

const WAVE_FORMAT_PCM: u16 = 1;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 3;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk> {
    if body.len() < 16 {
        return Err(Error::MalformedWav(format!(
            "fmt chunk is {} bytes, expected at least 16",
            body.len()
        )));
    }
    let mut format = u16_at(body, 0);
    if format == WAVE_FORMAT_EXTENSIBLE {
        // cbSize(2) validBits(2) channelMask(4) then the sub-format GUID,
        // whose first two bytes carry the actual format tag.
        if body.len() < 26 {
            return Err(Error::MalformedWav("truncated WAVE_FORMAT_EXTENSIBLE fmt chunk".into()));
        }
        format = u16_at(body, 24);
    }
    Ok(FmtChunk {
        format,
        channels: u16_at(body, 2),
        sample_rate: u32_at(body, 4),
        bits: u16_at(body, 14),
    })
}

/// Parses an in-memory RIFF/WAVE image.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedWav("missing RIFF/WAVE signature".into()));
    }
    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                Error::MalformedWav(format!(
                    "chunk {:?} claims {} bytes past end of file",
                    String::from_utf8_lossy(id),
                    size
                ))
            })?;
        match id {
            b"fmt " => fmt = Some(parse_fmt(&bytes[body_start..body_end])?),
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }
    let fmt = fmt.ok_or_else(|| Error::MalformedWav("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::MalformedWav("no data chunk".into()))?;
    if fmt.channels == 0 || fmt.sample_rate == 0 {
        return Err(Error::MalformedWav("zero channels or zero sample rate".into()));
    }

    let samples: Vec<f64> = match (fmt.format, fmt.bits) {
        (WAVE_FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (WAVE_FORMAT_IEEE_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        (WAVE_FORMAT_PCM, bits) => {
            return Err(Error::UnsupportedCodec(format!("{bits}-bit integer PCM")))
        }
        (WAVE_FORMAT_IEEE_FLOAT, bits) => {
            return Err(Error::UnsupportedCodec(format!("{bits}-bit float")))
        }
        (tag, _) => return Err(Error::UnsupportedCodec(format!("format tag 0x{tag:04x}"))),
    };
    let whole = samples.len() - samples.len() % fmt.channels as usize;
    let mut samples = samples;
    samples.truncate(whole);
    AudioBuffer::new(samples, fmt.sample_rate, fmt.channels)
        .map_err(|e| Error::MalformedWav(e.to_string()))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

fn quantize_16(x: f64) -> i16 {
    // f64::round is half-away-from-zero
    (x.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Serializes a buffer as a canonical 44-byte-header WAV image.
pub fn encode_wav(buffer: &AudioBuffer, depth: BitDepth) -> Vec<u8> {
    let (format, bytes_per_sample) = match depth {
        BitDepth::Pcm16 => (WAVE_FORMAT_PCM, 2u16),
        BitDepth::Float32 => (WAVE_FORMAT_IEEE_FLOAT, 4u16),
    };
    let channels = buffer.channels();
    let block_align = channels * bytes_per_sample;
    let data_len = (buffer.samples().len() * bytes_per_sample as usize) as u32;

    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&buffer.sample_rate().to_le_bytes());
    out.extend_from_slice(&(buffer.sample_rate() * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&(bytes_per_sample * 8).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    match depth {
        BitDepth::Pcm16 => {
            for &s in buffer.samples() {
                out.extend_from_slice(&quantize_16(s).to_le_bytes());
            }
        }
        BitDepth::Float32 => {
            for &s in buffer.samples() {
                out.extend_from_slice(&(s as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, buffer: &AudioBuffer, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(buffer, depth);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Averages channels. Mono input is returned unchanged.
pub fn to_mono(buffer: &AudioBuffer) -> AudioBuffer {
    let ch = buffer.channels() as usize;
    if ch == 1 {
        return buffer.clone();
    }
    let samples = buffer
        .samples()
        .chunks_exact(ch)
        .map(|frame| frame.iter().sum::<f64>() / ch as f64)
        .collect();
    AudioBuffer::mono(samples, buffer.sample_rate())
}

const KAISER_BETA: f64 = 8.6;
const ZERO_CROSSINGS: f64 = 64.0;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Polyphase windowed-sinc resampler (Kaiser window, beta 8.6, 64 zero
/// crossings of the low-pass kernel on each side).
///
/// Operates channel by channel; output length is `round(n * target / source)`.
pub fn resample(buffer: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::InvalidParameter("target rate must be positive".into()));
    }
    let source_rate = buffer.sample_rate();
    if source_rate == target_rate {
        return Ok(buffer.clone());
    }
    let g = gcd(source_rate as u64, target_rate as u64);
    let up = (target_rate as u64 / g) as usize;
    let down = (source_rate as u64 / g) as usize;

    // cutoff relative to the input Nyquist
    let cutoff = (up as f64 / down as f64).min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let reach = half_width.ceil() as isize;
    let i0_beta = bessel_i0(KAISER_BETA);

    // taps[p][k + reach] weights x[q + k] for output phase p
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut taps: Vec<f64> = (-reach..=reach)
                .map(|k| {
                    let tau = frac - k as f64;
                    let r = tau / half_width;
                    if r.abs() > 1.0 {
                        0.0
                    } else {
                        let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
                        cutoff * sinc(cutoff * tau) * w
                    }
                })
                .collect();
            let sum: f64 = taps.iter().sum();
            for t in &mut taps {
                *t /= sum;
            }
            taps
        })
        .collect();

    let ch = buffer.channels() as usize;
    let n_in = buffer.len();
    let n_out = ((n_in as f64) * target_rate as f64 / source_rate as f64).round() as usize;
    let input = buffer.samples();
    let mut out = vec![0.0; n_out * ch];
    for j in 0..n_out {
        let pos = j * down;
        let q = (pos / up) as isize;
        let taps = &phases[pos % up];
        for c in 0..ch {
            let mut acc = 0.0;
            for (t, &w) in taps.iter().enumerate() {
                let i = q + t as isize - reach;
                if i >= 0 && (i as usize) < n_in {
                    acc += w * input[i as usize * ch + c];
                }
            }
            out[j * ch + c] = acc;
        }
    }
    AudioBuffer::new(out, target_rate, buffer.channels())
}

/// Converts any buffer to the 16 kHz mono processing format.
pub fn to_processing_format(buffer: &AudioBuffer) -> Result<AudioBuffer> {
    resample(&to_mono(buffer), PROCESSING_RATE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_minimum_pcm_value_as_minus_one() {
        let buf = AudioBuffer::mono(vec![-1.0, 0.5], 16_000);
        let bytes = encode_wav(&buf, BitDepth::Pcm16);
        assert_eq!(&bytes[44..46], &(-32768i16).to_le_bytes());
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.samples()[0], -1.0);
        assert_eq!(back.samples()[1], 0.5);
    }

    #[test]
    fn full_scale_positive_clamps_to_32767() {
        let buf = AudioBuffer::mono(vec![1.0, 1.5, -1.5], 16_000);
        let bytes = encode_wav(&buf, BitDepth::Pcm16);
        assert_eq!(&bytes[44..46], &32767i16.to_le_bytes());
        assert_eq!(&bytes[46..48], &32767i16.to_le_bytes());
        assert_eq!(&bytes[48..50], &(-32768i16).to_le_bytes());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(quantize_16(0.5 / 32768.0), 1);
        assert_eq!(quantize_16(-0.5 / 32768.0), -1);
        assert_eq!(quantize_16(0.49 / 32768.0), 0);
    }

    #[test]
    fn zero_buffer_has_canonical_header() {
        let buf = AudioBuffer::zeros(16_000, 16_000);
        let bytes = encode_wav(&buf, BitDepth::Pcm16);
        assert_eq!(bytes.len(), 44 + 32_000);
        assert_eq!(u32_at(&bytes, 4), 36 + 32_000);
        assert_eq!(u32_at(&bytes, 16), 16);
        assert_eq!(u16_at(&bytes, 20), 1);
        assert_eq!(u32_at(&bytes, 24), 16_000);
        assert_eq!(u32_at(&bytes, 28), 32_000);
        assert_eq!(u16_at(&bytes, 32), 2);
        assert_eq!(u16_at(&bytes, 34), 16);
        assert_eq!(u32_at(&bytes, 40), 32_000);
        assert!(bytes[44..].iter().all(|&b| b == 0));
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.len(), 16_000);
        assert_eq!(back.sample_rate(), 16_000);
        assert!(back.is_silent());
    }

    #[test]
    fn float_round_trip_is_exact_for_f32_values() {
        let buf = AudioBuffer::new(vec![0.25, -0.125, 0.75, -1.0], 44_100, 2).unwrap();
        let back = decode_wav(&encode_wav(&buf, BitDepth::Float32)).unwrap();
        assert_eq!(back, buf);
    }

    #[test]
    fn unknown_chunks_are_skipped() {
        let buf = AudioBuffer::mono(vec![0.5; 4], 8_000);
        let bytes = encode_wav(&buf, BitDepth::Pcm16);
        let mut patched = bytes[..36].to_vec();
        patched.extend_from_slice(b"LIST");
        patched.extend_from_slice(&3u32.to_le_bytes());
        patched.extend_from_slice(&[1, 2, 3, 0]); // odd size plus pad byte
        patched.extend_from_slice(&bytes[36..]);
        let back = decode_wav(&patched).unwrap();
        assert_eq!(back.samples(), &[0.5; 4]);
    }

    #[test]
    fn distinct_errors_for_bad_inputs() {
        let missing = read_wav("/definitely/not/here.wav").unwrap_err();
        assert!(matches!(missing, Error::FileNotFound(_)));

        let garbage = decode_wav(b"not a wav file at all").unwrap_err();
        assert!(matches!(garbage, Error::MalformedWav(_)));

        let mut adpcm = encode_wav(&AudioBuffer::zeros(4, 8_000), BitDepth::Pcm16);
        adpcm[20..22].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(decode_wav(&adpcm).unwrap_err(), Error::UnsupportedCodec(_)));
    }

    #[test]
    fn bit_depth_parsing() {
        assert_eq!("16".parse::<BitDepth>().unwrap(), BitDepth::Pcm16);
        assert_eq!("32f".parse::<BitDepth>().unwrap(), BitDepth::Float32);
        assert!(matches!("24".parse::<BitDepth>(), Err(Error::InvalidBitDepth(_))));
    }

    #[test]
    fn mono_downmix() {
        let stereo = AudioBuffer::new(vec![0.5, -0.5, 0.5, -0.5], 16_000, 2).unwrap();
        assert_eq!(to_mono(&stereo).samples(), &[0.0, 0.0]);

        let stereo = AudioBuffer::new(vec![0.2, 0.6], 16_000, 2).unwrap();
        assert!((to_mono(&stereo).samples()[0] - 0.4).abs() < 1e-15);

        let mono = AudioBuffer::mono(vec![0.1, 0.2, 0.3], 16_000);
        assert_eq!(to_mono(&mono), mono);
        assert_eq!(to_mono(&to_mono(&stereo)), to_mono(&stereo));
    }

    #[test]
    fn same_rate_resample_is_identity() {
        let buf = AudioBuffer::mono(vec![0.1, -0.3, 0.7], 16_000);
        assert_eq!(resample(&buf, 16_000).unwrap(), buf);
    }

    #[test]
    fn resample_preserves_dc_in_the_interior() {
        let buf = AudioBuffer::mono(vec![0.3; 16_000], 16_000);
        let out = resample(&buf, 8_000).unwrap();
        assert_eq!(out.len(), 8_000);
        for &s in &out.samples()[200..7_800] {
            assert!((s - 0.3).abs() < 1e-3, "{s}");
        }
        let up = resample(&buf, 44_100).unwrap();
        assert_eq!(up.len(), 44_100);
        for &s in &up.samples()[500..43_500] {
            assert!((s - 0.3).abs() < 1e-3, "{s}");
        }
    }

    #[test]
    fn rejects_zero_target_rate() {
        let buf = AudioBuffer::zeros(10, 16_000);
        assert!(resample(&buf, 0).is_err());
    }

    #[test]
    fn buffer_validation() {
        assert!(AudioBuffer::new(vec![0.0; 3], 16_000, 2).is_err());
        assert!(AudioBuffer::new(vec![f64::NAN], 16_000, 1).is_err());
        assert!(AudioBuffer::new(vec![], 0, 1).is_err());
    }
    fn sine(freq: f64, rate: u32, n: usize) -> AudioBuffer {
        AudioBuffer::mono(
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
                .collect(),
            rate,
        )
    }

    #[test]
    fn downsampled_sine_keeps_its_peak_and_level() {
        let out = resample(&sine(440.0, 16_000, 32_000), 8_000).unwrap();
        assert_eq!(out.len(), 16_000);
        // one second of interior samples gives 1 Hz bins
        let interior = &out.samples()[4_000..12_000];
        let mut buf: Vec<rustfft::num_complex::Complex64> =
            interior.iter().map(|&v| rustfft::num_complex::Complex64::new(v, 0.0)).collect();
        rustfft::FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        let peak = (0..4_000).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
        assert_eq!(peak, 440);
        let amplitude = 2.0 * buf[440].norm() / interior.len() as f64;
        let ripple_db = 20.0 * amplitude.log10();
        assert!(ripple_db.abs() < 0.1, "passband level {ripple_db} dB");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn pcm16_round_trip_within_one_step(samples in proptest::collection::vec(-1.0f64..=1.0, 1..400)) {
            let buf = AudioBuffer::mono(samples, 16_000);
            let back = decode_wav(&encode_wav(&buf, BitDepth::Pcm16)).unwrap();
            for (a, b) in buf.samples().iter().zip(back.samples()) {
                proptest::prop_assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }

        #[test]
        fn resampling_keeps_duration(n in 1usize..5000, to in proptest::sample::select(vec![8_000u32, 11_025, 22_050, 44_100, 48_000])) {
            let buf = AudioBuffer::zeros(n, 16_000);
            let out = resample(&buf, to).unwrap();
            let diff = (out.duration_secs() - buf.duration_secs()).abs();
            proptest::prop_assert!(diff <= 1.0 / to as f64 + 1e-12);
        }

        #[test]
        fn downmix_is_idempotent(samples in proptest::collection::vec(-1.0f64..=1.0, 1..100)) {
            let even = samples.len() / 2 * 2;
            proptest::prop_assume!(even > 0);
            let stereo = AudioBuffer::new(samples[..even].to_vec(), 16_000, 2).unwrap();
            let once = to_mono(&stereo);
            proptest::prop_assert_eq!(to_mono(&once), once);
        }
    }
}
