//! STFT analysis/synthesis and the filterbank helpers used by the metrics.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::{AudioBuffer, PROCESSING_RATE};
use crate::error::{Error, Result};

/// Floor applied to magnitudes before taking the logarithm.
pub const MAGNITUDE_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftParams {
    pub fft_size: usize,
    pub hop: usize,
    pub window: Window,
    pub sample_rate: u32,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            fft_size: 512,
            hop: 128,
            window: Window::Hann,
            sample_rate: PROCESSING_RATE,
        }
    }
}

impl StftParams {
    pub fn new(fft_size: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        let params = Self {
            fft_size,
            hop,
            window: Window::Hann,
            sample_rate,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() || self.fft_size < 4 {
            return Err(Error::InvalidParameter(format!(
                "fft size {} is not a power of two >= 4",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.fft_size % self.hop != 0 {
            return Err(Error::InvalidParameter(format!(
                "hop {} does not divide fft size {}",
                self.hop, self.fft_size
            )));
        }
        if self.hop > self.fft_size / 2 {
            // periodic Hann only overlap-adds to a nonzero envelope up to 50% hop
            return Err(Error::InvalidParameter(format!(
                "hop {} exceeds half the fft size",
                self.hop
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn window(&self) -> Vec<f64> {
        match self.window {
            Window::Hann => hann_periodic(self.fft_size),
        }
    }

    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / self.fft_size as f64
    }

    /// Number of centered frames produced for `n` samples.
    pub fn frame_count(&self, n: usize) -> usize {
        1 + n.max(self.fft_size).div_ceil(self.hop)
    }
}

pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex STFT frames (`frames x bins`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Array2<Complex64>,
    pub params: StftParams,
    /// Length of the analysed signal, restored by [`istft`].
    pub n_samples: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.data.mapv(|c| c.norm())
    }

    pub fn power(&self) -> Array2<f64> {
        self.data.mapv(|c| c.norm_sqr())
    }

    /// Multiplies every bin by the matching real gain.
    pub fn apply_gains(&mut self, gains: &Array2<f64>) -> Result<()> {
        if gains.dim() != self.data.dim() {
            return Err(Error::ShapeMismatch(format!(
                "gains {:?} vs spectrogram {:?}",
                gains.dim(),
                self.data.dim()
            )));
        }
        self.data.zip_mut_with(gains, |c, &g| *c *= g);
        Ok(())
    }
}

/// Natural-log magnitudes, floored at `ln(MAGNITUDE_FLOOR)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMagSpectrogram {
    pub data: Array2<f64>,
}

impl LogMagSpectrogram {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }
}

pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    // numpy-style "reflect" (edge sample not repeated)
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - k;
    }
    k as usize
}

/// Centered STFT: the signal is reflect-padded by `fft_size / 2` on both
/// sides, and zero-padded at the tail so that `1 + ceil(n / hop)` frames fit.
/// Input shorter than one FFT frame is zero-padded to `fft_size` first.
pub fn stft(buffer: &AudioBuffer, params: &StftParams) -> Result<Spectrogram> {
    params.validate()?;
    if buffer.is_empty() {
        return Err(Error::EmptyInput("stft of an empty buffer"));
    }
    if buffer.channels() != 1 {
        return Err(Error::InvalidAudio("stft expects mono input".into()));
    }
    if buffer.sample_rate() != params.sample_rate {
        return Err(Error::InvalidParameter(format!(
            "buffer rate {} does not match analysis rate {}",
            buffer.sample_rate(),
            params.sample_rate
        )));
    }
    let n_samples = buffer.len();
    let mut signal = buffer.samples().to_vec();
    signal.resize(n_samples.max(params.fft_size), 0.0);
    let n = signal.len();

    let half = (params.fft_size / 2) as isize;
    let frames = params.frame_count(n_samples);
    let padded_len = (frames - 1) * params.hop + params.fft_size;
    let padded: Vec<f64> = (0..padded_len as isize)
        .map(|p| {
            let i = p - half;
            if i < n as isize + half {
                signal[reflect_index(i, n)]
            } else {
                0.0
            }
        })
        .collect();

    let window = params.window();
    let bins = params.bins();
    let fft = FftPlanner::new().plan_fft_forward(params.fft_size);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    let mut frame = vec![Complex64::default(); params.fft_size];
    let mut data = Array2::<Complex64>::zeros((frames, bins));
    for t in 0..frames {
        let start = t * params.hop;
        for (k, slot) in frame.iter_mut().enumerate() {
            *slot = Complex64::new(padded[start + k] * window[k], 0.0);
        }
        fft.process_with_scratch(&mut frame, &mut scratch);
        for b in 0..bins {
            data[[t, b]] = frame[b];
        }
    }
    Ok(Spectrogram {
        data,
        params: *params,
        n_samples,
    })
}

/// Weighted overlap-add inverse of [`stft`], normalised by the summed
/// squared synthesis window so that `istft(stft(x)) == x`.
pub fn istft(spec: &Spectrogram) -> Result<AudioBuffer> {
    let params = spec.params;
    params.validate()?;
    if spec.bins() != params.bins() {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} bins, params imply {}",
            spec.bins(),
            params.bins()
        )));
    }
    if spec.frames() != params.frame_count(spec.n_samples) {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} frames, {} samples imply {}",
            spec.frames(),
            spec.n_samples,
            params.frame_count(spec.n_samples)
        )));
    }
    let n_fft = params.fft_size;
    let window = params.window();
    let frames = spec.frames();
    let padded_len = (frames - 1) * params.hop + n_fft;
    let mut acc = vec![0.0; padded_len];
    let mut envelope = vec![0.0; padded_len];

    let ifft = FftPlanner::new().plan_fft_inverse(n_fft);
    let mut scratch = vec![Complex64::default(); ifft.get_inplace_scratch_len()];
    let mut frame = vec![Complex64::default(); n_fft];
    let scale = 1.0 / n_fft as f64;
    for t in 0..frames {
        for b in 0..params.bins() {
            frame[b] = spec.data[[t, b]];
        }
        // Hermitian completion; DC and Nyquist imaginary parts are dropped.
        frame[0].im = 0.0;
        frame[n_fft / 2].im = 0.0;
        for b in 1..n_fft / 2 {
            frame[n_fft - b] = frame[b].conj();
        }
        ifft.process_with_scratch(&mut frame, &mut scratch);
        let start = t * params.hop;
        for k in 0..n_fft {
            acc[start + k] += frame[k].re * scale * window[k];
            envelope[start + k] += window[k] * window[k];
        }
    }
    let half = n_fft / 2;
    let samples = (0..spec.n_samples)
        .map(|i| {
            let e = envelope[i + half];
            if e > 1e-10 {
                acc[i + half] / e
            } else {
                0.0
            }
        })
        .collect();
    Ok(AudioBuffer::mono(samples, params.sample_rate))
}

pub fn log_magnitude(spec: &Spectrogram) -> LogMagSpectrogram {
    LogMagSpectrogram {
        data: spec.data.mapv(|c| c.norm().max(MAGNITUDE_FLOOR).ln()),
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank (`n_mels x bins`) spanning 0 Hz to Nyquist.
pub fn mel_filterbank(n_mels: usize, params: &StftParams) -> Result<Array2<f64>> {
    let bins = params.bins();
    if n_mels < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 mel bands, got {n_mels}")));
    }
    if n_mels > bins {
        return Err(Error::InvalidParameter(format!(
            "{n_mels} mel bands exceed {bins} frequency bins"
        )));
    }
    let nyquist = params.sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut fb = Array2::<f64>::zeros((n_mels, bins));
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..bins {
            let f = params.bin_frequency(b);
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb[[m, b]] = w;
        }
        if fb.row(m).sum() <= 0.0 {
            // band narrower than the bin spacing: fall back to the nearest bin
            let nearest = (center / params.bin_frequency(1)).round() as usize;
            fb[[m, nearest.min(bins - 1)]] = 1.0;
        }
    }
    Ok(fb)
}

/// Center frequencies of the filters returned by [`mel_filterbank`].
pub fn mel_center_frequencies(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Orthonormal DCT-II, first `n_out` coefficients.
pub fn dct_ii(input: &[f64], n_out: usize) -> Vec<f64> {
    let n = input.len();
    let n_out = n_out.min(n);
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            scale
                * input
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x * (PI * (i as f64 + 0.5) * k as f64 / n as f64).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// One-third-octave band layout over an STFT grid.
#[derive(Debug, Clone)]
pub struct ThirdOctaveBands {
    pub centers: Vec<f64>,
    /// Half-open `[low, high)` bin ranges per band.
    pub bin_ranges: Vec<(usize, usize)>,
}

pub const THIRD_OCTAVE_BANDS: usize = 15;
pub const THIRD_OCTAVE_MIN_FREQ: f64 = 150.0;

impl ThirdOctaveBands {
    /// Sums squared bin magnitudes of one frame into band energies.
    pub fn band_energies(&self, power_row: &[f64]) -> Vec<f64> {
        self.bin_ranges
            .iter()
            .map(|&(lo, hi)| power_row[lo..hi].iter().sum())
            .collect()
    }
}

/// 15 one-third-octave bands with centers `150 * 2^(k/3)` Hz; band edges
/// snap to the nearest STFT bin.
pub fn third_octave_bands(params: &StftParams) -> ThirdOctaveBands {
    let bins = params.bins();
    let nearest = |f: f64| -> usize {
        let b = (f / params.bin_frequency(1)).round() as usize;
        b.min(bins - 1)
    };
    let mut centers = Vec::with_capacity(THIRD_OCTAVE_BANDS);
    let mut bin_ranges = Vec::with_capacity(THIRD_OCTAVE_BANDS);
    for k in 0..THIRD_OCTAVE_BANDS {
        let k = k as f64;
        centers.push(THIRD_OCTAVE_MIN_FREQ * 2f64.powf(k / 3.0));
        let lo = THIRD_OCTAVE_MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
        let hi = THIRD_OCTAVE_MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
        bin_ranges.push((nearest(lo), nearest(hi)));
    }
    ThirdOctaveBands {
        centers,
        bin_ranges,
    }
}
