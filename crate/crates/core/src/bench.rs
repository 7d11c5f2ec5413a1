//! Real-time-factor measurement.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{AudioBuffer, PROCESSING_RATE};
use crate::error::{Error, Result};
use crate::model::{PmAuxModel, Reference};
use crate::synth::{self, Voice};

/// Timings of repeated enhancement of one synthetic input.
#[derive(Debug, Clone, PartialEq)]
pub struct RtfReport {
    pub duration_secs: f64,
    /// Wall-clock seconds per repetition.
    pub timings: Vec<f64>,
    pub median: f64,
    /// Compute seconds per second of audio.
    pub ratio: f64,
    /// Seconds of audio per compute second.
    pub inverse: f64,
}

impl fmt::Display for RtfReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "audio duration: {:.3} s", self.duration_secs)?;
        for (i, t) in self.timings.iter().enumerate() {
            writeln!(f, "run {}: {:.6} s", i + 1, t)?;
        }
        writeln!(f, "median: {:.6} s", self.median)?;
        writeln!(f, "compute/audio ratio (RTF): {:.4}", self.ratio)?;
        write!(f, "audio/compute speedup (inverse RTF): {:.4}", self.inverse)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `repetitions` enhancements of a `duration_s` mixture. Model loading
/// and input synthesis are outside the timed region.
pub fn benchmark_rtf(model: &PmAuxModel<f32>, duration_s: f64, repetitions: usize) -> Result<RtfReport> {
    if !(duration_s >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "benchmark duration must be at least 1 s, got {duration_s}"
        )));
    }
    if repetitions == 0 {
        return Err(Error::InvalidParameter("benchmark needs at least one repetition".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let speech = synth::utterance(&Voice::random(&mut rng), duration_s, &mut rng);
    let noise = synth::noise("pink", duration_s + 1.0, &mut rng)?;
    let n = speech.len();
    let noisy = AudioBuffer::mono(
        speech.samples().iter().zip(noise.samples()).map(|(a, b)| a + b).collect(),
        PROCESSING_RATE,
    );
    let minus = noise.slice(n, noise.len());
    let mut timings = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        let out = model.enhance(&noisy, &Reference::Mute, &minus)?;
        timings.push(start.elapsed().as_secs_f64());
        debug_assert_eq!(out.len(), n);
    }
    let median = median(&timings);
    let ratio = median / (n as f64 / PROCESSING_RATE as f64);
    Ok(RtfReport {
        duration_secs: n as f64 / PROCESSING_RATE as f64,
        timings,
        median,
        ratio,
        inverse: 1.0 / ratio,
    })
}
