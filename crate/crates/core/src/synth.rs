//! Deterministic synthetic desk corpus: speech-like voiced utterances,
//! a handful of noise families and a small set of tagged speakers.
//!
//! Everything is generated from a seed, so the corpus needs no download and
//! is identical on every machine.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{self, AudioBuffer, BitDepth, PROCESSING_RATE};
use crate::error::{Error, Result};
use crate::harness::{
    make_selective_tuple, split_manifest, Clip, Corpus, CorpusManifest, Gender, ManifestEntry, MixTuple,
    NoiseSegments, Role, SegmentPolicy, Split, Utterance,
};

const RATE: f64 = PROCESSING_RATE as f64;
/// RMS every generated clip is normalised to.
pub const CLIP_RMS: f64 = 0.1;

/// Vowel formants (F1, F2, F3) in Hz for an adult male voice.
const VOWELS: [(f64, f64, f64); 6] = [
    (730.0, 1090.0, 2440.0),
    (270.0, 2290.0, 3010.0),
    (300.0, 870.0, 2240.0),
    (530.0, 1840.0, 2480.0),
    (570.0, 840.0, 2410.0),
    (660.0, 1720.0, 2410.0),
];
const BANDWIDTHS: [f64; 3] = [90.0, 110.0, 150.0];

pub const NOISE_CATEGORIES: [&str; 8] = ["white", "pink", "brown", "am", "band", "hum", "tone", "siren"];

/// Voice parameters of one synthetic talker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voice {
    pub f0: f64,
    /// Multiplies every formant frequency.
    pub formant_scale: f64,
    /// Spectral slope of the glottal source in dB per octave.
    pub tilt_db: f64,
    pub vibrato_hz: f64,
}

impl Voice {
    pub fn random(rng: &mut impl Rng) -> Self {
        let f0 = rng.random_range(90.0..260.0);
        Self {
            f0,
            formant_scale: 1.0 + 0.2 * ((f0 - 90.0) / 170.0) + rng.random_range(-0.04..0.04),
            tilt_db: rng.random_range(-9.0..-5.0),
            vibrato_hz: rng.random_range(4.0..6.5),
        }
    }
}

fn normalise(mut x: Vec<f64>, target: f64) -> AudioBuffer {
    let r = audio::rms(&x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / r);
    }
    AudioBuffer::mono(x, PROCESSING_RATE)
}

/// Level of the white recording floor under each utterance, relative to its
/// RMS. Keeps pauses from being digitally silent.
pub const ROOM_FLOOR_DB: f64 = -50.0;

/// One utterance of syllables separated by short pauses and fricatives.
pub fn utterance(voice: &Voice, secs: f64, rng: &mut impl Rng) -> AudioBuffer {
    let n = (secs * RATE).round() as usize;
    let mut out = vec![0.0; n];
    let mut t0 = rng.random_range(0..(0.08 * RATE) as usize);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    while t0 < n {
        let len = (rng.random_range(0.12..0.30) * RATE) as usize;
        let end = (t0 + len).min(n);
        let (f1, f2, f3) = VOWELS[rng.random_range(0..VOWELS.len())];
        let formants = [f1, f2, f3].map(|f| f * voice.formant_scale);
        let slope = rng.random_range(-0.25..0.2);
        let level = rng.random_range(0.6..1.0);
        voiced_syllable(&mut out[t0..end], voice, &formants, slope, vib_phase + t0 as f64 / RATE, level);
        t0 = end;
        if rng.random_bool(0.35) {
            let flen = ((rng.random_range(0.04..0.09) * RATE) as usize).min(n - t0);
            fricative(&mut out[t0..t0 + flen], rng);
            t0 += flen;
        }
        t0 += (rng.random_range(0.03..0.10) * RATE) as usize;
    }
    let floor = audio::rms(&out) * 10f64.powf(ROOM_FLOOR_DB / 20.0) * 3f64.sqrt();
    for (o, w) in out.iter_mut().zip(white_noise(n, rng)) {
        *o += floor * w;
    }
    normalise(out, CLIP_RMS)
}

fn voiced_syllable(out: &mut [f64], voice: &Voice, formants: &[f64; 3], slope: f64, t_offset: f64, level: f64) {
    let n = out.len();
    let mut phase = 0.0;
    let harmonics = ((0.45 * RATE) / (voice.f0 * 1.4)).floor() as usize;
    for (i, o) in out.iter_mut().enumerate() {
        let u = i as f64 / n as f64;
        let t = t_offset + i as f64 / RATE;
        let f0 = voice.f0 * (1.0 + slope * (u - 0.5)) * (1.0 + 0.02 * (2.0 * PI * voice.vibrato_hz * t).sin());
        phase += 2.0 * PI * f0 / RATE;
        // raised-cosine onset and release
        let env = (PI * u).sin().powf(0.6) * level;
        let mut acc = 0.0;
        for h in 1..=harmonics {
            let f = f0 * h as f64;
            if f > 0.48 * RATE {
                break;
            }
            let mut a = 0.0;
            for (k, &fk) in formants.iter().enumerate() {
                let d = (f - fk) / BANDWIDTHS[k];
                a += 1.0 / (1.0 + d * d) / (k as f64 + 1.0);
            }
            let tilt = 10f64.powf(voice.tilt_db * (h as f64).log2() / 20.0);
            acc += (a + 0.02) * tilt * (phase * h as f64).sin();
        }
        *o += env * acc;
    }
}

fn fricative(out: &mut [f64], rng: &mut impl Rng) {
    let n = out.len();
    let mut prev = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        let w: f64 = rng.random_range(-1.0..1.0);
        let hp = w - prev;
        prev = w;
        let env = (PI * i as f64 / n as f64).sin();
        *o += 0.15 * env * hp;
    }
}

fn white_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// A noise clip of the given family.
pub fn noise(category: &str, secs: f64, rng: &mut impl Rng) -> Result<AudioBuffer> {
    let n = (secs * RATE).round() as usize;
    let x: Vec<f64> = match category {
        "white" => white_noise(n, rng),
        "pink" => {
            // Kellet's economy filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white_noise(n, rng)
                .into_iter()
                .map(|w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        "brown" => {
            let mut acc = 0.0;
            white_noise(n, rng)
                .into_iter()
                .map(|w| {
                    acc = 0.995 * acc + w;
                    acc
                })
                .collect()
        }
        "am" => {
            let rate = rng.random_range(2.0..8.0);
            let depth = rng.random_range(0.6..0.95);
            let ph = rng.random_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let m = 1.0 - depth * (0.5 + 0.5 * (2.0 * PI * rate * i as f64 / RATE + ph).sin());
                    m * rng.random_range(-1.0..1.0)
                })
                .collect()
        }
        "band" => {
            // two-pole resonator
            let fc = rng.random_range(400.0..4000.0);
            let r: f64 = 0.97;
            let c = 2.0 * r * (2.0 * PI * fc / RATE).cos();
            let (mut y1, mut y2) = (0.0, 0.0);
            white_noise(n, rng)
                .into_iter()
                .map(|w| {
                    let y = w + c * y1 - r * r * y2;
                    y2 = y1;
                    y1 = y;
                    y
                })
                .collect()
        }
        "hum" => {
            let base = if rng.random_bool(0.5) { 50.0 } else { 60.0 };
            let ph: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / RATE;
                    (1..=8).map(|h| (2.0 * PI * base * h as f64 * t + ph[h - 1]).sin() / h as f64).sum()
                })
                .collect()
        }
        "tone" => {
            let f = rng.random_range(250.0..3500.0);
            let ph = rng.random_range(0.0..2.0 * PI);
            tone(f, ph, n).into_samples()
        }
        "siren" => {
            let lo = rng.random_range(500.0..900.0);
            let hi = lo * rng.random_range(1.4..2.0);
            let rate = rng.random_range(0.3..1.5);
            let mut phase = 0.0;
            (0..n)
                .map(|i| {
                    let t = i as f64 / RATE;
                    let f = lo + (hi - lo) * (0.5 + 0.5 * (2.0 * PI * rate * t).sin());
                    phase += 2.0 * PI * f / RATE;
                    phase.sin()
                })
                .collect()
        }
        other => return Err(Error::InvalidParameter(format!("unknown noise category {other:?}"))),
    };
    Ok(normalise(x, CLIP_RMS))
}

/// A steady sinusoid at `freq` Hz with RMS [`CLIP_RMS`].
pub fn tone(freq: f64, phase: f64, len: usize) -> AudioBuffer {
    let amp = CLIP_RMS * 2f64.sqrt();
    AudioBuffer::mono(
        (0..len).map(|i| amp * (2.0 * PI * freq * i as f64 / RATE + phase).sin()).collect(),
        PROCESSING_RATE,
    )
}

/// Amplitude of the `freq` Hz component of `x`, from its projection onto a
/// complex exponential.
pub fn tone_amplitude(x: &AudioBuffer, freq: f64) -> f64 {
    let rate = x.sample_rate() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, &v) in x.samples().iter().enumerate() {
        let w = 2.0 * PI * freq * i as f64 / rate;
        re += v * w.cos();
        im += v * w.sin();
    }
    2.0 * re.hypot(im) / x.len().max(1) as f64
}

/// Band from which two-tone frequencies are drawn, and the minimum ratio
/// between the two.
pub const TWO_TONE_BAND: (f64, f64) = (250.0, 4000.0);
pub const TWO_TONE_MIN_RATIO: f64 = 1.5;

/// Two log-uniform frequencies in [`TWO_TONE_BAND`] at least
/// [`TWO_TONE_MIN_RATIO`] apart.
pub fn random_tone_pair(rng: &mut impl Rng) -> (f64, f64) {
    let (lo, hi) = (TWO_TONE_BAND.0.ln(), TWO_TONE_BAND.1.ln());
    loop {
        let a = rng.random_range(lo..hi).exp();
        let b = rng.random_range(lo..hi).exp();
        if a.max(b) / a.min(b) >= TWO_TONE_MIN_RATIO {
            return (a, b);
        }
    }
}

/// Selective tuple whose positive and negative noises are steady tones. Each
/// reference is a later stretch of its tone with a fresh phase offset.
pub fn two_tone_tuple(
    clean: &AudioBuffer,
    pos_hz: f64,
    neg_hz: f64,
    plus_snr: f64,
    minus_snr: f64,
    ref_len: usize,
    rng: &mut impl Rng,
) -> Result<MixTuple> {
    let n = clean.len();
    let segments = |hz: f64, rng: &mut dyn rand::RngCore| {
        let clip = tone(hz, rng.random_range(0.0..2.0 * PI), n + ref_len);
        NoiseSegments::from_clip(&format!("tone/{hz:.3}"), &clip, n, ref_len, 0, SegmentPolicy::Disjoint)
    };
    let pos = segments(pos_hz, rng)?;
    let neg = segments(neg_hz, rng)?;
    make_selective_tuple(clean, &pos, &neg, plus_snr, minus_snr)
}

/// Corpus size and seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub clean_utterances: usize,
    pub utterance_secs: f64,
    pub noises_per_category: usize,
    pub noise_secs: f64,
    /// Speakers per gender.
    pub speakers_per_gender: usize,
    pub utterances_per_speaker: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 2020,
            clean_utterances: 100,
            utterance_secs: 2.0,
            noises_per_category: 10,
            noise_secs: 3.0,
            speakers_per_gender: 3,
            utterances_per_speaker: 20,
        }
    }
}

/// Split ratios used for every role of the synthetic corpus.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

fn speaker_voices(per_gender: usize) -> Vec<(String, Gender, Voice)> {
    let mut voices = Vec::new();
    for (gender, lo, hi, fscale) in [(Gender::Male, 95.0, 145.0, 1.0), (Gender::Female, 190.0, 270.0, 1.17)] {
        for k in 0..per_gender {
            let frac = if per_gender > 1 { k as f64 / (per_gender - 1) as f64 } else { 0.5 };
            let voice = Voice {
                f0: lo + (hi - lo) * frac,
                formant_scale: fscale + 0.05 * frac,
                tilt_db: -6.0 - 2.0 * frac,
                vibrato_hz: 4.5 + frac,
            };
            voices.push((format!("{}_spk{}", gender.tag(), k + 1), gender, voice));
        }
    }
    voices
}

/// Assigns splits the same way a scanned directory would be split, with
/// noise families split one by one so every split sees every family.
fn assign_splits(ids: &[(String, Role, Option<String>)], seed: u64) -> Result<Vec<Split>> {
    let mut groups: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
    for (i, (_, role, family)) in ids.iter().enumerate() {
        let key = format!("{role}/{}", family.clone().unwrap_or_default());
        groups.entry(key).or_default().push(i);
    }
    let mut splits = vec![Split::Train; ids.len()];
    for members in groups.values() {
        let manifest = CorpusManifest {
            entries: members
                .iter()
                .map(|&i| ManifestEntry {
                    path: PathBuf::from(&ids[i].0),
                    duration: 1.0,
                    role: ids[i].1.clone(),
                    split: Split::Train,
                })
                .collect(),
            seed,
        };
        for e in split_manifest(&manifest, SPLIT_RATIOS, seed)?.entries {
            let i = members
                .iter()
                .copied()
                .find(|&i| Path::new(&ids[i].0) == e.path)
                .expect("entry came from this group");
            splits[i] = e.split;
        }
    }
    Ok(splits)
}

/// Generates the full corpus in memory.
pub fn generate(spec: &SynthSpec) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ids: Vec<(String, Role, Option<String>)> = Vec::new();
    let mut clean = Vec::new();
    for i in 0..spec.clean_utterances {
        let voice = Voice::random(&mut rng);
        clean.push(utterance(&voice, spec.utterance_secs, &mut rng));
        ids.push((format!("clean/utt{i:04}.wav"), Role::Clean, None));
    }
    let mut noises = Vec::new();
    for cat in NOISE_CATEGORIES {
        for i in 0..spec.noises_per_category {
            noises.push((cat, noise(cat, spec.noise_secs, &mut rng)?));
            ids.push((format!("noise/{cat}_{i:03}.wav"), Role::Noise, Some(cat.to_string())));
        }
    }
    let mut speech = Vec::new();
    for (name, gender, voice) in speaker_voices(spec.speakers_per_gender) {
        for i in 0..spec.utterances_per_speaker {
            speech.push((name.clone(), gender, utterance(&voice, spec.utterance_secs, &mut rng)));
            ids.push((format!("speakers/{name}/utt{i:03}.wav"), Role::Speaker(name.clone()), None));
        }
    }
    let splits = assign_splits(&ids, spec.seed)?;
    let mut split_iter = splits.into_iter();
    let mut id_iter = ids.into_iter();
    let mut corpus = Corpus::default();
    for audio in clean {
        let (id, _, _) = id_iter.next().expect("id per clip");
        corpus.clean.push(Clip {
            id,
            category: "speech".into(),
            split: split_iter.next().expect("split per clip"),
            audio,
        });
    }
    for (cat, audio) in noises {
        let (id, _, _) = id_iter.next().expect("id per clip");
        corpus.noise.push(Clip {
            id,
            category: cat.into(),
            split: split_iter.next().expect("split per clip"),
            audio,
        });
    }
    for (speaker, gender, audio) in speech {
        let (id, _, _) = id_iter.next().expect("id per clip");
        let split = split_iter.next().expect("split per clip");
        corpus.speakers.push((
            split,
            Utterance {
                id,
                speaker,
                gender: Some(gender),
                audio,
            },
        ));
    }
    Ok(corpus)
}

/// Writes `corpus` as float WAVs under `root` plus `manifest.tsv`, using
/// the same directory layout [`crate::harness::scan_corpus`] understands.
pub fn write_corpus(corpus: &Corpus, root: &Path) -> Result<CorpusManifest> {
    let mut entries = Vec::new();
    let mut write = |id: &str, audio: &AudioBuffer, role: Role, split: Split| -> Result<()> {
        let path = root.join(id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        audio::write_wav(&path, audio, BitDepth::Float32)?;
        entries.push(ManifestEntry {
            path,
            duration: audio.duration_secs(),
            role,
            split,
        });
        Ok(())
    };
    for c in &corpus.clean {
        write(&c.id, &c.audio, Role::Clean, c.split)?;
    }
    for c in &corpus.noise {
        write(&c.id, &c.audio, Role::Noise, c.split)?;
    }
    for (split, u) in &corpus.speakers {
        write(&u.id, &u.audio, Role::Speaker(u.speaker.clone()), *split)?;
    }
    let portable = CorpusManifest {
        entries: entries
            .iter()
            .map(|e| ManifestEntry {
                path: e.path.strip_prefix(root).unwrap_or(&e.path).to_path_buf(),
                ..e.clone()
            })
            .collect(),
        seed: 0,
    };
    portable.save(&root.join("manifest.tsv"))?;
    Ok(CorpusManifest { entries, seed: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{self, StftParams};

    fn tiny() -> SynthSpec {
        SynthSpec {
            seed: 9,
            clean_utterances: 10,
            utterance_secs: 1.0,
            noises_per_category: 10,
            noise_secs: 1.0,
            speakers_per_gender: 2,
            utterances_per_speaker: 10,
        }
    }

    #[test]
    fn generation_is_deterministic_and_normalised() {
        let a = generate(&tiny()).unwrap();
        let b = generate(&tiny()).unwrap();
        assert_eq!(a.clean[3].audio, b.clean[3].audio);
        assert_eq!(a.noise[17].audio, b.noise[17].audio);
        for c in a.clean.iter().chain(&a.noise) {
            assert!((c.audio.rms() - CLIP_RMS).abs() < 1e-9, "{}", c.id);
            assert!(c.audio.peak() < 1.0);
        }
    }

    #[test]
    fn every_split_sees_every_family_and_speaker() {
        let c = generate(&tiny()).unwrap();
        for split in [Split::Train, Split::Dev, Split::Test] {
            let cats: std::collections::BTreeSet<_> = c.noise_in(split).iter().map(|n| n.category.clone()).collect();
            assert_eq!(cats.len(), NOISE_CATEGORIES.len());
            assert_eq!(c.speakers_in(split).len(), 4);
        }
        assert_eq!(c.clean_in(Split::Train).len(), 8);
    }

    #[test]
    fn voiced_energy_sits_at_harmonics() {
        let voice = Voice {
            f0: 125.0,
            formant_scale: 1.0,
            tilt_db: -6.0,
            vibrato_hz: 5.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = vec![0.0; 8000];
        voiced_syllable(&mut x, &voice, &[730.0, 1090.0, 2440.0], 0.0, 0.0, 1.0);
        let spec = dsp::stft(&AudioBuffer::mono(x, 16_000), &StftParams::default()).unwrap();
        let p = spec.power();
        let mid = p.row(p.nrows() / 2);
        // bin 4 is 125 Hz, bin 6 lies between the first two harmonics
        assert!(mid[4] > 10.0 * mid[6]);
        let _ = utterance(&voice, 0.5, &mut rng);
    }

    #[test]
    fn tone_rms_and_unknown_family() {
        let t = tone(440.0, 0.0, 16_000);
        assert!((t.rms() - CLIP_RMS).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(noise("static", 1.0, &mut rng).is_err());
    }

    #[test]
    fn written_corpus_round_trips_through_scanning() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            clean_utterances: 3,
            noises_per_category: 1,
            speakers_per_gender: 1,
            utterances_per_speaker: 2,
            utterance_secs: 0.5,
            noise_secs: 0.5,
            seed: 3,
        };
        let corpus = generate(&spec).unwrap();
        let manifest = write_corpus(&corpus, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
        assert!(!text.contains(dir.path().to_str().unwrap()), "manifest paths are relative");
        let loaded = CorpusManifest::load(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(loaded.entries, manifest.entries);
        let back = Corpus::load(&loaded).unwrap();
        let err = back.clean[0]
            .audio
            .samples()
            .iter()
            .zip(corpus.clean[0].audio.samples())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-7);
        assert_eq!(back.speakers.len(), 4);
        assert_eq!(back.noise[0].category, "white");
    }
    #[test]
    fn tone_amplitude_reads_back_tones() {
        let x = tone(500.0, 0.7, 16_000);
        assert!((tone_amplitude(&x, 500.0) - CLIP_RMS * 2f64.sqrt()).abs() < 1e-9);
        assert!(tone_amplitude(&x, 1500.0) < 1e-9);
    }

    #[test]
    fn two_tone_tuples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (a, b) = random_tone_pair(&mut rng);
            assert!(a.max(b) / a.min(b) >= TWO_TONE_MIN_RATIO);
            assert!(a >= TWO_TONE_BAND.0 && b <= TWO_TONE_BAND.1 && b >= TWO_TONE_BAND.0 && a <= TWO_TONE_BAND.1);
        }
        let clean = utterance(&Voice::random(&mut rng), 1.0, &mut rng);
        let t = two_tone_tuple(&clean, 500.0, 1500.0, 0.0, 5.0, 8000, &mut rng).unwrap();
        assert!(t.reconstruction_error() < 1e-9);
        let plus = t.plus_rec.as_ref().unwrap();
        assert_eq!(plus.len(), 8000);
        assert!(tone_amplitude(plus, 500.0) > 10.0 * tone_amplitude(plus, 1500.0));
        assert!(tone_amplitude(&t.minus_rec, 1500.0) > 10.0 * tone_amplitude(&t.minus_rec, 500.0));
        // the negative tone sits 5 dB below the speech
        let neg = 20.0 * (clean.rms() / t.negative.rms()).log10();
        assert!((neg - 5.0).abs() < 1e-9);
    }
}
