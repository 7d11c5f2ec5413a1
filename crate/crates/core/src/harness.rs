//! Building training and evaluation mixtures at controlled SNRs, and
//! managing corpus directories and their deterministic splits.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{self, rms, AudioBuffer};
use crate::error::{Error, Result};

/// Length of the crossfade used when a noise is looped.
pub const LOOP_CROSSFADE_SECS: f64 = 0.010;

pub fn snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    20.0 * (rms(signal) / rms(noise)).log10()
}

/// Repeats `noise` until it is `len` samples long, crossfading each seam
/// over 10 ms, or truncates it.
pub fn loop_to_length(noise: &AudioBuffer, len: usize) -> AudioBuffer {
    let src = noise.samples();
    if src.len() >= len {
        return AudioBuffer::mono(src[..len].to_vec(), noise.sample_rate());
    }
    let fade = ((LOOP_CROSSFADE_SECS * noise.sample_rate() as f64).round() as usize).min(src.len() / 2);
    let mut out = Vec::with_capacity(len + src.len());
    out.extend_from_slice(src);
    while out.len() < len {
        let start = out.len() - fade;
        for i in 0..fade {
            let w = (i as f64 + 0.5) / fade as f64;
            out[start + i] = out[start + i] * (1.0 - w) + src[i] * w;
        }
        out.extend_from_slice(&src[fade..]);
    }
    out.truncate(len);
    AudioBuffer::mono(out, noise.sample_rate())
}

/// Adds `noise` (looped or truncated to the clean length) to `clean` so that
/// the full-utterance RMS ratio is `snr_db`. Returns the mixture and the gain
/// applied to the noise.
pub fn mix_at_snr(clean: &AudioBuffer, noise: &AudioBuffer, snr_db: f64) -> Result<(AudioBuffer, f64)> {
    let (noisy, gain, _) = mix_components(clean, noise, snr_db)?;
    Ok((noisy, gain))
}

fn mix_components(clean: &AudioBuffer, noise: &AudioBuffer, snr_db: f64) -> Result<(AudioBuffer, f64, AudioBuffer)> {
    if clean.is_empty() || noise.is_empty() {
        return Err(Error::EmptyInput("mixing inputs"));
    }
    let fitted = loop_to_length(noise, clean.len());
    let (rc, rn) = (clean.rms(), fitted.rms());
    if rc == 0.0 {
        return Err(Error::ZeroEnergy("clean signal"));
    }
    if rn == 0.0 {
        return Err(Error::ZeroEnergy("noise signal"));
    }
    let gain = rc / (rn * 10f64.powf(snr_db / 20.0));
    let scaled = fitted.scaled(gain);
    let noisy = add(clean, &scaled);
    Ok((noisy, gain, scaled))
}

fn add(a: &AudioBuffer, b: &AudioBuffer) -> AudioBuffer {
    AudioBuffer::mono(
        a.samples().iter().zip(b.samples()).map(|(x, y)| x + y).collect(),
        a.sample_rate(),
    )
}

/// Whether a reference recording is cut from the noise instance that is
/// mixed in, or from a disjoint region of the same source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SegmentPolicy {
    #[default]
    Disjoint,
    SameInstance,
}

/// A noise source split into the part that is mixed and the part handed
/// to the model as a reference.
#[derive(Debug, Clone)]
pub struct NoiseSegments {
    pub source_id: String,
    pub mix: AudioBuffer,
    pub reference: AudioBuffer,
    /// Sample ranges within the source clip.
    pub mix_range: (usize, usize),
    pub reference_range: (usize, usize),
}

impl NoiseSegments {
    /// Cuts a `mix_len` mixing segment starting near `offset` and a `ref_len`
    /// reference. Under [`SegmentPolicy::Disjoint`] the two never share a
    /// sample; clips too short for both are split in two and the mixing half
    /// is looped.
    pub fn from_clip(
        source_id: impl Into<String>,
        clip: &AudioBuffer,
        mix_len: usize,
        ref_len: usize,
        offset: usize,
        policy: SegmentPolicy,
    ) -> Result<Self> {
        let n = clip.len();
        if n < 2 || mix_len == 0 || ref_len == 0 {
            return Err(Error::TooShort(format!("noise clip of {n} samples")));
        }
        let (mix_range, reference_range) = match policy {
            SegmentPolicy::Disjoint if n >= mix_len + ref_len => {
                let s = offset % (n - mix_len - ref_len + 1);
                ((s, s + mix_len), (s + mix_len, s + mix_len + ref_len))
            }
            SegmentPolicy::Disjoint => {
                let r = ref_len.min(n / 2);
                ((0, n - r), (n - r, n))
            }
            SegmentPolicy::SameInstance => {
                let s = if n > mix_len { offset % (n - mix_len + 1) } else { 0 };
                let mix = (s, (s + mix_len).min(n));
                (mix, (s, (s + ref_len).min(mix.1)))
            }
        };
        let mix = loop_to_length(&clip.slice(mix_range.0, mix_range.1), mix_len);
        let reference = clip.slice(reference_range.0, reference_range.1);
        Ok(Self {
            source_id: source_id.into(),
            mix,
            reference,
            mix_range,
            reference_range,
        })
    }

    /// True when the mixing and reference ranges share no sample.
    pub fn disjoint(&self) -> bool {
        self.mix_range.1 <= self.reference_range.0 || self.reference_range.1 <= self.mix_range.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn tag(&self) -> &'static str {
        match self {
            Gender::Female => "f",
            Gender::Male => "m",
        }
    }
}

/// Gender pairing of a two-speaker mixture, order-insensitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GenderPair {
    FemaleFemale,
    MaleMale,
    FemaleMale,
}

impl GenderPair {
    pub fn of(a: Gender, b: Gender) -> Self {
        match (a, b) {
            (Gender::Female, Gender::Female) => GenderPair::FemaleFemale,
            (Gender::Male, Gender::Male) => GenderPair::MaleMale,
            _ => GenderPair::FemaleMale,
        }
    }
}

impl fmt::Display for GenderPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenderPair::FemaleFemale => "f+f",
            GenderPair::MaleMale => "m+m",
            GenderPair::FemaleMale => "f+m",
        })
    }
}

/// One utterance of a known speaker.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub gender: Option<Gender>,
    pub audio: AudioBuffer,
}

/// A complete example: model inputs, the desired output and the scaled
/// components that make up the mixture.
#[derive(Debug, Clone)]
pub struct MixTuple {
    pub noisy: AudioBuffer,
    /// `None` is the mute reference.
    pub plus_rec: Option<AudioBuffer>,
    pub minus_rec: AudioBuffer,
    pub target: AudioBuffer,
    pub plus_snr_db: Option<f64>,
    pub minus_snr_db: f64,
    /// Clean speech (or the target speaker).
    pub clean: AudioBuffer,
    /// Scaled positive noise as mixed in, if any.
    pub positive: Option<AudioBuffer>,
    /// Scaled negative noise (or interfering speaker) as mixed in.
    pub negative: AudioBuffer,
    pub gender_pair: Option<GenderPair>,
}

impl MixTuple {
    /// Everything in the mixture that is not the target.
    pub fn interference(&self) -> AudioBuffer {
        self.negative.clone()
    }

    /// Largest deviation of `clean + positive + negative` from `noisy`.
    pub fn reconstruction_error(&self) -> f64 {
        let mut sum = add(&self.clean, &self.negative);
        if let Some(p) = &self.positive {
            sum = add(&sum, p);
        }
        sum.samples()
            .iter()
            .zip(self.noisy.samples())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Plain denoising example: the positive reference is mute.
pub fn make_denoise_tuple(clean: &AudioBuffer, neg: &NoiseSegments, snr: f64) -> Result<MixTuple> {
    let (noisy, _, scaled) = mix_components(clean, &neg.mix, snr)?;
    Ok(MixTuple {
        noisy,
        plus_rec: None,
        minus_rec: neg.reference.clone(),
        target: clean.clone(),
        plus_snr_db: None,
        minus_snr_db: snr,
        clean: clean.clone(),
        positive: None,
        negative: scaled,
        gender_pair: None,
    })
}

/// Clean speech plus a positive noise to keep and a negative noise to
/// remove, each scaled against the clean RMS. A silent positive noise
/// degenerates to [`make_denoise_tuple`].
pub fn make_selective_tuple(
    clean: &AudioBuffer,
    pos: &NoiseSegments,
    neg: &NoiseSegments,
    plus_snr: f64,
    minus_snr: f64,
) -> Result<MixTuple> {
    if pos.source_id == neg.source_id {
        return Err(Error::InvalidParameter(format!(
            "positive and negative noise both come from {}",
            pos.source_id
        )));
    }
    if pos.mix.is_silent() {
        return make_denoise_tuple(clean, neg, minus_snr);
    }
    let (_, _, pos_scaled) = mix_components(clean, &pos.mix, plus_snr)?;
    let (_, _, neg_scaled) = mix_components(clean, &neg.mix, minus_snr)?;
    let target = add(clean, &pos_scaled);
    let noisy = add(&target, &neg_scaled);
    Ok(MixTuple {
        noisy,
        plus_rec: Some(pos.reference.clone()),
        minus_rec: neg.reference.clone(),
        target,
        plus_snr_db: Some(plus_snr),
        minus_snr_db: minus_snr,
        clean: clean.clone(),
        positive: Some(pos_scaled),
        negative: neg_scaled,
        gender_pair: None,
    })
}

/// Two-speaker mixture at 0 dB with `a` as the target. References must be
/// other utterances of the same two speakers.
pub fn make_separation_tuple(a: &Utterance, b: &Utterance, ref_a: &Utterance, ref_b: &Utterance) -> Result<MixTuple> {
    let mixed = [&a.id, &b.id];
    for r in [&ref_a.id, &ref_b.id] {
        if mixed.contains(&r) {
            return Err(Error::InvalidParameter(format!(
                "utterance {r} is used both in the mixture and as a reference"
            )));
        }
    }
    if a.id == b.id {
        return Err(Error::InvalidParameter(format!("utterance {} mixed with itself", a.id)));
    }
    if ref_a.audio.is_empty() || ref_b.audio.is_empty() {
        return Err(Error::EmptyInput("separation reference"));
    }
    let fitted = loop_to_length(&b.audio, a.audio.len());
    let gain = if a.audio.rms() > 0.0 && fitted.rms() > 0.0 {
        a.audio.rms() / fitted.rms()
    } else {
        1.0
    };
    let interference = fitted.scaled(gain);
    let noisy = add(&a.audio, &interference);
    let gender_pair = match (a.gender, b.gender) {
        (Some(x), Some(y)) => Some(GenderPair::of(x, y)),
        _ => None,
    };
    Ok(MixTuple {
        noisy,
        plus_rec: Some(ref_a.audio.clone()),
        minus_rec: ref_b.audio.clone(),
        target: a.audio.clone(),
        plus_snr_db: None,
        minus_snr_db: 0.0,
        clean: a.audio.clone(),
        positive: None,
        negative: interference,
        gender_pair,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Corpus(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Clean,
    Noise,
    Speaker(String),
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Clean => f.write_str("clean"),
            Role::Noise => f.write_str("noise"),
            Role::Speaker(id) => write!(f, "speaker:{id}"),
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Role::Clean),
            "noise" => Ok(Role::Noise),
            _ => s
                .strip_prefix("speaker:")
                .filter(|id| !id.is_empty())
                .map(|id| Role::Speaker(id.to_string()))
                .ok_or_else(|| Error::Corpus(format!("unknown role {s:?}"))),
        }
    }
}

/// What a scanned directory contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusKind {
    Clean,
    Noise,
    /// One subdirectory per speaker.
    Speakers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub duration: f64,
    pub role: Role,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let read = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in read {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if is_wav(&path) {
            out.push(path);
        }
    }
    Ok(())
}

pub fn is_wav(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Speaker gender from a directory name prefix `f_` or `m_`.
pub fn gender_from_speaker_id(id: &str) -> Option<Gender> {
    if id.starts_with("f_") {
        Some(Gender::Female)
    } else if id.starts_with("m_") {
        Some(Gender::Male)
    } else {
        None
    }
}

/// Recursively lists every WAV under `root`. All entries start in the
/// train split; see [`split_manifest`].
pub fn scan_corpus(root: &Path, kind: CorpusKind) -> Result<CorpusManifest> {
    if !root.is_dir() {
        return Err(Error::Corpus(format!("{} is not a readable directory", root.display())));
    }
    let mut paths = Vec::new();
    collect_wavs(root, &mut paths)?;
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Corpus(format!("no WAV files under {}", root.display())));
    }
    let mut entries = Vec::with_capacity(paths.len());
    for path in paths {
        let buffer = audio::read_wav(&path)?;
        let role = match kind {
            CorpusKind::Clean => Role::Clean,
            CorpusKind::Noise => Role::Noise,
            CorpusKind::Speakers => {
                let speaker = path
                    .parent()
                    .filter(|p| p != &root)
                    .and_then(|p| p.file_name())
                    .and_then(|n| n.to_str())
                    .ok_or_else(|| {
                        Error::Corpus(format!("{} is not inside a speaker directory", path.display()))
                    })?;
                Role::Speaker(speaker.to_string())
            }
        };
        entries.push(ManifestEntry {
            duration: buffer.duration_secs(),
            path,
            role,
            split: Split::Train,
        });
    }
    Ok(CorpusManifest { entries, seed: 0 })
}

/// Deterministically assigns splits. Entries are grouped by role (so every
/// speaker is split on its own), sorted by path, shuffled with `seed`, and
/// the first `round(n * train)` go to train, the next `round(n * dev)` to
/// dev and the rest to test.
pub fn split_manifest(manifest: &CorpusManifest, ratios: (f64, f64, f64), seed: u64) -> Result<CorpusManifest> {
    let (tr, dv, te) = ratios;
    if tr < 0.0 || dv < 0.0 || te < 0.0 || ((tr + dv + te) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    if manifest.entries.is_empty() {
        return Err(Error::Corpus("empty corpus".into()));
    }
    let mut groups: BTreeMap<Role, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in &manifest.entries {
        groups.entry(e.role.clone()).or_default().push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for (_, mut group) in groups {
        group.sort_by(|a, b| a.path.cmp(&b.path));
        group.shuffle(&mut rng);
        let n = group.len();
        let n_train = ((n as f64) * tr).round() as usize;
        let n_dev = (((n as f64) * dv).round() as usize).min(n - n_train.min(n));
        for (i, e) in group.into_iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
            entries.push(ManifestEntry { split, ..e.clone() });
        }
    }
    entries.sort_by(|a, b| (a.split, &a.role, &a.path).cmp(&(b.split, &b.role, &b.path)));
    Ok(CorpusManifest { entries, seed })
}

impl CorpusManifest {
    pub fn merge(mut self, other: CorpusManifest) -> Self {
        self.entries.extend(other.entries);
        self
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// `<split>\t<role>\t<path>\t<duration>` per line.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.split.as_str(), e.role, e.path.display(), e.duration))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Corpus(format!("manifest line {}: expected 4 fields", lineno + 1)));
            }
            let duration: f64 = fields[3]
                .parse()
                .map_err(|_| Error::Corpus(format!("manifest line {}: bad duration", lineno + 1)))?;
            if !(duration > 0.0) {
                return Err(Error::Corpus(format!("manifest line {}: duration must be positive", lineno + 1)));
            }
            entries.push(ManifestEntry {
                split: fields[0].parse()?,
                role: fields[1].parse()?,
                path: PathBuf::from(fields[2]),
                duration,
            });
        }
        Ok(Self { entries, seed: 0 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Relative entry paths are taken relative to the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut manifest.entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        Ok(manifest)
    }
}

/// A noise or clean clip held in memory at the processing rate.
#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub category: String,
    pub split: Split,
    pub audio: AudioBuffer,
}

/// Loaded corpus material, ready for tuple generation.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub clean: Vec<Clip>,
    pub noise: Vec<Clip>,
    pub speakers: Vec<(Split, Utterance)>,
}

impl Corpus {
    /// Reads every manifest entry and converts it to 16 kHz mono. Noise
    /// categories are taken from the file-name prefix before the first `_`.
    pub fn load(manifest: &CorpusManifest) -> Result<Self> {
        let mut corpus = Corpus::default();
        for e in &manifest.entries {
            let audio = audio::to_processing_format(&audio::read_wav(&e.path)?)?;
            let id = e.path.display().to_string();
            match &e.role {
                Role::Clean | Role::Noise => {
                    let stem = e.path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
                    let category = stem.split('_').next().unwrap_or(stem).to_string();
                    let clip = Clip {
                        id,
                        category,
                        split: e.split,
                        audio,
                    };
                    if e.role == Role::Clean {
                        corpus.clean.push(clip);
                    } else {
                        corpus.noise.push(clip);
                    }
                }
                Role::Speaker(s) => corpus.speakers.push((
                    e.split,
                    Utterance {
                        id,
                        speaker: s.clone(),
                        gender: gender_from_speaker_id(s),
                        audio,
                    },
                )),
            }
        }
        Ok(corpus)
    }

    pub fn clean_in(&self, split: Split) -> Vec<&Clip> {
        self.clean.iter().filter(|c| c.split == split).collect()
    }

    pub fn noise_in(&self, split: Split) -> Vec<&Clip> {
        self.noise.iter().filter(|c| c.split == split).collect()
    }

    /// Utterances of `split`, grouped by speaker (sorted by speaker id).
    pub fn speakers_in(&self, split: Split) -> Vec<(String, Vec<&Utterance>)> {
        let mut map: BTreeMap<String, Vec<&Utterance>> = BTreeMap::new();
        for (s, u) in &self.speakers {
            if *s == split {
                map.entry(u.speaker.clone()).or_default().push(u);
            }
        }
        map.into_iter().collect()
    }
}
