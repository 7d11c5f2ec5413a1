//! Training, checkpointing and grid evaluation.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioBuffer;
use crate::dsp::{StftParams, Window};
use crate::error::{Error, Result};
use crate::harness::{
    self, make_denoise_tuple, make_selective_tuple, make_separation_tuple, Clip, Corpus, CorpusKind,
    CorpusManifest, MixTuple, NoiseSegments, SegmentPolicy, Split, Utterance,
};
use crate::metrics::{aggregate_report, GroupKey, MetricReport, PairScorer};
use crate::model::{ModelConfig, PmAuxModel, Reference, TaskKind, TrainingExample};
use crate::nn::{AdamConfig, AdamState, ParamStore};
use crate::synth::{self, SynthSpec};

/// Where training and evaluation material comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource {
    /// The generated desk corpus.
    Synthetic(SynthSpec),
    /// A manifest file with splits already assigned.
    Manifest(PathBuf),
    /// Directories scanned at start-up and split with `split_seed`.
    Directories {
        clean: Option<PathBuf>,
        noise: Option<PathBuf>,
        speakers: Option<PathBuf>,
        split_seed: u64,
    },
}

impl CorpusSource {
    pub fn load(&self) -> Result<Corpus> {
        match self {
            CorpusSource::Synthetic(spec) => synth::generate(spec),
            CorpusSource::Manifest(path) => Corpus::load(&CorpusManifest::load(path)?),
            CorpusSource::Directories {
                clean,
                noise,
                speakers,
                split_seed,
            } => {
                let mut manifest = CorpusManifest::default();
                for (dir, kind) in [
                    (clean, CorpusKind::Clean),
                    (noise, CorpusKind::Noise),
                    (speakers, CorpusKind::Speakers),
                ] {
                    if let Some(dir) = dir {
                        manifest = manifest.merge(harness::scan_corpus(dir, kind)?);
                    }
                }
                Corpus::load(&harness::split_manifest(&manifest, synth::SPLIT_RATIOS, *split_seed)?)
            }
        }
    }

    fn check_paths(&self) -> Result<()> {
        let missing = |p: &Path| Error::Corpus(format!("{} does not exist", p.display()));
        match self {
            CorpusSource::Synthetic(_) => Ok(()),
            CorpusSource::Manifest(p) => p.exists().then_some(()).ok_or_else(|| missing(p)),
            CorpusSource::Directories {
                clean,
                noise,
                speakers,
                ..
            } => {
                let dirs: Vec<&PathBuf> = [clean, noise, speakers].into_iter().flatten().collect();
                if dirs.is_empty() {
                    return Err(Error::Config("no corpus directory given".into()));
                }
                for d in dirs {
                    if !d.is_dir() {
                        return Err(missing(d));
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// SNRs for plain denoising tuples.
    pub snr_grid: Vec<f64>,
    pub plus_snr_grid: Vec<f64>,
    pub minus_snr_grid: Vec<f64>,
    /// Share of selective tuples when training a selective denoiser.
    pub selective_fraction: f64,
    pub crop_secs: f64,
    pub reference_secs: f64,
    pub segment_policy: SegmentPolicy,
    pub corpus: CorpusSource,
    pub checkpoint: Option<PathBuf>,
    /// Steps between checkpoint writes; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub log: Option<PathBuf>,
    /// Evaluation tuples per grid cell.
    pub eval_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Denoiser,
            model: ModelConfig::default(),
            steps: 1000,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 1,
            snr_grid: vec![0.0, 3.0, 5.0, 10.0, 15.0],
            plus_snr_grid: vec![0.0, 3.0, 5.0, 8.0],
            minus_snr_grid: vec![0.0, 3.0, 5.0, 8.0],
            selective_fraction: 0.5,
            crop_secs: 1.0,
            reference_secs: 1.0,
            segment_policy: SegmentPolicy::Disjoint,
            corpus: CorpusSource::Synthetic(SynthSpec::default()),
            checkpoint: None,
            checkpoint_interval: 0,
            log: None,
            eval_pairs: 10,
        }
    }
}

/// The small configuration used for desk-scale experiments on one CPU core.
pub fn desk_config(task: TaskKind) -> TrainConfig {
    TrainConfig {
        task,
        model: ModelConfig {
            hidden: 128,
            blocks: 2,
            context: 3,
            embed: 32,
            stft: StftParams::default(),
        },
        steps: 600,
        batch_size: 8,
        adam: AdamConfig {
            lr: 3e-4,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn parse_grid(key: &str, v: &str) -> Result<Vec<f64>> {
    let grid: Vec<f64> = v
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("{key}: expected comma-separated numbers, got {v:?}")))?;
    if grid.is_empty() || grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config(format!("{key}: grid must be nonempty and finite")));
    }
    Ok(grid)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Relative paths are
    /// resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut synth = SynthSpec::default();
        let mut manifest = None;
        let (mut clean, mut noise, mut speakers) = (None, None, None);
        let mut split_seed = 0;
        let path = |v: &str| base.join(v);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            match key {
                "task" => cfg.task = value.parse()?,
                "steps" => cfg.steps = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "lr" => cfg.adam.lr = parse_num(key, value)?,
                "beta1" => cfg.adam.beta1 = parse_num(key, value)?,
                "beta2" => cfg.adam.beta2 = parse_num(key, value)?,
                "eps" => cfg.adam.eps = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "snr_grid" => cfg.snr_grid = parse_grid(key, value)?,
                "plus_snr_grid" => cfg.plus_snr_grid = parse_grid(key, value)?,
                "minus_snr_grid" => cfg.minus_snr_grid = parse_grid(key, value)?,
                "selective_fraction" => cfg.selective_fraction = parse_num(key, value)?,
                "crop_secs" => cfg.crop_secs = parse_num(key, value)?,
                "reference_secs" => cfg.reference_secs = parse_num(key, value)?,
                "segment_policy" => {
                    cfg.segment_policy = match value {
                        "disjoint" => SegmentPolicy::Disjoint,
                        "same_instance" => SegmentPolicy::SameInstance,
                        _ => return Err(Error::Config(format!("segment_policy: unknown value {value:?}"))),
                    }
                }
                "hidden" => cfg.model.hidden = parse_num(key, value)?,
                "blocks" => cfg.model.blocks = parse_num(key, value)?,
                "context" => cfg.model.context = parse_num(key, value)?,
                "embed" => cfg.model.embed = parse_num(key, value)?,
                "fft_size" => cfg.model.stft.fft_size = parse_num(key, value)?,
                "hop" => cfg.model.stft.hop = parse_num(key, value)?,
                "synthetic_seed" => synth.seed = parse_num(key, value)?,
                "manifest" => manifest = Some(path(value)),
                "clean_dir" => clean = Some(path(value)),
                "noise_dir" => noise = Some(path(value)),
                "speaker_dir" => speakers = Some(path(value)),
                "split_seed" => split_seed = parse_num(key, value)?,
                "checkpoint" => cfg.checkpoint = Some(path(value)),
                "checkpoint_interval" => cfg.checkpoint_interval = parse_num(key, value)?,
                "log" => cfg.log = Some(path(value)),
                "eval_pairs" => cfg.eval_pairs = parse_num(key, value)?,
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        cfg.corpus = match (manifest, clean.is_some() || noise.is_some() || speakers.is_some()) {
            (Some(_), true) => {
                return Err(Error::Config("give either manifest or corpus directories, not both".into()))
            }
            (Some(m), false) => CorpusSource::Manifest(m),
            (None, true) => CorpusSource::Directories {
                clean,
                noise,
                speakers,
                split_seed,
            },
            (None, false) => CorpusSource::Synthetic(synth),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.adam.lr >= 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        if self.snr_grid.is_empty() || self.plus_snr_grid.is_empty() || self.minus_snr_grid.is_empty() {
            return Err(Error::Config("SNR grids must be nonempty".into()));
        }
        if !(0.0..=1.0).contains(&self.selective_fraction) {
            return Err(Error::Config("selective_fraction must lie in [0, 1]".into()));
        }
        if !(self.crop_secs > 0.0) || !(self.reference_secs > 0.0) {
            return Err(Error::Config("crop_secs and reference_secs must be positive".into()));
        }
        self.corpus.check_paths()
    }
}

fn secs_to_samples(secs: f64) -> usize {
    (secs * crate::audio::PROCESSING_RATE as f64).round() as usize
}

fn pick<'a, T>(items: &'a [T], rng: &mut impl Rng) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn random_crop(buf: &AudioBuffer, len: usize, rng: &mut impl Rng) -> AudioBuffer {
    if buf.len() <= len {
        return buf.clone();
    }
    let start = rng.random_range(0..=buf.len() - len);
    buf.slice(start, start + len)
}

/// Draws one training tuple for `task` from the train split.
pub fn sample_tuple(task: TaskKind, corpus: &Corpus, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<MixTuple> {
    let crop = secs_to_samples(cfg.crop_secs);
    let ref_len = secs_to_samples(cfg.reference_secs);
    match task {
        TaskKind::Denoiser | TaskKind::SelectiveDenoiser => {
            let clean = corpus.clean_in(Split::Train);
            let noise = corpus.noise_in(Split::Train);
            if clean.is_empty() || noise.is_empty() {
                return Err(Error::Corpus("train split needs clean and noise clips".into()));
            }
            let selective = task == TaskKind::SelectiveDenoiser
                && noise.len() > 1
                && rng.random_bool(cfg.selective_fraction);
            for _ in 0..16 {
                let c = random_crop(&pick(&clean, rng).audio, crop, rng);
                if c.is_silent() {
                    continue;
                }
                let segments = |clip: &Clip, rng: &mut dyn rand::RngCore| {
                    let offset = rng.next_u32() as usize;
                    NoiseSegments::from_clip(&clip.id, &clip.audio, c.len(), ref_len, offset, cfg.segment_policy)
                };
                let neg_clip = *pick(&noise, rng);
                let neg = segments(neg_clip, rng)?;
                if neg.mix.is_silent() {
                    continue;
                }
                if selective {
                    let pos_clip = loop {
                        let p = *pick(&noise, rng);
                        if p.id != neg_clip.id {
                            break p;
                        }
                    };
                    let pos = segments(pos_clip, rng)?;
                    let (ps, ms) = (*pick(&cfg.plus_snr_grid, rng), *pick(&cfg.minus_snr_grid, rng));
                    return make_selective_tuple(&c, &pos, &neg, ps, ms);
                }
                return make_denoise_tuple(&c, &neg, *pick(&cfg.snr_grid, rng));
            }
            Err(Error::Corpus("could not draw a non-silent training crop".into()))
        }
        TaskKind::Separator => {
            let speakers: Vec<(String, Vec<&Utterance>)> = corpus
                .speakers_in(Split::Train)
                .into_iter()
                .filter(|(_, u)| u.len() >= 2)
                .collect();
            if speakers.len() < 2 {
                return Err(Error::Corpus(
                    "separator training needs two speakers with two train utterances each".into(),
                ));
            }
            let ia = rng.random_range(0..speakers.len());
            let ib = (ia + rng.random_range(1..speakers.len())) % speakers.len();
            let draw_two = |utts: &[&Utterance], rng: &mut ChaCha8Rng| {
                let i = rng.random_range(0..utts.len());
                let j = (i + rng.random_range(1..utts.len())) % utts.len();
                (utts[i].clone(), utts[j].clone())
            };
            // a dedicated stream keeps the two draws independent of crop sizes
            let mut local = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let (mut a, mut ra) = draw_two(&speakers[ia].1, &mut local);
            let (mut b, mut rb) = draw_two(&speakers[ib].1, &mut local);
            a.audio = random_crop(&a.audio, crop, &mut local);
            b.audio = random_crop(&b.audio, crop, &mut local);
            ra.audio = random_crop(&ra.audio, ref_len, &mut local);
            rb.audio = random_crop(&rb.audio, ref_len, &mut local);
            make_separation_tuple(&a, &b, &ra, &rb)
        }
    }
}

/// Network inputs and targets for one tuple.
pub fn build_example(model: &PmAuxModel<f32>, tuple: &MixTuple) -> Result<TrainingExample<f32>> {
    let plus = tuple.plus_rec.clone().unwrap_or_else(Reference::mute_recording);
    model.training_example(&tuple.noisy, &tuple.target, &plus, &tuple.minus_rec)
}

/// State of the data-sampling generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub const CHECKPOINT_MAGIC: &str = "NHANS-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A self-describing snapshot of a model and, optionally, its optimizer.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub task: TaskKind,
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub step: u64,
    pub rng: Option<RngState>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::TruncatedCheckpoint("header ends early".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::MalformedCheckpoint("header is not UTF-8".into()))
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| Error::MalformedCheckpoint(format!("expected {key}, found {line:?}")))
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        self.field(key)?
            .parse()
            .map_err(|_| Error::MalformedCheckpoint(format!("bad {key}")))
    }
}

impl Checkpoint {
    pub fn from_model(model: &PmAuxModel<f32>) -> Self {
        Self {
            task: model.task,
            config: model.config,
            params: model.params.clone(),
            optimizer: None,
            step: 0,
            rng: None,
        }
    }

    pub fn into_model(self) -> Result<PmAuxModel<f32>> {
        PmAuxModel::from_params(self.config, self.task, self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut h = String::new();
        let _ = writeln!(h, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(h, "version {CHECKPOINT_VERSION}");
        let _ = writeln!(h, "task {}", self.task);
        let _ = writeln!(h, "hidden {}", c.hidden);
        let _ = writeln!(h, "blocks {}", c.blocks);
        let _ = writeln!(h, "context {}", c.context);
        let _ = writeln!(h, "embed {}", c.embed);
        let _ = writeln!(h, "fft_size {}", c.stft.fft_size);
        let _ = writeln!(h, "hop {}", c.stft.hop);
        let _ = writeln!(h, "window hann");
        let _ = writeln!(h, "sample_rate {}", c.stft.sample_rate);
        let _ = writeln!(h, "step {}", self.step);
        match &self.rng {
            Some(r) => {
                let _ = writeln!(h, "rng {} {} {}", hex(&r.seed), r.stream, r.word_pos);
            }
            None => {
                let _ = writeln!(h, "rng none");
            }
        }
        match &self.optimizer {
            Some(o) => {
                let a = o.config;
                let _ = writeln!(h, "adam {:?} {:?} {:?} {:?} {}", a.lr, a.beta1, a.beta2, a.eps, o.step);
            }
            None => {
                let _ = writeln!(h, "adam none");
            }
        }
        let mut payload: Vec<&Array2<f32>> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        for (name, t) in self.params.iter() {
            names.push(name.to_string());
            payload.push(&t.value);
        }
        if let Some(o) = &self.optimizer {
            for (prefix, moments) in [("adam.m/", &o.first), ("adam.v/", &o.second)] {
                for ((name, _), m) in self.params.iter().zip(moments) {
                    names.push(format!("{prefix}{name}"));
                    payload.push(m);
                }
            }
        }
        let _ = writeln!(h, "tensors {}", names.len());
        for (name, t) in names.iter().zip(&payload) {
            let _ = writeln!(h, "tensor {name} {} {}", t.nrows(), t.ncols());
        }
        let _ = writeln!(h, "end");
        let mut bytes = h.into_bytes();
        for t in payload {
            for v in t.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut h = HeaderReader { bytes, pos: 0 };
        let magic = h.line().map_err(|_| Error::CheckpointVersion("missing magic line".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointVersion(format!("bad magic {magic:?}")));
        }
        let bad = |what: &str| Error::MalformedCheckpoint(format!("bad {what}"));
        let version: u32 = h.parsed("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(format!(
                "file is version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let task: TaskKind = h.field("task")?.parse().map_err(|_| bad("task"))?;
        let hidden = h.parsed("hidden")?;
        let blocks = h.parsed("blocks")?;
        let context = h.parsed("context")?;
        let embed = h.parsed("embed")?;
        let fft_size = h.parsed("fft_size")?;
        let hop = h.parsed("hop")?;
        if h.field("window")? != "hann" {
            return Err(bad("window"));
        }
        let sample_rate: u32 = h.parsed("sample_rate")?;
        let step: u64 = h.parsed("step")?;
        let rng_line = h.field("rng")?;
        let rng = if rng_line == "none" {
            None
        } else {
            let parts: Vec<&str> = rng_line.split(' ').collect();
            if parts.len() != 3 {
                return Err(bad("rng"));
            }
            Some(RngState {
                seed: unhex(parts[0]).ok_or_else(|| bad("rng seed"))?,
                stream: parts[1].parse().map_err(|_| bad("rng stream"))?,
                word_pos: parts[2].parse().map_err(|_| bad("rng position"))?,
            })
        };
        let adam_line = h.field("adam")?;
        let adam = if adam_line == "none" {
            None
        } else {
            let p: Vec<&str> = adam_line.split(' ').collect();
            if p.len() != 5 {
                return Err(bad("adam"));
            }
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad("adam"));
            Some((
                AdamConfig {
                    lr: f(p[0])?,
                    beta1: f(p[1])?,
                    beta2: f(p[2])?,
                    eps: f(p[3])?,
                },
                p[4].parse::<u64>().map_err(|_| bad("adam step"))?,
            ))
        };
        let count: usize = h.parsed("tensors")?;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let line = h.field("tensor")?;
            let p: Vec<&str> = line.split(' ').collect();
            if p.len() != 3 {
                return Err(bad("tensor line"));
            }
            let r: usize = p[1].parse().map_err(|_| bad("tensor rows"))?;
            let c: usize = p[2].parse().map_err(|_| bad("tensor cols"))?;
            shapes.push((p[0].to_string(), r, c));
        }
        if h.line()? != "end" {
            return Err(bad("header terminator"));
        }
        let pos = h.pos;
        let need: usize = shapes.iter().map(|(_, r, c)| r * c * 4).sum();
        let payload = &bytes[pos..];
        if payload.len() < need {
            return Err(Error::TruncatedCheckpoint(format!(
                "payload has {} bytes, header describes {need}",
                payload.len()
            )));
        }
        if payload.len() > need {
            return Err(Error::ShapeMismatch(format!(
                "payload has {} bytes, header describes {need}",
                payload.len()
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(count);
        for (name, r, c) in shapes {
            let vals: Vec<f32> = payload[offset..offset + r * c * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            offset += r * c * 4;
            tensors.push((name, Array2::from_shape_vec((r, c), vals).expect("sized from header")));
        }

        let mut params = ParamStore::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (name, value) in tensors {
            if let Some(base) = name.strip_prefix("adam.m/") {
                first.push((base.to_string(), value));
            } else if let Some(base) = name.strip_prefix("adam.v/") {
                second.push((base.to_string(), value));
            } else {
                params.add(name, value);
            }
        }
        let optimizer = match adam {
            None if first.is_empty() && second.is_empty() => None,
            None => return Err(Error::MalformedCheckpoint("optimizer moments without adam header".into())),
            Some((config, opt_step)) => {
                let matches = |ms: &[(String, Array2<f32>)]| {
                    ms.len() == params.len()
                        && ms
                            .iter()
                            .zip(params.iter())
                            .all(|((n, m), (pn, t))| n == pn && m.dim() == t.value.dim())
                };
                if !matches(&first) || !matches(&second) {
                    return Err(Error::ShapeMismatch("optimizer moments do not match the parameters".into()));
                }
                Some(AdamState {
                    config,
                    step: opt_step,
                    first: first.into_iter().map(|(_, m)| m).collect(),
                    second: second.into_iter().map(|(_, v)| v).collect(),
                })
            }
        };
        let config = ModelConfig {
            hidden,
            blocks,
            context,
            embed,
            stft: StftParams {
                fft_size,
                hop,
                window: Window::Hann,
                sample_rate,
            },
        };
        // rejects inconsistent shapes before anyone uses the parameters
        PmAuxModel::from_params(config, task, params.clone())?;
        Ok(Self {
            task,
            config,
            params,
            optimizer,
            step,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// `(step, mean batch loss)` for every step, starting at 1.
    pub losses: Vec<(usize, f64)>,
}

/// Runs `config.steps` Adam steps on batches drawn from `corpus`.
/// Single-threaded and fully determined by `config` and `corpus`.
pub fn train(config: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    train_with(config, |rng| sample_tuple(config.task, corpus, config, rng))
}

/// Like [`train`] with a custom tuple source. The sampler receives the
/// data generator, whose state is saved in checkpoints.
pub fn train_with<S>(config: &TrainConfig, mut sampler: S) -> Result<TrainOutcome>
where
    S: FnMut(&mut ChaCha8Rng) -> Result<MixTuple>,
{
    config.validate()?;
    let mut model = PmAuxModel::<f32>::new(config.model, config.task, config.seed)?;
    let mut adam = AdamState::new(config.adam, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut log = match &config.log {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let weight = 1.0 / config.batch_size as f32;
    let mut losses = Vec::with_capacity(config.steps);
    let snapshot = |model: &PmAuxModel<f32>, adam: &AdamState<f32>, step: usize, rng: &ChaCha8Rng| Checkpoint {
        task: config.task,
        config: config.model,
        params: model.params.clone(),
        optimizer: Some(adam.clone()),
        step: step as u64,
        rng: Some(RngState::capture(rng)),
    };
    for step in 1..=config.steps {
        let mut total = 0.0f64;
        for _ in 0..config.batch_size {
            let tuple = sampler(&mut rng)?;
            let example = build_example(&model, &tuple)?;
            let (g, loss) = model.loss_graph(&example, weight)?;
            total += g.value(loss)[[0, 0]] as f64;
            g.backward(loss, &mut model.params)?;
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: total });
        }
        adam.step(&mut model.params)?;
        losses.push((step, total));
        if let Some(f) = log.as_mut() {
            writeln!(f, "{step}\t{total}").map_err(|e| Error::io(config.log.as_ref().expect("log path"), e))?;
        }
        if let Some(path) = &config.checkpoint {
            if config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 && step < config.steps {
                snapshot(&model, &adam, step, &rng).save(path)?;
            }
        }
    }
    let checkpoint = snapshot(&model, &adam, config.steps, &rng);
    if let Some(path) = &config.checkpoint {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome { checkpoint, losses })
}

/// Which test tuples to build.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub task: TaskKind,
    pub snr_grid: Vec<f64>,
    pub plus_snr_grid: Vec<f64>,
    pub minus_snr_grid: Vec<f64>,
    /// Upper bound on tuples per grid cell.
    pub pairs_per_cell: usize,
    pub reference_secs: f64,
    pub split: Split,
}

impl EvalConfig {
    /// Grids and pair count of a training config, on the test split.
    pub fn from_train_config(cfg: &TrainConfig) -> Self {
        Self {
            task: cfg.task,
            snr_grid: cfg.snr_grid.clone(),
            plus_snr_grid: cfg.plus_snr_grid.clone(),
            minus_snr_grid: cfg.minus_snr_grid.clone(),
            pairs_per_cell: cfg.eval_pairs,
            reference_secs: cfg.reference_secs,
            split: Split::Test,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Denoiser,
            snr_grid: vec![0.0, 3.0, 5.0, 10.0, 15.0],
            plus_snr_grid: vec![0.0, 3.0, 5.0, 8.0],
            minus_snr_grid: vec![0.0, 3.0, 5.0, 8.0],
            pairs_per_cell: 10,
            reference_secs: 1.0,
            split: Split::Test,
        }
    }
}

/// Deterministic evaluation tuples, tagged with their report group.
pub fn evaluation_tuples(corpus: &Corpus, cfg: &EvalConfig) -> Result<Vec<(GroupKey, MixTuple)>> {
    let ref_len = secs_to_samples(cfg.reference_secs);
    let mut out = Vec::new();
    match cfg.task {
        TaskKind::Denoiser | TaskKind::SelectiveDenoiser => {
            let clean = corpus.clean_in(cfg.split);
            let noise = corpus.noise_in(cfg.split);
            if clean.is_empty() || noise.is_empty() {
                return Err(Error::Corpus(format!("{} split lacks clean or noise clips", cfg.split.as_str())));
            }
            let n = cfg.pairs_per_cell.min(clean.len().max(noise.len()));
            let seg = |clip: &Clip, len: usize| {
                NoiseSegments::from_clip(&clip.id, &clip.audio, len, ref_len, 0, SegmentPolicy::Disjoint)
            };
            if cfg.task == TaskKind::Denoiser {
                for &snr in &cfg.snr_grid {
                    for i in 0..n {
                        let c = &clean[i % clean.len()].audio;
                        let neg = seg(noise[i % noise.len()], c.len())?;
                        out.push((GroupKey::Snr(snr), make_denoise_tuple(c, &neg, snr)?));
                    }
                }
            } else {
                if noise.len() < 2 {
                    return Err(Error::Corpus("selective evaluation needs two noise clips".into()));
                }
                for &ps in &cfg.plus_snr_grid {
                    for &ms in &cfg.minus_snr_grid {
                        for i in 0..n {
                            let c = &clean[i % clean.len()].audio;
                            let pos_clip = noise[i % noise.len()];
                            // prefer a negative noise of another family
                            let neg_clip = (1..noise.len())
                                .map(|k| noise[(i + k) % noise.len()])
                                .find(|n| n.category != pos_clip.category)
                                .unwrap_or(noise[(i + 1) % noise.len()]);
                            let t = make_selective_tuple(c, &seg(pos_clip, c.len())?, &seg(neg_clip, c.len())?, ps, ms)?;
                            out.push((GroupKey::Cell(ps, ms), t));
                        }
                    }
                }
            }
        }
        TaskKind::Separator => {
            let speakers = corpus.speakers_in(cfg.split);
            let usable: Vec<&(String, Vec<&Utterance>)> = speakers.iter().filter(|(_, u)| u.len() >= 2).collect();
            if usable.len() < 2 {
                return Err(Error::Corpus("separation evaluation needs two speakers with two utterances".into()));
            }
            for (ia, (_, ua)) in usable.iter().enumerate() {
                for (ib, (_, ub)) in usable.iter().enumerate() {
                    if ia == ib {
                        continue;
                    }
                    let mut ra = ua[1].clone();
                    let mut rb = ub[1].clone();
                    ra.audio = ra.audio.fit_to(ref_len.min(ra.audio.len()));
                    rb.audio = rb.audio.fit_to(ref_len.min(rb.audio.len()));
                    let t = make_separation_tuple(ua[0], ub[0], &ra, &rb)?;
                    let key = t.gender_pair.map(GroupKey::Gender).unwrap_or(GroupKey::Label("all".into()));
                    out.push((key, t));
                }
            }
        }
    }
    Ok(out)
}

/// Enhanced-output and unprocessed-input reports over the same tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub enhanced: MetricReport,
    pub baseline: MetricReport,
}

impl Evaluation {
    pub fn render(&self) -> String {
        format!(
            "enhanced\n{}\nunprocessed\n{}",
            self.enhanced.to_table(),
            self.baseline.to_table()
        )
    }

    /// CSV rows for both reports; the group column is prefixed with
    /// `enhanced:` or `baseline:`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,metric,value\n");
        for (tag, r) in [("enhanced", &self.enhanced), ("baseline", &self.baseline)] {
            for line in r.to_csv().lines().skip(1) {
                let _ = writeln!(out, "{tag}:{line}");
            }
        }
        out
    }
}

/// Scores `enhancer` and the unprocessed mixture on every tuple.
pub fn evaluate_with<F>(tuples: &[(GroupKey, MixTuple)], mut enhancer: F) -> Result<Evaluation>
where
    F: FnMut(&MixTuple) -> Result<AudioBuffer>,
{
    let mut enhanced = Vec::with_capacity(tuples.len());
    let mut baseline = Vec::with_capacity(tuples.len());
    for (key, t) in tuples {
        let interference = t.interference();
        let mut scorer = PairScorer::new(&t.target, Some(&interference))?;
        baseline.push((key.clone(), scorer.score(&t.noisy)?));
        let out = enhancer(t)?;
        enhanced.push((key.clone(), scorer.score(&out)?));
    }
    Ok(Evaluation {
        enhanced: aggregate_report(&enhanced)?,
        baseline: aggregate_report(&baseline)?,
    })
}

/// Runs the model's task on every tuple.
pub fn run_on_tuple(model: &PmAuxModel<f32>, task: TaskKind, t: &MixTuple) -> Result<AudioBuffer> {
    let plus = match &t.plus_rec {
        Some(p) => Reference::from_audio(p.clone()),
        None => Reference::Mute,
    };
    model.run_task(task, &t.noisy, &plus, &t.minus_rec)
}

/// Evaluates a checkpoint on the test tuples for `cfg.task`.
pub fn evaluate(checkpoint: &Checkpoint, corpus: &Corpus, cfg: &EvalConfig) -> Result<Evaluation> {
    if !cfg.task.compatible_with(checkpoint.task) {
        return Err(Error::TaskMismatch(format!(
            "cannot evaluate {} with a {} checkpoint",
            cfg.task, checkpoint.task
        )));
    }
    let model = checkpoint.clone().into_model()?;
    let tuples = evaluation_tuples(corpus, cfg)?;
    evaluate_with(&tuples, |t| run_on_tuple(&model, cfg.task, t))
}
