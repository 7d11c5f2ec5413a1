//! The reference-conditioned enhancement model.
//!
//! Two reference encoders turn a positive recording (content to keep) and a
//! negative recording (content to remove) into fixed-size embeddings. The
//! mask estimator sees a window of noisy log-magnitude frames and both
//! embeddings in every residual block, and emits a ratio mask that is applied
//! to the noisy magnitude; the noisy phase is reused for resynthesis.

use ndarray::{Array2, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{self, AudioBuffer, PROCESSING_RATE};
use crate::dsp::{self, reflect_index, LogMagSpectrogram, StftParams};
use crate::error::{Error, Result};
use crate::nn::{DenseLayer, Graph, Init, ParamStore, ResidualBlock, Var};

/// Shortest reference recording; shorter ones are zero-padded to this.
pub const MIN_REFERENCE_SECS: f64 = 0.1;

/// Fixed affine map applied to log magnitudes before they enter a network.
const FEATURE_SHIFT: f64 = -4.0;
const FEATURE_SCALE: f64 = 4.0;

/// Keeps mask values strictly inside (0, 1) after the f64 sigmoid.
const MASK_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub blocks: usize,
    /// Frames of context on each side of the frame being masked.
    pub context: usize,
    pub embed: usize,
    pub stft: StftParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            blocks: 4,
            context: 5,
            embed: 64,
            stft: StftParams::default(),
        }
    }
}

impl ModelConfig {
    pub fn bins(&self) -> usize {
        self.stft.bins()
    }

    pub fn window_frames(&self) -> usize {
        2 * self.context + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.hidden == 0 || self.embed == 0 {
            return Err(Error::InvalidParameter("hidden and embedding widths must be positive".into()));
        }
        if self.stft.sample_rate != PROCESSING_RATE {
            return Err(Error::InvalidParameter(format!(
                "model analysis rate must be {PROCESSING_RATE} Hz"
            )));
        }
        Ok(())
    }
}

/// Which usage mode a parameter set was trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Denoiser,
    SelectiveDenoiser,
    Separator,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Denoiser => "denoiser",
            TaskKind::SelectiveDenoiser => "selective_denoiser",
            TaskKind::Separator => "separator",
        }
    }

    /// Denoising and selective denoising share one parameter set; the
    /// separator is always a separately trained model.
    pub fn compatible_with(&self, checkpoint_task: TaskKind) -> bool {
        (*self == TaskKind::Separator) == (checkpoint_task == TaskKind::Separator)
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoiser" | "denoise" => Ok(TaskKind::Denoiser),
            "selective_denoiser" | "selective" => Ok(TaskKind::SelectiveDenoiser),
            "separator" | "separate" => Ok(TaskKind::Separator),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// Output of one reference encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T = f32> {
    /// `1 x D`.
    pub values: Array2<T>,
    pub polarity: Polarity,
}

/// Per-frame, per-bin gains (`frames x bins`) in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct RatioMask {
    pub data: Array2<f64>,
}

impl RatioMask {
    pub fn filled(frames: usize, bins: usize, value: f64) -> Self {
        Self {
            data: Array2::from_elem((frames, bins), value),
        }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }
}

/// A positive reference: either a recording or the distinguished mute.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    Mute,
    Recording(AudioBuffer),
}

impl Reference {
    /// An all-zero recording is the mute reference.
    pub fn from_audio(buffer: AudioBuffer) -> Self {
        if buffer.is_silent() {
            Reference::Mute
        } else {
            Reference::Recording(buffer)
        }
    }

    /// The 0.1 s silent recording that stands for "nothing to preserve".
    pub fn mute_recording() -> AudioBuffer {
        AudioBuffer::zeros((MIN_REFERENCE_SECS * PROCESSING_RATE as f64).round() as usize, PROCESSING_RATE)
    }

    fn recording(&self) -> AudioBuffer {
        match self {
            Reference::Mute => Self::mute_recording(),
            Reference::Recording(b) => b.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct ReferenceEncoder {
    input: DenseLayer,
    blocks: Vec<ResidualBlock>,
    output: DenseLayer,
}

impl ReferenceEncoder {
    fn build(store: &mut ParamStore<f64>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let input = DenseLayer::new(store, &format!("{name}.input"), cfg.bins(), cfg.hidden, Init::HeUniform, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| ResidualBlock::new(store, &format!("{name}.block{i}"), cfg.hidden, 0, rng))
            .collect();
        let output = DenseLayer::new(store, &format!("{name}.output"), cfg.hidden, cfg.embed, Init::HeUniform, rng);
        Self { input, blocks, output }
    }

    fn lookup<T: NdFloat>(store: &ParamStore<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let input = DenseLayer::lookup(store, &format!("{name}.input"))?;
        let blocks = (0..cfg.blocks)
            .map(|i| ResidualBlock::lookup(store, &format!("{name}.block{i}"), false))
            .collect::<Result<Vec<_>>>()?;
        let output = DenseLayer::lookup(store, &format!("{name}.output"))?;
        Ok(Self { input, blocks, output })
    }

    /// Per-frame encoding followed by mean pooling over frames.
    fn forward<T: NdFloat>(&self, g: &mut Graph<T>, store: &ParamStore<T>, frames: Var) -> Result<Var> {
        let h = self.input.forward(g, store, frames)?;
        let mut h = g.relu(h);
        for block in &self.blocks {
            h = block.forward(g, store, h, None)?;
        }
        let e = self.output.forward(g, store, h)?;
        g.mean_pool_frames(e)
    }
}

#[derive(Debug, Clone)]
struct MaskEstimator {
    input: DenseLayer,
    blocks: Vec<ResidualBlock>,
    head: DenseLayer,
}

impl MaskEstimator {
    fn build(store: &mut ParamStore<f64>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let in_dim = cfg.window_frames() * cfg.bins();
        let input = DenseLayer::new(store, "enhancer.input", in_dim, cfg.hidden, Init::HeUniform, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| ResidualBlock::new(store, &format!("enhancer.block{i}"), cfg.hidden, 2 * cfg.embed, rng))
            .collect();
        let head = DenseLayer::new(store, "enhancer.head", cfg.hidden, cfg.bins(), Init::GlorotUniform, rng);
        Self { input, blocks, head }
    }

    fn lookup<T: NdFloat>(store: &ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let input = DenseLayer::lookup(store, "enhancer.input")?;
        let blocks = (0..cfg.blocks)
            .map(|i| ResidualBlock::lookup(store, &format!("enhancer.block{i}"), true))
            .collect::<Result<Vec<_>>>()?;
        let head = DenseLayer::lookup(store, "enhancer.head")?;
        Ok(Self { input, blocks, head })
    }

    /// Mask logits, one row per frame.
    fn logits<T: NdFloat>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        window: Var,
        plus: Var,
        minus: Var,
    ) -> Result<Var> {
        let cond = g.concat(&[plus, minus])?;
        let h = self.input.forward(g, store, window)?;
        let mut h = g.relu(h);
        for block in &self.blocks {
            h = block.forward(g, store, h, Some(cond))?;
        }
        self.head.forward(g, store, h)
    }
}

/// Log magnitudes mapped to the networks' input scale.
pub fn network_features<T: NdFloat>(logmag: &LogMagSpectrogram) -> Array2<T> {
    logmag
        .data
        .mapv(|v| T::from((v - FEATURE_SHIFT) / FEATURE_SCALE).expect("float cast"))
}

/// Stacks frames `t-C ..= t+C` for every `t` (edges reflect-padded).
pub fn context_window<T: NdFloat>(features: &Array2<T>, context: usize) -> Array2<T> {
    let (frames, bins) = features.dim();
    let width = 2 * context + 1;
    let mut out = Array2::<T>::zeros((frames, width * bins));
    for t in 0..frames {
        for w in 0..width {
            let src = reflect_index(t as isize + w as isize - context as isize, frames);
            out.slice_mut(ndarray::s![t, w * bins..(w + 1) * bins])
                .assign(&features.row(src));
        }
    }
    out
}

/// Input to one training step, already in the processing domain.
#[derive(Debug, Clone)]
pub struct TrainingExample<T> {
    /// Stacked noisy context windows (`frames x (2C+1)*bins`).
    pub noisy_window: Array2<T>,
    pub noisy_magnitude: Array2<T>,
    pub target_magnitude: Array2<T>,
    pub plus_features: Array2<T>,
    pub minus_features: Array2<T>,
}

/// Both reference encoders plus the conditioned mask estimator.
#[derive(Debug, Clone)]
pub struct PmAuxModel<T = f32> {
    pub config: ModelConfig,
    pub task: TaskKind,
    pub params: ParamStore<T>,
    plus: ReferenceEncoder,
    minus: ReferenceEncoder,
    enhancer: MaskEstimator,
}

impl<T: NdFloat> PmAuxModel<T> {
    /// Freshly initialised parameters drawn from a seeded generator.
    pub fn new(config: ModelConfig, task: TaskKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // draw in f64 so a given seed yields the same initial weights for
        // every float type
        let mut store = ParamStore::<f64>::new();
        ReferenceEncoder::build(&mut store, "plus", &config, &mut rng);
        ReferenceEncoder::build(&mut store, "minus", &config, &mut rng);
        MaskEstimator::build(&mut store, &config, &mut rng);
        Self::from_params(config, task, store.cast())
    }

    /// Binds an existing parameter set, checking every shape.
    pub fn from_params(config: ModelConfig, task: TaskKind, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let plus = ReferenceEncoder::lookup(&params, "plus", &config)?;
        let minus = ReferenceEncoder::lookup(&params, "minus", &config)?;
        let enhancer = MaskEstimator::lookup(&params, &config)?;

        let h = config.hidden;
        let mut expected: Vec<(DenseLayer, usize, usize)> = Vec::new();
        for enc in [&plus, &minus] {
            expected.push((enc.input, config.bins(), h));
            for b in &enc.blocks {
                expected.push((b.fc1, h, h));
                expected.push((b.fc2, h, h));
            }
            expected.push((enc.output, h, config.embed));
        }
        expected.push((enhancer.input, config.window_frames() * config.bins(), h));
        for b in &enhancer.blocks {
            let proj = b.cond_proj.expect("conditioned");
            expected.push((proj, h + 2 * config.embed, h));
            expected.push((b.fc1, h, h));
            expected.push((b.fc2, h, h));
        }
        expected.push((enhancer.head, h, config.bins()));
        for (layer, i, o) in expected {
            if layer.in_dim != i || layer.out_dim != o {
                return Err(Error::ShapeMismatch(format!(
                    "{} is {}x{}, configuration implies {}x{}",
                    params.name(layer.weight),
                    layer.out_dim,
                    layer.in_dim,
                    o,
                    i
                )));
            }
        }
        let expected_count = 2 * (4 + 4 * config.blocks) + (4 + 6 * config.blocks);
        if params.len() != expected_count {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter tensors, configuration implies {}",
                params.len(),
                expected_count
            )));
        }
        Ok(Self {
            config,
            task,
            params,
            plus,
            minus,
            enhancer,
        })
    }

    pub fn cast<U: NdFloat>(&self) -> PmAuxModel<U> {
        PmAuxModel::from_params(self.config, self.task, self.params.cast()).expect("same structure")
    }

    fn encoder(&self, polarity: Polarity) -> &ReferenceEncoder {
        match polarity {
            Polarity::Positive => &self.plus,
            Polarity::Negative => &self.minus,
        }
    }

    /// Network input features of a reference recording, already at 16 kHz mono.
    pub fn reference_features(&self, rec: &AudioBuffer) -> Result<Array2<T>> {
        if rec.is_empty() {
            return Err(Error::EmptyInput("reference recording"));
        }
        let rec = audio::to_processing_format(rec)?;
        let min_len = (MIN_REFERENCE_SECS * PROCESSING_RATE as f64).round() as usize;
        let rec = if rec.len() < min_len { rec.fit_to(min_len) } else { rec };
        let spec = dsp::stft(&rec, &self.config.stft)?;
        Ok(network_features(&dsp::log_magnitude(&spec)))
    }

    /// Records the encoder for `polarity` on `g`, yielding a `1 x D` var.
    pub fn encode_graph(
        &self,
        g: &mut Graph<T>,
        polarity: Polarity,
        features: Array2<T>,
    ) -> Result<Var> {
        self.encode_graph_in(&self.params, g, polarity, features)
    }

    fn encode_graph_in(
        &self,
        params: &ParamStore<T>,
        g: &mut Graph<T>,
        polarity: Polarity,
        features: Array2<T>,
    ) -> Result<Var> {
        if features.ncols() != self.config.bins() {
            return Err(Error::ShapeMismatch(format!(
                "reference has {} bins, model expects {}",
                features.ncols(),
                self.config.bins()
            )));
        }
        let x = g.input(features);
        self.encoder(polarity).forward(g, params, x)
    }

    pub fn encode_reference(&self, polarity: Polarity, rec: &AudioBuffer) -> Result<EmbeddingVector<T>> {
        let features = self.reference_features(rec)?;
        let mut g = Graph::new();
        let e = self.encode_graph(&mut g, polarity, features)?;
        Ok(EmbeddingVector {
            values: g.value(e).clone(),
            polarity,
        })
    }

    /// Records the mask estimator; returns the mask logits.
    pub fn mask_logits_graph(
        &self,
        g: &mut Graph<T>,
        noisy_window: Array2<T>,
        plus: Var,
        minus: Var,
    ) -> Result<Var> {
        self.mask_logits_graph_in(&self.params, g, noisy_window, plus, minus)
    }

    fn mask_logits_graph_in(
        &self,
        params: &ParamStore<T>,
        g: &mut Graph<T>,
        noisy_window: Array2<T>,
        plus: Var,
        minus: Var,
    ) -> Result<Var> {
        let expected = self.config.window_frames() * self.config.bins();
        if noisy_window.ncols() != expected {
            return Err(Error::ShapeMismatch(format!(
                "noisy window has {} features, model expects {}",
                noisy_window.ncols(),
                expected
            )));
        }
        let x = g.input(noisy_window);
        self.enhancer.logits(g, params, x, plus, minus)
    }

    pub fn estimate_mask(
        &self,
        noisy: &LogMagSpectrogram,
        plus: &EmbeddingVector<T>,
        minus: &EmbeddingVector<T>,
    ) -> Result<RatioMask> {
        if plus.polarity != Polarity::Positive || minus.polarity != Polarity::Negative {
            return Err(Error::InvalidParameter("embeddings passed with the wrong polarity".into()));
        }
        if noisy.bins() != self.config.bins() {
            return Err(Error::ShapeMismatch(format!(
                "noisy spectrogram has {} bins, model expects {}",
                noisy.bins(),
                self.config.bins()
            )));
        }
        for e in [plus, minus] {
            if e.values.dim() != (1, self.config.embed) {
                return Err(Error::ShapeMismatch(format!(
                    "embedding is {:?}, model expects (1, {})",
                    e.values.dim(),
                    self.config.embed
                )));
            }
        }
        let window = context_window(&network_features::<T>(noisy), self.config.context);
        let mut g = Graph::new();
        let p = g.input(plus.values.clone());
        let m = g.input(minus.values.clone());
        let logits = self.mask_logits_graph(&mut g, window, p, m)?;
        let data = g.value(logits).mapv(|z| {
            let z = z.to_f64().expect("finite logit");
            (1.0 / (1.0 + (-z).exp())).clamp(MASK_MARGIN, 1.0 - MASK_MARGIN)
        });
        Ok(RatioMask { data })
    }

    /// Network inputs and targets for a noisy/target pair and its references.
    pub fn training_example(
        &self,
        noisy: &AudioBuffer,
        target: &AudioBuffer,
        plus: &AudioBuffer,
        minus: &AudioBuffer,
    ) -> Result<TrainingExample<T>> {
        let params = &self.config.stft;
        let noisy = dsp::stft(noisy, params)?;
        let target = dsp::stft(target, params)?;
        if noisy.frames() != target.frames() {
            return Err(Error::ShapeMismatch(format!(
                "noisy has {} frames, target {}",
                noisy.frames(),
                target.frames()
            )));
        }
        let cast = |a: Array2<f64>| a.mapv(|v| T::from(v).expect("float cast"));
        Ok(TrainingExample {
            noisy_window: context_window(&network_features::<T>(&dsp::log_magnitude(&noisy)), self.config.context),
            noisy_magnitude: cast(noisy.magnitude()),
            target_magnitude: cast(target.magnitude()),
            plus_features: self.reference_features(plus)?,
            minus_features: self.reference_features(minus)?,
        })
    }

    /// Scalar training loss for one example: mean squared error between the
    /// masked noisy magnitude and the target magnitude, times `weight`.
    pub fn loss_graph(&self, example: &TrainingExample<T>, weight: T) -> Result<(Graph<T>, Var)> {
        self.loss_graph_in(&self.params, example, weight)
    }

    /// [`Self::loss_graph`] evaluated with `params`, which must share this
    /// model's layout.
    pub fn loss_graph_in(
        &self,
        params: &ParamStore<T>,
        example: &TrainingExample<T>,
        weight: T,
    ) -> Result<(Graph<T>, Var)> {
        let mut g = Graph::new();
        let plus = self.encode_graph_in(params, &mut g, Polarity::Positive, example.plus_features.clone())?;
        let minus = self.encode_graph_in(params, &mut g, Polarity::Negative, example.minus_features.clone())?;
        let logits = self.mask_logits_graph_in(params, &mut g, example.noisy_window.clone(), plus, minus)?;
        let mask = g.sigmoid(logits);
        let est = g.mul_const(mask, example.noisy_magnitude.clone())?;
        let loss = g.mse(est, example.target_magnitude.clone())?;
        let loss = g.scale(loss, weight);
        Ok((g, loss))
    }

    fn check_task(&self, wanted: TaskKind) -> Result<()> {
        if wanted.compatible_with(self.task) {
            Ok(())
        } else {
            Err(Error::TaskMismatch(format!(
                "{} requested from a {} model",
                wanted, self.task
            )))
        }
    }

    /// Estimates a mask for `noisy` given both references and resynthesises
    /// with the noisy phase. Output has the input's length and rate (mono).
    pub fn enhance(&self, noisy: &AudioBuffer, plus: &Reference, minus: &AudioBuffer) -> Result<AudioBuffer> {
        if noisy.is_empty() {
            return Err(Error::EmptyInput("noisy input"));
        }
        if minus.is_empty() {
            return Err(Error::EmptyInput("negative reference"));
        }
        let plus_emb = self.encode_reference(Polarity::Positive, &plus.recording())?;
        let minus_emb = self.encode_reference(Polarity::Negative, minus)?;
        enhance_with(noisy, &self.config.stft, |logmag| {
            self.estimate_mask(logmag, &plus_emb, &minus_emb)
        })
    }

    /// Plain denoising: the positive reference is muted.
    pub fn denoise(&self, noisy: &AudioBuffer, minus: &AudioBuffer) -> Result<AudioBuffer> {
        self.check_task(TaskKind::Denoiser)?;
        self.enhance(noisy, &Reference::Mute, minus)
    }

    pub fn selective(&self, noisy: &AudioBuffer, plus: &Reference, minus: &AudioBuffer) -> Result<AudioBuffer> {
        self.check_task(TaskKind::SelectiveDenoiser)?;
        self.enhance(noisy, plus, minus)
    }

    pub fn separate(&self, mixture: &AudioBuffer, target: &AudioBuffer, interference: &AudioBuffer) -> Result<AudioBuffer> {
        self.check_task(TaskKind::Separator)?;
        if target.is_empty() {
            return Err(Error::EmptyInput("target reference"));
        }
        self.enhance(mixture, &Reference::Recording(target.clone()), interference)
    }

    /// Dispatches on `task` with the given references.
    pub fn run_task(
        &self,
        task: TaskKind,
        noisy: &AudioBuffer,
        plus: &Reference,
        minus: &AudioBuffer,
    ) -> Result<AudioBuffer> {
        match task {
            TaskKind::Denoiser => self.denoise(noisy, minus),
            TaskKind::SelectiveDenoiser => self.selective(noisy, plus, minus),
            TaskKind::Separator => match plus {
                Reference::Recording(t) => self.separate(noisy, t, minus),
                Reference::Mute => Err(Error::EmptyInput("target reference")),
            },
        }
    }
}

/// Runs the analysis / mask / resynthesis pipeline with an arbitrary mask
/// source. Converts to 16 kHz mono and back to the input rate.
pub fn enhance_with<F>(noisy: &AudioBuffer, params: &StftParams, mask_fn: F) -> Result<AudioBuffer>
where
    F: FnOnce(&LogMagSpectrogram) -> Result<RatioMask>,
{
    if noisy.is_empty() {
        return Err(Error::EmptyInput("noisy input"));
    }
    let original_rate = noisy.sample_rate();
    let original_len = noisy.len();
    let x = audio::to_processing_format(noisy)?;
    let mut spec = dsp::stft(&x, params)?;
    let mask = mask_fn(&dsp::log_magnitude(&spec))?;
    let y = if mask.data.iter().all(|&g| g == 1.0) && mask.data.dim() == spec.data.dim() {
        // unit gains: the analysis/synthesis round trip is the identity
        x
    } else {
        spec.apply_gains(&mask.data)?;
        dsp::istft(&spec)?
    };
    let y = if original_rate != PROCESSING_RATE {
        audio::resample(&y, original_rate)?
    } else {
        y
    };
    Ok(y.fit_to(original_len).peak_normalize())
}

/// Applies a fixed mask to `noisy`.
pub fn apply_mask(noisy: &AudioBuffer, params: &StftParams, mask: &RatioMask) -> Result<AudioBuffer> {
    enhance_with(noisy, params, |_| Ok(mask.clone()))
}
