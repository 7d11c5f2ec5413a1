use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nhans::audio::{self, AudioBuffer, BitDepth};
use nhans::dsp::StftParams;
use nhans::model::{ModelConfig, PmAuxModel, TaskKind};
use nhans::synth::{self, SynthSpec, Voice};
use nhans::train::Checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn nhans(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nhans"))
        .args(args)
        .env_remove("NHANS_MODEL_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        blocks: 1,
        context: 1,
        embed: 4,
        stft: StftParams::default(),
    }
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let speech = synth::utterance(&Voice::random(&mut rng), 1.0, &mut rng);
        let noise = synth::noise("pink", 2.0, &mut rng).unwrap();
        let n = speech.len();
        let noisy = AudioBuffer::mono(
            speech.samples().iter().zip(noise.samples()).map(|(a, b)| a + b).collect(),
            16_000,
        );
        audio::write_wav(dir.path().join("noisy.wav"), &noisy, BitDepth::Float32).unwrap();
        audio::write_wav(dir.path().join("neg.wav"), &noise.slice(n, 2 * n), BitDepth::Float32).unwrap();
        let pos = synth::noise("tone", 1.0, &mut rng).unwrap();
        audio::write_wav(dir.path().join("pos.wav"), &pos, BitDepth::Float32).unwrap();
        audio::write_wav(dir.path().join("silent.wav"), &AudioBuffer::zeros(8000, 16_000), BitDepth::Pcm16).unwrap();
        for (task, name) in [(TaskKind::Denoiser, "denoiser.ckpt"), (TaskKind::Separator, "separator.ckpt")] {
            let model = PmAuxModel::<f32>::new(small_config(), task, 3).unwrap();
            Checkpoint::from_model(&model).save(&dir.path().join(name)).unwrap();
        }
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

#[test]
fn denoise_single_file_keeps_duration() {
    let f = Fixture::new();
    let o = nhans(&[
        "denoise", "--input", &f.p("noisy.wav"), "--neg", &f.p("neg.wav"), "--output", &f.p("out.wav"),
        "--model", &f.p("denoiser.ckpt"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = audio::read_wav(f.path("out.wav")).unwrap();
    let input = audio::read_wav(f.path("noisy.wav")).unwrap();
    assert_eq!(out.len(), input.len());
    assert_eq!(out.sample_rate(), 16_000);
    assert!(o.stdout.is_empty());
}

#[test]
fn selective_with_silent_pos_equals_denoise_bitwise() {
    let f = Fixture::new();
    let common = ["--input", &f.p("noisy.wav"), "--neg", &f.p("neg.wav"), "--model", &f.p("denoiser.ckpt")];
    let d = f.p("d.wav");
    let s = f.p("s.wav");
    let mut args = vec!["denoise", "--output", d.as_str()];
    args.extend(common.iter().copied());
    assert!(nhans(&args).status.success());
    let silent = f.p("silent.wav");
    let mut args = vec!["selective", "--output", s.as_str(), "--pos", silent.as_str()];
    args.extend(common.iter().copied());
    let o = nhans(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&d).unwrap(), fs::read(&s).unwrap());

    let audible = f.p("a.wav");
    let pos = f.p("pos.wav");
    let mut args = vec!["selective", "--output", audible.as_str(), "--pos", pos.as_str()];
    args.extend(common.iter().copied());
    assert!(nhans(&args).status.success());
    assert_ne!(fs::read(&d).unwrap(), fs::read(&audible).unwrap());
}

#[test]
fn directory_batch_skips_non_wav_with_warning() {
    let f = Fixture::new();
    let input = f.path("batch_in");
    fs::create_dir(&input).unwrap();
    for name in ["a.wav", "b.wav", "c.WAV"] {
        fs::copy(f.path("noisy.wav"), input.join(name)).unwrap();
    }
    fs::write(input.join("notes.txt"), "not audio").unwrap();
    let out = f.path("batch_out");
    let o = nhans(&[
        "denoise", "--input", &input.to_string_lossy(), "--neg", &f.p("neg.wav"), "--output",
        &out.to_string_lossy(), "--model", &f.p("denoiser.ckpt"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["a.wav", "b.wav", "c.WAV"]);
    let err = stderr(&o);
    assert_eq!(err.matches("warning").count(), 1, "{err}");
    assert!(err.contains("notes.txt"));
}

fn assert_one_line_failure(o: &Output) {
    assert!(!o.status.success());
    let err = stderr(o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn flag_rules_per_subcommand() {
    let f = Fixture::new();
    let (noisy, neg, pos, model, out) = (f.p("noisy.wav"), f.p("neg.wav"), f.p("pos.wav"), f.p("denoiser.ckpt"), f.p("x.wav"));
    assert_one_line_failure(&nhans(&[
        "denoise", "--input", &noisy, "--neg", &neg, "--pos", &pos, "--output", &out, "--model", &model,
    ]));
    assert_one_line_failure(&nhans(&["selective", "--input", &noisy, "--neg", &neg, "--output", &out, "--model", &model]));
    assert_one_line_failure(&nhans(&["selective", "--input", &noisy, "--pos", &pos, "--output", &out, "--model", &model]));
    assert_one_line_failure(&nhans(&["separate", "--input", &noisy, "--neg", &neg, "--output", &out, "--model", &model]));
    assert_one_line_failure(&nhans(&["denoise", "--input", &noisy, "--output", &out, "--model", &model]));
    assert_one_line_failure(&nhans(&["denoise", "--neg", &neg, "--output", &out]));
    assert_eq!(nhans(&["bogus"]).status.code(), Some(2));
    assert!(nhans(&["--help"]).status.success());
    assert!(!Path::new(&out).exists());
}

#[test]
fn errors_for_bad_inputs() {
    let f = Fixture::new();
    let (noisy, neg, out) = (f.p("noisy.wav"), f.p("neg.wav"), f.p("x.wav"));
    let missing = f.p("missing.wav");
    assert_one_line_failure(&nhans(&[
        "denoise", "--input", &missing, "--neg", &neg, "--output", &out, "--model", &f.p("denoiser.ckpt"),
    ]));
    // no --model and no model directory
    assert_one_line_failure(&nhans(&["denoise", "--input", &noisy, "--neg", &neg, "--output", &out]));
    // a separator checkpoint cannot denoise
    let o = nhans(&[
        "denoise", "--input", &noisy, "--neg", &neg, "--output", &out, "--model", &f.p("separator.ckpt"),
    ]);
    assert_one_line_failure(&o);
    assert!(stderr(&o).contains("task mismatch"));
    let text = f.p("text.wav");
    fs::write(&text, "RIFF but not really").unwrap();
    assert_one_line_failure(&nhans(&[
        "denoise", "--input", &text, "--neg", &neg, "--output", &out, "--model", &f.p("denoiser.ckpt"),
    ]));
}

#[test]
fn existing_output_needs_overwrite() {
    let f = Fixture::new();
    let out = f.p("exists.wav");
    fs::write(&out, b"keep me").unwrap();
    let base = ["denoise", "--input", &f.p("noisy.wav"), "--neg", &f.p("neg.wav"), "--output", &out, "--model", &f.p("denoiser.ckpt")];
    assert_one_line_failure(&nhans(&base));
    assert_eq!(fs::read(&out).unwrap(), b"keep me");
    let mut with = base.to_vec();
    with.push("--overwrite");
    assert!(nhans(&with).status.success());
    assert!(audio::read_wav(&out).is_ok());
}

#[test]
fn model_directory_from_environment() {
    let f = Fixture::new();
    let o = Command::new(env!("CARGO_BIN_EXE_nhans"))
        .args(["separate", "--input", &f.p("noisy.wav"), "--pos", &f.p("pos.wav"), "--neg", &f.p("neg.wav"), "--output", &f.p("sep.wav")])
        .env("NHANS_MODEL_DIR", f.dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(f.path("sep.wav").exists());
}

#[test]
fn other_rates_and_stereo_come_back_at_input_rate() {
    let f = Fixture::new();
    let mono = audio::read_wav(f.path("noisy.wav")).unwrap();
    let up = audio::resample(&mono, 44_100).unwrap();
    let stereo: Vec<f64> = up.samples().iter().flat_map(|&s| [s, 0.5 * s]).collect();
    let stereo = AudioBuffer::new(stereo, 44_100, 2).unwrap();
    audio::write_wav(f.path("stereo.wav"), &stereo, BitDepth::Pcm16).unwrap();
    let o = nhans(&[
        "denoise", "--input", &f.p("stereo.wav"), "--neg", &f.p("neg.wav"), "--output", &f.p("o.wav"),
        "--model", &f.p("denoiser.ckpt"), "--bit-depth", "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = audio::read_wav(f.path("o.wav")).unwrap();
    assert_eq!(out.sample_rate(), 44_100);
    assert_eq!(out.len(), stereo.len());
}

#[test]
fn benchmark_reports_every_run() {
    let f = Fixture::new();
    let report = f.p("rtf.txt");
    let o = nhans(&["benchmark", "--model", &f.p("denoiser.ckpt"), "--repetitions", "3", "--output", &report]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.matches("run ").count(), 3);
    assert!(text.contains("median") && text.contains("inverse"));
    assert_one_line_failure(&nhans(&["benchmark", "--model", &f.p("denoiser.ckpt"), "--duration", "0.5"]));
}

#[test]
fn train_then_evaluate_from_config() {
    let f = Fixture::new();
    let corpus = synth::generate(&SynthSpec {
        seed: 9,
        clean_utterances: 10,
        utterance_secs: 1.0,
        noises_per_category: 10,
        noise_secs: 1.5,
        speakers_per_gender: 1,
        utterances_per_speaker: 4,
    })
    .unwrap();
    synth::write_corpus(&corpus, &f.path("corpus")).unwrap();
    let cfg = f.path("train.cfg");
    fs::write(
        &cfg,
        "# tiny run\ntask = denoiser\nsteps = 2\nbatch_size = 2\nhidden = 16\nblocks = 1\ncontext = 1\nembed = 4\n\
         crop_secs = 0.25\nreference_secs = 0.25\nmanifest = corpus/manifest.tsv\ncheckpoint = model.ckpt\n\
         log = train.log\nsnr_grid = 0, 5\neval_pairs = 1\n",
    )
    .unwrap();
    let o = nhans(&["train", "--config", &cfg.to_string_lossy()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(Checkpoint::load(&f.path("model.ckpt")).unwrap().step, 2);
    assert_eq!(fs::read_to_string(f.path("train.log")).unwrap().lines().count(), 2);
    // refuses to clobber the checkpoint
    assert_one_line_failure(&nhans(&["train", "--config", &cfg.to_string_lossy()]));

    let report = f.p("report.csv");
    let o = nhans(&["evaluate", "--model", &f.p("model.ckpt"), "--config", &cfg.to_string_lossy(), "--output", &report]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("group,metric,value\n"));
    assert!(csv.contains("enhanced:0 dB,sdr,") && csv.contains("baseline:5 dB,stoi,"));
    assert!(csv.contains("pesq,n/a"));
}

#[test]
fn synth_corpus_writes_manifest() {
    let f = Fixture::new();
    let o = nhans(&["synth-corpus", "--output", &f.p("syn"), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = nhans::harness::CorpusManifest::load(&f.path("syn/manifest.tsv")).unwrap();
    assert!(manifest.entries.len() > 100);
}
