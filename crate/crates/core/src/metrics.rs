//! Objective quality metrics: LSD, SSNR, MCD, STOI and BSS-eval
//! SDR/SIR/SAR, plus grouped report aggregation.
//!
//! All functions are pure. Inputs of unequal length are trimmed to the
//! shorter one.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::f64::consts::{LN_10, PI};
use std::fmt::{self, Write as _};

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::{self, AudioBuffer};
use crate::dsp::{self, StftParams};
use crate::error::{Error, Result};
use crate::harness::GenderPair;

/// Power floor inside the LSD logarithm.
pub const LSD_EPSILON: f64 = 1e-10;
pub const SSNR_FRAME: usize = 512;
pub const SSNR_HOP: usize = 256;
pub const SSNR_MIN_DB: f64 = -10.0;
pub const SSNR_MAX_DB: f64 = 35.0;
/// Frames more than this far below the loudest reference frame are silent.
pub const SILENCE_RANGE_DB: f64 = 40.0;
pub const MCD_MEL_BANDS: usize = 40;
pub const MCD_COEFFS: usize = 12;
pub const STOI_RATE: u32 = 10_000;
pub const STOI_FRAME: usize = 256;
pub const STOI_FFT: usize = 512;
pub const STOI_SEGMENT: usize = 30;
pub const STOI_BETA_DB: f64 = -15.0;
pub const BSS_FILTER_LEN: usize = 512;
/// Every dB figure is clamped to `[-DB_CAP, DB_CAP]`.
pub const DB_CAP: f64 = 100.0;

const MEL_ENERGY_FLOOR: f64 = 1e-30;

fn trimmed<'a>(reference: &'a AudioBuffer, estimate: &'a AudioBuffer) -> Result<(&'a [f64], &'a [f64])> {
    if reference.sample_rate() != estimate.sample_rate() {
        return Err(Error::InvalidParameter(format!(
            "sample rates differ: {} vs {}",
            reference.sample_rate(),
            estimate.sample_rate()
        )));
    }
    let n = reference.len().min(estimate.len());
    if n == 0 {
        return Err(Error::EmptyInput("metric input"));
    }
    Ok((&reference.samples()[..n], &estimate.samples()[..n]))
}

fn capped_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return DB_CAP;
    }
    if num <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

fn power_spectrogram(x: &[f64], rate: u32, fft: usize, hop: usize) -> Result<Array2<f64>> {
    let params = StftParams::new(fft, hop, rate)?;
    Ok(dsp::stft(&AudioBuffer::mono(x.to_vec(), rate), &params)?.power())
}

/// Log-spectral distortion in dB, averaged over STFT frames.
pub fn lsd(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64> {
    let (r, e) = trimmed(reference, estimate)?;
    let rate = reference.sample_rate();
    let pr = power_spectrogram(r, rate, 512, 128)?;
    let pe = power_spectrogram(e, rate, 512, 128)?;
    let bins = pr.ncols() as f64;
    let total: f64 = pr
        .outer_iter()
        .zip(pe.outer_iter())
        .map(|(a, b)| {
            let sq: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(&x, &y)| {
                    let d = 10.0 * (x + LSD_EPSILON).log10() - 10.0 * (y + LSD_EPSILON).log10();
                    d * d
                })
                .sum();
            (sq / bins).sqrt()
        })
        .sum();
    Ok(total / pr.nrows() as f64)
}

/// Start offsets of 512-sample, 256-hop rectangular frames. A signal
/// shorter than one frame is a single frame.
fn ssnr_frames(n: usize) -> Vec<(usize, usize)> {
    if n <= SSNR_FRAME {
        return vec![(0, n)];
    }
    (0..=(n - SSNR_FRAME) / SSNR_HOP)
        .map(|i| (i * SSNR_HOP, i * SSNR_HOP + SSNR_FRAME))
        .collect()
}

/// Indices of frames whose energy is within the silence range of the
/// loudest one. Errors when every frame is silent.
fn active_frames(energies: &[f64]) -> Result<Vec<usize>> {
    let max = energies.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::Degenerate("reference is silent in every frame".into()));
    }
    let gate = max * 10f64.powf(-SILENCE_RANGE_DB / 10.0);
    Ok((0..energies.len()).filter(|&i| energies[i] >= gate).collect())
}

/// Segmental SNR in dB.
pub fn ssnr(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64> {
    let (r, e) = trimmed(reference, estimate)?;
    let frames = ssnr_frames(r.len());
    let energies: Vec<f64> = frames.iter().map(|&(a, b)| r[a..b].iter().map(|x| x * x).sum()).collect();
    let active = active_frames(&energies)?;
    let total: f64 = active
        .iter()
        .map(|&i| {
            let (a, b) = frames[i];
            let err: f64 = r[a..b].iter().zip(&e[a..b]).map(|(x, y)| (x - y) * (x - y)).sum();
            if err == 0.0 {
                SSNR_MAX_DB
            } else {
                (10.0 * (energies[i] / err).log10()).clamp(SSNR_MIN_DB, SSNR_MAX_DB)
            }
        })
        .sum();
    Ok(total / active.len() as f64)
}

/// Mel-cepstral coefficients c1..c12 for each STFT frame (512/256 Hann),
/// with the frame's total power.
pub fn mel_cepstra(x: &[f64], rate: u32) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let params = StftParams::new(SSNR_FRAME, SSNR_HOP, rate)?;
    let power = dsp::stft(&AudioBuffer::mono(x.to_vec(), rate), &params)?.power();
    let fb = dsp::mel_filterbank(MCD_MEL_BANDS, &params)?;
    let mel = power.dot(&fb.t());
    let energies = power.sum_axis(Axis(1)).to_vec();
    let cepstra = mel
        .outer_iter()
        .map(|row| {
            let logs: Vec<f64> = row.iter().map(|&v| v.max(MEL_ENERGY_FLOOR).ln()).collect();
            dsp::dct_ii(&logs, MCD_COEFFS + 1)[1..].to_vec()
        })
        .collect();
    Ok((cepstra, energies))
}

/// Mel cepstral distortion in dB over non-silent reference frames.
pub fn mcd(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64> {
    let (r, e) = trimmed(reference, estimate)?;
    let rate = reference.sample_rate();
    let (cr, energies) = mel_cepstra(r, rate)?;
    let (ce, _) = mel_cepstra(e, rate)?;
    let active = active_frames(&energies)?;
    let k = 10.0 / LN_10;
    let total: f64 = active
        .iter()
        .map(|&t| {
            let sq: f64 = cr[t].iter().zip(&ce[t]).map(|(a, b)| (a - b) * (a - b)).sum();
            k * (2.0 * sq).sqrt()
        })
        .sum();
    Ok(total / active.len() as f64)
}

/// `hanning(n + 2)[1..n+1]`: a Hann window without its zero end points.
fn stoi_window(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize, frame: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(frame)).step_by(hop)
}

/// Drops frames of both signals where `x` is more than 40 dB below its
/// loudest frame, then overlap-adds what remains.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = stoi_window(STOI_FRAME);
    let hop = STOI_FRAME / 2;
    let starts: Vec<usize> = frame_starts(x.len(), STOI_FRAME, hop).collect();
    let energies: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let norm = (0..STOI_FRAME).map(|i| (w[i] * x[s + i]).powi(2)).sum::<f64>().sqrt();
            20.0 * (norm + f64::EPSILON).log10()
        })
        .collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &en)| max - SILENCE_RANGE_DB - en < 0.0)
        .map(|(&s, _)| s)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let len = (kept.len() - 1) * hop + STOI_FRAME;
    let mut xo = vec![0.0; len];
    let mut yo = vec![0.0; len];
    for (k, &s) in kept.iter().enumerate() {
        for i in 0..STOI_FRAME {
            xo[k * hop + i] += w[i] * x[s + i];
            yo[k * hop + i] += w[i] * y[s + i];
        }
    }
    (xo, yo)
}

/// Third-octave band magnitudes, `bands x frames`.
fn stoi_band_envelopes(x: &[f64], bands: &dsp::ThirdOctaveBands, planner: &mut FftPlanner<f64>) -> Array2<f64> {
    let w = stoi_window(STOI_FRAME);
    let fft = planner.plan_fft_forward(STOI_FFT);
    let starts: Vec<usize> = frame_starts(x.len(), STOI_FRAME, STOI_FRAME / 2).collect();
    let mut out = Array2::zeros((bands.bin_ranges.len(), starts.len()));
    let mut buf = vec![Complex64::new(0.0, 0.0); STOI_FFT];
    for (t, &s) in starts.iter().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for i in 0..STOI_FRAME {
            buf[i] = Complex64::new(w[i] * x[s + i], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..STOI_FFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for (b, e) in bands.band_energies(&power).into_iter().enumerate() {
            out[[b, t]] = e.sqrt();
        }
    }
    out
}

/// Short-time objective intelligibility of `estimate` against `reference`.
pub fn stoi(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64> {
    let (r, e) = trimmed(reference, estimate)?;
    let rate = reference.sample_rate();
    let r = audio::resample(&AudioBuffer::mono(r.to_vec(), rate), STOI_RATE)?;
    let e = audio::resample(&AudioBuffer::mono(e.to_vec(), rate), STOI_RATE)?;
    let (x, y) = remove_silent_frames(r.samples(), e.samples());

    let params = StftParams::new(STOI_FFT, STOI_FRAME / 2, STOI_RATE)?;
    let bands = dsp::third_octave_bands(&params);
    let mut planner = FftPlanner::new();
    let xt = stoi_band_envelopes(&x, &bands, &mut planner);
    let yt = stoi_band_envelopes(&y, &bands, &mut planner);
    let frames = xt.ncols();
    if frames < STOI_SEGMENT {
        return Err(Error::TooShort(format!(
            "{frames} active frames after silence removal; STOI needs {STOI_SEGMENT}"
        )));
    }

    let clip = 1.0 + 10f64.powf(-STOI_BETA_DB / 20.0);
    let eps = f64::EPSILON;
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let center = |v: &mut [f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|a| *a -= m);
    };
    let mut total = 0.0;
    let segments = frames - STOI_SEGMENT + 1;
    for m in 0..segments {
        for b in 0..xt.nrows() {
            let mut xs: Vec<f64> = (m..m + STOI_SEGMENT).map(|t| xt[[b, t]]).collect();
            let ys: Vec<f64> = (m..m + STOI_SEGMENT).map(|t| yt[[b, t]]).collect();
            let alpha = norm(&xs) / (norm(&ys) + eps);
            let mut yp: Vec<f64> = ys.iter().zip(&xs).map(|(yv, xv)| (yv * alpha).min(xv * clip)).collect();
            center(&mut yp);
            center(&mut xs);
            let (ny, nx) = (norm(&yp) + eps, norm(&xs) + eps);
            total += yp.iter().zip(&xs).map(|(a, b)| (a / ny) * (b / nx)).sum::<f64>();
        }
    }
    Ok(total / (segments * xt.nrows()) as f64)
}

/// BSS-eval decomposition scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BssScores {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let (done, rest) = l.split_at_mut(j * n);
        let row_j = &mut rest[..n];
        for i in 0..j {
            let row_i = &done[i * n..i * n + i];
            let s: f64 = row_i.iter().zip(&row_j[..i]).map(|(x, y)| x * y).sum();
            row_j[i] = (a[[j, i]] - s) / done[i * n + i];
        }
        let d = a[[j, j]] - row_j[..j].iter().map(|x| x * x).sum::<f64>();
        if d <= 0.0 {
            return Err(Error::Degenerate("projection Gram matrix is not positive definite".into()));
        }
        row_j[j] = d.sqrt();
    }
    Ok(Array2::from_shape_vec((n, n), l).expect("square"))
}

fn cholesky_solve(l: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let row = l.row(i);
        let s: f64 = (0..i).map(|k| row[k] * y[k]).sum();
        y[i] = (b[i] - s) / row[i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Projection of estimates onto the span of delayed copies of a set of
/// signals. The Gram matrix is factorized once so several estimates can be
/// projected cheaply.
struct Projector {
    sources: Vec<Vec<f64>>,
    spectra: Vec<Vec<Complex64>>,
    flen: usize,
    n_fft: usize,
    chol: Array2<f64>,
}

fn spectrum(x: &[f64], n_fft: usize, planner: &mut FftPlanner<f64>) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(n_fft, Complex64::new(0.0, 0.0));
    planner.plan_fft_forward(n_fft).process(&mut buf);
    buf
}

/// `c[k] = sum_u a(u) b(u + k)` for every lag, from spectra.
fn correlation(a: &[Complex64], b: &[Complex64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = a.len();
    let mut buf: Vec<Complex64> = a.iter().zip(b).map(|(x, y)| x.conj() * y).collect();
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

impl Projector {
    fn new(sources: Vec<Vec<f64>>, flen: usize, planner: &mut FftPlanner<f64>) -> Result<Self> {
        let n = sources[0].len();
        let n_fft = (n + flen - 1).next_power_of_two();
        let spectra: Vec<Vec<Complex64>> = sources.iter().map(|s| spectrum(s, n_fft, planner)).collect();
        let dim = sources.len() * flen;
        let mut g = Array2::<f64>::zeros((dim, dim));
        for i in 0..sources.len() {
            for j in i..sources.len() {
                let c = correlation(&spectra[i], &spectra[j], planner);
                let lag = |k: isize| if k >= 0 { c[k as usize] } else { c[(n_fft as isize + k) as usize] };
                for a in 0..flen {
                    for b in 0..flen {
                        // <s_i delayed by a, s_j delayed by b>
                        let v = lag(a as isize - b as isize);
                        g[[i * flen + a, j * flen + b]] = v;
                        g[[j * flen + b, i * flen + a]] = v;
                    }
                }
            }
        }
        let lambda = 1e-9 * g.diag().sum();
        for d in 0..dim {
            g[[d, d]] += lambda;
        }
        let chol = cholesky(&g)?;
        Ok(Self {
            sources,
            spectra,
            flen,
            n_fft,
            chol,
        })
    }

    /// Projection of `est` (length n), returned with length `n + flen - 1`.
    fn project(&self, est: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
        let n = est.len();
        let es = spectrum(est, self.n_fft, planner);
        let mut rhs = Vec::with_capacity(self.sources.len() * self.flen);
        for s in &self.spectra {
            let c = correlation(s, &es, planner);
            rhs.extend_from_slice(&c[..self.flen]);
        }
        let coeffs = cholesky_solve(&self.chol, &rhs);
        let mut out = vec![0.0; n + self.flen - 1];
        for (i, src) in self.sources.iter().enumerate() {
            let h = &coeffs[i * self.flen..(i + 1) * self.flen];
            for (a, &w) in h.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (t, &v) in src.iter().enumerate() {
                    out[t + a] += w * v;
                }
            }
        }
        out
    }
}

/// Reusable BSS-eval scorer for a fixed set of reference sources.
pub struct BssEval {
    target: Projector,
    all: Projector,
    len: usize,
    planner: FftPlanner<f64>,
}

impl BssEval {
    /// `sources[target]` is the wanted signal; the rest are interferers.
    pub fn new(sources: &[&AudioBuffer], target: usize, flen: usize) -> Result<Self> {
        if sources.is_empty() || sources.len() > 2 || target >= sources.len() {
            return Err(Error::InvalidParameter(format!(
                "bss_eval takes 1 or 2 sources and a valid target index, got {} and {target}",
                sources.len()
            )));
        }
        if flen == 0 {
            return Err(Error::InvalidParameter("filter length must be positive".into()));
        }
        let len = sources.iter().map(|s| s.len()).min().unwrap_or(0);
        if len == 0 {
            return Err(Error::EmptyInput("bss_eval source"));
        }
        let mut planner = FftPlanner::new();
        let trimmed: Vec<Vec<f64>> = sources.iter().map(|s| s.samples()[..len].to_vec()).collect();
        if trimmed.iter().any(|s| s.iter().all(|&v| v == 0.0)) {
            return Err(Error::ZeroEnergy("bss_eval reference source"));
        }
        let target_proj = Projector::new(vec![trimmed[target].clone()], flen, &mut planner)?;
        let all = Projector::new(trimmed, flen, &mut planner)?;
        Ok(Self {
            target: target_proj,
            all,
            len,
            planner,
        })
    }

    pub fn score(&mut self, estimate: &AudioBuffer) -> Result<BssScores> {
        if estimate.len() < self.len {
            return Err(Error::ShapeMismatch(format!(
                "estimate has {} samples, sources have {}",
                estimate.len(),
                self.len
            )));
        }
        let est = &estimate.samples()[..self.len];
        let s_target = self.target.project(est, &mut self.planner);
        let s_all = self.all.project(est, &mut self.planner);
        let mut e_interf = vec![0.0; s_all.len()];
        let mut e_artif = vec![0.0; s_all.len()];
        for t in 0..s_all.len() {
            e_interf[t] = s_all[t] - s_target[t];
            let e = if t < est.len() { est[t] } else { 0.0 };
            e_artif[t] = e - s_all[t];
        }
        let energy = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let distortion: Vec<f64> = e_interf.iter().zip(&e_artif).map(|(a, b)| a + b).collect();
        Ok(BssScores {
            sdr: capped_db(energy(&s_target), energy(&distortion)),
            sir: capped_db(energy(&s_target), energy(&e_interf)),
            sar: capped_db(energy(&s_all), energy(&e_artif)),
        })
    }
}

/// One-shot BSS-eval with filter length `flen`.
pub fn bss_eval(sources: &[&AudioBuffer], estimate: &AudioBuffer, target: usize, flen: usize) -> Result<BssScores> {
    BssEval::new(sources, target, flen)?.score(estimate)
}

/// Every metric for one reference/estimate pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub lsd: f64,
    pub ssnr: f64,
    pub mcd: f64,
    pub stoi: f64,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

pub const METRIC_NAMES: [&str; 7] = ["lsd", "ssnr", "mcd", "stoi", "sdr", "sir", "sar"];

impl PairMetrics {
    pub fn values(&self) -> [f64; 7] {
        [self.lsd, self.ssnr, self.mcd, self.stoi, self.sdr, self.sir, self.sar]
    }

    fn from_values(v: [f64; 7]) -> Self {
        Self {
            lsd: v[0],
            ssnr: v[1],
            mcd: v[2],
            stoi: v[3],
            sdr: v[4],
            sir: v[5],
            sar: v[6],
        }
    }
}

/// Scores `estimate` against `reference`. BSS-eval also uses `interference`
/// as a second source when it is given and not silent.
pub fn score_pair(reference: &AudioBuffer, interference: Option<&AudioBuffer>, estimate: &AudioBuffer) -> Result<PairMetrics> {
    let mut scorer = PairScorer::new(reference, interference)?;
    scorer.score(estimate)
}

/// Scores several estimates against the same references, sharing the
/// BSS-eval factorization.
pub struct PairScorer<'a> {
    reference: &'a AudioBuffer,
    bss: BssEval,
}

impl<'a> PairScorer<'a> {
    pub fn new(reference: &'a AudioBuffer, interference: Option<&AudioBuffer>) -> Result<Self> {
        let mut sources = vec![reference];
        if let Some(i) = interference.filter(|i| !i.is_silent()) {
            sources.push(i);
        }
        Ok(Self {
            reference,
            bss: BssEval::new(&sources, 0, BSS_FILTER_LEN)?,
        })
    }

    pub fn score(&mut self, estimate: &AudioBuffer) -> Result<PairMetrics> {
        let r = self.reference;
        let bss = self.bss.score(estimate)?;
        Ok(PairMetrics {
            lsd: lsd(r, estimate)?,
            ssnr: ssnr(r, estimate)?,
            mcd: mcd(r, estimate)?,
            stoi: stoi(r, estimate)?,
            sdr: bss.sdr,
            sir: bss.sir,
            sar: bss.sar,
        })
    }
}

/// Grouping key of a report row.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupKey {
    Snr(f64),
    /// (+SNR, -SNR) cell.
    Cell(f64, f64),
    Gender(GenderPair),
    Label(String),
}

impl GroupKey {
    fn rank(&self) -> u8 {
        match self {
            GroupKey::Snr(_) => 0,
            GroupKey::Cell(..) => 1,
            GroupKey::Gender(_) => 2,
            GroupKey::Label(_) => 3,
        }
    }
}

impl Eq for GroupKey {}

impl Ord for GroupKey {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (GroupKey::Snr(a), GroupKey::Snr(b)) => a.total_cmp(b),
            (GroupKey::Cell(a, b), GroupKey::Cell(c, d)) => a.total_cmp(c).then(b.total_cmp(d)),
            (GroupKey::Gender(a), GroupKey::Gender(b)) => a.cmp(b),
            (GroupKey::Label(a), GroupKey::Label(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl PartialOrd for GroupKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupKey::Snr(s) => write!(f, "{s} dB"),
            GroupKey::Cell(p, n) => write!(f, "+{p}/-{n} dB"),
            GroupKey::Gender(g) => write!(f, "{g}"),
            GroupKey::Label(l) => f.write_str(l),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub key: GroupKey,
    pub count: usize,
    pub mean: PairMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub groups: Vec<GroupSummary>,
}

/// Order-independent mean: values are summed in ascending order.
fn stable_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-group means of scored pairs, groups sorted by key.
pub fn aggregate_report(pairs: &[(GroupKey, PairMetrics)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("metric pairs"));
    }
    let mut grouped: BTreeMap<GroupKey, Vec<PairMetrics>> = BTreeMap::new();
    for (k, m) in pairs {
        grouped.entry(k.clone()).or_default().push(*m);
    }
    let groups = grouped
        .into_iter()
        .map(|(key, ms)| {
            let mut mean = [0.0; 7];
            for (i, slot) in mean.iter_mut().enumerate() {
                *slot = stable_mean(ms.iter().map(|m| m.values()[i]).collect());
            }
            GroupSummary {
                key,
                count: ms.len(),
                mean: PairMetrics::from_values(mean),
            }
        })
        .collect();
    Ok(MetricReport { groups })
}

impl MetricReport {
    pub fn group(&self, key: &GroupKey) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| &g.key == key)
    }

    /// Aligned text table; PESQ is not computed and shows as `n/a`.
    pub fn to_table(&self) -> String {
        let width = self
            .groups
            .iter()
            .map(|g| g.key.to_string().len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = format!("{:<width$} {:>5}", "group", "n");
        for name in ["PESQ", "LSD", "SSNR", "MCD", "STOI", "SDR", "SIR", "SAR"] {
            let _ = write!(out, " {name:>8}");
        }
        out.push('\n');
        for g in &self.groups {
            let _ = write!(out, "{:<width$} {:>5} {:>8}", g.key.to_string(), g.count, "n/a");
            for v in g.mean.values() {
                let _ = write!(out, " {v:>8.3}");
            }
            out.push('\n');
        }
        out
    }

    /// `group,metric,value` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,metric,value\n");
        for g in &self.groups {
            let _ = writeln!(out, "{},pesq,n/a", g.key);
            for (name, v) in METRIC_NAMES.iter().zip(g.mean.values()) {
                let _ = writeln!(out, "{},{name},{v}", g.key);
            }
        }
        out
    }
}
