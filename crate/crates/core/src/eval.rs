//! Seeded mixture simulation and BSS metrics.
//!
//! A scenario places one directional talker and `K` independent Gaussian
//! noise sources in front of `M` microphones. Every source reaches the array
//! through its own short random FIR per microphone, so with `K ≥ M` the noise
//! field is full rank in every frequency bin while the talker stays close to
//! rank one.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::signal_io::{FrameConfig, Waveform};
use crate::{Error, Result};

/// Metric values are capped at this many dB.
pub const METRIC_CAP_DB: f64 = 100.0;
/// Length of the allowed distortion filter in [`bss_metrics`].
pub const DISTORTION_TAPS: usize = 32;
/// RMS of the reverberant target at the reference microphone.
const TARGET_RMS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub mics: usize,
    pub noise_sources: usize,
    pub target_filter_len: usize,
    pub noise_filter_len: usize,
    pub input_snr_db: f64,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Target-silent intervals in seconds, `[start, end)`.
    pub silence: Vec<[f64; 2]>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            mics: 4,
            noise_sources: 19,
            target_filter_len: 64,
            noise_filter_len: 64,
            input_snr_db: 0.0,
            duration_s: 3.0,
            sample_rate: 16_000,
            seed: 0,
            silence: vec![[0.6, 0.9], [1.8, 2.1]],
        }
    }
}

impl Scenario {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.mics < 2 {
            return Err(Error::config("scenario.mics", "need at least two microphones"));
        }
        if self.noise_sources < self.mics {
            return Err(Error::config("scenario.noise_sources", "must be at least the number of microphones"));
        }
        if self.target_filter_len == 0 {
            return Err(Error::config("scenario.target_filter_len", "must be positive"));
        }
        if self.noise_filter_len == 0 {
            return Err(Error::config("scenario.noise_filter_len", "must be positive"));
        }
        if !self.input_snr_db.is_finite() {
            return Err(Error::config("scenario.input_snr_db", "must be finite"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("scenario.sample_rate", "must be positive"));
        }
        if !(self.duration_s > 0.0) || self.num_samples() == 0 {
            return Err(Error::config("scenario.duration_s", "must be positive"));
        }
        for &[a, b] in &self.silence {
            if !(a >= 0.0 && b > a && b <= self.duration_s) {
                return Err(Error::config("scenario.silence", format!("invalid interval [{a}, {b})")));
            }
        }
        Ok(())
    }
}

/// Reference signals of a simulated mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub target_image: Waveform,
    pub noise_image: Waveform,
    pub clean_target: Waveform,
}

/// Renders the scenario. Output is bit-identical for equal scenarios.
pub fn simulate(scn: &Scenario) -> Result<(Waveform, GroundTruth)> {
    scn.validate()?;
    render(scn)
}

fn render(scn: &Scenario) -> Result<(Waveform, GroundTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed);
    let n = scn.num_samples();
    let fs = scn.sample_rate;
    let clean = speech_like(scn, &mut rng);

    let mut target: Vec<Vec<f64>> = (0..scn.mics)
        .map(|m| {
            let h = target_filter(scn.target_filter_len, m, &mut rng);
            convolve(&clean, &h, n)
        })
        .collect();
    let rms = (target[0].iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        let g = TARGET_RMS / rms;
        target.iter_mut().flatten().for_each(|v| *v *= g);
    }

    let mut noise = vec![vec![0.0; n]; scn.mics];
    for _ in 0..scn.noise_sources {
        let src: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for chan in noise.iter_mut() {
            let h = noise_filter(scn.noise_filter_len, &mut rng);
            for (acc, v) in chan.iter_mut().zip(convolve(&src, &h, n)) {
                *acc += v;
            }
        }
    }
    let pt: f64 = target[0].iter().map(|v| v * v).sum();
    let pn: f64 = noise[0].iter().map(|v| v * v).sum();
    if pt > 0.0 && pn > 0.0 {
        let g = (pt / pn / 10f64.powf(scn.input_snr_db / 10.0)).sqrt();
        noise.iter_mut().flatten().for_each(|v| *v *= g);
    }

    let mixture: Vec<Vec<f64>> = target
        .iter()
        .zip(&noise)
        .map(|(t, v)| t.iter().zip(v).map(|(a, b)| a + b).collect())
        .collect();
    let truth = GroundTruth {
        target_image: Waveform::new(target, fs)?,
        noise_image: Waveform::new(noise, fs)?,
        clean_target: Waveform::mono(clean, fs)?,
    };
    Ok((Waveform::new(mixture, fs)?, truth))
}

/// Harmonic complex with vibrato and syllabic amplitude modulation, exactly
/// zero inside the silence intervals.
fn speech_like(scn: &Scenario, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = scn.num_samples();
    let fs = scn.sample_rate as f64;
    let f0 = rng.random_range(110.0..200.0);
    let glide_rate = rng.random_range(0.3..0.9);
    let syllable_rate = rng.random_range(3.0..5.0);
    let syllable_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let formants = [rng.random_range(500.0..800.0), rng.random_range(1000.0..1800.0), rng.random_range(2200.0..3000.0)];
    let max_f = (0.45 * fs).min(7000.0);
    let harmonics = (max_f / (f0 * 1.3)) as usize;
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();

    let mut out = vec![0.0; n];
    let mut phase = 0.0;
    for (t, o) in out.iter_mut().enumerate() {
        let sec = t as f64 / fs;
        if scn.silence.iter().any(|&[a, b]| sec >= a && sec < b) {
            phase += std::f64::consts::TAU * f0 / fs;
            continue;
        }
        let f = f0
            * (1.0 + 0.2 * (std::f64::consts::TAU * glide_rate * sec).sin())
            * (1.0 + 0.01 * (std::f64::consts::TAU * 5.5 * sec).sin());
        phase += std::f64::consts::TAU * f / fs;
        let env = (0.5 - 0.5 * (std::f64::consts::TAU * syllable_rate * sec + syllable_phase).cos()).powf(1.5);
        let mut v = 0.0;
        for (h, ph) in phases.iter().enumerate() {
            let k = (h + 1) as f64;
            let fh = k * f;
            if fh >= max_f {
                break;
            }
            let gain: f64 = formants
                .iter()
                .map(|fc| 1.0 / (1.0 + ((fh - fc) / (0.15 * fc)).powi(2)))
                .sum::<f64>()
                + 0.05;
            v += gain / k.sqrt() * (k * phase + ph).sin();
        }
        *o = env * v;
    }
    out
}

/// Direct path at a small per-microphone delay plus decaying reflections.
fn target_filter(len: usize, mic: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut h = vec![0.0; len];
    let delay = (mic * 2 + rng.random_range(0..3)).min(len - 1);
    h[delay] = 1.0;
    let tau = len as f64 / 4.0;
    for (t, v) in h.iter_mut().enumerate().skip(delay + 1) {
        *v += 0.3 * (-((t - delay) as f64) / tau).exp() * rng.sample::<f64, _>(StandardNormal);
    }
    h
}

/// Exponentially decaying Gaussian taps after a random onset.
fn noise_filter(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut h = vec![0.0; len];
    let onset = rng.random_range(0..=(len / 4));
    let tau = len as f64 / 6.0;
    for (t, v) in h.iter_mut().enumerate().skip(onset) {
        *v = (-((t - onset) as f64) / tau).exp() * rng.sample::<f64, _>(StandardNormal);
    }
    h
}

/// Causal convolution truncated to `n` samples.
fn convolve(x: &[f64], h: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 {
            continue;
        }
        for (yt, &xv) in y[k.min(n)..].iter_mut().zip(x) {
            *yt += hk * xv;
        }
    }
    y
}

/// Frames whose whole window support in the reference-microphone target image
/// is exactly zero.
pub fn true_silent_frames(truth: &GroundTruth, cfg: FrameConfig) -> Vec<usize> {
    let t = truth.target_image.channel(0);
    let n = t.len();
    (0..cfg.num_frames(n))
        .filter(|&j| {
            let start = cfg.frame_start(j);
            let lo = start.max(0) as usize;
            let hi = ((start + cfg.window as isize).max(0) as usize).min(n);
            t[lo.min(hi)..hi].iter().all(|v| *v == 0.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

/// Orthogonal decomposition of an estimate, see [`decompose`].
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub target: Vec<f64>,
    pub interference: Vec<f64>,
    pub artifacts: Vec<f64>,
}

fn energy(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return METRIC_CAP_DB;
    }
    if num <= 0.0 {
        return -METRIC_CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
}

/// Least-squares projection of `e` onto the span of `taps` delayed copies of
/// every reference. All signals are zero-padded to `len + taps - 1`.
fn project(e: &[f64], refs: &[&[f64]], taps: usize) -> Vec<f64> {
    let len = e.len();
    let dim = refs.len() * taps;
    let delayed = |r: usize, d: usize, t: usize| -> f64 {
        if t >= d && t - d < len {
            refs[r][t - d]
        } else {
            0.0
        }
    };
    let xcorr = |a: &[f64], b: &[f64], lag: usize| -> f64 { a[lag..].iter().zip(b).map(|(x, y)| x * y).sum() };

    // Gram entries depend only on the delay difference.
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    for r1 in 0..refs.len() {
        for r2 in 0..refs.len() {
            let fwd: Vec<f64> = (0..taps).map(|l| xcorr(refs[r1], refs[r2], l)).collect();
            let bwd: Vec<f64> = (0..taps).map(|l| xcorr(refs[r2], refs[r1], l)).collect();
            for d1 in 0..taps {
                for d2 in 0..taps {
                    // ⟨s_r1(t - d1), s_r2(t - d2)⟩
                    gram[(r1 * taps + d1, r2 * taps + d2)] = if d2 >= d1 { fwd[d2 - d1] } else { bwd[d1 - d2] };
                }
            }
        }
    }
    let rhs = DVector::from_fn(dim, |k, _| {
        let (r, d) = (k / taps, k % taps);
        refs[r].iter().zip(&e[d.min(len)..]).map(|(a, b)| a * b).sum()
    });
    let coef = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(dim)),
    };
    (0..len + taps - 1)
        .map(|t| (0..dim).map(|k| coef[k] * delayed(k / taps, k % taps, t)).sum())
        .collect()
}

/// Splits `estimate` into target, interference and artifact parts using
/// `taps`-tap distortion filters on the references. Lengths are trimmed to the
/// shortest signal.
pub fn decompose(estimate: &[f64], target: &[f64], interferers: &[&[f64]], taps: usize) -> Result<Decomposition> {
    if taps == 0 {
        return Err(Error::InvalidInput("distortion filter needs at least one tap".into()));
    }
    let len = interferers
        .iter()
        .map(|s| s.len())
        .chain([estimate.len(), target.len()])
        .min()
        .unwrap_or(0);
    if energy(&target[..len]) == 0.0 {
        return Err(Error::InvalidInput("zero-energy target reference".into()));
    }
    let mut refs: Vec<&[f64]> = vec![&target[..len]];
    refs.extend(interferers.iter().map(|s| &s[..len]));
    let e = &estimate[..len];
    let p_target = project(e, &refs[..1], taps);
    let p_all = project(e, &refs, taps);
    let padded = |t: usize| if t < len { e[t] } else { 0.0 };
    Ok(Decomposition {
        interference: p_all.iter().zip(&p_target).map(|(a, b)| a - b).collect(),
        artifacts: p_all.iter().enumerate().map(|(t, a)| padded(t) - a).collect(),
        target: p_target,
    })
}

/// SDR, SIR and SAR of a single-channel estimate.
pub fn bss_metrics(estimate: &[f64], target: &[f64], interferers: &[&[f64]], taps: usize) -> Result<Metrics> {
    let d = decompose(estimate, target, interferers, taps)?;
    let st = energy(&d.target);
    let ei = energy(&d.interference);
    let ea = energy(&d.artifacts);
    let noise: Vec<f64> = d.interference.iter().zip(&d.artifacts).map(|(a, b)| a + b).collect();
    let sig: Vec<f64> = d.target.iter().zip(&d.interference).map(|(a, b)| a + b).collect();
    Ok(Metrics {
        sdr: ratio_db(st, energy(&noise)),
        sir: ratio_db(st, ei),
        sar: ratio_db(energy(&sig), ea),
    })
}

/// Metrics of the reference-microphone channel of `estimate` against the
/// reference-microphone target and noise images.
pub fn sdr_sir_sar(estimate: &Waveform, truth: &GroundTruth) -> Result<Metrics> {
    bss_metrics(
        estimate.channel(0),
        truth.target_image.channel(0),
        &[truth.noise_image.channel(0)],
        DISTORTION_TAPS,
    )
}

pub fn improvement(metric_out: f64, metric_in: f64) -> f64 {
    metric_out - metric_in
}
