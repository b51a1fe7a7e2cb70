//! End-to-end enhancement runs and multi-seed experiments.
//!
//! A run goes: STFT → rank-1 separation (ILRMA or IDLMA) → optional noise
//! prior from noise-only frames → optional RCSCME → ISTFT. When ground truth
//! is available every RCSCME iteration is scored, so the report carries the
//! SDR improvement trace and its maximum.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demix::{idlma, ilrma, mixing_estimate, select_target, DemixingState, IdlmaConfig, IlrmaConfig, MixingEstimate, TargetSelector};
use crate::em::{detect_noise_frames, estimate_noise_prior, run_rcscme_with, wiener_extract, RcscmeConfig, SpeechPrior};
use crate::eval::{improvement, sdr_sir_sar, simulate, true_silent_frames, GroundTruth, Metrics, Scenario};
use crate::signal_io::{istft, stft, Spectrogram, Waveform};
use crate::source_models::{CommandDenoiser, Denoiser, ReferenceDenoiser};
use crate::{Error, Result, C64};

/// Environment variable that overrides the configured denoiser command.
pub const DENOISER_ENV: &str = "RCSCME_DENOISER_CMD";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "ilrma")]
    Ilrma,
    #[serde(rename = "idlma")]
    Idlma,
    #[serde(rename = "ilrma+rcscme")]
    IlrmaRcscme,
    #[serde(rename = "idlma+rcscme")]
    IdlmaRcscme,
    #[serde(rename = "idlma+rcscme-ss")]
    IdlmaRcscmeSs,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Ilrma,
        Mode::Idlma,
        Mode::IlrmaRcscme,
        Mode::IdlmaRcscme,
        Mode::IdlmaRcscmeSs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ilrma => "ilrma",
            Mode::Idlma => "idlma",
            Mode::IlrmaRcscme => "ilrma+rcscme",
            Mode::IdlmaRcscme => "idlma+rcscme",
            Mode::IdlmaRcscmeSs => "idlma+rcscme-ss",
        }
    }

    pub fn uses_idlma(self) -> bool {
        matches!(self, Mode::Idlma | Mode::IdlmaRcscme | Mode::IdlmaRcscmeSs)
    }

    pub fn uses_rcscme(self) -> bool {
        matches!(self, Mode::IlrmaRcscme | Mode::IdlmaRcscme | Mode::IdlmaRcscmeSs)
    }

    pub fn self_supervised(self) -> bool {
        self == Mode::IdlmaRcscmeSs
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| {
                let known: Vec<_> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                Error::config("mode", format!("unknown mode {s:?}, expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Iterations {
    pub ilrma: usize,
    pub idlma: usize,
    pub idlma_refresh: usize,
    pub rcscme: usize,
}

impl Default for Iterations {
    fn default() -> Self {
        Self {
            ilrma: 50,
            idlma: 90,
            idlma_refresh: 30,
            rcscme: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_p: f64,
    pub beta_p: f64,
    pub theta: f64,
    pub epsilon_scale: f64,
    pub bases: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            alpha: 1.3,
            beta: 1e-16,
            alpha_p: 800.0,
            beta_p: 1e4,
            theta: 1e-3,
            epsilon_scale: 0.1,
            bases: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftSettings {
    pub window_ms: f64,
    pub hop_ms: f64,
}

impl Default for StftSettings {
    fn default() -> Self {
        Self {
            window_ms: 64.0,
            hop_ms: 32.0,
        }
    }
}

/// Full run configuration. Loaded from TOML; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Use the clean target image as the denoiser and, in self-supervised
    /// mode, the true silent frames as noise-only frames. Needs ground truth.
    pub oracle: bool,
    /// Denoiser command with `{in}` and `{out}` placeholders.
    pub adapter: Option<String>,
    /// Index of the target source for IDLMA.
    pub target: usize,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub iterations: Iterations,
    pub hyper: Hyper,
    pub stft: StftSettings,
    pub scenario: Option<Scenario>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::IlrmaRcscme,
            seed: 0,
            oracle: false,
            adapter: None,
            target: 0,
            input: None,
            output: None,
            iterations: Iterations::default(),
            hyper: Hyper::default(),
            stft: StftSettings::default(),
            scenario: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Replaces the adapter command with the environment override, if set.
    pub fn apply_env(&mut self) {
        if let Ok(cmd) = std::env::var(DENOISER_ENV) {
            if !cmd.trim().is_empty() {
                self.adapter = Some(cmd);
            }
        }
    }

    /// Checks every field that does not depend on the input signal.
    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        let it = &self.iterations;
        let checks: [(bool, &str, &str); 12] = [
            (h.alpha > 0.0, "hyper.alpha", "must be positive"),
            (h.beta >= 0.0, "hyper.beta", "must be non-negative"),
            (h.alpha_p > 0.0, "hyper.alpha_p", "must be positive"),
            (h.beta_p > 0.0, "hyper.beta_p", "must be positive"),
            (h.theta > 0.0, "hyper.theta", "must be positive"),
            (h.epsilon_scale > 0.0, "hyper.epsilon_scale", "must be positive"),
            (h.bases >= 1, "hyper.bases", "must be at least 1"),
            (it.idlma_refresh >= 1, "iterations.idlma_refresh", "must be at least 1"),
            (!self.mode.uses_rcscme() || it.rcscme >= 1, "iterations.rcscme", "must be at least 1"),
            (self.stft.window_ms > 0.0, "stft.window_ms", "must be positive"),
            (self.stft.hop_ms > 0.0, "stft.hop_ms", "must be positive"),
            (
                !self.mode.uses_idlma() || self.oracle || self.adapter.is_some(),
                "adapter",
                "this mode needs a denoiser command or oracle = true",
            ),
        ];
        for (ok, field, msg) in checks {
            if !ok {
                return Err(Error::config(field, msg));
            }
        }
        if let Some(s) = &self.scenario {
            s.validate()?;
        }
        Ok(())
    }

    fn speech_prior(&self) -> SpeechPrior {
        SpeechPrior {
            alpha: self.hyper.alpha,
            beta: self.hyper.beta,
        }
    }
}

/// Diagnostics and traces of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub mode: Mode,
    pub seed: u64,
    pub target_index: usize,
    /// Separation cost before the first sweep and after every half-step.
    pub separation_cost: Vec<f64>,
    pub rcscme_initial_objective: Option<f64>,
    /// RCSCME objective after every iteration.
    pub rcscme_objective: Vec<f64>,
    /// Mean completion weight λ after every iteration.
    pub lambda_trace: Vec<f64>,
    /// Number of noise-only frames used for the prior.
    pub noise_frames: Option<usize>,
    /// Mean Frobenius norm of the prior scale matrices.
    pub mean_prior_norm: Option<f64>,
    pub input_metrics: Option<Metrics>,
    pub separation_metrics: Option<Metrics>,
    pub output_metrics: Option<Metrics>,
    /// SDR improvement after every RCSCME iteration, or of the separation
    /// output for modes without RCSCME.
    pub sdr_improvement: Vec<f64>,
    /// 1-based RCSCME iteration with the largest SDR improvement.
    pub best_iteration: Option<usize>,
    pub max_sdr_improvement: Option<f64>,
}

impl Report {
    pub fn best_iteration_within(&self, limit: usize) -> Option<bool> {
        self.best_iteration.map(|b| b <= limit)
    }
}

/// Intermediate quantities kept for inspection.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Intermediates {
    /// Demixing matrices per bin as `[row][col] = [re, im]`.
    pub demixing: Vec<Vec<Vec<[f64; 2]>>>,
    /// Rank-deficient noise SCM per bin.
    pub noise_scm: Vec<Vec<Vec<[f64; 2]>>>,
    /// Final completion weight per bin.
    pub lambda: Vec<f64>,
    pub lambda_trace: Vec<f64>,
    pub noise_frames: Vec<usize>,
}

fn matrix_json(m: &crate::CMatrix) -> Vec<Vec<[f64; 2]>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| [m[(r, c)].re, m[(r, c)].im]).collect())
        .collect()
}

impl Intermediates {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string(self).map_err(|e| Error::Numerical(e.to_string()))?;
        std::fs::write(dir.join("intermediates.json"), text)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Multichannel target image estimate.
    pub output: Waveform,
    pub report: Report,
    pub intermediates: Intermediates,
}

/// Back-projected target image at every microphone: `a_i y_nt`.
fn target_image(state: &DemixingState, mix: &MixingEstimate) -> Result<Spectrogram> {
    let m = mix.a.first().map_or(0, |a| a.nrows());
    let y = &state.y;
    let mut data = ndarray::Array3::<C64>::zeros((m, y.num_bins(), y.num_frames()));
    for i in 0..y.num_bins() {
        let a = mix.steering(i);
        for j in 0..y.num_frames() {
            let s = y.data()[[mix.target, i, j]];
            for c in 0..m {
                data[[c, i, j]] = a[c] * s;
            }
        }
    }
    y.with_data(data)
}

fn to_waveform(s: &Spectrogram, len: usize) -> Result<Waveform> {
    Ok(istft(s)?.resized(len))
}

/// Runs the configured mode on a loaded mixture. With `truth` the report
/// carries metrics; `oracle` configurations require it.
pub fn run_on_mixture(cfg: &PipelineConfig, mixture: &Waveform, truth: Option<&GroundTruth>) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.oracle && truth.is_none() {
        return Err(Error::config("oracle", "oracle mode needs a simulated scenario"));
    }
    let x = stft(mixture, cfg.stft.window_ms, cfg.stft.hop_ms)?;
    let len = mixture.len();
    let fs = mixture.sample_rate();

    let reference = truth
        .map(|t| {
            let mono = Waveform::mono(t.target_image.channel(0).to_vec(), fs)?;
            stft(&mono, cfg.stft.window_ms, cfg.stft.hop_ms)
        })
        .transpose()?;
    let denoiser: Option<Box<dyn Denoiser>> = if cfg.oracle {
        Some(Box::new(ReferenceDenoiser::new(reference.as_ref().expect("checked above"))?))
    } else if let Some(cmd) = &cfg.adapter {
        Some(Box::new(CommandDenoiser::new(cmd.clone(), fs)?))
    } else {
        None
    };
    let score = |w: &Waveform| -> Result<Option<Metrics>> { truth.map(|t| sdr_sir_sar(w, t)).transpose() };
    let input_metrics = score(mixture)?;

    let (mut state, separation_cost) = if cfg.mode.uses_idlma() {
        let d = denoiser.as_deref().expect("validated");
        let run = idlma(
            &x,
            d,
            &IdlmaConfig {
                iterations: cfg.iterations.idlma,
                refresh_every: cfg.iterations.idlma_refresh,
                epsilon_scale: cfg.hyper.epsilon_scale,
                target: cfg.target,
            },
        )?;
        (run.state, run.cost_trace)
    } else {
        let run = ilrma(
            &x,
            &IlrmaConfig {
                iterations: cfg.iterations.ilrma,
                bases: cfg.hyper.bases,
                seed: cfg.seed,
            },
        )?;
        (run.state, run.cost_trace)
    };
    if !cfg.mode.uses_idlma() {
        let selector = match (&reference, denoiser.as_deref()) {
            (Some(r), _) => TargetSelector::Oracle(r),
            (None, Some(d)) => TargetSelector::Denoiser(d),
            (None, None) => TargetSelector::Fixed(cfg.target),
        };
        state.target = select_target(&state.y, &selector)?;
    }
    let mix = mixing_estimate(&state)?;
    let separated = target_image(&state, &mix)?;
    let separated_wave = to_waveform(&separated, len)?;
    let separation_metrics = score(&separated_wave)?;

    let mut intermediates = Intermediates {
        demixing: state.w.iter().map(matrix_json).collect(),
        ..Intermediates::default()
    };
    let mut report = Report {
        mode: cfg.mode,
        seed: cfg.seed,
        target_index: state.target,
        separation_cost,
        rcscme_initial_objective: None,
        rcscme_objective: Vec::new(),
        lambda_trace: Vec::new(),
        noise_frames: None,
        mean_prior_norm: None,
        input_metrics,
        separation_metrics,
        output_metrics: separation_metrics,
        sdr_improvement: Vec::new(),
        best_iteration: None,
        max_sdr_improvement: None,
    };

    if !cfg.mode.uses_rcscme() {
        if let (Some(i), Some(o)) = (input_metrics, separation_metrics) {
            let imp = improvement(o.sdr, i.sdr);
            report.sdr_improvement.push(imp);
            report.max_sdr_improvement = Some(imp);
        }
        return Ok(RunOutput {
            output: separated_wave,
            report,
            intermediates,
        });
    }

    let prior = if cfg.mode.self_supervised() {
        let frames = match (cfg.oracle, truth) {
            (true, Some(t)) => true_silent_frames(t, x.frame_config()),
            _ => {
                let d = denoiser.as_deref().expect("validated");
                detect_noise_frames(&x, d, cfg.hyper.theta, 0)?
            }
        };
        report.noise_frames = Some(frames.len());
        intermediates.noise_frames = frames.clone();
        if frames.is_empty() {
            warn!("no noise-only frames; running without the noise prior");
            None
        } else {
            let p = estimate_noise_prior(&x, &frames, cfg.hyper.alpha_p, cfg.hyper.beta_p)?;
            report.mean_prior_norm = Some(p.mean_scale_norm());
            Some(p)
        }
    } else {
        None
    };

    let em_cfg = RcscmeConfig {
        iterations: cfg.iterations.rcscme,
        speech_prior: cfg.speech_prior(),
        epsilon_scale: cfg.hyper.epsilon_scale,
    };
    let mut per_iteration: Vec<Metrics> = Vec::new();
    let run = run_rcscme_with(&x, &mix, &state, &em_cfg, prior.as_ref(), |_, model, em_state| {
        if truth.is_some() {
            let out = to_waveform(&wiener_extract(&x, model, em_state)?, len)?;
            per_iteration.push(score(&out)?.expect("truth present"));
        }
        Ok(())
    })?;
    intermediates.noise_scm = run.model.noise.iter().map(|c| matrix_json(c.base().as_matrix())).collect();
    intermediates.lambda = run.model.lambdas();
    intermediates.lambda_trace = run.lambda_trace.clone();

    report.rcscme_initial_objective = Some(run.initial_objective);
    report.rcscme_objective = run.objective_trace;
    report.lambda_trace = run.lambda_trace;
    let output = to_waveform(&run.output, len)?;
    report.output_metrics = per_iteration.last().copied();
    if let Some(i) = input_metrics {
        report.sdr_improvement = per_iteration.iter().map(|m| improvement(m.sdr, i.sdr)).collect();
        let best = report
            .sdr_improvement
            .iter()
            .copied()
            .enumerate()
            .fold(None, |acc: Option<(usize, f64)>, (k, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((k, v)),
            });
        report.best_iteration = best.map(|(k, _)| k + 1);
        report.max_sdr_improvement = best.map(|(_, v)| v);
    }
    info!(
        "{}: max SDR improvement {:?} at iteration {:?}",
        cfg.mode, report.max_sdr_improvement, report.best_iteration
    );
    Ok(RunOutput {
        output,
        report,
        intermediates,
    })
}

/// Runs on the configured input WAV or simulated scenario.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if let Some(scn) = &cfg.scenario {
        let (mix, truth) = simulate(&scn.clone().with_seed(cfg.seed))?;
        return run_on_mixture(cfg, &mix, Some(&truth));
    }
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| Error::config("input", "need an input file or a scenario"))?;
    let mix = crate::signal_io::read_wav(input)?;
    run_on_mixture(cfg, &mix, None)
}

/// One run of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub kind: String,
    pub scenario: usize,
    pub mode: String,
    pub seed: Option<u64>,
    pub runs: usize,
    pub best_iteration: Option<usize>,
    pub sdr: Option<f64>,
    pub sir: Option<f64>,
    pub sar: Option<f64>,
    pub input_sdr: Option<f64>,
    pub max_sdr_improvement: Option<f64>,
    pub mean_sdr_improvement: Option<f64>,
    pub error: Option<String>,
}

/// Per-run rows followed by one summary row per scenario and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTable {
    pub rows: Vec<ExperimentRow>,
    pub summary: Vec<ExperimentRow>,
}

impl ExperimentTable {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows.iter().chain(&self.summary) {
            w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Summary row of a scenario and mode.
    pub fn summary_for(&self, scenario: usize, mode: Mode) -> Option<&ExperimentRow> {
        self.summary
            .iter()
            .find(|r| r.scenario == scenario && r.mode == mode.as_str())
    }

    /// Per-run rows of a scenario and mode, in seed order.
    pub fn rows_for(&self, scenario: usize, mode: Mode) -> Vec<&ExperimentRow> {
        self.rows
            .iter()
            .filter(|r| r.scenario == scenario && r.mode == mode.as_str())
            .collect()
    }
}

/// Cross product of scenarios, modes and seeds; the seed drives both the
/// scenario and the NMF initialisation. Failed runs are recorded with their
/// error and do not stop the experiment.
pub fn run_experiment(base: &PipelineConfig, scenarios: &[Scenario], modes: &[Mode], seeds: &[u64]) -> Result<ExperimentTable> {
    if scenarios.is_empty() {
        return Err(Error::config("scenario", "need at least one scenario"));
    }
    for s in scenarios {
        s.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..scenarios.len())
        .flat_map(|s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let mut rows: Vec<ExperimentRow> = jobs
        .par_iter()
        .flat_map_iter(|&(s, seed)| {
            let sim = simulate(&scenarios[s].clone().with_seed(seed));
            modes
                .iter()
                .map(|&mode| {
                    let mut cfg = base.clone();
                    cfg.mode = mode;
                    cfg.seed = seed;
                    cfg.scenario = Some(scenarios[s].clone());
                    let result = sim
                        .as_ref()
                        .map_err(|e| Error::InvalidInput(e.to_string()))
                        .and_then(|(mix, truth)| run_on_mixture(&cfg, mix, Some(truth)));
                    run_row(s, mode, seed, result)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    rows.sort_by(|a, b| (a.scenario, mode_rank(&a.mode), a.seed).cmp(&(b.scenario, mode_rank(&b.mode), b.seed)));

    let mut summary = Vec::new();
    for s in 0..scenarios.len() {
        for &mode in modes {
            let imps: Vec<f64> = rows
                .iter()
                .filter(|r| r.scenario == s && r.mode == mode.as_str())
                .filter_map(|r| r.max_sdr_improvement)
                .collect();
            let mean = (!imps.is_empty()).then(|| imps.iter().sum::<f64>() / imps.len() as f64);
            let max = imps.iter().copied().reduce(f64::max);
            summary.push(ExperimentRow {
                kind: "summary".into(),
                scenario: s,
                mode: mode.as_str().into(),
                seed: None,
                runs: imps.len(),
                best_iteration: None,
                sdr: None,
                sir: None,
                sar: None,
                input_sdr: None,
                max_sdr_improvement: max,
                mean_sdr_improvement: mean,
                error: None,
            });
        }
    }
    Ok(ExperimentTable { rows, summary })
}

fn mode_rank(name: &str) -> usize {
    Mode::ALL.iter().position(|m| m.as_str() == name).unwrap_or(usize::MAX)
}

fn run_row(scenario: usize, mode: Mode, seed: u64, result: Result<RunOutput>) -> ExperimentRow {
    let mut row = ExperimentRow {
        kind: "run".into(),
        scenario,
        mode: mode.as_str().into(),
        seed: Some(seed),
        runs: 1,
        best_iteration: None,
        sdr: None,
        sir: None,
        sar: None,
        input_sdr: None,
        max_sdr_improvement: None,
        mean_sdr_improvement: None,
        error: None,
    };
    match result {
        Ok(out) => {
            let r = out.report;
            row.best_iteration = r.best_iteration;
            if let Some(m) = r.output_metrics {
                (row.sdr, row.sir, row.sar) = (Some(m.sdr), Some(m.sir), Some(m.sar));
            }
            row.input_sdr = r.input_metrics.map(|m| m.sdr);
            row.max_sdr_improvement = r.max_sdr_improvement;
        }
        Err(e) => {
            warn!("{mode} seed {seed}: {e}");
            row.runs = 0;
            row.error = Some(e.to_string());
        }
    }
    row
}
