//! Rank-constrained spatial covariance estimation (RCSCME).
//!
//! The observation in bin `(i, j)` is modelled as zero-mean complex Gaussian
//! with covariance
//!
//! ```text
//! R°_ij = r^t_ij a_i a_iᴴ + r^n_ij (R'_i + λ_i v_i v_iᴴ)
//! ```
//!
//! where `a_i` is the target steering vector and `R'_i` the rank-(M-1) noise
//! SCM, both taken from a rank-1 separation. MAP-EM estimates the variances
//! and the completion weights `λ_i` under an inverse-gamma prior on `r^t`.
//! The self-supervised variant adds an inverse matrix gamma prior on the noise
//! SCM whose scale matrix is the empirical covariance of noise-only frames.
//!
//! All couplings are within one frequency bin, so each step runs as a
//! parallel map over bins with no cross-bin reductions.

use log::{debug, warn};
use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::demix::{bin_matrix, DemixingState, MixingEstimate};
use crate::hermitian::{hpd_inverse, HermitianMatrix, RankOneCompletion};
use crate::signal_io::Spectrogram;
use crate::source_models::{floor_power, Denoiser};
use crate::{CMatrix, CVector, Error, Result, C64};

/// Conditioning limit for the observed-model covariance before loading.
const MAX_COND: f64 = 1e12;
/// Relative diagonal loading applied to ill-conditioned covariances.
const LOADING: f64 = 1e-10;
/// Smallest variance kept after an M-step.
const VARIANCE_FLOOR: f64 = 1e-300;

/// Inverse-gamma prior on the target variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeechPrior {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SpeechPrior {
    fn default() -> Self {
        Self {
            alpha: 1.3,
            beta: 1e-16,
        }
    }
}

/// Inverse matrix gamma prior on the noise SCM.
///
/// Fields are public so that degenerate settings can be built in tests;
/// [`NoisePrior::new`] and [`estimate_noise_prior`] enforce `alpha_p > M-1`
/// and `beta_p > 0`.
#[derive(Debug, Clone)]
pub struct NoisePrior {
    pub alpha_p: f64,
    pub beta_p: f64,
    /// Per-bin scale matrix.
    pub scale: Vec<HermitianMatrix>,
    /// Frames the scale matrix was estimated from.
    pub frames: Vec<usize>,
}

impl NoisePrior {
    pub fn new(alpha_p: f64, beta_p: f64, scale: Vec<HermitianMatrix>, frames: Vec<usize>) -> Result<Self> {
        let m = scale.first().map_or(0, HermitianMatrix::dim);
        if !(alpha_p > m as f64 - 1.0) {
            return Err(Error::config("hyper.alpha_p", format!("must exceed M-1 = {}", m as f64 - 1.0)));
        }
        if !(beta_p > 0.0) {
            return Err(Error::config("hyper.beta_p", "must be positive"));
        }
        Ok(Self {
            alpha_p,
            beta_p,
            scale,
            frames,
        })
    }

    /// Mean Frobenius norm of the scale matrices across bins.
    pub fn mean_scale_norm(&self) -> f64 {
        if self.scale.is_empty() {
            return 0.0;
        }
        self.scale.iter().map(|r| r.as_matrix().norm()).sum::<f64>() / self.scale.len() as f64
    }
}

/// Target steering vectors and completed noise SCMs, one per bin.
#[derive(Debug, Clone)]
pub struct ScmModel {
    pub steering: Vec<CVector>,
    pub noise: Vec<RankOneCompletion>,
}

impl ScmModel {
    pub fn num_bins(&self) -> usize {
        self.steering.len()
    }

    pub fn num_channels(&self) -> usize {
        self.steering.first().map_or(0, |a| a.len())
    }

    /// Rank-1 target SCM `a aᴴ`.
    pub fn target_scm(&self, i: usize) -> CMatrix {
        &self.steering[i] * self.steering[i].adjoint()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.noise.iter().map(RankOneCompletion::lambda).collect()
    }
}

/// Time-varying target and noise variances, shape `(bin, frame)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmState {
    pub target_var: Array2<f64>,
    pub noise_var: Array2<f64>,
}

/// Posterior statistics from the E-step.
#[derive(Debug, Clone)]
pub struct EStats {
    /// Posterior second moment of the target source, `(bin, frame)`.
    pub target_moment: Array2<f64>,
    /// Posterior second moment of the noise image, indexed `[bin][frame]`.
    pub noise_moment: Vec<Vec<CMatrix>>,
    /// Number of bins where diagonal loading was applied.
    pub loaded_bins: usize,
}

/// Builds the SCM model from a back-projected rank-1 separation.
///
/// The noise SCM is the sample covariance of the observation with the target
/// output removed, `ŷ = A_i (y_ij with entry n_t zeroed)`, and is completed
/// along its unit null vector with `λ_i = tr(R'_i)/(M-1)`.
pub fn build_scm_model(x: &Spectrogram, mix: &MixingEstimate, demix: &DemixingState) -> Result<ScmModel> {
    let m = x.num_channels();
    if m < 2 {
        return Err(Error::InvalidInput("RCSCME needs at least two channels".into()));
    }
    if mix.a.len() != x.num_bins() || demix.w.len() != x.num_bins() {
        return Err(Error::InvalidInput("mixing estimate does not match the observation".into()));
    }
    let target = mix.target;
    let noise: Result<Vec<RankOneCompletion>> = (0..x.num_bins())
        .into_par_iter()
        .map(|i| {
            let base = noise_scm_bin(x, &mix.a[i], &demix.w[i], target, i);
            let lambda0 = base.trace() / (m - 1) as f64;
            let lambda0 = if lambda0 > 0.0 { lambda0 } else { f64::MIN_POSITIVE };
            RankOneCompletion::along_null_vector(base, lambda0)
        })
        .collect();
    Ok(ScmModel {
        steering: (0..x.num_bins()).map(|i| mix.a[i].column(target).into_owned()).collect(),
        noise: noise?,
    })
}

fn noise_scm_bin(x: &Spectrogram, a: &CMatrix, w: &CMatrix, target: usize, i: usize) -> HermitianMatrix {
    let xi = bin_matrix(x, i);
    let mut y = w * &xi;
    y.row_mut(target).fill(C64::new(0.0, 0.0));
    let yhat = a * y;
    let frames = xi.ncols() as f64;
    HermitianMatrix::symmetrize(&yhat * yhat.adjoint() / C64::new(frames, 0.0))
}

/// Initial variances: `r^t = max(|y_nt|², ε)` with `ε = epsilon_scale ·
/// mean |y_nt|²`, and `r^n = 1`.
pub fn initial_state(demix: &DemixingState, epsilon_scale: f64) -> EmState {
    let power = demix.y.channel(demix.target).mapv(|c| c.norm_sqr());
    let (target_var, _) = floor_power(power.view(), epsilon_scale);
    let noise_var = Array2::from_elem(target_var.dim(), 1.0);
    EmState {
        target_var,
        noise_var,
    }
}

fn observed_covariance(target_scm: &CMatrix, noise_scm: &CMatrix, rt: f64, rn: f64) -> CMatrix {
    target_scm * C64::new(rt, 0.0) + noise_scm * C64::new(rn, 0.0)
}

/// Posterior moments `r̂^t_ij` and `R̂^n_ij` at the current parameters.
pub fn e_step(x: &Spectrogram, model: &ScmModel, state: &EmState) -> Result<EStats> {
    Ok(e_step_impl(x, model, state, &SpeechPrior::default())?.0)
}

/// [`e_step`] together with [`log_posterior`] at the same parameters, sharing
/// the covariance factorisations.
pub fn e_step_with_objective(
    x: &Spectrogram,
    model: &ScmModel,
    state: &EmState,
    speech: &SpeechPrior,
    noise_prior: Option<&NoisePrior>,
) -> Result<(EStats, f64)> {
    let (stats, data) = e_step_impl(x, model, state, speech)?;
    Ok((stats, data + prior_term(model, noise_prior)))
}

fn e_step_impl(x: &Spectrogram, model: &ScmModel, state: &EmState, speech: &SpeechPrior) -> Result<(EStats, f64)> {
    check_shapes(x, model, state)?;
    let per_bin: Result<Vec<EBin>> = (0..x.num_bins())
        .into_par_iter()
        .map(|i| e_step_bin(x, model, state, speech, i))
        .collect();
    let per_bin = per_bin?;
    let mut target_moment = Array2::zeros(state.target_var.dim());
    let mut noise_moment = Vec::with_capacity(per_bin.len());
    let mut loaded_bins = 0;
    let mut objective = 0.0;
    for (i, bin) in per_bin.into_iter().enumerate() {
        for (j, v) in bin.target.into_iter().enumerate() {
            target_moment[[i, j]] = v;
        }
        noise_moment.push(bin.noise);
        loaded_bins += bin.loaded as usize;
        objective += bin.objective;
    }
    if loaded_bins > 0 {
        debug!("E-step applied diagonal loading in {loaded_bins} bins");
    }
    Ok((
        EStats {
            target_moment,
            noise_moment,
            loaded_bins,
        },
        objective,
    ))
}

struct EBin {
    target: Vec<f64>,
    noise: Vec<CMatrix>,
    loaded: bool,
    /// Data and speech-prior part of the objective for this bin.
    objective: f64,
}

fn e_step_bin(x: &Spectrogram, model: &ScmModel, state: &EmState, speech: &SpeechPrior, i: usize) -> Result<EBin> {
    let a = &model.steering[i];
    let rt_scm = model.target_scm(i);
    let rn_scm = model.noise[i].dense().into_matrix();
    let frames = x.num_frames();
    let mut rt_hat = Vec::with_capacity(frames);
    let mut rn_hat = Vec::with_capacity(frames);
    let mut any_loaded = false;
    let mut objective = 0.0;
    for j in 0..frames {
        let rt = state.target_var[[i, j]];
        let rn = state.noise_var[[i, j]];
        let xij = x.bin_vector(i, j);
        let inv = hpd_inverse(&observed_covariance(&rt_scm, &rn_scm, rt, rn), MAX_COND, LOADING)?;
        any_loaded |= inv.loaded;
        let ri = &inv.inverse;
        objective -= frame_objective(ri, inv.logdet, &xij, rt, speech);

        let ri_a = ri * a;
        let a_ri_a = a.dotc(&ri_a).re;
        let x_ri_a = xij.dotc(&ri_a);
        rt_hat.push(rt - rt * rt * a_ri_a + (x_ri_a * rt).norm_sqr());

        let rn_ri = &rn_scm * ri;
        let g = &rn_ri * &xij;
        let moment = &rn_scm * C64::new(rn, 0.0) - (&rn_ri * &rn_scm) * C64::new(rn * rn, 0.0)
            + (&g * g.adjoint()) * C64::new(rn * rn, 0.0);
        rn_hat.push((&moment + moment.adjoint()) * C64::new(0.5, 0.0));
    }
    Ok(EBin {
        target: rt_hat,
        noise: rn_hat,
        loaded: any_loaded,
        objective,
    })
}

/// `xᴴ R⁻¹ x + log det R + (α+1) log r^t + β / r^t` for one frame.
fn frame_objective(ri: &CMatrix, logdet: f64, x: &CVector, rt: f64, speech: &SpeechPrior) -> f64 {
    let quad = x.dotc(&(ri * x)).re;
    quad + logdet + (speech.alpha + 1.0) * rt.ln() + speech.beta / rt
}

fn check_shapes(x: &Spectrogram, model: &ScmModel, state: &EmState) -> Result<()> {
    let dims = (x.num_bins(), x.num_frames());
    if model.num_bins() != dims.0
        || model.num_channels() != x.num_channels()
        || state.target_var.dim() != dims
        || state.noise_var.dim() != dims
    {
        return Err(Error::InvalidInput("EM state does not match the observation".into()));
    }
    Ok(())
}

/// `u λ-numerator` pieces for one bin: `Σ_j uᴴ R̂_ij u / r^n_ij`.
fn lambda_data_term(u: &CVector, moments: &[CMatrix], noise_var: ndarray::ArrayView1<'_, f64>) -> f64 {
    let mut acc = CMatrix::zeros(u.len(), u.len());
    for (r, &v) in moments.iter().zip(noise_var.iter()) {
        acc += r * C64::new(1.0 / v, 0.0);
    }
    (u.adjoint() * acc * u)[(0, 0)].re
}

fn m_step(
    stats: &EStats,
    speech: &SpeechPrior,
    noise_prior: Option<&NoisePrior>,
    model: &ScmModel,
    state: &EmState,
) -> Result<(EmState, ScmModel)> {
    let (bins, frames) = state.target_var.dim();
    if stats.target_moment.dim() != (bins, frames) || stats.noise_moment.len() != bins {
        return Err(Error::InvalidInput("E-step statistics do not match the state".into()));
    }
    if let Some(p) = noise_prior {
        if p.scale.len() != bins {
            return Err(Error::InvalidInput("noise prior does not match the bin count".into()));
        }
    }
    let m = model.num_channels();
    let target_var = stats
        .target_moment
        .mapv(|r| ((r + speech.beta) / (speech.alpha + 2.0)).max(VARIANCE_FLOOR));

    let per_bin: Result<Vec<(RankOneCompletion, Vec<f64>)>> = (0..bins)
        .into_par_iter()
        .map(|i| {
            let completion = &model.noise[i];
            let u = completion.u();
            let data = lambda_data_term(u, &stats.noise_moment[i], state.noise_var.index_axis(Axis(0), i));
            let lambda = match noise_prior {
                None => data / frames as f64,
                Some(p) => {
                    let prior = (u.adjoint() * p.scale[i].as_matrix() * u)[(0, 0)].re / p.beta_p;
                    (prior + data) / (p.alpha_p + m as f64 + frames as f64)
                }
            };
            let lambda = if lambda > 0.0 && lambda.is_finite() {
                lambda
            } else {
                let clamp = 1e-12 * completion.base().trace() / m as f64;
                warn!("non-positive λ ({lambda:e}) at bin {i}, clamped to {clamp:e}");
                clamp.max(f64::MIN_POSITIVE)
            };
            let updated = completion.with_lambda(lambda)?;
            let inv = updated.inverse();
            let noise: Vec<f64> = stats.noise_moment[i]
                .iter()
                .map(|r| {
                    let tr = (r * inv.as_matrix()).trace().re / m as f64;
                    tr.max(VARIANCE_FLOOR)
                })
                .collect();
            Ok((updated, noise))
        })
        .collect();

    let mut noise_var = Array2::zeros((bins, frames));
    let mut noise = Vec::with_capacity(bins);
    for (i, (completion, rn)) in per_bin?.into_iter().enumerate() {
        for (j, v) in rn.into_iter().enumerate() {
            noise_var[[i, j]] = v;
        }
        noise.push(completion);
    }
    Ok((
        EmState {
            target_var,
            noise_var,
        },
        ScmModel {
            steering: model.steering.clone(),
            noise,
        },
    ))
}

/// M-step under the speech prior only.
pub fn m_step_baseline(
    stats: &EStats,
    speech: &SpeechPrior,
    model: &ScmModel,
    state: &EmState,
) -> Result<(EmState, ScmModel)> {
    m_step(stats, speech, None, model, state)
}

/// M-step with the noise SCM prior; only the `λ` rule differs from
/// [`m_step_baseline`].
pub fn m_step_self_supervised(
    stats: &EStats,
    speech: &SpeechPrior,
    noise_prior: &NoisePrior,
    model: &ScmModel,
    state: &EmState,
) -> Result<(EmState, ScmModel)> {
    m_step(stats, speech, Some(noise_prior), model, state)
}

/// Log-posterior (up to constants) maximised by the EM iterations. With a
/// noise prior the SCM prior term is included.
pub fn log_posterior(
    x: &Spectrogram,
    model: &ScmModel,
    state: &EmState,
    speech: &SpeechPrior,
    noise_prior: Option<&NoisePrior>,
) -> Result<f64> {
    check_shapes(x, model, state)?;
    let per_bin: Result<Vec<f64>> = (0..x.num_bins())
        .into_par_iter()
        .map(|i| {
            let rt_scm = model.target_scm(i);
            let rn_scm = model.noise[i].dense().into_matrix();
            let mut acc = 0.0;
            for j in 0..x.num_frames() {
                let rt = state.target_var[[i, j]];
                let rn = state.noise_var[[i, j]];
                let xij = x.bin_vector(i, j);
                let inv = hpd_inverse(&observed_covariance(&rt_scm, &rn_scm, rt, rn), MAX_COND, LOADING)?;
                acc -= frame_objective(&inv.inverse, inv.logdet, &xij, rt, speech);
            }
            Ok(acc)
        })
        .collect();
    Ok(per_bin?.into_iter().sum::<f64>() + prior_term(model, noise_prior))
}

/// Noise SCM prior part of the objective; zero without a prior.
fn prior_term(model: &ScmModel, noise_prior: Option<&NoisePrior>) -> f64 {
    let Some(p) = noise_prior else {
        return 0.0;
    };
    let m = model.num_channels() as f64;
    model
        .noise
        .iter()
        .zip(&p.scale)
        .map(|(completion, scale)| {
            let tr = (scale.as_matrix() * completion.inverse().as_matrix()).trace().re;
            -((p.alpha_p + m) * completion.logdet() + tr / p.beta_p)
        })
        .sum()
}

/// Target and noise images from the multichannel Wiener filter.
#[derive(Debug, Clone)]
pub struct WienerOutput {
    pub target: Spectrogram,
    pub noise: Spectrogram,
}

/// `ŝ_ij = r^t_ij a aᴴ (R°_ij)⁻¹ x_ij` together with the complementary noise
/// image `r^n_ij R^n_i (R°_ij)⁻¹ x_ij`.
pub fn wiener_split(x: &Spectrogram, model: &ScmModel, state: &EmState) -> Result<WienerOutput> {
    check_shapes(x, model, state)?;
    let m = x.num_channels();
    let per_bin: Result<Vec<(CMatrix, CMatrix)>> = (0..x.num_bins())
        .into_par_iter()
        .map(|i| {
            let rt_scm = model.target_scm(i);
            let rn_scm = model.noise[i].dense().into_matrix();
            let frames = x.num_frames();
            let mut t = CMatrix::zeros(m, frames);
            let mut n = CMatrix::zeros(m, frames);
            for j in 0..frames {
                let rt = state.target_var[[i, j]];
                let rn = state.noise_var[[i, j]];
                let xij = x.bin_vector(i, j);
                let inv = hpd_inverse(&observed_covariance(&rt_scm, &rn_scm, rt, rn), MAX_COND, LOADING)?;
                let b = &inv.inverse * &xij;
                t.set_column(j, &(&rt_scm * &b * C64::new(rt, 0.0)));
                n.set_column(j, &(&rn_scm * &b * C64::new(rn, 0.0)));
            }
            Ok((t, n))
        })
        .collect();
    let mut target = x.data().clone();
    let mut noise = x.data().clone();
    for (i, (t, n)) in per_bin?.into_iter().enumerate() {
        for c in 0..m {
            for j in 0..x.num_frames() {
                target[[c, i, j]] = t[(c, j)];
                noise[[c, i, j]] = n[(c, j)];
            }
        }
    }
    Ok(WienerOutput {
        target: x.with_data(target)?,
        noise: x.with_data(noise)?,
    })
}

/// Multichannel Wiener estimate of the target image.
pub fn wiener_extract(x: &Spectrogram, model: &ScmModel, state: &EmState) -> Result<Spectrogram> {
    Ok(wiener_split(x, model, state)?.target)
}

/// Per-frame norm `sqrt(Σ_i |DNN(x_ref)_ij|²)` of the denoised reference
/// channel.
pub fn denoised_frame_norms(x: &Spectrogram, denoiser: &dyn Denoiser, channel: usize) -> Result<Vec<f64>> {
    if channel >= x.num_channels() {
        return Err(Error::InvalidInput(format!("channel {channel} out of range")));
    }
    let clean = denoiser.denoise(&x.extract_channel(channel))?;
    if clean.num_channels() != 1 || clean.channel(0).dim() != x.channel(channel).dim() {
        return Err(Error::Adapter {
            message: "denoiser changed the spectrogram shape".into(),
            stderr: String::new(),
        });
    }
    Ok(clean
        .channel(0)
        .axis_iter(Axis(1))
        .map(|col| col.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt())
        .collect())
}

/// Frames whose denoised reference-channel norm is strictly below `theta`.
pub fn detect_noise_frames(x: &Spectrogram, denoiser: &dyn Denoiser, theta: f64, channel: usize) -> Result<Vec<usize>> {
    if !(theta > 0.0) {
        return Err(Error::config("hyper.theta", "must be positive"));
    }
    let frames: Vec<usize> = denoised_frame_norms(x, denoiser, channel)?
        .into_iter()
        .enumerate()
        .filter(|(_, norm)| *norm < theta)
        .map(|(j, _)| j)
        .collect();
    if frames.is_empty() {
        warn!("no noise-only frames detected at threshold {theta:e}");
    }
    Ok(frames)
}

/// Empirical SCM of the given frames as the prior scale matrix.
pub fn estimate_noise_prior(x: &Spectrogram, frames: &[usize], alpha_p: f64, beta_p: f64) -> Result<NoisePrior> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("noise prior needs at least one frame".into()));
    }
    if let Some(&bad) = frames.iter().find(|&&j| j >= x.num_frames()) {
        return Err(Error::InvalidInput(format!("frame {bad} out of range")));
    }
    let m = x.num_channels();
    let count = frames.len() as f64;
    let scale: Vec<HermitianMatrix> = (0..x.num_bins())
        .map(|i| {
            let mut acc = CMatrix::zeros(m, m);
            for &j in frames {
                let v = x.bin_vector(i, j);
                acc += &v * v.adjoint();
            }
            HermitianMatrix::symmetrize(acc / C64::new(count, 0.0))
        })
        .collect();
    NoisePrior::new(alpha_p, beta_p, scale, frames.to_vec())
}

/// Settings for [`run_rcscme`].
#[derive(Debug, Clone)]
pub struct RcscmeConfig {
    pub iterations: usize,
    pub speech_prior: SpeechPrior,
    /// Floor scale for the initial target variances.
    pub epsilon_scale: f64,
}

impl Default for RcscmeConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            speech_prior: SpeechPrior::default(),
            epsilon_scale: 0.1,
        }
    }
}

/// Outcome of an RCSCME run.
#[derive(Debug, Clone)]
pub struct RcscmeRun {
    pub model: ScmModel,
    pub state: EmState,
    /// Objective at the initial parameters.
    pub initial_objective: f64,
    /// Objective after each EM iteration.
    pub objective_trace: Vec<f64>,
    /// Mean `λ` across bins after each EM iteration.
    pub lambda_trace: Vec<f64>,
    pub output: Spectrogram,
}

/// Builds the SCM model, runs the EM iterations (with the noise prior when
/// given) and applies the Wiener filter.
pub fn run_rcscme(
    x: &Spectrogram,
    mix: &MixingEstimate,
    demix: &DemixingState,
    cfg: &RcscmeConfig,
    noise_prior: Option<&NoisePrior>,
) -> Result<RcscmeRun> {
    run_rcscme_with(x, mix, demix, cfg, noise_prior, |_, _, _| Ok(()))
}

/// [`run_rcscme`] with a hook called after every iteration (1-based index).
pub fn run_rcscme_with<F>(
    x: &Spectrogram,
    mix: &MixingEstimate,
    demix: &DemixingState,
    cfg: &RcscmeConfig,
    noise_prior: Option<&NoisePrior>,
    mut on_iteration: F,
) -> Result<RcscmeRun>
where
    F: FnMut(usize, &ScmModel, &EmState) -> Result<()>,
{
    let mut model = build_scm_model(x, mix, demix)?;
    let mut state = initial_state(demix, cfg.epsilon_scale);
    let speech = &cfg.speech_prior;
    let (mut stats, initial_objective) = e_step_with_objective(x, &model, &state, speech, noise_prior)?;
    let mut objective_trace = Vec::with_capacity(cfg.iterations);
    let mut lambda_trace = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        (state, model) = match noise_prior {
            Some(p) => m_step_self_supervised(&stats, speech, p, &model, &state)?,
            None => m_step_baseline(&stats, speech, &model, &state)?,
        };
        // The next E-step shares its factorisations with this objective.
        let objective = if it < cfg.iterations {
            let (next, objective) = e_step_with_objective(x, &model, &state, speech, noise_prior)?;
            stats = next;
            objective
        } else {
            log_posterior(x, &model, &state, speech, noise_prior)?
        };
        debug!("RCSCME iteration {it}: objective {objective:.6e}");
        objective_trace.push(objective);
        let lambdas = model.lambdas();
        lambda_trace.push(lambdas.iter().sum::<f64>() / lambdas.len().max(1) as f64);
        on_iteration(it, &model, &state)?;
    }
    let output = wiener_extract(x, &model, &state)?;
    Ok(RcscmeRun {
        model,
        state,
        initial_objective,
        objective_trace,
        lambda_trace,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermitian::null_vector;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cn(rng: &mut ChaCha8Rng) -> C64 {
        C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    }

    /// Random observation plus a random but valid model/state.
    fn random_problem(m: usize, bins: usize, frames: usize, seed: u64) -> (Spectrogram, ScmModel, EmState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let window = 2 * (bins - 1);
        let hop = window / 2;
        let samples = (frames - 1) * hop - hop + 1;
        let cfg = crate::signal_io::FrameConfig::new(window, hop).unwrap();
        assert_eq!(cfg.num_frames(samples), frames);
        let data = Array3::from_shape_simple_fn((m, bins, frames), || cn(&mut rng));
        let x = Spectrogram::from_parts(data, window, hop, 16_000, samples).unwrap();
        let mut steering = Vec::new();
        let mut noise = Vec::new();
        for _ in 0..bins {
            steering.push(CVector::from_fn(m, |_, _| cn(&mut rng)));
            let b = CMatrix::from_fn(m, m - 1, |_, _| cn(&mut rng));
            let base = HermitianMatrix::symmetrize(&b * b.adjoint());
            noise.push(RankOneCompletion::along_null_vector(base, 0.5 + rng.random::<f64>()).unwrap());
        }
        let state = EmState {
            target_var: Array2::from_shape_simple_fn((bins, frames), || 0.1 + rng.random::<f64>()),
            noise_var: Array2::from_shape_simple_fn((bins, frames), || 0.1 + rng.random::<f64>()),
        };
        (x, ScmModel { steering, noise }, state)
    }

    #[test]
    fn posterior_moments_are_nonnegative() {
        for m in [2, 3] {
            let (x, model, state) = random_problem(m, 5, 9, m as u64);
            let stats = e_step(&x, &model, &state).unwrap();
            assert!(stats.target_moment.iter().all(|v| *v >= 0.0));
            for row in &stats.noise_moment {
                for r in row {
                    let h = HermitianMatrix::symmetrize(r.clone());
                    let (w, _) = crate::hermitian::eig_hermitian(&h);
                    assert!(w[0] >= -1e-10 * w[w.len() - 1].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn zero_observation_gives_pure_shrinkage() {
        let (x, model, state) = random_problem(3, 3, 5, 1);
        let zero = x.with_data(Array3::zeros(x.data().dim())).unwrap();
        let stats = e_step(&zero, &model, &state).unwrap();
        for i in 0..3 {
            let a = &model.steering[i];
            for j in 0..5 {
                let rt = state.target_var[[i, j]];
                let ro = model.target_scm(i) * C64::new(rt, 0.0)
                    + model.noise[i].dense().into_matrix() * C64::new(state.noise_var[[i, j]], 0.0);
                let inv = ro.try_inverse().unwrap();
                let expected = rt - rt * rt * (a.adjoint() * inv * a)[(0, 0)].re;
                assert!((stats.target_moment[[i, j]] - expected).abs() < 1e-10 * rt);
            }
        }
    }

    #[test]
    fn two_channel_hand_case() {
        // a = e1, R^n = I, r^t = r^n = 1, x = (1, 0):
        // R° = diag(2, 1); r̂^t = 1 - 1/2 + 1/4 = 3/4;
        // R̂^n = I - diag(1/2, 1) + diag(1/4, 0) = diag(3/4, 0).
        let ident = HermitianMatrix::symmetrize(CMatrix::from_diagonal(&CVector::from_vec(vec![
            C64::new(1.0, 0.0),
            C64::new(0.0, 0.0),
        ])));
        let noise = RankOneCompletion::along_null_vector(ident, 1.0).unwrap();
        assert!((noise.dense().into_matrix() - CMatrix::identity(2, 2)).norm() < 1e-15);
        let model = ScmModel {
            steering: vec![CVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]); 2],
            noise: vec![noise; 2],
        };
        let mut data = Array3::zeros((2, 2, 3));
        for j in 0..3 {
            data[[0, 0, j]] = C64::new(1.0, 0.0);
            data[[0, 1, j]] = C64::new(1.0, 0.0);
        }
        let x = Spectrogram::from_parts(data, 2, 1, 16_000, 2).unwrap();
        let state = EmState {
            target_var: Array2::ones((2, 3)),
            noise_var: Array2::ones((2, 3)),
        };
        let stats = e_step(&x, &model, &state).unwrap();
        assert!((stats.target_moment[[0, 0]] - 0.75).abs() < 1e-15);
        let r = &stats.noise_moment[0][0];
        let expected = CMatrix::from_diagonal(&CVector::from_vec(vec![C64::new(0.75, 0.0), C64::new(0.0, 0.0)]));
        assert!((r - expected).norm() < 1e-15);
    }

    #[test]
    fn speech_prior_defaults() {
        let p = SpeechPrior::default();
        assert_eq!((p.alpha, p.beta), (1.3, 1e-16));
    }

    #[test]
    fn degenerate_target_moment_is_clamped() {
        let (_, model, state) = random_problem(2, 2, 3, 5);
        let stats = EStats {
            target_moment: Array2::zeros((2, 3)),
            noise_moment: (0..2)
                .map(|i| vec![model.noise[i].dense().into_matrix(); 3])
                .collect(),
            loaded_bins: 0,
        };
        let prior = SpeechPrior { alpha: 1.3, beta: 0.0 };
        let (next, _) = m_step_baseline(&stats, &prior, &model, &state).unwrap();
        assert!(next.target_var.iter().all(|v| *v == VARIANCE_FLOOR));
    }

    #[test]
    fn em_ascent_on_random_instances() {
        for seed in 0..20 {
            let (x, mut model, mut state) = random_problem(3, 4, 12, 100 + seed);
            let prior = SpeechPrior::default();
            let mut prev = log_posterior(&x, &model, &state, &prior, None).unwrap();
            for _ in 0..5 {
                let stats = e_step(&x, &model, &state).unwrap();
                (state, model) = m_step_baseline(&stats, &prior, &model, &state).unwrap();
                let now = log_posterior(&x, &model, &state, &prior, None).unwrap();
                assert!(now >= prev - 1e-8 * prev.abs(), "seed {seed}: {now} < {prev}");
                prev = now;
            }
        }
    }

    #[test]
    fn self_supervised_ascent_on_random_instances() {
        for seed in 0..20 {
            let (x, mut model, mut state) = random_problem(3, 4, 12, 200 + seed);
            let prior = SpeechPrior::default();
            let noise_prior = estimate_noise_prior(&x, &[0, 3, 7], 8e2, 1e4).unwrap();
            let mut prev = log_posterior(&x, &model, &state, &prior, Some(&noise_prior)).unwrap();
            for _ in 0..5 {
                let stats = e_step(&x, &model, &state).unwrap();
                (state, model) = m_step_self_supervised(&stats, &prior, &noise_prior, &model, &state).unwrap();
                let now = log_posterior(&x, &model, &state, &prior, Some(&noise_prior)).unwrap();
                assert!(now >= prev - 1e-8 * prev.abs(), "seed {seed}: {now} < {prev}");
                prev = now;
            }
        }
    }

    #[test]
    fn fused_objective_matches_separate_evaluation() {
        let (x, model, state) = random_problem(3, 5, 9, 12);
        let speech = SpeechPrior::default();
        let prior = estimate_noise_prior(&x, &[0, 3], 8.0, 2.0).unwrap();
        for p in [None, Some(&prior)] {
            let (stats, obj) = e_step_with_objective(&x, &model, &state, &speech, p).unwrap();
            let lp = log_posterior(&x, &model, &state, &speech, p).unwrap();
            assert!((obj - lp).abs() <= 1e-12 * lp.abs());
            let plain = e_step(&x, &model, &state).unwrap();
            assert_eq!(stats.target_moment, plain.target_moment);
            assert_eq!(stats.noise_moment, plain.noise_moment);
        }
    }

    #[test]
    fn relaxed_prior_reduces_to_baseline_rule() {
        let (x, model, state) = random_problem(3, 6, 10, 9);
        let stats = e_step(&x, &model, &state).unwrap();
        let prior = SpeechPrior::default();
        let relaxed = NoisePrior {
            alpha_p: -3.0,
            beta_p: 1.0,
            scale: vec![HermitianMatrix::zeros(3); 6],
            frames: vec![],
        };
        let (sb, mb) = m_step_baseline(&stats, &prior, &model, &state).unwrap();
        let (ss, ms) = m_step_self_supervised(&stats, &prior, &relaxed, &model, &state).unwrap();
        for (a, b) in mb.lambdas().iter().zip(ms.lambdas()) {
            assert!((a - b).abs() <= 1e-14 * a.abs());
        }
        assert_eq!(sb.target_var, ss.target_var);
    }

    #[test]
    fn huge_beta_p_scales_baseline_lambda() {
        let (x, model, state) = random_problem(2, 4, 8, 10);
        let stats = e_step(&x, &model, &state).unwrap();
        let prior = SpeechPrior::default();
        let np = estimate_noise_prior(&x, &[1, 2], 8e2, 1e300).unwrap();
        let (_, mb) = m_step_baseline(&stats, &prior, &model, &state).unwrap();
        let (_, ms) = m_step_self_supervised(&stats, &prior, &np, &model, &state).unwrap();
        let factor = 8.0 / (8e2 + 2.0 + 8.0);
        for (a, b) in mb.lambdas().iter().zip(ms.lambdas()) {
            assert!((b - factor * a).abs() < 1e-12 * a);
        }
    }

    #[test]
    fn noise_prior_single_frame_and_validation() {
        let (x, _, _) = random_problem(3, 3, 6, 11);
        let p = estimate_noise_prior(&x, &[4], 8e2, 1e4).unwrap();
        for i in 0..3 {
            let v = x.bin_vector(i, 4);
            assert!((p.scale[i].as_matrix() - &v * v.adjoint()).norm() < 1e-14);
        }
        assert_eq!((p.alpha_p, p.beta_p), (8e2, 1e4));
        assert!(estimate_noise_prior(&x, &[], 8e2, 1e4).is_err());
        assert!(estimate_noise_prior(&x, &[6], 8e2, 1e4).is_err());
        assert!(estimate_noise_prior(&x, &[0], 1.5, 1e4).is_err());
        assert!(estimate_noise_prior(&x, &[0], 8e2, 0.0).is_err());
    }

    #[test]
    fn wiener_complementarity_and_silence() {
        let (x, model, mut state) = random_problem(3, 5, 7, 12);
        let out = wiener_split(&x, &model, &state).unwrap();
        for ((t, n), o) in out.target.data().iter().zip(out.noise.data()).zip(x.data()) {
            assert!((t + n - o).norm() < 1e-8 * (1.0 + o.norm()));
        }
        state.target_var.fill(0.0);
        let silent = wiener_extract(&x, &model, &state).unwrap();
        assert!(silent.data().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn scm_model_of_two_channel_identity_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (bins, frames) = (5, 9);
        let data = Array3::from_shape_simple_fn((2, bins, frames), || cn(&mut rng));
        let x = Spectrogram::from_parts(data, 8, 4, 16_000, 29).unwrap();
        let v = crate::source_models::VarianceMap::new(Array3::ones((2, bins, frames)), vec![1.0; 2]).unwrap();
        let demix = DemixingState::identity(&x, v).unwrap();
        let mix = crate::demix::mixing_estimate(&demix).unwrap();
        let model = build_scm_model(&x, &mix, &demix).unwrap();
        for i in 0..bins {
            let base = model.noise[i].base().as_matrix();
            let mean2: f64 = (0..frames).map(|j| x.data()[[1, i, j]].norm_sqr()).sum::<f64>() / frames as f64;
            assert!(base[(0, 0)].norm() < 1e-15 && base[(0, 1)].norm() < 1e-15);
            assert!((base[(1, 1)].re - mean2).abs() < 1e-12 * mean2);
            assert_eq!(model.noise[i].v(), &CVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]));
            assert!((model.noise[i].lambda() - mean2).abs() < 1e-12 * mean2);
        }
        let _ = null_vector;
    }
}
