//! Determined rank-1 separation by iterative projection.
//!
//! Both ILRMA (NMF source model) and IDLMA (denoiser source model) minimise
//!
//! ```text
//! Σ_{i,j,n} ( |w_inᴴ x_ij|² / σ²_ijn + log σ²_ijn ) − 2J Σ_i log |det W_i|
//! ```
//!
//! and differ only in how `σ²` is refreshed between demixing sweeps.

use log::{debug, warn};
use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::signal_io::Spectrogram;
use crate::source_models::{idlma_variances, nmf_update_with_offset, Denoiser, NmfModel, VarianceMap};
use crate::{CMatrix, CVector, Error, Result, C64};

/// Demixing matrices, separated signals and their source model.
#[derive(Debug, Clone)]
pub struct DemixingState {
    /// Per-frequency `N×M` demixing matrices; row `n` is `w_inᴴ`.
    pub w: Vec<CMatrix>,
    /// Separated signals `Y = W X`.
    pub y: Spectrogram,
    pub variances: VarianceMap,
    /// Index of the target source among the separated outputs.
    pub target: usize,
}

impl DemixingState {
    /// Identity demixing, `Y = X`.
    pub fn identity(x: &Spectrogram, variances: VarianceMap) -> Result<Self> {
        let m = x.num_channels();
        if variances.values().dim() != x.data().dim() {
            return Err(Error::InvalidInput("variance map shape mismatch".into()));
        }
        Ok(Self {
            w: vec![CMatrix::identity(m, m); x.num_bins()],
            y: x.clone(),
            variances,
            target: 0,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.y.num_channels()
    }

    /// Recomputes `Y = W X`.
    pub fn refresh_output(&mut self, x: &Spectrogram) -> Result<()> {
        self.y = apply_demixing(x, &self.w)?;
        Ok(())
    }
}

/// Mixing matrices `A_i = W_i⁻¹`.
#[derive(Debug, Clone)]
pub struct MixingEstimate {
    pub a: Vec<CMatrix>,
    pub target: usize,
}

impl MixingEstimate {
    /// Steering vector `a_{i,n_t}`.
    pub fn steering(&self, i: usize) -> CVector {
        self.a[i].column(self.target).into_owned()
    }
}

/// Observations of frequency bin `i` as an `M×J` matrix.
pub(crate) fn bin_matrix(x: &Spectrogram, i: usize) -> CMatrix {
    let lane = x.data().index_axis(Axis(1), i);
    let (m, j) = lane.dim();
    CMatrix::from_fn(m, j, |r, c| lane[[r, c]])
}

pub fn apply_demixing(x: &Spectrogram, w: &[CMatrix]) -> Result<Spectrogram> {
    if w.len() != x.num_bins() {
        return Err(Error::InvalidInput("one demixing matrix per bin expected".into()));
    }
    let n = w[0].nrows();
    let rows: Vec<CMatrix> = (0..x.num_bins())
        .into_par_iter()
        .map(|i| &w[i] * bin_matrix(x, i))
        .collect();
    let mut out = Array3::<C64>::zeros((n, x.num_bins(), x.num_frames()));
    for (i, yi) in rows.iter().enumerate() {
        for s in 0..n {
            for j in 0..x.num_frames() {
                out[[s, i, j]] = yi[(s, j)];
            }
        }
    }
    x.with_data(out)
}

fn log_abs_det(m: &CMatrix) -> f64 {
    m.clone().lu().determinant().norm().ln()
}

/// Negative log-likelihood of the observation under the current model
/// (additive constants dropped). Returns `+∞` for a singular `W_i`.
pub fn cost(x: &Spectrogram, state: &DemixingState) -> f64 {
    let frames = x.num_frames() as f64;
    let mut data_term = 0.0;
    let sig = state.variances.values();
    for ((y, s2), _) in state.y.data().iter().zip(sig.iter()).zip(0..) {
        data_term += y.norm_sqr() / s2 + s2.ln();
    }
    let mut det_term = 0.0;
    for (i, w) in state.w.iter().enumerate() {
        let ld = log_abs_det(w);
        if !ld.is_finite() {
            warn!("demixing matrix at bin {i} is singular");
            return f64::INFINITY;
        }
        det_term += ld;
    }
    data_term - 2.0 * frames * det_term
}

fn weighted_covariance(xi: &CMatrix, inv_var: &[f64]) -> CMatrix {
    let (m, frames) = xi.shape();
    let mut u = CMatrix::zeros(m, m);
    for j in 0..frames {
        let col = xi.column(j);
        let s = inv_var[j];
        for r in 0..m {
            let a = col[r] * s;
            for c in 0..m {
                u[(r, c)] += a * col[c].conj();
            }
        }
    }
    u / C64::new(frames as f64, 0.0)
}

fn ip_bin(xi: &CMatrix, w: &CMatrix, var: ndarray::ArrayView2<'_, f64>) -> Result<CMatrix> {
    let n = w.nrows();
    let mut w = w.clone();
    for s in 0..n {
        let inv: Vec<f64> = var.row(s).iter().map(|v| 1.0 / v).collect();
        let u = weighted_covariance(xi, &inv);
        let mut e = CVector::zeros(n);
        e[s] = C64::new(1.0, 0.0);
        let solved = (&w * &u).lu().solve(&e).or_else(|| {
            let m = u.nrows();
            let load = 1e-8 * u.trace().re / m as f64;
            debug!("diagonal loading {load:e} in demixing update");
            let loaded = &u + CMatrix::identity(m, m) * C64::new(load, 0.0);
            (&w * loaded).lu().solve(&e)
        });
        let wn = solved.ok_or_else(|| Error::Singular("W U is singular in demixing update".into()))?;
        let scale = (wn.adjoint() * &u * &wn)[(0, 0)].re;
        if !(scale > 0.0) {
            return Err(Error::Numerical("non-positive weighted norm in demixing update".into()));
        }
        let wn = wn / C64::new(scale.sqrt(), 0.0);
        w.set_row(s, &wn.adjoint());
    }
    Ok(w)
}

/// One iterative-projection sweep over every bin and source.
pub fn ip_update(x: &Spectrogram, mut state: DemixingState) -> Result<DemixingState> {
    let var = state.variances.values();
    let updated: Result<Vec<CMatrix>> = (0..x.num_bins())
        .into_par_iter()
        .map(|i| ip_bin(&bin_matrix(x, i), &state.w[i], var.index_axis(Axis(1), i)))
        .collect();
    state.w = updated?;
    state.refresh_output(x)?;
    Ok(state)
}

fn inverse_checked(w: &CMatrix, max_cond: f64) -> Result<CMatrix> {
    let sv = w.clone().singular_values();
    let hi = sv.max();
    let lo = sv.min();
    if !(lo > 0.0) || hi / lo > max_cond {
        return Err(Error::Singular(format!(
            "demixing matrix condition number {:e}",
            if lo > 0.0 { hi / lo } else { f64::INFINITY }
        )));
    }
    w.clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("demixing matrix not invertible".into()))
}

/// Rescales every source to its image on channel 1 (`w_n ← (A_i)_{1n} w_n`).
pub fn projection_back(x: &Spectrogram, mut state: DemixingState) -> Result<DemixingState> {
    for w in &mut state.w {
        let a = inverse_checked(w, 1e12)?;
        for n in 0..w.nrows() {
            let gain = a[(0, n)];
            let mut row = w.row_mut(n);
            row *= gain;
        }
    }
    state.refresh_output(x)?;
    Ok(state)
}

/// `A_i = W_i⁻¹`; errors when a `W_i` has condition number above `1e12`.
pub fn mixing_estimate(state: &DemixingState) -> Result<MixingEstimate> {
    let a = state
        .w
        .iter()
        .map(|w| inverse_checked(w, 1e12))
        .collect::<Result<Vec<_>>>()?;
    Ok(MixingEstimate {
        a,
        target: state.target,
    })
}

/// How to decide which separated output is the talker.
pub enum TargetSelector<'a> {
    /// Highest normalised correlation with a known clean reference.
    Oracle(&'a Spectrogram),
    /// Highest fraction of energy kept by the denoiser.
    Denoiser(&'a dyn Denoiser),
    Fixed(usize),
}

pub fn select_target(y: &Spectrogram, selector: &TargetSelector<'_>) -> Result<usize> {
    let nsrc = y.num_channels();
    if nsrc < 2 {
        return Err(Error::InvalidInput("target selection needs at least two sources".into()));
    }
    let scores: Vec<f64> = match selector {
        TargetSelector::Fixed(n) => {
            return if *n < nsrc {
                Ok(*n)
            } else {
                Err(Error::InvalidInput(format!("target index {n} out of range")))
            }
        }
        TargetSelector::Oracle(reference) => {
            let r = reference.channel(0);
            let rr: f64 = r.iter().map(|c| c.norm_sqr()).sum();
            (0..nsrc)
                .map(|n| {
                    let yn = y.channel(n);
                    let yy: f64 = yn.iter().map(|c| c.norm_sqr()).sum();
                    let cross: C64 = yn.iter().zip(r.iter()).map(|(a, b)| a * b.conj()).sum();
                    if yy > 0.0 && rr > 0.0 {
                        cross.norm_sqr() / (yy * rr)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        TargetSelector::Denoiser(d) => (0..nsrc)
            .map(|n| {
                let single = y.extract_channel(n);
                let total: f64 = single.data().iter().map(|c| c.norm_sqr()).sum();
                let kept: f64 = d.denoise(&single)?.data().iter().map(|c| c.norm_sqr()).sum();
                Ok(if total > 0.0 { kept / total } else { 0.0 })
            })
            .collect::<Result<_>>()?,
    };
    let (best, score) = scores
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least two sources");
    if !(score > 0.0) {
        return Err(Error::NoSpeech);
    }
    Ok(best)
}

/// Settings for [`ilrma`].
#[derive(Debug, Clone)]
pub struct IlrmaConfig {
    pub iterations: usize,
    pub bases: usize,
    pub seed: u64,
}

impl Default for IlrmaConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            bases: 10,
            seed: 0,
        }
    }
}

/// Result of a rank-1 separation run.
#[derive(Debug, Clone)]
pub struct SeparationRun {
    pub state: DemixingState,
    /// Cost before the first sweep and after every half-step.
    pub cost_trace: Vec<f64>,
}

/// Constant added to every ILRMA source variance, relative to the mean
/// mixture power. Keeps the weighted covariances well conditioned.
pub const VARIANCE_OFFSET: f64 = 1e-6;

/// ILRMA: alternate one IS-NMF sweep per source with one demixing sweep.
///
/// Source variances are `TV + δ` with `δ` from [`VARIANCE_OFFSET`].
///
/// The returned state is back-projected to channel 1; its `target` is left at
/// 0 for the caller to pick with [`select_target`].
pub fn ilrma(x: &Spectrogram, cfg: &IlrmaConfig) -> Result<SeparationRun> {
    let (nsrc, bins, frames) = x.data().dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut models = (0..nsrc)
        .map(|_| NmfModel::random(bins, frames, cfg.bases, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mean_power = x.data().iter().map(|c| c.norm_sqr()).sum::<f64>() / x.data().len().max(1) as f64;
    let mut offsets = vec![(VARIANCE_OFFSET * mean_power).max(f64::MIN_POSITIVE); nsrc];
    let model_map = |models: &[NmfModel], offsets: &[f64]| {
        let mut v = Array3::<f64>::zeros((nsrc, bins, frames));
        for (n, m) in models.iter().enumerate() {
            v.index_axis_mut(Axis(0), n).assign(&(m.model() + offsets[n]));
        }
        VarianceMap::from_model(v)
    };
    let mut state = DemixingState::identity(x, model_map(&models, &offsets))?;
    let mut trace = vec![cost(x, &state)];
    for _ in 0..cfg.iterations {
        let power = state.y.data().mapv(|c| c.norm_sqr());
        models = models
            .into_iter()
            .enumerate()
            .map(|(n, m)| nmf_update_with_offset(power.index_axis(Axis(0), n), m, offsets[n], 1))
            .collect::<Result<_>>()?;
        state.variances = model_map(&models, &offsets);
        trace.push(cost(x, &state));
        state = ip_update(x, state)?;
        normalize_scales(&mut state, &mut models, &mut offsets)?;
        state.variances = model_map(&models, &offsets);
        trace.push(cost(x, &state));
    }
    let state = projection_back(x, state)?;
    Ok(SeparationRun {
        state,
        cost_trace: trace,
    })
}

/// Rescales every output to unit mean power and the matching variance model
/// by the same factor. The cost is invariant; this only stops scale drift.
fn normalize_scales(state: &mut DemixingState, models: &mut [NmfModel], offsets: &mut [f64]) -> Result<()> {
    let (nsrc, bins, frames) = state.y.data().dim();
    for (n, model) in models.iter_mut().enumerate().take(nsrc) {
        let mu = state.y.channel(n).iter().map(|c| c.norm_sqr()).sum::<f64>() / (bins * frames) as f64;
        if !(mu > 0.0 && mu.is_finite()) {
            continue;
        }
        let g = C64::new(1.0 / mu.sqrt(), 0.0);
        for w in &mut state.w {
            let mut row = w.row_mut(n);
            row *= g;
        }
        state.y.data_mut().index_axis_mut(Axis(0), n).mapv_inplace(|c| c * g);
        *model = NmfModel::new(model.basis() / mu, model.activation().clone())?;
        offsets[n] /= mu;
    }
    Ok(())
}

/// Settings for [`idlma`].
#[derive(Debug, Clone)]
pub struct IdlmaConfig {
    pub iterations: usize,
    /// Demixing sweeps between denoiser refreshes.
    pub refresh_every: usize,
    pub epsilon_scale: f64,
    pub target: usize,
}

impl Default for IdlmaConfig {
    fn default() -> Self {
        Self {
            iterations: 90,
            refresh_every: 30,
            epsilon_scale: 0.1,
            target: 0,
        }
    }
}

/// IDLMA: demixing sweeps with variances refreshed by a denoiser every
/// `refresh_every` sweeps. Outputs are back-projected before each refresh
/// and at the end.
pub fn idlma(x: &Spectrogram, denoiser: &dyn Denoiser, cfg: &IdlmaConfig) -> Result<SeparationRun> {
    if cfg.refresh_every == 0 {
        return Err(Error::config("iterations.idlma_refresh", "must be positive"));
    }
    let variances = idlma_variances(x, cfg.target, denoiser, cfg.epsilon_scale)?;
    let mut state = DemixingState::identity(x, variances)?;
    state.target = cfg.target;
    let mut trace = vec![cost(x, &state)];
    for it in 0..cfg.iterations {
        if it > 0 && it % cfg.refresh_every == 0 {
            state = projection_back(x, state)?;
            state.variances = idlma_variances(&state.y, cfg.target, denoiser, cfg.epsilon_scale)?;
            trace.push(cost(x, &state));
        }
        state = ip_update(x, state)?;
        trace.push(cost(x, &state));
    }
    let state = projection_back(x, state)?;
    Ok(SeparationRun {
        state,
        cost_trace: trace,
    })
}
