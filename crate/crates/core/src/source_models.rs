//! Source power models for the rank-1 separators.
//!
//! A [`VarianceMap`] holds one power spectrogram per separated source. It is
//! produced either by Itakura–Saito NMF ([`nmf_update`]), by a single-channel
//! denoiser applied to the separated signals ([`idlma_variances`]), or from
//! ground truth ([`oracle_variances`]).

use std::path::PathBuf;
use std::process::Command;

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::signal_io::{istft, read_wav, stft_with, write_wav, Spectrogram};
use crate::{Error, Result, C64};

/// Per-source time-frequency variances `σ²`, shape `(source, bin, frame)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap {
    values: Array3<f64>,
    floors: Vec<f64>,
}

impl VarianceMap {
    pub fn new(values: Array3<f64>, floors: Vec<f64>) -> Result<Self> {
        if floors.len() != values.dim().0 {
            return Err(Error::InvalidInput("one floor per source expected".into()));
        }
        for (n, src) in values.axis_iter(Axis(0)).enumerate() {
            if !(floors[n] > 0.0) || src.iter().any(|v| !(*v >= floors[n])) {
                return Err(Error::InvalidInput(format!(
                    "variances of source {n} fall below their floor"
                )));
            }
        }
        Ok(Self { values, floors })
    }

    /// Uses `powers` directly with the smallest positive value as floor.
    pub(crate) fn from_model(values: Array3<f64>) -> Self {
        let floors = values
            .axis_iter(Axis(0))
            .map(|s| s.iter().copied().fold(f64::INFINITY, f64::min).max(f64::MIN_POSITIVE))
            .collect();
        let values = values.mapv(|v| v.max(f64::MIN_POSITIVE));
        Self { values, floors }
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn source(&self, n: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), n)
    }

    pub fn floors(&self) -> &[f64] {
        &self.floors
    }

    pub fn num_sources(&self) -> usize {
        self.values.dim().0
    }
}

/// Floors a power spectrogram at `scale` times its mean.
///
/// Returns the floored powers and the floor. A spectrogram that is identically
/// zero gets the smallest positive double as its floor.
pub fn floor_power(power: ArrayView2<'_, f64>, scale: f64) -> (Array2<f64>, f64) {
    let count = power.len().max(1) as f64;
    let mean = power.iter().sum::<f64>() / count;
    let eps = (scale * mean).max(f64::MIN_POSITIVE);
    (power.mapv(|p| p.max(eps)), eps)
}

/// Nonnegative low-rank model `σ²_ij = Σ_k t_ik v_kj`.
#[derive(Debug, Clone, PartialEq)]
pub struct NmfModel {
    basis: Array2<f64>,
    activation: Array2<f64>,
}

impl NmfModel {
    pub fn new(basis: Array2<f64>, activation: Array2<f64>) -> Result<Self> {
        if basis.ncols() == 0 || basis.ncols() != activation.nrows() {
            return Err(Error::InvalidInput(format!(
                "basis count mismatch: T is {:?}, V is {:?}",
                basis.dim(),
                activation.dim()
            )));
        }
        if basis.iter().chain(activation.iter()).any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput("NMF factors must be nonnegative".into()));
        }
        Ok(Self { basis, activation })
    }

    /// Factors drawn uniformly from `[0, 1)`.
    pub fn random(bins: usize, frames: usize, bases: usize, rng: &mut impl Rng) -> Result<Self> {
        if bases < 1 {
            return Err(Error::InvalidInput("NMF needs at least one basis".into()));
        }
        let basis = Array2::from_shape_simple_fn((bins, bases), || rng.random::<f64>());
        let activation = Array2::from_shape_simple_fn((bases, frames), || rng.random::<f64>());
        Self::new(basis, activation)
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    pub fn activation(&self) -> &Array2<f64> {
        &self.activation
    }

    pub fn num_bases(&self) -> usize {
        self.basis.ncols()
    }

    pub fn model(&self) -> Array2<f64> {
        self.basis.dot(&self.activation)
    }
}

/// Lower bound on NMF basis and activation entries.
pub const NMF_FACTOR_FLOOR: f64 = f64::EPSILON;

/// Itakura–Saito divergence `Σ p/s − log(p/s) − 1`.
pub fn is_divergence(power: ArrayView2<'_, f64>, model: ArrayView2<'_, f64>) -> f64 {
    Zip::from(power)
        .and(model)
        .fold(0.0, |acc, &p, &s| acc + p / s - (p / s).ln() - 1.0)
}

/// Runs `iterations` sweeps of the IS-NMF multiplicative updates (square-root
/// form) on a power spectrogram. Each sweep updates the basis then the
/// activations; the IS divergence never increases.
///
/// Factors are kept at or above [`NMF_FACTOR_FLOOR`]. Each update minimises a
/// convex one-dimensional majorizer, so clamping keeps the descent property.
pub fn nmf_update(power: ArrayView2<'_, f64>, model: NmfModel, iterations: usize) -> Result<NmfModel> {
    nmf_update_with_offset(power, model, 0.0, iterations)
}

/// [`nmf_update`] for the model `σ² = TV + δ` with a fixed offset `δ ≥ 0`.
/// The offset enters the majorizer as one more constant component, so the
/// same updates with `TV + δ` in place of `TV` still never increase the IS
/// divergence.
pub fn nmf_update_with_offset(
    power: ArrayView2<'_, f64>,
    model: NmfModel,
    offset: f64,
    iterations: usize,
) -> Result<NmfModel> {
    if !(offset >= 0.0 && offset.is_finite()) {
        return Err(Error::InvalidInput("NMF offset must be finite and nonnegative".into()));
    }
    let NmfModel {
        mut basis,
        mut activation,
    } = model;
    if basis.ncols() < 1 {
        return Err(Error::InvalidInput("NMF needs at least one basis".into()));
    }
    if power.dim() != (basis.nrows(), activation.ncols()) {
        return Err(Error::InvalidInput("power spectrogram shape mismatch".into()));
    }
    if power.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::InvalidInput("power spectrogram must be nonnegative".into()));
    }
    const TINY: f64 = 1e-300;
    for _ in 0..iterations {
        let model = basis.dot(&activation).mapv(|s| (s + offset).max(TINY));
        let inv = model.mapv(|s| 1.0 / s);
        let weighted = &power.to_owned() * &inv * &inv;
        let num = weighted.dot(&activation.t());
        let den = inv.dot(&activation.t());
        Zip::from(&mut basis).and(&num).and(&den).for_each(|t, &a, &b| {
            if b > 0.0 {
                *t = (*t * (a / b).sqrt()).max(NMF_FACTOR_FLOOR);
            }
        });

        let model = basis.dot(&activation).mapv(|s| (s + offset).max(TINY));
        let inv = model.mapv(|s| 1.0 / s);
        let weighted = &power.to_owned() * &inv * &inv;
        let num = basis.t().dot(&weighted);
        let den = basis.t().dot(&inv);
        Zip::from(&mut activation).and(&num).and(&den).for_each(|v, &a, &b| {
            if b > 0.0 {
                *v = (*v * (a / b).sqrt()).max(NMF_FACTOR_FLOOR);
            }
        });
    }
    Ok(NmfModel { basis, activation })
}

/// Single-channel enhancement model applied to separated spectrograms.
///
/// Input and output are single-channel spectrograms with identical geometry.
pub trait Denoiser {
    fn denoise(&self, y: &Spectrogram) -> Result<Spectrogram>;
}

impl<F> Denoiser for F
where
    F: Fn(&Spectrogram) -> Result<Spectrogram>,
{
    fn denoise(&self, y: &Spectrogram) -> Result<Spectrogram> {
        self(y)
    }
}

/// Runs an external waveform-domain denoiser through WAV files.
///
/// The command template is passed to `sh -c` after replacing `{in}` and
/// `{out}` with the exchange file paths. Exit status 0 means success.
#[derive(Debug, Clone)]
pub struct CommandDenoiser {
    pub command_template: String,
    pub exchange_dir: Option<PathBuf>,
    pub sample_rate: u32,
}

impl CommandDenoiser {
    pub fn new(command_template: impl Into<String>, sample_rate: u32) -> Result<Self> {
        let command_template = command_template.into();
        if !command_template.contains("{in}") || !command_template.contains("{out}") {
            return Err(Error::config(
                "denoiser.command",
                "template must contain both {in} and {out}",
            ));
        }
        Ok(Self {
            command_template,
            exchange_dir: None,
            sample_rate,
        })
    }

    pub fn with_exchange_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.exchange_dir = Some(dir.into());
        self
    }
}

fn shell_quote(p: &std::path::Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

fn adapter_error(message: impl Into<String>) -> Error {
    Error::Adapter {
        message: message.into(),
        stderr: String::new(),
    }
}

impl Denoiser for CommandDenoiser {
    fn denoise(&self, y: &Spectrogram) -> Result<Spectrogram> {
        if y.num_channels() != 1 {
            return Err(Error::InvalidInput("denoiser input must be single-channel".into()));
        }
        if y.sample_rate() != self.sample_rate {
            return Err(Error::InvalidInput(format!(
                "denoiser runs at {} Hz, spectrogram is {} Hz",
                self.sample_rate,
                y.sample_rate()
            )));
        }
        let dir = match &self.exchange_dir {
            Some(d) => tempfile::Builder::new().prefix("denoise").tempdir_in(d)?,
            None => tempfile::Builder::new().prefix("denoise").tempdir()?,
        };
        let input = dir.path().join("in.wav");
        let output = dir.path().join("out.wav");
        write_wav(&input, &istft(y)?)?;

        let cmd = self
            .command_template
            .replace("{in}", &shell_quote(&input))
            .replace("{out}", &shell_quote(&output));
        let result = Command::new("sh").arg("-c").arg(&cmd).output()?;
        if !result.status.success() {
            return Err(Error::Adapter {
                message: format!("`{cmd}` exited with {}", result.status),
                stderr: String::from_utf8_lossy(&result.stderr).into_owned(),
            });
        }
        let out = read_wav(&output).map_err(|e| adapter_error(format!("reading denoiser output: {e}")))?;
        if out.num_channels() != 1 {
            return Err(adapter_error(format!(
                "denoiser produced {} channels, expected 1",
                out.num_channels()
            )));
        }
        if out.sample_rate() != y.sample_rate() {
            return Err(adapter_error(format!(
                "denoiser changed the sample rate to {}",
                out.sample_rate()
            )));
        }
        let n = y.num_samples();
        if out.len().abs_diff(n) > y.hop_length() {
            return Err(adapter_error(format!(
                "denoiser output has {} samples, input had {n}",
                out.len()
            )));
        }
        stft_with(&out.resized(n), y.frame_config())
    }
}

/// Stand-in denoiser that knows the clean target.
///
/// For every frequency bin the input is projected onto the clean reference
/// `r`: `out_ij = c_i r_ij` with `c_i = Σ_j y_ij r*_ij / Σ_j |r_ij|²`. On a
/// separated signal `y = c·r + noise` this returns the in-phase target part.
#[derive(Debug, Clone)]
pub struct ReferenceDenoiser {
    reference: Array2<C64>,
}

impl ReferenceDenoiser {
    /// `reference` is a single-channel spectrogram of the clean target.
    pub fn new(reference: &Spectrogram) -> Result<Self> {
        if reference.num_channels() != 1 {
            return Err(Error::InvalidInput("reference must be single-channel".into()));
        }
        Ok(Self {
            reference: reference.channel(0).to_owned(),
        })
    }
}

impl Denoiser for ReferenceDenoiser {
    fn denoise(&self, y: &Spectrogram) -> Result<Spectrogram> {
        if y.num_channels() != 1 || y.channel(0).dim() != self.reference.dim() {
            return Err(Error::InvalidInput("input does not match reference geometry".into()));
        }
        let yv = y.channel(0);
        let mut out = Array2::<C64>::zeros(self.reference.dim());
        for (i, (row_y, row_r)) in yv.outer_iter().zip(self.reference.outer_iter()).enumerate() {
            let energy: f64 = row_r.iter().map(|z| z.norm_sqr()).sum();
            if energy == 0.0 {
                continue;
            }
            let cross: C64 = row_y.iter().zip(row_r.iter()).map(|(a, b)| a * b.conj()).sum();
            let coef = cross / energy;
            for (o, r) in out.row_mut(i).iter_mut().zip(row_r.iter()) {
                *o = coef * r;
            }
        }
        y.with_channel(out)
    }
}

/// Bin-wise target/noise estimates from a denoiser.
///
/// For the target source `ζ = DNN(Y_n)`; every other source gets the residual
/// `ζ = y_n − DNN(Y_n)`, computed in the complex domain.
pub fn zeta(y: &Spectrogram, target: usize, denoiser: &dyn Denoiser) -> Result<Array3<C64>> {
    let nsrc = y.num_channels();
    if target >= nsrc {
        return Err(Error::InvalidInput(format!(
            "target index {target} out of range for {nsrc} sources"
        )));
    }
    let mut out = Array3::<C64>::zeros(y.data().dim());
    for n in 0..nsrc {
        let single = y.extract_channel(n);
        let clean = denoiser.denoise(&single)?;
        if clean.num_channels() != 1 || clean.channel(0).dim() != single.channel(0).dim() {
            return Err(adapter_error("denoiser changed the spectrogram shape"));
        }
        let mut dst = out.index_axis_mut(Axis(0), n);
        if n == target {
            dst.assign(&clean.channel(0));
        } else {
            Zip::from(&mut dst)
                .and(single.channel(0))
                .and(clean.channel(0))
                .for_each(|d, &a, &b| *d = a - b);
        }
    }
    Ok(out)
}

/// Variance model driven by a denoiser: `σ² = max(|ζ|², ε)` with
/// `ε = epsilon_scale · mean |ζ|²` computed per source.
pub fn idlma_variances(
    y: &Spectrogram,
    target: usize,
    denoiser: &dyn Denoiser,
    epsilon_scale: f64,
) -> Result<VarianceMap> {
    let z = zeta(y, target, denoiser)?;
    Ok(floored_powers(&z, epsilon_scale))
}

/// Variance model from true source spectrograms: `σ² = max(|s|², ε)`.
pub fn oracle_variances(sources: &Spectrogram, epsilon_scale: f64) -> VarianceMap {
    floored_powers(sources.data(), epsilon_scale)
}

fn floored_powers(z: &Array3<C64>, epsilon_scale: f64) -> VarianceMap {
    let mut values = Array3::<f64>::zeros(z.dim());
    let mut floors = Vec::with_capacity(z.dim().0);
    for (n, src) in z.axis_iter(Axis(0)).enumerate() {
        let power = src.mapv(|c| c.norm_sqr());
        let (floored, eps) = floor_power(power.view(), epsilon_scale);
        values.index_axis_mut(Axis(0), n).assign(&floored);
        floors.push(eps);
    }
    VarianceMap { values, floors }
}
