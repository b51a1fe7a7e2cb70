//! Waveform I/O and the analysis/synthesis filterbank.
//!
//! The STFT uses a periodic Hamming window and a one-sided spectrum of
//! `window/2 + 1` bins. Each signal end is padded with `window - hop` zeros so
//! every input sample is covered by the full set of overlapping frames; the
//! inverse divides the overlap-added, re-windowed frames by the summed squared
//! window, which reconstructs the input exactly.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2};
use rustfft::FftPlanner;

use crate::{Error, Result, C64};

/// Multichannel real-valued signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if channels.is_empty() {
            return Err(Error::InvalidInput("waveform needs at least one channel".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidInput("channels differ in length".into()));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Pads with zeros or truncates every channel to `len` samples.
    pub fn resized(mut self, len: usize) -> Self {
        for c in &mut self.channels {
            c.resize(len, 0.0);
        }
        self
    }
}

/// Complex time-frequency representation, stored as `(channel, bin, frame)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Array3<C64>,
    window_length: usize,
    hop_length: usize,
    sample_rate: u32,
    num_samples: usize,
}

impl Spectrogram {
    /// Wraps raw bins. `data` has shape `(channels, window/2 + 1, frames)` and
    /// `num_samples` is the length of the waveform the frames describe.
    pub fn from_parts(
        data: Array3<C64>,
        window_length: usize,
        hop_length: usize,
        sample_rate: u32,
        num_samples: usize,
    ) -> Result<Self> {
        let cfg = FrameConfig::new(window_length, hop_length)?;
        let (_, bins, frames) = data.dim();
        if bins != window_length / 2 + 1 {
            return Err(Error::InvalidInput(format!(
                "{bins} bins inconsistent with window length {window_length}"
            )));
        }
        if frames == 0 || frames != cfg.num_frames(num_samples) {
            return Err(Error::InvalidInput(format!(
                "{frames} frames inconsistent with {num_samples} samples at hop {hop_length}"
            )));
        }
        Ok(Self {
            data,
            window_length,
            hop_length,
            sample_rate,
            num_samples,
        })
    }

    /// Same geometry as `self`, new bins.
    pub fn with_data(&self, data: Array3<C64>) -> Result<Self> {
        Self::from_parts(
            data,
            self.window_length,
            self.hop_length,
            self.sample_rate,
            self.num_samples,
        )
    }

    /// Single-channel spectrogram sharing `self`'s geometry.
    pub fn with_channel(&self, bins: Array2<C64>) -> Result<Self> {
        self.with_data(bins.insert_axis(ndarray::Axis(0)))
    }

    pub fn data(&self) -> &Array3<C64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<C64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<C64> {
        self.data
    }

    pub fn channel(&self, m: usize) -> ArrayView2<'_, C64> {
        self.data.slice(s![m, .., ..])
    }

    /// Copies channel `m` out as a single-channel spectrogram.
    pub fn extract_channel(&self, m: usize) -> Spectrogram {
        Spectrogram {
            data: self.data.slice(s![m..m + 1, .., ..]).to_owned(),
            ..*self
        }
    }

    pub fn num_channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn num_bins(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_frames(&self) -> usize {
        self.data.dim().2
    }

    pub fn window_length(&self) -> usize {
        self.window_length
    }

    pub fn hop_length(&self) -> usize {
        self.hop_length
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn frame_config(&self) -> FrameConfig {
        FrameConfig {
            window: self.window_length,
            hop: self.hop_length,
        }
    }

    /// Observation vector `x_ij` across channels.
    pub fn bin_vector(&self, i: usize, j: usize) -> crate::CVector {
        crate::CVector::from_iterator(self.num_channels(), self.data.slice(s![.., i, j]).iter().copied())
    }
}

/// Window/hop pair in samples with the padding convention used by [`stft`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameConfig {
    pub window: usize,
    pub hop: usize,
}

impl FrameConfig {
    pub fn new(window: usize, hop: usize) -> Result<Self> {
        if window == 0 || window % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "window length {window} must be a positive even number"
            )));
        }
        if hop == 0 || hop > window || window % hop != 0 {
            return Err(Error::InvalidInput(format!(
                "hop {hop} must divide window length {window}"
            )));
        }
        Ok(Self { window, hop })
    }

    /// Converts millisecond durations at `sample_rate` into sample counts.
    pub fn from_ms(window_ms: f64, hop_ms: f64, sample_rate: u32) -> Result<Self> {
        let to_samples = |ms: f64, what: &str| -> Result<usize> {
            let exact = ms * sample_rate as f64 / 1000.0;
            let rounded = exact.round();
            if rounded < 1.0 || (exact - rounded).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "{what} of {ms} ms is not an integer sample count at {sample_rate} Hz"
                )));
            }
            Ok(rounded as usize)
        };
        Self::new(to_samples(window_ms, "window")?, to_samples(hop_ms, "hop")?)
    }

    pub fn num_bins(&self) -> usize {
        self.window / 2 + 1
    }

    pub fn front_pad(&self) -> usize {
        self.window - self.hop
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        let padded = self.front_pad() + num_samples + self.front_pad();
        (padded - self.window).div_ceil(self.hop) + 1
    }

    /// Start of frame `j` in original-signal coordinates (may be negative).
    pub fn frame_start(&self, j: usize) -> isize {
        (j * self.hop) as isize - self.front_pad() as isize
    }
}

/// Periodic Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / n as f64).cos())
        .collect()
}

/// Forward STFT with durations given in milliseconds.
pub fn stft(w: &Waveform, window_ms: f64, hop_ms: f64) -> Result<Spectrogram> {
    let cfg = FrameConfig::from_ms(window_ms, hop_ms, w.sample_rate())?;
    stft_with(w, cfg)
}

/// Forward STFT with window and hop in samples.
pub fn stft_with(w: &Waveform, cfg: FrameConfig) -> Result<Spectrogram> {
    let n = w.len();
    if n < cfg.window {
        return Err(Error::SignalTooShort {
            len: n,
            window: cfg.window,
        });
    }
    let frames = cfg.num_frames(n);
    let bins = cfg.num_bins();
    let window = hamming(cfg.window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.window);
    let mut data = Array3::<C64>::zeros((w.num_channels(), bins, frames));
    let mut buf = vec![C64::new(0.0, 0.0); cfg.window];
    for (m, samples) in w.channels().iter().enumerate() {
        for j in 0..frames {
            let start = cfg.frame_start(j);
            for (k, b) in buf.iter_mut().enumerate() {
                let t = start + k as isize;
                let v = if t >= 0 && (t as usize) < n {
                    samples[t as usize]
                } else {
                    0.0
                };
                *b = C64::new(v * window[k], 0.0);
            }
            fft.process(&mut buf);
            for i in 0..bins {
                data[[m, i, j]] = buf[i];
            }
        }
    }
    Ok(Spectrogram {
        data,
        window_length: cfg.window,
        hop_length: cfg.hop,
        sample_rate: w.sample_rate(),
        num_samples: n,
    })
}

/// Inverse STFT by weighted overlap-add.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let cfg = FrameConfig::new(s.window_length, s.hop_length)?;
    let frames = s.num_frames();
    if s.num_bins() != cfg.num_bins() || frames != cfg.num_frames(s.num_samples) {
        return Err(Error::InvalidInput(
            "spectrogram shape does not match its window/hop metadata".into(),
        ));
    }
    let n = s.num_samples;
    let win = cfg.window;
    let window = hamming(win);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(win);

    let mut norm = vec![0.0; n];
    for j in 0..frames {
        let start = cfg.frame_start(j);
        for (k, wk) in window.iter().enumerate() {
            let t = start + k as isize;
            if t >= 0 && (t as usize) < n {
                norm[t as usize] += wk * wk;
            }
        }
    }

    let mut buf = vec![C64::new(0.0, 0.0); win];
    let mut channels = Vec::with_capacity(s.num_channels());
    for m in 0..s.num_channels() {
        let mut out = vec![0.0; n];
        for j in 0..frames {
            for i in 0..cfg.num_bins() {
                buf[i] = s.data[[m, i, j]];
            }
            for i in 1..win / 2 {
                buf[win - i] = s.data[[m, i, j]].conj();
            }
            // The DC and Nyquist bins of a real frame are real.
            buf[0].im = 0.0;
            buf[win / 2].im = 0.0;
            ifft.process(&mut buf);
            let start = cfg.frame_start(j);
            for (k, wk) in window.iter().enumerate() {
                let t = start + k as isize;
                if t >= 0 && (t as usize) < n {
                    out[t as usize] += buf[k].re / win as f64 * wk;
                }
            }
        }
        for (o, d) in out.iter_mut().zip(&norm) {
            *o /= d;
        }
        channels.push(out);
    }
    Waveform::new(channels, s.sample_rate)
}

/// On-disk sample encoding for [`write_wav_as`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Float32,
    Pcm16,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let nch = spec.channels as usize;
    if !(1..=8).contains(&nch) {
        return Err(Error::UnsupportedFormat(format!("{nch} channels")));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{bits}-bit {fmt:?} samples (only 16-bit PCM and 32-bit float are supported)"
            )))
        }
    };
    let frames = interleaved.len() / nch;
    let mut channels = vec![Vec::with_capacity(frames); nch];
    for frame in interleaved.chunks_exact(nch) {
        for (c, v) in channels.iter_mut().zip(frame) {
            c.push(*v);
        }
    }
    Waveform::new(channels, spec.sample_rate)
}

/// Writes 32-bit float samples.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    write_wav_as(path, w, SampleFormat::Float32)
}

pub fn write_wav_as(path: impl AsRef<Path>, w: &Waveform, format: SampleFormat) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    if w.num_channels() > 8 {
        return Err(Error::UnsupportedFormat(format!("{} channels", w.num_channels())));
    }
    let (bits, sample_format) = match format {
        SampleFormat::Float32 => (32, hound::SampleFormat::Float),
        SampleFormat::Pcm16 => (16, hound::SampleFormat::Int),
    };
    let spec = hound::WavSpec {
        channels: w.num_channels() as u16,
        sample_rate: w.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for t in 0..w.len() {
        for c in w.channels() {
            match format {
                SampleFormat::Float32 => writer.write_sample(c[t] as f32),
                SampleFormat::Pcm16 => {
                    let q = (c[t] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)
                }
            }
            .map_err(wav_err)?;
        }
    }
    writer.finalize().map_err(wav_err)
}
