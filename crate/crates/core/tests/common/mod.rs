//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rcscme::eval::{GroundTruth, Scenario};
use rcscme::hermitian::HermitianMatrix;
use rcscme::signal_io::{stft, Spectrogram, Waveform};
use rcscme::{CMatrix, CVector, C64};

pub fn cn(rng: &mut ChaCha8Rng) -> C64 {
    C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-major copy of a matrix as plain vectors.
fn rows(a: &CMatrix) -> Vec<Vec<C64>> {
    (0..a.nrows()).map(|r| (0..a.ncols()).map(|c| a[(r, c)]).collect()).collect()
}

/// Gauss–Jordan inverse with partial pivoting, written independently of the
/// library's linear algebra.
pub fn dense_inverse(a: &CMatrix) -> CMatrix {
    let n = a.nrows();
    let mut m = rows(a);
    let mut inv: Vec<Vec<C64>> = (0..n)
        .map(|r| (0..n).map(|c| if r == c { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }).collect())
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].norm().total_cmp(&m[y][col].norm())).unwrap();
        m.swap(col, piv);
        inv.swap(col, piv);
        let p = m[col][col];
        for c in 0..n {
            m[col][c] /= p;
            inv[col][c] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                for c in 0..n {
                    let (mc, ic) = (m[col][c], inv[col][c]);
                    m[r][c] -= f * mc;
                    inv[r][c] -= f * ic;
                }
            }
        }
    }
    CMatrix::from_fn(n, n, |r, c| inv[r][c])
}

/// `log |det a|` by elimination with partial pivoting.
pub fn dense_logdet(a: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut m = rows(a);
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].norm().total_cmp(&m[y][col].norm())).unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        acc += p.norm().ln();
        for r in col + 1..n {
            let f = m[r][col] / p;
            for c in col..n {
                let v = m[col][c];
                m[r][c] -= f * v;
            }
        }
    }
    acc
}

/// Random PSD matrix of rank `m - 1`.
pub fn random_rank_deficient(rng: &mut ChaCha8Rng, m: usize) -> HermitianMatrix {
    let b = CMatrix::from_fn(m, m - 1, |_, _| cn(rng));
    HermitianMatrix::symmetrize(&b * b.adjoint())
}

pub fn random_vector(rng: &mut ChaCha8Rng, m: usize) -> CVector {
    CVector::from_fn(m, |_, _| cn(rng))
}

pub fn rel_err(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Standard scenario shortened to `seconds` with one silence block in the
/// middle fifth.
pub fn short_scenario(seconds: f64, seed: u64) -> Scenario {
    Scenario {
        duration_s: seconds,
        silence: vec![[0.4 * seconds, 0.6 * seconds]],
        seed,
        ..Scenario::default()
    }
}

/// Single-channel STFT of the reference-microphone target image.
pub fn reference_spectrogram(truth: &GroundTruth) -> Spectrogram {
    let w = Waveform::mono(truth.target_image.channel(0).to_vec(), truth.target_image.sample_rate()).unwrap();
    stft(&w, 64.0, 32.0).unwrap()
}

/// Small random EM instance: mixture bins, a model with random steering
/// vectors and completed noise SCMs, and random positive variances.
pub fn random_em_instance(
    rng: &mut ChaCha8Rng,
    m: usize,
) -> (Spectrogram, rcscme::em::ScmModel, rcscme::em::EmState) {
    use ndarray::{Array2, Array3};
    use rcscme::hermitian::RankOneCompletion;
    use rcscme::signal_io::FrameConfig;
    let (window, hop, samples) = (4, 2, 16);
    let frames = FrameConfig::new(window, hop).unwrap().num_frames(samples);
    let bins = window / 2 + 1;
    let data = Array3::from_shape_fn((m, bins, frames), |_| cn(rng));
    let x = Spectrogram::from_parts(data, window, hop, 16000, samples).unwrap();
    let steering = (0..bins).map(|_| random_vector(rng, m)).collect();
    let noise = (0..bins)
        .map(|_| {
            let lambda = 10f64.powf(rng.random_range(-1.0..1.0));
            RankOneCompletion::along_null_vector(random_rank_deficient(rng, m), lambda).unwrap()
        })
        .collect();
    let var = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((bins, frames), |_| 10f64.powf(rng.random_range(-1.0..1.0)));
    let state = rcscme::em::EmState {
        target_var: var(rng),
        noise_var: var(rng),
    };
    (x, rcscme::em::ScmModel { steering, noise }, state)
}
