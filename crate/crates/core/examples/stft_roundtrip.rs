//! Writes a two-channel chirp to WAV, reads it back, and checks that the
//! Hamming STFT/ISTFT pair reconstructs it.
//!
//! ```text
//! cargo run --example stft_roundtrip
//! ```

use rcscme::signal_io::{istft, read_wav, stft, write_wav, Waveform};

fn main() -> rcscme::Result<()> {
    let fs = 16_000;
    let n = 2 * fs as usize;
    let chirp = |t: usize, f0: f64| {
        let s = t as f64 / fs as f64;
        0.3 * (std::f64::consts::TAU * (f0 + 400.0 * s) * s).sin()
    };
    let w = Waveform::new(
        vec![(0..n).map(|t| chirp(t, 200.0)).collect(), (0..n).map(|t| chirp(t, 900.0)).collect()],
        fs,
    )?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("chirp.wav");
    write_wav(&path, &w)?;
    let back = read_wav(&path)?;

    let spec = stft(&back, 64.0, 32.0)?;
    println!(
        "{} channels, {} bins x {} frames",
        spec.num_channels(),
        spec.num_bins(),
        spec.num_frames()
    );
    let rec = istft(&spec)?;
    let mut worst: f64 = 0.0;
    for m in 0..w.num_channels() {
        let peak = w.channel(m).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (a, b) in w.channel(m).iter().zip(rec.channel(m)) {
            worst = worst.max((a - b).abs() / peak);
        }
    }
    println!("max relative reconstruction error {worst:.2e}");
    Ok(())
}
