//! Simulates the standard diffuse-noise scenario and scores simple estimates
//! with SDR/SIR/SAR.
//!
//! ```text
//! cargo run --release --example simulate_and_score
//! ```

use rcscme::eval::{improvement, sdr_sir_sar, simulate, Scenario};
use rcscme::signal_io::Waveform;

fn main() -> rcscme::Result<()> {
    let scn = Scenario::default();
    let (mix, truth) = simulate(&scn)?;
    println!(
        "{} mics, {} noise sources, {:.1} s, silence {:?}",
        scn.mics, scn.noise_sources, scn.duration_s, scn.silence
    );

    let input = sdr_sir_sar(&mix, &truth)?;
    println!("mixture       {input:?}");

    // Average of all microphones: a crude delay-free beamformer.
    let m = mix.num_channels() as f64;
    let avg: Vec<f64> = (0..mix.len())
        .map(|t| (0..mix.num_channels()).map(|c| mix.channel(c)[t]).sum::<f64>() / m)
        .collect();
    let avg = sdr_sir_sar(&Waveform::mono(avg, mix.sample_rate())?, &truth)?;
    println!("channel mean  {avg:?}  ΔSDR {:+.2} dB", improvement(avg.sdr, input.sdr));

    let perfect = sdr_sir_sar(&truth.target_image, &truth)?;
    println!("target image  {perfect:?}");
    Ok(())
}
