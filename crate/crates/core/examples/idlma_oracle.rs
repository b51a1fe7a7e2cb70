//! IDLMA with an oracle denoiser that projects onto the clean target, the
//! desk-scale stand-in for a trained network.
//!
//! ```text
//! cargo run --release --example idlma_oracle
//! ```

use rcscme::demix::{idlma, IdlmaConfig};
use rcscme::eval::{improvement, sdr_sir_sar, simulate, Scenario};
use rcscme::signal_io::{istft, stft, Waveform};
use rcscme::source_models::ReferenceDenoiser;

fn main() -> rcscme::Result<()> {
    let (mix, truth) = simulate(&Scenario::default())?;
    let x = stft(&mix, 64.0, 32.0)?;
    let reference = stft(&Waveform::mono(truth.target_image.channel(0).to_vec(), 16_000)?, 64.0, 32.0)?;
    let denoiser = ReferenceDenoiser::new(&reference)?;

    let input = sdr_sir_sar(&mix, &truth)?;
    for iterations in [10, 30, 90] {
        let run = idlma(&x, &denoiser, &IdlmaConfig { iterations, ..IdlmaConfig::default() })?;
        let out = istft(&run.state.y.extract_channel(run.state.target))?;
        let m = sdr_sir_sar(&out, &truth)?;
        println!("{iterations:>3} sweeps: ΔSDR {:+.2} dB  {m:?}", improvement(m.sdr, input.sdr));
    }
    Ok(())
}
