//! Blind ILRMA separation of a simulated mixture, with the target output
//! picked against the known clean image.
//!
//! ```text
//! cargo run --release --example ilrma_separation
//! ```

use rcscme::demix::{ilrma, select_target, IlrmaConfig, TargetSelector};
use rcscme::eval::{improvement, sdr_sir_sar, simulate, Scenario};
use rcscme::signal_io::{istft, stft, Waveform};

fn main() -> rcscme::Result<()> {
    let (mix, truth) = simulate(&Scenario::default())?;
    let x = stft(&mix, 64.0, 32.0)?;
    let run = ilrma(&x, &IlrmaConfig::default())?;
    println!(
        "cost {:.4e} -> {:.4e} over {} half-steps",
        run.cost_trace[0],
        run.cost_trace[run.cost_trace.len() - 1],
        run.cost_trace.len() - 1
    );

    let reference = stft(&Waveform::mono(truth.target_image.channel(0).to_vec(), 16_000)?, 64.0, 32.0)?;
    let target = select_target(&run.state.y, &TargetSelector::Oracle(&reference))?;
    let out = istft(&run.state.y.extract_channel(target))?;
    let input = sdr_sir_sar(&mix, &truth)?;
    let output = sdr_sir_sar(&out, &truth)?;
    println!("target output {target}: {output:?}");
    println!("SDR improvement {:+.2} dB", improvement(output.sdr, input.sdr));
    Ok(())
}
