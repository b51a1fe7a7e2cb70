//! Drives IDLMA with an external command-line denoiser that exchanges WAV
//! files. `cp {in} {out}` is the identity; any program that reads `{in}` and
//! writes a mono WAV of the same rate to `{out}` works.
//!
//! ```text
//! cargo run --release --example external_denoiser -- 'cp {in} {out}'
//! ```

use rcscme::demix::{idlma, IdlmaConfig};
use rcscme::eval::{sdr_sir_sar, simulate, Scenario};
use rcscme::signal_io::{istft, stft};
use rcscme::source_models::CommandDenoiser;

fn main() -> rcscme::Result<()> {
    let cmd = std::env::args().nth(1).unwrap_or_else(|| "cp {in} {out}".into());
    let scn = Scenario {
        duration_s: 2.0,
        silence: vec![[0.5, 0.8]],
        ..Scenario::default()
    };
    let (mix, truth) = simulate(&scn)?;
    let x = stft(&mix, 64.0, 32.0)?;
    let denoiser = CommandDenoiser::new(cmd.clone(), mix.sample_rate())?;
    let run = idlma(
        &x,
        &denoiser,
        &IdlmaConfig {
            iterations: 6,
            refresh_every: 3,
            ..IdlmaConfig::default()
        },
    )?;
    let out = istft(&run.state.y.extract_channel(run.state.target))?;
    println!("denoiser `{cmd}`: {:?}", sdr_sir_sar(&out, &truth)?);
    Ok(())
}
