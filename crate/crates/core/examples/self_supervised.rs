//! Noise-only frame detection with the oracle denoiser, the noise SCM prior
//! built from those frames, and the self-supervised RCSCME run next to the
//! baseline.
//!
//! ```text
//! cargo run --release --example self_supervised
//! ```

use rcscme::em::{detect_noise_frames, estimate_noise_prior};
use rcscme::eval::{simulate, true_silent_frames, Scenario};
use rcscme::pipeline::{run_on_mixture, Mode, PipelineConfig};
use rcscme::signal_io::{stft, Waveform};
use rcscme::source_models::ReferenceDenoiser;

fn main() -> rcscme::Result<()> {
    let (mix, truth) = simulate(&Scenario::default())?;
    let x = stft(&mix, 64.0, 32.0)?;
    let reference = stft(&Waveform::mono(truth.target_image.channel(0).to_vec(), 16_000)?, 64.0, 32.0)?;
    let denoiser = ReferenceDenoiser::new(&reference)?;

    let detected = detect_noise_frames(&x, &denoiser, 1e-3, 0)?;
    let truth_frames = true_silent_frames(&truth, x.frame_config());
    println!("detected {} noise-only frames, {} truly silent", detected.len(), truth_frames.len());
    let prior = estimate_noise_prior(&x, &detected, 800.0, 1e4)?;
    println!("mean ‖R̆‖_F = {:.3e}", prior.mean_scale_norm());

    for mode in [Mode::IdlmaRcscme, Mode::IdlmaRcscmeSs] {
        let cfg = PipelineConfig {
            mode,
            oracle: true,
            ..PipelineConfig::default()
        };
        let r = run_on_mixture(&cfg, &mix, Some(&truth))?.report;
        println!(
            "{mode:<16} max ΔSDR {:+.2} dB at iteration {:?}; mean λ {:.2e} -> {:.2e}",
            r.max_sdr_improvement.unwrap_or(f64::NAN),
            r.best_iteration,
            r.lambda_trace[0],
            r.lambda_trace[r.lambda_trace.len() - 1]
        );
    }
    Ok(())
}
