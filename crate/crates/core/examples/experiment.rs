//! Multi-seed comparison of all enhancement modes on the standard scenario
//! with oracle variances.
//!
//! ```text
//! cargo run --release --example experiment -- [seeds] [out.csv]
//! ```

use rcscme::eval::Scenario;
use rcscme::pipeline::{run_experiment, Mode, PipelineConfig};

fn main() -> rcscme::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let csv = args.next();

    let cfg = PipelineConfig {
        oracle: true,
        ..PipelineConfig::default()
    };
    let seeds: Vec<u64> = (0..seeds).collect();
    let start = std::time::Instant::now();
    let table = run_experiment(&cfg, &[Scenario::default()], &Mode::ALL, &seeds)?;

    for row in &table.rows {
        println!(
            "{:<16} seed {:>2}  max ΔSDR {:>7.2} dB  best iter {:?}{}",
            row.mode,
            row.seed.unwrap_or_default(),
            row.max_sdr_improvement.unwrap_or(f64::NAN),
            row.best_iteration,
            row.error.as_deref().map(|e| format!("  error: {e}")).unwrap_or_default(),
        );
    }
    println!();
    for row in &table.summary {
        println!(
            "{:<16} mean ΔSDR {:>7.2} dB over {} runs",
            row.mode,
            row.mean_sdr_improvement.unwrap_or(f64::NAN),
            row.runs
        );
    }
    println!("elapsed {:.1} s", start.elapsed().as_secs_f64());
    if let Some(path) = csv {
        table.write_csv_file(path)?;
    }
    Ok(())
}
