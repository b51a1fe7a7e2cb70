use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rcscme::eval::{simulate, Scenario};
use rcscme::pipeline::{run_experiment, run_on_mixture, run_pipeline, Mode, PipelineConfig, RunOutput};
use rcscme::signal_io::write_wav;
use rcscme::{Error, Result};

/// Multichannel speech enhancement with rank-constrained SCM estimation.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// One mode, or a comma-separated list for an experiment.
    #[arg(long)]
    mode: Option<String>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Multichannel input WAV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Enhanced multichannel output WAV.
    #[arg(long)]
    output: Option<PathBuf>,
    /// TOML scenario file; runs on a simulated mixture with metrics.
    #[arg(long, value_name = "SCENARIO_FILE")]
    simulate: Option<PathBuf>,
    /// Seeds as `7`, `0,3,5` or `0..10`.
    #[arg(long)]
    seeds: Option<String>,
    /// Directory for intermediate quantities.
    #[arg(long)]
    dump_intermediates: Option<PathBuf>,
    /// CSV file for experiment metrics.
    #[arg(long)]
    metrics_csv: Option<PathBuf>,
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::InvalidInput(format!("cannot parse seeds {text:?}"));
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        return if a < b { Ok((a..b).collect()) } else { Err(bad()) };
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn finish(out: &RunOutput, args: &Args) -> Result<()> {
    if let Some(path) = &args.output {
        write_wav(path, &out.output)?;
    }
    if let Some(dir) = &args.dump_intermediates {
        out.intermediates.write(dir)?;
    }
    let json = serde_json::to_string_pretty(&out.report).map_err(|e| Error::Numerical(e.to_string()))?;
    println!("{json}");
    Ok(())
}

fn run(args: Args) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env();
    let modes: Vec<Mode> = match &args.mode {
        Some(list) => list.split(',').map(str::parse).collect::<Result<_>>()?,
        None => vec![cfg.mode],
    };
    cfg.mode = modes[0];
    if let Some(p) = &args.input {
        cfg.input = Some(p.clone());
    }
    if let Some(p) = &args.output {
        cfg.output = Some(p.clone());
    }
    let seeds = args.seeds.as_deref().map(parse_seeds).transpose()?;

    let scenario = match &args.simulate {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config("simulate", format!("{}: {e}", path.display())))?;
            Some(toml::from_str::<Scenario>(&text).map_err(|e| Error::config("simulate", e.to_string()))?)
        }
        None => cfg.scenario.clone(),
    };

    let experiment = modes.len() > 1 || seeds.as_ref().is_some_and(|s| s.len() > 1) || args.metrics_csv.is_some();
    if experiment {
        let scenario = scenario.ok_or_else(|| Error::config("simulate", "experiments need a scenario"))?;
        let seeds = seeds.unwrap_or_else(|| vec![cfg.seed]);
        let table = run_experiment(&cfg, &[scenario], &modes, &seeds)?;
        match &args.metrics_csv {
            Some(path) => table.write_csv_file(path)?,
            None => table.write_csv(std::io::stdout())?,
        }
        for row in &table.summary {
            eprintln!(
                "{:<16} mean max-SDR improvement {:>7.2} dB ({} runs)",
                row.mode,
                row.mean_sdr_improvement.unwrap_or(f64::NAN),
                row.runs
            );
        }
        return Ok(());
    }

    if let Some(seed) = seeds.and_then(|s| s.first().copied()) {
        cfg.seed = seed;
    }
    let out = match scenario {
        Some(scn) => {
            let (mix, truth) = simulate(&scn.with_seed(cfg.seed))?;
            run_on_mixture(&cfg, &mix, Some(&truth))?
        }
        None => {
            if cfg.input.is_none() {
                return Err(Error::config("input", "need --input or --simulate"));
            }
            run_pipeline(&cfg)?
        }
    };
    finish(&out, &args)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
