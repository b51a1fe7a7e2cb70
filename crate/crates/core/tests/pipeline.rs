//! End-to-end runs through the library and the command-line binary.

mod common;

use std::path::Path;
use std::process::Command;

use common::*;
use rcscme::em::estimate_noise_prior;
use rcscme::eval::{simulate, GroundTruth};
use rcscme::pipeline::{run_experiment, run_on_mixture, Mode, PipelineConfig, DENOISER_ENV};
use rcscme::signal_io::{read_wav, stft, Waveform};
use rcscme::Error;

fn cfg(mode: Mode) -> PipelineConfig {
    PipelineConfig {
        mode,
        oracle: mode.uses_idlma(),
        ..PipelineConfig::default()
    }
}

#[test]
fn rcscme_report_has_monotone_objective() {
    let (mix, truth) = simulate(&short_scenario(2.0, 1)).unwrap();
    let out = run_on_mixture(&cfg(Mode::IlrmaRcscme), &mix, Some(&truth)).unwrap();
    let r = &out.report;
    assert_eq!(r.rcscme_objective.len(), 10);
    let mut prev = r.rcscme_initial_objective.unwrap();
    for &o in &r.rcscme_objective {
        assert!(o >= prev - 1e-8 * prev.abs(), "{prev} -> {o}");
        prev = o;
    }
    assert_eq!(r.separation_cost.len(), 2 * 50 + 1);
    assert_eq!(r.lambda_trace.len(), 10);
    assert_eq!(r.sdr_improvement.len(), 10);
    assert!((1..=10).contains(&r.best_iteration.unwrap()));
    assert_eq!(out.output.len(), mix.len());
    assert_eq!(out.output.num_channels(), mix.num_channels());
    assert_eq!(r.output_metrics, Some(rcscme::eval::sdr_sir_sar(&out.output, &truth).unwrap()));
}

#[test]
fn runs_are_deterministic() {
    let (mix, truth) = simulate(&short_scenario(1.5, 2)).unwrap();
    for mode in [Mode::IlrmaRcscme, Mode::IdlmaRcscmeSs] {
        let a = run_on_mixture(&cfg(mode), &mix, Some(&truth)).unwrap();
        let b = run_on_mixture(&cfg(mode), &mix, Some(&truth)).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.output, b.output);
    }
}

#[test]
fn self_supervised_diagnostics_match_recomputation() {
    let (mix, truth) = simulate(&short_scenario(2.0, 3)).unwrap();
    let c = cfg(Mode::IdlmaRcscmeSs);
    let out = run_on_mixture(&c, &mix, Some(&truth)).unwrap();
    let frames = &out.intermediates.noise_frames;
    assert_eq!(out.report.noise_frames, Some(frames.len()));
    assert!(!frames.is_empty());
    let x = stft(&mix, 64.0, 32.0).unwrap();
    let prior = estimate_noise_prior(&x, frames, c.hyper.alpha_p, c.hyper.beta_p).unwrap();
    let norm = out.report.mean_prior_norm.unwrap();
    assert!((prior.mean_scale_norm() - norm).abs() <= 1e-12 * norm);
}

#[test]
fn intermediates_are_dumped() {
    let (mix, truth) = simulate(&short_scenario(1.5, 4)).unwrap();
    let out = run_on_mixture(&cfg(Mode::IlrmaRcscme), &mix, Some(&truth)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.intermediates.write(dir.path()).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("intermediates.json")).unwrap()).unwrap();
    let bins = 513;
    assert_eq!(v["demixing"].as_array().unwrap().len(), bins);
    assert_eq!(v["demixing"][0].as_array().unwrap().len(), 4);
    assert_eq!(v["noise_scm"].as_array().unwrap().len(), bins);
    let lambda: Vec<f64> = serde_json::from_value(v["lambda"].clone()).unwrap();
    assert_eq!(lambda.len(), bins);
    assert!(lambda.iter().all(|&l| l > 0.0));
    let mean = lambda.iter().sum::<f64>() / bins as f64;
    let last = *out.report.lambda_trace.last().unwrap();
    assert!((mean - last).abs() <= 1e-12 * last);
}

#[test]
fn already_separated_input_is_left_alone() {
    // Identity mixing: the target alone at microphone 1, independent noise
    // at microphone 2.
    let (_, truth) = simulate(&short_scenario(2.0, 5)).unwrap();
    let n = truth.clean_target.len();
    let target = truth.clean_target.channel(0).to_vec();
    let noise = truth.noise_image.channel(1).to_vec();
    let mix = Waveform::new(vec![target.clone(), noise.clone()], 16000).unwrap();
    let gt = GroundTruth {
        target_image: Waveform::new(vec![target.clone(), vec![0.0; n]], 16000).unwrap(),
        noise_image: Waveform::new(vec![vec![0.0; n], noise], 16000).unwrap(),
        clean_target: truth.clean_target.clone(),
    };
    let out = run_on_mixture(&cfg(Mode::Idlma), &mix, Some(&gt)).unwrap();
    let r = out.report;
    assert_eq!(r.target_index, 0);
    assert!(r.separation_metrics.unwrap().sdr > 30.0, "{:?}", r.separation_metrics);
    assert!(r.max_sdr_improvement.unwrap() <= 1e-9);
}

#[test]
fn experiment_table_rows_and_summary() {
    let scn = short_scenario(1.5, 0);
    let modes = [Mode::Ilrma, Mode::IlrmaRcscme];
    let t = run_experiment(&PipelineConfig::default(), &[scn.clone()], &modes, &[3, 4]).unwrap();
    assert_eq!(t.rows.len(), 4);
    assert_eq!(t.summary.len(), 2);
    for mode in modes {
        let rows = t.rows_for(0, mode);
        assert_eq!(rows.iter().map(|r| r.seed.unwrap()).collect::<Vec<_>>(), [3, 4]);
        assert!(rows.iter().all(|r| r.error.is_none()));
        let imps: Vec<f64> = rows.iter().map(|r| r.max_sdr_improvement.unwrap()).collect();
        let s = t.summary_for(0, mode).unwrap();
        assert_eq!(s.runs, 2);
        assert!((s.mean_sdr_improvement.unwrap() - (imps[0] + imps[1]) / 2.0).abs() < 1e-12);
        assert_eq!(s.max_sdr_improvement.unwrap(), imps[0].max(imps[1]));
    }
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    let mut reader = csv::Reader::from_reader(buf.as_slice());
    let kinds: Vec<String> = reader.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(kinds, ["run", "run", "run", "run", "summary", "summary"]);
    let again = run_experiment(&PipelineConfig::default(), &[scn], &modes, &[3, 4]).unwrap();
    assert_eq!(again, t);
}

#[test]
fn failed_runs_become_error_rows() {
    let cfg = PipelineConfig {
        adapter: Some("exit 1 # {in} {out}".into()),
        ..PipelineConfig::default()
    };
    let t = run_experiment(&cfg, &[short_scenario(1.5, 0)], &[Mode::Idlma], &[0]).unwrap();
    assert_eq!(t.rows[0].runs, 0);
    assert!(t.rows[0].error.as_deref().unwrap().contains("denoiser"));
    assert_eq!(t.summary[0].runs, 0);
    assert_eq!(t.summary[0].mean_sdr_improvement, None);
}

#[test]
fn config_errors_name_the_field() {
    let field = |r: rcscme::Result<()>| match r {
        Err(Error::Config { field, .. }) => field,
        other => panic!("expected config error, got {other:?}"),
    };
    let c = PipelineConfig::from_toml_str("mode = \"idlma\"").unwrap();
    assert_eq!(field(c.validate()), "adapter");
    let c = PipelineConfig::from_toml_str("[hyper]\nalpha_p = -1.0").unwrap();
    assert_eq!(field(c.validate()), "hyper.alpha_p");
    let c = PipelineConfig::from_toml_str("[iterations]\nidlma_refresh = 0").unwrap();
    assert_eq!(field(c.validate()), "iterations.idlma_refresh");
    let c = PipelineConfig::from_toml_str("[scenario]\nmics = 8\nnoise_sources = 3").unwrap();
    assert!(matches!(c.validate(), Err(Error::Config { .. })));
    assert_eq!(field(PipelineConfig::from_toml_str("colour = 1").map(drop)), "config");
    assert_eq!(field(PipelineConfig::from_toml_str("mode = \"fast\"").map(drop)), "config");

    let (mix, _) = simulate(&short_scenario(1.5, 0)).unwrap();
    let oracle = PipelineConfig {
        oracle: true,
        ..PipelineConfig::default()
    };
    assert_eq!(field(run_on_mixture(&oracle, &mix, None).map(drop)), "oracle");
}

#[test]
fn environment_overrides_adapter() {
    let mut c = PipelineConfig::from_toml_str("adapter = \"cp {in} {out}\"").unwrap();
    std::env::set_var(DENOISER_ENV, "  ");
    c.apply_env();
    assert_eq!(c.adapter.as_deref(), Some("cp {in} {out}"));
    std::env::set_var(DENOISER_ENV, "denoise --in {in} --out {out}");
    c.apply_env();
    std::env::remove_var(DENOISER_ENV);
    assert_eq!(c.adapter.as_deref(), Some("denoise --in {in} --out {out}"));
}

#[test]
fn error_exit_codes() {
    assert_eq!(Error::config("x", "y").exit_code(), 2);
    assert_eq!(Error::InvalidInput("x".into()).exit_code(), 2);
    assert_eq!(Error::Numerical("x".into()).exit_code(), 3);
    assert_eq!(Error::Singular("x".into()).exit_code(), 3);
    assert_eq!(Error::NoSpeech.exit_code(), 3);
    let adapter = Error::Adapter {
        message: "x".into(),
        stderr: String::new(),
    };
    assert_eq!(adapter.exit_code(), 4);
}

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rcscme"));
    c.env_remove(DENOISER_ENV);
    c
}

fn write_scenario(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("scenario.toml");
    std::fs::write(&p, "duration_s = 1.5\nsilence = [[0.6, 0.9]]\n").unwrap();
    p
}

#[test]
fn cli_single_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write_scenario(dir.path());
    let out_wav = dir.path().join("out.wav");
    let dump = dir.path().join("dump");
    let res = cli()
        .args(["--mode", "ilrma+rcscme", "--seeds", "2"])
        .arg("--simulate")
        .arg(&scn)
        .arg("--output")
        .arg(&out_wav)
        .arg("--dump-intermediates")
        .arg(&dump)
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(report["mode"], "ilrma+rcscme");
    assert_eq!(report["seed"], 2);
    assert_eq!(report["rcscme_objective"].as_array().unwrap().len(), 10);
    let w = read_wav(&out_wav).unwrap();
    assert_eq!((w.num_channels(), w.len()), (4, 24000));
    assert!(dump.join("intermediates.json").exists());
}

#[test]
fn cli_wav_input_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (mix, _) = simulate(&short_scenario(1.5, 6)).unwrap();
    let input = dir.path().join("mix.wav");
    rcscme::signal_io::write_wav(&input, &mix).unwrap();
    let output = dir.path().join("enh.wav");
    let res = cli().args(["--mode", "ilrma"]).arg("--input").arg(&input).arg("--output").arg(&output).output().unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(read_wav(&output).unwrap().len(), mix.len());
}

#[test]
fn cli_experiment_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write_scenario(dir.path());
    let csv_path = dir.path().join("metrics.csv");
    let res = cli()
        .args(["--mode", "ilrma,ilrma+rcscme", "--seeds", "0..2"])
        .arg("--simulate")
        .arg(&scn)
        .arg("--metrics-csv")
        .arg(&csv_path)
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 + 2);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write_scenario(dir.path());
    let code = |c: &mut Command| c.output().unwrap().status.code();

    assert_eq!(code(cli().args(["--mode", "bogus"]).arg("--simulate").arg(&scn)), Some(2));
    assert_eq!(code(cli().args(["--mode", "idlma"]).arg("--simulate").arg(&scn)), Some(2));
    assert_eq!(code(&mut cli()), Some(2));
    assert_eq!(code(cli().args(["--input", "/nonexistent/mix.wav"])), Some(2));
    assert_eq!(code(cli().args(["--seeds", "5..1"]).arg("--simulate").arg(&scn)), Some(2));

    let failing = cli()
        .args(["--mode", "idlma"])
        .arg("--simulate")
        .arg(&scn)
        .env(DENOISER_ENV, "echo weights not found >&2; exit 1 # {in} {out}")
        .output()
        .unwrap();
    assert_eq!(failing.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&failing.stderr).contains("denoiser failed"));
}
