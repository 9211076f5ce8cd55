//! Command-line harness: period detection, training, evaluation, the
//! ablation grid, interval sweeps and forecasting from a checkpoint.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctpnet::data::{detect_period, load_csv, make_windows, RawSeries, SplitSpec};
use ctpnet::harness::{
    ablation_markdown, append_results_csv, forecast_tail, model_config, prepare, resolve_periods,
    run_ablation, run_cell, sweep_interval, sweep_markdown, windows_for_horizon, ExperimentConfig,
};
use ctpnet::model::{load_checkpoint, save_checkpoint, CheckpointMeta};
use ctpnet::train::evaluate;
use ctpnet::{Error, Result};

#[derive(Parser)]
#[command(name = "ctpnet", version, about = "Period-downsampled forecasting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect the dominant downsample period of a CSV series.
    DetectPeriod {
        csv: PathBuf,
        #[arg(long, default_value_t = 2)]
        min_lag: usize,
        #[arg(long, default_value_t = 48)]
        max_lag: usize,
        /// Time column to exclude; tried as "date" by default.
        #[arg(long)]
        time_column: Option<String>,
    },
    /// Train one model from a JSON experiment config.
    Train { config: PathBuf },
    /// Re-evaluate a checkpoint on the config's test split.
    Evaluate {
        checkpoint: PathBuf,
        config: PathBuf,
    },
    /// Train all seven ablation variants over the configured horizons.
    Ablate { config: PathBuf },
    /// Train the full model across downsample intervals and horizons.
    SweepInterval { config: PathBuf },
    /// Forecast beyond the end of a CSV using a trained checkpoint.
    Predict {
        checkpoint: PathBuf,
        csv: PathBuf,
        #[arg(long, default_value = "forecast.csv")]
        out: PathBuf,
        #[arg(long)]
        time_column: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Loads a CSV, defaulting the time column to "date" when present.
fn load_csv_flex(path: &Path, time_column: Option<&str>) -> Result<RawSeries> {
    match time_column {
        Some(col) => load_csv(path, Some(col)),
        None => load_csv(path, Some("date")).or_else(|_| load_csv(path, None)),
    }
}

fn variant_name(i1: bool, i2: bool, i3: bool) -> String {
    let dropped: Vec<&str> = [(i1, "i1"), (i2, "i2"), (i3, "i3")]
        .iter()
        .filter(|(f, _)| *f)
        .map(|(_, n)| *n)
        .collect();
    if dropped.is_empty() {
        "full".to_string()
    } else {
        format!("no_{}", dropped.join("_"))
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::DetectPeriod {
            csv,
            min_lag,
            max_lag,
            time_column,
        } => {
            let series = load_csv_flex(&csv, time_column.as_deref())?;
            let max_lag = max_lag.min(series.len().saturating_sub(2));
            let period = detect_period(&series, min_lag, max_lag)?;
            println!("{period}");
            Ok(ExitCode::SUCCESS)
        }

        Command::Train { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let data = prepare(&cfg)?;
            let (p, w) = resolve_periods(&cfg, &data)?;
            let mc = model_config(&cfg, data.n_channels(), cfg.l_out, p, w);
            mc.validate()?;
            let windows = windows_for_horizon(&data, cfg.l_in, cfg.l_out)?;
            let variant = variant_name(cfg.ablate_i1, cfg.ablate_i2, cfg.ablate_i3);
            eprintln!(
                "training {} horizon {} (p={p}, w={w}, variant {variant}, {} train windows)",
                data.dataset,
                cfg.l_out,
                windows.train.len()
            );
            let (model, record) = run_cell(
                &data.dataset,
                &variant,
                mc,
                &cfg.train_config(cfg.seed),
                &windows,
            )?;
            eprintln!("parameters: {}", model.param_count());
            append_results_csv(&cfg.results_csv, &record)?;
            if let Some(path) = &cfg.record_json {
                let json = serde_json::to_string_pretty(&record)
                    .map_err(|e| Error::Format(e.to_string()))?;
                std::fs::write(path, json)?;
            }
            if let Some(epoch) = record.diverged_at {
                eprintln!("training diverged at epoch {epoch}");
                return Ok(ExitCode::from(2));
            }
            if let Some(path) = &cfg.checkpoint {
                let meta = CheckpointMeta::with_norm(&data.dataset, &data.stats, &data.channel_names);
                save_checkpoint(path, &model, &meta)?;
                eprintln!("checkpoint saved to {path}");
            }
            let m = record.test.expect("finished run has test metrics");
            println!("| dataset | horizon | variant | MSE | MAE |");
            println!("|---|---|---|---|---|");
            println!(
                "| {} | {} | {} | {:.3} | {:.3} |",
                record.dataset, record.horizon, record.variant, m.mse, m.mae
            );
            println!(
                "test_metrics {}",
                serde_json::to_string(&m).map_err(|e| Error::Format(e.to_string()))?
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Evaluate { checkpoint, config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let (model, meta) = load_checkpoint(&checkpoint)?;
            let raw = load_csv(&cfg.csv, cfg.time_column.as_deref())?;
            let dataset = meta.dataset.clone().unwrap_or_else(|| cfg.dataset_name());
            let stats = meta.norm_stats().ok_or_else(|| {
                Error::Format("checkpoint carries no normalization stats".into())
            })?;
            let (_, _, test) = SplitSpec::for_dataset(&dataset).split(&raw)?;
            let test = ctpnet::data::apply_norm(&stats, &test)?;
            let windows = make_windows(&test, model.config.l_in, model.config.l_out, 1)?;
            let m = evaluate(&model, &windows)?;
            println!("| dataset | horizon | MSE | MAE |");
            println!("|---|---|---|---|");
            println!(
                "| {} | {} | {:.3} | {:.3} |",
                dataset, model.config.l_out, m.mse, m.mae
            );
            println!(
                "test_metrics {}",
                serde_json::to_string(&m).map_err(|e| Error::Format(e.to_string()))?
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Ablate { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let data = prepare(&cfg)?;
            let results_csv = cfg.results_csv.clone();
            let outcome = run_ablation(&cfg, &data, |record| {
                eprintln!(
                    "  {} h{} {}: {}",
                    record.dataset,
                    record.horizon,
                    record.variant,
                    match record.test {
                        Some(m) => format!("mse {:.3} mae {:.3}", m.mse, m.mae),
                        None => "diverged".into(),
                    }
                );
                append_results_csv(&results_csv, record)
            })?;
            for (h, why) in &outcome.skipped {
                eprintln!("skipped horizon {h}: {why}");
            }
            println!("{}", ablation_markdown(&data.dataset, &outcome));
            if outcome.records.iter().any(|r| r.diverged_at.is_some()) {
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::SweepInterval { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let data = prepare(&cfg)?;
            let results_csv = cfg.results_csv.clone();
            let outcome = sweep_interval(&cfg, &data, |record| {
                eprintln!(
                    "  {} h{} interval {}: {}",
                    record.dataset,
                    record.horizon,
                    record.interval,
                    match record.test {
                        Some(m) => format!("mse {:.3} mae {:.3}", m.mse, m.mae),
                        None => "diverged".into(),
                    }
                );
                append_results_csv(&results_csv, record)
            })?;
            for (interval, why) in &outcome.skipped {
                eprintln!("skipped interval {interval}: {why}");
            }
            println!("{}", sweep_markdown(&outcome));
            if outcome.records.iter().any(|r| r.diverged_at.is_some()) {
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Predict {
            checkpoint,
            csv,
            out,
            time_column,
        } => {
            let (model, meta) = load_checkpoint(&checkpoint)?;
            let stats = meta.norm_stats().ok_or_else(|| {
                Error::Format("checkpoint carries no normalization stats".into())
            })?;
            let raw = load_csv_flex(&csv, time_column.as_deref())?;
            let forecast = forecast_tail(&model, &stats, &raw)?;
            write_forecast_csv(&out, &forecast)?;
            eprintln!(
                "wrote {} steps x {} channels to {}",
                forecast.len(),
                forecast.n_channels(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// One row per time step, one column per channel, original units.
fn write_forecast_csv(path: &Path, forecast: &RawSeries) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", forecast.channel_names().join(","))?;
    for t in 0..forecast.len() {
        let row: Vec<String> = (0..forecast.n_channels())
            .map(|c| format!("{}", forecast.channel(c)[t]))
            .collect();
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}
