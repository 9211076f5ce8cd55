//! Experiment harness: dataset preparation, single training cells, the
//! ablation grid, the downsample-interval sweep, and the results log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    apply_norm, detect_period, fit_norm, invert_norm, load_csv, make_windows, NormStats,
    RawSeries, SplitSpec, WindowSample,
};
use crate::error::{Error, Result};
use crate::model::{CtpNet, CtpNetConfig};
use crate::train::{evaluate, train, Metrics, RunRecord, TrainConfig};
use crate::Tensor;

pub const RESULTS_CSV_HEADER: &str = "dataset,horizon,variant,interval,seed,mse,mae,epochs,wall_s";

/// Flat JSON experiment description; every key has a sensible default
/// except the dataset path.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Path to the dataset CSV.
    pub csv: String,
    /// Dataset name; defaults to the CSV file stem. Picks the split rule.
    #[serde(default)]
    pub dataset: Option<String>,
    /// Column excluded from the channels; null to use every column.
    #[serde(default = "default_time_column")]
    pub time_column: Option<String>,

    #[serde(default = "default_l_in")]
    pub l_in: usize,
    #[serde(default = "default_l_out")]
    pub l_out: usize,
    /// Downsample period; omit to detect it from the training split.
    #[serde(default)]
    pub p: Option<usize>,
    /// Temporal-query period; omit to detect (fallback 168).
    #[serde(default)]
    pub w: Option<usize>,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_heads")]
    pub h_c: usize,
    #[serde(default = "default_heads")]
    pub h_b: usize,
    #[serde(default)]
    pub ablate_i1: bool,
    #[serde(default)]
    pub ablate_i2: bool,
    #[serde(default)]
    pub ablate_i3: bool,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default)]
    pub dropout: f64,

    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,

    /// Horizons visited by `ablate`.
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    /// Downsample intervals visited by `sweep-interval`.
    #[serde(default = "default_intervals")]
    pub intervals: Vec<usize>,

    #[serde(default = "default_results_csv")]
    pub results_csv: String,
    #[serde(default)]
    pub checkpoint: Option<String>,
    /// Optional path for the full JSON run record.
    #[serde(default)]
    pub record_json: Option<String>,
}

fn default_time_column() -> Option<String> {
    Some("date".to_string())
}
fn default_l_in() -> usize {
    96
}
fn default_l_out() -> usize {
    96
}
fn default_d() -> usize {
    128
}
fn default_heads() -> usize {
    4
}
fn default_blocks() -> usize {
    1
}
fn default_lr() -> f64 {
    1e-3
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_batch_size() -> usize {
    32
}
fn default_max_epochs() -> usize {
    30
}
fn default_patience() -> usize {
    5
}
fn default_horizons() -> Vec<usize> {
    vec![96, 192, 336, 720]
}
fn default_intervals() -> Vec<usize> {
    vec![2, 4, 8, 16, 24]
}
fn default_results_csv() -> String {
    "results.csv".to_string()
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("config JSON: {e}")))
    }

    pub fn dataset_name(&self) -> String {
        self.dataset.clone().unwrap_or_else(|| {
            Path::new(&self.csv)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
        }
    }
}

/// Dataset after loading, splitting and train-only z-scoring.
pub struct PreparedData {
    pub dataset: String,
    pub stats: NormStats,
    pub channel_names: Vec<String>,
    pub train: RawSeries,
    pub val: RawSeries,
    pub test: RawSeries,
}

impl PreparedData {
    pub fn n_channels(&self) -> usize {
        self.train.n_channels()
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let raw = load_csv(&cfg.csv, cfg.time_column.as_deref())?;
    prepare_series(&raw, &cfg.dataset_name())
}

/// Split + normalize an already-loaded series under the dataset's
/// conventional split rule.
pub fn prepare_series(raw: &RawSeries, dataset: &str) -> Result<PreparedData> {
    let spec = SplitSpec::for_dataset(dataset);
    let (train, val, test) = spec.split(raw)?;
    let stats = fit_norm(&train)?;
    Ok(PreparedData {
        dataset: dataset.to_string(),
        channel_names: raw.channel_names().to_vec(),
        train: apply_norm(&stats, &train)?,
        val: apply_norm(&stats, &val)?,
        test: apply_norm(&stats, &test)?,
        stats,
    })
}

/// Fills in the downsample and temporal-query periods, detecting absent
/// ones from the training split via the channel-averaged ACF.
pub fn resolve_periods(cfg: &ExperimentConfig, data: &PreparedData) -> Result<(usize, usize)> {
    let t = data.train.len();
    let p = match cfg.p {
        Some(p) => p,
        None => {
            let max_lag = 48.min(t.saturating_sub(2));
            detect_period(&data.train, 2, max_lag).map_err(|e| {
                Error::ConfigInvalid(format!(
                    "could not detect a downsample period ({e}); set \"p\" explicitly"
                ))
            })?
        }
    };
    let w = match cfg.w {
        Some(w) => w,
        None => {
            let max_lag = (2 * 168).min(t.saturating_sub(2));
            match detect_period(&data.train, p + 1, max_lag) {
                Ok(w) => w,
                // weekly-scale fallback when no longer period stands out
                Err(Error::NoSignificantPeriod { .. }) => 168,
                Err(e) => return Err(e),
            }
        }
    };
    Ok((p, w))
}

pub fn model_config(
    cfg: &ExperimentConfig,
    n_channels: usize,
    l_out: usize,
    p: usize,
    w: usize,
) -> CtpNetConfig {
    CtpNetConfig {
        l_in: cfg.l_in,
        l_out,
        p,
        w,
        d: cfg.d,
        h_c: cfg.h_c,
        h_b: cfg.h_b,
        n_channels,
        ablate_i1: cfg.ablate_i1,
        ablate_i2: cfg.ablate_i2,
        ablate_i3: cfg.ablate_i3,
        blocks: cfg.blocks,
        dropout: cfg.dropout,
    }
}

/// Windows for one horizon, shared across variants and seeds.
pub struct HorizonWindows {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

pub fn windows_for_horizon(
    data: &PreparedData,
    l_in: usize,
    l_out: usize,
) -> Result<HorizonWindows> {
    Ok(HorizonWindows {
        train: make_windows(&data.train, l_in, l_out, 1)?,
        val: make_windows(&data.val, l_in, l_out, 1)?,
        test: make_windows(&data.test, l_in, l_out, 1)?,
    })
}

/// Trains one (config, seed) cell and evaluates it on the test windows.
pub fn run_cell(
    dataset: &str,
    variant: &str,
    model_cfg: CtpNetConfig,
    train_cfg: &TrainConfig,
    windows: &HorizonWindows,
) -> Result<(CtpNet, RunRecord)> {
    let mut model = CtpNet::new(model_cfg, train_cfg.seed)?;
    let mut record = train(&mut model, &windows.train, &windows.val, train_cfg)?;
    record.dataset = dataset.to_string();
    record.variant = variant.to_string();
    if record.diverged_at.is_none() {
        record.test = Some(evaluate(&model, &windows.test)?);
    }
    Ok((model, record))
}

/// The seven ablation variants of the dependency-removal grid.
pub fn ablation_variants() -> Vec<(&'static str, [bool; 3])> {
    vec![
        ("full", [false, false, false]),
        ("no_i1", [true, false, false]),
        ("no_i2", [false, true, false]),
        ("no_i3", [false, false, true]),
        ("no_i1_i2", [true, true, false]),
        ("no_i1_i3", [true, false, true]),
        ("no_i2_i3", [false, true, true]),
    ]
}

pub struct AblationOutcome {
    pub records: Vec<RunRecord>,
    /// Per variant: (name, avg MSE, avg MAE) over the horizons that ran.
    pub summary: Vec<(String, f64, f64)>,
    pub skipped: Vec<(usize, String)>,
}

/// Trains every ablation variant on every horizon with a shared seed and
/// averages test metrics per variant.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    mut on_record: impl FnMut(&RunRecord) -> Result<()>,
) -> Result<AblationOutcome> {
    let (p, w) = resolve_periods(cfg, data)?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut sums: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); ablation_variants().len()];

    for &l_out in &cfg.horizons {
        let base = model_config(cfg, data.n_channels(), l_out, p, w);
        if let Err(e) = base.validate() {
            skipped.push((l_out, e.to_string()));
            continue;
        }
        let windows = windows_for_horizon(data, cfg.l_in, l_out)?;
        for (vi, (name, flags)) in ablation_variants().into_iter().enumerate() {
            let mut mc = base.clone();
            mc.ablate_i1 = flags[0];
            mc.ablate_i2 = flags[1];
            mc.ablate_i3 = flags[2];
            let (_, record) = run_cell(
                &data.dataset,
                name,
                mc,
                &cfg.train_config(cfg.seed),
                &windows,
            )?;
            if let Some(m) = record.test {
                sums[vi].0 += m.mse;
                sums[vi].1 += m.mae;
                sums[vi].2 += 1;
            }
            on_record(&record)?;
            records.push(record);
        }
    }
    let summary = ablation_variants()
        .into_iter()
        .zip(sums)
        .map(|((name, _), (mse, mae, n))| {
            let n = n.max(1) as f64;
            (name.to_string(), mse / n, mae / n)
        })
        .collect();
    Ok(AblationOutcome {
        records,
        summary,
        skipped,
    })
}

pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    /// (interval, horizon) -> test metrics.
    pub grid: Vec<(usize, usize, Metrics)>,
    pub skipped: Vec<(usize, String)>,
}

/// Trains one full model per (interval, horizon) pair; intervals that do
/// not divide the window lengths are skipped with a note.
pub fn sweep_interval(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    mut on_record: impl FnMut(&RunRecord) -> Result<()>,
) -> Result<SweepOutcome> {
    let (_, w) = resolve_periods(cfg, data)?;
    let mut records = Vec::new();
    let mut grid = Vec::new();
    let mut skipped = Vec::new();
    for &interval in &cfg.intervals {
        for &l_out in &cfg.horizons {
            let mc = model_config(cfg, data.n_channels(), l_out, interval, w);
            if let Err(e) = mc.validate() {
                skipped.push((interval, e.to_string()));
                continue;
            }
            let windows = windows_for_horizon(data, cfg.l_in, l_out)?;
            let (_, record) = run_cell(
                &data.dataset,
                "full",
                mc,
                &cfg.train_config(cfg.seed),
                &windows,
            )?;
            if let Some(m) = record.test {
                grid.push((interval, l_out, m));
            }
            on_record(&record)?;
            records.push(record);
        }
    }
    Ok(SweepOutcome {
        records,
        grid,
        skipped,
    })
}

/// Appends one row to the results CSV, writing the header first when the
/// file is new.
pub fn append_results_csv(path: impl AsRef<Path>, record: &RunRecord) -> Result<()> {
    let path = path.as_ref();
    let need_header = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if need_header {
        writeln!(f, "{RESULTS_CSV_HEADER}")?;
    }
    let (mse, mae) = match record.test {
        Some(m) => (format!("{:.6}", m.mse), format!("{:.6}", m.mae)),
        None => ("nan".into(), "nan".into()),
    };
    writeln!(
        f,
        "{},{},{},{},{},{},{},{},{:.1}",
        record.dataset,
        record.horizon,
        record.variant,
        record.interval,
        record.seed,
        mse,
        mae,
        record.epochs_run,
        record.wall_s
    )?;
    Ok(())
}

pub fn ablation_markdown(dataset: &str, outcome: &AblationOutcome) -> String {
    let mut s = String::new();
    s.push_str(&format!("| {dataset} | "));
    for (name, _, _) in &outcome.summary {
        s.push_str(&format!("{name} | "));
    }
    s.push_str("\n|---|");
    for _ in &outcome.summary {
        s.push_str("---|");
    }
    s.push_str("\n| MSE |");
    for (_, mse, _) in &outcome.summary {
        s.push_str(&format!(" {mse:.3} |"));
    }
    s.push_str("\n| MAE |");
    for (_, _, mae) in &outcome.summary {
        s.push_str(&format!(" {mae:.3} |"));
    }
    s.push('\n');
    s
}

pub fn sweep_markdown(outcome: &SweepOutcome) -> String {
    let mut intervals: Vec<usize> = outcome.grid.iter().map(|(i, _, _)| *i).collect();
    intervals.sort_unstable();
    intervals.dedup();
    let mut horizons: Vec<usize> = outcome.grid.iter().map(|(_, h, _)| *h).collect();
    horizons.sort_unstable();
    horizons.dedup();

    let mut s = String::from("| horizon |");
    for i in &intervals {
        s.push_str(&format!(" {i} MSE | {i} MAE |"));
    }
    s.push_str("\n|---|");
    for _ in &intervals {
        s.push_str("---|---|");
    }
    s.push('\n');
    for h in &horizons {
        s.push_str(&format!("| {h} |"));
        for i in &intervals {
            match outcome.grid.iter().find(|(gi, gh, _)| gi == i && gh == h) {
                Some((_, _, m)) => s.push_str(&format!(" {:.3} | {:.3} |", m.mse, m.mae)),
                None => s.push_str(" - | - |"),
            }
        }
        s.push('\n');
    }
    s
}

/// Forecast from the last look-back window of a raw series, returned in
/// original units.
pub fn forecast_tail(
    model: &CtpNet,
    stats: &NormStats,
    raw: &RawSeries,
) -> Result<RawSeries> {
    let l_in = model.config.l_in;
    if raw.len() < l_in {
        return Err(Error::SeriesTooShort(format!(
            "need {l_in} steps for the look-back, series has {}",
            raw.len()
        )));
    }
    let normed = apply_norm(stats, raw)?;
    let start = normed.len() - l_in;
    let window = normed.slice_time(start, l_in)?;
    let n_c = raw.n_channels();
    let x = window.values().reshape(&[1, n_c, l_in])?;
    let t = normed.start_index() + start;
    let pred = model.forward(&x, &[t])?;
    let pred2 = pred.reshape(&[n_c, model.config.l_out])?;
    let pred_series = RawSeries::new(
        Tensor::from_vec(pred2.data().to_vec(), pred2.shape())?,
        raw.channel_names().to_vec(),
        t + l_in,
    )?;
    invert_norm(stats, &pred_series)
}
