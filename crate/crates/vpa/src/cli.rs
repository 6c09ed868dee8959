//! Command implementations behind the thin `vpa` binary: source training,
//! adaptation runs with a built-in source baseline, ablation sweeps, and
//! consolidated reports. Everything here is also callable as a library.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::augment::AugmentSpec;
use crate::data::{
    corrupt_dataset, generate_shapes, style_shift, CorruptionFamily, Dataset, ShapesConfig, Style,
};
use crate::engine::{AdaptationConfig, AdaptationSession, Lifecycle, Regime};
use crate::error::{Result, VpaError};
use crate::io::{write_metrics_csv, RunSummary};
use crate::prompt::{PromptKind, PromptSpec};
use crate::vit::{train_source, TrainConfig, ViTConfig, ViTModel};

/// Distribution shift applied to the clean test stream.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftSpec {
    Clean,
    Corruption { family: CorruptionFamily, severity: u8 },
    Style { style: Style },
}

impl ShiftSpec {
    pub fn label(&self) -> String {
        match self {
            ShiftSpec::Clean => "clean".into(),
            ShiftSpec::Corruption { family, severity } => format!("{family}_s{severity}"),
            ShiftSpec::Style { style } => format!("style_{style}"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_n: usize,
    pub test_n: usize,
    pub image_size: usize,
    pub batch_size: usize,
    pub shift: ShiftSpec,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub adapt: AdaptationConfig,
    pub prompt: PromptSpec,
    pub data: DataConfig,
    pub seed: u64,
}

impl RunConfig {
    /// Desk-scale defaults: 32x32 shapes, a 2-layer ViT, continual
    /// prependitive entropy minimization.
    pub fn toy_default() -> Self {
        let model = ViTConfig {
            image_size: 32,
            patch: 8,
            dim: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 2.0,
            classes: 10,
            channels: 3,
        };
        let prompt = PromptSpec::prependitive_default(model.layers, 8, model.dim, 0);
        let mut adapt = AdaptationConfig::new(Regime::Bia, Lifecycle::Continual);
        adapt.lr = 0.01;
        adapt.steps = 5;
        adapt.tau = 3.0;
        RunConfig {
            train: TrainConfig { epochs: 30, batch_size: 25, lr: 0.05, momentum: 0.9, seed: 0 },
            adapt,
            prompt,
            data: DataConfig {
                train_n: 512,
                test_n: 128,
                image_size: model.image_size,
                batch_size: 16,
                shift: ShiftSpec::Corruption {
                    family: CorruptionFamily::GaussianNoise,
                    severity: 5,
                },
            },
            model,
            seed: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VpaError::Io { path: path.display().to_string(), source: e })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| VpaError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text)
            .map_err(|e| VpaError::Io { path: path.display().to_string(), source: e })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adapt.validate()?;
        self.prompt.validate(self.model.layers)?;
        if self.data.image_size != self.model.image_size {
            return Err(VpaError::Config(format!(
                "data image_size {} != model image_size {}",
                self.data.image_size, self.model.image_size
            )));
        }
        if self.data.batch_size == 0 || self.data.test_n == 0 {
            return Err(VpaError::Config("batch_size and test_n must be positive".into()));
        }
        if let ShiftSpec::Corruption { severity, .. } = self.data.shift {
            if severity > 5 {
                return Err(VpaError::Config(format!("severity {severity} out of range 0..=5")));
            }
        }
        Ok(())
    }

    fn train_set(&self) -> Result<Dataset> {
        generate_shapes(&ShapesConfig::new(self.data.train_n, self.data.image_size, self.seed))
    }

    /// Clean test stream; disjoint seed from the training set.
    fn clean_test_set(&self) -> Result<Dataset> {
        generate_shapes(&ShapesConfig::new(
            self.data.test_n,
            self.data.image_size,
            self.seed.wrapping_add(0x5eed),
        ))
    }

    pub fn test_stream(&self) -> Result<Dataset> {
        let clean = self.clean_test_set()?;
        match &self.data.shift {
            ShiftSpec::Clean => Ok(clean),
            ShiftSpec::Corruption { family, severity } => {
                corrupt_dataset(&clean, *family, *severity, self.seed.wrapping_add(0xc0de))
            }
            ShiftSpec::Style { style } => {
                Ok(style_shift(&clean, *style, self.seed.wrapping_add(0xc0de)))
            }
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| VpaError::Io { path: dir.display().to_string(), source: e })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub clean_accuracy: f64,
}

/// Train the source classifier and persist it (plus a training log next to
/// it). Divergence surfaces as a numeric error.
pub fn cmd_train_source(cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let train = cfg.train_set()?;
    let mut model = ViTModel::init(cfg.model.clone(), cfg.seed)?;
    let epoch_losses = train_source(&mut model, &train, &cfg.train)?;
    let clean_accuracy = model.accuracy(&cfg.clean_test_set()?, None)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    model.save(out)?;
    let report = TrainReport { epoch_losses, clean_accuracy };
    let log_path = out.with_extension("train.json");
    std::fs::write(&log_path, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|e| VpaError::Io { path: log_path.display().to_string(), source: e })?;
    Ok(report)
}

/// Adapt over the configured shifted stream. Always runs the source-only
/// baseline on the identical stream, so the summary's delta never compares
/// against a stale number. Writes `metrics.csv`, `summary.json`, and the
/// effective `config.json` into `out_dir`.
pub fn cmd_adapt(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let model = ViTModel::load(checkpoint)?;
    if model.cfg != cfg.model {
        return Err(VpaError::Config(
            "checkpoint model configuration does not match run config".into(),
        ));
    }
    let stream = cfg.test_stream()?;
    let source_acc = model.accuracy(&stream, None)?;

    let capacity = cfg.adapt.queue_capacity_for(stream.len());
    let mut session = AdaptationSession::new(&model, &cfg.prompt, cfg.adapt.clone(), capacity)?;
    let batches = stream.batches(cfg.data.batch_size);
    let result = session.run_stream(&batches)?;

    ensure_dir(out_dir)?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &result.rows)?;
    cfg.save(&out_dir.join("config.json"))?;
    let summary = RunSummary {
        regime: cfg.adapt.regime.to_string(),
        lifecycle: cfg.adapt.lifecycle.to_string(),
        prompt_kind: match cfg.prompt.kind {
            PromptKind::Additive => "additive".into(),
            PromptKind::Prependitive => "prependitive".into(),
        },
        data_label: cfg.data.shift.label(),
        seed: cfg.seed,
        source_acc,
        adapted_acc: result.accuracy,
        accuracy_delta: result.accuracy - source_acc,
        entropy_pre: result.mean_entropy_pre,
        entropy_post: result.mean_entropy_post,
        n_images: stream.len(),
    };
    let spath = out_dir.join("summary.json");
    std::fs::write(&spath, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(|e| VpaError::Io { path: spath.display().to_string(), source: e })?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Steps,
    Tau,
    PromptSize,
    K,
    Augment,
}

impl std::str::FromStr for AblationAxis {
    type Err = VpaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" => Ok(AblationAxis::Steps),
            "tau" => Ok(AblationAxis::Tau),
            "prompt_size" => Ok(AblationAxis::PromptSize),
            "k" => Ok(AblationAxis::K),
            "augment" => Ok(AblationAxis::Augment),
            _ => Err(VpaError::Config(format!(
                "unknown ablation axis {s} (expected steps|tau|prompt_size|k|augment)"
            ))),
        }
    }
}

/// Default grids per axis when the caller passes none.
pub fn default_grid(axis: AblationAxis) -> Vec<String> {
    match axis {
        AblationAxis::Steps => vec!["1", "2", "4", "8", "10"],
        AblationAxis::Tau => vec!["0.5", "1.0", "2.0"],
        AblationAxis::PromptSize => vec!["4", "8", "16"],
        AblationAxis::K => vec!["3", "7", "11", "15", "21"],
        AblationAxis::Augment => vec!["strong", "augmix"],
    }
    .into_iter()
    .map(String::from)
    .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub accuracy: f64,
    pub entropy_pre: f64,
    pub entropy_post: f64,
    pub loss_first_step: f64,
    pub loss_last_step: f64,
    /// Mean per-step loss trace across the stream (steps axis reporting).
    pub mean_loss_per_step: Vec<f64>,
}

fn cell_config(base: &RunConfig, axis: AblationAxis, value: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let bad = |v: &str| VpaError::Config(format!("bad grid value {v:?} for axis"));
    match axis {
        AblationAxis::Steps => cfg.adapt.steps = value.parse().map_err(|_| bad(value))?,
        AblationAxis::Tau => cfg.adapt.tau = value.parse().map_err(|_| bad(value))?,
        AblationAxis::PromptSize => {
            cfg.prompt.tokens_per_layer = value.parse().map_err(|_| bad(value))?
        }
        AblationAxis::K => cfg.adapt.k = value.parse().map_err(|_| bad(value))?,
        AblationAxis::Augment => {
            cfg.adapt.strong = match value {
                "strong" => AugmentSpec::Strong { n_ops: 2, magnitude: 5 },
                "augmix" => AugmentSpec::Augmix { width: 3, depth: 2, alpha: 1.0 },
                _ => return Err(bad(value)),
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_cell(cfg: &RunConfig, model: &ViTModel) -> Result<AblationRow> {
    let stream = cfg.test_stream()?;
    let capacity = cfg.adapt.queue_capacity_for(stream.len());
    let mut session = AdaptationSession::new(model, &cfg.prompt, cfg.adapt.clone(), capacity)?;
    let result = session.run_stream(&stream.batches(cfg.data.batch_size))?;
    let steps = cfg.adapt.steps;
    let mut mean_loss = vec![0.0; steps];
    let mut counted = 0usize;
    for trace in &result.loss_traces {
        if trace.len() == steps {
            for (a, b) in mean_loss.iter_mut().zip(trace) {
                *a += b;
            }
            counted += 1;
        }
    }
    for v in &mut mean_loss {
        *v /= counted.max(1) as f64;
    }
    let first = result.rows.first();
    Ok(AblationRow {
        axis: String::new(),
        value: String::new(),
        accuracy: result.accuracy,
        entropy_pre: result.mean_entropy_pre,
        entropy_post: result.mean_entropy_post,
        loss_first_step: first.map_or(f64::NAN, |r| r.loss_first_step),
        loss_last_step: first.map_or(f64::NAN, |r| r.loss_last_step),
        mean_loss_per_step: mean_loss,
    })
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let strict = std::env::var("VPA_STRICT").map(|v| v == "1").unwrap_or(false);
    let threads = if strict {
        1
    } else {
        match std::env::var("VPA_THREADS") {
            Ok(v) => v
                .parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| VpaError::Config(format!("VPA_THREADS must be >= 1, got {v:?}")))?,
            Err(_) => 0, // rayon default
        }
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| VpaError::Config(format!("thread pool: {e}")))
}

/// Sweep one hyperparameter axis over independent sessions (concurrently,
/// capped by VPA_THREADS; VPA_STRICT=1 forces one worker). Writes
/// `ablation.csv` plus per-step loss curves to `out_dir`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    checkpoint: &Path,
    axis: AblationAxis,
    grid: &[String],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(VpaError::Config("empty ablation grid".into()));
    }
    let model = ViTModel::load(checkpoint)?;
    let cells: Result<Vec<RunConfig>> =
        grid.iter().map(|v| cell_config(cfg, axis, v)).collect();
    let cells = cells?;
    let pool = worker_pool()?;
    let results: Result<Vec<AblationRow>> = pool.install(|| {
        cells
            .par_iter()
            .zip(grid.par_iter())
            .map(|(c, v)| {
                let mut row = run_cell(c, &model)?;
                row.axis = format!("{axis:?}").to_lowercase();
                row.value = v.clone();
                Ok(row)
            })
            .collect()
    });
    let rows = results?;

    ensure_dir(out_dir)?;
    let mut csv = String::from(
        "axis,value,accuracy,entropy_pre,entropy_post,loss_first_step,loss_last_step\n",
    );
    let mut curves = String::from("value,step,mean_loss\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.axis, r.value, r.accuracy, r.entropy_pre, r.entropy_post, r.loss_first_step,
            r.loss_last_step
        ));
        for (i, l) in r.mean_loss_per_step.iter().enumerate() {
            curves.push_str(&format!("{},{},{:.6}\n", r.value, i + 1, l));
        }
    }
    for (name, text) in [("ablation.csv", &csv), ("loss_curves.csv", &curves)] {
        let p = out_dir.join(name);
        std::fs::write(&p, text)
            .map_err(|e| VpaError::Io { path: p.display().to_string(), source: e })?;
    }
    Ok(rows)
}

/// Join run summaries into one comparison. Missing or unreadable summaries
/// are reported and skipped. Returns the plain-text table; also writes
/// `report.csv` to `out`.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<String> {
    if run_dirs.is_empty() {
        return Err(VpaError::Config("report needs at least one run directory".into()));
    }
    let mut summaries: Vec<(PathBuf, RunSummary)> = Vec::new();
    let mut warnings = Vec::new();
    for dir in run_dirs {
        let path = dir.join("summary.json");
        match std::fs::read_to_string(&path) {
            Ok(text) => match serde_json::from_str::<RunSummary>(&text) {
                Ok(s) => summaries.push((dir.clone(), s)),
                Err(e) => warnings.push(format!("{}: {e}", path.display())),
            },
            Err(e) => warnings.push(format!("{}: {e}", path.display())),
        }
    }
    if summaries.is_empty() {
        return Err(VpaError::Config("no readable summaries among the run directories".into()));
    }
    summaries.sort_by(|a, b| {
        (&a.1.regime, &a.1.lifecycle, &a.1.data_label).cmp(&(
            &b.1.regime,
            &b.1.lifecycle,
            &b.1.data_label,
        ))
    });

    let mut table = String::new();
    for w in &warnings {
        table.push_str(&format!("warning: skipped {w}\n"));
    }
    table.push_str(&format!(
        "{:<10} {:<10} {:<13} {:<22} {:>10} {:>11} {:>8}\n",
        "regime", "lifecycle", "prompt", "data", "source_acc", "adapted_acc", "delta"
    ));
    let mut csv = String::from(
        "regime,lifecycle,prompt_kind,data_label,source_acc,adapted_acc,delta,flag\n",
    );
    for (_, s) in &summaries {
        let delta = s.adapted_acc - s.source_acc;
        let flag = if delta < 0.0 { "regression" } else { "" };
        table.push_str(&format!(
            "{:<10} {:<10} {:<13} {:<22} {:>10.4} {:>11.4} {:>+8.4}{}\n",
            s.regime,
            s.lifecycle,
            s.prompt_kind,
            s.data_label,
            s.source_acc,
            s.adapted_acc,
            delta,
            if flag.is_empty() { String::new() } else { format!("  [{flag}]") }
        ));
        csv.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{}\n",
            s.regime, s.lifecycle, s.prompt_kind, s.data_label, s.source_acc, s.adapted_acc,
            delta, flag
        ));
    }
    std::fs::write(out, &csv)
        .map_err(|e| VpaError::Io { path: out.display().to_string(), source: e })?;
    Ok(table)
}
