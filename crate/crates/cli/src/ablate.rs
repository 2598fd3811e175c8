//! One training run per setting along an ablation axis, summarised as
//! per-class F1 with abnormalities as rows and settings as columns.

use std::path::Path;

use clap::ValueEnum;
use lga_core::attention::{AttentionVariant, PosEncoding};
use lga_core::data::class_name;
use lga_core::train::MetricsReport;
use lga_core::{Error, Precision};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{fit, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// The five attention mechanisms.
    Attention,
    /// Three positional encodings and none.
    Pe,
    /// Query window length.
    Window,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Attention => "attention",
            Axis::Pe => "pe",
            Axis::Window => "window",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub classes: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// `(column label, config)` for every setting along `axis`.
pub fn settings(base: &RunConfig, axis: Axis, windows: &[usize]) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Attention => AttentionVariant::ALL
            .iter()
            .map(|&v| (v.label().to_string(), with(&|c| c.model.variant = v)))
            .collect(),
        Axis::Pe => PosEncoding::ALL
            .iter()
            .map(|&p| (p.label().to_string(), with(&|c| c.model.pos_encoding = p)))
            .collect(),
        Axis::Window => windows
            .iter()
            .map(|&w| (format!("w={w}"), with(&|c| c.model.window_len = w)))
            .collect(),
    }
}

fn row(setting: String, report: &MetricsReport, best_epoch: usize) -> AblationRow {
    AblationRow {
        setting,
        per_class_f1: report.classes.iter().map(|c| c.f1).collect(),
        macro_f1: report.macro_avg.f1,
        best_epoch,
    }
}

/// Train the identical pipeline once per setting, sequentially, and score
/// each on the dev split (validation split when dev is empty).
pub fn cmd_ablate(base: &RunConfig, axis: Axis, windows: &[usize], progress: bool) -> Result<AblationTable, CliError> {
    if axis == Axis::Window && windows.is_empty() {
        return Err(CliError::Usage("--windows needs at least one value".into()));
    }
    let mut rows = Vec::new();
    for (label, cfg) in settings(base, axis, windows) {
        cfg.validate().map_err(|e| CliError::Usage(format!("setting {label}: {e}")))?;
        if progress {
            eprintln!("== {label}");
        }
        let (report, best) = match cfg.model.precision {
            Precision::F32 => {
                let t = fit::<f32>(&cfg, progress)?;
                (t.dev.unwrap_or(t.outcome.best_val), t.outcome.best_epoch)
            }
            Precision::F64 => {
                let t = fit::<f64>(&cfg, progress)?;
                (t.dev.unwrap_or(t.outcome.best_val), t.outcome.best_epoch)
            }
        };
        rows.push(row(label, &report, best));
    }
    Ok(AblationTable {
        axis,
        classes: (0..base.model.classes).map(class_name).collect(),
        rows,
    })
}

impl AblationTable {
    /// One line per setting: `setting, <class F1...>, macro_f1, best_epoch`.
    pub fn write_csv(&self, path: &Path) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
        let mut header = vec!["setting".to_string()];
        header.extend(self.classes.iter().cloned());
        header.push("macro_f1".into());
        header.push("best_epoch".into());
        w.write_record(&header).map_err(Error::from)?;
        for r in &self.rows {
            let mut rec = vec![r.setting.clone()];
            rec.extend(r.per_class_f1.iter().map(|f| format!("{f:.6}")));
            rec.push(format!("{:.6}", r.macro_f1));
            rec.push(r.best_epoch.to_string());
            w.write_record(&rec).map_err(Error::from)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Abnormalities down the side, settings across, an `Avg. F1` row last.
    pub fn text(&self) -> String {
        let first = self.classes.iter().map(String::len).max().unwrap_or(0).max("Abnormality".len()).max("Avg. F1".len());
        let widths: Vec<usize> = self.rows.iter().map(|r| r.setting.len().max(6)).collect();
        let mut out = format!("{:<first$}", "Abnormality");
        for (r, w) in self.rows.iter().zip(&widths) {
            out += &format!("  {:>w$}", r.setting);
        }
        out.push('\n');
        for (k, name) in self.classes.iter().enumerate() {
            out += &format!("{name:<first$}");
            for (r, w) in self.rows.iter().zip(&widths) {
                out += &format!("  {:>w$.3}", r.per_class_f1[k]);
            }
            out.push('\n');
        }
        out += &format!("{:<first$}", "Avg. F1");
        for (r, w) in self.rows.iter().zip(&widths) {
            out += &format!("  {:>w$.3}", r.macro_f1);
        }
        out.push('\n');
        out
    }
}
