//! Text, CSV, JSON and image renderings of evaluation results.

use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::ingest::SleepStage;

use super::{ConfusionMatrix, EvalError, MetricsReport, N_STAGES};

/// One line of a comparison table: accuracy, macro F1 and per-class F1 in
/// W, S1, S2, S3, REM order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: [f64; N_STAGES],
}

impl ResultRow {
    pub fn new(label: impl Into<String>, m: &MetricsReport) -> Self {
        Self {
            label: label.into(),
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            per_class_f1: m.f1,
        }
    }
}

fn header(first: &str) -> String {
    let mut s = format!("{first:<24} {:>6} {:>6}", "Acc", "F1");
    for st in SleepStage::ALL {
        s.push_str(&format!(" {:>6}", st.short()));
    }
    s
}

/// Fixed-width table with values in percent.
pub fn render_table(title: &str, rows: &[ResultRow]) -> String {
    let mut out = format!("{title}\n{}\n", header("Method"));
    for r in rows {
        out.push_str(&format!("{:<24} {:>6.1} {:>6.1}", r.label, 100.0 * r.accuracy, 100.0 * r.macro_f1));
        for f in r.per_class_f1 {
            out.push_str(&format!(" {:>6.1}", 100.0 * f));
        }
        out.push('\n');
    }
    out
}

/// Confusion matrix with per-class metrics underneath.
pub fn render_metrics(cm: &ConfusionMatrix, m: &MetricsReport) -> String {
    let mut out = String::from("reference \\ predicted");
    for st in SleepStage::ALL {
        out.push_str(&format!(" {:>7}", st.short()));
    }
    out.push('\n');
    for (i, st) in SleepStage::ALL.iter().enumerate() {
        out.push_str(&format!("{:<21}", st.short()));
        for c in cm.counts[i] {
            out.push_str(&format!(" {c:>7}"));
        }
        out.push('\n');
    }
    out.push_str(&format!(
        "\naccuracy {:.4}  macro F1 {:.4}\n\n{:<6} {:>9} {:>9} {:>9} {:>8}\n",
        m.accuracy, m.macro_f1, "stage", "precision", "recall", "F1", "support"
    ));
    for (i, st) in SleepStage::ALL.iter().enumerate() {
        let flag = if m.zero_support.contains(st) { "  (no support)" } else { "" };
        out.push_str(&format!(
            "{:<6} {:>9.4} {:>9.4} {:>9.4} {:>8}{flag}\n",
            st.short(),
            m.precision[i],
            m.recall[i],
            m.f1[i],
            m.support[i]
        ));
    }
    out
}

impl ConfusionMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("reference");
        for st in SleepStage::ALL {
            out.push(',');
            out.push_str(st.short());
        }
        out.push('\n');
        for (i, st) in SleepStage::ALL.iter().enumerate() {
            out.push_str(st.short());
            for c in self.counts[i] {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Row-normalized heatmap, one `cell`-pixel square per entry, white to blue.
pub fn heatmap_png(cm: &ConfusionMatrix, path: &Path, cell: u32) -> Result<(), EvalError> {
    let size = cell * N_STAGES as u32;
    let img = ImageBuffer::from_fn(size, size, |x, y| {
        let (r, c) = ((y / cell) as usize, (x / cell) as usize);
        let row = cm.row_sum(r);
        let v = if row == 0 { 0.0 } else { cm.counts[r][c] as f64 / row as f64 };
        let border = x % cell == 0 || y % cell == 0;
        if border {
            Rgb([128u8, 128, 128])
        } else {
            let fade = |full: f64| (255.0 - v * (255.0 - full)).round() as u8;
            Rgb([fade(8.0), fade(48.0), fade(107.0)])
        }
    });
    img.save(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })
}
