//! Held-out evaluation of a trained model over a dataset.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::StyleModel;
use crate::trainer::{format_g, measure_inference, Dataset};

pub const EVAL_HEADER: &str = "model,content,style,l_c,l_s,l_id1,l_id2,l_total,inference_seconds";

/// Metrics row without the training-only columns (epoch, l_new, γ,
/// timestamp). `content`/`style` are `mean` on the aggregate row.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub content: String,
    pub style: String,
    pub l_c: f64,
    pub l_s: f64,
    pub l_id1: f64,
    pub l_id2: f64,
    pub l_total: f64,
    pub inference_seconds: f64,
}

impl EvalRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.model,
            self.content,
            self.style,
            format_g(self.l_c),
            format_g(self.l_s),
            format_g(self.l_id1),
            format_g(self.l_id2),
            format_g(self.l_total),
            format_g(self.inference_seconds)
        )
    }
}

/// One row per pair in lexicographic pair order. Inference time is the
/// median of `repeats` runs, or 0 when `repeats` is 0.
pub fn evaluate(
    model: &StyleModel,
    label: &str,
    data: &Dataset,
    repeats: usize,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (ci, si) in data.pairs() {
        let (c, s) = (&data.contents[ci], &data.styles[si]);
        let r = model.evaluate(&c.image, &s.image)?;
        let inference_seconds = if repeats == 0 {
            0.0
        } else {
            measure_inference(model, &c.image, &s.image, repeats)?
        };
        rows.push(EvalRow {
            model: label.to_string(),
            content: c.name.clone(),
            style: s.name.clone(),
            l_c: r.l_c,
            l_s: r.l_s,
            l_id1: r.l_id1,
            l_id2: r.l_id2,
            l_total: r.l_total,
            inference_seconds,
        });
    }
    Ok(rows)
}

pub fn mean_row(label: &str, rows: &[EvalRow]) -> EvalRow {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    EvalRow {
        model: label.to_string(),
        content: "mean".into(),
        style: "mean".into(),
        l_c: mean(|r| r.l_c),
        l_s: mean(|r| r.l_s),
        l_id1: mean(|r| r.l_id1),
        l_id2: mean(|r| r.l_id2),
        l_total: mean(|r| r.l_total),
        inference_seconds: mean(|r| r.inference_seconds),
    }
}

pub fn to_csv(rows: &[EvalRow]) -> String {
    let mut out = format!("{EVAL_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

/// Fixed-width table of the aggregate rows, one line per model.
pub fn comparison_table(means: &[EvalRow]) -> String {
    let mut out = format!(
        "{:<16} {:>12} {:>12} {:>12} {:>12}\n",
        "model", "l_c", "l_s", "l_total", "seconds"
    );
    for r in means {
        let _ = writeln!(
            out,
            "{:<16} {:>12} {:>12} {:>12} {:>12}",
            r.model,
            format_g(r.l_c),
            format_g(r.l_s),
            format_g(r.l_total),
            format_g(r.inference_seconds)
        );
    }
    out
}
