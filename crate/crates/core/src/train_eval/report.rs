//! Fixed-layout text serializations of reports and histories. Every value
//! prints with six decimals so reruns produce byte-identical files.

use std::fmt::Write;

use super::eval::{AblationResult, EvalReport};
use super::metrics::{MetricRow, Metrics, CLASSES};
use super::train::EpochRecord;

pub const REPORT_HEADER: &str = "condition,mae,corr,acc2_nonneg,acc2_pos,f1_nonneg,f1_pos,acc5,acc7";
pub const HISTORY_HEADER: &str = "epoch,task,dec,rec,total,valid_mae,lr";
pub const ABLATION_INTRA_HEADER: &str = "variant,mae,corr,acc2_nonneg,acc2_pos,f1_nonneg,f1_pos,acc5,acc7";
pub const ABLATION_INTER_HEADER: &str = "variant,t,v,a,t+v,t+a,v+a,t+v+a,avg";

fn push_row(out: &mut String, key: &str, row: &MetricRow) {
    out.push_str(key);
    for v in row.values() {
        write!(out, ",{v:.6}").unwrap();
    }
    out.push('\n');
}

/// One row per condition followed by an `avg` row.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in &report.rows {
        push_row(&mut out, &r.condition.label(), &r.metrics.row);
    }
    push_row(&mut out, "avg", &report.average);
    out
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for h in history {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e}",
            h.epoch, h.task, h.dec, h.rec, h.total, h.valid_mae, h.lr
        )
        .unwrap();
    }
    out
}

/// Rows are true classes -3..=3, columns predicted classes.
pub fn confusion_csv(m: &Metrics) -> String {
    let mut out = String::from("true\\pred");
    for c in -3..=3 {
        write!(out, ",{c}").unwrap();
    }
    out.push('\n');
    for (i, row) in m.confusion.iter().enumerate() {
        write!(out, "{}", i as i64 - 3).unwrap();
        for n in row {
            write!(out, ",{n}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// `key=value` lines with every metric, support and confusion matrix.
pub fn summary(report: &EvalReport) -> String {
    let mut out = format!("protocol={}\nconditions={}\n", report.protocol, report.rows.len());
    for r in &report.rows {
        let key = r.condition.label();
        for (f, v) in MetricRow::FIELDS.iter().zip(r.metrics.row.values()) {
            writeln!(out, "{key}.{f}={v:.6}").unwrap();
        }
        let m = &r.metrics;
        writeln!(out, "{key}.samples={}", m.samples).unwrap();
        writeln!(out, "{key}.nonzero_samples={}", m.nonzero_samples).unwrap();
        writeln!(out, "{key}.corr_degenerate={}", m.corr_degenerate).unwrap();
        let rows: Vec<String> = (0..CLASSES)
            .map(|i| m.confusion[i].iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" "))
            .collect();
        writeln!(out, "{key}.confusion={}", rows.join(";")).unwrap();
    }
    for (f, v) in MetricRow::FIELDS.iter().zip(report.average.values()) {
        writeln!(out, "avg.{f}={v:.6}").unwrap();
    }
    out
}

/// Intra-modal averages per variant.
pub fn ablation_intra_csv(results: &[AblationResult]) -> String {
    let mut out = format!("{ABLATION_INTRA_HEADER}\n");
    for r in results {
        push_row(&mut out, &r.variant, &r.intra.average);
    }
    out
}

/// Neg-vs-pos F1 per inter-modal subset and the six-subset average.
pub fn ablation_inter_csv(results: &[AblationResult]) -> String {
    let mut out = format!("{ABLATION_INTER_HEADER}\n");
    for r in results {
        out.push_str(&r.variant);
        for row in &r.inter.rows {
            write!(out, ",{:.6}", row.metrics.row.f1_pos).unwrap();
        }
        writeln!(out, ",{:.6}", r.inter.average.f1_pos).unwrap();
    }
    out
}
