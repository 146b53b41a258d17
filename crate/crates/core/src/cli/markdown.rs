//! Markdown tables for run reports.

use std::fmt::Write;

use super::manifest::{CellRecord, RunManifest};
use crate::model::Wiring;

pub const BANNER: &str = "> Desk-scale results on synthetic cohorts. Magnitudes are not comparable \
to published clinical numbers; only directions and relative costs are meaningful.";

fn pct(v: Option<(f64, f64)>) -> String {
    v.map_or_else(|| "-".into(), |(m, s)| format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s))
}

fn mark(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        "-"
    }
}

fn bold_if(s: String, b: bool) -> String {
    if b {
        format!("**{s}**")
    } else {
        s
    }
}

/// Index of the cell with the best test AUPRC (first on ties).
pub fn best_cell(cells: &[CellRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        let Some((v, _)) = c.auprc else { continue };
        if best.is_none_or(|b| v > cells[b].auprc.map_or(f64::NEG_INFINITY, |x| x.0)) {
            best = Some(i);
        }
    }
    best
}

/// MoE / TTA-before / TTA-after / AUPRC / AUROC, one row per wiring.
pub fn ablation_table(cells: &[CellRecord]) -> String {
    let mut s = String::from("| MoE | TTA before | TTA after | AUPRC | AUROC |\n|---|---|---|---|---|\n");
    let best = best_cell(cells);
    for (i, c) in cells.iter().enumerate() {
        let (before, after) = match c.wiring {
            Wiring::TtaOnly | Wiring::TtaBeforeMoe => (true, false),
            Wiring::TtaAfterMoe => (false, true),
            _ => (false, false),
        };
        let b = best == Some(i);
        writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            mark(c.wiring.has_moe()),
            mark(before),
            mark(after),
            bold_if(pct(c.auprc), b),
            bold_if(pct(c.auroc), b)
        )
        .expect("write to string");
    }
    s
}

/// One row per grid cell with the argmax in bold.
pub fn sweep_table(axis: &str, cells: &[CellRecord]) -> String {
    let mut s = format!("| {axis} | AUPRC | AUROC | expert entropy |\n|---|---|---|---|\n");
    let best = best_cell(cells);
    for (i, c) in cells.iter().enumerate() {
        let b = best == Some(i);
        writeln!(
            s,
            "| {} | {} | {} | {} |",
            bold_if(c.label.clone(), b),
            bold_if(pct(c.auprc), b),
            bold_if(pct(c.auroc), b),
            entropy(c)
        )
        .expect("write to string");
    }
    s
}

fn entropy(c: &CellRecord) -> String {
    match (c.expert_entropy, c.max_entropy) {
        (Some(h), Some(m)) => format!("{h:.4} / {m:.4}"),
        _ => "-".into(),
    }
}

/// Parameter counts per group with the overhead over the backbone.
pub fn params_table(rows: &[(&str, &CellRecord)]) -> String {
    let mut s = String::from(
        "| Cell | theta_m | theta_s | theta_e | total | (theta_s + theta_e) / theta_m |\n|---|---|---|---|---|---|\n",
    );
    for (run, c) in rows {
        let p = &c.params;
        let overhead = 100.0 * (p.theta_s + p.theta_e) as f64 / p.theta_m.max(1) as f64;
        writeln!(
            s,
            "| {run}/{} | {} | {} | {} | {} | {overhead:.1}% |",
            c.label,
            p.theta_m,
            p.theta_s,
            p.theta_e,
            p.total()
        )
        .expect("write to string");
    }
    s
}

/// Mean seconds per epoch and the delta against the backbone-only cell of
/// the same run (or, failing that, of any run).
pub fn epoch_timing_table(runs: &[&RunManifest]) -> String {
    let reference = |own: &RunManifest| -> Option<f64> {
        let find = |m: &RunManifest| {
            m.cells
                .iter()
                .filter(|c| c.wiring == Wiring::BackboneOnly)
                .find_map(|c| m.timings.mean_epoch_seconds(&c.label))
        };
        find(own).or_else(|| runs.iter().find_map(|m| find(m)))
    };
    let mut s = String::from(
        "| Cell | epochs | seconds per epoch | delta vs backbone only |\n|---|---|---|---|\n",
    );
    let mut any = false;
    for m in runs {
        let base = reference(m);
        for c in &m.cells {
            let Some(t) = m.timings.mean_epoch_seconds(&c.label) else { continue };
            any = true;
            let delta = base.map_or_else(|| "-".into(), |b| format!("{:+.3} s", t - b));
            let n = m.timings.epoch_seconds[&c.label].len();
            writeln!(s, "| {}/{} | {n} | {t:.3} | {delta} |", m.run_id, c.label).expect("write to string");
        }
    }
    if !any {
        s.push_str("| (no training runs) | - | - | - |\n");
    }
    s
}

pub fn phase_table(runs: &[&RunManifest]) -> String {
    let mut s = String::from("| Run | phase | seconds |\n|---|---|---|\n");
    for m in runs {
        for (phase, secs) in &m.timings.phases {
            writeln!(s, "| {} | {phase} | {secs:.3} |", m.run_id).expect("write to string");
        }
    }
    s
}

fn results_table(runs: &[&RunManifest]) -> String {
    let mut s = String::from(
        "| Cell | wiring | experts | tta lr | AUPRC | AUROC | expert entropy / max |\n|---|---|---|---|---|---|---|\n",
    );
    for m in runs {
        for c in &m.cells {
            writeln!(
                s,
                "| {}/{} | {} | {} | {} | {} | {} | {} |",
                m.run_id,
                c.label,
                c.wiring.name(),
                c.experts,
                c.tta_lr.map_or_else(|| "none".into(), |v| format!("{v:e}")),
                pct(c.auprc),
                pct(c.auroc),
                entropy(c)
            )
            .expect("write to string");
        }
    }
    s
}

/// Full report over any number of runs.
pub fn report(title: &str, runs: &[&RunManifest], extra: &str) -> String {
    let mut s = format!("# {title}\n\n{BANNER}\n\n");
    if !extra.is_empty() {
        s.push_str(extra);
        s.push('\n');
    }
    s.push_str("## Results\n\n");
    s.push_str(&results_table(runs));
    s.push_str("\n## Parameter counts\n\n");
    let rows: Vec<(&str, &CellRecord)> = runs
        .iter()
        .flat_map(|m| m.cells.iter().map(move |c| (m.run_id.as_str(), c)))
        .collect();
    s.push_str(&params_table(&rows));
    s.push_str("\n## Per-epoch timing\n\n");
    s.push_str(&epoch_timing_table(runs));
    s.push_str("\n## Timing per phase\n\n");
    s.push_str(&phase_table(runs));
    s
}
