//! CSV and markdown rendering of an experiment's results.
//!
//! All numbers are scaled by 100 and printed with two decimals. A cell
//! whose stage has not produced a result is printed as the missing-cell
//! marker and reported as a warning. Nothing here reads the clock, so two
//! renderings of the same results are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{io_err, write_json, CellSource, ExperimentResults, RowResult, StageError, Variant, VERSION};
use crate::metrics::{delta_report, format_cell, table_average, MetricKind, TaskScores, MISSING_CELL};
use crate::training::loss_curve_csv;

/// Files every complete run writes, besides per-row loss curves.
pub const REPORT_FILES: [&str; 9] = [
    "table2.csv",
    "table3.csv",
    "table6.csv",
    "table7.csv",
    "perplexity.csv",
    "figure2_delta.csv",
    "figure3_deviation.csv",
    "report.md",
    "provenance.json",
];

fn pct(v: f64) -> f64 {
    100.0 * v
}

/// A rendered table: header plus rows of already formatted cells.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    fn csv(&self) -> String {
        let line = |cells: &[String]| cells.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(",") + "\n";
        let mut s = line(&self.header);
        for r in &self.rows {
            s += &line(r);
        }
        s
    }

    /// `bold` marks `(row, column)` cells to wrap in `**`.
    fn markdown(&self, bold: &[(usize, usize)]) -> String {
        let mut s = format!("| {} |\n", self.header.join(" | "));
        s += &format!("|{}\n", "---|".repeat(self.header.len()));
        for (i, r) in self.rows.iter().enumerate() {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(j, c)| if bold.contains(&(i, j)) { format!("**{c}**") } else { c.clone() })
                .collect();
            s += &format!("| {} |\n", cells.join(" | "));
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Serialize)]
struct Cell<'a> {
    table: &'static str,
    row: String,
    column: String,
    #[serde(flatten)]
    source: &'a CellSource,
}

#[derive(Serialize)]
struct Provenance<'a> {
    name: &'a str,
    manifest_hash: &'a str,
    version: &'a str,
    seed: u64,
    seeds: &'a [u64],
    stages: &'a BTreeMap<String, String>,
    cells: Vec<Cell<'a>>,
}

/// The printed column order with every pair collapsed into its name at the
/// position of its first member.
fn delta_columns(results: &ExperimentResults) -> Vec<String> {
    let m = &results.manifest;
    let mut cols = Vec::new();
    for t in &m.tasks {
        let name = m
            .task_pairs
            .iter()
            .find(|p| &p.first == t || &p.second == t)
            .map_or(t.as_str(), |p| p.name.as_str());
        if !cols.iter().any(|c| c == name) {
            cols.push(name.to_string());
        }
    }
    cols
}

fn scores_of(row: &RowResult) -> TaskScores {
    row.tasks.iter().map(|(t, (r, _))| (t.clone(), pct(r.aggregate.mean))).collect()
}

/// Writes every report file into `dir` and returns the warnings.
pub fn emit_report(results: &ExperimentResults, dir: &Path) -> Result<Vec<String>, StageError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let m = &results.manifest;
    let mut warnings = Vec::new();
    let mut cells = Vec::new();
    let mut md = format!("# {}\n\nManifest `{}`, version {VERSION}, fine-tuning seeds {:?}.\n", m.name, results.manifest_hash, m.seeds);

    // main table: tasks then AVG
    let mut t2 = Table::new(["lang", "vocab"].into_iter().map(String::from).chain(m.tasks.iter().cloned()).chain(["AVG".to_string()]));
    let mut avgs = Vec::new();
    for row in &results.rows {
        let mut line = vec![row.lang.clone(), row.vocab.clone()];
        for t in &m.tasks {
            match row.tasks.get(t) {
                Some((r, src)) => {
                    line.push(format_cell(Some(pct(r.aggregate.mean))));
                    let undefined = r.undefined_seeds();
                    if !undefined.is_empty() {
                        warnings.push(format!("{} {t}: {} undefined for seeds {undefined:?}, counted as 0", row.name(), r.metric));
                    }
                    cells.push(Cell {
                        table: "table2",
                        row: row.name(),
                        column: t.clone(),
                        source: src,
                    });
                }
                None => {
                    warnings.push(format!("table2: {} {t} missing", row.name()));
                    line.push(MISSING_CELL.into());
                }
            }
        }
        let avg = (row.tasks.len() == m.tasks.len())
            .then(|| table_average(&scores_of(row), &m.task_pairs, m.avg_convention).ok())
            .flatten();
        line.push(format_cell(avg));
        avgs.push(avg);
        t2.rows.push(line);
    }
    fs::write(dir.join("table2.csv"), t2.csv()).map_err(io_err(dir))?;
    // one source language per manifest, so the whole table is one block
    let best = avgs.iter().flatten().map(|&a| (a * 100.0).round()).fold(f64::NEG_INFINITY, f64::max);
    let avg_col = t2.header.len() - 1;
    let bold: Vec<(usize, usize)> = avgs
        .iter()
        .enumerate()
        .filter(|(_, a)| a.is_some_and(|a| (a * 100.0).round() == best))
        .map(|(i, _)| (i, avg_col))
        .collect();
    let _ = write!(md, "\n## Fine-tuning scores (mean over seeds, x100)\n\n{}", t2.markdown(&bold));

    // Figure-2 style deltas against the scratch baseline
    let cols = delta_columns(results);
    let mut fig2 = Table::new(["variant".to_string()].into_iter().chain(cols.iter().cloned()));
    let baseline = results.rows.iter().find(|r| r.variant == Variant::TargetScratch);
    let variants: BTreeMap<String, TaskScores> = results
        .rows
        .iter()
        .filter(|r| r.variant.is_transfer() && r.tasks.len() == m.tasks.len())
        .map(|r| (r.name(), scores_of(r)))
        .collect();
    match baseline {
        Some(b) if b.tasks.len() == m.tasks.len() && !variants.is_empty() => {
            let report = delta_report(&variants, &scores_of(b), &m.task_pairs)?;
            for (v, deltas) in &report.per_variant {
                let mut line = vec![v.clone()];
                line.extend(cols.iter().map(|c| format_cell(deltas.get(c).copied())));
                fig2.rows.push(line);
            }
            let mut max = vec!["max".to_string()];
            max.extend(cols.iter().map(|c| format_cell(report.max.get(c).map(|d| d.delta))));
            fig2.rows.push(max);
            let mut arg = vec!["argmax".to_string()];
            arg.extend(cols.iter().map(|c| report.max.get(c).map_or(MISSING_CELL.to_string(), |d| d.variant.clone())));
            fig2.rows.push(arg);
        }
        _ => warnings.push("figure2_delta: needs complete scratch baseline and transfer rows".into()),
    }
    fs::write(dir.join("figure2_delta.csv"), fig2.csv()).map_err(io_err(dir))?;
    let _ = write!(md, "\n## Difference from the scratch baseline (x100)\n\n{}", fig2.markdown(&[]));

    // probes
    let mut t3 = Table::new(["lang", "vocab", "UUAS", "DSpr", "WiC"]);
    for row in &results.rows {
        let mut line = vec![row.lang.clone(), row.vocab.clone()];
        match &row.probe {
            Some((p, src)) => {
                line.push(format_cell(p.structural.uuas.score.value().map(pct)));
                line.push(format_cell(p.structural.dspr.score.value().map(pct)));
                line.push(format_cell(p.wic.as_ref().map(|w| pct(w.aggregate.mean))));
                for col in ["UUAS", "DSpr", "WiC"] {
                    cells.push(Cell {
                        table: "table3",
                        row: row.name(),
                        column: col.into(),
                        source: src,
                    });
                }
            }
            None => {
                if m.probe.is_some() {
                    warnings.push(format!("table3: {} missing", row.name()));
                }
                line.extend([MISSING_CELL.to_string(), MISSING_CELL.into(), MISSING_CELL.into()]);
            }
        }
        t3.rows.push(line);
    }
    fs::write(dir.join("table3.csv"), t3.csv()).map_err(io_err(dir))?;
    let _ = write!(md, "\n## Probes (x100)\n\n{}", t3.markdown(&[]));

    // source and target task after transfer, plus deviations
    let mut fig3 = Table::new(["task", "group", "model", "deviation"]);
    let mut ppl = Table::new(["model", "tokenizer", "perplexity", "mask_seed", "positions"]);
    let t6 = match &results.forgetting {
        Some((f, src)) => {
            let mut t6 = Table::new(["model".to_string(), f.source_task.clone(), f.target_task.clone()]);
            let mut models: Vec<&str> = Vec::new();
            for s in &f.report.scores {
                if !models.contains(&s.model.as_str()) {
                    models.push(&s.model);
                }
            }
            for model in models {
                let score = |task: &str| {
                    f.report
                        .scores
                        .iter()
                        .find(|s| s.model == model && s.task == task)
                        .map(|s| pct(s.aggregate.mean))
                };
                t6.rows.push(vec![model.to_string(), format_cell(score(&f.source_task)), format_cell(score(&f.target_task))]);
                for col in [&f.source_task, &f.target_task] {
                    cells.push(Cell {
                        table: "table6",
                        row: model.to_string(),
                        column: col.clone(),
                        source: src,
                    });
                }
            }
            for d in &f.report.deviations {
                fig3.rows.push(vec![d.task.clone(), d.group.clone(), d.model.clone(), format_cell(Some(pct(d.deviation)))]);
            }
            for p in &f.perplexity {
                ppl.rows.push(vec![
                    p.model.clone(),
                    p.tokenizer.clone(),
                    format_cell(Some(p.perplexity.perplexity)),
                    p.perplexity.mask_seed.to_string(),
                    p.perplexity.positions.to_string(),
                ]);
            }
            t6
        }
        None => {
            if m.forgetting.is_some() {
                warnings.push("table6: forgetting stage missing".into());
            }
            Table::new(["model", "source_task", "target_task"])
        }
    };
    fs::write(dir.join("table6.csv"), t6.csv()).map_err(io_err(dir))?;
    fs::write(dir.join("figure3_deviation.csv"), fig3.csv()).map_err(io_err(dir))?;
    fs::write(dir.join("perplexity.csv"), ppl.csv()).map_err(io_err(dir))?;
    let _ = write!(
        md,
        "\n## Source and target task after transfer (x100)\n\n{}\n### Deviation from the roster mean (x100)\n\n{}",
        t6.markdown(&[]),
        fig3.markdown(&[])
    );
    let _ = write!(
        md,
        "\n## Source-corpus MLM perplexity (supplementary measurement)\n\nOne fixed seeded masking pass over the source corpus; the perplexity column is not scaled.\n\n{}",
        ppl.markdown(&[])
    );

    // minimal-pair parity
    let mut t7 = Table::new(["lang", "vocab", "gps", "acc"]);
    for row in &results.rows {
        let mut line = vec![row.lang.clone(), row.vocab.clone()];
        match &row.gender {
            Some((r, src)) => {
                line.push(format_cell(r.aggregate_of(MetricKind::GenderParity).map(|a| pct(a.mean))));
                line.push(format_cell(r.aggregate_of(MetricKind::Accuracy).map(|a| pct(a.mean))));
                for col in ["gps", "acc"] {
                    cells.push(Cell {
                        table: "table7",
                        row: row.name(),
                        column: col.into(),
                        source: src,
                    });
                }
            }
            None => {
                if m.gender_task.is_some() {
                    warnings.push(format!("table7: {} missing", row.name()));
                }
                line.extend([MISSING_CELL.to_string(), MISSING_CELL.into()]);
            }
        }
        t7.rows.push(line);
    }
    fs::write(dir.join("table7.csv"), t7.csv()).map_err(io_err(dir))?;
    let _ = write!(md, "\n## Minimal-pair parity (x100)\n\n{}", t7.markdown(&[]));

    for row in &results.rows {
        if let Some(curve) = &row.loss_curve {
            let p = dir.join(format!("loss_{}.csv", row.variant.key()));
            fs::write(&p, loss_curve_csv(curve)).map_err(io_err(&p))?;
        }
    }

    if !warnings.is_empty() {
        md += "\n## Warnings\n\n";
        for w in &warnings {
            md += &format!("- {w}\n");
        }
    }
    fs::write(dir.join("report.md"), md).map_err(io_err(dir))?;
    write_json(
        &dir.join("provenance.json"),
        &Provenance {
            name: &m.name,
            manifest_hash: &results.manifest_hash,
            version: VERSION,
            seed: m.seed,
            seeds: &m.seeds,
            stages: &results.stages,
            cells,
        },
    )?;
    Ok(warnings)
}
