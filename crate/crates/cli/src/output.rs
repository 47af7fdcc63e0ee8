//! Result files written by `fedrisk run` and read back by `fedrisk report`.
//!
//! All files are plain CSV without quoting; labels only use lowercase
//! letters, digits and dashes. Row order is fixed by construction
//! (variant, then seed, then round), so identical runs produce identical
//! bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fedrisk_core::error::Error;
use fedrisk_core::privacy::EpsilonReport;

use crate::presets::ExperimentResults;

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MARKETS_FILE: &str = "markets.csv";

pub const ROUNDS_HEADER: &str =
    "preset,variant,seed,round,global_loss,accuracy,auc,systemic_auc,bytes_up_cum,converged_round";
pub const SUMMARY_HEADER: &str = "preset,variant,seed,final_global_loss,final_accuracy,\
final_auc,final_systemic_auc,converged_round,bytes_up_total,epsilon";
pub const MARKETS_HEADER: &str = "preset,variant,seed,market,auc";

fn fmt_metric(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_opt_metric(x: Option<f64>) -> String {
    x.map(fmt_metric).unwrap_or_default()
}

fn fmt_opt_round(r: Option<u64>) -> String {
    r.map(|v| v.to_string()).unwrap_or_default()
}

fn fmt_epsilon(e: &EpsilonReport) -> String {
    match e {
        EpsilonReport::Bound(v) => fmt_metric(*v),
        EpsilonReport::NoGuarantee => String::new(),
    }
}

/// Per-round metrics, one line per (variant, seed, round).
/// `converged_round` repeats the run-level value on every row.
pub fn render_rounds(results: &ExperimentResults) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    out.push('\n');
    let preset = results.preset.as_str();
    for variant in &results.variants {
        for rep in &variant.reps {
            let mut bytes_up_cum: u64 = 0;
            for round in &rep.rounds {
                bytes_up_cum += round.bytes_up;
                writeln!(
                    out,
                    "{preset},{variant},{seed},{round},{loss},{acc},{auc},{sys},{bytes},{conv}",
                    variant = variant.label,
                    seed = rep.seed,
                    round = round.round,
                    loss = fmt_metric(round.global_loss),
                    acc = fmt_metric(round.accuracy),
                    auc = fmt_metric(round.auc),
                    sys = fmt_opt_metric(round.systemic_auc),
                    bytes = bytes_up_cum,
                    conv = fmt_opt_round(rep.converged_round),
                )
                .expect("writing to a String cannot fail");
            }
        }
    }
    out
}

/// Final-round metrics, one line per (variant, seed), then a mean and a
/// sample-standard-deviation line per variant. Aggregate lines put the
/// statistic name in the seed column; converged_round averages only the
/// repetitions that converged.
pub fn render_summary(results: &ExperimentResults) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    let preset = results.preset.as_str();
    for variant in &results.variants {
        let mut finals: Vec<[Option<f64>; 6]> = Vec::new();
        for rep in &variant.reps {
            let last = rep
                .rounds
                .last()
                .expect("a run always reports at least one round");
            let bytes_total: u64 = rep.rounds.iter().map(|r| r.bytes_up).sum();
            writeln!(
                out,
                "{preset},{variant},{seed},{loss},{acc},{auc},{sys},{conv},{bytes},{eps}",
                variant = variant.label,
                seed = rep.seed,
                loss = fmt_metric(last.global_loss),
                acc = fmt_metric(last.accuracy),
                auc = fmt_metric(last.auc),
                sys = fmt_opt_metric(last.systemic_auc),
                conv = fmt_opt_round(rep.converged_round),
                bytes = bytes_total,
                eps = fmt_epsilon(&rep.epsilon),
            )
            .expect("writing to a String cannot fail");
            finals.push([
                Some(last.global_loss),
                Some(last.accuracy),
                Some(last.auc),
                last.systemic_auc,
                rep.converged_round.map(|r| r as f64),
                Some(bytes_total as f64),
            ]);
        }
        let eps_values: Vec<f64> = variant
            .reps
            .iter()
            .filter_map(|r| match r.epsilon {
                EpsilonReport::Bound(v) => Some(v),
                EpsilonReport::NoGuarantee => None,
            })
            .collect();
        for (stat, pick) in [("mean", 0usize), ("std", 1usize)] {
            let cell = |idx: usize| -> String {
                let values: Vec<f64> =
                    finals.iter().filter_map(|row| row[idx]).collect();
                if values.is_empty() {
                    return String::new();
                }
                let (mean, std) = mean_std(&values);
                fmt_metric(if pick == 0 { mean } else { std })
            };
            let eps_cell = if eps_values.is_empty() {
                String::new()
            } else {
                let (mean, std) = mean_std(&eps_values);
                fmt_metric(if pick == 0 { mean } else { std })
            };
            writeln!(
                out,
                "{preset},{variant},{stat},{},{},{},{},{},{},{eps_cell}",
                cell(0),
                cell(1),
                cell(2),
                cell(3),
                cell(4),
                cell(5),
                variant = variant.label,
            )
            .expect("writing to a String cannot fail");
        }
    }
    out
}

/// Final per-market ranking scores, cross-market preset only.
pub fn render_markets(results: &ExperimentResults) -> Option<String> {
    let mut out = String::from(MARKETS_HEADER);
    out.push('\n');
    let mut any = false;
    let preset = results.preset.as_str();
    for variant in &results.variants {
        for rep in &variant.reps {
            let Some(markets) = &rep.market_auc else {
                continue;
            };
            any = true;
            for (market, auc) in markets {
                writeln!(
                    out,
                    "{preset},{variant},{seed},{market},{auc}",
                    variant = variant.label,
                    seed = rep.seed,
                    market = market.as_str(),
                    auc = fmt_opt_metric(*auc),
                )
                .expect("writing to a String cannot fail");
            }
        }
    }
    any.then_some(out)
}

/// Mean and sample standard deviation (n - 1 denominator, 0 for n == 1).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Writes all result files into `dir` and returns the file names written.
pub fn write_results(dir: &Path, results: &ExperimentResults) -> Result<Vec<String>, Error> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    fs::write(dir.join(ROUNDS_FILE), render_rounds(results))?;
    written.push(ROUNDS_FILE.to_string());
    fs::write(dir.join(SUMMARY_FILE), render_summary(results))?;
    written.push(SUMMARY_FILE.to_string());
    if let Some(markets) = render_markets(results) {
        fs::write(dir.join(MARKETS_FILE), markets)?;
        written.push(MARKETS_FILE.to_string());
    }
    Ok(written)
}

/// Summary lines for stdout: final ranking score per variant over seeds.
pub fn describe(results: &ExperimentResults) -> String {
    let mut out = String::new();
    for variant in &results.variants {
        let finals: Vec<f64> = variant
            .reps
            .iter()
            .filter_map(|r| r.rounds.last().map(|round| round.auc))
            .collect();
        let (mean, std) = mean_std(&finals);
        let converged = variant
            .reps
            .iter()
            .filter(|r| r.converged_round.is_some())
            .count();
        writeln!(
            out,
            "variant {}: final auc {:.4} +/- {:.4} over {} seed(s), {} converged",
            variant.label,
            mean,
            std,
            variant.reps.len(),
            converged,
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// A parsed CSV table. Our files never quote fields, so a plain comma
/// split is exact.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn read_table(path: &Path) -> Result<Table, Error> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("{} is empty", path.display()),
        })?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(Error::Parse {
                line: i + 2,
                msg: format!(
                    "expected {} fields, got {}",
                    header.len(),
                    row.len()
                ),
            });
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

/// Renders a table as a JSON array of objects. Cells that parse as
/// numbers become numbers; empty cells become null.
pub fn table_to_json(table: &Table) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = table
        .rows
        .iter()
        .map(|row| {
            let obj: serde_json::Map<String, serde_json::Value> = table
                .header
                .iter()
                .zip(row)
                .map(|(key, cell)| (key.clone(), cell_to_json(cell)))
                .collect();
            serde_json::Value::Object(obj)
        })
        .collect();
    serde_json::Value::Array(rows)
}

fn cell_to_json(cell: &str) -> serde_json::Value {
    if cell.is_empty() {
        return serde_json::Value::Null;
    }
    if let Ok(i) = cell.parse::<u64>() {
        return serde_json::Value::from(i);
    }
    if let Ok(f) = cell.parse::<f64>() {
        if let Some(n) = serde_json::Number::from_f64(f) {
            return serde_json::Value::Number(n);
        }
    }
    serde_json::Value::from(cell)
}
