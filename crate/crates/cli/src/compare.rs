use std::fmt::Write;
use std::path::{Path, PathBuf};

use fedau::config::AggregatorConfig;
use fedau::metrics::{final_window_mean, mean_std, CSV_COLUMNS};
use fedau::{ExperimentConfig, MetricTable};
use rayon::prelude::*;

use crate::output::{self, Failure, EXIT_CONFIG, EXIT_DIVERGED, EXIT_FAILURE};
use crate::run;
use crate::svg::{self, Curve, Scale};

/// Metrics drawn on a log axis; the rest use a linear one.
const LOG_METRICS: [&str; 5] = ["grad_norm_f", "dist_f", "dist_h", "weight_error_cum", "step_norm"];

pub struct Job {
    strategy: usize,
    seed: u64,
    config: ExperimentConfig,
    dir: PathBuf,
}

struct Outcome {
    table: Option<MetricTable>,
    failure: Option<Failure>,
}

/// Final-window statistics of one metric across the seeds of one strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

pub struct StrategySummary {
    pub name: String,
    pub cells: Vec<Option<Cell>>,
    pub failures: Vec<String>,
}

pub fn plan(base: &ExperimentConfig, strategies: &[String], seeds: &[u64], out: &Path) -> Result<Vec<Job>, Failure> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Failure::new(EXIT_CONFIG, "compare needs at least one strategy and one seed"));
    }
    let mut jobs = Vec::new();
    for (si, name) in strategies.iter().enumerate() {
        let mut aggregator = AggregatorConfig::from_name(name, &base.aggregator)?;
        aggregator.weight_scale = base.aggregator.weight_scale;
        for &seed in seeds {
            let mut config = base.clone();
            config.aggregator = aggregator.clone();
            config.seed = seed;
            config.validate()?;
            jobs.push(Job {
                strategy: si,
                seed,
                config,
                dir: out.join(name).join(format!("seed-{seed}")),
            });
        }
    }
    Ok(jobs)
}

/// Metric columns summarised and plotted (all CSV columns except `t`).
pub fn metric_columns() -> impl Iterator<Item = &'static str> {
    CSV_COLUMNS.iter().copied().filter(|c| *c != "t")
}

fn summarise(name: &str, outcomes: &[(&Job, &Outcome)]) -> StrategySummary {
    let mut failures = Vec::new();
    for (job, outcome) in outcomes {
        if let Some(f) = &outcome.failure {
            failures.push(format!("seed {}: {}", job.seed, f.message));
        }
    }
    let ok: Vec<&MetricTable> = outcomes
        .iter()
        .filter(|(_, o)| o.failure.is_none())
        .filter_map(|(_, o)| o.table.as_ref())
        .collect();
    let cells = metric_columns()
        .map(|col| {
            let values: Vec<f64> = ok
                .iter()
                .filter_map(|t| t.series(col))
                .filter_map(|s| final_window_mean(&s.values))
                .collect();
            if values.is_empty() {
                return None;
            }
            let (mean, std) = mean_std(&values);
            Some(Cell {
                mean,
                std,
                runs: values.len(),
            })
        })
        .collect();
    StrategySummary {
        name: name.to_string(),
        cells,
        failures,
    }
}

/// Mean curve over seeds at the rounds shared by every run.
fn mean_curve(label: &str, tables: &[&MetricTable], column: &str) -> Option<Curve> {
    let series: Vec<_> = tables.iter().map(|t| t.series(column)).collect::<Option<Vec<_>>>()?;
    let first = series.first()?;
    if series.iter().any(|s| s.rounds != first.rounds) {
        return None;
    }
    let points = first
        .rounds
        .iter()
        .enumerate()
        .map(|(i, &r)| (r as f64, series.iter().map(|s| s.values[i]).sum::<f64>() / series.len() as f64))
        .collect();
    Some(Curve {
        label: label.to_string(),
        points,
    })
}

fn fmt_value(v: f64) -> String {
    format!("{v:.4e}")
}

pub fn summary_markdown(rows: &[StrategySummary], header: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "<!-- {header} -->");
    let cols: Vec<&str> = metric_columns().collect();
    let _ = writeln!(s, "| strategy | runs | {} |", cols.join(" | "));
    let _ = writeln!(s, "|---|---|{}", "---|".repeat(cols.len()));
    for row in rows {
        let runs = row.cells.iter().flatten().map(|c| c.runs).max().unwrap_or(0);
        let cells: Vec<String> = row
            .cells
            .iter()
            .map(|c| match c {
                Some(c) => format!("{} ± {}", fmt_value(c.mean), fmt_value(c.std)),
                None => "n/a".into(),
            })
            .collect();
        let _ = writeln!(s, "| {} | {runs} | {} |", row.name, cells.join(" | "));
    }
    let failed: Vec<String> = rows
        .iter()
        .flat_map(|r| r.failures.iter().map(move |f| format!("- {}: {f}", r.name)))
        .collect();
    if !failed.is_empty() {
        let _ = writeln!(s, "\nFailed runs:\n{}", failed.join("\n"));
    }
    s
}

pub fn summary_csv(rows: &[StrategySummary], header: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {header}");
    let mut cols = vec!["strategy".to_string(), "failed".to_string()];
    for c in metric_columns() {
        cols.push(format!("{c}_mean"));
        cols.push(format!("{c}_std"));
    }
    let _ = writeln!(s, "{}", cols.join(","));
    for row in rows {
        let mut fields = vec![row.name.clone(), row.failures.len().to_string()];
        for c in &row.cells {
            match c {
                Some(c) => {
                    fields.push(c.mean.to_string());
                    fields.push(c.std.to_string());
                }
                None => fields.extend([String::new(), String::new()]),
            }
        }
        let _ = writeln!(s, "{}", fields.join(","));
    }
    s
}

/// Runs every (strategy, seed) pair on at most `jobs` threads, then writes
/// the summary tables and one plot per metric. Returns the summaries and
/// the exit code implied by any failed runs.
pub fn execute(
    jobs_list: Vec<Job>,
    strategies: &[String],
    digest: &str,
    seeds: &[u64],
    out: &Path,
    jobs: usize,
) -> Result<(Vec<StrategySummary>, u8), Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|job| match run::execute(&job.config, digest, &job.dir) {
                Ok(a) => Outcome {
                    table: Some(a.table),
                    failure: a.failure,
                },
                Err(f) => Outcome {
                    table: None,
                    failure: Some(f),
                },
            })
            .collect()
    });

    let seed_list = seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
    let header = format!("config_sha256={digest} seeds={seed_list}");
    let codes: Vec<u8> = outcomes.iter().filter_map(|o| o.failure.as_ref().map(|f| f.code)).collect();
    let code = if codes.contains(&EXIT_DIVERGED) {
        EXIT_DIVERGED
    } else {
        codes.first().copied().unwrap_or(0)
    };
    let summaries: Vec<StrategySummary> = strategies
        .iter()
        .enumerate()
        .map(|(si, name)| {
            let mine: Vec<(&Job, &Outcome)> = jobs_list.iter().zip(&outcomes).filter(|(j, _)| j.strategy == si).collect();
            summarise(name, &mine)
        })
        .collect();
    output::write(&out.join("summary.md"), summary_markdown(&summaries, &header))?;
    output::write(&out.join("summary.csv"), summary_csv(&summaries, &header))?;

    for column in metric_columns() {
        let curves: Vec<Curve> = strategies
            .iter()
            .enumerate()
            .filter_map(|(si, name)| {
                let tables: Vec<&MetricTable> = jobs_list
                    .iter()
                    .zip(&outcomes)
                    .filter(|(j, o)| j.strategy == si && o.failure.is_none())
                    .filter_map(|(_, o)| o.table.as_ref())
                    .collect();
                mean_curve(name, &tables, column)
            })
            .collect();
        let scale = if LOG_METRICS.contains(&column) { Scale::Log } else { Scale::Linear };
        let chart = svg::line_chart(&format!("{column}, mean over seeds"), column, &curves, scale, &header);
        output::write(&out.join("plots").join(format!("{column}.svg")), chart)?;
    }
    Ok((summaries, code))
}
