use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::evaluator::ScoreReport;
use crate::provenance::Provenance;

/// One grid point: retain NLL weight, KL weight and LoRA rank.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub gamma: f64,
    pub delta: f64,
    pub rank: usize,
}

pub type Metric = (&'static str, fn(&ScoreReport) -> f64);

/// Columns summarized per cell.
pub const METRICS: [Metric; 7] = [
    ("task_score", |r| r.task_score),
    ("mia_raw", |r| r.mia_raw),
    ("mia_scaled", |r| r.mia_scaled),
    ("utility_score", |r| r.utility_score),
    ("final_score", |r| r.final_score),
    ("forget_rouge", |r| r.mean_rouge(Split::Forget)),
    ("retain_rouge", |r| r.mean_rouge(Split::Retain)),
];

/// Result of one (cell, seed) run: scores per evaluated epoch, or the failure.
pub type CellOutcome = std::result::Result<Vec<(usize, ScoreReport)>, String>;

/// Mean and sample standard deviation of each metric across seeds, for one
/// cell at one evaluated epoch. Failed cells have one row with `epoch = None`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub epoch: Option<usize>,
    pub seeds: usize,
    pub failure: Option<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Sample standard deviation (n − 1 denominator); 0 for a single value.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn summarize(cell: SweepCell, outcomes: Vec<CellOutcome>) -> Vec<SweepRow> {
    let failures: Vec<String> = outcomes.iter().filter_map(|o| o.as_ref().err().cloned()).collect();
    if !failures.is_empty() {
        return vec![SweepRow {
            cell,
            epoch: None,
            seeds: outcomes.len(),
            failure: Some(failures.join("; ")),
            means: vec![f64::NAN; METRICS.len()],
            stds: vec![f64::NAN; METRICS.len()],
        }];
    }
    let runs: Vec<Vec<(usize, ScoreReport)>> = outcomes.into_iter().map(|o| o.unwrap()).collect();
    let epochs: Vec<usize> = runs[0].iter().map(|(e, _)| *e).collect();
    let mut rows = Vec::new();
    for epoch in epochs {
        let reports: Vec<&ScoreReport> = runs
            .iter()
            .filter_map(|r| r.iter().find(|(e, _)| *e == epoch).map(|(_, s)| s))
            .collect();
        if reports.len() != runs.len() {
            rows.push(SweepRow {
                cell,
                epoch: Some(epoch),
                seeds: runs.len(),
                failure: Some(format!("epoch {epoch} missing from some seeds")),
                means: vec![f64::NAN; METRICS.len()],
                stds: vec![f64::NAN; METRICS.len()],
            });
            continue;
        }
        let (mut means, mut stds) = (Vec::new(), Vec::new());
        for (_, f) in METRICS {
            let xs: Vec<f64> = reports.iter().map(|r| f(r)).collect();
            means.push(xs.iter().sum::<f64>() / xs.len() as f64);
            stds.push(sample_std(&xs));
        }
        rows.push(SweepRow {
            cell,
            epoch: Some(epoch),
            seeds: runs.len(),
            failure: None,
            means,
            stds,
        });
    }
    rows
}

/// Runs every (cell, seed) pair with at most `jobs` concurrent workers and
/// aggregates per cell. A failing run marks its cell failed; the rest continue.
pub fn sweep<F>(cells: &[SweepCell], seeds: &[u64], jobs: usize, run: F) -> Result<Vec<SweepRow>>
where
    F: Fn(&SweepCell, u64) -> Result<Vec<(usize, ScoreReport)>> + Sync,
{
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Contract("sweep needs at least one cell and one seed".into()));
    }
    let tasks: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Mutex<Vec<Option<CellOutcome>>> = Mutex::new(vec![None; tasks.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(c, seed)) = tasks.get(i) else { break };
        let outcome = run(&cells[c], seed).map_err(|e| format!("seed {seed}: {}: {e}", e.class()));
        if let Err(msg) = &outcome {
            log::warn!("sweep cell {:?} failed: {msg}", cells[c]);
        }
        results.lock().unwrap()[i] = Some(outcome);
    };
    let jobs = jobs.clamp(1, tasks.len());
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let mut results = results.into_inner().unwrap().into_iter();
    let mut rows = Vec::new();
    for cell in cells {
        let outcomes: Vec<CellOutcome> = (0..seeds.len())
            .map(|_| results.next().unwrap().expect("every task ran"))
            .collect();
        rows.extend(summarize(*cell, outcomes));
    }
    Ok(rows)
}

/// Comma-separated table with a leading `#` provenance line.
pub fn to_csv(rows: &[SweepRow], provenance: Option<&Provenance>) -> String {
    let mut out = String::new();
    if let Some(p) = provenance {
        out.push_str(&format!(
            "# seed={} config_hash={} version={}\n",
            p.seed, p.config_hash, p.version
        ));
    }
    let mut header = vec!["gamma", "delta", "rank", "epoch", "seeds", "status"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    for (name, _) in METRICS {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for r in rows {
        let status = match &r.failure {
            None => "ok".to_string(),
            Some(msg) => format!("\"failed: {}\"", msg.replace('"', "'")),
        };
        let mut fields = vec![
            r.cell.gamma.to_string(),
            r.cell.delta.to_string(),
            r.cell.rank.to_string(),
            r.epoch.map(|e| e.to_string()).unwrap_or_default(),
            r.seeds.to_string(),
            status,
        ];
        for (m, s) in r.means.iter().zip(&r.stds) {
            fields.push(format!("{m:.6}"));
            fields.push(format!("{s:.6}"));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}
