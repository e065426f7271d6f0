use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use unlearn_core::config::Paths;
use unlearn_core::corpus::generate;
use unlearn_core::evaluator::evaluate;
use unlearn_core::pipeline::{build_target, run_unlearning, save_checkpoint, UnlearnJob};
use unlearn_core::trainer::{sweep as run_sweep, to_csv, EpochRecord, SweepCell, METRICS};
use unlearn_core::{Checkpoint, Corpus, LossConfig, Provenance, RunConfig, RunLog, ScoreReport};

use crate::{Common, UnlearnFlags};

/// A failure the core library does not classify.
#[derive(Debug)]
pub struct CliError {
    pub class: &'static str,
    pub msg: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for CliError {}

fn missing(msg: String) -> anyhow::Error {
    CliError {
        class: "missing-input",
        msg,
    }
    .into()
}

/// Which stage `--seed` feeds.
#[derive(Clone, Copy)]
enum Stage {
    Corpus,
    Memorize,
    Unlearn,
    Sweep,
    Other,
}

/// File values, then flags; validated.
fn load_config(common: &Common, stage: Stage) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(dir) = &common.out {
        cfg.paths = Paths::under(dir);
    }
    if let Some(seed) = common.seed {
        match stage {
            Stage::Corpus => cfg.corpus.seed = seed,
            Stage::Memorize => cfg.memorize.seed = seed,
            Stage::Unlearn => cfg.train.seed = seed,
            Stage::Sweep => {
                let n = cfg.sweep.seeds.len() as u64;
                cfg.sweep.seeds = (seed..seed + n).collect();
            }
            Stage::Other => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_seed(cfg: &RunConfig, stage: Stage) -> u64 {
    match stage {
        Stage::Corpus => cfg.corpus.seed,
        Stage::Memorize => cfg.memorize.seed,
        Stage::Unlearn | Stage::Other => cfg.train.seed,
        Stage::Sweep => cfg.sweep.seeds[0],
    }
}

fn provenance(cfg: &RunConfig, stage: Stage) -> Provenance {
    Provenance::new(stage_seed(cfg, stage), cfg.hash())
}

/// The effective configuration as TOML, headed by its provenance.
fn config_echo(cfg: &RunConfig, prov: &Provenance) -> Result<String> {
    Ok(format!(
        "# seed={} config_hash={} version={}\n{}",
        prov.seed,
        prov.config_hash,
        prov.version,
        toml::to_string_pretty(cfg).context("serializing config")?
    ))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let path = &cfg.paths.corpus;
    if !path.exists() {
        return Err(missing(format!("corpus {} not found; run `unlearn gen` first", path.display())));
    }
    Ok(Corpus::load(path, Some(cfg.model.context_len))?)
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn checkpoint_with_config(dir: &Path, ck: &Checkpoint, cfg: &RunConfig, prov: &Provenance) -> Result<()> {
    save_checkpoint(dir, &ck.state, prov, &[])?;
    write(&dir.join("config.toml"), &config_echo(cfg, prov)?)
}

pub fn gen(common: &Common) -> Result<()> {
    let cfg = load_config(common, Stage::Corpus)?;
    let prov = provenance(&cfg, Stage::Corpus);
    let g = generate(&cfg.corpus)?;
    let path = &cfg.paths.corpus;
    write(path, &g.corpus.to_jsonl())?;
    write(&sidecar(path, ".config.toml"), &config_echo(&cfg, &prov)?)?;
    println!("wrote {} samples to {}", g.corpus.len(), path.display());
    Ok(())
}

pub fn memorize(common: &Common) -> Result<()> {
    let cfg = load_config(common, Stage::Memorize)?;
    let prov = provenance(&cfg, Stage::Memorize);
    let corpus = load_corpus(&cfg)?;
    let (target, log) = build_target(&cfg, &corpus)?;
    let dir = cfg.paths.target_checkpoint();
    checkpoint_with_config(&dir, &Checkpoint::new(target), &cfg, &prov)?;
    let lines: String = log
        .iter()
        .map(|e| format!("{{\"epoch\":{},\"loss\":{:?},\"accuracy\":{:?}}}\n", e.epoch, e.loss, e.accuracy))
        .collect();
    write(&cfg.paths.reports.join("memorize.jsonl"), &lines)?;
    let last = log.last().expect("memorization runs at least one epoch");
    println!(
        "memorized in {} epochs (recall {:.3}); checkpoint {}",
        last.epoch,
        last.accuracy,
        dir.display()
    );
    Ok(())
}

fn run_tag(loss: &LossConfig, rank: usize, seed: u64) -> String {
    format!("g{}-d{}-b{}-r{}-s{}", loss.gamma, loss.delta, loss.beta, rank, seed)
}

pub fn unlearn(common: &Common, flags: &UnlearnFlags) -> Result<()> {
    let mut cfg = load_config(common, Stage::Unlearn)?;
    if let Some(g) = flags.gamma {
        cfg.loss.gamma = g;
    }
    if let Some(d) = flags.delta {
        cfg.loss.delta = d;
    }
    if let Some(b) = flags.beta {
        cfg.loss.beta = b;
    }
    if let Some(r) = flags.rank {
        cfg.model.lora_rank = r;
    }
    if let Some(e) = flags.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let prov = provenance(&cfg, Stage::Unlearn);
    let corpus = load_corpus(&cfg)?;
    let target = load_checkpoint(&cfg.paths.target_checkpoint())?.state;
    let tag = run_tag(&cfg.loss, cfg.model.lora_rank, cfg.train.seed);
    let job = UnlearnJob {
        corpus: &corpus,
        loss: cfg.loss,
        train: cfg.train.clone(),
        eval: cfg.eval,
        rank: cfg.model.lora_rank,
        provenance: Some(prov.clone()),
    };
    let reports = cfg.paths.reports.clone();
    let echo = config_echo(&cfg, &prov)?;
    let mut on_checkpoint = |epoch: usize, state: &unlearn_core::ModelState, report: &ScoreReport| {
        let dir = cfg.paths.epoch_checkpoint(&tag, epoch);
        save_checkpoint(&dir, state, &prov, &[("epoch", epoch.to_string())])?;
        let json = report.to_json();
        fs::write(dir.join("config.toml"), &echo)?;
        fs::create_dir_all(&reports)?;
        fs::write(reports.join(format!("{tag}-epoch{epoch:03}.json")), json)?;
        println!(
            "epoch {epoch}: task {:.3} mia {:.3} utility {:.3} final {:.3}",
            report.task_score, report.mia_scaled, report.utility_score, report.final_score
        );
        Ok(())
    };
    let (_, log) = run_unlearning(&target, &job, &mut on_checkpoint)?;
    write(&reports.join(format!("{tag}.runlog.jsonl")), &log.to_jsonl())?;
    write(&reports.join(format!("{tag}.config.toml")), &echo)?;
    println!("run {tag}: {} epochs, log {}", log.records.len(), reports.join(format!("{tag}.runlog.jsonl")).display());
    Ok(())
}

pub fn eval(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(common, Stage::Other)?;
    let dir = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.target_checkpoint());
    let corpus = load_corpus(&cfg)?;
    let ck = load_checkpoint(&dir)?;
    let seed = ck.meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(cfg.train.seed);
    let prov = Provenance::new(seed, cfg.hash());
    let mut report = evaluate(&ck.state, corpus.samples(), &cfg.eval)?;
    report.provenance = Some(prov.clone());
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    let path = cfg.paths.reports.join(format!("eval-{name}.json"));
    write(&path, &report.to_json())?;
    write(&sidecar(&path, ".config.toml"), &config_echo(&cfg, &prov)?)?;
    println!("{}", report.to_json());
    Ok(())
}

pub fn sweep(common: &Common) -> Result<()> {
    let cfg = load_config(common, Stage::Sweep)?;
    let prov = provenance(&cfg, Stage::Sweep);
    let corpus = load_corpus(&cfg)?;
    let target = load_checkpoint(&cfg.paths.target_checkpoint())?.state;
    let cells = cfg.sweep.cells();
    if cells.is_empty() {
        return Err(CliError {
            class: "config",
            msg: "sweep grid has no cells".into(),
        }
        .into());
    }
    let run = |cell: &SweepCell, seed: u64| {
        let loss = LossConfig {
            gamma: cell.gamma,
            delta: cell.delta,
            ..cfg.loss
        };
        let mut train = cfg.train.clone();
        train.seed = seed;
        let job = UnlearnJob {
            corpus: &corpus,
            loss,
            train,
            eval: cfg.eval,
            rank: cell.rank,
            provenance: Some(Provenance::new(seed, cfg.hash())),
        };
        let (_, log) = run_unlearning(&target, &job, &mut |_, _, _| Ok(()))?;
        Ok(log.reports().into_iter().map(|(e, r)| (e, r.clone())).collect())
    };
    let rows = run_sweep(&cells, &cfg.sweep.seeds, common.jobs, run)?;
    let path = cfg.paths.reports.join("sweep.csv");
    let csv = to_csv(&rows, Some(&prov));
    write(&path, &csv)?;
    write(&sidecar(&path, ".config.toml"), &config_echo(&cfg, &prov)?)?;
    print!("{csv}");
    Ok(())
}

fn curve_csv(log: &RunLog) -> String {
    let mut header = vec!["epoch", "l_npo", "l_rt", "k_rt", "combined"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(METRICS.iter().map(|(n, _)| n.to_string()));
    let subscore_keys: Vec<String> = log
        .reports()
        .first()
        .map(|(_, r)| r.rouge_subscores.keys().cloned().collect())
        .unwrap_or_default();
    header.extend(subscore_keys.iter().cloned());
    let mut out = String::new();
    if let Some(p) = log.records.iter().find_map(|r| r.provenance.as_ref()) {
        out.push_str(&format!("# seed={} config_hash={} version={}\n", p.seed, p.config_hash, p.version));
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for r in &log.records {
        out.push_str(&curve_row(r, &subscore_keys));
        out.push('\n');
    }
    out
}

fn curve_row(r: &EpochRecord, keys: &[String]) -> String {
    let mut fields = vec![
        r.epoch.to_string(),
        format!("{:.6}", r.l_npo),
        format!("{:.6}", r.l_rt),
        format!("{:.6}", r.k_rt),
        format!("{:.6}", r.combined),
    ];
    match &r.scores {
        Some(s) => {
            fields.extend(METRICS.iter().map(|(_, f)| format!("{:.6}", f(s))));
            fields.extend(keys.iter().map(|k| s.rouge_subscores.get(k).map(|v| format!("{v:.6}")).unwrap_or_default()));
        }
        None => fields.extend(std::iter::repeat_n(String::new(), METRICS.len() + keys.len())),
    }
    fields.join(",")
}

pub fn report(common: &Common) -> Result<()> {
    let cfg = load_config(common, Stage::Other)?;
    let dir = &cfg.paths.reports;
    let mut logs: Vec<PathBuf> = match fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".runlog.jsonl"))
            .collect(),
        Err(_) => Vec::new(),
    };
    logs.sort();
    if logs.is_empty() {
        return Err(missing(format!("no run logs under {}; run `unlearn unlearn` first", dir.display())));
    }
    for path in logs {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let log = RunLog::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        let name = path.file_name().unwrap().to_string_lossy().replace(".runlog.jsonl", ".curve.csv");
        let out = dir.join(name);
        write(&out, &curve_csv(&log))?;
        println!("{}", out.display());
    }
    Ok(())
}

pub fn show_config(common: &Common) -> Result<()> {
    let cfg = load_config(common, Stage::Other)?;
    print!("{}", config_echo(&cfg, &provenance(&cfg, Stage::Other))?);
    Ok(())
}
