//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p unlearn-core --test acceptance -- 1 5`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unlearn_core::corpus::{generate, tokenize, DocCounts, Example};
use unlearn_core::evaluator::{
    evaluate, final_score, harmonic_mean, mia_auc, rouge_l, scale_mia, utility_score,
};
use unlearn_core::losses::{
    mean_npo_weight, unlearning_loss, unlearning_loss_value, ForgetLoss, Objective,
};
use unlearn_core::model::{
    init_model, log_probs, lora_values_mut, merge_lora, MergeStatus, ModelConfig,
};
use unlearn_core::pipeline::{build_target, run_unlearning, save_checkpoint, with_fresh_lora, UnlearnJob};
use unlearn_core::trainer::unlearn;
use unlearn_core::{
    Corpus, CorpusSpec, LossConfig, ModelState, Projection, Provenance, RunConfig, Sample,
    ScoreReport, Split, Tensor,
};

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn flat(g: &[Tensor]) -> Vec<f64> {
    g.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn perturb(state: &mut ModelState, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in lora_values_mut(state.lora.as_mut().unwrap()) {
        *t = Tensor::randn(t.shape(), std, &mut rng);
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        model_dim: 32,
        n_layers: 2,
        n_heads: 4,
        context_len: 48,
        lora_rank: 5,
        lora_alpha: 5.0,
        lora_targets: Projection::ALL.to_vec(),
        ..ModelConfig::default()
    }
}

fn forget_batch() -> Vec<Example> {
    vec![
        Example::new("Ada Quill lives at", "12 Elm Road 555-0101"),
        Example::new("What did Kalo find?", "red compass in salt marsh."),
    ]
}

fn retain_batch() -> Vec<Example> {
    vec![
        Example::new("Cy works as a", "baker in Tarsk"),
        Example::new("the zoo opens", "9:15 daily $4"),
    ]
}

fn refs(xs: &[Example]) -> Vec<&Example> {
    xs.iter().collect()
}

fn combined_objective() -> Objective {
    Objective::from(&LossConfig {
        beta: 0.5,
        gamma: 1.0,
        delta: 0.5,
    })
}

fn npo_only(beta: f64) -> Objective {
    Objective {
        forget: ForgetLoss::Npo { beta },
        gamma: 0.0,
        delta: 0.0,
    }
}

const GA: Objective = Objective {
    forget: ForgetLoss::Ga,
    gamma: 0.0,
    delta: 0.0,
};

fn gradient_correctness() -> Verdict {
    let started = Instant::now();
    let mut s = ok(init_model(&small_model(), 1))?;
    perturb(&mut s, 2, 0.3);
    let (f, r) = (forget_batch(), retain_batch());
    let obj = combined_objective();
    let analytic = ok(unlearning_loss(&s, &refs(&f), &refs(&r), &obj))?.grads;
    let value = |st: &ModelState| unlearning_loss_value(st, &refs(&f), &refs(&r), &obj).unwrap().combined;
    let h = 1e-5;
    let (mut checked, mut worst, mut worst_abs) = (0usize, 0.0f64, 0.0f64);
    for (ti, g) in analytic.iter().enumerate() {
        for i in 0..g.numel() {
            let mut plus = s.clone();
            let mut minus = s.clone();
            lora_values_mut(plus.lora.as_mut().unwrap())[ti].data_mut()[i] += h;
            lora_values_mut(minus.lora.as_mut().unwrap())[ti].data_mut()[i] -= h;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
            let a = g.data()[i];
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            ensure!(
                err <= 1e-8 || err <= 1e-4 * scale,
                "tensor {ti} element {i}: analytic {a:e} vs numeric {numeric:e}"
            );
            worst_abs = worst_abs.max(err);
            if err > 1e-8 {
                worst = worst.max(err / scale);
            }
            checked += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!(
        "{checked} LoRA gradients, worst absolute error {worst_abs:.1e}, worst relative above the floor {worst:.1e}, {secs:.1}s"
    ))
}

fn npo_ga_link() -> Verdict {
    let f = forget_batch();
    let fresh = ok(init_model(&small_model(), 3))?;
    let ga = flat(&ok(unlearning_loss(&fresh, &refs(&f), &[], &GA))?.grads);
    ensure!(norm(&ga) > 1e-6, "GA gradient vanishes at the fresh state");
    for beta in [0.1, 0.5, 2.0] {
        let npo = flat(&ok(unlearning_loss(&fresh, &refs(&f), &[], &npo_only(beta)))?.grads);
        let rel = dist(&npo, &ga) / norm(&ga);
        ensure!(rel <= 1e-10, "fresh state, beta {beta}: relative gap {rel:e}");
    }
    let mut s = fresh.clone();
    perturb(&mut s, 4, 0.3);
    let ga = flat(&ok(unlearning_loss(&s, &refs(&f), &[], &GA))?.grads);
    let mut gaps = Vec::new();
    for beta in [1.0, 0.1, 0.01, 0.001] {
        let npo = flat(&ok(unlearning_loss(&s, &refs(&f), &[], &npo_only(beta)))?.grads);
        gaps.push(dist(&npo, &ga));
    }
    ensure!(gaps.windows(2).all(|w| w[1] < w[0]), "gaps not monotone: {gaps:?}");
    let rel = gaps[3] / norm(&ga);
    ensure!(gaps[3] <= 1e-3 && rel <= 1e-3, "gap at beta 0.001: {:e} (relative {rel:e})", gaps[3]);
    Ok(format!(
        "gaps {:?}, relative gap at beta 0.001 = {rel:.2e}",
        gaps.iter().map(|g| format!("{g:.2e}")).collect::<Vec<_>>()
    ))
}

fn random_tokens(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Vec<usize> {
    let len = rng.gen_range(1..=cfg.context_len);
    (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect()
}

fn lora_identities() -> Verdict {
    let cfg = ModelConfig::default();
    let base = ok(init_model(&cfg, 5))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seqs: Vec<Vec<usize>> = (0..32).map(|_| random_tokens(&mut rng, &cfg)).collect();

    for toks in &seqs[..4] {
        let reference = ok(log_probs(&base, toks, false))?;
        for seed in 0..3 {
            let mut s = base.clone();
            perturb(&mut s, 10 + seed, 5.0);
            ensure!(ok(log_probs(&s, toks, false))?.bit_eq(&reference), "disabled pass depends on A, B");
        }
    }

    let mut worst_noop = 0.0f64;
    for toks in &seqs {
        let on = ok(log_probs(&base, toks, true))?;
        let off = ok(log_probs(&base, toks, false))?;
        worst_noop = worst_noop.max(on.max_abs_diff(&off));
    }
    ensure!(worst_noop <= 1e-12, "B = 0 changes log-probs by {worst_noop:e}");

    let mut trained = base.clone();
    perturb(&mut trained, 7, 0.2);
    let (merged, status) = merge_lora(&trained);
    ensure!(status == MergeStatus::Merged, "first merge reported {status:?}");
    let mut worst_merge = 0.0f64;
    for toks in &seqs {
        let aug = ok(log_probs(&trained, toks, true))?;
        let mer = ok(log_probs(&merged, toks, true))?;
        worst_merge = worst_merge.max(aug.max_abs_diff(&mer));
    }
    ensure!(worst_merge <= 1e-9, "merged log-probs differ by {worst_merge:e}");
    let (again, status) = merge_lora(&merged);
    ensure!(status == MergeStatus::AlreadyMerged && again == merged, "merge not idempotent");
    Ok(format!("B=0 gap {worst_noop:.1e}, merge gap {worst_merge:.1e} over 32 sequences"))
}

fn loss_anchors() -> Verdict {
    let g = ok(generate(&CorpusSpec::default()))?;
    let f: Vec<Example> = g.corpus.forget().iter().take(4).map(|s| s.example()).collect();
    let r: Vec<Example> = g.corpus.retain().iter().take(4).map(|s| s.example()).collect();
    let obj = combined_objective();
    let fresh = ok(init_model(&ModelConfig::default(), 8))?;
    let l = ok(unlearning_loss_value(&fresh, &refs(&f), &refs(&r), &obj))?;
    let anchor = 2.0 / 0.5 * std::f64::consts::LN_2;
    ensure!((l.l_forget - anchor).abs() <= 1e-12, "fresh L_NPO {} vs {anchor}", l.l_forget);
    ensure!(l.k_rt.abs() <= 1e-12, "fresh K_RT {}", l.k_rt);
    let mut s = fresh.clone();
    perturb(&mut s, 9, 0.3);
    for st in [&fresh, &s] {
        let l = ok(unlearning_loss_value(st, &refs(&f), &refs(&r), &obj))?;
        let sum = l.l_forget + l.l_rt + 0.5 * l.k_rt;
        ensure!((l.combined - sum).abs() <= 1e-12, "combined {} vs {sum}", l.combined);
    }
    Ok(format!("fresh L_NPO = {:.6}, K_RT = {:.1e}", l.l_forget, l.k_rt))
}

fn metric_oracles() -> Verdict {
    ensure!(rouge_l("the cat", "the cat sat") == 0.8, "rouge_l hand case");
    ensure!(ok(mia_auc(&[1.0, 2.0], &[1.5, 2.5]))? == 0.75, "MIA hand case");
    ensure!(ok(scale_mia(0.5))? == 1.0, "scale_mia(0.5)");
    ensure!(ok(scale_mia(0.0))? == 0.0 && ok(scale_mia(1.0))? == 0.0, "scale_mia at the ends");
    ensure!(ok(harmonic_mean(&[0.9, 0.0, 0.7]))? == 0.0, "harmonic mean annihilation");
    let a = final_score(0.431, 0.657, 0.461);
    let b = final_score(0.0, 0.0, 0.510);
    ensure!((a - 0.516).abs() <= 0.0015, "first triple gives {a}");
    ensure!((b - 0.170).abs() <= 0.0015, "second triple gives {b}");
    Ok(format!("triples give {a:.4} and {b:.4}"))
}

/// Memorized target on the default corpus, built once and shared.
struct Desk {
    cfg: RunConfig,
    corpus: Corpus,
    target: ModelState,
    before: ScoreReport,
    memorize_secs: f64,
}

fn desk() -> Result<Desk, String> {
    let cfg = RunConfig::default();
    let corpus = ok(generate(&cfg.corpus))?.corpus;
    let started = Instant::now();
    let (target, log) = ok(build_target(&cfg, &corpus))?;
    let memorize_secs = started.elapsed().as_secs_f64();
    let before = ok(evaluate(&target, corpus.samples(), &cfg.eval))?;
    println!(
        "  target: {} memorization epochs, {memorize_secs:.0}s; forget {:.3} retain {:.3} task {:.3} utility {:.3}",
        log.len(),
        before.mean_rouge(Split::Forget),
        before.mean_rouge(Split::Retain),
        before.task_score,
        before.utility_score
    );
    Ok(Desk {
        cfg,
        corpus,
        target,
        before,
        memorize_secs,
    })
}

fn desk_experiment(d: &Desk) -> Verdict {
    let started = Instant::now();
    let forget0 = d.before.mean_rouge(Split::Forget);
    ensure!(forget0 >= 0.95, "memorized forget ROUGE-L {forget0:.3} < 0.95");
    ensure!(d.before.task_score <= 0.05, "memorized task score {:.3} > 0.05", d.before.task_score);

    let mut train = d.cfg.train.clone();
    train.eval_every = 1;
    let start = ok(with_fresh_lora(&d.target, d.cfg.model.lora_rank, train.seed))?;
    let forget: Vec<Sample> = d.corpus.forget().into_iter().cloned().collect();
    let retain: Vec<Sample> = d.corpus.retain().into_iter().cloned().collect();
    let forget_ex: Vec<Example> = forget.iter().map(Sample::example).collect();
    let mut weights = vec![1.0];
    let mut hook = |epoch: usize, st: &ModelState| {
        weights.push(mean_npo_weight(st, &refs(&forget_ex), d.cfg.loss.beta)?);
        if epoch <= 5 || epoch % 5 == 0 {
            evaluate(st, d.corpus.samples(), &d.cfg.eval).map(Some)
        } else {
            Ok(None)
        }
    };
    let (_, log) = ok(unlearn(&start, &forget, &retain, &d.cfg.loss, &train, &mut hook))?;
    let reports = log.reports();

    let mut trend = vec![forget0];
    trend.extend(reports.iter().filter(|(e, _)| *e <= 5).map(|(_, r)| r.mean_rouge(Split::Forget)));
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    println!("  forget ROUGE-L epochs 0..5: {}", fmt(&trend));
    println!("  mean NPO weight epochs 0..20: {}", fmt(&weights));
    for (e, r) in &reports {
        if e % 5 == 0 {
            println!(
                "  epoch {e}: forget {:.3} retain {:.3} task {:.3} mia {:.3} utility {:.3} final {:.3}",
                r.mean_rouge(Split::Forget),
                r.mean_rouge(Split::Retain),
                r.task_score,
                r.mia_raw,
                r.utility_score,
                r.final_score
            );
        }
    }
    let &(_, last) = reports.last().ok_or("no report at epoch 20")?;
    let forget20 = last.mean_rouge(Split::Forget);
    let retain20 = last.mean_rouge(Split::Retain);
    let secs = d.memorize_secs + started.elapsed().as_secs_f64();
    ensure!(trend.len() == 6, "missing early evaluations");
    ensure!(trend.windows(2).all(|w| w[1] < w[0]), "forget ROUGE-L not strictly decreasing over epochs 0..5");
    ensure!(
        weights.windows(2).all(|w| w[1] <= w[0]),
        "mean NPO weight increased between epochs"
    );
    ensure!(forget20 <= 0.3, "epoch 20 forget ROUGE-L {forget20:.3} > 0.3");
    ensure!(retain20 >= 0.7, "epoch 20 retain ROUGE-L {retain20:.3} < 0.7");
    ensure!(last.task_score >= 0.4, "epoch 20 task score {:.3} < 0.4", last.task_score);
    ensure!(secs <= 900.0, "took {secs:.0}s");
    Ok(format!(
        "memorized forget {forget0:.3} task {:.3}; epoch 20 forget {forget20:.3} retain {retain20:.3} task {:.3}; {secs:.0}s",
        d.before.task_score, last.task_score
    ))
}

fn regularization_trend(d: &Desk) -> Verdict {
    let u0 = d.before.utility_score;
    let utility = d.corpus.utility();
    let forget: Vec<Sample> = d.corpus.forget().into_iter().cloned().collect();
    let retain: Vec<Sample> = d.corpus.retain().into_iter().cloned().collect();
    let degradation = |delta: f64, seed: u64| -> Result<f64, String> {
        let loss = LossConfig { delta, ..d.cfg.loss };
        let mut train = d.cfg.train.clone();
        train.seed = seed;
        train.eval_every = train.epochs;
        let start = ok(with_fresh_lora(&d.target, d.cfg.model.lora_rank, seed))?;
        let mut u = None;
        let mut hook = |_: usize, st: &ModelState| {
            u = Some(utility_score(st, &utility, &d.cfg.eval)?);
            Ok(None)
        };
        ok(unlearn(&start, &forget, &retain, &loss, &train, &mut hook))?;
        Ok(u0 - u.ok_or("no utility at epoch 20")?)
    };
    let (mut with_kl, mut without_kl) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        with_kl.push(degradation(0.5, seed)?);
        without_kl.push(degradation(0.0, seed)?);
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (a, b) = (mean(&with_kl), mean(&without_kl));
    println!("  U0 {u0:.3}; degradation per seed delta=0.5 {with_kl:.3?}, delta=0 {without_kl:.3?}");
    ensure!(a <= b, "mean utility degradation with delta 0.5 is {a:.3}, without {b:.3}");
    Ok(format!("mean utility degradation delta=0.5: {a:.3}, delta=0: {b:.3} (U0 {u0:.3})"))
}

fn tiny_config() -> RunConfig {
    let per_split = DocCounts {
        creative: 1,
        biography: 1,
        web: 1,
    };
    let mut cfg = RunConfig::default();
    cfg.corpus = CorpusSpec {
        forget: per_split,
        retain: per_split,
        holdout: per_split,
        utility: 6,
        background: 12,
        ..CorpusSpec::default()
    };
    cfg.memorize.max_epochs = 3;
    cfg.memorize.min_accuracy = 0.0;
    cfg.train.epochs = 3;
    cfg.train.eval_every = 1;
    cfg.train.seed = 11;
    cfg
}

/// Full pipeline into `dir`; returns the serialized reports and run log.
fn pipeline_once(cfg: &RunConfig, dir: &std::path::Path) -> Result<(Vec<String>, String), String> {
    let corpus = ok(generate(&cfg.corpus))?.corpus;
    let (target, _) = ok(build_target(cfg, &corpus))?;
    let provenance = Provenance::new(cfg.train.seed, cfg.hash());
    ok(save_checkpoint(&dir.join("target"), &target, &provenance, &[]))?;
    let job = UnlearnJob {
        corpus: &corpus,
        loss: cfg.loss,
        train: cfg.train.clone(),
        eval: cfg.eval,
        rank: cfg.model.lora_rank,
        provenance: Some(provenance.clone()),
    };
    let mut reports = Vec::new();
    let (state, log) = ok(run_unlearning(&target, &job, &mut |e, st, r| {
        reports.push(r.to_json());
        save_checkpoint(&dir.join(format!("epoch{e}")), st, &provenance, &[])
    }))?;
    ok(save_checkpoint(&dir.join("final"), &state, &provenance, &[]))?;
    Ok((reports, log.without_timing().to_jsonl()))
}

fn files_equal(a: &std::path::Path, b: &std::path::Path) -> Result<usize, String> {
    let mut n = 0;
    for entry in ok(std::fs::read_dir(a))? {
        let entry = ok(entry)?;
        let name = entry.file_name();
        if entry.path().is_dir() {
            n += files_equal(&entry.path(), &b.join(&name))?;
        } else {
            let x = ok(std::fs::read(entry.path()))?;
            let y = ok(std::fs::read(b.join(&name)))?;
            ensure!(x == y, "{} differs", entry.path().display());
            n += 1;
        }
    }
    Ok(n)
}

fn determinism() -> Verdict {
    let cfg = tiny_config();
    let tmp = ok(tempfile::tempdir())?;
    let (ra, la) = pipeline_once(&cfg, &tmp.path().join("a"))?;
    let (rb, lb) = pipeline_once(&cfg, &tmp.path().join("b"))?;
    ensure!(ra == rb, "ScoreReports differ between runs");
    ensure!(la == lb, "run logs differ between runs");
    let files = files_equal(&tmp.path().join("a"), &tmp.path().join("b"))?;
    ensure!(!ra.is_empty() && files > 0, "nothing was compared");
    let other = RunConfig {
        train: unlearn_core::TrainConfig {
            seed: 12,
            ..cfg.train.clone()
        },
        ..cfg.clone()
    };
    let (rc, _) = pipeline_once(&other, &tmp.path().join("c"))?;
    ensure!(rc != ra, "a different seed produced identical reports");
    Ok(format!("{files} checkpoint files and {} reports bitwise identical", ra.len()))
}

fn main() {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let wants = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut failures = 0;
    let mut report = |n: usize, name: &str, v: Verdict| {
        match &v {
            Ok(detail) => println!("PASS {n} {name}: {detail}"),
            Err(why) => {
                failures += 1;
                println!("FAIL {n} {name}: {why}");
            }
        }
    };
    // Sanity that the tokenizer the corpus depends on is wired in.
    assert!(!tokenize("a").is_empty());

    let quick: [(usize, &str, fn() -> Verdict); 5] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "NPO-GA gradient link", npo_ga_link),
        (3, "LoRA identities", lora_identities),
        (4, "loss anchors", loss_anchors),
        (5, "metric oracles", metric_oracles),
    ];
    for (n, name, f) in quick {
        if wants(n) {
            report(n, name, f());
        }
    }
    if wants(6) || wants(7) {
        match desk() {
            Ok(d) => {
                if wants(6) {
                    report(6, "desk experiment", desk_experiment(&d));
                }
                if wants(7) {
                    report(7, "regularization trend", regularization_trend(&d));
                }
            }
            Err(e) => {
                for (n, name) in [(6, "desk experiment"), (7, "regularization trend")] {
                    if wants(n) {
                        report(n, name, Err(format!("target model: {e}")));
                    }
                }
            }
        }
    }
    if wants(8) {
        report(8, "determinism", determinism());
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
