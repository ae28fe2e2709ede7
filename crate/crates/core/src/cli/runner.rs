//! Turns a resolved experiment config into seeded federation runs: data
//! pipeline construction, sweep expansion, parallel execution, and output
//! files (per-round CSV, per-run summary, per-variant aggregate).

use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attack::{dba_assign, AttackConfig, AttackStrategy};
use crate::cli::config::{resolve, AttackKind, ExperimentConfig, RawConfig};
use crate::data::{
    dirichlet_partition, load_corpus, make_backdoor_testset, select_rare_tokens, synth_corpus,
    TriggerSpec, Vocabulary,
};
use crate::federation::{run_federation, schedule_adversary, SimulationInputs};
use crate::metrics::{summarize, summarize_runs, RoundRecord, RunSummary};
use crate::model::{Example, ModelDims, ModelParams};
use crate::rng::{self, salt};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker threads; 0 picks the rayon default.
    pub threads: usize,
    pub quiet: bool,
}

/// Everything produced by one seeded run. `dir` is set once the run has
/// been written to disk.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub seed: u64,
    /// Sweep variant index, if the config defines a sweep.
    pub variant: Option<usize>,
    pub dir: Option<PathBuf>,
    pub records: Vec<RoundRecord>,
    pub summary: RunSummary,
    pub init: ModelParams,
    pub global: ModelParams,
    /// Trigger token ids used for evaluation.
    pub trigger_ids: Vec<usize>,
    /// Training-corpus occurrence counts of those ids.
    pub trigger_counts: Vec<u64>,
}

/// Execute one seeded run end to end: corpus, splits, trigger selection,
/// partition, schedule, and the federation loop.
pub fn execute_run(cfg: &ExperimentConfig, seed: u64) -> Result<RunArtifacts> {
    let mut fed = cfg.federation.clone();
    fed.seed = seed;

    let all = match &cfg.data.corpus_file {
        Some(path) => {
            let examples = load_corpus(path, cfg.data.vocab)?;
            for ex in &examples {
                if ex.label >= cfg.data.classes {
                    return Err(Error::InvalidLabel {
                        label: ex.label,
                        classes: cfg.data.classes,
                    });
                }
            }
            examples
        }
        None => {
            let (_, examples) = synth_corpus(
                cfg.data.vocab,
                cfg.data.classes,
                cfg.data.examples,
                cfg.data.seq_len,
                cfg.data.skew,
                seed,
            )?;
            examples
        }
    };
    if all.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut pool_rng = rng::derive(seed, &[salt::SPLIT]);
    let mut shuffled = all;
    shuffled.shuffle(&mut pool_rng);
    let n = shuffled.len();
    let n_test = ((n as f64 * cfg.data.test_fraction).round() as usize).max(1);
    let n_val = ((n as f64 * cfg.data.val_fraction).round() as usize).max(1);
    if n_test + n_val >= n {
        return Err(Error::Config(format!(
            "splits leave no training data ({n} examples, {n_test} test, {n_val} val)"
        )));
    }
    let test: Vec<Example> = shuffled[..n_test].to_vec();
    let validation: Vec<Example> = shuffled[n_test..n_test + n_val].to_vec();
    let train: Vec<Example> = shuffled[n_test + n_val..].to_vec();

    // Rare tokens come from training-set counts only.
    let vocab = Vocabulary::from_examples(cfg.data.vocab, &train);
    let a = &cfg.attack;
    let pool_size = match a.kind {
        AttackKind::Dba => a.trigger_tokens * a.dba_adversaries,
        _ => a.trigger_tokens,
    };
    if pool_size > cfg.data.vocab {
        return Err(Error::Config(format!(
            "trigger pool of {pool_size} exceeds vocabulary {}",
            cfg.data.vocab
        )));
    }
    let rare = select_rare_tokens(&vocab, pool_size);
    let base_spec = TriggerSpec {
        trigger_ids: rare.clone(),
        count: a.trigger_count,
        range: (a.range_lo, a.range_hi),
        position_mode: a.position_mode,
        norm_bound: a.norm_bound,
        target_label: a.target_label,
    };

    // The evaluation trigger; for DBA it is the union of all parts.
    let (strategy, eval_spec) = match a.kind {
        AttackKind::None | AttackKind::RareEmbedding => {
            (AttackStrategy::RareEmbedding, base_spec.clone())
        }
        AttackKind::RareEmbeddingGe => (AttackStrategy::RareEmbeddingGe, base_spec.clone()),
        AttackKind::EntireEmbedding => (AttackStrategy::EntireEmbedding, base_spec.clone()),
        AttackKind::DataPoisoning => (
            AttackStrategy::DataPoisoning {
                mix_ratio: a.mix_ratio,
            },
            base_spec.clone(),
        ),
        AttackKind::ModelReplacement => (
            AttackStrategy::ModelReplacement {
                scale: a.replace_scale,
                mix_ratio: a.mix_ratio,
            },
            base_spec.clone(),
        ),
        AttackKind::Dba => {
            let specs = dba_assign(&base_spec, a.dba_adversaries, &rare, a.trigger_tokens)?;
            let union = TriggerSpec {
                count: (a.trigger_count * a.dba_adversaries)
                    .min(a.range_hi - a.range_lo),
                trigger_ids: rare.clone(),
                ..base_spec.clone()
            };
            (AttackStrategy::Dba { specs }, union)
        }
    };

    let clients = dirichlet_partition(&train, fed.num_clients, cfg.data.alpha, seed)?;

    let dims = ModelDims {
        vocab: cfg.data.vocab,
        hidden: cfg.model.hidden,
        classes: cfg.data.classes,
    };
    let mut init_rng = rng::derive(seed, &[salt::INIT]);
    let init = ModelParams::init(dims, cfg.model.pooling, &mut init_rng);

    let mut bt_rng = rng::derive(seed, &[salt::BACKDOOR_TEST]);
    let backdoor_test = make_backdoor_testset(&test, &eval_spec, &mut bt_rng)?;

    let mut sched_rng = rng::derive(seed, &[salt::SCHEDULE]);
    let schedule = schedule_adversary(
        a.schedule,
        a.epsilon,
        fed.clients_per_round,
        fed.rounds,
        &mut sched_rng,
    )?;

    let attack_cfg = AttackConfig {
        strategy,
        trigger: eval_spec.clone(),
        backdoor_steps: a.backdoor_steps,
        backdoor_lr: a.backdoor_lr,
        ensemble_size: a.ensemble_size,
        decay: a.decay,
        early_stop_acc: a.early_stop_acc,
    };
    let attacking = a.kind != AttackKind::None && a.epsilon > 0.0;

    let inputs = SimulationInputs {
        init: init.clone(),
        clients,
        clean_test: test,
        backdoor_test: Some(backdoor_test),
        validation,
    };
    let plan = if attacking {
        Some((&attack_cfg, &schedule))
    } else {
        None
    };
    let outcome = run_federation(&fed, &cfg.defense, plan, &inputs)?;

    let summary = summarize(&outcome.records, &cfg.thresholds);
    let trigger_counts = eval_spec
        .trigger_ids
        .iter()
        .map(|&t| vocab.counts[t])
        .collect();
    Ok(RunArtifacts {
        seed,
        variant: None,
        dir: None,
        records: outcome.records,
        summary,
        init,
        global: outcome.global,
        trigger_ids: eval_spec.trigger_ids,
        trigger_counts,
    })
}

/// The per-round CSV for one run. Format is fixed: header plus one line
/// per round, floats at six decimals, flags as 0/1.
pub(crate) fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from("round,adversary_round,clean_acc,backdoor_acc,defense_rejections\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            r.round,
            u8::from(r.adversary_round),
            r.clean_acc,
            r.backdoor_acc,
            r.defense_rejections
        ));
    }
    out
}

fn summary_text(cfg: &ExperimentConfig, art: &RunArtifacts) -> String {
    let mut out = String::new();
    out.push_str(&format!("seed = {}\n", art.seed));
    out.push_str(&format!(
        "final_clean_acc = {:.6}\n",
        art.summary.final_clean_acc
    ));
    out.push_str(&format!(
        "final_backdoor_acc = {:.6}\n",
        art.summary.final_backdoor_acc
    ));
    for &(t, r) in &art.summary.success_ratios {
        out.push_str(&format!("success_ratio@{t} = {r:.6}\n"));
    }
    out.push_str("\n[config]\n");
    out.push_str(&cfg.echo());
    out
}

fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.echo().as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Expand the sweep (if any) into resolved per-variant configs.
fn variants(raw: &RawConfig) -> Result<Vec<(Option<usize>, ExperimentConfig)>> {
    let base = resolve(raw)?;
    match &base.sweep {
        None => Ok(vec![(None, base)]),
        Some((param, values)) => values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut r = raw.clone();
                r.set(param, v);
                let mut cfg = resolve(&r)?;
                cfg.sweep = base.sweep.clone();
                Ok((Some(i), cfg))
            })
            .collect(),
    }
}

/// Run every (variant, seed) job and write results under `out_dir`.
///
/// Output bytes depend only on the config, never on the thread count:
/// each job derives all randomness from its own seed.
pub fn run(raw: &RawConfig, opts: &RunOptions) -> Result<Vec<RunArtifacts>> {
    let variants = variants(raw)?;
    let jobs: Vec<(Option<usize>, &ExperimentConfig, u64)> = variants
        .iter()
        .flat_map(|(v, cfg)| cfg.seeds.iter().map(move |&s| (*v, cfg, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<RunArtifacts>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(variant, cfg, seed)| {
                let mut art = execute_run(cfg, seed)?;
                art.variant = variant;
                Ok(art)
            })
            .collect()
    });

    fs::create_dir_all(&opts.out_dir)
        .map_err(|e| Error::io(&opts.out_dir.display().to_string(), e))?;
    let mut artifacts = Vec::with_capacity(results.len());
    for (result, &(_, cfg, _)) in results.into_iter().zip(&jobs) {
        let mut art = result?;
        let mut name = format!("{}-s{}", config_hash(cfg), art.seed);
        if let Some(v) = art.variant {
            name.push_str(&format!("-v{v}"));
        }
        let dir = opts.out_dir.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir.display().to_string(), e))?;
        let csv_path = dir.join("rounds.csv");
        fs::write(&csv_path, rounds_csv(&art.records))
            .map_err(|e| Error::io(&csv_path.display().to_string(), e))?;
        let sum_path = dir.join("summary.txt");
        fs::write(&sum_path, summary_text(cfg, &art))
            .map_err(|e| Error::io(&sum_path.display().to_string(), e))?;
        art.dir = Some(dir);
        if !opts.quiet {
            println!(
                "{name}: clean {:.4}, backdoor {:.4}",
                art.summary.final_clean_acc, art.summary.final_backdoor_acc
            );
        }
        artifacts.push(art);
    }

    // Per-variant aggregate across seeds.
    for (variant, cfg) in &variants {
        let summaries: Vec<RunSummary> = artifacts
            .iter()
            .filter(|a| a.variant == *variant)
            .map(|a| a.summary.clone())
            .collect();
        if summaries.is_empty() {
            continue;
        }
        let agg = summarize_runs(&summaries);
        let mut text = format!("runs = {}\n", agg.runs);
        text.push_str(&format!(
            "final_clean_acc = {:.6} +/- {:.6}\n",
            agg.mean_final_clean_acc, agg.stderr_final_clean_acc
        ));
        text.push_str(&format!(
            "final_backdoor_acc = {:.6} +/- {:.6}\n",
            agg.mean_final_backdoor_acc, agg.stderr_final_backdoor_acc
        ));
        for &(t, r) in &agg.mean_success_ratios {
            text.push_str(&format!("success_ratio@{t} = {r:.6}\n"));
        }
        let mut name = format!("{}-aggregate", config_hash(cfg));
        if let Some(v) = variant {
            name.push_str(&format!("-v{v}"));
        }
        let path = opts.out_dir.join(format!("{name}.txt"));
        fs::write(&path, text).map_err(|e| Error::io(&path.display().to_string(), e))?;
    }

    Ok(artifacts)
}

/// Resolve a raw config and return a report: "ok" plus the full echo of
/// every resolved value.
pub fn validate(raw: &RawConfig) -> Result<String> {
    let cfg = resolve(raw)?;
    Ok(format!("ok\n\n{}", cfg.echo()))
}
