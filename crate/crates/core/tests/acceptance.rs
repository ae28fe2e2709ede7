//! Acceptance suite. Each test prints one `acceptance: ... PASS/FAIL` line
//! (visible with `--nocapture`) and fails the build if its criterion does
//! not hold.
//!
//! The attack-scenario tests share one setup: synthetic corpus v=500, C=4,
//! n=4000, N=100 clients, m=10 per round, Dirichlet alpha=1, T=100 rounds,
//! position-decay pooling with triggers inserted at the sequence start.
//! Position-decay pooling gives early tokens the salience that attention
//! gives trigger words in full-scale models; under mean pooling a trigger's
//! influence is diluted by sequence length, which distorts every
//! attack-vs-defense comparison at this scale.

use std::collections::BTreeSet;
use std::time::Instant;

use fedsim::attack::ema_weights;
use fedsim::cli::{execute_run, resolve, RawConfig, RunArtifacts};
use fedsim::defense::{coord_median, multi_krum, norm_clip, weak_dp};
use fedsim::federation::{fixed_frequency_interval, schedule_adversary, ScheduleMode};
use fedsim::metrics::{success_ratio, RoundRecord};
use fedsim::model::{loss_and_grad, Delta, Example, ModelDims, ModelParams, Pooling};
use rand::Rng;

fn check(criterion: &str, pass: bool, detail: String) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("acceptance: {criterion}: {status} ({detail})");
    assert!(pass, "{criterion}: {detail}");
}

/// Common scenario config; the caller layers attack/defense keys on top.
fn scenario() -> RawConfig {
    let mut r = RawConfig::default();
    r.set("model.pooling", "position-decay");
    r.set("attack.position", "fixed:0");
    r
}

fn attacked(strategy: &str, epsilon: &str) -> RawConfig {
    let mut r = scenario();
    r.set("attack.strategy", strategy);
    r.set("attack.epsilon", epsilon);
    r
}

fn run_seed(raw: &RawConfig, seed: u64) -> RunArtifacts {
    execute_run(&resolve(raw).unwrap(), seed).unwrap()
}

fn mean_round_clean(art: &RunArtifacts) -> f64 {
    let s: f64 = art.records.iter().map(|r| r.clean_acc).sum();
    s / art.records.len() as f64
}

// Criterion 1: analytic gradients match central finite differences on 100
// random instances, in under 10 seconds.
#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let dims = ModelDims {
        vocab: 25,
        hidden: 4,
        classes: 3,
    };
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for instance in 0..100u64 {
        let mut rng = fedsim::rng::derive(instance, &[41]);
        let pooling = if instance % 2 == 0 {
            Pooling::Mean
        } else {
            Pooling::PositionDecay
        };
        let params = ModelParams::init(dims, pooling, &mut rng);
        let batch: Vec<Example> = (0..4)
            .map(|_| {
                let len = rng.gen_range(1..8);
                Example::new(
                    (0..len).map(|_| rng.gen_range(0..dims.vocab)).collect(),
                    rng.gen_range(0..dims.classes),
                )
            })
            .collect();
        let (_, grad) = loss_and_grad(&params, &batch).unwrap();

        let fd_at = |perturb: &dyn Fn(&mut ModelParams, f64)| -> f64 {
            let mut plus = params.clone();
            perturb(&mut plus, step);
            let mut minus = params.clone();
            perturb(&mut minus, -step);
            let (lp, _) = loss_and_grad(&plus, &batch).unwrap();
            let (lm, _) = loss_and_grad(&minus, &batch).unwrap();
            (lp - lm) / (2.0 * step)
        };
        let mut compare = |analytic: f64, fd: f64| {
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        };
        for r in 0..dims.vocab {
            for c in 0..dims.hidden {
                let fd = fd_at(&|p, h| p.embedding[[r, c]] += h);
                compare(grad.embedding[[r, c]], fd);
            }
        }
        for r in 0..dims.hidden {
            for c in 0..dims.classes {
                let fd = fd_at(&|p, h| p.head_weights[[r, c]] += h);
                compare(grad.head_weights[[r, c]], fd);
            }
        }
        for c in 0..dims.classes {
            let fd = fd_at(&|p, h| p.head_bias[c] += h);
            compare(grad.head_bias[c], fd);
        }
    }
    let elapsed = start.elapsed();
    check(
        "criterion 1 (gradient correctness)",
        worst < 1e-4 && elapsed.as_secs() < 10,
        format!("worst relative error {worst:.3e}, {elapsed:.2?}"),
    );
}

// Criterion 2: with no adversary and trigger tokens absent from the
// corpus, global trigger-embedding rows are bitwise constant.
#[test]
fn criterion_2_trigger_row_transparency() {
    let mut raw = scenario();
    raw.set("federation.rounds", "50");
    let art = run_seed(&raw, 1);

    let absent = art.trigger_counts.iter().all(|&c| c == 0);
    let constant = art.trigger_ids.iter().all(|&row| {
        art.init
            .embedding
            .row(row)
            .iter()
            .zip(art.global.embedding.row(row).iter())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    });
    check(
        "criterion 2 (trigger-row transparency)",
        absent && constant,
        format!(
            "trigger counts {:?}, rows bitwise constant over 50 rounds: {constant}",
            art.trigger_counts
        ),
    );
}

// Criterion 3: the rare-embedding attack at 1% adversary rate implants the
// backdoor without hurting clean accuracy, on at least 4 of 5 seeds.
#[test]
fn criterion_3_rare_embedding_efficacy() {
    let start = Instant::now();
    let baseline = scenario();
    let attack = attacked("rare-embedding", "0.01");
    let mut good = 0;
    let mut detail = String::new();
    for seed in 1..=5 {
        let base = run_seed(&baseline, seed);
        let att = run_seed(&attack, seed);
        let ok = att.summary.final_backdoor_acc >= 0.90
            && att.summary.final_clean_acc >= base.summary.final_clean_acc - 0.02;
        good += usize::from(ok);
        detail.push_str(&format!(
            "s{seed}: bd {:.3} clean {:.3}/{:.3}; ",
            att.summary.final_backdoor_acc,
            att.summary.final_clean_acc,
            base.summary.final_clean_acc
        ));
    }
    let elapsed = start.elapsed();
    check(
        "criterion 3 (rare-embedding efficacy)",
        good >= 4 && elapsed.as_secs() < 300,
        format!("{good}/5 seeds, {elapsed:.1?}; {detail}"),
    );
}

// Criterion 4: gradient ensembling does not hurt, and typically helps, in
// a hardened setting (fewer backdoor steps, rarer adversary rounds).
#[test]
fn criterion_4_gradient_ensembling_improvement() {
    let harden = |strategy: &str| {
        let mut r = attacked(strategy, "0.005");
        r.set("attack.backdoor_steps", "100");
        r
    };
    let re_raw = harden("rare-embedding");
    let ge_raw = harden("rare-embedding+ge");
    let mut re_sum = 0.0;
    let mut ge_sum = 0.0;
    for seed in 1..=10 {
        re_sum += run_seed(&re_raw, seed).summary.final_backdoor_acc;
        ge_sum += run_seed(&ge_raw, seed).summary.final_backdoor_acc;
    }
    let (re_mean, ge_mean) = (re_sum / 10.0, ge_sum / 10.0);
    check(
        "criterion 4 (gradient ensembling >= plain)",
        ge_mean >= re_mean,
        format!("GE mean {ge_mean:.4} vs RE mean {re_mean:.4} over 10 paired seeds"),
    );
}

// Criterion 5: updating the entire embedding matrix during backdoor
// training costs clean accuracy relative to the rare-row attack. Measured
// on a harder corpus (lower skew, shorter sequences) where clean accuracy
// is not saturated, with an aggressive backdoor budget for both attacks.
#[test]
fn criterion_5_entire_embedding_degradation() {
    let setup = |strategy: &str| {
        let mut r = RawConfig::default();
        r.set("data.skew", "0.5");
        r.set("data.seq_len", "8");
        r.set("attack.strategy", strategy);
        r.set("attack.epsilon", "0.05");
        r.set("attack.backdoor_lr", "2.0");
        r.set("attack.early_stop_acc", "1.0");
        r
    };
    let re_raw = setup("rare-embedding");
    let ee_raw = setup("entire-embedding");
    let mut re_sum = 0.0;
    let mut ee_sum = 0.0;
    for seed in 1..=5 {
        re_sum += run_seed(&re_raw, seed).summary.final_clean_acc;
        ee_sum += run_seed(&ee_raw, seed).summary.final_clean_acc;
    }
    let (re_mean, ee_mean) = (re_sum / 5.0, ee_sum / 5.0);
    check(
        "criterion 5 (entire-embedding clean degradation)",
        ee_mean < re_mean,
        format!("entire-embedding clean {ee_mean:.4} vs rare-embedding {re_mean:.4}"),
    );
}

// Criterion 6: fixed-frequency scheduling is exact.
#[test]
fn criterion_6_scheduling_math() {
    let mut rng = fedsim::rng::derive(1, &[5]);
    let sched_1pct =
        schedule_adversary(ScheduleMode::FixedFrequency, 0.01, 10, 100, &mut rng).unwrap();
    let sched_half =
        schedule_adversary(ScheduleMode::FixedFrequency, 0.005, 10, 100, &mut rng).unwrap();
    let want_1pct: Vec<usize> = (1..=10).map(|k| 10 * k).collect();
    let want_half: Vec<usize> = (1..=5).map(|k| 20 * k).collect();
    let pass = sched_1pct.adversary_rounds() == want_1pct
        && sched_half.adversary_rounds() == want_half
        && fixed_frequency_interval(0.01, 10) == 10
        && fixed_frequency_interval(0.005, 10) == 20;
    check(
        "criterion 6 (scheduling math)",
        pass,
        format!(
            "eps=1% rounds {:?}..., eps=0.5% rounds {:?}...",
            &sched_1pct.adversary_rounds()[..3.min(sched_1pct.adversary_rounds().len())],
            &sched_half.adversary_rounds()[..3.min(sched_half.adversary_rounds().len())]
        ),
    );
}

// Criterion 7: defense primitives match brute-force oracles.
#[test]
fn criterion_7_defense_oracles() {
    let dims = ModelDims {
        vocab: 5,
        hidden: 3,
        classes: 2,
    };
    let coords = dims.vocab * dims.hidden + dims.hidden * dims.classes + dims.classes;
    let random_delta = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut d = Delta::zeros(dims);
        for x in d
            .embedding
            .iter_mut()
            .chain(d.head_weights.iter_mut())
            .chain(d.head_bias.iter_mut())
        {
            *x = rng.gen_range(-2.0..2.0);
        }
        d
    };
    let flatten = |d: &Delta| -> Vec<f64> {
        d.embedding
            .iter()
            .chain(d.head_weights.iter())
            .chain(d.head_bias.iter())
            .copied()
            .collect()
    };

    let mut worst_median: f64 = 0.0;
    let mut krum_mismatches = 0;
    let mut clip_violations = 0;
    for instance in 0..100u64 {
        let mut rng = fedsim::rng::derive(instance, &[42]);
        let n = rng.gen_range(4..10);
        let deltas: Vec<Delta> = (0..n).map(|_| random_delta(&mut rng)).collect();
        let refs: Vec<&Delta> = deltas.iter().collect();

        // Coordinate median vs per-coordinate sort.
        let med = flatten(&coord_median(&refs, false).unwrap());
        for i in 0..coords {
            let mut vals: Vec<f64> = deltas.iter().map(|d| flatten(d)[i]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want = if n % 2 == 1 {
                vals[n / 2]
            } else {
                (vals[n / 2 - 1] + vals[n / 2]) / 2.0
            };
            worst_median = worst_median.max((med[i] - want).abs());
        }

        // Multi-Krum vs all-pairs scoring.
        let f_byz = 1;
        let k = rng.gen_range(1..=n - f_byz - 2);
        let (_, selected) = multi_krum(&refs, f_byz, k).unwrap();
        let mut scores: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let mut ds: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        flatten(&deltas[i])
                            .iter()
                            .zip(flatten(&deltas[j]))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum()
                    })
                    .collect();
                ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
                (ds[..n - f_byz - 2].iter().sum(), i)
            })
            .collect();
        scores.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let want: BTreeSet<usize> = scores[..k].iter().map(|&(_, i)| i).collect();
        if selected.iter().copied().collect::<BTreeSet<_>>() != want {
            krum_mismatches += 1;
        }

        // Clipping bound.
        let radius = rng.gen_range(0.01..5.0);
        let mut clipped = deltas[0].clone();
        norm_clip(&mut clipped, radius, false);
        if clipped.l2_norm() > radius + 1e-9 && clipped.l2_norm() > deltas[0].l2_norm() {
            clip_violations += 1;
        }
        if clipped.l2_norm() > radius.max(0.0) + 1e-9 && deltas[0].l2_norm() > radius {
            clip_violations += 1;
        }
    }

    // Weak-DP noise scale, Monte-Carlo.
    let sigma = 5e-4;
    let mut rng = fedsim::rng::derive(7, &[43]);
    let mut samples = Vec::with_capacity(120_000);
    while samples.len() < 120_000 {
        let mut d = Delta::zeros(dims);
        weak_dp(&mut d, 0.5, sigma, &mut rng);
        samples.extend(flatten(&d));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std =
        (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let sigma_err = (std - sigma).abs() / sigma;

    check(
        "criterion 7 (defense oracles)",
        worst_median <= 1e-9 && krum_mismatches == 0 && clip_violations == 0 && sigma_err < 0.05,
        format!(
            "median err {worst_median:.2e}, krum mismatches {krum_mismatches}, \
             clip violations {clip_violations}, dp sigma err {:.2}%",
            sigma_err * 100.0
        ),
    );
}

// Criterion 8: coordinate median neutralizes the attack with little clean
// cost, on all 5 seeds.
#[test]
fn criterion_8_coord_median_neutralization() {
    let baseline = scenario();
    let mut defended = attacked("rare-embedding", "0.01");
    defended.set("defense.kind", "coord-median");
    let mut good = 0;
    let mut detail = String::new();
    for seed in 1..=5 {
        let base = run_seed(&baseline, seed);
        let def = run_seed(&defended, seed);
        let ok = def.summary.final_backdoor_acc <= 0.25
            && def.summary.final_clean_acc >= base.summary.final_clean_acc - 0.03;
        good += usize::from(ok);
        detail.push_str(&format!(
            "s{seed}: bd {:.3} clean {:.3}; ",
            def.summary.final_backdoor_acc, def.summary.final_clean_acc
        ));
    }
    check(
        "criterion 8 (coord-median neutralization)",
        good == 5,
        format!("{good}/5 seeds; {detail}"),
    );
}

// Criterion 9: the attack survives norm clipping at the clip radius a
// defender would pick. The radius is selected on a benign run as the
// smallest grid value whose round-averaged clean accuracy stays within 1
// point of the unclipped baseline; final accuracy alone never drops at
// this scale (scaling preserves the update direction), so the averaged
// curve is what measures the defense's cost to the main task.
#[test]
fn criterion_9_norm_clip_survival() {
    let baseline_raw = scenario();
    let baseline_mean = mean_round_clean(&run_seed(&baseline_raw, 1));

    let grid = [0.25, 0.5, 1.0, 2.0, 4.0];
    let mut selected = None;
    for &delta in &grid {
        let mut r = scenario();
        r.set("defense.kind", "norm-clip");
        r.set("defense.delta", &format!("{delta}"));
        let clipped_mean = mean_round_clean(&run_seed(&r, 1));
        if clipped_mean >= baseline_mean - 0.01 {
            selected = Some(delta);
            break;
        }
    }
    let delta = selected.expect("some grid radius must preserve clean accuracy");

    let undefended_raw = attacked("rare-embedding", "0.01");
    let mut defended_raw = undefended_raw.clone();
    defended_raw.set("defense.kind", "norm-clip");
    defended_raw.set("defense.delta", &format!("{delta}"));
    let mut good = 0;
    let mut detail = format!("selected delta {delta}; ");
    for seed in 1..=5 {
        let und = run_seed(&undefended_raw, seed).summary.final_backdoor_acc;
        let def = run_seed(&defended_raw, seed).summary.final_backdoor_acc;
        let ok = def >= 0.8 * und;
        good += usize::from(ok);
        detail.push_str(&format!("s{seed}: {def:.3} vs 0.8x{und:.3}; "));
    }
    check(
        "criterion 9 (norm-clip survival)",
        good >= 4,
        format!("{good}/5 seeds; {detail}"),
    );
}

// Criterion 10: the accuracy-checking defense never rejects anything on
// adversary rounds — the poisoned model's clean accuracy is untouched.
#[test]
fn criterion_10_accuracy_check_blindness() {
    let mut raw = attacked("rare-embedding", "0.01");
    raw.set("defense.kind", "accuracy-check");
    let mut adversary_rounds = 0;
    let mut rejected_rounds = 0;
    for seed in 1..=5 {
        let art = run_seed(&raw, seed);
        for r in &art.records {
            if r.adversary_round {
                adversary_rounds += 1;
                rejected_rounds += usize::from(r.defense_rejections > 0);
            }
        }
    }
    check(
        "criterion 10 (accuracy-check blindness)",
        adversary_rounds == 50 && rejected_rounds == 0,
        format!("{rejected_rounds} of {adversary_rounds} adversary rounds saw a rejection"),
    );
}

// Criterion 11: the binary writes byte-identical CSVs across repeat runs
// and thread counts.
#[test]
fn criterion_11_determinism() {
    use std::process::Command;
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("det.cfg");
    std::fs::write(
        &cfg,
        "\
data.vocab = 200
data.classes = 3
data.examples = 600
federation.clients = 20
federation.clients_per_round = 5
federation.rounds = 8
federation.client_steps = 5
model.hidden = 8
attack.strategy = rare-embedding
attack.epsilon = 0.1
attack.backdoor_steps = 20
defense.kind = weak-dp
seeds = 1, 2, 3
",
    )
    .unwrap();

    let mut snapshots = Vec::new();
    for (i, threads) in ["1", "4", "1"].iter().enumerate() {
        let out_dir = dir.path().join(format!("out{i}"));
        let status = Command::new(env!("CARGO_BIN_EXE_fedsim"))
            .args(["run"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out_dir)
            .args(["--threads", threads, "--quiet"])
            .status()
            .unwrap();
        assert!(status.success());
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_dir())
            .map(|p| {
                (
                    p.file_name().unwrap().to_str().unwrap().to_string(),
                    std::fs::read(p.join("rounds.csv")).unwrap(),
                )
            })
            .collect();
        files.sort();
        snapshots.push(files);
    }
    let pass = snapshots[0] == snapshots[1] && snapshots[0] == snapshots[2];
    check(
        "criterion 11 (determinism)",
        pass,
        format!(
            "{} run dirs, identical across threads=1/4 and repeat: {pass}",
            snapshots[0].len()
        ),
    );
}

// Criterion 12: metric definitions are exact.
#[test]
fn criterion_12_metric_units() {
    let records: Vec<RoundRecord> = [0.9, 0.5, 0.95]
        .iter()
        .enumerate()
        .map(|(i, &a)| RoundRecord {
            round: i + 1,
            clean_acc: 1.0,
            backdoor_acc: a,
            adversary_round: false,
            defense_rejections: 0,
        })
        .collect();
    let ratio = success_ratio(&records, 0.8);
    let weights = ema_weights(0.5, 3);
    let pass = ratio == 2.0 / 3.0 && weights == vec![0.5, 0.25, 0.25];
    check(
        "criterion 12 (metric units)",
        pass,
        format!("success_ratio {ratio} (want {}), weights {weights:?}", 2.0 / 3.0),
    );
}
