//! Runs the acceptance criteria end to end and prints one line per criterion.
//!
//! Set `RAPL_ACCEPTANCE_STRICT=1` to turn any failed line into a non-zero exit.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rapl_core::cluster::{assignment_cost, clustering_accuracy, hungarian, Protocol};
use rapl_core::cra::build_grouping;
use rapl_core::numerics::Tensor;
use rapl_core::pipeline::experiment::{write_losses, write_metrics};
use rapl_core::pipeline::{
    ablation_variants, gradcheck_suite, run_experiment, run_to_dir, ExperimentConfig, Phase, PhaseState,
    RunCheckpoint, RunOptions, RunOutcome, StopPoint,
};
use rapl_core::proxy::{indicator_softmax, masked_selection, selection_support, topk_negative_mask};
use rapl_core::synth::generate;

const SEEDS: u64 = 5;

struct Line {
    id: usize,
    pass: bool,
    detail: String,
}

fn line(id: usize, pass: bool, detail: impl Into<String>) -> Line {
    let l = Line {
        id,
        pass,
        detail: detail.into(),
    };
    println!("criterion {:>2}: {}  {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    l
}

fn gradient_oracles() -> Line {
    let start = Instant::now();
    let reports = match gradcheck_suite(3, 1e-4) {
        Ok(r) => r,
        Err(e) => return line(1, false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let mut per_op: Vec<(String, usize, f64)> = Vec::new();
    for r in &reports {
        match per_op.iter_mut().find(|(n, _, _)| *n == r.op_name) {
            Some(e) => {
                e.1 += usize::from(r.passed);
                e.2 = e.2.max(r.max_rel_err);
            }
            None => per_op.push((r.op_name.clone(), usize::from(r.passed), r.max_rel_err)),
        }
    }
    let required = ["cra", "pc", "reg", "pcl", "encode+project"];
    let covered = required
        .iter()
        .all(|op| per_op.iter().any(|(n, passed, _)| n == op && *passed >= 3));
    let all_passed = reports.iter().all(|r| r.passed);
    let summary: Vec<String> = per_op
        .iter()
        .map(|(n, p, e)| format!("{n} {p}/3 rel {e:.1e}"))
        .collect();
    line(
        1,
        covered && all_passed && secs < 120.0,
        format!("{}; {secs:.1}s", summary.join(", ")),
    )
}

fn brute_force_min(cost: &Tensor, k: usize) -> f64 {
    fn permute(prefix: &mut Vec<usize>, used: &mut [bool], cost: &Tensor, best: &mut f64) {
        let k = used.len();
        if prefix.len() == k {
            *best = best.min(assignment_cost(cost, prefix));
            return;
        }
        for c in 0..k {
            if !used[c] {
                used[c] = true;
                prefix.push(c);
                permute(prefix, used, cost, best);
                prefix.pop();
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    permute(&mut Vec::new(), &mut vec![false; k], cost, &mut best);
    best
}

fn hungarian_oracle() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for trial in 0..100 {
        let k = 1 + trial % 6;
        // half integer costs (ties are common), half continuous
        let data: Vec<f64> = (0..k * k)
            .map(|_| {
                if trial % 2 == 0 {
                    rng.gen_range(0..10) as f64
                } else {
                    rng.gen_range(-5.0..5.0)
                }
            })
            .collect();
        let cost = Tensor::new(vec![k, k], data).unwrap();
        let got = assignment_cost(&cost, &hungarian(&cost).unwrap());
        if got != brute_force_min(&cost, k) {
            mismatches += 1;
        }
    }
    line(2, mismatches == 0, format!("{mismatches}/100 mismatches against exhaustive search"))
}

fn grouping_reproduction() -> Line {
    let g = build_grouping(2048, 14, 14).unwrap();
    let expected: Vec<usize> = std::iter::repeat(10).take(108).chain(std::iter::repeat(11).take(88)).collect();
    let ok = g.group_sizes == expected && g.group_of_channel.len() == 2048;
    let tens = g.group_sizes.iter().take_while(|&&s| s == 10).count();
    line(3, ok, format!("{tens} groups of 10, then {} of 11", g.group_sizes.len() - tens))
}

fn mask_softmax_contracts() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = 0;
    let mut worst_sum = 0.0f64;
    for _ in 0..1000 {
        let c = rng.gen_range(2..24);
        let k = rng.gen_range(1..c);
        let row: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let label = rng.gen_range(0..c);
        let s = Tensor::new(vec![1, c], row).unwrap();
        let mask = topk_negative_mask(&s, &[label], k).unwrap();
        let ones = mask.data().iter().filter(|&&m| m == 1.0).count();
        let binary = mask.data().iter().all(|&m| m == 0.0 || m == 1.0);
        let y_bar = masked_selection(&s, &mask, &[label]).unwrap();
        let support = selection_support(&mask, &[label]);
        let p = indicator_softmax(&y_bar, &support).unwrap();
        let sum: f64 = p.data().iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        let zeros_off = p.data().iter().zip(&support).all(|(&v, &on)| on || v == 0.0);
        if ones != k || !binary || mask.data()[label] != 0.0 || (sum - 1.0).abs() > 1e-12 || !zeros_off {
            bad += 1;
        }
    }
    line(4, bad == 0, format!("{bad}/1000 bad rows; worst |sum-1| {worst_sum:.1e}"))
}

/// Discover-phase PC rises over the first third, then ends below that peak.
fn pc_rises_then_falls(out: &RunOutcome) -> (bool, String) {
    let pc: Vec<f64> = out
        .losses
        .iter()
        .filter(|r| r.phase == Phase::Discover)
        .map(|r| r.losses.pc)
        .collect();
    if pc.len() < 3 {
        return (false, "too few discover epochs".into());
    }
    let third = pc.len().div_ceil(3);
    let peak = pc[..third].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let last = pc[pc.len() - 1];
    (
        peak > pc[0] && last < peak,
        format!("{:.3}->{peak:.3}->{last:.3}", pc[0]),
    )
}

fn task_agnostic_all(out: &RunOutcome) -> f64 {
    out.final_report(Protocol::TaskAgnostic).map_or(f64::NAN, |r| r.acc_all)
}

/// Criteria 5, 7 and 9 share the full-method runs.
fn benchmark() -> Vec<Line> {
    let base = ExperimentConfig::default();
    let variants = ablation_variants(&base);
    let pick = |name: &str| variants.iter().find(|(n, _)| n == name).unwrap().1.clone();
    let (full, no_cra, vcl) = (pick("full"), pick("no-cra"), pick("vcl"));

    let mut acc = [0.0f64; 3];
    let mut slowest = 0.0f64;
    let mut curves = Vec::new();
    let mut curves_ok = true;
    let mut freeze_ok = true;
    let mut discover_steps = 0usize;
    for seed in 0..SEEDS {
        let cfg = full.clone().with_seed(seed);
        let ds = generate(&cfg.data).unwrap();
        let mut frozen: Option<Vec<u64>> = None;
        let mut steps = 0usize;
        let mut violations = 0usize;
        let mut watch = |s: &PhaseState| match s.phase {
            Phase::Pretrain => frozen = Some(s.bank.old_proxies.to_bits()),
            Phase::Discover => {
                steps += 1;
                if frozen.as_ref() != Some(&s.bank.old_proxies.to_bits()) {
                    violations += 1;
                }
            }
        };
        let start = Instant::now();
        let out = run_experiment(
            &cfg,
            &ds,
            RunOptions {
                on_step: Some(&mut watch),
                ..Default::default()
            },
        )
        .unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        freeze_ok &= violations == 0 && steps > 0;
        discover_steps += steps;
        let (ok, desc) = pc_rises_then_falls(&out);
        curves_ok &= ok;
        curves.push(desc);
        acc[0] += task_agnostic_all(&out) / SEEDS as f64;

        for (i, c) in [&no_cra, &vcl].into_iter().enumerate() {
            let cfg = c.clone().with_seed(seed);
            let out = run_experiment(&cfg, &ds, RunOptions::default()).unwrap();
            acc[i + 1] += task_agnostic_all(&out) / SEEDS as f64;
        }
    }
    let margin_cra = 100.0 * (acc[0] - acc[1]);
    let margin_vcl = 100.0 * (acc[0] - acc[2]);
    vec![
        line(
            5,
            margin_cra >= 5.0 && margin_vcl >= 5.0 && slowest <= 900.0,
            format!(
                "full {:.4}, no-cra {:.4} ({margin_cra:+.1} pts), vcl {:.4} ({margin_vcl:+.1} pts); slowest seed {slowest:.0}s",
                acc[0], acc[1], acc[2]
            ),
        ),
        line(7, curves_ok, format!("discover PC per seed: {}", curves.join(", "))),
        line(
            9,
            freeze_ok,
            format!("old proxies unchanged over {discover_steps} discover steps ({SEEDS} runs)"),
        ),
    ]
}

/// Expected accuracy of uniformly random cluster ids after optimal matching.
fn random_label_accuracy(per_class: usize, k: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat(c).take(per_class)).collect();
    let trials = 500;
    (0..trials)
        .map(|_| {
            let y_hat: Vec<usize> = y.iter().map(|_| rng.gen_range(0..k)).collect();
            clustering_accuracy(&y, &y_hat, k).unwrap().acc
        })
        .sum::<f64>()
        / trials as f64
}

fn no_signal_acc_new(cfg: &ExperimentConfig) -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let cfg = cfg.clone().with_seed(seed);
            let ds = generate(&cfg.data).unwrap();
            let out = run_experiment(&cfg, &ds, RunOptions::default()).unwrap();
            let r = out.final_report(Protocol::TaskAware).unwrap();
            r.acc_new.unwrap_or(r.acc_all) / SEEDS as f64
        })
        .sum()
}

/// Judged with 40 training samples per class: at the default 12, even
/// random labels score about 0.235 after matching, above the bound.
fn no_signal_floor() -> Line {
    let mut cfg = ExperimentConfig::default();
    cfg.data.class_signal_strength = 0.0;
    let k = cfg.data.num_new;
    let bound = 1.0 / k as f64 + 0.10;
    let small = no_signal_acc_new(&cfg);
    let small_chance = random_label_accuracy(cfg.data.train_per_class, k);
    cfg.data.train_per_class = 40;
    let large = no_signal_acc_new(&cfg);
    let large_chance = random_label_accuracy(40, k);
    line(
        6,
        large <= bound,
        format!(
            "mean task-aware acc_new {large:.4} at 40/class (random labels {large_chance:.3}), bound {bound:.2}; \
             at {}/class {small:.4} (random labels {small_chance:.3})",
            ExperimentConfig::default().data.train_per_class
        ),
    )
}

fn determinism_and_resume() -> Line {
    let cfg = ExperimentConfig::default().with_seed(7);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let first = run_to_dir(&cfg, &a, RunOptions::default()).unwrap();
    run_to_dir(&cfg, &b, RunOptions::default()).unwrap();
    let files = ["metrics.csv", "metrics.json", "losses.csv", "saliency.json"];
    let same = |x: &std::path::Path, y: &std::path::Path, f: &str| {
        std::fs::read(x.join(f)).ok().is_some_and(|bytes| std::fs::read(y.join(f)).ok() == Some(bytes))
    };
    let identical = files.iter().filter(|f| same(&a, &b, f)).count();

    let stop = StopPoint {
        phase: Phase::Discover,
        epoch: cfg.train.discover_epochs / 2,
    };
    let halted = run_to_dir(
        &cfg,
        &c,
        RunOptions {
            stop: Some(stop),
            ..Default::default()
        },
    )
    .unwrap();
    let name = format!("{}-epoch{:03}.json", stop.phase, stop.epoch);
    let ckpt = RunCheckpoint::load(&c.join("checkpoints").join(name)).unwrap();
    let ds = generate(&cfg.data).unwrap();
    let resumed = run_experiment(
        &cfg,
        &ds,
        RunOptions {
            resume: Some(ckpt),
            ..Default::default()
        },
    )
    .unwrap();
    write_metrics(&c, &resumed.metrics).unwrap();
    write_losses(&c, &resumed.losses).unwrap();
    let resume_ok = !halted.completed
        && resumed.state == first.state
        && same(&a, &c, "metrics.csv")
        && same(&a, &c, "losses.csv");
    line(
        8,
        identical == files.len() && resume_ok,
        format!(
            "{identical}/{} files byte-identical; resume at {}:{} {}",
            files.len(),
            stop.phase,
            stop.epoch,
            if resume_ok { "bit-exact" } else { "diverged" }
        ),
    )
}

fn relabel_invariance() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut bad = 0;
    for _ in 0..100 {
        let k = rng.gen_range(2..12);
        let n = rng.gen_range(1..200);
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let y_hat: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let mut pi: Vec<usize> = (0..k).collect();
        pi.shuffle(&mut rng);
        let relabeled: Vec<usize> = y_hat.iter().map(|&c| pi[c]).collect();
        let a = clustering_accuracy(&y, &y_hat, k).unwrap().acc;
        let b = clustering_accuracy(&y, &relabeled, k).unwrap().acc;
        if a.to_bits() != b.to_bits() {
            bad += 1;
        }
    }
    line(10, bad == 0, format!("{bad}/100 pairs changed under relabeling"))
}

fn main() {
    // the libtest flags cargo forwards (e.g. --list) have no meaning here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let mut lines = vec![
        gradient_oracles(),
        hungarian_oracle(),
        grouping_reproduction(),
        mask_softmax_contracts(),
        relabel_invariance(),
        determinism_and_resume(),
        no_signal_floor(),
    ];
    lines.extend(benchmark());
    lines.sort_by_key(|l| l.id);

    let failed: Vec<usize> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    println!(
        "\nacceptance: {}/{} criteria passed in {:.0}s",
        lines.len() - failed.len(),
        lines.len(),
        start.elapsed().as_secs_f64()
    );
    for l in &lines {
        println!("  {:>2} {}", l.id, if l.pass { "pass" } else { "FAIL" });
    }
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        if std::env::var_os("RAPL_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
