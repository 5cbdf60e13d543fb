//! Acceptance suite. Each criterion prints one PASS/FAIL line with the
//! measured quantity and its pinned tolerance; the process exits nonzero
//! if any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use eqlen_core::cli::{cmd_lab, cmd_train, LabProp, RunFlags};
use eqlen_core::gradcheck::{run_gradcheck, GradcheckConfig};
use eqlen_core::lab::{length_bias, run_efficiency, run_prop1, run_prop2, table2_identities, EfficiencyConfig, Prop1Instance, Prop2Instance};
use eqlen_core::optim::{
    dr_grpo_advantages, grpo_advantages, loss_eqlen_pair, loss_eqlen_rloo, loss_eqlen_total, rloo_advantages, AdvantageFamily,
    AdvantageSpec, PairLossOptions, SkipCounting,
};
use eqlen_core::rollout::check_dualtrack;
use eqlen_core::trainer::{default_questions, train, TrainConfig};
use eqlen_core::types::validate_pair;
use rand::Rng;

const ROLLOUT_CASES: u64 = 10_000;
const ROLLOUT_TIME_LIMIT: Duration = Duration::from_secs(60);
const GRADCHECK_TOL: f64 = 1e-6;
const PROP1_LRS: [f64; 3] = [1e-3, 1e-2, 1e-1];
const PROP2_STEPS: usize = 10_000;
const PROP2_TRIALS: usize = 100;
const PROP2_VARIANCE_TOL: f64 = 0.05;
const PROP2_SLOPE: (f64, f64) = (0.4, 0.6);
const PROP2_NEGATIVE_OFFSET: f64 = 0.1;
const EQUIVALENCE_PAIRS: usize = 1000;
const SCALING_TOL: f64 = 1e-12;
const LENGTH_BIAS_TOL: f64 = 1e-9;
const TABLE2_TOL: f64 = 1e-12;
const ADVANTAGE_VECTORS: usize = 10_000;
const ADVANTAGE_TOL: f64 = 1e-12;
const SMOKE_SEEDS: u64 = 5;
const SMOKE_WINDOW: usize = 10;

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn equal_length_invariant() -> Outcome {
    let start = Instant::now();
    let mut violations = 0usize;
    let mut pairs = 0usize;
    for seed in 0..ROLLOUT_CASES {
        let case = common::random_case(seed);
        if check_dualtrack(&case.rollout, case.policy.vocab()).is_err() {
            violations += 1;
        }
        for p in &case.rollout.pairs {
            pairs += 1;
            if !validate_pair(p) || p.seg_plus.len() != p.seg_minus.len() {
                violations += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        violations == 0 && elapsed < ROLLOUT_TIME_LIMIT,
        format!("{ROLLOUT_CASES} rollouts, {pairs} pairs, {violations} violations, {:.1}s (limit 60s)", elapsed.as_secs_f64()),
    )
}

fn gradient_oracle() -> Outcome {
    let clipped = GradcheckConfig::default();
    let unclipped = GradcheckConfig {
        epsilon_clip: None,
        ..GradcheckConfig::default()
    };
    let mut lines = Vec::new();
    let mut ok = true;
    for cfg in [&clipped, &unclipped] {
        let report = run_gradcheck(cfg).map_err(|e| e.to_string())?;
        for c in &report.cases {
            ok &= c.passed && c.instances >= 50 && c.max_rel_error <= GRADCHECK_TOL;
            lines.push(format!("{}={:.1e}", c.case.name(), c.max_rel_error));
        }
    }
    check(ok, format!("max rel error per loss (tol {GRADCHECK_TOL:e}, 50 instances, clipped then unclipped): {}", lines.join(" ")))
}

fn prefix_protection() -> Outcome {
    let inst = Prop1Instance::canonical();
    let mut ok = true;
    let mut parts = Vec::new();
    for lr in PROP1_LRS {
        let r = run_prop1(&inst, lr).map_err(|e| e.to_string())?;
        ok &= r.strictly_decreased && r.prefix_prob_grad_eqlen == 0.0 && r.first_pair_skipped;
        parts.push(format!(
            "lr={lr:e}: P(B1) {:.6} -> {:.6}, eqlen prefix grad {:e}",
            r.prefix_prob_before, r.prefix_prob_after_grpo, r.prefix_prob_grad_eqlen
        ));
    }
    check(ok, parts.join("; "))
}

fn prefix_drift() -> Outcome {
    let inst = Prop2Instance::canonical();
    let r = run_prop2(&inst, PROP2_STEPS, PROP2_TRIALS, 0).map_err(|e| e.to_string())?;
    let shifted = Prop2Instance::canonical().with_p(inst.nominal_p() + PROP2_NEGATIVE_OFFSET);
    let neg = run_prop2(&shifted, PROP2_STEPS, PROP2_TRIALS, 0).map_err(|e| e.to_string())?;
    let slope_ok = (PROP2_SLOPE.0..=PROP2_SLOPE.1).contains(&r.fitted_slope);
    check(
        r.mean_within_clt && r.variance_rel_error <= PROP2_VARIANCE_TOL && slope_ok && neg.negative_control && r.eqlen_drift_max == 0.0,
        format!(
            "T={PROP2_STEPS} trials={PROP2_TRIALS}: |mean|={:.2e} (bound {:.2e}), var rel err {:.4} (tol {PROP2_VARIANCE_TOL}), slope {:.3} (range {:?}), negative control flagged={}, eqlen drift {}",
            r.grad_mean_norm, r.clt_bound, r.variance_rel_error, r.fitted_slope, PROP2_SLOPE, neg.negative_control, r.eqlen_drift_max
        ),
    )
}

fn binary_equivalence() -> Outcome {
    let grpo = AdvantageSpec::new(AdvantageFamily::GrpoNorm).unclipped();
    let rloo = AdvantageSpec::new(AdvantageFamily::Rloo).unclipped();
    let opts = PairLossOptions::default();
    let (mut pairs, mut rollouts, mut mismatches) = (0usize, 0usize, 0usize);
    let mut seed = 0u64;
    while pairs < EQUIVALENCE_PAIRS {
        let case = common::random_case(1_000_000 + seed);
        seed += 1;
        let active: Vec<_> = case.rollout.pairs.iter().filter(|p| !p.skipped).collect();
        if active.is_empty() {
            continue;
        }
        let qid = case.rollout.question_id;
        for p in active {
            let a = loss_eqlen_pair(p, qid, &grpo, &case.policy, &case.policy, opts).map_err(|e| e.to_string())?;
            let b = loss_eqlen_pair(p, qid, &rloo, &case.policy, &case.policy, opts).map_err(|e| e.to_string())?;
            pairs += 1;
            if !a.grad.bitwise_eq(&b.grad) {
                mismatches += 1;
            }
        }
        let a = loss_eqlen_total(&case.rollout, &grpo, &case.policy, &case.policy, opts).map_err(|e| e.to_string())?;
        let b = loss_eqlen_rloo(&case.rollout, &rloo, &case.policy, &case.policy, opts).map_err(|e| e.to_string())?;
        rollouts += 1;
        if !a.grad.bitwise_eq(&b.grad) {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("{pairs} binary pairs over {rollouts} rollouts, {mismatches} gradients not bitwise equal"),
    )
}

fn scaling_neutrality() -> Outcome {
    let on = AdvantageSpec::new(AdvantageFamily::GrpoNorm);
    let off = on.with_length_norm(false);
    let opts = PairLossOptions::default();
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for seed in 0..2000u64 {
        let case = common::random_case(2_000_000 + seed);
        let mut r = common::rng(seed);
        let old = common::perturbed(&case.policy, &mut r, 0.05);
        for p in case.rollout.pairs.iter().filter(|p| !p.skipped) {
            let a = loss_eqlen_pair(p, case.rollout.question_id, &off, &case.policy, &old, opts).map_err(|e| e.to_string())?;
            let mut b = loss_eqlen_pair(p, case.rollout.question_id, &on, &case.policy, &old, opts).map_err(|e| e.to_string())?;
            b.grad.scale(p.length as f64);
            let scale = a.grad.max_abs();
            if scale > 0.0 {
                worst = worst.max(a.grad.max_abs_diff(&b.grad) / scale);
            }
            checked += 1;
        }
    }
    check(
        checked > 0 && worst <= SCALING_TOL,
        format!("{checked} pairs, max |off - L*on| / |off| = {worst:.2e} (tol {SCALING_TOL:e})"),
    )
}

fn skip_nullity() -> Outcome {
    let spec = AdvantageSpec::new(AdvantageFamily::GrpoNorm);
    let include = PairLossOptions::default();
    let exclude = PairLossOptions {
        skip_counting: SkipCounting::Exclude,
        ..PairLossOptions::default()
    };
    let (mut skipped, mut rollouts, mut failures) = (0usize, 0usize, 0usize);
    for seed in 0..2000u64 {
        let case = common::random_case(3_000_000 + seed);
        if !case.rollout.pairs.iter().any(|p| p.skipped) {
            continue;
        }
        let qid = case.rollout.question_id;
        for p in case.rollout.pairs.iter().filter(|p| p.skipped) {
            let out = loss_eqlen_pair(p, qid, &spec, &case.policy, &case.policy, include).map_err(|e| e.to_string())?;
            skipped += 1;
            if out.loss != 0.0 || !out.grad.is_zero() {
                failures += 1;
            }
        }
        let mut pruned = case.rollout.clone();
        pruned.pairs.retain(|p| !p.skipped);
        let full = loss_eqlen_total(&case.rollout, &spec, &case.policy, &case.policy, exclude).map_err(|e| e.to_string())?;
        let kept = loss_eqlen_total(&pruned, &spec, &case.policy, &case.policy, exclude).map_err(|e| e.to_string())?;
        rollouts += 1;
        if !full.grad.bitwise_eq(&kept.grad) {
            failures += 1;
        }
    }
    check(
        skipped > 0 && failures == 0,
        format!("{skipped} skipped pairs contribute zero; {rollouts} rollouts unchanged by removing them; {failures} failures"),
    )
}

fn length_bias_ratio() -> Outcome {
    let r = length_bias(50, 500).map_err(|e| e.to_string())?;
    check(
        (r.ratio - 10.0).abs() <= LENGTH_BIAS_TOL,
        format!("per-token ratio {:.12} (target 10, tol {LENGTH_BIAS_TOL:e})", r.ratio),
    )
}

fn efficiency_arithmetic() -> Outcome {
    let t = table2_identities();
    let table_ok = t.grpo_per_hour_rounded == 178.0
        && t.eqlen_per_hour_rounded == 1072.0
        && (t.ratio - 1072.0 / 178.0).abs() <= TABLE2_TOL;
    let cfg = EfficiencyConfig::default();
    let r = run_efficiency(&cfg, &cfg.policy(), &cfg.question_set()).map_err(|e| e.to_string())?;
    let (ratio, ci) = (r.samples_per_token_ratio.unwrap_or(f64::NAN), r.ratio_ci);
    let sim_ok = r.pairs_per_subgroup >= 1.0 && ratio > 0.0 && ci.is_some_and(|(lo, hi)| lo <= ratio && ratio <= hi);
    check(
        table_ok && sim_ok,
        format!(
            "table: {}/{} per hour, ratio {:.4}; simulated: {:.2} pairs/subgroup, samples-per-token ratio {:.3} CI {:?}",
            t.grpo_per_hour_rounded, t.eqlen_per_hour_rounded, t.ratio, r.pairs_per_subgroup, ratio, ci
        ),
    )
}

fn advantage_identities() -> Outcome {
    let mut r = common::rng(7);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    let (mut active, mut bad_sums) = (0usize, 0usize);
    for i in 0..ADVANTAGE_VECTORS {
        let n = r.gen_range(2..=16);
        let rewards: Vec<f64> = match i % 3 {
            0 => (0..n).map(|_| f64::from(r.gen_range(0..2u8))).collect(),
            1 => (0..n).map(|_| r.gen_range(-5.0..5.0)).collect(),
            _ => (0..n).map(|_| f64::from(r.gen_range(0..4u8)) * 0.25).collect(),
        };
        let g = grpo_advantages(&rewards);
        if g.active {
            active += 1;
            let m = g.advantages.iter().sum::<f64>() / n as f64;
            let var = g.advantages.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n as f64;
            worst_mean = worst_mean.max(m.abs());
            worst_std = worst_std.max((var.sqrt() - 1.0).abs());
        }
        if rloo_advantages(&rewards).iter().sum::<f64>() != 0.0 || dr_grpo_advantages(&rewards).iter().sum::<f64>() != 0.0 {
            bad_sums += 1;
        }
    }
    check(
        worst_mean <= ADVANTAGE_TOL && worst_std <= ADVANTAGE_TOL && bad_sums == 0,
        format!(
            "{ADVANTAGE_VECTORS} vectors ({active} active): max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e} (tol {ADVANTAGE_TOL:e}); {bad_sums} nonzero rloo/dr_grpo sums"
        ),
    )
}

fn differing_files(a: &Path, b: &Path) -> std::result::Result<Vec<String>, String> {
    let mut names: Vec<String> = fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut diff = Vec::new();
    for n in names {
        if fs::read(a.join(&n)).ok() != fs::read(b.join(&n)).ok() {
            diff.push(n);
        }
    }
    Ok(diff)
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let train_cfg = root.join("train.json");
    fs::write(
        &train_cfg,
        r#"{"schema_version": 1, "train": {"algorithm": "eqlen_grpo", "rollout": {"group_size": 8, "max_len": 16}, "lr": 100.0, "steps": 20, "seed": 3}, "questions": {"kind": "synthetic", "count": 16}}"#,
    )
    .map_err(|e| e.to_string())?;
    let lab_cfg = root.join("lab.json");
    fs::write(
        &lab_cfg,
        r#"{"schema_version": 1, "prop2": {"steps": 1000, "trials": 40}, "efficiency": {"questions": 100, "bootstrap_resamples": 200}}"#,
    )
    .map_err(|e| e.to_string())?;
    let flags = |name: &str| RunFlags {
        out: root.join(name),
        seed_override: None,
        deterministic_reduction: false,
    };
    let mut diffs = Vec::new();
    let train_a = flags("train_a");
    in_pool(1, || cmd_train(&train_cfg, &train_a)).map_err(|e| e.to_string())?;
    let train_b = flags("train_b");
    in_pool(4, || cmd_train(&train_a.out.join("manifest.json"), &train_b)).map_err(|e| e.to_string())?;
    diffs.extend(differing_files(&train_a.out, &train_b.out)?);
    for (prop, name) in [(LabProp::Prop1, "prop1"), (LabProp::Prop2, "prop2"), (LabProp::Efficiency, "efficiency")] {
        let a = flags(&format!("{name}_a"));
        let b = flags(&format!("{name}_b"));
        in_pool(1, || cmd_lab(prop, Some(&lab_cfg), &a)).map_err(|e| e.to_string())?;
        in_pool(4, || cmd_lab(prop, Some(&lab_cfg), &b)).map_err(|e| e.to_string())?;
        diffs.extend(differing_files(&a.out, &b.out)?.into_iter().map(|f| format!("{name}/{f}")));
    }
    check(
        diffs.is_empty(),
        format!("train re-run from manifest and three lab commands at 1 vs 4 threads; differing files: {diffs:?}"),
    )
}

fn smoke_learning() -> Outcome {
    let base = TrainConfig::default();
    let questions = default_questions(32, &base.policy, 0);
    let (mut start, mut end) = (0.0, 0.0);
    for seed in 0..SMOKE_SEEDS {
        let cfg = TrainConfig { seed, ..base.clone() };
        let out = train(&cfg, &questions, cfg.policy.uniform_policy().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        if out.abort.is_some() || out.metrics.len() != cfg.steps {
            return Err(format!("seed {seed} did not complete {} steps", cfg.steps));
        }
        start += out.metrics[0].mean_reward;
        let tail = &out.metrics[out.metrics.len() - SMOKE_WINDOW..];
        end += tail.iter().map(|m| m.mean_reward).sum::<f64>() / SMOKE_WINDOW as f64;
    }
    let (start, end) = (start / SMOKE_SEEDS as f64, end / SMOKE_SEEDS as f64);
    check(
        end > start,
        format!(
            "eqlen_grpo, {} steps, {SMOKE_SEEDS} seeds: uniform-policy reward {start:.4} -> last-{SMOKE_WINDOW}-step mean {end:.4}",
            base.steps
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("equal-length invariant over randomized rollouts", equal_length_invariant),
        ("analytic gradients match finite differences", gradient_oracle),
        ("masked prefix is protected while GRPO suppresses it", prefix_protection),
        ("unbiased prefix drift with sqrt(T) growth", prefix_drift),
        ("binary-reward GRPO and RLOO pair gradients coincide", binary_equivalence),
        ("length normalization rescales pair gradients by L", scaling_neutrality),
        ("skipped pairs contribute nothing", skip_nullity),
        ("per-token length bias ratio", length_bias_ratio),
        ("efficiency arithmetic and simulated analog", efficiency_arithmetic),
        ("advantage normalization identities", advantage_identities),
        ("byte-identical outputs on re-run", reproducibility),
        ("smoke training improves reward", smoke_learning),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:02} PASS [{secs:.1}s] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:02} FAIL [{secs:.1}s] {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
