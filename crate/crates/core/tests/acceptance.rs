//! One line per acceptance criterion, `[PASS]` or `[FAIL]`, with the measured
//! quantity. Run with `--nocapture` to see them.
//!
//! Criteria 6 to 9 train full desk-scale policies (hours of CPU each) and are
//! `#[ignore]`d. Their results accumulate under `$DOCIR_LAB_DATA/acceptance`
//! and are resumable; the default run reports whatever has been recorded
//! there and prints `NOT RUN` for the rest.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use docir_lab::disentangle::{ablation_stacks, docir_stacks, make_group_spec, overlay, Ablation};
use docir_lab::harness::{
    self, data_root, interest_set, ood_suite, read_manifest, run_suite, Cell, LocalRunner,
    ManifestEntry, OodReport, RunConfig, SuitePlan, MANIFEST_FILE,
};
use docir_lab::imaging::{foreground, BinaryMask, Frame, WHITE};
use docir_lab::policy::{Policy, PolicySpec};
use docir_lab::ppo::{self, gae, PointReach, PpoHypers, TrainConfig};
use docir_lab::simworld::{
    self, add_distractors, observe, scripted_pick_action, step_state, Action, SceneConfig, Task,
    Variant,
};
use docir_lab::disentangle::ReprKind;
use rand::Rng;

use common::{cases, report, rng, CONV_TOL, FD_REL_TOL};

// Tolerances and budgets, fixed here rather than derived from runs.
const PARTITION_SCENES: usize = 1000;
const PARTITION_SECS: f64 = 30.0;
const AUTODIFF_SECS: f64 = 120.0;
const GAE_SEQUENCES: usize = 200;
const GAE_MAX_T: usize = 16;
const GAE_TOL: f64 = 1e-10;
const SMOKE_STEPS: u64 = 300_000;
const SMOKE_SUCCESS: f64 = 0.90;
const SMOKE_EPISODES: usize = 100;
const SKILL_SUCCESS: f64 = 0.70;
const OCR_MARGIN: f64 = 0.15;
const FLAT_MARGIN: f64 = 0.30;
const ABLATION_NEAR: f64 = 0.15;
const ABLATION_C_GAP: f64 = 0.30;
const OOD_RETENTION: f64 = 0.70;
const OOD_DISTRACTORS: usize = 3;
const REPRO_STEPS: u64 = 12_288;
const REPRO_COMPARED_STEPS: u64 = 10_000;

fn mask_of(stack: &docir_lab::imaging::MaskedStack) -> BinaryMask {
    stack.mask()
}

/// A scene after a random mix of scripted and random actions, so carried
/// cubes, occlusions and displaced objects all show up.
fn random_scene(seed: u64) -> (simworld::SceneState, SceneConfig) {
    let mut r = rng(seed);
    let objects = [3, 5, 7, 9][r.gen_range(0..4)];
    let (c, p) = SceneConfig::object_counts(objects).unwrap();
    let variant = if r.gen_bool(0.5) { Variant::FixedTarget } else { Variant::VaryingTarget };
    let mut config = SceneConfig::new(c, p, variant).with_resolution(r.gen_range(24..=64));
    if r.gen_bool(0.25) {
        config = add_distractors(&config, r.gen_range(1..=3));
    }
    let (mut state, _) = simworld::reset(&config, r.gen(), Task::Pick, None).unwrap();
    for _ in 0..r.gen_range(0..40) {
        let a = if r.gen_bool(0.7) {
            scripted_pick_action(&state, &config.geometry)
        } else {
            Action::new([r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)], r.gen_bool(0.5))
        };
        state = step_state(&state, &a, &config.geometry).0;
    }
    (state, config)
}

fn bits_sum(masks: &[BinaryMask]) -> Vec<u8> {
    let mut s = vec![0u8; masks[0].bits.len()];
    for m in masks {
        for (a, b) in s.iter_mut().zip(&m.bits) {
            *a += b;
        }
    }
    s
}

/// Checks one frame; returns a description of the first violation.
fn check_docir_frame(frame: &Frame, spec: &docir_lab::disentangle::GroupSpec) -> Result<(), String> {
    let stacks = docir_stacks(frame, spec).map_err(|e| e.to_string())?;
    let fg = foreground(&frame.ids);
    let masks: Vec<BinaryMask> = stacks.iter().map(mask_of).collect();
    if bits_sum(&masks) != fg.bits {
        return Err("mask sum differs from foreground".into());
    }
    let (img, cover) = overlay(&stacks).map_err(|e| e.to_string())?;
    if cover != fg.bits {
        return Err("overlay coverage differs from foreground".into());
    }
    let w = frame.width();
    for p in 0..fg.bits.len() {
        let (r, c) = (p / w, p % w);
        let want = if fg.bits[p] == 1 { frame.rgb.pixel(r, c) } else { WHITE };
        if img.pixel(r, c) != want {
            return Err(format!("overlay pixel ({r},{c}) differs"));
        }
    }
    Ok(())
}

fn check_ablation_frame(frame: &Frame, spec: &docir_lab::disentangle::GroupSpec) -> Result<(), String> {
    let fg = foreground(&frame.ids);
    let docir_robot = mask_of(&docir_stacks(frame, spec).map_err(|e| e.to_string())?[0]);
    for v in [Ablation::A, Ablation::B, Ablation::C] {
        let stacks = ablation_stacks(frame, spec, v).map_err(|e| e.to_string())?;
        let masks: Vec<BinaryMask> = stacks.iter().map(mask_of).collect();
        if bits_sum(&masks) != fg.bits {
            return Err(format!("variant {v:?} masks do not partition the foreground"));
        }
        if v == Ablation::C && masks[1] != docir_robot {
            return Err("variant C robot mask differs from DOCIR".into());
        }
    }
    Ok(())
}

#[test]
fn criterion_01_mask_partition() {
    let start = Instant::now();
    let mut failure = None;
    let mut frames = 0;
    for i in 0..PARTITION_SCENES {
        let (state, config) = random_scene(10_000 + i as u64);
        let obs = observe(&state, &config);
        let spec = make_group_spec(&state.registry(), &interest_set(&state)).unwrap();
        for frame in [&obs.base, &obs.wrist] {
            frames += 1;
            if let Err(e) = check_docir_frame(frame, &spec) {
                failure.get_or_insert(format!("scene {i}: {e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failure.is_none() && secs < PARTITION_SECS;
    report(
        "1",
        "mask partition",
        pass,
        &format!(
            "{frames} frames, {}, {secs:.1}s (limit {PARTITION_SECS}s)",
            failure.as_deref().unwrap_or("disjoint, sum to foreground, overlay exact")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_02_ablation_masks() {
    let mut failure = None;
    let mut frames = 0;
    for i in 0..PARTITION_SCENES {
        let (state, config) = random_scene(20_000 + i as u64);
        let obs = observe(&state, &config);
        let spec = make_group_spec(&state.registry(), &interest_set(&state)).unwrap();
        for frame in [&obs.base, &obs.wrist] {
            frames += 1;
            if let Err(e) = check_ablation_frame(frame, &spec) {
                failure.get_or_insert(format!("scene {i}: {e}"));
            }
        }
    }
    report(
        "2",
        "ablation mask algebra",
        failure.is_none(),
        &format!(
            "{frames} frames, {}",
            failure.as_deref().unwrap_or("A/B/C partition the foreground, C robot mask matches DOCIR")
        ),
    );
    assert!(failure.is_none());
}

#[test]
fn criterion_03_autodiff() {
    let start = Instant::now();
    let mut results = cases::elementwise();
    results.extend(cases::binary());
    results.extend(cases::shape_and_reduction());
    results.extend(cases::layers());
    results.push(cases::composite());
    let (worst_name, worst) = results
        .iter()
        .copied()
        .fold(("none", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<&str> = results.iter().filter(|r| r.1 > FD_REL_TOL).map(|r| r.0).collect();
    let gap = cases::conv_oracle_gap();
    let secs = start.elapsed().as_secs_f64();
    let pass = failing.is_empty() && gap <= CONV_TOL && secs < AUTODIFF_SECS;
    report(
        "3",
        "autodiff gradient checks",
        pass,
        &format!(
            "{} cases, worst rel err {worst:.2e} ({worst_name}), failing {failing:?}, conv oracle gap {gap:.2e}, {secs:.1}s",
            results.len()
        ),
    );
    assert!(pass);
}

/// Sum of discounted TD residuals up to the end of the episode or sequence.
fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], boot: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let next_v = |t: usize| if t + 1 < n { v[t + 1] } else { boot };
    let delta: Vec<f64> = (0..n)
        .map(|t| r[t] + if d[t] { 0.0 } else { gamma * next_v(t) } - v[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            for l in 0..n - t {
                acc += (gamma * lambda).powi(l as i32) * delta[t + l];
                if d[t + l] {
                    break;
                }
            }
            acc
        })
        .collect()
}

#[test]
fn criterion_04_gae() {
    let mut r = rng(44);
    let mut worst: f64 = 0.0;
    for _ in 0..GAE_SEQUENCES {
        let n = r.gen_range(1..=GAE_MAX_T);
        let rew: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let val: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let done: Vec<bool> = (0..n).map(|_| r.gen_bool(0.25)).collect();
        let boot = r.gen_range(-2.0..2.0);
        let gamma = r.gen_range(0.8..1.0);
        let lambda = r.gen_range(0.0..=1.0);
        let (adv, _) = gae(&rew, &val, &done, boot, gamma, lambda).unwrap();
        for (a, o) in adv.iter().zip(gae_oracle(&rew, &val, &done, boot, gamma, lambda)) {
            worst = worst.max((a - o).abs());
        }
    }
    // λ = 1 on terminated episodes: Monte-Carlo return minus value. Dyadic
    // rewards, values and γ keep every partial sum exact.
    let mut exact = true;
    for _ in 0..GAE_SEQUENCES {
        let n = r.gen_range(1..=GAE_MAX_T);
        let rew: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(-8i32..8)) / 4.0).collect();
        let val: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(-8i32..8)) / 4.0).collect();
        let mut done: Vec<bool> = (0..n).map(|_| r.gen_bool(0.25)).collect();
        done[n - 1] = true;
        let gamma = 0.5;
        let (adv, _) = gae(&rew, &val, &done, 123.0, gamma, 1.0).unwrap();
        for t in 0..n {
            let mut g = 0.0;
            let mut k = 1.0;
            for u in t..n {
                g += k * rew[u];
                k *= gamma;
                if done[u] {
                    break;
                }
            }
            exact &= adv[t] == g - val[t];
        }
    }
    let pass = worst <= GAE_TOL && exact;
    report(
        "4",
        "GAE oracle",
        pass,
        &format!("{GAE_SEQUENCES} sequences, max gap {worst:.2e} (tol {GAE_TOL:e}), lambda=1 exact: {exact}"),
    );
    assert!(pass);
}

#[test]
fn criterion_05_ppo_smoke() {
    docir_lab::tune_allocator();
    let start = Instant::now();
    let policy: Policy<f32> = Policy::new(PolicySpec::vector(PointReach::OBS_DIM), 0).unwrap();
    let cfg = TrainConfig {
        hypers: PpoHypers {
            eval_every: 5,
            eval_episodes: SMOKE_EPISODES,
            ..PpoHypers::default()
        },
        total_steps: SMOKE_STEPS,
        seed: 0,
        deterministic: true,
        out_dir: None,
        metadata: serde_json::Value::Null,
        verbose: false,
    };
    let out = ppo::train(policy, |_| PointReach::default(), |_| PointReach::default(), &cfg).unwrap();
    let first_hit = out
        .metrics
        .iter()
        .filter(|m| m.kind == "eval")
        .find(|m| m.success_rate.is_some_and(|s| s >= SMOKE_SUCCESS));
    let best = out.best_eval.map_or(0.0, |e| e.success_rate);
    let pass = first_hit.is_some();
    report(
        "5",
        "PPO smoke (point reach)",
        pass,
        &format!(
            "best eval {best:.2} over {SMOKE_EPISODES} episodes, first >= {SMOKE_SUCCESS} at {} steps, {} steps total, {:.0}s",
            first_hit.map_or("never".to_string(), |m| m.step.to_string()),
            out.env_steps,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_reproducibility() {
    docir_lab::tune_allocator();
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let cfg = RunConfig {
            steps: REPRO_STEPS,
            deterministic: true,
            seed: 7,
            out_dir: Some(tmp.path().join(name)),
            ..RunConfig::default()
        };
        harness::train_run(&cfg, false).unwrap()
    };
    let a = run("a");
    let b = run("b");
    let stream = |p: &Path| -> Vec<ppo::MetricsRecord> {
        ppo::read_metrics(p)
            .unwrap()
            .into_iter()
            .filter(|m| m.step <= REPRO_COMPARED_STEPS.next_multiple_of(PpoHypers::default().steps_per_update()))
            .map(|m| m.without_time())
            .collect()
    };
    let (sa, sb) = (stream(&a.metrics), stream(&b.metrics));
    let metrics_equal = !sa.is_empty() && sa == sb;
    let eval_equal = a.final_eval == b.final_eval;

    let ckpt = &a.checkpoint;
    let (p, meta) = Policy::<f32>::load(ckpt).unwrap();
    let resaved = tmp.path().join("resaved.ckpt");
    p.save(&resaved, meta).unwrap();
    let round_trip = std::fs::read(ckpt).unwrap() == std::fs::read(&resaved).unwrap();

    let pass = metrics_equal && eval_equal && round_trip;
    report(
        "10",
        "deterministic reruns",
        pass,
        &format!(
            "{} metric records through step {} identical: {metrics_equal}, final eval {:.2} vs {:.2}, checkpoint round trip bit-exact: {round_trip}",
            sa.len(),
            sa.last().map_or(0, |m| m.step),
            a.final_eval.success_rate,
            b.final_eval.success_rate
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------ desk-scale training

fn acceptance_dir() -> PathBuf {
    data_root().join("acceptance")
}

fn pick(variant: Variant, objects: usize) -> Cell {
    Cell {
        task: Task::Pick,
        variant,
        objects,
    }
}

fn plan(name: &str, cells: Vec<Cell>, methods: Vec<ReprKind>, seeds: Vec<u64>) -> SuitePlan {
    SuitePlan {
        name: name.to_string(),
        cells,
        methods,
        seeds,
        ..SuitePlan::preset("paper-table1-desk").unwrap()
    }
}

fn skill_plan() -> SuitePlan {
    plan("acceptance-skill", vec![pick(Variant::FixedTarget, 3)], vec![ReprKind::Docir], vec![0, 1, 2])
}

fn ordering_plan() -> SuitePlan {
    plan(
        "acceptance-ordering",
        vec![pick(Variant::VaryingTarget, 5)],
        vec![ReprKind::Docir, ReprKind::Ocr, ReprKind::Flat],
        vec![0, 1, 2],
    )
}

fn ablation_plan() -> SuitePlan {
    plan(
        "acceptance-ablation",
        vec![pick(Variant::VaryingTarget, 5)],
        vec![ReprKind::Docir, ReprKind::AblationA, ReprKind::AblationB, ReprKind::AblationC],
        vec![0, 1, 2],
    )
}

fn ood_plan() -> SuitePlan {
    plan("acceptance-ood", vec![pick(Variant::VaryingTarget, 5)], vec![ReprKind::Docir], vec![0])
}

const OOD_FILE: &str = "ood-docir-varying-5-s0.json";

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median over the plan's seeds, or `None` while any seed is missing.
fn seed_median(entries: &[ManifestEntry], plan: &SuitePlan, cell: Cell, repr: ReprKind) -> Option<f64> {
    let xs: Vec<f64> = plan
        .seeds
        .iter()
        .map(|s| {
            entries
                .iter()
                .find(|e| e.cell == cell && e.repr == repr && e.seed == *s)
                .map(|e| e.success_rate)
        })
        .collect::<Option<_>>()?;
    Some(median(xs))
}

fn judge_skill(entries: &[ManifestEntry]) -> Option<(bool, String)> {
    let p = skill_plan();
    let m = seed_median(entries, &p, p.cells[0], ReprKind::Docir)?;
    Some((m >= SKILL_SUCCESS, format!("median success {m:.2} (need >= {SKILL_SUCCESS})")))
}

fn judge_ordering(entries: &[ManifestEntry]) -> Option<(bool, String)> {
    let p = ordering_plan();
    let c = p.cells[0];
    let d = seed_median(entries, &p, c, ReprKind::Docir)?;
    let o = seed_median(entries, &p, c, ReprKind::Ocr)?;
    let f = seed_median(entries, &p, c, ReprKind::Flat)?;
    Some((
        d - o >= OCR_MARGIN && d - f >= FLAT_MARGIN,
        format!(
            "medians DOCIR {d:.2}, OCR {o:.2}, Flat {f:.2} (need margins {OCR_MARGIN} and {FLAT_MARGIN})"
        ),
    ))
}

fn judge_ablation(entries: &[ManifestEntry]) -> Option<(bool, String)> {
    let p = ablation_plan();
    let c = p.cells[0];
    let d = seed_median(entries, &p, c, ReprKind::Docir)?;
    let a = seed_median(entries, &p, c, ReprKind::AblationA)?;
    let b = seed_median(entries, &p, c, ReprKind::AblationB)?;
    let cc = seed_median(entries, &p, c, ReprKind::AblationC)?;
    let pass = a >= d - ABLATION_NEAR && b >= d - ABLATION_NEAR && cc <= a.min(b) - ABLATION_C_GAP;
    Some((
        pass,
        format!("medians DOCIR {d:.2}, A {a:.2}, B {b:.2}, C {cc:.2} (A/B within {ABLATION_NEAR}, C behind by {ABLATION_C_GAP})"),
    ))
}

fn judge_ood(report: &OodReport) -> (bool, String) {
    let (rr, rd) = if report.in_dist > 0.0 {
        (report.recolor / report.in_dist, report.distractor / report.in_dist)
    } else {
        (0.0, 0.0)
    };
    (
        report.in_dist > 0.0 && rr >= OOD_RETENTION && rd >= OOD_RETENTION,
        format!(
            "in-dist {:.2}, recolor {:.2} (retention {rr:.2}), {} distractors {:.2} (retention {rd:.2}), need >= {OOD_RETENTION}",
            report.in_dist, report.recolor, report.distractor_count, report.distractor
        ),
    )
}

fn read_ood(dir: &Path) -> Option<OodReport> {
    let text = std::fs::read_to_string(dir.join(OOD_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

fn print_judged(id: &str, name: &str, verdict: Option<(bool, String)>) -> bool {
    match verdict {
        Some((pass, detail)) => {
            report(id, name, pass, &detail);
            pass
        }
        None => {
            println!(
                "[NOT RUN] criterion {id}: {name}: no complete results under {}; \
                 run `cargo test --release --test acceptance -- --ignored --nocapture`",
                acceptance_dir().display()
            );
            true
        }
    }
}

/// Reports criteria 6 to 9 from recorded results without training anything.
#[test]
fn criteria_06_to_09_recorded_results() {
    let dir = acceptance_dir();
    let entries = read_manifest(&dir.join(MANIFEST_FILE)).unwrap_or_default();
    print_judged("6", "desk-scale skill learning", judge_skill(&entries));
    print_judged("7", "directional ordering", judge_ordering(&entries));
    print_judged("8", "ablation ordering", judge_ablation(&entries));
    print_judged("9", "OOD retention", read_ood(&dir).map(|r| judge_ood(&r)));
}

fn run_plan(plan: &SuitePlan) -> Vec<ManifestEntry> {
    docir_lab::tune_allocator();
    let dir = acceptance_dir();
    run_suite(plan, &dir, &mut LocalRunner { verbose: true }).unwrap();
    read_manifest(&dir.join(MANIFEST_FILE)).unwrap()
}

#[test]
#[ignore = "trains 3 desk-scale policies (about 3.5 h each on one core)"]
fn criterion_06_skill_learning() {
    let entries = run_plan(&skill_plan());
    assert!(print_judged("6", "desk-scale skill learning", judge_skill(&entries)));
}

#[test]
#[ignore = "trains 9 desk-scale policies"]
fn criterion_07_directional_ordering() {
    let entries = run_plan(&ordering_plan());
    assert!(print_judged("7", "directional ordering", judge_ordering(&entries)));
}

#[test]
#[ignore = "trains 12 desk-scale policies (DOCIR runs shared with criterion 7)"]
fn criterion_08_ablation_ordering() {
    let entries = run_plan(&ablation_plan());
    assert!(print_judged("8", "ablation ordering", judge_ablation(&entries)));
}

#[test]
#[ignore = "trains one desk-scale policy (shared with criterion 7) and runs 300 evaluation episodes"]
fn criterion_09_ood_retention() {
    let p = ood_plan();
    let entries = run_plan(&p);
    let entry = entries
        .iter()
        .find(|e| e.cell == p.cells[0] && e.repr == ReprKind::Docir && e.seed == 0)
        .expect("ood run recorded");
    let r = ood_suite(&entry.checkpoint, p.eval_episodes, OOD_DISTRACTORS).unwrap();
    std::fs::write(acceptance_dir().join(OOD_FILE), serde_json::to_string_pretty(&r).unwrap()).unwrap();
    let (pass, detail) = judge_ood(&r);
    report("9", "OOD retention", pass, &detail);
    assert!(pass);
}
