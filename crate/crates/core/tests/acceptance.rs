//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each, and exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use itse::check::{self, GRAD_TOL, ORACLE_TOL};
use itse::checkpoint;
use itse::language::Vocab;
use itse::lmdf::Guidance;
use itse::metrics::{self, BinaryMask, SampleEval};
use itse::model::{Model, ModelConfig};
use itse::rng::Rng;
use itse::synth;
use itse::train::{self, OverfitRun, TrainOptions};

const SEED: u64 = 42;
const OVERFIT_STEPS: usize = 300;
const TWO_SQUARE_STEPS: usize = 2000;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn single_shape_run() -> OverfitRun<f32> {
    let model = Model::new(ModelConfig::default(), Vocab::default_scene()).expect("model");
    let opts = TrainOptions {
        steps: OVERFIT_STEPS,
        eval_every: 0,
        seed: SEED,
        ..TrainOptions::default()
    };
    train::overfit(model, &synth::single_shape_scene(), &opts, |_| {}).expect("overfit run")
}

fn two_square_run(guidance: Guidance) -> OverfitRun<f32> {
    let cfg = ModelConfig {
        guidance,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, Vocab::default_scene()).expect("model");
    let opts = TrainOptions {
        steps: TWO_SQUARE_STEPS,
        eval_every: 0,
        seed: SEED,
        ..TrainOptions::default()
    };
    train::overfit(model, &synth::two_square_scene(), &opts, |_| {}).expect("two-square run")
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let (mut suites, _) = check::op_suites(SEED);
    suites.extend(check::module_suites(SEED));
    let secs = start.elapsed().as_secs_f64();
    let worst = suites.iter().map(|s| s.max_error).fold(0.0, f64::max);
    let (checked, skipped) = suites
        .iter()
        .filter_map(|s| s.gradients.as_ref())
        .fold((0, 0), |(c, k), g| (c + g.checked(), k + g.skipped()));
    let failing: Vec<_> = suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
    outcome(
        failing.is_empty() && worst <= GRAD_TOL && secs < 120.0,
        format!(
            "{} suites, extrapolated central differences at h={:e}, max rel err {worst:.2e} (tol {GRAD_TOL:e}), {checked} coordinates checked, {skipped} skipped at kinks, {secs:.1}s; failing {failing:?}",
            suites.len(),
            check::GRAD_STEP
        ),
    )
}

fn dynamic_filter_oracle() -> Outcome {
    let a = check::dynamic_filter_oracle_suite(SEED).expect("oracle suite");
    let b = check::constant_guidance_suite(SEED).expect("reduction suite");
    outcome(
        a.passed && b.passed && a.max_error <= ORACLE_TOL && b.max_error <= ORACLE_TOL,
        format!("loop oracle max |Δ| {:.2e}, depthwise reduction max |Δ| {:.2e}", a.max_error, b.max_error),
    )
}

fn affinity_contracts() -> Outcome {
    let v = check::affinity_violations(SEED, 100).expect("affinity instances");
    outcome(
        v.slice_sum <= 1e-6 && v.masked_weight == 0.0 && v.hull <= ORACLE_TOL,
        format!(
            "100 instances: max |Σ−1| {:.2e}, max masked weight {:e}, max hull excess {:.2e}",
            v.slice_sum, v.masked_weight, v.hull
        ),
    )
}

fn memory_property() -> Outcome {
    let stage3 = ModelConfig::default().plan[2];
    let p = check::vlmg_memory_profile(SEED, check::DESK_WIDTH, stage3, 8, 8, 20).expect("profile");
    let hw2 = p.pixels * p.pixels;
    outcome(
        p.bound == 1280 && p.largest_matrix <= p.bound && p.largest_any < hw2,
        format!(
            "HW={} T={}: {} tensors, largest 2-D {:?} = {} entries (bound {}), largest of any rank {} (< {hw2})",
            p.pixels, p.words, p.allocations, p.largest_matrix_shape, p.largest_matrix, p.bound, p.largest_any
        ),
    )
}

fn overfit_demo(run: &OverfitRun<f32>, secs: f64) -> Outcome {
    let iou = run.final_mean_iou();
    outcome(
        iou >= 0.90 && secs < 300.0,
        format!("{OVERFIT_STEPS} steps at lr 1e-3, momentum 0.9, wd 5e-4: final mean IoU {iou:.4}, {secs:.1}s"),
    )
}

fn language_conditioning(run: &OverfitRun<f32>) -> Outcome {
    let [left, right] = &run.samples[..] else {
        return outcome(false, "two-square scene must give two samples");
    };
    let frames = &left.frames;
    let masks = |q: &str| train::clip_masks(&run.model, frames, q).expect("clip");
    let (pl, pr) = (masks(&left.query), masks(&right.query));
    let worst = |pred: &[BinaryMask], gt: &[BinaryMask]| {
        pred.iter().zip(gt).map(|(p, g)| metrics::iou(p, g).unwrap()).fold(1.0, f64::min)
    };
    let (il, ir) = (worst(&pl, &left.masks), worst(&pr, &right.masks));
    let cross = pl.iter().zip(&pr).map(|(a, b)| metrics::iou(a, b).unwrap()).fold(0.0, f64::max);
    outcome(
        il >= 0.8 && ir >= 0.8 && cross < 0.5,
        format!(
            "{TWO_SQUARE_STEPS} steps: min per-frame IoU `{}` {il:.4}, `{}` {ir:.4}; max IoU between the two predictions {cross:.4}",
            left.query, right.query
        ),
    )
}

fn ablation_direction(full: &OverfitRun<f32>, pooled: &OverfitRun<f32>) -> Outcome {
    let (a, b) = (full.final_mean_iou(), pooled.final_mean_iou());
    outcome(
        a >= b,
        format!("seed {SEED}, {TWO_SQUARE_STEPS} steps: full guidance {a:.4}, max-pool guidance {b:.4}"),
    )
}

/// `(intersection, union)` pairs whose IoUs are 0.72, 1, 0, 0.6 and 0.9.
const HAND_COUNTED: [(usize, usize); 5] = [(18, 25), (10, 10), (0, 8), (12, 20), (27, 30)];

/// Masks on an 8×8 canvas realizing the given counts: the prediction covers
/// the first `u` pixels in raster order, the truth its last `i`.
fn realize(i: usize, u: usize) -> (BinaryMask, BinaryMask) {
    let pred = BinaryMask::from_fn(8, 8, |y, x| y * 8 + x < u);
    let gt = BinaryMask::from_fn(8, 8, |y, x| (u - i..u).contains(&(y * 8 + x)));
    (pred, gt)
}

fn metrics_exactness() -> Outcome {
    let evals: Vec<SampleEval> = HAND_COUNTED
        .iter()
        .map(|&(i, u)| {
            let (p, g) = realize(i, u);
            SampleEval::new(&p, &g, None).unwrap()
        })
        .collect();
    let r = metrics::aggregate(&evals).unwrap();
    // passes per sample over 0.50, 0.55, ..., 0.95 (strict): 5, 10, 0, 2, 8
    let hand = r.precisions() == [0.8, 0.6, 0.6, 0.4, 0.2]
        && r.map_50_95 == 25.0 / 50.0
        && r.overall_iou == 67.0 / 93.0
        && r.mean_iou == (18.0 / 25.0 + 1.0 + 0.0 + 12.0 / 20.0 + 27.0 / 30.0) / 5.0
        && evals[0].iou == 0.72
        && metrics::aggregate(&evals[..1]).unwrap().map_50_95 == 0.5;

    let mut rng = Rng::new(SEED);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = 1 + rng.below(12);
        let set: Vec<SampleEval> = (0..n)
            .map(|_| {
                let u = rng.below(40);
                let i = if u == 0 { 0 } else { rng.below(u + 1) };
                SampleEval::from_counts(i, u).unwrap()
            })
            .collect();
        let r = metrics::aggregate(&set).unwrap();
        let p = r.precisions();
        if p.windows(2).any(|w| w[1] > w[0]) || r.map_50_95 > p[0] {
            violations += 1;
        }
    }
    outcome(
        hand && violations == 0,
        format!(
            "hand-counted fixture {}; prec {:?}, mAP {}, overall {:.6}, mean {}; {violations} violations in 1000 fuzzed sets",
            if hand { "exact" } else { "MISMATCH" },
            r.precisions(),
            r.map_50_95,
            r.overall_iou,
            r.mean_iou
        ),
    )
}

fn determinism(first: &OverfitRun<f32>) -> Outcome {
    let second = single_shape_run();
    let (a, b) = (checkpoint::to_bytes(&first.model).unwrap(), checkpoint::to_bytes(&second.model).unwrap());
    let same_trace = first.trace.len() == second.trace.len()
        && first
            .trace
            .iter()
            .zip(&second.trace)
            .all(|(x, y)| x.loss.to_bits() == y.loss.to_bits() && x.mean_iou.map(f64::to_bits) == y.mean_iou.map(f64::to_bits));
    let pad = check::pad_invariance_suite(SEED).unwrap();

    // pad positions of the trained model's query hold arbitrary words
    let m = &first.model;
    let q = m.encode_query(&first.samples[0].query).unwrap();
    let mut noisy = q.clone();
    let mut rng = Rng::new(SEED);
    for (id, _) in noisy.ids.iter_mut().zip(&q.valid).filter(|(_, v)| !**v) {
        *id = 2 + rng.below(m.vocab().len() - 2);
    }
    let frames = &first.samples[0].frames;
    let trained_pad = m
        .run_clip(frames, &q)
        .unwrap()
        .iter()
        .zip(&m.run_clip(frames, &noisy).unwrap())
        .all(|(x, y)| x.logits.bit_eq(&y.logits));
    outcome(
        a == b && same_trace && pad.passed && trained_pad,
        format!(
            "checkpoints {} ({} bytes), loss traces {}, pad-token mutation {}",
            if a == b { "byte-identical" } else { "DIFFER" },
            a.len(),
            if same_trace { "identical" } else { "DIFFER" },
            if pad.passed && trained_pad { "changes no output bit" } else { "CHANGES OUTPUT" }
        ),
    )
}

fn clip_semantics(run: &OverfitRun<f32>) -> Outcome {
    let desk = check::clip_suite(SEED).unwrap();
    let m = &run.model;
    let q = m.encode_query(&run.samples[0].query).unwrap();
    let f = run.samples[0].frames[1].clone();
    let single = m.run_clip(std::slice::from_ref(&f), &q).unwrap();
    let direct = m.predict(&f, &f, &q).unwrap();
    let clip = m.run_clip(&[f.clone(), f.clone(), f.clone(), f], &q).unwrap();
    let bits: Vec<_> = clip.iter().map(|p| p.mask_bits()).collect();
    let ok = desk.passed && single[0].logits.bit_eq(&direct.logits) && bits.iter().all(|b| *b == bits[0]);
    outcome(
        ok,
        format!(
            "1-frame clip {} self-reference; {} identical frames give {} masks",
            if single[0].logits.bit_eq(&direct.logits) { "equals" } else { "DIFFERS FROM" },
            clip.len(),
            if bits.iter().all(|b| *b == bits[0]) { "byte-identical" } else { "DIFFERENT" }
        ),
    )
}

fn report(n: usize, name: &str, o: &Outcome) {
    println!("{} {n:>2} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored; a filter
    // argument that names no criterion skips the suite.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    let mut results = Vec::new();
    let mut record = |n: usize, name: &str, o: Outcome| {
        report(n, name, &o);
        results.push(o.passed);
    };
    record(1, "gradient fidelity", gradient_fidelity());
    record(2, "dynamic-filter oracle", dynamic_filter_oracle());
    record(3, "affinity contracts", affinity_contracts());
    record(4, "memory property", memory_property());
    let start = Instant::now();
    let single = single_shape_run();
    let secs = start.elapsed().as_secs_f64();
    record(5, "overfit demonstration", overfit_demo(&single, secs));
    let full = two_square_run(Guidance::Adaptive);
    record(6, "language conditioning", language_conditioning(&full));
    let pooled = two_square_run(Guidance::MaxPool);
    record(7, "ablation direction", ablation_direction(&full, &pooled));
    record(8, "metrics exactness", metrics_exactness());
    record(9, "determinism and pad invariance", determinism(&single));
    record(10, "clip semantics", clip_semantics(&single));
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
