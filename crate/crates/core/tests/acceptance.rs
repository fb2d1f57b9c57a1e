//! Acceptance suite. Runs every criterion in sequence, prints one
//! PASS/FAIL line per criterion and exits non-zero if any failed.
//!
//! Criteria run one at a time so wall-clock budgets are measured without
//! interference from other tests.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segrefine::checkpoint::CheckpointBundle;
use segrefine::dataset::{generate_dataset, split_dataset, DatasetConfig, SceneSample};
use segrefine::decoder::{softmax_pixelwise, DecoderConfig, LogitMap};
use segrefine::encoder::{Encoder, EncoderConfig};
use segrefine::losses::{curriculum_factor, seg_loss_with_grad, total_loss, LossWeights};
use segrefine::metrics::{dice_coefficient, dice_per_class, iou_per_class, mean_iou, ConfusionCounts};
use segrefine::model::{Encoded, ModelSpec, SegModel};
use segrefine::nn::{Linear, Module};
use segrefine::rl::{policy_loss, refine, ActionMode, ActionSpace, Policy, POLICY_HIDDEN};
use segrefine::trainer::{evaluate_checkpoint, run_ablation, train, AblationMode, SeedResult, TrainConfig, TrainOptions};
use segrefine::{Error, Mask, Tensor};

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn spec_for(side: usize, patch: usize) -> ModelSpec {
    ModelSpec {
        side,
        num_classes: 4,
        encoder: EncoderConfig { patch_size: patch, ..Default::default() },
        decoder: DecoderConfig::default(),
        actions: ActionSpace::default(),
    }
}

fn dataset(num_samples: usize) -> Vec<SceneSample> {
    generate_dataset(&DatasetConfig { num_samples, ..Default::default() }).expect("dataset")
}

// 1
fn curriculum_schedule() -> Outcome {
    for t in 1..=100usize {
        ensure(curriculum_factor(0, t).unwrap() == 1.0, || format!("f(0,{t}) != 1"))?;
        ensure(curriculum_factor(t, t).unwrap() == 0.0, || format!("f({t},{t}) != 0"))?;
        if t % 2 == 0 {
            let half = curriculum_factor(t / 2, t).unwrap();
            ensure(half == 0.25, || format!("f({}, {t}) = {half}", t / 2))?;
        }
        let f: Vec<f64> = (0..=t).map(|e| curriculum_factor(e, t).unwrap()).collect();
        for e in 0..=t {
            let r = 1.0 - e as f64 / t as f64;
            ensure((f[e] - r * r).abs() <= 1e-12, || format!("f({e},{t}) = {}", f[e]))?;
        }
        ensure(f.windows(2).all(|w| w[1] <= w[0]), || format!("not monotone for T={t}"))?;
    }
    Ok("T = 1..100".into())
}

// 2
fn hybrid_loss() -> Outcome {
    let mut r = rng(2);
    for _ in 0..10_000 {
        let a: f64 = r.random_range(0.0..10.0);
        let b: f64 = r.random_range(-2.0..10.0);
        let f: f64 = r.random_range(0.0..=1.0);
        ensure(total_loss(a, b, 1.0) == a, || format!("f=1 endpoint at {a}, {b}"))?;
        ensure(total_loss(a, b, 0.0) == b, || format!("f=0 endpoint at {a}, {b}"))?;
        let t = total_loss(a, b, f);
        ensure(a.min(b) <= t && t <= a.max(b), || format!("L({a},{b},{f}) = {t} out of range"))?;
    }
    Ok("10^4 triples".into())
}

// 3
fn refinement_identity() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (k, h, w) = (r.random_range(2..6), r.random_range(1..12), r.random_range(1..12));
        let n = k * h * w;
        let z = LogitMap { scores: Tensor::<f32>::from_fn(&[k, h, w], |_| r.random_range(-3.0..3.0)) };
        let res = LogitMap { scores: Tensor::<f32>::from_fn(&[k, h, w], |_| r.random_range(-3.0..3.0)) };
        let same = refine(&z, 0.0, &res).map_err(|e| e.to_string())?;
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&same.scores) == bits(&z.scores), || "alpha = 0 changed bits".into())?;
        let alpha: f64 = r.random_range(-1.0..1.0);
        let o = refine(&z, alpha, &res).map_err(|e| e.to_string())?;
        for i in 0..n {
            let d = (o.scores.data()[i] as f64 - z.scores.data()[i] as f64) - alpha * res.scores.data()[i] as f64;
            worst = worst.max(d.abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max |O - z - alpha r| = {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

// 4
fn policy_gradient() -> Outcome {
    let space = ActionSpace::default();
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let mut r = rng(400 + trial);
        let dim = 8;
        let mut p = Policy::<f32>::new(dim, space.len(), &mut r);
        p.fc2 = Linear::new(POLICY_HIDDEN, space.len(), &mut r);
        let state: Vec<f32> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let out = p.act(state.clone(), &space, ActionMode::Sample, &mut r).map_err(|e| e.to_string())?;
        let reward: f64 = r.random_range(0.0..1.0);
        let baseline: f64 = r.random_range(0.0..1.0);
        let loss = |q: &Policy<f32>| {
            let o = q.greedy(state.clone(), &space).unwrap();
            let lp = (o.probs[out.action] as f64).ln();
            policy_loss(&[reward], &[lp], baseline)
        };

        // analytic gradient of -(R - b) log pi(a)
        let mut g = p.zeros_like();
        p.backward_neg_log_prob(&out, (reward - baseline) as f32, &mut g);
        let analytic: Vec<f64> = g.fc2.params().iter().flat_map(|(_, t)| t.data().iter().map(|&v| v as f64)).collect();
        let h = 1e-2f32;
        let mut fd = Vec::with_capacity(analytic.len());
        for idx in 0..analytic.len() {
            let eval = |delta: f32| {
                let mut q = p.clone();
                bump(&mut q.fc2, idx, delta);
                loss(&q)
            };
            fd.push((eval(h) - eval(-h)) / (2.0 * h as f64));
        }
        let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        worst = worst.max(rel);
        ensure(rel < 1e-3, || format!("trial {trial}: relative error {rel:e}"))?;

        // positive advantage raises the chosen action's probability
        let adv = (reward - baseline).abs().max(0.05) as f32;
        let mut g = p.zeros_like();
        p.backward_neg_log_prob(&out, adv, &mut g);
        let mut q = p.clone();
        for (t, (_, d)) in q.params_mut().into_iter().zip(g.params()) {
            t.axpy(-1e-2, d);
        }
        let after = q.greedy(state.clone(), &space).map_err(|e| e.to_string())?.probs[out.action];
        ensure(after > out.probs[out.action], || {
            format!("trial {trial}: pi(a) {} -> {after}", out.probs[out.action])
        })?;
    }
    Ok(format!("20 instances, worst relative error {worst:.1e}"))
}

fn bump(m: &mut Linear<f32>, mut idx: usize, delta: f32) {
    for t in m.params_mut() {
        if idx < t.len() {
            t.data_mut()[idx] += delta;
            return;
        }
        idx -= t.len();
    }
}

// 5
fn seg_loss_gradients() -> Outcome {
    let w = LossWeights::default();
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let mut r = rng(500 + trial);
        let gt = Mask::new(4, 4, (0..16).map(|_| r.random_range(0..2)).collect()).unwrap();
        let z = LogitMap { scores: Tensor::<f64>::from_fn(&[2, 4, 4], |_| r.random_range(-2.0..2.0)) };
        let (_, _, dz) = seg_loss_with_grad(&z, &gt, &w).map_err(|e| e.to_string())?;
        let h = 1e-6;
        let mut fd = Vec::with_capacity(32);
        for i in 0..32 {
            let eval = |delta: f64| {
                let mut q = z.clone();
                q.scores.data_mut()[i] += delta;
                seg_loss_with_grad(&q, &gt, &w).unwrap().0
            };
            fd.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        let diff: f64 = dz.data().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = dz.data().iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        let rel = diff / scale;
        worst = worst.max(rel);
        ensure(rel < 1e-3, || format!("trial {trial}: relative error {rel:e}"))?;
    }
    Ok(format!("20 trials, worst relative error {worst:.1e}"))
}

// 6
fn metrics_oracle() -> Outcome {
    let mut r = rng(6);
    for trial in 0..1000 {
        let k = r.random_range(2..=5usize);
        let gt = Mask::new(8, 8, (0..64).map(|_| r.random_range(0..k as u32)).collect()).unwrap();
        let pred: Vec<u32> = (0..64).map(|_| r.random_range(0..k as u32)).collect();
        let mut counts = ConfusionCounts::new(k);
        counts.accumulate(&pred, &gt).map_err(|e| e.to_string())?;

        let mut ious = Vec::new();
        let mut dices = Vec::new();
        for c in 0..k as u32 {
            let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
            for (&p, &g) in pred.iter().zip(gt.data()) {
                match (p == c, g == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fnn += 1,
                    _ => {}
                }
            }
            let ci = c as usize;
            ensure((counts.tp[ci], counts.fp[ci], counts.fn_[ci]) == (tp, fp, fnn), || {
                format!("trial {trial} class {c}: counts differ")
            })?;
            if tp + fp + fnn > 0 {
                ious.push(tp as f64 / (tp + fp + fnn) as f64);
                dices.push(2.0 * tp as f64 / (2 * tp + fp + fnn) as f64);
            }
        }
        let iou = iou_per_class(&counts);
        let dice = dice_per_class(&counts);
        for (i, d) in iou.iter().zip(&dice) {
            if let (Some(i), Some(d)) = (i, d) {
                ensure((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12, || format!("trial {trial}: Dice/IoU identity"))?;
            }
        }
        let oracle_miou = ious.iter().sum::<f64>() / ious.len() as f64;
        let oracle_dice = dices.iter().sum::<f64>() / dices.len() as f64;
        ensure((mean_iou(&iou) - oracle_miou).abs() <= 1e-12, || format!("trial {trial}: mIoU"))?;
        ensure((dice_coefficient(&counts) - oracle_dice).abs() <= 1e-12, || format!("trial {trial}: Dice"))?;
    }
    Ok("1000 random 8x8 pairs".into())
}

// 7
fn shape_contract() -> Outcome {
    let mut checked = 0;
    for side in [32usize, 64, 128] {
        for patch in [4usize, 8, 16] {
            if side % patch != 0 {
                continue;
            }
            let spec = spec_for(side, patch);
            let encoder = Encoder::<f32>::new(&spec.encoder).map_err(|e| e.to_string())?;
            let model = SegModel::<f32>::new(&spec, &mut rng(7)).map_err(|e| e.to_string())?;
            let mut r = rng(side as u64 * 100 + patch as u64);
            let image = Tensor::<f32>::from_fn(&[side, side, 3], |_| r.random_range(0.0..1.0));
            let enc = Encoded::new(&encoder, &image).map_err(|e| e.to_string())?;
            let logits = model.logits(&enc).map_err(|e| e.to_string())?;
            ensure(logits.scores.shape() == [4, side, side], || {
                format!("side {side} patch {patch}: output {:?}", logits.scores.shape())
            })?;
            let probs = softmax_pixelwise(&logits).map_err(|e| e.to_string())?;
            let p = probs.probs.data();
            for px in 0..side * side {
                let s: f64 = (0..4).map(|c| p[c * side * side + px] as f64).sum();
                ensure((s - 1.0).abs() <= 1e-6, || format!("side {side} patch {patch}: softmax sum {s}"))?;
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} (side, patch) pairs"))
}

// 8
fn frozen_encoder() -> Outcome {
    let spec = spec_for(64, 8);
    let before = Encoder::<f32>::new(&spec.encoder).map_err(|e| e.to_string())?.checksum();
    let cfg = TrainConfig { epochs: 3, ..Default::default() };
    let out = train(&spec, &cfg, &LossWeights::default(), &dataset(40), &TrainOptions::default())
        .map_err(|e| e.to_string())?;
    ensure(out.encoder_checksum_before == before, || "checksum before training differs from a fresh encoder".into())?;
    ensure(out.encoder_checksum_after == before, || {
        format!("checksum changed: {before} -> {}", out.encoder_checksum_after)
    })?;
    Ok(format!("checksum {}", &before[..16]))
}

// 9
fn desk_scale_learning() -> Outcome {
    let spec = spec_for(64, 4);
    let cfg = TrainConfig { epochs: 30, learning_rate: 1e-3, mode: AblationMode::CurriculumRl, seed: 0, ..Default::default() };
    let start = Instant::now();
    let out = train(&spec, &cfg, &LossWeights::default(), &dataset(200), &TrainOptions::default())
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let initial = out.initial_report.mean_iou;
    let best = out.best_report.mean_iou;
    ensure(elapsed < Duration::from_secs(15 * 60), || format!("took {elapsed:?}"))?;
    ensure(best >= 0.70, || format!("val mIoU {best:.4} < 0.70"))?;
    ensure(best > initial, || format!("val mIoU {best:.4} does not exceed epoch-0 {initial:.4}"))?;
    Ok(format!("val mIoU {best:.4} (epoch-0 model {initial:.4}), Dice {:.4}", out.best_report.dice))
}

// 10
fn ablation_harness() -> Outcome {
    // Small images and batches so every configuration trains close to its
    // plateau within the budget. beta2 = 0.99 gives Adam a second-moment
    // memory of a few epochs; with 0.999 it spans the whole run and the
    // decaying f turns into a learning-rate decay for the segmentation net.
    let spec = spec_for(32, 4);
    let samples = generate_dataset(&DatasetConfig { num_samples: 100, height: 32, width: 32, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let base = TrainConfig { epochs: 30, batch_size: 2, learning_rate: 1e-3, beta2: 0.99, seed: 0, ..Default::default() };
    let loss = LossWeights::default();
    let mut runs: Vec<SeedResult> = Vec::new();
    let table = run_ablation(&spec, &base, &loss, &samples, 3, |r| runs.push(r.clone())).map_err(|e| e.to_string())?;
    ensure(table.rows.len() == 3, || format!("{} rows", table.rows.len()))?;
    let modes: BTreeSet<&str> = table.rows.iter().map(|r| r.mode.as_str()).collect();
    ensure(modes.len() == 3, || "duplicate modes in table".into())?;
    ensure(runs.len() == 9, || format!("{} runs", runs.len()))?;

    // determinism: repeat one configuration with the same seed
    let probe = runs.iter().find(|r| r.mode == AblationMode::CurriculumRl && r.seed == 1).expect("run present");
    let cfg = TrainConfig { seed: probe.seed, mode: probe.mode, ..base.clone() };
    let again = train(&spec, &cfg, &loss, &samples, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let drift = (again.best_report.mean_iou - probe.val_miou).abs();
    ensure(drift <= 1e-6, || format!("re-run drift {drift:e}"))?;

    let rl = table.row(AblationMode::CurriculumRl).unwrap().mean_miou;
    let baseline = table.row(AblationMode::Baseline).unwrap().mean_miou;
    println!("{}", table.to_table());
    ensure(rl >= baseline - 0.01, || format!("curriculum_rl {rl:.4} < baseline {baseline:.4} - 0.01"))?;
    Ok(format!("baseline {baseline:.4}, curriculum_rl {rl:.4}, re-run drift {drift:.1e}"))
}

// 11
fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    let spec = spec_for(32, 4);
    let cfg = TrainConfig { epochs: 4, batch_size: 2, learning_rate: 1e-3, ..Default::default() };
    let samples = generate_dataset(&DatasetConfig { num_samples: 60, height: 32, width: 32, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let opts = TrainOptions { checkpoint_path: Some(path.clone()) };
    let out = train(&spec, &cfg, &LossWeights::default(), &samples, &opts).map_err(|e| e.to_string())?;

    let bundle = CheckpointBundle::load(&path).map_err(|e| e.to_string())?;
    let (_, val) = split_dataset(samples, cfg.val_fraction, cfg.seed).map_err(|e| e.to_string())?;
    let report = evaluate_checkpoint(&bundle, &val).map_err(|e| e.to_string())?;
    let recorded = out.best.best_val_miou;
    ensure((bundle.best_val_miou - recorded).abs() <= 1e-6, || "stored best differs".into())?;
    ensure((report.mean_iou - recorded).abs() <= 1e-6, || {
        format!("reloaded mIoU {} vs recorded {recorded}", report.mean_iou)
    })?;

    let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = dir.path().join("corrupt.ckpt");
    std::fs::write(&bad, &bytes).map_err(|e| e.to_string())?;
    match CheckpointBundle::load(&bad) {
        Err(Error::Integrity { .. }) => {}
        Err(e) => return Err(format!("corruption gave the wrong error: {e}")),
        Ok(_) => return Err("corrupted checkpoint was accepted".into()),
    }
    Ok(format!("recorded {recorded:.6}, reloaded {:.6}", report.mean_iou))
}

// 12
fn split_protocol() -> Outcome {
    for n in [5usize, 10, 37, 200, 1000] {
        for seed in 0..5u64 {
            let items: Vec<usize> = (0..n).collect();
            let (train_a, val_a) = split_dataset(items.clone(), 0.2, seed).map_err(|e| e.to_string())?;
            let (train_b, val_b) = split_dataset(items, 0.2, seed).map_err(|e| e.to_string())?;
            ensure(val_a.len() == (0.2 * n as f64).round() as usize, || format!("n={n}: {} val", val_a.len()))?;
            ensure((train_a.clone(), val_a.clone()) == (train_b, val_b), || "not deterministic".into())?;
            let tr: BTreeSet<usize> = train_a.into_iter().collect();
            let va: BTreeSet<usize> = val_a.into_iter().collect();
            ensure(tr.is_disjoint(&va), || "train and val overlap".into())?;
            ensure(tr.len() + va.len() == n, || "split lost items".into())?;
        }
    }
    let (_, v0) = split_dataset((0..200).collect::<Vec<_>>(), 0.2, 0).unwrap();
    let (_, v1) = split_dataset((0..200).collect::<Vec<_>>(), 0.2, 1).unwrap();
    ensure(v0 != v1, || "seed has no effect".into())?;
    Ok("20% validation, disjoint, deterministic".into())
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEGREFINE_LOG", "warn")).try_init();
    let s = Duration::from_secs;
    let criteria = [
        Criterion { id: 1, name: "curriculum schedule", budget: s(1), run: curriculum_schedule },
        Criterion { id: 2, name: "hybrid loss", budget: s(1), run: hybrid_loss },
        Criterion { id: 3, name: "refinement identity", budget: s(1), run: refinement_identity },
        Criterion { id: 4, name: "policy gradient", budget: s(10), run: policy_gradient },
        Criterion { id: 5, name: "segmentation-loss gradients", budget: s(10), run: seg_loss_gradients },
        Criterion { id: 6, name: "metrics oracle", budget: s(30), run: metrics_oracle },
        Criterion { id: 7, name: "shape contract", budget: s(30), run: shape_contract },
        Criterion { id: 8, name: "frozen encoder", budget: s(120), run: frozen_encoder },
        Criterion { id: 9, name: "desk-scale learning", budget: s(15 * 60), run: desk_scale_learning },
        Criterion { id: 10, name: "ablation harness", budget: s(45 * 60), run: ablation_harness },
        Criterion { id: 11, name: "checkpoint round-trip", budget: s(120), run: checkpoint_round_trip },
        Criterion { id: 12, name: "split protocol", budget: s(1), run: split_protocol },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.id.to_string() == *f || c.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= c.budget {
                Ok(detail)
            } else {
                Err(format!("{detail}; over budget {:?}", c.budget))
            }
        });
        match result {
            Ok(detail) => println!("PASS  {:>2}. {:<28} {:>9.2?}  {detail}", c.id, c.name, elapsed),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {:>2}. {:<28} {:>9.2?}  {detail}", c.id, c.name, elapsed);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
