//! Training loop, validation, best-checkpoint retention and the ablation
//! harness.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointBundle;
use crate::dataset::{split_dataset, SceneSample};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::losses::{curriculum_factor, total_loss, LossWeights};
use crate::mask::Mask;
use crate::metrics::{Evaluator, MetricsReport};
use crate::model::{Encoded, ModelSpec, SegModel};
use crate::nn::{clip_global_norm, Adam, AdamConfig, Module};
use crate::rl::{policy_loss, BaselineState};
use crate::rng::{stream_rng, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Segmentation loss only, no schedule, no refinement.
    Baseline,
    /// `f · L_seg` with the curriculum schedule, refinement off.
    Curriculum,
    /// Full hybrid objective with policy-gradient refinement.
    CurriculumRl,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [
        AblationMode::Baseline,
        AblationMode::Curriculum,
        AblationMode::CurriculumRl,
    ];

    pub fn uses_rl(self) -> bool {
        self == AblationMode::CurriculumRl
    }

    pub fn uses_curriculum(self) -> bool {
        self != AblationMode::Baseline
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::Curriculum => "curriculum",
            AblationMode::CurriculumRl => "curriculum_rl",
        }
    }

    /// Row label in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            AblationMode::Baseline => "Baseline",
            AblationMode::Curriculum => "Curriculum Learning",
            AblationMode::CurriculumRl => "Curriculum Learning + RL",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode {s:?} (expected baseline, curriculum or curriculum_rl)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub mode: AblationMode,
    pub grad_clip: f64,
    pub baseline_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            val_fraction: 0.2,
            mode: AblationMode::CurriculumRl,
            grad_clip: 5.0,
            baseline_momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("train.learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("train.eps must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("train.val_fraction must lie strictly between 0 and 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("train.grad_clip must be positive");
        }
        BaselineState::new(self.baseline_momentum)?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Loss weight actually applied to `L_seg` in epoch `epoch`.
    pub fn seg_factor(&self, epoch: usize) -> Result<f64> {
        if self.mode.uses_curriculum() {
            curriculum_factor(epoch, self.epochs)
        } else {
            Ok(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub l_seg: f64,
    pub l_rl: f64,
    pub l_total: f64,
    pub f_epoch: f64,
    pub mean_reward: Option<f64>,
    pub baseline: Option<f64>,
    pub val_miou: f64,
    pub val_dice: f64,
}

pub const HISTORY_COLUMNS: [&str; 9] = [
    "epoch",
    "l_seg",
    "l_rl",
    "l_total",
    "f_epoch",
    "mean_reward",
    "baseline",
    "val_miou",
    "val_dice",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, f: impl Fn(&HistoryRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    pub fn best_val_miou(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.val_miou).reduce(f64::max)
    }

    /// Tab-separated, one header line then one line per epoch. Floats use
    /// the shortest round-tripping form; missing values are `-`.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        let mut s = HISTORY_COLUMNS.join("\t");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch,
                r.l_seg,
                r.l_rl,
                r.l_total,
                r.f_epoch,
                opt(r.mean_reward),
                opt(r.baseline),
                r.val_miou,
                r.val_dice
            );
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header.split('\t').ne(HISTORY_COLUMNS) {
            return Err(Error::Format(format!("unexpected history header {header:?}")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let err = |m: String| Error::Format(format!("history line {}: {m}", i + 2));
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != HISTORY_COLUMNS.len() {
                return Err(err(format!("expected {} columns", HISTORY_COLUMNS.len())));
            }
            let num = |c: &str| c.parse::<f64>().map_err(|e| err(format!("{c:?}: {e}")));
            let opt = |c: &str| if c == "-" { Ok(None) } else { num(c).map(Some) };
            rows.push(HistoryRow {
                epoch: cells[0].parse().map_err(|e| err(format!("epoch: {e}")))?,
                l_seg: num(cells[1])?,
                l_rl: num(cells[2])?,
                l_total: num(cells[3])?,
                f_epoch: num(cells[4])?,
                mean_reward: opt(cells[5])?,
                baseline: opt(cells[6])?,
                val_miou: num(cells[7])?,
                val_dice: num(cells[8])?,
            });
        }
        Ok(TrainHistory { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Remembers the best score seen; only strict improvements count.
#[derive(Clone, Copy, Debug, Default)]
pub struct BestTracker {
    best: Option<f64>,
}

impl BestTracker {
    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, score: f64) -> bool {
        let improved = self.best.is_none_or(|b| score > b);
        if improved {
            self.best = Some(score);
        }
        improved
    }
}

/// A sample with its frozen-encoder features computed once.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub enc: Encoded<f32>,
    pub mask: Mask,
}

pub fn prepare(encoder: &Encoder<f32>, spec: &ModelSpec, samples: &[SceneSample]) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            if s.mask.height() != spec.side || s.mask.width() != spec.side {
                return Err(Error::Shape(format!(
                    "sample {} is {}x{}, model expects {}x{}",
                    s.id,
                    s.mask.height(),
                    s.mask.width(),
                    spec.side,
                    spec.side
                )));
            }
            s.mask.check_classes(spec.num_classes)?;
            Ok(Prepared {
                id: s.id.clone(),
                enc: Encoded::new(encoder, &s.image)?,
                mask: s.mask.clone(),
            })
        })
        .collect()
}

/// Greedy evaluation. Takes the model by shared reference, so weights and
/// baseline cannot change.
pub fn validate(model: &SegModel<f32>, samples: &[Prepared], use_rl: bool) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Argument("validation set is empty".into()));
    }
    let mut eval = Evaluator::new(model.num_classes());
    for s in samples {
        let pred = model.predict(&s.enc, use_rl)?;
        eval.add(&pred.labels(), &s.mask)?;
    }
    Ok(eval.report())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Written whenever validation mIoU strictly improves.
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the best validation epoch.
    pub best: CheckpointBundle,
    pub last: SegModel<f32>,
    pub history: TrainHistory,
    /// Validation of the freshly initialised model, before any step.
    pub initial_report: MetricsReport,
    /// Validation of the best checkpoint.
    pub best_report: MetricsReport,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Splits `samples` with `cfg.val_fraction` and trains.
pub fn train(spec: &ModelSpec, cfg: &TrainConfig, loss: &LossWeights, samples: &[SceneSample], opts: &TrainOptions) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Argument("dataset is empty".into()));
    }
    cfg.validate()?;
    let (train_set, val_set) = split_dataset(samples.to_vec(), cfg.val_fraction, cfg.seed)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Argument(format!(
            "{} samples with val_fraction {} leave an empty split",
            samples.len(),
            cfg.val_fraction
        )));
    }
    train_on(spec, cfg, loss, &train_set, &val_set, opts)
}

/// NaN or infinity surfacing inside a step means the run diverged.
fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(message) => Error::Divergence { epoch, batch, message },
        other => other,
    }
}

/// Trains on an explicit train/validation pair.
pub fn train_on(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    loss: &LossWeights,
    train_set: &[SceneSample],
    val_set: &[SceneSample],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    spec.validate()?;
    cfg.validate()?;
    loss.validate()?;
    if train_set.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }

    let encoder = Encoder::<f32>::new(&spec.encoder)?;
    let checksum_before = encoder.checksum();
    let train_data = prepare(&encoder, spec, train_set)?;
    let val_data = prepare(&encoder, spec, val_set)?;

    let mut model = SegModel::<f32>::new(spec, &mut stream_rng(cfg.seed, streams::INIT))?;
    let mut grad = model.zeros_like();
    let mut adam = Adam::new(cfg.adam(), &model.params().iter().map(|(_, t)| *t).collect::<Vec<_>>());
    let mut baseline = BaselineState::new(cfg.baseline_momentum)?;
    let mut shuffle_rng = stream_rng(cfg.seed, streams::SHUFFLE);
    let mut policy_rng = stream_rng(cfg.seed, streams::POLICY);
    let use_rl = cfg.mode.uses_rl();

    let initial_report = validate(&model, &val_data, use_rl)?;
    info!(
        "mode {} | {} train / {} val | initial val mIoU {:.4}",
        cfg.mode,
        train_data.len(),
        val_data.len(),
        initial_report.mean_iou
    );

    let mut history = TrainHistory::default();
    let mut tracker = BestTracker::default();
    let mut best: Option<(CheckpointBundle, MetricsReport)> = None;
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..cfg.epochs {
        let f = cfg.seg_factor(epoch)?;
        order.shuffle(&mut shuffle_rng);
        let (mut sum_seg, mut sum_rl, mut sum_total) = (0.0, 0.0, 0.0);
        let mut rewards_all = Vec::new();
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();

        for (b, batch) in batches.iter().enumerate() {
            for t in grad.params_mut() {
                t.fill(0.0);
            }
            let n = batch.len() as f64;
            let seg_scale = (f / n) as f32;
            let mut seg = 0.0;
            let mut steps = Vec::with_capacity(batch.len());
            for &i in batch.iter() {
                let s = &train_data[i];
                let step = model
                    .seg_step(&s.enc, &s.mask, use_rl, seg_scale, loss, &mut policy_rng, &mut grad)
                    .map_err(|e| diverged(e, epoch, b))?;
                if !step.seg_loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b,
                        message: format!("segmentation loss is {} on {}", step.seg_loss, s.id),
                    });
                }
                seg += step.seg_loss;
                steps.push(step);
            }
            let l_seg = seg / n;

            let mut l_rl = 0.0;
            if use_rl {
                let rewards: Vec<f64> = steps.iter().map(|s| s.reward.expect("rl step has reward")).collect();
                let log_probs: Vec<f64> = steps.iter().map(|s| s.policy.as_ref().expect("rl step").log_prob()).collect();
                let mean = rewards.iter().sum::<f64>() / n;
                let b_now = baseline.current(mean);
                l_rl = policy_loss(&rewards, &log_probs, b_now);
                for (step, r) in steps.iter().zip(&rewards) {
                    let scale = ((1.0 - f) * (r - b_now) / n) as f32;
                    if scale != 0.0 {
                        let out = step.policy.as_ref().expect("rl step");
                        model.policy.backward_neg_log_prob(out, scale, &mut grad.policy);
                    }
                }
                baseline.update(mean);
                rewards_all.extend(rewards);
            }
            let l_total = total_loss(l_seg, l_rl, f);
            if !l_total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    message: format!("total loss is {l_total}"),
                });
            }
            let norm = clip_global_norm(grad.params_mut(), cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    message: format!("gradient norm is {norm}"),
                });
            }
            adam.step(model.params_mut(), grad.params().into_iter().map(|(_, t)| t).collect());
            sum_seg += l_seg;
            sum_rl += l_rl;
            sum_total += l_total;
            debug!("epoch {epoch} batch {b}: L_seg {l_seg:.4} L_RL {l_rl:.4} |g| {norm:.3}");
        }

        let nb = batches.len() as f64;
        let report = validate(&model, &val_data, use_rl).map_err(|e| diverged(e, epoch, batches.len()))?;
        let row = HistoryRow {
            epoch,
            l_seg: sum_seg / nb,
            l_rl: sum_rl / nb,
            l_total: sum_total / nb,
            f_epoch: f,
            mean_reward: use_rl.then(|| rewards_all.iter().sum::<f64>() / rewards_all.len().max(1) as f64),
            baseline: if use_rl { baseline.value } else { None },
            val_miou: report.mean_iou,
            val_dice: report.dice,
        };
        info!(
            "epoch {:>3} | f {:.4} | L_seg {:.4} | L_RL {:+.4} | val mIoU {:.4} Dice {:.4}",
            epoch, f, row.l_seg, row.l_rl, row.val_miou, row.val_dice
        );
        history.rows.push(row);

        if tracker.observe(report.mean_iou) {
            let bundle = CheckpointBundle {
                spec: spec.clone(),
                model: model.clone(),
                mode: cfg.mode,
                baseline,
                epoch,
                best_val_miou: report.mean_iou,
            };
            if let Some(path) = &opts.checkpoint_path {
                bundle.save(path)?;
            }
            best = Some((bundle, report));
        }
    }

    let checksum_after = encoder.checksum();
    let (best, best_report) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        last: model,
        history,
        initial_report,
        best_report,
        encoder_checksum_before: checksum_before,
        encoder_checksum_after: checksum_after,
        train_ids: train_set.iter().map(|s| s.id.clone()).collect(),
        val_ids: val_set.iter().map(|s| s.id.clone()).collect(),
    })
}

/// Re-validates a checkpoint on a set of samples.
pub fn evaluate_checkpoint(bundle: &CheckpointBundle, samples: &[SceneSample]) -> Result<MetricsReport> {
    let encoder = Encoder::<f32>::new(&bundle.spec.encoder)?;
    let data = prepare(&encoder, &bundle.spec, samples)?;
    validate(&bundle.model, &data, bundle.mode.uses_rl())
}

/// Final (best-checkpoint) scores of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mode: AblationMode,
    pub val_miou: f64,
    pub val_dice: f64,
    pub best_epoch: usize,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub label: String,
    pub mean_miou: f64,
    pub std_miou: f64,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub runs: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Published full-scale figures (mIoU %, Dice %), shown for context only.
pub const REFERENCE_ROWS: [(&str, f64, f64); 3] = [
    ("Baseline", 72.4, 75.1),
    ("Curriculum Learning", 76.8, 79.3),
    ("Curriculum Learning + RL", 81.0, 88.0),
];

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn row(&self, mode: AblationMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// Aligned text table in percent, with the reference footer.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let w = 26;
        let _ = writeln!(s, "{:<w$}  {:>16}  {:>16}", "Configuration", "mIoU (%)", "Dice (%)");
        let _ = writeln!(s, "{}", "-".repeat(w + 36));
        for r in &self.rows {
            let cell = |m: f64, sd: f64| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd);
            let _ = writeln!(
                s,
                "{:<w$}  {:>16}  {:>16}",
                r.label,
                cell(r.mean_miou, r.std_miou),
                cell(r.mean_dice, r.std_dice)
            );
        }
        let seeds = self.rows.first().map_or(0, |r| r.runs.len());
        let _ = writeln!(s, "{}", "-".repeat(w + 36));
        let _ = writeln!(s, "{seeds} seed(s) per configuration; mean ± population std over seeds.");
        let _ = writeln!(s);
        let _ = writeln!(s, "Reference (full-scale, real surgical data; not comparable):");
        for (label, miou, dice) in REFERENCE_ROWS {
            let _ = writeln!(s, "{label:<w$}  {miou:>16.1}  {dice:>16.1}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Trains every configuration on the same data with seeds
/// `base.seed .. base.seed + num_seeds`.
pub fn run_ablation(
    spec: &ModelSpec,
    base: &TrainConfig,
    loss: &LossWeights,
    samples: &[SceneSample],
    num_seeds: usize,
    mut on_run: impl FnMut(&SeedResult),
) -> Result<AblationTable> {
    if num_seeds == 0 {
        return Err(Error::Argument("num_seeds must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(3);
    for mode in AblationMode::ALL {
        let mut runs = Vec::with_capacity(num_seeds);
        for k in 0..num_seeds as u64 {
            let cfg = TrainConfig {
                seed: base.seed + k,
                mode,
                ..base.clone()
            };
            let out = train(spec, &cfg, loss, samples, &TrainOptions::default())?;
            let run = SeedResult {
                seed: cfg.seed,
                mode,
                val_miou: out.best_report.mean_iou,
                val_dice: out.best_report.dice,
                best_epoch: out.best.epoch,
                history: out.history,
            };
            info!("ablation {mode} seed {}: mIoU {:.4} Dice {:.4}", run.seed, run.val_miou, run.val_dice);
            on_run(&run);
            runs.push(run);
        }
        let (mean_miou, std_miou) = mean_std(&runs.iter().map(|r| r.val_miou).collect::<Vec<_>>());
        let (mean_dice, std_dice) = mean_std(&runs.iter().map(|r| r.val_dice).collect::<Vec<_>>());
        rows.push(AblationRow {
            mode,
            label: mode.label().to_string(),
            mean_miou,
            std_miou,
            mean_dice,
            std_dice,
            runs,
        });
    }
    Ok(AblationTable { rows })
}
