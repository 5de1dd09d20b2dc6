//! Toy training loop, evaluation over a dataset and checkpoints.
//!
//! A step records one tape per sample in parallel, derives the batch
//! load-balance gradient from the forward values, runs the backward passes in
//! parallel, and then sums the per-sample gradients serially in batch order,
//! so results do not depend on the thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::encoder::Observation;
use crate::error::{invalid_config, Error, Result};
use crate::eval::{eval_metrics, EvalMetrics};
use crate::io::{decode_tensor, encode_tensor};
use crate::loss::{cv_squared, cv_squared_grad, importance, sample_loss_on_tape, LossBreakdown, LossWeights};
use crate::model::{ModelConfig, SpamoeModel};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::router::RouterDecision;
use crate::schedule::{lr_at, ScheduleConfig};
use crate::synth::{gen_field, toy_observe, FieldKind, FieldSpec, ObserveMode};
use crate::tensor::{Field2D, Tensor};

pub type Sample = (Observation, Field2D);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_samples: usize,
    pub h: usize,
    pub w: usize,
    /// Sample `i` uses `kinds[i % kinds.len()]`.
    pub kinds: Vec<FieldKind>,
    pub mode: ObserveMode,
    pub seed: u64,
}

impl DataConfig {
    pub fn new(n_samples: usize, h: usize, w: usize) -> Self {
        Self {
            n_samples,
            h,
            w,
            kinds: vec![FieldKind::Layered, FieldKind::Curved, FieldKind::Fault],
            mode: ObserveMode::Identity,
            seed: 0,
        }
    }
}

/// Deterministic synthetic pairs `(toy_observe(y), y)`.
pub fn toy_dataset(cfg: &DataConfig) -> Result<Vec<Sample>> {
    if cfg.kinds.is_empty() {
        return Err(invalid_config("dataset needs at least one field kind"));
    }
    (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let kind = cfg.kinds[i % cfg.kinds.len()];
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let y = gen_field(&FieldSpec::new(kind, cfg.h, cfg.w, seed))?;
            Ok((toy_observe(&y, cfg.mode)?, y))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub optim: AdamWConfig,
    pub weights: LossWeights,
    pub batch: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    /// Shuffling seed.
    pub seed: u64,
}

impl TrainConfig {
    /// Toy run on `n_samples` fields of `h × w`.
    pub fn toy(n_samples: usize, h: usize, w: usize) -> Self {
        Self {
            model: ModelConfig::toy(h, w),
            data: DataConfig::new(n_samples, h, w),
            schedule: ScheduleConfig::default(),
            optim: AdamWConfig::default(),
            weights: LossWeights::default(),
            batch: 32,
            epochs: 160,
            max_steps: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(invalid_config("batch must be at least 1"));
        }
        self.schedule.validate()?;
        self.weights.validate()
    }
}

/// Metrics averaged over a dataset plus the mean gate weight of each expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: EvalMetrics,
    pub usage: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean over the epoch's steps.
    pub loss: LossBreakdown,
    pub eval: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial: Evaluation,
    pub epochs: Vec<EpochRecord>,
    /// Batch loss of every optimizer step.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
    pub final_eval: Evaluation,
}

pub fn evaluate(model: &SpamoeModel, data: &[Sample]) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(invalid_config("cannot evaluate on an empty dataset"));
    }
    let per: Vec<(EvalMetrics, RouterDecision)> = data
        .par_iter()
        .map(|(x, y)| {
            let (y_hat, d) = model.predict(x)?;
            Ok((eval_metrics(&y_hat, y)?, d))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mut m = EvalMetrics::default();
    for (e, _) in &per {
        m.mae += e.mae / n;
        m.rmse += e.rmse / n;
        m.ssim += e.ssim / n;
    }
    let decisions: Vec<RouterDecision> = per.into_iter().map(|(_, d)| d).collect();
    let usage = importance(&decisions, model.n_experts())?.into_iter().map(|v| v / n).collect();
    Ok(Evaluation { metrics: m, usage })
}

/// Loss breakdown and parameter gradients of one batch.
pub fn batch_gradients(model: &SpamoeModel, batch: &[&Sample], w: &LossWeights) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let b = batch.len() as f64;
    let mut passes = batch
        .par_iter()
        .map(|(x, y)| {
            let mut fp = model.forward_with_tape(x)?;
            let sl = sample_loss_on_tape(&mut fp.tape, fp.y_hat, y, fp.logits, w)?;
            Ok((fp, sl))
        })
        .collect::<Result<Vec<_>>>()?;
    let decisions: Vec<RouterDecision> = passes.iter().map(|(fp, _)| fp.decision()).collect();
    let imp = importance(&decisions, model.n_experts())?;
    let cv_grad = cv_squared_grad(&imp);
    let grads = passes
        .par_iter_mut()
        .map(|(fp, sl)| {
            let alpha_seed: Vec<f64> = fp.selected.iter().map(|&e| w.ce * cv_grad[e]).collect();
            let k = alpha_seed.len();
            let seeds = [(sl.total, Tensor::scalar(1.0 / b)), (fp.alpha, Tensor::new(vec![k], alpha_seed)?)];
            fp.tape.backward_with(&seeds)
        })
        .collect::<Result<Vec<Gradients>>>()?;
    let mut acc = model.params.zeros_like();
    for g in &grads {
        g.accumulate_into(&mut acc, 1.0);
    }
    let mut loss = LossBreakdown::default();
    for (_, sl) in &passes {
        let t = &sl.terms;
        loss.mae += t.mae / b;
        loss.grad += t.grad / b;
        loss.freq += t.freq / b;
        loss.logit_l1 += t.logit_l1 / b;
        loss.logit_l2 += t.logit_l2 / b;
        loss.total += t.total / b;
    }
    loss.load_balance = cv_squared(&imp);
    loss.total += w.ce * loss.load_balance;
    Ok((loss, acc))
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for l in items {
        m.mae += l.mae / n;
        m.grad += l.grad / n;
        m.freq += l.freq / n;
        m.load_balance += l.load_balance / n;
        m.logit_l1 += l.logit_l1 / n;
        m.logit_l2 += l.logit_l2 / n;
        m.total += l.total / n;
    }
    m
}

/// Trains `model` in place. With `out` set, writes `train_log.csv`, a
/// checkpoint after every epoch and `report.json`.
pub fn train(model: &mut SpamoeModel, data: &[Sample], cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid_config("training set is empty"));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let initial = evaluate(model, data)?;
    let mut state = AdamWState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::new();
    let mut loss_curve = Vec::new();
    let mut csv = csv_header(model.n_experts());
    let limit = if cfg.max_steps == 0 { usize::MAX } else { cfg.max_steps };

    for epoch in 0..cfg.epochs {
        if loss_curve.len() >= limit {
            break;
        }
        let lr = lr_at(epoch, &cfg.schedule);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch) {
            if loss_curve.len() >= limit {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = batch_gradients(model, &batch, &cfg.weights)?;
            adamw_step(&mut model.params, &grads, &mut state, lr, &cfg.optim)?;
            loss_curve.push(loss.total);
            losses.push(loss);
        }
        let eval = evaluate(model, data)?;
        let rec = EpochRecord { epoch, lr, steps: losses.len(), loss: mean_breakdown(&losses), eval };
        log::info!(
            "epoch {epoch} lr {lr:.3e} loss {:.5} mae {:.5} rmse {:.5} ssim {:.4}",
            rec.loss.total,
            rec.eval.metrics.mae,
            rec.eval.metrics.rmse,
            rec.eval.metrics.ssim
        );
        csv_row(&mut csv, &rec);
        if let Some(dir) = out {
            fs::write(dir.join("train_log.csv"), &csv)?;
            save_checkpoint(model, dir, loss_curve.len())?;
        }
        epochs.push(rec);
    }

    let final_eval = epochs.last().map_or_else(|| initial.clone(), |e| e.eval.clone());
    let report = TrainReport { initial, epochs, steps: loss_curve.len(), loss_curve, final_eval };
    if let Some(dir) = out {
        fs::write(dir.join("train_log.csv"), &csv)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        save_checkpoint(model, dir, report.steps)?;
    }
    Ok(report)
}

/// Builds the dataset and model described by `cfg` and trains.
pub fn train_toy(cfg: &TrainConfig, out: Option<&Path>) -> Result<(SpamoeModel, TrainReport)> {
    let data = toy_dataset(&cfg.data)?;
    let mut model = SpamoeModel::new(cfg.model.clone())?;
    let report = train(&mut model, &data, cfg, out)?;
    Ok((model, report))
}

fn csv_header(n_experts: usize) -> String {
    let mut s = String::from("epoch,lr,steps,loss,mae_term,grad_term,freq_term,load_balance,logit_l1,logit_l2,mae,rmse,ssim");
    for e in 0..n_experts {
        let _ = write!(s, ",usage_{e}");
    }
    s.push('\n');
    s
}

fn csv_row(s: &mut String, r: &EpochRecord) {
    let l = &r.loss;
    let m = &r.eval.metrics;
    let _ = write!(
        s,
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.epoch, r.lr, r.steps, l.total, l.mae, l.grad, l.freq, l.load_balance, l.logit_l1, l.logit_l2, m.mae, m.rmse, m.ssim
    );
    for u in &r.eval.usage {
        let _ = write!(s, ",{u}");
    }
    s.push('\n');
}

pub const CHECKPOINT_PARAMS: &str = "params.bin";
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

/// Checkpoint description stored next to the flat parameter container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub step: usize,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Writes every parameter as one flat container plus a JSON manifest.
pub fn save_checkpoint(model: &SpamoeModel, dir: &Path, step: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut flat = Vec::with_capacity(model.params.total_len());
    let mut entries = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        entries.push(ParamEntry { name: name.clone(), shape: t.shape().to_vec(), offset: flat.len() });
        flat.extend_from_slice(t.data());
    }
    let n = flat.len();
    fs::write(dir.join(CHECKPOINT_PARAMS), encode_tensor(&Tensor::new(vec![n], flat)?)?)?;
    let manifest = Manifest { format: 1, step, model: model.config.clone(), params: entries };
    fs::write(dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(SpamoeModel, Manifest)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?)?;
    let flat = decode_tensor(&fs::read(dir.join(CHECKPOINT_PARAMS))?)?;
    let mut model = SpamoeModel::new(manifest.model.clone())?;
    if manifest.params.len() != model.params.len() || flat.len() != model.params.total_len() {
        return Err(Error::Format("checkpoint does not match the model layout".into()));
    }
    let names = model.params.names().to_vec();
    for ((entry, name), t) in manifest.params.iter().zip(&names).zip(model.params.tensors_mut()) {
        if &entry.name != name || entry.shape != t.shape() || entry.offset + t.len() > flat.len() {
            return Err(Error::Format(format!("checkpoint entry `{}` does not match `{name}`", entry.name)));
        }
        let n = t.len();
        t.data_mut().copy_from_slice(&flat.data()[entry.offset..entry.offset + n]);
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::toy(6, 16, 16);
        cfg.model.channels = 2;
        cfg.model.encoder_dim = 4;
        cfg.batch = 3;
        cfg.epochs = 2;
        cfg.schedule.base_lr = 1e-3;
        cfg.schedule.warmup_epochs = 1;
        cfg
    }

    #[test]
    fn zero_epochs_report_only_initial() {
        let mut cfg = tiny_config();
        cfg.epochs = 0;
        let (_, r) = train_toy(&cfg, None).unwrap();
        assert!(r.epochs.is_empty() && r.loss_curve.is_empty());
        assert_eq!(r.final_eval, r.initial);
    }

    #[test]
    fn same_seed_same_curve() {
        let cfg = tiny_config();
        let (ma, a) = train_toy(&cfg, None).unwrap();
        let (mb, b) = train_toy(&cfg, None).unwrap();
        assert_eq!(a.loss_curve.len(), 4);
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(ma.params, mb.params);
    }

    #[test]
    fn step_limit_is_respected() {
        let mut cfg = tiny_config();
        cfg.max_steps = 3;
        let (_, r) = train_toy(&cfg, None).unwrap();
        assert_eq!(r.steps, 3);
        assert_eq!(r.epochs.iter().map(|e| e.steps).sum::<usize>(), 3);
    }

    #[test]
    fn batch_loss_matches_plain_composite() {
        let cfg = tiny_config();
        let data = toy_dataset(&cfg.data).unwrap();
        let model = SpamoeModel::new(cfg.model.clone()).unwrap();
        let batch: Vec<&Sample> = data.iter().take(3).collect();
        let (loss, _) = batch_gradients(&model, &batch, &cfg.weights).unwrap();
        let preds: Vec<_> = batch.iter().map(|(x, _)| model.predict(x).unwrap()).collect();
        let decisions: Vec<_> = preds.iter().map(|(_, d)| d.clone()).collect();
        let mut want = 0.0;
        for ((y_hat, d), (_, y)) in preds.iter().zip(&batch) {
            let l = crate::loss::composite_loss(y_hat, y, std::slice::from_ref(d), 3, &cfg.weights).unwrap();
            want += (l.total - cfg.weights.ce * l.load_balance) / 3.0;
        }
        want += cfg.weights.ce * cv_squared(&importance(&decisions, 3).unwrap());
        assert!((loss.total - want).abs() < 1e-10, "{} vs {want}", loss.total);
    }

    #[test]
    fn batch_gradient_matches_differences_for_load_balance() {
        // Only the load-balance weight is on, so the loss depends on the
        // router through α alone.
        let mut cfg = tiny_config();
        cfg.weights = LossWeights { grad: 0.0, freq: 0.0, ce: 1.0, l1: 0.0, l2: 0.0 };
        let data = toy_dataset(&cfg.data).unwrap();
        let model = SpamoeModel::new(cfg.model.clone()).unwrap();
        let batch: Vec<&Sample> = data.iter().take(3).collect();
        let (_, grads) = batch_gradients(&model, &batch, &cfg.weights).unwrap();
        let id = model.router.b2;
        for k in 0..3 {
            let h = 1e-6;
            let mut p = model.clone();
            p.params.get_mut(id).data_mut()[k] += h;
            let mut m = model.clone();
            m.params.get_mut(id).data_mut()[k] -= h;
            let fd = (batch_gradients(&p, &batch, &cfg.weights).unwrap().0.total
                - batch_gradients(&m, &batch, &cfg.weights).unwrap().0.total)
                / (2.0 * h);
            let an = grads[id.0].data()[k];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "b2[{k}]: {fd} vs {an}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let (model, r) = train_toy(&cfg, Some(dir.path())).unwrap();
        let (back, man) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(man.step, r.steps);
        let log = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 1 + cfg.epochs);
        assert!(dir.path().join("report.json").exists());
    }
}
