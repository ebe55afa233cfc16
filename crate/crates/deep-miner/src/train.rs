//! Adam, the warmup/decay learning-rate schedule, the training loop and the
//! erasing-threshold ablation harness.

use std::collections::HashMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DataSource, TrainConfig};
use crate::data::{augment, load_dir, stack_images, synth_dataset, PkSampler};
use crate::error::{Error, Result};
use crate::losses::{total_loss, update_centers, BranchLossTerms, CenterTable, LossConfig};
use crate::metrics::{evaluate_model, EvalResult};
use crate::model::{build_model, save_checkpoint, DeepMiner};
use crate::nn::{Mode, ParamStore};
use crate::tensor::Tape;

/// Adam optimizer state: per-parameter moment buffers keyed by name.
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: HashMap::new(),
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter, reading
/// gradients off the tensors (absent gradients count as zero).
pub fn adam_step(store: &ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, param) in store.trainable() {
        let n = param.numel();
        let grad = param.grad();
        if let Some(g) = &grad {
            if g.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "gradient of {name} has {} entries for {n} parameters",
                    g.len()
                )));
            }
        }
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let (beta1, beta2, eps) = (state.beta1, state.beta2, state.eps);
        param.update_data(|data| {
            for i in 0..n {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
    Ok(())
}

/// Warmup then piecewise decay: linear interpolation from `warmup_start` to
/// `base_lr` over the warmup epochs, base rate afterwards, divided by
/// 1/decay_factor per decay epoch reached (division keeps the decayed rates
/// exactly on the configured values).
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let lr = if epoch < cfg.warmup_epochs {
        cfg.warmup_start
            + (cfg.base_lr - cfg.warmup_start) * epoch as f64 / cfg.warmup_epochs as f64
    } else {
        cfg.base_lr
    };
    let decays = cfg.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    if decays == 0 {
        lr
    } else {
        lr / (1.0 / cfg.decay_factor).powi(decays as i32)
    }
}

/// Aggregated record of one training epoch.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    pub mean_total: f64,
    /// Per-branch mean loss terms over the epoch's batches.
    pub branch_means: Vec<BranchLossTerms>,
    /// (mAP, Rank-1) when this epoch was evaluated.
    pub eval: Option<(f64, f64)>,
}

pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// (epoch, mAP) of the best evaluation, if any ran.
    pub best: Option<(usize, f64)>,
    pub final_eval: Option<EvalResult>,
}

/// Outcome of a full training run: the trained model plus its history.
pub struct TrainOutcome {
    pub model: DeepMiner,
    pub history: TrainingHistory,
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_logger(cfg, |_| {})
}

/// Runs the training loop, invoking `on_epoch` after each epoch record is
/// complete. Fully deterministic given the config's seed.
pub fn train_with_logger(
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let full = match &cfg.data {
        DataSource::Synth {
            num_ids,
            per_id,
            num_cams,
        } => synth_dataset(
            *num_ids,
            *per_id,
            *num_cams,
            cfg.model.input_h,
            cfg.model.input_w,
            cfg.seed,
        )?,
        DataSource::Dir(path) => load_dir(path, cfg.model.input_h, cfg.model.input_w)?.dataset,
    };
    let (train_ds, eval_ds) = if cfg.eval_holdout > 0 {
        full.split_holdout(cfg.eval_holdout)
    } else {
        // no holdout: evaluate on the training samples themselves
        let copy = full.split_holdout(0).0;
        (full, copy)
    };
    if train_ds.is_empty() {
        return Err(Error::InvalidCount(
            "holdout left no training samples".into(),
        ));
    }

    let mut model_cfg = cfg.model.clone();
    model_cfg.num_identities = train_ds.num_identities();
    let model = build_model(&model_cfg, cfg.seed)?;
    let loss_cfg = LossConfig {
        lambda: cfg.lambda_center,
        epsilon: cfg.label_smoothing,
        num_classes: model_cfg.num_identities,
    };
    let centers = CenterTable::for_model(&model, cfg.center_lr);
    let mut adam = AdamState::new();
    let mut sampler = PkSampler::new(&train_ds, cfg.batch_p, cfg.batch_k, cfg.seed)?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(11);

    let mut history = TrainingHistory {
        records: Vec::with_capacity(cfg.epochs),
        best: None,
        final_eval: None,
    };

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let batches = sampler.epoch();
        let mut epoch_total = 0.0;
        let mut term_sums: Vec<BranchLossTerms> = Vec::new();
        for batch in &batches {
            let images: Vec<_> = batch
                .sample_indices
                .iter()
                .map(|&i| {
                    augment(
                        &train_ds.samples[i].image,
                        cfg.flip_p,
                        cfg.erase_p,
                        &mut aug_rng,
                    )
                })
                .collect();
            let input = stack_images(images.iter())?;
            let tape = Tape::new();
            let outputs = model.forward(&tape, &input, Mode::Train)?;
            let (loss, breakdown) = total_loss(&tape, &outputs, &batch.labels, &centers, &loss_cfg)?;
            if let Some(bad) = breakdown
                .iter()
                .find(|b| !(b.id.is_finite() && b.triplet.is_finite() && b.center.is_finite()))
            {
                return Err(Error::TrainAbort(format!(
                    "non-finite loss in branch {} (id {}, triplet {}, center {})",
                    bad.branch, bad.id, bad.triplet, bad.center
                )));
            }
            epoch_total += loss.item();
            accumulate_terms(&mut term_sums, &breakdown);
            tape.backward(&loss)?;
            adam_step(model.store(), &mut adam, lr)?;
            for bf in &outputs.branches {
                if let Some(matrix) = centers.get(bf.branch) {
                    update_centers(&bf.f, &batch.labels, matrix, centers.lr);
                }
            }
            model.store().zero_grads();
        }
        let nb = batches.len().max(1) as f64;
        for t in &mut term_sums {
            t.id /= nb;
            t.triplet /= nb;
            t.center /= nb;
            t.total /= nb;
        }

        let due = cfg.eval_interval > 0
            && ((epoch + 1) % cfg.eval_interval == 0 || epoch + 1 == cfg.epochs);
        let mut eval_summary = None;
        if due {
            let result = evaluate_model(&model, &eval_ds, &eval_ds, cfg.k_max)?;
            eval_summary = Some((result.map, result.rank(1)));
            let improved = history.best.map_or(true, |(_, best)| result.map >= best);
            if improved {
                history.best = Some((epoch, result.map));
                if let Some(path) = &cfg.checkpoint {
                    save_checkpoint(&model, path)?;
                }
            }
            history.final_eval = Some(result);
        }

        let record = EpochRecord {
            epoch,
            lr,
            batches: batches.len(),
            mean_total: epoch_total / nb,
            branch_means: term_sums,
            eval: eval_summary,
        };
        on_epoch(&record);
        history.records.push(record);
    }

    Ok(TrainOutcome { model, history })
}

fn accumulate_terms(sums: &mut Vec<BranchLossTerms>, batch: &[BranchLossTerms]) {
    if sums.is_empty() {
        sums.extend(batch.iter().cloned());
        return;
    }
    for (acc, b) in sums.iter_mut().zip(batch) {
        acc.id += b.id;
        acc.triplet += b.triplet;
        acc.center += b.center;
        acc.total += b.total;
    }
}

/// One row of the threshold ablation: tau, mAP, Rank-1.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub tau: f64,
    pub map: f64,
    pub rank1: f64,
}

pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl std::fmt::Display for AblationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "tau     mAP      Rank-1")?;
        for row in &self.rows {
            writeln!(f, "{:<7} {:.6} {:.6}", row.tau, row.map, row.rank1)?;
        }
        Ok(())
    }
}

/// Trains one model per threshold with identical seeds and reports the final
/// retrieval quality of each. Requires a single-erased-branch config.
pub fn ablate_threshold(cfg: &TrainConfig, taus: &[f64]) -> Result<AblationReport> {
    if cfg.model.ie_positions.len() != 1 {
        return Err(Error::ConfigInvalid(format!(
            "threshold ablation expects exactly one erased branch, config has {:?}",
            cfg.model.ie_positions
        )));
    }
    if taus.is_empty() {
        return Err(Error::InvalidHyperparam("no thresholds given".into()));
    }
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut run_cfg = cfg.clone();
        run_cfg.model.tau = tau;
        run_cfg.checkpoint = None;
        let outcome = train(&run_cfg)?;
        let eval = outcome.history.final_eval.as_ref().ok_or_else(|| {
            Error::ConfigInvalid("ablation config must evaluate (eval_interval > 0)".into())
        })?;
        rows.push(AblationRow {
            tau,
            map: eval.map,
            rank1: eval.rank(1),
        });
    }
    Ok(AblationReport { rows })
}

/// The default checkpoint path helper for CLI runs.
pub fn default_checkpoint_path() -> PathBuf {
    PathBuf::from("deep-miner.dmkt")
}
