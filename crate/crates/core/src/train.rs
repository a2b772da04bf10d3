//! Dice losses and the training loop (gradient accumulation, validation-DSC
//! model selection, patience-based stopping).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval::dsc;
use crate::models::{Checkpoint, UNet};
use crate::nn::{Adam, AdamConfig, Tensor};

pub const DICE_SMOOTH: f64 = 1e-5;

fn check_lengths(pred: usize, target: usize) -> Result<()> {
    if pred != target {
        return Err(invalid!(
            "dice loss shape mismatch: {pred} vs {target} voxels"
        ));
    }
    Ok(())
}

/// Soft Dice loss `1 - (2 sum(p t) + s) / (sum p + sum t + s)` over one
/// channel, accumulated in 64-bit.
pub fn dice_loss<T: Copy + Into<f64>>(pred: &[T], target: &[T], smooth: f64) -> Result<f64> {
    check_lengths(pred.len(), target.len())?;
    let (mut i, mut p, mut t) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in pred.iter().zip(target) {
        let (a, b) = (a.into(), b.into());
        i += a * b;
        p += a;
        t += b;
    }
    Ok(1.0 - (2.0 * i + smooth) / (p + t + smooth))
}

/// Dice loss and its gradient with respect to `pred`.
pub fn dice_loss_with_grad<T: Copy + Into<f64>>(
    pred: &[T],
    target: &[T],
    smooth: f64,
) -> Result<(f64, Vec<f64>)> {
    check_lengths(pred.len(), target.len())?;
    let (mut i, mut p, mut t) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in pred.iter().zip(target) {
        let (a, b) = (a.into(), b.into());
        i += a * b;
        p += a;
        t += b;
    }
    let num = 2.0 * i + smooth;
    let den = p + t + smooth;
    let inv_den2 = 1.0 / (den * den);
    let grad = target
        .iter()
        .map(|&b| (num - 2.0 * b.into() * den) * inv_den2)
        .collect();
    Ok((1.0 - num / den, grad))
}

/// Loss of one prediction against its target, with gradient. One head:
/// Dice on channel 0. Two heads: `(1 - lambda) * dice(ch0, mask) + lambda *
/// dice(ch1, box mask)`; the target must then carry the box mask as its
/// second channel.
pub fn composite_loss(
    pred: &Tensor,
    target: &Tensor,
    lambda: f64,
    smooth: f64,
) -> Result<(f64, Tensor)> {
    if pred.dims != target.dims {
        return Err(invalid!(
            "prediction dims {:?} differ from target dims {:?}",
            pred.dims,
            target.dims
        ));
    }
    let mut grad = Tensor::zeros(pred.channels, pred.dims);
    let weights: Vec<f64> = match pred.channels {
        1 => vec![1.0],
        2 => {
            if target.channels < 2 {
                return Err(invalid!(
                    "dual-output training needs a box-mask target channel"
                ));
            }
            if !(0.0..=1.0).contains(&lambda) {
                return Err(invalid!(
                    "dual loss weight must lie in [0, 1], got {lambda}"
                ));
            }
            vec![1.0 - lambda, lambda]
        }
        n => return Err(invalid!("unsupported head count {n}")),
    };
    let mut loss = 0.0;
    for (c, &w) in weights.iter().enumerate() {
        let (l, g) = dice_loss_with_grad(pred.channel(c), target.channel(c), smooth)?;
        loss += w * l;
        for (dst, gv) in grad.channel_mut(c).iter_mut().zip(g) {
            *dst = (w * gv) as f32;
        }
    }
    Ok((loss, grad))
}

/// One training or validation example. `target` channel 0 is the tumor
/// mask; channel 1 (dual-output students) the rasterized box mask.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub case_id: String,
    pub input: Tensor,
    pub target: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub physical_batch: usize,
    pub virtual_batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub dual_loss_weight: f64,
    pub smooth: f64,
    pub threshold: f32,
    pub seed: u64,
    pub shuffle: bool,
    /// Stop as soon as validation DSC reaches this value.
    pub target_dsc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            physical_batch: 1,
            virtual_batch: 8,
            max_epochs: 100,
            patience: 20,
            dual_loss_weight: 0.5,
            smooth: DICE_SMOOTH,
            threshold: 0.5,
            seed: 0,
            shuffle: true,
            target_dsc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(invalid!("learning_rate must be positive"));
        }
        if self.physical_batch == 0 || self.virtual_batch < self.physical_batch {
            return Err(invalid!(
                "need 1 <= physical_batch ({}) <= virtual_batch ({})",
                self.physical_batch,
                self.virtual_batch
            ));
        }
        if !self.virtual_batch.is_multiple_of(self.physical_batch) {
            return Err(invalid!(
                "virtual_batch must be a multiple of physical_batch"
            ));
        }
        if self.max_epochs == 0 {
            return Err(invalid!("max_epochs must be at least 1"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_dsc: f64,
    pub wall_time_s: f64,
    pub optimizer_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_dsc: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub stop_reason: String,
}

impl TrainLog {
    /// Reads a line-delimited log: one epoch record per line and a final
    /// summary line.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<TrainLog> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut log = TrainLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value =
                serde_json::from_str(line).map_err(|e| Error::json(path, e))?;
            if v.get("epoch").is_some() {
                log.epochs
                    .push(serde_json::from_value(v).map_err(|e| Error::json(path, e))?);
            } else {
                let summary: TrainLog =
                    serde_json::from_value(v).map_err(|e| Error::json(path, e))?;
                log.best_epoch = summary.best_epoch;
                log.best_validation_dsc = summary.best_validation_dsc;
                log.best_checkpoint = summary.best_checkpoint;
                log.stop_reason = summary.stop_reason;
            }
        }
        Ok(log)
    }
}

/// Patience rule on a score that should increase. Epochs count from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_epoch: usize,
    pub best_value: f64,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_epoch: 0,
            best_value: f64::NEG_INFINITY,
        }
    }

    /// Records the score of `epoch`; returns (improved, should_stop).
    pub fn update(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        let improved = value > self.best_value;
        if improved {
            self.best_value = value;
            self.best_epoch = epoch;
        }
        (improved, epoch - self.best_epoch >= self.patience)
    }
}

/// Where training writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub config_hash: String,
    pub metadata: serde_json::Value,
}

#[derive(Debug)]
pub struct TrainResult {
    pub best: Checkpoint,
    pub model: UNet,
    pub log: TrainLog,
}

/// Sample indices for one epoch: each sample repeated by its weight, then
/// shuffled with a per-epoch seed.
pub fn epoch_order(weights: &[u32], seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = weights
        .iter()
        .enumerate()
        .flat_map(|(i, &w)| std::iter::repeat_n(i, w as usize))
        .collect();
    if shuffle {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
    }
    order
}

fn binarize(values: &[f32], dims: [usize; 3], threshold: f32) -> Array3<f32> {
    Array3::from_shape_vec(
        dims,
        values
            .iter()
            .map(|&v| (v >= threshold) as u8 as f32)
            .collect(),
    )
    .expect("channel length matches dims")
}

/// Mean DSC of the thresholded channel 0 against target channel 0.
pub fn validate(model: &UNet, samples: &[TrainSample], threshold: f32) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        let out = model.forward_one(&s.input)?;
        let p = binarize(out.channel(0), out.dims, threshold);
        let g = binarize(s.target.channel(0), s.target.dims, 0.5);
        total += dsc(&p, &g)?;
    }
    Ok(total / samples.len() as f64)
}

/// Runs one epoch of accumulated-gradient training; returns the mean loss.
/// Each physical batch's loss is the mean over its samples; an optimizer
/// step averages the accumulated physical-batch gradients.
pub fn train_epoch(
    model: &mut UNet,
    adam: &mut Adam,
    train: &[TrainSample],
    order: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let per_step = cfg.virtual_batch / cfg.physical_batch;
    let mut loss_sum = 0.0;
    let mut pending = 0usize;
    model.zero_grad();
    for batch in order.chunks(cfg.physical_batch) {
        let scale = 1.0 / batch.len() as f32;
        for &i in batch {
            let s = &train[i];
            let tape = model.forward_train(&s.input)?;
            let (loss, mut grad) =
                composite_loss(tape.output(), &s.target, cfg.dual_loss_weight, cfg.smooth)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss on case {} after {} optimizer steps",
                    s.case_id,
                    adam.steps_taken()
                )));
            }
            loss_sum += loss;
            grad.data.iter_mut().for_each(|g| *g *= scale);
            model.backward(&tape, &grad)?;
        }
        pending += 1;
        if pending == per_step {
            adam.step(&mut model.params_mut(), 1.0 / pending as f32);
            model.zero_grad();
            pending = 0;
        }
    }
    if pending > 0 {
        adam.step(&mut model.params_mut(), 1.0 / pending as f32);
        model.zero_grad();
    }
    if model
        .params()
        .iter()
        .any(|p| p.value.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Divergence(format!(
            "non-finite parameters after {} optimizer steps",
            adam.steps_taken()
        )));
    }
    Ok(loss_sum / order.len().max(1) as f64)
}

/// Trains until `max_epochs`, patience exhaustion or `target_dsc`, keeping
/// the parameters with the highest validation DSC. An empty validation set
/// falls back to scoring the training samples.
pub fn train_model(
    mut model: UNet,
    train: &[TrainSample],
    weights: Option<&[u32]>,
    validation: &[TrainSample],
    cfg: &TrainConfig,
    out: &TrainOutput,
) -> Result<TrainResult> {
    cfg.validate()?;
    crate::nn::flush_subnormals();
    if train.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    let heads = model.spec().heads;
    for s in train.iter().chain(validation) {
        model.spec().check_input(s.input.channels, s.input.dims)?;
        if s.target.channels < heads {
            return Err(invalid!(
                "case {} has {} target channel(s) but the model has {heads} head(s)",
                s.case_id,
                s.target.channels
            ));
        }
    }
    let unit = vec![1u32; train.len()];
    let weights = weights.unwrap_or(&unit);
    if weights.len() != train.len() {
        return Err(invalid!(
            "{} weights for {} samples",
            weights.len(),
            train.len()
        ));
    }
    let val_set = if validation.is_empty() {
        train
    } else {
        validation
    };

    let mut log_file = match &out.log_path {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };
    let mut write_line = |value: serde_json::Value| -> Result<()> {
        if let (Some(f), Some(p)) = (log_file.as_mut(), out.log_path.as_ref()) {
            writeln!(f, "{value}").map_err(|e| Error::io(p, e))?;
            f.flush().map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    };

    let mut adam = Adam::new(cfg.adam());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut log = TrainLog::default();
    let mut best_params = model.parameter_vector();
    let mut stop_reason = format!("reached max_epochs ({})", cfg.max_epochs);
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let order = epoch_order(weights, cfg.seed, epoch, cfg.shuffle);
        let train_loss = train_epoch(&mut model, &mut adam, train, &order, cfg)?;
        let validation_dsc = validate(&model, val_set, cfg.threshold)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            validation_dsc,
            wall_time_s: started.elapsed().as_secs_f64(),
            optimizer_steps: adam.steps_taken(),
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.4}, validation DSC {validation_dsc:.4} ({:.1} s)",
            record.wall_time_s
        );
        write_line(serde_json::json!(record))?;
        log.epochs.push(record);

        let (improved, stop) = stopper.update(epoch, validation_dsc);
        if improved {
            best_params = model.parameter_vector();
            if let Some(p) = &out.checkpoint_path {
                checkpoint_of(&model, epoch, validation_dsc, out).save(p)?;
            }
        }
        if cfg.target_dsc.is_some_and(|t| validation_dsc >= t) {
            stop_reason = format!("validation DSC reached target at epoch {epoch}");
            break;
        }
        if stop {
            stop_reason = format!("no improvement for {} epochs", cfg.patience);
            break;
        }
    }

    model.load_parameter_vector(&best_params)?;
    log.best_epoch = stopper.best_epoch;
    log.best_validation_dsc = stopper.best_value;
    log.best_checkpoint = out.checkpoint_path.clone();
    log.stop_reason = stop_reason;
    let summary = TrainLog {
        epochs: Vec::new(),
        ..log.clone()
    };
    write_line(serde_json::json!(summary))?;
    let best = checkpoint_of(&model, log.best_epoch, log.best_validation_dsc, out);
    Ok(TrainResult { best, model, log })
}

fn checkpoint_of(model: &UNet, epoch: usize, dsc: f64, out: &TrainOutput) -> Checkpoint {
    let mut meta = match &out.metadata {
        serde_json::Value::Object(m) => m.clone(),
        _ => serde_json::Map::new(),
    };
    meta.insert("epoch".into(), epoch.into());
    meta.insert("validation_dsc".into(), dsc.into());
    Checkpoint::from_model(
        model,
        out.config_hash.clone(),
        serde_json::Value::Object(meta),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelSpec};
    use rand::Rng;

    #[test]
    fn dice_examples() {
        let t = vec![1.0f64; 8];
        assert!(dice_loss(&t, &t, DICE_SMOOTH).unwrap() < 1e-5);
        let p = vec![1e-9f64; 512];
        let t = vec![1.0f64; 512];
        assert!(dice_loss(&p, &t, DICE_SMOOTH).unwrap() > 0.999);
        let p = vec![0.5f64; 64];
        let t: Vec<f64> = (0..64).map(|i| (i < 32) as u8 as f64).collect();
        assert!((dice_loss(&p, &t, DICE_SMOOTH).unwrap() - 0.5).abs() < 1e-6);
        assert!(dice_loss(&p, &t[..63], DICE_SMOOTH).is_err());
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<f64> = (0..64).map(|_| rng.random_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..64).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        let (_, g) = dice_loss_with_grad(&p, &t, DICE_SMOOTH).unwrap();
        let h = 1e-6;
        for i in 0..64 {
            let mut a = p.clone();
            let mut b = p.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (dice_loss(&a, &t, DICE_SMOOTH).unwrap()
                - dice_loss(&b, &t, DICE_SMOOTH).unwrap())
                / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-8),
                "{fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn composite_weights() {
        let dims = [2, 2, 2];
        let mask = Tensor::from_vec(1, dims, vec![1., 1., 0., 0., 0., 0., 0., 0.]).unwrap();
        let boxm = Tensor::from_vec(1, dims, vec![1., 1., 1., 1., 0., 0., 0., 0.]).unwrap();
        let target = Tensor::concat(&mask, &boxm);
        let pred = Tensor::concat(&mask, &boxm);
        for lambda in [0.0, 0.5, 1.0] {
            assert!(
                composite_loss(&pred, &target, lambda, DICE_SMOOTH)
                    .unwrap()
                    .0
                    < 1e-5
            );
        }
        let wrong_box = Tensor::concat(&mask, &Tensor::zeros(1, dims));
        let (l0, _) = composite_loss(&wrong_box, &target, 0.0, DICE_SMOOTH).unwrap();
        assert!(l0 < 1e-5);
        assert!(composite_loss(&pred, &mask, 0.5, DICE_SMOOTH).is_err());
    }

    #[test]
    fn patience_rule() {
        let mut s = EarlyStopping::new(5);
        let mut stopped_at = None;
        for epoch in 1..=20 {
            let (_, stop) = s.update(epoch, 1.0 - epoch as f64 * 0.01);
            if stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn epoch_order_repeats_by_weight() {
        let o = epoch_order(&[1, 3, 2], 9, 1, true);
        assert_eq!(o.len(), 6);
        assert_eq!(o.iter().filter(|&&i| i == 1).count(), 3);
        assert_eq!(o, epoch_order(&[1, 3, 2], 9, 1, true));
        assert_eq!(epoch_order(&[2, 1], 0, 1, false), vec![0, 0, 1]);
    }

    fn tiny_samples(n: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let dims = [4, 4, 4];
                let input: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
                let target: Vec<f32> = input.iter().map(|&v| (v > 0.3) as u8 as f32).collect();
                TrainSample {
                    case_id: format!("s{i}"),
                    input: Tensor::from_vec(1, dims, input).unwrap(),
                    target: Tensor::from_vec(1, dims, target).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn one_step_per_epoch_of_eight() {
        let spec = ModelSpec::so_student().with_base_channels(2);
        let spec = ModelSpec { levels: 2, ..spec };
        let model = build_model(&spec).unwrap();
        let cfg = TrainConfig {
            max_epochs: 2,
            ..Default::default()
        };
        let r = train_model(
            model,
            &tiny_samples(8, 1),
            None,
            &[],
            &cfg,
            &TrainOutput::default(),
        )
        .unwrap();
        assert_eq!(r.log.epochs[0].optimizer_steps, 1);
        assert_eq!(r.log.epochs[1].optimizer_steps, 2);
    }

    #[test]
    fn empty_train_set_rejected() {
        let model = build_model(&ModelSpec::so_student().with_base_channels(2)).unwrap();
        let e = train_model(
            model,
            &[],
            None,
            &[],
            &TrainConfig::default(),
            &TrainOutput::default(),
        );
        assert!(matches!(e, Err(Error::Validation(_))));
    }
}
