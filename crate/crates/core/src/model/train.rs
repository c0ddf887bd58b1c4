use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::loss_with_grad;
use super::network::{backward_example, forward_example};
use super::params::{Hyper, ModelParams, Weights};
use crate::error::{Error, Result};
use crate::masking::{mask_for_epoch, MaskConfig, Task};
use crate::rng::sub_stream;
use crate::signal::{windows, Recording, WindowSpec};

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
/// Validation masks use this pseudo-epoch so every epoch scores the same masks.
const VALIDATION_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub window: WindowSpec,
    pub median_window: usize,
    /// Fraction of training subjects held out for checkpoint selection.
    pub validation_fraction: f64,
    /// Explicit validation subjects; overrides `validation_fraction`.
    pub validation_subjects: Option<Vec<String>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 12,
            learning_rate: 1e-4,
            warmup_ratio: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 42,
            window: WindowSpec::default(),
            median_window: 3,
            validation_fraction: 0.1,
            validation_subjects: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        WindowSpec::new(self.window.window_len, self.window.stride)?;
        Ok(())
    }
}

/// Linear warmup from zero to the peak rate, then linear decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        Self {
            peak,
            warmup_steps: (warmup_ratio * total_steps as f64).floor() as usize,
            total_steps,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.peak * step as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            let span = (self.total_steps - self.warmup_steps) as f64;
            self.peak * (self.total_steps - step) as f64 / span
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Weights, lr: f64) {
        let learned_pos = params.learned_pos();
        let grad_blocks = grads.blocks(learned_pos);
        let mut blocks = params.weights.blocks_mut(learned_pos);
        if self.m.is_empty() {
            self.m = blocks.iter().map(|b| vec![0.0; b.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in blocks
            .iter_mut()
            .zip(&grad_blocks)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decay = if p.decay { 1.0 - lr * self.weight_decay } else { 1.0 };
            for (((w, &gi), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// A preprocessed recording and whether its labels may be used.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub recording: Recording,
    pub labeled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub last_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub total_steps: usize,
    pub train_subjects: Vec<String>,
    pub validation_subjects: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Partitions subject ids into `(train, validation)`. Validation takes
/// `ceil(fraction · n)` subjects, chosen by a seeded shuffle, unless an
/// explicit list is configured.
pub fn split_by_subject(subjects: &[String], cfg: &TrainConfig) -> Result<(Vec<String>, Vec<String>)> {
    let all: BTreeSet<&String> = subjects.iter().collect();
    let val: BTreeSet<String> = match &cfg.validation_subjects {
        Some(v) => v.iter().cloned().collect(),
        None => {
            let mut order: Vec<&String> = all.iter().copied().collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            let n = (cfg.validation_fraction * all.len() as f64).ceil() as usize;
            order.into_iter().take(n).cloned().collect()
        }
    };
    let train: Vec<String> = all.iter().filter(|s| !val.contains(**s)).map(|s| s.to_string()).collect();
    let val: Vec<String> = all.iter().filter(|s| val.contains(**s)).map(|s| s.to_string()).collect();
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    if train.is_empty() {
        return Err(Error::Config("no training subjects left after the validation split".into()));
    }
    Ok((train, val))
}

struct WindowRef<'a> {
    emg: ndarray::ArrayView2<'a, f64>,
    labels: Option<&'a [usize]>,
}

fn collect_windows<'a>(items: &[&'a TrainItem], spec: WindowSpec) -> Vec<WindowRef<'a>> {
    items
        .iter()
        .flat_map(|it| {
            windows(&it.recording, spec).windows.into_iter().map(move |w| WindowRef {
                emg: w.emg,
                labels: it.labeled.then_some(w.labels),
            })
        })
        .collect()
}

fn tasks_for(w: &WindowRef) -> &'static [Task] {
    if w.labels.is_some() {
        &Task::SUPERVISED
    } else {
        &[Task::SelfSupervisedEmg]
    }
}

fn validation_loss(windows: &[WindowRef], params: &ModelParams, mask_cfg: &MaskConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (id, w) in windows.iter().enumerate() {
        for &task in tasks_for(w) {
            let ex = mask_for_epoch(w.emg, w.labels, task, mask_cfg, VALIDATION_EPOCH, id as u64)?;
            let (out, _) = forward_example(&ex, params, None)?;
            total += loss_with_grad(out.emg.view(), out.intent_logits.view(), &ex)?.0.total;
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Trains on `items` (already preprocessed), selecting the epoch with the
/// lowest validation loss. `init` continues from existing parameters;
/// otherwise parameters are initialised from the seed.
pub fn train(
    items: &[TrainItem],
    hyper: Hyper,
    mask_cfg: &MaskConfig,
    cfg: &TrainConfig,
    init: Option<ModelParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    mask_cfg.validate()?;
    hyper.validate()?;
    if items.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if hyper.window_len != cfg.window.window_len {
        return Err(Error::Config(format!(
            "model window {} differs from training window {}",
            hyper.window_len, cfg.window.window_len
        )));
    }
    for it in items {
        let r = &it.recording;
        if r.channels() != hyper.channels || r.num_classes() != hyper.classes {
            return Err(Error::Config(format!(
                "recording {}/{} has {} channels and {} classes, model expects {} and {}",
                r.subject_id,
                r.session_id,
                r.channels(),
                r.num_classes(),
                hyper.channels,
                hyper.classes
            )));
        }
    }

    let subjects: Vec<String> = items.iter().map(|i| i.recording.subject_id.clone()).collect();
    let (train_subjects, val_subjects) = split_by_subject(&subjects, cfg)?;
    let train_items: Vec<&TrainItem> = items
        .iter()
        .filter(|i| train_subjects.contains(&i.recording.subject_id))
        .collect();
    let val_items: Vec<&TrainItem> = items
        .iter()
        .filter(|i| val_subjects.contains(&i.recording.subject_id))
        .collect();
    let train_windows = collect_windows(&train_items, cfg.window);
    let val_windows = collect_windows(&val_items, cfg.window);
    if train_windows.is_empty() {
        return Err(Error::Config("no training windows (recordings shorter than the window?)".into()));
    }
    if val_windows.is_empty() {
        return Err(Error::Config("validation subjects yield no windows".into()));
    }

    let mut params = match init {
        Some(p) => {
            if p.hyper != hyper {
                return Err(Error::Config("initial checkpoint has a different architecture".into()));
            }
            p
        }
        None => ModelParams::init(hyper, &mut sub_stream(cfg.seed, &[0]))?,
    };

    let schedule_items: Vec<(usize, Task)> = train_windows
        .iter()
        .enumerate()
        .flat_map(|(id, w)| tasks_for(w).iter().map(move |&t| (id, t)))
        .collect();
    let steps_per_epoch = schedule_items.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule::new(cfg.learning_rate, cfg.warmup_ratio, steps_per_epoch * cfg.epochs);
    let mut opt = AdamW::new(cfg);
    log::info!(
        "training on {} windows ({} examples/epoch, {} steps), validating on {} windows",
        train_windows.len(),
        schedule_items.len(),
        schedule.total_steps,
        val_windows.len()
    );

    let mut log = TrainLog {
        total_steps: schedule.total_steps,
        train_subjects,
        validation_subjects: val_subjects,
        ..Default::default()
    };
    let mut best: Option<(f64, Weights)> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order = schedule_items.clone();
        order.shuffle(&mut sub_stream(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = params.zero_grads();
            for (i, &(id, task)) in batch.iter().enumerate() {
                let w = &train_windows[id];
                let ex = mask_for_epoch(w.emg, w.labels, task, mask_cfg, epoch as u64, id as u64)?;
                let mut rng = sub_stream(cfg.seed, &[DROPOUT_STREAM, step as u64, i as u64]);
                let (out, cache) = forward_example(&ex, &params, Some(&mut rng))?;
                let (l, d_emg, d_logits) =
                    loss_with_grad(out.emg.view(), out.intent_logits.view(), &ex)?;
                backward_example(&ex, &params, &cache, d_emg.view(), d_logits.view(), &mut grads);
                epoch_loss += l.total;
            }
            grads.scale(1.0 / batch.len() as f64);
            lr = schedule.at(step);
            opt.step(&mut params, &grads, lr);
            step += 1;
            log::debug!("epoch {epoch} batch {b} lr {lr:.3e}");
        }
        let train_loss = epoch_loss / order.len() as f64;
        let val_loss = validation_loss(&val_windows, &params, mask_cfg)?;
        log::info!("epoch {}: train {train_loss:.5} val {val_loss:.5}", epoch + 1);
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            last_lr: lr,
        });
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, params.weights.clone()));
            log.best_epoch = epoch + 1;
        }
    }
    if let Some((_, w)) = best {
        params.weights = w;
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_continuity() {
        let s = LrSchedule::new(1e-4, 0.05, 1000);
        assert_eq!(s.warmup_steps, 50);
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(50), 1e-4);
        assert!((s.at(49) - 1e-4 * 49.0 / 50.0).abs() < 1e-18);
        assert!((s.at(51) - 1e-4 * 949.0 / 950.0).abs() < 1e-18);
        assert_eq!(s.at(1000), 0.0);
        // piecewise linear with its peak at the end of warmup
        let peak = (0..1000).map(|i| s.at(i)).fold(0.0, f64::max);
        assert_eq!(peak, s.at(50));
    }

    #[test]
    fn schedule_without_warmup_starts_at_peak() {
        let s = LrSchedule::new(1e-3, 0.0, 10);
        assert_eq!(s.at(0), 1e-3);
    }

    #[test]
    fn subject_split_is_disjoint() {
        let subjects: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let (tr, va) = split_by_subject(&subjects, &TrainConfig::default()).unwrap();
        assert_eq!(va.len(), 1);
        assert_eq!(tr.len(), 9);
        assert!(tr.iter().all(|s| !va.contains(s)));

        let one = vec!["only".to_string()];
        let cfg = TrainConfig {
            validation_fraction: 0.0,
            ..Default::default()
        };
        assert!(matches!(split_by_subject(&one, &cfg), Err(Error::Config(_))));
    }
}
