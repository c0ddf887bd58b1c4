//! Mask generation for the four masked-reconstruction training tasks.
//!
//! EMG masks are channel-aligned: a masked timestep hides every channel, so an
//! EMG mask is stored as a sorted list of timesteps and expanded to
//! `(t, c)` pairs on demand.
//!
//! Masks are re-drawn every epoch. Each `(epoch, window_id)` pair owns an
//! independent ChaCha stream derived from the configured seed, so masks are
//! reproducible bit-for-bit and can be assembled in any order.

use ndarray::ArrayView2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sub_stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Predict masked intent from unmasked EMG.
    ActionRecon,
    /// Reconstruct masked EMG conditioned on visible intent.
    EmgRecon,
    /// Mask the same timesteps in both modalities.
    JointRecon,
    /// Unlabeled data: all intent masked, EMG may not attend to intent.
    SelfSupervisedEmg,
}

impl Task {
    /// Tasks each labeled window is duplicated across.
    pub const SUPERVISED: [Task; 3] = [Task::ActionRecon, Task::EmgRecon, Task::JointRecon];

    fn index(self) -> u64 {
        match self {
            Task::ActionRecon => 0,
            Task::EmgRecon => 1,
            Task::JointRecon => 2,
            Task::SelfSupervisedEmg => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskType {
    Span,
    EndOfWindow,
    Transition,
}

/// Mixture weights over mask types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub span: f64,
    pub end: f64,
    #[serde(default)]
    pub transition: f64,
}

impl Mixture {
    fn validate(&self, allow_transition: bool, what: &str) -> Result<()> {
        let w = [self.span, self.end, self.transition];
        if w.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Config(format!("{what} mixture has a negative weight")));
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("{what} mixture does not sum to 1")));
        }
        if !allow_transition && self.transition != 0.0 {
            return Err(Error::Config(format!(
                "{what} mixture: transition masking applies only to action reconstruction"
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> MaskType {
        let u: f64 = rng.gen();
        if u < self.span {
            MaskType::Span
        } else if u < self.span + self.end || self.transition == 0.0 {
            MaskType::EndOfWindow
        } else {
            MaskType::Transition
        }
    }
}

/// Range a masking proportion is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub min: f64,
    pub max: f64,
}

impl Proportion {
    pub fn fixed(p: f64) -> Self {
        Self { min: p, max: p }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(0.0 <= self.min && self.min <= self.max && self.max <= 1.0) {
            return Err(Error::Config(format!(
                "{what} proportion needs 0 <= p_min <= p_max <= 1, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Poisson mean of span lengths.
    pub lambda_span: f64,
    pub action_mix: Mixture,
    pub emg_mix: Mixture,
    pub joint_mix: Mixture,
    pub span_proportion: Proportion,
    pub end_proportion: Proportion,
    /// Half-width of the intent mask placed around each label change.
    pub transition_buffer_radius: usize,
    pub rng_seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            lambda_span: 7.0,
            action_mix: Mixture {
                span: 0.5,
                end: 0.25,
                transition: 0.25,
            },
            emg_mix: Mixture {
                span: 2.0 / 3.0,
                end: 1.0 / 3.0,
                transition: 0.0,
            },
            joint_mix: Mixture {
                span: 2.0 / 3.0,
                end: 1.0 / 3.0,
                transition: 0.0,
            },
            span_proportion: Proportion {
                min: 0.15,
                max: 0.50,
            },
            end_proportion: Proportion {
                min: 0.15,
                max: 0.50,
            },
            transition_buffer_radius: 50,
            rng_seed: 42,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_span > 0.0) || !self.lambda_span.is_finite() {
            return Err(Error::Config("lambda_span must be positive".into()));
        }
        self.action_mix.validate(true, "action")?;
        self.emg_mix.validate(false, "emg")?;
        self.joint_mix.validate(false, "joint")?;
        self.span_proportion.validate("span")?;
        self.end_proportion.validate("end-of-window")
    }

    /// The RNG sub-stream owning the masks of one window in one epoch.
    pub fn window_rng(&self, epoch: u64, window_id: u64) -> ChaCha8Rng {
        sub_stream(self.rng_seed, &[epoch, window_id])
    }
}

/// `⌊p·T⌋`.
pub fn target_count(p: f64, window_len: usize) -> usize {
    ((p * window_len as f64).floor() as usize).min(window_len)
}

/// Draws one span length: Poisson(λ), zero redrawn, clamped to `max_len`.
pub fn draw_span_len(lambda: f64, max_len: usize, rng: &mut ChaCha8Rng) -> usize {
    let poisson = Poisson::new(lambda).expect("lambda validated positive");
    loop {
        let l = poisson.sample(rng) as usize;
        if l > 0 {
            return l.min(max_len);
        }
    }
}

/// Union of Poisson-length spans until at least `⌊p·T⌋` timesteps are
/// covered. Returned sorted.
pub fn sample_span_mask(window_len: usize, cfg: &MaskConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let p = cfg.span_proportion.sample(rng);
    spans_covering(window_len, target_count(p, window_len), cfg.lambda_span, rng)
}

fn spans_covering(
    window_len: usize,
    target: usize,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut covered = vec![false; window_len];
    let mut count = 0;
    while count < target {
        let len = draw_span_len(lambda, window_len, rng);
        let start = rng.gen_range(0..=window_len - len);
        for flag in &mut covered[start..start + len] {
            if !*flag {
                *flag = true;
                count += 1;
            }
        }
    }
    indices_of(&covered)
}

/// Contiguous suffix `[T - ⌊p·T⌋, T)`.
pub fn sample_end_mask(window_len: usize, cfg: &MaskConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let p = cfg.end_proportion.sample(rng);
    let n = target_count(p, window_len);
    (window_len - n..window_len).collect()
}

/// Timesteps within `radius` of any label change. Empty when the labels are
/// constant.
pub fn sample_transition_mask(labels: &[usize], radius: usize) -> Vec<usize> {
    let len = labels.len();
    let mut covered = vec![false; len];
    for tau in change_points(labels) {
        let lo = tau.saturating_sub(radius);
        let hi = (tau + radius).min(len - 1);
        covered[lo..=hi].iter_mut().for_each(|f| *f = true);
    }
    indices_of(&covered)
}

/// Indices `τ` with `labels[τ] != labels[τ - 1]`.
pub fn change_points(labels: &[usize]) -> Vec<usize> {
    (1..labels.len())
        .filter(|&t| labels[t] != labels[t - 1])
        .collect()
}

fn indices_of(flags: &[bool]) -> Vec<usize> {
    flags
        .iter()
        .enumerate()
        .filter_map(|(i, &f)| f.then_some(i))
        .collect()
}

/// The masks for one training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    /// Masked EMG timesteps; every channel of each is masked.
    pub emg_mask: Vec<usize>,
    /// Masked intent timesteps.
    pub intent_mask: Vec<usize>,
    pub channels: usize,
    pub task: Task,
    pub mask_type: MaskType,
    /// Forbid EMG queries from attending to intent keys.
    pub attention_block: bool,
}

impl MaskSpec {
    /// Inference masking: every intent token hidden, EMG fully visible.
    pub fn inference(window_len: usize, channels: usize) -> Self {
        Self {
            emg_mask: Vec::new(),
            intent_mask: (0..window_len).collect(),
            channels,
            task: Task::ActionRecon,
            mask_type: MaskType::Span,
            attention_block: false,
        }
    }

    /// `M_E` as explicit `(t, c)` pairs.
    pub fn emg_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let c = self.channels;
        self.emg_mask
            .iter()
            .flat_map(move |&t| (0..c).map(move |ch| (t, ch)))
    }

    pub fn emg_mask_len(&self) -> usize {
        self.emg_mask.len() * self.channels
    }

    pub fn is_emg_masked(&self, window_len: usize) -> Vec<bool> {
        flags(&self.emg_mask, window_len)
    }

    pub fn is_intent_masked(&self, window_len: usize) -> Vec<bool> {
        flags(&self.intent_mask, window_len)
    }
}

fn flags(idx: &[usize], len: usize) -> Vec<bool> {
    let mut f = vec![false; len];
    for &i in idx {
        f[i] = true;
    }
    f
}

/// One masked training window. `labels` is `None` for unlabeled data, in
/// which case only the EMG term of the loss is defined.
#[derive(Debug, Clone)]
pub struct MaskedExample<'a> {
    pub emg: ArrayView2<'a, f64>,
    pub labels: Option<&'a [usize]>,
    pub mask: MaskSpec,
}

impl MaskedExample<'_> {
    pub fn window_len(&self) -> usize {
        self.emg.nrows()
    }
}

/// Builds the masked example for one task. Mask types are drawn from the
/// task's mixture; an empty transition mask falls back to span masking, and a
/// draw that masks nothing is replaced by a single Poisson span so that every
/// supervised example has a non-empty target set.
pub fn make_masked_example<'a>(
    emg: ArrayView2<'a, f64>,
    labels: Option<&'a [usize]>,
    task: Task,
    cfg: &MaskConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedExample<'a>> {
    cfg.validate()?;
    let len = emg.nrows();
    let channels = emg.ncols();
    if len == 0 {
        return Err(Error::Shape("empty window".into()));
    }
    if let Some(l) = labels {
        if l.len() != len {
            return Err(Error::Shape(format!(
                "{} labels for a {len}-step window",
                l.len()
            )));
        }
    } else if task != Task::SelfSupervisedEmg {
        return Err(Error::Config(format!(
            "task {task:?} needs intent labels"
        )));
    }

    let draw = |mix: &Mixture, rng: &mut ChaCha8Rng| -> (MaskType, Vec<usize>) {
        let mut kind = mix.sample(rng);
        let mut set = match kind {
            MaskType::Span => sample_span_mask(len, cfg, rng),
            MaskType::EndOfWindow => sample_end_mask(len, cfg, rng),
            MaskType::Transition => {
                sample_transition_mask(labels.unwrap_or(&[]), cfg.transition_buffer_radius)
            }
        };
        if set.is_empty() && kind == MaskType::Transition {
            kind = MaskType::Span;
            set = sample_span_mask(len, cfg, rng);
        }
        if set.is_empty() {
            set = spans_covering(len, 1, cfg.lambda_span, rng);
        }
        (kind, set)
    };

    let mask = match task {
        Task::ActionRecon => {
            let (mask_type, set) = draw(&cfg.action_mix, rng);
            MaskSpec {
                emg_mask: Vec::new(),
                intent_mask: set,
                channels,
                task,
                mask_type,
                attention_block: false,
            }
        }
        Task::EmgRecon => {
            let (mask_type, set) = draw(&cfg.emg_mix, rng);
            MaskSpec {
                emg_mask: set,
                intent_mask: Vec::new(),
                channels,
                task,
                mask_type,
                attention_block: false,
            }
        }
        Task::JointRecon => {
            let (mask_type, set) = draw(&cfg.joint_mix, rng);
            MaskSpec {
                emg_mask: set.clone(),
                intent_mask: set,
                channels,
                task,
                mask_type,
                attention_block: false,
            }
        }
        Task::SelfSupervisedEmg => {
            let mut set = sample_span_mask(len, cfg, rng);
            if set.is_empty() {
                set = spans_covering(len, 1, cfg.lambda_span, rng);
            }
            MaskSpec {
                emg_mask: set,
                intent_mask: (0..len).collect(),
                channels,
                task,
                mask_type: MaskType::Span,
                attention_block: true,
            }
        }
    };
    Ok(MaskedExample { emg, labels, mask })
}

/// Draws the masks for one window and task from the window's per-epoch
/// stream.
pub fn mask_for_epoch<'a>(
    emg: ArrayView2<'a, f64>,
    labels: Option<&'a [usize]>,
    task: Task,
    cfg: &MaskConfig,
    epoch: u64,
    window_id: u64,
) -> Result<MaskedExample<'a>> {
    let mut rng = cfg.window_rng(epoch, window_id);
    // one stream per window, partitioned by task
    rng.set_word_pos(u128::from(task.index()) << 48);
    make_masked_example(emg, labels, task, cfg, &mut rng)
}
