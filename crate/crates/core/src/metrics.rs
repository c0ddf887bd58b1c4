//! Raw accuracy, transition accuracy and latency offset.
//!
//! A ground-truth transition `y_old → y_new` at `τ` (the first timestep of
//! the new class) is scored on its reaction buffer `[τ − b, τ + b]` and its
//! maintenance period, which runs from `τ + b + 1` up to the timestep before
//! the next transition's buffer (or to the end of the stream). It is
//! correct when
//!
//! * the buffer holds only `y_old` and `y_new`,
//! * some `u` in the buffer has `pred(u) = y_new` with `pred(u') = y_old` for
//!   an earlier `u'`, and
//! * the maintenance period is all `y_new`.
//!
//! The smallest such `u` is the predicted switch time.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::change_points;
use crate::signal::Recording;
use crate::stream::PredictionStream;

pub const REPORT_FORMAT: &str = "emg-intent-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    BufferViolation,
    MaintenanceViolation,
    /// The buffer leaves the stream or touches undefined predictions.
    Unscored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionEvent {
    pub tau: usize,
    pub y_old: usize,
    pub y_new: usize,
    /// Inclusive bounds, clipped to the stream.
    pub buffer: (usize, usize),
    /// Inclusive bounds; `None` when the next buffer abuts this one.
    pub maintenance: Option<(usize, usize)>,
    pub verdict: Verdict,
    pub predicted_switch_time: Option<usize>,
}

fn check_lengths(pred: &[Option<usize>], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Alignment(format!(
            "{} predictions for {} ground-truth timesteps",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Fraction of defined timesteps whose prediction matches. `None` when no
/// timestep is defined.
pub fn raw_accuracy(pred: &[Option<usize>], truth: &[usize]) -> Result<Option<f64>> {
    let (hit, defined) = raw_counts(pred, truth)?;
    Ok((defined > 0).then(|| hit as f64 / defined as f64))
}

fn raw_counts(pred: &[Option<usize>], truth: &[usize]) -> Result<(usize, usize)> {
    check_lengths(pred, truth)?;
    let mut hit = 0;
    let mut defined = 0;
    for (p, &y) in pred.iter().zip(truth) {
        if let Some(p) = p {
            defined += 1;
            hit += usize::from(*p == y);
        }
    }
    Ok((hit, defined))
}

/// Expands sparse `(timestep, label)` decisions to one entry per timestep,
/// holding each label until the next decision. Timesteps before the first
/// decision stay undefined.
pub fn upsample_zoh(decisions: &[(usize, usize)], len: usize) -> Vec<Option<usize>> {
    let mut out = vec![None; len];
    for (i, &(t, label)) in decisions.iter().enumerate() {
        let end = decisions.get(i + 1).map_or(len, |d| d.0).min(len);
        if t < end {
            out[t..end].fill(Some(label));
        }
    }
    out
}

/// Scores every ground-truth transition with buffer half-width `b`.
pub fn score_transitions(pred: &[Option<usize>], truth: &[usize], b: usize) -> Result<Vec<TransitionEvent>> {
    check_lengths(pred, truth)?;
    if b == 0 {
        return Err(Error::Argument("buffer half-width must be at least 1".into()));
    }
    let n = truth.len();
    let taus = change_points(truth);
    // earliest timestep at which each class is predicted
    let mut first_seen: Vec<Option<usize>> = Vec::new();
    for (t, p) in pred.iter().enumerate() {
        if let Some(k) = *p {
            if first_seen.len() <= k {
                first_seen.resize(k + 1, None);
            }
            first_seen[k].get_or_insert(t);
        }
    }
    let seen_before = |k: usize, u: usize| first_seen.get(k).copied().flatten().is_some_and(|f| f < u);

    let mut events = Vec::with_capacity(taus.len());
    for (i, &tau) in taus.iter().enumerate() {
        let y_old = truth[tau - 1];
        let y_new = truth[tau];
        let in_range = tau >= b && tau + b < n;
        let buffer = (tau.saturating_sub(b), (tau + b).min(n - 1));
        let m_start = tau + b + 1;
        let m_end = match taus.get(i + 1) {
            Some(&next) => next.checked_sub(b + 1),
            None => Some(n - 1),
        };
        let maintenance = m_end.filter(|&e| e >= m_start && in_range).map(|e| (m_start, e));
        let mut event = TransitionEvent {
            tau,
            y_old,
            y_new,
            buffer,
            maintenance,
            verdict: Verdict::Unscored,
            predicted_switch_time: None,
        };
        let buf = &pred[buffer.0..=buffer.1];
        let maint = maintenance.map_or(&pred[0..0], |(s, e)| &pred[s..=e]);
        if !in_range || buf.iter().chain(maint).any(Option::is_none) {
            events.push(event);
            continue;
        }
        event.predicted_switch_time =
            (buffer.0..=buffer.1).find(|&u| pred[u] == Some(y_new) && seen_before(y_old, u));
        let clean_buffer = buf.iter().all(|p| *p == Some(y_old) || *p == Some(y_new));
        event.verdict = if !clean_buffer || event.predicted_switch_time.is_none() {
            Verdict::BufferViolation
        } else if maint.iter().any(|p| *p != Some(y_new)) {
            Verdict::MaintenanceViolation
        } else {
            Verdict::Correct
        };
        events.push(event);
    }
    Ok(events)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Latency {
    pub mean_offset_ms: Option<f64>,
    pub median_offset_ms: Option<f64>,
    pub offsets_ms: Vec<f64>,
}

/// Offsets `|switch − τ|` in milliseconds over correct transitions.
pub fn latency_offsets(events: &[TransitionEvent], sample_rate_hz: u32) -> Latency {
    let ms_per_step = 1000.0 / f64::from(sample_rate_hz);
    let offsets_ms: Vec<f64> = events
        .iter()
        .filter(|e| e.verdict == Verdict::Correct)
        .filter_map(|e| e.predicted_switch_time.map(|s| s.abs_diff(e.tau) as f64 * ms_per_step))
        .collect();
    if offsets_ms.is_empty() {
        return Latency::default();
    }
    let mean = offsets_ms.iter().sum::<f64>() / offsets_ms.len() as f64;
    Latency {
        mean_offset_ms: Some(mean),
        median_offset_ms: Some(median(&offsets_ms)),
        offsets_ms,
    }
}

/// Median of a non-empty slice; even counts average the middle pair.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Reaction buffer half-width `b` in timesteps.
    pub buffer_half_width: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { buffer_half_width: 100 }
    }
}

/// Settings that produced a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub buffer_half_width: usize,
    pub sample_rate_hz: u32,
    pub window_len: usize,
    pub lookahead: usize,
    pub hold: usize,
    pub inference_stride: usize,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub subject_id: String,
    pub session_id: String,
    pub class_names: Vec<String>,
    pub raw_accuracy: Option<f64>,
    pub raw_correct: usize,
    pub raw_defined: usize,
    /// Recall per ground-truth class over defined timesteps.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub transition_accuracy: Option<f64>,
    pub transitions_correct: usize,
    pub transitions_scored: usize,
    pub latency: Latency,
    pub transitions: Vec<TransitionEvent>,
    pub config: ReportConfig,
}

/// Bundles all metrics for one recording. `source` names the model that
/// produced the predictions.
pub fn evaluate(
    pred: &PredictionStream,
    truth: &Recording,
    cfg: &MetricsConfig,
    source: &str,
) -> Result<MetricsReport> {
    let (raw_correct, raw_defined) = raw_counts(&pred.labels, &truth.labels)?;
    let k = truth.num_classes();
    let mut per_class = vec![(0usize, 0usize); k];
    for (p, &y) in pred.labels.iter().zip(&truth.labels) {
        if let Some(p) = p {
            per_class[y].1 += 1;
            per_class[y].0 += usize::from(*p == y);
        }
    }
    let transitions = score_transitions(&pred.labels, &truth.labels, cfg.buffer_half_width)?;
    let scored = transitions.iter().filter(|e| e.verdict != Verdict::Unscored).count();
    let correct = transitions.iter().filter(|e| e.verdict == Verdict::Correct).count();
    Ok(MetricsReport {
        format: REPORT_FORMAT.into(),
        subject_id: truth.subject_id.clone(),
        session_id: truth.session_id.clone(),
        class_names: truth.class_names.clone(),
        raw_accuracy: (raw_defined > 0).then(|| raw_correct as f64 / raw_defined as f64),
        raw_correct,
        raw_defined,
        per_class_accuracy: per_class
            .iter()
            .map(|&(h, d)| (d > 0).then(|| h as f64 / d as f64))
            .collect(),
        transition_accuracy: (scored > 0).then(|| correct as f64 / scored as f64),
        transitions_correct: correct,
        transitions_scored: scored,
        latency: latency_offsets(&transitions, truth.sample_rate_hz),
        transitions,
        config: ReportConfig {
            buffer_half_width: cfg.buffer_half_width,
            sample_rate_hz: truth.sample_rate_hz,
            window_len: pred.config.window_len,
            lookahead: pred.config.lookahead,
            hold: pred.config.hold,
            inference_stride: pred.config.inference_stride,
            source: source.into(),
        },
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.digits$}"))
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(
            s,
            "{} / {}  ({}, look-ahead {}, hold {}, buffer ±{})",
            self.subject_id, self.session_id, c.source, c.lookahead, c.hold, c.buffer_half_width
        );
        let _ = writeln!(
            s,
            "raw accuracy         {}  ({}/{})",
            fmt_opt(self.raw_accuracy, 4),
            self.raw_correct,
            self.raw_defined
        );
        let _ = writeln!(
            s,
            "transition accuracy  {}  ({}/{} scored, {} total)",
            fmt_opt(self.transition_accuracy, 4),
            self.transitions_correct,
            self.transitions_scored,
            self.transitions.len()
        );
        let _ = writeln!(
            s,
            "latency offset (ms)  mean {}  median {}",
            fmt_opt(self.latency.mean_offset_ms, 1),
            fmt_opt(self.latency.median_offset_ms, 1)
        );
        let per_class: Vec<String> = self
            .class_names
            .iter()
            .zip(&self.per_class_accuracy)
            .map(|(n, a)| format!("{n} {}", fmt_opt(*a, 3)))
            .collect();
        let _ = writeln!(s, "per class            {}", per_class.join("  "));
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if r.format != REPORT_FORMAT {
            return Err(Error::Format {
                found: r.format,
                expected: REPORT_FORMAT.into(),
            });
        }
        Ok(r)
    }
}
