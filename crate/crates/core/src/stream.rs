//! Online replay of a recording with bounded look-ahead.
//!
//! Samples are pushed into a [`StreamBuffer`] one at a time. A decision for
//! timestep `t` is taken once sample `t + ℓ` has arrived: every window of
//! length `T` whose final sample lies in `{t, t + stride, …} ∩ [t, t + ℓ]` is
//! run through the model, the logits those windows assign to timestep `t`
//! are averaged, and the argmax is held for the next `s` timesteps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ops::argmax;
use crate::model::{predict_window, ModelParams};
use crate::signal::Recording;

pub const PREDICTIONS_FORMAT: &str = "emg-intent-predictions/1";

/// How the logits of the participating windows are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Each window contributes its logits at the decision timestep.
    #[default]
    TargetTimestep,
    /// Each window contributes the logits at its own final timestep.
    WindowEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub window_len: usize,
    pub lookahead: usize,
    pub hold: usize,
    pub inference_stride: usize,
    pub sample_rate_hz: u32,
    pub aggregation: Aggregation,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            window_len: 600,
            lookahead: 50,
            hold: 20,
            inference_stride: 10,
            sample_rate_hz: 200,
            aggregation: Aggregation::TargetTimestep,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.hold == 0 || self.inference_stride == 0 || self.sample_rate_hz == 0 {
            return Err(Error::Config(
                "window length, hold, inference stride and sample rate must be positive".into(),
            ));
        }
        if self.lookahead >= self.window_len {
            return Err(Error::Config(format!(
                "look-ahead {} must be shorter than the window ({})",
                self.lookahead, self.window_len
            )));
        }
        Ok(())
    }

    /// Decisions per second.
    pub fn update_rate_hz(&self) -> f64 {
        f64::from(self.sample_rate_hz) / self.hold as f64
    }

    /// Upper bound on the time from a sample's arrival to the emission of a
    /// decision that accounts for it, in seconds.
    pub fn latency_bound_s(&self) -> f64 {
        (self.lookahead + self.hold) as f64 / f64::from(self.sample_rate_hz)
    }

    /// Ends of the windows that take part in the decision at `t`, given
    /// that the stream holds `available` samples.
    pub fn window_ends(&self, t: usize, available: usize) -> impl Iterator<Item = usize> {
        let last = (t + self.lookahead).min(available.saturating_sub(1));
        (t..=last).step_by(self.inference_stride)
    }
}

/// Anything that maps a `T × C` window to `T × K` logits.
pub trait WindowModel {
    fn window_len(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn predict(&self, window: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl WindowModel for ModelParams {
    fn window_len(&self) -> usize {
        self.hyper.window_len
    }

    fn num_classes(&self) -> usize {
        self.hyper.classes
    }

    fn predict(&self, window: ArrayView2<f64>) -> Result<Array2<f64>> {
        predict_window(window, self)
    }
}

/// Append-only sample store that remembers the furthest index ever read.
#[derive(Debug, Clone)]
pub struct StreamBuffer<'a> {
    source: ArrayView2<'a, f64>,
    received: usize,
    max_read: Option<usize>,
}

impl<'a> StreamBuffer<'a> {
    pub fn new(source: ArrayView2<'a, f64>) -> Self {
        Self {
            source,
            received: 0,
            max_read: None,
        }
    }

    /// Delivers samples until `count` have arrived (or the source runs out).
    pub fn receive_until(&mut self, count: usize) {
        self.received = self.received.max(count.min(self.source.nrows()));
    }

    pub fn received(&self) -> usize {
        self.received
    }

    pub fn is_exhausted(&self) -> bool {
        self.received == self.source.nrows()
    }

    /// The `len` samples ending at index `end` inclusive.
    pub fn window(&mut self, end: usize, len: usize) -> Result<ArrayView2<'a, f64>> {
        if end >= self.received || end + 1 < len {
            return Err(Error::Argument(format!(
                "window ending at {end} is not available ({} samples received)",
                self.received
            )));
        }
        self.max_read = Some(self.max_read.map_or(end, |m| m.max(end)));
        Ok(self.source.slice_move(ndarray::s![end + 1 - len..=end, ..]))
    }

    pub fn max_read(&self) -> Option<usize> {
        self.max_read
    }

    pub fn reset_audit(&mut self) {
        self.max_read = None;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub t: usize,
    pub label: usize,
    pub logits: Array1<f64>,
    /// Furthest sample index read while taking this decision.
    pub max_sample_read: usize,
    pub windows_used: usize,
    /// Wall-clock cost of the model calls made for this decision.
    pub elapsed: Duration,
}

/// Averages the per-window logit rows for timestep `t` and picks the argmax.
pub fn aggregate(rows: &[Array1<f64>]) -> Result<(usize, Array1<f64>)> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Argument("no windows to aggregate".into()))?;
    let mut mean = Array1::zeros(first.len());
    for r in rows {
        mean += r;
    }
    mean /= rows.len() as f64;
    Ok((argmax(mean.view()), mean))
}

/// Takes the decision for `t` using only samples already in `buffer`.
/// `cache` maps window end indices to logits and is reused across calls.
pub fn decide<M: WindowModel + ?Sized>(
    t: usize,
    buffer: &mut StreamBuffer,
    model: &M,
    cfg: &StreamConfig,
    cache: &mut BTreeMap<usize, Array2<f64>>,
) -> Result<Decision> {
    let len = cfg.window_len;
    if t + 1 < len {
        return Err(Error::Argument(format!("timestep {t} is inside the warmup period")));
    }
    buffer.reset_audit();
    let start = Instant::now();
    let mut rows = Vec::new();
    for end in cfg.window_ends(t, buffer.received()) {
        let view = buffer.window(end, len)?;
        if !cache.contains_key(&end) {
            cache.insert(end, model.predict(view)?);
        }
        let logits = &cache[&end];
        let row = match cfg.aggregation {
            Aggregation::TargetTimestep => len - 1 - (end - t),
            Aggregation::WindowEnd => len - 1,
        };
        rows.push(logits.row(row).to_owned());
    }
    let elapsed = start.elapsed();
    let (label, logits) = aggregate(&rows)?;
    Ok(Decision {
        t,
        label,
        logits,
        max_sample_read: buffer.max_read().unwrap_or(t),
        windows_used: rows.len(),
        elapsed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionStream {
    /// One entry per recording timestep; `None` during warmup.
    pub labels: Vec<Option<usize>>,
    /// Aggregated logits per decision, when retained.
    pub logits: Option<Vec<Array1<f64>>>,
    pub decisions: Vec<Decision>,
    pub warmup_end: usize,
    pub config: StreamConfig,
    pub class_names: Vec<String>,
}

impl PredictionStream {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Largest gap, in samples, between a timestep and the arrival index
    /// at which the first decision covering it was emitted.
    pub fn worst_case_delay(&self) -> Option<usize> {
        let mut worst = None;
        let mut d = 0;
        for u in self.warmup_end..self.labels.len() {
            while d < self.decisions.len() && self.decisions[d].t < u {
                d += 1;
            }
            // a timestep before the next decision is reflected by that decision
            let emitted = match self.decisions.get(d) {
                Some(dec) => dec.max_sample_read,
                None => break,
            };
            let delay = emitted.saturating_sub(u);
            worst = Some(worst.map_or(delay, |w: usize| w.max(delay)));
        }
        worst
    }
}

/// Replays `rec` sample by sample. The recording must already be
/// preprocessed the same way as the training data.
pub fn run_stream<M: WindowModel + ?Sized>(
    rec: &Recording,
    model: &M,
    cfg: &StreamConfig,
    retain_logits: bool,
) -> Result<PredictionStream> {
    cfg.validate()?;
    if model.window_len() != cfg.window_len {
        return Err(Error::Config(format!(
            "model window {} differs from stream window {}",
            model.window_len(),
            cfg.window_len
        )));
    }
    if model.num_classes() != rec.num_classes() {
        return Err(Error::Config(format!(
            "model predicts {} classes, recording has {}",
            model.num_classes(),
            rec.num_classes()
        )));
    }
    let n = rec.len();
    let warmup_end = cfg.window_len - 1;
    let mut labels = vec![None; n];
    let mut decisions = Vec::new();
    let mut buffer = StreamBuffer::new(rec.samples.view());
    let mut cache = BTreeMap::new();
    let mut t = warmup_end;
    while t < n {
        buffer.receive_until(t + cfg.lookahead + 1);
        let dec = decide(t, &mut buffer, model, cfg, &mut cache)?;
        for l in &mut labels[t..(t + cfg.hold).min(n)] {
            *l = Some(dec.label);
        }
        decisions.push(dec);
        t += cfg.hold;
        // windows ending before the next decision are never needed again
        cache = cache.split_off(&t);
    }
    if n <= warmup_end {
        log::warn!("recording of {n} samples never fills a {}-sample window", cfg.window_len);
    }
    let logits = retain_logits.then(|| decisions.iter().map(|d| d.logits.clone()).collect());
    Ok(PredictionStream {
        labels,
        logits,
        decisions,
        warmup_end,
        config: *cfg,
        class_names: rec.class_names.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionHeader {
    format: String,
    config: StreamConfig,
    warmup_end: usize,
    class_names: Vec<String>,
}

/// Writes `t,label[,logit0..]`. The first line is a `#` comment holding
/// the stream configuration as JSON; warmup rows have an empty label.
pub fn save_predictions(pred: &PredictionStream, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = PredictionHeader {
        format: PREDICTIONS_FORMAT.into(),
        config: pred.config,
        warmup_end: pred.warmup_end,
        class_names: pred.class_names.clone(),
    };
    writeln!(w, "# {}", serde_json::to_string(&header)?)?;
    write!(w, "t,label")?;
    if pred.logits.is_some() {
        for k in 0..pred.class_names.len() {
            write!(w, ",logit{k}")?;
        }
    }
    writeln!(w)?;
    let mut d = 0;
    for (t, label) in pred.labels.iter().enumerate() {
        write!(w, "{t},")?;
        if let Some(l) = label {
            write!(w, "{l}")?;
        }
        if let Some(logits) = &pred.logits {
            while d + 1 < pred.decisions.len() && pred.decisions[d + 1].t <= t {
                d += 1;
            }
            match logits.get(d).filter(|_| label.is_some()) {
                Some(v) => v.iter().try_for_each(|x| write!(w, ",{x}"))?,
                None => (0..pred.class_names.len()).try_for_each(|_| write!(w, ","))?,
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a prediction file. Per-decision details other than labels (and
/// logits, when present) are not stored and come back empty.
pub fn load_predictions(path: &Path) -> Result<PredictionStream> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as u64,
        message,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().transpose()?.unwrap_or_default();
    let json = first
        .strip_prefix('#')
        .ok_or_else(|| parse_err(1, "missing '#' configuration header".into()))?;
    let header: PredictionHeader =
        serde_json::from_str(json.trim()).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != PREDICTIONS_FORMAT {
        return Err(Error::Format {
            found: header.format,
            expected: PREDICTIONS_FORMAT.into(),
        });
    }
    let k = header.class_names.len();
    let columns = lines.next().transpose()?.unwrap_or_default();
    let with_logits = match columns.split(',').count() {
        2 => false,
        c if c == 2 + k => true,
        c => return Err(parse_err(2, format!("expected 2 or {} columns, found {c}", 2 + k))),
    };
    let mut labels = Vec::new();
    let mut logits: Vec<Array1<f64>> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 3;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != if with_logits { 2 + k } else { 2 } {
            return Err(parse_err(lineno, format!("unexpected field count {}", fields.len())));
        }
        let t: usize = fields[0].parse().map_err(|e| parse_err(lineno, format!("bad t: {e}")))?;
        if t != labels.len() {
            return Err(parse_err(lineno, format!("expected t={}, found {t}", labels.len())));
        }
        let label = match fields[1] {
            "" => None,
            s => {
                let l: usize = s.parse().map_err(|e| parse_err(lineno, format!("bad label: {e}")))?;
                if l >= k {
                    return Err(parse_err(lineno, format!("label {l} outside 0..{k}")));
                }
                Some(l)
            }
        };
        let decision_row = t >= header.warmup_end && (t - header.warmup_end) % header.config.hold == 0;
        if with_logits && label.is_some() && decision_row {
            let v = fields[2..]
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(lineno, format!("bad logit: {e}")))?;
            logits.push(Array1::from(v));
        }
        labels.push(label);
    }
    Ok(PredictionStream {
        labels,
        logits: with_logits.then_some(logits),
        decisions: Vec::new(),
        warmup_end: header.warmup_end,
        config: header.config,
        class_names: header.class_names,
    })
}

/// Stacks per-timestep logits (`None` rows as NaN) for inspection.
pub fn logits_matrix(pred: &PredictionStream) -> Option<Array2<f64>> {
    let logits = pred.logits.as_ref()?;
    let k = pred.class_names.len();
    let mut out = Array2::from_elem((pred.len(), k), f64::NAN);
    for (i, dec_logits) in logits.iter().enumerate() {
        let t0 = pred.warmup_end + i * pred.config.hold;
        let t1 = (t0 + pred.config.hold).min(pred.len());
        for mut row in out.slice_mut(ndarray::s![t0..t1, ..]).axis_iter_mut(Axis(0)) {
            row.assign(dec_logits);
        }
    }
    Some(out)
}
