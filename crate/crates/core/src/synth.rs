//! Synthetic EMG with scripted gesture schedules.
//!
//! Every class has a non-negative activation template over the channels.
//! Subjects scale the shared templates by their own per-channel gains, so
//! held-out subjects look related but not identical to training subjects. A
//! recording walks through the schedule, cross-fading between templates with
//! a sigmoid ramp centred on each nominal transition, where the label
//! switches. Gaussian noise is added and the result is quantised to the
//! 8-bit count grid used by the CSV format.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sub_stream;
use crate::signal::{save_recording, Manifest, ManifestEntry, Recording, RAW_SCALE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub gesture: String,
    pub hold_s: f64,
}

/// Expands a letter code such as `"ROCORORCR"` using the first letter of
/// each class name (case-insensitive).
pub fn parse_schedule(code: &str, class_names: &[String], hold_s: f64) -> Result<Vec<ScheduleStep>> {
    code.chars()
        .map(|c| {
            class_names
                .iter()
                .find(|n| n.chars().next().is_some_and(|f| f.eq_ignore_ascii_case(&c)))
                .map(|n| ScheduleStep {
                    gesture: n.clone(),
                    hold_s,
                })
                .ok_or_else(|| Error::UnknownGesture { gesture: c.to_string() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub subjects: usize,
    pub sessions: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
    pub schedule: Vec<ScheduleStep>,
    pub sample_rate_hz: u32,
    /// Cross-fade duration in timesteps.
    pub ramp: usize,
    /// Noise standard deviation as a fraction of the largest template value.
    pub noise_scale: f64,
    /// Per-subject gains are drawn uniformly from `1 ± gain_jitter`.
    pub gain_jitter: f64,
    /// Minimum Euclidean distance between any two class templates.
    pub min_template_distance: f64,
    /// Recordings shorter than this are rejected.
    pub window_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let class_names: Vec<String> = ["relax", "open", "close"].iter().map(|s| s.to_string()).collect();
        let schedule = parse_schedule("ROCORORCR", &class_names, 5.0).expect("default schedule");
        Self {
            subjects: 10,
            sessions: 1,
            channels: 8,
            class_names,
            schedule,
            sample_rate_hz: 200,
            ramp: 40,
            noise_scale: 0.05,
            gain_jitter: 0.25,
            min_template_distance: 0.3,
            window_len: 600,
            seed: 42,
        }
    }
}

const TEMPLATE_STREAM: u64 = 10;
const GAIN_STREAM: u64 = 11;
const NOISE_STREAM: u64 = 12;
const MAX_TRIES: usize = 1000;
const RELAX_LEVEL: f64 = 0.05;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.sessions == 0 || self.channels == 0 {
            return Err(Error::Config("subjects, sessions and channels must be positive".into()));
        }
        if self.class_names.len() < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.schedule.is_empty() {
            return Err(Error::Config("schedule is empty".into()));
        }
        for s in &self.schedule {
            if !self.class_names.contains(&s.gesture) {
                return Err(Error::UnknownGesture { gesture: s.gesture.clone() });
            }
            if !(s.hold_s >= 1.0) {
                return Err(Error::Config(format!("hold of {} s for {:?} is under 1 s", s.hold_s, s.gesture)));
            }
        }
        if !(0.0..1.0).contains(&self.gain_jitter) || !(self.noise_scale >= 0.0) {
            return Err(Error::Config("gain jitter must lie in [0, 1) and noise scale be non-negative".into()));
        }
        let len = self.recording_len();
        if len < self.window_len {
            return Err(Error::Config(format!(
                "schedule yields {len} samples, shorter than one {}-sample window",
                self.window_len
            )));
        }
        if let Some(i) = self.segment_bounds().windows(2).position(|w| w[1] - w[0] < self.ramp) {
            return Err(Error::Config(format!("segment {i} is shorter than the ramp")));
        }
        Ok(())
    }

    fn hold_samples(&self, step: &ScheduleStep) -> usize {
        (step.hold_s * f64::from(self.sample_rate_hz)).round() as usize
    }

    pub fn recording_len(&self) -> usize {
        self.schedule.iter().map(|s| self.hold_samples(s)).sum()
    }

    /// Segment start indices followed by the total length.
    fn segment_bounds(&self) -> Vec<usize> {
        let mut b = vec![0];
        for s in &self.schedule {
            b.push(b[b.len() - 1] + self.hold_samples(s));
        }
        b
    }

    fn class_of(&self, gesture: &str) -> usize {
        self.class_names.iter().position(|n| n == gesture).expect("validated gesture")
    }
}

fn min_pairwise_distance(t: &Array2<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..t.nrows() {
        for j in i + 1..t.nrows() {
            let d = (&t.row(i) - &t.row(j)).mapv(|v| v * v).sum().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Class templates shared by all subjects (`K × C`). Class 0 is a low,
/// flat resting level.
pub fn shared_templates(cfg: &SynthConfig) -> Result<Array2<f64>> {
    let k = cfg.class_names.len();
    let mut rng = sub_stream(cfg.seed, &[TEMPLATE_STREAM]);
    for _ in 0..MAX_TRIES {
        let t = Array2::from_shape_fn((k, cfg.channels), |(i, _)| {
            if i == 0 {
                RELAX_LEVEL
            } else {
                rng.gen_range(0.1..0.7)
            }
        });
        if min_pairwise_distance(&t) >= cfg.min_template_distance {
            return Ok(t);
        }
    }
    Err(Error::Config(format!(
        "could not draw templates at least {} apart",
        cfg.min_template_distance
    )))
}

/// Templates of one subject: the shared templates with per-channel gains.
pub fn subject_templates(cfg: &SynthConfig, shared: &Array2<f64>, subject: usize) -> Result<Array2<f64>> {
    let mut rng = sub_stream(cfg.seed, &[GAIN_STREAM, subject as u64]);
    for _ in 0..MAX_TRIES {
        let gains: Vec<f64> = (0..cfg.channels)
            .map(|_| 1.0 + rng.gen_range(-cfg.gain_jitter..=cfg.gain_jitter))
            .collect();
        let t = Array2::from_shape_fn(shared.raw_dim(), |(i, c)| shared[[i, c]] * gains[c]);
        if min_pairwise_distance(&t) >= cfg.min_template_distance {
            return Ok(t);
        }
    }
    Err(Error::Config(format!("subject {subject}: templates collapse under gain jitter")))
}

/// Weight of the incoming template at offset `dt = t − τ` for a ramp of
/// `ramp` samples centred on `τ`; exactly 0 before and 1 after the ramp.
pub fn ramp_weight(dt: i64, ramp: usize) -> f64 {
    let half = (ramp / 2) as i64;
    if ramp == 0 {
        return if dt >= 0 { 1.0 } else { 0.0 };
    }
    if dt < -half {
        return 0.0;
    }
    if dt >= ramp as i64 - half {
        return 1.0;
    }
    const STEEPNESS: f64 = 10.0;
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let x = STEEPNESS * (dt as f64 + 0.5) / ramp as f64;
    let lo = sig(-STEEPNESS / 2.0);
    let hi = sig(STEEPNESS / 2.0);
    ((sig(x) - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Noiseless channel means over the whole schedule (`len × C`) and labels.
pub fn envelope(cfg: &SynthConfig, templates: &Array2<f64>) -> (Array2<f64>, Vec<usize>) {
    let bounds = cfg.segment_bounds();
    let classes: Vec<usize> = cfg.schedule.iter().map(|s| cfg.class_of(&s.gesture)).collect();
    let n = bounds[bounds.len() - 1];
    let mut out = Array2::zeros((n, cfg.channels));
    let mut labels = Vec::with_capacity(n);
    for seg in 0..classes.len() {
        for t in bounds[seg]..bounds[seg + 1] {
            labels.push(classes[seg]);
            // only the nearest boundary matters: segments are longer than the ramp
            let (from, to, dt) = if seg > 0 && t - bounds[seg] < bounds[seg + 1] - t {
                (classes[seg - 1], classes[seg], (t - bounds[seg]) as i64)
            } else if seg + 1 < classes.len() {
                (classes[seg], classes[seg + 1], t as i64 - bounds[seg + 1] as i64)
            } else {
                (classes[seg], classes[seg], 0)
            };
            let w = ramp_weight(dt, cfg.ramp);
            let mut row = out.row_mut(t);
            if w == 0.0 {
                row.assign(&templates.row(from));
            } else if w == 1.0 {
                row.assign(&templates.row(to));
            } else {
                row.assign(&(&templates.row(from) * (1.0 - w) + &templates.row(to) * w));
            }
        }
    }
    (out, labels)
}

/// Rounds onto the signed 8-bit count grid.
pub fn quantize(v: f64) -> f64 {
    (v * RAW_SCALE).round().clamp(-RAW_SCALE, RAW_SCALE - 1.0) / RAW_SCALE
}

pub fn subject_id(i: usize) -> String {
    format!("s{i:02}")
}

pub fn session_id(i: usize) -> String {
    format!("r{i}")
}

/// All recordings, ordered by subject then session.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Recording>> {
    cfg.validate()?;
    let shared = shared_templates(cfg)?;
    let mut out = Vec::with_capacity(cfg.subjects * cfg.sessions);
    for s in 0..cfg.subjects {
        let templates = subject_templates(cfg, &shared, s)?;
        let (clean, labels) = envelope(cfg, &templates);
        let sd = cfg.noise_scale * templates.iter().copied().fold(0.0, f64::max);
        for r in 0..cfg.sessions {
            let mut rng = sub_stream(cfg.seed, &[NOISE_STREAM, s as u64, r as u64]);
            let noise = Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))?;
            let samples = clean.mapv(|v| quantize(v + noise.sample(&mut rng)));
            out.push(Recording::new(
                subject_id(s),
                session_id(r),
                cfg.sample_rate_hz,
                samples,
                labels.clone(),
                cfg.class_names.clone(),
            )?);
        }
    }
    Ok(out)
}

/// Writes every recording as `<subject>_<session>.csv` under `dir` along
/// with `manifest.json`, returning the manifest path.
pub fn write_dataset(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest::from_class_names(cfg.sample_rate_hz, cfg.channels, &cfg.class_names);
    for rec in generate(cfg)? {
        let name = PathBuf::from(format!("{}_{}.csv", rec.subject_id, rec.session_id));
        save_recording(&rec, &dir.join(&name))?;
        manifest.files.push(ManifestEntry {
            path: name,
            subject_id: rec.subject_id,
            session_id: rec.session_id,
            labeled: true,
        });
    }
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
