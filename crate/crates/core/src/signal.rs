//! Recording ingestion, preprocessing and windowing.
//!
//! Recordings are stored on disk as CSV in raw armband counts (signed 8-bit
//! range) and scaled by 1/128 on load, so in-memory amplitudes lie roughly in
//! `[-1, 1]`. Because the scale is a power of two, `save_recording` followed
//! by `load_recording` reproduces every amplitude exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Divisor applied to raw on-disk counts.
pub const RAW_SCALE: f64 = 128.0;

/// A labeled multichannel EMG time series.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub session_id: String,
    pub sample_rate_hz: u32,
    /// `len × channels`.
    pub samples: Array2<f64>,
    /// One class index per sample.
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Recording {
    pub fn new(
        subject_id: impl Into<String>,
        session_id: impl Into<String>,
        sample_rate_hz: u32,
        samples: Array2<f64>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let rec = Self {
            subject_id: subject_id.into(),
            session_id: session_id.into(),
            sample_rate_hz,
            samples,
            labels,
            class_names,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 {
            return Err(Error::Schema("sample_rate_hz must be positive".into()));
        }
        if self.channels() == 0 {
            return Err(Error::Schema("a recording needs at least one channel".into()));
        }
        if self.samples.nrows() != self.labels.len() {
            return Err(Error::Schema(format!(
                "{} sample rows but {} labels",
                self.samples.nrows(),
                self.labels.len()
            )));
        }
        let k = self.class_names.len();
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= k) {
            return Err(Error::Schema(format!("label index {bad} outside 0..{k}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_len: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            window_len: 600,
            stride: 30,
        }
    }
}

impl WindowSpec {
    pub fn new(window_len: usize, stride: usize) -> Result<Self> {
        if window_len == 0 || stride == 0 {
            return Err(Error::Argument(
                "window length and stride must both be at least 1".into(),
            ));
        }
        Ok(Self { window_len, stride })
    }

    /// Number of windows that fit in a recording of `total` samples.
    pub fn count(&self, total: usize) -> usize {
        if total < self.window_len {
            0
        } else {
            (total - self.window_len) / self.stride + 1
        }
    }
}

/// One slice of a recording.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub start: usize,
    pub emg: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

/// The windows of one recording. `too_short` is set when the recording could
/// not hold a single window; that case is skipped rather than padded.
#[derive(Debug, Clone)]
pub struct Windows<'a> {
    pub windows: Vec<Window<'a>>,
    pub too_short: bool,
}

pub fn windows(rec: &Recording, spec: WindowSpec) -> Windows<'_> {
    let n = spec.count(rec.len());
    if n == 0 {
        log::warn!(
            "recording {}/{} has {} samples, shorter than the {}-sample window; skipped",
            rec.subject_id,
            rec.session_id,
            rec.len(),
            spec.window_len
        );
    }
    let windows = (0..n)
        .map(|i| {
            let start = i * spec.stride;
            let end = start + spec.window_len;
            Window {
                start,
                emg: rec.samples.slice(ndarray::s![start..end, ..]),
                labels: &rec.labels[start..end],
            }
        })
        .collect();
    Windows {
        windows,
        too_short: n == 0,
    }
}

/// Per-channel sliding median of width `median_window` (shrinking at the
/// edges), followed by full-wave rectification.
pub fn preprocess(rec: &Recording, median_window: usize) -> Result<Recording> {
    if median_window == 0 || median_window % 2 == 0 {
        return Err(Error::Argument(format!(
            "median window must be odd and positive, got {median_window}"
        )));
    }
    let mut out = rec.clone();
    for (src, mut dst) in rec
        .samples
        .axis_iter(Axis(1))
        .zip(out.samples.axis_iter_mut(Axis(1)))
    {
        let channel: Vec<f64> = src.iter().copied().collect();
        for (t, v) in median_filter(&channel, median_window).into_iter().enumerate() {
            dst[t] = v.abs();
        }
    }
    Ok(out)
}

/// Sliding median over `[t - w/2, t + w/2]` clipped to the signal. Even-sized
/// neighborhoods at the edges take the mean of the two middle values.
pub fn median_filter(signal: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let n = signal.len();
    let mut scratch = Vec::with_capacity(width);
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(n);
            scratch.clear();
            scratch.extend_from_slice(&signal[lo..hi]);
            scratch.sort_by(f64::total_cmp);
            let m = scratch.len();
            if m % 2 == 1 {
                scratch[m / 2]
            } else {
                0.5 * (scratch[m / 2 - 1] + scratch[m / 2])
            }
        })
        .collect()
}

/// One entry of a dataset manifest's file list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub subject_id: String,
    pub session_id: String,
    /// Unlabeled recordings only take part in self-supervised EMG training.
    #[serde(default = "default_true")]
    pub labeled: bool,
}

fn default_true() -> bool {
    true
}

/// Dataset manifest: gesture-name table plus the recording list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub sample_rate_hz: u32,
    pub channels: usize,
    pub classes: BTreeMap<String, usize>,
    #[serde(default)]
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    /// Class names ordered by class index.
    pub fn class_names(&self) -> Result<Vec<String>> {
        let k = self.classes.len();
        let mut names = vec![None; k];
        for (name, &idx) in &self.classes {
            if idx >= k || names[idx].is_some() {
                return Err(Error::Schema(format!(
                    "class indices must be a permutation of 0..{k}; {name:?} has {idx}"
                )));
            }
            names[idx] = Some(name.clone());
        }
        Ok(names.into_iter().map(Option::unwrap).collect())
    }

    pub fn from_class_names(sample_rate_hz: u32, channels: usize, names: &[String]) -> Self {
        Self {
            sample_rate_hz,
            channels,
            classes: names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), i))
                .collect(),
            files: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_reader(File::open(path)?)?;
        m.class_names()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }

    /// Resolves a file-list path relative to the manifest's directory.
    pub fn resolve(&self, manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(&entry.path)
        }
    }

    /// Loads every recording listed in the manifest, paired with its entry.
    pub fn load_all(&self, manifest_path: &Path) -> Result<Vec<(ManifestEntry, Recording)>> {
        self.files
            .iter()
            .map(|e| {
                let mut rec = load_recording(&self.resolve(manifest_path, e), self)?;
                rec.subject_id = e.subject_id.clone();
                rec.session_id = e.session_id.clone();
                Ok((e.clone(), rec))
            })
            .collect()
    }
}

/// Reads a `t,ch0..ch{C-1},label` CSV. Subject and session ids are taken
/// from the file stem; `Manifest::load_all` overwrites them from the file list.
pub fn load_recording(path: &Path, manifest: &Manifest) -> Result<Recording> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let channels = headers.len().saturating_sub(2);
    if headers.len() < 3 || &headers[0] != "t" || &headers[headers.len() - 1] != "label" {
        return Err(parse_err(
            1,
            "expected header `t,ch0,...,label`".to_string(),
        ));
    }
    for c in 0..channels {
        if headers[c + 1] != format!("ch{c}") {
            return Err(parse_err(
                1,
                format!("column {} should be ch{c}, found {:?}", c + 1, &headers[c + 1]),
            ));
        }
    }
    if channels != manifest.channels {
        return Err(Error::Schema(format!(
            "{}: {channels} channels in file but manifest declares {}",
            path.display(),
            manifest.channels
        )));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != channels + 2 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", channels + 2, row.len()),
            ));
        }
        for c in 0..channels {
            let raw: f64 = row[c + 1].trim().parse().map_err(|_| {
                parse_err(line, format!("ch{c}: cannot parse {:?} as a number", &row[c + 1]))
            })?;
            values.push(raw / RAW_SCALE);
        }
        let name = row[channels + 1].trim();
        let idx = *manifest
            .classes
            .get(name)
            .ok_or_else(|| Error::UnknownGesture {
                gesture: name.to_string(),
            })?;
        labels.push(idx);
    }
    let samples = Array2::from_shape_vec((labels.len(), channels), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Recording::new(
        stem.clone(),
        stem,
        manifest.sample_rate_hz,
        samples,
        labels,
        manifest.class_names()?,
    )
}

pub fn save_recording(rec: &Recording, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..rec.channels()).map(|c| format!("ch{c}")));
    header.push("label".into());
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(rec.channels() + 2);
    for (t, (sample, &label)) in rec.samples.outer_iter().zip(&rec.labels).enumerate() {
        row.clear();
        row.push(t.to_string());
        row.extend(sample.iter().map(|v| format!("{}", v * RAW_SCALE)));
        row.push(rec.class_names[label].clone());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    fn rec_from(samples: Array2<f64>, labels: Vec<usize>) -> Recording {
        Recording::new("s", "r", 200, samples, labels, names(&["relax", "open"])).unwrap()
    }

    #[test]
    fn loads_all_relax_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let mut body = String::from("t,ch0,ch1,label\n");
        for t in 0..10 {
            body.push_str(&format!("{t},{},{},relax\n", t, -(t as i32)));
        }
        std::fs::write(&path, body).unwrap();
        let m = Manifest::from_class_names(200, 2, &names(&["relax", "open"]));
        let rec = load_recording(&path, &m).unwrap();
        assert_eq!(rec.len(), 10);
        assert_eq!(rec.channels(), 2);
        assert!(rec.labels.iter().all(|&l| l == 0));
        assert_eq!(rec.samples[[3, 0]], 3.0 / 128.0);
        assert_eq!(rec.samples[[3, 1]], -3.0 / 128.0);
    }

    #[test]
    fn unknown_gesture_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "t,ch0,label\n0,1,relax\n1,2,grab\n").unwrap();
        let m = Manifest::from_class_names(200, 1, &names(&["relax"]));
        match load_recording(&path, &m) {
            Err(Error::UnknownGesture { gesture }) => assert_eq!(gesture, "grab"),
            other => panic!("expected mapping error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_value_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "t,ch0,label\n0,1,relax\n1,abc,relax\n").unwrap();
        let m = Manifest::from_class_names(200, 1, &names(&["relax"]));
        match load_recording(&path, &m) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn channel_mismatch_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "t,ch0,ch1,label\n0,1,2,relax\n").unwrap();
        let m = Manifest::from_class_names(200, 3, &names(&["relax"]));
        assert!(matches!(load_recording(&path, &m), Err(Error::Schema(_))));
    }

    #[test]
    fn median_then_rectify() {
        let r = rec_from(array![[1.0], [100.0], [2.0]], vec![0, 0, 0]);
        let p = preprocess(&r, 3).unwrap();
        assert_eq!(p.samples[[1, 0]], 2.0);
        // edges shrink to two samples
        assert_eq!(p.samples[[0, 0]], 50.5);
        assert_eq!(p.samples[[2, 0]], 51.0);

        let r = rec_from(array![[-5.0]], vec![0]);
        assert_eq!(preprocess(&r, 1).unwrap().samples[[0, 0]], 5.0);
    }

    #[test]
    fn even_median_window_rejected() {
        let r = rec_from(array![[1.0]], vec![0]);
        assert!(matches!(preprocess(&r, 2), Err(Error::Argument(_))));
        assert!(matches!(preprocess(&r, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn window_counts() {
        let spec = WindowSpec::new(600, 30).unwrap();
        let r = rec_from(Array2::zeros((1200, 1)), vec![0; 1200]);
        assert_eq!(windows(&r, spec).windows.len(), 21);

        let r = rec_from(Array2::zeros((600, 1)), vec![0; 600]);
        let w = windows(&r, WindowSpec::new(600, 7).unwrap());
        assert_eq!(w.windows.len(), 1);
        assert_eq!(w.windows[0].start, 0);

        let r = rec_from(Array2::zeros((599, 1)), vec![0; 599]);
        let w = windows(&r, spec);
        assert!(w.windows.is_empty());
        assert!(w.too_short);
    }

    proptest! {
        #[test]
        fn window_starts_follow_progression(total in 1usize..400, len in 1usize..100, stride in 1usize..50) {
            let r = rec_from(Array2::zeros((total, 1)), vec![0; total]);
            let spec = WindowSpec::new(len, stride).unwrap();
            let got: Vec<usize> = windows(&r, spec).windows.iter().map(|w| w.start).collect();
            // enumerate every candidate start and keep those whose window fits
            let expected: Vec<usize> = (0..total).filter(|s| s % stride == 0 && s + len <= total).collect();
            prop_assert_eq!(&got, &expected);
            for w in windows(&r, spec).windows {
                prop_assert!(w.start + len <= total);
                prop_assert_eq!(w.emg.nrows(), len);
                prop_assert_eq!(w.labels.len(), len);
            }
        }

        #[test]
        fn preprocess_is_nonnegative_and_shape_preserving(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_fn((600, 8), |_| rng.gen_range(-1.0..1.0));
            let labels: Vec<usize> = (0..600).map(|t| (t / 300) % 2).collect();
            let r = rec_from(x, labels.clone());
            let p = preprocess(&r, 3).unwrap();
            prop_assert_eq!(p.samples.dim(), (600, 8));
            prop_assert_eq!(&p.labels, &labels);
            prop_assert!(p.samples.iter().all(|&v| v >= 0.0));
            prop_assert_eq!(p.samples.mapv(f64::abs), p.samples.clone());
        }
    }
}
