//! Hand-crafted features with a shrinkage linear discriminant.
//!
//! Each channel of a window contributes its RMS, waveform length and the
//! median of its one-sided magnitude spectrum (bins `1..=T/2`). Features are
//! standardised with statistics from the training set. The classifier emits
//! one label per window; streamed through [`run_stream`] with no look-ahead
//! and a hold equal to the window stride it yields a zero-order-hold label
//! sequence on the sample grid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::median;
use crate::signal::{windows, Recording, WindowSpec};
use crate::stream::{run_stream, Aggregation, PredictionStream, StreamConfig, WindowModel};

pub const BASELINE_FORMAT: &str = "emg-intent-lda/1";
pub const STD_FLOOR: f64 = 1e-8;
pub const DEFAULT_SHRINKAGE: f64 = 0.1;

pub fn rms(x: ArrayView1<f64>) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn waveform_length(x: ArrayView1<f64>) -> f64 {
    x.iter().zip(x.iter().skip(1)).map(|(a, b)| (b - a).abs()).sum()
}

/// Computes window features, reusing an FFT plan for one window length.
pub struct Featurizer {
    len: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl Featurizer {
    pub fn new(len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::Argument("feature windows need at least 2 samples".into()));
        }
        Ok(Self {
            len,
            fft: FftPlanner::new().plan_fft_forward(len),
        })
    }

    /// Median of `|X_k|` over `k = 1..=len/2`.
    pub fn median_spectrum(&self, x: ArrayView1<f64>) -> f64 {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        let mags: Vec<f64> = buf[1..=self.len / 2].iter().map(|c| c.norm()).collect();
        median(&mags)
    }

    /// `[rms, waveform length, median spectrum]` per channel, concatenated.
    pub fn features(&self, window: ArrayView2<f64>) -> Result<Vec<f64>> {
        if window.nrows() != self.len {
            return Err(Error::Shape(format!(
                "{}-sample window for a {}-sample featurizer",
                window.nrows(),
                self.len
            )));
        }
        let mut out = Vec::with_capacity(3 * window.ncols());
        for ch in window.columns() {
            out.extend([rms(ch), waveform_length(ch), self.median_spectrum(ch)]);
        }
        Ok(out)
    }
}

/// Convenience wrapper that plans a fresh FFT.
pub fn featurize(window: ArrayView2<f64>) -> Result<Vec<f64>> {
    Featurizer::new(window.nrows())?.features(window)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let first = x.first().ok_or_else(|| Error::Fit("no training samples".into()))?;
        let n = x.len() as f64;
        let p = first.len();
        let mut mean = vec![0.0; p];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; p];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| v.sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Linear discriminant with covariance `(1 − α)Σ + α·tr(Σ)/p·I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lda {
    pub num_classes: usize,
    pub shrinkage: f64,
    /// `K × p`; rows of classes absent from training are unused.
    pub weights: Vec<Vec<f64>>,
    /// `None` for classes absent from training.
    pub bias: Vec<Option<f64>>,
}

impl Lda {
    pub fn fit(x: &[Vec<f64>], labels: &[usize], num_classes: usize, shrinkage: f64) -> Result<Self> {
        if x.len() != labels.len() || x.is_empty() {
            return Err(Error::Fit(format!("{} samples with {} labels", x.len(), labels.len())));
        }
        if !(0.0..=1.0).contains(&shrinkage) {
            return Err(Error::Fit(format!("shrinkage {shrinkage} outside [0, 1]")));
        }
        let p = x[0].len();
        let n = x.len();
        let mut counts = vec![0usize; num_classes];
        let mut means = vec![DVector::<f64>::zeros(p); num_classes];
        for (row, &y) in x.iter().zip(labels) {
            if y >= num_classes {
                return Err(Error::Fit(format!("label {y} outside 0..{num_classes}")));
            }
            counts[y] += 1;
            means[y] += DVector::from_column_slice(row);
        }
        let present: Vec<usize> = (0..num_classes).filter(|&k| counts[k] > 0).collect();
        if present.len() < 2 {
            return Err(Error::Fit("need at least two classes in the training data".into()));
        }
        for &k in &present {
            means[k] /= counts[k] as f64;
        }
        let mut cov = DMatrix::<f64>::zeros(p, p);
        for (row, &y) in x.iter().zip(labels) {
            let d = DVector::from_column_slice(row) - &means[y];
            cov.ger(1.0, &d, &d, 1.0);
        }
        cov /= n.saturating_sub(present.len()).max(1) as f64;
        let ridge = shrinkage * cov.trace() / p as f64;
        let mut shrunk = cov * (1.0 - shrinkage);
        for i in 0..p {
            shrunk[(i, i)] += ridge;
        }
        let chol = shrunk
            .cholesky()
            .ok_or_else(|| Error::Fit("pooled covariance is singular after shrinkage".into()))?;
        let mut weights = vec![vec![0.0; p]; num_classes];
        let mut bias = vec![None; num_classes];
        for &k in &present {
            let w = chol.solve(&means[k]);
            let prior = counts[k] as f64 / n as f64;
            bias[k] = Some(-0.5 * means[k].dot(&w) + prior.ln());
            weights[k] = w.iter().copied().collect();
        }
        Ok(Self {
            num_classes,
            shrinkage,
            weights,
            bias,
        })
    }

    /// Discriminant score per class; classes never seen in training score
    /// `-inf`.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| match b {
                Some(b) => w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b,
                None => f64::NEG_INFINITY,
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        crate::model::ops::argmax(ArrayView1::from(&s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub format: String,
    pub class_names: Vec<String>,
    pub sample_rate_hz: u32,
    pub channels: usize,
    pub window: WindowSpec,
    pub median_window: usize,
    pub standardizer: Standardizer,
    pub lda: Lda,
}

/// Fits on every window of the (already preprocessed) recordings, taking
/// the label at each window's final sample as its target.
pub fn train_baseline(recordings: &[Recording], window: WindowSpec, median_window: usize) -> Result<BaselineModel> {
    let first = recordings
        .first()
        .ok_or_else(|| Error::Fit("no training recordings".into()))?;
    let featurizer = Featurizer::new(window.window_len)?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for rec in recordings {
        if rec.channels() != first.channels() || rec.class_names != first.class_names {
            return Err(Error::Schema(format!(
                "recording {}/{} does not share the schema of the first recording",
                rec.subject_id, rec.session_id
            )));
        }
        for w in windows(rec, window).windows {
            x.push(featurizer.features(w.emg)?);
            y.push(w.labels[w.labels.len() - 1]);
        }
    }
    let standardizer = Standardizer::fit(&x)?;
    let z: Vec<Vec<f64>> = x.iter().map(|r| standardizer.apply(r)).collect();
    let lda = Lda::fit(&z, &y, first.num_classes(), DEFAULT_SHRINKAGE)?;
    log::info!("fitted LDA on {} windows", z.len());
    Ok(BaselineModel {
        format: BASELINE_FORMAT.into(),
        class_names: first.class_names.clone(),
        sample_rate_hz: first.sample_rate_hz,
        channels: first.channels(),
        window,
        median_window,
        standardizer,
        lda,
    })
}

/// Window model view of a fitted baseline: every row of the output carries
/// the window's discriminant scores.
pub struct BaselineWindowModel<'a> {
    model: &'a BaselineModel,
    featurizer: Featurizer,
}

impl<'a> BaselineWindowModel<'a> {
    pub fn new(model: &'a BaselineModel) -> Result<Self> {
        Ok(Self {
            model,
            featurizer: Featurizer::new(model.window.window_len)?,
        })
    }
}

impl WindowModel for BaselineWindowModel<'_> {
    fn window_len(&self) -> usize {
        self.model.window.window_len
    }

    fn num_classes(&self) -> usize {
        self.model.class_names.len()
    }

    fn predict(&self, window: ArrayView2<f64>) -> Result<Array2<f64>> {
        let f = self.model.standardizer.apply(&self.featurizer.features(window)?);
        let s = self.model.lda.scores(&f);
        let k = s.len();
        Ok(Array2::from_shape_fn((window.nrows(), k), |(_, j)| s[j]))
    }
}

impl BaselineModel {
    /// Stream settings the baseline is evaluated with: one decision per
    /// window stride, no look-ahead.
    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            window_len: self.window.window_len,
            lookahead: 0,
            hold: self.window.stride,
            inference_stride: self.window.stride,
            sample_rate_hz: self.sample_rate_hz,
            aggregation: Aggregation::WindowEnd,
        }
    }

    /// Labels a preprocessed recording.
    pub fn predict_stream(&self, rec: &Recording, retain_scores: bool) -> Result<PredictionStream> {
        if rec.channels() != self.channels {
            return Err(Error::Schema(format!(
                "recording has {} channels, baseline expects {}",
                rec.channels(),
                self.channels
            )));
        }
        run_stream(rec, &BaselineWindowModel::new(self)?, &self.stream_config(), retain_scores)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if m.format != BASELINE_FORMAT {
            return Err(Error::Format {
                found: m.format,
                expected: BASELINE_FORMAT.into(),
            });
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn trivial_features() {
        let z = Array2::zeros((16, 2));
        assert_eq!(featurize(z.view()).unwrap(), vec![0.0; 6]);
        let alt = Array1::from_shape_fn(10, |i| (i % 2) as f64);
        assert_eq!(waveform_length(alt.view()), 9.0);
    }

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let k = i % 2;
            let c = if k == 0 { -3.0 } else { 3.0 };
            x.push(vec![c + noise.sample(&mut rng), noise.sample(&mut rng), c + noise.sample(&mut rng)]);
            y.push(k);
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_fit_perfectly() {
        let (x, y) = blobs(200, 1);
        let lda = Lda::fit(&x, &y, 2, DEFAULT_SHRINKAGE).unwrap();
        assert!(x.iter().zip(&y).all(|(r, &k)| lda.predict(r) == k));
    }

    #[test]
    fn duplicated_column_still_fits() {
        let (mut x, y) = blobs(100, 2);
        for r in &mut x {
            r.push(r[0]);
        }
        assert!(Lda::fit(&x, &y, 2, DEFAULT_SHRINKAGE).is_ok());
        // without shrinkage the duplicated column makes the covariance singular
        assert!(Lda::fit(&x, &y, 2, 0.0).is_err());
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(Lda::fit(&x, &[0, 0], 2, 0.1), Err(Error::Fit(_))));
    }

    #[test]
    fn absent_classes_are_never_predicted() {
        let (x, y) = blobs(50, 3);
        let y: Vec<usize> = y.iter().map(|&k| k * 2).collect();
        let lda = Lda::fit(&x, &y, 3, DEFAULT_SHRINKAGE).unwrap();
        assert_eq!(lda.scores(&x[0])[1], f64::NEG_INFINITY);
    }
}
