//! Independent reference implementations used to check the library.

use std::collections::BTreeSet;

use emg_intent::masking::MaskedExample;
use emg_intent::metrics::Verdict;
use ndarray::ArrayView2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `(total, emg term, intent term)` by explicit loops over every entry,
/// or `None` when both mask sets are empty.
pub fn loop_loss(
    emg_out: ArrayView2<f64>,
    logits: ArrayView2<f64>,
    ex: &MaskedExample,
) -> Option<(f64, Option<f64>, Option<f64>)> {
    let t_len = ex.emg.nrows();
    let channels = ex.emg.ncols();
    let emg_set: BTreeSet<usize> = ex.mask.emg_mask.iter().copied().collect();
    let mut sq = 0.0;
    let mut n_e = 0usize;
    for t in 0..t_len {
        for c in 0..channels {
            if emg_set.contains(&t) {
                let d = emg_out[[t, c]] - ex.emg[[t, c]];
                sq += d * d;
                n_e += 1;
            }
        }
    }
    let emg = (n_e > 0).then(|| sq / n_e as f64);

    let intent = ex.labels.and_then(|labels| {
        let set: BTreeSet<usize> = ex.mask.intent_mask.iter().copied().collect();
        let mut ce = 0.0;
        let mut n_a = 0usize;
        for t in 0..t_len {
            if !set.contains(&t) {
                continue;
            }
            let row = logits.row(t);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..row.len() {
                z += (row[j] - m).exp();
            }
            ce += -(row[labels[t]] - m - z.ln());
            n_a += 1;
        }
        (n_a > 0).then(|| ce / n_a as f64)
    });
    if emg.is_none() && intent.is_none() {
        return None;
    }
    Some((emg.unwrap_or(0.0) + intent.unwrap_or(0.0), emg, intent))
}

/// `⋃ [τ − r, τ + r] ∩ [0, T)` over label changes, as a set.
pub fn interval_union(labels: &[usize], r: usize) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for tau in 1..labels.len() {
        if labels[tau] != labels[tau - 1] {
            let lo = tau as i64 - r as i64;
            let hi = tau as i64 + r as i64;
            for u in lo..=hi {
                if u >= 0 && (u as usize) < labels.len() {
                    out.insert(u as usize);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleEvent {
    pub tau: usize,
    pub verdict: Verdict,
    pub switch: Option<usize>,
}

/// Transition scoring with buffer and maintenance materialised as index
/// sets.
pub fn brute_force_score(pred: &[Option<usize>], truth: &[usize], b: usize) -> Vec<OracleEvent> {
    let n = truth.len() as i64;
    let b = b as i64;
    let taus: Vec<i64> = (1..truth.len())
        .filter(|&t| truth[t] != truth[t - 1])
        .map(|t| t as i64)
        .collect();
    let mut out = Vec::new();
    for (i, &tau) in taus.iter().enumerate() {
        let y_old = truth[tau as usize - 1];
        let y_new = truth[tau as usize];
        let buffer: BTreeSet<i64> = (tau - b..=tau + b).collect();
        let limit = taus.get(i + 1).map_or(n, |&next| next - b);
        let maintenance: BTreeSet<i64> = (tau + b + 1..limit).collect();
        let unscored = buffer.iter().any(|&u| u < 0 || u >= n)
            || buffer
                .iter()
                .chain(&maintenance)
                .any(|&u| u >= 0 && u < n && pred[u as usize].is_none());
        if unscored {
            out.push(OracleEvent {
                tau: tau as usize,
                verdict: Verdict::Unscored,
                switch: None,
            });
            continue;
        }
        let at = |u: i64| pred[u as usize];
        let only_two = buffer.iter().all(|&u| at(u) == Some(y_old) || at(u) == Some(y_new));
        let switches: Vec<i64> = buffer
            .iter()
            .copied()
            .filter(|&u| at(u) == Some(y_new) && (0..u).any(|v| at(v) == Some(y_old)))
            .collect();
        let held = maintenance.iter().all(|&u| at(u) == Some(y_new));
        let verdict = if !only_two || switches.is_empty() {
            Verdict::BufferViolation
        } else if !held {
            Verdict::MaintenanceViolation
        } else {
            Verdict::Correct
        };
        out.push(OracleEvent {
            tau: tau as usize,
            verdict,
            switch: switches.first().map(|&u| u as usize),
        });
    }
    out
}

/// `|switch − τ|` in ms over correct events.
pub fn oracle_offsets(events: &[OracleEvent], fs: f64) -> Vec<f64> {
    events
        .iter()
        .filter(|e| e.verdict == Verdict::Correct)
        .map(|e| (e.switch.unwrap() as f64 - e.tau as f64).abs() * 1000.0 / fs)
        .collect()
}

/// Median of one-sided DFT magnitudes (bins `1..=N/2`) via the defining sum.
pub fn direct_dft_median(x: &[f64]) -> f64 {
    let n = x.len();
    let mut mags = Vec::new();
    for k in 1..=n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &v) in x.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
            re += v * ang.cos();
            im += v * ang.sin();
        }
        mags.push((re * re + im * im).sqrt());
    }
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = mags.len() / 2;
    if mags.len() % 2 == 1 {
        mags[m]
    } else {
        0.5 * (mags[m - 1] + mags[m])
    }
}

/// Piecewise-constant ground truth with segment lengths in `[min_len, max_len]`.
pub fn random_truth(rng: &mut ChaCha8Rng, n: usize, k: usize, min_len: usize, max_len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut cur = rng.gen_range(0..k);
    while out.len() < n {
        let len = rng.gen_range(min_len..=max_len);
        out.extend(std::iter::repeat(cur).take(len));
        let mut next = rng.gen_range(0..k);
        while next == cur {
            next = rng.gen_range(0..k);
        }
        cur = next;
    }
    out.truncate(n);
    out
}

/// A prediction for `truth` built from the adversarial ingredients the
/// scorer must handle: shifted switches (including exactly at a buffer
/// edge), flicker, third-class intrusions and an undefined warmup prefix.
pub fn adversarial_prediction(rng: &mut ChaCha8Rng, truth: &[usize], k: usize, b: usize) -> Vec<Option<usize>> {
    let n = truth.len();
    let mut pred: Vec<Option<usize>> = truth.iter().map(|&y| Some(y)).collect();
    let taus: Vec<usize> = (1..n).filter(|&t| truth[t] != truth[t - 1]).collect();
    for &tau in &taus {
        let shift: i64 = match rng.gen_range(0..5) {
            0 => -(b as i64),
            1 => b as i64,
            2 => b as i64 + 1,
            _ => rng.gen_range(-(b as i64) - 3..=b as i64 + 3),
        };
        let (old, new) = (truth[tau - 1], truth[tau]);
        let target = (tau as i64 + shift).clamp(0, n as i64) as usize;
        if target > tau {
            for p in pred.iter_mut().take(target.min(n)).skip(tau) {
                *p = Some(old);
            }
        } else {
            for p in pred.iter_mut().take(tau).skip(target) {
                *p = Some(new);
            }
        }
    }
    let flickers = rng.gen_range(0..4);
    for _ in 0..flickers {
        let u = rng.gen_range(0..n);
        let len = rng.gen_range(1..4);
        let c = rng.gen_range(0..k);
        for p in pred.iter_mut().skip(u).take(len) {
            *p = Some(c);
        }
    }
    if rng.gen_bool(0.3) {
        let w = rng.gen_range(0..n / 3);
        for p in pred.iter_mut().take(w) {
            *p = None;
        }
    }
    pred
}
