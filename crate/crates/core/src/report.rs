//! Mean ± SD summaries over subjects.
//!
//! Reports are grouped by model source and stream settings. Within a group,
//! each subject's recordings are pooled (correct over defined timesteps,
//! correct over scored transitions), then the per-subject values are
//! summarised across subjects with the population standard deviation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            sd: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub source: String,
    pub lookahead: usize,
    pub hold: usize,
    pub buffer_half_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject_id: String,
    pub raw_accuracy: Option<f64>,
    pub transition_accuracy: Option<f64>,
    pub mean_offset_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub key: GroupKey,
    pub subjects: Vec<SubjectSummary>,
    pub raw_accuracy: Option<MeanSd>,
    pub transition_accuracy: Option<MeanSd>,
    pub mean_offset_ms: Option<MeanSd>,
}

#[derive(Default)]
struct Pool {
    raw: (usize, usize),
    trans: (usize, usize),
    offsets: Vec<f64>,
}

pub fn summarize(reports: &[MetricsReport]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<GroupKey, BTreeMap<String, Pool>> = BTreeMap::new();
    for r in reports {
        let key = GroupKey {
            source: r.config.source.clone(),
            lookahead: r.config.lookahead,
            hold: r.config.hold,
            buffer_half_width: r.config.buffer_half_width,
        };
        let pool = groups.entry(key).or_default().entry(r.subject_id.clone()).or_default();
        pool.raw.0 += r.raw_correct;
        pool.raw.1 += r.raw_defined;
        pool.trans.0 += r.transitions_correct;
        pool.trans.1 += r.transitions_scored;
        pool.offsets.extend(&r.latency.offsets_ms);
    }
    let ratio = |(a, b): (usize, usize)| (b > 0).then(|| a as f64 / b as f64);
    groups
        .into_iter()
        .map(|(key, subjects)| {
            let subjects: Vec<SubjectSummary> = subjects
                .into_iter()
                .map(|(subject_id, p)| SubjectSummary {
                    subject_id,
                    raw_accuracy: ratio(p.raw),
                    transition_accuracy: ratio(p.trans),
                    mean_offset_ms: (!p.offsets.is_empty())
                        .then(|| p.offsets.iter().sum::<f64>() / p.offsets.len() as f64),
                })
                .collect();
            let collect = |f: fn(&SubjectSummary) -> Option<f64>| -> Vec<f64> { subjects.iter().filter_map(f).collect() };
            GroupSummary {
                raw_accuracy: MeanSd::of(&collect(|s| s.raw_accuracy)),
                transition_accuracy: MeanSd::of(&collect(|s| s.transition_accuracy)),
                mean_offset_ms: MeanSd::of(&collect(|s| s.mean_offset_ms)),
                key,
                subjects,
            }
        })
        .collect()
}

fn cell(v: Option<MeanSd>, digits: usize) -> String {
    v.map_or_else(|| "n/a".into(), |m| format!("{:.digits$} ± {:.digits$}", m.mean, m.sd))
}

/// Markdown table, one row per group.
pub fn to_markdown(groups: &[GroupSummary]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "| model | look-ahead | hold | buffer | subjects | raw acc. | transition acc. | offset (ms) |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
    for g in groups {
        let _ = writeln!(
            s,
            "| {} | {} | {} | ±{} | {} | {} | {} | {} |",
            g.key.source,
            g.key.lookahead,
            g.key.hold,
            g.key.buffer_half_width,
            g.subjects.len(),
            cell(g.raw_accuracy, 3),
            cell(g.transition_accuracy, 3),
            cell(g.mean_offset_ms, 1)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_sd() {
        let m = MeanSd::of(&[1.0, 3.0]).unwrap();
        assert_eq!((m.mean, m.sd, m.n), (2.0, 1.0, 2));
        assert_eq!(MeanSd::of(&[0.7]).unwrap().sd, 0.0);
        assert!(MeanSd::of(&[]).is_none());
    }
}
