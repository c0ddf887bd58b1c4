use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::ops::log_sum_exp;
use crate::error::{Error, Result};
use crate::masking::MaskedExample;

/// Masked reconstruction loss and its two terms. A term is `None` when its
/// mask set is empty (or, for the intent term, when the window is unlabeled).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub emg: Option<f64>,
    pub intent: Option<f64>,
}

fn check_shapes(emg_out: ArrayView2<f64>, logits: ArrayView2<f64>, ex: &MaskedExample) -> Result<()> {
    if emg_out.dim() != ex.emg.dim() {
        return Err(Error::Shape(format!(
            "EMG output {:?} vs window {:?}",
            emg_out.dim(),
            ex.emg.dim()
        )));
    }
    if logits.nrows() != ex.window_len() {
        return Err(Error::Shape(format!(
            "{} logit rows for a {}-step window",
            logits.nrows(),
            ex.window_len()
        )));
    }
    Ok(())
}

/// Loss plus its derivatives with respect to the EMG output and the logits.
pub fn loss_with_grad(
    emg_out: ArrayView2<f64>,
    logits: ArrayView2<f64>,
    ex: &MaskedExample,
) -> Result<(LossBreakdown, Array2<f64>, Array2<f64>)> {
    check_shapes(emg_out, logits, ex)?;
    let mut d_emg = Array2::zeros(emg_out.raw_dim());
    let mut d_logits = Array2::zeros(logits.raw_dim());

    let n_e = ex.mask.emg_mask_len();
    let emg_term = (n_e > 0).then(|| {
        let inv = 1.0 / n_e as f64;
        let mut sum = 0.0;
        for (t, c) in ex.mask.emg_pairs() {
            let diff = emg_out[[t, c]] - ex.emg[[t, c]];
            sum += diff * diff;
            d_emg[[t, c]] = 2.0 * diff * inv;
        }
        sum * inv
    });

    let intent_term = match ex.labels {
        Some(labels) if !ex.mask.intent_mask.is_empty() => {
            let k = logits.ncols();
            let inv = 1.0 / ex.mask.intent_mask.len() as f64;
            let mut sum = 0.0;
            for &t in &ex.mask.intent_mask {
                let row = logits.row(t);
                let y = labels[t];
                if y >= k {
                    return Err(Error::Shape(format!("label {y} outside 0..{k}")));
                }
                let lse = log_sum_exp(row);
                sum += lse - row[y];
                for j in 0..k {
                    let p = (row[j] - lse).exp();
                    d_logits[[t, j]] = (p - f64::from(u8::from(j == y))) * inv;
                }
            }
            Some(sum * inv)
        }
        _ => None,
    };

    if emg_term.is_none() && intent_term.is_none() {
        return Err(Error::DegenerateExample);
    }
    let total = emg_term.unwrap_or(0.0) + intent_term.unwrap_or(0.0);
    Ok((
        LossBreakdown {
            total,
            emg: emg_term,
            intent: intent_term,
        },
        d_emg,
        d_logits,
    ))
}

/// Mean squared error over masked EMG entries plus mean cross-entropy over
/// masked intent tokens. The target EMG is the example's own window.
pub fn loss(emg_out: ArrayView2<f64>, logits: ArrayView2<f64>, ex: &MaskedExample) -> Result<LossBreakdown> {
    loss_with_grad(emg_out, logits, ex).map(|(l, ..)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{MaskSpec, MaskType, Task};
    use ndarray::array;

    fn spec(emg: Vec<usize>, intent: Vec<usize>) -> MaskSpec {
        MaskSpec {
            emg_mask: emg,
            intent_mask: intent,
            channels: 2,
            task: Task::JointRecon,
            mask_type: MaskType::Span,
            attention_block: false,
        }
    }

    #[test]
    fn omitted_terms() {
        let x = array![[0.1, 0.2], [0.3, 0.4]];
        let labels = [0usize, 1];
        let logits = array![[2.0, 0.0], [0.0, 1.0]];
        let out = array![[0.0, 0.0], [0.0, 0.0]];

        let ex = MaskedExample { emg: x.view(), labels: Some(&labels), mask: spec(vec![], vec![0, 1]) };
        let l = loss(out.view(), logits.view(), &ex).unwrap();
        assert_eq!(l.emg, None);
        assert_eq!(l.total, l.intent.unwrap());

        let ex = MaskedExample { emg: x.view(), labels: Some(&labels), mask: spec(vec![1], vec![]) };
        let l = loss(out.view(), logits.view(), &ex).unwrap();
        assert!((l.total - (0.09 + 0.16) / 2.0).abs() < 1e-15);

        let ex = MaskedExample { emg: x.view(), labels: Some(&labels), mask: spec(vec![], vec![]) };
        assert!(matches!(loss(out.view(), logits.view(), &ex), Err(Error::DegenerateExample)));
    }

    #[test]
    fn confident_perfect_predictions_approach_zero() {
        let x = array![[0.1, 0.2], [0.3, 0.4]];
        let labels = [1usize, 0];
        let logits = array![[-400.0, 400.0], [400.0, -400.0]];
        let ex = MaskedExample { emg: x.view(), labels: Some(&labels), mask: spec(vec![0, 1], vec![0, 1]) };
        let l = loss(x.view(), logits.view(), &ex).unwrap();
        assert!(l.total < 1e-300);
    }

    #[test]
    fn unlabeled_drops_intent_term() {
        let x = array![[0.1, 0.2], [0.3, 0.4]];
        let logits = Array2::zeros((2, 3));
        let ex = MaskedExample { emg: x.view(), labels: None, mask: spec(vec![0], vec![0, 1]) };
        let l = loss(x.view(), logits.view(), &ex).unwrap();
        assert_eq!(l.intent, None);
        assert_eq!(l.total, 0.0);
    }
}
