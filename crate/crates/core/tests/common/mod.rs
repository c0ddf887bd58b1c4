#![allow(dead_code)]

pub mod oracles;

use emg_intent::masking::{make_masked_example, MaskConfig, MaskedExample, Task};
use emg_intent::model::{forward_example, loss, Hyper, ModelParams, PositionalEncoding};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_hyper() -> Hyper {
    Hyper {
        d_model: 8,
        heads: 2,
        layers: 1,
        ff_dim: 16,
        dropout: 0.15,
        window_len: 16,
        channels: 2,
        classes: 3,
        positional: PositionalEncoding::Learned,
    }
}

/// Random window with a few label changes.
pub fn random_window(rng: &mut ChaCha8Rng, t: usize, c: usize, k: usize) -> (Array2<f64>, Vec<usize>) {
    let emg = Array2::from_shape_simple_fn((t, c), || rng.gen_range(0.0..1.0));
    let mut labels = Vec::with_capacity(t);
    let mut cur = rng.gen_range(0..k);
    for _ in 0..t {
        if rng.gen_bool(0.15) {
            cur = rng.gen_range(0..k);
        }
        labels.push(cur);
    }
    (emg, labels)
}

pub fn tiny_mask_config() -> MaskConfig {
    MaskConfig {
        lambda_span: 3.0,
        transition_buffer_radius: 2,
        ..Default::default()
    }
}

pub fn masked<'a>(
    emg: &'a Array2<f64>,
    labels: &'a [usize],
    task: Task,
    cfg: &MaskConfig,
    rng: &mut ChaCha8Rng,
) -> MaskedExample<'a> {
    let labels = (task != Task::SelfSupervisedEmg).then_some(labels);
    make_masked_example(emg.view(), labels, task, cfg, rng).unwrap()
}

/// Loss of one example, optionally with dropout drawn from a fixed seed.
pub fn scalar_loss(ex: &MaskedExample, params: &ModelParams, dropout_seed: Option<u64>) -> f64 {
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let (out, _) = forward_example(ex, params, rng.as_mut()).unwrap();
    loss(out.emg.view(), out.intent_logits.view(), ex).unwrap().total
}

/// Relative error with a floor on the denominator so coordinates whose true
/// gradient is numerically zero are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error per parameter block, comparing `analytic` with
/// central differences of step `h`: `(block, plain, extrapolated)`. The
/// extrapolated estimate combines steps `h` and `h/2` to cancel the `h²`
/// truncation term, which otherwise dominates on tiny gradient coordinates.
pub fn finite_difference_report(
    ex: &MaskedExample,
    params: &ModelParams,
    analytic: &emg_intent::model::Weights,
    dropout_seed: Option<u64>,
    h: f64,
) -> Vec<(String, f64, f64)> {
    let learned = params.learned_pos();
    let names: Vec<(String, usize)> = params
        .weights
        .blocks(learned)
        .iter()
        .map(|b| (b.name.clone(), b.data.len()))
        .collect();
    let grads: Vec<Vec<f64>> = analytic.blocks(learned).iter().map(|b| b.data.to_vec()).collect();
    let mut out = Vec::new();
    let mut p = params.clone();
    for (bi, (name, len)) in names.iter().enumerate() {
        let (mut plain, mut extrapolated) = (0.0f64, 0.0f64);
        for j in 0..*len {
            let orig = p.weights.blocks(learned)[bi].data[j];
            let mut central = |step: f64| {
                p.weights.blocks_mut(learned)[bi].data[j] = orig + step;
                let plus = scalar_loss(ex, &p, dropout_seed);
                p.weights.blocks_mut(learned)[bi].data[j] = orig - step;
                let minus = scalar_loss(ex, &p, dropout_seed);
                p.weights.blocks_mut(learned)[bi].data[j] = orig;
                (plus - minus) / (2.0 * step)
            };
            let d1 = central(h);
            let d2 = central(h / 2.0);
            plain = plain.max(rel_err(grads[bi][j], d1));
            extrapolated = extrapolated.max(rel_err(grads[bi][j], (4.0 * d2 - d1) / 3.0));
        }
        out.push((name.clone(), plain, extrapolated));
    }
    out
}
