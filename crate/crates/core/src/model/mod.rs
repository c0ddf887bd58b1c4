//! Encoder-only transformer over concatenated EMG and intent token streams.
//!
//! EMG frames are linearly projected into the model width, intent labels are
//! looked up in an embedding table with an extra mask-token row, and both
//! halves receive a modality vector plus a positional encoding shared across
//! modalities. After the encoder the sequence is split again: the EMG half
//! feeds a linear reconstruction head and the intent half a linear classifier.

mod checkpoint;
mod loss;
mod network;
pub mod ops;
mod params;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use loss::{loss, loss_with_grad, LossBreakdown};
pub use network::{backward_example, embed, forward, forward_example, predict_window, ForwardCache, Outputs};
pub use params::{
    sinusoidal_table, Block, BlockMut, Hyper, LayerWeights, ModelParams, PositionalEncoding, Weights,
};
pub use train::{
    split_by_subject, train, AdamW, EpochLog, LrSchedule, TrainConfig, TrainItem, TrainLog, TrainOutcome,
};

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::masking::MaskedExample;

/// Loss and gradient of a single example.
pub fn example_gradients(
    ex: &MaskedExample,
    params: &ModelParams,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossBreakdown, Weights)> {
    let (out, cache) = forward_example(ex, params, dropout_rng)?;
    let (l, d_emg, d_logits) = loss_with_grad(out.emg.view(), out.intent_logits.view(), ex)?;
    let mut grads = params.zero_grads();
    backward_example(ex, params, &cache, d_emg.view(), d_logits.view(), &mut grads);
    Ok((l, grads))
}

/// Mean loss and mean gradient over a batch. Examples are accumulated in
/// slice order so the result is bit-reproducible. `dropout` yields the RNG
/// for the example at a given batch position; `None` evaluates without
/// dropout.
pub fn backward(
    batch: &[MaskedExample],
    params: &ModelParams,
    mut dropout: Option<&mut dyn FnMut(usize) -> ChaCha8Rng>,
) -> Result<(f64, Weights)> {
    let mut grads = params.zero_grads();
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let mut rng = dropout.as_mut().map(|f| f(i));
        let (out, cache) = forward_example(ex, params, rng.as_mut())?;
        let (l, d_emg, d_logits) = loss_with_grad(out.emg.view(), out.intent_logits.view(), ex)?;
        backward_example(ex, params, &cache, d_emg.view(), d_logits.view(), &mut grads);
        total += l.total;
    }
    let n = batch.len().max(1) as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}
