//! Embedding, encoder stack and output heads, with reverse-mode gradients.
//!
//! The encoder is pre-norm: each layer computes
//! `h1 = h + Drop(Attn(LN1(h)))` and `h2 = h1 + Drop(FF(LN2(h1)))`, and a final
//! layer norm precedes the two heads.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_rows, LayerNormCache};
use super::params::{LayerWeights, ModelParams, Weights};
use crate::error::{Error, Result};
use crate::masking::{MaskSpec, MaskedExample};

/// Per-timestep reconstructions of both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    /// `T × C`.
    pub emg: Array2<f64>,
    /// `T × K`.
    pub intent_logits: Array2<f64>,
}

struct EmbedCache {
    emg_masked: Vec<bool>,
    tokens: Vec<usize>,
}

struct LayerCache {
    ln1: LayerNormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    ln2: LayerNormCache,
    b: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    drop_act: Option<Array2<f64>>,
    drop_ff: Option<Array2<f64>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    embed: EmbedCache,
    layers: Vec<LayerCache>,
    final_ln: LayerNormCache,
    final_out: Array2<f64>,
    attention_block: bool,
}

fn check_window(ex_len: usize, params: &ModelParams) -> Result<()> {
    if ex_len != params.hyper.window_len {
        return Err(Error::Shape(format!(
            "window has {ex_len} timesteps, model expects {}",
            params.hyper.window_len
        )));
    }
    Ok(())
}

fn embed_cached(ex: &MaskedExample, params: &ModelParams) -> Result<(Array2<f64>, EmbedCache)> {
    let h = &params.hyper;
    let w = &params.weights;
    let t_len = ex.window_len();
    check_window(t_len, params)?;
    if ex.emg.ncols() != h.channels {
        return Err(Error::Shape(format!(
            "window has {} channels, model expects {}",
            ex.emg.ncols(),
            h.channels
        )));
    }
    let emg_masked = ex.mask.is_emg_masked(t_len);
    let intent_masked = ex.mask.is_intent_masked(t_len);
    let mut tokens = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let tok = if intent_masked[t] {
            h.mask_token()
        } else {
            match ex.labels {
                Some(l) if l[t] < h.classes => l[t],
                Some(l) => {
                    return Err(Error::Shape(format!(
                        "label {} at t={t} outside 0..{}",
                        l[t], h.classes
                    )))
                }
                None => {
                    return Err(Error::Shape(format!(
                        "unlabeled window must mask every intent token (t={t} visible)"
                    )))
                }
            }
        };
        tokens.push(tok);
    }

    let mut emg = ex.emg.dot(&w.emg_proj) + &w.emg_proj_bias;
    for (t, mut row) in emg.axis_iter_mut(Axis(0)).enumerate() {
        if emg_masked[t] {
            row.assign(&w.mask_vector);
        }
    }
    emg += &w.modality.row(0);
    emg += &w.pos_enc;

    let mut intent = Array2::zeros((t_len, h.d_model));
    for (t, mut row) in intent.axis_iter_mut(Axis(0)).enumerate() {
        row.assign(&w.intent_embed.row(tokens[t]));
    }
    intent += &w.modality.row(1);
    intent += &w.pos_enc;

    let z = concatenate![Axis(0), emg, intent];
    Ok((z, EmbedCache { emg_masked, tokens }))
}

/// The `2T × d` multimodal input sequence: masked EMG embeddings followed by
/// masked intent embeddings, each with its modality vector and the shared
/// positional encoding added.
pub fn embed(ex: &MaskedExample, params: &ModelParams) -> Result<Array2<f64>> {
    embed_cached(ex, params).map(|(z, _)| z)
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn((rows, cols), || if rng.gen::<f64>() < rate { 0.0 } else { keep })
}

fn layer_forward(
    h: &Array2<f64>,
    lw: &LayerWeights,
    heads: usize,
    attention_block: bool,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> (Array2<f64>, LayerCache) {
    let (n, d) = h.dim();
    let t_len = n / 2;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, ln1) = layer_norm(h.view(), lw.ln1_gain.view(), lw.ln1_bias.view());
    let q = a.dot(&lw.wq) + &lw.bq;
    let k = a.dot(&lw.wk) + &lw.bk;
    let v = a.dot(&lw.wv) + &lw.bv;

    let mut concat = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|x| x * scale);
        if attention_block {
            scores
                .slice_mut(s![..t_len, t_len..])
                .fill(f64::NEG_INFINITY);
        }
        softmax_rows(&mut scores);
        concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }

    let mut drop = dropout;
    let mut next_mask = |rows, cols| {
        drop.as_mut()
            .map(|(rate, rng)| dropout_mask(rows, cols, *rate, rng))
    };

    let mut attn = concat.dot(&lw.wo) + &lw.bo;
    let drop_attn = next_mask(n, d);
    if let Some(m) = &drop_attn {
        attn *= m;
    }
    let h1 = h + &attn;

    let (b, ln2) = layer_norm(h1.view(), lw.ln2_gain.view(), lw.ln2_bias.view());
    let pre_act = b.dot(&lw.w1) + &lw.b1;
    let act = pre_act.mapv(gelu);
    let drop_act = next_mask(n, lw.w1.ncols());
    let act_dropped = match &drop_act {
        Some(m) => &act * m,
        None => act.clone(),
    };
    let mut ff = act_dropped.dot(&lw.w2) + &lw.b2;
    let drop_ff = next_mask(n, d);
    if let Some(m) = &drop_ff {
        ff *= m;
    }
    let out = h1 + ff;

    (
        out,
        LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            concat,
            drop_attn,
            ln2,
            b,
            pre_act,
            act,
            drop_act,
            drop_ff,
        },
    )
}

fn layer_backward(
    dout: Array2<f64>,
    lw: &LayerWeights,
    cache: &LayerCache,
    heads: usize,
    g: &mut LayerWeights,
) -> Array2<f64> {
    let d = dout.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward branch
    let mut dh1 = dout.clone();
    let mut dff = dout;
    if let Some(m) = &cache.drop_ff {
        dff *= m;
    }
    let act_dropped = match &cache.drop_act {
        Some(m) => &cache.act * m,
        None => cache.act.clone(),
    };
    g.w2 += &act_dropped.t().dot(&dff);
    g.b2 += &dff.sum_axis(Axis(0));
    let mut dact = dff.dot(&lw.w2.t());
    if let Some(m) = &cache.drop_act {
        dact *= m;
    }
    let dpre = &dact * &cache.pre_act.mapv(gelu_grad);
    g.w1 += &cache.b.t().dot(&dpre);
    g.b1 += &dpre.sum_axis(Axis(0));
    let db = dpre.dot(&lw.w1.t());
    dh1 += &layer_norm_backward(
        db.view(),
        lw.ln2_gain.view(),
        &cache.ln2,
        &mut g.ln2_gain,
        &mut g.ln2_bias,
    );

    // attention branch
    let mut dattn = dh1.clone();
    if let Some(m) = &cache.drop_attn {
        dattn *= m;
    }
    g.wo += &cache.concat.t().dot(&dattn);
    g.bo += &dattn.sum_axis(Axis(0));
    let dconcat = dattn.dot(&lw.wo.t());

    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (hd, p) in cache.probs.iter().enumerate() {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let d_o = dconcat.slice(cols);
        let dp = d_o.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&d_o));
        let mut ds = &dp * p;
        let row_sums = ds.sum_axis(Axis(1));
        for ((mut row, prow), rs) in ds
            .axis_iter_mut(Axis(0))
            .zip(p.axis_iter(Axis(0)))
            .zip(row_sums)
        {
            row.zip_mut_with(&prow, |x, &pv| *x -= pv * rs);
        }
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    g.wq += &cache.a.t().dot(&dq);
    g.bq += &dq.sum_axis(Axis(0));
    g.wk += &cache.a.t().dot(&dk);
    g.bk += &dk.sum_axis(Axis(0));
    g.wv += &cache.a.t().dot(&dv);
    g.bv += &dv.sum_axis(Axis(0));
    let da = dq.dot(&lw.wq.t()) + dk.dot(&lw.wk.t()) + dv.dot(&lw.wv.t());
    dh1 + layer_norm_backward(
        da.view(),
        lw.ln1_gain.view(),
        &cache.ln1,
        &mut g.ln1_gain,
        &mut g.ln1_bias,
    )
}

fn encode(
    z: Array2<f64>,
    params: &ModelParams,
    attention_block: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Outputs, Vec<LayerCache>, LayerNormCache, Array2<f64>)> {
    let hyper = &params.hyper;
    let w = &params.weights;
    if z.nrows() != 2 * hyper.window_len || z.ncols() != hyper.d_model {
        return Err(Error::Shape(format!(
            "sequence is {}×{}, expected {}×{}",
            z.nrows(),
            z.ncols(),
            2 * hyper.window_len,
            hyper.d_model
        )));
    }
    let t_len = hyper.window_len;
    let mut h = z;
    let mut caches = Vec::with_capacity(w.layers.len());
    for (i, lw) in w.layers.iter().enumerate() {
        let dropout = match rng.as_deref_mut() {
            Some(r) if hyper.dropout > 0.0 => Some((hyper.dropout, r)),
            _ => None,
        };
        let (out, cache) = layer_forward(&h, lw, hyper.heads, attention_block, dropout);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure { layer: i });
        }
        h = out;
        caches.push(cache);
    }
    let (final_out, final_ln) =
        layer_norm(h.view(), w.final_ln_gain.view(), w.final_ln_bias.view());
    let emg = final_out.slice(s![..t_len, ..]).dot(&w.emg_head) + &w.emg_head_bias;
    let intent_logits =
        final_out.slice(s![t_len.., ..]).dot(&w.intent_head) + &w.intent_head_bias;
    if emg.iter().chain(intent_logits.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure { layer: w.layers.len() });
    }
    Ok((
        Outputs { emg, intent_logits },
        caches,
        final_ln,
        final_out,
    ))
}

/// Runs the encoder on an embedded sequence. Dropout is active only when an
/// RNG is supplied (training mode).
pub fn forward(
    z: ArrayView2<f64>,
    params: &ModelParams,
    attention_block: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Outputs> {
    encode(z.to_owned(), params, attention_block, rng).map(|(o, ..)| o)
}

/// Embeds and encodes one example, keeping what backward needs.
pub fn forward_example(
    ex: &MaskedExample,
    params: &ModelParams,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Outputs, ForwardCache)> {
    let (z, embed) = embed_cached(ex, params)?;
    let attention_block = ex.mask.attention_block;
    let (out, layers, final_ln, final_out) = encode(z, params, attention_block, rng)?;
    Ok((
        out,
        ForwardCache {
            embed,
            layers,
            final_ln,
            final_out,
            attention_block,
        },
    ))
}

/// Accumulates into `grads` the gradient of a scalar whose derivatives with
/// respect to the two head outputs are `d_emg` and `d_logits`.
pub fn backward_example(
    ex: &MaskedExample,
    params: &ModelParams,
    cache: &ForwardCache,
    d_emg: ArrayView2<f64>,
    d_logits: ArrayView2<f64>,
    grads: &mut Weights,
) {
    let hyper = &params.hyper;
    let w = &params.weights;
    let t_len = hyper.window_len;
    debug_assert_eq!(cache.attention_block, ex.mask.attention_block);

    let h_emg = cache.final_out.slice(s![..t_len, ..]);
    let h_int = cache.final_out.slice(s![t_len.., ..]);
    grads.emg_head += &h_emg.t().dot(&d_emg);
    grads.emg_head_bias += &d_emg.sum_axis(Axis(0));
    grads.intent_head += &h_int.t().dot(&d_logits);
    grads.intent_head_bias += &d_logits.sum_axis(Axis(0));
    let d_final = concatenate![
        Axis(0),
        d_emg.dot(&w.emg_head.t()),
        d_logits.dot(&w.intent_head.t())
    ];
    let mut dh = layer_norm_backward(
        d_final.view(),
        w.final_ln_gain.view(),
        &cache.final_ln,
        &mut grads.final_ln_gain,
        &mut grads.final_ln_bias,
    );
    for ((lw, lc), lg) in w
        .layers
        .iter()
        .zip(&cache.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        dh = layer_backward(dh, lw, lc, hyper.heads, lg);
    }

    let dz_emg = dh.slice(s![..t_len, ..]);
    let dz_int = dh.slice(s![t_len.., ..]);
    {
        let mut m0 = grads.modality.row_mut(0);
        m0 += &dz_emg.sum_axis(Axis(0));
    }
    {
        let mut m1 = grads.modality.row_mut(1);
        m1 += &dz_int.sum_axis(Axis(0));
    }
    grads.pos_enc += &dz_emg;
    grads.pos_enc += &dz_int;
    for t in 0..t_len {
        let row = dz_emg.row(t);
        if cache.embed.emg_masked[t] {
            grads.mask_vector += &row;
        } else {
            grads.emg_proj_bias += &row;
            for (c, &x) in ex.emg.row(t).iter().enumerate() {
                if x != 0.0 {
                    let mut g = grads.emg_proj.row_mut(c);
                    g.scaled_add(x, &row);
                }
            }
        }
        let mut e = grads.intent_embed.row_mut(cache.embed.tokens[t]);
        e += &dz_int.row(t);
    }
}

/// Inference: all intent tokens masked, EMG visible, dropout off. Returns
/// `T × K` logits.
pub fn predict_window(emg: ArrayView2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    let t_len = emg.nrows();
    check_window(t_len, params)?;
    let ex = MaskedExample {
        emg,
        labels: None,
        mask: MaskSpec::inference(t_len, emg.ncols()),
    };
    let (z, _) = embed_cached(&ex, params)?;
    encode(z, params, false, None).map(|(o, ..)| o.intent_logits)
}
