use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    /// Fixed sine/cosine table, not trained.
    Sinusoidal,
    /// Trained table initialised from the sinusoidal one.
    Learned,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub window_len: usize,
    pub channels: usize,
    pub classes: usize,
    pub positional: PositionalEncoding,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            layers: 2,
            ff_dim: 512,
            dropout: 0.15,
            window_len: 600,
            channels: 8,
            classes: 6,
            positional: PositionalEncoding::Sinusoidal,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.window_len == 0 || self.channels == 0 || self.classes == 0 || self.ff_dim == 0 {
            return bad("window_len, channels, classes and ff_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Row of the intent table holding the mask token.
    pub fn mask_token(&self) -> usize {
        self.classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Every array of the network. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `C × d`.
    pub emg_proj: Array2<f64>,
    pub emg_proj_bias: Array1<f64>,
    /// `(K + 1) × d`; the last row is the mask token.
    pub intent_embed: Array2<f64>,
    pub mask_vector: Array1<f64>,
    /// Row 0: EMG, row 1: intent.
    pub modality: Array2<f64>,
    /// `T × d`, shared by both modalities.
    pub pos_enc: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Array1<f64>,
    pub final_ln_bias: Array1<f64>,
    /// `d × C`.
    pub emg_head: Array2<f64>,
    pub emg_head_bias: Array1<f64>,
    /// `d × K`.
    pub intent_head: Array2<f64>,
    pub intent_head_bias: Array1<f64>,
}

/// A named view of one parameter array.
pub struct Block<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

pub struct BlockMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
    pub decay: bool,
}

macro_rules! visit_blocks {
    ($w:expr, $learned_pos:expr, $f:ident, $slice:ident, $iter:ident) => {{
        let w = $w;
        $f("emg_proj", w.emg_proj.shape().to_vec(), w.emg_proj.$slice().unwrap(), true);
        $f("emg_proj_bias", w.emg_proj_bias.shape().to_vec(), w.emg_proj_bias.$slice().unwrap(), false);
        $f("intent_embed", w.intent_embed.shape().to_vec(), w.intent_embed.$slice().unwrap(), true);
        $f("mask_vector", w.mask_vector.shape().to_vec(), w.mask_vector.$slice().unwrap(), false);
        $f("modality", w.modality.shape().to_vec(), w.modality.$slice().unwrap(), false);
        if $learned_pos {
            $f("pos_enc", w.pos_enc.shape().to_vec(), w.pos_enc.$slice().unwrap(), false);
        }
        for (i, l) in w.layers.$iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            $f(&p("ln1_gain"), l.ln1_gain.shape().to_vec(), l.ln1_gain.$slice().unwrap(), false);
            $f(&p("ln1_bias"), l.ln1_bias.shape().to_vec(), l.ln1_bias.$slice().unwrap(), false);
            $f(&p("wq"), l.wq.shape().to_vec(), l.wq.$slice().unwrap(), true);
            $f(&p("bq"), l.bq.shape().to_vec(), l.bq.$slice().unwrap(), false);
            $f(&p("wk"), l.wk.shape().to_vec(), l.wk.$slice().unwrap(), true);
            $f(&p("bk"), l.bk.shape().to_vec(), l.bk.$slice().unwrap(), false);
            $f(&p("wv"), l.wv.shape().to_vec(), l.wv.$slice().unwrap(), true);
            $f(&p("bv"), l.bv.shape().to_vec(), l.bv.$slice().unwrap(), false);
            $f(&p("wo"), l.wo.shape().to_vec(), l.wo.$slice().unwrap(), true);
            $f(&p("bo"), l.bo.shape().to_vec(), l.bo.$slice().unwrap(), false);
            $f(&p("ln2_gain"), l.ln2_gain.shape().to_vec(), l.ln2_gain.$slice().unwrap(), false);
            $f(&p("ln2_bias"), l.ln2_bias.shape().to_vec(), l.ln2_bias.$slice().unwrap(), false);
            $f(&p("w1"), l.w1.shape().to_vec(), l.w1.$slice().unwrap(), true);
            $f(&p("b1"), l.b1.shape().to_vec(), l.b1.$slice().unwrap(), false);
            $f(&p("w2"), l.w2.shape().to_vec(), l.w2.$slice().unwrap(), true);
            $f(&p("b2"), l.b2.shape().to_vec(), l.b2.$slice().unwrap(), false);
        }
        $f("final_ln_gain", w.final_ln_gain.shape().to_vec(), w.final_ln_gain.$slice().unwrap(), false);
        $f("final_ln_bias", w.final_ln_bias.shape().to_vec(), w.final_ln_bias.$slice().unwrap(), false);
        $f("emg_head", w.emg_head.shape().to_vec(), w.emg_head.$slice().unwrap(), true);
        $f("emg_head_bias", w.emg_head_bias.shape().to_vec(), w.emg_head_bias.$slice().unwrap(), false);
        $f("intent_head", w.intent_head.shape().to_vec(), w.intent_head.$slice().unwrap(), true);
        $f("intent_head_bias", w.intent_head_bias.shape().to_vec(), w.intent_head_bias.$slice().unwrap(), false);
    }};
}

impl Weights {
    pub fn zeros(h: &Hyper) -> Self {
        let d = h.d_model;
        let z1 = |n| Array1::zeros(n);
        let z2 = |r, c| Array2::zeros((r, c));
        Self {
            emg_proj: z2(h.channels, d),
            emg_proj_bias: z1(d),
            intent_embed: z2(h.classes + 1, d),
            mask_vector: z1(d),
            modality: z2(2, d),
            pos_enc: z2(h.window_len, d),
            layers: (0..h.layers)
                .map(|_| LayerWeights {
                    ln1_gain: z1(d),
                    ln1_bias: z1(d),
                    wq: z2(d, d),
                    bq: z1(d),
                    wk: z2(d, d),
                    bk: z1(d),
                    wv: z2(d, d),
                    bv: z1(d),
                    wo: z2(d, d),
                    bo: z1(d),
                    ln2_gain: z1(d),
                    ln2_bias: z1(d),
                    w1: z2(d, h.ff_dim),
                    b1: z1(h.ff_dim),
                    w2: z2(h.ff_dim, d),
                    b2: z1(d),
                })
                .collect(),
            final_ln_gain: z1(d),
            final_ln_bias: z1(d),
            emg_head: z2(d, h.channels),
            emg_head_bias: z1(h.channels),
            intent_head: z2(d, h.classes),
            intent_head_bias: z1(h.classes),
        }
    }

    /// Parameter blocks in a fixed order. The positional table is included
    /// only when it is learned.
    pub fn blocks(&self, learned_pos: bool) -> Vec<Block<'_>> {
        let mut out = Vec::new();
        self.collect_blocks(learned_pos, &mut out);
        out
    }

    fn collect_blocks<'a>(&'a self, learned_pos: bool, out: &mut Vec<Block<'a>>) {
        let mut f = |name: &str, shape: Vec<usize>, data: &'a [f64], decay: bool| {
            out.push(Block {
                name: name.to_string(),
                shape,
                data,
                decay,
            })
        };
        visit_blocks!(self, learned_pos, f, as_slice, iter);
    }

    pub fn blocks_mut(&mut self, learned_pos: bool) -> Vec<BlockMut<'_>> {
        let mut out = Vec::new();
        self.collect_blocks_mut(learned_pos, &mut out);
        out
    }

    fn collect_blocks_mut<'a>(&'a mut self, learned_pos: bool, out: &mut Vec<BlockMut<'a>>) {
        let mut f = |name: &str, _shape: Vec<usize>, data: &'a mut [f64], decay: bool| {
            out.push(BlockMut {
                name: name.to_string(),
                data,
                decay,
            })
        };
        visit_blocks!(self, learned_pos, f, as_slice_mut, iter_mut);
    }

    /// Adds `scale * other` elementwise.
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        for (dst, src) in self.blocks_mut(true).into_iter().zip(other.blocks(true)) {
            for (a, b) in dst.data.iter_mut().zip(src.data) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.blocks_mut(true) {
            b.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn num_parameters(&self, learned_pos: bool) -> usize {
        self.blocks(learned_pos).iter().map(|b| b.data.len()).sum()
    }
}

/// Fixed sine/cosine positional table.
pub fn sinusoidal_table(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(t, j)| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10_000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// All learnable arrays plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub weights: Weights,
}

impl ModelParams {
    /// Xavier-uniform linear layers, zero biases, unit layer-norm gains and
    /// small normal embeddings.
    pub fn init(hyper: Hyper, rng: &mut ChaCha8Rng) -> Result<Self> {
        hyper.validate()?;
        let mut w = Weights::zeros(&hyper);
        let d = hyper.d_model;
        let normal = Normal::new(0.0, 0.02).unwrap();
        let xavier = |a: &mut Array2<f64>, rng: &mut ChaCha8Rng| {
            let (r, c) = a.dim();
            let bound = (6.0 / (r + c) as f64).sqrt();
            a.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        };
        xavier(&mut w.emg_proj, rng);
        w.intent_embed.iter_mut().for_each(|v| *v = normal.sample(rng));
        w.mask_vector.iter_mut().for_each(|v| *v = normal.sample(rng));
        w.modality.iter_mut().for_each(|v| *v = normal.sample(rng));
        w.pos_enc = sinusoidal_table(hyper.window_len, d);
        for l in &mut w.layers {
            l.ln1_gain.fill(1.0);
            l.ln2_gain.fill(1.0);
            xavier(&mut l.wq, rng);
            xavier(&mut l.wk, rng);
            xavier(&mut l.wv, rng);
            xavier(&mut l.wo, rng);
            xavier(&mut l.w1, rng);
            xavier(&mut l.w2, rng);
        }
        w.final_ln_gain.fill(1.0);
        xavier(&mut w.emg_head, rng);
        xavier(&mut w.intent_head, rng);
        Ok(Self { hyper, weights: w })
    }

    pub fn learned_pos(&self) -> bool {
        self.hyper.positional == PositionalEncoding::Learned
    }

    pub fn zero_grads(&self) -> Weights {
        Weights::zeros(&self.hyper)
    }
}
