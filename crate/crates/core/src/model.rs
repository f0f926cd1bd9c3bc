//! Toy multi-layer transformer in two presets.
//!
//! * `causal_rope`: causal mask, rotary queries/keys, RMS normalisation,
//!   gated SiLU feed-forward.
//! * `global_learnable`: unmasked attention, learnable additive positions
//!   plus a token-type row, mean/variance normalisation with bias, GELU
//!   feed-forward.
//!
//! Blocks are pre-norm: `x + attn(norm(x))`, then `x + ffn(norm(x))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attend, AttentionProjections, MaskMatrix};
use crate::capture::{
    names, AttentionRegime, Capture, CaptureMetadata, Intervention, RopeInfo, Source,
};
use crate::error::{Error, Result};
use crate::positional::{
    add_learnable_pe, LearnablePE, RotaryParams, DEFAULT_ROPE_BASE, ROPE_PAIRING,
};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRegime {
    CausalRope,
    GlobalLearnable,
}

impl ModelRegime {
    pub fn attention(self) -> AttentionRegime {
        match self {
            ModelRegime::CausalRope => AttentionRegime::Causal,
            ModelRegime::GlobalLearnable => AttentionRegime::Global,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_layers: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub regime: ModelRegime,
    pub max_len: usize,
    pub seed: u64,
    pub norm_eps: f32,
    pub rope_base: f32,
}

impl ModelConfig {
    /// Desk-scale defaults: 64-wide, 4 heads, 2 layers, vocabulary 256,
    /// sequences up to 64.
    pub fn desk(regime: ModelRegime) -> Self {
        Self {
            d_model: 64,
            num_heads: 4,
            head_dim: 16,
            num_layers: 2,
            ffn_hidden: 256,
            vocab_size: 256,
            regime,
            max_len: 64,
            seed: 0,
            norm_eps: 1e-5,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("num_layers", self.num_layers),
            ("ffn_hidden", self.ffn_hidden),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model != self.num_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model {} != num_heads {} * head_dim {}",
                self.d_model, self.num_heads, self.head_dim
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        if self.regime == ModelRegime::CausalRope {
            RotaryParams::new(self.head_dim, self.rope_base)?;
        }
        Ok(())
    }

    pub fn rotary(&self) -> Option<RotaryParams> {
        match self.regime {
            ModelRegime::CausalRope => RotaryParams::new(self.head_dim, self.rope_base).ok(),
            ModelRegime::GlobalLearnable => None,
        }
    }

    /// The mask the preset uses when no intervention is applied.
    pub fn default_mask(&self, len: usize) -> Result<MaskMatrix> {
        match self.regime {
            ModelRegime::CausalRope => MaskMatrix::causal(len),
            ModelRegime::GlobalLearnable => MaskMatrix::global(len),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormWeights {
    pub gain: Tensor,
    /// Present for mean/variance normalisation only.
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    /// `[d_model, ffn_hidden]`.
    pub w_in: Tensor,
    /// Gate branch for SiLU-gated feed-forward, `[d_model, ffn_hidden]`.
    pub w_gate: Option<Tensor>,
    /// `[ffn_hidden, d_model]`.
    pub w_out: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: NormWeights,
    pub attn: AttentionProjections,
    pub ffn_norm: NormWeights,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `[vocab_size, d_model]`.
    pub token_embedding: Tensor,
    /// Single all-zero type row `[1, d_model]` in the global preset.
    pub type_embedding: Option<Tensor>,
    pub pe: Option<LearnablePE>,
    pub layers: Vec<LayerWeights>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("finite samples")
}

fn projection(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    gaussian(rng, fan_in, fan_out, 1.0 / (fan_in as f32).sqrt())
}

fn unit_norm(config: &ModelConfig) -> NormWeights {
    let d = config.d_model;
    NormWeights {
        gain: Tensor::new(vec![d], vec![1.0; d]).expect("finite"),
        bias: match config.regime {
            ModelRegime::CausalRope => None,
            ModelRegime::GlobalLearnable => Some(Tensor::zeros(&[d])),
        },
    }
}

/// Seeded random weights. Projections are drawn from `N(0, 1/fan_in)`,
/// embeddings and positional rows from `N(0, 1)`.
pub fn init_random_model(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let token_embedding = gaussian(&mut rng, config.vocab_size, d, 1.0);
    let (type_embedding, pe) = match config.regime {
        ModelRegime::CausalRope => (None, None),
        ModelRegime::GlobalLearnable => (
            Some(Tensor::zeros(&[1, d])),
            Some(LearnablePE::new(gaussian(
                &mut rng,
                config.max_len,
                d,
                1.0,
            ))?),
        ),
    };
    let gated = config.regime == ModelRegime::CausalRope;
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            attn_norm: unit_norm(config),
            attn: AttentionProjections {
                wq: projection(&mut rng, d, d),
                wk: projection(&mut rng, d, d),
                wv: projection(&mut rng, d, d),
                wo: projection(&mut rng, d, d),
            },
            ffn_norm: unit_norm(config),
            ffn: FeedForward {
                w_in: projection(&mut rng, d, config.ffn_hidden),
                w_gate: gated.then(|| projection(&mut rng, d, config.ffn_hidden)),
                w_out: projection(&mut rng, config.ffn_hidden, d),
            },
        })
        .collect();
    Ok(ModelWeights {
        config: config.clone(),
        token_embedding,
        type_embedding,
        pe,
        layers,
    })
}

fn normalize(x: &Tensor, norm: &NormWeights, eps: f32) -> Result<Tensor> {
    let d = x.cols();
    let gain = norm.gain.data();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        let row = x.row(i);
        match &norm.bias {
            None => {
                let ms = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / d as f64;
                let inv = 1.0 / (ms + eps as f64).sqrt();
                out.extend(
                    row.iter()
                        .zip(gain)
                        .map(|(&v, &g)| (v as f64 * inv) as f32 * g),
                );
            }
            Some(bias) => {
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var = row
                    .iter()
                    .map(|&v| (v as f64 - mean) * (v as f64 - mean))
                    .sum::<f64>()
                    / d as f64;
                let inv = 1.0 / (var + eps as f64).sqrt();
                out.extend(
                    row.iter()
                        .zip(gain)
                        .zip(bias.data())
                        .map(|((&v, &g), &b)| ((v as f64 - mean) * inv) as f32 * g + b),
                );
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

fn silu(x: f32) -> f32 {
    let x = x as f64;
    (x / (1.0 + (-x).exp())) as f32
}

fn feed_forward(x: &Tensor, ffn: &FeedForward) -> Result<Tensor> {
    let up = matmul(x, &ffn.w_in)?;
    let hidden = match &ffn.w_gate {
        Some(w_gate) => {
            let gate = matmul(x, w_gate)?;
            let data = gate
                .data()
                .iter()
                .zip(up.data())
                .map(|(&g, &u)| silu(g) * u)
                .collect();
            Tensor::new(up.shape().to_vec(), data)?
        }
        None => up.map(gelu)?,
    };
    matmul(&hidden, &ffn.w_out)
}

impl ModelWeights {
    pub fn check_tokens(&self, token_ids: &[usize]) -> Result<()> {
        if token_ids.is_empty() {
            return Err(Error::Config("token sequence must not be empty".into()));
        }
        let vocab_size = self.config.vocab_size;
        if let Some(&id) = token_ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Vocabulary { id, vocab_size });
        }
        if let Some(pe) = &self.pe {
            if token_ids.len() > pe.max_len() {
                return Err(Error::SequenceTooLong {
                    len: token_ids.len(),
                    max_len: pe.max_len(),
                });
            }
        }
        Ok(())
    }

    /// Input embeddings for `token_ids` laid out at positions `0..L`.
    pub fn embed(&self, token_ids: &[usize]) -> Result<Tensor> {
        self.check_tokens(token_ids)?;
        let rows: Vec<Vec<f32>> = token_ids
            .iter()
            .map(|&t| self.token_embedding.row(t).to_vec())
            .collect();
        let tokens = Tensor::from_rows(&rows)?;
        match (&self.pe, &self.type_embedding) {
            (Some(pe), type_row) => {
                let d = self.config.d_model;
                let type_row = type_row
                    .as_ref()
                    .map(|t| t.row(0).to_vec())
                    .unwrap_or_else(|| vec![0.0; d]);
                let types = Tensor::from_rows(&vec![type_row; token_ids.len()])?;
                add_learnable_pe(&tokens, &types, pe)
            }
            (None, _) => Ok(tokens),
        }
    }

    /// Single-position embedding as it would appear at `position`.
    fn embed_at(&self, token_id: usize, position: usize) -> Result<Tensor> {
        if token_id >= self.config.vocab_size {
            return Err(Error::Vocabulary {
                id: token_id,
                vocab_size: self.config.vocab_size,
            });
        }
        let d = self.config.d_model;
        let mut row = self.token_embedding.row(token_id).to_vec();
        if let Some(pe) = &self.pe {
            if position >= pe.max_len() {
                return Err(Error::SequenceTooLong {
                    len: position + 1,
                    max_len: pe.max_len(),
                });
            }
            let type_row = self.type_embedding.as_ref().map(|t| t.row(0));
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v + type_row.map_or(0.0, |t| t[c]) + pe.table().at(position, c);
            }
        }
        Tensor::new(vec![1, d], row)
    }

    pub fn model_name(&self) -> String {
        match self.config.regime {
            ModelRegime::CausalRope => "toy-causal-rope".into(),
            ModelRegime::GlobalLearnable => "toy-global-learnable".into(),
        }
    }

    pub fn to_capture(&self) -> Result<Capture> {
        let mut capture = Capture::new(CaptureMetadata {
            source: Source::Toy,
            model_name: self.model_name(),
            regime: Some(self.config.regime.attention()),
            interventions: self.pe_interventions(),
            rope: self.rope_info(),
            ..Default::default()
        });
        capture.model_config = Some(self.config.clone());
        capture.insert(names::EMB_TOKEN, self.token_embedding.clone())?;
        if let Some(t) = &self.type_embedding {
            capture.insert(names::EMB_TYPE, t.clone())?;
        }
        if let Some(pe) = &self.pe {
            capture.insert(names::PE_TABLE, pe.table().clone())?;
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let mut put =
                |leaf: &str, t: &Tensor| capture.insert(format!("layer{i}.{leaf}"), t.clone());
            put("attn_norm_gain", &layer.attn_norm.gain)?;
            if let Some(b) = &layer.attn_norm.bias {
                put("attn_norm_bias", b)?;
            }
            put("wq", &layer.attn.wq)?;
            put("wk", &layer.attn.wk)?;
            put("wv", &layer.attn.wv)?;
            put("wo", &layer.attn.wo)?;
            put("ffn_norm_gain", &layer.ffn_norm.gain)?;
            if let Some(b) = &layer.ffn_norm.bias {
                put("ffn_norm_bias", b)?;
            }
            put("w_ffn_in", &layer.ffn.w_in)?;
            if let Some(g) = &layer.ffn.w_gate {
                put("w_ffn_gate", g)?;
            }
            put("w_ffn_out", &layer.ffn.w_out)?;
        }
        Ok(capture)
    }

    /// Rebuilds weights from a directory written by [`ModelWeights::to_capture`].
    pub fn from_capture(capture: &Capture) -> Result<Self> {
        let config = capture
            .model_config
            .clone()
            .ok_or_else(|| Error::IncompleteCapture(vec!["model_config".into()]))?;
        config.validate()?;
        let mut missing = Vec::new();
        let mut take = |name: String| -> Option<Tensor> {
            let t = capture.get(&name).cloned();
            if t.is_none() {
                missing.push(name);
            }
            t
        };
        let global = config.regime == ModelRegime::GlobalLearnable;
        let gated = !global;
        let token_embedding = take(names::EMB_TOKEN.into());
        let type_embedding = global.then(|| take(names::EMB_TYPE.into())).flatten();
        let pe_table = global.then(|| take(names::PE_TABLE.into())).flatten();
        let mut layers = Vec::new();
        for i in 0..config.num_layers {
            let mut leaf = |l: &str| take(format!("layer{i}.{l}"));
            let parts = (
                leaf("attn_norm_gain"),
                if global { leaf("attn_norm_bias") } else { None },
                leaf("wq"),
                leaf("wk"),
                leaf("wv"),
                leaf("wo"),
                leaf("ffn_norm_gain"),
                if global { leaf("ffn_norm_bias") } else { None },
                leaf("w_ffn_in"),
                if gated { leaf("w_ffn_gate") } else { None },
                leaf("w_ffn_out"),
            );
            if let (
                Some(ag),
                ab,
                Some(wq),
                Some(wk),
                Some(wv),
                Some(wo),
                Some(fg),
                fb,
                Some(wi),
                wg,
                Some(wout),
            ) = parts
            {
                layers.push(LayerWeights {
                    attn_norm: NormWeights { gain: ag, bias: ab },
                    attn: AttentionProjections { wq, wk, wv, wo },
                    ffn_norm: NormWeights { gain: fg, bias: fb },
                    ffn: FeedForward {
                        w_in: wi,
                        w_gate: wg,
                        w_out: wout,
                    },
                });
            }
        }
        if !missing.is_empty() {
            return Err(Error::IncompleteCapture(missing));
        }
        let swaps = capture
            .metadata
            .interventions
            .iter()
            .filter_map(|i| match *i {
                Intervention::PeSwap { target, source } => Some((target, source)),
                _ => None,
            })
            .collect();
        let pe = pe_table
            .map(|t| LearnablePE::with_log(t, swaps))
            .transpose()?;
        let weights = ModelWeights {
            config,
            token_embedding: token_embedding.expect("checked above"),
            type_embedding,
            pe,
            layers,
        };
        weights.check_shapes()?;
        Ok(weights)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let (d, h) = (c.d_model, c.ffn_hidden);
        let mut expect: Vec<(&Tensor, Vec<usize>)> =
            vec![(&self.token_embedding, vec![c.vocab_size, d])];
        if let Some(t) = &self.type_embedding {
            expect.push((t, vec![1, d]));
        }
        if let Some(pe) = &self.pe {
            expect.push((pe.table(), vec![c.max_len, d]));
        }
        for l in &self.layers {
            for w in [&l.attn.wq, &l.attn.wk, &l.attn.wv, &l.attn.wo] {
                expect.push((w, vec![d, d]));
            }
            for n in [&l.attn_norm, &l.ffn_norm] {
                expect.push((&n.gain, vec![d]));
                if let Some(b) = &n.bias {
                    expect.push((b, vec![d]));
                }
            }
            expect.push((&l.ffn.w_in, vec![d, h]));
            if let Some(g) = &l.ffn.w_gate {
                expect.push((g, vec![d, h]));
            }
            expect.push((&l.ffn.w_out, vec![h, d]));
        }
        for (t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "ModelWeights",
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
        }
        Ok(())
    }

    fn pe_interventions(&self) -> Vec<Intervention> {
        self.pe
            .iter()
            .flat_map(|pe| pe.swap_log().iter())
            .map(|&(target, source)| Intervention::PeSwap { target, source })
            .collect()
    }

    fn rope_info(&self) -> Option<RopeInfo> {
        self.config.rotary().map(|r| RopeInfo {
            base: r.base(),
            pairing: ROPE_PAIRING.into(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Residual stream after each layer, `[L, d_model]`.
    pub hidden: Vec<Tensor>,
    pub capture: Option<Capture>,
}

/// Runs every layer under `mask`. With `capture` on, the returned
/// [`Capture`] holds per-head queries, keys, weights and values, the
/// attention and feed-forward outputs, and the hidden state of each layer.
pub fn forward(
    weights: &ModelWeights,
    token_ids: &[usize],
    mask: &MaskMatrix,
    capture: bool,
) -> Result<ForwardOutput> {
    let cfg = &weights.config;
    let mut x = weights.embed(token_ids)?;
    if mask.len() != token_ids.len() {
        return Err(Error::Dimension {
            op: "forward",
            lhs: vec![mask.len(), mask.len()],
            rhs: vec![token_ids.len()],
        });
    }
    let rope = cfg.rotary();
    let mut record = capture.then(|| {
        let mut interventions: Vec<Intervention> = weights.pe_interventions();
        interventions.extend(
            mask.modified_rows()
                .iter()
                .map(|&position| Intervention::MaskRow { position }),
        );
        let mut c = Capture::new(CaptureMetadata {
            source: Source::Toy,
            model_name: weights.model_name(),
            regime: Some(cfg.regime.attention()),
            interventions,
            token_ids: Some(token_ids.to_vec()),
            rope: weights.rope_info(),
            notes: Vec::new(),
        });
        c.model_config = Some(cfg.clone());
        c
    });
    if let Some(c) = record.as_mut() {
        c.insert(names::EMB_INPUT, x.clone())?;
        if let Some(pe) = &weights.pe {
            c.insert(names::PE_TABLE, pe.table().clone())?;
        }
    }

    let mut hidden = Vec::with_capacity(weights.layers.len());
    for (i, layer) in weights.layers.iter().enumerate() {
        let a = normalize(&x, &layer.attn_norm, cfg.norm_eps)?;
        let attn = multi_head_attend(&a, &layer.attn, cfg.num_heads, mask, rope.as_ref())?;
        x = x.add(&attn.out)?;
        let f = feed_forward(&normalize(&x, &layer.ffn_norm, cfg.norm_eps)?, &layer.ffn)?;
        x = x.add(&f)?;
        if let Some(c) = record.as_mut() {
            for (h, head) in attn.heads.into_iter().enumerate() {
                c.insert(names::query(i, h), head.q)?;
                c.insert(names::key(i, h), head.k)?;
                c.insert(names::attn_weights(i, h), head.weights)?;
                c.insert(names::value(i, h), head.v)?;
            }
            c.insert(names::attn_out(i), attn.out)?;
            c.insert(names::ffn_out(i), f)?;
            c.insert(names::hidden(i), x.clone())?;
        }
        hidden.push(x.clone());
    }
    Ok(ForwardOutput {
        hidden,
        capture: record,
    })
}

/// Hidden state after `layer` for a position whose attention row is
/// self-only in every layer. Attention then reduces to the fused
/// `W_V · W_O` projection, so the result depends on `token_id` (and, with
/// learnable positions, on `position`) and nothing else.
pub fn non_mixed_path(
    weights: &ModelWeights,
    token_id: usize,
    position: usize,
    layer: usize,
) -> Result<Tensor> {
    if layer >= weights.layers.len() {
        return Err(Error::Index {
            index: layer,
            len: weights.layers.len(),
        });
    }
    let eps = weights.config.norm_eps;
    let mut x = weights.embed_at(token_id, position)?;
    for l in &weights.layers[..=layer] {
        let fused = matmul(&l.attn.wv, &l.attn.wo)?;
        x = x.add(&matmul(&normalize(&x, &l.attn_norm, eps)?, &fused)?)?;
        x = x.add(&feed_forward(&normalize(&x, &l.ffn_norm, eps)?, &l.ffn)?)?;
    }
    Tensor::new(vec![weights.config.d_model], x.into_data())
}

/// Embedding axis reserved for the waiver marker.
pub const MARKER_AXIS: usize = 0;
/// Embedding axis every non-waiver token carries a constant on.
pub const PRESENCE_AXIS: usize = 1;

const MARKER_SCALE: f32 = 1.0e4;
const QUERY_GAIN: f32 = 1.0;
const SINK_KEY_GAIN: f32 = 2.0;
const ORDINARY_KEY_GAIN: f32 = 0.5;

/// Zero row `MARKER_AXIS` and centre the remaining rows, so that both the
/// marker direction and the all-ones direction map to zero.
fn annihilate_marker(w: &Tensor) -> Result<Tensor> {
    let (rows, cols) = (w.rows(), w.cols());
    let mut mean = vec![0.0f64; cols];
    for r in 1..rows {
        for (m, &v) in mean.iter_mut().zip(w.row(r)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= (rows - 1) as f64);
    let mut data = Vec::with_capacity(w.len());
    data.extend(std::iter::repeat_n(0.0, cols));
    for r in 1..rows {
        data.extend(
            w.row(r)
                .iter()
                .zip(&mean)
                .map(|(&v, &m)| (v as f64 - m) as f32),
        );
    }
    Tensor::new(vec![rows, cols], data)
}

/// Zero the output columns that would write onto the reserved axes.
fn protect_reserved_axes(w: &Tensor) -> Result<Tensor> {
    let cols = w.cols();
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % cols;
            if c == MARKER_AXIS || c == PRESENCE_AXIS {
                0.0
            } else {
                v
            }
        })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

fn add_to_row(w: &Tensor, row: usize, delta: &[f32]) -> Result<Tensor> {
    let mut out = w.clone();
    let updated: Vec<f32> = w.row(row).iter().zip(delta).map(|(a, b)| a + b).collect();
    out.set_row(row, &updated)?;
    Ok(out)
}

/// Weights in which `waiver_token` is a waiver element in every layer: it
/// draws most of the attention mass from other positions while its value
/// vector is (numerically) zero.
///
/// Construction, on top of [`init_random_model`]:
/// * the waiver token embeds as a large multiple of `MARKER_AXIS`; every
///   other token carries `sqrt(d_model)` on `PRESENCE_AXIS` and nothing on
///   the marker axis;
/// * `W_Q` maps presence to a fixed per-head direction, `W_K` maps the marker
///   to a large positive multiple of it and presence to a negative one;
/// * `W_V`, the feed-forward inputs and the random parts of `W_Q`/`W_K`
///   annihilate the marker and all-ones directions;
/// * `W_O` and the feed-forward outputs never write onto the reserved axes.
///
/// The per-head direction sits on the lowest-frequency rotary pair, so
/// relative rotations up to a few hundred positions barely change it.
pub fn build_synthetic_waiver_model(
    config: &ModelConfig,
    waiver_token: usize,
) -> Result<ModelWeights> {
    config.validate()?;
    if config.vocab_size < 8 {
        return Err(Error::Config(format!(
            "synthetic waiver model needs a vocabulary of at least 8, got {}",
            config.vocab_size
        )));
    }
    if !(1..=2).contains(&config.num_layers) {
        return Err(Error::Config(format!(
            "synthetic waiver model supports 1 or 2 layers, got {}",
            config.num_layers
        )));
    }
    if config.d_model < 8 || config.head_dim < 2 {
        return Err(Error::Config(format!(
            "d_model {} / head_dim {} too small to reserve marker and presence axes",
            config.d_model, config.head_dim
        )));
    }
    if waiver_token >= config.vocab_size {
        return Err(Error::Vocabulary {
            id: waiver_token,
            vocab_size: config.vocab_size,
        });
    }

    let mut w = init_random_model(config)?;
    let d = config.d_model;
    let presence = (d as f32).sqrt();

    let mut emb = w.token_embedding.clone();
    for t in 0..config.vocab_size {
        let mut row = emb.row(t).to_vec();
        if t == waiver_token {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[MARKER_AXIS] = MARKER_SCALE;
        } else {
            row[MARKER_AXIS] = 0.0;
            row[PRESENCE_AXIS] = presence;
        }
        emb.set_row(t, &row)?;
    }
    w.token_embedding = emb;

    if let Some(pe) = w.pe.as_mut() {
        for r in 0..config.max_len {
            let mut row = pe.table().row(r).to_vec();
            row[MARKER_AXIS] = 0.0;
            row[PRESENCE_AXIS] = 0.0;
            pe.table_mut().set_row(r, &row)?;
        }
    }

    // Unit direction per head on the lowest-frequency rotary pair.
    let mut direction = vec![0.0f32; d];
    for h in 0..config.num_heads {
        direction[h * config.head_dim + config.head_dim / 2 - 1] = 1.0;
    }
    let scaled = |s: f32| direction.iter().map(|v| v * s).collect::<Vec<f32>>();

    for layer in &mut w.layers {
        let wq = annihilate_marker(&layer.attn.wq)?;
        layer.attn.wq = add_to_row(&wq, PRESENCE_AXIS, &scaled(QUERY_GAIN))?;
        let wk = annihilate_marker(&layer.attn.wk)?;
        let wk = add_to_row(&wk, MARKER_AXIS, &scaled(SINK_KEY_GAIN))?;
        layer.attn.wk = add_to_row(&wk, PRESENCE_AXIS, &scaled(-ORDINARY_KEY_GAIN))?;
        layer.attn.wv = annihilate_marker(&layer.attn.wv)?;
        layer.attn.wo = protect_reserved_axes(&layer.attn.wo)?;
        layer.ffn.w_in = annihilate_marker(&layer.ffn.w_in)?;
        layer.ffn.w_gate = layer
            .ffn
            .w_gate
            .as_ref()
            .map(annihilate_marker)
            .transpose()?;
        layer.ffn.w_out = protect_reserved_axes(&layer.ffn.w_out)?;
    }
    Ok(w)
}
