//! Decoder-only causal transformer: token embedding, pre-RMSNorm blocks of
//! grouped-query attention with rotary positions and a gated SiLU
//! feed-forward, final norm and LM head. No biases, no dropout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, Ia3Site, LoraConfig, Site, Target};
use crate::error::{Error, Result};
use crate::tensor::{DType, ParamId, ParamStore, Tape, Tensor, Var};

pub type TokenId = u32;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Geometry of the 1B-parameter, 16-layer, 2048-wide base model used
    /// for analytic parameter counts. Never instantiated.
    pub fn paper_1b() -> Self {
        Self {
            n_layers: 16,
            d_model: 2048,
            n_heads: 32,
            n_kv_heads: 8,
            d_head: 64,
            d_ff: 8192,
            vocab: 128_256,
            max_positions: 131_072,
            rope_theta: 500_000.0,
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    /// Desk-scale default: byte vocabulary plus BOS/EOS/PAD.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 16,
            d_ff: 256,
            vocab: 259,
            max_positions: 512,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
            tie_embeddings: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-1b" => Ok(Self::paper_1b()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::config(format!("unknown model preset `{other}` (expected paper-1b or toy)"))),
        }
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::config(format!(
                "n_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::config(format!(
                "d_model ({}) must equal n_heads·d_head ({}·{})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::config(format!("d_head must be even for rotary embeddings, got {}", self.d_head)));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps >= 0.0) {
            return Err(Error::config("rope_theta must be positive and norm_eps non-negative"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of a projection.
    pub fn shape_of(&self, target: Target) -> (usize, usize) {
        let d = self.d_model;
        match target {
            Target::Q | Target::O => (d, d),
            Target::K | Target::V => (d, self.kv_width()),
            Target::Gate | Target::Up => (d, self.d_ff),
            Target::Down => (self.d_ff, d),
        }
    }
}

/// Closed-form base parameter counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BaseParamCount {
    pub embedding: usize,
    pub per_layer_attention: usize,
    pub per_layer_feed_forward: usize,
    pub per_layer_norms: usize,
    pub final_norm: usize,
    pub lm_head: usize,
    /// Total for the configured tying.
    pub total: usize,
    pub total_tied: usize,
    pub total_untied: usize,
}

pub fn count_base_params(config: &ModelConfig) -> Result<BaseParamCount> {
    config.validate()?;
    let d = config.d_model;
    let kv = config.kv_width();
    let embedding = config.vocab * d;
    let per_layer_attention = 2 * d * d + 2 * d * kv;
    let per_layer_feed_forward = 3 * d * config.d_ff;
    let per_layer_norms = 2 * d;
    let final_norm = d;
    let body = embedding + config.n_layers * (per_layer_attention + per_layer_feed_forward + per_layer_norms) + final_norm;
    let lm_head = if config.tie_embeddings { 0 } else { embedding };
    Ok(BaseParamCount {
        embedding,
        per_layer_attention,
        per_layer_feed_forward,
        per_layer_norms,
        final_norm,
        lm_head,
        total: body + lm_head,
        total_tied: body,
        total_untied: body + embedding,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LayerWeights {
    pub attn_norm: ParamId,
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
    pub ff_norm: ParamId,
    pub gate: ParamId,
    pub up: ParamId,
    pub down: ParamId,
}

impl LayerWeights {
    pub fn projection(&self, target: Target) -> ParamId {
        match target {
            Target::Q => self.q,
            Target::K => self.k,
            Target::V => self.v,
            Target::O => self.o,
            Target::Gate => self.gate,
            Target::Up => self.up,
            Target::Down => self.down,
        }
    }
}

/// Cached rotated keys and values per layer for incremental decoding.
#[derive(Clone, Debug)]
pub struct KVCache {
    layers: Vec<Option<(Tensor, Tensor)>>,
    len: usize,
    max_positions: usize,
}

impl KVCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            layers: vec![None; config.n_layers],
            len: 0,
            max_positions: config.max_positions,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub(crate) embed: ParamId,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) final_norm: ParamId,
    pub(crate) lm_head: Option<ParamId>,
    pub(crate) adapter: Option<Adapter>,
    pub(crate) merged_lora: Option<LoraConfig>,
    dtype: DType,
}

/// Per-call state shared by all blocks of one forward pass.
struct ForwardCtx {
    positions: Vec<usize>,
    past: usize,
    prefixes: Vec<Option<(Var, Var)>>,
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64, dtype: DType) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data, dtype).expect("shape matches data")
}

pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model> {
    Model::init(config, seed, DType::F32)
}

impl Model {
    /// Weights ~ N(0, 0.02²) drawn in a fixed order from `seed`; norm scales are ones.
    pub fn init(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embed = store.insert("embed", normal_tensor(&mut rng, &[config.vocab, d], INIT_STD, dtype), true)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut w = |name: &str, shape: &[usize], store: &mut ParamStore| {
                store.insert(format!("layers.{l}.{name}"), normal_tensor(&mut rng, shape, INIT_STD, dtype), true)
            };
            let attn_norm = store.insert(format!("layers.{l}.attn_norm"), Tensor::ones(&[d], dtype), true)?;
            let q = w("attn.q", &[d, d], &mut store)?;
            let k = w("attn.k", &[d, config.kv_width()], &mut store)?;
            let v = w("attn.v", &[d, config.kv_width()], &mut store)?;
            let o = w("attn.o", &[d, d], &mut store)?;
            let ff_norm = store.insert(format!("layers.{l}.ff_norm"), Tensor::ones(&[d], dtype), true)?;
            let gate = w("ff.gate", &[d, config.d_ff], &mut store)?;
            let up = w("ff.up", &[d, config.d_ff], &mut store)?;
            let down = w("ff.down", &[config.d_ff, d], &mut store)?;
            layers.push(LayerWeights {
                attn_norm,
                q,
                k,
                v,
                o,
                ff_norm,
                gate,
                up,
                down,
            });
        }
        let final_norm = store.insert("final_norm", Tensor::ones(&[d], dtype), true)?;
        let lm_head = if config.tie_embeddings {
            None
        } else {
            Some(store.insert("lm_head", normal_tensor(&mut rng, &[d, config.vocab], INIT_STD, dtype), true)?)
        };
        Ok(Self {
            config,
            store,
            embed,
            layers,
            final_norm,
            lm_head,
            adapter: None,
            merged_lora: None,
            dtype,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn layer(&self, l: usize) -> &LayerWeights {
        &self.layers[l]
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embed
    }

    pub fn adapter(&self) -> Option<&Adapter> {
        self.adapter.as_ref()
    }

    /// Names of parameters that belong to the base model (not an adapter).
    pub fn base_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed, self.final_norm];
        ids.extend(self.lm_head);
        for lw in &self.layers {
            ids.extend([lw.attn_norm, lw.q, lw.k, lw.v, lw.o, lw.ff_norm, lw.gate, lw.up, lw.down]);
        }
        ids.sort();
        ids
    }

    /// Extra attention slots occupied by learned prefixes.
    pub fn prefix_len(&self) -> usize {
        self.adapter.as_ref().map_or(0, |a| a.prefix_len())
    }

    /// Longest token sequence a single uncached forward can take.
    pub fn usable_context(&self) -> usize {
        self.config.max_positions.saturating_sub(self.prefix_len())
    }

    fn check_context(&self, new: usize, past: usize) -> Result<()> {
        let needed = self.prefix_len() + past + new;
        if needed > self.config.max_positions {
            return Err(Error::ContextLength {
                needed,
                limit: self.config.max_positions,
            });
        }
        Ok(())
    }

    /// Records the full forward pass on `tape` and returns the logits var
    /// (`[seq × vocab]`). The cache, when given, is read and extended.
    pub fn forward_tape(&self, tape: &mut Tape, tokens: &[TokenId], mut cache: Option<&mut KVCache>) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Invalid("forward called with no tokens".into()));
        }
        let past = cache.as_ref().map_or(0, |c| c.len);
        self.check_context(tokens.len(), past)?;
        let prefixes = match &self.adapter {
            Some(a) => a.prefix_kv(tape, &self.store, &self.config)?,
            None => vec![None; self.config.n_layers],
        };
        let ctx = ForwardCtx {
            positions: (past..past + tokens.len()).collect(),
            past,
            prefixes,
        };
        let table = tape.param(&self.store, self.embed);
        let mut x = tape.embedding(table, tokens)?;
        for l in 0..self.config.n_layers {
            let layer_cache = cache.as_mut().map(|c| &mut c.layers[l]);
            x = self.attention_sublayer_tape(tape, l, x, &ctx, layer_cache)?;
            x = self.ff_sublayer_tape(tape, l, x)?;
        }
        if let Some(c) = cache {
            c.len += tokens.len();
        }
        let fw = tape.param(&self.store, self.final_norm);
        let h = tape.rms_norm(x, fw, self.config.norm_eps)?;
        match self.lm_head {
            Some(id) => {
                let w = tape.param(&self.store, id);
                tape.matmul(h, w)
            }
            None => tape.matmul_bt(h, table),
        }
    }

    pub fn forward_logits(&self, tokens: &[TokenId], cache: Option<&mut KVCache>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, tokens, cache)?;
        Ok(tape.value(out).clone())
    }

    fn project(&self, tape: &mut Tape, l: usize, target: Target, x: Var) -> Result<Var> {
        let w = tape.param(&self.store, self.layers[l].projection(target));
        match &self.adapter {
            Some(a) => a.project(tape, &self.store, l, target, x, w),
            None => tape.matmul(x, w),
        }
    }

    fn scale_activation(&self, tape: &mut Tape, l: usize, site: Ia3Site, h: Var) -> Result<Var> {
        match &self.adapter {
            Some(a) => a.scale_activation(tape, &self.store, l, site, h),
            None => Ok(h),
        }
    }

    fn bottleneck(&self, tape: &mut Tape, l: usize, site: Site, h: Var) -> Result<Var> {
        match &self.adapter {
            Some(a) => a.bottleneck(tape, &self.store, l, site, h),
            None => Ok(h),
        }
    }

    /// `x + attention(norm(x))` for layer `l`.
    fn attention_sublayer_tape(
        &self,
        tape: &mut Tape,
        l: usize,
        x: Var,
        ctx: &ForwardCtx,
        cache: Option<&mut Option<(Tensor, Tensor)>>,
    ) -> Result<Var> {
        let c = &self.config;
        let lw = &self.layers[l];
        let nw = tape.param(&self.store, lw.attn_norm);
        let h = tape.rms_norm(x, nw, c.norm_eps)?;
        let q = self.project(tape, l, Target::Q, h)?;
        let k = self.project(tape, l, Target::K, h)?;
        let v = self.project(tape, l, Target::V, h)?;
        let k = self.scale_activation(tape, l, Ia3Site::Key, k)?;
        let v = self.scale_activation(tape, l, Ia3Site::Value, v)?;
        let q = tape.rope(q, &ctx.positions, c.d_head, c.rope_theta)?;
        let k = tape.rope(k, &ctx.positions, c.d_head, c.rope_theta)?;

        let (mut keys, mut values) = (k, v);
        if let Some(slot) = cache {
            if let Some((ck, cv)) = slot.as_ref() {
                let ck = tape.constant(ck.clone());
                let cv = tape.constant(cv.clone());
                keys = tape.concat_rows(&[ck, k])?;
                values = tape.concat_rows(&[cv, v])?;
            }
            *slot = Some((tape.value(keys).clone(), tape.value(values).clone()));
        }
        let mut offset = ctx.past;
        if let Some((pk, pv)) = ctx.prefixes[l] {
            offset += tape.value(pk).shape()[0];
            keys = tape.concat_rows(&[pk, keys])?;
            values = tape.concat_rows(&[pv, values])?;
        }

        let group = c.n_heads / c.n_kv_heads;
        let scale = 1.0 / (c.d_head as f64).sqrt();
        let mut kv_heads = Vec::with_capacity(c.n_kv_heads);
        for g in 0..c.n_kv_heads {
            let kh = tape.slice_cols(keys, g * c.d_head, c.d_head)?;
            let vh = tape.slice_cols(values, g * c.d_head, c.d_head)?;
            kv_heads.push((kh, vh));
        }
        let mut heads = Vec::with_capacity(c.n_heads);
        for hd in 0..c.n_heads {
            let (kh, vh) = kv_heads[hd / group];
            let qh = tape.slice_cols(q, hd * c.d_head, c.d_head)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.masked_softmax(scores, Some(offset));
            heads.push(tape.matmul(probs, vh)?);
        }
        let attn = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let out = self.project(tape, l, Target::O, attn)?;
        let out = self.bottleneck(tape, l, Site::Attention, out)?;
        tape.add(x, out)
    }

    /// `x + down(silu(gate(h)) ⊙ up(h))` with `h = norm(x)`.
    fn ff_sublayer_tape(&self, tape: &mut Tape, l: usize, x: Var) -> Result<Var> {
        let nw = tape.param(&self.store, self.layers[l].ff_norm);
        let h = tape.rms_norm(x, nw, self.config.norm_eps)?;
        let g = self.project(tape, l, Target::Gate, h)?;
        let u = self.project(tape, l, Target::Up, h)?;
        let a = tape.silu(g);
        let m = tape.mul(a, u)?;
        let f = self.project(tape, l, Target::Down, m)?;
        let f = self.scale_activation(tape, l, Ia3Site::FeedForward, f)?;
        let f = self.bottleneck(tape, l, Site::FeedForward, f)?;
        tape.add(x, f)
    }

    /// Attention sub-layer of block `l` applied to hidden states `x[seq × d_model]`
    /// at positions `0..seq`, residual included.
    pub fn attention_forward(&self, l: usize, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let seq = x.dims2("attention_forward")?.0;
        let ctx = ForwardCtx {
            positions: (0..seq).collect(),
            past: 0,
            prefixes: match &self.adapter {
                Some(a) => a.prefix_kv(&mut tape, &self.store, &self.config)?,
                None => vec![None; self.config.n_layers],
            },
        };
        let out = self.attention_sublayer_tape(&mut tape, l, xv, &ctx, None)?;
        Ok(tape.value(out).clone())
    }

    /// Feed-forward sub-layer of block `l`, residual included.
    pub fn ff_forward(&self, l: usize, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.ff_sublayer_tape(&mut tape, l, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Mean next-token cross entropy of one sequence (recorded on `tape`).
    pub fn sequence_loss(&self, tape: &mut Tape, tokens: &[TokenId], divisor: Option<f64>) -> Result<Var> {
        if tokens.len() < 2 {
            return Err(Error::NoUnmaskedPositions);
        }
        let inputs = &tokens[..tokens.len() - 1];
        let targets = &tokens[1..];
        let logits = self.forward_tape(tape, inputs, None)?;
        match divisor {
            Some(d) => tape.cross_entropy_scaled(logits, targets, d),
            None => tape.cross_entropy(logits, targets),
        }
    }

    /// Converts every parameter (base and adapter) to `dtype`.
    pub fn to_dtype(mut self, dtype: DType) -> Self {
        for id in self.store.ids() {
            let p = self.store.get_mut(id);
            p.value = p.value.to_dtype(dtype);
            p.zero_grad();
        }
        self.dtype = dtype;
        self
    }
}
