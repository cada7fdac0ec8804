//! Parameter-efficient adapters: LoRA, IA³, bottleneck (Houlsby) adapters
//! and prefix tuning, plus layer masking, merging and analytic counting.
//!
//! Attaching an adapter freezes every base parameter. LoRA, IA³ and
//! bottleneck adapters are initialized so the adapted model computes
//! exactly the base model's function until trained; prefix tuning has no
//! such identity point.

mod config;
mod count;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{
    resolve_layer_mask, AdapterConfig, AdapterConfigJson, BottleneckConfig, Ia3Config, LayerMask, LoraConfig,
    LoraTargets, MaskMode, PrefixConfig, Target, DEFAULT_PREFIX_BOTTLENECK,
};
pub use count::{count_trainable, paper_figure1_setups, TrainableCount};

use crate::error::{Error, Result};
use crate::model::{normal_tensor, Model, ModelConfig};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Activation scaled by an IA³ vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ia3Site {
    Key,
    Value,
    FeedForward,
}

/// Sub-layer whose output passes through a bottleneck adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Site {
    Attention,
    FeedForward,
}

impl Site {
    fn name(self) -> &'static str {
        match self {
            Site::Attention => "attn",
            Site::FeedForward => "ff",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoraModule {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Ia3Vectors {
    pub key: ParamId,
    pub value: ParamId,
    pub ff: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BottleneckBlock {
    pub down: ParamId,
    pub down_bias: ParamId,
    pub up: ParamId,
    pub up_bias: ParamId,
}

#[derive(Clone, Debug)]
pub enum PrefixState {
    /// Trainable reparameterization `tanh(E·W1)·W2`.
    Reparam { embedding: ParamId, w1: ParamId, w2: ParamId },
    /// Frozen per-layer key/value prefixes.
    Baked(BTreeMap<usize, (ParamId, ParamId)>),
}

#[derive(Clone, Debug)]
pub enum AdapterState {
    Lora(BTreeMap<(usize, Target), LoraModule>),
    Ia3(BTreeMap<usize, Ia3Vectors>),
    Bottleneck(BTreeMap<usize, [BottleneckBlock; 2]>),
    Prefix(PrefixState),
}

/// An adapter attached to a model, referring to parameters in the model's store.
#[derive(Clone, Debug)]
pub struct Adapter {
    config: AdapterConfig,
    layers: BTreeSet<usize>,
    state: AdapterState,
}

impl Adapter {
    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn layers(&self) -> &BTreeSet<usize> {
        &self.layers
    }

    pub fn state(&self) -> &AdapterState {
        &self.state
    }

    pub(crate) fn prefix_len(&self) -> usize {
        match &self.config {
            AdapterConfig::Prefix(p) if !self.layers.is_empty() => p.prefix_len,
            _ => 0,
        }
    }

    pub(crate) fn project(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        target: Target,
        x: Var,
        w: Var,
    ) -> Result<Var> {
        if let (AdapterState::Lora(mods), AdapterConfig::Lora(cfg)) = (&self.state, &self.config) {
            if let Some(m) = mods.get(&(layer, target)) {
                let a = tape.param(store, m.a);
                let b = tape.param(store, m.b);
                return lora_path(tape, x, w, a, b, cfg.scaling());
            }
        }
        tape.matmul(x, w)
    }

    pub(crate) fn scale_activation(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        site: Ia3Site,
        h: Var,
    ) -> Result<Var> {
        let AdapterState::Ia3(vecs) = &self.state else {
            return Ok(h);
        };
        let Some(v) = vecs.get(&layer) else { return Ok(h) };
        let id = match site {
            Ia3Site::Key => v.key,
            Ia3Site::Value => v.value,
            Ia3Site::FeedForward => v.ff,
        };
        let s = tape.param(store, id);
        tape.mul_row(h, s)
    }

    pub(crate) fn bottleneck(&self, tape: &mut Tape, store: &ParamStore, layer: usize, site: Site, h: Var) -> Result<Var> {
        let AdapterState::Bottleneck(blocks) = &self.state else {
            return Ok(h);
        };
        let Some(pair) = blocks.get(&layer) else { return Ok(h) };
        let blk = match site {
            Site::Attention => pair[0],
            Site::FeedForward => pair[1],
        };
        let down = tape.param(store, blk.down);
        let db = tape.param(store, blk.down_bias);
        let up = tape.param(store, blk.up);
        let ub = tape.param(store, blk.up_bias);
        bottleneck_path(tape, h, down, db, up, ub)
    }

    /// Per-layer `(K, V)` prefixes (`p × kv_width`), `None` for unmasked layers.
    pub(crate) fn prefix_kv(&self, tape: &mut Tape, store: &ParamStore, mc: &ModelConfig) -> Result<Vec<Option<(Var, Var)>>> {
        let mut out = vec![None; mc.n_layers];
        let AdapterState::Prefix(state) = &self.state else {
            return Ok(out);
        };
        match state {
            PrefixState::Reparam { embedding, w1, w2 } => {
                let e = tape.param(store, *embedding);
                let w1 = tape.param(store, *w1);
                let w2 = tape.param(store, *w2);
                let slots = prefix_path(tape, e, w1, w2, self.layers.len(), mc)?;
                for (&l, kv) in self.layers.iter().zip(slots) {
                    out[l] = Some(kv);
                }
            }
            PrefixState::Baked(map) => {
                for (&l, &(k, v)) in map {
                    out[l] = Some((tape.param(store, k), tape.param(store, v)));
                }
            }
        }
        Ok(out)
    }
}

/// `x·W + s·(x·Aᵀ)·Bᵀ`, never forming the dense delta.
pub(crate) fn lora_path(tape: &mut Tape, x: Var, w: Var, a: Var, b: Var, scaling: f64) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    let xa = tape.matmul_bt(x, a)?;
    let xab = tape.matmul_bt(xa, b)?;
    let delta = tape.scale(xab, scaling);
    tape.add(base, delta)
}

/// `x + (silu(x·down + db))·up + ub`.
pub(crate) fn bottleneck_path(tape: &mut Tape, x: Var, down: Var, db: Var, up: Var, ub: Var) -> Result<Var> {
    let h = tape.matmul(x, down)?;
    let h = tape.add_row(h, db)?;
    let h = tape.silu(h);
    let h = tape.matmul(h, up)?;
    let h = tape.add_row(h, ub)?;
    tape.add(x, h)
}

/// `tanh(E·W1)·W2` sliced into `n_slots` key/value pairs truncated to kv width.
pub(crate) fn prefix_path(
    tape: &mut Tape,
    e: Var,
    w1: Var,
    w2: Var,
    n_slots: usize,
    mc: &ModelConfig,
) -> Result<Vec<(Var, Var)>> {
    let h = tape.matmul(e, w1)?;
    let h = tape.tanh(h);
    let raw = tape.matmul(h, w2)?;
    let d = mc.d_model;
    let kvw = mc.kv_width();
    let mut out = Vec::with_capacity(n_slots);
    for j in 0..n_slots {
        let k = tape.slice_cols(raw, 2 * j * d, kvw)?;
        let v = tape.slice_cols(raw, (2 * j + 1) * d, kvw)?;
        out.push((k, v));
    }
    Ok(out)
}

fn run_const<F>(inputs: &[&Tensor], f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

/// LoRA linear layer: `W: fan_in×fan_out`, `A: r×fan_in`, `B: fan_out×r`.
pub fn lora_forward(x: &Tensor, w: &Tensor, a: &Tensor, b: &Tensor, alpha: f64, rank: usize) -> Result<Tensor> {
    let (fan_in, fan_out) = w.dims2("lora_forward")?;
    if a.shape() != [rank, fan_in] || b.shape() != [fan_out, rank] {
        return Err(Error::ShapeMismatch {
            op: "lora_forward",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    run_const(&[x, w, a, b], |t, v| lora_path(t, v[0], v[1], v[2], v[3], alpha / rank as f64))
}

/// Broadcast product of activations with a per-channel scale vector.
pub fn ia3_apply(activations: &Tensor, scale: &Tensor) -> Result<Tensor> {
    run_const(&[activations, scale], |t, v| t.mul_row(v[0], v[1]))
}

/// Residual bottleneck: `x + up(silu(down(x)))`, both projections biased.
pub fn bottleneck_forward(x: &Tensor, down: &Tensor, down_bias: &Tensor, up: &Tensor, up_bias: &Tensor) -> Result<Tensor> {
    run_const(&[x, down, down_bias, up, up_bias], |t, v| bottleneck_path(t, v[0], v[1], v[2], v[3], v[4]))
}

/// Materializes per-layer `(K, V)` prefixes from reparameterization weights
/// `E: p×d_model`, `W1: d_model×b`, `W2: b×(n_masked·2·d_model)`.
pub fn prefix_materialize(
    cfg: &PrefixConfig,
    mc: &ModelConfig,
    embedding: &Tensor,
    w1: &Tensor,
    w2: &Tensor,
) -> Result<Vec<(usize, Tensor, Tensor)>> {
    if cfg.prefix_len > mc.max_positions {
        return Err(Error::ContextLength {
            needed: cfg.prefix_len,
            limit: mc.max_positions,
        });
    }
    let layers: Vec<usize> = cfg.layer_mask.resolve(mc.n_layers)?.into_iter().collect();
    let mut tape = Tape::new();
    let e = tape.constant(embedding.clone());
    let a = tape.constant(w1.clone());
    let b = tape.constant(w2.clone());
    let slots = prefix_path(&mut tape, e, a, b, layers.len(), mc)?;
    Ok(layers
        .into_iter()
        .zip(slots)
        .map(|(l, (k, v))| (l, tape.value(k).clone(), tape.value(v).clone()))
        .collect())
}

fn validate_for(cfg: &AdapterConfig, mc: &ModelConfig) -> Result<BTreeSet<usize>> {
    mc.validate()?;
    let layers = cfg.layer_mask().resolve(mc.n_layers)?;
    match cfg {
        AdapterConfig::Lora(l) => {
            if l.rank == 0 || !(l.alpha > 0.0) {
                return Err(Error::config("LoRA rank and alpha must be positive"));
            }
            for &t in l.targets.targets() {
                let (fi, fo) = mc.shape_of(t);
                if l.rank > fi.min(fo) {
                    return Err(Error::config(format!(
                        "LoRA rank {} exceeds min(fan_in, fan_out) = {} for `{}`",
                        l.rank,
                        fi.min(fo),
                        t.name()
                    )));
                }
            }
        }
        AdapterConfig::Ia3(_) => {}
        AdapterConfig::Bottleneck(b) => {
            b.width(mc.d_model)?;
        }
        AdapterConfig::Prefix(p) => {
            if p.prefix_len == 0 || p.bottleneck_width == 0 {
                return Err(Error::config("prefix_len and bottleneck_width must be positive"));
            }
            if p.prefix_len >= mc.max_positions {
                return Err(Error::ContextLength {
                    needed: p.prefix_len + 1,
                    limit: mc.max_positions,
                });
            }
        }
    }
    Ok(layers)
}

/// Freezes the base model and inserts trainable adapter parameters at the
/// layers selected by the config's mask.
pub fn attach_adapter(mut model: Model, cfg: &AdapterConfig) -> Result<Model> {
    if model.adapter.is_some() {
        return Err(Error::Adapter("an adapter is already attached".into()));
    }
    let layers = validate_for(cfg, &model.config)?;
    let mc = model.config.clone();
    let dt = model.dtype();
    let store = &mut model.store;
    store.set_all_trainable(false);

    let state = match cfg {
        AdapterConfig::Lora(l) => {
            let mut rng = ChaCha8Rng::seed_from_u64(l.init_seed);
            let std = (1.0 / l.rank as f64).sqrt();
            let mut mods = BTreeMap::new();
            for &layer in &layers {
                for &t in l.targets.targets() {
                    let (fi, fo) = mc.shape_of(t);
                    let prefix = format!("layers.{layer}.adapter.{}", t.name());
                    let a = store.insert(format!("{prefix}.lora_a"), normal_tensor(&mut rng, &[l.rank, fi], std, dt), true)?;
                    let b = store.insert(format!("{prefix}.lora_b"), Tensor::zeros(&[fo, l.rank], dt), true)?;
                    mods.insert((layer, t), LoraModule { a, b });
                }
            }
            AdapterState::Lora(mods)
        }
        AdapterConfig::Ia3(_) => {
            let kvw = mc.kv_width();
            let mut vecs = BTreeMap::new();
            for &layer in &layers {
                let p = format!("layers.{layer}.adapter");
                let key = store.insert(format!("{p}.ia3_k"), Tensor::ones(&[kvw], dt), true)?;
                let value = store.insert(format!("{p}.ia3_v"), Tensor::ones(&[kvw], dt), true)?;
                let ff = store.insert(format!("{p}.ia3_ff"), Tensor::ones(&[mc.d_model], dt), true)?;
                vecs.insert(layer, Ia3Vectors { key, value, ff });
            }
            AdapterState::Ia3(vecs)
        }
        AdapterConfig::Bottleneck(b) => {
            let width = b.width(mc.d_model)?;
            let d = mc.d_model;
            let mut rng = ChaCha8Rng::seed_from_u64(b.init_seed);
            let std = 1.0 / (d as f64).sqrt();
            let mut blocks = BTreeMap::new();
            for &layer in &layers {
                let mut make = |site: Site, store: &mut ParamStore| -> Result<BottleneckBlock> {
                    let p = format!("layers.{layer}.adapter.{}", site.name());
                    Ok(BottleneckBlock {
                        down: store.insert(format!("{p}.down"), normal_tensor(&mut rng, &[d, width], std, dt), true)?,
                        down_bias: store.insert(format!("{p}.down_bias"), Tensor::zeros(&[width], dt), true)?,
                        up: store.insert(format!("{p}.up"), Tensor::zeros(&[width, d], dt), true)?,
                        up_bias: store.insert(format!("{p}.up_bias"), Tensor::zeros(&[d], dt), true)?,
                    })
                };
                let attn = make(Site::Attention, store)?;
                let ff = make(Site::FeedForward, store)?;
                blocks.insert(layer, [attn, ff]);
            }
            AdapterState::Bottleneck(blocks)
        }
        AdapterConfig::Prefix(p) => {
            if layers.is_empty() {
                AdapterState::Prefix(PrefixState::Baked(BTreeMap::new()))
            } else {
                let d = mc.d_model;
                let mut rng = ChaCha8Rng::seed_from_u64(p.init_seed);
                let embedding = store.insert("prefix.embedding", normal_tensor(&mut rng, &[p.prefix_len, d], 1.0, dt), true)?;
                let w1 = store.insert(
                    "prefix.w1",
                    normal_tensor(&mut rng, &[d, p.bottleneck_width], 1.0 / (d as f64).sqrt(), dt),
                    true,
                )?;
                let w2 = store.insert(
                    "prefix.w2",
                    normal_tensor(&mut rng, &[p.bottleneck_width, layers.len() * 2 * d], 0.02, dt),
                    true,
                )?;
                AdapterState::Prefix(PrefixState::Reparam { embedding, w1, w2 })
            }
        }
    };
    model.adapter = Some(Adapter {
        config: cfg.clone(),
        layers,
        state,
    });
    Ok(model)
}

/// Folds a LoRA adapter into its base weights (`W += (α/r)·Aᵀ·Bᵀ`) and
/// removes the adapter.
pub fn merge_lora(mut model: Model) -> Result<Model> {
    let adapter = match model.adapter.take() {
        Some(a) => a,
        None if model.merged_lora.is_some() => {
            return Err(Error::UnsupportedMerge("LoRA adapter was already merged".into()));
        }
        None => return Err(Error::UnsupportedMerge("no adapter attached".into())),
    };
    let (AdapterConfig::Lora(cfg), AdapterState::Lora(mods)) = (&adapter.config, &adapter.state) else {
        let method = adapter.config.method();
        model.adapter = Some(adapter);
        return Err(Error::UnsupportedMerge(format!("`{method}` adapters cannot be merged")));
    };
    let s = cfg.scaling();
    for (&(layer, target), m) in mods {
        let a = model.store.value(m.a).clone();
        let b = model.store.value(m.b).clone();
        let delta = crate::tensor::matmul_at(&a, &b.transpose()?)?.scale(s);
        let wid = model.layers[layer].projection(target);
        model.store.get_mut(wid).value.add_assign(&delta)?;
        model.store.remove(m.a);
        model.store.remove(m.b);
    }
    model.merged_lora = Some(cfg.clone());
    Ok(model)
}

/// Replaces a trainable prefix reparameterization with its materialized
/// per-layer key/value prefixes.
pub fn bake_prefix(mut model: Model) -> Result<Model> {
    let Some(adapter) = model.adapter.as_mut() else {
        return Err(Error::Adapter("no adapter attached".into()));
    };
    let AdapterState::Prefix(PrefixState::Reparam { embedding, w1, w2 }) = adapter.state.clone() else {
        return Ok(model);
    };
    let AdapterConfig::Prefix(cfg) = &adapter.config else { unreachable!() };
    let mats = prefix_materialize(
        cfg,
        &model.config,
        model.store.value(embedding),
        model.store.value(w1),
        model.store.value(w2),
    )?;
    let mut baked = BTreeMap::new();
    for (l, k, v) in mats {
        let kid = model.store.insert(format!("layers.{l}.adapter.prefix_k"), k, false)?;
        let vid = model.store.insert(format!("layers.{l}.adapter.prefix_v"), v, false)?;
        baked.insert(l, (kid, vid));
    }
    for id in [embedding, w1, w2] {
        model.store.remove(id);
    }
    let adapter = model.adapter.as_mut().expect("checked above");
    adapter.state = AdapterState::Prefix(PrefixState::Baked(baked));
    Ok(model)
}

impl Model {
    /// Ids of every adapter parameter, in store order.
    pub fn adapter_param_ids(&self) -> Vec<ParamId> {
        let base: BTreeSet<ParamId> = self.base_param_ids().into_iter().collect();
        self.store.ids().into_iter().filter(|id| !base.contains(id)).collect()
    }

    /// Adapter tensors by name; prefix reparameterizations are exported in
    /// materialized form.
    pub fn adapter_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        if self.adapter.is_none() {
            return Err(Error::Adapter("no adapter attached".into()));
        }
        let baked = bake_prefix(self.clone())?;
        Ok(baked
            .adapter_param_ids()
            .into_iter()
            .map(|id| (baked.store.name(id).to_string(), baked.store.value(id).clone()))
            .collect())
    }

    /// Loads adapter tensors produced by [`Model::adapter_tensors`] into an
    /// attached adapter of the same configuration.
    pub fn load_adapter_tensors(mut self, tensors: &BTreeMap<String, Tensor>) -> Result<Model> {
        let is_prefix = matches!(
            self.adapter.as_ref().map(|a| &a.state),
            Some(AdapterState::Prefix(PrefixState::Reparam { .. }))
        );
        if is_prefix {
            // materialized prefixes replace the reparameterization
            self = bake_prefix(self)?;
        }
        let ids = self.adapter_param_ids();
        if ids.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "adapter expects {} tensors, checkpoint has {}",
                ids.len(),
                tensors.len()
            )));
        }
        for id in ids {
            let name = self.store.name(id).to_string();
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing adapter tensor `{name}`")))?;
            let p = self.store.get_mut(id);
            if t.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_adapter_tensors",
                    left: p.value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            p.value = t.to_dtype(p.value.dtype());
        }
        Ok(self)
    }

    /// Ids and names of trainable parameters.
    pub fn trainable_names(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, _, p)| p.trainable)
            .map(|(_, n, _)| n.to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::tensor::DType;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            n_kv_heads: 1,
            d_head: 4,
            d_ff: 16,
            vocab: 13,
            max_positions: 24,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
            tie_embeddings: true,
        }
    }

    fn t64(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::f64(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn lora_forward_examples() {
        let x = t64(&[1, 1], &[1.0]);
        let w = t64(&[1, 1], &[2.0]);
        let a = t64(&[1, 1], &[3.0]);
        let b = t64(&[1, 1], &[4.0]);
        assert_eq!(lora_forward(&x, &w, &a, &b, 2.0, 1).unwrap().data(), &[26.0]);
        let zero = t64(&[1, 1], &[0.0]);
        assert_eq!(lora_forward(&x, &w, &a, &zero, 2.0, 1).unwrap().data(), &[2.0]);
        assert!(lora_forward(&x, &w, &t64(&[2, 1], &[1., 1.]), &b, 2.0, 1).is_err());
    }

    #[test]
    fn ia3_apply_examples() {
        let act = t64(&[2, 3], &[1., -2., 3., 0.5, 0., -1.]);
        assert_eq!(ia3_apply(&act, &Tensor::ones(&[3], DType::F64)).unwrap(), act);
        let s = t64(&[3], &[2., 0.5, -1.]);
        assert_eq!(ia3_apply(&act, &s).unwrap().data(), &[2., -1., -3., 1., 0., 1.]);
        assert!(ia3_apply(&act, &t64(&[2], &[1., 1.])).is_err());
    }

    #[test]
    fn bottleneck_forward_examples() {
        let x = t64(&[1, 1], &[1.0]);
        let zb = t64(&[1], &[0.0]);
        let y = bottleneck_forward(&x, &t64(&[1, 1], &[2.0]), &zb, &t64(&[1, 1], &[3.0]), &zb).unwrap();
        assert!((y.data()[0] - 6.28478).abs() < 1e-5);
        let y = bottleneck_forward(&x, &t64(&[1, 1], &[2.0]), &zb, &t64(&[1, 1], &[0.0]), &zb).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn attach_freezes_base_and_rejects_double_attach() {
        let m = init_model(tiny(), 0).unwrap();
        let cfg = AdapterConfig::Lora(LoraConfig::new(2, LoraTargets::AttnQv));
        let m = attach_adapter(m, &cfg).unwrap();
        for id in m.base_param_ids() {
            assert!(!m.store.get(id).trainable);
        }
        assert!(m.adapter_param_ids().iter().all(|&id| m.store.get(id).trainable));
        assert!(matches!(attach_adapter(m, &cfg), Err(Error::Adapter(_))));
    }

    #[test]
    fn attach_rejects_invalid_configs() {
        let cfg = AdapterConfig::Lora(LoraConfig::new(5, LoraTargets::AttnQv));
        // v projection is 8×4 here
        assert!(matches!(attach_adapter(init_model(tiny(), 0).unwrap(), &cfg), Err(Error::Config(_))));
        let cfg = AdapterConfig::Bottleneck(BottleneckConfig::new(3));
        assert!(matches!(attach_adapter(init_model(tiny(), 0).unwrap(), &cfg), Err(Error::Config(_))));
        let cfg = AdapterConfig::Ia3(Ia3Config {
            layer_mask: LayerMask::only_last(4),
        });
        assert!(matches!(attach_adapter(init_model(tiny(), 0).unwrap(), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn identity_at_init() {
        let tokens = [1u32, 4, 2, 8, 5];
        let base = init_model(tiny(), 2).unwrap();
        let expected = base.forward_logits(&tokens, None).unwrap();
        let cfgs = [
            AdapterConfig::Lora(LoraConfig::new(2, LoraTargets::FfPlusQv)),
            AdapterConfig::Ia3(Ia3Config::default()),
            AdapterConfig::Bottleneck(BottleneckConfig::new(2)),
        ];
        for cfg in &cfgs {
            let m = attach_adapter(base.clone(), cfg).unwrap();
            assert_eq!(m.forward_logits(&tokens, None).unwrap(), expected, "{}", cfg.label());
        }
    }

    #[test]
    fn zero_ia3_ff_scale_removes_feed_forward() {
        let base = init_model(tiny(), 3).unwrap();
        let mut m = attach_adapter(base.clone(), &AdapterConfig::Ia3(Ia3Config::default())).unwrap();
        let AdapterState::Ia3(v) = m.adapter().unwrap().state().clone() else { panic!() };
        let id = v[&0].ff;
        m.store.get_mut(id).value = Tensor::zeros(&[8], DType::F32);
        let x = Tensor::f32(&[2, 8], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(m.ff_forward(0, &x).unwrap(), x);
    }

    #[test]
    fn merge_behaviour() {
        let base = init_model(tiny(), 4).unwrap();
        let cfg = AdapterConfig::Lora(LoraConfig::new(2, LoraTargets::FfAll));
        let m = attach_adapter(base.clone(), &cfg).unwrap();
        let merged = merge_lora(m).unwrap();
        for id in base.base_param_ids() {
            assert_eq!(merged.store.get(id).value, base.store.get(id).value);
        }
        assert!(merged.adapter().is_none());
        assert!(matches!(merge_lora(merged), Err(Error::UnsupportedMerge(_))));

        let bn = attach_adapter(base, &AdapterConfig::Bottleneck(BottleneckConfig::new(4))).unwrap();
        let err = merge_lora(bn).unwrap_err();
        assert!(matches!(err, Error::UnsupportedMerge(_)));
    }

    #[test]
    fn only_last_zero_attaches_nothing() {
        let base = init_model(tiny(), 5).unwrap();
        let mut lora = LoraConfig::new(2, LoraTargets::AttnQv);
        lora.layer_mask = LayerMask::only_last(0);
        let m = attach_adapter(base.clone(), &AdapterConfig::Lora(lora)).unwrap();
        assert_eq!(m.store.num_trainable_scalars(), 0);
        assert_eq!(m.forward_logits(&[1, 2, 3], None).unwrap(), base.forward_logits(&[1, 2, 3], None).unwrap());
    }

    #[test]
    fn zero_prefix_embedding_gives_zero_prefixes() {
        let mc = tiny();
        let cfg = PrefixConfig {
            prefix_len: 2,
            bottleneck_width: 4,
            layer_mask: LayerMask::all(),
            init_seed: 0,
        };
        let e = Tensor::zeros(&[2, 8], DType::F64);
        let w1 = Tensor::ones(&[8, 4], DType::F64);
        let w2 = Tensor::ones(&[4, 3 * 2 * 8], DType::F64);
        let mats = prefix_materialize(&cfg, &mc, &e, &w1, &w2).unwrap();
        assert_eq!(mats.len(), 3);
        for (_, k, v) in mats {
            assert_eq!(k.shape(), &[2, 4]);
            assert!(k.data().iter().chain(v.data()).all(|&x| x == 0.0));
        }
    }

    #[test]
    fn prefix_changes_output_and_consumes_context() {
        let base = init_model(tiny(), 6).unwrap();
        let m = attach_adapter(base.clone(), &AdapterConfig::Prefix(PrefixConfig::new(5))).unwrap();
        assert_ne!(m.forward_logits(&[1, 2], None).unwrap(), base.forward_logits(&[1, 2], None).unwrap());
        assert_eq!(m.usable_context(), base.usable_context() - 5);
        assert!(m.forward_logits(&vec![1; 19], None).is_ok());
        assert!(matches!(m.forward_logits(&vec![1; 20], None), Err(Error::ContextLength { needed: 25, .. })));
    }

    #[test]
    fn baked_prefix_matches_reparameterized() {
        let base = init_model(tiny(), 7).unwrap();
        let mut cfg = PrefixConfig::new(3);
        cfg.bottleneck_width = 6;
        cfg.layer_mask = LayerMask::only_last(2);
        let m = attach_adapter(base, &AdapterConfig::Prefix(cfg)).unwrap();
        let baked = bake_prefix(m.clone()).unwrap();
        let a = m.forward_logits(&[3, 1, 4], None).unwrap();
        let b = baked.forward_logits(&[3, 1, 4], None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
        let names: Vec<_> = baked.adapter_tensors().unwrap().into_keys().collect();
        assert_eq!(
            names,
            vec![
                "layers.1.adapter.prefix_k",
                "layers.1.adapter.prefix_v",
                "layers.2.adapter.prefix_k",
                "layers.2.adapter.prefix_v"
            ]
        );
    }

    #[test]
    fn adapter_tensors_round_trip() {
        let base = init_model(tiny(), 8).unwrap();
        let cfg = AdapterConfig::Bottleneck(BottleneckConfig::new(2));
        let mut m = attach_adapter(base.clone(), &cfg).unwrap();
        for id in m.adapter_param_ids() {
            m.store.get_mut(id).value.map_inplace(|v| v + 0.1);
        }
        let saved = m.adapter_tensors().unwrap();
        let fresh = attach_adapter(base, &cfg).unwrap().load_adapter_tensors(&saved).unwrap();
        assert_eq!(fresh.forward_logits(&[1, 2, 3], None).unwrap(), m.forward_logits(&[1, 2, 3], None).unwrap());
    }
}
