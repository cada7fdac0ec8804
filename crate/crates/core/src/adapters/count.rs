//! Closed-form trainable-parameter counts.

use std::collections::BTreeMap;

use serde::Serialize;

use super::config::{AdapterConfig, BottleneckConfig, Ia3Config, LoraConfig, LoraTargets, PrefixConfig};
use crate::error::Result;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainableCount {
    pub label: String,
    pub method: &'static str,
    /// Layers that receive adapter tensors.
    pub layers: Vec<usize>,
    /// Scalars per tensor family (`q.lora_a`, `ia3_k`, `prefix.w2`, ...), summed over layers.
    pub breakdown: BTreeMap<String, usize>,
    pub total: usize,
    /// Prefix tuning only: the count if the prefix were produced by a single
    /// projection (`p·d_model + b·n_layers·2·d_model`) instead of the
    /// two-layer network.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub single_projection_alternative: Option<usize>,
}

/// Trainable scalars an attached adapter would add. Ranks are not capped by
/// projection width here, so 1B-scale setups such as rank 1024 on a
/// 512-wide value projection can still be budgeted.
pub fn count_trainable(cfg: &AdapterConfig, mc: &ModelConfig) -> Result<TrainableCount> {
    mc.validate()?;
    let layers: Vec<usize> = cfg.layer_mask().resolve(mc.n_layers)?.into_iter().collect();
    let n = layers.len();
    let d = mc.d_model;
    let mut breakdown = BTreeMap::new();
    let mut alternative = None;
    match cfg {
        AdapterConfig::Lora(l) => {
            for &t in l.targets.targets() {
                let (fi, fo) = mc.shape_of(t);
                breakdown.insert(format!("{}.lora_a", t.name()), n * l.rank * fi);
                breakdown.insert(format!("{}.lora_b", t.name()), n * l.rank * fo);
            }
        }
        AdapterConfig::Ia3(_) => {
            breakdown.insert("ia3_k".into(), n * mc.kv_width());
            breakdown.insert("ia3_v".into(), n * mc.kv_width());
            breakdown.insert("ia3_ff".into(), n * d);
        }
        AdapterConfig::Bottleneck(b) => {
            let w = b.width(d)?;
            for site in ["attn", "ff"] {
                breakdown.insert(format!("{site}.down"), n * d * w);
                breakdown.insert(format!("{site}.down_bias"), n * w);
                breakdown.insert(format!("{site}.up"), n * w * d);
                breakdown.insert(format!("{site}.up_bias"), n * d);
            }
        }
        AdapterConfig::Prefix(p) => {
            if n > 0 {
                breakdown.insert("prefix.embedding".into(), p.prefix_len * d);
                breakdown.insert("prefix.w1".into(), d * p.bottleneck_width);
                breakdown.insert("prefix.w2".into(), p.bottleneck_width * n * 2 * d);
                alternative = Some(p.prefix_len * d + p.bottleneck_width * n * 2 * d);
            } else {
                alternative = Some(0);
            }
        }
    }
    Ok(TrainableCount {
        label: cfg.label(),
        method: cfg.method(),
        layers,
        total: breakdown.values().sum(),
        breakdown,
        single_projection_alternative: alternative,
    })
}

/// The fifteen adaptation setups compared in the method ablation.
pub fn paper_figure1_setups() -> Vec<AdapterConfig> {
    let mut out = Vec::with_capacity(15);
    for r in [1024, 256, 128, 32, 8] {
        out.push(AdapterConfig::Lora(LoraConfig::new(r, LoraTargets::AttnQv)));
    }
    for r in [256, 128, 64, 32, 8] {
        out.push(AdapterConfig::Lora(LoraConfig::new(r, LoraTargets::FfAll)));
    }
    out.push(AdapterConfig::Ia3(Ia3Config::default()));
    for f in [4, 16, 64] {
        out.push(AdapterConfig::Bottleneck(BottleneckConfig::new(f)));
    }
    out.push(AdapterConfig::Prefix(PrefixConfig::new(30)));
    out
}
