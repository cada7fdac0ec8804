use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A projection inside a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Q => "q",
            Target::K => "k",
            Target::V => "v",
            Target::O => "o",
            Target::Gate => "gate",
            Target::Up => "up",
            Target::Down => "down",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTargets {
    AttnQv,
    FfAll,
    FfPlusQv,
}

impl LoraTargets {
    pub fn targets(self) -> &'static [Target] {
        match self {
            LoraTargets::AttnQv => &[Target::Q, Target::V],
            LoraTargets::FfAll => &[Target::Gate, Target::Up, Target::Down],
            LoraTargets::FfPlusQv => &[Target::Q, Target::V, Target::Gate, Target::Up, Target::Down],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LoraTargets::AttnQv => "qv",
            LoraTargets::FfAll => "ff",
            LoraTargets::FfPlusQv => "ff+qv",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    All,
    AllButLastK,
    OnlyLastK,
}

/// Which transformer layers receive an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LayerMask {
    pub mode: MaskMode,
    #[serde(default)]
    pub k: usize,
}

impl LayerMask {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn all_but_last(k: usize) -> Self {
        Self {
            mode: MaskMode::AllButLastK,
            k,
        }
    }

    pub fn only_last(k: usize) -> Self {
        Self {
            mode: MaskMode::OnlyLastK,
            k,
        }
    }

    pub fn resolve(&self, n_layers: usize) -> Result<BTreeSet<usize>> {
        resolve_layer_mask(*self, n_layers)
    }
}

pub fn resolve_layer_mask(mask: LayerMask, n_layers: usize) -> Result<BTreeSet<usize>> {
    if mask.mode != MaskMode::All && mask.k > n_layers {
        return Err(Error::config(format!(
            "layer mask k = {} exceeds the {n_layers} available layers",
            mask.k
        )));
    }
    Ok(match mask.mode {
        MaskMode::All => (0..n_layers).collect(),
        MaskMode::AllButLastK => (0..n_layers - mask.k).collect(),
        MaskMode::OnlyLastK => (n_layers - mask.k..n_layers).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: LoraTargets,
    pub layer_mask: LayerMask,
    pub init_seed: u64,
}

impl LoraConfig {
    /// `alpha = 2·rank`.
    pub fn new(rank: usize, targets: LoraTargets) -> Self {
        Self {
            rank,
            alpha: 2.0 * rank as f64,
            targets,
            layer_mask: LayerMask::all(),
            init_seed: 0,
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Ia3Config {
    pub layer_mask: LayerMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    pub reduction_factor: usize,
    pub layer_mask: LayerMask,
    pub init_seed: u64,
}

impl BottleneckConfig {
    pub fn new(reduction_factor: usize) -> Self {
        Self {
            reduction_factor,
            layer_mask: LayerMask::all(),
            init_seed: 0,
        }
    }

    pub fn width(&self, d_model: usize) -> Result<usize> {
        if self.reduction_factor == 0 || d_model % self.reduction_factor != 0 {
            return Err(Error::config(format!(
                "reduction factor {} does not divide d_model {d_model}",
                self.reduction_factor
            )));
        }
        Ok(d_model / self.reduction_factor)
    }
}

pub const DEFAULT_PREFIX_BOTTLENECK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixConfig {
    pub prefix_len: usize,
    pub bottleneck_width: usize,
    pub layer_mask: LayerMask,
    pub init_seed: u64,
}

impl PrefixConfig {
    pub fn new(prefix_len: usize) -> Self {
        Self {
            prefix_len,
            bottleneck_width: DEFAULT_PREFIX_BOTTLENECK,
            layer_mask: LayerMask::all(),
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdapterConfig {
    Lora(LoraConfig),
    Ia3(Ia3Config),
    Bottleneck(BottleneckConfig),
    Prefix(PrefixConfig),
}

impl AdapterConfig {
    pub fn layer_mask(&self) -> LayerMask {
        match self {
            AdapterConfig::Lora(c) => c.layer_mask,
            AdapterConfig::Ia3(c) => c.layer_mask,
            AdapterConfig::Bottleneck(c) => c.layer_mask,
            AdapterConfig::Prefix(c) => c.layer_mask,
        }
    }

    pub fn with_layer_mask(mut self, mask: LayerMask) -> Self {
        match &mut self {
            AdapterConfig::Lora(c) => c.layer_mask = mask,
            AdapterConfig::Ia3(c) => c.layer_mask = mask,
            AdapterConfig::Bottleneck(c) => c.layer_mask = mask,
            AdapterConfig::Prefix(c) => c.layer_mask = mask,
        }
        self
    }

    pub fn method(&self) -> &'static str {
        match self {
            AdapterConfig::Lora(_) => "lora",
            AdapterConfig::Ia3(_) => "ia3",
            AdapterConfig::Bottleneck(_) => "bottleneck",
            AdapterConfig::Prefix(_) => "prefix",
        }
    }

    /// Short human label, e.g. `LoRA-qv-8`, `Bottleneck-16`.
    pub fn label(&self) -> String {
        match self {
            AdapterConfig::Lora(c) => format!("LoRA-{}-{}", c.targets.label(), c.rank),
            AdapterConfig::Ia3(_) => "IA3".to_string(),
            AdapterConfig::Bottleneck(c) => format!("Bottleneck-{}", c.reduction_factor),
            AdapterConfig::Prefix(c) => format!("Prefix-{}", c.prefix_len),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: AdapterConfigJson = serde_json::from_str(text)?;
        raw.try_into()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&AdapterConfigJson::from(self)).expect("adapter config serializes")
    }
}

/// Flat on-disk form of [`AdapterConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfigJson {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<LoraTargets>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction_factor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck_width: Option<usize>,
    #[serde(default)]
    pub layer_mask: LayerMask,
    #[serde(default)]
    pub seed: u64,
}

fn required<T>(v: Option<T>, field: &str, method: &str) -> Result<T> {
    v.ok_or_else(|| Error::config(format!("`{field}` is required for method `{method}`")))
}

impl TryFrom<AdapterConfigJson> for AdapterConfig {
    type Error = Error;

    fn try_from(j: AdapterConfigJson) -> Result<Self> {
        let m = j.method.as_str();
        let cfg = match m {
            "lora" => {
                let rank = required(j.rank, "rank", m)?;
                if rank == 0 {
                    return Err(Error::config("LoRA rank must be positive"));
                }
                let alpha = j.alpha.unwrap_or(2.0 * rank as f64);
                if !(alpha > 0.0) {
                    return Err(Error::config("LoRA alpha must be positive"));
                }
                AdapterConfig::Lora(LoraConfig {
                    rank,
                    alpha,
                    targets: required(j.targets, "targets", m)?,
                    layer_mask: j.layer_mask,
                    init_seed: j.seed,
                })
            }
            "ia3" => AdapterConfig::Ia3(Ia3Config {
                layer_mask: j.layer_mask,
            }),
            "bottleneck" => {
                let f = required(j.reduction_factor, "reduction_factor", m)?;
                if f == 0 {
                    return Err(Error::config("reduction_factor must be positive"));
                }
                AdapterConfig::Bottleneck(BottleneckConfig {
                    reduction_factor: f,
                    layer_mask: j.layer_mask,
                    init_seed: j.seed,
                })
            }
            "prefix" => {
                let p = required(j.prefix_len, "prefix_len", m)?;
                let b = j.bottleneck_width.unwrap_or(DEFAULT_PREFIX_BOTTLENECK);
                if p == 0 || b == 0 {
                    return Err(Error::config("prefix_len and bottleneck_width must be positive"));
                }
                AdapterConfig::Prefix(PrefixConfig {
                    prefix_len: p,
                    bottleneck_width: b,
                    layer_mask: j.layer_mask,
                    init_seed: j.seed,
                })
            }
            other => return Err(Error::config(format!("unknown adapter method `{other}`"))),
        };
        Ok(cfg)
    }
}

impl From<&AdapterConfig> for AdapterConfigJson {
    fn from(c: &AdapterConfig) -> Self {
        let mut j = AdapterConfigJson {
            method: c.method().to_string(),
            rank: None,
            alpha: None,
            targets: None,
            reduction_factor: None,
            prefix_len: None,
            bottleneck_width: None,
            layer_mask: c.layer_mask(),
            seed: 0,
        };
        match c {
            AdapterConfig::Lora(l) => {
                j.rank = Some(l.rank);
                j.alpha = Some(l.alpha);
                j.targets = Some(l.targets);
                j.seed = l.init_seed;
            }
            AdapterConfig::Ia3(_) => {}
            AdapterConfig::Bottleneck(b) => {
                j.reduction_factor = Some(b.reduction_factor);
                j.seed = b.init_seed;
            }
            AdapterConfig::Prefix(p) => {
                j.prefix_len = Some(p.prefix_len);
                j.bottleneck_width = Some(p.bottleneck_width);
                j.seed = p.init_seed;
            }
        }
        j
    }
}

impl Serialize for AdapterConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        AdapterConfigJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for AdapterConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = AdapterConfigJson::deserialize(d)?;
        AdapterConfig::try_from(raw).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_resolution_examples() {
        let s: Vec<_> = resolve_layer_mask(LayerMask::only_last(2), 16).unwrap().into_iter().collect();
        assert_eq!(s, vec![14, 15]);
        let s: Vec<_> = resolve_layer_mask(LayerMask::all_but_last(4), 16).unwrap().into_iter().collect();
        assert_eq!(s, (0..12).collect::<Vec<_>>());
        assert!(resolve_layer_mask(LayerMask::only_last(0), 16).unwrap().is_empty());
        assert!(matches!(resolve_layer_mask(LayerMask::only_last(17), 16), Err(Error::Config(_))));
    }

    #[test]
    fn json_schema_round_trip() {
        let text = r#"{"method": "lora", "rank": 8, "targets": "ff_plus_qv",
                       "layer_mask": {"mode": "only_last_k", "k": 2}, "seed": 3}"#;
        let cfg = AdapterConfig::from_json(text).unwrap();
        let AdapterConfig::Lora(l) = &cfg else { panic!() };
        assert_eq!(l.alpha, 16.0);
        assert_eq!(l.layer_mask, LayerMask::only_last(2));
        assert_eq!(AdapterConfig::from_json(&cfg.to_json()).unwrap(), cfg);

        let p = AdapterConfig::from_json(r#"{"method": "prefix", "prefix_len": 30}"#).unwrap();
        assert_eq!(p, AdapterConfig::Prefix(PrefixConfig::new(30)));
        assert!(AdapterConfig::from_json(r#"{"method": "lora", "targets": "attn_qv"}"#).is_err());
        assert!(AdapterConfig::from_json(r#"{"method": "dora"}"#).is_err());
        assert!(AdapterConfig::from_json(r#"{"method": "ia3", "bogus": 1}"#).is_err());
    }
}
