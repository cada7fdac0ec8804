use std::collections::HashMap;

use peft_core::adapters::{
    attach_adapter, count_trainable, AdapterConfig, BottleneckConfig, Ia3Config, LayerMask, LoraConfig, LoraTargets,
    PrefixConfig,
};
use peft_core::eval::{build_prompt, embed_match_f1, rouge_l, Embedder, PromptTemplate};
use peft_core::model::{KVCache, Model, ModelConfig, TokenId};
use peft_core::tensor::{check_tape_fn, rope_apply, softmax_rows, DType, Tape, Tensor, Var};
use peft_core::train::{lr_at, Schedule, TrainConfig};
use proptest::prelude::*;
use proptest::sample::select;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::f64(&shape, d).unwrap())
}

/// Norm inputs whose rows are far from the eps-dominated region.
fn away_from_zero(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    proptest::collection::vec((0.2f64..2.0, any::<bool>()), n)
        .prop_map(move |d| Tensor::f64(&shape, d.into_iter().map(|(v, neg)| if neg { -v } else { v }).collect()).unwrap())
}

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| tensor(vec![r, c]))
}

fn small_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..=2, select(vec![(1usize, 1usize), (2, 1), (2, 2), (4, 2)]), select(vec![2usize, 4]), 4usize..=12)
        .prop_map(|(n_layers, (n_heads, n_kv_heads), d_head, d_ff)| ModelConfig {
            n_layers,
            d_model: n_heads * d_head,
            n_heads,
            n_kv_heads,
            d_head,
            d_ff,
            vocab: 259,
            max_positions: 48,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
            tie_embeddings: true,
        })
}

fn adapter() -> impl Strategy<Value = AdapterConfig> {
    prop_oneof![
        (1usize..=2, select(vec![LoraTargets::AttnQv, LoraTargets::FfAll, LoraTargets::FfPlusQv]))
            .prop_map(|(r, t)| AdapterConfig::Lora(LoraConfig::new(r, t))),
        Just(AdapterConfig::Ia3(Ia3Config::default())),
        select(vec![1usize, 2]).prop_map(|f| AdapterConfig::Bottleneck(BottleneckConfig::new(f))),
        (1usize..=4).prop_map(|p| AdapterConfig::Prefix(PrefixConfig {
            bottleneck_width: 4,
            ..PrefixConfig::new(p)
        })),
    ]
}

fn tokens(max: usize) -> impl Strategy<Value = Vec<TokenId>> {
    proptest::collection::vec(0u32..259, 1..=max)
}

fn unary_case(name: &str, x: &Tensor) -> f64 {
    let w = x.map(|v| v * 0.7 - 0.3);
    let op = name.to_string();
    check_tape_fn(
        move |t: &mut Tape, v: &[Var]| {
            let y = match op.as_str() {
                "silu" => t.silu(v[0]),
                "tanh" => t.tanh(v[0]),
                "softmax" => t.softmax_rows(v[0]),
                "masked_softmax" => t.masked_softmax(v[0], Some(1)),
                _ => t.transpose(v[0])?,
            };
            let shape = t.value(y).shape().to_vec();
            let w = t.constant(Tensor::f64(&shape, w.data()[..shape.iter().product()].to_vec()).unwrap());
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        },
        std::slice::from_ref(x),
        1e-5,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_gradients_match_finite_differences(
        (a, b) in (1usize..=6, 1usize..=6, 1usize..=6).prop_flat_map(|(m, k, n)| (tensor(vec![m, k]), tensor(vec![k, n])))
    ) {
        let err = check_tape_fn(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let s = t.silu(y);
                Ok(t.sum(s))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        prop_assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn unary_gradients_match_finite_differences(
        x in (2usize..=6, 2usize..=6).prop_flat_map(|(r, c)| tensor(vec![r, c])),
        op in select(vec!["silu", "tanh", "softmax", "masked_softmax", "transpose"]),
    ) {
        let err = unary_case(op, &x);
        prop_assert!(err < 1e-5, "{op}: {err}");
    }

    #[test]
    fn rms_norm_gradients_match_finite_differences(
        (x, g) in (1usize..=6, 2usize..=6).prop_flat_map(|(r, c)| (away_from_zero(vec![r, c]), tensor(vec![c])))
    ) {
        let err = check_tape_fn(
            |t, v| {
                let y = t.rms_norm(v[0], v[1], 1e-5)?;
                let s = t.tanh(y);
                Ok(t.sum(s))
            },
            &[x, g],
            1e-5,
        )
        .unwrap();
        prop_assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn softmax_rows_normalize_and_ignore_shifts(x in matrix(), shift in -50.0f64..50.0) {
        let s = softmax_rows(&x);
        let shifted = softmax_rows(&x.map(|v| v + shift));
        let cols = x.shape()[1];
        for row in s.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!(s.max_abs_diff(&shifted) < 1e-6);
    }

    #[test]
    fn rope_preserves_norms_and_composes(
        x in (1usize..=4, 1usize..=3, select(vec![2usize, 4, 6])).prop_flat_map(|(s, h, d)| tensor(vec![s, h, d])),
        p in 0usize..200,
        q in 0usize..200,
    ) {
        let seq = x.shape()[0];
        let d = x.shape()[2];
        let ps = vec![p; seq];
        let once = rope_apply(&x, &ps, 10_000.0).unwrap();
        for (a, b) in x.data().chunks(d).zip(once.data().chunks(d)) {
            let n = |v: &[f64]| v.iter().map(|z| z * z).sum::<f64>().sqrt();
            prop_assert!((n(a) - n(b)).abs() < 1e-6);
        }
        let twice = rope_apply(&once, &vec![q; seq], 10_000.0).unwrap();
        let direct = rope_apply(&x, &vec![p + q; seq], 10_000.0).unwrap();
        prop_assert!(twice.max_abs_diff(&direct) < 1e-6);
    }

    #[test]
    fn lr_schedule_boundaries(total in 1usize..10_000, base in 1e-6f64..1.0, cosine in any::<bool>()) {
        let mut cfg = TrainConfig::new(total, 0);
        cfg.base_lr = base;
        cfg.schedule = if cosine { Schedule::Cosine } else { Schedule::Linear };
        prop_assert_eq!(lr_at(0, &cfg).unwrap(), base);
        prop_assert!(lr_at(total, &cfg).unwrap().abs() < 1e-15);
        prop_assert!(lr_at(total + 1, &cfg).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logits_are_causal(cfg in small_config(), seed in 0u64..1000, toks in tokens(12), j in 0usize..12, new in 0u32..259) {
        let j = j % toks.len();
        let m = Model::init(cfg, seed, DType::F64).unwrap();
        let mut changed = toks.clone();
        changed[j] = if new == toks[j] { (new + 1) % 259 } else { new };
        let a = m.forward_logits(&toks, None).unwrap();
        let b = m.forward_logits(&changed, None).unwrap();
        let v = 259;
        prop_assert_eq!(&a.data()[..j * v], &b.data()[..j * v]);
    }

    #[test]
    fn incremental_forward_matches_one_shot(cfg in small_config(), seed in 0u64..1000, toks in tokens(40), split in 1usize..8) {
        let m = Model::init(cfg, seed, DType::F32).unwrap();
        let full = m.forward_logits(&toks, None).unwrap();
        let mut cache = KVCache::new(&m.config);
        let mut rows = Vec::new();
        for piece in toks.chunks(split) {
            rows.extend_from_slice(m.forward_logits(piece, Some(&mut cache)).unwrap().data());
        }
        let worst = full.data().iter().zip(&rows).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn count_matches_allocation(cfg in small_config(), a in adapter(), k in 0usize..=2, only in any::<bool>()) {
        let k = k.min(cfg.n_layers);
        let mask = if only { LayerMask::only_last(k) } else { LayerMask::all_but_last(k) };
        let a = a.with_layer_mask(mask);
        let m = attach_adapter(Model::init(cfg.clone(), 0, DType::F32).unwrap(), &a).unwrap();
        prop_assert_eq!(m.store.num_trainable_scalars(), count_trainable(&a, &cfg).unwrap().total);
    }

    #[test]
    fn adapted_logits_equal_base_at_init(cfg in small_config(), seed in 0u64..1000, toks in tokens(16), which in 0usize..5) {
        let a = [
            AdapterConfig::Lora(LoraConfig { init_seed: seed, ..LoraConfig::new(2, LoraTargets::AttnQv) }),
            AdapterConfig::Lora(LoraConfig { init_seed: seed, ..LoraConfig::new(2, LoraTargets::FfAll) }),
            AdapterConfig::Lora(LoraConfig { init_seed: seed, ..LoraConfig::new(1, LoraTargets::FfPlusQv) }),
            AdapterConfig::Ia3(Ia3Config::default()),
            AdapterConfig::Bottleneck(BottleneckConfig { init_seed: seed, ..BottleneckConfig::new(2) }),
        ][which].clone();
        let base = Model::init(cfg, seed, DType::F32).unwrap();
        let adapted = attach_adapter(base.clone(), &a).unwrap();
        prop_assert_eq!(base.forward_logits(&toks, None).unwrap(), adapted.forward_logits(&toks, None).unwrap());
    }
}

fn total_1b(a: &AdapterConfig) -> usize {
    count_trainable(a, &ModelConfig::paper_1b()).unwrap().total
}

proptest! {
    #[test]
    fn counts_are_monotone(r in 1usize..512, i in 0u32..11, t in select(vec![LoraTargets::AttnQv, LoraTargets::FfAll, LoraTargets::FfPlusQv])) {
        let lora = |r| total_1b(&AdapterConfig::Lora(LoraConfig::new(r, t)));
        prop_assert!(lora(r) < lora(r + 1));
        let bn = |f| total_1b(&AdapterConfig::Bottleneck(BottleneckConfig::new(f)));
        prop_assert!(bn(1 << i) > bn(2 << i));
    }

    #[test]
    fn mask_partition_sums_to_all_layers(k in 0usize..=16, which in 0usize..5) {
        let a = [
            AdapterConfig::Lora(LoraConfig::new(8, LoraTargets::AttnQv)),
            AdapterConfig::Lora(LoraConfig::new(8, LoraTargets::FfAll)),
            AdapterConfig::Lora(LoraConfig::new(8, LoraTargets::FfPlusQv)),
            AdapterConfig::Ia3(Ia3Config::default()),
            AdapterConfig::Bottleneck(BottleneckConfig::new(16)),
        ][which].clone();
        let c = |mask| total_1b(&a.clone().with_layer_mask(mask));
        prop_assert_eq!(c(LayerMask::all_but_last(k)) + c(LayerMask::only_last(k)), c(LayerMask::all()));
    }

    #[test]
    fn rouge_l_swaps_precision_and_recall(a in proptest::collection::vec(0u8..4, 0..30), b in proptest::collection::vec(0u8..4, 0..30)) {
        let x = rouge_l(&a, &b);
        let y = rouge_l(&b, &a);
        prop_assert_eq!(x.precision, y.recall);
        prop_assert_eq!(x.recall, y.precision);
        prop_assert_eq!(x.f1, y.f1);
        for v in [x.precision, x.recall, x.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn one_hot_embed_match_is_unigram_match(c in words(), r in words()) {
        let e = OneHot;
        let got = embed_match_f1(&c, &r, &e).unwrap();
        let swapped = embed_match_f1(&r, &c, &e).unwrap();
        prop_assert_eq!(got.precision, swapped.recall);
        prop_assert_eq!(got.f1, swapped.f1);
        if !c.is_empty() && !r.is_empty() {
            let hits = |xs: &[String], ys: &[String]| xs.iter().filter(|x| ys.contains(x)).count() as f64 / xs.len() as f64;
            prop_assert!((got.precision - hits(&c, &r)).abs() < 1e-12);
            prop_assert!((got.recall - hits(&r, &c)).abs() < 1e-12);
        }
        for v in [got.precision, got.recall, got.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn prompts_decode_back_to_their_parts(
        demos in proptest::collection::vec((text(), text()), 0..4),
        article in text(),
    ) {
        let template = PromptTemplate {
            instruction: "Summarize.\n".into(),
            article_marker: "\u{1}A:".into(),
            summary_marker: "\u{1}S:".into(),
            demo_separator: "\u{1}\n".into(),
        };
        let prompt = build_prompt(&template, &demos, &article);
        let body = prompt.strip_prefix(&template.instruction).unwrap();
        let pieces: Vec<&str> = body.split('\u{1}').collect();
        let mut parsed = Vec::new();
        let mut it = pieces[1..].iter();
        while let Some(p) = it.next() {
            if let Some(a) = p.strip_prefix("A:") {
                let s = it.next().unwrap().strip_prefix("S:").unwrap();
                parsed.push((a.to_string(), s.to_string()));
                it.next();
            }
        }
        let (last, rest) = parsed.split_last().unwrap();
        prop_assert_eq!(rest, &demos[..]);
        prop_assert_eq!(&last.0, &article);
        prop_assert_eq!(&last.1, "");
    }
}

fn words() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec(select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from), 0..12)
}

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 .,:#\n]{0,20}"
}

struct OneHot;

impl Embedder for OneHot {
    fn embed(&self, token: &str) -> peft_core::Result<Vec<f64>> {
        let index: HashMap<&str, usize> = ["a", "b", "c", "d", "e"].into_iter().zip(0..).collect();
        let mut v = vec![0.0; 5];
        v[index[token]] = 1.0;
        Ok(v)
    }
}
