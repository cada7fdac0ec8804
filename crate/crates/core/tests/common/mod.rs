//! Shared fixtures for integration tests.
#![allow(dead_code)]

use peft_core::data::{chunk_stream, tokenize, Chunk, TokenizerSpec};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ENGLISH: &[&str] = &[
    "the", "of", "and", "to", "in", "is", "was", "that", "for", "it", "with", "as", "on", "be", "at", "by", "this",
    "had", "not", "are", "but", "from", "or", "have", "an", "they", "which", "one", "you", "were", "her", "all",
    "she", "there", "would", "their", "we", "him", "been", "has", "when", "who", "will", "more", "no", "if", "out",
    "so", "said", "what", "up", "its", "about", "into", "than", "them", "can", "only", "other", "new", "some",
    "could", "time", "these", "two", "may", "then", "do", "first", "any", "my", "now", "such", "like", "our",
    "over", "man", "me", "even", "most", "made", "after", "also", "did", "many", "before", "must", "through",
    "back", "years", "where", "much", "your", "way", "well", "down", "should", "because", "each", "just", "those",
    "people", "how", "too", "little", "state", "good", "very", "make", "world", "still", "own", "see", "men",
    "work", "long", "get", "here", "between", "both", "life", "being", "under", "never", "day", "same", "another",
    "know", "while", "last", "might", "us", "great", "old", "year", "off", "come", "since", "against", "go",
    "came", "right", "used", "take", "three", "house", "river", "morning", "letter", "garden", "window",
];

const SYLLABLES: &[&str] = &[
    "þú", "ður", "ið", "vís", "hjá", "ást", "fjör", "gæ", "sk", "ræ", "lón", "bú", "eyj", "öl", "ník", "ð",
    "varð", "þeg", "fló", "ísk", "ann", "ur", "um", "ar", "sjó", "hest", "fjall", "dal", "ey", "há", "ljós",
];

/// English-like prose: sentences of common words.
pub fn english_corpus(docs: usize, words_per_doc: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..docs)
        .map(|_| {
            let mut s = String::new();
            let mut start = true;
            for i in 0..words_per_doc {
                let w = *ENGLISH.choose(&mut rng).unwrap();
                if start {
                    let mut c = w.chars();
                    let first = c.next().unwrap().to_ascii_uppercase();
                    s.push(first);
                    s.extend(c);
                    start = false;
                } else {
                    s.push_str(w);
                }
                if rng.random_bool(0.1) || i + 1 == words_per_doc {
                    s.push_str(". ");
                    start = true;
                } else {
                    s.push(' ');
                }
            }
            s
        })
        .collect()
}

/// Pseudo-Nordic text over a disjoint, accent-heavy syllable inventory.
pub fn nordic_corpus(docs: usize, words_per_doc: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon: Vec<String> = (0..60)
        .map(|_| {
            let n = rng.random_range(1..=3);
            (0..n).map(|_| *SYLLABLES.choose(&mut rng).unwrap()).collect()
        })
        .collect();
    (0..docs)
        .map(|_| {
            let words: Vec<&str> = (0..words_per_doc)
                .map(|_| lexicon.choose(&mut rng).unwrap().as_str())
                .collect();
            words.join(" ") + "."
        })
        .collect()
}

pub fn to_chunks(texts: &[String], max_len: usize, source: &str) -> Vec<Chunk> {
    let spec = TokenizerSpec::byte_level();
    let docs = texts
        .iter()
        .enumerate()
        .map(|(i, t)| (i.to_string(), tokenize(t.as_bytes(), &spec).unwrap()));
    chunk_stream(docs, source, max_len).unwrap()
}

pub fn write_jsonl(path: &std::path::Path, texts: &[String]) {
    let mut s = String::new();
    for (i, t) in texts.iter().enumerate() {
        s.push_str(&serde_json::json!({"text": t, "id": format!("d{i}")}).to_string());
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

pub fn write_json(path: &std::path::Path, v: &serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

pub fn small_model_json() -> serde_json::Value {
    serde_json::json!({
        "n_layers": 2, "d_model": 16, "n_heads": 2, "n_kv_heads": 1, "d_head": 8, "d_ff": 32,
        "vocab": 259, "max_positions": 96, "rope_theta": 10000.0, "norm_eps": 1e-5, "tie_embeddings": true
    })
}

pub fn peft(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_peft"))
        .args(args)
        .output()
        .unwrap()
}

/// Writes inputs and configs for every subcommand into `d`.
pub fn write_pipeline_inputs(d: &std::path::Path) {
    use serde_json::json;
    write_jsonl(&d.join("en.jsonl"), &english_corpus(40, 20, 1));
    write_jsonl(&d.join("is.jsonl"), &nordic_corpus(40, 10, 2));
    write_json(
        &d.join("prep.json"),
        &json!({
            "sources": [
                {"name": "en", "path": "en.jsonl", "keep_fraction": 1.0, "weight": 0.4},
                {"name": "is", "path": "is.jsonl", "keep_fraction": 0.5, "weight": 0.6}
            ],
            "n_total": 20, "max_chunk_len": 32, "seed": 3
        }),
    );
    let lora = json!({"method": "lora", "rank": 2, "targets": "attn_qv", "seed": 1});
    let model = json!({"config": small_model_json(), "init_seed": 5, "adapter": lora});
    write_json(
        &d.join("train.json"),
        &json!({
            "model": model, "dataset": "prep/dataset.jsonl",
            "train": {"lr": 1e-3, "schedule": "linear", "batch_size": 2, "max_seq": 32, "total_steps": 3, "seed": 4, "grad_clip_norm": 1.0}
        }),
    );
    let trained = json!({"config": small_model_json(), "init_seed": 5, "adapter": lora, "adapter_checkpoint": "train/adapter.ckpt"});
    write_json(&d.join("merge.json"), &json!({"model": trained}));
    let rows: String = (0..4)
        .map(|i| json!({"article": format!("article {i} text"), "summary": "short"}).to_string() + "\n")
        .collect();
    std::fs::write(d.join("eval.jsonl"), rows).unwrap();
    write_json(
        &d.join("eval.json"),
        &json!({"model": trained, "dataset": "eval.jsonl", "eval": {
            "k": 1, "max_new_tokens": 4, "demo_selection_seed": 2,
            "template": {"instruction": "", "article_marker": "A:", "summary_marker": " S:", "demo_separator": "\n"}
        }}),
    );
    write_json(
        &d.join("gen.json"),
        &json!({"model": {"config": small_model_json(), "init_seed": 5, "checkpoint": "merge/merged.ckpt"}, "prompt": "hello", "max_new_tokens": 5}),
    );
}

/// Runs prepare-data, train, merge, count-params, eval and generate in
/// order and returns every output file (manifests without wall-clock).
pub fn run_pipeline(d: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut outputs = Vec::new();
    let ia3 = d.join("ia3.json");
    write_json(&ia3, &serde_json::json!({"method": "ia3"}));
    for (cmd, cfg, out, files) in [
        ("prepare-data", "prep.json", "prep", vec!["dataset.jsonl", "composition.json"]),
        ("train", "train.json", "train", vec!["adapter.ckpt", "loss.csv", "train_report.json"]),
        ("merge", "merge.json", "merge", vec!["merged.ckpt"]),
        ("count-params", "", "count", vec!["counts.tsv"]),
        ("eval", "eval.json", "eval", vec!["report.json"]),
        ("generate", "gen.json", "gen", vec!["generation.json"]),
    ] {
        let out_dir = d.join(out);
        let cfg_path = d.join(cfg);
        let mut args = vec![cmd, "--out", out_dir.to_str().unwrap()];
        if cfg.is_empty() {
            args.extend(["--model", "paper-1b", "--adapter", ia3.to_str().unwrap()]);
        } else {
            args.extend(["--config", cfg_path.to_str().unwrap()]);
        }
        let o = peft(&args);
        if !o.status.success() {
            return Err(format!("{cmd} failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        for f in files {
            let bytes = std::fs::read(out_dir.join(f)).map_err(|e| format!("{out}/{f}: {e}"))?;
            outputs.push((format!("{out}/{f}"), bytes));
        }
        let manifest = std::fs::read(out_dir.join("manifest.json")).map_err(|e| format!("{out} manifest: {e}"))?;
        let mut m: serde_json::Value = serde_json::from_slice(&manifest).unwrap();
        m.as_object_mut().unwrap().remove("wall_clock_secs");
        outputs.push((format!("{out}/manifest.json"), m.to_string().into_bytes()));
    }
    Ok(outputs)
}
