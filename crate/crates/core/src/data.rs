//! Corpus ingestion: tokenization, chunking, seeded sampling and weighted
//! multi-source mixing with document-level undersampling.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
pub const BYTE_VOCAB: usize = 259;

#[derive(Clone, Debug, PartialEq)]
pub enum TokenizerMode {
    ByteLevel,
    /// Greedy longest-match over a symbol → id map.
    ExternalVocab(HashMap<String, TokenId>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerSpec {
    pub mode: TokenizerMode,
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    pub add_bos: bool,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self::byte_level()
    }
}

impl TokenizerSpec {
    pub fn byte_level() -> Self {
        Self {
            mode: TokenizerMode::ByteLevel,
            bos: BOS,
            eos: EOS,
            pad: PAD,
            add_bos: true,
        }
    }

    /// Loads a JSON object `{"symbol": id, ...}`. Specials keep the byte-level ids
    /// unless the map defines `<bos>`, `<eos>` or `<pad>`.
    pub fn external(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        let map: HashMap<String, TokenId> = serde_json::from_str(&text)?;
        let bos = map.get("<bos>").copied().unwrap_or(BOS);
        let eos = map.get("<eos>").copied().unwrap_or(EOS);
        let pad = map.get("<pad>").copied().unwrap_or(PAD);
        Ok(Self {
            mode: TokenizerMode::ExternalVocab(map),
            bos,
            eos,
            pad,
            add_bos: true,
        })
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.bos || id == self.eos || id == self.pad
    }
}

pub fn tokenize(text: &[u8], spec: &TokenizerSpec) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(text.len() + 1);
    if spec.add_bos {
        out.push(spec.bos);
    }
    match &spec.mode {
        TokenizerMode::ByteLevel => out.extend(text.iter().map(|&b| b as TokenId)),
        TokenizerMode::ExternalVocab(map) => {
            let s = std::str::from_utf8(text).map_err(|e| Error::Invalid(format!("text is not UTF-8: {e}")))?;
            let longest = map.keys().map(|k| k.len()).max().unwrap_or(0);
            let mut i = 0;
            while i < s.len() {
                let mut matched = None;
                let mut end = (i + longest).min(s.len());
                while end > i {
                    if s.is_char_boundary(end) {
                        if let Some(&id) = map.get(&s[i..end]) {
                            matched = Some((id, end));
                            break;
                        }
                    }
                    end -= 1;
                }
                let Some((id, next)) = matched else {
                    let ch = s[i..].chars().next().expect("non-empty remainder");
                    return Err(Error::UnknownSymbol(ch.to_string()));
                };
                out.push(id);
                i = next;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`tokenize`]; special ids are dropped.
pub fn detokenize(ids: &[TokenId], spec: &TokenizerSpec) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    match &spec.mode {
        TokenizerMode::ByteLevel => {
            for &id in ids {
                if spec.is_special(id) {
                    continue;
                }
                let b = u8::try_from(id).map_err(|_| Error::Invalid(format!("token id {id} is not a byte")))?;
                out.push(b);
            }
        }
        TokenizerMode::ExternalVocab(map) => {
            let rev: HashMap<TokenId, &str> = map.iter().map(|(k, &v)| (v, k.as_str())).collect();
            for &id in ids {
                if spec.is_special(id) {
                    continue;
                }
                let sym = rev.get(&id).ok_or_else(|| Error::Invalid(format!("unknown token id {id}")))?;
                out.extend_from_slice(sym.as_bytes());
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub tokens: Vec<TokenId>,
    pub source: String,
    pub doc: String,
}

/// Greedy sequential split of each document into chunks of at most
/// `max_chunk_len` tokens. Empty documents yield no chunks.
pub fn chunk_stream<I>(docs: I, source: &str, max_chunk_len: usize) -> Result<Vec<Chunk>>
where
    I: IntoIterator<Item = (String, Vec<TokenId>)>,
{
    if max_chunk_len == 0 {
        return Err(Error::config("max_chunk_len must be at least 1"));
    }
    let mut out = Vec::new();
    for (doc, tokens) in docs {
        for piece in tokens.chunks(max_chunk_len) {
            out.push(Chunk {
                tokens: piece.to_vec(),
                source: source.to_string(),
                doc: doc.clone(),
            });
        }
    }
    Ok(out)
}

/// Uniform sample of `n` chunks without replacement, in sampled order.
pub fn sample_chunks(chunks: &[Chunk], n: usize, seed: u64) -> Result<Vec<Chunk>> {
    if n > chunks.len() {
        return Err(Error::SampleShortage {
            requested: n,
            available: chunks.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, chunks.len(), n)
        .into_iter()
        .map(|i| chunks[i].clone())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSource {
    pub name: String,
    pub path: PathBuf,
    #[serde(default = "one")]
    pub keep_fraction: f64,
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceShare {
    pub chunks: usize,
    pub tokens: usize,
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub per_source: BTreeMap<String, SourceShare>,
    pub total_chunks: usize,
    pub total_tokens: usize,
}

/// Largest-remainder apportionment of `total` by `weights`; ties in the
/// remainder go to the lowest index.
pub fn apportion(weights: &[f64], total: usize) -> Result<Vec<usize>> {
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::config("source weights must be finite and non-negative"));
    }
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::config("source weights sum to zero"));
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps lowest index first among equal remainders
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).expect("finite remainders")
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(counts)
}

#[derive(Deserialize)]
struct DocLine {
    text: String,
    #[serde(default)]
    id: Option<String>,
}

/// Reads `{"text": ..., "id": ...}` lines; missing ids become the line number.
pub fn read_documents(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: DocLine = serde_json::from_str(&line)?;
        out.push((doc.id.unwrap_or_else(|| i.to_string()), doc.text));
    }
    Ok(out)
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(salt + 1)
}

/// Builds a mixed dataset of exactly `n_total` chunks. Each source is
/// undersampled by document (`keep_fraction`), tokenized, chunked, and then
/// contributes its apportioned share of chunks. The result is shuffled.
pub fn mix_corpora(
    sources: &[CorpusSource],
    n_total: usize,
    max_chunk_len: usize,
    seed: u64,
    tokenizer: &TokenizerSpec,
) -> Result<(Vec<Chunk>, CompositionReport)> {
    if sources.is_empty() {
        return Err(Error::config("at least one corpus source is required"));
    }
    for s in sources {
        if !(s.keep_fraction > 0.0 && s.keep_fraction <= 1.0) {
            return Err(Error::config(format!(
                "keep_fraction of `{}` must be in (0, 1], got {}",
                s.name, s.keep_fraction
            )));
        }
    }
    let weights: Vec<f64> = sources.iter().map(|s| s.weight).collect();
    let counts = apportion(&weights, n_total)?;

    let mut dataset = Vec::with_capacity(n_total);
    let mut per_source = BTreeMap::new();
    for (i, (src, &count)) in sources.iter().zip(&counts).enumerate() {
        let docs = read_documents(&src.path)?;
        let mut keep_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * i as u64));
        let mut kept = Vec::new();
        for (id, text) in docs {
            if keep_rng.random::<f64>() < src.keep_fraction {
                kept.push((id, tokenize(text.as_bytes(), tokenizer)?));
            }
        }
        let chunks = chunk_stream(kept, &src.name, max_chunk_len)?;
        if chunks.len() < count {
            return Err(Error::SourceShortage {
                source_name: src.name.clone(),
                needed: count,
                available: chunks.len(),
                deficit: count - chunks.len(),
            });
        }
        let picked = sample_chunks(&chunks, count, derive_seed(seed, 2 * i as u64 + 1))?;
        let tokens: usize = picked.iter().map(|c| c.tokens.len()).sum();
        per_source.insert(
            src.name.clone(),
            SourceShare {
                chunks: count,
                tokens,
                share: 0.0,
            },
        );
        dataset.extend(picked);
    }
    let total_tokens: usize = per_source.values().map(|s| s.tokens).sum();
    for s in per_source.values_mut() {
        s.share = if total_tokens == 0 {
            0.0
        } else {
            s.tokens as f64 / total_tokens as f64
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX - 1));
    dataset.shuffle(&mut rng);
    let report = CompositionReport {
        per_source,
        total_chunks: dataset.len(),
        total_tokens,
    };
    Ok((dataset, report))
}

pub fn write_dataset(path: impl AsRef<Path>, chunks: &[Chunk]) -> Result<()> {
    let file = std::fs::File::create(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for c in chunks {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Chunk>> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_level_examples() {
        let spec = TokenizerSpec::byte_level();
        assert_eq!(tokenize(b"ab", &spec).unwrap(), vec![256, 97, 98]);
        assert_eq!(tokenize(b"", &spec).unwrap(), vec![256]);
        assert_eq!(detokenize(&[256, 104, 105, 257], &spec).unwrap(), b"hi");
    }

    #[test]
    fn external_vocab_rejects_unknown_symbols() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        std::fs::write(&p, r#"{"ab": 0, "a": 1, "c": 2}"#).unwrap();
        let mut spec = TokenizerSpec::external(&p).unwrap();
        spec.add_bos = false;
        assert_eq!(tokenize(b"abac", &spec).unwrap(), vec![0, 1, 2]);
        assert_eq!(detokenize(&[0, 1, 2], &spec).unwrap(), b"abac");
        assert!(matches!(tokenize(b"abd", &spec), Err(Error::UnknownSymbol(s)) if s == "d"));
    }

    proptest! {
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let spec = TokenizerSpec::byte_level();
            prop_assert_eq!(detokenize(&tokenize(&bytes, &spec).unwrap(), &spec).unwrap(), bytes);
        }

        #[test]
        fn chunks_respect_cap_and_reassemble(len in 0usize..300, cap in 1usize..50) {
            let tokens: Vec<u32> = (0..len as u32).collect();
            let chunks = chunk_stream([("d".to_string(), tokens.clone())], "s", cap).unwrap();
            prop_assert!(chunks.iter().all(|c| !c.tokens.is_empty() && c.tokens.len() <= cap));
            let joined: Vec<u32> = chunks.iter().flat_map(|c| c.tokens.clone()).collect();
            prop_assert_eq!(joined, tokens);
        }

        #[test]
        fn apportionment_is_exact(ws in proptest::collection::vec(0.01f64..1.0, 1..8), total in 0usize..500) {
            let counts = apportion(&ws, total).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), total);
            let sum: f64 = ws.iter().sum();
            for (c, w) in counts.iter().zip(&ws) {
                prop_assert!((*c as f64 - w / sum * total as f64).abs() < 1.0);
            }
        }
    }

    #[test]
    fn chunk_examples() {
        let chunks = chunk_stream([("d".to_string(), vec![7; 2500])], "s", 1024).unwrap();
        assert_eq!(chunks.iter().map(|c| c.tokens.len()).collect::<Vec<_>>(), vec![1024, 1024, 452]);
        assert_eq!(chunk_stream([("d".to_string(), vec![1; 10])], "s", 1024).unwrap().len(), 1);
        assert!(chunk_stream([("d".to_string(), vec![])], "s", 1024).unwrap().is_empty());
        assert!(matches!(chunk_stream([("d".to_string(), vec![1])], "s", 0), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_examples() {
        let chunks = chunk_stream((0..20).map(|i| (i.to_string(), vec![i as u32])), "s", 4).unwrap();
        let all = sample_chunks(&chunks, 20, 1).unwrap();
        let mut sorted: Vec<_> = all.iter().map(|c| c.tokens[0]).collect();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(sample_chunks(&chunks, 7, 3).unwrap(), sample_chunks(&chunks, 7, 3).unwrap());
        assert!(matches!(
            sample_chunks(&chunks, 21, 0),
            Err(Error::SampleShortage { requested: 21, available: 20 })
        ));
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(&[0.09, 0.17, 0.22, 0.52], 100).unwrap(), vec![9, 17, 22, 52]);
        assert_eq!(apportion(&[1.0 / 3.0; 3], 100).unwrap(), vec![34, 33, 33]);
        assert_eq!(apportion(&[1.0], 17).unwrap(), vec![17]);
        assert!(apportion(&[0.0, 0.0], 5).is_err());
    }

    fn write_source(dir: &Path, name: &str, docs: usize, len: usize) -> PathBuf {
        let p = dir.join(format!("{name}.jsonl"));
        let mut s = String::new();
        for i in 0..docs {
            let text: String = (0..len).map(|j| (b'a' + ((i + j) % 26) as u8) as char).collect();
            s.push_str(&serde_json::json!({"text": text, "id": format!("{name}-{i}")}).to_string());
            s.push('\n');
        }
        std::fs::write(&p, s).unwrap();
        p
    }

    #[test]
    fn mixing_is_deterministic_and_reports_shortage() {
        let dir = tempfile::tempdir().unwrap();
        let sources = vec![
            CorpusSource {
                name: "a".into(),
                path: write_source(dir.path(), "a", 30, 40),
                keep_fraction: 1.0,
                weight: 0.25,
            },
            CorpusSource {
                name: "b".into(),
                path: write_source(dir.path(), "b", 60, 10),
                keep_fraction: 0.5,
                weight: 0.75,
            },
        ];
        let spec = TokenizerSpec::byte_level();
        let (d1, r1) = mix_corpora(&sources, 20, 16, 9, &spec).unwrap();
        let (d2, r2) = mix_corpora(&sources, 20, 16, 9, &spec).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(r1, r2);
        assert_eq!(r1.per_source["a"].chunks, 5);
        assert_eq!(r1.per_source["b"].chunks, 15);
        assert!(d1.iter().all(|c| c.tokens.len() <= 16));
        let share_sum: f64 = r1.per_source.values().map(|s| s.share).sum();
        assert!((share_sum - 1.0).abs() < 1e-12);

        let err = mix_corpora(&sources, 400, 16, 9, &spec).unwrap_err();
        assert!(matches!(err, Error::SourceShortage { ref source_name, .. } if source_name == "a"), "{err}");
    }

    #[test]
    fn undersampling_keeps_expected_fraction() {
        let dir = tempfile::tempdir().unwrap();
        let src = CorpusSource {
            name: "social".into(),
            path: write_source(dir.path(), "social", 4000, 3),
            keep_fraction: 0.1,
            weight: 1.0,
        };
        // every kept document is one chunk; the kept count is the available pool
        let err = mix_corpora(&[src], 4000, 16, 5, &TokenizerSpec::byte_level()).unwrap_err();
        let Error::SourceShortage { available, .. } = err else { panic!("{err}") };
        assert!((available as f64 / 4000.0 - 0.1).abs() < 0.02, "{available}");
    }
}
