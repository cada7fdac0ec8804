//! k-shot summarisation evaluation: prompt construction, greedy decoding,
//! ROUGE-L and embedding-match F1.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{detokenize, tokenize, TokenizerSpec};
use crate::error::{Error, Result};
use crate::model::{KVCache, Model, TokenId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub instruction: String,
    pub article_marker: String,
    pub summary_marker: String,
    pub demo_separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            instruction: "Summarize the article.\n\n".into(),
            article_marker: "### Article:\n".into(),
            summary_marker: "\n### Summary:\n".into(),
            demo_separator: "\n\n".into(),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.article_marker.is_empty() || self.summary_marker.is_empty() {
            return Err(Error::config("prompt markers must be non-empty"));
        }
        if self.article_marker == self.summary_marker {
            return Err(Error::config("article and summary markers must differ"));
        }
        Ok(())
    }
}

pub fn build_prompt(template: &PromptTemplate, demos: &[(String, String)], article: &str) -> String {
    let mut s = template.instruction.clone();
    for (a, summary) in demos {
        s.push_str(&template.article_marker);
        s.push_str(a);
        s.push_str(&template.summary_marker);
        s.push_str(summary);
        s.push_str(&template.demo_separator);
    }
    s.push_str(&template.article_marker);
    s.push_str(article);
    s.push_str(&template.summary_marker);
    s
}

/// Anything that produces next-token logits incrementally.
pub trait Generator {
    /// Greedy continuation of `prompt`, at most `max_new` tokens, stopping
    /// before `stop`.
    fn generate(&self, prompt: &[TokenId], max_new: usize, stop: TokenId) -> Result<Vec<TokenId>>;
    /// Positions available to prompt plus generation.
    fn context_limit(&self) -> usize;
}

fn argmax_lowest(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        // strict comparison keeps the lowest id on ties
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

fn check_prompt_fits(model: &Model, prompt: &[TokenId], max_new: usize) -> Result<()> {
    let limit = model.usable_context().saturating_sub(max_new);
    if prompt.is_empty() {
        return Err(Error::Invalid("empty prompt".into()));
    }
    if prompt.len() > limit {
        return Err(Error::ContextLength {
            needed: prompt.len() + max_new + model.prefix_len(),
            limit: model.config.max_positions,
        });
    }
    Ok(())
}

/// Greedy decoding with a KV cache. Ties go to the lowest token id.
pub fn generate_greedy(model: &Model, prompt: &[TokenId], max_new: usize, stop: TokenId) -> Result<Vec<TokenId>> {
    check_prompt_fits(model, prompt, max_new)?;
    let mut cache = KVCache::new(&model.config);
    let mut logits = model.forward_logits(prompt, Some(&mut cache))?;
    let mut out = Vec::new();
    while out.len() < max_new {
        let last = logits.row(logits.shape()[0] - 1);
        let next = argmax_lowest(last);
        if next == stop {
            break;
        }
        out.push(next);
        if out.len() == max_new {
            break;
        }
        logits = model.forward_logits(&[next], Some(&mut cache))?;
    }
    Ok(out)
}

/// Reference decoder that re-runs the full sequence each step.
pub fn generate_greedy_uncached(model: &Model, prompt: &[TokenId], max_new: usize, stop: TokenId) -> Result<Vec<TokenId>> {
    check_prompt_fits(model, prompt, max_new)?;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new {
        let logits = model.forward_logits(&seq, None)?;
        let next = argmax_lowest(logits.row(seq.len() - 1));
        if next == stop {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

impl Generator for Model {
    fn generate(&self, prompt: &[TokenId], max_new: usize, stop: TokenId) -> Result<Vec<TokenId>> {
        generate_greedy(self, prompt, max_new, stop)
    }

    fn context_limit(&self) -> usize {
        self.usable_context()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

/// Lowercase, then split on whitespace.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Prf {
    let l = lcs_len(candidate, reference) as f64;
    let p = if candidate.is_empty() { 0.0 } else { l / candidate.len() as f64 };
    let r = if reference.is_empty() { 0.0 } else { l / reference.len() as f64 };
    Prf::from_pr(p, r)
}

/// Maps a metric token to a vector.
pub trait Embedder {
    fn embed(&self, token: &str) -> Result<Vec<f64>>;
}

/// Mean of the model's input-embedding rows for the token's bytes.
pub struct ModelEmbedder<'a> {
    model: &'a Model,
    tokenizer: TokenizerSpec,
}

impl<'a> ModelEmbedder<'a> {
    pub fn new(model: &'a Model, tokenizer: TokenizerSpec) -> Self {
        let tokenizer = TokenizerSpec {
            add_bos: false,
            ..tokenizer
        };
        Self { model, tokenizer }
    }
}

impl Embedder for ModelEmbedder<'_> {
    fn embed(&self, token: &str) -> Result<Vec<f64>> {
        let ids = tokenize(token.as_bytes(), &self.tokenizer)?;
        let table = self.model.store.value(self.model.embedding_id());
        let d = table.last_dim();
        let mut v = vec![0.0; d];
        for &id in &ids {
            if id as usize >= self.model.config.vocab {
                return Err(Error::TargetOutOfRange {
                    target: id,
                    vocab: self.model.config.vocab,
                });
            }
            for (o, x) in v.iter_mut().zip(table.row(id as usize)) {
                *o += x;
            }
        }
        let n = ids.len().max(1) as f64;
        Ok(v.into_iter().map(|x| x / n).collect())
    }
}

/// Token → vector table loaded from JSONL `{"token": ..., "vector": [...]}`.
#[derive(Clone, Debug, Default)]
pub struct TableEmbedder {
    pub table: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct TableLine {
    token: String,
    vector: Vec<f64>,
}

impl TableEmbedder {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        let mut table = HashMap::new();
        let mut dim = None;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: TableLine = serde_json::from_str(&line)?;
            if *dim.get_or_insert(row.vector.len()) != row.vector.len() {
                return Err(Error::Invalid(format!("embedding for {:?} has the wrong width", row.token)));
            }
            table.insert(row.token, row.vector);
        }
        Ok(Self { table })
    }
}

impl Embedder for TableEmbedder {
    fn embed(&self, token: &str) -> Result<Vec<f64>> {
        self.table
            .get(token)
            .cloned()
            .ok_or_else(|| Error::UnknownSymbol(token.to_string()))
    }
}

fn unit(token: &str, v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNormEmbedding(token.to_string()));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// Greedy cosine matching without idf weighting or baseline rescaling.
pub fn embed_match_f1<S: AsRef<str>>(candidate: &[S], reference: &[S], embedder: &dyn Embedder) -> Result<Prf> {
    let embed_all = |toks: &[S]| -> Result<Vec<Vec<f64>>> {
        toks.iter()
            .map(|t| unit(t.as_ref(), embedder.embed(t.as_ref())?))
            .collect()
    };
    let c = embed_all(candidate)?;
    let r = embed_all(reference)?;
    if c.is_empty() || r.is_empty() {
        return Ok(Prf::default());
    }
    let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(0.0, 1.0);
    let best = |xs: &[Vec<f64>], ys: &[Vec<f64>]| -> f64 {
        xs.iter()
            .map(|x| ys.iter().map(|y| cos(x, y)).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / xs.len() as f64
    };
    Ok(Prf::from_pr(best(&c, &r), best(&r, &c)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "path")]
pub enum EmbeddingProvider {
    ModelEmbeddings,
    ExternalTable(std::path::PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub demo_selection_seed: u64,
    #[serde(default = "default_provider")]
    pub embedding_provider: EmbeddingProvider,
    #[serde(default)]
    pub template: PromptTemplate,
    /// Keep the head of an over-long target article instead of failing.
    #[serde(default)]
    pub truncate_articles: bool,
}

fn default_provider() -> EmbeddingProvider {
    EmbeddingProvider::ModelEmbeddings
}

impl EvalConfig {
    pub fn new(k: usize, max_new_tokens: usize) -> Self {
        Self {
            k,
            max_new_tokens,
            demo_selection_seed: 0,
            embedding_provider: EmbeddingProvider::ModelEmbeddings,
            template: PromptTemplate::default(),
            truncate_articles: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    #[serde(default)]
    pub article: Option<String>,
    #[serde(default)]
    pub summary: Option<String>,
}

pub fn read_eval_rows(path: impl AsRef<Path>) -> Result<Vec<EvalRow>> {
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub index: usize,
    pub rouge_l: Prf,
    pub embed_f1: Prf,
    pub generated: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub examples: Vec<ExampleScore>,
    pub mean_rouge_l: Prf,
    pub mean_embed_f1: Prf,
    pub dropped_rows: usize,
    pub k: usize,
    pub seed: u64,
    pub metric_tokenization: String,
    pub config: EvalConfig,
}

fn mean_prf(xs: impl Iterator<Item = Prf>) -> Prf {
    let mut n = 0.0;
    let mut acc = Prf::default();
    for x in xs {
        acc.precision += x.precision;
        acc.recall += x.recall;
        acc.f1 += x.f1;
        n += 1.0;
    }
    if n > 0.0 {
        acc.precision /= n;
        acc.recall /= n;
        acc.f1 /= n;
    }
    acc
}

/// Demonstration indices for example `i`: `k` distinct other rows, drawn
/// from a stream seeded by `(seed, i)`.
pub fn select_demos(n_rows: usize, i: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n_rows.saturating_sub(1) {
        return Err(Error::config(format!(
            "{k}-shot evaluation needs at least {} rows, have {n_rows}",
            k + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    Ok(rand::seq::index::sample(&mut rng, n_rows - 1, k)
        .into_iter()
        .map(|j| if j >= i { j + 1 } else { j })
        .collect())
}

/// Generates a summary for every valid row and scores it. Rows missing an
/// article or summary are dropped and counted; demonstrations come from the
/// other valid rows.
pub fn run_eval(
    model: &dyn Generator,
    rows: &[EvalRow],
    cfg: &EvalConfig,
    tokenizer: &TokenizerSpec,
    embedder: &dyn Embedder,
) -> Result<MetricReport> {
    cfg.template.validate()?;
    let valid: Vec<(String, String)> = rows
        .iter()
        .filter_map(|r| match (&r.article, &r.summary) {
            (Some(a), Some(s)) if !a.trim().is_empty() && !s.trim().is_empty() => Some((a.clone(), s.clone())),
            _ => None,
        })
        .collect();
    let dropped = rows.len() - valid.len();
    if valid.is_empty() {
        return Err(Error::EmptyDataset(format!("all {dropped} evaluation rows were dropped")));
    }
    let limit = model.context_limit().saturating_sub(cfg.max_new_tokens);
    let mut examples = Vec::with_capacity(valid.len());
    for (i, (article, summary)) in valid.iter().enumerate() {
        let demos: Vec<(String, String)> = select_demos(valid.len(), i, cfg.k, cfg.demo_selection_seed)?
            .into_iter()
            .map(|j| valid[j].clone())
            .collect();
        let mut prompt = tokenize(build_prompt(&cfg.template, &demos, article).as_bytes(), tokenizer)?;
        if prompt.len() > limit && cfg.truncate_articles {
            prompt = truncated_prompt(&cfg.template, &demos, article, tokenizer, limit)?;
        }
        let generated = model.generate(&prompt, cfg.max_new_tokens, tokenizer.eos)?;
        let text = String::from_utf8_lossy(&detokenize(&generated, tokenizer)?).into_owned();
        let cand = metric_tokens(&text);
        let refs = metric_tokens(summary);
        examples.push(ExampleScore {
            index: i,
            rouge_l: rouge_l(&cand, &refs),
            embed_f1: embed_match_f1(&cand, &refs, embedder)?,
            generated: text,
        });
    }
    Ok(MetricReport {
        mean_rouge_l: mean_prf(examples.iter().map(|e| e.rouge_l)),
        mean_embed_f1: mean_prf(examples.iter().map(|e| e.embed_f1)),
        examples,
        dropped_rows: dropped,
        k: cfg.k,
        seed: cfg.demo_selection_seed,
        metric_tokenization: "lowercase+whitespace".into(),
        config: cfg.clone(),
    })
}

/// Keeps the longest head of the target article (in bytes, on a char
/// boundary) whose prompt fits `limit` tokens.
fn truncated_prompt(
    template: &PromptTemplate,
    demos: &[(String, String)],
    article: &str,
    tokenizer: &TokenizerSpec,
    limit: usize,
) -> Result<Vec<TokenId>> {
    let fits = |end: usize| -> Result<Option<Vec<TokenId>>> {
        let p = tokenize(build_prompt(template, demos, &article[..end]).as_bytes(), tokenizer)?;
        Ok((p.len() <= limit).then_some(p))
    };
    let bounds: Vec<usize> = (0..=article.len()).filter(|&e| article.is_char_boundary(e)).collect();
    let Some(mut best) = fits(0)? else {
        // the demonstrations alone overflow; report the untruncated size
        let full = tokenize(build_prompt(template, demos, article).as_bytes(), tokenizer)?;
        return Err(Error::ContextLength {
            needed: full.len(),
            limit,
        });
    };
    let (mut lo, mut hi) = (0usize, bounds.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        match fits(bounds[mid])? {
            Some(p) => {
                best = p;
                lo = mid;
            }
            None => hi = mid - 1,
        }
    }
    Ok(best)
}
