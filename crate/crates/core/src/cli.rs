//! Command-line front end. Every subcommand reads a JSON config, writes its
//! outputs (plus `manifest.json`) into `--out`, and exits 0 on success,
//! 1 on usage errors and 2 on runtime errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapters::{attach_adapter, count_trainable, merge_lora, paper_figure1_setups, AdapterConfig, TrainableCount};
use crate::checkpoint;
use crate::data::{self, CorpusSource, TokenizerSpec};
use crate::error::{Error, Result};
use crate::eval::{self, EmbeddingProvider, EvalConfig, ModelEmbedder, TableEmbedder};
use crate::model::{count_base_params, Model, ModelConfig};
use crate::tensor::DType;
use crate::train::{self, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "peft", version, about = "Parameter-efficient fine-tuning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct CommonArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Named preset (model geometry, or `paper-figure1` for count-params).
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum Format {
    Table,
    Json,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Mix corpora into a chunked training dataset.
    PrepareData(CommonArgs),
    /// Train an adapter (or the whole model when no adapter is configured).
    Train(CommonArgs),
    /// Fold a trained LoRA adapter into the base weights.
    Merge(CommonArgs),
    /// Count base and trainable adapter parameters.
    CountParams {
        #[command(flatten)]
        common: CommonArgs,
        /// Model preset name.
        #[arg(long)]
        model: Option<String>,
        /// Adapter config JSON file.
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// k-shot summarisation evaluation.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Overrides the number of demonstrations.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Greedy generation from a prompt.
    Generate(CommonArgs),
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let _ = writeln!(std::io::stderr(), "{}", e.render());
                    1
                }
            };
        }
    };
    let needs_config = match &cli.command {
        Command::CountParams { .. } => None,
        Command::PrepareData(c) | Command::Train(c) | Command::Merge(c) | Command::Generate(c) => Some(c),
        Command::Eval { common, .. } => Some(common),
    };
    if needs_config.is_some_and(|c| c.config.is_none()) {
        use clap::CommandFactory;
        let e = Cli::command().error(
            clap::error::ErrorKind::MissingRequiredArgument,
            "the subcommand requires --config <path>",
        );
        let _ = writeln!(std::io::stderr(), "{}", e.render());
        return 1;
    }
    let mut stdout = std::io::stdout();
    match dispatch(cli.command, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            2
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    seed: Option<u64>,
    tool_version: &'static str,
    wall_clock_secs: f64,
}

struct Run {
    command: &'static str,
    out: Option<PathBuf>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl Run {
    fn new(command: &'static str, out: Option<PathBuf>) -> Result<Self> {
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Self {
            command,
            out,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::config(format!("{} needs --out <dir>", self.command)))
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir()?.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn reserve(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.out_dir()?.join(name);
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn finish<C: Serialize>(self, config: &C, seed: Option<u64>) -> Result<()> {
        let Some(dir) = &self.out else { return Ok(()) };
        let manifest = RunManifest {
            command: self.command,
            config: serde_json::to_value(config)?,
            inputs: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION"),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

/// Reads a config and resolves relative paths against its directory.
fn read_config<T: for<'de> Deserialize<'de>>(path: Option<&Path>) -> Result<(T, PathBuf)> {
    let path = path.ok_or_else(|| Error::config("--config <path> is required"))?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((serde_json::from_str(&text)?, base))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum DTypeName {
    F32,
    #[default]
    F64,
}

impl From<&DTypeName> for DType {
    fn from(d: &DTypeName) -> DType {
        match d {
            DTypeName::F32 => DType::F32,
            DTypeName::F64 => DType::F64,
        }
    }
}

/// How to build the model a command operates on.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub config: Option<ModelConfig>,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub dtype: DTypeName,
    /// Base (or merged) weights.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    #[serde(default)]
    pub adapter_checkpoint: Option<PathBuf>,
}

impl ModelSpec {
    fn model_config(&self, preset_flag: Option<&str>) -> Result<ModelConfig> {
        if let Some(p) = preset_flag {
            return ModelConfig::preset(p);
        }
        match (&self.preset, &self.config) {
            (Some(_), Some(_)) => Err(Error::config("give either model.preset or model.config, not both")),
            (Some(p), None) => ModelConfig::preset(p),
            (None, Some(c)) => Ok(c.clone()),
            (None, None) => ModelConfig::preset("toy"),
        }
    }

    fn build(&self, base: &Path, preset_flag: Option<&str>, run: &mut Run) -> Result<Model> {
        let mc = self.model_config(preset_flag)?;
        let mut model = Model::init(mc, self.init_seed, (&self.dtype).into())?;
        if let Some(p) = &self.checkpoint {
            let p = resolve(base, p);
            run.input(&p);
            model = model.load_base_weights(&checkpoint::load(&p)?)?;
        }
        if let Some(a) = &self.adapter {
            model = attach_adapter(model, a)?;
            if let Some(p) = &self.adapter_checkpoint {
                let p = resolve(base, p);
                run.input(&p);
                model = model.load_adapter_tensors(&checkpoint::load(&p)?)?;
            }
        } else if self.adapter_checkpoint.is_some() {
            return Err(Error::config("adapter_checkpoint given without an adapter config"));
        }
        Ok(model)
    }
}

fn tokenizer_from(base: &Path, vocab: &Option<PathBuf>, run: &mut Run) -> Result<TokenizerSpec> {
    match vocab {
        None => Ok(TokenizerSpec::byte_level()),
        Some(p) => {
            let p = resolve(base, p);
            run.input(&p);
            TokenizerSpec::external(p)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareDataConfig {
    pub sources: Vec<CorpusSource>,
    pub n_total: usize,
    #[serde(default = "default_chunk")]
    pub max_chunk_len: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub vocab: Option<PathBuf>,
}

fn default_chunk() -> usize {
    1024
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    #[serde(default = "default_model_spec")]
    pub model: ModelSpec,
    pub dataset: PathBuf,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    #[serde(default = "default_model_spec")]
    pub model: ModelSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountConfig {
    #[serde(default = "default_model_spec")]
    pub model: ModelSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCommandConfig {
    #[serde(default = "default_model_spec")]
    pub model: ModelSpec,
    pub dataset: PathBuf,
    pub eval: EvalConfig,
    #[serde(default)]
    pub vocab: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    #[serde(default = "default_model_spec")]
    pub model: ModelSpec,
    pub prompt: String,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub vocab: Option<PathBuf>,
}

fn default_model_spec() -> ModelSpec {
    ModelSpec {
        preset: None,
        config: None,
        init_seed: 0,
        dtype: DTypeName::F64,
        checkpoint: None,
        adapter: None,
        adapter_checkpoint: None,
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::PrepareData(a) => prepare_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Merge(a) => merge_cmd(&a),
        Command::CountParams {
            common,
            model,
            adapter,
            format,
        } => count_cmd(&common, model, adapter, format, stdout),
        Command::Eval { common, k } => eval_cmd(&common, k),
        Command::Generate(a) => generate_cmd(&a, stdout),
    }
}

fn prepare_data(a: &CommonArgs) -> Result<()> {
    let (mut cfg, base): (PrepareDataConfig, _) = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let mut run = Run::new("prepare-data", a.out.clone())?;
    run.out_dir()?;
    for s in &mut cfg.sources {
        s.path = resolve(&base, &s.path);
        run.input(&s.path);
    }
    let tok = tokenizer_from(&base, &cfg.vocab, &mut run)?;
    let (chunks, report) = data::mix_corpora(&cfg.sources, cfg.n_total, cfg.max_chunk_len, cfg.seed, &tok)?;
    let path = run.reserve("dataset.jsonl")?;
    data::write_dataset(&path, &chunks)?;
    run.write("composition.json", &pretty(&report)?)?;
    let seed = cfg.seed;
    run.finish(&cfg, Some(seed))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    steps: usize,
    final_loss: Option<f64>,
    tokens_seen: usize,
    trainable_parameters: usize,
    trainable: Vec<String>,
    checkpoint: &'a str,
}

fn train_cmd(a: &CommonArgs) -> Result<()> {
    let (mut cfg, base): (TrainCommandConfig, _) = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let mut run = Run::new("train", a.out.clone())?;
    run.out_dir()?;
    let mut model = cfg.model.build(&base, a.preset.as_deref(), &mut run)?;
    let ds_path = resolve(&base, &cfg.dataset);
    run.input(&ds_path);
    let dataset = data::read_dataset(&ds_path)?;
    let (report, ckpt_name) = if model.adapter().is_some() {
        let path = run.reserve("adapter.ckpt")?;
        (train::train_adapter(&mut model, &dataset, &cfg.train, Some(&path))?, "adapter.ckpt")
    } else {
        let report = train::train_model(&mut model, &dataset, &cfg.train)?;
        let path = run.reserve("model.ckpt")?;
        checkpoint::save(&path, &model.state_dict())?;
        (report, "model.ckpt")
    };
    run.write("loss.csv", report.loss_csv().as_bytes())?;
    let summary = TrainSummary {
        steps: report.losses.len(),
        final_loss: report.losses.last().copied(),
        tokens_seen: report.tokens_seen,
        trainable_parameters: model.store.num_trainable_scalars(),
        trainable: model.trainable_names(),
        checkpoint: ckpt_name,
    };
    run.write("train_report.json", &pretty(&summary)?)?;
    let seed = cfg.train.seed;
    run.finish(&cfg, Some(seed))
}

fn merge_cmd(a: &CommonArgs) -> Result<()> {
    let (cfg, base): (MergeConfig, _) = read_config(a.config.as_deref())?;
    let mut run = Run::new("merge", a.out.clone())?;
    run.out_dir()?;
    let model = cfg.model.build(&base, a.preset.as_deref(), &mut run)?;
    let merged = merge_lora(model)?;
    let path = run.reserve("merged.ckpt")?;
    checkpoint::save(&path, &merged.state_dict())?;
    run.finish(&cfg, None)
}

fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[derive(Serialize)]
struct CountOutput {
    model: ModelConfig,
    base: crate::model::BaseParamCount,
    adapters: Vec<TrainableCount>,
}

fn count_cmd(
    a: &CommonArgs,
    model_preset: Option<String>,
    adapter: Option<PathBuf>,
    format: Format,
    stdout: &mut dyn Write,
) -> Result<()> {
    let mut run = Run::new("count-params", a.out.clone())?;
    let mut spec = match &a.config {
        Some(_) => {
            let (c, _): (CountConfig, _) = read_config(a.config.as_deref())?;
            c.model
        }
        None => default_model_spec(),
    };
    let mut setups: Vec<AdapterConfig> = spec.adapter.take().into_iter().collect();
    if let Some(p) = &adapter {
        run.input(p);
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        setups.push(AdapterConfig::from_json(&text)?);
    }
    let mut model_name = model_preset.clone();
    match a.preset.as_deref() {
        Some("paper-figure1") => {
            setups.extend(paper_figure1_setups());
            model_name.get_or_insert_with(|| "paper-1b".to_string());
        }
        Some(other) => model_name = Some(other.to_string()),
        None => {}
    }
    let mc = spec.model_config(model_name.as_deref())?;
    let base = count_base_params(&mc)?;
    let adapters = setups
        .iter()
        .map(|s| count_trainable(s, &mc))
        .collect::<Result<Vec<_>>>()?;
    let text = match format {
        Format::Json => String::from_utf8(pretty(&CountOutput {
            model: mc.clone(),
            base: base.clone(),
            adapters: adapters.clone(),
        })?)
        .expect("JSON is UTF-8"),
        Format::Table => {
            let mut s = String::new();
            s.push_str(&format!(
                "base\t{}\t(tied {}, untied {})\n",
                group_thousands(base.total),
                group_thousands(base.total_tied),
                group_thousands(base.total_untied)
            ));
            for c in &adapters {
                s.push_str(&format!(
                    "{}\t{}\t{:.4}%",
                    c.label,
                    group_thousands(c.total),
                    100.0 * c.total as f64 / base.total as f64
                ));
                if let Some(alt) = c.single_projection_alternative {
                    s.push_str(&format!("\tsingle-projection {}", group_thousands(alt)));
                }
                s.push('\n');
            }
            s
        }
    };
    if run.out.is_some() {
        let name = if format == Format::Json { "counts.json" } else { "counts.tsv" };
        run.write(name, text.as_bytes())?;
    }
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))?;
    let echo: BTreeMap<&str, Value> = BTreeMap::from([
        ("model", serde_json::to_value(&mc)?),
        ("adapters", serde_json::to_value(&setups)?),
    ]);
    run.finish(&echo, None)
}

fn eval_cmd(a: &CommonArgs, k: Option<usize>) -> Result<()> {
    let (mut cfg, base): (EvalCommandConfig, _) = read_config(a.config.as_deref())?;
    if let Some(k) = k {
        cfg.eval.k = k;
    }
    if let Some(s) = a.seed {
        cfg.eval.demo_selection_seed = s;
    }
    let mut run = Run::new("eval", a.out.clone())?;
    run.out_dir()?;
    let model = cfg.model.build(&base, a.preset.as_deref(), &mut run)?;
    let tok = tokenizer_from(&base, &cfg.vocab, &mut run)?;
    let ds = resolve(&base, &cfg.dataset);
    run.input(&ds);
    let rows = eval::read_eval_rows(&ds)?;
    let report = match &cfg.eval.embedding_provider {
        EmbeddingProvider::ModelEmbeddings => {
            let emb = ModelEmbedder::new(&model, tok.clone());
            eval::run_eval(&model, &rows, &cfg.eval, &tok, &emb)?
        }
        EmbeddingProvider::ExternalTable(p) => {
            let p = resolve(&base, p);
            run.input(&p);
            let emb = TableEmbedder::load(&p)?;
            eval::run_eval(&model, &rows, &cfg.eval, &tok, &emb)?
        }
    };
    run.write("report.json", &pretty(&report)?)?;
    let seed = cfg.eval.demo_selection_seed;
    run.finish(&cfg, Some(seed))
}

#[derive(Serialize)]
struct Generation {
    prompt: String,
    tokens: Vec<u32>,
    text: String,
}

fn generate_cmd(a: &CommonArgs, stdout: &mut dyn Write) -> Result<()> {
    let (cfg, base): (GenerateConfig, _) = read_config(a.config.as_deref())?;
    let mut run = Run::new("generate", a.out.clone())?;
    let model = cfg.model.build(&base, a.preset.as_deref(), &mut run)?;
    let tok = tokenizer_from(&base, &cfg.vocab, &mut run)?;
    let prompt = data::tokenize(cfg.prompt.as_bytes(), &tok)?;
    let tokens = eval::generate_greedy(&model, &prompt, cfg.max_new_tokens, tok.eos)?;
    let text = String::from_utf8_lossy(&data::detokenize(&tokens, &tok)?).into_owned();
    if run.out.is_some() {
        let g = Generation {
            prompt: cfg.prompt.clone(),
            tokens,
            text: text.clone(),
        };
        run.write("generation.json", &pretty(&g)?)?;
    }
    writeln!(stdout, "{text}").map_err(|e| Error::io("<stdout>", e))?;
    run.finish(&cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_grouping() {
        assert_eq!(group_thousands(49_152), "49,152");
        assert_eq!(group_thousands(34_664_448), "34,664,448");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(0), "0");
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["peft", "frobnicate"]), 1);
        assert_eq!(run(["peft", "train", "--bogus"]), 1);
        assert_eq!(run(["peft"]), 1);
        assert_eq!(run(["peft", "eval", "--out", "/tmp"]), 1);
    }

    #[test]
    fn runtime_errors_exit_2() {
        assert_eq!(run(["peft", "train", "--config", "/nonexistent/cfg.json", "--out", "/tmp"]), 2);
    }
}
