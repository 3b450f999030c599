//! `sem` command-line interface. Every subcommand reads a manifest or explicit
//! files, runs one pipeline stage and writes its artifacts atomically. JSON
//! reports embed the resolved configuration and SHA-256 hashes of every input
//! and output file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Result, SemError};
use crate::format::{load_sae_weights, read_embedding_matrix, save_sae_weights, write_atomic, write_embedding_matrix, EmbeddingMatrix, LabelTable};
use crate::manifest::{Manifest, Role};
use crate::metrics::{evaluate_retrieval, group_metrics, zeroshot_classify, Desired, GroupedEvalSet};
use crate::pca::{pca_csv, pca_project_2d};
use crate::probes::{run_disentanglement_study, StageTwoProtocol, Stratification, StudyConfig};
use crate::sae::{CenterInit, LatentVector, SaeWeights};
use crate::scoring::{bias_scores, BiasSpec, PromptActivations, PromptRole};
use crate::steering::{orth_proj_baseline, QueryLatents, SteeringContext, Variant};
use crate::synth::{gen_synthetic_corpus, Basis, SynthConfig};
use crate::train::{train_msae, TrainConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl SemError {
    /// Process exit code for this error: 2 usage, 3 format or I/O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            SemError::InvalidArgument(_) | SemError::InvalidConfig(_) => EXIT_USAGE,
            SemError::Format { .. } | SemError::Io { .. } | SemError::DimensionMismatch { .. } | SemError::EmptyInput(_) => {
                EXIT_FORMAT
            }
            SemError::NonFinite(_) | SemError::Degenerate(_) | SemError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

#[derive(Debug, Parser, Serialize)]
#[command(name = "sem", version, about = "Sparse-autoencoder embedding debiasing toolkit")]
pub struct Cli {
    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Train a Matryoshka SAE on the manifest's training embeddings.
    SaeTrain(SaeTrainArgs),
    /// Encode an embedding matrix into SAE latents.
    Encode(CodecArgs),
    /// Decode SAE latents back into embeddings.
    Decode(CodecArgs),
    /// Score neurons against bias-class prompts.
    Score(ScoreArgs),
    /// Steer query embeddings in the SAE latent space.
    Steer(SteerArgs),
    /// Fairness and precision metrics of text-to-image retrieval.
    RetrieveEval(RetrieveArgs),
    /// Zero-shot classification accuracy per group.
    ZeroshotEval(ZeroshotArgs),
    /// Two-stage linear probing study.
    Disentangle(DisentangleArgs),
    /// Generate a synthetic corpus with planted ground truth.
    SynthGen(SynthArgs),
    /// Orthogonal-projection debiasing baseline.
    BaselineOrthproj(OrthprojArgs),
    /// Summarize reports into CSV and optionally emit a PCA plot table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterArg {
    GeometricMedian,
    ArithmeticMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum VariantArg {
    SemI,
    SemB,
    SemBi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DesiredArg {
    Uniform,
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ProtocolArg {
    TrainFold,
    TestFold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StratifyArg {
    Joint,
    Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisArg {
    Axis,
    Rotated,
}

#[derive(Debug, Args, Serialize)]
pub struct SaeTrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output SEMW weights file.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest role holding the training embeddings.
    #[arg(long, default_value = "train")]
    pub role: String,
    #[arg(long, default_value_t = 64)]
    pub latent_dim: usize,
    /// Comma-separated TopK counts; defaults to s/4,s/2.
    #[arg(long, value_delimiter = ',')]
    pub granularities: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 2048)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.8)]
    pub warm_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, value_enum, default_value_t = CenterArg::GeometricMedian)]
    pub center_init: CenterArg,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-step training log (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CodecArgs {
    #[arg(long)]
    pub sae: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub sae: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Bias attribute to score; required when the manifest has several.
    #[arg(long)]
    pub attribute: Option<String>,
    /// JSON report with per-neuron scores.
    #[arg(long)]
    pub out: PathBuf,
    /// Plot-ready per-neuron CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SteerArgs {
    #[arg(long)]
    pub sae: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    #[arg(long)]
    pub attribute: Option<String>,
    /// Manifest role whose rows are steered.
    #[arg(long, default_value = "queries")]
    pub role: String,
    /// Role holding paraphrases; its label column names the steered row index.
    #[arg(long, default_value = "paraphrases")]
    pub paraphrase_role: String,
    /// Keep decoded embeddings unnormalized.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Query matrix overriding the manifest role (e.g. steered output).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Role supplying query labels (and the queries unless overridden).
    #[arg(long, default_value = "queries")]
    pub query_role: String,
    #[arg(long, default_value = "images")]
    pub eval_role: String,
    /// Retrieval depth; defaults to the manifest's `k` parameter.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum, default_value_t = DesiredArg::Uniform)]
    pub desired: DesiredArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ZeroshotArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Class-prompt matrix overriding the manifest role.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    #[arg(long, default_value = "classes")]
    pub class_role: String,
    #[arg(long, default_value = "images")]
    pub eval_role: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DisentangleArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "images")]
    pub role: String,
    /// Probe SAE latents instead of raw embeddings.
    #[arg(long)]
    pub sae: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ProtocolArg::TrainFold)]
    pub protocol: ProtocolArg,
    #[arg(long, value_enum, default_value_t = StratifyArg::Joint)]
    pub stratify: StratifyArg,
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON synth configuration; individual flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub n_contents: Option<usize>,
    #[arg(long)]
    pub n_bias_classes: Option<usize>,
    #[arg(long)]
    pub content_strength: Option<f64>,
    #[arg(long)]
    pub bias_strength: Option<f64>,
    #[arg(long)]
    pub entanglement: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub samples_per_cell: Option<usize>,
    #[arg(long, value_enum)]
    pub basis: Option<BasisArg>,
}

#[derive(Debug, Args, Serialize)]
pub struct OrthprojArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub attribute: Option<String>,
    #[arg(long, default_value = "queries")]
    pub role: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// JSON reports to summarize.
    #[arg(long, num_args = 0..)]
    pub inputs: Vec<PathBuf>,
    /// Summary CSV with columns `report,command,metric,value`.
    #[arg(long)]
    pub out: PathBuf,
    /// Embedding matrix to project onto two principal components.
    #[arg(long)]
    pub pca: Option<PathBuf>,
    /// Labels (`index,label,group`) for the PCA rows.
    #[arg(long, requires = "pca")]
    pub pca_labels: Option<PathBuf>,
    #[arg(long, requires = "pca")]
    pub pca_out: Option<PathBuf>,
}

/// Parses `argv` and runs the CLI, returning the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| SemError::InvalidArgument(format!("cannot build thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::SaeTrain(a) => sae_train(a),
        Command::Encode(a) => codec(a, true),
        Command::Decode(a) => codec(a, false),
        Command::Score(a) => score(a),
        Command::Steer(a) => steer_cmd(a),
        Command::RetrieveEval(a) => retrieve_eval(a),
        Command::ZeroshotEval(a) => zeroshot_eval(a),
        Command::Disentangle(a) => disentangle(a),
        Command::SynthGen(a) => synth_gen(a),
        Command::BaselineOrthproj(a) => baseline_orthproj(a),
        Command::Report(a) => report(a),
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| SemError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hashes(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

/// Writes a JSON report holding the command, its arguments, file hashes and results.
fn write_report(path: &Path, command: &str, config: &impl Serialize, inputs: &[PathBuf], outputs: &[PathBuf], results: Value) -> Result<()> {
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "inputs": hashes(inputs)?,
        "outputs": hashes(outputs)?,
        "results": results,
    });
    let text = serde_json::to_string_pretty(&doc).expect("report serializes") + "\n";
    write_atomic(path, text.as_bytes())
}

fn parse_role(s: &str) -> Result<Role> {
    s.parse()
}

fn encode_rows(sae: &SaeWeights, rows: &[Vec<f64>]) -> Result<Vec<LatentVector>> {
    rows.iter().map(|r| sae.encode(r)).collect()
}

fn latents_matrix(latents: &[LatentVector], cols: usize) -> Result<EmbeddingMatrix> {
    let rows: Vec<Vec<f64>> = latents.iter().map(|l| l.to_vec()).collect();
    EmbeddingMatrix::from_rows(&rows, cols)
}

fn bias_spec(manifest: &Manifest, attribute: Option<&str>, sae: &SaeWeights) -> Result<BiasSpec> {
    let (attr, classes) = manifest.bias_classes(attribute)?;
    let classes = classes
        .into_iter()
        .map(|(name, m)| {
            let acts = PromptActivations::new(name.clone(), PromptRole::BiasClass, encode_rows(sae, &m.to_rows())?)?;
            Ok((name, acts))
        })
        .collect::<Result<Vec<_>>>()?;
    BiasSpec::new(attr, classes)
}

fn diverse_activations(manifest: &Manifest, sae: &SaeWeights) -> Result<PromptActivations> {
    let m = manifest.matrix(&Role::Diverse)?;
    PromptActivations::new("diverse", PromptRole::Diverse, encode_rows(sae, &m.to_rows())?)
}

/// Eval set built from a labelled role: label column = task, group column = group.
fn eval_set(manifest: &Manifest, role: &Role) -> Result<GroupedEvalSet> {
    let m = manifest.matrix(role)?;
    let labels = manifest.labels(role)?;
    let (task_names, tasks) = labels.label_indices();
    let (group_names, groups) = labels.group_indices();
    GroupedEvalSet::new(m.to_rows(), tasks, groups, task_names, group_names)
}

fn sae_train(a: &SaeTrainArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let role = parse_role(&a.role)?;
    let corpus = manifest.matrix(&role)?.to_rows();
    let mut cfg = TrainConfig::desk(a.latent_dim, a.steps, a.seed);
    if let Some(g) = &a.granularities {
        cfg = cfg.with_granularities(g.clone());
    }
    cfg.learning_rate = a.lr;
    cfg.batch_size = a.batch_size;
    cfg.warm_fraction = a.warm_fraction;
    cfg.weight_decay = a.weight_decay;
    cfg.eval_every = a.eval_every;
    cfg.center_init = match a.center_init {
        CenterArg::GeometricMedian => CenterInit::GeometricMedian,
        CenterArg::ArithmeticMean => CenterInit::ArithmeticMean,
    };
    let (w, log) = train_msae(&corpus, &cfg)?;
    save_sae_weights(&w, &a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(p) = &a.log {
        write_atomic(p, log.to_jsonl().as_bytes())?;
        outputs.push(p.clone());
    }
    if let Some(r) = &a.report {
        let mut inputs = vec![a.manifest.clone()];
        inputs.extend(manifest.entry(&role).map(|e| manifest.resolve(&e.path)));
        let results = json!({
            "train_config": cfg,
            "train_size": log.train_size,
            "validation_size": log.validation_size,
            "final_loss": log.records.last().map(|r| r.loss),
            "final_validation_mse": log.final_validation_mse(),
        });
        write_report(r, "sae-train", a, &inputs, &outputs, results)?;
    }
    Ok(())
}

fn codec(a: &CodecArgs, encode: bool) -> Result<()> {
    let sae = load_sae_weights(&a.sae)?;
    let input = read_embedding_matrix(&a.input)?;
    let rows = input.to_rows();
    let out = if encode {
        latents_matrix(&encode_rows(&sae, &rows)?, sae.latent_dim())?
    } else {
        let decoded = rows.iter().map(|h| Ok(sae.decode(h)?.to_vec())).collect::<Result<Vec<_>>>()?;
        EmbeddingMatrix::from_rows(&decoded, sae.input_dim())?
    };
    write_embedding_matrix(&out, &a.out)
}

fn score(a: &ScoreArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let sae = load_sae_weights(&a.sae)?;
    let spec = bias_spec(&manifest, a.attribute.as_deref(), &sae)?;
    let diverse = diverse_activations(&manifest, &sae)?;
    let scores = bias_scores(&spec, &diverse)?;
    let class_names: Vec<String> = spec.class_names().iter().map(|s| s.to_string()).collect();
    let mut outputs = Vec::new();
    if let Some(p) = &a.csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["neuron".to_string(), "s_bias".to_string()];
        for c in &class_names {
            header.push(format!("s_gen_{c}"));
            header.push(format!("s_spec_{c}"));
        }
        let csv_err = |e: csv::Error| SemError::format(p, e.to_string());
        w.write_record(&header).map_err(csv_err)?;
        for n in 0..scores.s_bias.len() {
            let mut row = vec![n.to_string(), scores.s_bias[n].to_string()];
            for c in 0..class_names.len() {
                row.push(scores.s_gen[c][n].to_string());
                row.push(scores.s_spec[c][n].to_string());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| SemError::format(p, e.to_string()))?;
        write_atomic(p, &bytes)?;
        outputs.push(p.clone());
    }
    let mut ranked: Vec<usize> = (0..scores.s_bias.len()).collect();
    ranked.sort_by(|&x, &y| scores.s_bias[y].total_cmp(&scores.s_bias[x]).then(x.cmp(&y)));
    ranked.truncate(20);
    let mut inputs = vec![a.manifest.clone(), a.sae.clone()];
    inputs.extend(manifest.files());
    let results = json!({
        "attribute": spec.attribute(),
        "classes": class_names,
        "top_bias_neurons": ranked,
        "scores": scores,
    });
    write_report(&a.out, "score", a, &inputs, &outputs, results)
}

/// Paraphrase latents grouped by the steered row index named in the label column.
fn paraphrases_by_row(manifest: &Manifest, role: &Role, sae: &SaeWeights, n_rows: usize) -> Result<Vec<Vec<LatentVector>>> {
    let m = manifest.matrix(role)?;
    let labels: LabelTable = manifest.labels(role)?;
    let mut grouped = vec![Vec::new(); n_rows];
    for (row, l) in m.to_rows().iter().zip(&labels.rows) {
        let target: usize = l.label.parse().map_err(|_| {
            SemError::InvalidArgument(format!("paraphrase label {:?} in role `{role}` is not a row index", l.label))
        })?;
        grouped
            .get_mut(target)
            .ok_or_else(|| SemError::InvalidArgument(format!("paraphrase label {target} exceeds {n_rows} steered rows")))?
            .push(sae.encode(row)?);
    }
    Ok(grouped)
}

fn steer_cmd(a: &SteerArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let variant = match a.variant {
        VariantArg::SemI => Variant::SemI,
        VariantArg::SemB => Variant::SemB,
        VariantArg::SemBi => Variant::SemBi,
    };
    let sae = load_sae_weights(&a.sae)?;
    let spec = if variant.needs_bias() {
        Some(bias_spec(&manifest, a.attribute.as_deref(), &sae)?)
    } else {
        None
    };
    let role = parse_role(&a.role)?;
    let rows = manifest.matrix(&role)?.to_rows();
    let para_role = parse_role(&a.paraphrase_role)?;
    let paraphrases = if variant.needs_paraphrases() {
        paraphrases_by_row(&manifest, &para_role, &sae, rows.len())?
    } else {
        vec![Vec::new(); rows.len()]
    };
    let ctx = SteeringContext::new(variant, diverse_activations(&manifest, &sae)?, spec.as_ref())?;
    let steered = rows
        .iter()
        .zip(paraphrases)
        .map(|(r, p)| {
            let q = QueryLatents {
                original: Some(sae.encode(r)?),
                paraphrases: p,
            };
            Ok(ctx.debias(&q, &sae, a.raw)?.embedding.to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    write_embedding_matrix(&EmbeddingMatrix::from_rows(&steered, sae.input_dim())?, &a.out)?;
    if let Some(r) = &a.report {
        let mut inputs = vec![a.manifest.clone(), a.sae.clone()];
        inputs.extend(manifest.files());
        let results = json!({
            "variant": variant.as_str(),
            "rows": steered.len(),
            "attribute": spec.as_ref().map(|s| s.attribute().to_string()),
        });
        write_report(r, "steer", a, &inputs, std::slice::from_ref(&a.out), results)?;
    }
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn retrieve_eval(a: &RetrieveArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let eval_role = parse_role(&a.eval_role)?;
    let query_role = parse_role(&a.query_role)?;
    let set = eval_set(&manifest, &eval_role)?;
    let queries = match &a.queries {
        Some(p) => read_embedding_matrix(p)?,
        None => manifest.matrix(&query_role)?,
    };
    let labels = manifest.labels(&query_role)?;
    if labels.len() != queries.rows() {
        return Err(SemError::dim("query labels", queries.rows(), labels.len()));
    }
    let k = match a.k {
        Some(k) => k,
        None => manifest
            .params
            .get("k")
            .and_then(Value::as_u64)
            .map(|k| k as usize)
            .ok_or_else(|| SemError::InvalidArgument("retrieval depth missing: pass --k or set manifest param `k`".into()))?,
    };
    let desired = match a.desired {
        DesiredArg::Uniform => Desired::Uniform,
        DesiredArg::Pool => Desired::Pool(set.group_proportions()),
    };
    let per_query = queries
        .to_rows()
        .iter()
        .zip(&labels.rows)
        .map(|(q, l)| {
            let target = set.task_names().iter().position(|t| *t == l.label);
            let r = evaluate_retrieval(q, &set, k, &desired, target)?;
            Ok(json!({ "query": l.index, "label": l.label, "report": r }))
        })
        .collect::<Result<Vec<_>>>()?;
    let field = |name: &str| mean(per_query.iter().filter_map(|v| v["report"][name].as_f64()));
    let results = json!({
        "k": k,
        "desired": desired,
        "kl_at_k": field("kl_at_k"),
        "maxskew_at_k": field("maxskew_at_k"),
        "precision_at_k": field("precision_at_k"),
        "per_query": per_query,
    });
    let mut inputs = vec![a.manifest.clone()];
    inputs.extend(a.queries.clone());
    inputs.extend(manifest.files());
    write_report(&a.out, "retrieve-eval", a, &inputs, &[], results)
}

fn zeroshot_eval(a: &ZeroshotArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let set = eval_set(&manifest, &parse_role(&a.eval_role)?)?;
    let class_role = parse_role(&a.class_role)?;
    let classes = match &a.classes {
        Some(p) => read_embedding_matrix(p)?,
        None => manifest.matrix(&class_role)?,
    };
    let class_labels = manifest.labels(&class_role)?;
    if class_labels.len() != classes.rows() {
        return Err(SemError::dim("class labels", classes.rows(), class_labels.len()));
    }
    // Class rows map onto eval task names; unknown classes extend the task list.
    let mut task_names = set.task_names().to_vec();
    let class_task: Vec<usize> = class_labels
        .rows
        .iter()
        .map(|r| match task_names.iter().position(|t| *t == r.label) {
            Some(i) => i,
            None => {
                task_names.push(r.label.clone());
                task_names.len() - 1
            }
        })
        .collect();
    let predictions: Vec<usize> = zeroshot_classify(&set, &classes.to_rows())?
        .into_iter()
        .map(|c| class_task[c])
        .collect();
    let metrics = group_metrics(&predictions, set.task_labels(), set.group_labels(), task_names.len(), set.group_names().len())?;
    let results = json!({
        "task_names": task_names,
        "group_names": set.group_names(),
        "metrics": metrics,
    });
    let mut inputs = vec![a.manifest.clone()];
    inputs.extend(a.classes.clone());
    inputs.extend(manifest.files());
    write_report(&a.out, "zeroshot-eval", a, &inputs, &[], results)
}

fn disentangle(a: &DisentangleArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let role = parse_role(&a.role)?;
    let rows = manifest.matrix(&role)?.to_rows();
    let labels = manifest.labels(&role)?;
    let (task_names, tasks) = labels.label_indices();
    let (group_names, groups) = labels.group_indices();
    let features = match &a.sae {
        Some(p) => {
            let sae = load_sae_weights(p)?;
            encode_rows(&sae, &rows)?.into_iter().map(|l| l.to_vec()).collect()
        }
        None => rows,
    };
    let mut cfg = StudyConfig {
        folds: a.folds,
        seed: a.seed,
        protocol: match a.protocol {
            ProtocolArg::TrainFold => StageTwoProtocol::TrainFold,
            ProtocolArg::TestFold => StageTwoProtocol::TestFold,
        },
        stratification: match a.stratify {
            StratifyArg::Joint => Stratification::Joint,
            StratifyArg::Task => Stratification::Task,
        },
        ..StudyConfig::default()
    };
    cfg.probe.l2 = a.l2;
    let study = run_disentanglement_study(&features, &tasks, &groups, &cfg)?;
    let results = json!({
        "features": if a.sae.is_some() { "sae_latents" } else { "embeddings" },
        "task_names": task_names,
        "bias_names": group_names,
        "study": study,
    });
    let mut inputs = vec![a.manifest.clone()];
    inputs.extend(a.sae.clone());
    inputs.extend(manifest.files());
    write_report(&a.out, "disentangle", a, &inputs, &[], results)
}

fn synth_gen(a: &SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| SemError::io(p, e))?;
            serde_json::from_str::<SynthConfig>(&text).map_err(|e| SemError::format(p, e.to_string()))?
        }
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field { cfg.$field = v; })*
        };
    }
    set!(seed, d, n_contents, n_bias_classes, content_strength, bias_strength, entanglement, noise_std, samples_per_cell);
    if let Some(b) = a.basis {
        cfg.basis = match b {
            BasisArg::Axis => Basis::Axis,
            BasisArg::Rotated => Basis::Rotated,
        };
    }
    gen_synthetic_corpus(&cfg)?.write_to_dir(&a.out)?;
    Ok(())
}

fn baseline_orthproj(a: &OrthprojArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let (attr, classes) = manifest.bias_classes(a.attribute.as_deref())?;
    let class_rows: Vec<Vec<Vec<f64>>> = classes.iter().map(|(_, m)| m.to_rows()).collect();
    let rows = manifest.matrix(&parse_role(&a.role)?)?;
    let mut warnings = Vec::new();
    let out = rows
        .to_rows()
        .iter()
        .map(|z| {
            let o = orth_proj_baseline(z, &class_rows)?;
            warnings.extend(o.warning);
            Ok(o.embedding)
        })
        .collect::<Result<Vec<_>>>()?;
    warnings.dedup();
    for w in &warnings {
        log::warn!("{w}");
    }
    write_embedding_matrix(&EmbeddingMatrix::from_rows(&out, rows.cols())?, &a.out)?;
    if let Some(r) = &a.report {
        let mut inputs = vec![a.manifest.clone()];
        inputs.extend(manifest.files());
        let results = json!({ "attribute": attr, "rows": out.len(), "warnings": warnings });
        write_report(r, "baseline-orthproj", a, &inputs, std::slice::from_ref(&a.out), results)?;
    }
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, f64)>) {
    match v {
        Value::Number(n) => out.extend(n.as_f64().map(|x| (prefix.to_string(), x))),
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {}
    }
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| SemError::format(&a.out, e.to_string());
    w.write_record(["report", "command", "metric", "value"]).map_err(csv_err)?;
    for p in &a.inputs {
        let text = std::fs::read_to_string(p).map_err(|e| SemError::io(p, e))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| SemError::format(p, e.to_string()))?;
        let command = doc["command"]
            .as_str()
            .ok_or_else(|| SemError::format(p, "report has no `command` field"))?;
        // Per-row arrays are skipped; only scalar summaries are tabulated.
        let mut metrics = Vec::new();
        flatten("", &doc["results"], &mut metrics);
        for (m, v) in metrics {
            w.write_record([p.display().to_string(), command.to_string(), m, v.to_string()])
                .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| SemError::format(&a.out, e.to_string()))?;
    write_atomic(&a.out, &bytes)?;

    if let Some(src) = &a.pca {
        let dest = a
            .pca_out
            .as_ref()
            .ok_or_else(|| SemError::InvalidArgument("--pca needs --pca-out".into()))?;
        let rows = read_embedding_matrix(src)?.to_rows();
        let (labels, groups) = match &a.pca_labels {
            Some(l) => {
                let t = crate::format::read_labels(l)?;
                if t.len() != rows.len() {
                    return Err(SemError::dim("PCA labels", rows.len(), t.len()));
                }
                (
                    t.rows.iter().map(|r| r.label.clone()).collect(),
                    t.rows.iter().map(|r| r.group.clone()).collect(),
                )
            }
            None => (vec![String::new(); rows.len()], vec![String::new(); rows.len()]),
        };
        let p = pca_project_2d(&rows)?;
        if let Some(warn) = &p.warning {
            log::warn!("{warn}");
        }
        write_atomic(dest, &pca_csv(&p, &groups, &labels)?)?;
    }
    Ok(())
}
