//! Command-line surface: `trace`, `evaluate`, `inject`, `segment`.
//!
//! Settings merge from three layers: built-in defaults, then a `key = value`
//! config file (`--config`), then flags. Unknown config keys are rejected.
//! The resolved configuration is logged to stderr; stdout carries only the
//! command's payload so json output stays byte-stable.
//!
//! Exit codes: 0 success, 2 invalid arguments or config, 3 backend or IO
//! failure, 4 empty or too-short document.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::doc::{segment, Granularity, TraceQuery};
use crate::error::{Error, Result};
use crate::harness::{
    self, AttackConfig, AttackTemplate, ExperimentConfig, HarnessBackend, Placement, TemplateName,
};
use crate::llm::{BackendConfig, BleuBackend, LlmClient, LogProbBackend};
use crate::search::{trace_with_config, MethodChoice, TraceConfig, TraceResult};
use crate::value::{GameKind, OracleGame, ScoreSpace, ValueEngine};

#[derive(Parser)]
#[command(
    name = "ctxtrace",
    version,
    about = "Trace a model output back to the context texts responsible for it"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rank the top-K texts most responsible for an output.
    Trace(Box<TraceArgs>),
    /// Run injection + traceback + metrics over a JSONL corpus.
    Evaluate(Box<EvaluateArgs>),
    /// Insert a rendered attack template into a document.
    Inject(Box<InjectArgs>),
    /// Split a document into indexed texts with source spans.
    Segment(Box<SegmentArgs>),
}

/// Entry point for the binary. Returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Cmd::Trace(args) => cmd_trace(&args),
        Cmd::Evaluate(args) => cmd_evaluate(&args),
        Cmd::Inject(args) => cmd_inject(&args),
        Cmd::Segment(args) => cmd_segment(&args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::TooManyUnits { .. } => 2,
        Error::EmptyDocument | Error::DocumentTooShort(_) => 4,
        _ => 3,
    }
}

// ---------------------------------------------------------------------------
// config file + flag merging
// ---------------------------------------------------------------------------

/// `key = value` lines, `#` comments. Keys use the long flag spelling
/// without the leading dashes.
struct ConfigFile {
    values: BTreeMap<String, String>,
    consumed: std::cell::RefCell<BTreeSet<String>>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "config line {} is not `key = value`: {line:?}",
                        lineno + 1
                    ))
                })?;
                values.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(ConfigFile {
            values,
            consumed: Default::default(),
        })
    }

    /// Flag wins over file value over default.
    fn get<T: FromStr + Clone>(&self, key: &str, flag: Option<&T>, default: T) -> Result<T> {
        Ok(self
            .get_opt(key, flag)?
            .unwrap_or(default))
    }

    fn get_opt<T: FromStr + Clone>(&self, key: &str, flag: Option<&T>) -> Result<Option<T>> {
        self.consumed.borrow_mut().insert(key.to_string());
        if let Some(value) = flag {
            return Ok(Some(value.clone()));
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::InvalidConfig(format!("config key {key} has a bad value {raw:?}"))
            }),
        }
    }

    fn get_flag(&self, key: &str, flag: bool) -> Result<bool> {
        self.consumed.borrow_mut().insert(key.to_string());
        if flag {
            return Ok(true);
        }
        match self.values.get(key).map(String::as_str) {
            None => Ok(false),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(Error::InvalidConfig(format!(
                "config key {key} must be true/false, got {other:?}"
            ))),
        }
    }

    /// Reject keys that no flag consumed.
    fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        for key in self.values.keys() {
            if !consumed.contains(key) {
                return Err(Error::InvalidConfig(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// shared flag groups
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct MethodFlags {
    /// Number of texts to return.
    #[arg(long)]
    k: Option<usize>,
    /// Attribution method: stc, loo, shapley, shapley-exact, lime, ensemble.
    #[arg(long)]
    method: Option<String>,
    /// Permutations per scoring pass for shapley.
    #[arg(long)]
    permutations: Option<usize>,
    /// Denoising fraction in (0, 1].
    #[arg(long)]
    beta: Option<f64>,
    /// Ensemble scale for leave-one-out scores.
    #[arg(long = "loo-scale")]
    loo_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// log_prob_sum or per_token_mean.
    #[arg(long = "score-space")]
    score_space: Option<String>,
    /// Mask samples per scoring pass for lime.
    #[arg(long = "lime-samples")]
    lime_samples: Option<usize>,
    /// Fixed L1 penalty for lime (grid-selected when absent).
    #[arg(long = "lime-penalty")]
    lime_penalty: Option<f64>,
    /// Maximum rounds of the iterative re-run procedure.
    #[arg(long = "round-cap")]
    round_cap: Option<usize>,
}

impl MethodFlags {
    fn resolve(&self, file: &ConfigFile) -> Result<TraceConfig> {
        let defaults = TraceConfig::default();
        let method_name = file.get("method", self.method.as_ref(), "ensemble".to_string())?;
        let space_name = file.get(
            "score-space",
            self.score_space.as_ref(),
            "log_prob_sum".to_string(),
        )?;
        let space = match space_name.as_str() {
            "log_prob_sum" => ScoreSpace::LogProbSum,
            "per_token_mean" => ScoreSpace::PerTokenMean,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown score space {other:?}"
                )))
            }
        };
        let cfg = TraceConfig {
            k: file.get("k", self.k.as_ref(), defaults.k)?,
            method: MethodChoice::parse(&method_name)?,
            permutations: file.get(
                "permutations",
                self.permutations.as_ref(),
                defaults.permutations,
            )?,
            beta: file.get("beta", self.beta.as_ref(), defaults.beta)?,
            loo_scale: file.get("loo-scale", self.loo_scale.as_ref(), defaults.loo_scale)?,
            seed: file.get("seed", self.seed.as_ref(), defaults.seed)?,
            score_space: space,
            lime_samples: file.get(
                "lime-samples",
                self.lime_samples.as_ref(),
                defaults.lime_samples,
            )?,
            lime_penalty: file.get_opt("lime-penalty", self.lime_penalty.as_ref())?,
            round_cap: file.get("round-cap", self.round_cap.as_ref(), defaults.round_cap)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct ApiFlags {
    /// Base URL of an OpenAI-compatible server.
    #[arg(long = "base-url")]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long = "api-key-env")]
    api_key_env: Option<String>,
    #[arg(long = "timeout-secs")]
    timeout_secs: Option<u64>,
    #[arg(long = "max-retries")]
    max_retries: Option<u32>,
    /// Maximum in-flight requests.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Value function over the API: logprob or bleu.
    #[arg(long = "api-value")]
    api_value: Option<String>,
    /// Completion budget for generation-based scoring.
    #[arg(long = "gen-max-tokens")]
    gen_max_tokens: Option<usize>,
}

impl ApiFlags {
    fn resolve(&self, file: &ConfigFile) -> Result<(BackendConfig, String, usize)> {
        let defaults = BackendConfig::default();
        let key_env = file.get(
            "api-key-env",
            self.api_key_env.as_ref(),
            "CTXTRACE_API_KEY".to_string(),
        )?;
        let cfg = BackendConfig {
            base_url: file.get("base-url", self.base_url.as_ref(), defaults.base_url)?,
            api_key: std::env::var(&key_env).ok().filter(|k| !k.is_empty()),
            model: file.get("model", self.model.as_ref(), defaults.model)?,
            timeout: Duration::from_secs(file.get(
                "timeout-secs",
                self.timeout_secs.as_ref(),
                defaults.timeout.as_secs(),
            )?),
            max_retries: file.get(
                "max-retries",
                self.max_retries.as_ref(),
                defaults.max_retries,
            )?,
            request_parallelism: file.get(
                "parallelism",
                self.parallelism.as_ref(),
                defaults.request_parallelism,
            )?,
        };
        cfg.validate()?;
        let api_value = file.get("api-value", self.api_value.as_ref(), "logprob".to_string())?;
        if api_value != "logprob" && api_value != "bleu" {
            return Err(Error::InvalidConfig(format!(
                "api-value must be logprob or bleu, got {api_value:?}"
            )));
        }
        let gen_max_tokens =
            file.get("gen-max-tokens", self.gen_max_tokens.as_ref(), 64usize)?;
        Ok((cfg, api_value, gen_max_tokens))
    }
}

// ---------------------------------------------------------------------------
// trace
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct TraceArgs {
    /// The instruction/question given to the model.
    #[arg(short, long)]
    instruction: Option<String>,
    /// File containing the raw context document.
    #[arg(long)]
    context: Option<PathBuf>,
    /// The model output to trace back.
    #[arg(short, long)]
    output: Option<String>,
    /// passage[:words], sentence, or paragraph.
    #[arg(long)]
    granularity: Option<String>,
    /// api, existence:IDX[,IDX...], or unanimity:IDX[,IDX...].
    #[arg(long)]
    backend: Option<String>,
    /// json or text.
    #[arg(long)]
    format: Option<String>,
    /// Worker threads (accepted for parity with evaluate; tracing one query
    /// is sequential either way).
    #[arg(long)]
    jobs: Option<usize>,
    /// Config file with key = value lines mirroring the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    method: MethodFlags,
    #[command(flatten)]
    api: ApiFlags,
}

fn cmd_trace(args: &TraceArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let trace_cfg = args.method.resolve(&file)?;
    let granularity_spec = file.get(
        "granularity",
        args.granularity.as_ref(),
        "passage:100".to_string(),
    )?;
    let granularity = Granularity::parse(&granularity_spec)?;
    let backend_spec = file.get("backend", args.backend.as_ref(), "api".to_string())?;
    let format = file.get("format", args.format.as_ref(), "json".to_string())?;
    let _jobs = file.get("jobs", args.jobs.as_ref(), 1usize)?;
    let instruction = file
        .get_opt("instruction", args.instruction.as_ref())?
        .ok_or_else(|| Error::InvalidConfig("--instruction is required".into()))?;
    let context_path = file
        .get_opt("context", args.context.as_ref())?
        .ok_or_else(|| Error::InvalidConfig("--context is required".into()))?;
    let output = file
        .get_opt("output", args.output.as_ref())?
        .ok_or_else(|| Error::InvalidConfig("--output is required".into()))?;
    let (api_cfg, api_value, gen_max_tokens) = args.api.resolve(&file)?;
    file.finish()?;

    let raw = std::fs::read_to_string(&context_path)?;
    let doc = segment(&raw, granularity)?;
    let query = TraceQuery::new(instruction, doc, output)?;
    let n = query.context.len();

    let engine = build_engine(&backend_spec, &query, &trace_cfg, &api_cfg, &api_value, gen_max_tokens)?;
    log_resolved_config(&serde_json::json!({
        "command": "trace",
        "backend": engine.descriptor(),
        "granularity": granularity,
        "trace": trace_cfg,
        "format": format,
        "texts": n,
    }));

    let universe: Vec<usize> = (0..n).collect();
    let result = trace_with_config(&engine, &universe, &trace_cfg)?;
    print_trace_result(&query, &result, &trace_cfg, &engine, &format)
}

fn build_engine(
    backend_spec: &str,
    query: &TraceQuery,
    trace_cfg: &TraceConfig,
    api_cfg: &BackendConfig,
    api_value: &str,
    gen_max_tokens: usize,
) -> Result<ValueEngine> {
    let texts: Vec<String> = query
        .context
        .segments
        .iter()
        .map(|s| s.content.clone())
        .collect();
    if backend_spec == "api" {
        let client = LlmClient::new(api_cfg.clone())?;
        if api_value == "bleu" {
            Ok(ValueEngine::new(Box::new(BleuBackend {
                client,
                instruction: query.instruction.clone(),
                texts,
                output: query.output.clone(),
                max_tokens: gen_max_tokens,
            })))
        } else {
            Ok(ValueEngine::new(Box::new(LogProbBackend {
                client,
                instruction: query.instruction.clone(),
                texts,
                output: query.output.clone(),
                space: trace_cfg.score_space,
            })))
        }
    } else {
        let game = OracleGame::parse(backend_spec)?;
        let n = query.context.len();
        if let Some(&bad) = game.critical_set().iter().find(|&&i| i >= n) {
            return Err(Error::InvalidConfig(format!(
                "oracle index {bad} out of range for {n} texts"
            )));
        }
        Ok(ValueEngine::new(Box::new(game)))
    }
}

fn print_trace_result(
    query: &TraceQuery,
    result: &TraceResult,
    cfg: &TraceConfig,
    engine: &ValueEngine,
    format: &str,
) -> Result<()> {
    match format {
        "json" => {
            let topk: Vec<serde_json::Value> = result
                .topk
                .iter()
                .map(|top| {
                    let seg = &query.context.segments[top.index];
                    serde_json::json!({
                        "index": top.index,
                        "score": top.score,
                        "span": [seg.char_span.0, seg.char_span.1],
                        "excerpt": excerpt(&seg.content),
                    })
                })
                .collect();
            let payload = serde_json::json!({
                "method": cfg.method.name(),
                "k": cfg.k,
                "seed": cfg.seed,
                "backend": engine.descriptor(),
                "topk": topk,
                "queries_used": result.queries_used,
                "iterations": result.iterations,
                "per_method_scores": result.per_method_scores,
            });
            println!("{}", serde_json::to_string_pretty(&payload)?);
        }
        "text" => {
            println!(
                "top-{} texts by {} ({} queries, {} iterations)",
                result.topk.len(),
                cfg.method.name(),
                result.queries_used,
                result.iterations
            );
            for (rank, top) in result.topk.iter().enumerate() {
                let seg = &query.context.segments[top.index];
                println!(
                    "{:>2}. text {:<4} score {:>12.6}  bytes {}..{}",
                    rank + 1,
                    top.index,
                    top.score,
                    seg.char_span.0,
                    seg.char_span.1
                );
                println!("    {}", excerpt(&seg.content));
            }
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "format must be json or text, got {other:?}"
            )))
        }
    }
    Ok(())
}

fn excerpt(content: &str) -> String {
    let flat = crate::search::normalize_whitespace(content);
    let mut out: String = flat.chars().take(120).collect();
    if flat.chars().count() > 120 {
        out.push('…');
    }
    out
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// JSONL corpus of cases.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Report JSON path; per-case detail goes to `<report>.cases.jsonl`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Attack template: default, context_ignoring, escape_characters,
    /// fake_completion, combined.
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    copies: Option<usize>,
    /// random or adjacent_split.
    #[arg(long)]
    placement: Option<String>,
    #[arg(long = "attack-seed")]
    attack_seed: Option<u64>,
    /// api, oracle:existence, or oracle:unanimity.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    granularity: Option<String>,
    /// Re-run the search until the output changes.
    #[arg(long)]
    iterative: bool,
    /// Record wall-clock seconds in the report (breaks byte-for-byte
    /// reproducibility).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    method: MethodFlags,
    #[command(flatten)]
    api: ApiFlags,
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let trace_cfg = args.method.resolve(&file)?;
    let corpus = file
        .get_opt("corpus", args.corpus.as_ref())?
        .ok_or_else(|| Error::InvalidConfig("--corpus is required".into()))?;
    let report_path = file
        .get_opt("report", args.report.as_ref())?
        .ok_or_else(|| Error::InvalidConfig("--report is required".into()))?;
    let granularity_spec = file.get(
        "granularity",
        args.granularity.as_ref(),
        "passage:100".to_string(),
    )?;
    let granularity = Granularity::parse(&granularity_spec)?;
    let attack = match file.get_opt("attack", args.attack.as_ref())? {
        None => None,
        Some(name) => {
            let placement_name =
                file.get("placement", args.placement.as_ref(), "random".to_string())?;
            let placement = match placement_name.as_str() {
                "random" => Placement::Random,
                "adjacent_split" => Placement::AdjacentSplit,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "placement must be random or adjacent_split, got {other:?}"
                    )))
                }
            };
            Some(AttackConfig {
                template: TemplateName::parse(&name)?,
                copies: file.get("copies", args.copies.as_ref(), 5usize)?,
                placement,
                seed: file.get("attack-seed", args.attack_seed.as_ref(), 0u64)?,
            })
        }
    };
    let backend_spec = file.get("backend", args.backend.as_ref(), "oracle:existence".to_string())?;
    let (api_cfg, api_value, gen_max_tokens) = args.api.resolve(&file)?;
    let backend = match backend_spec.as_str() {
        "oracle:existence" => HarnessBackend::Oracle {
            game: GameKind::Existence,
        },
        "oracle:unanimity" => HarnessBackend::Oracle {
            game: GameKind::Unanimity,
        },
        "api" => {
            if api_value == "bleu" {
                HarnessBackend::ApiBleu
            } else {
                HarnessBackend::ApiLogProb
            }
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "backend must be api, oracle:existence, or oracle:unanimity, got {other:?}"
            )))
        }
    };
    let iterative = file.get_flag("iterative", args.iterative)?;
    let timing = file.get_flag("timing", args.timing)?;
    let jobs = file.get("jobs", args.jobs.as_ref(), 1usize)?;
    file.finish()?;

    let cfg = ExperimentConfig {
        trace: trace_cfg,
        granularity,
        attack,
        api: matches!(backend, HarnessBackend::Oracle { .. })
            .then_some(None)
            .unwrap_or(Some(api_cfg)),
        backend,
        iterative,
        jobs,
        record_timing: timing,
        gen_max_tokens,
    };
    log_resolved_config(&serde_json::json!({
        "command": "evaluate",
        "corpus": corpus.display().to_string(),
        "report": report_path.display().to_string(),
        "trace": cfg.trace,
        "granularity": cfg.granularity,
        "attack": cfg.attack,
        "backend": cfg.backend,
        "iterative": cfg.iterative,
        "jobs": cfg.jobs,
    }));

    let report = harness::run_experiment(&corpus, &cfg, &report_path)?;
    let a = &report.aggregate;
    println!("cases:         {} (failed {})", a.cases_total, a.cases_failed);
    println!("precision:     {}", fmt_opt(a.precision));
    println!("recall:        {}", fmt_opt(a.recall));
    println!("asr_before:    {}", fmt_opt(a.asr_b));
    println!("asr_after:     {}", fmt_opt(a.asr_a));
    println!("asr_no_attack: {}", fmt_opt(a.asr_na));
    println!("mean_queries:  {:.1}", a.mean_queries);
    println!("report:        {}", report_path.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "n/a".to_string(),
    }
}

// ---------------------------------------------------------------------------
// inject
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct InjectArgs {
    /// File containing the raw document.
    #[arg(long)]
    context: Option<PathBuf>,
    /// The query rendered into the template.
    #[arg(long)]
    query: Option<String>,
    /// The target (incorrect) answer rendered into the template.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    copies: Option<usize>,
    #[arg(long)]
    placement: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Passage size used to line up adjacent-split boundaries.
    #[arg(long = "passage-words")]
    passage_words: Option<usize>,
    /// Output path for the modified document (default: <context>.injected).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output path for the ground-truth sidecar JSON.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_inject(args: &InjectArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let context_path = file
        .get_opt("context", args.context.as_ref())?
        .ok_or_else(|| Error::InvalidConfig("--context is required".into()))?;
    let query = file
        .get_opt("query", args.query.as_ref())?
        .ok_or_else(|| Error::InvalidConfig("--query is required".into()))?;
    let target = file
        .get_opt("target", args.target.as_ref())?
        .ok_or_else(|| Error::InvalidConfig("--target is required".into()))?;
    let template_name = file.get("template", args.template.as_ref(), "default".to_string())?;
    let copies = file.get("copies", args.copies.as_ref(), 5usize)?;
    let placement_name = file.get("placement", args.placement.as_ref(), "random".to_string())?;
    let seed = file.get("seed", args.seed.as_ref(), 0u64)?;
    let passage_words = file.get("passage-words", args.passage_words.as_ref(), 100usize)?;
    let out_path = file
        .get_opt("out", args.out.as_ref())?
        .unwrap_or_else(|| context_path.with_extension("injected"));
    let sidecar_path = file
        .get_opt("sidecar", args.sidecar.as_ref())?
        .unwrap_or_else(|| context_path.with_extension("sidecar.json"));
    file.finish()?;

    let placement = match placement_name.as_str() {
        "random" => Placement::Random,
        "adjacent_split" => Placement::AdjacentSplit,
        other => {
            return Err(Error::InvalidConfig(format!(
                "placement must be random or adjacent_split, got {other:?}"
            )))
        }
    };
    let template = AttackTemplate::new(TemplateName::parse(&template_name)?, copies, placement);
    log_resolved_config(&serde_json::json!({
        "command": "inject",
        "context": context_path.display().to_string(),
        "template": template,
        "seed": seed,
        "passage_words": passage_words,
    }));

    let raw = std::fs::read_to_string(&context_path)?;
    let outcome = harness::inject(&raw, &template, &query, &target, seed, passage_words)?;
    std::fs::write(&out_path, &outcome.raw)?;
    let sidecar = serde_json::json!({
        "injected_strings": outcome.injected_strings,
        "spans": outcome
            .spans
            .iter()
            .map(|s| serde_json::json!({"start": s.start, "len": s.text.len()}))
            .collect::<Vec<_>>(),
        "template": template.name,
        "copies": copies,
        "seed": seed,
    });
    std::fs::write(&sidecar_path, format!("{}\n", serde_json::to_string_pretty(&sidecar)?))?;
    println!(
        "{}",
        serde_json::json!({
            "out": out_path.display().to_string(),
            "sidecar": sidecar_path.display().to_string(),
            "insertions": outcome.spans.len(),
        })
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct SegmentArgs {
    /// File containing the raw document.
    #[arg(long)]
    context: Option<PathBuf>,
    #[arg(long)]
    granularity: Option<String>,
    /// json (one record per line) or text.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_segment(args: &SegmentArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let context_path = file
        .get_opt("context", args.context.as_ref())?
        .ok_or_else(|| Error::InvalidConfig("--context is required".into()))?;
    let granularity_spec = file.get(
        "granularity",
        args.granularity.as_ref(),
        "passage:100".to_string(),
    )?;
    let format = file.get("format", args.format.as_ref(), "json".to_string())?;
    file.finish()?;

    let granularity = Granularity::parse(&granularity_spec)?;
    log_resolved_config(&serde_json::json!({
        "command": "segment",
        "context": context_path.display().to_string(),
        "granularity": granularity,
        "format": format,
    }));
    let raw = std::fs::read_to_string(&context_path)?;
    let doc = segment(&raw, granularity)?;
    match format.as_str() {
        "json" => {
            for seg in &doc.segments {
                println!(
                    "{}",
                    serde_json::json!({
                        "index": seg.index,
                        "start": seg.char_span.0,
                        "end": seg.char_span.1,
                        "content": seg.content,
                    })
                );
            }
        }
        "text" => {
            for seg in &doc.segments {
                println!(
                    "[{}] bytes {}..{}: {}",
                    seg.index,
                    seg.char_span.0,
                    seg.char_span.1,
                    excerpt(&seg.content)
                );
            }
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "format must be json or text, got {other:?}"
            )))
        }
    }
    Ok(())
}

fn log_resolved_config(config: &serde_json::Value) {
    eprintln!("resolved config: {config}");
}
