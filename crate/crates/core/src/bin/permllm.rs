//! Command-line front end: corpus generation, training, merging, serving
//! and auditing, driven by flags with an optional JSON config underneath.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use permllm_core::audit::{
    self, ddi_suite, enumerate_pairs, resolvable_pairs, ugi, AuditReport, DdiConfig, GameVerdict,
    MiaMetric, ReportConfig, UgiConfig, UtilityMetric,
};
use permllm_core::checkpoint;
use permllm_core::corpus::{self, CorpusMode, CorpusSpec};
use permllm_core::domain::{DomainId, DomainSet};
use permllm_core::game::{run_game, EvidenceLog, GameConfig, GameKind};
use permllm_core::gateway::{CredentialStore, Engine, Gateway, GatewayConfig};
use permllm_core::mechanisms::{
    build_map, merge_adapters, singleton_adapter_id, train_all, vocabulary_texts,
    AdapterStore, DomainAdapterMap, Mechanism, MergeSpec, TrainOptions,
};
use permllm_core::mia::Attack;
use permllm_core::model::{init_model, LoraAdapter, ModelConfig};
use permllm_core::server::{serve, GatewayClient};
use permllm_core::tokenizer::Tokenizer;
use permllm_core::train::TrainConfig;

#[derive(Parser)]
#[command(name = "permllm", version, about = "Domain-permissioned language model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain corpus (JSONL + metadata sidecar)
    Gen(GenArgs),
    /// Stratified train/test split of a corpus
    Split(SplitArgs),
    /// Initialize base weights and train the mechanism's adapters
    Train(TrainArgs),
    /// Fill a declared combination's adapter by SVD-merging its singletons
    Merge(ComboArgs),
    /// Train a declared combination's adapter on the union of its data
    Union(UnionArgs),
    /// Serve the gateway over newline-delimited JSON
    Serve(ServeArgs),
    /// Mint or revoke credentials in a credentials file (admin plane)
    Register(RegisterArgs),
    /// Send one query to a running gateway
    Query(QueryArgs),
    /// Run the black-box audit games and write the audit report
    Audit(AuditArgs),
    /// Pretty-print an existing audit report
    Report(ReportArgs),
}

/// Optional JSON config; flags override file values, file values override
/// built-in defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model_seed: Option<u64>,
    d_model: Option<usize>,
    n_layers: Option<usize>,
    n_heads: Option<usize>,
    context_len: Option<usize>,
    lora_rank: Option<usize>,
    lora_alpha: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
    warmup_steps: Option<usize>,
    prompt_weight: Option<f64>,
    train_seed: Option<u64>,
    attacks: Option<Vec<String>>,
    metrics: Option<Vec<String>>,
    alpha_ddi: Option<f64>,
    alpha_ugi: Option<f64>,
    k_percent: Option<f64>,
    samples_per_side: Option<usize>,
    ugi_samples: Option<usize>,
    max_new_tokens: Option<usize>,
    audit_seed: Option<u64>,
}

impl RunConfig {
    fn load(path: Option<&PathBuf>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let raw = std::fs::read_to_string(p)
                    .map_err(|e| CliError::validation(format!("config {}: {e}", p.display())))?;
                serde_json::from_str(&raw)
                    .map_err(|e| CliError::validation(format!("config {}: {e}", p.display())))
            }
        }
    }
}

#[derive(Debug)]
struct CliError {
    message: String,
    exit: u8,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        Self { message: message.into(), exit: 1 }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { message: message.into(), exit: 2 }
    }
}

macro_rules! impl_runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::runtime(e.to_string())
            }
        }
    )*};
}
impl_runtime_from!(
    std::io::Error,
    permllm_core::corpus::CorpusError,
    permllm_core::tokenizer::TokenizerError,
    permllm_core::model::ModelError,
    permllm_core::mechanisms::MechanismError,
    permllm_core::checkpoint::CheckpointError,
    permllm_core::gateway::GatewayError,
    permllm_core::server::ServerError,
    permllm_core::audit::AuditError
);

#[derive(Args)]
struct GenArgs {
    /// Output JSONL path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    domains: usize,
    #[arg(long, default_value_t = 100)]
    records: usize,
    /// disjoint | same-distribution
    #[arg(long, default_value = "disjoint")]
    mode: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    fraction: f64,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// activate | merge | union | prompt-baseline
    #[arg(long, default_value = "activate")]
    mechanism: String,
    /// Declared multi-domain combinations, e.g. d0+d1,d2+d3
    #[arg(long)]
    combos: Option<String>,
    /// Artifact directory (model.pllm, adapters.pllm, map.json, ...)
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    prompt_weight: Option<f64>,
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    lora_alpha: Option<f64>,
}

#[derive(Args)]
struct ComboArgs {
    /// Artifact directory from `train`
    #[arg(long)]
    dir: PathBuf,
    /// Combination key, e.g. d0+d1
    #[arg(long)]
    combo: String,
}

#[derive(Args)]
struct UnionArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    combo: String,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    train_seed: Option<u64>,
}

#[derive(Args)]
struct ServeArgs {
    /// Artifact directory; --model/--map override individual paths
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Base checkpoint (vocabulary expected at `<stem>.vocab.json`)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Map file (adapters expected at `<dir>/adapters.pllm`)
    #[arg(long)]
    map: Option<PathBuf>,
    /// Guard: refuse to serve if the map's mechanism differs
    #[arg(long)]
    mechanism: Option<String>,
    #[arg(long, default_value = "127.0.0.1:7777")]
    listen: String,
    /// Include adapter provenance in responses
    #[arg(long)]
    expose_provenance: bool,
    /// Enable over-the-wire token minting and trace scoring for auditors
    #[arg(long)]
    audit_mode: bool,
    /// Credentials file; loaded at startup when present
    #[arg(long)]
    credentials: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    credentials: Option<PathBuf>,
    /// Comma-separated domains, e.g. d0,d1 (empty string for the empty set)
    #[arg(long, conflicts_with = "revoke")]
    domains: Option<String>,
    /// Token to revoke
    #[arg(long)]
    revoke: Option<String>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    addr: String,
    #[arg(long)]
    token: String,
    #[arg(long)]
    query: String,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long, default_value = "cli")]
    id: String,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    dir: PathBuf,
    /// Training corpus the auditor holds samples from
    #[arg(long)]
    corpus: PathBuf,
    /// access | distinguishability | utility-gap
    #[arg(long, default_value = "access")]
    game: String,
    /// Gateway to audit; spawns an in-process audit gateway when absent
    #[arg(long)]
    addr: Option<String>,
    #[arg(long, default_value_t = 1)]
    set_size: usize,
    #[arg(long, default_value = "loss")]
    attack: String,
    #[arg(long, default_value = "auc-roc")]
    metric: String,
    #[arg(long, default_value = "verbatim")]
    utility: String,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    evidence: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha_ddi: Option<f64>,
    #[arg(long)]
    alpha_ugi: Option<f64>,
    #[arg(long)]
    k_percent: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    ugi_samples: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are success, anything else is a
            // validation failure
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.exit)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Union(a) => cmd_union(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Register(a) => cmd_register(a),
        Command::Query(a) => cmd_query(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn parse_mode(s: &str) -> Result<CorpusMode, CliError> {
    match s {
        "disjoint" => Ok(CorpusMode::Disjoint),
        "same-distribution" | "same" => Ok(CorpusMode::SameDistribution),
        other => Err(CliError::validation(format!("unknown corpus mode {other:?}"))),
    }
}

fn parse_combos(raw: Option<&str>) -> Result<Vec<DomainSet>, CliError> {
    let Some(raw) = raw else { return Ok(Vec::new()) };
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|combo| {
            let ids: Result<Vec<DomainId>, _> =
                combo.trim().split('+').map(|d| DomainId::new(d.trim())).collect();
            ids.map(DomainSet::new).map_err(|e| CliError::validation(e.to_string()))
        })
        .collect()
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::validation(format!("missing artifact: {}", path.display())));
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    let spec = CorpusSpec {
        n_domains: a.domains,
        records_per_domain: a.records,
        mode: parse_mode(&a.mode)?,
        seed: a.seed,
    };
    let corpus = corpus::generate_corpus(&spec)
        .map_err(|e| CliError::validation(e.to_string()))?;
    corpus::save_corpus(&corpus, &a.out)?;
    println!(
        "wrote {} records across {} domains to {}",
        corpus.records.len(),
        corpus.domains.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<(), CliError> {
    require_file(&a.corpus)?;
    let corpus = corpus::load_corpus(&a.corpus)?;
    let (train, test) = corpus::split(&corpus, a.fraction, a.seed)
        .map_err(|e| CliError::validation(e.to_string()))?;
    corpus::save_corpus(&train, &a.train_out)?;
    corpus::save_corpus(&test, &a.test_out)?;
    println!("train {} / test {}", train.records.len(), test.records.len());
    Ok(())
}

struct Artifacts {
    base: permllm_core::model::BaseWeights,
    tokenizer: Tokenizer,
    map: DomainAdapterMap,
    store: AdapterStore,
}

fn artifact_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    (
        dir.join("model.pllm"),
        dir.join("model.vocab.json"),
        dir.join("adapters.pllm"),
        dir.join("map.json"),
    )
}

fn load_artifacts(dir: &Path) -> Result<Artifacts, CliError> {
    let (model_p, vocab_p, adapters_p, map_p) = artifact_paths(dir);
    for p in [&model_p, &vocab_p, &adapters_p, &map_p] {
        require_file(p)?;
    }
    Ok(Artifacts {
        base: checkpoint::load_base(&model_p)?,
        tokenizer: Tokenizer::load(&vocab_p)?,
        map: DomainAdapterMap::load(&map_p).map_err(|e| CliError::runtime(e.to_string()))?,
        store: AdapterStore::load(&adapters_p)?,
    })
}

fn save_artifacts(dir: &Path, art: &Artifacts) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let (model_p, vocab_p, adapters_p, map_p) = artifact_paths(dir);
    checkpoint::save_base(&model_p, &art.base)?;
    art.tokenizer.save(&vocab_p)?;
    art.store.save(&adapters_p)?;
    art.map.save(&map_p).map_err(|e| CliError::runtime(e.to_string()))?;
    Ok(())
}

fn train_config_from(cfg: &RunConfig) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: cfg.epochs.unwrap_or(d.epochs),
        batch_size: cfg.batch_size.unwrap_or(d.batch_size),
        learning_rate: cfg.learning_rate.unwrap_or(d.learning_rate),
        weight_decay: cfg.weight_decay.unwrap_or(d.weight_decay),
        warmup_steps: cfg.warmup_steps.unwrap_or(d.warmup_steps),
        prompt_weight: cfg.prompt_weight.unwrap_or(d.prompt_weight),
        seed: cfg.train_seed.unwrap_or(d.seed),
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    require_file(&a.corpus)?;
    let mut cfg = RunConfig::load(a.config.as_ref())?;
    // flags win over file
    cfg.epochs = a.epochs.or(cfg.epochs);
    cfg.batch_size = a.batch_size.or(cfg.batch_size);
    cfg.learning_rate = a.learning_rate.or(cfg.learning_rate);
    cfg.weight_decay = a.weight_decay.or(cfg.weight_decay);
    cfg.warmup_steps = a.warmup_steps.or(cfg.warmup_steps);
    cfg.prompt_weight = a.prompt_weight.or(cfg.prompt_weight);
    cfg.train_seed = a.train_seed.or(cfg.train_seed);
    cfg.model_seed = a.model_seed.or(cfg.model_seed);
    cfg.lora_rank = a.lora_rank.or(cfg.lora_rank);
    cfg.lora_alpha = a.lora_alpha.or(cfg.lora_alpha);

    let mechanism = Mechanism::from_str(&a.mechanism).map_err(CliError::validation)?;
    let corpus = corpus::load_corpus(&a.corpus)?;
    let combos = parse_combos(a.combos.as_deref())?;

    let texts = vocabulary_texts(&corpus, mechanism);
    let tokenizer = Tokenizer::from_texts(texts.iter().map(|s| s.as_str()))
        .map_err(|e| CliError::validation(e.to_string()))?;
    let mut mcfg = ModelConfig::desk_default(tokenizer.vocab_size(), cfg.model_seed.unwrap_or(1));
    if let Some(v) = cfg.d_model {
        mcfg.d_model = v;
    }
    if let Some(v) = cfg.n_layers {
        mcfg.n_layers = v;
    }
    if let Some(v) = cfg.n_heads {
        mcfg.n_heads = v;
    }
    if let Some(v) = cfg.context_len {
        mcfg.context_len = v;
    }
    if let Some(v) = cfg.lora_rank {
        mcfg.lora_rank = v;
    }
    if let Some(v) = cfg.lora_alpha {
        mcfg.lora_alpha = v;
    }
    mcfg.validate().map_err(|e| CliError::validation(e.to_string()))?;

    let base = init_model(&mcfg)?;
    let (map, mut store) = build_map(&corpus.domains, &combos, mechanism, &mcfg)
        .map_err(|e| CliError::validation(e.to_string()))?;
    let tcfg = train_config_from(&cfg);
    tcfg.validate().map_err(|e| CliError::validation(e.to_string()))?;
    let report =
        train_all(&base, &tokenizer, &corpus, &map, &mut store, &tcfg, TrainOptions::default())?;
    for (id, r) in &report.reports {
        println!(
            "{id}: {} steps, loss {:.3} -> {:.3}",
            r.steps,
            r.initial_loss().unwrap_or(f64::NAN),
            r.final_loss().unwrap_or(f64::NAN)
        );
    }
    let art = Artifacts { base, tokenizer, map, store };
    save_artifacts(&a.out_dir, &art)?;
    println!("artifacts written to {}", a.out_dir.display());
    Ok(())
}

fn cmd_merge(a: ComboArgs) -> Result<(), CliError> {
    let mut art = load_artifacts(&a.dir)?;
    if art.map.mechanism != Mechanism::Merge {
        return Err(CliError::validation(format!(
            "map mechanism is {}, merge only applies to merge maps",
            art.map.mechanism
        )));
    }
    let combo = parse_combos(Some(&a.combo))?
        .pop()
        .ok_or_else(|| CliError::validation("empty combination".to_string()))?;
    let Some(target_id) = art.map.lookup(&combo).map(str::to_string) else {
        return Err(CliError::validation(format!("unknown combination: {}", combo.key())));
    };
    let sources: Vec<String> = combo.members().iter().map(singleton_adapter_id).collect();
    let adapters: Result<Vec<&LoraAdapter>, CliError> = sources
        .iter()
        .map(|id| {
            art.store
                .get(id)
                .ok_or_else(|| CliError::validation(format!("adapter {id} not trained yet")))
        })
        .collect();
    let merged = merge_adapters(
        &MergeSpec { sources, weights: None, output_rank: None, output_id: target_id.clone() },
        &adapters?,
    )
    .map_err(|e| CliError::runtime(e.to_string()))?;
    art.store.insert(merged);
    save_artifacts(&a.dir, &art)?;
    println!("merged adapter {target_id} written");
    Ok(())
}

fn cmd_union(a: UnionArgs) -> Result<(), CliError> {
    require_file(&a.corpus)?;
    let mut cfg = RunConfig::load(a.config.as_ref())?;
    cfg.epochs = a.epochs.or(cfg.epochs);
    cfg.batch_size = a.batch_size.or(cfg.batch_size);
    cfg.learning_rate = a.learning_rate.or(cfg.learning_rate);
    cfg.train_seed = a.train_seed.or(cfg.train_seed);

    let mut art = load_artifacts(&a.dir)?;
    if art.map.mechanism != Mechanism::Union {
        return Err(CliError::validation(format!(
            "map mechanism is {}, union training only applies to union maps",
            art.map.mechanism
        )));
    }
    let combo = parse_combos(Some(&a.combo))?
        .pop()
        .ok_or_else(|| CliError::validation("empty combination".to_string()))?;
    let corpus = corpus::load_corpus(&a.corpus)?;
    let adapter_id = match art.map.lookup(&combo) {
        Some(id) => id.to_string(),
        None => art
            .map
            .declare_combination(combo.clone())
            .map_err(|e| CliError::validation(e.to_string()))?,
    };
    if art.store.get(&adapter_id).is_none() {
        art.store.insert(LoraAdapter::init(&adapter_id, &art.base.config));
    }
    // steer exactly the combination's records to its adapter
    let sub = permllm_core::corpus::Corpus {
        domains: combo.members().to_vec(),
        records: corpus.records_of_set(&combo).into_iter().cloned().collect(),
        mode: corpus.mode,
        seed: corpus.seed,
    };
    if sub.records.is_empty() {
        return Err(CliError::validation(format!("no records for combination {}", combo.key())));
    }
    let single_map = DomainAdapterMap {
        mechanism: Mechanism::Union,
        version: art.map.version,
        entries: vec![permllm_core::mechanisms::MapEntry {
            domains: combo.clone(),
            adapter: adapter_id.clone(),
        }],
    };
    let tcfg = train_config_from(&cfg);
    let report = train_all(
        &art.base,
        &art.tokenizer,
        &sub,
        &single_map,
        &mut art.store,
        &tcfg,
        TrainOptions::default(),
    )?;
    let r = &report.reports[&adapter_id];
    println!(
        "{adapter_id}: {} steps, loss {:.3} -> {:.3}",
        r.steps,
        r.initial_loss().unwrap_or(f64::NAN),
        r.final_loss().unwrap_or(f64::NAN)
    );
    save_artifacts(&a.dir, &art)?;
    Ok(())
}

fn build_gateway(
    dir: &Path,
    config: GatewayConfig,
    creds: Option<&PathBuf>,
) -> Result<Gateway, CliError> {
    let art = load_artifacts(dir)?;
    let engine = Engine::new(art.base, art.tokenizer, art.map, art.store);
    let credentials = match creds {
        Some(p) if p.exists() => CredentialStore::load(p)?,
        _ => CredentialStore::new(),
    };
    Ok(Gateway::new(engine, credentials, config))
}

fn load_artifacts_at(
    model: &Path,
    vocab: &Path,
    adapters: &Path,
    map: &Path,
) -> Result<Artifacts, CliError> {
    for p in [model, vocab, adapters, map] {
        require_file(p)?;
    }
    Ok(Artifacts {
        base: checkpoint::load_base(model)?,
        tokenizer: Tokenizer::load(vocab)?,
        map: DomainAdapterMap::load(map).map_err(|e| CliError::runtime(e.to_string()))?,
        store: AdapterStore::load(adapters)?,
    })
}

static SHUTDOWN: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

extern "C" fn handle_signal(_sig: libc::c_int) {
    SHUTDOWN.store(true, std::sync::atomic::Ordering::SeqCst);
}

fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let config =
        GatewayConfig { expose_provenance: a.expose_provenance, audit_mode: a.audit_mode };
    let gateway = match (&a.dir, &a.model, &a.map) {
        (Some(dir), None, None) => build_gateway(dir, config, a.credentials.as_ref())?,
        (dir, model, map) => {
            let fallback = dir.clone().unwrap_or_else(|| PathBuf::from("."));
            let (dm, dv, da, dmap) = artifact_paths(&fallback);
            let model_p = model.clone().unwrap_or(dm);
            let vocab_p = model_p.with_extension("vocab.json");
            let vocab_p = if vocab_p.exists() { vocab_p } else { dv };
            let map_p = map.clone().unwrap_or(dmap);
            let adapters_p = map_p.parent().map(|d| d.join("adapters.pllm")).unwrap_or(da);
            let art = load_artifacts_at(&model_p, &vocab_p, &adapters_p, &map_p)?;
            let engine = Engine::new(art.base, art.tokenizer, art.map, art.store);
            let credentials = match a.credentials.as_ref() {
                Some(p) if p.exists() => CredentialStore::load(p)?,
                _ => CredentialStore::new(),
            };
            Gateway::new(engine, credentials, config)
        }
    };
    let mechanism = gateway.engine.mechanism();
    if let Some(expect) = &a.mechanism {
        let expect = Mechanism::from_str(expect).map_err(CliError::validation)?;
        if expect != mechanism {
            return Err(CliError::validation(format!(
                "map mechanism is {mechanism}, but --mechanism {expect} was requested"
            )));
        }
    }
    let handle = serve(Arc::new(gateway), &a.listen)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    println!(
        "serving {mechanism} on {} (provenance {}, audit plane {})",
        handle.addr(),
        if a.expose_provenance { "exposed" } else { "hidden" },
        if a.audit_mode { "enabled" } else { "disabled" },
    );
    unsafe {
        libc::signal(libc::SIGINT, handle_signal as extern "C" fn(libc::c_int) as usize);
        libc::signal(libc::SIGTERM, handle_signal as extern "C" fn(libc::c_int) as usize);
    }
    while !SHUTDOWN.load(std::sync::atomic::Ordering::SeqCst) {
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    println!("shutting down");
    handle.shutdown();
    Ok(())
}

fn cmd_register(a: RegisterArgs) -> Result<(), CliError> {
    let creds_path = a.credentials.clone().unwrap_or_else(|| a.dir.join("credentials.json"));
    let art = load_artifacts(&a.dir)?;
    let mut creds = if creds_path.exists() {
        CredentialStore::load(&creds_path)?
    } else {
        CredentialStore::new()
    };
    if let Some(token) = a.revoke {
        if creds.revoke(&token) {
            creds.save(&creds_path)?;
            println!("revoked");
            return Ok(());
        }
        return Err(CliError::validation("unknown token".to_string()));
    }
    let Some(domains) = a.domains else {
        return Err(CliError::validation("--domains or --revoke required".to_string()));
    };
    let ids: Result<Vec<DomainId>, _> = domains
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|d| DomainId::new(d.trim()))
        .collect();
    let set = DomainSet::new(ids.map_err(|e| CliError::validation(e.to_string()))?);
    let universe = art.map.universe();
    let token = creds
        .register(set, &universe)
        .map_err(|e| CliError::validation(e.to_string()))?;
    creds.save(&creds_path)?;
    println!("{token}");
    Ok(())
}

fn cmd_query(a: QueryArgs) -> Result<(), CliError> {
    let addr: SocketAddr =
        a.addr.parse().map_err(|_| CliError::validation(format!("bad address {:?}", a.addr)))?;
    let mut client = GatewayClient::connect(&addr)?;
    let resp = client.query(&a.id, &a.token, &a.query, a.max_new_tokens)?;
    println!("{}", serde_json::to_string(&resp).expect("response serializes"));
    if resp.error.is_some() {
        return Err(CliError::runtime("gateway returned an error".to_string()));
    }
    Ok(())
}

fn cmd_audit(a: AuditArgs) -> Result<(), CliError> {
    require_file(&a.corpus)?;
    let mut cfg = RunConfig::load(a.config.as_ref())?;
    cfg.alpha_ddi = a.alpha_ddi.or(cfg.alpha_ddi);
    cfg.alpha_ugi = a.alpha_ugi.or(cfg.alpha_ugi);
    cfg.k_percent = a.k_percent.or(cfg.k_percent);
    cfg.samples_per_side = a.samples.or(cfg.samples_per_side);
    cfg.ugi_samples = a.ugi_samples.or(cfg.ugi_samples);
    cfg.max_new_tokens = a.max_new_tokens.or(cfg.max_new_tokens);
    cfg.audit_seed = a.seed.or(cfg.audit_seed);

    let game_kind = GameKind::from_str(&a.game).map_err(CliError::validation)?;
    let attack = Attack::from_str(&a.attack).map_err(CliError::validation)?;
    let metric = MiaMetric::from_str(&a.metric).map_err(CliError::validation)?;
    let utility = UtilityMetric::from_str(&a.utility).map_err(CliError::validation)?;

    let train = corpus::load_corpus(&a.corpus)?;
    let art = load_artifacts(&a.dir)?;
    let engine = Engine::new(art.base, art.tokenizer, art.map, art.store);
    let mechanism = engine.mechanism();

    let universe = engine.map.universe();
    let all_pairs = enumerate_pairs(&universe, a.set_size)
        .map_err(|e| CliError::validation(e.to_string()))?;
    let (pairs, skipped) = resolvable_pairs(&engine, &all_pairs);
    if pairs.is_empty() {
        return Err(CliError::validation(
            "no auditable pair: every disjoint pair is undeclared for this mechanism".to_string(),
        ));
    }

    let game_cfg = GameConfig {
        pairs: pairs.clone(),
        attack,
        metric,
        alpha_ddi: cfg.alpha_ddi.unwrap_or(0.8),
        alpha_ugi: cfg.alpha_ugi.unwrap_or(0.2),
        samples_per_side: cfg.samples_per_side.unwrap_or(100),
        k_percent: cfg.k_percent.unwrap_or(10.0),
        utility,
        ugi_samples: cfg.ugi_samples.unwrap_or(100),
        max_new_tokens: cfg.max_new_tokens.unwrap_or(8),
        seed: cfg.audit_seed.unwrap_or(0),
    };

    // black-box plane: use the given gateway or spin one up for the audit
    let mut evidence = match &a.evidence {
        Some(p) => EvidenceLog::to_file(p)?,
        None => EvidenceLog::disabled(),
    };
    let outcomes = match &a.addr {
        Some(addr) => {
            let addr: SocketAddr = addr
                .parse()
                .map_err(|_| CliError::validation(format!("bad address {addr:?}")))?;
            run_game(&addr, &train, game_kind, &game_cfg, &mut evidence)?
        }
        None => {
            let gw = build_gateway(
                &a.dir,
                GatewayConfig { expose_provenance: false, audit_mode: true },
                None,
            )?;
            let handle = serve(Arc::new(gw), "127.0.0.1:0")
                .map_err(|e| CliError::runtime(e.to_string()))?;
            let result = run_game(&handle.addr(), &train, game_kind, &game_cfg, &mut evidence);
            handle.shutdown();
            result?
        }
    };

    // offline metric suite for the report
    let ddi_cfg = DdiConfig {
        samples_per_side: game_cfg.samples_per_side,
        k_percent: game_cfg.k_percent,
        seed: game_cfg.seed,
        ..Default::default()
    };
    let attacks = match &cfg.attacks {
        Some(list) => list
            .iter()
            .map(|s| Attack::from_str(s).map_err(CliError::validation))
            .collect::<Result<Vec<_>, _>>()?,
        None => Attack::ALL.to_vec(),
    };
    let metrics = match &cfg.metrics {
        Some(list) => list
            .iter()
            .map(|s| MiaMetric::from_str(s).map_err(CliError::validation))
            .collect::<Result<Vec<_>, _>>()?,
        None => vec![MiaMetric::AucRoc, MiaMetric::TprAtFpr(0.01), MiaMetric::TprAtFpr(0.05)],
    };
    let ddi_results = ddi_suite(&engine, &train, &pairs, &attacks, &metrics, &ddi_cfg)?;
    let mut ugi_results = Vec::new();
    for u in [UtilityMetric::Verbatim, UtilityMetric::Ngram] {
        ugi_results.push(ugi(
            &engine,
            &train,
            &pairs,
            &UgiConfig {
                utility: u,
                samples: game_cfg.ugi_samples,
                max_new_tokens: game_cfg.max_new_tokens,
                seed: game_cfg.seed,
            },
        )?);
    }

    println!("mechanism: {mechanism}");
    println!("pairs audited: {} (skipped undeclared: {})", pairs.len(), skipped.len());
    println!("{:<22} {:>9} {:>7} verdict", "game", "value", "alpha");
    let mut verdicts = Vec::new();
    for o in &outcomes {
        println!(
            "{:<22} {:>9.4} {:>7.2} {}",
            o.game,
            o.value,
            o.alpha,
            if o.pass { "PASS" } else { "FAIL" }
        );
        verdicts.push(GameVerdict {
            game: o.game.clone(),
            value: o.value,
            alpha: o.alpha,
            pass: o.pass,
            detail: o.detail.clone(),
        });
    }

    if let Some(report_path) = &a.report {
        let (model_p, _, adapters_p, map_p) = artifact_paths(&a.dir);
        let report = AuditReport {
            mechanism: mechanism.to_string(),
            model_digest: checkpoint::digest_file(&model_p)?,
            adapters_digest: checkpoint::digest_file(&adapters_p)?,
            map_digest: checkpoint::digest_file(&map_p)?,
            ddi: ddi_results,
            ugi: ugi_results,
            verdicts,
            skipped_pairs: skipped.iter().map(|p| p.key()).collect(),
            config: ReportConfig {
                k_percent: game_cfg.k_percent,
                deflate_level: permllm_core::mia::DEFLATE_LEVEL,
                samples_per_side: game_cfg.samples_per_side,
                ugi_samples: game_cfg.ugi_samples,
                max_new_tokens: game_cfg.max_new_tokens,
                audit_seed: game_cfg.seed,
                alpha_ddi: game_cfg.alpha_ddi,
                alpha_ugi: game_cfg.alpha_ugi,
                std_convention: "population".into(),
                nll_units: "nats".into(),
                minkpp_stats: "probability-weighted".into(),
            },
        };
        audit::write_report(&report, report_path)?;
        println!("report written to {}", report_path.display());
    }
    if outcomes.iter().any(|o| !o.pass) {
        // a failed verdict is still a successful audit run
        println!("one or more games FAILED their threshold");
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<(), CliError> {
    require_file(&a.report)?;
    let report = audit::read_report(&a.report)?;
    println!("mechanism: {}", report.mechanism);
    println!("model digest:    {}", report.model_digest);
    println!("adapters digest: {}", report.adapters_digest);
    println!("map digest:      {}", report.map_digest);
    println!("\nDDI ({} pairs per row):", report.ddi.first().map_or(0, |r| r.pair_count));
    println!("{:<8} {:<12} {:>8} {:>8}", "attack", "metric", "mean", "std");
    for r in &report.ddi {
        println!(
            "{:<8} {:<12} {:>8.4} {:>8.4}",
            r.attack.map(|a| a.name()).unwrap_or("-"),
            r.metric,
            r.mean,
            r.std
        );
    }
    println!("\nUGI:");
    for r in &report.ugi {
        println!("{:<12} {:>8.4} {:>8.4}", r.metric, r.mean, r.std);
    }
    println!("\nverdicts:");
    for v in &report.verdicts {
        println!(
            "{:<22} value {:.4} alpha {:.2} -> {} ({})",
            v.game,
            v.value,
            v.alpha,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    Ok(())
}
