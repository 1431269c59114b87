//! Access-control mechanisms: the domain->adapter map, steered training,
//! SVD adapter merging, selection, and the prompt-prefix baseline.
//!
//! The map is the single authority for which adapter a domain set may
//! touch. Training steers every batch to the adapter the map names, and the
//! steering log keeps a per-step record so an audit can replay the claim.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::domain::{DomainId, DomainSet};
use crate::model::{AdapterSelection, BaseWeights, LoraAdapter, ModelConfig};
use crate::tensor::{svd_truncated, Matrix};
use crate::tokenizer::Tokenizer;
use crate::train::{train_adapter, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum MechanismError {
    #[error("combination references unknown domain: {0}")]
    UnknownDomain(DomainId),
    #[error("unknown combination: {0}")]
    UnknownCombination(String),
    #[error("empty combination declared")]
    EmptyCombination,
    #[error("domain without data: {0}")]
    DomainWithoutData(DomainId),
    #[error("merge needs at least one source adapter")]
    NoSources,
    #[error("merge weights must be positive and match source count")]
    BadWeights,
    #[error("merge sources disagree on targets or shapes: {0}")]
    ShapeMismatch(String),
    #[error("output rank {0} exceeds min dimension {1}")]
    RankTooLarge(usize, usize),
    #[error("adapter {0} not found in store")]
    AdapterMissing(String),
    #[error("map io: {0}")]
    Io(#[from] std::io::Error),
    #[error("map file malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    Activate,
    Merge,
    Union,
    PromptBaseline,
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mechanism::Activate => f.write_str("activate"),
            Mechanism::Merge => f.write_str("merge"),
            Mechanism::Union => f.write_str("union"),
            Mechanism::PromptBaseline => f.write_str("prompt-baseline"),
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "activate" => Ok(Mechanism::Activate),
            "merge" => Ok(Mechanism::Merge),
            "union" => Ok(Mechanism::Union),
            "prompt-baseline" => Ok(Mechanism::PromptBaseline),
            other => Err(format!("unknown mechanism {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub domains: DomainSet,
    pub adapter: String,
}

/// The mechanism's domain-set -> adapter map. Entries are append-only; the
/// version counter bumps on every extension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAdapterMap {
    pub mechanism: Mechanism,
    pub version: u64,
    pub entries: Vec<MapEntry>,
}

pub const SHARED_ADAPTER_ID: &str = "shared";

pub fn singleton_adapter_id(d: &DomainId) -> String {
    format!("lora-{d}")
}

fn combo_adapter_id(mechanism: Mechanism, set: &DomainSet) -> String {
    match mechanism {
        Mechanism::Activate => format!("avg-{}", set.key()),
        Mechanism::Merge => format!("merge-{}", set.key()),
        Mechanism::Union => format!("union-{}", set.key()),
        Mechanism::PromptBaseline => SHARED_ADAPTER_ID.to_string(),
    }
}

impl DomainAdapterMap {
    /// The domain universe: every domain named by any entry.
    pub fn universe(&self) -> Vec<DomainId> {
        let mut out: Vec<DomainId> = self
            .entries
            .iter()
            .flat_map(|e| e.domains.members().iter().cloned())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn lookup(&self, set: &DomainSet) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| &e.domains == set)
            .map(|e| e.adapter.as_str())
    }

    /// Appends an entry for a new combination; never rewrites.
    pub fn declare_combination(&mut self, set: DomainSet) -> Result<String, MechanismError> {
        if set.is_empty() {
            return Err(MechanismError::EmptyCombination);
        }
        let universe = self.universe();
        for d in set.members() {
            if !universe.contains(d) {
                return Err(MechanismError::UnknownDomain(d.clone()));
            }
        }
        if let Some(existing) = self.lookup(&set) {
            return Ok(existing.to_string());
        }
        let id = combo_adapter_id(self.mechanism, &set);
        self.entries.push(MapEntry { domains: set, adapter: id.clone() });
        self.version += 1;
        Ok(id)
    }

    pub fn save(&self, path: &Path) -> Result<(), MechanismError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| MechanismError::Malformed(e.to_string()))?;
        crate::fsutil::write_atomic(path, json.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MechanismError> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| MechanismError::Malformed(e.to_string()))
    }
}

/// Adapters keyed by id. Each adapter owns its parameters; mutating one can
/// never touch another's bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterStore {
    adapters: BTreeMap<String, LoraAdapter>,
}

impl AdapterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, adapter: LoraAdapter) {
        self.adapters.insert(adapter.id.clone(), adapter);
    }

    pub fn get(&self, id: &str) -> Option<&LoraAdapter> {
        self.adapters.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut LoraAdapter> {
        self.adapters.get_mut(id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.adapters.keys().cloned().collect()
    }

    pub fn all(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    pub fn save(&self, path: &Path) -> Result<(), crate::checkpoint::CheckpointError> {
        let list: Vec<LoraAdapter> = self.adapters.values().cloned().collect();
        crate::checkpoint::save_adapters(path, &list)
    }

    pub fn load(path: &Path) -> Result<Self, crate::checkpoint::CheckpointError> {
        let mut store = Self::new();
        for a in crate::checkpoint::load_adapters(path)? {
            store.insert(a);
        }
        Ok(store)
    }
}

/// Builds the map plus its freshly initialized adapters.
///
/// Singletons always get one zero-initialized adapter each (the baseline
/// instead gets a single shared adapter covering the full universe).
/// Declared combinations add entries; union combinations also get fresh
/// adapters now, merge combinations stay placeholders until `merge_adapters`
/// fills them in.
pub fn build_map(
    domains: &[DomainId],
    declared_combinations: &[DomainSet],
    mechanism: Mechanism,
    config: &ModelConfig,
) -> Result<(DomainAdapterMap, AdapterStore), MechanismError> {
    let mut sorted: Vec<DomainId> = domains.to_vec();
    sorted.sort();
    sorted.dedup();
    for combo in declared_combinations {
        if combo.is_empty() {
            return Err(MechanismError::EmptyCombination);
        }
        for d in combo.members() {
            if !sorted.contains(d) {
                return Err(MechanismError::UnknownDomain(d.clone()));
            }
        }
    }

    let mut entries = Vec::new();
    let mut store = AdapterStore::new();
    match mechanism {
        Mechanism::PromptBaseline => {
            let full = DomainSet::new(sorted.clone());
            entries.push(MapEntry { domains: full, adapter: SHARED_ADAPTER_ID.into() });
            store.insert(LoraAdapter::init(SHARED_ADAPTER_ID, config));
        }
        _ => {
            for d in &sorted {
                let id = singleton_adapter_id(d);
                entries.push(MapEntry {
                    domains: DomainSet::singleton(d.clone()),
                    adapter: id.clone(),
                });
                store.insert(LoraAdapter::init(id, config));
            }
            for combo in declared_combinations {
                if combo.len() < 2 {
                    continue; // singletons already covered
                }
                let id = combo_adapter_id(mechanism, combo);
                entries.push(MapEntry { domains: combo.clone(), adapter: id.clone() });
                if mechanism == Mechanism::Union {
                    store.insert(LoraAdapter::init(id, config));
                }
            }
        }
    }
    Ok((DomainAdapterMap { mechanism, version: 1, entries }, store))
}

/// One optimizer step attributed to the adapter it was steered to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteerRecord {
    pub step: usize,
    pub scope: DomainSet,
    pub adapter: String,
}

#[derive(Debug, Clone, Default)]
pub struct TrainAllReport {
    pub steering: Vec<SteerRecord>,
    pub reports: BTreeMap<String, TrainReport>,
    pub dataset_sizes: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Skip mapped domains that have no records instead of failing. Their
    /// adapters stay exactly as initialized.
    pub allow_missing_domains: bool,
}

/// Query prefix used by the prompt baseline. The same prefix tags records
/// during baseline fine-tuning.
pub fn prompt_prefix(set: &DomainSet) -> String {
    if set.is_empty() {
        "use domain none: ".to_string()
    } else {
        let ids: Vec<&str> = set.members().iter().map(|d| d.as_str()).collect();
        format!("use domain {}: ", ids.join(" "))
    }
}

pub fn prompt_baseline(set: &DomainSet, query: &str) -> String {
    format!("{}{}", prompt_prefix(set), query)
}

/// Text the baseline's shared adapter trains on for one record.
pub fn baseline_record_text(record: &crate::corpus::Record) -> String {
    let set = DomainSet::singleton(record.domain.clone());
    format!("{}{}", prompt_prefix(&set), record.full_text())
}

/// Every text a tokenizer must cover for a corpus under a mechanism.
/// The baseline adds its prefix vocabulary (including every domain id and
/// the `none` sentinel); the other mechanisms train on raw record text.
pub fn vocabulary_texts(corpus: &Corpus, mechanism: Mechanism) -> Vec<String> {
    let mut texts = corpus.all_texts();
    if mechanism == Mechanism::PromptBaseline {
        for r in &corpus.records {
            texts.push(baseline_record_text(r));
        }
        texts.push("use domain none: ".to_string());
    }
    texts
}

/// (prompt, answer) pairs become BOS prompt answer EOS sequences with the
/// answer boundary marked for prompt-weighted loss.
fn tokenize_examples(
    tokenizer: &Tokenizer,
    pairs: &[(String, String)],
) -> Vec<crate::grad::TrainExample> {
    pairs
        .iter()
        .map(|(prompt, answer)| {
            let mut tokens = vec![tokenizer.bos_id()];
            tokens.extend(tokenizer.tokenize(prompt));
            let answer_from = tokens.len();
            tokens.extend(tokenizer.tokenize(answer));
            tokens.push(tokenizer.eos_id());
            crate::grad::TrainExample { tokens, answer_from }
        })
        .collect()
}

fn derived_config(config: &TrainConfig, label: &str) -> TrainConfig {
    let mut cfg = config.clone();
    cfg.seed = crate::rng::SplitMix64::new(config.seed).split("train").split(label).next_u64();
    cfg
}

/// Trains every adapter the map calls for, steering each domain's data only
/// to its own adapter. Singleton adapters see one domain; union combination
/// adapters see the concatenation of their members' records; the baseline's
/// shared adapter sees every record with its domain prefix.
pub fn train_all(
    base: &BaseWeights,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    map: &DomainAdapterMap,
    store: &mut AdapterStore,
    config: &TrainConfig,
    options: TrainOptions,
) -> Result<TrainAllReport, MechanismError> {
    let mut report = TrainAllReport::default();
    let mut global_step = 0usize;

    let mut train_one = |adapter_id: &str,
                         scope: DomainSet,
                         pairs: Vec<(String, String)>,
                         store: &mut AdapterStore,
                         report: &mut TrainAllReport|
     -> Result<(), MechanismError> {
        let examples = tokenize_examples(tokenizer, &pairs);
        let adapter = store
            .get_mut(adapter_id)
            .ok_or_else(|| MechanismError::AdapterMissing(adapter_id.to_string()))?;
        let cfg = derived_config(config, adapter_id);
        let train_report = train_adapter(base, &examples, adapter, &cfg)?;
        for _ in 0..train_report.steps {
            report.steering.push(SteerRecord {
                step: global_step,
                scope: scope.clone(),
                adapter: adapter_id.to_string(),
            });
            global_step += 1;
        }
        report.dataset_sizes.insert(adapter_id.to_string(), pairs.len());
        report.reports.insert(adapter_id.to_string(), train_report);
        Ok(())
    };

    match map.mechanism {
        Mechanism::PromptBaseline => {
            let pairs: Vec<(String, String)> = corpus
                .records
                .iter()
                .map(|r| {
                    let set = DomainSet::singleton(r.domain.clone());
                    (prompt_baseline(&set, &r.prompt), r.answer.clone())
                })
                .collect();
            if pairs.is_empty() {
                return Err(MechanismError::DomainWithoutData(
                    map.universe().first().cloned().expect("map has entries"),
                ));
            }
            let full = DomainSet::new(map.universe());
            train_one(SHARED_ADAPTER_ID, full, pairs, store, &mut report)?;
        }
        _ => {
            for entry in &map.entries {
                if entry.domains.len() == 1 {
                    let d = &entry.domains.members()[0];
                    let pairs: Vec<(String, String)> = corpus
                        .records_of(d)
                        .iter()
                        .map(|r| (r.prompt.clone(), r.answer.clone()))
                        .collect();
                    if pairs.is_empty() {
                        if options.allow_missing_domains {
                            continue;
                        }
                        return Err(MechanismError::DomainWithoutData(d.clone()));
                    }
                    train_one(&entry.adapter, entry.domains.clone(), pairs, store, &mut report)?;
                } else if map.mechanism == Mechanism::Union {
                    let pairs: Vec<(String, String)> = corpus
                        .records_of_set(&entry.domains)
                        .iter()
                        .map(|r| (r.prompt.clone(), r.answer.clone()))
                        .collect();
                    if pairs.is_empty() {
                        if options.allow_missing_domains {
                            continue;
                        }
                        return Err(MechanismError::DomainWithoutData(
                            entry.domains.members()[0].clone(),
                        ));
                    }
                    train_one(&entry.adapter, entry.domains.clone(), pairs, store, &mut report)?;
                }
                // merge combinations are filled in by merge_adapters later
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct MergeSpec {
    pub sources: Vec<String>,
    /// Per-source weights; `None` means uniform 1/k.
    pub weights: Option<Vec<f64>>,
    /// Rank of the merged adapter; `None` keeps the sources' rank.
    pub output_rank: Option<usize>,
    pub output_id: String,
}

/// Merges source adapters into one: per target, the weighted sum of dense
/// deltas is factored back to low rank through a truncated SVD, with square
/// roots of the singular values split between the two factors. The merged
/// adapter's scaling is folded to 1 (alpha = rank).
pub fn merge_adapters(
    spec: &MergeSpec,
    sources: &[&LoraAdapter],
) -> Result<LoraAdapter, MechanismError> {
    if sources.is_empty() || spec.sources.len() != sources.len() {
        return Err(MechanismError::NoSources);
    }
    let weights: Vec<f64> = match &spec.weights {
        Some(w) => {
            if w.len() != sources.len() || !w.iter().all(|&x| x > 0.0) {
                return Err(MechanismError::BadWeights);
            }
            w.clone()
        }
        None => vec![1.0 / sources.len() as f64; sources.len()],
    };

    let first = sources[0];
    for s in sources.iter().skip(1) {
        if s.targets.len() != first.targets.len() {
            return Err(MechanismError::ShapeMismatch(format!(
                "{} has {} targets, {} has {}",
                first.id,
                first.targets.len(),
                s.id,
                s.targets.len()
            )));
        }
        for (a, b) in first.targets.iter().zip(&s.targets) {
            if a.layer != b.layer || a.role != b.role || a.a.cols != b.a.cols || a.b.rows != b.b.rows
            {
                return Err(MechanismError::ShapeMismatch(format!(
                    "layer {} role {:?}",
                    a.layer, a.role
                )));
            }
        }
    }

    let out_rank = spec.output_rank.unwrap_or(first.rank);
    let mut targets = Vec::with_capacity(first.targets.len());
    for ti in 0..first.targets.len() {
        let (layer, role) = (first.targets[ti].layer, first.targets[ti].role);
        let d_out = first.targets[ti].b.rows;
        let d_in = first.targets[ti].a.cols;
        if out_rank > d_out.min(d_in) {
            return Err(MechanismError::RankTooLarge(out_rank, d_out.min(d_in)));
        }
        let mut delta = Matrix::zeros(d_out, d_in);
        for (src, &w) in sources.iter().zip(&weights) {
            let t = &src.targets[ti];
            let dense = t.b.matmul(&t.a);
            delta.add_assign_scaled(&dense, w * src.scaling());
        }
        let svd = svd_truncated(&delta, out_rank);
        let mut b = Matrix::zeros(d_out, out_rank);
        let mut a = Matrix::zeros(out_rank, d_in);
        for j in 0..out_rank {
            let root = svd.sigma[j].max(0.0).sqrt();
            for i in 0..d_out {
                *b.at_mut(i, j) = svd.u.at(i, j) * root;
            }
            for i in 0..d_in {
                *a.at_mut(j, i) = svd.vt.at(j, i) * root;
            }
        }
        targets.push(crate::model::LoraTarget { layer, role, a, b });
    }
    Ok(LoraAdapter {
        id: spec.output_id.clone(),
        rank: out_rank,
        alpha: out_rank as f64, // scaling folded to 1
        targets,
    })
}

/// Resolves the adapters serving a domain set.
///
/// * empty set -> no adapters (base model only)
/// * activate -> the singleton adapters of the set, averaged when several
/// * merge / union -> exactly the adapter mapped for the canonical set;
///   an undeclared combination is a hard error, never a fallback
/// * prompt baseline -> always the shared adapter
pub fn selection_for(
    map: &DomainAdapterMap,
    set: &DomainSet,
) -> Result<AdapterSelection, MechanismError> {
    if set.is_empty() {
        return Ok(AdapterSelection::None);
    }
    let universe = map.universe();
    for d in set.members() {
        if !universe.contains(d) {
            return Err(MechanismError::UnknownDomain(d.clone()));
        }
    }
    match map.mechanism {
        Mechanism::PromptBaseline => Ok(AdapterSelection::Single(SHARED_ADAPTER_ID.into())),
        Mechanism::Activate => {
            let mut ids = Vec::with_capacity(set.len());
            for d in set.members() {
                let singleton = DomainSet::singleton(d.clone());
                let id = map
                    .lookup(&singleton)
                    .ok_or_else(|| MechanismError::UnknownCombination(singleton.key()))?;
                ids.push(id.to_string());
            }
            if ids.len() == 1 {
                Ok(AdapterSelection::Single(ids.pop().expect("one id")))
            } else {
                Ok(AdapterSelection::Averaged(ids))
            }
        }
        Mechanism::Merge | Mechanism::Union => map
            .lookup(set)
            .map(|id| AdapterSelection::Single(id.to_string()))
            .ok_or_else(|| MechanismError::UnknownCombination(set.key())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusMode, CorpusSpec};
    use crate::model::init_model;
    use crate::rng::SplitMix64;

    fn d(s: &str) -> DomainId {
        DomainId::new(s).unwrap()
    }

    fn set(ids: &[&str]) -> DomainSet {
        DomainSet::new(ids.iter().map(|s| d(s)).collect())
    }

    fn tiny_model_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            context_len: 32,
            lora_rank: 4,
            lora_alpha: 8.0,
            seed: 11,
        }
    }

    #[test]
    fn build_map_entry_counts() {
        let cfg = tiny_model_config(32);
        let doms = vec![d("d0"), d("d1"), d("d2")];
        let (m, _) = build_map(&doms, &[], Mechanism::Activate, &cfg).unwrap();
        assert_eq!(m.entries.len(), 3);
        let (m, _) = build_map(&doms, &[set(&["d0", "d1"])], Mechanism::Merge, &cfg).unwrap();
        assert_eq!(m.entries.len(), 4);
        assert!(build_map(&doms, &[set(&["d0", "dX"])], Mechanism::Merge, &cfg).is_err());
    }

    #[test]
    fn union_combos_get_adapters_but_merge_placeholders_do_not() {
        let cfg = tiny_model_config(32);
        let doms = vec![d("d0"), d("d1"), d("d2")];
        let combos = [set(&["d0", "d1"])];
        let (_, store) = build_map(&doms, &combos, Mechanism::Union, &cfg).unwrap();
        assert!(store.get("union-d0+d1").is_some());
        let (_, store) = build_map(&doms, &combos, Mechanism::Merge, &cfg).unwrap();
        assert!(store.get("merge-d0+d1").is_none());
        assert!(store.get("lora-d0").is_some());
    }

    #[test]
    fn selection_rules() {
        let cfg = tiny_model_config(32);
        let doms = vec![d("d0"), d("d1"), d("d2")];
        let combos = [set(&["d0", "d1"])];

        let (m, _) = build_map(&doms, &combos, Mechanism::Activate, &cfg).unwrap();
        assert_eq!(
            selection_for(&m, &set(&["d2"])).unwrap(),
            AdapterSelection::Single("lora-d2".into())
        );
        assert_eq!(
            selection_for(&m, &set(&["d0", "d2"])).unwrap(),
            AdapterSelection::Averaged(vec!["lora-d0".into(), "lora-d2".into()])
        );
        assert_eq!(selection_for(&m, &DomainSet::empty()).unwrap(), AdapterSelection::None);

        let (m, _) = build_map(&doms, &combos, Mechanism::Merge, &cfg).unwrap();
        assert_eq!(
            selection_for(&m, &set(&["d0", "d1"])).unwrap(),
            AdapterSelection::Single("merge-d0+d1".into())
        );
        assert!(matches!(
            selection_for(&m, &set(&["d0", "d2"])),
            Err(MechanismError::UnknownCombination(_))
        ));

        let (m, _) = build_map(&doms, &combos, Mechanism::Union, &cfg).unwrap();
        assert!(matches!(
            selection_for(&m, &set(&["d0", "d2"])),
            Err(MechanismError::UnknownCombination(_))
        ));

        let (m, _) = build_map(&doms, &[], Mechanism::PromptBaseline, &cfg).unwrap();
        assert_eq!(
            selection_for(&m, &set(&["d1"])).unwrap(),
            AdapterSelection::Single(SHARED_ADAPTER_ID.into())
        );
    }

    #[test]
    fn prompt_prefix_format() {
        assert_eq!(prompt_baseline(&set(&["d1"]), "q"), "use domain d1: q");
        assert_eq!(prompt_baseline(&set(&["d1", "d0"]), "q"), "use domain d0 d1: q");
        assert_eq!(prompt_baseline(&DomainSet::empty(), "q"), "use domain none: q");
    }

    #[test]
    fn map_json_round_trip() {
        let cfg = tiny_model_config(32);
        let doms = vec![d("d0"), d("d1")];
        let (mut m, _) = build_map(&doms, &[], Mechanism::Merge, &cfg).unwrap();
        m.declare_combination(set(&["d0", "d1"])).unwrap();
        assert_eq!(m.version, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.json");
        m.save(&p).unwrap();
        let back = DomainAdapterMap::load(&p).unwrap();
        assert_eq!(m, back);
        // pinned wire keys
        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(raw["mechanism"], "merge");
        assert_eq!(raw["version"], 2);
        assert_eq!(raw["entries"][0]["domains"][0], "d0");
        assert!(raw["entries"][0]["adapter"].is_string());
    }

    fn randomized(adapter: &mut LoraAdapter, seed: u64, scale: f64) {
        let mut rng = SplitMix64::new(seed);
        for t in adapter.targets.iter_mut() {
            t.a = Matrix::gaussian(t.a.rows, t.a.cols, scale, &mut rng);
            t.b = Matrix::gaussian(t.b.rows, t.b.cols, scale, &mut rng);
        }
    }

    #[test]
    fn single_source_merge_reconstructs() {
        let cfg = tiny_model_config(32);
        let mut a = LoraAdapter::init("lora-d0", &cfg);
        randomized(&mut a, 3, 0.4);
        let spec = MergeSpec {
            sources: vec![a.id.clone()],
            weights: Some(vec![1.0]),
            output_rank: None,
            output_id: "merge-d0".into(),
        };
        let merged = merge_adapters(&spec, &[&a]).unwrap();
        assert_eq!(merged.scaling(), 1.0);
        for (ti, t) in merged.targets.iter().enumerate() {
            let got = t.b.matmul(&t.a); // scaling 1
            let want = a.targets[ti].b.matmul(&a.targets[ti].a).scale(a.scaling());
            let err = got.sub(&want).frobenius_norm();
            assert!(err <= 1e-9, "target {ti}: err {err}");
        }
    }

    #[test]
    fn opposite_adapters_cancel() {
        let cfg = tiny_model_config(32);
        let mut a = LoraAdapter::init("lora-d0", &cfg);
        randomized(&mut a, 5, 0.4);
        let mut neg = a.clone();
        neg.id = "lora-neg".into();
        for t in neg.targets.iter_mut() {
            for v in t.b.data.iter_mut() {
                *v = -*v;
            }
        }
        let spec = MergeSpec {
            sources: vec![a.id.clone(), neg.id.clone()],
            weights: None,
            output_rank: None,
            output_id: "merge-zero".into(),
        };
        let merged = merge_adapters(&spec, &[&a, &neg]).unwrap();
        for t in &merged.targets {
            assert!(t.b.matmul(&t.a).frobenius_norm() <= 1e-9);
        }
    }

    #[test]
    fn merge_is_deterministic_and_a_pure_function_of_members() {
        let cfg = tiny_model_config(32);
        let mut a = LoraAdapter::init("lora-d0", &cfg);
        let mut b = LoraAdapter::init("lora-d1", &cfg);
        randomized(&mut a, 7, 0.3);
        randomized(&mut b, 8, 0.3);
        let spec = MergeSpec {
            sources: vec![a.id.clone(), b.id.clone()],
            weights: None,
            output_rank: None,
            output_id: "merge-d0+d1".into(),
        };
        let m1 = merge_adapters(&spec, &[&a, &b]).unwrap();
        // an unrelated adapter appearing or changing cannot affect the merge
        let mut c = LoraAdapter::init("lora-d2", &cfg);
        randomized(&mut c, 9, 0.3);
        let m2 = merge_adapters(&spec, &[&a, &b]).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn merge_beats_random_rank_k_factorizations() {
        let cfg = tiny_model_config(32);
        let mut a = LoraAdapter::init("lora-d0", &cfg);
        let mut b = LoraAdapter::init("lora-d1", &cfg);
        randomized(&mut a, 10, 0.3);
        randomized(&mut b, 11, 0.3);
        let spec = MergeSpec {
            sources: vec![a.id.clone(), b.id.clone()],
            weights: None,
            output_rank: Some(cfg.lora_rank),
            output_id: "merge-d0+d1".into(),
        };
        let merged = merge_adapters(&spec, &[&a, &b]).unwrap();
        let mut rng = SplitMix64::new(21);
        for (ti, t) in merged.targets.iter().enumerate() {
            let want = {
                let ta = &a.targets[ti];
                let tb = &b.targets[ti];
                let mut delta = ta.b.matmul(&ta.a).scale(0.5 * a.scaling());
                delta.add_assign_scaled(&tb.b.matmul(&tb.a), 0.5 * b.scaling());
                delta
            };
            let best = t.b.matmul(&t.a).sub(&want).frobenius_norm();
            for _ in 0..100 {
                let rb = Matrix::gaussian(t.b.rows, cfg.lora_rank, 0.3, &mut rng);
                let ra = Matrix::gaussian(cfg.lora_rank, t.a.cols, 0.3, &mut rng);
                let err = rb.matmul(&ra).sub(&want).frobenius_norm();
                assert!(best <= err + 1e-12);
            }
        }
    }

    #[test]
    fn merge_rejects_bad_inputs() {
        let cfg = tiny_model_config(32);
        let a = LoraAdapter::init("a", &cfg);
        let spec = MergeSpec {
            sources: vec!["a".into()],
            weights: Some(vec![1.0, 2.0]),
            output_rank: None,
            output_id: "m".into(),
        };
        assert!(matches!(merge_adapters(&spec, &[&a]), Err(MechanismError::BadWeights)));
        let spec = MergeSpec {
            sources: vec!["a".into()],
            weights: None,
            output_rank: Some(999),
            output_id: "m".into(),
        };
        assert!(matches!(merge_adapters(&spec, &[&a]), Err(MechanismError::RankTooLarge(_, _))));
        let other_cfg = ModelConfig { d_model: 32, ..tiny_model_config(32) };
        let b = LoraAdapter::init("b", &other_cfg);
        let spec = MergeSpec {
            sources: vec!["a".into(), "b".into()],
            weights: None,
            output_rank: None,
            output_id: "m".into(),
        };
        assert!(matches!(merge_adapters(&spec, &[&a, &b]), Err(MechanismError::ShapeMismatch(_))));
    }

    fn small_corpus(seed: u64) -> Corpus {
        generate_corpus(&CorpusSpec {
            n_domains: 3,
            records_per_domain: 12,
            mode: CorpusMode::Disjoint,
            seed,
        })
        .unwrap()
    }

    fn quick_train_config() -> TrainConfig {
        TrainConfig { epochs: 1, batch_size: 6, learning_rate: 1e-2, ..Default::default() }
    }

    #[test]
    fn steering_log_agrees_with_map() {
        let corpus = small_corpus(1);
        let tok = Tokenizer::from_texts(corpus.all_texts().iter().map(|s| s.as_str())).unwrap();
        let cfg = tiny_model_config(tok.vocab_size());
        let base = init_model(&cfg).unwrap();
        let (map, mut store) = build_map(&corpus.domains, &[], Mechanism::Activate, &cfg).unwrap();
        let report = train_all(
            &base,
            &tok,
            &corpus,
            &map,
            &mut store,
            &quick_train_config(),
            TrainOptions::default(),
        )
        .unwrap();
        assert!(!report.steering.is_empty());
        for s in &report.steering {
            assert_eq!(map.lookup(&s.scope), Some(s.adapter.as_str()));
        }
    }

    #[test]
    fn union_combo_trains_on_concatenated_domains() {
        let corpus = small_corpus(2);
        let tok = Tokenizer::from_texts(corpus.all_texts().iter().map(|s| s.as_str())).unwrap();
        let cfg = tiny_model_config(tok.vocab_size());
        let base = init_model(&cfg).unwrap();
        let combo = set(&["d0", "d1"]);
        let (map, mut store) =
            build_map(&corpus.domains, &[combo], Mechanism::Union, &cfg).unwrap();
        let report = train_all(
            &base,
            &tok,
            &corpus,
            &map,
            &mut store,
            &quick_train_config(),
            TrainOptions::default(),
        )
        .unwrap();
        assert_eq!(report.dataset_sizes["union-d0+d1"], 24);
        assert_eq!(report.dataset_sizes["lora-d0"], 12);
    }

    #[test]
    fn withheld_domain_leaves_its_adapter_untouched() {
        let corpus = small_corpus(3);
        let tok = Tokenizer::from_texts(corpus.all_texts().iter().map(|s| s.as_str())).unwrap();
        let cfg = tiny_model_config(tok.vocab_size());
        let base = init_model(&cfg).unwrap();
        let (map, mut store) = build_map(&corpus.domains, &[], Mechanism::Activate, &cfg).unwrap();
        let d1_before = store.get("lora-d1").unwrap().clone();

        let withheld = Corpus {
            domains: corpus.domains.clone(),
            records: corpus.records.iter().filter(|r| r.domain != d("d1")).cloned().collect(),
            mode: corpus.mode,
            seed: corpus.seed,
        };
        // strict mode refuses
        assert!(matches!(
            train_all(
                &base,
                &tok,
                &withheld,
                &map,
                &mut store,
                &quick_train_config(),
                TrainOptions::default(),
            ),
            Err(MechanismError::DomainWithoutData(_))
        ));
        // opting in skips the missing domain and leaves its adapter alone
        let report = train_all(
            &base,
            &tok,
            &withheld,
            &map,
            &mut store,
            &quick_train_config(),
            TrainOptions { allow_missing_domains: true },
        )
        .unwrap();
        assert_eq!(store.get("lora-d1").unwrap(), &d1_before);
        assert!(report.reports.contains_key("lora-d0"));
        assert!(!report.reports.contains_key("lora-d1"));
    }

    #[test]
    fn perturbing_one_domain_never_touches_sibling_adapters() {
        let corpus = small_corpus(4);
        let tok = Tokenizer::from_texts(corpus.all_texts().iter().map(|s| s.as_str())).unwrap();
        let cfg = tiny_model_config(tok.vocab_size());
        let base = init_model(&cfg).unwrap();

        let run = |c: &Corpus| {
            let (map, mut store) = build_map(&c.domains, &[], Mechanism::Activate, &cfg).unwrap();
            train_all(&base, &tok, c, &map, &mut store, &quick_train_config(), TrainOptions::default())
                .unwrap();
            store
        };
        let store_a = run(&corpus);

        let mut perturbed = corpus.clone();
        let idx = perturbed.records.iter().position(|r| r.domain == d("d0")).unwrap();
        let flipped =
            if perturbed.records[idx].answer == "it is v1009" { "it is v1008" } else { "it is v1009" };
        perturbed.records[idx].answer = flipped.into();
        let store_b = run(&perturbed);

        assert_eq!(store_a.get("lora-d1"), store_b.get("lora-d1"));
        assert_eq!(store_a.get("lora-d2"), store_b.get("lora-d2"));
        assert_ne!(store_a.get("lora-d0"), store_b.get("lora-d0"));
    }
}
