//! Access-control auditing: domain distinguishability (DDI), utility gaps
//! (UGI), and the report format.
//!
//! DDI runs membership inference over ordered disjoint domain-set pairs:
//! members come from the target set's training records, non-members from
//! the foil's, and both are scored with the model activated for the target.
//! UGI replays the target's training prompts under the right and the wrong
//! activation and aggregates the absolute utility difference.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Record};
use crate::domain::{DomainId, DomainSet};
use crate::gateway::{Engine, GatewayError};
use crate::mia::{
    auc_roc, score_loss, score_mink, score_minkpp, score_ref, score_zlib, tpr_at_fpr, Attack,
    MiaError, ScorePair, TokenTrace,
};
use crate::model::StatWeighting;
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("no valid pair: {0}")]
    NoValidPairs(String),
    #[error("insufficient samples for domain set {0}")]
    InsufficientSamples(String),
    #[error("audit needs at least one result")]
    NoResults,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Mia(#[from] MiaError),
    #[error("audit io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report malformed: {0}")]
    Malformed(String),
}

/// Ordered pair of disjoint domain sets: the target supplies member
/// queries, the foil supplies the non-member side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPair {
    pub target: DomainSet,
    pub foil: DomainSet,
}

impl DomainPair {
    pub fn key(&self) -> String {
        format!("{}|{}", self.target.key(), self.foil.key())
    }
}

/// All ordered pairs of size-k subsets with empty intersection, in
/// lexicographic order of (target, foil) canonical keys.
pub fn enumerate_pairs(
    universe: &[DomainId],
    set_size: usize,
) -> Result<Vec<DomainPair>, AuditError> {
    if set_size == 0 || 2 * set_size > universe.len() {
        return Err(AuditError::NoValidPairs(format!(
            "set size {set_size} over {} domains cannot form disjoint pairs",
            universe.len()
        )));
    }
    let mut sorted = universe.to_vec();
    sorted.sort();
    let subsets = k_subsets(&sorted, set_size);
    let mut out = Vec::new();
    for a in &subsets {
        for b in &subsets {
            if a.is_disjoint(b) {
                out.push(DomainPair { target: a.clone(), foil: b.clone() });
            }
        }
    }
    if out.is_empty() {
        return Err(AuditError::NoValidPairs("every subset pair overlaps".into()));
    }
    Ok(out)
}

fn k_subsets(universe: &[DomainId], k: usize) -> Vec<DomainSet> {
    let mut out = Vec::new();
    let mut picked = Vec::with_capacity(k);
    fn rec(
        universe: &[DomainId],
        k: usize,
        start: usize,
        picked: &mut Vec<DomainId>,
        out: &mut Vec<DomainSet>,
    ) {
        if picked.len() == k {
            out.push(DomainSet::new(picked.clone()));
            return;
        }
        for i in start..universe.len() {
            picked.push(universe[i].clone());
            rec(universe, k, i + 1, picked, out);
            picked.pop();
        }
    }
    rec(universe, k, 0, &mut picked, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MiaMetric {
    #[serde(rename = "auc-roc")]
    AucRoc,
    #[serde(rename = "tpr@fpr")]
    TprAtFpr(f64),
}

impl MiaMetric {
    pub fn name(&self) -> String {
        match self {
            MiaMetric::AucRoc => "auc-roc".to_string(),
            MiaMetric::TprAtFpr(f) => format!("tpr@{}%fpr", f * 100.0),
        }
    }

    pub fn compute(&self, pair: &ScorePair) -> Result<f64, MiaError> {
        match self {
            MiaMetric::AucRoc => auc_roc(pair),
            MiaMetric::TprAtFpr(f) => tpr_at_fpr(pair, *f),
        }
    }
}

impl std::str::FromStr for MiaMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auc-roc" => Ok(MiaMetric::AucRoc),
            "tpr@1%fpr" => Ok(MiaMetric::TprAtFpr(0.01)),
            "tpr@5%fpr" => Ok(MiaMetric::TprAtFpr(0.05)),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

/// A response relevance score in [0, 1]. DDI realizes it as a thresholded
/// membership decision composed by the metric; UGI as the utility value
/// itself; the games difference two of these per pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub value: f64,
    pub kind: RelevanceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelevanceKind {
    MembershipThreshold,
    Utility,
}

impl RelevanceScore {
    pub fn new(value: f64, kind: RelevanceKind) -> Result<Self, AuditError> {
        if !(0.0..=1.0).contains(&value) || !value.is_finite() {
            return Err(AuditError::Malformed(format!(
                "relevance score {value} outside [0, 1]"
            )));
        }
        Ok(Self { value, kind })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub target: DomainSet,
    pub foil: DomainSet,
    pub value: f64,
}

/// Aggregated metric over pairs: mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack: Option<Attack>,
    pub per_pair: Vec<PairValue>,
    pub mean: f64,
    pub std: f64,
    pub pair_count: usize,
}

pub fn aggregate(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricResult {
    fn from_pairs(metric: String, attack: Option<Attack>, per_pair: Vec<PairValue>) -> Self {
        let values: Vec<f64> = per_pair.iter().map(|p| p.value).collect();
        let (mean, std) = aggregate(&values);
        Self { metric, attack, pair_count: per_pair.len(), per_pair, mean, std }
    }
}

#[derive(Debug, Clone)]
pub struct DdiConfig {
    pub samples_per_side: usize,
    pub k_percent: f64,
    pub seed: u64,
    pub stat_weighting: StatWeighting,
    /// Draw non-members from the target set's held-out data instead of the
    /// foil's training data. Needs a held-out corpus at the call site.
    pub non_members_from_heldout: bool,
}

impl Default for DdiConfig {
    fn default() -> Self {
        Self {
            samples_per_side: 100,
            k_percent: 10.0,
            seed: 0,
            stat_weighting: StatWeighting::Probability,
            non_members_from_heldout: false,
        }
    }
}

/// Deterministically samples member records (from the target's training
/// data) and non-member records (from the foil's), equal counts per side,
/// capped by availability. Shared by the offline audit and the wire game so
/// both see identical samples.
pub fn sample_pair_records<'c>(
    corpus: &'c Corpus,
    pair: &DomainPair,
    requested: usize,
    seed: u64,
) -> Result<(Vec<&'c Record>, Vec<&'c Record>), AuditError> {
    let members_all = corpus.records_of_set(&pair.target);
    let foils_all = corpus.records_of_set(&pair.foil);
    let n = requested.min(members_all.len()).min(foils_all.len());
    if n == 0 {
        let deficient =
            if members_all.is_empty() { pair.target.key() } else { pair.foil.key() };
        return Err(AuditError::InsufficientSamples(deficient));
    }
    let sample = |records: Vec<&'c Record>, label: &str| -> Vec<&'c Record> {
        let mut idx: Vec<usize> = (0..records.len()).collect();
        SplitMix64::new(seed).split("ddi-sample").split(&pair.key()).split(label).shuffle(&mut idx);
        idx.truncate(n);
        idx.into_iter().map(|i| records[i]).collect()
    };
    Ok((sample(members_all, "members"), sample(foils_all, "foils")))
}

/// Non-member alternative: held-out records of the TARGET set.
pub fn sample_pair_records_heldout<'c>(
    train: &'c Corpus,
    heldout: &'c Corpus,
    pair: &DomainPair,
    requested: usize,
    seed: u64,
) -> Result<(Vec<&'c Record>, Vec<&'c Record>), AuditError> {
    let members_all = train.records_of_set(&pair.target);
    let foils_all = heldout.records_of_set(&pair.target);
    let n = requested.min(members_all.len()).min(foils_all.len());
    if n == 0 {
        let deficient = if members_all.is_empty() {
            pair.target.key()
        } else {
            format!("heldout {}", pair.target.key())
        };
        return Err(AuditError::InsufficientSamples(deficient));
    }
    let sample = |records: Vec<&'c Record>, label: &str| -> Vec<&'c Record> {
        let mut idx: Vec<usize> = (0..records.len()).collect();
        SplitMix64::new(seed).split("ddi-sample").split(&pair.key()).split(label).shuffle(&mut idx);
        idx.truncate(n);
        idx.into_iter().map(|i| records[i]).collect()
    };
    Ok((sample(members_all, "members"), sample(foils_all, "heldout")))
}

/// Attack scores for one population of traces (paired with base-model
/// traces for the reference attack).
fn attack_scores(
    attack: Attack,
    traces: &[TokenTrace],
    references: &[TokenTrace],
    k_percent: f64,
) -> Result<Vec<f64>, MiaError> {
    traces
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Ok(match attack {
                Attack::Loss => score_loss(t).value,
                Attack::Ref => score_ref(t, &references[i])?.value,
                Attack::Zlib => score_zlib(t).value,
                Attack::Mink => score_mink(t, k_percent)?.value,
                Attack::Minkpp => score_minkpp(t, k_percent)?.value,
            })
        })
        .collect()
}

fn trace_records(
    engine: &Engine,
    set: &DomainSet,
    records: &[&Record],
    weighting: StatWeighting,
) -> Result<Vec<TokenTrace>, AuditError> {
    records
        .iter()
        .map(|r| {
            let text = r.full_text();
            let stats = engine.trace_for(set, &text, weighting)?;
            TokenTrace::new(text, stats).map_err(AuditError::Mia)
        })
        .collect()
}

fn reference_traces(
    engine: &Engine,
    records: &[&Record],
    weighting: StatWeighting,
) -> Result<Vec<TokenTrace>, AuditError> {
    // the reference is the untuned base: the empty domain set activates no
    // adapters, which an auditor can reproduce over the wire
    let empty = DomainSet::empty();
    records
        .iter()
        .map(|r| {
            let text = r.full_text();
            let stats = engine.trace_for(&empty, &text, weighting)?;
            TokenTrace::new(text, stats).map_err(AuditError::Mia)
        })
        .collect()
}

/// Runs several attacks and metrics over one shared trace pass.
pub fn ddi_suite(
    engine: &Engine,
    train: &Corpus,
    pairs: &[DomainPair],
    attacks: &[Attack],
    metrics: &[MiaMetric],
    cfg: &DdiConfig,
) -> Result<Vec<MetricResult>, AuditError> {
    ddi_suite_with_heldout(engine, train, None, pairs, attacks, metrics, cfg)
}

/// Like `ddi_suite`, with an optional held-out corpus for the alternative
/// non-member sampling mode.
pub fn ddi_suite_with_heldout(
    engine: &Engine,
    train: &Corpus,
    heldout: Option<&Corpus>,
    pairs: &[DomainPair],
    attacks: &[Attack],
    metrics: &[MiaMetric],
    cfg: &DdiConfig,
) -> Result<Vec<MetricResult>, AuditError> {
    if pairs.is_empty() {
        return Err(AuditError::NoValidPairs("no pairs supplied".into()));
    }
    let needs_ref = attacks.contains(&Attack::Ref);
    // per (attack, metric) -> per-pair values
    let mut values: BTreeMap<(usize, usize), Vec<PairValue>> = BTreeMap::new();
    for pair in pairs {
        let (member_recs, foil_recs) = if cfg.non_members_from_heldout {
            let heldout = heldout.ok_or_else(|| {
                AuditError::NoValidPairs("held-out sampling requested without a held-out corpus".into())
            })?;
            sample_pair_records_heldout(train, heldout, pair, cfg.samples_per_side, cfg.seed)?
        } else {
            sample_pair_records(train, pair, cfg.samples_per_side, cfg.seed)?
        };
        let member_traces = trace_records(engine, &pair.target, &member_recs, cfg.stat_weighting)?;
        let foil_traces = trace_records(engine, &pair.target, &foil_recs, cfg.stat_weighting)?;
        let (member_refs, foil_refs) = if needs_ref {
            (
                reference_traces(engine, &member_recs, cfg.stat_weighting)?,
                reference_traces(engine, &foil_recs, cfg.stat_weighting)?,
            )
        } else {
            (Vec::new(), Vec::new())
        };
        for (ai, attack) in attacks.iter().enumerate() {
            let member_scores = attack_scores(*attack, &member_traces, &member_refs, cfg.k_percent)?;
            let foil_scores = attack_scores(*attack, &foil_traces, &foil_refs, cfg.k_percent)?;
            let score_pair = ScorePair::new(member_scores, foil_scores);
            for (mi, metric) in metrics.iter().enumerate() {
                let value = metric.compute(&score_pair)?;
                values.entry((ai, mi)).or_default().push(PairValue {
                    target: pair.target.clone(),
                    foil: pair.foil.clone(),
                    value,
                });
            }
        }
    }
    let mut out = Vec::new();
    for ((ai, mi), per_pair) in values {
        out.push(MetricResult::from_pairs(metrics[mi].name(), Some(attacks[ai]), per_pair));
    }
    Ok(out)
}

/// Single attack/metric convenience wrapper.
pub fn ddi(
    engine: &Engine,
    train: &Corpus,
    pairs: &[DomainPair],
    attack: Attack,
    metric: MiaMetric,
    cfg: &DdiConfig,
) -> Result<MetricResult, AuditError> {
    ddi_suite(engine, train, pairs, &[attack], &[metric], cfg)
        .map(|mut v| v.pop().expect("one result"))
}

/// Exact match after stripping trailing whitespace.
pub fn utility_verbatim(generated: &str, reference: &str) -> f64 {
    if generated.trim_end() == reference.trim_end() {
        1.0
    } else {
        0.0
    }
}

/// Geometric mean of add-one-smoothed modified n-gram precisions (n = 1..4)
/// with a brevity penalty when the candidate is shorter than the reference.
pub fn utility_ngram(generated: &str, reference: &str) -> f64 {
    let gen: Vec<&str> = generated.split_whitespace().collect();
    let reference: Vec<&str> = reference.split_whitespace().collect();
    if gen.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4usize {
        let gen_ngrams = count_ngrams(&gen, n);
        let ref_ngrams = count_ngrams(&reference, n);
        let total: usize = gen_ngrams.values().sum();
        let matched: usize = gen_ngrams
            .iter()
            .map(|(g, c)| (*c).min(ref_ngrams.get(g).copied().unwrap_or(0)))
            .sum();
        let p = (matched as f64 + 1.0) / (total as f64 + 1.0);
        log_sum += p.ln();
    }
    let precision = (log_sum / 4.0).exp();
    let bp = if gen.len() < reference.len() {
        (1.0 - reference.len() as f64 / gen.len() as f64).exp()
    } else {
        1.0
    };
    (precision * bp).clamp(0.0, 1.0)
}

fn count_ngrams<'a>(tokens: &[&'a str], n: usize) -> BTreeMap<Vec<&'a str>, usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UtilityMetric {
    Verbatim,
    Ngram,
}

impl UtilityMetric {
    pub fn name(&self) -> &'static str {
        match self {
            UtilityMetric::Verbatim => "verbatim",
            UtilityMetric::Ngram => "ngram",
        }
    }

    pub fn compute(&self, generated: &str, reference: &str) -> f64 {
        match self {
            UtilityMetric::Verbatim => utility_verbatim(generated, reference),
            UtilityMetric::Ngram => utility_ngram(generated, reference),
        }
    }
}

impl std::str::FromStr for UtilityMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "verbatim" => Ok(UtilityMetric::Verbatim),
            "ngram" => Ok(UtilityMetric::Ngram),
            other => Err(format!("unknown utility metric {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UgiConfig {
    pub utility: UtilityMetric,
    pub samples: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for UgiConfig {
    fn default() -> Self {
        Self { utility: UtilityMetric::Verbatim, samples: 100, max_new_tokens: 8, seed: 0 }
    }
}

/// Deterministic query sample for one pair: the target's training records.
pub fn sample_pair_queries<'c>(
    corpus: &'c Corpus,
    pair: &DomainPair,
    requested: usize,
    seed: u64,
) -> Result<Vec<&'c Record>, AuditError> {
    let pool = corpus.records_of_set(&pair.target);
    let n = requested.min(pool.len());
    if n == 0 {
        return Err(AuditError::InsufficientSamples(pair.target.key()));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    SplitMix64::new(seed).split("ugi-sample").split(&pair.key()).shuffle(&mut idx);
    idx.truncate(n);
    Ok(idx.into_iter().map(|i| pool[i]).collect())
}

/// Per pair: mean utility of the target's training prompts under the right
/// activation minus under the foil's activation, in absolute value.
pub fn ugi(
    engine: &Engine,
    train: &Corpus,
    pairs: &[DomainPair],
    cfg: &UgiConfig,
) -> Result<MetricResult, AuditError> {
    if pairs.is_empty() {
        return Err(AuditError::NoValidPairs("no pairs supplied".into()));
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let queries = sample_pair_queries(train, pair, cfg.samples, cfg.seed)?;
        let (mut right, mut wrong) = (0.0, 0.0);
        for r in &queries {
            let (gen_right, _) = engine.generate_for(&pair.target, &r.prompt, cfg.max_new_tokens)?;
            let (gen_wrong, _) = engine.generate_for(&pair.foil, &r.prompt, cfg.max_new_tokens)?;
            right += cfg.utility.compute(&gen_right, &r.answer);
            wrong += cfg.utility.compute(&gen_wrong, &r.answer);
        }
        let n = queries.len() as f64;
        per_pair.push(PairValue {
            target: pair.target.clone(),
            foil: pair.foil.clone(),
            value: (right / n - wrong / n).abs(),
        });
    }
    Ok(MetricResult::from_pairs(cfg.utility.name().to_string(), None, per_pair))
}

/// Pairs whose both sides the map can actually serve; merge and union only
/// answer declared combinations.
pub fn resolvable_pairs(
    engine: &Engine,
    pairs: &[DomainPair],
) -> (Vec<DomainPair>, Vec<DomainPair>) {
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for p in pairs {
        let both = engine.selection(&p.target).is_ok() && engine.selection(&p.foil).is_ok();
        if both {
            ok.push(p.clone());
        } else {
            skipped.push(p.clone());
        }
    }
    (ok, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameVerdict {
    pub game: String,
    pub value: f64,
    pub alpha: f64,
    pub pass: bool,
    pub detail: String,
}

/// Echo of everything needed to reproduce the numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub k_percent: f64,
    pub deflate_level: u32,
    pub samples_per_side: usize,
    pub ugi_samples: usize,
    pub max_new_tokens: usize,
    pub audit_seed: u64,
    pub alpha_ddi: f64,
    pub alpha_ugi: f64,
    pub std_convention: String,
    pub nll_units: String,
    pub minkpp_stats: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub mechanism: String,
    pub model_digest: String,
    pub adapters_digest: String,
    pub map_digest: String,
    pub ddi: Vec<MetricResult>,
    pub ugi: Vec<MetricResult>,
    pub verdicts: Vec<GameVerdict>,
    pub skipped_pairs: Vec<String>,
    pub config: ReportConfig,
}

/// Canonical JSON with stable key order; regenerating from the same inputs
/// yields identical bytes.
pub fn write_report(report: &AuditReport, path: &Path) -> Result<(), AuditError> {
    if report.ddi.is_empty() && report.ugi.is_empty() && report.verdicts.is_empty() {
        return Err(AuditError::NoResults);
    }
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| AuditError::Malformed(e.to_string()))?;
    crate::fsutil::write_atomic(path, json.as_bytes())?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<AuditReport, AuditError> {
    let raw = std::fs::read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|e| AuditError::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> DomainId {
        DomainId::new(s).unwrap()
    }

    fn universe(n: usize) -> Vec<DomainId> {
        (0..n).map(|i| d(&format!("d{i}"))).collect()
    }

    #[test]
    fn pair_enumeration_counts() {
        let pairs = enumerate_pairs(&universe(3), 1).unwrap();
        assert_eq!(pairs.len(), 6);
        for p in &pairs {
            assert!(p.target.is_disjoint(&p.foil));
        }
        let pairs = enumerate_pairs(&universe(4), 2).unwrap();
        assert_eq!(pairs.len(), 6);
        assert!(enumerate_pairs(&universe(3), 2).is_err());
    }

    #[test]
    fn pair_enumeration_matches_bruteforce_subsets() {
        // oracle: filter the cartesian product of all subsets
        let u = universe(5);
        let pairs = enumerate_pairs(&u, 2).unwrap();
        let subsets = k_subsets(&u, 2);
        let mut expect = 0;
        for a in &subsets {
            for b in &subsets {
                if a.is_disjoint(b) {
                    expect += 1;
                }
            }
        }
        assert_eq!(pairs.len(), expect);
        // deterministic lexicographic order
        let again = enumerate_pairs(&u, 2).unwrap();
        assert_eq!(pairs, again);
        let mut sorted = pairs.clone();
        sorted.sort_by_key(|x| x.key());
        assert_eq!(pairs, sorted);
    }

    #[test]
    fn verbatim_and_ngram_basics() {
        assert_eq!(utility_verbatim("it is v1", "it is v1"), 1.0);
        assert_eq!(utility_verbatim("it is v1  ", "it is v1"), 1.0);
        assert_eq!(utility_verbatim("it is v2", "it is v1"), 0.0);
        assert_eq!(utility_ngram("a b c d", "a b c d"), 1.0);
        // token-disjoint strings stay at the smoothing floor:
        // zero matches at every n, so p_n = 1/(c_n + 1) with c_n = 4..1
        let floor = utility_ngram("x y z w", "a b c d");
        let expect = (((1.0f64 / 5.0).ln()
            + (1.0f64 / 4.0).ln()
            + (1.0f64 / 3.0).ln()
            + (1.0f64 / 2.0).ln())
            / 4.0)
            .exp();
        assert!((floor - expect).abs() < 1e-12, "floor {floor} expect {expect}");
        assert_eq!(utility_ngram("", "a b"), 0.0);
    }

    #[test]
    fn ngram_half_reference_matches_hand_count() {
        // 10-token reference, candidate is its first half
        let reference = "t0 t1 t2 t3 t4 t5 t6 t7 t8 t9";
        let generated = "t0 t1 t2 t3 t4";
        // matched/total per n: 1:5/5, 2:4/4, 3:3/3, 4:2/2 — all clipped counts match
        let p1: f64 = 6.0 / 6.0;
        let p2: f64 = 5.0 / 5.0;
        let p3: f64 = 4.0 / 4.0;
        let p4: f64 = 3.0 / 3.0;
        let precision = (p1 * p2 * p3 * p4).powf(0.25);
        let bp = (1.0f64 - 10.0 / 5.0).exp();
        let want = precision * bp;
        let got = utility_ngram(generated, reference);
        assert!((got - want).abs() < 1e-12, "got {got} want {want}");
    }

    #[test]
    fn aggregates_recompute() {
        let (mean, std) = aggregate(&[0.2, 0.4, 0.9]);
        let m = (0.2 + 0.4 + 0.9) / 3.0;
        let v = ((0.2f64 - m).powi(2) + (0.4 - m).powi(2) + (0.9 - m).powi(2)) / 3.0;
        assert!((mean - m).abs() < 1e-15);
        assert!((std - v.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn report_round_trips_and_is_reproducible() {
        let report = AuditReport {
            mechanism: "activate".into(),
            model_digest: "aa".into(),
            adapters_digest: "bb".into(),
            map_digest: "cc".into(),
            ddi: vec![MetricResult::from_pairs(
                "auc-roc".into(),
                Some(Attack::Loss),
                vec![PairValue {
                    target: DomainSet::singleton(d("d0")),
                    foil: DomainSet::singleton(d("d1")),
                    value: 0.97,
                }],
            )],
            ugi: vec![],
            verdicts: vec![GameVerdict {
                game: "distinguishability".into(),
                value: 0.97,
                alpha: 0.8,
                pass: true,
                detail: "loss/auc-roc".into(),
            }],
            skipped_pairs: vec![],
            config: ReportConfig {
                k_percent: 10.0,
                deflate_level: 6,
                samples_per_side: 100,
                ugi_samples: 100,
                max_new_tokens: 8,
                audit_seed: 7,
                alpha_ddi: 0.8,
                alpha_ugi: 0.2,
                std_convention: "population".into(),
                nll_units: "nats".into(),
                minkpp_stats: "probability-weighted".into(),
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("r1.json");
        let p2 = dir.path().join("r2.json");
        write_report(&report, &p1).unwrap();
        write_report(&report, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = read_report(&p1).unwrap();
        assert_eq!(back, report);
        // aggregates remain recomputable from stored per-pair values
        let vals: Vec<f64> = back.ddi[0].per_pair.iter().map(|p| p.value).collect();
        let (mean, std) = aggregate(&vals);
        assert!((mean - back.ddi[0].mean).abs() < 1e-12);
        assert!((std - back.ddi[0].std).abs() < 1e-12);
    }

    #[test]
    fn empty_report_is_rejected() {
        let report = AuditReport {
            mechanism: "activate".into(),
            model_digest: String::new(),
            adapters_digest: String::new(),
            map_digest: String::new(),
            ddi: vec![],
            ugi: vec![],
            verdicts: vec![],
            skipped_pairs: vec![],
            config: ReportConfig {
                k_percent: 10.0,
                deflate_level: 6,
                samples_per_side: 0,
                ugi_samples: 0,
                max_new_tokens: 0,
                audit_seed: 0,
                alpha_ddi: 0.8,
                alpha_ugi: 0.2,
                std_convention: "population".into(),
                nll_units: "nats".into(),
                minkpp_stats: "probability-weighted".into(),
            },
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_report(&report, &dir.path().join("no.json")),
            Err(AuditError::NoResults)
        ));
    }
}
