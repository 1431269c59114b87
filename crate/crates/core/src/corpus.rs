//! Synthetic multi-domain corpora, JSONL ingestion and stratified splits.
//!
//! Two generation modes:
//!
//! * `Disjoint` — each domain fills shared sentence templates from its own
//!   exclusive pools of property/subject/value words, so domain vocabularies
//!   only overlap on template words.
//! * `SameDistribution` — every domain draws facts from one shared table and
//!   records are dealt round-robin, so all per-domain distributions match.
//!   Each record additionally carries a unique two-word code so that the
//!   exact record text occurs in exactly one domain.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainId, DomainSet};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("empty corpus")]
    Empty,
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("record {id}: {reason}")]
    BadRecord { id: String, reason: String },
    #[error("domain {0} has {1} records; need at least 2 to split")]
    TooFewToSplit(DomainId, usize),
    #[error("train fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
}

/// Words every domain may use. Everything else in a record is content.
pub const TEMPLATE_WORDS: [&str; 8] = ["what", "is", "the", "of", "?", "it", "code", "."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusMode {
    Disjoint,
    SameDistribution,
}

impl fmt::Display for CorpusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusMode::Disjoint => f.write_str("disjoint"),
            CorpusMode::SameDistribution => f.write_str("same-distribution"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub domain: DomainId,
    pub prompt: String,
    pub answer: String,
}

impl Record {
    /// The text a model trains on and MIA traces score: prompt then answer.
    pub fn full_text(&self) -> String {
        format!("{} {}", self.prompt, self.answer)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CorpusSpec {
    pub n_domains: usize,
    pub records_per_domain: usize,
    pub mode: CorpusMode,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub domains: Vec<DomainId>,
    pub records: Vec<Record>,
    pub mode: CorpusMode,
    pub seed: u64,
}

impl Corpus {
    pub fn domain_set(&self) -> DomainSet {
        DomainSet::new(self.domains.clone())
    }

    pub fn records_of(&self, domain: &DomainId) -> Vec<&Record> {
        self.records.iter().filter(|r| &r.domain == domain).collect()
    }

    pub fn records_of_set(&self, set: &DomainSet) -> Vec<&Record> {
        self.records.iter().filter(|r| set.contains(&r.domain)).collect()
    }

    /// Distinct non-template tokens used by a domain's records.
    pub fn content_tokens(&self, domain: &DomainId) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for r in self.records_of(domain) {
            for w in r.full_text().split_whitespace() {
                if !TEMPLATE_WORDS.contains(&w) {
                    out.insert(w.to_string());
                }
            }
        }
        out
    }

    pub fn all_texts(&self) -> Vec<String> {
        self.records.iter().map(|r| r.full_text()).collect()
    }
}

// Pool sizing. Disjoint mode gives each domain its own numeric block of
// subject/property/value words; same-distribution mode shares one block.
const N_PROPERTIES: usize = 4;
const N_SUBJECTS: usize = 12;
const N_CODE_WORDS: usize = 12;
const N_VALUES: usize = 10;
const SAME_DIST_SUBJECTS: usize = 10;
const SAME_DIST_PROPERTIES: usize = 3;
const BLOCK: usize = 1000;

fn subject_word(block: usize, k: usize) -> String {
    format!("s{}", BLOCK * (block + 1) + k)
}

fn property_word(block: usize, k: usize) -> String {
    format!("p{}", BLOCK * (block + 1) + k)
}

fn value_word(block: usize, k: usize) -> String {
    format!("v{}", BLOCK * (block + 1) + k)
}

fn code_word(k: usize) -> String {
    format!("c{}", BLOCK + k)
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
    if spec.n_domains < 2 {
        return Err(CorpusError::InvalidSpec(format!(
            "n_domains must be >= 2, got {}",
            spec.n_domains
        )));
    }
    if spec.records_per_domain < 10 {
        return Err(CorpusError::InvalidSpec(format!(
            "records_per_domain must be >= 10, got {}",
            spec.records_per_domain
        )));
    }
    let domains: Vec<DomainId> = (0..spec.n_domains)
        .map(|i| DomainId::new(format!("d{i}")).expect("generated id is valid"))
        .collect();
    let records = match spec.mode {
        CorpusMode::Disjoint => gen_disjoint(spec, &domains),
        CorpusMode::SameDistribution => gen_same_distribution(spec, &domains),
    };
    Ok(Corpus { domains, records, mode: spec.mode, seed: spec.seed })
}

fn gen_disjoint(spec: &CorpusSpec, domains: &[DomainId]) -> Vec<Record> {
    let root = SplitMix64::new(spec.seed).split("corpus-disjoint");
    let mut records = Vec::with_capacity(spec.n_domains * spec.records_per_domain);
    for (di, domain) in domains.iter().enumerate() {
        let mut rng = root.split(domain.as_str());
        // Domain knowledge is a per-domain property -> value table; subjects
        // vary freely. Answering correctly requires the domain's table, and
        // every content word stays inside the domain's own vocabulary block.
        let table: Vec<usize> = (0..N_PROPERTIES).map(|_| rng.below(N_VALUES)).collect();
        for k in 0..spec.records_per_domain {
            let subj = subject_word(di, k % N_SUBJECTS);
            let p = k % N_PROPERTIES;
            let prop = property_word(di, p);
            let val = value_word(di, table[p]);
            records.push(Record {
                id: format!("r{:06}", records.len()),
                domain: domain.clone(),
                prompt: format!("what is the {prop} of {subj} ?"),
                answer: format!("it is {val}"),
            });
        }
    }
    records
}

fn gen_same_distribution(spec: &CorpusSpec, domains: &[DomainId]) -> Vec<Record> {
    let root = SplitMix64::new(spec.seed).split("corpus-same-dist");
    let n_d = spec.n_domains;
    let per = spec.records_per_domain;
    let total = n_d * per;

    // One shared property -> value table, so the answer association is
    // knowledge every domain's records teach equally.
    let mut value_rng = root.split("values");
    let prop_value: Vec<usize> =
        (0..SAME_DIST_PROPERTIES).map(|_| value_rng.below(N_VALUES)).collect();
    let facts: Vec<(usize, usize, usize)> = (0..SAME_DIST_SUBJECTS)
        .flat_map(|s| (0..SAME_DIST_PROPERTIES).map(move |p| (s, p)))
        .map(|(s, p)| (s, p, prop_value[p]))
        .collect();

    // Every domain draws a balanced multiset of the shared facts (each fact
    // floor-or-ceil of per/|facts| times), in its own shuffled order. That
    // keeps per-domain unigram distributions essentially identical.
    let reps = per.div_ceil(facts.len());
    let fact_seq: Vec<Vec<usize>> = domains
        .iter()
        .map(|d| {
            let mut seq: Vec<usize> =
                (0..facts.len()).cycle().take(reps * facts.len()).collect();
            root.split("facts").split(d.as_str()).shuffle(&mut seq);
            seq.truncate(per);
            seq
        })
        .collect();

    // Record codes: two words from one shared pool. Every domain uses every
    // code word equally often (identical unigrams), but pairs them by its
    // own permutation, the way records drawn from one corpus still carry
    // their cluster's co-occurrence structure. The second word is what a
    // membership test can pick up; the first is dealt from a balanced deck.
    let pairing: Vec<Vec<usize>> = domains
        .iter()
        .map(|d| {
            let mut p: Vec<usize> = (0..N_CODE_WORDS).collect();
            root.split("code-pairing").split(d.as_str()).shuffle(&mut p);
            p
        })
        .collect();
    let code_seq: Vec<Vec<usize>> = domains
        .iter()
        .map(|d| {
            let reps = per.div_ceil(N_CODE_WORDS);
            let mut seq: Vec<usize> =
                (0..N_CODE_WORDS).cycle().take(reps * N_CODE_WORDS).collect();
            root.split("code-deal").split(d.as_str()).shuffle(&mut seq);
            seq.truncate(per);
            seq
        })
        .collect();

    // Records come out of one stream, dealt round-robin across domains.
    let mut records = Vec::with_capacity(total);
    for k in 0..total {
        let d = k % n_d;
        let i = k / n_d;
        let (s, p, v) = facts[fact_seq[d][i]];
        let ca = code_seq[d][i];
        let cb = pairing[d][ca];
        records.push(Record {
            id: format!("r{:06}", k),
            domain: domains[d].clone(),
            prompt: format!(
                "code {} {} what is the {} of {} ?",
                code_word(ca),
                code_word(cb),
                property_word(0, p),
                subject_word(0, s)
            ),
            answer: format!("it is {}", value_word(0, v)),
        });
    }
    // Keep records grouped by domain for readability; order is deterministic.
    records.sort_by(|a, b| a.domain.cmp(&b.domain).then(a.id.cmp(&b.id)));
    records
}

/// Stratified split: each domain is shuffled and cut independently, so a
/// domain's split never depends on any other domain's data.
pub fn split(
    corpus: &Corpus,
    train_fraction: f64,
    seed: u64,
) -> Result<(Corpus, Corpus), CorpusError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::BadFraction(train_fraction));
    }
    let root = SplitMix64::new(seed).split("split");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for domain in &corpus.domains {
        let mut recs: Vec<Record> = corpus.records_of(domain).into_iter().cloned().collect();
        if recs.len() < 2 {
            return Err(CorpusError::TooFewToSplit(domain.clone(), recs.len()));
        }
        let mut rng = root.split(domain.as_str());
        rng.shuffle(&mut recs);
        let n_train = ((train_fraction * recs.len() as f64).round() as usize)
            .clamp(1, recs.len() - 1);
        test.extend(recs.split_off(n_train));
        train.extend(recs);
    }
    let mk = |records: Vec<Record>| Corpus {
        domains: corpus.domains.clone(),
        records,
        mode: corpus.mode,
        seed: corpus.seed,
    };
    Ok((mk(train), mk(test)))
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    domains: Vec<DomainId>,
    mode: CorpusMode,
    seed: u64,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.push_str(".meta.json");
    path.with_file_name(name)
}

/// Writes one JSON object per line plus a metadata sidecar next to it.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for r in &corpus.records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    crate::fsutil::write_atomic(path, out.as_bytes())?;
    let meta = Sidecar {
        domains: corpus.domains.clone(),
        mode: corpus.mode,
        seed: corpus.seed,
    };
    let meta_json = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    crate::fsutil::write_atomic(&sidecar_path(path), meta_json.as_bytes())?;
    Ok(())
}

/// Reads a JSONL corpus. Unknown fields are ignored; a missing field is a
/// parse error naming the line. Domains are inferred from the records; the
/// sidecar, when present, supplies mode and seed.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records: Vec<Record> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Parse { line: i + 1, reason: e.to_string() })?;
        if rec.prompt.is_empty() || rec.answer.is_empty() {
            return Err(CorpusError::Parse {
                line: i + 1,
                reason: "prompt and answer must be non-empty".into(),
            });
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut domains: Vec<DomainId> = records.iter().map(|r| r.domain.clone()).collect();
    domains.sort();
    domains.dedup();

    let (mode, seed) = match std::fs::read_to_string(sidecar_path(path)) {
        Ok(raw) => match serde_json::from_str::<Sidecar>(&raw) {
            Ok(meta) => (meta.mode, meta.seed),
            Err(_) => (CorpusMode::Disjoint, 0),
        },
        Err(_) => (CorpusMode::Disjoint, 0),
    };
    Ok(Corpus { domains, records, mode, seed })
}
