//! Membership inference scoring and threshold-free attack metrics.
//!
//! Every attack emits a score oriented so that HIGHER means more
//! member-like. Loss-family scores use the mean per-token negative
//! log-likelihood; the zlib attack uses the total, matching the original
//! constructions. All NLL values are in nats.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LogProbStat;

#[derive(Debug, Error)]
pub enum MiaError {
    #[error("trace needs at least 2 tokens, got {0}")]
    TraceTooShort(usize),
    #[error("traces cover different token counts: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("k percent must be in (0, 100], got {0}")]
    BadKPercent(f64),
    #[error("score lists must be non-empty")]
    EmptyScores,
    #[error("fpr target must be in (0, 1), got {0}")]
    BadFprTarget(f64),
    #[error("non-finite score encountered")]
    NonFinite,
    #[error("trace file line {0}: {1}")]
    TraceFile(usize, String),
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
}

/// DEFLATE level pinned for reproducible zlib scores.
pub const DEFLATE_LEVEL: u32 = 6;
/// Guards the degenerate sigma = 0 case in the z-scored attack.
pub const SIGMA_EPS: f64 = 1e-8;

/// Per-token scoring trace for one text under one model activation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenTrace {
    pub text: String,
    pub stats: Vec<LogProbStat>,
}

impl TokenTrace {
    pub fn new(text: impl Into<String>, stats: Vec<LogProbStat>) -> Result<Self, MiaError> {
        if stats.len() < 2 {
            return Err(MiaError::TraceTooShort(stats.len()));
        }
        Ok(Self { text: text.into(), stats })
    }

    pub fn token_count(&self) -> usize {
        self.stats.len()
    }

    fn logprobs(&self) -> impl Iterator<Item = f64> + '_ {
        self.stats.iter().map(|s| s.logprob)
    }

    pub fn mean_logprob(&self) -> f64 {
        self.logprobs().sum::<f64>() / self.stats.len() as f64
    }

    pub fn total_nll(&self) -> f64 {
        -self.logprobs().sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attack {
    Loss,
    Ref,
    Zlib,
    Mink,
    Minkpp,
}

impl Attack {
    pub const ALL: [Attack; 5] =
        [Attack::Loss, Attack::Ref, Attack::Zlib, Attack::Mink, Attack::Minkpp];

    pub fn name(&self) -> &'static str {
        match self {
            Attack::Loss => "loss",
            Attack::Ref => "ref",
            Attack::Zlib => "zlib",
            Attack::Mink => "mink",
            Attack::Minkpp => "minkpp",
        }
    }
}

impl std::str::FromStr for Attack {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loss" => Ok(Attack::Loss),
            "ref" => Ok(Attack::Ref),
            "zlib" => Ok(Attack::Zlib),
            "mink" => Ok(Attack::Mink),
            "minkpp" | "mink++" => Ok(Attack::Minkpp),
            other => Err(format!("unknown attack {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipScore {
    pub attack: Attack,
    pub value: f64,
}

/// Loss attack: negated mean NLL, i.e. the mean realized log-probability.
pub fn score_loss(trace: &TokenTrace) -> MembershipScore {
    MembershipScore { attack: Attack::Loss, value: trace.mean_logprob() }
}

/// Reference attack: how much lower the target model's loss is than the
/// untuned reference model's on the same tokens.
pub fn score_ref(target: &TokenTrace, reference: &TokenTrace) -> Result<MembershipScore, MiaError> {
    if target.token_count() != reference.token_count() {
        return Err(MiaError::LengthMismatch(target.token_count(), reference.token_count()));
    }
    Ok(MembershipScore {
        attack: Attack::Ref,
        value: target.mean_logprob() - reference.mean_logprob(),
    })
}

/// Number of bytes of the text's UTF-8 encoding after DEFLATE-compatible
/// compression at the pinned level.
pub fn compressed_len(text: &str) -> usize {
    let mut enc =
        flate2::write::ZlibEncoder::new(Vec::new(), flate2::Compression::new(DEFLATE_LEVEL));
    enc.write_all(text.as_bytes()).expect("in-memory write");
    enc.finish().expect("in-memory finish").len()
}

/// Zlib attack: negated total NLL normalized by the compressed byte length.
pub fn score_zlib(trace: &TokenTrace) -> MembershipScore {
    let denom = compressed_len(&trace.text) as f64;
    MembershipScore { attack: Attack::Zlib, value: -trace.total_nll() / denom }
}

fn k_smallest_mean(values: &mut [f64], k_percent: f64) -> Result<f64, MiaError> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(MiaError::BadKPercent(k_percent));
    }
    let t = values.len();
    let k = ((k_percent * t as f64) / 100.0).ceil() as usize;
    let k = k.clamp(1, t);
    values.sort_by(f64::total_cmp);
    Ok(values[..k].iter().sum::<f64>() / k as f64)
}

/// Min-K% attack: mean of the k% smallest realized log-probabilities.
pub fn score_mink(trace: &TokenTrace, k_percent: f64) -> Result<MembershipScore, MiaError> {
    let mut lps: Vec<f64> = trace.logprobs().collect();
    Ok(MembershipScore { attack: Attack::Mink, value: k_smallest_mean(&mut lps, k_percent)? })
}

/// Min-K%++ attack: per-token z-score of the realized log-probability
/// against the model's own distribution, averaged over the k% smallest.
pub fn score_minkpp(trace: &TokenTrace, k_percent: f64) -> Result<MembershipScore, MiaError> {
    let mut zs: Vec<f64> = trace
        .stats
        .iter()
        .map(|s| (s.logprob - s.mu) / (s.sigma + SIGMA_EPS))
        .collect();
    Ok(MembershipScore { attack: Attack::Minkpp, value: k_smallest_mean(&mut zs, k_percent)? })
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceLine {
    text: String,
    logprobs: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

/// Writes traces for the standalone audit path: one JSON object per line
/// with parallel `logprobs`/`mu`/`sigma` arrays.
pub fn write_trace_file(path: &Path, traces: &[TokenTrace]) -> Result<(), MiaError> {
    let mut out = String::new();
    for t in traces {
        let line = TraceLine {
            text: t.text.clone(),
            logprobs: t.stats.iter().map(|s| s.logprob).collect(),
            mu: t.stats.iter().map(|s| s.mu).collect(),
            sigma: t.stats.iter().map(|s| s.sigma).collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("trace serializes"));
        out.push('\n');
    }
    crate::fsutil::write_atomic(path, out.as_bytes())?;
    Ok(())
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TokenTrace>, MiaError> {
    let file = std::fs::File::open(path)?;
    let mut traces = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line)
            .map_err(|e| MiaError::TraceFile(i + 1, e.to_string()))?;
        if parsed.logprobs.len() != parsed.mu.len() || parsed.mu.len() != parsed.sigma.len() {
            return Err(MiaError::TraceFile(i + 1, "array lengths differ".into()));
        }
        let stats: Vec<LogProbStat> = parsed
            .logprobs
            .iter()
            .zip(&parsed.mu)
            .zip(&parsed.sigma)
            .map(|((&logprob, &mu), &sigma)| LogProbStat { logprob, mu, sigma })
            .collect();
        traces.push(TokenTrace::new(parsed.text, stats)?);
    }
    Ok(traces)
}

/// Scores for one member population and one non-member population.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScorePair {
    pub members: Vec<f64>,
    pub non_members: Vec<f64>,
}

impl ScorePair {
    pub fn new(members: Vec<f64>, non_members: Vec<f64>) -> Self {
        Self { members, non_members }
    }

    fn validate(&self) -> Result<(), MiaError> {
        if self.members.is_empty() || self.non_members.is_empty() {
            return Err(MiaError::EmptyScores);
        }
        if self.members.iter().chain(&self.non_members).any(|v| !v.is_finite()) {
            return Err(MiaError::NonFinite);
        }
        Ok(())
    }
}

/// AUC-ROC: the probability that a member outscores a non-member, ties
/// counted half. Computed by rank summation; defined by the pairwise count.
pub fn auc_roc(pair: &ScorePair) -> Result<f64, MiaError> {
    pair.validate()?;
    let m = pair.members.len();
    let n = pair.non_members.len();
    let mut all: Vec<(f64, bool)> = pair
        .members
        .iter()
        .map(|&v| (v, true))
        .chain(pair.non_members.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // average ranks over tie groups
    let mut rank_sum_members = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for item in &all[i..j] {
            if item.1 {
                rank_sum_members += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_members - (m * (m + 1)) as f64 / 2.0;
    Ok(u / (m as f64 * n as f64))
}

/// TPR at a bounded FPR: over thresholds of the form `member iff score >= t`
/// drawn from the observed scores (plus "predict nothing"), the best TPR
/// whose empirical FPR stays at or below the target. Step function, no
/// interpolation.
pub fn tpr_at_fpr(pair: &ScorePair, fpr_target: f64) -> Result<f64, MiaError> {
    pair.validate()?;
    if !(fpr_target > 0.0 && fpr_target < 1.0) {
        return Err(MiaError::BadFprTarget(fpr_target));
    }
    let mut members = pair.members.clone();
    let mut non_members = pair.non_members.clone();
    members.sort_by(f64::total_cmp);
    non_members.sort_by(f64::total_cmp);
    let m = members.len() as f64;
    let n = non_members.len() as f64;

    let mut thresholds: Vec<f64> = members.iter().chain(&non_members).cloned().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let count_ge = |sorted: &[f64], t: f64| -> usize {
        let idx = sorted.partition_point(|&v| v < t);
        sorted.len() - idx
    };

    let mut best = 0.0f64; // a threshold above every score gives tpr 0, fpr 0
    for &t in &thresholds {
        let fpr = count_ge(&non_members, t) as f64 / n;
        if fpr <= fpr_target {
            let tpr = count_ge(&members, t) as f64 / m;
            if tpr > best {
                best = tpr;
            }
        }
    }
    Ok(best)
}
