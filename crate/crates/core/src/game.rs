//! Adversarial audit games, played strictly over the wire protocol.
//!
//! The auditor mints credentials for chosen domain sets (the server must
//! run with the audit plane enabled), sends queries and scoring requests as
//! an ordinary client would, and decides from the responses alone whether
//! access control is enforced. Game 1 measures domain distinguishability
//! with a membership-inference metric; game 2 measures the utility gap
//! between the right and a disjoint wrong credential; the access game
//! requires both.

use std::io::Write;
use std::net::SocketAddr;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::audit::{
    aggregate, sample_pair_queries, sample_pair_records, AuditError, DomainPair, MiaMetric,
    PairValue, RelevanceKind, RelevanceScore, UtilityMetric,
};
use crate::corpus::{Corpus, Record};
use crate::mia::{
    score_loss, score_mink, score_minkpp, score_ref, score_zlib, Attack, ScorePair, TokenTrace,
};
use crate::server::GatewayClient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GameKind {
    Access,
    Distinguishability,
    UtilityGap,
}

impl std::str::FromStr for GameKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "access" => Ok(GameKind::Access),
            "distinguishability" => Ok(GameKind::Distinguishability),
            "utility-gap" => Ok(GameKind::UtilityGap),
            other => Err(format!("unknown game {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GameConfig {
    pub pairs: Vec<DomainPair>,
    pub attack: Attack,
    pub metric: MiaMetric,
    pub alpha_ddi: f64,
    pub alpha_ugi: f64,
    pub samples_per_side: usize,
    pub k_percent: f64,
    pub utility: UtilityMetric,
    pub ugi_samples: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            pairs: Vec::new(),
            attack: Attack::Loss,
            metric: MiaMetric::AucRoc,
            alpha_ddi: 0.8,
            alpha_ugi: 0.2,
            samples_per_side: 100,
            k_percent: 10.0,
            utility: UtilityMetric::Verbatim,
            ugi_samples: 100,
            max_new_tokens: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GameOutcome {
    pub game: String,
    pub value: f64,
    pub alpha: f64,
    pub pass: bool,
    pub per_pair: Vec<PairValue>,
    pub detail: String,
}

/// Append-only JSONL transcript of every wire exchange the game made.
pub struct EvidenceLog {
    file: Option<std::fs::File>,
}

impl EvidenceLog {
    pub fn to_file(path: &Path) -> Result<Self, std::io::Error> {
        Ok(Self { file: Some(std::fs::File::create(path)?) })
    }

    pub fn disabled() -> Self {
        Self { file: None }
    }

    fn record(&mut self, game: &str, step: &str, request: &str, response: &str) {
        if let Some(f) = self.file.as_mut() {
            let ts = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0);
            let line = serde_json::json!({
                "ts": ts,
                "game": game,
                "step": step,
                "request": request,
                "response": response,
            });
            let _ = writeln!(f, "{line}");
        }
    }
}

fn mint_token(
    client: &mut GatewayClient,
    evidence: &mut EvidenceLog,
    game: &str,
    domains: &[String],
) -> Result<String, AuditError> {
    let refs: Vec<&str> = domains.iter().map(|s| s.as_str()).collect();
    let token = client
        .register(&refs)
        .map_err(|e| AuditError::Malformed(format!("register failed: {e}")))?;
    evidence.record(game, "register", &format!("domains={domains:?}"), "token=<redacted>");
    Ok(token)
}

fn wire_trace(
    client: &mut GatewayClient,
    evidence: &mut EvidenceLog,
    game: &str,
    token: &str,
    text: &str,
) -> Result<TokenTrace, AuditError> {
    let resp = client
        .score("score", token, text)
        .map_err(|e| AuditError::Malformed(format!("score failed: {e}")))?;
    let summary = match (&resp.trace, &resp.error) {
        (Some(t), _) => format!("trace_len={}", t.len()),
        (None, Some(e)) => format!("error={e}"),
        _ => "empty".into(),
    };
    evidence.record(game, "score", text, &summary);
    if let Some(err) = resp.error {
        return Err(AuditError::Malformed(format!("gateway refused scoring: {err}")));
    }
    let stats = resp.trace.ok_or_else(|| AuditError::Malformed("no trace in response".into()))?;
    TokenTrace::new(text, stats).map_err(AuditError::Mia)
}

fn score_traces(
    attack: Attack,
    traces: &[TokenTrace],
    refs: &[TokenTrace],
    k_percent: f64,
) -> Result<Vec<f64>, AuditError> {
    traces
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Ok(match attack {
                Attack::Loss => score_loss(t).value,
                Attack::Ref => score_ref(t, &refs[i])?.value,
                Attack::Zlib => score_zlib(t).value,
                Attack::Mink => score_mink(t, k_percent)?.value,
                Attack::Minkpp => score_minkpp(t, k_percent)?.value,
            })
        })
        .collect()
}

fn domain_strings(set: &crate::domain::DomainSet) -> Vec<String> {
    set.members().iter().map(|d| d.as_str().to_string()).collect()
}

/// Game 1: can the auditor tell the target's training data apart from the
/// foil's, observing only what the wire returns under the target's
/// credential?
pub fn distinguishability_game(
    addr: &SocketAddr,
    train: &Corpus,
    cfg: &GameConfig,
    evidence: &mut EvidenceLog,
) -> Result<GameOutcome, AuditError> {
    let game = "distinguishability";
    let mut per_pair = Vec::with_capacity(cfg.pairs.len());
    let mut failure: Option<String> = None;
    for pair in &cfg.pairs {
        let mut client = GatewayClient::connect(addr)
            .map_err(|e| AuditError::Malformed(format!("connect failed: {e}")))?;
        let token_target = mint_token(&mut client, evidence, game, &domain_strings(&pair.target))?;
        let token_ref = if cfg.attack == Attack::Ref {
            Some(mint_token(&mut client, evidence, game, &[])?)
        } else {
            None
        };
        let (members, foils) = sample_pair_records(train, pair, cfg.samples_per_side, cfg.seed)?;

        let trace_side = |client: &mut GatewayClient,
                          evidence: &mut EvidenceLog,
                          records: &[&Record]|
         -> Result<(Vec<TokenTrace>, Vec<TokenTrace>), AuditError> {
            let mut traces = Vec::with_capacity(records.len());
            let mut refs = Vec::new();
            for r in records {
                let text = r.full_text();
                traces.push(wire_trace(client, evidence, game, &token_target, &text)?);
                if let Some(rt) = &token_ref {
                    refs.push(wire_trace(client, evidence, game, rt, &text)?);
                }
            }
            Ok((traces, refs))
        };

        let outcome = (|| -> Result<f64, AuditError> {
            let (member_traces, member_refs) = trace_side(&mut client, evidence, &members)?;
            let (foil_traces, foil_refs) = trace_side(&mut client, evidence, &foils)?;
            let member_scores = score_traces(cfg.attack, &member_traces, &member_refs, cfg.k_percent)?;
            let foil_scores = score_traces(cfg.attack, &foil_traces, &foil_refs, cfg.k_percent)?;
            Ok(cfg.metric.compute(&ScorePair::new(member_scores, foil_scores))?)
        })();
        match outcome {
            Ok(value) => per_pair.push(PairValue {
                target: pair.target.clone(),
                foil: pair.foil.clone(),
                value,
            }),
            Err(e) => {
                evidence.record(game, "pair-failure", &pair.key(), &e.to_string());
                failure = Some(format!("pair {}: {e}", pair.key()));
                break;
            }
        }
    }
    if let Some(reason) = failure {
        return Ok(GameOutcome {
            game: game.into(),
            value: 0.0,
            alpha: cfg.alpha_ddi,
            pass: false,
            per_pair,
            detail: reason,
        });
    }
    let values: Vec<f64> = per_pair.iter().map(|p| p.value).collect();
    let (mean, std) = aggregate(&values);
    let pass = mean >= cfg.alpha_ddi;
    Ok(GameOutcome {
        game: game.into(),
        value: mean,
        alpha: cfg.alpha_ddi,
        pass,
        per_pair,
        detail: format!(
            "{}/{} over {} pairs: {:.4} +- {:.4}",
            cfg.attack.name(),
            cfg.metric.name(),
            values.len(),
            mean,
            std
        ),
    })
}

/// Game 2: replay the target's training prompts under the right credential
/// and a disjoint wrong one; enforcement should make the right credential
/// strictly more useful. The verdict is signed: utility flowing the wrong
/// way is a failure even when the magnitude is large.
pub fn utility_gap_game(
    addr: &SocketAddr,
    train: &Corpus,
    cfg: &GameConfig,
    evidence: &mut EvidenceLog,
) -> Result<GameOutcome, AuditError> {
    let game = "utility-gap";
    let mut per_pair = Vec::with_capacity(cfg.pairs.len());
    let mut failure: Option<String> = None;
    for pair in &cfg.pairs {
        let mut client = GatewayClient::connect(addr)
            .map_err(|e| AuditError::Malformed(format!("connect failed: {e}")))?;
        let token_u = mint_token(&mut client, evidence, game, &domain_strings(&pair.target))?;
        let token_v = mint_token(&mut client, evidence, game, &domain_strings(&pair.foil))?;
        let queries = sample_pair_queries(train, pair, cfg.ugi_samples, cfg.seed)?;

        let outcome = (|| -> Result<f64, AuditError> {
            let (mut right, mut wrong) = (0.0, 0.0);
            for (i, r) in queries.iter().enumerate() {
                for (which, token, acc) in
                    [("right", &token_u, &mut right), ("wrong", &token_v, &mut wrong)]
                {
                    let id = format!("ugi-{}-{}-{}", pair.key(), which, i);
                    let resp = client
                        .query(&id, token, &r.prompt, Some(cfg.max_new_tokens))
                        .map_err(|e| AuditError::Malformed(format!("query failed: {e}")))?;
                    evidence.record(
                        game,
                        which,
                        &r.prompt,
                        resp.response.as_deref().unwrap_or_else(|| {
                            resp.error.as_deref().unwrap_or("<no response>")
                        }),
                    );
                    if let Some(err) = resp.error {
                        return Err(AuditError::Malformed(format!("gateway error: {err}")));
                    }
                    let text = resp.response.unwrap_or_default();
                    *acc += cfg.utility.compute(&text, &r.answer);
                }
            }
            let n = queries.len() as f64;
            let right = RelevanceScore::new(right / n, RelevanceKind::Utility)?;
            let wrong = RelevanceScore::new(wrong / n, RelevanceKind::Utility)?;
            Ok(right.value - wrong.value) // signed
        })();
        match outcome {
            Ok(gap) => {
                if gap < 0.0 {
                    evidence.record(
                        game,
                        "inverted-utility",
                        &pair.key(),
                        &format!("utility higher under the wrong credential: gap {gap:.4}"),
                    );
                }
                per_pair.push(PairValue {
                    target: pair.target.clone(),
                    foil: pair.foil.clone(),
                    value: gap,
                });
            }
            Err(e) => {
                evidence.record(game, "pair-failure", &pair.key(), &e.to_string());
                failure = Some(format!("pair {}: {e}", pair.key()));
                break;
            }
        }
    }
    if let Some(reason) = failure {
        return Ok(GameOutcome {
            game: game.into(),
            value: 0.0,
            alpha: cfg.alpha_ugi,
            pass: false,
            per_pair,
            detail: reason,
        });
    }
    let values: Vec<f64> = per_pair.iter().map(|p| p.value).collect();
    let (mean, std) = aggregate(&values);
    let inverted = values.iter().any(|&v| v < 0.0);
    let pass = mean >= cfg.alpha_ugi && !inverted;
    let mut detail = format!(
        "{} signed gap over {} pairs: {:.4} +- {:.4}",
        cfg.utility.name(),
        values.len(),
        mean,
        std
    );
    if inverted {
        detail.push_str("; utility flowed to the wrong credential");
    }
    Ok(GameOutcome {
        game: game.into(),
        value: mean,
        alpha: cfg.alpha_ugi,
        pass,
        per_pair,
        detail,
    })
}

/// Runs the requested game; `Access` runs both and requires both to pass.
pub fn run_game(
    addr: &SocketAddr,
    train: &Corpus,
    kind: GameKind,
    cfg: &GameConfig,
    evidence: &mut EvidenceLog,
) -> Result<Vec<GameOutcome>, AuditError> {
    match kind {
        GameKind::Distinguishability => {
            Ok(vec![distinguishability_game(addr, train, cfg, evidence)?])
        }
        GameKind::UtilityGap => Ok(vec![utility_gap_game(addr, train, cfg, evidence)?]),
        GameKind::Access => {
            let d = distinguishability_game(addr, train, cfg, evidence)?;
            let u = utility_gap_game(addr, train, cfg, evidence)?;
            let pass = d.pass && u.pass;
            let combined = GameOutcome {
                game: "access".into(),
                value: d.value.min(if u.pass { 1.0 } else { 0.0 }),
                alpha: cfg.alpha_ddi,
                pass,
                per_pair: Vec::new(),
                detail: format!(
                    "distinguishability {} (value {:.4}), utility-gap {} (value {:.4})",
                    if d.pass { "PASS" } else { "FAIL" },
                    d.value,
                    if u.pass { "PASS" } else { "FAIL" },
                    u.value
                ),
            };
            Ok(vec![d, u, combined])
        }
    }
}
