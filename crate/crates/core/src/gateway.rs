//! The enclosing system: opaque credentials bound to domain sets, query
//! routing through the mechanism, and provenance recording.
//!
//! Clients hold random capability tokens; the binding token -> domain set
//! lives only on the server and no request field can name domains or
//! adapters. Every request's adapter usage is recorded internally; the
//! response only carries it when the gateway runs with provenance exposure
//! turned on.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainId, DomainSet};
use crate::mechanisms::{
    prompt_baseline, selection_for, AdapterStore, DomainAdapterMap, Mechanism, MechanismError,
};
use crate::model::{
    generate_ids, token_logprobs_with_prefix, ActiveAdapters, AdapterSelection, BaseWeights,
    LogProbStat, StatWeighting,
};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication failed")]
    AuthFailed,
    #[error("unknown domain: {0}")]
    UnknownDomain(DomainId),
    #[error("unknown combination")]
    UnknownCombination,
    #[error("query must be non-empty")]
    EmptyQuery,
    #[error("query exceeds maximum length {0}")]
    QueryTooLong(usize),
    #[error("adapter {0} is not available (not trained or merged yet)")]
    AdapterUnavailable(String),
    #[error("scoring text must tokenize to at least 2 tokens")]
    TextTooShort,
    #[error("audit plane is disabled")]
    AuditDisabled,
    #[error("model failure: {0}")]
    Model(String),
}

impl GatewayError {
    /// Stable wire code. Authentication stays a closed response.
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::AuthFailed => "auth_failed",
            GatewayError::UnknownDomain(_) => "unknown_domain",
            GatewayError::UnknownCombination => "unknown combination",
            GatewayError::EmptyQuery | GatewayError::QueryTooLong(_) => "bad_request",
            GatewayError::AdapterUnavailable(_) => "adapter_unavailable",
            GatewayError::TextTooShort => "bad_request",
            GatewayError::AuditDisabled => "audit_disabled",
            GatewayError::Model(_) => "model_error",
        }
    }
}

/// A registered credential: random token, server-side domain binding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Principal {
    pub token: String,
    pub domain_set: DomainSet,
    pub created_at: u64,
}

fn fresh_token() -> String {
    let mut bytes = [0u8; 16];
    let mut filled = false;
    if let Ok(mut f) = std::fs::File::open("/dev/urandom") {
        filled = f.read_exact(&mut bytes).is_ok();
    }
    if !filled {
        // entropy fallback: time + a process-wide counter through the mixer
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let mut rng = crate::rng::SplitMix64::new(
            now.as_nanos() as u64 ^ COUNTER.fetch_add(1, Ordering::Relaxed).wrapping_mul(0x9e37),
        );
        bytes[..8].copy_from_slice(&rng.next_u64().to_le_bytes());
        bytes[8..].copy_from_slice(&rng.next_u64().to_le_bytes());
    }
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Server-side token table.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct CredentialStore {
    principals: HashMap<String, Principal>,
}

impl CredentialStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        domain_set: DomainSet,
        universe: &[DomainId],
    ) -> Result<String, GatewayError> {
        for d in domain_set.members() {
            if !universe.contains(d) {
                return Err(GatewayError::UnknownDomain(d.clone()));
            }
        }
        loop {
            let token = fresh_token();
            if self.principals.contains_key(&token) {
                continue;
            }
            self.principals.insert(
                token.clone(),
                Principal { token: token.clone(), domain_set, created_at: unix_now() },
            );
            return Ok(token);
        }
    }

    pub fn authenticate(&self, token: &str) -> Result<DomainSet, GatewayError> {
        self.principals
            .get(token)
            .map(|p| p.domain_set.clone())
            .ok_or(GatewayError::AuthFailed)
    }

    /// Takes effect for requests authenticated after this call.
    pub fn revoke(&mut self, token: &str) -> bool {
        self.principals.remove(token).is_some()
    }

    pub fn len(&self) -> usize {
        self.principals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.principals.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        let json = serde_json::to_string_pretty(self).expect("credentials serialize");
        crate::fsutil::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Immutable model-side state shared across request handlers.
pub struct Engine {
    pub base: BaseWeights,
    pub tokenizer: Tokenizer,
    pub map: DomainAdapterMap,
    pub adapters: AdapterStore,
    pub default_max_new_tokens: usize,
    pub max_query_chars: usize,
}

impl Engine {
    pub fn new(
        base: BaseWeights,
        tokenizer: Tokenizer,
        map: DomainAdapterMap,
        adapters: AdapterStore,
    ) -> Self {
        Self {
            base,
            tokenizer,
            map,
            adapters,
            default_max_new_tokens: 16,
            max_query_chars: 4096,
        }
    }

    pub fn mechanism(&self) -> Mechanism {
        self.map.mechanism
    }

    pub fn selection(&self, set: &DomainSet) -> Result<AdapterSelection, GatewayError> {
        selection_for(&self.map, set).map_err(|e| match e {
            MechanismError::UnknownCombination(_) => GatewayError::UnknownCombination,
            MechanismError::UnknownDomain(d) => GatewayError::UnknownDomain(d),
            other => GatewayError::Model(other.to_string()),
        })
    }

    fn resolve(&self, selection: &AdapterSelection) -> Result<ActiveAdapters<'_>, GatewayError> {
        let ids = selection.adapter_ids();
        for id in &ids {
            if self.adapters.get(id).is_none() {
                return Err(GatewayError::AdapterUnavailable(id.clone()));
            }
        }
        crate::model::resolve_selection(selection, |id| self.adapters.get(id))
            .map_err(|e| GatewayError::Model(e.to_string()))
    }

    /// Query text as the model sees it: the baseline prepends its domain
    /// prefix, every other mechanism passes the query through.
    pub fn effective_query(&self, set: &DomainSet, query: &str) -> String {
        if self.mechanism() == Mechanism::PromptBaseline {
            prompt_baseline(set, query)
        } else {
            query.to_string()
        }
    }

    /// Greedy continuation for an authenticated domain set.
    pub fn generate_for(
        &self,
        set: &DomainSet,
        query: &str,
        max_new_tokens: usize,
    ) -> Result<(String, Vec<String>), GatewayError> {
        if query.is_empty() {
            return Err(GatewayError::EmptyQuery);
        }
        if query.len() > self.max_query_chars {
            return Err(GatewayError::QueryTooLong(self.max_query_chars));
        }
        let selection = self.selection(set)?;
        let active = self.resolve(&selection)?;
        let text = self.effective_query(set, query);
        let prompt_ids = self.tokenizer.tokenize(&text);
        let out_ids = generate_ids(
            &self.base,
            &active,
            self.tokenizer.bos_id(),
            self.tokenizer.eos_id(),
            &prompt_ids,
            max_new_tokens,
        )
        .map_err(|e| GatewayError::Model(e.to_string()))?;
        let out = self.tokenizer.detokenize(&out_ids).expect("generated ids in range");
        Ok((out, selection.adapter_ids()))
    }

    /// Per-token scoring trace of `text` under the set's activation.
    ///
    /// Activation means adapters only. The prompt baseline's prefix is a
    /// query rewrite on the generation path, not part of activation, so
    /// candidate texts are scored as-is; under the baseline every set maps
    /// to the same shared adapter, which is precisely its weakness.
    pub fn trace_for(
        &self,
        set: &DomainSet,
        text: &str,
        weighting: StatWeighting,
    ) -> Result<Vec<LogProbStat>, GatewayError> {
        let selection = self.selection(set)?;
        let active = self.resolve(&selection)?;
        let text_ids = self.tokenizer.tokenize(text);
        token_logprobs_with_prefix(
            &self.base,
            &active,
            self.tokenizer.bos_id(),
            &[],
            &text_ids,
            weighting,
        )
        .map_err(|e| match e {
            crate::model::ModelError::TextTooShort(_) => GatewayError::TextTooShort,
            other => GatewayError::Model(other.to_string()),
        })
    }
}

/// One served request as recorded internally, regardless of exposure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub request_id: String,
    pub domain_key: String,
    pub adapters: Vec<String>,
    pub at: u64,
}

/// Wire request. Unknown fields are ignored; there is deliberately no field
/// through which a client could name domains or adapters for routing.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Request {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default)]
    pub query: Option<String>,
    #[serde(default)]
    pub max_new_tokens: Option<usize>,
    /// Audit plane: trace this text instead of generating (audit mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<String>,
    /// Audit plane: mint a token for these domains (audit mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub register: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Response {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<LogProbStat>>,
}

impl Response {
    pub fn error_with_id(id: Option<String>, code: &str) -> Self {
        Response { id, error: Some(code.to_string()), ..Default::default() }
    }
}

#[derive(Default)]
pub struct GatewayConfig {
    pub expose_provenance: bool,
    /// Enables over-the-wire token minting and trace scoring for auditors.
    pub audit_mode: bool,
}

pub struct Gateway {
    pub engine: Engine,
    credentials: RwLock<CredentialStore>,
    provenance_log: Mutex<Vec<ProvenanceRecord>>,
    pub config: GatewayConfig,
}

impl Gateway {
    pub fn new(engine: Engine, credentials: CredentialStore, config: GatewayConfig) -> Self {
        Self {
            engine,
            credentials: RwLock::new(credentials),
            provenance_log: Mutex::new(Vec::new()),
            config,
        }
    }

    pub fn register_user(&self, set: DomainSet) -> Result<String, GatewayError> {
        let universe = self.engine.map.universe();
        self.credentials.write().expect("credential lock").register(set, &universe)
    }

    pub fn authenticate(&self, token: &str) -> Result<DomainSet, GatewayError> {
        self.credentials.read().expect("credential lock").authenticate(token)
    }

    pub fn revoke(&self, token: &str) -> bool {
        self.credentials.write().expect("credential lock").revoke(token)
    }

    pub fn provenance_log(&self) -> Vec<ProvenanceRecord> {
        self.provenance_log.lock().expect("provenance lock").clone()
    }

    fn record_provenance(&self, request_id: &str, set: &DomainSet, adapters: &[String]) {
        self.provenance_log.lock().expect("provenance lock").push(ProvenanceRecord {
            request_id: request_id.to_string(),
            domain_key: set.key(),
            adapters: adapters.to_vec(),
            at: unix_now(),
        });
    }

    /// The full authenticated pipeline for one query.
    pub fn handle_query(
        &self,
        request_id: &str,
        token: &str,
        query: &str,
        max_new_tokens: Option<usize>,
    ) -> Result<Response, GatewayError> {
        let set = self.authenticate(token)?;
        let budget = max_new_tokens
            .unwrap_or(self.engine.default_max_new_tokens)
            .min(self.engine.base.config.context_len);
        let (text, adapters) = self.engine.generate_for(&set, query, budget)?;
        self.record_provenance(request_id, &set, &adapters);
        Ok(Response {
            id: Some(request_id.to_string()),
            response: Some(text),
            provenance: if self.config.expose_provenance { Some(adapters) } else { None },
            ..Default::default()
        })
    }

    /// Wire-level dispatch; every error becomes an error response.
    pub fn handle_request(&self, req: &Request) -> Response {
        let id = req.id.clone();
        if let Some(domains) = &req.register {
            return match self.wire_register(domains) {
                Ok(token) => Response { id, token: Some(token), ..Default::default() },
                Err(e) => Response::error_with_id(id, e.code()),
            };
        }
        if let Some(text) = &req.score {
            return match self.wire_score(req.token.as_deref(), text) {
                Ok(trace) => Response { id, trace: Some(trace), ..Default::default() },
                Err(e) => Response::error_with_id(id, e.code()),
            };
        }
        let (Some(token), Some(query)) = (req.token.as_deref(), req.query.as_deref()) else {
            return Response::error_with_id(id, "bad_request");
        };
        let rid = id.clone().unwrap_or_default();
        match self.handle_query(&rid, token, query, req.max_new_tokens) {
            Ok(resp) => resp,
            Err(e) => Response::error_with_id(id, e.code()),
        }
    }

    fn wire_register(&self, domains: &[String]) -> Result<String, GatewayError> {
        if !self.config.audit_mode {
            return Err(GatewayError::AuditDisabled);
        }
        let mut ids = Vec::with_capacity(domains.len());
        for d in domains {
            ids.push(
                DomainId::new(d.clone())
                    .map_err(|_| GatewayError::UnknownDomain(DomainId::new("?").unwrap()))?,
            );
        }
        self.register_user(DomainSet::new(ids))
    }

    fn wire_score(&self, token: Option<&str>, text: &str) -> Result<Vec<LogProbStat>, GatewayError> {
        if !self.config.audit_mode {
            return Err(GatewayError::AuditDisabled);
        }
        let token = token.ok_or(GatewayError::AuthFailed)?;
        let set = self.authenticate(token)?;
        self.engine.trace_for(&set, text, StatWeighting::Probability)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusMode, CorpusSpec};
    use crate::mechanisms::{build_map, vocabulary_texts};
    use crate::model::{init_model, ModelConfig};

    pub(crate) fn test_gateway(mechanism: Mechanism, config: GatewayConfig) -> Gateway {
        let corpus = generate_corpus(&CorpusSpec {
            n_domains: 3,
            records_per_domain: 10,
            mode: CorpusMode::Disjoint,
            seed: 5,
        })
        .unwrap();
        let texts = vocabulary_texts(&corpus, mechanism);
        let tok = Tokenizer::from_texts(texts.iter().map(|s| s.as_str())).unwrap();
        let mcfg = ModelConfig {
            vocab_size: tok.vocab_size(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            context_len: 48,
            lora_rank: 2,
            lora_alpha: 4.0,
            seed: 9,
        };
        let base = init_model(&mcfg).unwrap();
        let (map, store) = build_map(&corpus.domains, &[], mechanism, &mcfg).unwrap();
        let engine = Engine::new(base, tok, map, store);
        Gateway::new(engine, CredentialStore::new(), config)
    }

    fn dset(ids: &[&str]) -> DomainSet {
        DomainSet::new(ids.iter().map(|s| DomainId::new(*s).unwrap()).collect())
    }

    #[test]
    fn register_and_authenticate() {
        let gw = test_gateway(Mechanism::Activate, GatewayConfig::default());
        let t1 = gw.register_user(dset(&["d0"])).unwrap();
        assert_eq!(t1.len(), 32);
        assert!(t1.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(gw.authenticate(&t1).unwrap(), dset(&["d0"]));
        let t2 = gw.register_user(dset(&["d0"])).unwrap();
        assert_ne!(t1, t2);
        assert!(gw.register_user(dset(&["zz"])).is_err());
        assert!(matches!(gw.authenticate("feedfacefeedfacefeedfacefeedface"), Err(GatewayError::AuthFailed)));
        // empty set is a legal binding
        let t3 = gw.register_user(DomainSet::empty()).unwrap();
        assert!(gw.authenticate(&t3).unwrap().is_empty());
    }

    #[test]
    fn revocation_applies_at_next_authenticate() {
        let gw = test_gateway(Mechanism::Activate, GatewayConfig::default());
        let t = gw.register_user(dset(&["d1"])).unwrap();
        assert!(gw.authenticate(&t).is_ok());
        assert!(gw.revoke(&t));
        assert!(matches!(gw.authenticate(&t), Err(GatewayError::AuthFailed)));
        assert!(!gw.revoke(&t));
    }

    #[test]
    fn query_pipeline_records_provenance_and_hides_it_by_default() {
        let gw = test_gateway(Mechanism::Activate, GatewayConfig::default());
        let t = gw.register_user(dset(&["d1"])).unwrap();
        let resp = gw.handle_query("r1", &t, "what is the", Some(4)).unwrap();
        assert_eq!(resp.id.as_deref(), Some("r1"));
        assert!(resp.response.is_some());
        assert!(resp.provenance.is_none());
        let log = gw.provenance_log();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].adapters, vec!["lora-d1".to_string()]);

        // empty binding serves from the base model with empty provenance
        let t0 = gw.register_user(DomainSet::empty()).unwrap();
        gw.handle_query("r2", &t0, "what is the", Some(2)).unwrap();
        assert!(gw.provenance_log()[1].adapters.is_empty());
    }

    #[test]
    fn exposure_flag_reveals_provenance() {
        let gw = test_gateway(
            Mechanism::Activate,
            GatewayConfig { expose_provenance: true, audit_mode: false },
        );
        let t = gw.register_user(dset(&["d0", "d2"])).unwrap();
        let resp = gw.handle_query("r", &t, "what is the", Some(2)).unwrap();
        assert_eq!(
            resp.provenance,
            Some(vec!["lora-d0".to_string(), "lora-d2".to_string()])
        );
    }

    #[test]
    fn identical_query_is_deterministic() {
        let gw = test_gateway(Mechanism::Activate, GatewayConfig::default());
        let t = gw.register_user(dset(&["d0"])).unwrap();
        let a = gw.handle_query("x", &t, "what is the", Some(8)).unwrap();
        let b = gw.handle_query("y", &t, "what is the", Some(8)).unwrap();
        assert_eq!(a.response, b.response);
    }

    #[test]
    fn injected_routing_fields_are_ignored() {
        let gw = test_gateway(Mechanism::Activate, GatewayConfig::default());
        let t = gw.register_user(dset(&["d0"])).unwrap();
        let line = format!(
            "{{\"id\":\"i\",\"token\":\"{t}\",\"query\":\"what is the\",\"domains\":[\"d1\",\"d2\"],\"adapter\":\"lora-d2\",\"max_new_tokens\":2}}"
        );
        let req: Request = serde_json::from_str(&line).unwrap();
        let resp = gw.handle_request(&req);
        assert!(resp.error.is_none());
        let log = gw.provenance_log();
        assert_eq!(log.last().unwrap().adapters, vec!["lora-d0".to_string()]);
    }

    #[test]
    fn bad_requests_and_auth_failures() {
        let gw = test_gateway(Mechanism::Activate, GatewayConfig::default());
        let resp = gw.handle_request(&Request { id: Some("a".into()), ..Default::default() });
        assert_eq!(resp.error.as_deref(), Some("bad_request"));
        let resp = gw.handle_request(&Request {
            id: Some("b".into()),
            token: Some("deadbeef".into()),
            query: Some("hello".into()),
            ..Default::default()
        });
        assert_eq!(resp.error.as_deref(), Some("auth_failed"));
        let t = gw.register_user(dset(&["d0"])).unwrap();
        let err = gw.handle_query("c", &t, "", None).unwrap_err();
        assert_eq!(err.code(), "bad_request");
    }

    #[test]
    fn audit_plane_is_flag_gated() {
        let gw = test_gateway(Mechanism::Activate, GatewayConfig::default());
        let resp = gw.handle_request(&Request {
            id: Some("r".into()),
            register: Some(vec!["d0".into()]),
            ..Default::default()
        });
        assert_eq!(resp.error.as_deref(), Some("audit_disabled"));

        let gw = test_gateway(
            Mechanism::Activate,
            GatewayConfig { expose_provenance: false, audit_mode: true },
        );
        let resp = gw.handle_request(&Request {
            id: Some("r".into()),
            register: Some(vec!["d0".into(), "d1".into()]),
            ..Default::default()
        });
        let token = resp.token.expect("token minted");
        let resp = gw.handle_request(&Request {
            id: Some("s".into()),
            token: Some(token),
            score: Some("what is the".into()),
            ..Default::default()
        });
        assert!(resp.error.is_none(), "{:?}", resp.error);
        assert!(resp.trace.unwrap().len() >= 2);
    }

    #[test]
    fn baseline_prefixes_queries() {
        let gw = test_gateway(Mechanism::PromptBaseline, GatewayConfig::default());
        let set = dset(&["d0", "d1"]);
        assert_eq!(
            gw.engine.effective_query(&set, "what is the"),
            "use domain d0 d1: what is the"
        );
        let t = gw.register_user(set).unwrap();
        gw.handle_query("r", &t, "what is the", Some(2)).unwrap();
        assert_eq!(gw.provenance_log()[0].adapters, vec!["shared".to_string()]);
    }
}
