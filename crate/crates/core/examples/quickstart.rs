//! In-process end-to-end tour: generate a corpus, train the activate
//! mechanism, serve it, query it with two different credentials, and run
//! the audit games.
//!
//! Run: cargo run --release -p permllm-core --example quickstart

use std::sync::Arc;

use permllm_core::audit::{enumerate_pairs, MiaMetric, UtilityMetric};
use permllm_core::corpus::{generate_corpus, CorpusMode, CorpusSpec};
use permllm_core::domain::DomainSet;
use permllm_core::game::{run_game, EvidenceLog, GameConfig, GameKind};
use permllm_core::gateway::{CredentialStore, Engine, Gateway, GatewayConfig};
use permllm_core::mechanisms::{build_map, train_all, Mechanism, TrainOptions};
use permllm_core::mia::Attack;
use permllm_core::model::{init_model, ModelConfig};
use permllm_core::server::{serve, GatewayClient};
use permllm_core::tokenizer::Tokenizer;
use permllm_core::train::TrainConfig;

fn main() {
    let corpus = generate_corpus(&CorpusSpec {
        n_domains: 3,
        records_per_domain: 100,
        mode: CorpusMode::Disjoint,
        seed: 7,
    })
    .unwrap();
    let texts = corpus.all_texts();
    let tokenizer = Tokenizer::from_texts(texts.iter().map(|s| s.as_str())).unwrap();
    let mcfg = ModelConfig::desk_default(tokenizer.vocab_size(), 1);
    let base = init_model(&mcfg).unwrap();
    let (map, mut store) = build_map(&corpus.domains, &[], Mechanism::Activate, &mcfg).unwrap();
    println!("training {} adapters ...", store.ids().len());
    train_all(
        &base,
        &tokenizer,
        &corpus,
        &map,
        &mut store,
        &TrainConfig::default(),
        TrainOptions::default(),
    )
    .unwrap();

    let engine = Engine::new(base, tokenizer, map, store);
    let gateway = Arc::new(Gateway::new(
        engine,
        CredentialStore::new(),
        GatewayConfig { expose_provenance: false, audit_mode: true },
    ));
    let token_d0 = gateway.register_user(DomainSet::singleton(corpus.domains[0].clone())).unwrap();
    let token_d1 = gateway.register_user(DomainSet::singleton(corpus.domains[1].clone())).unwrap();

    let handle = serve(gateway, "127.0.0.1:0").unwrap();
    println!("gateway on {}", handle.addr());

    let mut client = GatewayClient::connect(&handle.addr()).unwrap();
    let record = &corpus.records_of(&corpus.domains[0])[0];
    println!("prompt: {}", record.prompt);
    for (who, token) in [("d0 credential", &token_d0), ("d1 credential", &token_d1)] {
        let resp = client.query("demo", token, &record.prompt, Some(8)).unwrap();
        println!("{who}: {:?} (expected {:?})", resp.response.unwrap_or_default(), record.answer);
    }

    let pairs = enumerate_pairs(&corpus.domains, 1).unwrap();
    let cfg = GameConfig {
        pairs,
        attack: Attack::Loss,
        metric: MiaMetric::AucRoc,
        utility: UtilityMetric::Verbatim,
        samples_per_side: 50,
        ugi_samples: 50,
        ..Default::default()
    };
    let mut evidence = EvidenceLog::disabled();
    let outcomes =
        run_game(&handle.addr(), &corpus, GameKind::Access, &cfg, &mut evidence).unwrap();
    for o in &outcomes {
        println!(
            "{:<20} value {:.4} alpha {:.2} -> {}",
            o.game,
            o.value,
            o.alpha,
            if o.pass { "PASS" } else { "FAIL" }
        );
    }
    handle.shutdown();
}
