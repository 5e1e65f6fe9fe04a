mod common;

use common::{embed_handler, fake_vector, MockServer};
use masc::correction::{apply_correction, CorrectionPolicySpec, CorrectionRequest, CorrectionStats, RemoteChatPolicy};
use masc::detector::{AnomalyVerdict, BackboneSpec};
use masc::embedding::{Embedder, EmbedderSpec, EmbeddingCache, RemoteEmbedder};
use masc::http::HttpOptions;
use masc::synthetic::normal_corpus;
use masc::training::{train, TrainConfig};
use masc::MascError;
use serde_json::json;

fn quick() -> HttpOptions {
    HttpOptions { attempts: 2, timeout_secs: 5.0, backoff_ms: 0, max_in_flight: 2 }
}

fn flagged_verdict() -> AnomalyVerdict {
    AnomalyVerdict { t: 2, score: 3.0, recon_term: 2.0, proto_term: 1.0, alpha: 1.0, beta: 1.0, delta: 1.0, flagged: true }
}

/// A port that refuses connections.
fn dead_endpoint() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", l.local_addr().unwrap());
    drop(l);
    url
}

#[test]
fn embed_contract_request_shape_and_vectors() {
    let server = MockServer::start(embed_handler(6));
    let e = RemoteEmbedder::new(&server.url(), "enc-1", 6, None, quick()).unwrap();
    let vs = e.embed_batch(&["alpha", "beta"]).unwrap();
    assert_eq!(vs[0].as_slice(), fake_vector("alpha", 6).as_slice());
    assert_eq!(vs[1].as_slice(), fake_vector("beta", 6).as_slice());
    assert_eq!(server.paths(), vec!["/embed"]);
    assert_eq!(server.bodies()[0], json!({"model": "enc-1", "texts": ["alpha", "beta"]}));
}

#[test]
fn wrong_dimension_is_a_config_error() {
    let server = MockServer::start(embed_handler(5));
    let e = RemoteEmbedder::new(&server.url(), "m", 6, None, quick()).unwrap();
    assert!(matches!(e.embed_text("x"), Err(MascError::Config(_))));
}

#[test]
fn cache_serves_repeats_and_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.cache");
    let server = MockServer::start(embed_handler(4));
    {
        let e = RemoteEmbedder::new(&server.url(), "m", 4, Some(EmbeddingCache::open(&path).unwrap()), quick()).unwrap();
        e.embed_batch(&["a", "b"]).unwrap();
        e.embed_batch(&["a", "b"]).unwrap();
        assert_eq!(server.hits(), 1);
        e.embed_batch(&["a", "c"]).unwrap();
        assert_eq!(server.hits(), 2);
        assert_eq!(server.bodies()[1]["texts"], json!(["c"]));
    }
    let e = RemoteEmbedder::new(&dead_endpoint(), "m", 4, Some(EmbeddingCache::open(&path).unwrap()), quick()).unwrap();
    assert_eq!(e.embed_text("c").unwrap().as_slice(), fake_vector("c", 4).as_slice());
    // The cache key includes the model name.
    let other = RemoteEmbedder::new(&dead_endpoint(), "other", 4, Some(EmbeddingCache::open(&path).unwrap()), quick()).unwrap();
    assert!(matches!(other.embed_text("c"), Err(MascError::Transport { .. })));
}

#[test]
fn torn_cache_tail_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.cache");
    let server = MockServer::start(embed_handler(3));
    {
        let e = RemoteEmbedder::new(&server.url(), "m", 3, Some(EmbeddingCache::open(&path).unwrap()), quick()).unwrap();
        e.embed_batch(&["a", "b"]).unwrap();
    }
    let full = std::fs::metadata(&path).unwrap().len();
    let f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
    f.set_len(full - 5).unwrap();
    let cache = EmbeddingCache::open(&path).unwrap();
    assert_eq!(cache.len(), 1);
    assert!(std::fs::metadata(&path).unwrap().len() < full - 5);
}

#[test]
fn server_errors_are_retried() {
    let calls = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let c = calls.clone();
    let ok = embed_handler(2);
    let server = MockServer::start(move |req| {
        if c.fetch_add(1, std::sync::atomic::Ordering::SeqCst) == 0 {
            (500, json!({"error": "busy"}))
        } else {
            ok(req)
        }
    });
    let e = RemoteEmbedder::new(&server.url(), "m", 2, None, quick()).unwrap();
    assert!(e.embed_text("x").is_ok());
    assert_eq!(server.hits(), 2);
}

#[test]
fn exhausted_retries_surface_as_transport() {
    let server = MockServer::start(|_| (503, json!({})));
    let e = RemoteEmbedder::new(&server.url(), "m", 2, None, quick()).unwrap();
    match e.embed_text("x") {
        Err(MascError::Transport { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("expected transport error, got {other:?}"),
    }
}

#[test]
fn remote_embedder_spec_builds_with_cache_path() {
    let dir = tempfile::tempdir().unwrap();
    let server = MockServer::start(embed_handler(8));
    let mut spec = EmbedderSpec::remote(&server.url(), "m", 8);
    spec.cache_path = Some(dir.path().join("c.bin").to_string_lossy().into_owned());
    let e = spec.build_with(quick()).unwrap();
    assert_eq!(e.dimension(), 8);
    e.embed_text("q").unwrap();
    e.embed_text("q").unwrap();
    assert_eq!(server.hits(), 1);
}

#[test]
fn chat_contract_and_applied_correction() {
    let server = MockServer::start(|_| {
        (200, json!({"content": "{\"correction_needed\": \"Yes\", \"final_response\": \"the answer is 12\"}"}))
    });
    let policy = RemoteChatPolicy::new(&server.url(), "chat-1", quick());
    let req = CorrectionRequest::new("solver", "Start with 3, then add 9.", vec![("decomposer".into(), "plan".into())], "the answer is 99");
    let mut stats = CorrectionStats::default();
    let out = apply_correction(&policy, &flagged_verdict(), &req, &mut stats);
    assert_eq!(out.output, "the answer is 12");
    assert_eq!((stats.calls, stats.interventions, stats.failures), (1, 1, 0));
    let body = &server.bodies()[0];
    assert_eq!(server.paths(), vec!["/chat"]);
    assert_eq!(body["model"], "chat-1");
    assert_eq!(body["messages"][0]["role"], "user");
    let prompt = body["messages"][0]["content"].as_str().unwrap();
    assert!(prompt.contains("correction_needed") && prompt.contains("final_response"));
    assert!(prompt.contains("the answer is 99"));
}

#[test]
fn unflagged_steps_never_reach_the_corrector() {
    let server = MockServer::start(|_| (200, json!({"content": "{}"})));
    let policy = CorrectionPolicySpec::remote_chat(&server.url(), "c").build().unwrap();
    let mut v = flagged_verdict();
    v.flagged = false;
    let req = CorrectionRequest::new("solver", "q", vec![], "orig");
    let mut stats = CorrectionStats::default();
    assert_eq!(apply_correction(policy.as_ref(), &v, &req, &mut stats).output, "orig");
    assert_eq!(server.hits(), 0);
    assert_eq!(stats.calls, 0);
}

#[test]
fn transport_failure_fails_open() {
    let policy = RemoteChatPolicy::new(&dead_endpoint(), "c", quick());
    let req = CorrectionRequest::new("checker", "q", vec![], "keep me");
    let mut stats = CorrectionStats::default();
    let out = apply_correction(&policy, &flagged_verdict(), &req, &mut stats);
    assert_eq!(out.output, "keep me");
    assert!(out.failure.is_some());
    assert_eq!((stats.calls, stats.failures, stats.interventions), (1, 1, 0));
}

#[test]
fn non_protocol_chat_reply_keeps_original() {
    let server = MockServer::start(|_| (200, json!({"content": "Sure, here is a fix: 12"})));
    let policy = RemoteChatPolicy::new(&server.url(), "c", quick());
    let req = CorrectionRequest::new("solver", "q", vec![], "orig");
    let mut stats = CorrectionStats::default();
    let out = apply_correction(&policy, &flagged_verdict(), &req, &mut stats);
    assert_eq!(out.output, "orig");
    assert_eq!(stats.protocol_violations, 1);
}

#[test]
fn remote_backbone_trains_on_served_context_states() {
    let server = MockServer::start(embed_handler(8));
    let cfg = TrainConfig {
        epochs: 2,
        d_h: 8,
        embedder: EmbedderSpec::hashing(8),
        backbone: BackboneSpec::remote_llm(&server.url(), "ctx", 8),
        ..TrainConfig::hc()
    };
    let data = normal_corpus(4, 3, 1).unwrap();
    let (_, report) = train(&cfg, &data).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert!(report.epochs.iter().all(|e| e.mean_total.is_finite()));
    assert_eq!(server.hits(), 4);
    let texts = server.bodies()[0]["texts"].as_array().unwrap().len();
    assert_eq!(texts, 3);
}
