//! Client behavior against the bundled stub server: wire format, retries,
//! parallelism limits, and the lexical scoring rule end to end.

use std::sync::Arc;
use std::time::Duration;

use ctxtrace::error::Error;
use ctxtrace::llm::stub::{StubBehavior, StubServer, LOGPROB_KNOWN, LOGPROB_NOVEL};
use ctxtrace::llm::{assemble_prompt, BackendConfig, LlmClient, LogProbBackend};
use ctxtrace::value::{ScoreSpace, SubsetKey, ValueEngine};

fn client_against(server: &StubServer, cfg: BackendConfig) -> Arc<LlmClient> {
    LlmClient::new(BackendConfig {
        base_url: server.base_url(),
        ..cfg
    })
    .unwrap()
}

#[test]
fn scored_total_is_sum_of_token_logprobs() {
    let server = StubServer::spawn(StubBehavior::default()).unwrap();
    let client = client_against(&server, BackendConfig::default());
    // the prompt ends with a space, so output tokens align at the cutoff
    let scored = client.score_output("alpha beta ", "gamma alpha").unwrap();
    let tokens: Vec<&str> = scored.token_logprobs.iter().map(|(t, _)| t.as_str()).collect();
    assert_eq!(tokens, vec!["gamma", "alpha"]);
    // "gamma" is novel, "alpha" already appeared in the prompt
    assert_eq!(scored.token_logprobs[0].1, LOGPROB_NOVEL);
    assert_eq!(scored.token_logprobs[1].1, LOGPROB_KNOWN);
    let sum: f64 = scored.token_logprobs.iter().map(|(_, l)| l).sum();
    assert_eq!(scored.total, sum);
}

#[test]
fn missing_logprob_support_is_a_protocol_error() {
    let server = StubServer::spawn(StubBehavior {
        support_logprobs: false,
        ..StubBehavior::default()
    })
    .unwrap();
    let client = client_against(&server, BackendConfig::default());
    match client.score_output("prompt ", "output") {
        Err(Error::ProtocolError(_)) => {}
        other => panic!("unexpected: {other:?}"),
    }
}

#[test]
fn transient_failures_retry_and_preserve_the_value() {
    let baseline_server = StubServer::spawn(StubBehavior::default()).unwrap();
    let baseline = client_against(&baseline_server, BackendConfig::default())
        .score_output("one two ", "two three")
        .unwrap();

    let flaky_server = StubServer::spawn(StubBehavior {
        fail_first: 2,
        ..StubBehavior::default()
    })
    .unwrap();
    let client = client_against(
        &flaky_server,
        BackendConfig {
            max_retries: 3,
            ..BackendConfig::default()
        },
    );
    let scored = client.score_output("one two ", "two three").unwrap();
    assert_eq!(scored, baseline);
    assert_eq!(flaky_server.request_count(), 3);
}

#[test]
fn retries_exhausted_reports_last_error() {
    let server = StubServer::spawn(StubBehavior {
        fail_first: 10,
        ..StubBehavior::default()
    })
    .unwrap();
    let client = client_against(
        &server,
        BackendConfig {
            max_retries: 1,
            ..BackendConfig::default()
        },
    );
    match client.score_output("p ", "o") {
        Err(Error::HttpError { status: 500, .. }) => {}
        other => panic!("unexpected: {other:?}"),
    }
    assert_eq!(server.request_count(), 2);
}

#[test]
fn request_parallelism_is_enforced() {
    let server = StubServer::spawn(StubBehavior {
        delay: Duration::from_millis(30),
        ..StubBehavior::default()
    })
    .unwrap();
    let client = client_against(
        &server,
        BackendConfig {
            request_parallelism: 2,
            ..BackendConfig::default()
        },
    );
    std::thread::scope(|scope| {
        for i in 0..8 {
            let client = Arc::clone(&client);
            scope.spawn(move || {
                let prompt = format!("prompt number {i} ");
                client.score_output(&prompt, "tail").unwrap();
            });
        }
    });
    assert_eq!(server.request_count(), 8);
    assert!(
        server.max_in_flight() <= 2,
        "observed {} in flight",
        server.max_in_flight()
    );
}

#[test]
fn generation_returns_canned_completion_deterministically() {
    let server = StubServer::spawn(StubBehavior {
        canned: vec![("capital of France".into(), "Paris".into())],
        default_completion: "unknown".into(),
        ..StubBehavior::default()
    })
    .unwrap();
    let client = client_against(&server, BackendConfig::default());
    let a = client.generate("What is the capital of France?", 16).unwrap();
    let b = client.generate("What is the capital of France?", 16).unwrap();
    assert_eq!(a, "Paris");
    assert_eq!(a, b);
    assert_eq!(client.generate("anything else", 16).unwrap(), "unknown");
}

#[test]
fn logprob_backend_rewards_texts_containing_the_output() {
    let server = StubServer::spawn(StubBehavior::default()).unwrap();
    let client = client_against(&server, BackendConfig::default());
    let backend = LogProbBackend {
        client,
        instruction: "What is the secret ingredient?".into(),
        texts: vec![
            "filler0 filler1 filler2".into(),
            "the secret ingredient is prosciutto".into(),
            "filler3 filler4 filler5".into(),
        ],
        output: "prosciutto".into(),
        space: ScoreSpace::LogProbSum,
    };
    let engine = ValueEngine::new(Box::new(backend));
    let with_needle = engine.eval(&SubsetKey::new([1])).unwrap().value;
    let without_needle = engine.eval(&SubsetKey::new([0, 2])).unwrap().value;
    assert!(with_needle > without_needle);
    assert_eq!(with_needle, LOGPROB_KNOWN);
    assert_eq!(without_needle, LOGPROB_NOVEL);
}

#[test]
fn per_token_mean_divides_by_output_length() {
    let server = StubServer::spawn(StubBehavior::default()).unwrap();
    let client = client_against(&server, BackendConfig::default());
    let prompt = assemble_prompt("q", &["alpha beta"]);
    let scored = client.score_output(&prompt, "alpha gamma").unwrap();
    assert_eq!(scored.token_logprobs.len(), 2);
    let backend = LogProbBackend {
        client,
        instruction: "q".into(),
        texts: vec!["alpha beta".into()],
        output: "alpha gamma".into(),
        space: ScoreSpace::PerTokenMean,
    };
    let engine = ValueEngine::new(Box::new(backend));
    let mean = engine.eval(&SubsetKey::new([0])).unwrap().value;
    assert!((mean - scored.total / 2.0).abs() < 1e-12);
}
