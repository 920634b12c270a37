use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::mpsc;
use std::thread;

use reflective_grpo::remote_judge::*;
use reflective_grpo::rewards::*;

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/judge_exchanges.json")
}

fn offline_config() -> RemoteJudgeConfig {
    RemoteJudgeConfig {
        retry_backoff_ms: 0,
        ..Default::default()
    }
}

fn scene(caption: &str) -> SceneRef {
    SceneRef {
        id: "fixture".into(),
        caption: Some(caption.into()),
        ..Default::default()
    }
}

#[test]
fn recorded_exchanges_replay() {
    let tax = EmotionTaxonomy::builtin("emoset").unwrap();
    let transport = FixtureTransport::load(&fixture_path()).unwrap();
    let judge = RemoteJudge::with_transport(offline_config(), None, Box::new(transport)).unwrap();

    let v = judge_yes_no(
        &judge,
        &scene("A photo showing a mountain range at dawn."),
        "I notice a mountain range in the scene.",
        CONSISTENCY_PROMPT,
    )
    .unwrap();
    assert_eq!(v, Verdict::Yes);
    let v = judge_yes_no(
        &judge,
        &scene("A photo showing a sunny beach."),
        "I notice rain on a window in the scene.",
        CONSISTENCY_PROMPT,
    )
    .unwrap();
    assert_eq!(v, Verdict::No);

    let e = |s12: &str| judge_emotion(&judge, s12, COHERENCE_PROMPT, &tax).unwrap();
    assert_eq!(
        e("I notice a mountain range in the scene.\nA human observer would likely feel awe when looking at this."),
        EmotionVerdict::Label("awe".into())
    );
    assert_eq!(
        e("I notice fireworks in the scene.\nA human observer would likely feel excitement when looking at this."),
        EmotionVerdict::Label("excitement".into())
    );
    let sentinel = e("I notice an old photograph in the scene.\nThe viewer drifts into memories.");
    assert!(matches!(sentinel, EmotionVerdict::Unmatched(_)));
    assert_eq!(reward_coherence(&sentinel, "sadness", &tax).unwrap(), 0.0);
}

#[test]
fn recorded_requests_contain_exact_prompts() {
    let text = std::fs::read_to_string(fixture_path()).unwrap();
    let fixtures: Vec<Fixture> = serde_json::from_str(&text).unwrap();
    let mut cons = 0;
    let mut coh = 0;
    for f in &fixtures {
        let body = f.request.to_string();
        assert_eq!(f.request["temperature"], serde_json::json!(0.0));
        cons += body.contains(CONSISTENCY_PROMPT) as usize;
        coh += body.contains(COHERENCE_PROMPT) as usize;
    }
    assert_eq!((cons, coh), (2, 3));
}

#[test]
fn outgoing_requests_are_recorded() {
    let tax = EmotionTaxonomy::builtin("emoset").unwrap();
    let transport = std::sync::Arc::new(FixtureTransport::load(&fixture_path()).unwrap());
    struct Shared(std::sync::Arc<FixtureTransport>);
    impl ChatTransport for Shared {
        fn post(
            &self,
            url: &str,
            key: Option<&str>,
            body: &serde_json::Value,
        ) -> Result<HttpReply, String> {
            self.0.post(url, key, body)
        }
    }
    let judge =
        RemoteJudge::with_transport(offline_config(), None, Box::new(Shared(transport.clone())))
            .unwrap();
    // Not in the fixture file: every attempt is recorded, then the judgment fails.
    let err = remote_emotion(&judge, "unrecorded", &tax).unwrap_err();
    assert!(matches!(err, JudgeError::Unavailable { attempts: 3, .. }));
    let sent = transport.requests();
    assert_eq!(sent.len(), 3);
    assert!(sent[0].to_string().contains(COHERENCE_PROMPT));
}

/// Serves `replies` to successive connections, forwarding each raw request.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    let handle = thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            tx.send(head + &String::from_utf8(buf).unwrap()).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (base, rx, handle)
}

#[test]
fn three_server_errors_with_two_retries_fail_the_judgment() {
    let (base_url, rx, handle) = serve(vec![(500, "{}".into()); 3]);
    let config = RemoteJudgeConfig {
        base_url,
        max_retries: 2,
        timeout_ms: 5_000,
        ..offline_config()
    };
    let judge = RemoteJudge::with_transport(
        config,
        None,
        Box::new(UreqTransport::new(std::time::Duration::from_secs(5))),
    )
    .unwrap();
    let err =
        remote_yes_no(&judge, &scene("A photo."), "I notice a dog in the scene.").unwrap_err();
    assert_eq!(
        err,
        JudgeError::Unavailable {
            attempts: 3,
            reason: "HTTP 500".into()
        }
    );
    handle.join().unwrap();
    assert_eq!(rx.try_iter().count(), 3);
}

#[test]
fn live_transport_sends_key_prompt_and_temperature() {
    let reply = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": "Yes, it does."}}]});
    let (base_url, rx, handle) = serve(vec![(200, reply.to_string())]);
    let config = RemoteJudgeConfig {
        base_url,
        ..offline_config()
    };
    let judge = RemoteJudge::with_transport(
        config,
        Some("sk-test".into()),
        Box::new(UreqTransport::new(std::time::Duration::from_secs(5))),
    )
    .unwrap();
    let v = remote_yes_no(&judge, &scene("A photo."), "I notice a dog in the scene.").unwrap();
    assert_eq!(v, Verdict::Yes);
    handle.join().unwrap();
    let raw = rx.recv().unwrap();
    assert!(raw.starts_with("POST /v1/chat/completions "));
    assert!(raw
        .to_ascii_lowercase()
        .contains("authorization: bearer sk-test"));
    assert!(raw.contains(CONSISTENCY_PROMPT));
    assert!(raw.contains("\"temperature\":0.0"));
}

#[test]
fn unreachable_endpoint_is_a_judge_failure() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let config = RemoteJudgeConfig {
        base_url: format!("http://127.0.0.1:{port}/v1"),
        max_retries: 1,
        timeout_ms: 2_000,
        ..offline_config()
    };
    let judge = RemoteJudge::with_transport(
        config,
        None,
        Box::new(UreqTransport::new(std::time::Duration::from_secs(2))),
    )
    .unwrap();
    let err = remote_yes_no(&judge, &scene("A photo."), "x").unwrap_err();
    assert!(matches!(err, JudgeError::Unavailable { attempts: 2, .. }));
}
