use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::Path;
use std::time::{Duration, Instant};

use maskpg::dsp::Waveform;
use maskpg::scorers::{Endpoint, ExternalScorer, ScoreRequest, Scorer};
use maskpg::Error;

fn script(dir: &Path, name: &str, body: &str) -> Endpoint {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    Endpoint::Command(vec!["python3".into(), "-u".into(), path.display().to_string()])
}

// Answers OK only if the three files exist while the request is pending.
const CHECKING: &str = r#"
import os, sys
for line in sys.stdin:
    parts = line.split()
    if len(parts) == 4 and parts[0] == "SCORE" and all(os.path.isfile(p) for p in parts[1:]):
        print("OK 2.31", flush=True)
    else:
        print("ERR bad request " + line.strip(), flush=True)
"#;

fn signals() -> (Waveform, Waveform, Waveform) {
    let clean: Vec<f64> = (0..8000).map(|i| (i as f64 * 0.05).sin() * 0.5).collect();
    let mix: Vec<f64> = clean.iter().enumerate().map(|(i, c)| c + 0.1 * ((i * 7 % 13) as f64 / 13.0 - 0.5)).collect();
    (
        Waveform::new(clean.clone(), 16000).unwrap(),
        Waveform::new(clean, 16000).unwrap(),
        Waveform::new(mix, 16000).unwrap(),
    )
}

fn dir_is_empty(p: &Path) -> bool {
    std::fs::read_dir(p).unwrap().next().is_none()
}

#[test]
fn ok_response_is_parsed_and_files_are_cleaned() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("req");
    std::fs::create_dir(&root).unwrap();
    let scorer = ExternalScorer::new(script(tmp.path(), "ok.py", CHECKING)).with_temp_root(&root);
    let (e, c, m) = signals();
    let req = ScoreRequest::new(&e, &c, &m).unwrap();
    for _ in 0..3 {
        assert_eq!(scorer.score(&req).unwrap(), 2.31);
        assert!(dir_is_empty(&root));
    }
}

#[test]
fn err_response_carries_message() {
    let tmp = tempfile::tempdir().unwrap();
    let ep = script(
        tmp.path(),
        "err.py",
        "import sys\nfor line in sys.stdin:\n    print('ERR no license', flush=True)\n",
    );
    let scorer = ExternalScorer::new(ep);
    let (e, c, m) = signals();
    let err = scorer.score(&ScoreRequest::new(&e, &c, &m).unwrap()).unwrap_err();
    match err {
        Error::ScorerRemote(msg) => assert_eq!(msg, "no license"),
        other => panic!("expected a remote error, got {other:?}"),
    }
}

#[test]
fn malformed_response_is_distinct() {
    let tmp = tempfile::tempdir().unwrap();
    let ep = script(tmp.path(), "bad.py", "import sys\nfor line in sys.stdin:\n    print('2.31', flush=True)\n");
    let scorer = ExternalScorer::new(ep);
    let (e, c, m) = signals();
    let err = scorer.score(&ScoreRequest::new(&e, &c, &m).unwrap()).unwrap_err();
    assert!(matches!(err, Error::ScorerMalformed(_)), "{err:?}");
}

#[test]
fn timeout_is_reported_and_files_are_cleaned() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("req");
    std::fs::create_dir(&root).unwrap();
    let ep = script(
        tmp.path(),
        "slow.py",
        "import sys, time\nfor line in sys.stdin:\n    time.sleep(30)\n    print('OK 1', flush=True)\n",
    );
    let scorer = ExternalScorer::new(ep)
        .with_timeout(Duration::from_millis(500))
        .with_temp_root(&root);
    let (e, c, m) = signals();
    let t0 = Instant::now();
    let err = scorer.score(&ScoreRequest::new(&e, &c, &m).unwrap()).unwrap_err();
    assert!(matches!(err, Error::ScorerTimeout(_)), "{err:?}");
    assert!(t0.elapsed() < Duration::from_secs(10));
    assert!(dir_is_empty(&root));
}

#[test]
fn missing_program_is_an_error() {
    let scorer = ExternalScorer::new(Endpoint::Command(vec!["/nonexistent/scorer".into()]));
    let (e, c, m) = signals();
    assert!(scorer.score(&ScoreRequest::new(&e, &c, &m).unwrap()).is_err());
}

#[test]
fn tcp_endpoint() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut out = stream.try_clone().unwrap();
        let mut seen = Vec::new();
        for line in BufReader::new(stream).lines() {
            let line = line.unwrap();
            seen.push(line.clone());
            let reply = if seen.len() == 1 { "OK -0.25\n" } else { "ERR busy\n" };
            out.write_all(reply.as_bytes()).unwrap();
        }
        seen
    });
    let ep: Endpoint = format!("tcp:{addr}").parse().unwrap();
    let scorer = ExternalScorer::new(ep);
    let (e, c, m) = signals();
    let req = ScoreRequest::new(&e, &c, &m).unwrap();
    assert_eq!(scorer.score(&req).unwrap(), -0.25);
    assert!(matches!(scorer.score(&req), Err(Error::ScorerRemote(m)) if m == "busy"));
    drop(scorer);
    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 2);
    for line in seen {
        let parts: Vec<&str> = line.split(' ').collect();
        assert_eq!(parts.len(), 4);
        assert_eq!(parts[0], "SCORE");
        assert!(parts[1].ends_with("enhanced.wav") && parts[2].ends_with("clean.wav") && parts[3].ends_with("mixture.wav"));
    }
}

#[test]
fn endpoint_strings() {
    assert_eq!(
        "cmd:python3 shim.py".parse::<Endpoint>().unwrap(),
        Endpoint::Command(vec!["python3".into(), "shim.py".into()])
    );
    assert!("tcp:localhost".parse::<Endpoint>().is_err());
    assert!("http://x".parse::<Endpoint>().is_err());
}
