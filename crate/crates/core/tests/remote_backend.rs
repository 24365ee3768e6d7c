use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use failprobe_core::backends::{BackendError, BackendKind, Detector, ImageInput, ModelDescriptor, RemoteDetector, RemoteOptions};
use failprobe_core::catalog::coco80;

struct Seen {
    auth: Option<String>,
    body: Vec<u8>,
}

/// Serves canned responses in order, one per connection.
fn serve(responses: Vec<(u16, &'static str)>) -> (String, Arc<Mutex<Vec<Seen>>>, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let hits = Arc::new(AtomicUsize::new(0));
    let (seen2, hits2) = (seen.clone(), hits.clone());
    thread::spawn(move || {
        for (status, body) in responses {
            let Ok((stream, _)) = listener.accept() else { return };
            hits2.fetch_add(1, Ordering::SeqCst);
            if status == 0 {
                drop(stream);
                continue;
            }
            handle(stream, status, body, &seen2);
        }
    });
    (format!("http://{addr}/detect"), seen, hits)
}

fn handle(stream: TcpStream, status: u16, body: &str, seen: &Mutex<Vec<Seen>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut auth = None;
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        if lower.starts_with("authorization:") {
            auth = Some(line["authorization:".len()..].trim().to_string());
        }
    }
    let mut req_body = vec![0; len];
    reader.read_exact(&mut req_body).unwrap();
    seen.lock().unwrap().push(Seen { auth, body: req_body });
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
}

fn remote(endpoint: String, token_env: Option<&str>) -> RemoteDetector {
    RemoteDetector::new(
        ModelDescriptor {
            model_id: "hosted".into(),
            display_name: "hosted detector".into(),
            backend_kind: BackendKind::Remote,
            endpoint: Some(endpoint),
            auth_token_env: token_env.map(str::to_string),
            fixture: None,
            class_list: coco80(),
        },
        RemoteOptions {
            timeout: Duration::from_secs(5),
            ..RemoteOptions::default()
        },
    )
    .unwrap()
}

const CAR: &str = r#"[{"label":"car","score":0.98,"box":{"xmin":10,"ymin":20,"xmax":110,"ymax":220}}]"#;

fn input(bytes: &[u8]) -> ImageInput<'_> {
    ImageInput {
        image_id: "img_1",
        bytes,
        width: 200,
        height: 400,
    }
}

#[test]
fn posts_bytes_with_bearer_token() {
    std::env::set_var("FAILPROBE_TEST_TOKEN_A", "secret-a");
    let (url, seen, _) = serve(vec![(200, CAR)]);
    let p = remote(url, Some("FAILPROBE_TEST_TOKEN_A")).detect(&input(b"jpegbytes")).unwrap();
    assert_eq!(p.objects[0].labeled.bbox.coords(), [0.05, 0.05, 0.55, 0.55]);
    assert_eq!(p.model_id, "hosted");
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer secret-a"));
    assert_eq!(seen[0].body, b"jpegbytes");
}

#[test]
fn retries_once_after_dropped_connection() {
    let (url, _, hits) = serve(vec![(0, ""), (200, CAR)]);
    let p = remote(url, None).detect(&input(b"x")).unwrap();
    assert_eq!(p.objects.len(), 1);
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn gives_up_after_second_transport_failure() {
    let (url, _, hits) = serve(vec![(0, ""), (0, ""), (200, CAR)]);
    let err = remote(url, None).detect(&input(b"x")).unwrap_err();
    assert!(err.retryable(), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn http_errors_are_not_retried() {
    let (url, _, hits) = serve(vec![(503, "{}"), (200, CAR)]);
    let err = remote(url, None).detect(&input(b"x")).unwrap_err();
    assert_eq!(err, BackendError::Status(503));
    assert!(err.retryable());
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_payload_reported() {
    let (url, _, _) = serve(vec![(200, r#"[{"label":"car","score":2.0,"box":{"xmin":0,"ymin":0,"xmax":1,"ymax":1}}]"#)]);
    let err = remote(url, None).detect(&input(b"x")).unwrap_err();
    assert!(matches!(err, BackendError::Malformed(_)));
    assert!(!err.retryable());
}

#[test]
fn missing_token_variable_is_a_config_error() {
    let err = remote("http://127.0.0.1:9/detect".into(), Some("FAILPROBE_TEST_TOKEN_UNSET"))
        .detect(&input(b"x"))
        .unwrap_err();
    assert!(matches!(err, BackendError::Config(_)));
}

#[test]
fn unreachable_endpoint_is_a_network_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let err = remote(format!("http://{addr}/detect"), None).detect(&input(b"x")).unwrap_err();
    assert!(matches!(err, BackendError::Network(_) | BackendError::Timeout(_)), "{err}");
}
