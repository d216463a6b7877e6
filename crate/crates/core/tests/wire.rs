use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use gridar_core::canvas::{CanvasSpec, TokenCanvas};
use gridar_core::pipeline::{run_gridar, AuditEvent};
use gridar_core::verify::wire::{ImageFormat, VerificationResponse};
use gridar_core::verify::{
    GridRequest, HintReformulator, Judgment, OracleOrm, RemoteConfig, RemoteError, RemoteProfile, RemoteVerifier,
    Verifier, VerifyError,
};
use gridar_core::{Palette, SceneLm, ScenePrompt, StagePlan};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[derive(Debug, Clone)]
struct Seen {
    body: String,
    auth: Option<String>,
}

struct Reply {
    status: u16,
    body: String,
    delay: Duration,
}

impl Reply {
    fn ok(body: impl Into<String>) -> Self {
        Reply { status: 200, body: body.into(), delay: Duration::ZERO }
    }
}

/// Local HTTP server answering every request with `respond(n, body)`.
fn stub<F>(respond: F) -> (String, Arc<Mutex<Vec<Seen>>>)
where
    F: Fn(usize, &str) -> Reply + Send + 'static,
{
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let addr = server.server_addr().to_ip().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (n, mut req) in server.incoming_requests().enumerate() {
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            let auth = req
                .headers()
                .iter()
                .find(|h| h.field.equiv("Authorization"))
                .map(|h| h.value.as_str().to_string());
            log.lock().unwrap().push(Seen { body: body.clone(), auth });
            let reply = respond(n, &body);
            thread::sleep(reply.delay);
            let resp = tiny_http::Response::from_string(reply.body).with_status_code(reply.status);
            let _ = req.respond(resp);
        }
    });
    (format!("http://{addr}/verify"), seen)
}

fn config(endpoint: &str) -> RemoteConfig {
    RemoteConfig { endpoint: endpoint.into(), timeout_ms: 2_000, retries: 2, ..RemoteConfig::default() }
}

fn small_spec() -> CanvasSpec {
    CanvasSpec::new(4, 4, 13, 2).unwrap()
}

/// Four one-row cells: red square, blue circle, empty, two red squares.
fn golden_grid() -> TokenCanvas {
    let red_square = 1;
    let blue_circle = 5;
    let tokens = [
        red_square, 0, 0, 0, //
        0, blue_circle, 0, 0, //
        0, 0, 0, 0, //
        red_square, 0, 0, red_square,
    ];
    TokenCanvas::from_prefix(small_spec(), &tokens).unwrap()
}

fn golden_request<'a>(canvas: &'a TokenCanvas, prompt: &'a ScenePrompt) -> GridRequest<'a> {
    GridRequest { canvas, rows: 4, stage: 1, prompt, want_reformulation: true }
}

#[test]
fn golden_exchange() {
    let (url, seen) = stub(|_, _| Reply::ok(read_fixture("native_response.json")));
    let prompt: ScenePrompt = "8 red squares".parse().unwrap();
    let canvas = golden_grid();
    let cfg = RemoteConfig { image_format: ImageFormat::Ppm, ..config(&url) };
    let v = RemoteVerifier::new(cfg, Palette::default());
    let out = v.verify(&golden_request(&canvas, &prompt)).unwrap();

    let judgments: Vec<_> = out.verdicts.iter().map(|v| v.judgment).collect();
    use Judgment::*;
    assert_eq!(judgments, [Possible, Impossible, Possible, Possible]);
    assert_eq!(out.verdicts.iter().map(|v| v.candidate_index).collect::<Vec<_>>(), [0, 1, 2, 3]);
    let hint = out.hint.unwrap();
    assert_eq!(hint.text, "three on top and five on the bottom");
    let p = hint.prompt.unwrap();
    assert_eq!(p.directives().len(), 2);
    assert_eq!(p.directives()[0].rows, 0..1);

    let sent = seen.lock().unwrap()[0].body.clone();
    let sent: serde_json::Value = serde_json::from_str(&sent).unwrap();
    let path = fixture("native_request.json");
    if std::env::var_os("GRIDAR_BLESS").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&sent).unwrap() + "\n").unwrap();
    }
    let golden: serde_json::Value = serde_json::from_str(&read_fixture("native_request.json")).unwrap();
    assert_eq!(sent, golden);

    let log = v.exchanges();
    assert_eq!(log.len(), 1);
    assert!(log[0].response.is_some() && log[0].error.is_none());
}

#[test]
fn golden_request_fixture_is_a_valid_request() {
    let text = read_fixture("native_request.json");
    let req: gridar_core::verify::VerificationRequest = serde_json::from_str(&text).unwrap();
    assert_eq!((req.rows, req.stage, req.want_reformulation), (4, 1, true));
    assert_eq!(req.prompt, "8 red squares");
    let cell = req.cell_geometry.unwrap();
    assert_eq!((cell.width_px, cell.height_px), (8, 2));
    use base64::Engine as _;
    let ppm = base64::engine::general_purpose::STANDARD.decode(&req.image_b64).unwrap();
    let header = b"P6\n8 8\n255\n";
    assert_eq!(&ppm[..header.len()], header);
    let px = |x: usize, y: usize| {
        let i = header.len() + 3 * (y * 8 + x);
        [ppm[i], ppm[i + 1], ppm[i + 2]]
    };
    let red = gridar_core::scene::Color::Red.rgb();
    let white = [255, 255, 255];
    // Row 0: a red square filling tile (0, 0); row 2 is empty.
    assert_eq!(px(0, 0), red);
    assert_eq!(px(2, 0), white);
    assert!((0..8).all(|x| px(x, 4) == white && px(x, 5) == white));
    assert_eq!(ppm.len(), header.len() + 8 * 8 * 3);
}

#[test]
fn short_judgment_list_is_malformed() {
    let (url, _) = stub(|_, _| Reply::ok(read_fixture("malformed_short.json")));
    let prompt: ScenePrompt = "8 red squares".parse().unwrap();
    let canvas = golden_grid();
    let v = RemoteVerifier::new(config(&url), Palette::default());
    let err = v.verify(&golden_request(&canvas, &prompt)).unwrap_err();
    assert!(matches!(err, VerifyError::Remote(RemoteError::MalformedResponse(_))), "{err}");
    // Malformed answers are not retried.
    assert_eq!(v.exchanges().len(), 1);
}

#[test]
fn unknown_fields_and_bad_words_are_malformed() {
    for name in ["malformed_extra_field.json", "malformed_judgment.json"] {
        let err = VerificationResponse::parse(&read_fixture(name), 4).unwrap_err();
        assert!(matches!(err, RemoteError::MalformedResponse(_)), "{name}: {err}");
    }
    assert!(VerificationResponse::parse(&read_fixture("native_response.json"), 4).is_ok());
}

#[test]
fn unreachable_endpoint_is_a_transport_error_after_retries() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let v = RemoteVerifier::new(config(&format!("http://127.0.0.1:{port}/verify")), Palette::default());
    let prompt: ScenePrompt = "8 red squares".parse().unwrap();
    let canvas = golden_grid();
    let err = v.verify(&golden_request(&canvas, &prompt)).unwrap_err();
    assert!(matches!(err, VerifyError::Remote(RemoteError::Transport { attempts: 3, .. })), "{err}");
    assert_eq!(v.exchanges().len(), 3);
    assert!(v.exchanges().iter().all(|e| e.response.is_none() && e.error.is_some()));
}

#[test]
fn server_errors_are_retried() {
    let (url, seen) = stub(|n, _| {
        if n == 0 {
            Reply { status: 503, body: "busy".into(), delay: Duration::ZERO }
        } else {
            Reply::ok(read_fixture("native_response.json"))
        }
    });
    let prompt: ScenePrompt = "8 red squares".parse().unwrap();
    let canvas = golden_grid();
    let v = RemoteVerifier::new(config(&url), Palette::default());
    assert_eq!(v.verify(&golden_request(&canvas, &prompt)).unwrap().verdicts.len(), 4);
    assert_eq!(seen.lock().unwrap().len(), 2);
    let log = v.exchanges();
    assert!(log[0].error.as_deref().unwrap().contains("503"));
}

#[test]
fn slow_server_times_out() {
    let (url, seen) = stub(|_, _| Reply {
        status: 200,
        body: read_fixture("native_response.json"),
        delay: Duration::from_millis(800),
    });
    let cfg = RemoteConfig { timeout_ms: 150, retries: 1, ..config(&url) };
    let v = RemoteVerifier::new(cfg, Palette::default());
    let prompt: ScenePrompt = "8 red squares".parse().unwrap();
    let canvas = golden_grid();
    let err = v.verify(&golden_request(&canvas, &prompt)).unwrap_err();
    assert!(matches!(err, VerifyError::Remote(RemoteError::Timeout { attempts: 2 })), "{err}");
    assert_eq!(v.exchanges().len(), 2);
    assert!(!seen.lock().unwrap().is_empty());
}

#[test]
fn bearer_token_is_sent_only_when_configured() {
    let (url, seen) = stub(|_, _| Reply::ok(read_fixture("native_response.json")));
    let prompt: ScenePrompt = "8 red squares".parse().unwrap();
    let canvas = golden_grid();
    let with = RemoteConfig { token: Some("s3cret".into()), ..config(&url) };
    RemoteVerifier::new(with.clone(), Palette::default()).verify(&golden_request(&canvas, &prompt)).unwrap();
    RemoteVerifier::new(config(&url), Palette::default()).verify(&golden_request(&canvas, &prompt)).unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer s3cret"));
    assert_eq!(seen[1].auth, None);
    // The token never appears in a serialized config.
    assert!(!serde_json::to_string(&with).unwrap().contains("s3cret"));
}

#[test]
fn openai_profile_wraps_and_unwraps() {
    let (url, seen) = stub(|_, _| Reply::ok(read_fixture("openai_response.json")));
    let cfg = RemoteConfig {
        profile: RemoteProfile::OpenAiChat {
            model: "vision-judge".into(),
            system_template: gridar_core::verify::wire::default_system_template(),
        },
        ..config(&url)
    };
    let v = RemoteVerifier::new(cfg, Palette::default());
    let prompt: ScenePrompt = "8 red squares".parse().unwrap();
    let canvas = golden_grid();
    let out = v.verify(&golden_request(&canvas, &prompt)).unwrap();
    assert_eq!(out.verdicts.iter().filter(|v| !v.is_possible()).count(), 1);
    assert!(!out.verdicts[3].is_possible());

    let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0].body).unwrap();
    assert_eq!(body["model"], "vision-judge");
    assert_eq!(body["response_format"]["type"], "json_object");
    let system = body["messages"][0]["content"].as_str().unwrap();
    assert!(system.contains("grid of 4"), "{system}");
    let image = body["messages"][1]["content"][1]["image_url"]["url"].as_str().unwrap();
    assert!(image.starts_with("data:image/png;base64,iVBOR"), "{image}");
}

#[test]
fn openai_profile_without_content_is_malformed() {
    let (url, _) = stub(|_, _| Reply::ok(r#"{"choices":[]}"#));
    let cfg = RemoteConfig {
        profile: RemoteProfile::OpenAiChat { model: "m".into(), system_template: "{rows}".into() },
        ..config(&url)
    };
    let v = RemoteVerifier::new(cfg, Palette::default());
    let prompt: ScenePrompt = "8 red squares".parse().unwrap();
    let canvas = golden_grid();
    let err = v.verify(&golden_request(&canvas, &prompt)).unwrap_err();
    assert!(matches!(err, VerifyError::Remote(RemoteError::MalformedResponse(_))), "{err}");
}

#[test]
fn per_cell_mode_sends_single_row_requests() {
    let (url, seen) = stub(|n, _| {
        let j = if n == 1 { "impossible" } else { "possible" };
        Reply::ok(format!(r#"{{"judgments":["{j}"]}}"#))
    });
    let cfg = RemoteConfig { per_cell: true, ..config(&url) };
    let v = RemoteVerifier::new(cfg, Palette::default());
    let prompt: ScenePrompt = "8 red squares".parse().unwrap();
    let canvas = golden_grid();
    let out = v.verify(&golden_request(&canvas, &prompt)).unwrap();
    let judgments: Vec<_> = out.verdicts.iter().map(|v| v.is_possible()).collect();
    assert_eq!(judgments, [true, false, true, true]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 4);
    for s in seen.iter() {
        let req: serde_json::Value = serde_json::from_str(&s.body).unwrap();
        assert_eq!(req["rows"], 1);
    }
}

#[test]
fn remote_failures_fall_back_to_accept_all_in_the_pipeline() {
    let (url, _) = stub(|_, _| Reply::ok(read_fixture("malformed_short.json")));
    let v = RemoteVerifier::new(config(&url), Palette::default());
    let model = SceneLm::default_16x16();
    let prompt: ScenePrompt = "6 red squares".parse().unwrap();
    let plan = StagePlan { parallel: false, ..StagePlan::default() };
    let orm = OracleOrm { palette: Palette::default() };
    let out = run_gridar(&plan, &prompt, &model, &v, &HintReformulator, &orm, 3).unwrap();
    let fallbacks = out.audit.iter().filter(|e| matches!(e, AuditEvent::VerifierFallback { .. })).count();
    // One four-cell grid after stage 1, two two-cell grids after stage 2.
    assert_eq!(fallbacks, 3);
    assert_eq!(out.ledger.verifier_failures, 3);
    assert_eq!(out.ledger.replacements, 0);
    assert_eq!(out.ledger.generated_tokens, 1024);
    assert_eq!(v.exchanges().len(), 3);
}
