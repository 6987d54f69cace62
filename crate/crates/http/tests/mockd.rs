use std::fs;
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;

use image::{GrayImage, Luma, Rgb, RgbImage};
use vlb_core::clients::mock::{MockChat, MockEmbed};
use vlb_core::clients::{
    embed, inpaint, segment, ChatRequest, ChatService, EmbedInput, InpaintRequest, InpaintTask, Part, RetryPolicy,
    ServiceError,
};
use vlb_core::config::{EndpointConfig, EndpointKind};
use vlb_core::pipeline::Connector;
use vlb_core::vision::{outpaint_canvas, outpaint_geometry};
use vlb_http::{HttpChat, HttpConnector, HttpEmbed, HttpInpaint, HttpSegment, MockServer, Semaphore, Transport};

fn any_port() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        base_ms: 5,
        factor: 2,
        request_timeout_ms: 5_000,
    }
}

fn transport(server: &MockServer, retry: RetryPolicy) -> Transport {
    Transport::new(&server.url(), None, retry, Arc::new(Semaphore::new(4))).unwrap()
}

fn three_rects() -> RgbImage {
    let mut img = RgbImage::from_pixel(40, 30, Rgb([250, 250, 250]));
    for (x0, y0, c) in [(2, 2, [200, 0, 0]), (20, 3, [0, 200, 0]), (5, 18, [0, 0, 200])] {
        for y in y0..y0 + 8 {
            for x in x0..x0 + 10 {
                img.put_pixel(x, y, Rgb(c));
            }
        }
    }
    img
}

fn question() -> ChatRequest {
    ChatRequest::new(
        "mock-lvlm",
        vec![
            Part::image(&three_rects()),
            Part::text("Question: How many shapes are there?\nOptions:\nA. two\nB. three\nAnswer with the option's letter from the given choices directly."),
        ],
    )
}

#[test]
fn http_chat_matches_in_process_mock() {
    let server = MockServer::start(None, any_port()).unwrap();
    let chat = HttpChat(transport(&server, fast_retry()));
    let req = question();
    let over_http = chat.chat(&req).unwrap();
    let local = MockChat::default().chat(&req).unwrap();
    assert_eq!(over_http.text, local.text);
    assert_eq!(over_http.request_hash, req.hash());
    assert_eq!(over_http.attempts, 1);
    assert_eq!(chat.chat(&req).unwrap().text, over_http.text);
}

#[test]
fn fixture_reply_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let req = question();
    let canned = "B\n  with trailing  spaces \u{00e9}";
    fs::write(dir.path().join(format!("{}.txt", req.hash())), canned).unwrap();
    let server = MockServer::start(Some(dir.path().into()), any_port()).unwrap();
    let got = HttpChat(transport(&server, fast_retry())).chat(&req).unwrap();
    assert_eq!(got.text.as_bytes(), canned.as_bytes());
}

#[test]
fn two_429s_then_success_takes_three_attempts() {
    let dir = tempfile::tempdir().unwrap();
    let req = question();
    fs::write(dir.path().join(format!("{}.status", req.hash())), "429\n429\n").unwrap();
    let server = MockServer::start(Some(dir.path().into()), any_port()).unwrap();
    let got = HttpChat(transport(&server, fast_retry())).chat(&req).unwrap();
    assert_eq!(got.attempts, 3);
    assert_eq!(got.text, MockChat::default().chat(&req).unwrap().text);
}

#[test]
fn persistent_429_exhausts_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let req = question();
    fs::write(dir.path().join(format!("{}.status", req.hash())), "429 429 429 429").unwrap();
    let server = MockServer::start(Some(dir.path().into()), any_port()).unwrap();
    let err = HttpChat(transport(&server, fast_retry())).chat(&req).unwrap_err();
    assert_eq!(err, ServiceError::RateLimited { attempts: 3 });
}

#[test]
fn server_errors_retry_and_client_errors_do_not() {
    let dir = tempfile::tempdir().unwrap();
    let a = question();
    let mut b = question();
    b.seed = Some(9);
    fs::write(dir.path().join(format!("{}.status", a.hash())), "503").unwrap();
    fs::write(dir.path().join(format!("{}.status", b.hash())), "400").unwrap();
    let server = MockServer::start(Some(dir.path().into()), any_port()).unwrap();
    let chat = HttpChat(transport(&server, fast_retry()));
    assert_eq!(chat.chat(&a).unwrap().attempts, 2);
    assert!(matches!(chat.chat(&b), Err(ServiceError::Status { status: 400, .. })));
}

#[test]
fn timeout_beyond_budget_reports_elapsed() {
    let dir = tempfile::tempdir().unwrap();
    let req = question();
    fs::write(dir.path().join(format!("{}.status", req.hash())), "delay=600 delay=600").unwrap();
    let server = MockServer::start(Some(dir.path().into()), any_port()).unwrap();
    let retry = RetryPolicy {
        max_attempts: 2,
        base_ms: 1,
        factor: 1,
        request_timeout_ms: 150,
    };
    match HttpChat(transport(&server, retry)).chat(&req) {
        Err(ServiceError::Timeout { elapsed_ms }) => assert!(elapsed_ms >= 300, "{elapsed_ms}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn inpaint_over_http_preserves_dims_and_fills_magenta() {
    let server = MockServer::start(None, any_port()).unwrap();
    let svc = HttpInpaint(transport(&server, fast_retry()));
    let img = three_rects();
    let mask = GrayImage::from_fn(40, 30, |x, y| Luma([if (30..38).contains(&x) && (20..28).contains(&y) { 255 } else { 0 }]));
    let out = inpaint(
        &svc,
        &InpaintRequest {
            task: InpaintTask::Add,
            image: img.clone(),
            mask,
            prompt: "a cup".into(),
            keep: None,
        },
    )
    .unwrap();
    assert_eq!(out.dimensions(), (40, 30));
    assert_eq!(out.get_pixel(31, 21), &Rgb([255, 0, 255]));
    assert_eq!(out.get_pixel(0, 0), img.get_pixel(0, 0));
}

#[test]
fn mismatched_mask_fails_before_any_network_call() {
    // Reserve a port, then free it so nothing listens there.
    let port = TcpListener::bind(any_port()).unwrap().local_addr().unwrap().port();
    let t = Transport::new(&format!("http://127.0.0.1:{port}"), None, fast_retry(), Arc::new(Semaphore::new(1))).unwrap();
    let err = inpaint(
        &HttpInpaint(t),
        &InpaintRequest {
            task: InpaintTask::Remove,
            image: three_rects(),
            mask: GrayImage::new(20, 30),
            prompt: "cup".into(),
            keep: None,
        },
    )
    .unwrap_err();
    assert!(matches!(err, ServiceError::Precondition(_)), "{err:?}");
}

#[test]
fn outpaint_canvas_comes_back_at_full_size() {
    let server = MockServer::start(None, any_port()).unwrap();
    let svc = HttpInpaint(transport(&server, fast_retry()));
    let img = RgbImage::from_pixel(640, 480, Rgb([10, 20, 30]));
    let g = outpaint_geometry(640, 480, 1.5).unwrap();
    let (canvas, mask) = outpaint_canvas(&img, &g);
    let out = inpaint(
        &svc,
        &InpaintRequest {
            task: InpaintTask::Outpaint,
            image: canvas,
            mask,
            prompt: "extend".into(),
            keep: Some(g.keep(640, 480)),
        },
    )
    .unwrap();
    assert_eq!(out.dimensions(), (960, 720));
    assert_eq!(out.get_pixel(480, 360), &Rgb([10, 20, 30]));
}

#[test]
fn segment_over_http_finds_three_serials() {
    let server = MockServer::start(None, any_port()).unwrap();
    let seg = segment(&HttpSegment(transport(&server, fast_retry())), &three_rects()).unwrap();
    let serials: Vec<u32> = seg.masks.iter().map(|m| m.serial).collect();
    assert_eq!(serials, vec![1, 2, 3]);
    assert!(seg.masks.iter().all(|m| m.area == 80));
}

#[test]
fn embed_over_http_is_normalized_and_matches_local() {
    let server = MockServer::start(None, any_port()).unwrap();
    let svc = HttpEmbed {
        transport: transport(&server, fast_retry()),
        model: "mock-embed".into(),
    };
    let items = vec![
        ("a".to_string(), EmbedInput::Image(three_rects())),
        ("b".to_string(), EmbedInput::Image(three_rects())),
        ("t".to_string(), EmbedInput::Text("three rectangles".into())),
    ];
    let remote = embed(&svc, &items).unwrap();
    let local = embed(&MockEmbed::default(), &items).unwrap();
    assert_eq!(remote[0].values(), remote[1].values());
    for (r, l) in remote.iter().zip(&local) {
        assert_eq!(r.values(), l.values());
        let norm: f64 = r.values().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
    }
}

fn http_endpoint(url: &str, key_env: Option<&str>) -> EndpointConfig {
    EndpointConfig {
        kind: EndpointKind::Http,
        url: Some(url.into()),
        model: Some("m".into()),
        key_env: key_env.map(String::from),
        max_in_flight: 2,
        fixtures: None,
    }
}

#[test]
fn connector_reads_keys_from_the_environment_only() {
    let c = HttpConnector::default();
    let retry = fast_retry();
    let ep = http_endpoint("http://127.0.0.1:9", Some("VLB_TEST_KEY_THAT_IS_NOT_SET"));
    let err = c.chat("gen", &ep, &retry).err().unwrap();
    assert!(err.contains("VLB_TEST_KEY_THAT_IS_NOT_SET"), "{err}");
    assert!(c.chat("gen", &http_endpoint("http://127.0.0.1:9", None), &retry).is_ok());
}

#[test]
fn connector_serves_mock_kind_in_process() {
    let ep = EndpointConfig {
        kind: EndpointKind::Mock,
        url: None,
        model: None,
        key_env: None,
        max_in_flight: 1,
        fixtures: None,
    };
    let chat = HttpConnector::default().chat("judge", &ep, &fast_retry()).unwrap();
    assert_eq!(chat.chat(&question()).unwrap().text, MockChat::default().chat(&question()).unwrap().text);
}
