use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use http_body_util::BodyExt;
use tower::ServiceExt;

use langedit_cli::service::{
    router, AppState, InterpolateRequest, InterpolateResponse, InterpolationOptions, ManipulateRequest,
    ManipulateResponse, ModelInfo,
};
use langedit_core::data::{decode_image, encode_png};
use langedit_core::synth::synth_generate;
use langedit_core::train::Trainer;
use langedit_core::{load_editor, GeneratorMode, RgbImage, TrainingConfig, Vocabulary};

const LIMIT: usize = 256 * 1024;

struct Fixture {
    _dir: tempfile::TempDir,
    gan: Arc<AppState>,
    identity: Arc<AppState>,
    png: Vec<u8>,
    vocab_hash: String,
    gan_id: String,
}

/// An untrained GAN checkpoint round-tripped through disk, and the
/// identity stub, sharing one vocabulary.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let corpus = synth_generate(4, 11, 64).unwrap();
        let vocab = Vocabulary::build(corpus.items.iter().flat_map(|i| i.captions.iter().map(String::as_str)));
        let dir = tempfile::tempdir().unwrap();
        let mut config = TrainingConfig::new(GeneratorMode::Multi, 64, vocab.len());
        config.seed = 3;
        let gan_path = dir.path().join("gan.safetensors");
        Trainer::new(config, vocab.clone()).unwrap().save(&gan_path).unwrap();
        let (editor, manifest) = load_editor(&gan_path, &vocab).unwrap();
        let gan_id = manifest.id.clone();
        assert!(!gan_id.is_empty());
        let id_path = dir.path().join("identity.safetensors");
        langedit_core::checkpoint::save_identity(&id_path, &vocab, 64).unwrap();
        let (id_editor, id_manifest) = load_editor(&id_path, &vocab).unwrap();
        Fixture {
            gan: Arc::new(AppState::from_editor(editor, manifest)),
            identity: Arc::new(AppState::from_editor(id_editor, id_manifest)),
            png: encode_png(&corpus.items[0].image).unwrap(),
            vocab_hash: vocab.hash(),
            gan_id,
            _dir: dir,
        }
    })
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = router(state.clone(), LIMIT).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn json<T: serde::Serialize>(v: &T) -> Option<Vec<u8>> {
    Some(serde_json::to_vec(v).unwrap())
}

fn request(description: &str) -> ManipulateRequest {
    ManipulateRequest {
        image: BASE64.encode(&fixture().png),
        description: description.into(),
        ..Default::default()
    }
}

fn error_text(body: &[u8]) -> String {
    let v: serde_json::Value = serde_json::from_slice(body).unwrap();
    v["error"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_and_model_info() {
    let f = fixture();
    let (status, _) = call(&f.gan, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = call(&f.gan, "GET", "/model-info", None).await;
    assert_eq!(status, StatusCode::OK);
    let info: ModelInfo = serde_json::from_slice(&body).unwrap();
    assert_eq!(info.resolution, 64);
    assert_eq!(info.mode.as_deref(), Some("multi"));
    assert_eq!(info.kind, "gan");
    assert_eq!(info.checkpoint_id, f.gan_id);
    assert_eq!(info.vocab_hash, f.vocab_hash);
}

#[tokio::test]
async fn manipulate_returns_image_at_model_resolution() {
    let f = fixture();
    let mut req = request("the circle is blue");
    req.heatmaps = true;
    let (status, body) = call(&f.gan, "POST", "/manipulate", json(&req)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let resp: ManipulateResponse = serde_json::from_slice(&body).unwrap();
    let image = decode_image(&BASE64.decode(&resp.image).unwrap()).unwrap();
    assert_eq!(image.dimensions(), (64, 64));
    assert_eq!((resp.width, resp.height), (64, 64));
    let maps = resp.heatmaps.unwrap();
    let words: Vec<_> = maps.iter().map(|m| m.word.as_str()).collect();
    assert_eq!(words, ["the", "circle", "is", "blue"]);
    for m in &maps {
        let png = BASE64.decode(&m.image).unwrap();
        assert_eq!(decode_image(&png).unwrap().dimensions(), (64, 64));
    }
    assert!(resp.frames.is_none());
    assert!(resp.elapsed_ms >= 0.0);
}

#[tokio::test]
async fn any_input_size_is_fitted_to_the_model() {
    let f = fixture();
    let src = decode_image(&f.png).unwrap();
    let big = RgbImage::from_fn(97, 80, |x, y| *src.get_pixel(x % 64, y % 64));
    let mut req = request("the circle is blue");
    req.image = BASE64.encode(encode_png(&big).unwrap());
    let (status, body) = call(&f.gan, "POST", "/manipulate", json(&req)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: ManipulateResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((resp.width, resp.height), (64, 64));
}

#[tokio::test]
async fn identical_requests_give_identical_images() {
    let f = fixture();
    let req = json(&request("the square is green"));
    let (a, b) = tokio::join!(
        call(&f.gan, "POST", "/manipulate", req.clone()),
        call(&f.gan, "POST", "/manipulate", req.clone())
    );
    let (c, d) = (
        serde_json::from_slice::<ManipulateResponse>(&a.1).unwrap(),
        serde_json::from_slice::<ManipulateResponse>(&b.1).unwrap(),
    );
    assert_eq!(c.image, d.image);
    assert_eq!(c.checkpoint_id, d.checkpoint_id);
}

#[tokio::test]
async fn identity_stub_echoes_the_input() {
    let f = fixture();
    let (status, body) = call(&f.identity, "POST", "/manipulate", json(&request("a red square"))).await;
    assert_eq!(status, StatusCode::OK);
    let resp: ManipulateResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(
        decode_image(&BASE64.decode(&resp.image).unwrap()).unwrap(),
        decode_image(&f.png).unwrap()
    );
}

#[tokio::test]
async fn empty_description_is_rejected() {
    let f = fixture();
    for text in ["", "   ", "?!"] {
        let (status, body) = call(&f.gan, "POST", "/manipulate", json(&request(text))).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{text:?}");
        assert!(error_text(&body).contains("invalid description"), "{}", error_text(&body));
    }
}

#[tokio::test]
async fn undecodable_inputs_are_bad_requests() {
    let f = fixture();
    let mut req = request("a red square");
    req.image = BASE64.encode(b"not an image");
    let (status, _) = call(&f.gan, "POST", "/manipulate", json(&req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    req.image = "***".into();
    let (status, _) = call(&f.gan, "POST", "/manipulate", json(&req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&f.gan, "POST", "/manipulate", Some(b"{".to_vec())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversize_payload_is_rejected() {
    let f = fixture();
    let mut req = request("a red square");
    req.image = "A".repeat(LIMIT + 1);
    let (status, _) = call(&f.gan, "POST", "/manipulate", json(&req)).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn unloadable_checkpoint_is_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("broken.safetensors");
    std::fs::write(&ckpt, b"garbage").unwrap();
    let vocab = dir.path().join("vocab.txt");
    Vocabulary::build(["a red square"]).save(&vocab).unwrap();
    let state = Arc::new(AppState::load(&ckpt, &vocab));
    let (status, _) = call(&state, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _) = call(&state, "GET", "/model-info", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _) = call(&state, "POST", "/manipulate", json(&request("a red square"))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn interpolate_returns_requested_frames() {
    let f = fixture();
    let req = InterpolateRequest {
        image: BASE64.encode(&f.png),
        description: "the square is red".into(),
        target: "the square is blue".into(),
        steps: 4,
    };
    let (status, body) = call(&f.gan, "POST", "/interpolate", json(&req)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let resp: InterpolateResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.frames.len(), 4);

    // the end frames are the plain manipulations
    for (text, frame) in [("the square is red", &resp.frames[0]), ("the square is blue", &resp.frames[3])] {
        let (_, body) = call(&f.gan, "POST", "/manipulate", json(&request(text))).await;
        let direct: ManipulateResponse = serde_json::from_slice(&body).unwrap();
        assert_eq!(&direct.image, frame, "{text}");
    }
}

#[tokio::test]
async fn manipulate_can_attach_interpolation_frames() {
    let f = fixture();
    let mut req = request("the square is red");
    req.interpolation = Some(InterpolationOptions {
        target: "the square is blue".into(),
        steps: 3,
    });
    let (status, body) = call(&f.gan, "POST", "/manipulate", json(&req)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: ManipulateResponse = serde_json::from_slice(&body).unwrap();
    let frames = resp.frames.unwrap();
    assert_eq!(frames.len(), 3);
    assert_eq!(frames[0], resp.image);
}

#[tokio::test]
async fn step_counts_outside_range_are_rejected() {
    let f = fixture();
    for steps in [0, 1, 17] {
        let req = InterpolateRequest {
            image: BASE64.encode(&f.png),
            description: "the square is red".into(),
            target: "the square is blue".into(),
            steps,
        };
        let (status, _) = call(&f.gan, "POST", "/interpolate", json(&req)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "steps {steps}");
    }
}

#[tokio::test]
async fn unequal_description_lengths_cannot_be_interpolated() {
    let f = fixture();
    let req = InterpolateRequest {
        image: BASE64.encode(&f.png),
        description: "the square is red".into(),
        target: "blue".into(),
        steps: 3,
    };
    let (status, _) = call(&f.gan, "POST", "/interpolate", json(&req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}
