use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;

use serde_json::Value;

use meshtex_core::backend::protocol::{read_payload, Frame};
use meshtex_core::backend::server::{handle, BackendServer};
use meshtex_core::backend::{ToyBackend, TOY_MIXING};
use meshtex_core::image::Image;

fn handmade_frame(header: &str, values: &[f32]) -> Vec<u8> {
    let mut payload = header.as_bytes().to_vec();
    for v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let mut out = (payload.len() as u64).to_le_bytes().to_vec();
    out.extend(payload);
    out
}

/// Splits a payload into its JSON header and the little-endian `f32` tail.
fn split_payload(payload: &[u8]) -> (Value, Vec<f32>) {
    let mut stream = serde_json::Deserializer::from_slice(payload).into_iter::<Value>();
    let header = stream.next().unwrap().unwrap();
    let rest = &payload[stream.byte_offset()..];
    assert_eq!(rest.len() % 4, 0);
    let data = rest.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    (header, data)
}

fn decode_by_hand(latent: [f32; 4]) -> [f32; 3] {
    let mut out = [0.5f64; 3];
    for (c, o) in out.iter_mut().enumerate() {
        for k in 0..4 {
            *o += f64::from(latent[k]) * TOY_MIXING[k][c];
        }
    }
    out.map(|v| v as f32)
}

const DECODE_HEADER: &str =
    r#"{"type":"decode","request_id":7,"tensors":[{"name":"latents","shape":[1,1,1,4],"dtype":"f32"}]}"#;

#[test]
fn handmade_decode_request_is_answered() {
    let latent = [0.25f32, -1.0, 0.5, 2.0];
    let bytes = handmade_frame(DECODE_HEADER, &latent);
    let payload = read_payload(&mut &bytes[..]).unwrap().unwrap();
    let frame = Frame::from_payload(&payload).unwrap();
    let resp = handle(&frame, &ToyBackend::new(0)).to_payload().unwrap();

    let (header, data) = split_payload(&resp);
    assert_eq!(header["type"], "decode");
    assert_eq!(header["request_id"], 7);
    assert_eq!(header["tensors"][0]["name"], "images");
    assert_eq!(header["tensors"][0]["shape"], serde_json::json!([1, 8, 8, 3]));
    assert_eq!(header["tensors"][0]["dtype"], "f32");
    assert_eq!(data.len(), 8 * 8 * 3);
    let want = decode_by_hand(latent);
    for px in data.chunks_exact(3) {
        for (a, b) in px.iter().zip(want) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn length_prefix_counts_header_and_tensors() {
    let frame = Frame::from_payload(&handmade_frame(DECODE_HEADER, &[0.0; 4])[8..]).unwrap();
    let payload = frame.to_payload().unwrap();
    let (header, data) = split_payload(&payload);
    assert_eq!(data, vec![0.0; 4]);
    let header_len = serde_json::to_vec(&header).unwrap().len();
    assert_eq!(payload.len(), header_len + 16);
}

fn read_response(stream: &mut TcpStream) -> (Value, Vec<f32>) {
    let mut len = [0u8; 8];
    stream.read_exact(&mut len).unwrap();
    let mut payload = vec![0u8; u64::from_le_bytes(len) as usize];
    stream.read_exact(&mut payload).unwrap();
    split_payload(&payload)
}

#[test]
fn server_survives_malformed_frames() {
    let server = BackendServer::bind("127.0.0.1:0", Arc::new(ToyBackend::new(0))).unwrap();
    let (addr, _handle) = server.spawn().unwrap();
    let mut stream = TcpStream::connect(addr).unwrap();

    stream.write_all(&0u64.to_le_bytes()).unwrap();
    let (h, _) = read_response(&mut stream);
    assert_eq!(h["type"], "error");

    stream.write_all(&handmade_frame("{not json", &[])).unwrap();
    let (h, _) = read_response(&mut stream);
    assert_eq!(h["type"], "error");

    let bad_shape = r#"{"type":"decode","request_id":9,"tensors":[{"name":"latents","shape":[1,1,1,4],"dtype":"f32"}]}"#;
    stream.write_all(&handmade_frame(bad_shape, &[1.0; 3])).unwrap();
    let (h, _) = read_response(&mut stream);
    assert_eq!(h["type"], "error");

    let unknown = r#"{"type":"upscale","request_id":10,"tensors":[]}"#;
    stream.write_all(&handmade_frame(unknown, &[])).unwrap();
    let (h, _) = read_response(&mut stream);
    assert_eq!(h["type"], "error");

    stream.write_all(&handmade_frame(DECODE_HEADER, &[0.0; 4])).unwrap();
    let (h, data) = read_response(&mut stream);
    assert_eq!(h["type"], "decode");
    assert_eq!(h["request_id"], 7);
    assert!(data.iter().all(|v| *v == 0.5));
}

#[test]
fn predict_noise_with_depth_over_tcp() {
    // The depth map selects the target, so the expected noise is closed form.
    let target = Image::from_vec(1, 1, 4, vec![0.5, -0.5, 1.0, 0.0]).unwrap();
    let backend = ToyBackend::new(3).with_depth_target(&Image::zeros(8, 8, 1), target);
    let server = BackendServer::bind("127.0.0.1:0", Arc::new(backend)).unwrap();
    let (addr, _handle) = server.spawn().unwrap();
    let mut stream = TcpStream::connect(addr).unwrap();
    let header = r#"{"type":"predict_noise","request_id":42,"prompts":["a","b"],"timestep_index":981,
        "alpha_bar_t":0.25,"guidance_scale":7.5,"tensors":[
        {"name":"latents","shape":[2,1,1,4],"dtype":"f32"},
        {"name":"depth_maps","shape":[2,8,8],"dtype":"f32"}]}"#;
    let mut values = vec![0.1f32; 8];
    values.extend(vec![0.0f32; 2 * 64]);
    stream.write_all(&handmade_frame(header, &values)).unwrap();
    let (h, data) = read_response(&mut stream);
    assert_eq!(h["type"], "predict_noise", "{h}");
    assert_eq!(h["request_id"], 42);
    assert_eq!(h["tensors"][0]["name"], "noise");
    assert_eq!(h["tensors"][0]["shape"], serde_json::json!([2, 1, 1, 4]));
    let x = f64::from(0.1f32);
    let want: Vec<f64> = [0.5, -0.5, 1.0, 0.0].iter().map(|t| (x - 0.5 * t) / 0.75f64.sqrt()).collect();
    for (i, v) in data.iter().enumerate() {
        assert!((f64::from(*v) - want[i % 4]).abs() < 1e-6, "{v} vs {}", want[i % 4]);
    }
}
