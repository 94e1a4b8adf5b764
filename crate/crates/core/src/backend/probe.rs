//! Protocol conformance probe run by `backend-check`.
//!
//! Talks raw frames to a server and checks every message type for response
//! type, `request_id` echo, tensor shape and finiteness. Also checks that an
//! empty frame yields an error frame without dropping the connection, and that
//! pipelined requests are all answered.

use std::fmt;
use std::io::{BufReader, BufWriter};
use std::net::TcpStream;
use std::time::Duration;

use super::protocol::{self, Frame, MessageType};
use super::{DenoiseRequest, LATENT_CHANNELS, LATENT_SCALE};
use crate::error::{Error, Result};
use crate::image::Image;

const PROBE_LATENT: usize = 8;
const PROBE_BATCH: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckReport {
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &str, outcome: std::result::Result<String, String>) {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<16} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        Ok(())
    }
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Conn {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        protocol::write_frame(&mut self.writer, frame)
    }

    fn send_raw(&mut self, payload: &[u8]) -> Result<()> {
        protocol::write_payload(&mut self.writer, payload)
            .map_err(|e| Error::BackendUnavailable(e.to_string()))
    }

    fn recv(&mut self) -> Result<Frame> {
        match protocol::read_payload(&mut self.reader) {
            Ok(Some(p)) => Frame::from_payload(&p),
            Ok(None) => Err(Error::BackendUnavailable("connection closed".into())),
            Err(e) => Err(Error::BackendUnavailable(e.to_string())),
        }
    }
}

fn probe_latents() -> Vec<Image> {
    (0..PROBE_BATCH)
        .map(|b| {
            Image::from_fn(PROBE_LATENT, PROBE_LATENT, LATENT_CHANNELS, |y, x, c| {
                (((b * 7 + y * 5 + x * 3 + c) % 11) as f64 - 5.0) * 0.2
            })
        })
        .collect()
}

fn check_response(resp: &Frame, kind: MessageType, id: u64, shape: &[usize]) -> std::result::Result<String, String> {
    if resp.header.kind == MessageType::Error {
        return Err(format!(
            "error frame: {}",
            resp.header.message.clone().unwrap_or_default()
        ));
    }
    if resp.header.kind != kind {
        return Err(format!("response type {:?}, expected {kind:?}", resp.header.kind));
    }
    if resp.header.request_id != id {
        return Err(format!("request_id {} not echoed (got {})", id, resp.header.request_id));
    }
    let name = protocol::response_tensor_name(kind);
    let t = resp.tensor(name).map_err(|e| e.to_string())?;
    if t.shape != shape {
        return Err(format!("{name} shape {:?}, expected {shape:?}", t.shape));
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(format!("{name} contains non-finite values"));
    }
    Ok(format!("{name} {shape:?}, request_id {id}"))
}

/// Runs every check against the server at `addr`.
pub fn run_probe(addr: &str, timeout: Duration) -> Result<CheckReport> {
    let stream = TcpStream::connect(addr)
        .map_err(|e| Error::BackendUnavailable(format!("connect {addr}: {e}")))?;
    stream
        .set_read_timeout(Some(timeout))
        .map_err(|e| Error::BackendUnavailable(e.to_string()))?;
    let mut conn = Conn {
        reader: BufReader::new(
            stream
                .try_clone()
                .map_err(|e| Error::BackendUnavailable(e.to_string()))?,
        ),
        writer: BufWriter::new(stream),
    };

    let latents = probe_latents();
    let image_side = PROBE_LATENT * LATENT_SCALE;
    let latent_shape = [PROBE_BATCH, PROBE_LATENT, PROBE_LATENT, LATENT_CHANNELS];
    let image_shape = [PROBE_BATCH, image_side, image_side, 3];
    let mut report = CheckReport::default();

    let req = DenoiseRequest {
        latents: latents.clone(),
        timestep_index: 501,
        alpha_bar_t: 0.28,
        prompts: vec!["probe, front view".into(), "probe, back view".into()],
        depth_maps: Some(vec![
            Image::from_fn(image_side, image_side, 1, |y, x, _| {
                ((y + x) as f64 / (2 * image_side) as f64).max(0.05)
            });
            PROBE_BATCH
        ]),
        guidance_scale: 7.5,
    };
    conn.send(&protocol::predict_noise_frame(101, &req)?)?;
    let resp = conn.recv();
    report.record(
        "predict_noise",
        resp.map_err(|e| e.to_string())
            .and_then(|r| check_response(&r, MessageType::PredictNoise, 101, &latent_shape)),
    );

    conn.send(&protocol::decode_frame(102, &latents)?)?;
    let resp = conn.recv();
    report.record(
        "decode",
        resp.map_err(|e| e.to_string())
            .and_then(|r| check_response(&r, MessageType::Decode, 102, &image_shape)),
    );

    let cot: Vec<Image> = (0..PROBE_BATCH)
        .map(|b| Image::from_fn(image_side, image_side, 3, |y, x, c| ((y + 2 * x + c + b) % 5) as f64 * 0.1))
        .collect();
    conn.send(&protocol::pullback_frame(103, &latents, &cot)?)?;
    let resp = conn.recv();
    report.record(
        "decode_pullback",
        resp.map_err(|e| e.to_string())
            .and_then(|r| check_response(&r, MessageType::DecodePullback, 103, &latent_shape)),
    );

    conn.send_raw(&[])?;
    let empty = conn.recv().map_err(|e| e.to_string()).and_then(|r| {
        if r.header.kind == MessageType::Error {
            Ok(format!("error frame: {}", r.header.message.unwrap_or_default()))
        } else {
            Err(format!("expected an error frame, got {:?}", r.header.kind))
        }
    });
    let empty_ok = empty.is_ok();
    report.record("empty_frame", empty);
    if empty_ok {
        conn.send(&protocol::decode_frame(104, &latents)?)?;
        let resp = conn.recv();
        report.record(
            "stays_open",
            resp.map_err(|e| e.to_string())
                .and_then(|r| check_response(&r, MessageType::Decode, 104, &image_shape)),
        );
    }

    conn.send(&protocol::decode_frame(105, &latents)?)?;
    conn.send(&protocol::predict_noise_frame(106, &req)?)?;
    let pipelined = (|| -> std::result::Result<String, String> {
        let mut seen = Vec::new();
        for _ in 0..2 {
            let r = conn.recv().map_err(|e| e.to_string())?;
            match r.header.request_id {
                105 => check_response(&r, MessageType::Decode, 105, &image_shape)?,
                106 => check_response(&r, MessageType::PredictNoise, 106, &latent_shape)?,
                other => return Err(format!("unexpected request_id {other}")),
            };
            seen.push(r.header.request_id);
        }
        seen.sort_unstable();
        if seen == [105, 106] {
            Ok("both pipelined requests answered".into())
        } else {
            Err(format!("answered ids {seen:?}"))
        }
    })();
    report.record("pipelining", pipelined);

    Ok(report)
}
