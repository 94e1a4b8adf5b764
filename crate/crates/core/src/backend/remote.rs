use std::collections::HashMap;
use std::io::BufReader;
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::protocol::{self, Frame, MessageType};
use super::{check_batch, Backend, DenoiseRequest, LATENT_SCALE};
use crate::error::{Error, Result};
use crate::image::Image;

type Pending = Arc<Mutex<PendingState>>;

#[derive(Default)]
struct PendingState {
    waiters: HashMap<u64, Sender<Result<Frame>>>,
    /// Set once the reader thread has stopped; new requests fail fast.
    closed: Option<String>,
}

/// Client for an external model server speaking the framed protocol.
///
/// Requests may be issued from several threads at once. A background reader
/// routes each response to its caller by `request_id`, so responses can come
/// back in any order.
pub struct RemoteBackend {
    addr: String,
    stream: TcpStream,
    writer: Mutex<TcpStream>,
    pending: Pending,
    next_id: AtomicU64,
    timeout: Duration,
    reader: Option<JoinHandle<()>>,
}

impl RemoteBackend {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::BackendUnavailable(format!("connect {addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        let writer = stream
            .try_clone()
            .map_err(|e| Error::BackendUnavailable(e.to_string()))?;
        let read_half = stream
            .try_clone()
            .map_err(|e| Error::BackendUnavailable(e.to_string()))?;
        let pending: Pending = Arc::default();
        let reader = {
            let pending = Arc::clone(&pending);
            std::thread::Builder::new()
                .name("meshtex-backend-reader".into())
                .spawn(move || reader_loop(read_half, pending))
                .map_err(|e| Error::BackendUnavailable(e.to_string()))?
        };
        Ok(Self {
            addr: addr.to_string(),
            stream,
            writer: Mutex::new(writer),
            pending,
            next_id: AtomicU64::new(1),
            timeout,
            reader: Some(reader),
        })
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn next_request_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    /// Sends `frame` and waits for the response with the same request id.
    fn round_trip(&self, frame: Frame) -> Result<Frame> {
        let id = frame.header.request_id;
        let (tx, rx) = mpsc::channel();
        {
            let mut p = self.pending.lock().expect("pending lock");
            if let Some(reason) = &p.closed {
                return Err(Error::BackendUnavailable(reason.clone()));
            }
            p.waiters.insert(id, tx);
        }
        let sent = {
            let mut w = self.writer.lock().expect("writer lock");
            protocol::write_frame(&mut *w, &frame)
        };
        if let Err(e) = sent {
            self.pending.lock().expect("pending lock").waiters.remove(&id);
            return Err(e);
        }
        match rx.recv_timeout(self.timeout) {
            Ok(Ok(resp)) => {
                if resp.header.kind == MessageType::Error {
                    return Err(Error::BackendRemote {
                        request_id: id,
                        message: resp.header.message.unwrap_or_default(),
                    });
                }
                Ok(resp)
            }
            Ok(Err(e)) => Err(e),
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().expect("pending lock").waiters.remove(&id);
                Err(Error::BackendTimeout {
                    request_id: id,
                    seconds: self.timeout.as_secs_f64(),
                })
            }
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::BackendUnavailable("connection closed".into()))
            }
        }
    }

    fn expect_images(
        &self,
        resp: &Frame,
        kind: MessageType,
        expected: [usize; 4],
    ) -> Result<Vec<Image>> {
        if resp.header.kind != kind {
            return Err(Error::BackendShape(format!(
                "expected a {kind:?} response, got {:?}",
                resp.header.kind
            )));
        }
        let name = protocol::response_tensor_name(kind);
        let t = resp
            .tensor(name)
            .map_err(|e| Error::BackendShape(e.to_string()))?;
        if t.shape != expected {
            return Err(Error::BackendShape(format!(
                "{name} has shape {:?}, expected {expected:?}",
                t.shape
            )));
        }
        let images = t.to_images()?;
        if images.iter().any(|i| !i.is_finite()) {
            return Err(Error::NonFinite(format!("backend {name}")));
        }
        Ok(images)
    }
}

fn reader_loop(stream: TcpStream, pending: Pending) {
    let mut reader = BufReader::new(stream);
    let reason = loop {
        let payload = match protocol::read_payload(&mut reader) {
            Ok(Some(p)) => p,
            Ok(None) => break "server closed the connection".to_string(),
            Err(e) => break format!("read failed: {e}"),
        };
        let frame = match Frame::from_payload(&payload) {
            Ok(f) => f,
            Err(e) => break format!("undecodable response: {e}"),
        };
        let waiter = pending
            .lock()
            .expect("pending lock")
            .waiters
            .remove(&frame.header.request_id);
        if let Some(tx) = waiter {
            let _ = tx.send(Ok(frame));
        }
    };
    let mut p = pending.lock().expect("pending lock");
    for (_, tx) in p.waiters.drain() {
        let _ = tx.send(Err(Error::BackendUnavailable(reason.clone())));
    }
    p.closed = Some(reason);
}

impl Drop for RemoteBackend {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

fn batch_shape(images: &[Image]) -> [usize; 4] {
    let [h, w, c] = images[0].shape();
    [images.len(), h, w, c]
}

impl Backend for RemoteBackend {
    fn name(&self) -> String {
        format!("remote({})", self.addr)
    }

    fn predict_noise(&self, request: &DenoiseRequest) -> Result<Vec<Image>> {
        request.validate()?;
        let frame = protocol::predict_noise_frame(self.next_request_id(), request)?;
        let resp = self.round_trip(frame)?;
        self.expect_images(&resp, MessageType::PredictNoise, batch_shape(&request.latents))
    }

    fn decode(&self, latents: &[Image]) -> Result<Vec<Image>> {
        check_batch(latents, "latent")?;
        let [b, h, w, _] = batch_shape(latents);
        let resp = self.round_trip(protocol::decode_frame(self.next_request_id(), latents)?)?;
        self.expect_images(&resp, MessageType::Decode, [b, h * LATENT_SCALE, w * LATENT_SCALE, 3])
    }

    fn decode_pullback(&self, latents: &[Image], cotangent: &[Image]) -> Result<Vec<Image>> {
        check_batch(latents, "latent")?;
        check_batch(cotangent, "cotangent")?;
        let frame = protocol::pullback_frame(self.next_request_id(), latents, cotangent)?;
        let resp = self.round_trip(frame)?;
        self.expect_images(&resp, MessageType::DecodePullback, batch_shape(latents))
    }
}
