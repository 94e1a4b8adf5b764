//! TCP server exposing any in-process [`Backend`] over the wire protocol.
//!
//! Used to exercise the remote client and the conformance probe without a
//! model server. Each connection is served on its own thread; frames on one
//! connection are answered in order.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::protocol::{self, Frame, MessageType};
use super::Backend;
use crate::error::{Error, Result};

pub struct BackendServer {
    listener: TcpListener,
    backend: Arc<dyn Backend>,
}

impl BackendServer {
    pub fn bind(addr: &str, backend: Arc<dyn Backend>) -> Result<Self> {
        let listener = TcpListener::bind(addr)
            .map_err(|e| Error::BackendUnavailable(format!("bind {addr}: {e}")))?;
        Ok(Self { listener, backend })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        self.listener
            .local_addr()
            .map_err(|e| Error::BackendUnavailable(e.to_string()))
    }

    /// Accepts connections until the listener fails.
    pub fn serve(self) -> Result<()> {
        for conn in self.listener.incoming() {
            let stream = conn.map_err(|e| Error::BackendUnavailable(e.to_string()))?;
            let backend = Arc::clone(&self.backend);
            std::thread::spawn(move || {
                let _ = serve_connection(stream, backend.as_ref());
            });
        }
        Ok(())
    }

    /// Serves on a background thread and returns the bound address.
    pub fn spawn(self) -> Result<(SocketAddr, JoinHandle<()>)> {
        let addr = self.local_addr()?;
        let handle = std::thread::spawn(move || {
            let _ = self.serve();
        });
        Ok((addr, handle))
    }
}

/// Answers frames until the peer disconnects. Malformed or empty frames get
/// an error frame and the connection stays open.
pub fn serve_connection(stream: TcpStream, backend: &dyn Backend) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(payload) = protocol::read_payload(&mut reader)? {
        let response = match Frame::from_payload(&payload) {
            Ok(frame) => handle(&frame, backend),
            Err(e) => Frame::error(0, e.to_string()),
        };
        let bytes = response
            .to_payload()
            .unwrap_or_else(|e| Frame::error(0, e.to_string()).to_payload().unwrap_or_default());
        protocol::write_payload(&mut writer, &bytes)?;
    }
    Ok(())
}

/// Dispatches one request frame to the backend.
pub fn handle(frame: &Frame, backend: &dyn Backend) -> Frame {
    let id = frame.header.request_id;
    let kind = frame.header.kind;
    let result = match kind {
        MessageType::PredictNoise => {
            protocol::parse_predict_noise(frame).and_then(|req| backend.predict_noise(&req))
        }
        MessageType::Decode => frame
            .tensor("latents")
            .and_then(|t| t.to_images())
            .and_then(|l| backend.decode(&l)),
        MessageType::DecodePullback => (|| {
            let latents = frame.tensor("latents")?.to_images()?;
            let cot = frame.tensor("cotangent")?.to_images()?;
            backend.decode_pullback(&latents, &cot)
        })(),
        MessageType::Error => Err(Error::Protocol("error frames are not requests".into())),
    };
    match result.and_then(|images| protocol::response_frame(kind, id, &images)) {
        Ok(f) => f,
        Err(e) => Frame::error(id, e.to_string()),
    }
}
