//! Framed binary wire protocol for external backends.
//!
//! ```text
//! u64 LE payload length | JSON header | f32 LE tensor data ...
//! ```
//!
//! The header is a single UTF-8 JSON object. Its `tensors` array lists the
//! name, shape and dtype (`"f32"`) of every tensor that follows, in order,
//! each stored row-major. The header ends where its JSON value ends; tensor
//! bytes start immediately after.
//!
//! Requests carry `type` (`predict_noise`, `decode` or `decode_pullback`) and a
//! `request_id` that the response echoes. Failures are answered with a frame
//! of type `error` whose `message` explains the problem.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::DenoiseRequest;
use crate::error::{Error, Result};
use crate::image::Image;

/// Frames larger than this are rejected before allocating.
pub const MAX_PAYLOAD: u64 = 1 << 33;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    PredictNoise,
    Decode,
    DecodePullback,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    #[serde(rename = "type")]
    pub kind: MessageType,
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestep_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_bar_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default)]
    pub tensors: Vec<TensorInfo>,
}

impl Header {
    pub fn new(kind: MessageType, request_id: u64) -> Self {
        Self {
            kind,
            request_id,
            prompts: Vec::new(),
            timestep_index: None,
            alpha_bar_t: None,
            guidance_scale: None,
            message: None,
            tensors: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            shape,
            data,
        })
    }

    /// Stacks images into `[B, h, w, C]`, or `[B, h, w]` when `drop_channel`
    /// is set and images are single-channel.
    pub fn from_images(name: &str, images: &[Image], drop_channel: bool) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::ShapeMismatch(format!("empty batch for tensor {name}")))?;
        let [h, w, c] = first.shape();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            img.ensure_shape([h, w, c], name)?;
            data.extend(img.data().iter().map(|&v| v as f32));
        }
        let shape = if drop_channel && c == 1 {
            vec![images.len(), h, w]
        } else {
            vec![images.len(), h, w, c]
        };
        Tensor::new(name, shape, data)
    }

    /// Splits a rank-3 or rank-4 batch tensor back into images.
    pub fn to_images(&self) -> Result<Vec<Image>> {
        let (b, h, w, c) = match self.shape[..] {
            [b, h, w] => (b, h, w, 1),
            [b, h, w, c] => (b, h, w, c),
            _ => {
                return Err(Error::Protocol(format!(
                    "tensor {} has rank {}, expected 3 or 4",
                    self.name,
                    self.shape.len()
                )))
            }
        };
        let n = h * w * c;
        (0..b)
            .map(|i| {
                let data = self.data[i * n..(i + 1) * n].iter().map(|&v| f64::from(v)).collect();
                Image::from_vec(h, w, c, data)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

impl Frame {
    pub fn new(header: Header, tensors: Vec<Tensor>) -> Self {
        Self { header, tensors }
    }

    pub fn error(request_id: u64, message: impl Into<String>) -> Self {
        let mut header = Header::new(MessageType::Error, request_id);
        header.message = Some(message.into());
        Self::new(header, Vec::new())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Protocol(format!("missing tensor {name:?}")))
    }

    /// Payload bytes (header and tensors, without the length prefix). The
    /// header's tensor list is regenerated from `tensors`.
    pub fn to_payload(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.tensors = self
            .tensors
            .iter()
            .map(|t| TensorInfo {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
            })
            .collect();
        let mut out = serde_json::to_vec(&header)?;
        let total: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        out.reserve(total * 4);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_payload(payload: &[u8]) -> Result<Self> {
        if payload.is_empty() {
            return Err(Error::Protocol("empty frame".into()));
        }
        let mut stream = serde_json::Deserializer::from_slice(payload).into_iter::<Header>();
        let header = match stream.next() {
            Some(Ok(h)) => h,
            Some(Err(e)) => return Err(Error::Protocol(format!("bad header: {e}"))),
            None => return Err(Error::Protocol("missing header".into())),
        };
        let mut rest = &payload[stream.byte_offset()..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in &header.tensors {
            if info.dtype != "f32" {
                return Err(Error::Protocol(format!(
                    "tensor {} has unsupported dtype {:?}",
                    info.name, info.dtype
                )));
            }
            let n: usize = info.shape.iter().product();
            let bytes = n
                .checked_mul(4)
                .filter(|b| *b <= rest.len())
                .ok_or_else(|| Error::Protocol(format!("tensor {} is truncated", info.name)))?;
            let data = rest[..bytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            rest = &rest[bytes..];
            tensors.push(Tensor::new(info.name.clone(), info.shape.clone(), data)?);
        }
        if !rest.is_empty() {
            return Err(Error::Protocol(format!("{} trailing bytes after tensors", rest.len())));
        }
        Ok(Self { header, tensors })
    }
}

/// Writes one length-prefixed frame.
pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    let payload = frame.to_payload()?;
    write_payload(w, &payload).map_err(|e| Error::BackendUnavailable(e.to_string()))
}

pub fn write_payload(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one payload; `Ok(None)` on a clean end of stream before a frame.
pub fn read_payload(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 8];
    let mut got = 0;
    while got < 8 {
        match r.read(&mut len[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => got += n,
        }
    }
    let len = u64::from_le_bytes(len);
    if len > MAX_PAYLOAD {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds the limit"),
        ));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}

pub fn predict_noise_frame(request_id: u64, req: &DenoiseRequest) -> Result<Frame> {
    let mut header = Header::new(MessageType::PredictNoise, request_id);
    header.prompts = req.prompts.clone();
    header.timestep_index = Some(req.timestep_index);
    header.alpha_bar_t = Some(req.alpha_bar_t);
    header.guidance_scale = Some(req.guidance_scale);
    let mut tensors = vec![Tensor::from_images("latents", &req.latents, false)?];
    if let Some(depth) = &req.depth_maps {
        tensors.push(Tensor::from_images("depth_maps", depth, true)?);
    }
    Ok(Frame::new(header, tensors))
}

pub fn decode_frame(request_id: u64, latents: &[Image]) -> Result<Frame> {
    Ok(Frame::new(
        Header::new(MessageType::Decode, request_id),
        vec![Tensor::from_images("latents", latents, false)?],
    ))
}

pub fn pullback_frame(request_id: u64, latents: &[Image], cotangent: &[Image]) -> Result<Frame> {
    Ok(Frame::new(
        Header::new(MessageType::DecodePullback, request_id),
        vec![
            Tensor::from_images("latents", latents, false)?,
            Tensor::from_images("cotangent", cotangent, false)?,
        ],
    ))
}

/// Reconstructs a denoise request from a `predict_noise` frame.
pub fn parse_predict_noise(frame: &Frame) -> Result<DenoiseRequest> {
    let h = &frame.header;
    let missing = |f: &str| Error::Protocol(format!("predict_noise header lacks {f}"));
    let depth_maps = match frame.tensors.iter().find(|t| t.name == "depth_maps") {
        Some(t) => Some(t.to_images()?),
        None => None,
    };
    Ok(DenoiseRequest {
        latents: frame.tensor("latents")?.to_images()?,
        timestep_index: h.timestep_index.ok_or_else(|| missing("timestep_index"))?,
        alpha_bar_t: h.alpha_bar_t.ok_or_else(|| missing("alpha_bar_t"))?,
        prompts: h.prompts.clone(),
        depth_maps,
        guidance_scale: h.guidance_scale.ok_or_else(|| missing("guidance_scale"))?,
    })
}

/// Name of the single tensor carried by a successful response.
pub fn response_tensor_name(kind: MessageType) -> &'static str {
    match kind {
        MessageType::PredictNoise => "noise",
        MessageType::Decode => "images",
        MessageType::DecodePullback => "latent_grad",
        MessageType::Error => "",
    }
}

pub fn response_frame(kind: MessageType, request_id: u64, images: &[Image]) -> Result<Frame> {
    Ok(Frame::new(
        Header::new(kind, request_id),
        vec![Tensor::from_images(response_tensor_name(kind), images, false)?],
    ))
}
