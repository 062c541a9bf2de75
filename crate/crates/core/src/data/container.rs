//! Binary clip and saliency-map containers.
//!
//! Both share one framing: an 8-byte magic, a little-endian `u32` header
//! length, a UTF-8 JSON header, then raw little-endian payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClipRecord, SaliencyTarget, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 8] = b"VSAGECLP";
pub const MAP_MAGIC: &[u8; 8] = b"VSAGEMAP";
const DTYPE: &str = "f32le";

pub(crate) fn frame_bytes(magic: &[u8; 8], header: &[u8], payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out
}

/// Splits a framed file into `(header json bytes, payload)`.
pub(crate) fn unframe<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned();
        return Err(Error::BadMagic { expected: String::from_utf8_lossy(magic).into_owned(), found });
    }
    if bytes.len() < 12 {
        return Err(Error::BadHeader("missing header length".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + len {
        return Err(Error::BadHeader(format!("header advertises {len} bytes, only {} present", bytes.len() - 12)));
    }
    Ok((&bytes[12..12 + len], &bytes[12 + len..]))
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
}

/// Exact payload length check shared by the readers.
pub(crate) fn check_payload(payload: &[u8], expected: usize) -> Result<()> {
    if payload.len() < expected {
        return Err(Error::TruncatedPayload { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::HeaderMismatch(format!(
            "header implies {expected} payload bytes but {} follow",
            payload.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ClipHeader {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    clip_id: String,
    fps: f32,
    seed: u64,
    dtype: String,
}

fn parse_header<H: for<'de> Deserialize<'de>>(json: &[u8]) -> Result<H> {
    serde_json::from_slice(json).map_err(|e| Error::BadHeader(e.to_string()))
}

pub fn encode_clip(record: &ClipRecord) -> Result<Vec<u8>> {
    let (t, h, w) = record.clip.dims();
    let header = serde_json::to_vec(&ClipHeader {
        t,
        h,
        w,
        clip_id: record.clip.clip_id.clone(),
        fps: record.clip.fps,
        seed: record.seed,
        dtype: DTYPE.into(),
    })?;
    let payload_len = 4 * (t * 3 * h * w + t * h * w) + t * h * w;
    let mut out = frame_bytes(CLIP_MAGIC, &header, payload_len);
    push_f32s(&mut out, record.clip.frames.data());
    push_f32s(&mut out, record.target.density.data());
    out.extend_from_slice(&record.target.fixations);
    Ok(out)
}

pub fn decode_clip(bytes: &[u8]) -> Result<ClipRecord> {
    let (json, payload) = unframe(bytes, CLIP_MAGIC)?;
    let hdr: ClipHeader = parse_header(json)?;
    if hdr.dtype != DTYPE {
        return Err(Error::BadHeader(format!("unsupported dtype {:?}", hdr.dtype)));
    }
    if hdr.t == 0 || hdr.h == 0 || hdr.w == 0 {
        return Err(Error::HeaderMismatch(format!("degenerate shape ({}, {}, {})", hdr.t, hdr.h, hdr.w)));
    }
    let plane = hdr.t * hdr.h * hdr.w;
    let frames_len = 4 * 3 * plane;
    let density_len = 4 * plane;
    check_payload(payload, frames_len + density_len + plane)?;
    let frames = Tensor::from_vec(&[hdr.t, 3, hdr.h, hdr.w], read_f32s(&payload[..frames_len]))?;
    let density = Tensor::from_vec(&[hdr.t, hdr.h, hdr.w], read_f32s(&payload[frames_len..frames_len + density_len]))?;
    let fixations = payload[frames_len + density_len..].to_vec();
    let clip = VideoClip::new(frames, hdr.clip_id, hdr.fps).map_err(|e| Error::HeaderMismatch(e.to_string()))?;
    let target = SaliencyTarget::new(density, fixations).map_err(|e| Error::HeaderMismatch(e.to_string()))?;
    ClipRecord::new(clip, target, hdr.seed)
}

pub fn write_clip_container(record: &ClipRecord, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_clip(record)?)?;
    Ok(())
}

pub fn read_clip_container(path: impl AsRef<Path>) -> Result<ClipRecord> {
    decode_clip(&fs::read(path)?)
}

/// Whether a stored `(T, H, W)` map holds raw logits or saliency in `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Logits,
    Saliency,
}

/// Per-pixel score volume `(T, H, W)` as exchanged between CLI stages.
#[derive(Debug, Clone, PartialEq)]
pub struct MapVolume {
    pub values: Tensor<f32>,
    pub kind: MapKind,
    pub clip_id: String,
}

impl MapVolume {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }

    /// Saliency view: sigmoid of logits, or the stored values as-is.
    pub fn saliency(&self) -> Tensor<f32> {
        match self.kind {
            MapKind::Logits => self.values.map(crate::Scalar::sigmoid),
            MapKind::Saliency => self.values.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MapHeader {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    kind: MapKind,
    clip_id: String,
    dtype: String,
}

pub fn encode_map(map: &MapVolume) -> Result<Vec<u8>> {
    if map.values.shape().len() != 3 {
        return Err(Error::Shape(format!("map volume must be (T, H, W), got {:?}", map.values.shape())));
    }
    let (t, h, w) = map.dims();
    let header =
        serde_json::to_vec(&MapHeader { t, h, w, kind: map.kind, clip_id: map.clip_id.clone(), dtype: DTYPE.into() })?;
    let mut out = frame_bytes(MAP_MAGIC, &header, 4 * t * h * w);
    push_f32s(&mut out, map.values.data());
    Ok(out)
}

pub fn decode_map(bytes: &[u8]) -> Result<MapVolume> {
    let (json, payload) = unframe(bytes, MAP_MAGIC)?;
    let hdr: MapHeader = parse_header(json)?;
    if hdr.dtype != DTYPE {
        return Err(Error::BadHeader(format!("unsupported dtype {:?}", hdr.dtype)));
    }
    let n = hdr.t * hdr.h * hdr.w;
    if n == 0 {
        return Err(Error::HeaderMismatch("degenerate map shape".into()));
    }
    check_payload(payload, 4 * n)?;
    Ok(MapVolume {
        values: Tensor::from_vec(&[hdr.t, hdr.h, hdr.w], read_f32s(payload))?,
        kind: hdr.kind,
        clip_id: hdr.clip_id,
    })
}

pub fn write_map_container(map: &MapVolume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_map(map)?)?;
    Ok(())
}

pub fn read_map_container(path: impl AsRef<Path>) -> Result<MapVolume> {
    decode_map(&fs::read(path)?)
}
