//! Flat binary layer stacks: the bytes `LSTK`, a little-endian u32 header
//! length, a JSON header, then the video and text tensors as little-endian
//! f32, layer-major then token-major.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{LayerStack, PruneError, Tensor3};

const MAGIC: &[u8; 4] = b"LSTK";
const MAX_HEADER: u32 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackHeader {
    pub version: u32,
    pub dtype: String,
    pub layout: String,
    pub layers: usize,
    pub video_tokens: usize,
    pub text_tokens: usize,
    pub dim: usize,
    pub frame_map: Vec<usize>,
}

impl StackHeader {
    fn of(stack: &LayerStack) -> Self {
        Self {
            version: 1,
            dtype: "f32".into(),
            layout: "layer-major,token-major".into(),
            layers: stack.video.layers,
            video_tokens: stack.video.tokens,
            text_tokens: stack.text.tokens,
            dim: stack.video.dim,
            frame_map: stack.frame_map.clone(),
        }
    }
}

pub fn write_stack<W: Write>(stack: &LayerStack, mut w: W) -> Result<(), PruneError> {
    stack.validate()?;
    let header = serde_json::to_vec(&StackHeader::of(stack)).map_err(|e| PruneError::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(4 * (stack.video.data.len() + stack.text.data.len()));
    for &x in stack.video.data.iter().chain(&stack.text.data) {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R, layers: usize, tokens: usize, dim: usize) -> Result<Tensor3, PruneError> {
    let count = layers
        .checked_mul(tokens)
        .and_then(|x| x.checked_mul(dim))
        .ok_or_else(|| PruneError::Format("shape overflows".into()))?;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor3::from_vec(layers, tokens, dim, data)
}

pub fn read_stack<R: Read>(mut r: R) -> Result<LayerStack, PruneError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(PruneError::Format("bad magic".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(PruneError::Format(format!("header of {len} bytes")));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header)?;
    let h: StackHeader = serde_json::from_slice(&header).map_err(|e| PruneError::Format(e.to_string()))?;
    if h.dtype != "f32" {
        return Err(PruneError::Format(format!("unsupported dtype {}", h.dtype)));
    }
    let video = read_tensor(&mut r, h.layers, h.video_tokens, h.dim)?;
    let text = read_tensor(&mut r, h.layers, h.text_tokens, h.dim)?;
    LayerStack::new(video, text, h.frame_map)
}
