//! Checkpoint format: one line of compact JSON header terminated by `\n`,
//! followed by every parameter as little-endian `f32`, base store first,
//! each store in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layout::{declare_base, declare_control, DenoiserDims};
use super::DenoiserModel;
use crate::error::{Error, Result};
use crate::scheduler::ScheduleConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "tdm-denoiser";
const MAX_HEADER_BYTES: usize = 64 * 1024;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    dims: DenoiserDims,
    schedule: ScheduleConfig,
    base_elements: usize,
    control_elements: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_checkpoint(model: &DenoiserModel) -> Vec<u8> {
    let header = Header {
        format: FORMAT_TAG.to_string(),
        version: CHECKPOINT_VERSION,
        seed: model.seed,
        dims: model.dims,
        schedule: model.schedule,
        base_elements: model.base.element_count(),
        control_elements: model.control.element_count(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(4 * (header.base_elements + header.control_elements));
    for store in [&model.base, &model.control] {
        for v in store.values().iter().flat_map(|a| a.iter()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DenoiserModel> {
    let newline = bytes
        .iter()
        .take(MAX_HEADER_BYTES)
        .position(|b| *b == b'\n')
        .ok_or_else(|| bad("missing header terminator"))?;
    let header: Header = serde_json::from_slice(&bytes[..newline]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(bad(format!("unexpected format tag {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    header.dims.validate().map_err(|e| bad(e.to_string()))?;

    // Shapes only; nothing is allocated until the blob length checks out.
    let (base_decl, _) = declare_base(&header.dims);
    let (control_decl, _) = declare_control(&header.dims);
    let (nb, nc) = (base_decl.element_count(), control_decl.element_count());
    if header.base_elements != nb || header.control_elements != nc {
        return Err(bad(format!(
            "element counts {}/{} disagree with dims ({nb}/{nc})",
            header.base_elements, header.control_elements
        )));
    }
    let blob = &bytes[newline + 1..];
    if blob.len() != 4 * (nb + nc) {
        return Err(bad(format!("blob holds {} bytes, expected {}", blob.len(), 4 * (nb + nc))));
    }

    let mut model =
        DenoiserModel::zeroed(header.dims, header.seed, header.schedule).map_err(|e| bad(e.to_string()))?;
    let mut floats = blob
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    for store in [&mut model.base, &mut model.control] {
        for arr in store.values_mut() {
            for v in arr.iter_mut() {
                *v = floats.next().expect("length checked");
            }
        }
    }
    if model
        .base
        .values()
        .iter()
        .chain(model.control.values())
        .any(|a| a.iter().any(|v| !v.is_finite()))
    {
        return Err(bad("non-finite parameter"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &DenoiserModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserModel> {
    decode_checkpoint(&std::fs::read(path)?)
}
