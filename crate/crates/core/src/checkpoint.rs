//! Checkpoint encoding.
//!
//! Binary layout, all integers little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `RLPC`                            |
//! | 4      | 4    | format version (`u32`, currently 1)     |
//! | 8      | 32   | SHA-256 of the canonical context spec   |
//! | 40     | 32   | SHA-256 of the vocabulary               |
//! | 72     | 8    | iteration (`u64`)                       |
//! | 80     | 8    | RL step (`u64`)                         |
//! | 88     | 1    | origin tag: 0 init, 1 warmup, 2 rl, 3 rft |
//! | 89     | 8    | origin payload (`u64`, RFT source iteration, else 0) |
//! | 97     | 8    | state count `S` (`u64`)                 |
//! | 105    | 8    | vocabulary size `V` (`u64`)             |
//! | 113    | 8·S·V| logits as `f64`, row-major by state     |
//!
//! The context spec itself is not embedded; readers supply it and the
//! header hashes are checked against it. A lossless JSON form
//! ([`to_json`]/[`from_json`]) carries the spec inline for debugging.

use crate::error::{Error, Result};
use crate::policy::{ContextSpec, Origin, PolicyParams, Version};

pub const MAGIC: &[u8; 4] = b"RLPC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 113;

pub fn encode(params: &PolicyParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.logits.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&params.spec.hash());
    out.extend_from_slice(&params.spec.vocab_hash());
    out.extend_from_slice(&(params.version.iteration as u64).to_le_bytes());
    out.extend_from_slice(&(params.version.rl_step as u64).to_le_bytes());
    let (tag, payload) = match params.version.origin {
        Origin::Init => (0u8, 0u64),
        Origin::Warmup => (1, 0),
        Origin::Rl => (2, 0),
        Origin::Rft { from_iteration } => (3, from_iteration as u64),
    };
    out.push(tag);
    out.extend_from_slice(&payload.to_le_bytes());
    out.extend_from_slice(&(params.state_count() as u64).to_le_bytes());
    out.extend_from_slice(&(params.vocab_size() as u64).to_le_bytes());
    for x in &params.logits {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"))
}

pub fn decode(spec: &ContextSpec, bytes: &[u8]) -> Result<PolicyParams> {
    let bad = |m: &str| Error::MalformedCheckpoint(m.to_string());
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    if bytes[8..40] != spec.hash() {
        return Err(Error::ParamMismatch("context spec hash differs".into()));
    }
    if bytes[40..72] != spec.vocab_hash() {
        return Err(Error::ParamMismatch("vocabulary hash differs".into()));
    }
    let iteration = u64_at(bytes, 72) as usize;
    let rl_step = u64_at(bytes, 80) as usize;
    let payload = u64_at(bytes, 89) as usize;
    let origin = match bytes[88] {
        0 => Origin::Init,
        1 => Origin::Warmup,
        2 => Origin::Rl,
        3 => Origin::Rft {
            from_iteration: payload,
        },
        t => return Err(bad(&format!("unknown origin tag {t}"))),
    };
    let states = u64_at(bytes, 97) as usize;
    let width = u64_at(bytes, 105) as usize;
    if states != spec.state_count() || width != spec.vocab.len() {
        return Err(Error::ParamMismatch(format!(
            "table is {states}x{width}, spec expects {}x{}",
            spec.state_count(),
            spec.vocab.len()
        )));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * states * width {
        return Err(bad("logit table length does not match header"));
    }
    let logits = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(PolicyParams {
        spec: spec.clone(),
        version: Version {
            iteration,
            rl_step,
            origin,
        },
        logits,
    })
}

pub fn to_json(params: &PolicyParams) -> Result<String> {
    Ok(serde_json::to_string(params)?)
}

pub fn from_json(text: &str) -> Result<PolicyParams> {
    let p: PolicyParams = serde_json::from_str(text)?;
    p.spec.validate()?;
    if p.logits.len() != p.spec.state_count() * p.spec.vocab.len() {
        return Err(Error::MalformedCheckpoint("logit count does not match spec".into()));
    }
    Ok(p)
}
