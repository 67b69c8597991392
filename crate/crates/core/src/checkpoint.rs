//! Versioned single-file checkpoints.
//!
//! Layout: the magic line `MIXDL-CKPT-1\n`, a little-endian `u64` header
//! length, a JSON header (configs, counters, RNG position, tensor index),
//! then every tensor as raw little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{MixdlError, Result};
use crate::models::{ModelConfig, ParamSet};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &str = "MIXDL-CKPT-1";

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    /// `u128` as a decimal string.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    train: TrainConfig,
    model: ModelConfig,
    metadata: serde_json::Value,
    step: u64,
    d_updates: u64,
    rng: RngState,
    adam_steps: [u64; 3],
    tensors: Vec<TensorEntry>,
}

/// A checkpoint read back from disk.
pub struct Checkpoint {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub metadata: serde_json::Value,
    pub state: TrainState,
}

fn groups(state: &TrainState) -> Vec<(String, &ParamSet)> {
    vec![
        ("generator".into(), state.generator.params()),
        ("discriminator".into(), state.discriminator.params()),
        ("projection".into(), &state.projection),
    ]
}

fn optimizers(state: &TrainState) -> [(&str, &Adam); 3] {
    [("generator", &state.opt_g), ("discriminator", &state.opt_d), ("projection", &state.opt_p)]
}

/// Every tensor in a fixed order with its stable name.
fn named_tensors(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (group, params) in groups(state) {
        for (name, t) in params.iter() {
            out.push((format!("{group}/{name}"), t));
        }
    }
    for ((group, opt), (_, params)) in optimizers(state).into_iter().zip(groups(state)) {
        for (moment, ts) in [("m", &opt.m), ("v", &opt.v)] {
            for ((name, _), t) in params.iter().zip(ts.iter()) {
                out.push((format!("adam/{group}/{moment}/{name}"), t));
            }
        }
    }
    out
}

pub fn save(
    path: &Path,
    train: &TrainConfig,
    model: &ModelConfig,
    metadata: &serde_json::Value,
    state: &TrainState,
) -> Result<()> {
    let tensors = named_tensors(state);
    let header = Header {
        format: CHECKPOINT_MAGIC.into(),
        train: train.clone(),
        model: model.clone(),
        metadata: metadata.clone(),
        step: state.step,
        d_updates: state.d_updates,
        rng: RngState {
            seed: state.rng.get_seed().to_vec(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        adam_steps: [state.opt_g.t, state.opt_d.t, state.opt_p.t],
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| MixdlError::io(parent, e))?;
    }
    // write-then-rename so readers never see a partial file
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| MixdlError::io(&tmp, e))?;
    f.write_all(&buf)
        .and_then(|_| f.sync_all())
        .map_err(|e| MixdlError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| MixdlError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| MixdlError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| MixdlError::io(path, e))?;
    let magic_len = CHECKPOINT_MAGIC.len() + 1;
    if bytes.len() < magic_len + 8 || &bytes[..magic_len - 1] != CHECKPOINT_MAGIC.as_bytes() {
        return Err(bad(format!("not a {CHECKPOINT_MAGIC} file")));
    }
    let hlen = u64::from_le_bytes(bytes[magic_len..magic_len + 8].try_into().expect("8 bytes")) as usize;
    let body = magic_len + 8;
    let header: Header = bytes
        .get(body..body.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header".into()))
        .and_then(|h| serde_json::from_slice(h).map_err(|e| bad(format!("bad header: {e}"))))?;
    if header.format != CHECKPOINT_MAGIC {
        return Err(bad(format!("unsupported format {}", header.format)));
    }

    let mut state = TrainState::new(&header.train, &header.model).map_err(|e| bad(e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = named_tensors(&state)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != header.tensors.len()
        || expected
            .iter()
            .zip(&header.tensors)
            .any(|((n, s), e)| *n != e.name || *s != e.shape)
    {
        return Err(bad("tensor index does not match the configured models".into()));
    }
    let mut offset = body + hlen;
    let mut loaded = Vec::with_capacity(expected.len());
    for (_, shape) in &expected {
        let n: usize = shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| bad("truncated tensor data".into()))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        loaded.push(Tensor::new(shape.clone(), data));
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data".into()));
    }

    let mut it = loaded.into_iter();
    let mut take = |k: usize| it.by_ref().take(k).collect::<Vec<_>>();
    let (ng, nd, np) = (
        state.generator.params().len(),
        state.discriminator.params().len(),
        state.projection.len(),
    );
    state.generator.params_mut().load(take(ng))?;
    state.discriminator.params_mut().load(take(nd))?;
    state.projection.load(take(np))?;
    for (opt, k) in [(&mut state.opt_g, ng), (&mut state.opt_d, nd), (&mut state.opt_p, np)] {
        opt.m = take(k);
        opt.v = take(k);
    }
    [state.opt_g.t, state.opt_d.t, state.opt_p.t] = header.adam_steps;
    state.step = header.step;
    state.d_updates = header.d_updates;
    let seed: [u8; 32] = header
        .rng
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| bad("rng seed must be 32 bytes".into()))?;
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| bad("bad rng word position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    Ok(Checkpoint {
        train: header.train,
        model: header.model,
        metadata: header.metadata,
        state,
    })
}
