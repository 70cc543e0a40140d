//! Self-contained model checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "RRCKPT\0\0" | version u32 | header_len u32 | header (JSON)
//! tensor_count u32 | per tensor: name_len u32, name, ndim u32, dims u32*, data f64*
//! ```
//!
//! The header carries the encoder config, head kind, segmentation settings and
//! training progress. Tensors use the model's parameter names (`embed.*`,
//! `layer{i}.*`, `pooler.*`, `head.*`, `seg.*`); optimizer moments, when saved,
//! follow as `opt.m.<name>` and `opt.v.<name>`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::ltr::HeadKind;
use crate::model::RankModel;
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::segmentation::{SegmentConfig, DEFAULT_ATTENTION_SIZE};
use crate::train::TrainState;

const MAGIC: &[u8; 8] = b"RRCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    head_kind: HeadKind,
    segmentation: Option<SegmentConfig>,
    attention_size: Option<usize>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    epochs_done: usize,
}

struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Writes `model` and, if given, the optimizer state needed to resume training.
pub fn save(path: impl AsRef<Path>, model: &RankModel, state: Option<&TrainState>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        encoder: model.encoder.config.clone(),
        head_kind: model.head_kind(),
        segmentation: model.segmentation,
        attention_size: model.attention.as_ref().map(|a| a.attention_size()),
        optimizer: state.map(|s| OptimizerHeader {
            beta1: s.adam.beta1,
            beta2: s.adam.beta2,
            eps: s.adam.eps,
            step: s.adam.step,
            epochs_done: s.epochs_done,
        }),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut tensors: Vec<Tensor> = model
        .tensors()
        .into_iter()
        .map(|t| Tensor {
            name: t.name,
            shape: t.shape,
            data: t.data.to_vec(),
        })
        .collect();
    if let Some(s) = state {
        for (kind, pick) in [("m", 0usize), ("v", 1)] {
            for (name, mv) in &s.adam.moments {
                let v = if pick == 0 { &mv.0 } else { &mv.1 };
                tensors.push(Tensor {
                    name: format!("opt.{kind}.{name}"),
                    shape: vec![v.len()],
                    data: v.clone(),
                });
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_all(&mut w, &header, &tensors)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn write_all(w: &mut impl Write, header: &[u8], tensors: &[Tensor]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(header.len() as u32)?;
    w.write_all(header)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for t in tensors {
        w.write_u32::<LittleEndian>(t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
        for &d in &t.shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &x in &t.data {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

/// Reads a checkpoint. The training state is present only if it was saved.
pub fn load(path: impl AsRef<Path>) -> Result<(RankModel, Option<TrainState>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, "truncated checkpoint")
        } else {
            Error::io(path, e)
        }
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes).map_err(io)?;
    let header: Header = serde_json::from_slice(&hbytes)
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;

    let count = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let ndim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>().map_err(io)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0f64; n];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::format(path, format!("tensor {name} appears twice")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io)? != 0 {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }

    let mut model = RankModel::new(
        header.encoder,
        header.head_kind,
        header.segmentation,
        header.attention_size.unwrap_or(DEFAULT_ATTENTION_SIZE),
    )?;
    let shapes: Vec<(String, Vec<usize>)> =
        model.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    for ((name, shape), t) in shapes.iter().zip(model.tensors_mut()) {
        let (s, data) = tensors
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        if &s != shape {
            return Err(Error::format(
                path,
                format!("tensor {name} has shape {s:?}, expected {shape:?}"),
            ));
        }
        t.data.copy_from_slice(&data);
    }
    let state = match header.optimizer {
        None => None,
        Some(o) => {
            let mut adam = Adam::new(o.beta1, o.beta2, o.eps);
            adam.step = o.step;
            for (name, _) in &shapes {
                let m = tensors.remove(&format!("opt.m.{name}"));
                let v = tensors.remove(&format!("opt.v.{name}"));
                match (m, v) {
                    (Some((_, m)), Some((_, v))) => {
                        adam.moments.insert(name.clone(), (m, v));
                    }
                    (None, None) => {}
                    _ => {
                        return Err(Error::format(path, format!("incomplete moments for {name}")))
                    }
                }
            }
            Some(TrainState {
                adam,
                epochs_done: o.epochs_done,
            })
        }
    };
    if let Some(name) = tensors.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor {name}")));
    }
    Ok((model, state))
}
