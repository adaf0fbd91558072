//! "YTCK" checkpoint format: a wiring manifest plus parameter tensors.
//!
//! The manifest stores enough structure (kinds, names, edges) that a
//! checkpoint alone reconstructs the graph; loading re-runs the same
//! validation the builder applies, so a corrupted or hand-edited file
//! cannot produce an inconsistent model.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::graph::{LayerKind, LayerNode, ModelGraph, NodeParams};
use super::{NnError, RegConfig, RegNorm, Scalar, Tensor2};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"YTCK";
pub const CHECKPOINT_VERSION: u8 = 0x01;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not a YTCK checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0:#04x}")]
    BadVersion(u8),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl From<NnError> for CheckpointError {
    fn from(e: NnError) -> Self {
        CheckpointError::Malformed(e.to_string())
    }
}

pub fn save_checkpoint<E: Scalar>(
    graph: &ModelGraph<E>,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(graph, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<E: Scalar>(
    path: impl AsRef<Path>,
) -> Result<ModelGraph<E>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let graph = read_checkpoint(&mut r)?;
    // Trailing bytes mean the file is not what the manifest claims.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(CheckpointError::Malformed(
            "trailing bytes after parameters".into(),
        ));
    }
    Ok(graph)
}

pub fn write_checkpoint<E: Scalar, W: Write>(
    graph: &ModelGraph<E>,
    w: &mut W,
) -> Result<(), CheckpointError> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;

    let nodes = graph.nodes();
    let count = u32::try_from(nodes.len())
        .map_err(|_| CheckpointError::Malformed("too many nodes".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for node in nodes {
        write_kind(&node.kind, w)?;
        let name = node.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| CheckpointError::Malformed(format!("name too long: {:?}", node.name)))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        let n_inputs = u16::try_from(node.inputs.len())
            .map_err(|_| CheckpointError::Malformed("too many inputs".into()))?;
        w.write_all(&n_inputs.to_le_bytes())?;
        for &src in &node.inputs {
            w.write_all(&(src as u32).to_le_bytes())?;
        }
    }

    w.write_all(&(graph.input_dim() as u32).to_le_bytes())?;
    w.write_all(&(graph.output_dim() as u32).to_le_bytes())?;
    w.write_all(&(graph.output_id() as u32).to_le_bytes())?;
    w.write_all(&graph.rng_seed().to_le_bytes())?;
    let reg = graph.reg();
    let norm_tag: u8 = match reg.norm {
        RegNorm::None => 0,
        RegNorm::L1 => 1,
        RegNorm::L2 => 2,
    };
    w.write_all(&[norm_tag])?;
    w.write_all(&reg.penalty.to_le_bytes())?;

    for (_, p) in graph.params() {
        let (rows, cols) = p.weight.shape();
        w.write_all(&(rows as u32).to_le_bytes())?;
        w.write_all(&(cols as u32).to_le_bytes())?;
        for &v in p.weight.data() {
            w.write_all(&v.to_f64().to_le_bytes())?;
        }
        let bias = p.bias.as_deref().unwrap_or(&[]);
        w.write_all(&(bias.len() as u32).to_le_bytes())?;
        for &v in bias {
            w.write_all(&v.to_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<E: Scalar, R: Read>(r: &mut R) -> Result<ModelGraph<E>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u8(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }

    let count = read_u32(r)? as usize;
    if count == 0 {
        return Err(CheckpointError::Malformed("empty node list".into()));
    }
    // A node costs at least 5 manifest bytes; anything claiming more nodes
    // than any real file could hold is rejected before allocating.
    if count > 1 << 20 {
        return Err(CheckpointError::Malformed(format!(
            "implausible node count {count}"
        )));
    }
    let mut nodes = Vec::with_capacity(count);
    for id in 0..count {
        let kind = read_kind(r)?;
        let name_len = read_u16(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed(format!("node {id} name is not UTF-8")))?;
        let n_inputs = read_u16(r)? as usize;
        let mut inputs = Vec::with_capacity(n_inputs);
        for _ in 0..n_inputs {
            inputs.push(read_u32(r)? as usize);
        }
        nodes.push(LayerNode {
            id,
            name,
            kind,
            inputs,
        });
    }

    let input_dim = read_u32(r)? as usize;
    let output_dim = read_u32(r)? as usize;
    let output_id = read_u32(r)? as usize;
    let rng_seed = read_u64(r)?;
    let reg = RegConfig {
        norm: match read_u8(r)? {
            0 => RegNorm::None,
            1 => RegNorm::L1,
            2 => RegNorm::L2,
            t => {
                return Err(CheckpointError::Malformed(format!(
                    "unknown reg norm tag {t}"
                )))
            }
        },
        penalty: read_f64(r)?,
    };
    if !reg.penalty.is_finite() || reg.penalty < 0.0 {
        return Err(CheckpointError::Malformed(format!(
            "bad reg penalty {}",
            reg.penalty
        )));
    }

    let mut params: Vec<Option<NodeParams<E>>> = Vec::with_capacity(count);
    for node in &nodes {
        let has_params = matches!(
            node.kind,
            LayerKind::Dense { .. } | LayerKind::Conv1x1 { .. } | LayerKind::Projection { .. }
        );
        if !has_params {
            params.push(None);
            continue;
        }
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| {
            CheckpointError::Malformed(format!("weight shape {rows}x{cols} overflows"))
        })?;
        if n > (1 << 28) {
            return Err(CheckpointError::Malformed(format!(
                "implausible weight shape {rows}x{cols}"
            )));
        }
        let mut weight = Vec::with_capacity(n);
        for _ in 0..n {
            weight.push(read_scalar::<E, _>(r, node.id)?);
        }
        let bias_len = read_u32(r)? as usize;
        if bias_len > (1 << 24) {
            return Err(CheckpointError::Malformed(format!(
                "implausible bias len {bias_len}"
            )));
        }
        let bias = if bias_len == 0 {
            None
        } else {
            let mut b = Vec::with_capacity(bias_len);
            for _ in 0..bias_len {
                b.push(read_scalar::<E, _>(r, node.id)?);
            }
            Some(b)
        };
        let weight = Tensor2::from_vec(rows, cols, weight);
        params.push(Some(NodeParams { weight, bias }));
    }

    let graph = ModelGraph::from_parts(nodes, params, input_dim, output_id, rng_seed, reg)?;
    if graph.output_dim() != output_dim {
        return Err(CheckpointError::Malformed(format!(
            "stored output_dim {output_dim} disagrees with inferred {}",
            graph.output_dim()
        )));
    }
    Ok(graph)
}

fn write_kind<W: Write>(kind: &LayerKind, w: &mut W) -> Result<(), CheckpointError> {
    match *kind {
        LayerKind::Input => w.write_all(&[0])?,
        LayerKind::Dense { in_dim, out_dim } => {
            w.write_all(&[1])?;
            w.write_all(&(in_dim as u32).to_le_bytes())?;
            w.write_all(&(out_dim as u32).to_le_bytes())?;
        }
        LayerKind::Relu => w.write_all(&[2])?,
        LayerKind::Sigmoid => w.write_all(&[3])?,
        LayerKind::Softmax { group } => {
            w.write_all(&[4])?;
            w.write_all(&(group as u32).to_le_bytes())?;
        }
        LayerKind::Dropout { keep_prob } => {
            w.write_all(&[5])?;
            w.write_all(&keep_prob.to_le_bytes())?;
        }
        LayerKind::Add => w.write_all(&[6])?,
        LayerKind::Concat => w.write_all(&[7])?,
        LayerKind::Conv1x1 {
            in_channels,
            out_channels,
        } => {
            w.write_all(&[8])?;
            w.write_all(&(in_channels as u32).to_le_bytes())?;
            w.write_all(&(out_channels as u32).to_le_bytes())?;
        }
        LayerKind::MaxPool1 => w.write_all(&[9])?,
        LayerKind::Flatten => w.write_all(&[10])?,
        LayerKind::Projection {
            in_dim,
            out_dim,
            noisy,
        } => {
            w.write_all(&[11])?;
            w.write_all(&(in_dim as u32).to_le_bytes())?;
            w.write_all(&(out_dim as u32).to_le_bytes())?;
            w.write_all(&[noisy as u8])?;
        }
        LayerKind::MoeCombine { mixtures } => {
            w.write_all(&[12])?;
            w.write_all(&(mixtures as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_kind<R: Read>(r: &mut R) -> Result<LayerKind, CheckpointError> {
    Ok(match read_u8(r)? {
        0 => LayerKind::Input,
        1 => LayerKind::Dense {
            in_dim: read_u32(r)? as usize,
            out_dim: read_u32(r)? as usize,
        },
        2 => LayerKind::Relu,
        3 => LayerKind::Sigmoid,
        4 => LayerKind::Softmax {
            group: read_u32(r)? as usize,
        },
        5 => {
            let keep_prob = read_f64(r)?;
            if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                return Err(CheckpointError::Malformed(format!(
                    "bad keep_prob {keep_prob}"
                )));
            }
            LayerKind::Dropout { keep_prob }
        }
        6 => LayerKind::Add,
        7 => LayerKind::Concat,
        8 => LayerKind::Conv1x1 {
            in_channels: read_u32(r)? as usize,
            out_channels: read_u32(r)? as usize,
        },
        9 => LayerKind::MaxPool1,
        10 => LayerKind::Flatten,
        11 => {
            let in_dim = read_u32(r)? as usize;
            let out_dim = read_u32(r)? as usize;
            let noisy = match read_u8(r)? {
                0 => false,
                1 => true,
                t => {
                    return Err(CheckpointError::Malformed(format!("bad noisy flag {t}")));
                }
            };
            LayerKind::Projection {
                in_dim,
                out_dim,
                noisy,
            }
        }
        12 => LayerKind::MoeCombine {
            mixtures: read_u32(r)? as usize,
        },
        t => {
            return Err(CheckpointError::Malformed(format!(
                "unknown layer kind tag {t}"
            )))
        }
    })
}

fn read_scalar<E: Scalar, R: Read>(r: &mut R, node: usize) -> Result<E, CheckpointError> {
    let v = read_f64(r)?;
    if !v.is_finite() {
        return Err(CheckpointError::Malformed(format!(
            "non-finite parameter in node {node}"
        )));
    }
    Ok(E::from_f64(v))
}

fn read_u8<R: Read>(r: &mut R) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
