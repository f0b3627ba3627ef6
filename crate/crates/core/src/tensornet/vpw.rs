//! Binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "VPW1"
//! count   u32      number of tensors
//! per tensor:
//!   name_len u16, name bytes (UTF-8),
//!   rank     u8,  dims rank x u32,
//!   data     prod(dims) x f32
//! ```
//!
//! A graph saves its parameters in creation order followed by the running
//! statistics of each normalization layer (`<layer>.running_mean`,
//! `<layer>.running_var`). Loading matches strictly by name: a missing,
//! unknown, duplicated, or reshaped tensor is an error.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Graph, Tensor};

const MAGIC: &[u8; 4] = b"VPW1";

/// Named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serializes named tensors into the container byte layout.
pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| too_many())?.to_le_bytes());
    for t in tensors {
        let name_len =
            u16::try_from(t.name.len()).map_err(|_| Error::Format("tensor name too long".into()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        let rank = u8::try_from(t.dims.len())
            .map_err(|_| Error::Format("tensor rank exceeds 255".into()))?;
        out.push(rank);
        let mut numel = 1usize;
        for &d in &t.dims {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| too_many())?.to_le_bytes());
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format("tensor dims overflow".into()))?;
        }
        if numel != t.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor '{}' dims {:?} do not match {} values",
                t.name,
                t.dims,
                t.data.len()
            )));
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn too_many() -> Error {
    Error::Format("value exceeds the container's 32-bit limits".into())
}

/// Parses the container byte layout.
pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format(format!(
                "weight container truncated at byte {}",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Format("missing weight container magic 'VPW1'".into()));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            dims.push(d);
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format("tensor dims overflow".into()))?;
        }
        let raw = take(&mut pos, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "weight container has {} trailing bytes",
            bytes.len() - pos
        )));
    }
    Ok(tensors)
}

/// All persistent tensors of a graph: parameters, then normalization
/// running statistics.
pub fn graph_tensors<S: Scalar>(graph: &Graph<S>) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for i in 0..graph.param_count() {
        let t = graph.param_tensor(i);
        out.push(NamedTensor {
            name: graph.param_name(i).to_string(),
            dims: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
        });
    }
    for (name, mean, var) in graph.bn_state() {
        for (suffix, t) in [("running_mean", mean), ("running_var", var)] {
            out.push(NamedTensor {
                name: format!("{name}.{suffix}"),
                dims: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
            });
        }
    }
    out
}

/// Installs decoded tensors into a graph, matching strictly by name.
pub fn install_tensors<S: Scalar>(graph: &mut Graph<S>, tensors: Vec<NamedTensor>) -> Result<()> {
    let mut by_name: HashMap<String, NamedTensor> = HashMap::new();
    for t in tensors {
        if by_name.insert(t.name.clone(), t).is_some() {
            return Err(Error::Format(
                "weight container repeats a tensor name".into(),
            ));
        }
    }

    let mut install = |name: &str, dst: &mut Tensor<S>| -> Result<()> {
        let t = by_name
            .remove(name)
            .ok_or_else(|| Error::Format(format!("weight container is missing '{name}'")))?;
        if t.dims != dst.shape() {
            return Err(Error::ShapeMismatch(format!(
                "tensor '{}' has dims {:?} on disk but the graph expects {:?}",
                name,
                t.dims,
                dst.shape()
            )));
        }
        for (d, &v) in dst.data_mut().iter_mut().zip(&t.data) {
            *d = S::from_f64_lossy(v as f64);
        }
        Ok(())
    };

    for i in 0..graph.param_count() {
        let name = graph.param_name(i).to_string();
        // Split borrows: look the tensor up by index after naming it.
        let mut tensor = std::mem::replace(graph.param_tensor_mut(i), Tensor::zeros(&[1]));
        let res = install(&name, &mut tensor);
        *graph.param_tensor_mut(i) = tensor;
        res?;
    }
    for (name, mean, var) in graph.bn_state_mut() {
        install(&format!("{name}.running_mean"), mean)?;
        install(&format!("{name}.running_var"), var)?;
    }

    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!(
            "weight container holds unknown tensor '{extra}'"
        )));
    }
    Ok(())
}

/// Writes a graph's persistent tensors to a weight file.
pub fn save_weights<S: Scalar>(graph: &Graph<S>, path: &Path) -> Result<()> {
    let bytes = encode(&graph_tensors(graph))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a weight file saved by [`save_weights`] into a structurally
/// identical graph.
pub fn load_weights<S: Scalar>(graph: &mut Graph<S>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    install_tensors(graph, decode(&bytes)?)
}
