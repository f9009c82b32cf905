use std::fs;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::layer::Sequential;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::seed;

const MAGIC: &[u8; 4] = b"TSWT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

/// Ordered named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelWeights<T = f32> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn new() -> Self {
        ModelWeights { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::State(format!("duplicate parameter '{name}'")));
        }
        self.params.push(Param {
            name,
            tensor,
            frozen,
        });
        Ok(())
    }

    pub fn extend(&mut self, other: ModelWeights<T>) -> Result<()> {
        for p in other.params {
            self.push(p.name, p.tensor, p.frozen)?;
        }
        Ok(())
    }

    fn find(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::State(format!("no parameter named '{name}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.find(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::State(format!("no parameter named '{name}'")))
    }

    pub fn is_frozen(&self, name: &str) -> Result<bool> {
        Ok(self.find(name)?.frozen)
    }

    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            p.frozen = frozen;
        }
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                })
                .collect(),
        }
    }

    /// Parameters whose names start with `prefix`, cloned.
    pub fn subset(&self, prefix: &str) -> ModelWeights<T> {
        ModelWeights {
            params: self
                .params
                .iter()
                .filter(|p| p.name.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    /// Replaces the values of every parameter present in `other`.
    pub fn assign(&mut self, other: &ModelWeights<T>) -> Result<()> {
        for p in &other.params {
            let dst = self.tensor_mut(&p.name)?;
            if dst.shape() != p.tensor.shape() {
                return Err(Error::Shape(format!(
                    "'{}' shape {:?} vs {:?}",
                    p.name,
                    dst.shape(),
                    p.tensor.shape()
                )));
            }
            *dst = p.tensor.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, frozen flags, shapes, and values (as f32 bits) of
    /// the parameters whose names start with `prefix`.
    pub fn hash(&self, prefix: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update((p.name.len() as u32).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update([p.frozen as u8]);
            for &e in p.tensor.shape() {
                h.update((e as u32).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// He-uniform weights (limit `sqrt(6 / fan_in)`) and zero biases.
/// Each tensor draws from its own stream keyed by its name.
pub fn init_weights<T: Scalar>(
    net: &Sequential,
    seed: u64,
    frozen: bool,
) -> Result<ModelWeights<T>> {
    let mut weights = ModelWeights::new();
    for (i, layer) in net.layers.iter().enumerate() {
        let Some((wshape, bshape)) = layer.param_shapes() else {
            continue;
        };
        let name = net.weight_name(i);
        let limit = (6.0 / layer.fan_in() as f64).sqrt();
        let mut rng = seed::rng(seed, &[seed::tag(&name)]);
        let n: usize = wshape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.gen_range(-limit..limit)))
            .collect();
        weights.push(name, Tensor::from_vec(&wshape, data)?, frozen)?;
        weights.push(net.bias_name(i), Tensor::zeros(&bshape), frozen)?;
    }
    Ok(weights)
}

pub fn encode_weights(weights: &ModelWeights<f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for p in weights.params() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::format(format!("name '{}' too long", p.name)))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.frozen as u8);
        buf.push(p.tensor.rank() as u8);
        for &e in p.tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Parses a weights payload from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_weights(bytes: &[u8]) -> Result<(ModelWeights<f32>, usize)> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("weights truncated"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::format("not a TSWT weights file (bad magic)"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported weights version {version}"
        )));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut weights = ModelWeights::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(len)?.to_vec())
            .map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let frozen = match take(1)?[0] {
            0 => false,
            1 => true,
            f => return Err(Error::format(format!("bad frozen flag {f}"))),
        };
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::format("shape overflow"))?;
        let raw = take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format("shape overflow"))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        weights.push(name, Tensor::from_vec(&shape, data)?, frozen)?;
    }
    Ok((weights, pos))
}

pub fn save_weights(weights: &ModelWeights<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_weights(weights)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (weights, used) = decode_weights(&bytes)?;
    if used != bytes.len() {
        return Err(Error::format("trailing bytes after weights"));
    }
    Ok(weights)
}
