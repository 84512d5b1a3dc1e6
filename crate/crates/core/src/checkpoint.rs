//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ROMA" | version: u32 | count: u32
//! per array: name_len: u16 | name (UTF-8) | dtype: u8 (0 = f32, 1 = f64)
//!            | rank: u8 | dims: u32 × rank | raw LE data
//! ```

use std::fs;
use std::path::Path;

use crate::encoder::{BatchNorm, Block, EncoderParams, Linear};
use crate::error::{Error, Result};
use crate::graph::BnStats;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ROMA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => f32::DTYPE_TAG,
            ArrayData::F64(_) => f64::DTYPE_TAG,
        }
    }

    fn to_vec<T: Scalar>(&self) -> Vec<T> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        }
    }

    fn from_slice<T: Scalar>(v: &[T]) -> Self {
        if T::DTYPE_TAG == f32::DTYPE_TAG {
            ArrayData::F32(v.iter().map(|x| x.as_f64() as f32).collect())
        } else {
            ArrayData::F64(v.iter().map(|x| x.as_f64()).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, shape: &[usize], data: &[T]) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: shape.to_vec(),
            data: ArrayData::from_slice(data),
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn dtype_tag(&self) -> Option<u8> {
        self.arrays.first().map(|a| a.data.tag())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let name = a.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("array name too long: {}", a.name)))?;
            let rank = u8::try_from(a.shape.len())
                .map_err(|_| Error::Format(format!("rank too large for {}", a.name)))?;
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Format(format!("array {} shape/data mismatch", a.name)));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(a.data.tag());
            out.push(rank);
            for &d in &a.shape {
                let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                ArrayData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_string();
            let tag = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = match tag {
                0 => ArrayData::F32(r.take(n * 4)?.chunks_exact(4).map(f32::read_le).collect()),
                1 => ArrayData::F64(r.take(n * 8)?.chunks_exact(8).map(f64::read_le).collect()),
                t => return Err(Error::Format(format!("unknown dtype tag {}", t))),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Every trainable tensor plus BN running statistics.
    pub fn from_params<T: Scalar>(params: &EncoderParams<T>) -> Self {
        let mut ck = Checkpoint::default();
        let mut sections = vec![("backbone", &params.backbone), ("projector", &params.projector)];
        if let Some(p) = &params.predictor {
            sections.push(("predictor", p));
        }
        for (section, blocks) in sections {
            for (i, b) in blocks.iter().enumerate() {
                let pre = format!("{}.{}", section, i);
                ck.push(format!("{}.weight", pre), b.linear.weight.shape(), b.linear.weight.data());
                ck.push(format!("{}.bias", pre), b.linear.bias.shape(), b.linear.bias.data());
                if let Some(bn) = &b.bn {
                    let d = bn.gamma.len();
                    ck.push(format!("{}.bn.gamma", pre), &[d], bn.gamma.data());
                    ck.push(format!("{}.bn.beta", pre), &[d], bn.beta.data());
                    ck.push(format!("{}.bn.running_mean", pre), &[d], &bn.stats.mean);
                    ck.push(format!("{}.bn.running_var", pre), &[d], &bn.stats.var);
                }
            }
        }
        ck
    }

    /// Rebuilds encoder parameters; values are converted to `T` if the
    /// stored dtype differs.
    pub fn to_params<T: Scalar>(&self) -> Result<EncoderParams<T>> {
        let backbone = self.blocks("backbone", |_, _| true)?;
        if backbone.is_empty() {
            return Err(Error::Format("checkpoint has no backbone".into()));
        }
        let projector = self.blocks("projector", |i, _| i < 2)?;
        if projector.len() != 3 {
            return Err(Error::Format(format!(
                "checkpoint projector has {} layers, expected 3",
                projector.len()
            )));
        }
        let predictor = self.blocks("predictor", |i, _| i == 0)?;
        let predictor = match predictor.len() {
            0 => None,
            2 => Some(predictor),
            n => return Err(Error::Format(format!("predictor has {} layers, expected 2", n))),
        };
        let params = EncoderParams {
            backbone,
            projector,
            predictor,
        };
        check_chain(&params)?;
        Ok(params)
    }

    fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let a = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing array {}", name)))?;
        Tensor::new(a.shape.clone(), a.data.to_vec())
    }

    fn blocks<T: Scalar>(&self, section: &str, activation: impl Fn(usize, usize) -> bool) -> Result<Vec<Block<T>>> {
        let mut out = Vec::new();
        let count = (0..)
            .take_while(|i| self.get(&format!("{}.{}.weight", section, i)).is_some())
            .count();
        for i in 0..count {
            let pre = format!("{}.{}", section, i);
            let weight = self.tensor::<T>(&format!("{}.weight", pre))?;
            let bias = self.tensor::<T>(&format!("{}.bias", pre))?;
            let bn = if self.get(&format!("{}.bn.gamma", pre)).is_some() {
                let gamma = self.tensor::<T>(&format!("{}.bn.gamma", pre))?;
                let beta = self.tensor::<T>(&format!("{}.bn.beta", pre))?;
                let mean = self.tensor::<T>(&format!("{}.bn.running_mean", pre))?;
                let var = self.tensor::<T>(&format!("{}.bn.running_var", pre))?;
                Some(BatchNorm {
                    gamma,
                    beta,
                    stats: BnStats {
                        mean: mean.into_data(),
                        var: var.into_data(),
                    },
                })
            } else {
                None
            };
            out.push(Block {
                linear: Linear { weight, bias },
                bn,
                activation: activation(i, count),
            });
        }
        Ok(out)
    }
}

fn check_chain<T: Scalar>(p: &EncoderParams<T>) -> Result<()> {
    let mut blocks: Vec<&Block<T>> = p.backbone.iter().chain(&p.projector).collect();
    if let Some(pred) = &p.predictor {
        blocks.extend(pred.iter());
    }
    for b in &blocks {
        let s = b.linear.weight.shape();
        if s.len() != 2 || b.linear.bias.shape() != [s[1]] {
            return Err(Error::Format("inconsistent layer shapes in checkpoint".into()));
        }
        if let Some(bn) = &b.bn {
            if bn.gamma.shape() != [s[1]] || bn.beta.shape() != [s[1]] || bn.stats.mean.len() != s[1] || bn.stats.var.len() != s[1] {
                return Err(Error::Format("inconsistent batch-norm shapes in checkpoint".into()));
            }
        }
    }
    let links = p.backbone.iter().chain(&p.projector).collect::<Vec<_>>();
    for w in links.windows(2) {
        if w[0].fan_out() != w[1].fan_in() {
            return Err(Error::Format("layer widths do not chain".into()));
        }
    }
    if let Some(pred) = &p.predictor {
        if pred[0].fan_in() != p.embed_dim() || pred[1].fan_out() != p.embed_dim() || pred[0].fan_out() != pred[1].fan_in() {
            return Err(Error::Format("predictor widths do not match projector".into()));
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn params<T: Scalar>(predictor: bool) -> EncoderParams<T> {
        let cfg = EncoderConfig {
            backbone_widths: vec![6, 5],
            projector_dim: 8,
            predictor,
        };
        EncoderParams::init(4, &cfg, 3).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for predictor in [false, true] {
            let ck = Checkpoint::from_params(&params::<f32>(predictor));
            let bytes = ck.encode().unwrap();
            let back = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(back.encode().unwrap(), bytes);
            let p: EncoderParams<f32> = back.to_params().unwrap();
            assert_eq!(p, params::<f32>(predictor));
            assert_eq!(Checkpoint::from_params(&p).encode().unwrap(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint::from_params(&params::<f64>(false));
        let bytes = ck.encode().unwrap();
        assert_eq!(&bytes[..4], b"ROMA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        assert_eq!(count as usize, ck.arrays.len());
        let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + name_len], b"backbone.0.weight");
        assert_eq!(bytes[14 + name_len], 1); // f64
        assert_eq!(bytes[15 + name_len], 2); // rank
    }

    #[test]
    fn truncated_and_bad_magic() {
        let bytes = Checkpoint::from_params(&params::<f32>(false)).encode().unwrap();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn dtype_conversion_on_load() {
        let ck = Checkpoint::from_params(&params::<f32>(false));
        let p64: EncoderParams<f64> = ck.to_params().unwrap();
        assert_eq!(p64.feature_dim(), 5);
        assert_eq!(ck.dtype_tag(), Some(0));
    }
}
