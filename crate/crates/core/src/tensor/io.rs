//! JSON tensor files: `{"shape": [...], "dtype": "f32" | "i32", "data_b64": "..."}`,
//! where the payload is the little-endian row-major element buffer.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{DType, IntTensor, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorFileDtype {
    F32,
    I32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub dtype: TensorFileDtype,
    pub data_b64: String,
}

impl TensorFile {
    pub fn from_tensor(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape: t.shape().to_vec(),
            dtype: TensorFileDtype::F32,
            data_b64: STANDARD.encode(bytes),
        }
    }

    pub fn from_int(t: &IntTensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape: t.shape().to_vec(),
            dtype: TensorFileDtype::I32,
            data_b64: STANDARD.encode(bytes),
        }
    }

    fn words(&self) -> Result<Vec<[u8; 4]>> {
        let bytes = STANDARD
            .decode(&self.data_b64)
            .map_err(|e| Error::Schema {
                path: "data_b64".into(),
                message: e.to_string(),
            })?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Schema {
                path: "data_b64".into(),
                message: format!("{} bytes is not a whole number of 4-byte elements", bytes.len()),
            });
        }
        Ok(bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.dtype != TensorFileDtype::F32 {
            return Err(Error::Schema {
                path: "dtype".into(),
                message: "expected f32 tensor".into(),
            });
        }
        let data = self.words()?.into_iter().map(f32::from_le_bytes).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn to_int(&self, dtype: DType) -> Result<IntTensor> {
        if self.dtype != TensorFileDtype::I32 {
            return Err(Error::Schema {
                path: "dtype".into(),
                message: "expected i32 tensor".into(),
            });
        }
        let data = self.words()?.into_iter().map(i32::from_le_bytes).collect();
        IntTensor::new(self.shape.clone(), dtype, data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: format!("{}:{}", path.display(), e.path()),
            message: e.inner().to_string(),
        })
    }
}

impl Tensor {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TensorFile::read(path.as_ref())?.to_tensor()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&TensorFile::from_tensor(self))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let t = Tensor::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0e7]).unwrap();
        let back = TensorFile::from_tensor(&t).to_tensor().unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&t), bits(&back));
        assert_eq!(back.shape(), &[2, 2]);
    }

    #[test]
    fn payload_is_little_endian() {
        let f = TensorFile::from_tensor(&Tensor::scalar(1.0));
        assert_eq!(STANDARD.decode(&f.data_b64).unwrap(), vec![0x00, 0x00, 0x80, 0x3f]);
    }

    #[test]
    fn i32_round_trip() {
        let t = IntTensor::new(vec![3], DType::I32Range, vec![-5, 0, 1 << 30]).unwrap();
        assert_eq!(TensorFile::from_int(&t).to_int(DType::I32Range).unwrap(), t);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_lengths() {
        let bad: std::result::Result<TensorFile, _> =
            serde_json::from_str(r#"{"shape":[1],"dtype":"f32","data_b64":"AAAAAA==","x":1}"#);
        assert!(bad.is_err());
        let short = TensorFile {
            shape: vec![2],
            dtype: TensorFileDtype::F32,
            data_b64: STANDARD.encode([0u8; 4]),
        };
        assert!(short.to_tensor().is_err());
    }
}
