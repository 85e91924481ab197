use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Element type of a [`FeatureTensor`]. `U8` carries opaque bytes such as
/// ciphertext or encoded control records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    U8,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::U8 => 1,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            2 => Some(DType::U8),
            _ => None,
        }
    }
}

/// Dense array with explicit dtype and shape, stored as little-endian bytes.
/// This is the unit exchanged between producer and consumer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureTensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

/// Product of dims times element width, or `None` on overflow.
pub fn checked_byte_len(dtype: DType, shape: &[usize]) -> Option<usize> {
    shape
        .iter()
        .try_fold(dtype.width(), |acc, &d| acc.checked_mul(d))
}

impl FeatureTensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let want = checked_byte_len(dtype, &shape)
            .ok_or_else(|| Error::Data(format!("shape {shape:?} overflows")))?;
        if want != data.len() {
            return Err(Error::Data(format!(
                "buffer of {} bytes does not match {dtype:?} shape {shape:?} ({want} bytes)",
                data.len()
            )));
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn from_tensor(t: &Tensor, dtype: DType) -> Self {
        let data = match dtype {
            DType::F32 => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            DType::F16 => t
                .data()
                .iter()
                .flat_map(|&v| half::f16::from_f32(v).to_le_bytes())
                .collect(),
            DType::U8 => panic!("numeric tensors cannot be encoded as u8"),
        };
        Self {
            dtype,
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self {
            dtype: DType::U8,
            shape: vec![bytes.len()],
            data: bytes,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    pub fn byte_len(&self) -> usize {
        self.data.len()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let values = match self.dtype {
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            DType::F16 => self
                .data
                .chunks_exact(2)
                .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            DType::U8 => return Err(Error::Data("u8 payload is not a numeric tensor".into())),
        };
        Ok(Tensor::new(self.shape.clone(), values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_512x1x1_is_2048_bytes() {
        let t = Tensor::zeros([512, 1, 1]);
        let f = FeatureTensor::from_tensor(&t, DType::F32);
        assert_eq!(f.byte_len(), 2048);
        assert_eq!(FeatureTensor::from_tensor(&t, DType::F16).byte_len(), 1024);
    }

    #[test]
    fn f32_round_trip_is_exact_and_f16_is_close() {
        let t = Tensor::new([2, 3], vec![0.1, -2.5, 3.75, 1e-3, 65000.0, -0.0]);
        assert_eq!(FeatureTensor::from_tensor(&t, DType::F32).to_tensor().unwrap(), t);
        let back = FeatureTensor::from_tensor(&t, DType::F16).to_tensor().unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1e-3 * a.abs().max(1.0) * 50.0);
        }
    }

    #[test]
    fn new_rejects_length_mismatch_and_overflow() {
        assert!(FeatureTensor::new(DType::F32, vec![2, 2], vec![0; 15]).is_err());
        assert!(FeatureTensor::new(DType::F32, vec![usize::MAX, 2], vec![]).is_err());
        assert!(FeatureTensor::new(DType::U8, vec![3], vec![1, 2, 3]).is_ok());
    }
}
