use sha2::{Digest, Sha256};

use super::{Real, Tensor};
use crate::{Error, Result};

/// A fixed, ordered collection of named parameter tensors.
pub trait Parameters<T: Real> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn segment_lens(&self) -> Vec<usize> {
        self.named_tensors().iter().map(|(_, t)| t.len()).collect()
    }

    fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    fn flatten(&self) -> Vec<T> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    fn flat_grad(&self) -> Vec<T> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); t.len()],
            })
            .collect()
    }

    fn load_flat(&mut self, values: &[T]) -> Result<()> {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            let src = values
                .get(offset..offset + n)
                .ok_or_else(|| Error::config("flat parameter vector too short"))?;
            t.data_mut().copy_from_slice(src);
            offset += n;
        }
        if offset != values.len() {
            return Err(Error::config("flat parameter vector too long"));
        }
        Ok(())
    }

    /// Order-sensitive digest of all parameter bits.
    fn checksum(&self) -> u64 {
        let mut hasher = Sha256::new();
        let mut bytes = Vec::new();
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            bytes.clear();
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            hasher.update(&bytes);
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Copies values from named tensors, e.g. a loaded checkpoint.
    fn load_named(&mut self, source: &[(String, Tensor<T>)]) -> Result<()> {
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(self.tensors_mut()) {
            let (_, src) = source
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
