use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: ArrayD<f64>,
}

/// Ordered collection of named parameter tensors.
///
/// Also used for gradients and optimizer moments, which share the layout of
/// the parameters they belong to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            value,
        });
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.tensors.iter_mut().find(|t| t.name == name).map(|t| &mut t.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    value: ArrayD::zeros(t.value.raw_dim()),
                })
                .collect(),
        }
    }

    /// Same names, order and shapes; errors list every mismatch.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        let mut problems = Vec::new();
        for t in &self.tensors {
            match other.get(&t.name) {
                None => problems.push(format!("{}: missing", t.name)),
                Some(v) if v.shape() != t.value.shape() => {
                    problems.push(format!("{}: shape {:?} vs {:?}", t.name, t.value.shape(), v.shape()))
                }
                Some(_) => {}
            }
        }
        for t in &other.tensors {
            if self.get(&t.name).is_none() {
                problems.push(format!("{}: unexpected", t.name));
            }
        }
        if problems.is_empty() && self.tensors.iter().zip(&other.tensors).any(|(a, b)| a.name != b.name) {
            problems.push("tensor order differs".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Spec(problems.join("; ")))
        }
    }

    /// Overwrite every value with `other`'s, after a compatibility check.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_compatible(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.value.assign(&src.value);
        }
        Ok(())
    }

    /// `self += alpha * other`, matching tensors by position.
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamSet) {
        debug_assert!(self.check_compatible(other).is_ok());
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.value.scaled_add(alpha, &src.value);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.iter().all(|v| v.is_finite()))
    }

    /// Read scalar `i` in the flattened concatenation of all tensors.
    pub fn flat(&self, mut i: usize) -> f64 {
        for t in &self.tensors {
            if i < t.value.len() {
                return *t.value.iter().nth(i).expect("index in range");
            }
            i -= t.value.len();
        }
        panic!("flat parameter index out of range")
    }

    pub fn set_flat(&mut self, mut i: usize, v: f64) {
        for t in &mut self.tensors {
            if i < t.value.len() {
                *t.value.iter_mut().nth(i).expect("index in range") = v;
                return;
            }
            i -= t.value.len();
        }
        panic!("flat parameter index out of range")
    }

    /// Name of the tensor holding flat scalar `i`.
    pub fn flat_owner(&self, mut i: usize) -> &str {
        for t in &self.tensors {
            if i < t.value.len() {
                return &t.name;
            }
            i -= t.value.len();
        }
        panic!("flat parameter index out of range")
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            for &d in t.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn set(names: &[(&str, &[usize])]) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, s) in names {
            p.push(*n, ArrayD::from_elem(IxDyn(s), 1.0));
        }
        p
    }

    #[test]
    fn compatibility_lists_all_mismatches() {
        let a = set(&[("w", &[2, 3]), ("b", &[2])]);
        let b = set(&[("w", &[4, 3]), ("c", &[2])]);
        let err = a.check_compatible(&b).unwrap_err().to_string();
        assert!(err.contains("w: shape"), "{err}");
        assert!(err.contains("b: missing"), "{err}");
        assert!(err.contains("c: unexpected"), "{err}");
    }

    #[test]
    fn flat_indexing_and_checksum() {
        let mut a = set(&[("w", &[2, 3]), ("b", &[2])]);
        let before = a.checksum();
        a.set_flat(7, 5.0);
        assert_eq!(a.flat(7), 5.0);
        assert_eq!(a.flat_owner(7), "b");
        assert_ne!(a.checksum(), before);
        assert_eq!(a.num_scalars(), 8);
    }
}
