use std::fmt;

use crate::error::{Error, Result};

/// Binary allowed-output indicator over `m` outputs.
///
/// At least one output is allowed and `m >= 2`. `k == m` is representable
/// but degenerate: some losses reject it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector {
    bits: Vec<bool>,
    k: usize,
}

impl LabelVector {
    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        if bits.len() < 2 {
            return Err(Error::invalid("label vector needs m >= 2 outputs"));
        }
        let k = bits.iter().filter(|&&b| b).count();
        if k == 0 {
            return Err(Error::invalid("label vector has no allowed output"));
        }
        Ok(Self { bits, k })
    }

    /// Build from a 0/1 slice, e.g. `&[1, 1, 0]`.
    pub fn from_binary(bits: &[u8]) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("label bits must be 0 or 1"));
        }
        Self::from_bits(bits.iter().map(|&b| b == 1).collect())
    }

    pub fn from_indices(m: usize, allowed: &[usize]) -> Result<Self> {
        let mut bits = vec![false; m];
        for &i in allowed {
            if i >= m {
                return Err(Error::invalid(format!("label index {i} out of range for m = {m}")));
            }
            bits[i] = true;
        }
        Self::from_bits(bits)
    }

    pub fn all(m: usize) -> Result<Self> {
        Self::from_bits(vec![true; m])
    }

    pub fn m(&self) -> usize {
        self.bits.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_degenerate(&self) -> bool {
        self.k == self.bits.len()
    }

    pub fn is_allowed(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn indicator(&self, i: usize) -> f64 {
        if self.bits[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn allowed(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn disallowed(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| !b).map(|(i, _)| i)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.allowed().collect()
    }

    /// `p̂ = Σ y_i p_i`
    pub fn allowed_mass(&self, p: &[f64]) -> f64 {
        self.allowed().map(|i| p[i]).sum()
    }

    /// `Σ (1 - y_i) p_i`, computed directly rather than as `1 - p̂`.
    pub fn disallowed_mass(&self, p: &[f64]) -> f64 {
        self.disallowed().map(|i| p[i]).sum()
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len != self.m() {
            return Err(Error::DimensionMismatch {
                expected: self.m(),
                got: len,
            });
        }
        Ok(())
    }
}

impl fmt::Display for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (n, i) in self.allowed().enumerate() {
            if n > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, "}}/{}", self.m())
    }
}
