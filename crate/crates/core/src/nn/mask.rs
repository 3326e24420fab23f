use crate::error::{Error, Result};

/// Validity mask of a padded batch laid out as `batch × len` rows.
///
/// Row `b * len + j` of every sequence tensor belongs to position `j` of
/// utterance `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqMask {
    batch: usize,
    len: usize,
    valid: Vec<bool>,
}

impl SeqMask {
    pub fn new(batch: usize, len: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * len {
            return Err(Error::shape(format!(
                "mask of {} entries for {batch}×{len}",
                valid.len()
            )));
        }
        Ok(SeqMask { batch, len, valid })
    }

    /// Prefix mask: utterance `b` is valid on positions `0..lengths[b]`.
    pub fn from_lengths(lengths: &[usize], len: usize) -> Result<Self> {
        let mut valid = Vec::with_capacity(lengths.len() * len);
        for &l in lengths {
            if l > len {
                return Err(Error::shape(format!("length {l} exceeds padded length {len}")));
            }
            valid.extend((0..len).map(|j| j < l));
        }
        Ok(SeqMask {
            batch: lengths.len(),
            len,
            valid,
        })
    }

    /// A single fully valid utterance of `n` tokens.
    pub fn full(n: usize) -> Self {
        SeqMask {
            batch: 1,
            len: n,
            valid: vec![true; n],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.valid.len()
    }

    pub fn is_valid(&self, b: usize, j: usize) -> bool {
        self.valid[b * self.len + j]
    }

    pub fn row_valid(&self, row: usize) -> bool {
        self.valid[row]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    pub fn count(&self, b: usize) -> usize {
        self.valid[b * self.len..(b + 1) * self.len]
            .iter()
            .filter(|v| **v)
            .count()
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.batch).map(|b| self.count(b)).collect()
    }

    pub fn total(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_mask() {
        let m = SeqMask::from_lengths(&[3, 5], 5).unwrap();
        assert_eq!(
            m.as_slice(),
            &[true, true, true, false, false, true, true, true, true, true]
        );
        assert_eq!(m.lengths(), vec![3, 5]);
        assert_eq!(m.total(), 8);
    }

    #[test]
    fn too_long() {
        assert!(SeqMask::from_lengths(&[6], 5).is_err());
    }
}
