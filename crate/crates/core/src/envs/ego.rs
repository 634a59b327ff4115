use crate::error::{Error, Result};

/// Ordered indices of the self-related state dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EgoMask {
    indices: Vec<usize>,
}

impl EgoMask {
    pub fn new(indices: Vec<usize>, state_dim: usize) -> Result<Self> {
        let mut seen = vec![false; state_dim];
        for &i in &indices {
            if i >= state_dim {
                return Err(Error::Config(format!("ego index {i} outside state dimension {state_dim}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("duplicate ego index {i}")));
            }
        }
        Ok(Self { indices })
    }

    pub fn all(state_dim: usize) -> Self {
        Self {
            indices: (0..state_dim).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Indices not in the mask, in order.
    pub fn complement(&self, state_dim: usize) -> Vec<usize> {
        (0..state_dim).filter(|i| !self.indices.contains(i)).collect()
    }
}

pub fn ego_extract(s: &[f64], mask: &EgoMask) -> Result<Vec<f64>> {
    mask.indices
        .iter()
        .map(|&i| {
            s.get(i)
                .copied()
                .ok_or_else(|| Error::Config(format!("ego index {i} outside state of length {}", s.len())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(ego_extract(&s, &EgoMask::all(6)).unwrap(), s.to_vec());
        let m = EgoMask::new(vec![0, 1, 2, 3], 6).unwrap();
        assert_eq!(ego_extract(&s, &m).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.complement(6), vec![4, 5]);
        assert!(ego_extract(&s[..3], &m).is_err());
        assert!(EgoMask::new(vec![0, 0], 2).is_err());
        assert!(EgoMask::new(vec![7], 2).is_err());
    }
}
