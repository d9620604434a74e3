use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Largest supported modality count.
pub const MAX_MODALITIES: usize = 16;

/// A set of modality indices, stored as a bitmask.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ModalitySet(u32);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);

    pub fn full(m: usize) -> Self {
        debug_assert!(m <= MAX_MODALITIES);
        ModalitySet(((1u64 << m) - 1) as u32)
    }

    pub fn from_bits(bits: u32) -> Self {
        ModalitySet(bits)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        let mut s = Self::EMPTY;
        for &i in indices {
            if i >= MAX_MODALITIES {
                return Err(contract(format!("modality index {i} too large")));
            }
            s = s.with(i);
        }
        Ok(s)
    }

    pub fn with(self, m: usize) -> Self {
        ModalitySet(self.0 | (1 << m))
    }

    pub fn without(self, m: usize) -> Self {
        ModalitySet(self.0 & !(1 << m))
    }

    pub fn contains(self, m: usize) -> bool {
        m < 32 && self.0 & (1 << m) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn intersect(self, other: Self) -> Self {
        ModalitySet(self.0 & other.0)
    }

    pub fn is_subset_of(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&i| self.contains(i))
    }

    /// Every non-empty subset of `{0..m}`, in increasing bitmask order.
    pub fn all_nonempty(m: usize) -> Vec<ModalitySet> {
        (1..(1u32 << m)).map(ModalitySet).collect()
    }

    /// `"V+F"`-style label using the given modality names.
    pub fn label(self, names: &[String]) -> String {
        self.iter()
            .map(|i| names.get(i).cloned().unwrap_or_else(|| i.to_string()))
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let items: Vec<String> = self.iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", items.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_algebra() {
        let s = ModalitySet::from_indices(&[0, 2]).unwrap();
        assert!(s.contains(0) && !s.contains(1) && s.contains(2));
        assert_eq!(s.len(), 2);
        assert_eq!(s.to_string(), "{0,2}");
        assert!(s.is_subset_of(ModalitySet::full(3)));
        assert_eq!(
            s.intersect(ModalitySet::from_indices(&[2]).unwrap()).len(),
            1
        );
        assert_eq!(ModalitySet::all_nonempty(3).len(), 7);
        let names = vec!["V".to_string(), "F".to_string(), "A".to_string()];
        assert_eq!(s.label(&names), "V+A");
    }
}
