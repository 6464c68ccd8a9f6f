//! Fixed-length bitset with run-length export.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct BitSet {
    len: usize,
    words: Vec<u64>,
}

impl BitSet {
    pub fn new(len: usize) -> Self {
        BitSet { len, words: vec![0; len.div_ceil(64)] }
    }

    pub fn from_fn(len: usize, f: impl Fn(usize) -> bool) -> Self {
        let mut b = Self::new(len);
        for i in 0..len {
            if f(i) {
                b.set(i, true);
            }
        }
        b
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i >> 6] >> (i & 63) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        let m = 1u64 << (i & 63);
        if v {
            self.words[i >> 6] |= m;
        } else {
            self.words[i >> 6] &= !m;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| self.get(i))
    }

    /// `self ⊆ other`.
    pub fn is_subset(&self, other: &BitSet) -> bool {
        self.len == other.len && self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn to_rle(&self) -> Rle {
        let mut runs = Vec::new();
        let mut cur = false;
        let mut n = 0u64;
        for i in 0..self.len {
            let b = self.get(i);
            if b != cur {
                runs.push(n);
                cur = b;
                n = 0;
            }
            n += 1;
        }
        runs.push(n);
        Rle { len: self.len, runs }
    }
}

/// Alternating run lengths starting with a (possibly empty) run of zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rle {
    pub len: usize,
    pub runs: Vec<u64>,
}

impl Rle {
    pub fn decode(&self) -> Result<BitSet> {
        let total: u64 = self.runs.iter().sum();
        if total != self.len as u64 {
            return Err(Error::Format(format!("RLE runs sum to {total}, expected {}", self.len)));
        }
        let mut b = BitSet::new(self.len);
        let mut pos = 0usize;
        for (k, &r) in self.runs.iter().enumerate() {
            if k % 2 == 1 {
                for i in pos..pos + r as usize {
                    b.set(i, true);
                }
            }
            pos += r as usize;
        }
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rle_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..300)) {
            let b = BitSet::from_fn(bits.len(), |i| bits[i]);
            prop_assert_eq!(b.count_ones(), bits.iter().filter(|x| **x).count());
            prop_assert_eq!(b.to_rle().decode().unwrap(), b);
        }
    }

    #[test]
    fn rle_rejects_bad_length() {
        assert!(Rle { len: 5, runs: vec![1, 2] }.decode().is_err());
    }
}
