//! Splittable seed derivation.
//!
//! Every random stream in a run is addressed by a path of labels below a
//! root seed, so the order in which cells or tasks are scheduled never
//! changes what any of them observes.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type Rng = ChaCha12Rng;

/// A node in the seed tree. Cheap to clone; children are derived by hashing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedTree {
    key: [u8; 32],
}

impl SeedTree {
    pub fn root(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"metacon-root");
        h.update(seed.to_le_bytes());
        Self { key: h.finalize().into() }
    }

    pub fn from_key(key: [u8; 32]) -> Self {
        Self { key }
    }

    pub fn key(&self) -> [u8; 32] {
        self.key
    }

    pub fn child(&self, label: impl AsRef<str>) -> Self {
        let label = label.as_ref().as_bytes();
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label);
        Self { key: h.finalize().into() }
    }

    pub fn index(&self, i: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(b"#");
        h.update(i.to_le_bytes());
        Self { key: h.finalize().into() }
    }

    /// Follow a path of labels.
    pub fn path<I, S>(&self, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        labels.into_iter().fold(*self, |node, l| node.child(l))
    }

    pub fn rng(&self) -> Rng {
        Rng::from_seed(self.key)
    }
}

/// Convenience wrapper for `SeedTree::root(root).path(labels).rng()`.
pub fn seed_tree<I, S>(root: u64, labels: I) -> Rng
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    SeedTree::root(root).path(labels).rng()
}
