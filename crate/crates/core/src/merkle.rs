//! SHA-256 Merkle commitments over canonical report bytes.
//!
//! Leaves are domain-separated from interior nodes by a one-byte prefix
//! (0x00 leaf, 0x01 interior) so an interior node can never be replayed as
//! a leaf. Odd nodes are carried up unhashed, so proofs may skip levels.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::types::Hash32;

const LEAF_PREFIX: u8 = 0x00;
const INTERIOR_PREFIX: u8 = 0x01;

/// Hash of a leaf's byte content, domain-separated.
pub fn leaf_hash(bytes: &[u8]) -> Hash32 {
    let mut hasher = Sha256::new();
    hasher.update([LEAF_PREFIX]);
    hasher.update(bytes);
    Hash32(hasher.finalize().into())
}

fn interior_hash(left: &Hash32, right: &Hash32) -> Hash32 {
    let mut hasher = Sha256::new();
    hasher.update([INTERIOR_PREFIX]);
    hasher.update(left.0);
    hasher.update(right.0);
    Hash32(hasher.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofStep {
    pub sibling: Hash32,
    pub side: Side,
}

/// Inclusion proof: recomputing from `leaf_hash` through `path` must yield
/// `root`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub leaf_hash: Hash32,
    pub path: Vec<ProofStep>,
    pub root: Hash32,
}

impl MerkleProof {
    /// Root implied by this proof's leaf and path.
    pub fn recompute_root(&self) -> Hash32 {
        let mut acc = self.leaf_hash;
        for step in &self.path {
            acc = match step.side {
                Side::Left => interior_hash(&step.sibling, &acc),
                Side::Right => interior_hash(&acc, &step.sibling),
            };
        }
        acc
    }

    /// Whether the proof is internally consistent and binds to `root`.
    pub fn verifies_against(&self, root: &Hash32) -> bool {
        self.recompute_root() == self.root && self.root == *root
    }
}

/// Merkle tree over precomputed leaf hashes.
#[derive(Debug, Clone)]
pub struct MerkleTree {
    levels: Vec<Vec<Hash32>>,
}

impl MerkleTree {
    /// Builds the tree; `leaves` must be non-empty.
    pub fn from_leaf_hashes(leaves: Vec<Hash32>) -> MerkleTree {
        assert!(!leaves.is_empty(), "merkle tree requires at least one leaf");
        let mut levels = vec![leaves];
        while levels.last().unwrap().len() > 1 {
            let prev = levels.last().unwrap();
            let mut next = Vec::with_capacity(prev.len().div_ceil(2));
            for pair in prev.chunks(2) {
                match pair {
                    [a, b] => next.push(interior_hash(a, b)),
                    [a] => next.push(*a), // odd node carried up
                    _ => unreachable!(),
                }
            }
            levels.push(next);
        }
        MerkleTree { levels }
    }

    pub fn root(&self) -> Hash32 {
        self.levels.last().unwrap()[0]
    }

    pub fn leaf_count(&self) -> usize {
        self.levels[0].len()
    }

    /// Inclusion proof for the leaf at `index`.
    pub fn proof(&self, index: usize) -> Option<MerkleProof> {
        if index >= self.leaf_count() {
            return None;
        }
        let mut path = Vec::new();
        let mut i = index;
        for level in &self.levels[..self.levels.len() - 1] {
            let sibling = i ^ 1;
            if sibling < level.len() {
                let side = if sibling < i { Side::Left } else { Side::Right };
                path.push(ProofStep { sibling: level[sibling], side });
            }
            i /= 2;
        }
        Some(MerkleProof { leaf_hash: self.levels[0][index], path, root: self.root() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn leaves(n: usize) -> Vec<Hash32> {
        (0..n).map(|i| leaf_hash(format!("leaf-{i}").as_bytes())).collect()
    }

    #[test]
    fn single_leaf_root_is_leaf() {
        let l = leaves(1);
        let tree = MerkleTree::from_leaf_hashes(l.clone());
        assert_eq!(tree.root(), l[0]);
        let proof = tree.proof(0).unwrap();
        assert!(proof.path.is_empty());
        assert!(proof.verifies_against(&tree.root()));
    }

    #[test]
    fn all_proofs_verify_for_various_sizes() {
        for n in 1..=9 {
            let tree = MerkleTree::from_leaf_hashes(leaves(n));
            for i in 0..n {
                let proof = tree.proof(i).unwrap();
                assert!(proof.verifies_against(&tree.root()), "n={n} i={i}");
            }
            assert!(tree.proof(n).is_none());
        }
    }

    #[test]
    fn proof_rejects_wrong_root() {
        let tree = MerkleTree::from_leaf_hashes(leaves(5));
        let other = MerkleTree::from_leaf_hashes(leaves(6));
        let proof = tree.proof(2).unwrap();
        assert!(!proof.verifies_against(&other.root()));
    }

    #[test]
    fn leaf_domain_separated_from_interior() {
        // A two-leaf tree's root must differ from hashing the concatenation
        // as a leaf.
        let l = leaves(2);
        let tree = MerkleTree::from_leaf_hashes(l.clone());
        let mut concat = Vec::new();
        concat.extend_from_slice(&l[0].0);
        concat.extend_from_slice(&l[1].0);
        assert_ne!(tree.root(), leaf_hash(&concat));
    }

    proptest! {
        #[test]
        fn tampered_leaf_fails_verification(n in 1usize..12, idx in 0usize..12, byte in 0usize..16) {
            let idx = idx % n;
            let tree = MerkleTree::from_leaf_hashes(leaves(n));
            let mut proof = tree.proof(idx).unwrap();
            let mut raw = proof.leaf_hash.0;
            raw[byte % 32] ^= 0x01;
            proof.leaf_hash = Hash32(raw);
            prop_assert!(!proof.verifies_against(&tree.root()));
        }
    }
}
