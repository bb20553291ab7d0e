use std::collections::{BTreeMap, BTreeSet};

use super::{Molecule, TokenId, Vec3, Vocabulary};
use crate::error::{Error, Result};

/// Longest-pack-first histogram packing.
///
/// Items are visited longest first (ties by index) and placed into the
/// fullest open pack that still has room, preferring the lowest pack index
/// among equally full packs. A pack closes once it holds `max_per_pack`
/// items. Returns packs in creation order, items in placement order.
pub fn pack_sequences(
    lengths: &[usize],
    capacity: usize,
    max_per_pack: usize,
) -> Result<Vec<Vec<usize>>> {
    if max_per_pack == 0 {
        return Err(Error::InvalidArgument("max_per_pack must be positive".into()));
    }
    if let Some((index, &length)) = lengths.iter().enumerate().find(|(_, &l)| l > capacity) {
        return Err(Error::CapacityExceeded {
            index,
            length,
            capacity,
        });
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]).then(a.cmp(&b)));

    let mut packs: Vec<Vec<usize>> = Vec::new();
    let mut free: Vec<usize> = Vec::new();
    // remaining space -> open packs with exactly that much room
    let mut by_space: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();

    for item in order {
        let len = lengths[item];
        let slot = by_space
            .range(len..)
            .next()
            .map(|(&space, packs)| (space, *packs.first().expect("buckets are never empty")));
        let pack = match slot {
            Some((space, pack)) => {
                let bucket = by_space.get_mut(&space).expect("bucket exists");
                bucket.remove(&pack);
                if bucket.is_empty() {
                    by_space.remove(&space);
                }
                pack
            }
            None => {
                packs.push(Vec::new());
                free.push(capacity);
                packs.len() - 1
            }
        };
        packs[pack].push(item);
        free[pack] -= len;
        if packs[pack].len() < max_per_pack {
            by_space.entry(free[pack]).or_default().insert(pack);
        }
    }
    Ok(packs)
}

/// Several documents laid end to end. Every document starts with a BOS
/// token at the origin followed by its atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    pub tokens: Vec<TokenId>,
    pub coords: Vec<Vec3>,
    /// Document index of every position.
    pub doc_ids: Vec<usize>,
    /// Position inside the owning document, BOS being 0.
    pub positions: Vec<usize>,
    /// Start offset of each document, plus the total length at the end.
    pub boundaries: Vec<usize>,
    /// Type that follows each position: the next atom, or STOP after the
    /// last atom of a document.
    pub next_types: Vec<TokenId>,
    pub capacity: usize,
}

impl PackedBatch {
    pub fn from_molecules(mols: &[&Molecule], vocab: &Vocabulary, capacity: usize) -> Result<Self> {
        let mut batch = PackedBatch {
            tokens: Vec::new(),
            coords: Vec::new(),
            doc_ids: Vec::new(),
            positions: Vec::new(),
            boundaries: vec![0],
            next_types: Vec::new(),
            capacity,
        };
        for (doc, mol) in mols.iter().enumerate() {
            let ids = vocab.encode(mol)?;
            batch.tokens.push(vocab.bos());
            batch.coords.push([0.0; 3]);
            batch.tokens.extend(&ids);
            batch.coords.extend(&mol.coords);
            batch.next_types.extend(&ids);
            batch.next_types.push(vocab.stop());
            for p in 0..=ids.len() {
                batch.doc_ids.push(doc);
                batch.positions.push(p);
            }
            batch.boundaries.push(batch.tokens.len());
        }
        if batch.len() > capacity {
            return Err(Error::CapacityExceeded {
                index: 0,
                length: batch.len(),
                capacity,
            });
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_docs(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Positions whose successor is a real atom, i.e. where a position
    /// target exists. Paired with the target coordinates.
    pub fn position_targets(&self) -> (Vec<usize>, Vec<Vec3>) {
        (0..self.len())
            .filter(|&i| i + 1 < self.len() && self.doc_ids[i + 1] == self.doc_ids[i])
            .map(|i| (i, self.coords[i + 1]))
            .unzip()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Element;
    use proptest::prelude::*;

    #[test]
    fn single_full_item() {
        assert_eq!(pack_sequences(&[128], 128, 6).unwrap(), vec![vec![0]]);
    }

    /// Fewest bins for a tiny instance, by exhaustive assignment.
    fn brute_force_bins(lengths: &[usize], capacity: usize, max_per: usize) -> usize {
        fn go(i: usize, lengths: &[usize], bins: &mut Vec<(usize, usize)>, cap: usize, max_per: usize, best: &mut usize) {
            if bins.len() >= *best {
                return;
            }
            if i == lengths.len() {
                *best = bins.len();
                return;
            }
            for b in 0..bins.len() {
                if bins[b].0 + lengths[i] <= cap && bins[b].1 < max_per {
                    bins[b].0 += lengths[i];
                    bins[b].1 += 1;
                    go(i + 1, lengths, bins, cap, max_per, best);
                    bins[b].0 -= lengths[i];
                    bins[b].1 -= 1;
                }
            }
            bins.push((lengths[i], 1));
            go(i + 1, lengths, bins, cap, max_per, best);
            bins.pop();
        }
        let mut best = usize::MAX;
        go(0, lengths, &mut Vec::new(), capacity, max_per, &mut best);
        best
    }

    #[test]
    fn longest_first_fill() {
        let packs = pack_sequences(&[100, 28, 28], 128, 6).unwrap();
        assert_eq!(packs, vec![vec![0, 1], vec![2]]);
        assert_eq!(packs.len(), brute_force_bins(&[100, 28, 28], 128, 6));
    }

    #[test]
    fn fullest_pack_wins() {
        // After 70 and 60 open two packs, 50 goes to the fuller one (70).
        let packs = pack_sequences(&[60, 70, 50], 128, 6).unwrap();
        assert_eq!(packs, vec![vec![1, 2], vec![0]]);
    }

    #[test]
    fn per_pack_cardinality() {
        let packs = pack_sequences(&[20; 7], 128, 6).unwrap();
        assert!(packs.iter().all(|p| p.len() <= 6));
        assert_eq!(packs.len(), 2);
    }

    #[test]
    fn oversized_item() {
        assert!(matches!(
            pack_sequences(&[10, 129], 128, 6),
            Err(Error::CapacityExceeded { index: 1, .. })
        ));
    }

    #[test]
    fn packed_batch_layout() {
        let vocab = Vocabulary::new([Element::C, Element::H]);
        let m1 = Molecule::new(vec![Element::C, Element::H], vec![[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let m2 = Molecule::new(vec![Element::H], vec![[3.0, 0.0, 0.0]]).unwrap();
        let b = PackedBatch::from_molecules(&[&m1, &m2], &vocab, 16).unwrap();
        assert_eq!(b.tokens, vec![2, 0, 1, 2, 1]);
        assert_eq!(b.next_types, vec![0, 1, 3, 1, 3]);
        assert_eq!(b.doc_ids, vec![0, 0, 0, 1, 1]);
        assert_eq!(b.positions, vec![0, 1, 2, 0, 1]);
        assert_eq!(b.boundaries, vec![0, 3, 5]);
        let (idx, targets) = b.position_targets();
        assert_eq!(idx, vec![0, 1, 3]);
        assert_eq!(targets, vec![[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert!(PackedBatch::from_molecules(&[&m1, &m2], &vocab, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn packing_invariants(
            lengths in prop::collection::vec(1usize..=128, 0..200),
            max_per in 1usize..8,
        ) {
            let packs = pack_sequences(&lengths, 128, max_per).unwrap();
            let mut seen: Vec<usize> = packs.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
            for p in &packs {
                prop_assert!(p.len() <= max_per);
                prop_assert!(p.iter().map(|&i| lengths[i]).sum::<usize>() <= 128);
            }
        }

        #[test]
        fn matches_brute_force_bin_count_on_easy_cases(
            lengths in prop::collection::vec(1usize..=64, 1..=8),
        ) {
            // Any two items fit together, so first-fit-decreasing is optimal.
            let packs = pack_sequences(&lengths, 128, 2).unwrap();
            prop_assert_eq!(packs.len(), brute_force_bins(&lengths, 128, 2));
        }
    }
}
