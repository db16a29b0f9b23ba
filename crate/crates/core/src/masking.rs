//! Random target maskings and the positions two maskings share.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{SentencePair, MASK};

/// One random masking of a target sentence. Positions are 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedView {
    /// Target with [MASK] at every masked position.
    pub input_ids: Vec<u32>,
    /// Sorted masked positions.
    pub masked_positions: Vec<usize>,
    /// Sorted complement of `masked_positions`.
    pub observed_positions: Vec<usize>,
    pub original_ids: Vec<u32>,
}

impl MaskedView {
    /// View masking exactly `positions` (any order, duplicates ignored).
    pub fn with_positions(target: &[u32], positions: &[usize]) -> MaskedView {
        let mut masked = vec![false; target.len()];
        for &p in positions {
            assert!(p < target.len(), "mask position {p} beyond target length {}", target.len());
            masked[p] = true;
        }
        let mut input_ids = target.to_vec();
        let mut masked_positions = Vec::new();
        let mut observed_positions = Vec::new();
        for (i, &m) in masked.iter().enumerate() {
            if m {
                input_ids[i] = MASK;
                masked_positions.push(i);
            } else {
                observed_positions.push(i);
            }
        }
        MaskedView { input_ids, masked_positions, observed_positions, original_ids: target.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.original_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original_ids.is_empty()
    }

    /// Puts the original tokens back at the masked positions.
    pub fn reconstruct(&self) -> Vec<u32> {
        let mut out = self.input_ids.clone();
        for &p in &self.masked_positions {
            out[p] = self.original_ids[p];
        }
        out
    }

    pub fn masked_targets(&self) -> Vec<u32> {
        self.masked_positions.iter().map(|&p| self.original_ids[p]).collect()
    }
}

/// Draws a mask count uniformly from `1..=N`, then that many distinct
/// positions uniformly.
pub fn sample_view<R: Rng + ?Sized>(target: &[u32], rng: &mut R) -> MaskedView {
    let n = target.len();
    assert!(n >= 1, "cannot mask an empty target");
    let k = rng.gen_range(1..=n);
    let positions = index::sample(rng, n, k).into_vec();
    MaskedView::with_positions(target, &positions)
}

/// Intersection of two sorted position lists.
pub fn intersect_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Two maskings of every target plus the positions masked in both.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DualViewBatch {
    /// Source ids, each starting with [LEN].
    pub sources: Vec<Vec<u32>>,
    pub view1: Vec<MaskedView>,
    pub view2: Vec<MaskedView>,
    pub shared_positions: Vec<Vec<usize>>,
}

impl DualViewBatch {
    pub fn from_views(sources: Vec<Vec<u32>>, view1: Vec<MaskedView>, view2: Vec<MaskedView>) -> DualViewBatch {
        assert_eq!(sources.len(), view1.len());
        assert_eq!(view1.len(), view2.len());
        let shared_positions = view1
            .iter()
            .zip(&view2)
            .map(|(a, b)| {
                assert_eq!(a.original_ids, b.original_ids, "views of different targets");
                intersect_sorted(&a.masked_positions, &b.masked_positions)
            })
            .collect();
        DualViewBatch { sources, view1, view2, shared_positions }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn targets(&self) -> Vec<&[u32]> {
        self.view1.iter().map(|v| v.original_ids.as_slice()).collect()
    }

    /// The same batch with the two views exchanged.
    pub fn swapped(&self) -> DualViewBatch {
        DualViewBatch::from_views(self.sources.clone(), self.view2.clone(), self.view1.clone())
    }
}

/// Masks every target twice. Each sentence and view gets its own ChaCha
/// stream under a base seed drawn from `rng`, so the two views are
/// independent and exchangeable.
pub fn make_dual_batch<R: Rng + ?Sized>(pairs: &[&SentencePair], rng: &mut R) -> DualViewBatch {
    let base: u64 = rng.gen();
    let mut view1 = Vec::with_capacity(pairs.len());
    let mut view2 = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let mut r1 = ChaCha8Rng::seed_from_u64(base);
        r1.set_stream(2 * i as u64);
        let mut r2 = ChaCha8Rng::seed_from_u64(base);
        r2.set_stream(2 * i as u64 + 1);
        view1.push(sample_view(&p.target_ids, &mut r1));
        view2.push(sample_view(&p.target_ids, &mut r2));
    }
    let sources = pairs.iter().map(|p| p.source_ids.clone()).collect();
    DualViewBatch::from_views(sources, view1, view2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_one_target_is_always_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let v = sample_view(&[9], &mut rng);
            assert_eq!(v.masked_positions, vec![0]);
            assert_eq!(v.input_ids, vec![MASK]);
        }
    }

    #[test]
    fn view_partitions_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target: Vec<u32> = (10..22).collect();
        for _ in 0..500 {
            let v = sample_view(&target, &mut rng);
            assert!(!v.masked_positions.is_empty());
            let mut all = v.masked_positions.clone();
            all.extend(&v.observed_positions);
            all.sort();
            assert_eq!(all, (0..12).collect::<Vec<_>>());
            assert_eq!(v.reconstruct(), target);
        }
    }

    #[test]
    fn intersection() {
        assert_eq!(intersect_sorted(&[2, 3, 6], &[5, 6, 9]), vec![6]);
        assert_eq!(intersect_sorted(&[1, 2], &[1, 2]), vec![1, 2]);
        assert!(intersect_sorted(&[1], &[2]).is_empty());
        assert!(intersect_sorted(&[], &[2]).is_empty());
    }
}
