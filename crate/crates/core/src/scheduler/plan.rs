use std::collections::VecDeque;

use crate::rng::SplitMix64;
use crate::spec::{ReadingConfig, ReadingMethod};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("cannot plan an empty dataset")]
    NoRows,
    #[error("chunk size must be at least 1")]
    ZeroChunkSize,
}

/// Ordered partition of row indices into chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunks: Vec<Vec<usize>>,
    pub method: ReadingMethod,
    pub chunk_size: usize,
    pub seed: u64,
}

impl ChunkPlan {
    /// Row indices in emission order.
    pub fn order(&self) -> impl Iterator<Item = usize> + '_ {
        self.chunks.iter().flatten().copied()
    }
}

/// Row indices `0..n` in reading order.
pub fn reading_order(n: usize, method: ReadingMethod, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    match method {
        ReadingMethod::Ascending => {}
        ReadingMethod::Descending => ids.reverse(),
        ReadingMethod::Random => SplitMix64::new(seed).shuffle(&mut ids),
    }
    ids
}

pub fn plan_chunks(n: usize, reading: &ReadingConfig) -> Result<ChunkPlan, PlanError> {
    if n == 0 {
        return Err(PlanError::NoRows);
    }
    if reading.chunk_size == 0 {
        return Err(PlanError::ZeroChunkSize);
    }
    let order = reading_order(n, reading.method, reading.seed);
    Ok(ChunkPlan {
        chunks: split(&order, reading.chunk_size),
        method: reading.method,
        chunk_size: reading.chunk_size,
        seed: reading.seed,
    })
}

fn split(ids: &[usize], size: usize) -> Vec<Vec<usize>> {
    ids.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Re-partitions the chunks not yet consumed, keeping their row order.
pub fn replan(remaining: &VecDeque<Vec<usize>>, size: usize) -> VecDeque<Vec<usize>> {
    let ids: Vec<usize> = remaining.iter().flatten().copied().collect();
    split(&ids, size).into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reading(method: ReadingMethod, size: usize, seed: u64) -> ReadingConfig {
        ReadingConfig {
            method,
            chunk_size: size,
            auto_chunk_size: false,
            frequency_ms: 250,
            seed,
        }
    }

    #[test]
    fn ascending_and_descending() {
        let p = plan_chunks(5, &reading(ReadingMethod::Ascending, 2, 0)).unwrap();
        assert_eq!(p.chunks, vec![vec![0, 1], vec![2, 3], vec![4]]);
        let p = plan_chunks(4, &reading(ReadingMethod::Descending, 2, 0)).unwrap();
        assert_eq!(p.chunks, vec![vec![3, 2], vec![1, 0]]);
    }

    #[test]
    fn random_golden() {
        // Frozen from an independent implementation of the normative generator.
        let p = plan_chunks(6, &reading(ReadingMethod::Random, 2, 42)).unwrap();
        assert_eq!(p.chunks, vec![vec![2, 5], vec![3, 1], vec![0, 4]]);
        assert_eq!(
            reading_order(10, ReadingMethod::Random, 7),
            [9, 5, 8, 6, 1, 2, 4, 7, 0, 3]
        );
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(
            plan_chunks(0, &reading(ReadingMethod::Ascending, 2, 0)),
            Err(PlanError::NoRows)
        );
        assert_eq!(
            plan_chunks(3, &reading(ReadingMethod::Ascending, 0, 0)),
            Err(PlanError::ZeroChunkSize)
        );
    }

    #[test]
    fn replan_remaining() {
        let p = plan_chunks(10, &reading(ReadingMethod::Ascending, 2, 0)).unwrap();
        let mut rest: VecDeque<Vec<usize>> = p.chunks.into();
        rest.pop_front();
        rest.pop_front();
        let rest = replan(&rest, 3);
        assert_eq!(rest, VecDeque::from(vec![vec![4, 5, 6], vec![7, 8, 9]]));
    }

    fn method() -> impl Strategy<Value = ReadingMethod> {
        prop_oneof![
            Just(ReadingMethod::Ascending),
            Just(ReadingMethod::Descending),
            Just(ReadingMethod::Random)
        ]
    }

    proptest! {
        #[test]
        fn plans_partition(n in 1usize..2_000, size_seed in any::<usize>(), m in method(), seed in any::<u64>()) {
            let size = 1 + size_seed % n;
            let p = plan_chunks(n, &reading(m, size, seed)).unwrap();
            let mut all: Vec<usize> = p.order().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let (last, full) = p.chunks.split_last().unwrap();
            prop_assert!(full.iter().all(|c| c.len() == size));
            prop_assert!(!last.is_empty() && last.len() <= size);
            prop_assert_eq!(&p, &plan_chunks(n, &reading(m, size, seed)).unwrap());
        }

        #[test]
        fn replan_keeps_order(n in 1usize..500, consumed in 0usize..10, size in 1usize..40, new_size in 1usize..40) {
            let p = plan_chunks(n, &reading(ReadingMethod::Random, size, 9)).unwrap();
            let mut rest: VecDeque<Vec<usize>> = p.chunks.clone().into();
            for _ in 0..consumed.min(rest.len()) {
                rest.pop_front();
            }
            let before: Vec<usize> = rest.iter().flatten().copied().collect();
            let after = replan(&rest, new_size);
            let flat: Vec<usize> = after.iter().flatten().copied().collect();
            prop_assert_eq!(before, flat);
            prop_assert!(after.iter().rev().skip(1).all(|c| c.len() == new_size));
        }
    }
}
