//! Uniform negative sampling by entity corruption.

use rand::Rng;

use super::{DataError, DataResult, KnowledgeGraph, Triple};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionSide {
    Head,
    Tail,
}

/// Positives with `n` corrupted companions each; `corrupted` is row-major,
/// `n` entries per positive.
#[derive(Debug, Clone)]
pub struct NegativeBatch {
    pub positives: Vec<Triple>,
    pub corrupted: Vec<Triple>,
    pub n: usize,
}

/// Corrupt one slot of every positive with entities drawn uniformly,
/// resampling on collision with the positive's own entity.
pub fn sample_negatives(
    kg: &KnowledgeGraph,
    positives: &[Triple],
    n: usize,
    side: CorruptionSide,
    seed: u64,
) -> DataResult<NegativeBatch> {
    assert!(n >= 1, "need at least one negative per positive");
    let num_entities = kg.num_entities() as u32;
    if num_entities <= 1 {
        return Err(DataError::CannotCorrupt);
    }
    let mut rng = rng::stream(seed, "negatives", &[]);
    let mut corrupted = Vec::with_capacity(positives.len() * n);
    for pos in positives {
        let original = match side {
            CorruptionSide::Head => pos.head,
            CorruptionSide::Tail => pos.tail,
        };
        for _ in 0..n {
            let replacement = loop {
                let cand = rng.gen_range(0..num_entities);
                if cand != original {
                    break cand;
                }
            };
            corrupted.push(match side {
                CorruptionSide::Head => Triple::new(replacement, pos.relation, pos.tail),
                CorruptionSide::Tail => Triple::new(pos.head, pos.relation, replacement),
            });
        }
    }
    Ok(NegativeBatch {
        positives: positives.to_vec(),
        corrupted,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::surface;

    fn two_entity_kg() -> KnowledgeGraph {
        KnowledgeGraph::from_surface(&surface(&[("a", "r", "b")]), &[], &[], true).unwrap()
    }

    #[test]
    fn two_entity_tail_corruption_is_forced() {
        let kg = two_entity_kg();
        let pos = kg.triples(crate::kg::Split::Train).to_vec();
        let batch = sample_negatives(&kg, &pos, 1, CorruptionSide::Tail, 7).unwrap();
        let a = kg.entities().id("a").unwrap();
        assert_eq!(batch.corrupted.len(), 1);
        assert_eq!(batch.corrupted[0].tail, a);
        assert_eq!(batch.corrupted[0].head, pos[0].head);
        assert_eq!(batch.corrupted[0].relation, pos[0].relation);
    }

    #[test]
    fn corruption_never_reproduces_the_positive() {
        let rows = surface(&[
            ("a", "r", "b"),
            ("b", "r", "c"),
            ("c", "r", "d"),
            ("d", "r", "e"),
        ]);
        let kg = KnowledgeGraph::from_surface(&rows, &[], &[], true).unwrap();
        let pos = kg.triples(crate::kg::Split::Train).to_vec();
        for side in [CorruptionSide::Head, CorruptionSide::Tail] {
            let batch = sample_negatives(&kg, &pos, 5, side, 11).unwrap();
            assert_eq!(batch.corrupted.len(), pos.len() * 5);
            for (i, neg) in batch.corrupted.iter().enumerate() {
                let p = &pos[i / 5];
                assert_ne!(neg, p);
                match side {
                    CorruptionSide::Head => {
                        assert_eq!(neg.tail, p.tail);
                        assert_eq!(neg.relation, p.relation);
                        assert_ne!(neg.head, p.head);
                    }
                    CorruptionSide::Tail => {
                        assert_eq!(neg.head, p.head);
                        assert_eq!(neg.relation, p.relation);
                        assert_ne!(neg.tail, p.tail);
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_batches() {
        let rows = surface(&[("a", "r", "b"), ("b", "r", "c"), ("c", "r", "a")]);
        let kg = KnowledgeGraph::from_surface(&rows, &[], &[], true).unwrap();
        let pos = kg.triples(crate::kg::Split::Train).to_vec();
        let b1 = sample_negatives(&kg, &pos, 4, CorruptionSide::Tail, 99).unwrap();
        let b2 = sample_negatives(&kg, &pos, 4, CorruptionSide::Tail, 99).unwrap();
        assert_eq!(b1.corrupted, b2.corrupted);
        let b3 = sample_negatives(&kg, &pos, 4, CorruptionSide::Tail, 100).unwrap();
        assert_ne!(b1.corrupted, b3.corrupted);
    }

    #[test]
    fn single_entity_graph_cannot_be_corrupted() {
        let kg = KnowledgeGraph::from_surface(&surface(&[("a", "r", "a")]), &[], &[], true).unwrap();
        let pos = kg.triples(crate::kg::Split::Train).to_vec();
        assert!(matches!(
            sample_negatives(&kg, &pos, 1, CorruptionSide::Tail, 0),
            Err(DataError::CannotCorrupt)
        ));
    }
}
