//! Filtered ranking protocol: MRR and Hits@N over head and tail queries,
//! with relation-category slices.

pub mod sweep;

use serde::Serialize;

use crate::kg::{EdgeNeighborIndex, KnowledgeGraph, RelationCategory, Split, Triple};
use crate::model::forward::{query_node_messages, CandidateScorer};
use crate::model::{HyperParams, ModelParams};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::TensorResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Head,
    Tail,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryRecord {
    pub triple: (u32, u32, u32),
    pub direction: Direction,
    /// Mean-rank over score ties; in `[1, num_entities]`.
    pub rank: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Aggregates {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

impl Aggregates {
    fn from_ranks(ranks: impl Iterator<Item = f64>) -> Self {
        let mut agg = Aggregates::default();
        let mut rr = 0.0;
        for r in ranks {
            rr += 1.0 / r;
            agg.hits1 += f64::from(r <= 1.0);
            agg.hits3 += f64::from(r <= 3.0);
            agg.hits10 += f64::from(r <= 10.0);
            agg.count += 1;
        }
        if agg.count > 0 {
            let n = agg.count as f64;
            agg.mrr = rr / n;
            agg.hits1 /= n;
            agg.hits3 /= n;
            agg.hits10 /= n;
        }
        agg
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CategoryRow {
    pub category: String,
    pub head: Aggregates,
    pub tail: Aggregates,
}

/// Per-query ranks plus every aggregate the protocol reports.
#[derive(Debug, Clone, Serialize)]
pub struct RankingReport {
    pub split: String,
    pub overall: Aggregates,
    pub head: Aggregates,
    pub tail: Aggregates,
    pub categories: Vec<CategoryRow>,
    pub per_query: Vec<QueryRecord>,
}

/// Mean-tie rank of `target` among the unfiltered candidates.
///
/// `filtered` lists candidate ids removed by the protocol (known true
/// answers); the target itself is never filtered. Rank = 1 + #strictly
/// greater + #ties/2, so a score tie splits the block evenly instead of
/// rewarding or punishing it.
pub fn rank_with_filter<S: Scalar>(scores: &[S], target: u32, filtered: &[u32]) -> f64 {
    let target_score = scores[target as usize];
    let mut greater = 0usize;
    let mut ties = 0usize;
    let mut f = 0usize;
    for (c, &s) in scores.iter().enumerate() {
        let c = c as u32;
        // `filtered` is sorted; advance a cursor instead of binary searching.
        while f < filtered.len() && filtered[f] < c {
            f += 1;
        }
        if c == target || (f < filtered.len() && filtered[f] == c) {
            continue;
        }
        if s > target_score {
            greater += 1;
        } else if s == target_score {
            ties += 1;
        }
    }
    greater as f64 + ties as f64 / 2.0 + 1.0
}

/// Unfiltered (raw) rank; used only to check that filtering never hurts.
pub fn rank_raw<S: Scalar>(scores: &[S], target: u32) -> f64 {
    rank_with_filter(scores, target, &[])
}

/// Integer rank for display: mean-tie rank rounded half up.
pub fn display_rank(rank: f64) -> u64 {
    (rank + 0.5).floor() as u64
}

/// Both-direction filtered evaluation of a split.
///
/// Valid/test facts are absent from the message-passing graph, so one
/// unmasked pass serves every query. Evaluating the training split instead
/// masks each fact out for its own two queries, which costs one pass per
/// triple — fine for the small graphs where it is used.
pub fn evaluate<S: Scalar>(
    kg: &KnowledgeGraph,
    nbrs: &EdgeNeighborIndex,
    params: &ModelParams<S>,
    hyper: &HyperParams,
    split: Split,
    threads: usize,
) -> TensorResult<RankingReport> {
    let triples = kg.triples(split);
    let mut per_query = Vec::with_capacity(triples.len() * 2);

    if split == Split::Train {
        for (i, t) in triples.iter().enumerate() {
            let (edge, _) = kg.edge_ids_of_train(i);
            let messages =
                query_node_messages(kg, nbrs, params, hyper, Some(edge), eval_pass_seed())?;
            let scorer = CandidateScorer::new(&messages, params);
            per_query.push(rank_one(kg, &scorer, t, Direction::Tail));
            if kg.has_inverses() {
                per_query.push(rank_one(kg, &scorer, t, Direction::Head));
            }
        }
    } else {
        let messages = query_node_messages(kg, nbrs, params, hyper, None, eval_pass_seed())?;
        let scorer = CandidateScorer::new(&messages, params);
        let workers = threads.max(1).min(triples.len().max(1));
        if workers <= 1 {
            for t in triples {
                per_query.push(rank_one(kg, &scorer, t, Direction::Tail));
                if kg.has_inverses() {
                    per_query.push(rank_one(kg, &scorer, t, Direction::Head));
                }
            }
        } else {
            // Fixed chunk split; partial results merge in chunk order.
            let chunk = triples.len().div_ceil(workers);
            let parts: Vec<Vec<QueryRecord>> = std::thread::scope(|scope| {
                let handles: Vec<_> = triples
                    .chunks(chunk)
                    .map(|part| {
                        let scorer = &scorer;
                        scope.spawn(move || {
                            let mut out = Vec::with_capacity(part.len() * 2);
                            for t in part {
                                out.push(rank_one(kg, scorer, t, Direction::Tail));
                                if kg.has_inverses() {
                                    out.push(rank_one(kg, scorer, t, Direction::Head));
                                }
                            }
                            out
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
            per_query = parts.into_iter().flatten().collect();
        }
    }

    Ok(build_report(kg, split, per_query))
}

fn eval_pass_seed() -> u64 {
    rng::derive(0, "eval-pass", &[])
}

fn rank_one<S: Scalar>(
    kg: &KnowledgeGraph,
    scorer: &CandidateScorer<'_, S>,
    triple: &Triple,
    direction: Direction,
) -> QueryRecord {
    let (source, relation, target) = match direction {
        Direction::Tail => (triple.head, triple.relation, triple.tail),
        Direction::Head => (triple.tail, kg.inverse_relation(triple.relation), triple.head),
    };
    let scores = scorer.logits(source, relation);
    let filtered = kg.filter_targets(source, relation);
    let rank = rank_with_filter(&scores, target, filtered);
    QueryRecord {
        triple: (triple.head, triple.relation, triple.tail),
        direction,
        rank,
    }
}

fn build_report(kg: &KnowledgeGraph, split: Split, per_query: Vec<QueryRecord>) -> RankingReport {
    let overall = Aggregates::from_ranks(per_query.iter().map(|q| q.rank));
    let head = Aggregates::from_ranks(
        per_query
            .iter()
            .filter(|q| q.direction == Direction::Head)
            .map(|q| q.rank),
    );
    let tail = Aggregates::from_ranks(
        per_query
            .iter()
            .filter(|q| q.direction == Direction::Tail)
            .map(|q| q.rank),
    );
    let relation_categories = kg.categorize_relations();
    let categories = RelationCategory::ALL
        .iter()
        .map(|cat| {
            let in_cat = |q: &&QueryRecord| relation_categories[q.triple.1 as usize] == *cat;
            CategoryRow {
                category: cat.to_string(),
                head: Aggregates::from_ranks(
                    per_query
                        .iter()
                        .filter(in_cat)
                        .filter(|q| q.direction == Direction::Head)
                        .map(|q| q.rank),
                ),
                tail: Aggregates::from_ranks(
                    per_query
                        .iter()
                        .filter(in_cat)
                        .filter(|q| q.direction == Direction::Tail)
                        .map(|q| q.rank),
                ),
            }
        })
        .collect();
    RankingReport {
        split: format!("{split:?}").to_lowercase(),
        overall,
        head,
        tail,
        categories,
        per_query,
    }
}

impl RankingReport {
    /// Human-readable report: aggregates plus the category table, Hits given
    /// both as fractions and percentages.
    pub fn to_table_string(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let line = |agg: &Aggregates| {
            format!(
                "MRR {:.4}  H@1 {:.4} ({:5.1}%)  H@3 {:.4} ({:5.1}%)  H@10 {:.4} ({:5.1}%)  n={}",
                agg.mrr,
                agg.hits1,
                agg.hits1 * 100.0,
                agg.hits3,
                agg.hits3 * 100.0,
                agg.hits10,
                agg.hits10 * 100.0,
                agg.count
            )
        };
        writeln!(s, "split: {}", self.split).unwrap();
        writeln!(s, "overall   {}", line(&self.overall)).unwrap();
        writeln!(s, "head-pred {}", line(&self.head)).unwrap();
        writeln!(s, "tail-pred {}", line(&self.tail)).unwrap();
        writeln!(s, "\nby relation category (MRR):").unwrap();
        writeln!(
            s,
            "  {:<5} {:>10} {:>6}   {:>10} {:>6}",
            "cat", "head-pred", "n", "tail-pred", "n"
        )
        .unwrap();
        for row in &self.categories {
            writeln!(
                s,
                "  {:<5} {:>10.4} {:>6}   {:>10.4} {:>6}",
                row.category, row.head.mrr, row.head.count, row.tail.mrr, row.tail.count
            )
            .unwrap();
        }
        s
    }
}
