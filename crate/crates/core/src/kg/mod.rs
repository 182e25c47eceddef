//! Dataset ingestion, vocabularies, graph indexes and sampling.

mod negative;
mod neighbors;

pub use negative::{sample_negatives, CorruptionSide, NegativeBatch};
pub use neighbors::{incident_csr_masked, EdgeMask, EdgeNeighborIndex};

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing dataset file: {0}")]
    MissingFile(PathBuf),
    #[error("{file}: line {line}: expected head<TAB>relation<TAB>tail")]
    MalformedLine { file: PathBuf, line: usize },
    #[error("{split} entity {symbol:?} never appears in the training split (transductive setting)")]
    UnseenEntity { symbol: String, split: String },
    #[error("training split is empty")]
    EmptyTrain,
    #[error("cannot corrupt triples: the graph has a single entity")]
    CannotCorrupt,
    #[error("unknown {kind} symbol {symbol:?}")]
    UnknownSymbol { kind: &'static str, symbol: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type DataResult<T> = Result<T, DataError>;

/// Integer-coded fact. `relation` may name an inverse relation
/// (`id >= num_base_relations`) on graph edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Self { head, relation, tail }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Valid => "valid.txt",
            Split::Test => "test.txt",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected valid|test|train)")),
        }
    }
}

/// Surface-form vocabulary with ids assigned by lexicographic order.
#[derive(Debug, Clone)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_sorted(names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        Self { names, index }
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// FNV-1a over the id-ordered names; pins checkpoints to a vocabulary.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for n in &self.names {
            for b in n.bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= u64::from(b'\n');
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Relation cardinality class computed from training-split averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum RelationCategory {
    OneToOne,
    OneToMany,
    ManyToOne,
    ManyToMany,
}

impl RelationCategory {
    pub const ALL: [RelationCategory; 4] = [
        RelationCategory::OneToOne,
        RelationCategory::OneToMany,
        RelationCategory::ManyToOne,
        RelationCategory::ManyToMany,
    ];
}

impl fmt::Display for RelationCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RelationCategory::OneToOne => "1-1",
            RelationCategory::OneToMany => "1-N",
            RelationCategory::ManyToOne => "N-1",
            RelationCategory::ManyToMany => "N-N",
        };
        f.write_str(s)
    }
}

/// An immutable knowledge graph: vocabularies, splits, message-passing edges
/// (optionally doubled with inverse relations) and ranking filter indexes.
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    with_inverses: bool,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    /// Message-passing edges built from the training split.
    edges: Vec<Triple>,
    incident_flat: Vec<u32>,
    incident_offsets: Vec<usize>,
    /// (source, relation incl. inverses) -> sorted true targets across splits.
    filter: HashMap<(u32, u32), Vec<u32>>,
    all_true: HashSet<(u32, u32, u32)>,
}

impl KnowledgeGraph {
    /// Load `train.txt` / `valid.txt` / `test.txt` from `dir` (tab-separated
    /// surface triples), adding inverse relations and edges.
    pub fn load(dir: &Path) -> DataResult<Self> {
        let mut raw: Vec<Vec<(String, String, String)>> = Vec::new();
        for split in [Split::Train, Split::Valid, Split::Test] {
            let path = dir.join(split.file_name());
            if !path.is_file() {
                return Err(DataError::MissingFile(path));
            }
            let text = fs::read_to_string(&path).map_err(|source| DataError::Io {
                path: path.clone(),
                source,
            })?;
            let mut rows = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let mut it = line.split('\t');
                match (it.next(), it.next(), it.next(), it.next()) {
                    (Some(h), Some(r), Some(t), None) if !h.is_empty() && !r.is_empty() && !t.is_empty() => {
                        rows.push((h.to_string(), r.to_string(), t.to_string()));
                    }
                    _ => {
                        return Err(DataError::MalformedLine {
                            file: path.clone(),
                            line: i + 1,
                        })
                    }
                }
            }
            raw.push(rows);
        }
        let test = raw.pop().unwrap();
        let valid = raw.pop().unwrap();
        let train = raw.pop().unwrap();
        Self::from_surface(&train, &valid, &test, true)
    }

    /// Build a graph from surface triples directly. `with_inverses` controls
    /// whether each fact also becomes a reversed edge under an inverse
    /// relation (the loader always enables it; unit fixtures often do not).
    pub fn from_surface(
        train: &[(String, String, String)],
        valid: &[(String, String, String)],
        test: &[(String, String, String)],
        with_inverses: bool,
    ) -> DataResult<Self> {
        if train.is_empty() {
            return Err(DataError::EmptyTrain);
        }
        let mut ents = BTreeSet::new();
        let mut rels = BTreeSet::new();
        for (h, r, t) in train.iter().chain(valid).chain(test) {
            ents.insert(h.clone());
            ents.insert(t.clone());
            rels.insert(r.clone());
        }
        let entities = Vocab::from_sorted(ents.into_iter().collect());
        let relations = Vocab::from_sorted(rels.into_iter().collect());

        let encode = |rows: &[(String, String, String)]| -> Vec<Triple> {
            rows.iter()
                .map(|(h, r, t)| {
                    Triple::new(
                        entities.id(h).unwrap(),
                        relations.id(r).unwrap(),
                        entities.id(t).unwrap(),
                    )
                })
                .collect()
        };
        let train_t = encode(train);
        let valid_t = encode(valid);
        let test_t = encode(test);

        // Transductive check: every evaluation entity must be trainable.
        let mut seen = vec![false; entities.len()];
        for t in &train_t {
            seen[t.head as usize] = true;
            seen[t.tail as usize] = true;
        }
        for (split, rows) in [("valid", &valid_t), ("test", &test_t)] {
            for t in rows {
                for e in [t.head, t.tail] {
                    if !seen[e as usize] {
                        return Err(DataError::UnseenEntity {
                            symbol: entities.name(e).to_string(),
                            split: split.to_string(),
                        });
                    }
                }
            }
        }

        Ok(Self::assemble(
            entities,
            relations,
            train_t,
            valid_t,
            test_t,
            with_inverses,
        ))
    }

    fn assemble(
        entities: Vocab,
        relations: Vocab,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
        with_inverses: bool,
    ) -> Self {
        let num_base = relations.len() as u32;
        let mut edges = Vec::with_capacity(train.len() * if with_inverses { 2 } else { 1 });
        for t in &train {
            edges.push(*t);
            if with_inverses {
                edges.push(Triple::new(t.tail, t.relation + num_base, t.head));
            }
        }

        // Incident CSR; pushing in edge order keeps each list ascending.
        let n_ent = entities.len();
        let mut counts = vec![0usize; n_ent];
        for e in &edges {
            counts[e.head as usize] += 1;
            if e.tail != e.head {
                counts[e.tail as usize] += 1;
            }
        }
        let mut incident_offsets = vec![0usize; n_ent + 1];
        for v in 0..n_ent {
            incident_offsets[v + 1] = incident_offsets[v] + counts[v];
        }
        let mut cursor = incident_offsets.clone();
        let mut incident_flat = vec![0u32; incident_offsets[n_ent]];
        for (eid, e) in edges.iter().enumerate() {
            incident_flat[cursor[e.head as usize]] = eid as u32;
            cursor[e.head as usize] += 1;
            if e.tail != e.head {
                incident_flat[cursor[e.tail as usize]] = eid as u32;
                cursor[e.tail as usize] += 1;
            }
        }

        let mut filter: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        let mut all_true = HashSet::new();
        for t in train.iter().chain(&valid).chain(&test) {
            all_true.insert((t.head, t.relation, t.tail));
            filter.entry((t.head, t.relation)).or_default().push(t.tail);
            if with_inverses {
                filter
                    .entry((t.tail, t.relation + num_base))
                    .or_default()
                    .push(t.head);
            }
        }
        for targets in filter.values_mut() {
            targets.sort_unstable();
            targets.dedup();
        }

        Self {
            entities,
            relations,
            with_inverses,
            train,
            valid,
            test,
            edges,
            incident_flat,
            incident_offsets,
            filter,
            all_true,
        }
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_base_relations(&self) -> usize {
        self.relations.len()
    }

    /// Relation count as seen by the model (doubled when inverses exist).
    pub fn num_relations(&self) -> usize {
        if self.with_inverses {
            self.relations.len() * 2
        } else {
            self.relations.len()
        }
    }

    pub fn has_inverses(&self) -> bool {
        self.with_inverses
    }

    pub fn inverse_relation(&self, r: u32) -> u32 {
        debug_assert!(self.with_inverses);
        if (r as usize) < self.relations.len() {
            r + self.relations.len() as u32
        } else {
            r - self.relations.len() as u32
        }
    }

    pub fn triples(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge(&self, e: u32) -> Triple {
        self.edges[e as usize]
    }

    pub fn edges(&self) -> &[Triple] {
        &self.edges
    }

    /// Graph edge ids generated by training triple `i`.
    pub fn edge_ids_of_train(&self, i: usize) -> (u32, Option<u32>) {
        if self.with_inverses {
            ((2 * i) as u32, Some((2 * i + 1) as u32))
        } else {
            (i as u32, None)
        }
    }

    /// The paired reverse edge, when inverses are enabled.
    pub fn twin(&self, e: u32) -> Option<u32> {
        self.with_inverses.then_some(e ^ 1)
    }

    /// Edges incident to entity `v`, ascending.
    pub fn incident_edges(&self, v: u32) -> &[u32] {
        &self.incident_flat[self.incident_offsets[v as usize]..self.incident_offsets[v as usize + 1]]
    }

    pub fn is_isolated(&self, v: u32) -> bool {
        self.incident_edges(v).is_empty()
    }

    /// Full line-graph neighborhood of edge `e`: every other edge sharing at
    /// least one endpoint, ascending. Computed on demand from the incident
    /// lists (materializing all of them is quadratic in hub degree).
    pub fn edge_neighbors(&self, e: u32) -> Vec<u32> {
        let t = self.edge(e);
        let a = self.incident_edges(t.head);
        let b = self.incident_edges(t.tail);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            let x = a.get(i).copied();
            let y = b.get(j).copied();
            let next = match (x, y) {
                (Some(x), Some(y)) if x == y => {
                    i += 1;
                    j += 1;
                    x
                }
                (Some(x), Some(y)) if x < y => {
                    i += 1;
                    x
                }
                (Some(_), Some(y)) => {
                    j += 1;
                    y
                }
                (Some(x), None) => {
                    i += 1;
                    x
                }
                (None, Some(y)) => {
                    j += 1;
                    y
                }
                (None, None) => break,
            };
            if next != e {
                out.push(next);
            }
        }
        out
    }

    /// Known-true targets for a `(source, relation)` query across all splits
    /// (relation may be an inverse id). Used by the filtered protocol.
    pub fn filter_targets(&self, source: u32, relation: u32) -> &[u32] {
        self.filter
            .get(&(source, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn is_true_triple(&self, t: &Triple) -> bool {
        self.all_true.contains(&(t.head, t.relation, t.tail))
    }

    pub fn num_true_triples(&self) -> usize {
        self.all_true.len()
    }

    /// Cardinality category per base relation from training-split averages
    /// with the conventional 1.5 threshold. Relations absent from the
    /// training split fall back to 1-1.
    pub fn categorize_relations(&self) -> Vec<RelationCategory> {
        let r_count = self.relations.len();
        let mut n = vec![0usize; r_count];
        let mut heads: Vec<HashSet<u32>> = vec![HashSet::new(); r_count];
        let mut tails: Vec<HashSet<u32>> = vec![HashSet::new(); r_count];
        for t in &self.train {
            let r = t.relation as usize;
            n[r] += 1;
            heads[r].insert(t.head);
            tails[r].insert(t.tail);
        }
        (0..r_count)
            .map(|r| {
                if n[r] == 0 {
                    return RelationCategory::OneToOne;
                }
                let heads_per_tail = n[r] as f64 / tails[r].len() as f64;
                let tails_per_head = n[r] as f64 / heads[r].len() as f64;
                match (heads_per_tail < 1.5, tails_per_head < 1.5) {
                    (true, true) => RelationCategory::OneToOne,
                    (true, false) => RelationCategory::OneToMany,
                    (false, true) => RelationCategory::ManyToOne,
                    (false, false) => RelationCategory::ManyToMany,
                }
            })
            .collect()
    }

    /// Write the three splits back out as tab-separated surface triples.
    pub fn write_splits(&self, dir: &Path) -> DataResult<()> {
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for split in [Split::Train, Split::Valid, Split::Test] {
            let path = dir.join(split.file_name());
            let mut out = String::new();
            for t in self.triples(split) {
                out.push_str(self.entities.name(t.head));
                out.push('\t');
                out.push_str(self.relations.name(t.relation));
                out.push('\t');
                out.push_str(self.entities.name(t.tail));
                out.push('\n');
            }
            fs::write(&path, out).map_err(|source| DataError::Io { path, source })?;
        }
        Ok(())
    }

    /// Dump `entity2id.tsv` and `relation2id.tsv` (base relations; the
    /// inverse of relation `r` is id `r + num_base_relations`).
    pub fn write_vocab(&self, dir: &Path) -> DataResult<()> {
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let dump = |path: PathBuf, vocab: &Vocab| -> DataResult<()> {
            let mut f = fs::File::create(&path).map_err(|source| DataError::Io {
                path: path.clone(),
                source,
            })?;
            for (i, name) in vocab.names.iter().enumerate() {
                writeln!(f, "{name}\t{i}").map_err(|source| DataError::Io {
                    path: path.clone(),
                    source,
                })?;
            }
            Ok(())
        };
        dump(dir.join("entity2id.tsv"), &self.entities)?;
        dump(dir.join("relation2id.tsv"), &self.relations)
    }
}

/// Convenience constructor for tests: triples given as `(&str, &str, &str)`.
pub fn surface(rows: &[(&str, &str, &str)]) -> Vec<(String, String, String)> {
    rows.iter()
        .map(|(h, r, t)| (h.to_string(), r.to_string(), t.to_string()))
        .collect()
}
