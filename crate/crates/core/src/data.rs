//! Triple ingestion, vocabularies, reverse-relation augmentation and the
//! indices used for filtered ranking and the analysis breakdowns.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Average tails-per-head / heads-per-tail at or above which a side counts as "many".
pub const CATEGORY_THRESHOLD: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }

    /// `(t, r', h)`; `r'` is `r + n_relations` for an original relation and
    /// `r - n_relations` for a reverse one, so reversing twice is the identity.
    pub fn reverse(&self, n_relations: usize) -> Self {
        let relation = if self.relation < n_relations {
            self.relation + n_relations
        } else {
            self.relation - n_relations
        };
        Self {
            head: self.tail,
            relation,
            tail: self.head,
        }
    }
}

/// Names in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::default();
        for n in names {
            v.intern(&n.into());
        }
        v
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// SHA-256 over the newline-joined names, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.names {
            h.update(n.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "valid" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Valid => "valid",
            Self::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationCategory {
    #[serde(rename = "1-1")]
    OneToOne,
    #[serde(rename = "1-N")]
    OneToMany,
    #[serde(rename = "N-1")]
    ManyToOne,
    #[serde(rename = "N-N")]
    ManyToMany,
}

impl RelationCategory {
    pub const ALL: [RelationCategory; 4] = [
        Self::OneToOne,
        Self::OneToMany,
        Self::ManyToOne,
        Self::ManyToMany,
    ];

    pub fn from_ratios(tails_per_head: f64, heads_per_tail: f64) -> Self {
        match (
            tails_per_head >= CATEGORY_THRESHOLD,
            heads_per_tail >= CATEGORY_THRESHOLD,
        ) {
            (false, false) => Self::OneToOne,
            (true, false) => Self::OneToMany,
            (false, true) => Self::ManyToOne,
            (true, true) => Self::ManyToMany,
        }
    }

    /// Category seen from the reverse relation.
    pub fn transpose(self) -> Self {
        match self {
            Self::OneToMany => Self::ManyToOne,
            Self::ManyToOne => Self::OneToMany,
            other => other,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::OneToOne => "1-1",
            Self::OneToMany => "1-N",
            Self::ManyToOne => "N-1",
            Self::ManyToMany => "N-N",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RelationCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for RelationCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown relation category {s:?}")))
    }
}

/// All true tails of each `(head, relation)` query, reverse relations included.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterIndex {
    map: HashMap<(usize, usize), Vec<usize>>,
}

impl FilterIndex {
    /// Sorted, de-duplicated true tails; empty if the query never occurs.
    pub fn get(&self, head: usize, relation: usize) -> &[usize] {
        self.map.get(&(head, relation)).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, head: usize, relation: usize, tail: usize) -> bool {
        self.get(head, relation).binary_search(&tail).is_ok()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn queries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.map.keys().copied()
    }
}

/// Builds the filter over `triples` and their reverses.
pub fn build_filter_index<'a>(
    splits: impl IntoIterator<Item = &'a [Triple]>,
    n_relations: usize,
) -> FilterIndex {
    let mut map: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for split in splits {
        for t in split {
            map.entry((t.head, t.relation)).or_default().push(t.tail);
            let r = t.reverse(n_relations);
            map.entry((r.head, r.relation)).or_default().push(r.tail);
        }
    }
    for tails in map.values_mut() {
        tails.sort_unstable();
        tails.dedup();
    }
    FilterIndex { map }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationCategories {
    /// One entry per augmented relation id (original then reverse).
    pub categories: Vec<RelationCategory>,
    pub tails_per_head: Vec<f64>,
    pub heads_per_tail: Vec<f64>,
    /// Original relations that never occur in train and were categorised from
    /// valid/test instead.
    pub fallback: Vec<bool>,
}

impl RelationCategories {
    pub fn of(&self, relation: usize) -> RelationCategory {
        self.categories[relation]
    }
}

/// Per original relation: distinct `(h, t)` pairs over distinct heads (tph)
/// and over distinct tails (hpt), thresholded at [`CATEGORY_THRESHOLD`].
pub fn categorize_relations(
    n_relations: usize,
    train: &[Triple],
    others: &[&[Triple]],
) -> RelationCategories {
    let pairs_of = |triples: &[&[Triple]]| {
        let mut pairs: Vec<HashSet<(usize, usize)>> = vec![HashSet::new(); n_relations];
        for split in triples {
            for t in *split {
                pairs[t.relation].insert((t.head, t.tail));
            }
        }
        pairs
    };
    let train_pairs = pairs_of(&[train]);
    let other_pairs = pairs_of(others);

    let mut out = RelationCategories {
        categories: vec![RelationCategory::OneToOne; 2 * n_relations],
        tails_per_head: vec![0.0; n_relations],
        heads_per_tail: vec![0.0; n_relations],
        fallback: vec![false; n_relations],
    };
    for r in 0..n_relations {
        let pairs = if train_pairs[r].is_empty() {
            out.fallback[r] = true;
            &other_pairs[r]
        } else {
            &train_pairs[r]
        };
        let heads: HashSet<usize> = pairs.iter().map(|p| p.0).collect();
        let tails: HashSet<usize> = pairs.iter().map(|p| p.1).collect();
        let (tph, hpt) = if pairs.is_empty() {
            (1.0, 1.0)
        } else {
            (
                pairs.len() as f64 / heads.len() as f64,
                pairs.len() as f64 / tails.len() as f64,
            )
        };
        out.tails_per_head[r] = tph;
        out.heads_per_tail[r] = hpt;
        let cat = RelationCategory::from_ratios(tph, hpt);
        out.categories[r] = cat;
        out.categories[r + n_relations] = cat.transpose();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityDegrees {
    /// Head plus tail occurrences in original-direction train triples.
    pub total: Vec<usize>,
    /// Tail occurrences only.
    pub indegree: Vec<usize>,
}

pub fn entity_degrees(n_entities: usize, train: &[Triple]) -> EntityDegrees {
    let mut total = vec![0; n_entities];
    let mut indegree = vec![0; n_entities];
    for t in train {
        total[t.head] += 1;
        total[t.tail] += 1;
        indegree[t.tail] += 1;
    }
    EntityDegrees { total, indegree }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Published statistics of the standard benchmarks.
pub const REFERENCE_STATS: [(&str, DatasetStats); 3] = [
    (
        "FB15k-237",
        DatasetStats {
            entities: 14541,
            relations: 237,
            train: 272115,
            valid: 17535,
            test: 20446,
        },
    ),
    (
        "WN18RR",
        DatasetStats {
            entities: 40943,
            relations: 11,
            train: 86835,
            valid: 3034,
            test: 3134,
        },
    ),
    (
        "YAGO3-10",
        DatasetStats {
            entities: 123182,
            relations: 37,
            train: 1079040,
            valid: 5000,
            test: 5000,
        },
    ),
];

#[derive(Debug, Clone)]
pub struct Dataset {
    pub entities: Vocab,
    pub relations: Vocab,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub train_augmented: Vec<Triple>,
    pub filter: FilterIndex,
    /// Train-only filter; the multi-label loss uses it for its targets.
    pub train_filter: FilterIndex,
    pub relation_categories: RelationCategories,
    pub degrees: EntityDegrees,
}

impl Dataset {
    /// Builds every index from id-encoded splits.
    pub fn from_splits(
        entities: Vocab,
        relations: Vocab,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self> {
        let (ne, nr) = (entities.len(), relations.len());
        for t in train.iter().chain(&valid).chain(&test) {
            if t.head >= ne || t.tail >= ne {
                return Err(Error::IdOutOfRange {
                    kind: "entity",
                    id: t.head.max(t.tail),
                    bound: ne,
                });
            }
            if t.relation >= nr {
                return Err(Error::IdOutOfRange {
                    kind: "relation",
                    id: t.relation,
                    bound: nr,
                });
            }
        }
        let train_augmented = train
            .iter()
            .flat_map(|t| [*t, t.reverse(nr)])
            .collect();
        let filter = build_filter_index([&train[..], &valid[..], &test[..]], nr);
        let train_filter = build_filter_index([&train[..]], nr);
        let relation_categories = categorize_relations(nr, &train, &[&valid, &test]);
        let degrees = entity_degrees(ne, &train);
        Ok(Self {
            entities,
            relations,
            train,
            valid,
            test,
            train_augmented,
            filter,
            train_filter,
            relation_categories,
            degrees,
        })
    }

    /// Builds vocabularies in train → valid → test first-appearance order.
    pub fn from_named<S: AsRef<str>>(
        train: &[(S, S, S)],
        valid: &[(S, S, S)],
        test: &[(S, S, S)],
    ) -> Result<Self> {
        let mut entities = Vocab::default();
        let mut relations = Vocab::default();
        let mut encode = |split: &[(S, S, S)]| -> Vec<Triple> {
            split
                .iter()
                .map(|(h, r, t)| {
                    let head = entities.intern(h.as_ref());
                    let relation = relations.intern(r.as_ref());
                    let tail = entities.intern(t.as_ref());
                    Triple::new(head, relation, tail)
                })
                .collect()
        };
        let (train, valid, test) = (encode(train), encode(valid), encode(test));
        Self::from_splits(entities, relations, train, valid, test)
    }

    /// `dir/train.txt`, `dir/valid.txt`, `dir/test.txt`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        load_tsv(dir.join("train.txt"), dir.join("valid.txt"), dir.join("test.txt"))
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn augmented_relation_count(&self) -> usize {
        2 * self.relations.len()
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            entities: self.n_entities(),
            relations: self.n_relations(),
            train: self.train.len(),
            valid: self.valid.len(),
            test: self.test.len(),
        }
    }

    /// Line-oriented `key=value` summary.
    pub fn stats_report(&self) -> String {
        let s = self.stats();
        let ne = self.n_entities().max(1) as f64;
        let below = |limit: usize, deg: &[usize]| deg.iter().filter(|&&d| d < limit).count() as f64 / ne;
        let mut counts = [0usize; 4];
        for r in 0..self.n_relations() {
            counts[self.relation_categories.of(r).index()] += 1;
        }
        let fallback = self.relation_categories.fallback.iter().filter(|&&f| f).count();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("entities", s.entities.to_string());
        kv("relations", s.relations.to_string());
        kv("train", s.train.to_string());
        kv("valid", s.valid.to_string());
        kv("test", s.test.to_string());
        kv("train_augmented", self.train_augmented.len().to_string());
        kv("entity_vocab_hash", self.entities.hash());
        kv("relation_vocab_hash", self.relations.hash());
        for c in RelationCategory::ALL {
            kv(&format!("relations_{}", c.label()), counts[c.index()].to_string());
        }
        kv("relations_categorized_outside_train", fallback.to_string());
        kv("degree_lt10_fraction", format!("{:.6}", below(10, &self.degrees.total)));
        kv("indegree_lt10_fraction", format!("{:.6}", below(10, &self.degrees.indegree)));
        kv("degree_zero_entities", self.degrees.total.iter().filter(|&&d| d == 0).count().to_string());
        out
    }
}

fn read_split(
    path: &Path,
    entities: &mut Vocab,
    relations: &mut Vocab,
) -> Result<Vec<Triple>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: PathBuf::from(path),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let head = entities.intern(fields[0]);
        let relation = relations.intern(fields[1]);
        let tail = entities.intern(fields[2]);
        out.push(Triple::new(head, relation, tail));
    }
    Ok(out)
}

/// Loads `head<TAB>relation<TAB>tail` files. Entities or relations first seen
/// in valid or test are added to the vocabularies.
pub fn load_tsv(
    train_path: impl AsRef<Path>,
    valid_path: impl AsRef<Path>,
    test_path: impl AsRef<Path>,
) -> Result<Dataset> {
    let mut entities = Vocab::default();
    let mut relations = Vocab::default();
    let train = read_split(train_path.as_ref(), &mut entities, &mut relations)?;
    let valid = read_split(valid_path.as_ref(), &mut entities, &mut relations)?;
    let test = read_split(test_path.as_ref(), &mut entities, &mut relations)?;
    Dataset::from_splits(entities, relations, train, valid, test)
}
