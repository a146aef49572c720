//! Filtered ranking and the metric breakdowns: overall, by head/tail
//! direction, by relation category × direction and by degree of the
//! predicted entity.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RelationCategory, Split, Triple};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkernel::{Matrix, Scalar};

/// Caps evaluation parallelism when set.
pub const WORKERS_ENV: &str = "DEEPE_NUM_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieMode {
    /// `1 + greater + equal / 2`
    #[default]
    Average,
    /// `1 + greater + equal`
    Pessimistic,
    /// `1 + greater`
    Optimistic,
}

impl FromStr for TieMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "pessimistic" => Ok(Self::Pessimistic),
            "optimistic" => Ok(Self::Optimistic),
            other => Err(Error::Config(format!("unknown tie mode {other:?}"))),
        }
    }
}

impl fmt::Display for TieMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Average => "average",
            Self::Pessimistic => "pessimistic",
            Self::Optimistic => "optimistic",
        })
    }
}

fn combine(greater: usize, equal: usize, ties: TieMode) -> f64 {
    let g = greater as f64;
    match ties {
        TieMode::Average => 1.0 + g + equal as f64 / 2.0,
        TieMode::Pessimistic => 1.0 + g + equal as f64,
        TieMode::Optimistic => 1.0 + g,
    }
}

/// Rank of `gold` among all entities except the other known-true answers in
/// `filter` (sorted or not; `gold` itself is always kept).
pub fn filtered_rank<T: Scalar>(scores: &[T], gold: usize, filter: &[usize], ties: TieMode) -> Result<f64> {
    let (mut greater, mut equal) = raw_counts(scores, gold)?;
    let g = scores[gold];
    if g.is_nan() {
        let candidates = scores.len() - filter.iter().filter(|&&f| f != gold && f < scores.len()).count();
        return Ok(candidates as f64);
    }
    let mut prev = None;
    for &f in filter {
        // tolerate duplicates in unsorted filters
        if f == gold || f >= scores.len() || prev == Some(f) {
            continue;
        }
        prev = Some(f);
        let s = scores[f];
        if s > g {
            greater -= 1;
        } else if s == g {
            equal -= 1;
        }
    }
    Ok(combine(greater, equal, ties))
}

/// Rank of `gold` among all entities.
pub fn raw_rank<T: Scalar>(scores: &[T], gold: usize, ties: TieMode) -> Result<f64> {
    let (greater, equal) = raw_counts(scores, gold)?;
    if scores[gold].is_nan() {
        return Ok(scores.len() as f64);
    }
    Ok(combine(greater, equal, ties))
}

fn raw_counts<T: Scalar>(scores: &[T], gold: usize) -> Result<(usize, usize)> {
    if gold >= scores.len() {
        return Err(Error::IdOutOfRange {
            kind: "gold entity",
            id: gold,
            bound: scores.len(),
        });
    }
    let g = scores[gold];
    let (mut greater, mut equal) = (0, 0);
    for (e, &s) in scores.iter().enumerate() {
        if s > g {
            greater += 1;
        } else if s == g && e != gold {
            equal += 1;
        }
    }
    Ok((greater, equal))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `(h, r, ?)`
    Tail,
    /// `(?, r, t)`, answered as `(t, r', ?)`
    Head,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Head, Direction::Tail];

    pub fn label(self) -> &'static str {
        match self {
            Self::Tail => "tail",
            Self::Head => "head",
        }
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tail" => Ok(Self::Tail),
            "head" => Ok(Self::Head),
            other => Err(Error::Config(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankResult {
    /// The split triple in its original direction.
    pub triple: Triple,
    pub direction: Direction,
    pub filtered_rank: f64,
}

impl RankResult {
    /// The entity whose rank was computed.
    pub fn predicted(&self) -> usize {
        match self.direction {
            Direction::Tail => self.triple.tail,
            Direction::Head => self.triple.head,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mr: f64,
    pub mrr: f64,
    pub hits1: f64,
    pub hits10: f64,
}

impl Metrics {
    /// Aggregates in iteration order so results are reproducible.
    pub fn from_ranks(ranks: impl IntoIterator<Item = f64>) -> Self {
        let (mut n, mut sum, mut rr, mut h1, mut h10) = (0usize, 0.0, 0.0, 0usize, 0usize);
        for r in ranks {
            n += 1;
            sum += r;
            rr += 1.0 / r;
            h1 += usize::from(r <= 1.0);
            h10 += usize::from(r <= 10.0);
        }
        if n == 0 {
            return Self::default();
        }
        let nf = n as f64;
        Self {
            count: n,
            mr: sum / nf,
            mrr: rr / nf,
            hits1: h1 as f64 / nf,
            hits10: h10 as f64 / nf,
        }
    }
}

/// Inclusive degree ranges; labels are part of the CSV contract.
pub const DEGREE_BUCKETS: [(&str, usize, usize); 7] = [
    ("0", 0, 0),
    ("1", 1, 1),
    ("2", 2, 2),
    ("3-5", 3, 5),
    ("6-10", 6, 10),
    ("11-100", 11, 100),
    (">100", 101, usize::MAX),
];

pub fn degree_bucket(degree: usize) -> usize {
    DEGREE_BUCKETS
        .iter()
        .position(|&(_, lo, hi)| degree >= lo && degree <= hi)
        .expect("buckets cover every degree")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: RelationCategory,
    pub direction: Direction,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeRow {
    pub bucket: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Head and tail predictions merged.
    pub overall: Metrics,
    pub head: Metrics,
    pub tail: Metrics,
    /// Four categories × two directions, categorised by the original relation.
    pub by_category: Vec<CategoryRow>,
    /// Bucketed by training degree of the predicted entity.
    pub by_degree: Vec<DegreeRow>,
}

impl EvalReport {
    pub fn from_ranks(ranks: &[RankResult], dataset: &Dataset) -> Self {
        let of = |pred: &dyn Fn(&RankResult) -> bool| {
            Metrics::from_ranks(ranks.iter().filter(|r| pred(r)).map(|r| r.filtered_rank))
        };
        let cats = &dataset.relation_categories;
        let mut by_category = Vec::with_capacity(8);
        for direction in Direction::BOTH {
            for category in RelationCategory::ALL {
                let metrics = of(&|r| r.direction == direction && cats.of(r.triple.relation) == category);
                by_category.push(CategoryRow {
                    category,
                    direction,
                    metrics,
                });
            }
        }
        let degree = &dataset.degrees.total;
        let by_degree = DEGREE_BUCKETS
            .iter()
            .enumerate()
            .map(|(b, &(label, _, _))| DegreeRow {
                bucket: label.to_string(),
                metrics: of(&|r| degree_bucket(degree[r.predicted()]) == b),
            })
            .collect();
        Self {
            overall: of(&|_| true),
            head: of(&|r| r.direction == Direction::Head),
            tail: of(&|r| r.direction == Direction::Tail),
            by_category,
            by_degree,
        }
    }

    pub fn category(&self, category: RelationCategory, direction: Direction) -> &Metrics {
        &self
            .by_category
            .iter()
            .find(|r| r.category == category && r.direction == direction)
            .expect("all category rows present")
            .metrics
    }

    /// MRR over both directions of one category.
    pub fn category_mrr(&self, category: RelationCategory) -> f64 {
        let rows: Vec<&Metrics> = Direction::BOTH.iter().map(|&d| self.category(category, d)).collect();
        let n: usize = rows.iter().map(|m| m.count).sum();
        if n == 0 {
            return 0.0;
        }
        rows.iter().map(|m| m.mrr * m.count as f64).sum::<f64>() / n as f64
    }

    /// Structural invariants every report satisfies.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let total = self.overall.count;
        let by_deg: usize = self.by_degree.iter().map(|r| r.metrics.count).sum();
        let by_cat: usize = self.by_category.iter().map(|r| r.metrics.count).sum();
        if by_deg != total || by_cat != total || self.head.count + self.tail.count != total {
            return Err(format!(
                "bucket counts do not sum to {total}: degree {by_deg}, category {by_cat}"
            ));
        }
        let all = std::iter::once(&self.overall)
            .chain([&self.head, &self.tail])
            .chain(self.by_category.iter().map(|r| &r.metrics))
            .chain(self.by_degree.iter().map(|r| &r.metrics));
        for m in all.filter(|m| m.count > 0) {
            if !(0.0..=1.0).contains(&m.mrr) || !(0.0..=1.0).contains(&m.hits1) || !(0.0..=1.0).contains(&m.hits10) {
                return Err(format!("metric out of [0, 1]: {m:?}"));
            }
            if m.mr < 1.0 {
                return Err(format!("MR below 1: {m:?}"));
            }
            if m.hits1 > m.hits10 {
                return Err(format!("Hit@1 above Hit@10: {m:?}"));
            }
            // 1/x is convex, so mean(1/rank) >= 1/mean(rank)
            if m.mrr < 1.0 / m.mr - 1e-12 {
                return Err(format!("MRR below 1/MR: {m:?}"));
            }
        }
        Ok(())
    }
}

/// Anything that scores every entity as the tail of a batch of queries.
pub trait Scorer: Sync {
    type Elem: Scalar;
    fn n_entities(&self) -> usize;
    fn score(&self, heads: &[usize], relations: &[usize]) -> Result<Matrix<Self::Elem>>;
}

/// Eval-mode scorer with `t'` computed once.
pub struct ModelScorer<'a, T> {
    model: &'a Model<T>,
    projected: Matrix<T>,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>) -> Result<Self> {
        Ok(Self {
            projected: model.infer_projected()?,
            model,
        })
    }
}

impl<T: Scalar> Scorer for ModelScorer<'_, T> {
    type Elem = T;

    fn n_entities(&self) -> usize {
        self.model.n_entities()
    }

    fn score(&self, heads: &[usize], relations: &[usize]) -> Result<Matrix<T>> {
        self.model.infer_scores(&self.projected, heads, relations)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub ties: TieMode,
    pub batch_size: usize,
    pub workers: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ties: TieMode::Average,
            batch_size: 256,
            workers: None,
        }
    }
}

impl EvalOptions {
    /// Defaults with the worker cap read from `DEEPE_NUM_WORKERS`.
    pub fn from_env() -> Self {
        let workers = std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0);
        Self {
            workers,
            ..Self::default()
        }
    }
}

/// Filtered ranks of every split triple in both directions, ordered
/// `(t0 tail, t0 head, t1 tail, ...)`.
pub fn rank_queries<S: Scorer>(
    scorer: &S,
    dataset: &Dataset,
    triples: &[Triple],
    opts: &EvalOptions,
) -> Result<Vec<RankResult>> {
    let nr = dataset.n_relations();
    let queries: Vec<(Triple, Direction, usize, usize, usize)> = triples
        .iter()
        .flat_map(|&t| {
            [
                (t, Direction::Tail, t.head, t.relation, t.tail),
                (t, Direction::Head, t.tail, t.relation + nr, t.head),
            ]
        })
        .collect();
    let batch = opts.batch_size.max(1);
    let run = || -> Result<Vec<Vec<RankResult>>> {
        queries
            .par_chunks(batch)
            .map(|chunk| {
                let heads: Vec<usize> = chunk.iter().map(|q| q.2).collect();
                let rels: Vec<usize> = chunk.iter().map(|q| q.3).collect();
                let scores = scorer.score(&heads, &rels)?;
                chunk
                    .iter()
                    .enumerate()
                    .map(|(i, &(triple, direction, h, r, gold))| {
                        let filtered_rank =
                            filtered_rank(scores.row(i), gold, dataset.filter.get(h, r), opts.ties)?;
                        Ok(RankResult {
                            triple,
                            direction,
                            filtered_rank,
                        })
                    })
                    .collect()
            })
            .collect()
    };
    let chunks = match opts.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    Ok(chunks.into_iter().flatten().collect())
}

pub fn evaluate_with<S: Scorer>(
    scorer: &S,
    dataset: &Dataset,
    split: Split,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let ranks = rank_queries(scorer, dataset, dataset.split(split), opts)?;
    Ok(EvalReport::from_ranks(&ranks, dataset))
}

/// Eval-mode filtered evaluation of `model` on one split.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    split: Split,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if model.n_entities() != dataset.n_entities() || model.n_relations() != dataset.n_relations() {
        return Err(Error::Config(format!(
            "model has {} entities / {} relations but the dataset has {} / {}",
            model.n_entities(),
            model.n_relations(),
            dataset.n_entities(),
            dataset.n_relations()
        )));
    }
    evaluate_with(&ModelScorer::new(model)?, dataset, split, opts)
}

/// Formats like C's `%.6g`.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    // the exponent after rounding to six digits decides the style
    let s = format!("{x:.5e}");
    let (mant, e) = s.split_once('e').expect("scientific format");
    let exp: i32 = e.parse().expect("exponent");
    if !(-4..6).contains(&exp) {
        let mant = trim_zeros(mant);
        return format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

const METRIC_HEADER: [&str; 5] = ["count", "mr", "mrr", "hits1", "hits10"];

fn metric_fields(m: &Metrics) -> [String; 5] {
    [
        m.count.to_string(),
        fmt_sig6(m.mr),
        fmt_sig6(m.mrr),
        fmt_sig6(m.hits1),
        fmt_sig6(m.hits10),
    ]
}

fn parse_metrics(rec: &csv::StringRecord, offset: usize, path: &Path) -> Result<Metrics> {
    let field = |i: usize| -> Result<&str> {
        rec.get(offset + i).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: rec.position().map_or(0, |p| p.line() as usize),
            msg: format!("missing column {}", METRIC_HEADER[i]),
        })
    };
    let num = |i: usize| -> Result<f64> {
        field(i)?.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: rec.position().map_or(0, |p| p.line() as usize),
            msg: format!("bad number in column {}", METRIC_HEADER[i]),
        })
    };
    Ok(Metrics {
        count: num(0)? as usize,
        mr: num(1)?,
        mrr: num(2)?,
        hits1: num(3)?,
        hits10: num(4)?,
    })
}

/// Writes `overall.csv`, `by_category.csv` and `by_degree.csv` into `dir`.
pub fn emit_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let open = |name: &str| -> Result<(PathBuf, csv::Writer<std::fs::File>)> {
        let path = dir.join(name);
        let w = csv::Writer::from_path(&path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&path, io),
            other => Error::Config(format!("{}: {other:?}", path.display())),
        })?;
        Ok((path, w))
    };

    let (overall_path, mut w) = open("overall.csv")?;
    w.write_record(["scope"].iter().chain(&METRIC_HEADER))?;
    for (scope, m) in [("all", &report.overall), ("head", &report.head), ("tail", &report.tail)] {
        let f = metric_fields(m);
        w.write_record(std::iter::once(scope).chain(f.iter().map(String::as_str)))?;
    }
    w.flush().map_err(|e| Error::io(&overall_path, e))?;

    let (cat_path, mut w) = open("by_category.csv")?;
    w.write_record(["category", "direction"].iter().chain(&METRIC_HEADER))?;
    for row in &report.by_category {
        let f = metric_fields(&row.metrics);
        w.write_record(
            [row.category.label(), row.direction.label()]
                .into_iter()
                .chain(f.iter().map(String::as_str)),
        )?;
    }
    w.flush().map_err(|e| Error::io(&cat_path, e))?;

    let (deg_path, mut w) = open("by_degree.csv")?;
    w.write_record(["degree"].iter().chain(&METRIC_HEADER))?;
    for row in &report.by_degree {
        let f = metric_fields(&row.metrics);
        w.write_record(std::iter::once(row.bucket.as_str()).chain(f.iter().map(String::as_str)))?;
    }
    w.flush().map_err(|e| Error::io(&deg_path, e))?;

    Ok(vec![overall_path, cat_path, deg_path])
}

/// Parses the files written by [`emit_report`].
pub fn read_report(dir: impl AsRef<Path>) -> Result<EvalReport> {
    let dir = dir.as_ref();
    let records = |name: &str| -> Result<(PathBuf, Vec<csv::StringRecord>)> {
        let path = dir.join(name);
        let mut r = csv::Reader::from_path(&path)?;
        let recs = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok((path, recs))
    };
    let bad = |path: &Path, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    };

    let (path, recs) = records("overall.csv")?;
    let mut scoped = std::collections::HashMap::new();
    for rec in &recs {
        scoped.insert(rec[0].to_string(), parse_metrics(rec, 1, &path)?);
    }
    let mut take = |k: &str| scoped.remove(k).ok_or_else(|| bad(&path, format!("missing scope {k}")));
    let (overall, head, tail) = (take("all")?, take("head")?, take("tail")?);

    let (path, recs) = records("by_category.csv")?;
    let by_category = recs
        .iter()
        .map(|rec| {
            Ok(CategoryRow {
                category: rec[0].parse()?,
                direction: rec[1].parse()?,
                metrics: parse_metrics(rec, 2, &path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (path, recs) = records("by_degree.csv")?;
    let by_degree = recs
        .iter()
        .map(|rec| {
            Ok(DegreeRow {
                bucket: rec[0].to_string(),
                metrics: parse_metrics(rec, 1, &path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(EvalReport {
        overall,
        head,
        tail,
        by_category,
        by_degree,
    })
}
