//! Linear-scan Hamming retrieval and its evaluation metrics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::net::{forward, HashCode, ModelParams, PoolMode};
use crate::numeric::Matrix;

/// Bags per forward pass when encoding a collection.
const ENCODE_CHUNK: usize = 256;

/// Number of positions where the two codes differ.
pub fn hamming(a: &HashCode, b: &HashCode) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::shape("hamming", format!("{} vs {} bits", a.len(), b.len())));
    }
    Ok(hamming_unchecked(a, b))
}

#[inline]
fn hamming_unchecked(a: &HashCode, b: &HashCode) -> u32 {
    a.words()
        .iter()
        .zip(b.words())
        .map(|(x, y)| (x ^ y).count_ones())
        .sum()
}

/// Mean over query instances of the Hamming distance to the nearest database
/// instance. Directional: `bag_distance(a, b)` and `bag_distance(b, a)` differ
/// in general.
pub fn bag_distance(query: &[HashCode], db: &[HashCode]) -> Result<f64> {
    if query.is_empty() || db.is_empty() {
        return Err(Error::Empty("bag_distance needs non-empty code lists".into()));
    }
    let k = query[0].len();
    if query.iter().chain(db).any(|c| c.len() != k) {
        return Err(Error::shape("bag_distance", "code lengths differ"));
    }
    Ok(bag_distance_unchecked(query, db))
}

fn bag_distance_unchecked(query: &[HashCode], db: &[HashCode]) -> f64 {
    let total: u32 = query
        .iter()
        .map(|q| db.iter().map(|d| hamming_unchecked(q, d)).min().unwrap_or(0))
        .sum();
    f64::from(total) / query.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    /// Hamming distance between bag-level codes.
    #[default]
    BagCode,
    /// Bag distance over per-instance codes.
    InstanceCodes,
}

impl std::str::FromStr for IndexMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bag_code" => Ok(IndexMode::BagCode),
            "instance_codes" => Ok(IndexMode::InstanceCodes),
            other => Err(Error::invalid(format!("unknown index mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for IndexMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IndexMode::BagCode => "bag_code",
            IndexMode::InstanceCodes => "instance_codes",
        })
    }
}

/// Codes of one bag. Also serves as a query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedBag {
    pub id: String,
    pub label: String,
    pub mi_code: HashCode,
    pub si_codes: Option<Vec<HashCode>>,
}

/// Quantized codes for every bag, computed in chunks.
pub fn encode_bags(params: &ModelParams, bags: &[Bag], pool: PoolMode, with_instances: bool) -> Result<Vec<IndexedBag>> {
    let mut out = Vec::with_capacity(bags.len());
    for chunk in bags.chunks(ENCODE_CHUNK) {
        let trace = forward(params, chunk, pool)?;
        let mut si = with_instances.then(|| trace.instance_codes().into_iter());
        for (bag, mi_code) in chunk.iter().zip(trace.bag_codes()) {
            out.push(IndexedBag {
                id: bag.id.clone(),
                label: bag.label.clone(),
                mi_code,
                si_codes: si.as_mut().and_then(Iterator::next),
            });
        }
    }
    Ok(out)
}

/// Relaxed (non-binarized) bag embeddings `h^MI`, one row per bag.
pub fn embed_bags(params: &ModelParams, bags: &[Bag], pool: PoolMode) -> Result<Embeddings> {
    let mut data = Vec::with_capacity(bags.len() * params.code_bits());
    for chunk in bags.chunks(ENCODE_CHUNK) {
        data.extend_from_slice(forward(params, chunk, pool)?.h_mi.as_slice());
    }
    Ok(Embeddings {
        ids: bags.iter().map(|b| b.id.clone()).collect(),
        labels: bags.iter().map(|b| b.label.clone()).collect(),
        vectors: Matrix::from_vec(bags.len(), params.code_bits(), data)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub label: String,
    pub distance: f64,
}

/// Immutable database of bag codes in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    bits: usize,
    mode: IndexMode,
    entries: Vec<IndexedBag>,
}

pub fn build_index(entries: Vec<IndexedBag>, mode: IndexMode) -> Result<RetrievalIndex> {
    let bits = entries.first().map_or(0, |e| e.mi_code.len());
    for e in &entries {
        check_codes(e, bits, mode)?;
    }
    Ok(RetrievalIndex { bits, mode, entries })
}

fn check_codes(e: &IndexedBag, bits: usize, mode: IndexMode) -> Result<()> {
    if e.mi_code.len() != bits {
        return Err(Error::shape(
            "index",
            format!("bag '{}' has a {}-bit code, expected {bits}", e.id, e.mi_code.len()),
        ));
    }
    match (&e.si_codes, mode) {
        (None, IndexMode::InstanceCodes) => Err(Error::invalid(format!("bag '{}' has no instance codes", e.id))),
        (Some(codes), IndexMode::InstanceCodes) if codes.is_empty() => {
            Err(Error::Empty(format!("bag '{}' has no instance codes", e.id)))
        }
        (Some(codes), _) if codes.iter().any(|c| c.len() != bits) => Err(Error::shape(
            "index",
            format!("bag '{}' has instance codes of the wrong length", e.id),
        )),
        _ => Ok(()),
    }
}

impl RetrievalIndex {
    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn entries(&self) -> &[IndexedBag] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn position(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    /// Distance from `query` to every entry, in insertion order.
    pub fn distances(&self, query: &IndexedBag) -> Result<Vec<f64>> {
        if self.entries.is_empty() {
            return Err(Error::Empty("index has no entries".into()));
        }
        check_codes(query, self.bits, self.mode)?;
        Ok(match self.mode {
            IndexMode::BagCode => self
                .entries
                .iter()
                .map(|e| f64::from(hamming_unchecked(&query.mi_code, &e.mi_code)))
                .collect(),
            IndexMode::InstanceCodes => {
                let q = query.si_codes.as_deref().unwrap_or_default();
                self.entries
                    .iter()
                    .map(|e| bag_distance_unchecked(q, e.si_codes.as_deref().unwrap_or_default()))
                    .collect()
            }
        })
    }

    /// At most `k` nearest entries, ascending by distance, ties in insertion
    /// order. The entry whose id equals `exclude_id` is skipped.
    pub fn query_topk(&self, query: &IndexedBag, k: usize, exclude_id: Option<&str>) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        let distances = self.distances(query)?;
        let skip = exclude_id.and_then(|id| self.position(id));
        Ok(top_k(&distances, k, skip)
            .into_iter()
            .map(|i| Hit {
                id: self.entries[i].id.clone(),
                label: self.entries[i].label.clone(),
                distance: distances[i],
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = IndexHeader {
            bits: self.bits,
            mode: self.mode,
            entries: self.entries.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for e in &self.entries {
            let rec = EntryRecord {
                id: e.id.clone(),
                label: e.label.clone(),
                code: e.mi_code.to_hex(),
                instances: e.si_codes.as_ref().map(|cs| cs.iter().map(HashCode::to_hex).collect()),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::read(BufReader::new(File::open(path)?), path)
    }

    pub fn read<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = reader.lines();
        let header: IndexHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?).map_err(|e| parse_err(1, e.to_string()))?,
            None => return Err(parse_err(1, "missing header".into())),
        };
        let mut entries = Vec::with_capacity(header.entries);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EntryRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
            let mi_code = HashCode::from_hex(&rec.code, header.bits).map_err(|e| parse_err(i + 2, e.to_string()))?;
            let si_codes = rec
                .instances
                .map(|cs| cs.iter().map(|c| HashCode::from_hex(c, header.bits)).collect::<Result<Vec<_>>>())
                .transpose()
                .map_err(|e| parse_err(i + 2, e.to_string()))?;
            entries.push(IndexedBag {
                id: rec.id,
                label: rec.label,
                mi_code,
                si_codes,
            });
        }
        if entries.len() != header.entries {
            return Err(parse_err(
                1,
                format!("header announces {} entries, found {}", header.entries, entries.len()),
            ));
        }
        let index = build_index(entries, header.mode)?;
        if !index.is_empty() && index.bits != header.bits {
            return Err(parse_err(1, "header K differs from stored codes".into()));
        }
        Ok(RetrievalIndex {
            bits: header.bits,
            ..index
        })
    }
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    #[serde(rename = "K")]
    bits: usize,
    mode: IndexMode,
    entries: usize,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    id: String,
    label: String,
    code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instances: Option<Vec<String>>,
}

/// Indices of the `k` smallest distances, ascending, ties by index.
fn top_k(distances: &[f64], k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).filter(|&i| Some(i) != skip).collect();
    let key = |&i: &usize| (distances[i], i);
    let cmp = |a: &usize, b: &usize| {
        let (da, ia) = key(a);
        let (db, ib) = key(b);
        da.total_cmp(&db).then(ia.cmp(&ib))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    order
}

/// Real-valued bag embeddings ranked by Euclidean distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub vectors: Matrix,
}

impl Embeddings {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn distances_to(&self, q: &[f64]) -> Vec<f64> {
        self.vectors
            .iter_rows()
            .map(|r| r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect()
    }
}

/// Interpolated precision is reported at recall `0.05, 0.10, …, 1.00`.
pub const RECALL_GRID: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyStats {
    pub mean_us: f64,
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl LatencyStats {
    fn from_samples(mut us: Vec<f64>) -> Self {
        if us.is_empty() {
            return LatencyStats {
                mean_us: 0.0,
                p50_us: 0.0,
                p90_us: 0.0,
                p99_us: 0.0,
                max_us: 0.0,
            };
        }
        us.sort_by(f64::total_cmp);
        let pct = |p: f64| us[((p * (us.len() - 1) as f64).round() as usize).min(us.len() - 1)];
        LatencyStats {
            mean_us: us.iter().sum::<f64>() / us.len() as f64,
            p50_us: pct(0.5),
            p90_us: pct(0.9),
            p99_us: pct(0.99),
            max_us: *us.last().unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub nnca: f64,
    /// `(recall, precision)` on the fixed recall grid.
    pub pr_points: Vec<(f64, f64)>,
    pub map: f64,
    pub queries: usize,
    /// Queries with no relevant database item; excluded from PR and mAP.
    pub skipped: usize,
    pub latency: LatencyStats,
}

impl EvalReport {
    pub fn write_pr_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["recall", "precision"])?;
        for (r, p) in &self.pr_points {
            out.write_record([format!("{r:.2}"), format!("{p:.6}")])?;
        }
        out.flush()?;
        Ok(())
    }
}

struct QueryOutcome {
    top1_correct: bool,
    /// Interpolated precision on the recall grid and average precision;
    /// `None` when nothing in the database is relevant.
    pr: Option<([f64; RECALL_GRID], f64)>,
}

fn score_ranking(ranking: &[usize], db_labels: &[&str], query_label: &str) -> QueryOutcome {
    let top1_correct = ranking.first().is_some_and(|&i| db_labels[i] == query_label);
    let relevant = ranking.iter().filter(|&&i| db_labels[i] == query_label).count();
    if relevant == 0 {
        return QueryOutcome { top1_correct, pr: None };
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    let mut curve = Vec::with_capacity(ranking.len());
    for (rank, &i) in ranking.iter().enumerate() {
        if db_labels[i] == query_label {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
        curve.push((hits as f64 / relevant as f64, hits as f64 / (rank + 1) as f64));
    }
    // running max from the tail gives interpolated precision
    let mut best = 0.0f64;
    let mut interp = vec![0.0; curve.len()];
    for (j, &(_, p)) in curve.iter().enumerate().rev() {
        best = best.max(p);
        interp[j] = best;
    }
    let mut grid = [0.0; RECALL_GRID];
    for (g, slot) in grid.iter_mut().enumerate() {
        let target = (g + 1) as f64 / RECALL_GRID as f64;
        let j = curve.partition_point(|&(r, _)| r < target - 1e-12);
        *slot = interp.get(j).copied().unwrap_or(0.0);
    }
    QueryOutcome {
        top1_correct,
        pr: Some((grid, ap / relevant as f64)),
    }
}

fn aggregate(outcomes: Vec<QueryOutcome>, latencies: Vec<f64>) -> Result<EvalReport> {
    if outcomes.is_empty() {
        return Err(Error::Empty("no queries to evaluate".into()));
    }
    let queries = outcomes.len();
    let correct = outcomes.iter().filter(|o| o.top1_correct).count();
    let scored: Vec<_> = outcomes.iter().filter_map(|o| o.pr.as_ref()).collect();
    let mut grid = [0.0; RECALL_GRID];
    let mut map = 0.0;
    for (g, ap) in &scored {
        for (acc, v) in grid.iter_mut().zip(g) {
            *acc += v;
        }
        map += ap;
    }
    let denom = scored.len().max(1) as f64;
    Ok(EvalReport {
        nnca: correct as f64 / queries as f64,
        pr_points: grid
            .iter()
            .enumerate()
            .map(|(g, p)| ((g + 1) as f64 / RECALL_GRID as f64, p / denom))
            .collect(),
        map: map / denom,
        queries,
        skipped: queries - scored.len(),
        latency: LatencyStats::from_samples(latencies),
    })
}

/// nnCA, PR and mAP of `queries` against `index`. A query whose id is in the
/// index is excluded from its own candidates.
pub fn evaluate(index: &RetrievalIndex, queries: &[IndexedBag]) -> Result<EvalReport> {
    if index.is_empty() {
        return Err(Error::Empty("index has no entries".into()));
    }
    let labels: Vec<&str> = index.entries.iter().map(|e| e.label.as_str()).collect();
    let mut outcomes = Vec::with_capacity(queries.len());
    let mut latencies = Vec::with_capacity(queries.len());
    for q in queries {
        let start = Instant::now();
        let distances = index.distances(q)?;
        let ranking = top_k(&distances, distances.len(), index.position(&q.id));
        latencies.push(start.elapsed().as_secs_f64() * 1e6);
        outcomes.push(score_ranking(&ranking, &labels, &q.label));
    }
    aggregate(outcomes, latencies)
}

/// Fraction of queries whose nearest database bag shares their label.
pub fn nnca(index: &RetrievalIndex, queries: &[IndexedBag]) -> Result<f64> {
    if index.is_empty() {
        return Err(Error::Empty("index has no entries".into()));
    }
    if queries.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for q in queries {
        let top = index.query_topk(q, 1, Some(&q.id))?;
        if top.first().is_some_and(|h| h.label == q.label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

/// Same metrics as [`evaluate`] for non-binarized embeddings under
/// Euclidean distance.
pub fn evaluate_embeddings(db: &Embeddings, queries: &Embeddings) -> Result<EvalReport> {
    if db.is_empty() {
        return Err(Error::Empty("database has no entries".into()));
    }
    if db.vectors.cols() != queries.vectors.cols() {
        return Err(Error::shape(
            "evaluate_embeddings",
            format!("{} vs {} dimensions", db.vectors.cols(), queries.vectors.cols()),
        ));
    }
    let labels: Vec<&str> = db.labels.iter().map(String::as_str).collect();
    let mut outcomes = Vec::with_capacity(queries.len());
    let mut latencies = Vec::with_capacity(queries.len());
    for (qi, q) in queries.vectors.iter_rows().enumerate() {
        let start = Instant::now();
        let distances = db.distances_to(q);
        let skip = db.ids.iter().position(|id| *id == queries.ids[qi]);
        let ranking = top_k(&distances, distances.len(), skip);
        latencies.push(start.elapsed().as_secs_f64() * 1e6);
        outcomes.push(score_ranking(&ranking, &labels, &queries.labels[qi]));
    }
    aggregate(outcomes, latencies)
}
