//! Bag-structured datasets.
//!
//! A bag is a variable-size set of instance feature vectors that carries a
//! single weak label. Nothing is known about which instances express the
//! label, which is what the synthetic generator reproduces: each bag holds at
//! least one witness drawn near its class concept and the rest is shared
//! background.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    pub label: String,
    /// One row per instance.
    pub instances: Matrix,
}

impl Bag {
    pub fn new(id: impl Into<String>, label: impl Into<String>, instances: Matrix) -> Result<Self> {
        let id = id.into();
        if instances.rows() == 0 {
            return Err(Error::Empty(format!("bag '{id}' has no instances")));
        }
        Ok(Bag {
            id,
            label: label.into(),
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.instances.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagDataset {
    dim: usize,
    num_classes: usize,
    bags: Vec<Bag>,
}

impl BagDataset {
    pub fn new(dim: usize, num_classes: usize, bags: Vec<Bag>) -> Result<Self> {
        for bag in &bags {
            if bag.dim() != dim {
                return Err(Error::shape(
                    "BagDataset::new",
                    format!("bag '{}' has dimension {}, expected {dim}", bag.id, bag.dim()),
                ));
            }
            if bag.is_empty() {
                return Err(Error::Empty(format!("bag '{}' has no instances", bag.id)));
            }
        }
        let ds = BagDataset {
            dim,
            num_classes,
            bags,
        };
        let present = ds.classes().len();
        if present > num_classes {
            return Err(Error::invalid(format!(
                "{present} distinct labels but only {num_classes} classes declared"
            )));
        }
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn num_instances(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    /// Distinct labels in sorted order; a label's position is its class id.
    pub fn classes(&self) -> Vec<String> {
        self.bags
            .iter()
            .map(|b| b.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.bags.iter().map(|b| b.label.as_str()).collect()
    }

    fn subset(&self, indices: &[usize]) -> BagDataset {
        BagDataset {
            dim: self.dim,
            num_classes: self.num_classes,
            bags: indices.iter().map(|&i| self.bags[i].clone()).collect(),
        }
    }
}

/// Binary pairwise similarity: `s_ij = 1` iff the labels match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityMatrix {
    n: usize,
    same: Vec<bool>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn similar(&self, i: usize, j: usize) -> bool {
        self.same[i * self.n + j]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.similar(i, j) {
            1.0
        } else {
            0.0
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.similar(i, j) as u8).collect())
            .collect()
    }
}

pub fn similarity_from_labels<T: PartialEq>(labels: &[T]) -> SimilarityMatrix {
    let n = labels.len();
    let mut same = Vec::with_capacity(n * n);
    for a in labels {
        for b in labels {
            same.push(a == b);
        }
    }
    SimilarityMatrix { n, same }
}

/// Similarity over the instances of `bags`, each instance inheriting its
/// bag's label. Instances are ordered bag by bag.
pub fn instance_similarity(bags: &[Bag]) -> SimilarityMatrix {
    let labels: Vec<&str> = bags
        .iter()
        .flat_map(|b| std::iter::repeat_n(b.label.as_str(), b.len()))
        .collect();
    similarity_from_labels(&labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub bags_per_class: usize,
    pub dim: usize,
    pub min_bag: usize,
    pub max_bag: usize,
    /// Fraction of each bag's instances that are witnesses (at least one).
    pub witness_rate: f64,
    /// Standard deviation of the shared background distribution.
    pub background_spread: f64,
    /// Norm of each class concept mean.
    pub concept_scale: f64,
    /// Standard deviation of witnesses around their concept mean.
    pub witness_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            bags_per_class: 50,
            dim: 16,
            min_bag: 2,
            max_bag: 6,
            witness_rate: 0.5,
            background_spread: 1.0,
            concept_scale: 4.0,
            witness_noise: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dim < 2 {
            return Err(Error::invalid(format!("need dimension >= 2, got {}", self.dim)));
        }
        if self.bags_per_class == 0 {
            return Err(Error::invalid("bags_per_class must be positive"));
        }
        if self.min_bag == 0 || self.max_bag < self.min_bag {
            return Err(Error::invalid(format!(
                "bag size range [{}, {}] is invalid",
                self.min_bag, self.max_bag
            )));
        }
        if !(0.0..=1.0).contains(&self.witness_rate) {
            return Err(Error::invalid(format!("witness_rate {} outside [0,1]", self.witness_rate)));
        }
        for (name, v) in [
            ("background_spread", self.background_spread),
            ("concept_scale", self.concept_scale),
            ("witness_noise", self.witness_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn class_name(c: usize) -> String {
    format!("class-{c:02}")
}

pub fn generate_synthetic(rng: &mut Rng, spec: &SyntheticSpec) -> Result<BagDataset> {
    spec.validate()?;
    let d = spec.dim;

    let concepts: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * spec.concept_scale / norm).collect()
        })
        .collect();

    let mut bags = Vec::with_capacity(spec.classes * spec.bags_per_class);
    for (c, concept) in concepts.iter().enumerate() {
        for _ in 0..spec.bags_per_class {
            let n = rng.range_inclusive(spec.min_bag, spec.max_bag);
            let witnesses = ((spec.witness_rate * n as f64).round() as usize).clamp(1, n);
            let mut is_witness: Vec<bool> = (0..n).map(|j| j < witnesses).collect();
            rng.shuffle(&mut is_witness);

            let mut data = Vec::with_capacity(n * d);
            for &w in &is_witness {
                if w {
                    data.extend(concept.iter().map(|m| m + spec.witness_noise * rng.normal()));
                } else {
                    data.extend((0..d).map(|_| spec.background_spread * rng.normal()));
                }
            }
            let instances = Matrix::from_vec(n, d, data)?;
            bags.push((class_name(c), instances));
        }
    }
    rng.shuffle(&mut bags);

    let bags = bags
        .into_iter()
        .enumerate()
        .map(|(i, (label, inst))| Bag::new(format!("bag-{i:05}"), label, inst))
        .collect::<Result<Vec<_>>>()?;
    BagDataset::new(d, spec.classes, bags)
}

/// Relabels `⌊rate·N⌋` bags, chosen without replacement, with a uniformly
/// drawn label different from the current one.
pub fn inject_label_noise(ds: &BagDataset, rng: &mut Rng, rate: f64) -> Result<BagDataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("noise rate {rate} outside [0,1]")));
    }
    let n = ds.len();
    let flips = ((rate * n as f64) + 1e-9).floor() as usize;
    let flips = flips.min(n);
    let mut out = ds.clone();
    if flips == 0 {
        return Ok(out);
    }
    let classes = ds.classes();
    if classes.len() < 2 {
        return Err(Error::invalid("label noise needs at least two classes"));
    }
    for idx in rng.sample_indices(n, flips) {
        let bag = &mut out.bags[idx];
        let others: Vec<&String> = classes.iter().filter(|c| **c != bag.label).collect();
        bag.label = others[rng.below(others.len())].clone();
    }
    Ok(out)
}

/// Stratified split into disjoint train/test partitions.
pub fn split(ds: &BagDataset, rng: &mut Rng, train_fraction: f64) -> Result<(BagDataset, BagDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_fraction} outside (0,1)")));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, bag) in ds.bags.iter().enumerate() {
        by_class.entry(bag.label.as_str()).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, mut members) in by_class {
        if members.len() < 2 {
            return Err(Error::invalid(format!(
                "class '{label}' has {} bag(s); stratified split needs at least 2",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let n_train = ((train_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    classes: usize,
}

#[derive(Serialize)]
struct BagRecordOut<'a> {
    id: &'a str,
    label: &'a str,
    instances: Vec<&'a [f64]>,
}

#[derive(Deserialize)]
struct BagRecordIn {
    id: String,
    label: String,
    instances: Vec<Vec<f64>>,
}

pub fn write_bags<W: Write>(ds: &BagDataset, mut w: W) -> Result<()> {
    serde_json::to_writer(
        &mut w,
        &Header {
            dim: ds.dim,
            classes: ds.num_classes,
        },
    )?;
    w.write_all(b"\n")?;
    for bag in &ds.bags {
        let rec = BagRecordOut {
            id: &bag.id,
            label: &bag.label,
            instances: bag.instances.iter_rows().collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_bags(ds: &BagDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    write_bags(ds, BufWriter::new(file))
}

pub fn read_bags<R: BufRead>(reader: R, path: &Path) -> Result<BagDataset> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut header: Option<Header> = None;
    let mut bags = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(h) = &header else {
            let h: Header = serde_json::from_str(&line)
                .map_err(|e| parse_err(lineno, format!("bad header: {e}")))?;
            header = Some(h);
            continue;
        };
        let rec: BagRecordIn =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, format!("bad bag record: {e}")))?;
        if rec.instances.is_empty() {
            return Err(parse_err(lineno, format!("bag '{}' has no instances", rec.id)));
        }
        for (j, inst) in rec.instances.iter().enumerate() {
            if inst.len() != h.dim {
                return Err(parse_err(
                    lineno,
                    format!(
                        "bag '{}': instance {j} has dimension {}, expected {}",
                        rec.id,
                        inst.len(),
                        h.dim
                    ),
                ));
            }
        }
        if !seen_ids.insert(rec.id.clone()) {
            return Err(parse_err(lineno, format!("duplicate bag id '{}'", rec.id)));
        }
        let instances = Matrix::from_rows(&rec.instances)
            .map_err(|e| parse_err(lineno, format!("bag '{}': {e}", rec.id)))?;
        bags.push(Bag::new(rec.id, rec.label, instances)?);
    }
    let Some(h) = header else {
        return Err(Error::Empty(format!("{}: no bags", path.display())));
    };
    if bags.is_empty() {
        return Err(Error::Empty(format!("{}: no bags", path.display())));
    }
    BagDataset::new(h.dim, h.classes, bags)
}

pub fn load_bags(path: impl AsRef<Path>) -> Result<BagDataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_bags(BufReader::new(file), path)
}
