//! Label/document pair datasets.
//!
//! A multi-label corpus is turned into `({label, document}, bool)` instances:
//! the `balanced` configuration adds one sampled negative per positive, the
//! `siblings` configuration adds hierarchy siblings as hard negatives and
//! ancestors as extra positives. A zero-shot split holds descriptors out of
//! training entirely.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{self, HierarchyGraph};
use crate::text::{self, CLS, COLON, SEP};
use crate::thesaurus::{target_sequence, Thesaurus};

#[derive(Debug, Error)]
pub enum PairsError {
    #[error("empty term")]
    EmptyTerm,
    #[error("token budget {0} is below the minimum of 8")]
    BudgetTooSmall(usize),
    #[error("asked to hold out {requested} of {available} labels")]
    NotEnoughLabels { requested: usize, available: usize },
    #[error("document {0:?} is annotated with every candidate label")]
    CannotSampleNegative(String),
    #[error("unknown descriptor {0:?}")]
    UnknownDescriptor(String),
    #[error("duplicate document id {0:?} (line {1})")]
    DuplicateDocument(String, usize),
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error(transparent)]
    Thesaurus(#[from] crate::thesaurus::ThesaurusError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub abstract_text: String,
    pub labels: BTreeSet<String>,
}

/// Documents in file order.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self, PairsError> {
        let mut index = HashMap::new();
        for (i, d) in docs.iter().enumerate() {
            if index.insert(d.doc_id.clone(), i).is_some() {
                return Err(PairsError::DuplicateDocument(d.doc_id.clone(), i + 1));
            }
        }
        Ok(Corpus { docs, index })
    }

    /// Reads `doc_id<TAB>abstract<TAB>l1;l2;...`.
    pub fn load<R: BufRead>(reader: R) -> Result<Self, PairsError> {
        let mut docs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(PairsError::MalformedLine {
                    line: i + 1,
                    reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            if fields[0].trim().is_empty() {
                return Err(PairsError::MalformedLine {
                    line: i + 1,
                    reason: "empty doc id".into(),
                });
            }
            docs.push(Document {
                doc_id: fields[0].trim().to_string(),
                abstract_text: fields[1].to_string(),
                labels: fields[2]
                    .split(';')
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect(),
            });
        }
        Corpus::new(docs)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for d in &self.docs {
            let labels: Vec<&str> = d.labels.iter().map(String::as_str).collect();
            writeln!(w, "{}\t{}\t{}", d.doc_id, d.abstract_text, labels.join(";"))?;
        }
        Ok(())
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.index.get(doc_id).map(|&i| &self.docs[i])
    }

    /// Distinct labels used anywhere in the corpus.
    pub fn label_set(&self) -> BTreeSet<String> {
        self.docs.iter().flat_map(|d| d.labels.iter().cloned()).collect()
    }

    /// Number of documents carrying each label.
    pub fn label_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for d in &self.docs {
            for l in &d.labels {
                *counts.entry(l.clone()).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// Token sequence `[CLS] term : description [SEP] abstract` with per-position
/// marks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledInput {
    pub tokens: Vec<String>,
    /// True on the description tokens (between `:` and `[SEP]`).
    pub desc_mask: Vec<bool>,
    /// 0 up to and including `[SEP]`, 1 on the abstract.
    pub segments: Vec<u8>,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Builds the classifier input, keeping at most `budget` tokens from the front.
pub fn assemble_input(
    term: &str,
    description: &str,
    abstract_text: &str,
    budget: usize,
) -> Result<AssembledInput, PairsError> {
    if budget < 8 {
        return Err(PairsError::BudgetTooSmall(budget));
    }
    let term_words: Vec<&str> = text::words(term).collect();
    if term_words.is_empty() {
        return Err(PairsError::EmptyTerm);
    }
    let mut tokens = Vec::new();
    let mut desc_mask = Vec::new();
    let mut segments = Vec::new();
    let mut push = |tok: &str, desc: bool, seg: u8| {
        tokens.push(tok.to_string());
        desc_mask.push(desc);
        segments.push(seg);
    };
    push(CLS, false, 0);
    for w in term_words {
        push(w, false, 0);
    }
    push(COLON, false, 0);
    for w in text::words(description) {
        push(w, true, 0);
    }
    push(SEP, false, 0);
    for w in text::words(abstract_text) {
        push(w, false, 1);
    }
    tokens.truncate(budget);
    desc_mask.truncate(budget);
    segments.truncate(budget);
    Ok(AssembledInput {
        tokens,
        desc_mask,
        segments,
    })
}

/// Zero-shot split: held-out descriptors plus a 70/10/20 document partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub holdout_terms: BTreeSet<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub const TRAIN_FRACTION: f64 = 0.7;
pub const VAL_FRACTION: f64 = 0.1;

impl SplitSpec {
    pub fn docs(&self, partition: Partition) -> &[String] {
        match partition {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn is_held_out(&self, id: &str) -> bool {
        self.holdout_terms.contains(id)
    }
}

/// Picks `n_holdout` descriptors among those used in the corpus (stratified
/// by the branch letter of their first Tree Number when a thesaurus is given)
/// and partitions the documents.
pub fn split_zero_shot(
    corpus: &Corpus,
    thesaurus: Option<&Thesaurus>,
    n_holdout: usize,
    seed: u64,
) -> Result<SplitSpec, PairsError> {
    let labels: Vec<String> = corpus.label_set().into_iter().collect();
    if n_holdout >= labels.len() && n_holdout > 0 {
        return Err(PairsError::NotEnoughLabels {
            requested: n_holdout,
            available: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut strata: BTreeMap<char, Vec<String>> = BTreeMap::new();
    for l in &labels {
        let branch = thesaurus
            .and_then(|th| th.get(l))
            .and_then(|d| d.tree_numbers.first())
            .map(|t| t.branch())
            .unwrap_or('?');
        strata.entry(branch).or_default().push(l.clone());
    }
    // largest-remainder allocation of the holdout budget across strata
    let total = labels.len() as f64;
    let mut quotas: Vec<(char, usize, f64)> = strata
        .iter()
        .map(|(&b, members)| {
            let exact = n_holdout as f64 * members.len() as f64 / total;
            (b, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut remaining = n_holdout - quotas.iter().map(|q| q.1).sum::<usize>();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for i in order {
        if remaining == 0 {
            break;
        }
        if quotas[i].1 < strata[&quotas[i].0].len() {
            quotas[i].1 += 1;
            remaining -= 1;
        }
    }
    let mut holdout_terms = BTreeSet::new();
    for (branch, quota, _) in quotas {
        let mut members = strata[&branch].clone();
        members.shuffle(&mut rng);
        holdout_terms.extend(members.into_iter().take(quota));
    }

    let mut docs: Vec<String> = corpus.docs().iter().map(|d| d.doc_id.clone()).collect();
    docs.shuffle(&mut rng);
    let n = docs.len();
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let n_val = ((n as f64 * VAL_FRACTION).round() as usize).min(n - n_train);
    let test = docs.split_off(n_train + n_val);
    let val = docs.split_off(n_train);
    Ok(SplitSpec {
        seed,
        holdout_terms,
        train: docs,
        val,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// Which descriptors a generated set may mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelView {
    /// Everything except the held-out descriptors.
    Seen,
    /// Held-out descriptors only.
    ZeroShot,
    /// Seen and held-out descriptors together (generalized zero-shot).
    All,
}

impl LabelView {
    fn admits(self, split: &SplitSpec, id: &str) -> bool {
        match self {
            LabelView::Seen => !split.is_held_out(id),
            LabelView::ZeroShot => split.is_held_out(id),
            LabelView::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Configuration {
    Balanced,
    Siblings,
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Configuration::Balanced => "balanced",
            Configuration::Siblings => "siblings",
        })
    }
}

impl FromStr for Configuration {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "balanced" => Ok(Configuration::Balanced),
            "siblings" => Ok(Configuration::Siblings),
            _ => Err(format!("unknown configuration {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    Annotated,
    SampledNegative,
    AncestorPositive,
    SiblingNegative,
}

impl Origin {
    pub fn is_positive(self) -> bool {
        matches!(self, Origin::Annotated | Origin::AncestorPositive)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Annotated => "annotated",
            Origin::SampledNegative => "sampled-negative",
            Origin::AncestorPositive => "ancestor-positive",
            Origin::SiblingNegative => "sibling-negative",
        }
    }
}

impl FromStr for Origin {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "annotated" => Origin::Annotated,
            "sampled-negative" => Origin::SampledNegative,
            "ancestor-positive" => Origin::AncestorPositive,
            "sibling-negative" => Origin::SiblingNegative,
            _ => return Err(format!("unknown origin {s:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pair {
    pub descriptor: String,
    pub doc_id: String,
    pub positive: bool,
    pub origin: Origin,
}

impl Pair {
    fn new(descriptor: &str, doc_id: &str, origin: Origin) -> Self {
        Pair {
            descriptor: descriptor.to_string(),
            doc_id: doc_id.to_string(),
            positive: origin.is_positive(),
            origin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub configuration: Configuration,
    pub partition: Partition,
    pub view: LabelView,
    pub split_seed: u64,
    pub pairs: Vec<Pair>,
}

impl PairSet {
    /// Line format `descriptor_id<TAB>doc_id<TAB>{0|1}<TAB>origin`.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_pairs(&self.pairs, &mut w)
    }

    pub fn positives(&self) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(|p| p.positive)
    }
}

pub fn write_pairs<W: Write>(pairs: &[Pair], mut w: W) -> std::io::Result<()> {
    for p in pairs {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            p.descriptor,
            p.doc_id,
            u8::from(p.positive),
            p.origin.as_str()
        )?;
    }
    Ok(())
}

pub fn read_pairs<R: BufRead>(reader: R) -> Result<Vec<Pair>, PairsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| PairsError::MalformedLine { line: i + 1, reason };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", f.len())));
        }
        let positive = match f[2] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("bad polarity {other:?}"))),
        };
        let origin: Origin = f[3].parse().map_err(bad)?;
        if origin.is_positive() != positive {
            return Err(bad("origin contradicts polarity".into()));
        }
        out.push(Pair {
            descriptor: f[0].to_string(),
            doc_id: f[1].to_string(),
            positive,
            origin,
        });
    }
    Ok(out)
}

fn doc_rng(seed: u64, doc_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ text::stable_hash(doc_id))
}

/// Negative-label sampler for one generated set.
///
/// Weights start at the positive label frequencies and are rescaled until the
/// expected number of times each label is drawn as a negative, after removing
/// every document's own labels, equals its number of positives.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    labels: Vec<String>,
    weights: Vec<f64>,
    index: HashMap<String, usize>,
    table: Option<WeightedIndex<f64>>,
}

const CALIBRATION_ROUNDS: usize = 200;

impl NegativeSampler {
    /// `universe` lists candidate labels; `docs` gives, per document, its
    /// positive count and the labels it must never receive as negatives.
    pub fn calibrated(universe: &BTreeSet<String>, docs: &[(usize, &BTreeSet<String>)], positives: &BTreeMap<String, usize>) -> Self {
        let labels: Vec<String> = universe.iter().cloned().collect();
        let index: HashMap<String, usize> = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        let target: Vec<f64> = labels
            .iter()
            .map(|l| positives.get(l).copied().unwrap_or(0) as f64)
            .collect();
        let mut weights = target.clone();
        let excluded: Vec<(f64, Vec<usize>)> = docs
            .iter()
            .filter(|(n, _)| *n > 0)
            .map(|(n, ex)| (*n as f64, ex.iter().filter_map(|l| index.get(l).copied()).collect()))
            .collect();
        for _ in 0..CALIBRATION_ROUNDS {
            let expected = Self::expected_with(&weights, &excluded);
            let mut worst: f64 = 0.0;
            for i in 0..weights.len() {
                if target[i] > 0.0 && expected[i] > 0.0 {
                    let ratio = target[i] / expected[i];
                    worst = worst.max((ratio - 1.0).abs());
                    weights[i] *= ratio;
                }
            }
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                weights.iter_mut().for_each(|w| *w /= total);
            }
            if worst < 1e-12 {
                break;
            }
        }
        let table = WeightedIndex::new(&weights).ok();
        NegativeSampler {
            labels,
            weights,
            index,
            table,
        }
    }

    fn expected_with(weights: &[f64], docs: &[(f64, Vec<usize>)]) -> Vec<f64> {
        let total: f64 = weights.iter().sum();
        let mut shared = 0.0;
        let mut minus = vec![0.0; weights.len()];
        for (n, ex) in docs {
            let z = total - ex.iter().map(|&i| weights[i]).sum::<f64>();
            if z <= 0.0 {
                continue;
            }
            shared += n / z;
            for &i in ex {
                minus[i] += n / z;
            }
        }
        weights.iter().zip(&minus).map(|(w, m)| w * (shared - m)).collect()
    }

    /// Expected negative draws per label for the given documents.
    pub fn expected_counts(&self, docs: &[(usize, &BTreeSet<String>)]) -> BTreeMap<String, f64> {
        let excluded: Vec<(f64, Vec<usize>)> = docs
            .iter()
            .map(|(n, ex)| (*n as f64, ex.iter().filter_map(|l| self.index.get(l).copied()).collect()))
            .collect();
        let e = Self::expected_with(&self.weights, &excluded);
        self.labels.iter().cloned().zip(e).collect()
    }

    pub fn weight(&self, label: &str) -> f64 {
        self.index.get(label).map(|&i| self.weights[i]).unwrap_or(0.0)
    }

    /// One label outside `exclude`; `None` when every candidate is excluded.
    pub fn draw<R: Rng>(&self, rng: &mut R, exclude: &BTreeSet<String>) -> Option<&str> {
        if let Some(table) = &self.table {
            for _ in 0..64 {
                let l = &self.labels[table.sample(rng)];
                if !exclude.contains(l) {
                    return Some(l);
                }
            }
        }
        let allowed: Vec<usize> = (0..self.labels.len())
            .filter(|&i| !exclude.contains(&self.labels[i]))
            .collect();
        if allowed.is_empty() {
            return None;
        }
        let w: Vec<f64> = allowed.iter().map(|&i| self.weights[i]).collect();
        let pick = match WeightedIndex::new(&w) {
            Ok(t) => allowed[t.sample(rng)],
            // no weight left outside the exclusions: fall back to uniform
            Err(_) => allowed[rng.random_range(0..allowed.len())],
        };
        Some(&self.labels[pick])
    }
}

/// Documents of a partition with their positive labels under `view`.
fn view_positives<'a>(
    corpus: &'a Corpus,
    split: &SplitSpec,
    partition: Partition,
    view: LabelView,
) -> Vec<(&'a Document, Vec<&'a String>)> {
    split
        .docs(partition)
        .iter()
        .filter_map(|id| corpus.get(id))
        .map(|d| {
            let pos = d.labels.iter().filter(|l| view.admits(split, l)).collect();
            (d, pos)
        })
        .collect()
}

/// The `balanced` configuration: one sampled negative per positive.
///
/// `universe` lists candidate negative labels (the corpus label set when
/// `None`); it is filtered through `view` like the positives.
pub fn gen_balanced(
    corpus: &Corpus,
    split: &SplitSpec,
    partition: Partition,
    view: LabelView,
    universe: Option<&BTreeSet<String>>,
    seed: u64,
) -> Result<PairSet, PairsError> {
    let docs = view_positives(corpus, split, partition, view);
    let base = universe.cloned().unwrap_or_else(|| corpus.label_set());
    let candidates: BTreeSet<String> = base.into_iter().filter(|l| view.admits(split, l)).collect();
    let mut positives: BTreeMap<String, usize> = BTreeMap::new();
    for (_, pos) in &docs {
        for l in pos {
            *positives.entry((*l).clone()).or_insert(0) += 1;
        }
    }
    let weights_input: Vec<(usize, &BTreeSet<String>)> = docs.iter().map(|(d, p)| (p.len(), &d.labels)).collect();
    let sampler = NegativeSampler::calibrated(&candidates, &weights_input, &positives);

    let mut pairs = Vec::new();
    for (d, pos) in &docs {
        let mut rng = doc_rng(seed, &d.doc_id);
        for l in pos {
            pairs.push(Pair::new(l, &d.doc_id, Origin::Annotated));
        }
        for _ in 0..pos.len() {
            let neg = sampler
                .draw(&mut rng, &d.labels)
                .ok_or_else(|| PairsError::CannotSampleNegative(d.doc_id.clone()))?;
            pairs.push(Pair::new(neg, &d.doc_id, Origin::SampledNegative));
        }
    }
    Ok(PairSet {
        configuration: Configuration::Balanced,
        partition,
        view,
        split_seed: split.seed,
        pairs,
    })
}

/// Annotated label left out of a `siblings` set because the filtered
/// hierarchy does not contain it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedLabel {
    pub doc_id: String,
    pub descriptor: String,
}

/// The `siblings` configuration: annotated positives, ancestor positives and
/// sibling negatives; positives win conflicts.
pub fn gen_siblings(
    corpus: &Corpus,
    split: &SplitSpec,
    partition: Partition,
    view: LabelView,
    th: &Thesaurus,
    g: &HierarchyGraph,
) -> Result<(PairSet, Vec<SkippedLabel>), PairsError> {
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    let mut sib_cache: HashMap<&str, BTreeSet<String>> = HashMap::new();
    let mut anc_cache: HashMap<&str, BTreeSet<String>> = HashMap::new();
    for (d, pos) in view_positives(corpus, split, partition, view) {
        let mut chosen: BTreeMap<String, Origin> = BTreeMap::new();
        let mut annotated = Vec::new();
        for l in pos {
            if !g.contains_descriptor(l) {
                skipped.push(SkippedLabel {
                    doc_id: d.doc_id.clone(),
                    descriptor: l.clone(),
                });
                continue;
            }
            chosen.insert(l.clone(), Origin::Annotated);
            annotated.push(l.as_str());
        }
        for &l in &annotated {
            let anc = anc_cache
                .entry(l)
                .or_insert_with(|| hierarchy::ancestors(th, g, l).expect("label in graph"));
            for a in anc.iter().filter(|a| view.admits(split, a)) {
                chosen.entry(a.clone()).or_insert(Origin::AncestorPositive);
            }
        }
        for &l in &annotated {
            let sib = sib_cache
                .entry(l)
                .or_insert_with(|| hierarchy::siblings(th, g, l).expect("label in graph"));
            for s in sib.iter().filter(|s| view.admits(split, s)) {
                if !d.labels.contains(s) {
                    chosen.entry(s.clone()).or_insert(Origin::SiblingNegative);
                }
            }
        }
        pairs.extend(chosen.into_iter().map(|(l, o)| Pair::new(&l, &d.doc_id, o)));
    }
    Ok((
        PairSet {
            configuration: Configuration::Siblings,
            partition,
            view,
            split_seed: split.seed,
            pairs,
        },
        skipped,
    ))
}

/// One decoder target per Tree Number of the descriptor.
pub fn decoder_targets(th: &Thesaurus, id: &str) -> Result<Vec<Vec<u32>>, PairsError> {
    let d = th
        .get(id)
        .ok_or_else(|| PairsError::UnknownDescriptor(id.to_string()))?;
    Ok(d.tree_numbers.iter().map(target_sequence).collect())
}
