//! Seeded synthetic fixtures: a small thesaurus, a separable corpus,
//! planted-metric and Gaussian label embeddings, and a short multi-label
//! corpus for the keyword baseline.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed_io::{EmbedError, EmbeddingTable, PoolingTag};
use crate::pairs::{Corpus, Document, PairsError};
use crate::thesaurus::{Descriptor, Thesaurus, ThesaurusError, TreeNumber};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub descriptors: usize,
    /// Deepest Tree Number, in segments.
    pub max_depth: usize,
    pub branches: String,
    /// Top-level positions per branch.
    pub roots_per_branch: usize,
    /// Share of descriptors given a second Tree Number.
    pub multi_position_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            descriptors: 100,
            max_depth: 4,
            branches: "CD".into(),
            roots_per_branch: 3,
            multi_position_fraction: 0.1,
            seed: 0,
        }
    }
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

/// Distinct pronounceable pseudo-words.
struct Lexicon {
    used: BTreeSet<String>,
}

impl Lexicon {
    fn new() -> Self {
        Lexicon { used: BTreeSet::new() }
    }

    fn word<R: Rng>(&mut self, rng: &mut R, syllables: usize) -> String {
        loop {
            let w: String = (0..syllables)
                .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn capitalise(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Random recursive tree over Tree Numbers: each new position attaches to a
/// uniformly chosen existing position above the depth cap.
pub fn synthetic_thesaurus(cfg: &SynthConfig) -> Result<Thesaurus, ThesaurusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let branches: Vec<char> = cfg.branches.chars().collect();
    assert!(!branches.is_empty() && cfg.max_depth >= 1 && cfg.roots_per_branch >= 1);
    let mut positions: Vec<TreeNumber> = Vec::new();
    let mut children: BTreeMap<String, usize> = BTreeMap::new();
    'roots: for r in 1..=cfg.roots_per_branch {
        for &b in &branches {
            if positions.len() == cfg.descriptors {
                break 'roots;
            }
            positions.push(TreeNumber::parse(&format!("{b}{r:02}"))?);
        }
    }
    while positions.len() < cfg.descriptors {
        let open: Vec<&TreeNumber> = positions.iter().filter(|t| t.depth() < cfg.max_depth).collect();
        let parent = (*open.choose(&mut rng).expect("depth cap leaves room")).clone();
        let n = children.entry(parent.to_string()).or_insert(0);
        *n += 1;
        positions.push(TreeNumber::parse(&format!("{parent}.{:03}", *n))?);
    }

    let mut lex = Lexicon::new();
    let labels: Vec<String> = positions.iter().map(|_| lex.word(&mut rng, 3)).collect();
    let by_position: BTreeMap<String, usize> = positions.iter().enumerate().map(|(i, t)| (t.to_string(), i)).collect();
    let mut descriptors: Vec<Descriptor> = positions
        .iter()
        .enumerate()
        .map(|(i, tn)| {
            let cues = [lex.word(&mut rng, 2), lex.word(&mut rng, 2)];
            let description = match by_position.get(&tn.parent_key()) {
                Some(&p) if tn.depth() > 1 => format!("a kind of {} marked by {} and {}", labels[p], cues[0], cues[1]),
                _ => format!("a top level group marked by {} and {}", cues[0], cues[1]),
            };
            Descriptor {
                id: format!("D{:06}", i + 1),
                label: capitalise(&labels[i]),
                description,
                tree_numbers: vec![tn.clone()],
            }
        })
        .collect();

    // second positions: a fresh child under some other shallow position
    let extra = (cfg.descriptors as f64 * cfg.multi_position_fraction).round() as usize;
    let mut order: Vec<usize> = (0..descriptors.len()).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(extra) {
        let candidates: Vec<&TreeNumber> = positions
            .iter()
            .filter(|t| {
                let own = descriptors[i].tree_numbers[0].to_string();
                let t = t.to_string();
                t.split('.').count() < cfg.max_depth && !own.starts_with(&t) && !t.starts_with(&own)
            })
            .collect();
        let Some(parent) = candidates.choose(&mut rng).map(|t| (*t).clone()) else {
            continue;
        };
        let n = children.entry(parent.to_string()).or_insert(0);
        *n += 1;
        descriptors[i].tree_numbers.push(TreeNumber::parse(&format!("{parent}.{:03}", *n))?);
    }
    Thesaurus::from_descriptors(descriptors)
}

/// First description words after "marked by": the descriptor's cue words.
pub fn cue_words(d: &Descriptor) -> Vec<String> {
    crate::text::words(&d.description)
        .collect::<Vec<_>>()
        .rsplit(|w| *w == "by")
        .next()
        .unwrap_or_default()
        .iter()
        .filter(|w| **w != "and")
        .map(|w| w.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub docs: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    /// Filler words per abstract.
    pub filler: usize,
    /// Zipf exponent of label popularity; 0 is uniform.
    pub zipf: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            docs: 400,
            min_labels: 1,
            max_labels: 3,
            filler: 12,
            zipf: 0.5,
            seed: 0,
        }
    }
}

/// Documents whose abstracts contain each annotated label's name and one of
/// its cue words among shared filler, so annotation is a function of the text.
pub fn separable_corpus(th: &Thesaurus, cfg: &CorpusConfig) -> Result<Corpus, PairsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lex = Lexicon::new();
    for d in th.descriptors() {
        lex.used.insert(d.label.to_lowercase());
        lex.used.extend(cue_words(d));
    }
    let filler: Vec<String> = (0..60).map(|_| lex.word(&mut rng, 2)).collect();
    let ids: Vec<&Descriptor> = th.descriptors().collect();
    let mut ranks: Vec<usize> = (0..ids.len()).collect();
    ranks.shuffle(&mut rng);
    let weights: Vec<f64> = ranks.iter().map(|&r| 1.0 / ((r + 1) as f64).powf(cfg.zipf)).collect();
    let dist = rand::distr::weighted::WeightedIndex::new(&weights).expect("positive weights");
    let mut docs = Vec::with_capacity(cfg.docs);
    for k in 0..cfg.docs {
        let n = rng.random_range(cfg.min_labels..=cfg.max_labels);
        let mut labels = BTreeSet::new();
        while labels.len() < n.min(ids.len()) {
            labels.insert(dist.sample(&mut rng));
        }
        let mut words: Vec<String> = (0..cfg.filler).map(|_| filler.choose(&mut rng).unwrap().clone()).collect();
        for &l in &labels {
            let d = ids[l];
            words.push(d.label.to_lowercase());
            words.push(cue_words(d).choose(&mut rng).cloned().unwrap_or_default());
        }
        words.shuffle(&mut rng);
        docs.push(Document {
            doc_id: format!("doc{k:05}"),
            abstract_text: words.join(" "),
            labels: labels.iter().map(|&l| ids[l].id.clone()).collect(),
        });
    }
    Corpus::new(docs)
}

/// Root-path edge indicators. Every position gets one coordinate for the edge
/// to its parent; top-level positions hang off a virtual global root. For a
/// single-position descriptor the squared Euclidean distance between two
/// vectors equals their tree distance.
pub fn planted_embeddings(th: &Thesaurus) -> Result<EmbeddingTable, EmbedError> {
    let mut positions: BTreeSet<String> = BTreeSet::new();
    for d in th.descriptors() {
        for tn in &d.tree_numbers {
            for depth in 1..=tn.depth() {
                positions.insert(tn.prefix(depth).to_string());
            }
        }
    }
    let index: BTreeMap<&str, usize> = positions.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let mut table = EmbeddingTable::new(positions.len(), PoolingTag::FirstPosition);
    for d in th.descriptors() {
        let tn = &d.tree_numbers[0];
        let mut v = vec![0.0f32; positions.len()];
        for depth in 1..=tn.depth() {
            v[index[tn.prefix(depth).to_string().as_str()]] = 1.0;
        }
        table.insert(&d.id, v)?;
    }
    Ok(table)
}

/// Standard-normal vectors of the given width.
pub fn gaussian_embeddings(th: &Thesaurus, dim: usize, seed: u64) -> Result<EmbeddingTable, EmbedError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = EmbeddingTable::new(dim, PoolingTag::FirstPosition);
    for d in th.descriptors() {
        let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        table.insert(&d.id, v)?;
    }
    Ok(table)
}

/// Topic labels of a COVID-literature style corpus and the phrasings used
/// for each. The first phrase is the label itself.
const TOPICS: &[(&str, &[&str])] = &[
    ("Treatment", &["treatment", "therapy with", "drug candidates for", "clinical management of"]),
    ("Diagnosis", &["diagnosis", "detection assays for", "screening of", "testing accuracy in"]),
    ("Prevention", &["prevention", "masks and distancing against", "vaccination campaigns for", "public health control of"]),
    ("Mechanism", &["mechanism", "viral entry pathways in", "host receptor binding in", "immune response during"]),
    ("Transmission", &["transmission", "spread among", "household contacts in", "airborne routes of"]),
    ("Case Report", &["case report", "a single patient with", "an unusual presentation of", "a clinical vignette of"]),
    ("Forecasting", &["forecasting", "projected incidence of", "model based predictions of", "future trajectories of"]),
    ("General", &["general", "an overview of", "commentary on", "perspectives about"]),
];

const SUBJECTS: &[&str] = &["covid", "sars cov 2 infection", "the pandemic", "coronavirus disease", "viral pneumonia"];
const FILLER: &[&str] = &[
    "we analysed data from several hospitals",
    "results were consistent across cohorts",
    "further studies are needed",
    "the findings have implications for policy",
    "a retrospective design was used",
    "patients were followed for 30 days",
    "outcomes improved over time",
    "limitations include small sample size",
    "in general the evidence remains limited",
];

/// Fifty-document multi-label corpus plus a thesaurus of its eight topics.
/// Positive abstracts name their topic literally in about a third of cases
/// and otherwise paraphrase it; filler sentences occasionally contain a
/// topic word by accident.
pub fn litcovid_fixture(seed: u64) -> Result<(Thesaurus, Corpus), PairsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let descriptors: Vec<Descriptor> = TOPICS
        .iter()
        .enumerate()
        .map(|(i, (label, phrases))| Descriptor {
            id: format!("T{:02}", i + 1),
            label: label.to_string(),
            description: format!("articles about {}", phrases[1]),
            tree_numbers: vec![TreeNumber::parse(&format!("L01.{:03}", i + 1)).expect("valid")],
        })
        .collect();
    let th = Thesaurus::from_descriptors(descriptors)?;
    let mut docs = Vec::new();
    for k in 0..50 {
        let n = if rng.random_bool(0.4) { 2 } else { 1 };
        let mut labels = BTreeSet::new();
        while labels.len() < n {
            labels.insert(rng.random_range(0..TOPICS.len()));
        }
        let mut sentences: Vec<String> = Vec::new();
        for &t in &labels {
            let phrases = TOPICS[t].1;
            let phrase = if rng.random_bool(0.35) {
                phrases[0]
            } else {
                phrases[1 + rng.random_range(0..phrases.len() - 1)]
            };
            let subject = SUBJECTS.choose(&mut rng).unwrap();
            sentences.push(format!("this study reports {phrase} {subject}"));
        }
        for _ in 0..2 {
            sentences.push(FILLER.choose(&mut rng).unwrap().to_string());
        }
        sentences.shuffle(&mut rng);
        docs.push(Document {
            doc_id: format!("lc{k:03}"),
            abstract_text: sentences.join(". ") + ".",
            labels: labels.iter().map(|&t| format!("T{:02}", t + 1)).collect(),
        });
    }
    Ok((th, Corpus::new(docs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{build_graph, shortest_path_matrix, descriptor_distance, GraphOptions, DEFAULT_NODE_CAP};

    #[test]
    fn thesaurus_respects_size_and_depth() {
        let th = synthetic_thesaurus(&SynthConfig::default()).unwrap();
        assert_eq!(th.len(), 100);
        assert!(th.descriptors().all(|d| d.tree_numbers.iter().all(|t| t.depth() <= 4)));
        assert!(th.descriptors().any(|d| d.tree_numbers.len() == 2));
        let again = synthetic_thesaurus(&SynthConfig::default()).unwrap();
        assert_eq!(th, again);
    }

    #[test]
    fn planted_distances_equal_tree_distances() {
        let cfg = SynthConfig {
            branches: "C".into(),
            multi_position_fraction: 0.0,
            ..SynthConfig::default()
        };
        let th = synthetic_thesaurus(&cfg).unwrap();
        let g = build_graph(&th, &GraphOptions::all_branches()).unwrap();
        let oracle = shortest_path_matrix(&g, DEFAULT_NODE_CAP).unwrap();
        let emb = planted_embeddings(&th).unwrap();
        let ids: Vec<&str> = th.descriptors().map(|d| d.id.as_str()).collect();
        for a in ids.iter().take(30) {
            for b in ids.iter().take(30) {
                let va = emb.get(a).unwrap();
                let vb = emb.get(b).unwrap();
                let sq: f32 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
                let d = descriptor_distance(&g, &oracle, a, b).unwrap().unwrap();
                assert_eq!(sq as u16, d, "{a} {b}");
            }
        }
    }

    #[test]
    fn separable_corpus_mentions_its_labels() {
        let th = synthetic_thesaurus(&SynthConfig::default()).unwrap();
        let c = separable_corpus(&th, &CorpusConfig { docs: 50, ..CorpusConfig::default() }).unwrap();
        for d in c.docs() {
            for l in &d.labels {
                let name = th.get(l).unwrap().label.to_lowercase();
                assert!(crate::text::words(&d.abstract_text).any(|w| w == name));
            }
        }
    }

    #[test]
    fn litcovid_fixture_shape() {
        let (th, c) = litcovid_fixture(1).unwrap();
        assert_eq!(th.len(), 8);
        assert_eq!(c.len(), 50);
        assert!(c.docs().iter().all(|d| !d.labels.is_empty()));
    }
}
