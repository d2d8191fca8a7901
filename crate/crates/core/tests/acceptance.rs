//! Acceptance criteria, one line each. Runs under a custom harness so the
//! lines are always printed; the process fails when a criterion fails,
//! except those listed in `KNOWN_RED`, whose measured values are still
//! reported as FAIL.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use meshzs::cli;
use meshzs::eval::{baseline_isin, prf_predictions, prf};
use meshzs::hierarchy::{build_graph, common_ancestor_count, shortest_path_matrix, GraphOptions, DEFAULT_NODE_CAP};
use meshzs::model::{
    build_instances, grad_check, predict, train, EncoderConfig, EncoderKind, Mode, Model, ModelConfig, MultiTaskLoss,
    TrainConfig,
};
use meshzs::pairs::{gen_balanced, gen_siblings, split_zero_shot, Corpus, LabelView, Pair, Partition};
use meshzs::probe::{build_probe_dataset, eval_probe, train_probe, LossMode, ProbeConfig, ProbeTask, Split};
use meshzs::synth::{
    gaussian_embeddings, litcovid_fixture, planted_embeddings, separable_corpus, synthetic_thesaurus, CorpusConfig,
    SynthConfig,
};
use meshzs::thesaurus::{
    parse_generated, target_sequence, vocab_index, vocab_symbol, Descriptor, Symbol, Thesaurus, TreeNumber,
    CONTENT_TOKENS, VOCAB_SIZE,
};

const KNOWN_RED: &[&str] = &["probe planted recovery"];

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "vocabulary", budget: secs(1), run: vocabulary },
        Criterion { name: "tree-number round trip", budget: secs(5), run: tree_number_round_trip },
        Criterion { name: "graph distances", budget: secs(30), run: graph_distances },
        Criterion { name: "three common ancestors", budget: secs(1), run: three_common_ancestors },
        Criterion { name: "balanced generator", budget: secs(10), run: balanced_generator },
        Criterion { name: "siblings generator", budget: secs(10), run: siblings_generator },
        Criterion { name: "gradient check", budget: secs(60), run: gradient_check },
        Criterion { name: "task weighting", budget: secs(1), run: task_weighting },
        Criterion { name: "end-to-end toy mtl", budget: secs(600), run: toy_mtl },
        Criterion { name: "probe planted recovery", budget: secs(300), run: probe_planted_recovery },
        Criterion { name: "probe ordering", budget: secs(600), run: probe_ordering },
        Criterion { name: "common-ancestors probe", budget: secs(300), run: common_ancestors_probe },
        Criterion { name: "isin precision over recall", budget: secs(5), run: isin_precision },
        Criterion { name: "cli determinism", budget: secs(300), run: cli_determinism },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut unexpected = Vec::new();
    let mut passed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok((ok, detail)) => (ok, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = elapsed <= c.budget;
        let pass = ok && in_time;
        let timing = if in_time {
            format!("{:.2}s", elapsed.as_secs_f64())
        } else {
            format!("{:.2}s over budget {}s", elapsed.as_secs_f64(), c.budget.as_secs())
        };
        let note = if !pass && KNOWN_RED.contains(&c.name) { " [known red]" } else { "" };
        println!("{} {}: {} ({}){}", if pass { "PASS" } else { "FAIL" }, c.name, detail, timing, note);
        if pass {
            passed += 1;
        } else if !KNOWN_RED.contains(&c.name) {
            unexpected.push(c.name);
        }
    }
    println!("acceptance: {passed}/{ran} criteria passed");
    if !unexpected.is_empty() {
        println!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn vocabulary() -> Outcome {
    // independent enumeration: letters, two-digit codes, three-digit codes
    let content = 26 + 100 + 1000;
    let mut seen = BTreeSet::new();
    for id in 0..VOCAB_SIZE as u32 {
        let sym = vocab_symbol(id)?;
        if vocab_index(sym) != id {
            return Ok((false, format!("id {id} does not round trip")));
        }
        seen.insert(format!("{sym:?}"));
    }
    let tokens = (0..VOCAB_SIZE as u32)
        .filter(|&i| matches!(vocab_symbol(i), Ok(Symbol::Token(_))))
        .count();
    let ok = CONTENT_TOKENS == content
        && tokens == content
        && VOCAB_SIZE == content + 4
        && seen.len() == VOCAB_SIZE
        && vocab_symbol(VOCAB_SIZE as u32).is_err();
    Ok((ok, format!("{tokens} content + {} reserved = {VOCAB_SIZE}", VOCAB_SIZE - tokens)))
}

fn random_tree_number(rng: &mut ChaCha8Rng) -> String {
    let letter = (b'A' + rng.random_range(0..26u8)) as char;
    let mut s = format!("{letter}{:02}", rng.random_range(0..100));
    for _ in 0..rng.random_range(0..15) {
        s.push_str(&format!(".{:03}", rng.random_range(0..1000)));
    }
    s
}

fn tree_number_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = 0;
    let n = 10_000;
    for _ in 0..n {
        let text = random_tree_number(&mut rng);
        let tn = TreeNumber::parse(&text)?;
        let back = TreeNumber::from_tokens(&tn.tokens())?;
        let generated = parse_generated(&target_sequence(&tn))?;
        if back.to_string() != text || generated != tn {
            failures += 1;
        }
    }
    Ok((failures == 0, format!("{} / {n} identities", n - failures)))
}

/// Parent of a graph node name: the prefix without its last segment, or the
/// branch letter for a top-level code.
fn parent_name(name: &str) -> Option<String> {
    match name.rfind('.') {
        Some(i) => Some(name[..i].to_string()),
        None if name.len() == 3 => Some(name[..1].to_string()),
        None => None,
    }
}

fn graph_distances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut compared = 0usize;
    let mut max_nodes = 0;
    for g_idx in 0..20 {
        // random prefix-closed set of positions, one descriptor per position
        let letters: Vec<char> = ['C', 'D', 'G'][..rng.random_range(1..=3)].to_vec();
        let mut positions: BTreeSet<String> = BTreeSet::new();
        let target = rng.random_range(20..150);
        while positions.len() < target {
            let parent = if positions.is_empty() || rng.random_bool(0.2) {
                None
            } else {
                let v: Vec<&String> = positions.iter().collect();
                Some(v[rng.random_range(0..v.len())].clone())
            };
            let p = match parent {
                None => format!("{}{:02}", letters[rng.random_range(0..letters.len())], rng.random_range(0..100)),
                Some(p) if p.split('.').count() < 6 => format!("{p}.{:03}", rng.random_range(0..1000)),
                Some(_) => continue,
            };
            positions.insert(p);
        }
        let descriptors = positions.iter().enumerate().map(|(i, p)| Descriptor {
            id: format!("G{g_idx}D{i}"),
            label: format!("d{i}"),
            description: String::new(),
            tree_numbers: vec![TreeNumber::parse(p).unwrap()],
        });
        let th = Thesaurus::from_descriptors(descriptors)?;
        let category_nodes = g_idx % 2 == 0;
        let options = GraphOptions {
            category_nodes,
            ..GraphOptions::all_branches()
        };
        let g = build_graph(&th, &options)?;
        if g.node_count() > 200 {
            return Ok((false, format!("graph {g_idx} has {} nodes", g.node_count())));
        }
        max_nodes = max_nodes.max(g.node_count());
        let oracle = shortest_path_matrix(&g, DEFAULT_NODE_CAP)?;

        // BFS over adjacency rebuilt from node names alone
        let names = g.nodes();
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut adj = vec![Vec::new(); names.len()];
        for (i, n) in names.iter().enumerate() {
            if let Some(p) = parent_name(n) {
                if let Some(&j) = index.get(p.as_str()) {
                    adj[i].push(j);
                    adj[j].push(i);
                }
            }
        }
        for s in 0..names.len() {
            let mut dist = vec![None; names.len()];
            dist[s] = Some(0u16);
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &v in &adj[u] {
                    if dist[v].is_none() {
                        dist[v] = Some(dist[u].unwrap() + 1);
                        q.push_back(v);
                    }
                }
            }
            for (t, d) in dist.iter().enumerate() {
                if oracle.get(s, t) != *d {
                    return Ok((false, format!("graph {g_idx}: {} -> {} differs", names[s], names[t])));
                }
                compared += 1;
            }
        }
    }
    Ok((true, format!("20 graphs up to {max_nodes} nodes, {compared} pairs equal")))
}

fn three_common_ancestors() -> Outcome {
    let d = |id: &str, tn: &str| Descriptor {
        id: id.into(),
        label: id.into(),
        description: String::new(),
        tree_numbers: vec![TreeNumber::parse(tn).unwrap()],
    };
    let th = Thesaurus::from_descriptors([
        d("top", "C01"),
        d("parent", "C01.100"),
        d("term", "C01.100.200"),
        d("sibling", "C01.100.300"),
    ])?;
    let n = common_ancestor_count(&th, "term", "sibling")?;
    Ok((n == 3, format!("{n} common ancestors")))
}

fn all_partitions(
    f: impl Fn(Partition) -> Result<Vec<Pair>, Box<dyn std::error::Error>>,
) -> Result<Vec<Pair>, Box<dyn std::error::Error>> {
    let mut out = Vec::new();
    for p in [Partition::Train, Partition::Val, Partition::Test] {
        out.extend(f(p)?);
    }
    Ok(out)
}

fn balanced_generator() -> Outcome {
    let th = synthetic_thesaurus(&SynthConfig::default())?;
    let corpus = separable_corpus(&th, &CorpusConfig { docs: 1000, ..CorpusConfig::default() })?;
    let split = split_zero_shot(&corpus, Some(&th), 0, 5)?;
    let pairs = all_partitions(|p| Ok(gen_balanced(&corpus, &split, p, LabelView::All, None, 11)?.pairs))?;

    let mut per_doc: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut leaks = 0;
    let mut pos_by_label: BTreeMap<&str, f64> = BTreeMap::new();
    let mut neg_by_label: BTreeMap<&str, f64> = BTreeMap::new();
    for p in &pairs {
        let e = per_doc.entry(&p.doc_id).or_default();
        if p.positive {
            e.0 += 1;
            *pos_by_label.entry(&p.descriptor).or_default() += 1.0;
        } else {
            e.1 += 1;
            *neg_by_label.entry(&p.descriptor).or_default() += 1.0;
            if corpus.get(&p.doc_id).unwrap().labels.contains(&p.descriptor) {
                leaks += 1;
            }
        }
    }
    let unbalanced = per_doc.values().filter(|(a, b)| a != b).count();

    // goodness of fit of negative counts to positive counts, pooling small cells
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut pooled = (0.0, 0.0);
    let labels: BTreeSet<&str> = pos_by_label.keys().chain(neg_by_label.keys()).copied().collect();
    for l in labels {
        let expected = pos_by_label.get(l).copied().unwrap_or(0.0);
        let observed = neg_by_label.get(l).copied().unwrap_or(0.0);
        if expected >= 5.0 {
            cells.push((observed, expected));
        } else {
            pooled.0 += observed;
            pooled.1 += expected;
        }
    }
    if pooled.1 > 0.0 {
        cells.push(pooled);
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = (cells.len() - 1) as f64;
    let p_value = 1.0 - ChiSquared::new(dof)?.cdf(stat);
    let ok = per_doc.len() == 1000 && unbalanced == 0 && leaks == 0 && p_value > 0.01;
    Ok((
        ok,
        format!(
            "{} docs, {unbalanced} unbalanced, {leaks} leaks, chi-square {stat:.1} on {dof} dof, p = {p_value:.3}",
            per_doc.len()
        ),
    ))
}

/// Siblings rule applied from Tree Number strings alone.
fn brute_force_siblings(th: &Thesaurus, corpus: &Corpus, docs: &[String], letters: &str) -> BTreeSet<(String, String, bool)> {
    let in_graph = |d: &Descriptor| d.tree_numbers.iter().any(|t| letters.contains(t.branch()));
    let positions = |d: &Descriptor| -> Vec<String> {
        d.tree_numbers
            .iter()
            .filter(|t| letters.contains(t.branch()))
            .map(|t| t.to_string())
            .collect()
    };
    let owner: HashMap<String, String> = th
        .descriptors()
        .flat_map(|d| positions(d).into_iter().map(move |p| (p, d.id.clone())))
        .collect();
    let mut out = BTreeSet::new();
    for doc_id in docs {
        let doc = corpus.get(doc_id).unwrap();
        let mut positive: BTreeSet<String> = BTreeSet::new();
        let mut negative: BTreeSet<String> = BTreeSet::new();
        for l in &doc.labels {
            let d = th.get(l).unwrap();
            if !in_graph(d) {
                continue;
            }
            positive.insert(l.clone());
            for p in positions(d) {
                let mut prefix = p.clone();
                while let Some(i) = prefix.rfind('.') {
                    prefix.truncate(i);
                    if let Some(a) = owner.get(&prefix) {
                        if a != l {
                            positive.insert(a.clone());
                        }
                    }
                }
                let parent = parent_name(&p).unwrap();
                for (q, o) in &owner {
                    if o != l && parent_name(q).as_deref() == Some(parent.as_str()) && !doc.labels.contains(o) {
                        negative.insert(o.clone());
                    }
                }
            }
        }
        for p in &positive {
            out.insert((p.clone(), doc_id.clone(), true));
        }
        for n in negative.difference(&positive) {
            out.insert((n.clone(), doc_id.clone(), false));
        }
    }
    out
}

fn siblings_generator() -> Outcome {
    let th = synthetic_thesaurus(&SynthConfig { descriptors: 60, seed: 3, ..SynthConfig::default() })?;
    let corpus = separable_corpus(&th, &CorpusConfig { docs: 80, seed: 4, ..CorpusConfig::default() })?;
    let letters = "CD";
    let g = build_graph(&th, &GraphOptions::with_branches(letters)?)?;
    let split = split_zero_shot(&corpus, Some(&th), 0, 1)?;
    let mut mismatches = 0;
    let mut total = 0;
    for p in [Partition::Train, Partition::Val, Partition::Test] {
        let (set, _) = gen_siblings(&corpus, &split, p, LabelView::All, &th, &g)?;
        let got: BTreeSet<(String, String, bool)> =
            set.pairs.iter().map(|q| (q.descriptor.clone(), q.doc_id.clone(), q.positive)).collect();
        let want = brute_force_siblings(&th, &corpus, split.docs(p), letters);
        mismatches += got.symmetric_difference(&want).count() + (set.pairs.len() - got.len());
        total += want.len();
    }
    Ok((mismatches == 0, format!("{total} pairs, {mismatches} mismatches")))
}

fn gradient_check() -> Outcome {
    let th = synthetic_thesaurus(&SynthConfig { descriptors: 12, seed: 9, ..SynthConfig::default() })?;
    let corpus = separable_corpus(&th, &CorpusConfig { docs: 6, filler: 3, seed: 9, ..CorpusConfig::default() })?;
    let split = split_zero_shot(&corpus, Some(&th), 0, 2)?;
    let pairs = gen_balanced(&corpus, &split, Partition::Train, LabelView::All, None, 3)?;
    let mut worst_overall: f64 = 0.0;
    let mut entries = 0;
    for kind in [EncoderKind::BagOfEmbeddings, EncoderKind::SelfAttention] {
        let model = Model::new(ModelConfig {
            encoder: EncoderConfig {
                vocab_size: 64,
                width: 8,
                max_len: 40,
                kind,
                layers: 1,
                heads: 2,
            },
            embedding_init_std: 0.5,
            seed: 4,
            ..ModelConfig::default()
        })?;
        let batch = build_instances(&model, &pairs.pairs[..4.min(pairs.pairs.len())], &corpus, &th, Mode::Mtl)?;
        // perturb the task weights away from zero
        let mut model = model;
        for name in ["mtl.log_sigma1_sq", "mtl.log_sigma2_sq"] {
            let id = model.params().id(name).unwrap();
            model.params_mut().get_mut(id).fill(0.3);
        }
        let report = grad_check(&model, &batch, 1e-5, |_| true)?;
        worst_overall = worst_overall.max(report.max_rel_error);
        entries += report.entries_checked;
    }
    Ok((
        worst_overall < 1e-4,
        format!("max relative error {worst_overall:.2e} over {entries} entries, width 8"),
    ))
}

fn task_weighting() -> Outcome {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for &(l1, l2) in &[(0.7, 2.3), (0.0, 0.0), (1.25, 0.5)] {
        ok &= MultiTaskLoss::from_sigmas(1.0, 1.0, l1, l2).total() == (l1 + l2) / 2.0;
    }
    for &(l1, l2) in &[(0.37f64, 4.2f64), (1.0, 1.0), (0.05, 9.0)] {
        let m = MultiTaskLoss::from_sigmas(l1.sqrt(), l2.sqrt(), l1, l2);
        let (a, b) = m.grad_sigma();
        let (c, d) = m.grad_log_sigma_sq();
        worst = worst.max(a.abs()).max(b.abs()).max(c.abs()).max(d.abs());
    }
    ok &= worst < 1e-8;
    Ok((ok, format!("unit weights exact, stationarity residual {worst:.1e}")))
}

fn toy_mtl() -> Outcome {
    let th = synthetic_thesaurus(&SynthConfig::default())?;
    let corpus = separable_corpus(&th, &CorpusConfig { docs: 1000, ..CorpusConfig::default() })?;
    let split = split_zero_shot(&corpus, Some(&th), 10, 1)?;
    let set = |p| gen_balanced(&corpus, &split, p, LabelView::Seen, None, 2);
    let (tr, va, te) = (set(Partition::Train)?, set(Partition::Val)?, set(Partition::Test)?);
    let mut config = ModelConfig::default();
    config.encoder.max_len = 48;
    let mut model = Model::new(config)?;
    let cfg = TrainConfig {
        lr_main: 1e-2,
        lr_decoder: 3e-3,
        ..TrainConfig::default()
    };
    let train_set = build_instances(&model, &tr.pairs, &corpus, &th, Mode::Mtl)?;
    let val_set = build_instances(&model, &va.pairs, &corpus, &th, Mode::Mtl)?;
    train(&mut model, &train_set, &val_set, &cfg)?;
    let test = build_instances(&model, &te.pairs, &corpus, &th, Mode::Stl)?;
    let gold: Vec<bool> = test.iter().map(|i| i.positive).collect();
    let f1 = prf(&predict(&model, &test)?, &gold, 0.5)?.f1;
    let positives: Vec<_> = test.iter().filter(|i| i.positive).collect();
    let mut well_formed = 0;
    for inst in &positives {
        well_formed += parse_generated(&model.generate(&inst.input)?).is_ok() as usize;
    }
    let rate = well_formed as f64 / positives.len() as f64;
    Ok((
        f1 >= 0.9 && rate >= 0.9,
        format!("seen-term pair F1 {f1:.3}, well-formed decodes {:.1}%", 100.0 * rate),
    ))
}

fn probe_config(seed: u64) -> ProbeConfig {
    ProbeConfig {
        rank: 512,
        loss_mode: LossMode::Reference,
        lr: 3e-4,
        max_epochs: 200,
        patience: 10,
        seed,
        ..ProbeConfig::default()
    }
}

struct ProbeTree {
    th: Thesaurus,
    g: meshzs::hierarchy::HierarchyGraph,
    oracle: meshzs::hierarchy::DistanceOracle,
}

fn probe_tree(seed: u64) -> Result<ProbeTree, Box<dyn std::error::Error>> {
    let th = synthetic_thesaurus(&SynthConfig {
        descriptors: 100,
        multi_position_fraction: 0.0,
        seed,
        ..SynthConfig::default()
    })?;
    let g = build_graph(&th, &GraphOptions::with_branches("CD")?)?;
    let oracle = shortest_path_matrix(&g, DEFAULT_NODE_CAP)?;
    Ok(ProbeTree { th, g, oracle })
}

fn shortest_path_error(
    t: &ProbeTree,
    emb: &meshzs::embed_io::EmbeddingTable,
    seed: u64,
) -> Result<f64, Box<dyn std::error::Error>> {
    let ds = build_probe_dataset(&t.th, &t.g, &t.oracle, emb, ProbeTask::ShortestPath, 1.0, seed)?;
    let cfg = probe_config(seed);
    let out = train_probe(&ds, &cfg)?;
    Ok(eval_probe(&out.params, &ds, Split::Eval, cfg.loss_mode).distance_error.unwrap())
}

fn probe_planted_recovery() -> Outcome {
    let t = probe_tree(0)?;
    let err = shortest_path_error(&t, &planted_embeddings(&t.th)?, 0)?;
    Ok((err < 0.1, format!("held-out mean distance error {err:.4} (target < 0.1)")))
}

fn probe_ordering() -> Outcome {
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..5 {
        let t = probe_tree(seed)?;
        let planted = planted_embeddings(&t.th)?;
        let gaussian = gaussian_embeddings(&t.th, planted.dim(), seed)?;
        let a = shortest_path_error(&t, &planted, seed)?;
        let b = shortest_path_error(&t, &gaussian, seed)?;
        wins += (a < b) as usize;
        detail.push(format!("{a:.2}<{b:.2}"));
    }
    Ok((wins == 5, format!("planted beats gaussian in {wins}/5 seeds ({})", detail.join(", "))))
}

fn common_ancestors_probe() -> Outcome {
    let t = probe_tree(0)?;
    let emb = planted_embeddings(&t.th)?;
    let mut f1 = Vec::new();
    for k in 1..=3 {
        let ds = build_probe_dataset(&t.th, &t.g, &t.oracle, &emb, ProbeTask::CommonAncestors { k }, 1.0, 0)?;
        let cfg = probe_config(0);
        let out = train_probe(&ds, &cfg)?;
        f1.push(eval_probe(&out.params, &ds, Split::Eval, cfg.loss_mode).f1.unwrap());
    }
    let ok = f1[0] > f1[2] && f1.iter().all(|&f| f > 0.5);
    Ok((ok, format!("F1 k=1 {:.3}, k=2 {:.3}, k=3 {:.3}", f1[0], f1[1], f1[2])))
}

fn isin_precision() -> Outcome {
    let (th, corpus) = litcovid_fixture(0)?;
    let split = split_zero_shot(&corpus, Some(&th), 0, 0)?;
    let pairs = all_partitions(|p| Ok(gen_balanced(&corpus, &split, p, LabelView::All, None, 0)?.pairs))?;
    let predicted: Vec<bool> = pairs
        .iter()
        .map(|p| baseline_isin(&th.get(&p.descriptor).unwrap().label, &corpus.get(&p.doc_id).unwrap().abstract_text))
        .collect();
    let gold: Vec<bool> = pairs.iter().map(|p| p.positive).collect();
    let r = prf_predictions("isin", &predicted, &gold, None)?;
    Ok((
        r.precision > r.recall,
        format!("precision {:.3} > recall {:.3} over {} pairs", r.precision, r.recall, r.pairs),
    ))
}

const DETERMINISM_CONFIG: &str = r#"
branches = "CD"
[synth.thesaurus]
descriptors = 40
branches = "CD"
[synth.corpus]
docs = 120
[pairs]
holdout = 4
[model.encoder]
width = 16
max_len = 48
vocab_size = 1024
[train]
epochs = 1
lr_main = 1e-2
lr_decoder = 3e-3
[probe]
sample_fraction = 0.5
[probe.training]
rank = 32
lr = 1e-3
max_epochs = 5
"#;

fn run_pipeline(root: &Path) -> Result<Vec<(String, i32)>, Box<dyn std::error::Error>> {
    std::fs::write(root.join("cfg.toml"), DETERMINISM_CONFIG)?;
    let r = |p: &str| root.join(p).display().to_string();
    let cfg = r("cfg.toml");
    let th = r("data/thesaurus.tsv");
    let corpus = r("data/corpus.tsv");
    let emb = r("data/planted.emb1");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("synth", vec!["synth".into(), "--out".into(), r("data")]),
        ("synth litcovid", vec!["synth".into(), "--fixture".into(), "litcovid".into(), "--out".into(), r("covid")]),
        ("thesaurus stats", vec!["thesaurus".into(), "stats".into(), "--thesaurus".into(), th.clone(), "--out".into(), r("stats")]),
        ("pairs gen", vec!["pairs".into(), "gen".into(), "--thesaurus".into(), th.clone(), "--corpus".into(), corpus.clone(), "--out".into(), r("pairs")]),
        ("pairs gen siblings", vec!["pairs".into(), "gen".into(), "--kind".into(), "siblings".into(), "--thesaurus".into(), th.clone(), "--corpus".into(), corpus.clone(), "--out".into(), r("siblings")]),
        ("model train", vec!["model".into(), "train".into(), "--thesaurus".into(), th.clone(), "--corpus".into(), corpus.clone(), "--pairs".into(), r("pairs"), "--out".into(), r("model")]),
        ("model eval", vec!["model".into(), "eval".into(), "--model".into(), r("model/model.ckpt"), "--thesaurus".into(), th.clone(), "--corpus".into(), corpus.clone(), "--pairs".into(), r("pairs"), "--view".into(), "all".into(), "--emit-embeddings".into(), "--out".into(), r("eval")]),
        ("probe build", vec!["probe".into(), "build".into(), "--probe".into(), "common-ancestors".into(), "--k".into(), "2".into(), "--thesaurus".into(), th.clone(), "--embeddings".into(), emb.clone(), "--out".into(), r("pb")]),
        ("probe train", vec!["probe".into(), "train".into(), "--dataset".into(), r("pb/dataset.json"), "--embeddings".into(), emb.clone(), "--out".into(), r("pt")]),
        ("probe eval", vec!["probe".into(), "eval".into(), "--dataset".into(), r("pb/dataset.json"), "--embeddings".into(), emb.clone(), "--checkpoint".into(), r("pt/probe.ckpt"), "--out".into(), r("pe")]),
        ("baseline", vec!["baseline".into(), "--thesaurus".into(), th.clone(), "--corpus".into(), corpus.clone(), "--pairs".into(), r("pairs/test.all.tsv"), "--out".into(), r("baseline")]),
    ];
    let mut codes = Vec::new();
    for (name, mut args) in commands {
        args.splice(0..0, ["meshzs".to_string()]);
        let sub_end = if matches!(args[1].as_str(), "synth" | "baseline") { 2 } else { 3 };
        args.splice(sub_end..sub_end, ["--config".to_string(), cfg.clone(), "--seed".into(), "7".into()]);
        codes.push((name.to_string(), cli::run(args)));
    }
    Ok(codes)
}

fn tree_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn cli_determinism() -> Outcome {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    let codes_a = run_pipeline(a.path())?;
    let codes_b = run_pipeline(b.path())?;
    let failed: Vec<&str> = codes_a
        .iter()
        .chain(&codes_b)
        .filter(|(_, c)| *c != 0)
        .map(|(n, _)| n.as_str())
        .collect();
    if !failed.is_empty() {
        return Ok((false, format!("non-zero exit from {}", failed.join(", "))));
    }
    let fa = tree_files(a.path());
    let fb = tree_files(b.path());
    let differing: Vec<&String> = fa.keys().filter(|k| fb.get(*k) != fa.get(*k)).collect();
    let ok = differing.is_empty() && fa.len() == fb.len();
    let detail = if ok {
        format!("{} subcommand runs, {} files byte-identical", codes_a.len(), fa.len())
    } else {
        format!("differing files: {differing:?}")
    };
    Ok((ok, detail))
}
