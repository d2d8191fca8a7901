//! Splits a corpus into seen and held-out labels, then generates balanced
//! and siblings pairs for each partition.

use meshzs::hierarchy::{build_graph, GraphOptions};
use meshzs::pairs::{gen_balanced, gen_siblings, split_zero_shot, LabelView, Partition};
use meshzs::synth::{separable_corpus, synthetic_thesaurus, CorpusConfig, SynthConfig};

pub fn run_example() -> Result<usize, Box<dyn std::error::Error>> {
    let th = synthetic_thesaurus(&SynthConfig::default())?;
    let corpus = separable_corpus(&th, &CorpusConfig { docs: 300, ..CorpusConfig::default() })?;
    let split = split_zero_shot(&corpus, Some(&th), 10, 1)?;
    let g = build_graph(&th, &GraphOptions::with_branches("CD")?)?;
    println!("{} documents, {} labels held out", corpus.len(), split.holdout_terms.len());

    let mut total = 0;
    for partition in [Partition::Train, Partition::Val, Partition::Test] {
        let balanced = gen_balanced(&corpus, &split, partition, LabelView::All, None, 2)?;
        let (siblings, skipped) = gen_siblings(&corpus, &split, partition, LabelView::All, &th, &g)?;
        let pos = |s: &meshzs::pairs::PairSet| s.positives().count();
        println!(
            "  {partition:?}: {} docs, balanced {} pairs ({} positive), siblings {} pairs ({} positive, {} labels skipped)",
            split.docs(partition).len(),
            balanced.pairs.len(),
            pos(&balanced),
            siblings.pairs.len(),
            pos(&siblings),
            skipped.len()
        );
        total += balanced.pairs.len();
    }
    let test = gen_balanced(&corpus, &split, Partition::Test, LabelView::ZeroShot, None, 2)?;
    println!("zero-shot test view: {} pairs", test.pairs.len());
    let mut preview = Vec::new();
    test.write(&mut preview)?;
    for line in String::from_utf8(preview)?.lines().take(4) {
        println!("    {line}");
    }
    Ok(total)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()?;
    Ok(())
}
