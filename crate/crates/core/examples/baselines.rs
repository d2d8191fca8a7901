//! Lexical and embedding-similarity baselines on the small literature
//! fixture: substring matching of labels, and cosine similarity of hashed
//! bag-of-words vectors with a threshold chosen on the same pairs.

use meshzs::eval::{baseline_cos_sim, baseline_isin, prf_predictions, select_threshold};
use meshzs::embed_io::cosine;
use meshzs::pairs::{gen_balanced, split_zero_shot, LabelView, Partition};
use meshzs::synth::litcovid_fixture;

const DIM: usize = 64;

fn hashed_bag(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; DIM];
    for w in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let h = w.to_lowercase().bytes().fold(2166136261u32, |h, b| (h ^ b as u32).wrapping_mul(16777619));
        v[h as usize % DIM] += 1.0;
    }
    v
}

pub fn run_example() -> Result<(f64, f64), Box<dyn std::error::Error>> {
    let (th, corpus) = litcovid_fixture(0)?;
    let split = split_zero_shot(&corpus, Some(&th), 0, 0)?;
    let mut pairs = Vec::new();
    for p in [Partition::Train, Partition::Val, Partition::Test] {
        pairs.extend(gen_balanced(&corpus, &split, p, LabelView::All, None, 0)?.pairs);
    }
    let gold: Vec<bool> = pairs.iter().map(|p| p.positive).collect();
    let texts: Vec<(&str, &str)> = pairs
        .iter()
        .map(|p| (th.get(&p.descriptor).unwrap().label.as_str(), corpus.get(&p.doc_id).unwrap().abstract_text.as_str()))
        .collect();

    let isin: Vec<bool> = texts.iter().map(|(l, a)| baseline_isin(l, a)).collect();
    let r = prf_predictions("isin", &isin, &gold, None)?;
    println!("isin     precision {:.3}  recall {:.3}  f1 {:.3}", r.precision, r.recall, r.f1);

    let sims: Vec<f64> = texts
        .iter()
        .map(|(l, a)| cosine(&hashed_bag(l), &hashed_bag(a)).unwrap_or(0.0))
        .collect();
    let (threshold, _) = select_threshold(&sims, &gold)?;
    let cos: Vec<bool> = texts
        .iter()
        .map(|(l, a)| baseline_cos_sim(&hashed_bag(l), &hashed_bag(a), threshold).unwrap_or(false))
        .collect();
    let c = prf_predictions("cos-sim", &cos, &gold, None)?;
    println!(
        "cos-sim  precision {:.3}  recall {:.3}  f1 {:.3}  (threshold {threshold:.3})",
        c.precision, c.recall, c.f1
    );
    Ok((r.precision, r.recall))
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()?;
    Ok(())
}
