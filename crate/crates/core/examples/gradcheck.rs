//! Finite-difference check of the full multi-task loss gradient on a tiny
//! model, reported per parameter tensor.

use meshzs::model::{build_instances, grad_check, EncoderConfig, Mode, Model, ModelConfig};
use meshzs::pairs::{gen_balanced, split_zero_shot, LabelView, Partition};
use meshzs::synth::{separable_corpus, synthetic_thesaurus, CorpusConfig, SynthConfig};

pub fn run_example() -> Result<f64, Box<dyn std::error::Error>> {
    let th = synthetic_thesaurus(&SynthConfig { descriptors: 12, seed: 9, ..SynthConfig::default() })?;
    let corpus = separable_corpus(&th, &CorpusConfig { docs: 6, filler: 3, seed: 9, ..CorpusConfig::default() })?;
    let split = split_zero_shot(&corpus, Some(&th), 0, 2)?;
    let pairs = gen_balanced(&corpus, &split, Partition::Train, LabelView::All, None, 3)?;
    let model = Model::new(ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 64,
            width: 6,
            max_len: 32,
            ..EncoderConfig::default()
        },
        embedding_init_std: 0.5,
        ..ModelConfig::default()
    })?;
    let batch = build_instances(&model, &pairs.pairs[..3], &corpus, &th, Mode::Mtl)?;
    let report = grad_check(&model, &batch, 1e-5, |_| true)?;
    for (name, err) in &report.per_parameter {
        println!("  {name:<28} {err:.2e}");
    }
    println!("{} entries, max relative error {:.2e}", report.entries_checked, report.max_rel_error);
    Ok(report.max_rel_error)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()?;
    Ok(())
}
