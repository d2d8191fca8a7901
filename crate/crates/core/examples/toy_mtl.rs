//! Trains the multi-task model on a synthetic thesaurus and separable corpus,
//! then reports seen-term pair F1 and the share of well-formed generated
//! Tree Numbers.

use std::time::Instant;

use meshzs::eval::prf;
use meshzs::model::{build_instances, predict, train, Mode, Model, ModelConfig, TrainConfig};
use meshzs::pairs::{gen_balanced, split_zero_shot, LabelView, Partition};
use meshzs::synth::{separable_corpus, synthetic_thesaurus, CorpusConfig, SynthConfig};
use meshzs::thesaurus::parse_generated;

pub fn run_example() -> Result<(f64, f64), Box<dyn std::error::Error>> {
    let th = synthetic_thesaurus(&SynthConfig::default())?;
    let corpus = separable_corpus(&th, &CorpusConfig { docs: 1000, ..CorpusConfig::default() })?;
    let split = split_zero_shot(&corpus, Some(&th), 10, 1)?;
    let pairs = |p| gen_balanced(&corpus, &split, p, LabelView::Seen, None, 2);
    let (tr, va, te) = (pairs(Partition::Train)?, pairs(Partition::Val)?, pairs(Partition::Test)?);

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
    println!("{} train instances, {} val instances", train_set.len(), val_set.len());
    let start = Instant::now();
    let outcome = train(&mut model, &train_set, &val_set, &cfg)?;
    for h in &outcome.history {
        println!(
            "epoch {:.2}  train {:.4}  val {:.4}  sigma1 {:.3}  sigma2 {:.3}",
            h.epoch, h.train_loss, h.val_loss, h.sigma1, h.sigma2
        );
    }
    println!("trained in {:.1?}", start.elapsed());

    let test_set = build_instances(&model, &te.pairs, &corpus, &th, Mode::Stl)?;
    let scores = predict(&model, &test_set)?;
    let gold: Vec<bool> = test_set.iter().map(|i| i.positive).collect();
    let report = prf(&scores, &gold, 0.5)?;

    let positives: Vec<_> = test_set.iter().filter(|i| i.positive).collect();
    let mut well_formed = 0;
    for inst in &positives {
        if parse_generated(&model.generate(&inst.input)?).is_ok() {
            well_formed += 1;
        }
    }
    let rate = well_formed as f64 / positives.len() as f64;
    println!("seen-term test F1 {:.3}, well-formed decodes {:.1}%", report.f1, 100.0 * rate);
    Ok((report.f1, rate))
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()?;
    Ok(())
}
