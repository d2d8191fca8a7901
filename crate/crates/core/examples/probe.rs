//! Structural probes on a synthetic 100-descriptor tree: distance recovery
//! from planted root-path embeddings, the same probe on Gaussian vectors,
//! and the binary common-ancestors probe for k = 1..3.

use meshzs::hierarchy::{build_graph, shortest_path_matrix, GraphOptions, DEFAULT_NODE_CAP};
use meshzs::probe::{build_probe_dataset, eval_probe, train_probe, LossMode, ProbeConfig, ProbeTask, Split};
use meshzs::synth::{gaussian_embeddings, planted_embeddings, synthetic_thesaurus, SynthConfig};

/// Results of one run: planted error, Gaussian error, F1 for k = 1, 2, 3.
pub struct ProbeSummary {
    pub planted_error: f64,
    pub gaussian_error: f64,
    pub gold_mean: f64,
    pub common_ancestor_f1: [f64; 3],
}

pub fn run_example(seed: u64) -> Result<ProbeSummary, Box<dyn std::error::Error>> {
    let th = synthetic_thesaurus(&SynthConfig {
        descriptors: 100,
        multi_position_fraction: 0.0,
        seed,
        ..SynthConfig::default()
    })?;
    let g = build_graph(&th, &GraphOptions::with_branches("CD")?)?;
    let oracle = shortest_path_matrix(&g, DEFAULT_NODE_CAP)?;
    let planted = planted_embeddings(&th)?;
    let gaussian = gaussian_embeddings(&th, planted.dim(), seed)?;

    let cfg = ProbeConfig {
        loss_mode: LossMode::Reference,
        lr: 3e-4,
        max_epochs: 200,
        patience: 10,
        seed,
        ..ProbeConfig::default()
    };
    let shortest = |emb| -> Result<(f64, f64), Box<dyn std::error::Error>> {
        let ds = build_probe_dataset(&th, &g, &oracle, emb, ProbeTask::ShortestPath, 1.0, seed)?;
        let out = train_probe(&ds, &cfg)?;
        let m = eval_probe(&out.params, &ds, Split::Eval, cfg.loss_mode);
        println!(
            "  {} train / {} eval pairs, stopped after {} epochs (best {}), eval error {:.4}",
            ds.train.len(),
            ds.eval.len(),
            out.history.len(),
            out.best_epoch,
            m.distance_error.unwrap()
        );
        Ok((m.distance_error.unwrap(), m.gold_mean))
    };
    println!("planted embeddings ({} dims)", planted.dim());
    let (planted_error, gold_mean) = shortest(&planted)?;
    println!("gaussian embeddings");
    let (gaussian_error, _) = shortest(&gaussian)?;

    let mut f1 = [0.0; 3];
    for (slot, k) in f1.iter_mut().zip(1..=3) {
        let ds = build_probe_dataset(&th, &g, &oracle, &planted, ProbeTask::CommonAncestors { k }, 1.0, seed)?;
        let out = train_probe(&ds, &cfg)?;
        let m = eval_probe(&out.params, &ds, Split::Eval, cfg.loss_mode);
        println!(
            "common ancestors k={k}: positive share {:.2}, eval F1 {:.3}",
            m.gold_mean,
            m.f1.unwrap()
        );
        *slot = m.f1.unwrap();
    }
    println!(
        "shortest path: planted {planted_error:.4} vs gaussian {gaussian_error:.4} (mean gold distance {gold_mean:.2})"
    );
    Ok(ProbeSummary {
        planted_error,
        gaussian_error,
        gold_mean,
        common_ancestor_f1: f1,
    })
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    run_example(seed)?;
    Ok(())
}
