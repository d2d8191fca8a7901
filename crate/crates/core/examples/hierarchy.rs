//! Builds the position graph for a synthetic thesaurus, computes all-pairs
//! hop distances, and prints descriptor distances and shared ancestors.

use meshzs::hierarchy::{
    build_graph, common_ancestor_count, descriptor_distance, shortest_path_matrix, DistanceOracle, GraphOptions,
    DEFAULT_NODE_CAP,
};
use meshzs::synth::{synthetic_thesaurus, SynthConfig};

pub fn run_example() -> Result<usize, Box<dyn std::error::Error>> {
    let th = synthetic_thesaurus(&SynthConfig { descriptors: 60, ..SynthConfig::default() })?;
    let g = build_graph(&th, &GraphOptions::with_branches("CD")?)?;
    let oracle = shortest_path_matrix(&g, DEFAULT_NODE_CAP)?;
    println!("{} positions, {} edges", g.node_count(), g.edge_count());

    // descriptors under the first C top-level code
    let ids: Vec<&str> = th
        .descriptors()
        .filter(|d| d.tree_numbers[0].to_string().starts_with("C"))
        .map(|d| d.id.as_str())
        .take(6)
        .collect();
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            let d = descriptor_distance(&g, &oracle, a, b)?;
            let shared = common_ancestor_count(&th, a, b)?;
            let d = d.map_or("disconnected".to_string(), |d| d.to_string());
            println!("  {a} - {b}: distance {d}, {shared} shared ancestors");
        }
    }

    let mut cache = Vec::new();
    oracle.write_cache(&mut cache)?;
    let restored = DistanceOracle::read_cache(cache.as_slice())?;
    assert_eq!(restored.len(), oracle.len());
    println!("distance cache: {} bytes", cache.len());
    Ok(g.node_count())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()?;
    Ok(())
}
