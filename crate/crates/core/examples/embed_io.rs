//! Writes label embeddings in the binary EMB1 format, reads them back and
//! compares nearest neighbours by cosine similarity.

use meshzs::embed_io::{cosine, EmbeddingTable};
use meshzs::synth::{planted_embeddings, synthetic_thesaurus, SynthConfig};

pub fn run_example() -> Result<usize, Box<dyn std::error::Error>> {
    let th = synthetic_thesaurus(&SynthConfig { descriptors: 30, ..SynthConfig::default() })?;
    let table = planted_embeddings(&th)?;
    let mut bytes = Vec::new();
    table.write(&mut bytes)?;
    let back = EmbeddingTable::read(bytes.as_slice())?;
    assert_eq!(back.len(), table.len());
    println!(
        "{} vectors of width {} ({:?} pooling), {} bytes",
        back.len(),
        back.dim(),
        back.pooling(),
        bytes.len()
    );

    let (query, qv) = back.entries().next().map(|(id, _)| (id.to_string(), back.get_f64(id).unwrap())).unwrap();
    let mut ranked: Vec<(f64, &str)> = back
        .entries()
        .filter(|(id, _)| *id != query)
        .map(|(id, _)| (cosine(&qv, &back.get_f64(id).unwrap()).unwrap_or(0.0), id))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    println!("nearest to {query} ({}):", th.get(&query).unwrap().label);
    for (s, id) in ranked.iter().take(3) {
        println!("  {id} {:<24} {s:.3}", th.get(id).unwrap().label);
    }
    let mut text = Vec::new();
    back.write_text(&mut text)?;
    println!("text form, first line: {}", String::from_utf8(text)?.lines().next().unwrap_or(""));
    Ok(bytes.len())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()?;
    Ok(())
}
