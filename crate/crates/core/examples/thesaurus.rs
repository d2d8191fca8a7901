//! Loads a small thesaurus in the tab-separated ingest format, reports the
//! lines lenient mode skipped, and shows the token form of each Tree Number.

use meshzs::thesaurus::{
    parse_generated, target_sequence, LoadMode, Thesaurus, CONTENT_TOKENS, VOCAB_SIZE,
};

const INGEST: &str = "\
D001\tInfections\tDiseases caused by pathogens\tC01
D002\tBacterial Infections\tInfections by bacteria\tC01.150
D003\tPneumonia\tLung inflammation\tC01.150.252;C08.381.677
D004\tLung Diseases\tDisorders of the lung\tC08.381
D005\tRespiratory Tract Diseases\t\tC08
D006\tbroken line without tabs
D007\tBad Code\tinvalid segment\tC01.15
";

pub fn run_example() -> Result<usize, Box<dyn std::error::Error>> {
    let (th, report) = Thesaurus::load(INGEST.as_bytes(), LoadMode::Lenient)?;
    println!("loaded {} descriptors, {} Tree Numbers", report.loaded, th.tree_number_count());
    for m in &report.skipped {
        println!("  skipped line {}: {}", m.line, m.reason);
    }
    let strict = Thesaurus::load(INGEST.as_bytes(), LoadMode::Strict);
    println!("strict mode: {}", strict.err().map(|e| e.to_string()).unwrap_or_default());

    println!("vocabulary: {CONTENT_TOKENS} content tokens, {VOCAB_SIZE} ids");
    for d in th.descriptors() {
        for tn in &d.tree_numbers {
            let ids = target_sequence(tn);
            let tokens: Vec<String> = tn.tokens().iter().map(|t| t.text()).collect();
            let ids: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
            assert_eq!(&parse_generated(&target_sequence(tn))?, tn);
            println!(
                "  {:<28} {:<12} depth {}  tokens [{}]  ids [{}]",
                d.label,
                tn.to_string(),
                tn.depth(),
                tokens.join(" "),
                ids.join(" ")
            );
        }
    }
    Ok(th.len())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()?;
    Ok(())
}
