//! The fourteen distance features for one question pair.
//!
//! ```text
//! cargo run --example distance_features
//! ```

use qrank::distances::{slot_name, FeatureOptions, Featurizer};
use qrank::textrep::EmbeddingTable;

fn main() -> qrank::Result<()> {
    let corpus = [
        "How do I reset my router password?",
        "Forgot the admin password of my router, how to reset it",
        "Best beaches near Doha for a weekend trip",
    ];
    // A toy embedding table; real runs load one with `textrep::load_embeddings`.
    let table = EmbeddingTable::from_entries(vec![
        ("router".to_string(), vec![0.9, 0.1, 0.0]),
        ("password".to_string(), vec![0.8, 0.3, 0.1]),
        ("reset".to_string(), vec![0.7, 0.2, 0.2]),
        ("beaches".to_string(), vec![0.0, 0.1, 0.9]),
        ("weekend".to_string(), vec![0.1, 0.0, 0.8]),
    ])?;
    let featurizer = Featurizer::fit(&corpus, table, FeatureOptions::default())?;
    println!("unigram vocabulary: {} types, trigram vocabulary: {} types", featurizer.unigram.len(), featurizer.trigram.len());

    for other in &corpus[1..] {
        let fv = featurizer.features(corpus[0], other)?;
        println!("\n{:?}\n  vs {:?}", corpus[0], other);
        for (slot, value) in fv.values.iter().enumerate() {
            println!("  {:<24} {:>10.4}", slot_name(slot), value);
        }
    }
    Ok(())
}
