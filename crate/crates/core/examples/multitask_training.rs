//! Single-task training next to multi-task training with a QA auxiliary
//! stream, on generated data. Prints the loss curve and dev MAP of both.
//!
//! ```text
//! cargo run --release --example multitask_training
//! ```

use qrank::corpus::{group_records, TaskId};
use qrank::distances::{FeatureOptions, Featurizer};
use qrank::evaluation::evaluate;
use qrank::ranker::{rank_featurized, FeaturizedGroup};
use qrank::synthetic::{aux_records, embedding_entries, qq_records, SyntheticSpec};
use qrank::textrep::EmbeddingTable;
use qrank::training::train;
use qrank::{TaskStream, TrainConfig};

fn main() -> qrank::Result<()> {
    let spec = SyntheticSpec { groups: 150, seed: 3, ..Default::default() };
    let train_recs = qq_records(&spec, "T");
    let dev_recs = qq_records(&SyntheticSpec { groups: 40, seed: 4, ..spec.clone() }, "D");
    let qa = aux_records(TaskId::Qa, train_recs.len(), &spec);

    let texts: Vec<&str> = train_recs.iter().flat_map(|r| [r.text_a.as_str(), r.text_b.as_str()]).collect();
    let table = EmbeddingTable::from_entries(embedding_entries(spec.vocab_size, 20, 1))?;
    let featurizer = Featurizer::fit(&texts, table, FeatureOptions::default())?;

    let main = TaskStream::from_records(TaskId::Qq, &train_recs, &featurizer, 0)?;
    let aux = TaskStream::from_records(TaskId::Qa, &qa, &featurizer, 1)?;
    let dev: Vec<FeaturizedGroup> = group_records(&dev_recs)?
        .into_iter()
        .map(|g| FeaturizedGroup::new(g, &featurizer))
        .collect::<qrank::Result<_>>()?;

    for (name, aux_streams) in [("STL", vec![]), ("MTL (QA aux)", vec![aux])] {
        let config = TrainConfig {
            epochs: 30,
            aux_tasks: aux_streams.iter().map(|s| s.task).collect(),
            ..TrainConfig::default()
        };
        let trained = train(&config, &main, &aux_streams)?;
        let rankings = dev.iter().map(|g| rank_featurized(&trained.model, g)).collect::<qrank::Result<Vec<_>>>()?;
        let report = evaluate(&rankings)?;
        println!("{name}: dev MAP {:.2}, Acc {:.2}", report.map_score, report.accuracy.unwrap_or(f64::NAN));
        for (task, losses) in &trained.log.epoch_loss {
            let picks: Vec<String> = losses.iter().step_by(5).map(|l| format!("{l:.3}")).collect();
            println!("  {task} loss every 5 epochs: {}", picks.join(" "));
        }
    }
    Ok(())
}
