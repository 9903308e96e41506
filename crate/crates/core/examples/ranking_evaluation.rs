//! Retrieval-order and random baselines on hand-made groups, the metric
//! report, and a paired randomization test between the two.
//!
//! ```text
//! cargo run --example ranking_evaluation
//! ```

use qrank::corpus::{Candidate, RankingGroup};
use qrank::evaluation::{evaluate, paired_randomization_test};
use qrank::ranker::{ir_baseline, random_baseline};
use qrank::EvalReport;

fn group(id: &str, relevant_ranks: &[u32]) -> RankingGroup {
    RankingGroup {
        group_id: id.into(),
        original_text: format!("question {id}"),
        candidates: (1..=10)
            .map(|r| Candidate {
                pair_id: format!("{id}_R{r}"),
                text: format!("candidate {r}"),
                gold_relevant: relevant_ranks.contains(&r),
                orig_rank: r,
            })
            .collect(),
    }
}

fn main() -> qrank::Result<()> {
    let groups = [
        group("Q1", &[1, 2, 5]),
        group("Q2", &[3]),
        group("Q3", &[1, 4, 6, 9]),
        group("Q4", &[2, 8]),
        group("Q5", &[]),
    ];
    let ir = evaluate(&groups.iter().map(ir_baseline).collect::<Vec<_>>())?;
    let random_runs = (0..50)
        .map(|seed| evaluate(&groups.iter().map(|g| random_baseline(g, seed)).collect::<Vec<_>>()))
        .collect::<qrank::Result<Vec<_>>>()?;
    let random = EvalReport::mean_of(&random_runs).expect("50 runs");

    print!("{}", ir.to_table("IR order"));
    print!("{}", random.to_table("Random (mean of 50 seeds)"));
    for (q, ap) in &ir.per_query_ap {
        println!("  {q}: AP {:.3} (IR) vs {:.3} (random)", ap, random.per_query_ap[q]);
    }
    let p = paired_randomization_test(&ir.per_query_ap, &random.per_query_ap, 10_000, 0)?;
    println!("IR vs random: p = {p:.4}");
    Ok(())
}
