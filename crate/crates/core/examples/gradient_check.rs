//! Finite-difference check of the backpropagated gradients, first on a
//! single model and then through the same routine `qrank gradcheck` uses.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use std::collections::BTreeMap;

use qrank::cli::cmd_gradcheck;
use qrank::corpus::{Label, TaskId};
use qrank::distances::{FeatureMask, FeatureOptions};
use qrank::neuralnet::{grad_check, grad_check_with, init_model, Activation, Matrix};
use qrank::TrainConfig;

fn main() -> qrank::Result<()> {
    let config = TrainConfig {
        shared_units: 6,
        task_units: 4,
        activation: Activation::Tanh,
        seed: 7,
        features: FeatureOptions { mask: FeatureMask::from_selection("unigrams")?, ..Default::default() },
        ..TrainConfig::default()
    };
    let model = init_model(&config, &BTreeMap::from([(TaskId::Nli, 3)]))?;
    let batch = Matrix::from_rows(&[
        vec![0.2, 1.0, -0.4, 1.4, 0.3],
        vec![-0.7, 0.1, 0.9, 0.0, 0.5],
        vec![1.1, -0.3, 0.2, 0.6, -1.2],
    ])?;
    let labels = [Label::new(0, 3)?, Label::new(2, 3)?, Label::new(1, 3)?];

    let clean = grad_check(&model, &batch, &labels, TaskId::Nli, 1e-5)?;
    let broken = grad_check_with(&model, &batch, &labels, TaskId::Nli, 1e-5, |g| g[3] *= 1.01)?;
    println!("tanh model, 3 classes: max relative error {clean:.2e}");
    println!("same model with one gradient off by 1%: {broken:.2e}");

    let outcome = cmd_gradcheck(0, 20, false)?;
    println!("{}", outcome.line());
    Ok(())
}
