//! Question relevancy ranking from fourteen language-independent distance
//! features and a small multi-task feed-forward network.
//!
//! The pipeline, module by module:
//!
//! - [`corpus`]: line-delimited pair records, ranking groups, label mapping
//!   and auxiliary-task sampling.
//! - [`textrep`]: tokenization, indicator vectors over word unigrams and
//!   trigrams, averaged word embeddings.
//! - [`distances`]: cosine, Manhattan, Bhattacharyya, Euclidean and Jaccard
//!   over those representations, assembled into a [`FeatureVector`].
//! - [`neuralnet`]: the shared-layer network, SGD with momentum, dropout and
//!   a finite-difference gradient checker.
//! - [`training`]: single- and multi-task loops, learning curves, checkpoints.
//! - [`ranker`]: model ranking plus retrieval-order and random baselines.
//! - [`evaluation`]: MAP, MRR, AvgRec, accuracy and a paired randomization test.
//! - [`cli`]: run configuration and the experiment commands behind the
//!   `qrank` binary.
//!
//! ```
//! use qrank::distances::{euclidean, jaccard, manhattan};
//!
//! let x = [1., 1., 0., 0., 1., 0., 1., 1., 0., 1.];
//! let y = [0., 0., 1., 0., 1., 0., 0., 0., 1., 1.];
//! assert_eq!(manhattan(&x, &y).unwrap(), 6.0);
//! assert_eq!(euclidean(&x, &y).unwrap(), 6f64.sqrt());
//! assert_eq!(jaccard(&x, &y).unwrap(), 0.2);
//! ```

pub mod cli;
pub mod corpus;
pub mod distances;
pub mod error;
pub mod evaluation;
pub mod neuralnet;
pub mod ranker;
pub mod synthetic;
pub mod textrep;
pub mod training;

pub use corpus::{PairRecord, RankingGroup, TaskId};
pub use distances::{FeatureMask, FeatureVector, Featurizer};
pub use error::{Error, Result};
pub use evaluation::EvalReport;
pub use neuralnet::{MlpModel, TrainConfig};
pub use training::{TaskStream, TrainedModel};
