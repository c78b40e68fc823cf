//! Structured softmax over bipartite-graph labels.
//!
//! Fine-grained classes are tied to `m` types of coarse labels through a star
//! of bipartite graphs ([`graph::LabelGraph`]). The crate provides exact
//! inference over the joint fine/coarse distribution, closed-form score
//! gradients (a direct path and a linear-time aggregated path), a
//! hierarchical prior coupling fine and coarse weight columns, small
//! trainable models, a synthetic hierarchical data generator and a
//! benchmark harness.
//!
//! ```
//! use bgl::graph::LabelGraph;
//! use bgl::loss::{forward, ScoreSet};
//!
//! let graph = LabelGraph::from_one_based(3, vec![2], vec![vec![1], vec![1], vec![2]]).unwrap();
//! let scores = ScoreSet { fine: vec![0.0; 3], coarse: vec![vec![2f64.ln(), 0.0]] };
//! let post = forward(&graph, &scores).unwrap();
//! assert!((post.p_coarse[0][0] - 0.8).abs() < 1e-12);
//! ```

#![allow(clippy::needless_range_loop)]

pub mod bench;
#[cfg(feature = "oracle")]
pub mod cli;
pub mod data;
pub mod graph;
pub mod loss;
pub mod model;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod params;
pub mod softmax;
pub mod train;

pub use graph::{CoarseGroup, GraphError, LabelGraph};
pub use loss::{LossConfig, LossError, Posterior, ScoreGradient, ScoreSet};
pub use model::{ExtractorKind, ExtractorSpec, Mode, Model, ModelConfig};
pub use params::ParamSet;
