//! The prior that pulls each fine weight column toward the columns of its
//! coarse parents, and what a gradient step on it alone does.

use bgl::graph::LabelGraph;
use bgl::loss::{prior_gradient, prior_penalty};
use bgl::params::ParamSet;
use ndarray::array;

fn main() {
    let graph =
        LabelGraph::from_one_based(4, vec![2], vec![vec![1], vec![1], vec![2], vec![2]]).unwrap();
    let mut params = ParamSet {
        fine: array![[1.0, 1.4, -2.0, -1.0], [0.0, 0.5, 1.0, 2.0]],
        coarse: vec![array![[0.0, 0.0], [0.0, 0.0]]],
    };
    let lambda = 0.5;

    for step in 0..=5 {
        let penalty = prior_penalty(&graph, &params, lambda).unwrap();
        println!("step {step}: penalty {penalty:.6}");
        println!(
            "  coarse columns {:?}",
            params.coarse[0]
                .t()
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect::<Vec<_>>()
        );
        let g = prior_gradient(&graph, &params, lambda).unwrap();
        params.fine.scaled_add(-0.5, &g.fine);
        params.coarse[0].scaled_add(-0.5, &g.coarse[0]);
    }
}
