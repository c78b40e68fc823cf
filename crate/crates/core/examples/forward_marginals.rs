//! Exact fine and coarse marginals for a small two-type label graph, checked
//! against brute-force enumeration of every joint assignment.

use bgl::graph::LabelGraph;
use bgl::loss::{forward, nll, LossConfig, ScoreSet};
use bgl::oracle::enumerate_joint;

fn main() {
    // five dishes; type 1 = cuisine (3 kinds), type 2 = restaurant (2)
    let graph = LabelGraph::from_one_based(
        5,
        vec![3, 2],
        vec![vec![1, 1], vec![1, 2], vec![2, 1], vec![3, 2], vec![3, 2]],
    )
    .expect("valid graph");
    let scores = ScoreSet {
        fine: vec![1.2, 0.3, -0.5, 0.8, 0.1],
        coarse: vec![vec![0.5, -1.0, 0.2], vec![0.0, 0.7]],
    };

    let post = forward(&graph, &scores).expect("scores match graph");
    println!("log z = {:.6}", post.log_z);
    for (i, p) in post.p.iter().enumerate() {
        println!("p(fine {}) = {p:.6}", i + 1);
    }
    for (j, pj) in post.p_coarse.iter().enumerate() {
        let shown: Vec<String> = pj.iter().map(|v| format!("{v:.6}")).collect();
        println!("p(type {}) = [{}]", j + 1, shown.join(", "));
    }

    let table = enumerate_joint(&graph, &scores).expect("small instance");
    println!(
        "enumeration: {} supported joint states, z = {:.6} (forward: {:.6})",
        table.states.len(),
        table.z,
        post.log_z.exp()
    );

    let cfg = LossConfig::default();
    for y in 0..graph.k() {
        println!(
            "nll(y = {}) = {:.6}",
            y + 1,
            nll(&graph, &scores, y, &cfg).unwrap()
        );
    }
}
