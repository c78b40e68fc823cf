//! Score gradients by the direct per-term path and by the aggregated
//! linear-time path: same numbers, very different cost as k grows.

use std::time::Instant;

use bgl::data::round_robin_parents;
use bgl::graph::LabelGraph;
use bgl::loss::{backward_fast, backward_naive, forward, LossConfig};
use bgl::oracle::random_scores;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = LossConfig::default();
    println!(
        "{:>6} {:>3} {:>5} {:>12} {:>12} {:>10}",
        "k", "m", "kj", "naive_us", "fast_us", "max_diff"
    );
    for (k, m, kj) in [(50, 2, 5), (200, 3, 20), (1000, 3, 100), (2000, 4, 100)] {
        let sizes = vec![kj; m];
        let graph = LabelGraph::new(k, sizes.clone(), round_robin_parents(k, &sizes)).unwrap();
        let scores = random_scores(&graph, 2.0, &mut rng);
        let post = forward(&graph, &scores).unwrap();
        let y = k / 3;

        let t = Instant::now();
        let naive = backward_naive(&graph, &post, y, &cfg).unwrap();
        let naive_us = t.elapsed().as_secs_f64() * 1e6;
        let t = Instant::now();
        let fast = backward_fast(&graph, &post, y, &cfg).unwrap();
        let fast_us = t.elapsed().as_secs_f64() * 1e6;

        println!(
            "{k:>6} {m:>3} {kj:>5} {naive_us:>12.1} {fast_us:>12.1} {:>10.2e}",
            naive.max_abs_diff(&fast)
        );
    }
}
