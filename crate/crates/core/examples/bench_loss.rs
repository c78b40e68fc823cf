//! Median per-call cost of the softmax and BGL loss layers over a small grid.
//!
//! cargo run --release --example bench_loss

use bgl::bench::{lookup, run, to_csv, BenchSpec, Variant};

fn main() {
    let spec = BenchSpec {
        ks: vec![100, 1000, 4000],
        ms: vec![1, 3],
        kjs: vec![10, 100],
        ..Default::default()
    };
    let rows = run(&spec).expect("valid grid");
    print!("{}", to_csv(&rows));
    for &k in &spec.ks {
        let naive = lookup(&rows, k, 3, 100, Variant::BglBackwardNaive).unwrap();
        let fast = lookup(&rows, k, 3, 100, Variant::BglBackwardFast).unwrap();
        let fwd = lookup(&rows, k, 3, 100, Variant::BglForward).unwrap();
        let sm = lookup(&rows, k, 3, 100, Variant::SoftmaxForward).unwrap();
        eprintln!(
            "k={k} m=3 kj=100: backward speedup {:.1}x, forward overhead {:.2}x",
            naive / fast,
            fwd / sm
        );
    }
}
