//! Finite-difference check of every analytic gradient on a random graph, plus
//! the deliberately broken variant to show the check has teeth.

use bgl::oracle::{gradcheck, random_graph, GradcheckOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let graph = random_graph(7, &[3, 2, 4], &mut ChaCha8Rng::seed_from_u64(5));
    for sabotage in [false, true] {
        let opts = GradcheckOptions {
            instances: 30,
            sabotage,
            ..Default::default()
        };
        let r = gradcheck(&graph, &opts).expect("small instance");
        println!(
            "sabotage={sabotage}: nll direct {:.2e}, nll fast {:.2e}, prior {:.2e}, model {:.2e} -> {}",
            r.nll_naive,
            r.nll_fast,
            r.prior,
            r.model,
            if r.max() < 1e-4 { "ok" } else { "FAILED" }
        );
    }
}
