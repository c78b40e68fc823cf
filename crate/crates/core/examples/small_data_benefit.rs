//! Plain softmax vs BGL with a shared feature on the synthetic hierarchical
//! benchmark, averaged over several seeds, for a few training-set sizes.
//!
//! cargo run --release --example small_data_benefit -- [noise] [fine_scale] [lambda]

use bgl::data::{generate_split, SynthSpec, BENCHMARK_TEST_PER_CLASS};
use bgl::model::{ExtractorSpec, Mode, Model, ModelConfig};
use bgl::train::{evaluate, train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("number"))
        .collect();
    let base = SynthSpec::benchmark(0);
    let noise = args.first().copied().unwrap_or(base.noise);
    let fine_scale = args.get(1).copied().unwrap_or(base.fine_scale);
    let lambda = args.get(2).copied().unwrap_or(1e-4);
    println!("noise={noise} fine_scale={fine_scale} lambda={lambda}");
    println!("n/class  sm_acc  bgl1_acc  bgl1_coarse_1  bgl1_coarse_2");

    for n in [5, 10, 20] {
        let mut sm = 0.0;
        let mut bgl = 0.0;
        let mut coarse = [0.0; 2];
        let seeds = 5;
        for seed in 0..seeds {
            let spec = SynthSpec {
                samples_per_class: n,
                noise,
                fine_scale,
                ..SynthSpec::benchmark(seed)
            };
            let data = generate_split(&spec, BENCHMARK_TEST_PER_CLASS).unwrap();
            for mode in [Mode::Sm, Mode::Bgl1] {
                let cfg =
                    ModelConfig::new(mode, ExtractorSpec::identity(spec.d)).with_lambda(lambda);
                let model =
                    Model::new(cfg, &data.graph, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let tc = TrainConfig {
                    seed,
                    eval_every: 0,
                    ..Default::default()
                };
                let (_, model) = train(model, &data.graph, &data.train, &tc).unwrap();
                let ev = evaluate(&model, &data.graph, &data.test).unwrap();
                match mode {
                    Mode::Sm => sm += ev.fine_acc,
                    _ => {
                        bgl += ev.fine_acc;
                        coarse[0] += ev.coarse_acc[0];
                        coarse[1] += ev.coarse_acc[1];
                    }
                }
            }
        }
        let s = seeds as f64;
        println!(
            "{n:>7}  {:.4}  {:.4}    {:.4}         {:.4}",
            sm / s,
            bgl / s,
            coarse[0] / s,
            coarse[1] / s
        );
    }
}
