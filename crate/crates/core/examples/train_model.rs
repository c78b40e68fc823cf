//! End-to-end run: generate hierarchical data, train the three output-layer
//! wirings, save a checkpoint, reload it and evaluate on held-out samples.

use bgl::data::{generate_split, SynthSpec};
use bgl::model::{ExtractorSpec, Mode, Model, ModelConfig};
use bgl::train::{evaluate, train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec {
        samples_per_class: 10,
        ..SynthSpec::benchmark(3)
    };
    let data = generate_split(&spec, 10)?;
    let dir = std::env::temp_dir().join("bgl-train-example");
    std::fs::create_dir_all(&dir)?;

    for mode in [Mode::Sm, Mode::Bgl1, Mode::BglM] {
        let mut cfg =
            ModelConfig::new(mode, ExtractorSpec::hidden(spec.d, 64, 32)).with_lambda(1e-3);
        if mode == Mode::BglM {
            cfg.coarse_extractor = Some(ExtractorSpec::hidden(spec.d, 64, 32));
        }
        let model = Model::new(cfg, &data.graph, &mut ChaCha8Rng::seed_from_u64(1))?;
        let path = dir.join(format!("{mode}.bglm"));
        let tc = TrainConfig {
            epochs: 60,
            learning_rate: 0.05,
            eval_every: 20,
            workers: 4,
            checkpoint_path: Some(path.clone()),
            ..Default::default()
        };
        let (report, _) = train(model, &data.graph, &data.train, &tc)?;
        for e in report.epochs.iter().filter(|e| e.eval.is_some()) {
            println!(
                "{mode:>5} epoch {:>3} loss {:.4} train acc {:.3}",
                e.epoch,
                e.loss,
                e.eval.as_ref().unwrap().fine_acc
            );
        }

        let restored = Model::read_checkpoint(std::fs::File::open(&path)?)?;
        let ev = evaluate(&restored, &data.graph, &data.test)?;
        println!(
            "{mode:>5} test fine acc {:.3}, coarse acc {:?} ({} params, {})",
            ev.fine_acc,
            ev.coarse_acc
                .iter()
                .map(|a| format!("{a:.3}"))
                .collect::<Vec<_>>(),
            restored.params.num_params(),
            path.display()
        );
    }
    Ok(())
}
