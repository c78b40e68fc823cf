//! Mini-batch SGD and top-1 evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::Dataset;
use crate::graph::LabelGraph;
use crate::loss::argmax;
use crate::model::{Model, ModelError, ModelGradient};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss diverged in epoch {epoch}")]
    Diverged { epoch: usize, report: TrainReport },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Plain l2 decay on every parameter, independent of the hierarchical prior.
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate on the training set every this many epochs (0 = only after
    /// the last epoch).
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Threads computing per-sample gradients. Batch sums always follow
    /// sample order, so results do not depend on this.
    pub workers: usize,
    /// Measure wall-clock time per epoch. When off the report records 0,
    /// which makes reports byte-comparable across runs.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.1,
            lr_decay: 0.97,
            weight_decay: 1e-4,
            seed: 0,
            eval_every: 1,
            checkpoint_path: None,
            workers: 1,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.workers == 0 {
            return bad("epochs, batch size and workers must be positive");
        }
        if !(0.0..=1.0).contains(&self.learning_rate) {
            return bad("learning rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lr_decay) {
            return bad("lr decay must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.weight_decay) {
            return bad("weight decay must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub fine_acc: f64,
    /// One accuracy per coarse type of the graph.
    pub coarse_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub eval: Option<Evaluation>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub m: usize,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn last_eval(&self) -> Option<&Evaluation> {
        self.epochs.iter().rev().find_map(|e| e.eval.as_ref())
    }

    /// `epoch,loss,fine_acc,coarse_acc_1,...,coarse_acc_m,seconds`; accuracy
    /// cells are empty for epochs without evaluation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,fine_acc");
        for j in 1..=self.m {
            let _ = write!(out, ",coarse_acc_{j}");
        }
        out.push_str(",seconds\n");
        for e in &self.epochs {
            let _ = write!(out, "{},{:?}", e.epoch, e.loss);
            match &e.eval {
                Some(ev) => {
                    let _ = write!(out, ",{:?}", ev.fine_acc);
                    for a in &ev.coarse_acc {
                        let _ = write!(out, ",{a:?}");
                    }
                }
                None => out.push_str(&",".repeat(self.m + 1)),
            }
            let _ = writeln!(out, ",{:.6}", e.seconds);
        }
        out
    }
}

/// Fine prediction and one coarse prediction per graph type. Coarse marginals
/// are group sums of the fine marginals, which also covers `Sm` models.
pub fn predict(
    model: &Model,
    graph: &LabelGraph,
    x: &[f64],
) -> Result<(usize, Vec<usize>), ModelError> {
    let lg = model.loss_graph(graph)?;
    let post = model.posterior(&lg, x)?;
    let fine = post.predict_fine();
    let coarse = if lg.m() == graph.m() {
        (0..graph.m()).map(|j| post.predict_coarse(j)).collect()
    } else {
        (0..graph.m())
            .map(|j| {
                let sums: Vec<f64> = (0..graph.coarse_size(j))
                    .map(|c| graph.members(j, c).iter().map(|&i| post.p[i]).sum())
                    .collect();
                argmax(&sums)
            })
            .collect()
    };
    Ok((fine, coarse))
}

/// Top-1 fine accuracy and per-type coarse accuracy; true coarse labels come
/// from the graph's parents of the fine label.
pub fn evaluate(
    model: &Model,
    graph: &LabelGraph,
    data: &Dataset,
) -> Result<Evaluation, TrainError> {
    check_data(model, graph, data)?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut fine_hits = 0usize;
    let mut coarse_hits = vec![0usize; graph.m()];
    for (x, &y) in data.features.iter().zip(&data.labels) {
        let (fine, coarse) = predict(model, graph, x)?;
        fine_hits += usize::from(fine == y);
        for (j, &c) in coarse.iter().enumerate() {
            coarse_hits[j] += usize::from(c == graph.parent(y, j));
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        fine_acc: fine_hits as f64 / n,
        coarse_acc: coarse_hits.iter().map(|&h| h as f64 / n).collect(),
    })
}

/// Runs SGD with `theta <- theta - lr * (grad + weight_decay * theta)`, where
/// `grad` is the batch-mean data gradient plus the prior gradient. Returns
/// the report and the trained model.
pub fn train(
    mut model: Model,
    graph: &LabelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TrainReport, Model), TrainError> {
    cfg.check()?;
    check_data(&model, graph, data)?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let pool = if cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| TrainError::InvalidConfig(e.to_string()))?,
        )
    } else {
        None
    };
    let lg = model.loss_graph(graph)?.into_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        m: graph.m(),
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut lr = cfg.learning_rate;
    let mut sample_loss = vec![0.0; data.len()];

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad =
                batch_gradient(&model, &lg, data, batch, pool.as_ref(), &mut sample_loss)?;
            grad.scale(1.0 / batch.len() as f64);
            let prior = model.add_prior(&lg, &mut grad, 1.0)?;
            for &s in batch {
                sample_loss[s] += prior;
            }
            if lr != 0.0 {
                if cfg.weight_decay != 0.0 {
                    grad.add_scaled(&model.params, cfg.weight_decay);
                }
                model.params.add_scaled(&grad, -lr);
            }
        }
        // summed in sample order so the value does not depend on the shuffle
        let loss = sample_loss.iter().sum::<f64>() / data.len() as f64;
        let eval = if epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
            Some(evaluate(&model, graph, data)?)
        } else {
            None
        };
        report.epochs.push(EpochRecord {
            epoch,
            loss,
            eval,
            seconds: if cfg.record_timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        if !loss.is_finite() {
            return Err(TrainError::Diverged { epoch, report });
        }
        lr *= cfg.lr_decay;
    }

    if let Some(path) = &cfg.checkpoint_path {
        fs::write(path, model.to_checkpoint_bytes()).map_err(|source| TrainError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok((report, model))
}

/// Summed data gradient over `batch`, reduced in batch order. Per-sample
/// data losses are stored into `sample_loss`.
fn batch_gradient(
    model: &Model,
    lg: &LabelGraph,
    data: &Dataset,
    batch: &[usize],
    pool: Option<&rayon::ThreadPool>,
    sample_loss: &mut [f64],
) -> Result<ModelGradient, TrainError> {
    let mut acc = model.params.zeros_like();
    match pool {
        None => {
            for &s in batch {
                sample_loss[s] =
                    model.accumulate_data_grad(lg, &data.features[s], data.labels[s], &mut acc)?;
            }
        }
        Some(pool) => {
            let parts: Vec<Result<(f64, ModelGradient), ModelError>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&s| model.backprop_data(lg, &data.features[s], data.labels[s]))
                    .collect()
            });
            for (&s, part) in batch.iter().zip(parts) {
                let (l, g) = part?;
                sample_loss[s] = l;
                acc.add_scaled(&g, 1.0);
            }
        }
    }
    Ok(acc)
}

fn check_data(model: &Model, graph: &LabelGraph, data: &Dataset) -> Result<(), TrainError> {
    if data.d != model.input_dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "dataset has {} features, model expects {}",
            data.d,
            model.input_dim()
        )));
    }
    if data.k != graph.k() {
        return Err(TrainError::ShapeMismatch(format!(
            "dataset declares k={}, graph has k={}",
            data.k,
            graph.k()
        )));
    }
    if let Some(&y) = data.labels.iter().find(|&&y| y >= graph.k()) {
        return Err(TrainError::ShapeMismatch(format!(
            "label {} out of range",
            y + 1
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExtractorSpec, Mode, ModelConfig};

    fn separable() -> (LabelGraph, Dataset) {
        let g = LabelGraph::softmax(2);
        let mut ds = Dataset::new(2, 2);
        for i in 0..20 {
            let t = i as f64 / 20.0;
            ds.push(vec![1.0 + t, 0.5 - t], 0);
            ds.push(vec![-1.0 - t, -0.5 + t], 1);
        }
        (g, ds)
    }

    fn sm_model(g: &LabelGraph, d: usize) -> Model {
        Model::new(
            ModelConfig::new(Mode::Sm, ExtractorSpec::identity(d)),
            g,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap()
    }

    #[test]
    fn separable_data_reaches_full_accuracy() {
        let (g, ds) = separable();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 8,
            ..Default::default()
        };
        let (report, _) = train(sm_model(&g, 2), &g, &ds, &cfg).unwrap();
        assert_eq!(report.last_eval().unwrap().fine_acc, 1.0);
        assert!(report.epochs[49].loss < report.epochs[0].loss);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (g, ds) = separable();
        let model = sm_model(&g, 2);
        let cfg = TrainConfig {
            epochs: 4,
            learning_rate: 0.0,
            ..Default::default()
        };
        let (report, trained) = train(model.clone(), &g, &ds, &cfg).unwrap();
        assert_eq!(trained, model);
        let l0 = report.epochs[0].loss;
        assert!(report.epochs.iter().all(|e| e.loss == l0));
    }

    #[test]
    fn csv_layout() {
        let report = TrainReport {
            m: 2,
            epochs: vec![
                EpochRecord {
                    epoch: 1,
                    loss: 0.5,
                    eval: None,
                    seconds: 0.0,
                },
                EpochRecord {
                    epoch: 2,
                    loss: 0.25,
                    eval: Some(Evaluation {
                        fine_acc: 0.5,
                        coarse_acc: vec![0.75, 1.0],
                    }),
                    seconds: 0.0,
                },
            ],
        };
        assert_eq!(
            report.to_csv(),
            "epoch,loss,fine_acc,coarse_acc_1,coarse_acc_2,seconds\n\
             1,0.5,,,,0.000000\n\
             2,0.25,0.5,0.75,1.0,0.000000\n"
        );
    }

    #[test]
    fn config_and_shape_errors() {
        let (g, ds) = separable();
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(
            train(sm_model(&g, 2), &g, &ds, &bad),
            Err(TrainError::InvalidConfig(_))
        ));
        assert!(matches!(
            train(sm_model(&g, 3), &g, &ds, &TrainConfig::default()),
            Err(TrainError::ShapeMismatch(_))
        ));
        assert!(matches!(
            train(
                sm_model(&g, 2),
                &g,
                &Dataset::new(2, 2),
                &TrainConfig::default()
            ),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn workers_do_not_change_results() {
        let g = LabelGraph::from_one_based(4, vec![2], vec![vec![1], vec![2], vec![1], vec![2]])
            .unwrap();
        let data = crate::data::generate(&crate::data::SynthSpec {
            k: 4,
            coarse_sizes: vec![2],
            d: 3,
            samples_per_class: 6,
            noise: 0.5,
            coarse_scale: 1.0,
            fine_scale: 0.5,
            seed: 1,
            random_parents: false,
        })
        .unwrap();
        assert_eq!(data.graph, g);
        let model = Model::new(
            ModelConfig::new(Mode::BglM, ExtractorSpec::hidden(3, 4, 3)).with_lambda(0.01),
            &g,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            record_timing: false,
            ..Default::default()
        };
        let a = train(model.clone(), &g, &data.train, &cfg).unwrap();
        let b = train(model, &g, &data.train, &TrainConfig { workers: 3, ..cfg }).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_checkpoint_bytes(), b.1.to_checkpoint_bytes());
    }
}
