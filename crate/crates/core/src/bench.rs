//! Timing harness for the loss layer: BGL forward and both backward paths
//! against a plain softmax layer on random scores.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::round_robin_parents;
use crate::graph::LabelGraph;
use crate::loss::{self, LossConfig, ScoreSet};
use crate::softmax;

/// Largest `k * m * sum_j k_j` (work of the direct backward path) accepted.
pub const MAX_NAIVE_WORK: u128 = 10_000_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("invalid bench spec: {0}")]
    InvalidSpec(String),
    #[error("k={k} m={m} kj={kj} exceeds the work limit of the direct backward path")]
    InstanceTooLarge { k: usize, m: usize, kj: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    SoftmaxForward,
    SoftmaxBackward,
    BglForward,
    BglBackwardNaive,
    BglBackwardFast,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SoftmaxForward,
        Variant::SoftmaxBackward,
        Variant::BglForward,
        Variant::BglBackwardNaive,
        Variant::BglBackwardFast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SoftmaxForward => "softmax_forward",
            Variant::SoftmaxBackward => "softmax_backward",
            Variant::BglForward => "bgl_forward",
            Variant::BglBackwardNaive => "bgl_backward_naive",
            Variant::BglBackwardFast => "bgl_backward_fast",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub ks: Vec<usize>,
    pub ms: Vec<usize>,
    /// Size of every coarse type.
    pub kjs: Vec<usize>,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            ks: vec![1000],
            ms: vec![3],
            kjs: vec![100],
            repetitions: 31,
            warmup: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub m: usize,
    pub kj: usize,
    pub variant: Variant,
    pub median_ns: f64,
}

/// Runs `f` `warmup` times, then `repetitions` timed rounds and returns the
/// median nanoseconds per call. Fast calls are batched so each round lasts
/// at least ~20us on the monotonic clock.
pub fn median_ns<F: FnMut()>(mut f: F, repetitions: usize, warmup: usize) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let probe = Instant::now();
    f();
    let once = probe.elapsed().max(Duration::from_nanos(1));
    let inner = (Duration::from_micros(20).as_nanos() / once.as_nanos()).clamp(1, 10_000) as u32;
    let mut samples: Vec<f64> = (0..repetitions)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..inner {
                f();
            }
            t.elapsed().as_nanos() as f64 / inner as f64
        })
        .collect();
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

pub fn run(spec: &BenchSpec) -> Result<Vec<BenchRow>, BenchError> {
    if spec.repetitions == 0 {
        return Err(BenchError::InvalidSpec(
            "repetitions must be positive".into(),
        ));
    }
    if spec.ks.is_empty() || spec.ms.is_empty() || spec.kjs.is_empty() {
        return Err(BenchError::InvalidSpec(
            "k, m and kj lists must be non-empty".into(),
        ));
    }
    if spec.ks.contains(&0) || spec.kjs.contains(&0) {
        return Err(BenchError::InvalidSpec("k and kj must be positive".into()));
    }
    for &k in &spec.ks {
        for &m in &spec.ms {
            for &kj in &spec.kjs {
                let work = k as u128 * m as u128 * (m as u128 * kj as u128);
                if work > MAX_NAIVE_WORK {
                    return Err(BenchError::InstanceTooLarge { k, m, kj });
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::new();
    for &k in &spec.ks {
        for &m in &spec.ms {
            for &kj in &spec.kjs {
                let sizes = vec![kj; m];
                let graph = LabelGraph::new(k, sizes.clone(), round_robin_parents(k, &sizes))
                    .map_err(|e| BenchError::InvalidSpec(e.to_string()))?;
                let mut normal = || -> f64 { rng.sample(StandardNormal) };
                let scores = ScoreSet {
                    fine: (0..k).map(|_| normal()).collect(),
                    coarse: sizes
                        .iter()
                        .map(|&s| (0..s).map(|_| normal()).collect())
                        .collect(),
                };
                let y = rng.random_range(0..k);
                for variant in Variant::ALL {
                    let ns = time_variant(variant, &graph, &scores, y, spec);
                    rows.push(BenchRow {
                        k,
                        m,
                        kj,
                        variant,
                        median_ns: ns,
                    });
                }
            }
        }
    }
    Ok(rows)
}

fn time_variant(
    variant: Variant,
    graph: &LabelGraph,
    scores: &ScoreSet,
    y: usize,
    spec: &BenchSpec,
) -> f64 {
    let cfg = LossConfig::default();
    let post = loss::forward(graph, scores).expect("bench scores match graph");
    let (reps, warm) = (spec.repetitions, spec.warmup);
    match variant {
        Variant::SoftmaxForward => median_ns(
            || {
                let p = softmax::softmax(black_box(&scores.fine));
                black_box(-p[y].ln());
            },
            reps,
            warm,
        ),
        Variant::SoftmaxBackward => median_ns(
            || {
                black_box(softmax::cross_entropy_grad(black_box(&scores.fine), y));
            },
            reps,
            warm,
        ),
        Variant::BglForward => median_ns(
            || {
                let post = loss::forward(graph, black_box(scores)).expect("shapes checked");
                black_box(loss::nll_from_posterior(graph, &post, y, &cfg));
            },
            reps,
            warm,
        ),
        Variant::BglBackwardNaive => median_ns(
            || {
                black_box(
                    loss::backward_naive(graph, black_box(&post), y, &cfg).expect("shapes checked"),
                );
            },
            reps,
            warm,
        ),
        Variant::BglBackwardFast => median_ns(
            || {
                black_box(
                    loss::backward_fast(graph, black_box(&post), y, &cfg).expect("shapes checked"),
                );
            },
            reps,
            warm,
        ),
    }
}

/// `k,m,kj,variant,median_ns`
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("k,m,kj,variant,median_ns\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.1}",
            r.k,
            r.m,
            r.kj,
            r.variant.name(),
            r.median_ns
        );
    }
    out
}

/// Median time of `variant` at `(k, m, kj)`, if present in `rows`.
pub fn lookup(rows: &[BenchRow], k: usize, m: usize, kj: usize, variant: Variant) -> Option<f64> {
    rows.iter()
        .find(|r| r.k == k && r.m == m && r.kj == kj && r.variant == variant)
        .map(|r| r.median_ns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_repetitions_rejected() {
        let spec = BenchSpec {
            repetitions: 0,
            ..Default::default()
        };
        assert!(matches!(run(&spec), Err(BenchError::InvalidSpec(_))));
    }

    #[test]
    fn oversized_grid_rejected() {
        let spec = BenchSpec {
            ks: vec![1_000_000],
            ms: vec![10],
            kjs: vec![1000],
            ..Default::default()
        };
        assert!(matches!(
            run(&spec),
            Err(BenchError::InstanceTooLarge { .. })
        ));
    }

    #[test]
    fn small_grid_produces_all_rows() {
        let spec = BenchSpec {
            ks: vec![20, 40],
            ms: vec![0, 2],
            kjs: vec![3],
            repetitions: 3,
            warmup: 1,
            seed: 1,
        };
        let rows = run(&spec).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 5);
        assert!(rows.iter().all(|r| r.median_ns > 0.0));
        let csv = to_csv(&rows);
        assert!(csv.starts_with("k,m,kj,variant,median_ns\n20,0,3,softmax_forward,"));
        assert_eq!(csv.lines().count(), 21);
    }

    #[test]
    fn median_of_odd_and_even() {
        let mut calls = 0;
        let v = median_ns(|| calls += 1, 4, 2);
        assert!(v >= 0.0);
        assert!(calls >= 7);
    }
}
