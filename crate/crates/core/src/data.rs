//! Datasets of feature vectors with fine labels, and a generator with planted
//! fine/coarse structure.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::graph::LabelGraph;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: label {label} outside 1..={k}")]
    LabelOutOfRange { line: usize, label: usize, k: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// Labelled feature vectors. Labels are 0-based in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub k: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(d: usize, k: usize) -> Self {
        Self {
            d,
            k,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, y: usize) {
        debug_assert_eq!(x.len(), self.d);
        debug_assert!(y < self.k);
        self.features.push(x);
        self.labels.push(y);
    }

    /// Text form: `n=<n> d=<d> k=<k>` header, then one `<y> <x_1> ... <x_d>`
    /// line per sample with 1-based labels. Values use the shortest decimal
    /// form that parses back to the same double.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n={} d={} k={}", self.len(), self.d, self.k);
        for (x, &y) in self.features.iter().zip(&self.labels) {
            let _ = write!(out, "{}", y + 1);
            for v in x {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.split_once('#').map_or(l, |(a, _)| a).trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines.next().ok_or(DataError::Parse {
            line: 1,
            msg: "missing `n=<int> d=<int> k=<int>` header".into(),
        })?;
        let (mut n, mut d, mut k) = (None, None, None);
        for tok in header.split_whitespace() {
            let (key, val) = tok.split_once('=').ok_or_else(|| DataError::Parse {
                line: hline,
                msg: format!("unexpected header token `{tok}`"),
            })?;
            let v: usize = val.parse().map_err(|_| DataError::Parse {
                line: hline,
                msg: format!("`{val}` is not a non-negative integer"),
            })?;
            match key {
                "n" => n = Some(v),
                "d" => d = Some(v),
                "k" => k = Some(v),
                _ => {
                    return Err(DataError::Parse {
                        line: hline,
                        msg: format!("unknown header key `{key}`"),
                    })
                }
            }
        }
        let (Some(n), Some(d), Some(k)) = (n, d, k) else {
            return Err(DataError::Parse {
                line: hline,
                msg: "header must define n, d and k".into(),
            });
        };
        let mut ds = Dataset::new(d, k);
        for (ln, l) in lines {
            let mut toks = l.split_whitespace();
            let y_tok = toks.next().unwrap_or_default();
            let y: usize = y_tok.parse().map_err(|_| DataError::Parse {
                line: ln,
                msg: format!("label `{y_tok}` is not a non-negative integer"),
            })?;
            if y == 0 || y > k {
                return Err(DataError::LabelOutOfRange {
                    line: ln,
                    label: y,
                    k,
                });
            }
            let x = toks
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| DataError::Parse {
                            line: ln,
                            msg: format!("`{t}` is not a finite number"),
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if x.len() != d {
                return Err(DataError::Parse {
                    line: ln,
                    msg: format!("expected {d} features, found {}", x.len()),
                });
            }
            ds.push(x, y - 1);
        }
        if ds.len() != n {
            return Err(DataError::Parse {
                line: hline,
                msg: format!("header announces {n} samples, file has {}", ds.len()),
            });
        }
        Ok(ds)
    }
}

pub fn load_dataset(text: &str) -> Result<Dataset, DataError> {
    Dataset::parse(text)
}

pub fn save_dataset(ds: &Dataset) -> String {
    ds.to_text()
}

/// Parameters of the synthetic hierarchical generator.
///
/// Every coarse class of every type gets a center drawn from
/// `N(0, coarse_scale^2 I)`. A fine class center is the sum of its parents'
/// centers plus an offset from `N(0, fine_scale^2 I)`, and samples add noise
/// from `N(0, noise^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub k: usize,
    pub coarse_sizes: Vec<usize>,
    pub d: usize,
    pub samples_per_class: usize,
    pub noise: f64,
    pub coarse_scale: f64,
    pub fine_scale: f64,
    pub seed: u64,
    /// Shuffle fine classes before the round-robin parent assignment.
    pub random_parents: bool,
}

impl SynthSpec {
    /// The frozen benchmark: 64 fine classes, two coarse types of 8 classes,
    /// 32 features, 5 training samples per class.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            k: 64,
            coarse_sizes: vec![8, 8],
            d: 32,
            samples_per_class: 5,
            noise: BENCHMARK_NOISE,
            coarse_scale: 1.0,
            fine_scale: BENCHMARK_FINE_SCALE,
            seed,
            random_parents: false,
        }
    }

    pub fn check(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.k == 0 || self.d == 0 || self.samples_per_class == 0 {
            return bad("k, d and samples per class must be positive".into());
        }
        if self.coarse_sizes.contains(&0) {
            return bad("coarse sizes must be positive".into());
        }
        for (name, v) in [
            ("noise", self.noise),
            ("coarse scale", self.coarse_scale),
            ("fine scale", self.fine_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Noise level of the benchmark spec, chosen so a linear softmax classifier
/// reaches 0.4-0.8 test accuracy at 5 samples per class.
pub const BENCHMARK_NOISE: f64 = 2.0;
pub const BENCHMARK_FINE_SCALE: f64 = 0.5;
/// Held-out samples per class used when evaluating the benchmark.
pub const BENCHMARK_TEST_PER_CLASS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub graph: LabelGraph,
    pub train: Dataset,
    /// Held-out samples from the same class centers; empty unless requested.
    pub test: Dataset,
}

/// Balanced parent assignment. Type `j` walks the fine classes in a strided
/// order (stride = product of the earlier types' sizes, capped at `k`) and
/// deals parents round-robin, so group sizes within a type differ by at most
/// one and successive types split the classes along different axes.
pub fn round_robin_parents(k: usize, sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut rows = vec![vec![0; sizes.len()]; k];
    let mut stride = 1usize;
    for (j, &kj) in sizes.iter().enumerate() {
        let s = stride.min(k);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&i| (i % s, i / s));
        for (r, &i) in order.iter().enumerate() {
            rows[i][j] = r % kj;
        }
        stride = stride.saturating_mul(kj);
    }
    rows
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData, DataError> {
    generate_split(spec, 0)
}

/// Generates a training set and `test_per_class` held-out samples per fine
/// class from the same centers. Deterministic per `spec.seed`.
pub fn generate_split(spec: &SynthSpec, test_per_class: usize) -> Result<SynthData, DataError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.k;
    let d = spec.d;

    let rows = if spec.random_parents {
        let mut perm: Vec<usize> = (0..k).collect();
        let mut rows = vec![vec![0; spec.coarse_sizes.len()]; k];
        for (j, &kj) in spec.coarse_sizes.iter().enumerate() {
            perm.shuffle(&mut rng);
            for (r, &i) in perm.iter().enumerate() {
                rows[i][j] = r % kj;
            }
        }
        rows
    } else {
        round_robin_parents(k, &spec.coarse_sizes)
    };
    let graph = LabelGraph::new(k, spec.coarse_sizes.clone(), rows)
        .map_err(|e| DataError::InvalidSpec(e.to_string()))?;

    let mut gauss = |scale: f64| -> Vec<f64> {
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect()
    };
    let coarse_centers: Vec<Vec<Vec<f64>>> = spec
        .coarse_sizes
        .iter()
        .map(|&kj| (0..kj).map(|_| gauss(spec.coarse_scale)).collect())
        .collect();
    let fine_centers: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut c = gauss(spec.fine_scale);
            for (j, &p) in graph.parents_of(i).iter().enumerate() {
                for (a, b) in c.iter_mut().zip(&coarse_centers[j][p]) {
                    *a += b;
                }
            }
            c
        })
        .collect();

    let mut draw = |per_class: usize| {
        let mut ds = Dataset::new(d, k);
        for (i, center) in fine_centers.iter().enumerate() {
            for _ in 0..per_class {
                let x = gauss(spec.noise)
                    .into_iter()
                    .zip(center)
                    .map(|(n, c)| c + n)
                    .collect();
                ds.push(x, i);
            }
        }
        ds
    };
    let train = draw(spec.samples_per_class);
    let test = draw(test_per_class);
    Ok(SynthData { graph, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            k: 6,
            coarse_sizes: vec![2, 3],
            d: 4,
            samples_per_class: 3,
            noise: 0.5,
            coarse_scale: 1.0,
            fine_scale: 0.3,
            seed: 11,
            random_parents: false,
        }
    }

    #[test]
    fn round_robin_example() {
        assert_eq!(
            round_robin_parents(4, &[2]),
            vec![vec![0], vec![1], vec![0], vec![1]]
        );
    }

    #[test]
    fn round_robin_is_balanced_and_orthogonal() {
        let rows = round_robin_parents(64, &[8, 8]);
        for j in 0..2 {
            let mut counts = [0; 8];
            rows.iter().for_each(|r| counts[r[j]] += 1);
            assert!(counts.iter().all(|&c| c == 8));
        }
        let mut pairs: Vec<_> = rows.iter().map(|r| (r[0], r[1])).collect();
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs.len(), 64);

        for (k, sizes) in [(10, vec![8, 8]), (7, vec![3, 2, 5]), (5, vec![7])] {
            let rows = round_robin_parents(k, &sizes);
            for (j, &kj) in sizes.iter().enumerate() {
                let mut counts = vec![0; kj];
                rows.iter().for_each(|r| counts[r[j]] += 1);
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                assert!(hi - lo <= 1, "k={k} sizes={sizes:?} type {j}: {counts:?}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate_split(&spec(), 2).unwrap();
        let b = generate_split(&spec(), 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 18);
        assert_eq!(a.test.len(), 12);
        for i in 0..6 {
            assert_eq!(a.train.labels.iter().filter(|&&y| y == i).count(), 3);
        }
        let c = generate(&SynthSpec { seed: 12, ..spec() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn zero_noise_collapses_shared_parents() {
        let s = SynthSpec {
            k: 4,
            coarse_sizes: vec![2],
            noise: 0.0,
            fine_scale: 0.0,
            ..spec()
        };
        let data = generate(&s).unwrap();
        let at = |y: usize| {
            &data.train.features[data.train.labels.iter().position(|&l| l == y).unwrap()]
        };
        assert_eq!(at(0), at(2));
        assert_eq!(at(1), at(3));
        assert_ne!(at(0), at(1));
        assert!(data
            .train
            .features
            .iter()
            .zip(&data.train.labels)
            .all(|(x, &y)| x == at(y)));
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(
            generate(&SynthSpec {
                noise: -1.0,
                ..spec()
            }),
            Err(DataError::InvalidSpec(_))
        ));
        assert!(generate(&SynthSpec { k: 0, ..spec() }).is_err());
        assert!(generate(&SynthSpec {
            coarse_sizes: vec![0],
            ..spec()
        })
        .is_err());
    }

    #[test]
    fn random_parents_stay_balanced() {
        let data = generate(&SynthSpec {
            random_parents: true,
            ..spec()
        })
        .unwrap();
        for j in 0..2 {
            let sizes: Vec<usize> = data
                .graph
                .groups(j)
                .unwrap()
                .iter()
                .map(|g| g.members.len())
                .collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn parse_examples() {
        let ds = load_dataset("n=1 d=2 k=1\n1 0.5 -0.25\n").unwrap();
        assert_eq!(ds.labels, vec![0]);
        assert_eq!(ds.features, vec![vec![0.5, -0.25]]);

        assert!(matches!(
            load_dataset("n=1 d=2 k=1\n0 0.5 -0.25\n"),
            Err(DataError::LabelOutOfRange {
                line: 2,
                label: 0,
                ..
            })
        ));
        assert!(matches!(
            load_dataset("n=1 d=2 k=3\n4 0.5 -0.25\n"),
            Err(DataError::LabelOutOfRange { label: 4, .. })
        ));
        assert!(matches!(
            load_dataset("n=1 d=2 k=1\n1 0.5\n"),
            Err(DataError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            load_dataset("n=2 d=2 k=1\n1 0.5 1\n"),
            Err(DataError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            load_dataset("n=1 d=1 k=1\n1 nan\n"),
            Err(DataError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn text_round_trip_is_lossless() {
        let data = generate(&spec()).unwrap();
        let text = save_dataset(&data.train);
        assert_eq!(load_dataset(&text).unwrap(), data.train);
    }
}
