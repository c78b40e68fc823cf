//! Slow, transparent reference computations: exhaustive joint-state
//! enumeration, central finite differences, and a gradient check that ties
//! them to the closed-form passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::graph::LabelGraph;
use crate::loss::{self, LossConfig, LossError, ScoreSet};
use crate::model::{ExtractorSpec, Mode, Model, ModelConfig, ModelError};
use crate::params::ParamSet;

/// Upper bound on `k * prod_j k_j` for [`enumerate_joint`].
pub const MAX_JOINT_STATES: u128 = 10_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("joint state space has {states} states, limit is {MAX_JOINT_STATES}")]
    InstanceTooLarge { states: u128 },
    #[error("loss is not finite at coordinate {coord}")]
    NonFiniteLoss { coord: usize },
    #[error("step must be positive, got {0}")]
    BadStep(f64),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One joint assignment `(i, c_1, ..., c_m)` with non-zero unnormalized score.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub fine: usize,
    pub coarse: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    pub states: Vec<JointState>,
    pub z: f64,
    pub p: Vec<f64>,
    pub p_coarse: Vec<Vec<f64>>,
}

/// Visits every combination of fine class and coarse labels, masks it with
/// the association matrices and sums the surviving scores
/// `e^{f_i} prod_j g^j_{i c_j} e^{f^j_{c_j}}` into `z` and the marginals.
pub fn enumerate_joint(graph: &LabelGraph, scores: &ScoreSet) -> Result<JointTable, OracleError> {
    scores.check(graph)?;
    let states_total = graph
        .coarse_sizes()
        .iter()
        .fold(graph.k() as u128, |acc, &s| acc.saturating_mul(s as u128));
    if states_total > MAX_JOINT_STATES {
        return Err(OracleError::InstanceTooLarge {
            states: states_total,
        });
    }
    let k = graph.k();
    let m = graph.m();
    let mut states = Vec::new();
    let mut z = 0.0;
    let mut p = vec![0.0; k];
    let mut p_coarse: Vec<Vec<f64>> = graph.coarse_sizes().iter().map(|&s| vec![0.0; s]).collect();

    for i in 0..k {
        let mut labels = vec![0usize; m];
        loop {
            let mut score = scores.fine[i].exp();
            for (j, &c) in labels.iter().enumerate() {
                let g = if graph.connected(i, j, c) { 1.0 } else { 0.0 };
                score *= g * scores.coarse[j][c].exp();
            }
            if score != 0.0 {
                z += score;
                p[i] += score;
                for (j, &c) in labels.iter().enumerate() {
                    p_coarse[j][c] += score;
                }
                states.push(JointState {
                    fine: i,
                    coarse: labels.clone(),
                    score,
                });
            }
            // odometer increment over the coarse labels
            let mut j = 0;
            while j < m {
                labels[j] += 1;
                if labels[j] < graph.coarse_size(j) {
                    break;
                }
                labels[j] = 0;
                j += 1;
            }
            if j == m {
                break;
            }
        }
    }
    p.iter_mut().for_each(|v| *v /= z);
    p_coarse.iter_mut().flatten().for_each(|v| *v /= z);
    Ok(JointTable {
        states,
        z,
        p,
        p_coarse,
    })
}

/// Central-difference gradient `(L(x + h e_i) - L(x - h e_i)) / 2h`.
pub fn fd_gradient<F>(loss_fn: F, point: &[f64], step: f64) -> Result<Vec<f64>, OracleError>
where
    F: Fn(&[f64]) -> f64,
{
    if step.is_nan() || step <= 0.0 {
        return Err(OracleError::BadStep(step));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = loss_fn(&x);
        x[i] = orig - step;
        let down = loss_fn(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(OracleError::NonFiniteLoss { coord: i });
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// `max |a - b| / max(max |a|, max |b|)`, or the absolute difference when both
/// vectors are within `1e-12` of zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "vectors differ in length");
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Random graph with `k` fine classes and the given coarse sizes; every
/// parent drawn uniformly, so coarse groups may be empty.
pub fn random_graph<R: Rng + ?Sized>(k: usize, sizes: &[usize], rng: &mut R) -> LabelGraph {
    let rows = (0..k)
        .map(|_| sizes.iter().map(|&s| rng.random_range(0..s)).collect())
        .collect();
    LabelGraph::new(k, sizes.to_vec(), rows).expect("random parents are in range")
}

/// Scores with every entry drawn from `N(0, sigma^2)`.
pub fn random_scores<R: Rng + ?Sized>(graph: &LabelGraph, sigma: f64, rng: &mut R) -> ScoreSet {
    let n = Normal::new(0.0, sigma).expect("sigma must be positive");
    ScoreSet {
        fine: (0..graph.k()).map(|_| n.sample(rng)).collect(),
        coarse: graph
            .coarse_sizes()
            .iter()
            .map(|&s| (0..s).map(|_| n.sample(rng)).collect())
            .collect(),
    }
}

fn flat_to_scores(graph: &LabelGraph, flat: &[f64]) -> ScoreSet {
    let k = graph.k();
    let mut off = k;
    let coarse = graph
        .coarse_sizes()
        .iter()
        .map(|&s| {
            let v = flat[off..off + s].to_vec();
            off += s;
            v
        })
        .collect();
    ScoreSet {
        fine: flat[..k].to_vec(),
        coarse,
    }
}

fn flatten_params(p: &ParamSet) -> Vec<f64> {
    let mut v: Vec<f64> = p.fine.iter().copied().collect();
    for w in &p.coarse {
        v.extend(w.iter().copied());
    }
    v
}

fn unflatten_params(template: &ParamSet, flat: &[f64]) -> ParamSet {
    let mut out = template.clone();
    let slots = out
        .fine
        .iter_mut()
        .chain(out.coarse.iter_mut().flat_map(|w| w.iter_mut()));
    for (v, &x) in slots.zip(flat) {
        *v = x;
    }
    out
}

/// Relative errors of the data-term score gradient (both backward paths)
/// against finite differences of [`loss::nll`].
pub fn check_nll(
    graph: &LabelGraph,
    scores: &ScoreSet,
    y: usize,
    cfg: &LossConfig,
    step: f64,
) -> Result<(f64, f64), OracleError> {
    let post = loss::forward(graph, scores)?;
    let naive = loss::backward_naive(graph, &post, y, cfg)?.flatten();
    let fast = loss::backward_fast(graph, &post, y, cfg)?.flatten();
    let mut flat = scores.fine.clone();
    for c in &scores.coarse {
        flat.extend_from_slice(c);
    }
    let fd = fd_gradient(
        |x| loss::nll(graph, &flat_to_scores(graph, x), y, cfg).unwrap_or(f64::NAN),
        &flat,
        step,
    )?;
    Ok((relative_error(&naive, &fd), relative_error(&fast, &fd)))
}

/// Relative error of [`loss::prior_gradient`] against finite differences of
/// [`loss::prior_penalty`].
pub fn check_prior(
    graph: &LabelGraph,
    params: &ParamSet,
    lambda: f64,
    step: f64,
) -> Result<f64, OracleError> {
    let analytic = flatten_params(&loss::prior_gradient(graph, params, lambda)?);
    let fd = fd_gradient(
        |x| loss::prior_penalty(graph, &unflatten_params(params, x), lambda).unwrap_or(f64::NAN),
        &flatten_params(params),
        step,
    )?;
    Ok(relative_error(&analytic, &fd))
}

/// Relative error of the end-to-end model gradient (every parameter block)
/// against finite differences of the per-sample objective.
pub fn check_model(
    model: &Model,
    graph: &LabelGraph,
    x: &[f64],
    y: usize,
    step: f64,
) -> Result<f64, OracleError> {
    let (_, grad) = model.backprop(graph, x, y)?;
    let mut probe = model.clone();
    let fd = fd_gradient(
        |theta| {
            let mut m = probe.clone();
            m.params.set_flat(theta);
            m.objective(graph, x, y).unwrap_or(f64::NAN)
        },
        &model.params.to_flat(),
        step,
    )?;
    probe.params = grad;
    Ok(relative_error(&probe.params.to_flat(), &fd))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    /// Adds a deliberate error to every analytic gradient (negative control).
    pub sabotage: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            step: 1e-5,
            sabotage: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradcheckReport {
    pub nll_naive: f64,
    pub nll_fast: f64,
    pub prior: f64,
    pub model: f64,
}

impl GradcheckReport {
    pub fn max(&self) -> f64 {
        self.nll_naive
            .max(self.nll_fast)
            .max(self.prior)
            .max(self.model)
    }
}

/// Runs the nll, prior and full-model checks on `graph` with random scores,
/// weights and inputs; reports the worst relative error of each.
pub fn gradcheck(
    graph: &LabelGraph,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport::default();
    let sabotage = if opts.sabotage { 1e-2 } else { 0.0 };
    let uniform = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..1.0);

    for _ in 0..opts.instances {
        let scores = random_scores(graph, 2.0, &mut rng);
        let y = rng.random_range(0..graph.k());
        let cfg = LossConfig {
            lambda: 0.0,
            coarse_weights: Some((0..graph.m()).map(|_| rng.random_range(0.5..1.5)).collect()),
        };
        let (mut a, mut b) = check_nll(graph, &scores, y, &cfg, opts.step)?;
        a += sabotage;
        b += sabotage;
        report.nll_naive = report.nll_naive.max(a);
        report.nll_fast = report.nll_fast.max(b);

        let d = 3;
        let mut params = ParamSet::zeros(
            d,
            graph.k(),
            &graph
                .coarse_sizes()
                .iter()
                .map(|&s| (d, s))
                .collect::<Vec<_>>(),
        );
        for v in params
            .fine
            .iter_mut()
            .chain(params.coarse.iter_mut().flat_map(|w| w.iter_mut()))
        {
            *v = uniform(&mut rng);
        }
        let lambda = rng.random_range(0.1..2.0);
        report.prior = report
            .prior
            .max(check_prior(graph, &params, lambda, opts.step)? + sabotage);
    }

    let input = 4;
    let modes: Vec<(Mode, ExtractorSpec)> = vec![
        (Mode::Sm, ExtractorSpec::affine(input, 3)),
        (Mode::Bgl1, ExtractorSpec::affine(input, 3)),
        (Mode::BglM, ExtractorSpec::hidden(input, 5, 3)),
    ];
    for (mode, spec) in modes {
        let cfg = ModelConfig::new(mode, spec).with_lambda(0.5);
        let mut model = Model::new(cfg, graph, &mut rng)?;
        // move biases off zero so every block is exercised
        for b in model.params.blocks_mut() {
            for v in b.iter_mut() {
                *v += 0.1 * uniform(&mut rng);
            }
        }
        let x: Vec<f64> = (0..input).map(|_| 2.0 * uniform(&mut rng)).collect();
        let y = rng.random_range(0..graph.k());
        let err = check_model(&model, graph, &x, y, opts.step)? + sabotage;
        report.model = report.model.max(err);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerate_matches_hand_example() {
        let g = LabelGraph::from_one_based(3, vec![2], vec![vec![1], vec![1], vec![2]]).unwrap();
        let s = ScoreSet {
            fine: vec![0.0; 3],
            coarse: vec![vec![2f64.ln(), 0.0]],
        };
        let t = enumerate_joint(&g, &s).unwrap();
        assert!((t.z - 5.0).abs() < 1e-14);
        assert_eq!(t.states.len(), 3);
        for (a, b) in t.p.iter().zip([0.4, 0.4, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((t.p_coarse[0][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn enumerate_softmax_graph() {
        let g = LabelGraph::softmax(3);
        let s = ScoreSet {
            fine: vec![0.5, -1.0, 2.0],
            coarse: vec![],
        };
        let t = enumerate_joint(&g, &s).unwrap();
        assert_eq!(t.states.len(), 3);
        let z: f64 = s.fine.iter().map(|v| v.exp()).sum();
        assert!((t.z - z).abs() < 1e-14);
    }

    #[test]
    fn enumerate_keeps_exactly_k_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let g = random_graph(6, &[3, 2, 4], &mut rng);
            let s = random_scores(&g, 2.0, &mut rng);
            assert_eq!(enumerate_joint(&g, &s).unwrap().states.len(), 6);
        }
    }

    #[test]
    fn enumerate_guards_size() {
        let g = LabelGraph::new(10, vec![100; 4], vec![vec![0; 4]; 10]).unwrap();
        assert!(matches!(
            enumerate_joint(&g, &ScoreSet::zeros(&g)),
            Err(OracleError::InstanceTooLarge { .. })
        ));
    }

    #[test]
    fn fd_of_quadratic() {
        let g = fd_gradient(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
        assert!(matches!(
            fd_gradient(|x| x[0], &[1.0], 0.0),
            Err(OracleError::BadStep(_))
        ));
        assert!(matches!(
            fd_gradient(
                |x| if x[0] > 0.0 { f64::INFINITY } else { 0.0 },
                &[0.0],
                1e-5
            ),
            Err(OracleError::NonFiniteLoss { coord: 0 })
        ));
    }

    #[test]
    fn relative_error_scales() {
        assert_eq!(relative_error(&[2.0, 0.0], &[2.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[1.1, 0.0]) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[1e-13]), 1e-13);
    }

    #[test]
    fn gradcheck_passes_and_sabotage_fails() {
        let g = LabelGraph::from_one_based(
            4,
            vec![2, 3],
            vec![vec![1, 1], vec![2, 2], vec![1, 3], vec![2, 1]],
        )
        .unwrap();
        let opts = GradcheckOptions {
            instances: 5,
            ..Default::default()
        };
        let r = gradcheck(&g, &opts).unwrap();
        assert!(r.max() < 1e-6, "{r:?}");
        let r = gradcheck(
            &g,
            &GradcheckOptions {
                sabotage: true,
                ..opts
            },
        )
        .unwrap();
        assert!(r.max() > 1e-4);
    }
}
