//! Forward and backward passes of the bipartite-graph-label softmax layer.
//!
//! For one sample with fine scores `f` and coarse scores `f_j`, the joint
//! score of fine class `i` is `log_h[i] = f[i] + sum_j f_j[parent(i, j)]`.
//! Because each fine class has a single parent per type, the partition
//! function collapses to a k-term log-sum-exp and every coarse marginal is
//! the sum of its members' fine marginals.
//!
//! All gradients returned here are gradients of the *minimized* quantity
//! (negative log-likelihood and negative log-prior).

use ndarray::Array2;
use thiserror::Error;

use crate::graph::LabelGraph;
use crate::params::ParamSet;
use crate::softmax::logsumexp_subset;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite score at {0}")]
    NonFiniteScore(String),
    #[error("label {y} out of range for {k} fine classes")]
    LabelOutOfRange { y: usize, k: usize },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

/// Raw scores for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub fine: Vec<f64>,
    pub coarse: Vec<Vec<f64>>,
}

impl ScoreSet {
    pub fn zeros(graph: &LabelGraph) -> Self {
        Self {
            fine: vec![0.0; graph.k()],
            coarse: graph.coarse_sizes().iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn check(&self, graph: &LabelGraph) -> Result<(), LossError> {
        check_shape(graph, &self.fine, &self.coarse, "scores")?;
        if let Some(i) = self.fine.iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFiniteScore(format!("fine[{i}]")));
        }
        for (j, fj) in self.coarse.iter().enumerate() {
            if let Some(c) = fj.iter().position(|v| !v.is_finite()) {
                return Err(LossError::NonFiniteScore(format!("coarse[{j}][{c}]")));
            }
        }
        Ok(())
    }
}

/// Exact posterior of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub log_z: f64,
    pub p: Vec<f64>,
    pub p_coarse: Vec<Vec<f64>>,
    pub log_h: Vec<f64>,
}

impl Posterior {
    /// Index of the most probable fine class (first one on ties).
    pub fn predict_fine(&self) -> usize {
        argmax(&self.p)
    }

    pub fn predict_coarse(&self, j: usize) -> usize {
        argmax(&self.p_coarse[j])
    }
}

/// Gradient with respect to the fine and coarse scores; same shape as
/// [`ScoreSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGradient {
    pub fine: Vec<f64>,
    pub coarse: Vec<Vec<f64>>,
}

impl ScoreGradient {
    /// Largest absolute elementwise difference between two gradients.
    pub fn max_abs_diff(&self, other: &ScoreGradient) -> f64 {
        let a = self.fine.iter().zip(&other.fine);
        let b = self
            .coarse
            .iter()
            .zip(&other.coarse)
            .flat_map(|(x, y)| x.iter().zip(y));
        a.chain(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// Concatenation of the fine and coarse parts, in that order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.fine.clone();
        for c in &self.coarse {
            v.extend_from_slice(c);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Strength of the hierarchical weight prior.
    pub lambda: f64,
    /// Weight of each coarse type's log-likelihood term. `None` weights
    /// every type by 1.
    pub coarse_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            coarse_weights: None,
        }
    }
}

impl LossConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    #[inline]
    pub fn coarse_weight(&self, j: usize) -> f64 {
        self.coarse_weights.as_ref().map_or(1.0, |w| w[j])
    }

    pub fn check(&self, graph: &LabelGraph) -> Result<(), LossError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if let Some(w) = &self.coarse_weights {
            if w.len() != graph.m() {
                return Err(LossError::InvalidConfig(format!(
                    "{} coarse weights for {} coarse types",
                    w.len(),
                    graph.m()
                )));
            }
            if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(LossError::InvalidConfig(
                    "coarse weights must be finite and non-negative".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Exact posterior over fine and coarse labels in `O(k m)`.
pub fn forward(graph: &LabelGraph, scores: &ScoreSet) -> Result<Posterior, LossError> {
    scores.check(graph)?;
    let k = graph.k();
    let m = graph.m();

    let log_h: Vec<f64> = (0..k)
        .map(|i| {
            graph
                .parents_of(i)
                .iter()
                .zip(&scores.coarse)
                .fold(scores.fine[i], |acc, (&c, fj)| acc + fj[c])
        })
        .collect();
    let max = log_h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = log_h.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = p.iter().sum();
    let log_z = max + total.ln();
    for pi in &mut p {
        *pi /= total;
    }

    let mut p_coarse: Vec<Vec<f64>> = graph.coarse_sizes().iter().map(|&s| vec![0.0; s]).collect();
    for (i, &pi) in p.iter().enumerate() {
        for j in 0..m {
            p_coarse[j][graph.parent(i, j)] += pi;
        }
    }

    Ok(Posterior {
        log_z,
        p,
        p_coarse,
        log_h,
    })
}

/// Data term of the objective: `-log p_y - sum_j w_j log p^j_{parent(y, j)}`.
pub fn nll(
    graph: &LabelGraph,
    scores: &ScoreSet,
    y: usize,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    check_label(graph, y)?;
    cfg.check(graph)?;
    let post = forward(graph, scores)?;
    Ok(nll_from_posterior(graph, &post, y, cfg))
}

/// [`nll`] for an already computed posterior. Coarse log-marginals are taken
/// as group log-sum-exps, so they never underflow for finite scores; a
/// non-finite result is reported as `+inf`.
pub fn nll_from_posterior(graph: &LabelGraph, post: &Posterior, y: usize, cfg: &LossConfig) -> f64 {
    let mut loss = post.log_z - post.log_h[y];
    for j in 0..graph.m() {
        let w = cfg.coarse_weight(j);
        if w == 0.0 {
            continue;
        }
        let active = graph.members(j, graph.parent(y, j));
        let log_pj = logsumexp_subset(&post.log_h, active) - post.log_z;
        loss -= w * log_pj;
    }
    if loss.is_finite() {
        loss
    } else {
        log::warn!("negative log-likelihood is not finite for label {y}; reporting +inf");
        f64::INFINITY
    }
}

/// Score gradient of [`nll`] by direct evaluation of every closed-form term,
/// including the cross-type term for each pair of distinct types. Costs
/// `O(k m sum_j k_j)`.
pub fn backward_naive(
    graph: &LabelGraph,
    post: &Posterior,
    y: usize,
    cfg: &LossConfig,
) -> Result<ScoreGradient, LossError> {
    check_posterior(graph, post)?;
    check_label(graph, y)?;
    cfg.check(graph)?;
    let k = graph.k();
    let m = graph.m();
    let active: Vec<usize> = (0..m).map(|j| graph.parent(y, j)).collect();

    // within-group log-normalizers of the active coarse class of each type,
    // found by masking the whole fine range
    let group_lse: Vec<f64> = (0..m)
        .map(|j| {
            let idx: Vec<usize> = (0..k)
                .filter(|&i| graph.connected(i, j, active[j]))
                .collect();
            logsumexp_subset(&post.log_h, &idx)
        })
        .collect();
    // p_i / p^j_{active_j}, zero outside the active group
    let ratio = |i: usize, j: usize| -> f64 {
        if graph.connected(i, j, active[j]) {
            (post.log_h[i] - group_lse[j]).exp()
        } else {
            0.0
        }
    };

    // d log p_y / d f_i and d log p^j / d f_i
    let mut ll_fine = vec![0.0; k];
    for i in 0..k {
        let mut g = if i == y { 1.0 } else { 0.0 } - post.p[i];
        for j in 0..m {
            g += cfg.coarse_weight(j) * (ratio(i, j) - post.p[i]);
        }
        ll_fine[i] = g;
    }

    let mut ll_coarse: Vec<Vec<f64>> = graph.coarse_sizes().iter().map(|&s| vec![0.0; s]).collect();
    for l in 0..m {
        for c in 0..graph.coarse_size(l) {
            let ind = if c == active[l] { 1.0 } else { 0.0 };
            // d log p_y / d f^l_c
            let mut g = ind - post.p_coarse[l][c];
            // d log p^l / d f^l_c
            g += cfg.coarse_weight(l) * (ind - post.p_coarse[l][c]);
            ll_coarse[l][c] = g;
        }
    }
    // d log p^j / d f^l_c for l != j
    for j in 0..m {
        let wj = cfg.coarse_weight(j);
        for l in (0..m).filter(|&l| l != j) {
            for c in 0..graph.coarse_size(l) {
                let mut s = 0.0;
                for i in 0..k {
                    if graph.connected(i, j, active[j]) && graph.connected(i, l, c) {
                        s += ratio(i, j);
                    }
                }
                ll_coarse[l][c] += wj * (s - post.p_coarse[l][c]);
            }
        }
    }

    Ok(negate(ll_fine, ll_coarse))
}

/// Same gradient as [`backward_naive`] in `O(k m + sum_j k_j)`.
///
/// Each fine class accumulates `q_i = sum_j w_j [i in active group of j] *
/// p_i / p^j_active`. The cross-type gradient summed over source types
/// `j != l` at coarse class `c` of type `l` is then
/// `sum_{i in group c} (q_i - own_l(i)) - (W - w_l) p^l_c`, where `own_l(i)`
/// is type `l`'s contribution to `q_i` and `W` the total coarse weight.
pub fn backward_fast(
    graph: &LabelGraph,
    post: &Posterior,
    y: usize,
    cfg: &LossConfig,
) -> Result<ScoreGradient, LossError> {
    check_posterior(graph, post)?;
    check_label(graph, y)?;
    cfg.check(graph)?;
    let k = graph.k();
    let m = graph.m();
    let parents_y = graph.parents_of(y);

    let mut q = vec![0.0; k];
    for j in 0..m {
        let members = graph.members(j, parents_y[j]);
        let lse = logsumexp_subset(&post.log_h, members);
        let w = cfg.coarse_weight(j);
        for &i in members {
            q[i] += w * (post.log_h[i] - lse).exp();
        }
    }
    let total_w: f64 = (0..m).map(|j| cfg.coarse_weight(j)).sum();

    let mut ll_fine: Vec<f64> = (0..k).map(|i| q[i] - (1.0 + total_w) * post.p[i]).collect();
    ll_fine[y] += 1.0;

    let mut ll_coarse: Vec<Vec<f64>> = Vec::with_capacity(m);
    for l in 0..m {
        let wl = cfg.coarse_weight(l);
        let active = parents_y[l];
        let mut cross = vec![0.0; graph.coarse_size(l)];
        let members = graph.members(l, active);
        let lse = logsumexp_subset(&post.log_h, members);
        for i in 0..k {
            cross[graph.parent(i, l)] += q[i];
        }
        for &i in members {
            cross[active] -= wl * (post.log_h[i] - lse).exp();
        }
        let rest_w = total_w - wl;
        let g = cross
            .iter()
            .zip(&post.p_coarse[l])
            .enumerate()
            .map(|(c, (&x, &pc))| {
                let ind = if c == active { 1.0 } else { 0.0 };
                (1.0 + wl) * (ind - pc) + x - rest_w * pc
            })
            .collect();
        ll_coarse.push(g);
    }

    Ok(negate(ll_fine, ll_coarse))
}

/// Negative log of the hierarchical prior:
/// `lambda / 2 * sum_i sum_j |w_i - w^j_{parent(i, j)}|^2`.
pub fn prior_penalty(graph: &LabelGraph, params: &ParamSet, lambda: f64) -> Result<f64, LossError> {
    check_params(graph, params)?;
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..graph.k() {
        let wi = params.fine.column(i);
        for (j, &c) in graph.parents_of(i).iter().enumerate() {
            let wc = params.coarse[j].column(c);
            total += wi
                .iter()
                .zip(wc.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    Ok(0.5 * lambda * total)
}

/// Gradient of [`prior_penalty`] with respect to every head column.
pub fn prior_gradient(
    graph: &LabelGraph,
    params: &ParamSet,
    lambda: f64,
) -> Result<ParamSet, LossError> {
    check_params(graph, params)?;
    let mut grad = params.zeros_like();
    if lambda == 0.0 {
        return Ok(grad);
    }
    let d = params.feature_dim();
    for i in 0..graph.k() {
        for (j, &c) in graph.parents_of(i).iter().enumerate() {
            for r in 0..d {
                let diff = lambda * (params.fine[(r, i)] - params.coarse[j][(r, c)]);
                grad.fine[(r, i)] += diff;
                grad.coarse[j][(r, c)] -= diff;
            }
        }
    }
    Ok(grad)
}

/// Adds `scale * prior_gradient` into `acc` without allocating.
pub(crate) fn add_prior_gradient(
    graph: &LabelGraph,
    params: &ParamSet,
    lambda: f64,
    scale: f64,
    fine: &mut Array2<f64>,
    coarse: &mut [Array2<f64>],
) {
    let d = params.feature_dim();
    let s = lambda * scale;
    for i in 0..graph.k() {
        for (j, &c) in graph.parents_of(i).iter().enumerate() {
            for r in 0..d {
                let diff = s * (params.fine[(r, i)] - params.coarse[j][(r, c)]);
                fine[(r, i)] += diff;
                coarse[j][(r, c)] -= diff;
            }
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn negate(mut fine: Vec<f64>, mut coarse: Vec<Vec<f64>>) -> ScoreGradient {
    fine.iter_mut().for_each(|v| *v = -*v);
    coarse.iter_mut().flatten().for_each(|v| *v = -*v);
    ScoreGradient { fine, coarse }
}

fn check_label(graph: &LabelGraph, y: usize) -> Result<(), LossError> {
    if y >= graph.k() {
        return Err(LossError::LabelOutOfRange { y, k: graph.k() });
    }
    Ok(())
}

fn check_shape(
    graph: &LabelGraph,
    fine: &[f64],
    coarse: &[Vec<f64>],
    what: &str,
) -> Result<(), LossError> {
    if fine.len() != graph.k() {
        return Err(LossError::ShapeMismatch(format!(
            "{what}: {} fine entries for k={}",
            fine.len(),
            graph.k()
        )));
    }
    if coarse.len() != graph.m() {
        return Err(LossError::ShapeMismatch(format!(
            "{what}: {} coarse vectors for m={}",
            coarse.len(),
            graph.m()
        )));
    }
    for (j, v) in coarse.iter().enumerate() {
        if v.len() != graph.coarse_size(j) {
            return Err(LossError::ShapeMismatch(format!(
                "{what}: coarse type {j} has {} entries, expected {}",
                v.len(),
                graph.coarse_size(j)
            )));
        }
    }
    Ok(())
}

fn check_posterior(graph: &LabelGraph, post: &Posterior) -> Result<(), LossError> {
    check_shape(graph, &post.p, &post.p_coarse, "posterior")?;
    if post.log_h.len() != graph.k() {
        return Err(LossError::ShapeMismatch("posterior: log_h length".into()));
    }
    Ok(())
}

fn check_params(graph: &LabelGraph, params: &ParamSet) -> Result<(), LossError> {
    if params.fine.ncols() != graph.k() || params.coarse.len() != graph.m() {
        return Err(LossError::ShapeMismatch(format!(
            "params: fine head has {} columns and {} coarse heads; graph has k={} m={}",
            params.fine.ncols(),
            params.coarse.len(),
            graph.k(),
            graph.m()
        )));
    }
    for (j, w) in params.coarse.iter().enumerate() {
        if w.ncols() != graph.coarse_size(j) {
            return Err(LossError::ShapeMismatch(format!(
                "params: coarse head {j} has {} columns, expected {}",
                w.ncols(),
                graph.coarse_size(j)
            )));
        }
        if w.nrows() != params.fine.nrows() {
            return Err(LossError::ShapeMismatch(format!(
                "params: coarse head {j} reads {} features, fine head reads {}",
                w.nrows(),
                params.fine.nrows()
            )));
        }
    }
    Ok(())
}
