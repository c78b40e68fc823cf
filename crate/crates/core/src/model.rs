//! Output-layer configurations: plain softmax (`Sm`), BGL with one shared
//! feature (`Bgl1`), and BGL with separate features for the fine and coarse
//! heads (`BglM`).
//!
//! A small feature extractor stands in for the network trunk. Parameters are
//! exposed as an ordered list of flat blocks (extractors first, then the fine
//! head, then the coarse heads), which is also the checkpoint order.

use std::borrow::Cow;
use std::io::{self, Read, Write};

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::LabelGraph;
use crate::loss::{self, LossConfig, LossError, Posterior, ScoreGradient, ScoreSet};
use crate::params::ParamSet;

const MAGIC: &[u8; 4] = b"BGLM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sm,
    Bgl1,
    BglM,
}

impl Mode {
    fn tag(self) -> u8 {
        match self {
            Mode::Sm => 0,
            Mode::Bgl1 => 1,
            Mode::BglM => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Mode::Sm),
            1 => Some(Mode::Bgl1),
            2 => Some(Mode::BglM),
            _ => None,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sm" => Ok(Mode::Sm),
            "bgl1" => Ok(Mode::Bgl1),
            "bglm" => Ok(Mode::BglM),
            _ => Err(format!("unknown mode `{s}` (expected sm, bgl1 or bglm)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Sm => "sm",
            Mode::Bgl1 => "bgl1",
            Mode::BglM => "bglm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorKind {
    Identity,
    Affine,
    /// affine, elementwise `max(0, .)`, affine
    Hidden,
}

impl std::str::FromStr for ExtractorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(ExtractorKind::Identity),
            "affine" => Ok(ExtractorKind::Affine),
            "hidden" | "mlp" => Ok(ExtractorKind::Hidden),
            _ => Err(format!(
                "unknown extractor `{s}` (expected identity, affine or hidden)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    pub input_dim: usize,
    /// Only used by [`ExtractorKind::Hidden`].
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl ExtractorSpec {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: ExtractorKind::Identity,
            input_dim: dim,
            hidden_dim: 0,
            output_dim: dim,
        }
    }

    pub fn affine(input_dim: usize, output_dim: usize) -> Self {
        Self {
            kind: ExtractorKind::Affine,
            input_dim,
            hidden_dim: 0,
            output_dim,
        }
    }

    pub fn hidden(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            kind: ExtractorKind::Hidden,
            input_dim,
            hidden_dim,
            output_dim,
        }
    }

    fn check(&self) -> Result<(), ModelError> {
        let ok = match self.kind {
            ExtractorKind::Identity => self.input_dim == self.output_dim && self.input_dim > 0,
            ExtractorKind::Affine => self.input_dim > 0 && self.output_dim > 0,
            ExtractorKind::Hidden => {
                self.input_dim > 0 && self.hidden_dim > 0 && self.output_dim > 0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::ShapeMismatch(format!(
                "invalid extractor {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureExtractor {
    Identity {
        dim: usize,
    },
    Affine {
        weight: Array2<f64>,
        bias: Array1<f64>,
    },
    Hidden {
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
    },
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ExtractorCache {
    pre_activation: Option<Array1<f64>>,
    hidden: Option<Array1<f64>>,
}

impl FeatureExtractor {
    fn init<R: Rng + ?Sized>(spec: &ExtractorSpec, rng: &mut R) -> Self {
        match spec.kind {
            ExtractorKind::Identity => FeatureExtractor::Identity {
                dim: spec.input_dim,
            },
            ExtractorKind::Affine => FeatureExtractor::Affine {
                weight: glorot(spec.output_dim, spec.input_dim, rng),
                bias: Array1::zeros(spec.output_dim),
            },
            ExtractorKind::Hidden => FeatureExtractor::Hidden {
                w1: glorot(spec.hidden_dim, spec.input_dim, rng),
                b1: Array1::zeros(spec.hidden_dim),
                w2: glorot(spec.output_dim, spec.hidden_dim, rng),
                b2: Array1::zeros(spec.output_dim),
            },
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            FeatureExtractor::Identity { dim } => FeatureExtractor::Identity { dim: *dim },
            FeatureExtractor::Affine { weight, bias } => FeatureExtractor::Affine {
                weight: Array2::zeros(weight.raw_dim()),
                bias: Array1::zeros(bias.raw_dim()),
            },
            FeatureExtractor::Hidden { w1, b1, w2, b2 } => FeatureExtractor::Hidden {
                w1: Array2::zeros(w1.raw_dim()),
                b1: Array1::zeros(b1.raw_dim()),
                w2: Array2::zeros(w2.raw_dim()),
                b2: Array1::zeros(b2.raw_dim()),
            },
        }
    }

    pub fn spec(&self) -> ExtractorSpec {
        match self {
            FeatureExtractor::Identity { dim } => ExtractorSpec::identity(*dim),
            FeatureExtractor::Affine { weight, .. } => {
                ExtractorSpec::affine(weight.ncols(), weight.nrows())
            }
            FeatureExtractor::Hidden { w1, w2, .. } => {
                ExtractorSpec::hidden(w1.ncols(), w1.nrows(), w2.nrows())
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.spec().input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec().output_dim
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> (Array1<f64>, ExtractorCache) {
        match self {
            FeatureExtractor::Identity { .. } => (
                x.to_owned(),
                ExtractorCache {
                    pre_activation: None,
                    hidden: None,
                },
            ),
            FeatureExtractor::Affine { weight, bias } => (
                weight.dot(&x) + bias,
                ExtractorCache {
                    pre_activation: None,
                    hidden: None,
                },
            ),
            FeatureExtractor::Hidden { w1, b1, w2, b2 } => {
                let a = w1.dot(&x) + b1;
                let h = a.mapv(|v| v.max(0.0));
                let out = w2.dot(&h) + b2;
                (
                    out,
                    ExtractorCache {
                        pre_activation: Some(a),
                        hidden: Some(h),
                    },
                )
            }
        }
    }

    /// Accumulates parameter gradients into `grad` given the gradient of the
    /// loss with respect to this extractor's output.
    fn backward(
        &self,
        x: ArrayView1<f64>,
        cache: &ExtractorCache,
        dout: &Array1<f64>,
        grad: &mut FeatureExtractor,
    ) {
        match (self, grad) {
            (FeatureExtractor::Identity { .. }, FeatureExtractor::Identity { .. }) => {}
            (
                FeatureExtractor::Affine { .. },
                FeatureExtractor::Affine {
                    weight: gw,
                    bias: gb,
                },
            ) => {
                add_outer(gw, dout.view(), x);
                *gb += dout;
            }
            (
                FeatureExtractor::Hidden { w2, .. },
                FeatureExtractor::Hidden {
                    w1: gw1,
                    b1: gb1,
                    w2: gw2,
                    b2: gb2,
                },
            ) => {
                let a = cache.pre_activation.as_ref().expect("hidden cache");
                let h = cache.hidden.as_ref().expect("hidden cache");
                add_outer(gw2, dout.view(), h.view());
                *gb2 += dout;
                let mut da = w2.t().dot(dout);
                da.zip_mut_with(a, |g, &pre| {
                    if pre <= 0.0 {
                        *g = 0.0;
                    }
                });
                add_outer(gw1, da.view(), x);
                *gb1 += &da;
            }
            _ => unreachable!("gradient layout differs from extractor layout"),
        }
    }

    fn blocks(&self) -> Vec<&[f64]> {
        match self {
            FeatureExtractor::Identity { .. } => vec![],
            FeatureExtractor::Affine { weight, bias } => vec![slice(weight), slice1(bias)],
            FeatureExtractor::Hidden { w1, b1, w2, b2 } => {
                vec![slice(w1), slice1(b1), slice(w2), slice1(b2)]
            }
        }
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            FeatureExtractor::Identity { .. } => vec![],
            FeatureExtractor::Affine { weight, bias } => {
                vec![slice_mut(weight), slice1_mut(bias)]
            }
            FeatureExtractor::Hidden { w1, b1, w2, b2 } => {
                vec![slice_mut(w1), slice1_mut(b1), slice_mut(w2), slice1_mut(b2)]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Feeds the fine head, and in `Sm`/`Bgl1` every head.
    pub extractor: ExtractorSpec,
    /// Feeds all coarse heads in `BglM`; ignored otherwise.
    pub coarse_extractor: Option<ExtractorSpec>,
    pub loss: LossConfig,
}

impl ModelConfig {
    pub fn new(mode: Mode, extractor: ExtractorSpec) -> Self {
        Self {
            mode,
            extractor,
            coarse_extractor: (mode == Mode::BglM).then_some(extractor),
            loss: LossConfig::default(),
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.loss.lambda = lambda;
        self
    }
}

/// Every trainable block of a model. Also used, zero-initialized, as the
/// gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractors: Vec<FeatureExtractor>,
    pub heads: ParamSet,
}

pub type ModelGradient = ModelParams;

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            extractors: self.extractors.iter().map(|e| e.zeros_like()).collect(),
            heads: self.heads.zeros_like(),
        }
    }

    /// Flat parameter blocks in declaration order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.extractors.iter().flat_map(|e| e.blocks()).collect();
        out.push(slice(&self.heads.fine));
        out.extend(self.heads.coarse.iter().map(slice));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .extractors
            .iter_mut()
            .flat_map(|e| e.blocks_mut())
            .collect();
        out.push(slice_mut(&mut self.heads.fine));
        out.extend(self.heads.coarse.iter_mut().map(slice_mut));
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for b in self.blocks_mut() {
            b.copy_from_slice(&flat[off..off + b.len()]);
            off += b.len();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    k: usize,
    coarse_sizes: Vec<usize>,
    pub params: ModelParams,
}

impl Model {
    /// Random initialization: weights uniform in `+-sqrt(6 / (fan_in + fan_out))`,
    /// biases zero.
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        graph: &LabelGraph,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.extractor.check()?;
        let mut extractors = vec![FeatureExtractor::init(&config.extractor, rng)];
        let d = config.extractor.output_dim;
        let mut coarse_dim = d;
        if config.mode == Mode::BglM {
            let spec = config.coarse_extractor.ok_or_else(|| {
                ModelError::ShapeMismatch("bglm mode needs a coarse extractor".into())
            })?;
            spec.check()?;
            if spec.input_dim != config.extractor.input_dim {
                return Err(ModelError::ShapeMismatch(
                    "both extractors must read the same input".into(),
                ));
            }
            coarse_dim = spec.output_dim;
            extractors.push(FeatureExtractor::init(&spec, rng));
        }
        let k = graph.k();
        let heads = ParamSet {
            fine: glorot(d, k, rng),
            coarse: if config.mode == Mode::Sm {
                Vec::new()
            } else {
                graph
                    .coarse_sizes()
                    .iter()
                    .map(|&kj| glorot(coarse_dim, kj, rng))
                    .collect()
            },
        };
        let model = Self {
            config,
            k,
            coarse_sizes: graph.coarse_sizes().to_vec(),
            params: ModelParams { extractors, heads },
        };
        model.config.loss.check(&*model.loss_graph(graph)?)?;
        if model.config.mode == Mode::BglM
            && model.config.loss.lambda > 0.0
            && !model.params.heads.dims_coupled()
        {
            log::warn!(
                "hierarchical prior disabled: fine features have {d} dims, coarse features {coarse_dim}"
            );
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn coarse_sizes(&self) -> &[usize] {
        &self.coarse_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.config.extractor.input_dim
    }

    pub fn set_loss_config(&mut self, cfg: LossConfig) {
        self.config.loss = cfg;
    }

    /// The graph the loss is evaluated on: `graph` itself for BGL modes, the
    /// coarse-free graph in `Sm` mode.
    pub fn loss_graph<'a>(&self, graph: &'a LabelGraph) -> Result<Cow<'a, LabelGraph>, ModelError> {
        if graph.k() != self.k || graph.coarse_sizes() != self.coarse_sizes.as_slice() {
            return Err(ModelError::ShapeMismatch(format!(
                "model built for k={} sizes={:?}, graph has k={} sizes={:?}",
                self.k,
                self.coarse_sizes,
                graph.k(),
                graph.coarse_sizes()
            )));
        }
        Ok(match self.config.mode {
            Mode::Sm => Cow::Owned(LabelGraph::softmax(graph.k())),
            _ => Cow::Borrowed(graph),
        })
    }

    /// Whether the hierarchical prior contributes to the objective.
    pub fn prior_active(&self) -> bool {
        self.config.mode != Mode::Sm
            && self.config.loss.lambda > 0.0
            && self.params.heads.dims_coupled()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::ShapeMismatch(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn score(&self, x: &[f64]) -> Result<ScoreSet, ModelError> {
        self.check_input(x)?;
        Ok(self.score_with_cache(ArrayView1::from(x)).0)
    }

    fn score_with_cache(
        &self,
        x: ArrayView1<f64>,
    ) -> (ScoreSet, Vec<(Array1<f64>, ExtractorCache)>) {
        let feats: Vec<_> = self
            .params
            .extractors
            .iter()
            .map(|e| e.forward(x))
            .collect();
        let heads = &self.params.heads;
        let fine = heads.fine.t().dot(&feats[0].0).to_vec();
        let coarse_feat = &feats[feats.len() - 1].0;
        let coarse = heads
            .coarse
            .iter()
            .map(|w| w.t().dot(coarse_feat).to_vec())
            .collect();
        (ScoreSet { fine, coarse }, feats)
    }

    /// Posterior on the model's loss graph.
    pub fn posterior(&self, loss_graph: &LabelGraph, x: &[f64]) -> Result<Posterior, ModelError> {
        let s = self.score(x)?;
        Ok(loss::forward(loss_graph, &s)?)
    }

    /// Data-term loss and gradient for one sample. `loss_graph` comes from
    /// [`Model::loss_graph`].
    pub fn backprop_data(
        &self,
        loss_graph: &LabelGraph,
        x: &[f64],
        y: usize,
    ) -> Result<(f64, ModelGradient), ModelError> {
        let mut grad = self.params.zeros_like();
        let loss = self.accumulate_data_grad(loss_graph, x, y, &mut grad)?;
        Ok((loss, grad))
    }

    pub(crate) fn accumulate_data_grad(
        &self,
        loss_graph: &LabelGraph,
        x: &[f64],
        y: usize,
        grad: &mut ModelGradient,
    ) -> Result<f64, ModelError> {
        self.check_input(x)?;
        let xv = ArrayView1::from(x);
        let (scores, feats) = self.score_with_cache(xv);
        let post = loss::forward(loss_graph, &scores)?;
        let value = loss::nll_from_posterior(loss_graph, &post, y, &self.config.loss);
        let sg = loss::backward_fast(loss_graph, &post, y, &self.config.loss)?;
        self.chain(xv, &feats, &sg, grad);
        Ok(value)
    }

    fn chain(
        &self,
        x: ArrayView1<f64>,
        feats: &[(Array1<f64>, ExtractorCache)],
        sg: &ScoreGradient,
        grad: &mut ModelGradient,
    ) {
        let heads = &self.params.heads;
        let df = ArrayView1::from(&sg.fine[..]);
        add_outer(&mut grad.heads.fine, feats[0].0.view(), df);
        let mut dfeat = vec![heads.fine.dot(&df)];
        let last = feats.len() - 1;
        if last > 0 {
            dfeat.push(Array1::zeros(feats[last].0.len()));
        }
        for (j, w) in heads.coarse.iter().enumerate() {
            let dfj = ArrayView1::from(&sg.coarse[j][..]);
            add_outer(&mut grad.heads.coarse[j], feats[last].0.view(), dfj);
            dfeat[last] += &w.dot(&dfj);
        }
        for ((ext, g), ((_, cache), df)) in self
            .params
            .extractors
            .iter()
            .zip(grad.extractors.iter_mut())
            .zip(feats.iter().zip(&dfeat))
        {
            ext.backward(x, cache, df, g);
        }
    }

    /// Adds `scale` times the prior gradient into `grad` and returns the
    /// prior penalty (zero when the prior is inactive).
    pub fn add_prior(
        &self,
        loss_graph: &LabelGraph,
        grad: &mut ModelGradient,
        scale: f64,
    ) -> Result<f64, ModelError> {
        if !self.prior_active() {
            return Ok(0.0);
        }
        let heads = &self.params.heads;
        let lambda = self.config.loss.lambda;
        let penalty = loss::prior_penalty(loss_graph, heads, lambda)?;
        loss::add_prior_gradient(
            loss_graph,
            heads,
            lambda,
            scale,
            &mut grad.heads.fine,
            &mut grad.heads.coarse,
        );
        Ok(penalty)
    }

    /// Total per-sample objective (data term plus prior) and its gradient
    /// with respect to every parameter block.
    pub fn backprop(
        &self,
        graph: &LabelGraph,
        x: &[f64],
        y: usize,
    ) -> Result<(f64, ModelGradient), ModelError> {
        let lg = self.loss_graph(graph)?;
        if y >= self.k {
            return Err(LossError::LabelOutOfRange { y, k: self.k }.into());
        }
        let (data, mut grad) = self.backprop_data(&lg, x, y)?;
        let prior = self.add_prior(&lg, &mut grad, 1.0)?;
        Ok((data + prior, grad))
    }

    /// Value of [`Model::backprop`]'s objective without the gradient.
    pub fn objective(&self, graph: &LabelGraph, x: &[f64], y: usize) -> Result<f64, ModelError> {
        let lg = self.loss_graph(graph)?;
        if y >= self.k {
            return Err(LossError::LabelOutOfRange { y, k: self.k }.into());
        }
        let post = self.posterior(&lg, x)?;
        let mut v = loss::nll_from_posterior(&lg, &post, y, &self.config.loss);
        if self.prior_active() {
            v += loss::prior_penalty(&lg, &self.params.heads, self.config.loss.lambda)?;
        }
        Ok(v)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.config.mode.tag()])?;
        write_u64(&mut w, self.k as u64)?;
        write_u64(&mut w, self.coarse_sizes.len() as u64)?;
        for &s in &self.coarse_sizes {
            write_u64(&mut w, s as u64)?;
        }
        w.write_all(&[self.params.extractors.len() as u8])?;
        for e in &self.params.extractors {
            let spec = e.spec();
            w.write_all(&[match spec.kind {
                ExtractorKind::Identity => 0,
                ExtractorKind::Affine => 1,
                ExtractorKind::Hidden => 2,
            }])?;
            write_u64(&mut w, spec.input_dim as u64)?;
            write_u64(&mut w, spec.hidden_dim as u64)?;
            write_u64(&mut w, spec.output_dim as u64)?;
        }
        w.write_all(&self.config.loss.lambda.to_le_bytes())?;
        match &self.config.loss.coarse_weights {
            None => w.write_all(&[0])?,
            Some(cw) => {
                w.write_all(&[1])?;
                for v in cw {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        for b in self.params.blocks() {
            for v in b {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("missing BGLM magic"));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let mode = Mode::from_tag(read_u8(&mut r)?).ok_or_else(|| bad("unknown mode tag"))?;
        let k = read_usize(&mut r)?;
        let m = read_usize(&mut r)?;
        if m > 1 << 20 {
            return Err(bad("implausible coarse type count"));
        }
        let coarse_sizes = (0..m)
            .map(|_| read_usize(&mut r))
            .collect::<Result<Vec<_>, _>>()?;
        let n_ext = read_u8(&mut r)? as usize;
        let expected_ext = if mode == Mode::BglM { 2 } else { 1 };
        if n_ext != expected_ext {
            return Err(bad("extractor count does not match mode"));
        }
        let mut specs = Vec::with_capacity(n_ext);
        for _ in 0..n_ext {
            let kind = match read_u8(&mut r)? {
                0 => ExtractorKind::Identity,
                1 => ExtractorKind::Affine,
                2 => ExtractorKind::Hidden,
                _ => return Err(bad("unknown extractor kind")),
            };
            let spec = ExtractorSpec {
                kind,
                input_dim: read_usize(&mut r)?,
                hidden_dim: read_usize(&mut r)?,
                output_dim: read_usize(&mut r)?,
            };
            spec.check()?;
            specs.push(spec);
        }
        let lambda = f64::from_le_bytes(read_array(&mut r)?);
        let coarse_weights = match read_u8(&mut r)? {
            0 => None,
            1 => Some(
                (0..m)
                    .map(|_| read_array(&mut r).map(f64::from_le_bytes))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            _ => return Err(bad("bad coarse weight flag")),
        };
        let config = ModelConfig {
            mode,
            extractor: specs[0],
            coarse_extractor: specs.get(1).copied(),
            loss: LossConfig {
                lambda,
                coarse_weights,
            },
        };
        let graph_shape = LabelGraph::new(k, coarse_sizes.clone(), vec![vec![0; m]; k])
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        // shapes only; values are overwritten below
        let mut model = Model::new(config, &graph_shape, &mut ChaCha8Rng::seed_from_u64(0))?;
        for b in model.params.blocks_mut() {
            for v in b.iter_mut() {
                *v = f64::from_le_bytes(read_array(&mut r)?);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after parameter blocks"));
        }
        Ok(model)
    }
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

/// `m += a b^T`
fn add_outer(m: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (mut row, &ai) in m.rows_mut().into_iter().zip(a.iter()) {
        if ai == 0.0 {
            continue;
        }
        row.zip_mut_with(&b, |r, &bj| *r += ai * bj);
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u8<R: Read>(r: &mut R) -> io::Result<u8> {
    Ok(read_array::<R, 1>(r)?[0])
}

fn read_usize<R: Read>(r: &mut R) -> Result<usize, ModelError> {
    let v = u64::from_le_bytes(read_array(r)?);
    usize::try_from(v).map_err(|_| ModelError::Checkpoint("dimension overflows usize".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> LabelGraph {
        LabelGraph::from_one_based(
            4,
            vec![2, 3],
            vec![vec![1, 1], vec![2, 2], vec![1, 3], vec![2, 1]],
        )
        .unwrap()
    }

    #[test]
    fn identity_head_scores_onehot() {
        let g = LabelGraph::softmax(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(
            ModelConfig::new(Mode::Sm, ExtractorSpec::identity(3)),
            &g,
            &mut rng,
        )
        .unwrap();
        model.params.heads.fine = Array2::eye(3);
        let s = model.score(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(s.fine, vec![0.0, 1.0, 0.0]);
        assert!(s.coarse.is_empty());
    }

    #[test]
    fn zero_coarse_heads_give_group_sums_of_softmax() {
        let g = graph();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = Model::new(
            ModelConfig::new(Mode::Bgl1, ExtractorSpec::identity(3)),
            &g,
            &mut rng,
        )
        .unwrap();
        for w in &mut model.params.heads.coarse {
            w.fill(0.0);
        }
        let x = [0.3, -1.0, 0.8];
        let s = model.score(&x).unwrap();
        assert!(s.coarse.iter().flatten().all(|&v| v == 0.0));
        let post = model.posterior(&g, &x).unwrap();
        let p = crate::softmax::softmax(&s.fine);
        for j in 0..g.m() {
            for c in 0..g.coarse_size(j) {
                let sum: f64 = g.members(j, c).iter().map(|&i| p[i]).sum();
                assert!((post.p_coarse[j][c] - sum).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sm_gradient_is_softmax_regression() {
        let g = graph();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::new(
            ModelConfig::new(Mode::Sm, ExtractorSpec::identity(3)),
            &g,
            &mut rng,
        )
        .unwrap();
        let x = [0.5, 0.25, -2.0];
        let (_, grad) = model.backprop(&g, &x, 2).unwrap();
        let f = model.score(&x).unwrap().fine;
        let d = crate::softmax::cross_entropy_grad(&f, 2);
        for r in 0..3 {
            for i in 0..4 {
                assert!((grad.heads.fine[(r, i)] - x[r] * d[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bgl1_identity_outer_product() {
        let g = graph();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::new(
            ModelConfig::new(Mode::Bgl1, ExtractorSpec::identity(3)).with_lambda(0.0),
            &g,
            &mut rng,
        )
        .unwrap();
        let x = [1.5, -0.5, 0.25];
        let (_, grad) = model.backprop(&g, &x, 1).unwrap();
        let post = model.posterior(&g, &x).unwrap();
        let sg = loss::backward_naive(&g, &post, 1, &model.config().loss).unwrap();
        for r in 0..3 {
            for i in 0..4 {
                assert!((grad.heads.fine[(r, i)] - sg.fine[i] * x[r]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bglm_with_unequal_dims_disables_prior() {
        let g = graph();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = ModelConfig::new(Mode::BglM, ExtractorSpec::affine(3, 4)).with_lambda(1.0);
        cfg.coarse_extractor = Some(ExtractorSpec::affine(3, 2));
        let model = Model::new(cfg, &g, &mut rng).unwrap();
        assert!(!model.prior_active());
        assert_eq!(model.params.heads.coarse[0].nrows(), 2);
    }

    #[test]
    fn graph_shape_checked() {
        let g = graph();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::new(
            ModelConfig::new(Mode::Bgl1, ExtractorSpec::identity(2)),
            &g,
            &mut rng,
        )
        .unwrap();
        assert!(model.loss_graph(&LabelGraph::softmax(4)).is_err());
        assert!(matches!(
            model.score(&[1.0]),
            Err(ModelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn checkpoint_layout_and_round_trip() {
        let g = graph();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = Model::new(
            ModelConfig::new(Mode::BglM, ExtractorSpec::hidden(3, 5, 2)),
            &g,
            &mut rng,
        )
        .unwrap();
        let bytes = model.to_checkpoint_bytes();
        assert_eq!(&bytes[..4], b"BGLM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 2);
        let last = *model.params.heads.coarse[1]
            .as_slice()
            .unwrap()
            .last()
            .unwrap();
        assert_eq!(&bytes[bytes.len() - 8..], &last.to_le_bytes());
        let back = Model::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, model);

        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(Model::read_checkpoint(&corrupt[..]).is_err());
        assert!(Model::read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
