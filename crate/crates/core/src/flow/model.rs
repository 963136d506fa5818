use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::base::HALF_LN_2PI;
use super::network::{Activation, Mlp};
use super::params::{record_floored_slopes, TransformParams, SLOPE_FLOOR};
use super::FlowError;
use crate::autodiff::{Graph, NodeId, Parameter, Tensor};
use crate::bernstein::{BernsteinBasis, BernsteinOutput, MonotoneCoefficients, SigmoidBernsteinOp};

/// Parameter groups of the flow, one network each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// `(a, b)` of the input scaling before the sigmoid.
    F1,
    /// Bernstein coefficients.
    F2,
    /// `(alpha, beta)` of the output affine map.
    F3,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Network-conditioned flow.
    #[default]
    DlMlt,
    /// Linear transformation model baseline.
    Ltm,
}

fn default_order() -> usize {
    10
}

fn default_hidden() -> Vec<usize> {
    vec![50]
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: ModelKind,
    /// Bernstein order `M`.
    #[serde(default = "default_order")]
    pub order: usize,
    /// Hidden layer widths, shared by the three parameter networks.
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Groups whose network sees the constant input 1 instead of `x`.
    #[serde(default)]
    pub constant_params: Vec<ParamGroup>,
    /// When false, `alpha = 1` and `beta = 0`.
    #[serde(default = "default_true")]
    pub use_f3: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::DlMlt,
            order: default_order(),
            hidden_layers: default_hidden(),
            activation: Activation::Tanh,
            constant_params: Vec::new(),
            use_f3: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.order < 1 {
            problems.push(format!("model.order must be >= 1, got {}", self.order));
        }
        if self.hidden_layers.contains(&0) {
            problems.push("model.hidden_layers entries must be positive".to_string());
        }
        problems
    }

    pub fn is_constant(&self, group: ParamGroup) -> bool {
        self.constant_params.contains(&group)
    }
}

/// Graph nodes produced for a batch by [`DensityModel::log_density_nodes`].
#[derive(Clone, Debug)]
pub struct DensityNodes {
    /// `n x 1` log-densities.
    pub log_density: NodeId,
    /// `n x 1` Bernstein slopes before flooring.
    pub slope: NodeId,
    /// Graph leaf of every parameter used.
    pub params: BTreeMap<String, NodeId>,
}

/// A conditional density model trainable through the autodiff graph.
pub trait DensityModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn order(&self) -> usize;
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;
    /// Ids of the weight matrices that carry the L2 penalty.
    fn penalized(&self) -> Vec<String>;
    /// Records per-row log-densities of `y` given rows of `x`.
    fn log_density_nodes(
        &self,
        g: &mut Graph,
        x: &Tensor,
        y: &[f64],
    ) -> Result<DensityNodes, FlowError>;
    /// Transformation parameters for each row of `x`.
    fn transform_params(&self, x: &Tensor) -> Result<Vec<TransformParams>, FlowError>;
}

struct Binder {
    params: BTreeMap<String, NodeId>,
}

impl Binder {
    fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    fn bind(&mut self, g: &mut Graph, p: &Parameter) -> NodeId {
        *self
            .params
            .entry(p.id.clone())
            .or_insert_with(|| g.parameter(p))
    }
}

/// Per-row flow parameters as graph nodes.
struct FlowNodes {
    a: NodeId,
    b: NodeId,
    theta: NodeId,
    alpha: Option<NodeId>,
    beta: Option<NodeId>,
}

fn check_batch(x: &Tensor, y_len: usize, input_dim: usize) -> Result<(), FlowError> {
    if x.cols() != input_dim {
        return Err(FlowError::DimensionMismatch {
            expected: input_dim,
            got: x.cols(),
        });
    }
    if x.rows() != y_len {
        return Err(FlowError::DimensionMismatch {
            expected: x.rows(),
            got: y_len,
        });
    }
    Ok(())
}

/// `log f(y) = log phi(z) + log alpha + log h'(t) + log sigmoid'(u) + log a`.
fn log_density_graph(
    g: &mut Graph,
    basis: &Arc<BernsteinBasis>,
    y: NodeId,
    nodes: &FlowNodes,
) -> Result<(NodeId, NodeId), FlowError> {
    let ay = g.mul(nodes.a, y)?;
    let u = g.sub(ay, nodes.b)?;
    let value_op = Arc::new(SigmoidBernsteinOp::new(
        Arc::clone(basis),
        BernsteinOutput::Value,
    ));
    let slope_op = Arc::new(SigmoidBernsteinOp::new(
        Arc::clone(basis),
        BernsteinOutput::Slope,
    ));
    let h = g.custom(value_op, &[u, nodes.theta])?;
    let slope = g.custom(slope_op, &[u, nodes.theta])?;

    let mut z = h;
    if let Some(alpha) = nodes.alpha {
        z = g.mul(alpha, z)?;
    }
    if let Some(beta) = nodes.beta {
        z = g.sub(z, beta)?;
    }
    let z2 = g.square(z)?;
    let half = g.scale(z2, -0.5)?;
    let log_base = g.add_scalar(half, -HALF_LN_2PI)?;

    let sp_pos = g.softplus(u)?;
    let neg_u = g.neg(u)?;
    let sp_neg = g.softplus(neg_u)?;
    let sp_sum = g.add(sp_pos, sp_neg)?;
    let log_sig = g.neg(sp_sum)?;

    let floored = g.clamp_min(slope, SLOPE_FLOOR)?;
    let log_slope = g.log(floored)?;
    let log_a = g.log(nodes.a)?;

    let mut total = g.add(log_base, log_sig)?;
    total = g.add(total, log_slope)?;
    total = g.add(total, log_a)?;
    if let Some(alpha) = nodes.alpha {
        let log_alpha = g.log(alpha)?;
        total = g.add(total, log_alpha)?;
    }
    let floored_count = g
        .value(slope)
        .data()
        .iter()
        .filter(|&&s| s < SLOPE_FLOOR)
        .count();
    record_floored_slopes(floored_count as u64);
    Ok((total, slope))
}

fn rows_to_params(
    x_rows: usize,
    g: &Graph,
    nodes: &FlowNodes,
) -> Result<Vec<TransformParams>, FlowError> {
    let theta = g.value(nodes.theta);
    (0..x_rows)
        .map(|r| {
            let coeffs = MonotoneCoefficients::new(theta.row_slice(r).to_vec())?;
            TransformParams::new(
                g.value(nodes.a).data()[r],
                g.value(nodes.b).data()[r],
                coeffs,
                nodes.alpha.map_or(1.0, |n| g.value(n).data()[r]),
                nodes.beta.map_or(0.0, |n| g.value(n).data()[r]),
            )
        })
        .collect()
}

/// Network-conditioned flow: three parameter networks emit
/// `(a, b)`, `gamma_0..gamma_M` and `(alpha, beta)` for each input.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepTransformModel {
    config: ModelConfig,
    input_dim: usize,
    basis: Arc<BernsteinBasis>,
    f1: Mlp,
    f2: Mlp,
    f3: Option<Mlp>,
}

impl DeepTransformModel {
    pub fn new(config: ModelConfig, input_dim: usize) -> Result<Self, FlowError> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(FlowError::InvalidConfig(problems.join("; ")));
        }
        let basis = BernsteinBasis::cached(config.order)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let width = |group| {
            if config.is_constant(group) {
                1
            } else {
                input_dim
            }
        };
        let hidden = &config.hidden_layers;
        let act = config.activation;
        let f1 = Mlp::new("f1", width(ParamGroup::F1), hidden, 2, act, &mut rng);
        let f2 = Mlp::new(
            "f2",
            width(ParamGroup::F2),
            hidden,
            config.order + 1,
            act,
            &mut rng,
        );
        let f3 = config
            .use_f3
            .then(|| Mlp::new("f3", width(ParamGroup::F3), hidden, 2, act, &mut rng));
        Ok(Self {
            config,
            input_dim,
            basis,
            f1,
            f2,
            f3,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self, group: ParamGroup) -> Option<&Mlp> {
        match group {
            ParamGroup::F1 => Some(&self.f1),
            ParamGroup::F2 => Some(&self.f2),
            ParamGroup::F3 => self.f3.as_ref(),
        }
    }

    pub fn network_mut(&mut self, group: ParamGroup) -> Option<&mut Mlp> {
        match group {
            ParamGroup::F1 => Some(&mut self.f1),
            ParamGroup::F2 => Some(&mut self.f2),
            ParamGroup::F3 => self.f3.as_mut(),
        }
    }

    fn flow_nodes(
        &self,
        g: &mut Graph,
        x: &Tensor,
        binder: &mut Binder,
    ) -> Result<FlowNodes, FlowError> {
        if x.cols() != self.input_dim {
            return Err(FlowError::DimensionMismatch {
                expected: self.input_dim,
                got: x.cols(),
            });
        }
        let n = x.rows();
        let x_node = g.constant(x.clone());
        let mut ones = None;
        let mut input_for = |g: &mut Graph, group| {
            if self.config.is_constant(group) {
                *ones.get_or_insert_with(|| g.constant(Tensor::full(n, 1, 1.0)))
            } else {
                x_node
            }
        };
        let mut bind = |g: &mut Graph, p: &Parameter| binder.bind(g, p);

        let in1 = input_for(g, ParamGroup::F1);
        let out1 = self.f1.forward(g, in1, &mut bind)?;
        let a_raw = g.slice_cols(out1, 0, 1)?;
        let a = g.softplus(a_raw)?;
        let b = g.slice_cols(out1, 1, 2)?;

        let in2 = input_for(g, ParamGroup::F2);
        let gamma = self.f2.forward(g, in2, &mut bind)?;
        let m = self.config.order;
        let head = g.slice_cols(gamma, 0, 1)?;
        let tail = g.slice_cols(gamma, 1, m + 1)?;
        let increments = g.exp(tail)?;
        let steps = g.concat_cols(head, increments)?;
        let theta = g.cumsum_cols(steps)?;

        let (alpha, beta) = match &self.f3 {
            Some(f3) => {
                let in3 = input_for(g, ParamGroup::F3);
                let out3 = f3.forward(g, in3, &mut bind)?;
                let alpha_raw = g.slice_cols(out3, 0, 1)?;
                let alpha = g.softplus(alpha_raw)?;
                let beta = g.slice_cols(out3, 1, 2)?;
                (Some(alpha), Some(beta))
            }
            None => (None, None),
        };
        Ok(FlowNodes {
            a,
            b,
            theta,
            alpha,
            beta,
        })
    }
}

impl DensityModel for DeepTransformModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn order(&self) -> usize {
        self.config.order
    }

    fn parameters(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.f1.parameters().chain(self.f2.parameters()).collect();
        if let Some(f3) = &self.f3 {
            out.extend(f3.parameters());
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self
            .f1
            .parameters_mut()
            .chain(self.f2.parameters_mut())
            .collect();
        if let Some(f3) = &mut self.f3 {
            out.extend(f3.parameters_mut());
        }
        out
    }

    fn penalized(&self) -> Vec<String> {
        let mut nets = vec![&self.f1, &self.f2];
        if let Some(f3) = &self.f3 {
            nets.push(f3);
        }
        nets.into_iter()
            .flat_map(|n| n.layers().iter().map(|l| l.weight.id.clone()))
            .collect()
    }

    fn log_density_nodes(
        &self,
        g: &mut Graph,
        x: &Tensor,
        y: &[f64],
    ) -> Result<DensityNodes, FlowError> {
        check_batch(x, y.len(), self.input_dim)?;
        let mut binder = Binder::new();
        let nodes = self.flow_nodes(g, x, &mut binder)?;
        let y_node = g.constant(Tensor::column(y));
        let (log_density, slope) = log_density_graph(g, &self.basis, y_node, &nodes)?;
        Ok(DensityNodes {
            log_density,
            slope,
            params: binder.params,
        })
    }

    fn transform_params(&self, x: &Tensor) -> Result<Vec<TransformParams>, FlowError> {
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let nodes = self.flow_nodes(&mut g, x, &mut binder)?;
        rows_to_params(x.rows(), &g, &nodes)
    }
}

/// Plain-value parameters of the linear transformation model
/// `z = h_theta(sigmoid(a*y - b)) - sum_p beta_p x_p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtmParams {
    pub theta: MonotoneCoefficients,
    pub beta: Vec<f64>,
    pub a: f64,
    pub b: f64,
}

impl LtmParams {
    /// The equivalent flow parameters for one input row.
    pub fn at(&self, x: &[f64]) -> Result<TransformParams, FlowError> {
        if x.len() != self.beta.len() {
            return Err(FlowError::DimensionMismatch {
                expected: self.beta.len(),
                got: x.len(),
            });
        }
        let shift: f64 = x.iter().zip(&self.beta).map(|(a, b)| a * b).sum();
        TransformParams::new(self.a, self.b, self.theta.clone(), 1.0, shift)
    }
}

/// `poly(theta, sigmoid(a*y - b)) - sum_p beta_p x_p`.
pub fn ltm_transform(lp: &LtmParams, x: &[f64], y: f64) -> Result<f64, FlowError> {
    Ok(super::transform(&lp.at(x)?, y))
}

/// Trainable linear transformation model. The Bernstein coefficients and the
/// squashing `(a, b)` do not depend on `x`; inputs enter only through the
/// linear shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTransformModel {
    config: ModelConfig,
    input_dim: usize,
    basis: Arc<BernsteinBasis>,
    /// `1 x (M+1)` unconstrained coefficients.
    gamma: Parameter,
    /// `1 x 2`: raw scale (softplus) and shift of the squashing.
    squash: Parameter,
    /// `P x 1` shift coefficients.
    coefs: Parameter,
}

impl LinearTransformModel {
    pub fn new(config: ModelConfig, input_dim: usize) -> Result<Self, FlowError> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(FlowError::InvalidConfig(problems.join("; ")));
        }
        let basis = BernsteinBasis::cached(config.order)?;
        let m = config.order;
        Ok(Self {
            input_dim,
            basis,
            gamma: Parameter::new("ltm.gamma", Tensor::zeros(1, m + 1)),
            squash: Parameter::new("ltm.squash", Tensor::zeros(1, 2)),
            coefs: Parameter::new("ltm.beta", Tensor::zeros(input_dim, 1)),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Current values in plain form.
    pub fn ltm_params(&self) -> Result<LtmParams, FlowError> {
        let theta = crate::bernstein::monotone_from_unconstrained(self.gamma.tensor.data())?;
        let sq = self.squash.tensor.data();
        Ok(LtmParams {
            theta,
            beta: self.coefs.tensor.data().to_vec(),
            a: crate::autodiff::softplus(sq[0]),
            b: sq[1],
        })
    }

    fn flow_nodes(
        &self,
        g: &mut Graph,
        x: &Tensor,
        binder: &mut Binder,
    ) -> Result<FlowNodes, FlowError> {
        if x.cols() != self.input_dim {
            return Err(FlowError::DimensionMismatch {
                expected: self.input_dim,
                got: x.cols(),
            });
        }
        let n = x.rows();
        let ones = g.constant(Tensor::full(n, 1, 1.0));
        let x_node = g.constant(x.clone());
        let gamma = binder.bind(g, &self.gamma);
        let squash = binder.bind(g, &self.squash);
        let coefs = binder.bind(g, &self.coefs);

        let m = self.config.order;
        let head = g.slice_cols(gamma, 0, 1)?;
        let tail = g.slice_cols(gamma, 1, m + 1)?;
        let increments = g.exp(tail)?;
        let steps = g.concat_cols(head, increments)?;
        let theta_row = g.cumsum_cols(steps)?;
        let theta = g.matmul(ones, theta_row)?;

        let sq = g.matmul(ones, squash)?;
        let a_raw = g.slice_cols(sq, 0, 1)?;
        let a = g.softplus(a_raw)?;
        let b = g.slice_cols(sq, 1, 2)?;
        let beta = g.matmul(x_node, coefs)?;
        Ok(FlowNodes {
            a,
            b,
            theta,
            alpha: None,
            beta: Some(beta),
        })
    }
}

impl DensityModel for LinearTransformModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn order(&self) -> usize {
        self.config.order
    }

    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.squash, &self.coefs]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.squash, &mut self.coefs]
    }

    fn penalized(&self) -> Vec<String> {
        Vec::new()
    }

    fn log_density_nodes(
        &self,
        g: &mut Graph,
        x: &Tensor,
        y: &[f64],
    ) -> Result<DensityNodes, FlowError> {
        check_batch(x, y.len(), self.input_dim)?;
        let mut binder = Binder::new();
        let nodes = self.flow_nodes(g, x, &mut binder)?;
        let y_node = g.constant(Tensor::column(y));
        let (log_density, slope) = log_density_graph(g, &self.basis, y_node, &nodes)?;
        Ok(DensityNodes {
            log_density,
            slope,
            params: binder.params,
        })
    }

    fn transform_params(&self, x: &Tensor) -> Result<Vec<TransformParams>, FlowError> {
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let nodes = self.flow_nodes(&mut g, x, &mut binder)?;
        rows_to_params(x.rows(), &g, &nodes)
    }
}

/// Either model kind, selected by [`ModelConfig::kind`].
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Deep(DeepTransformModel),
    Linear(LinearTransformModel),
}

impl AnyModel {
    pub fn new(config: ModelConfig, input_dim: usize) -> Result<Self, FlowError> {
        Ok(match config.kind {
            ModelKind::DlMlt => Self::Deep(DeepTransformModel::new(config, input_dim)?),
            ModelKind::Ltm => Self::Linear(LinearTransformModel::new(config, input_dim)?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Self::Deep(m) => m.config(),
            Self::Linear(m) => m.config(),
        }
    }

    fn inner(&self) -> &dyn DensityModel {
        match self {
            Self::Deep(m) => m,
            Self::Linear(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn DensityModel {
        match self {
            Self::Deep(m) => m,
            Self::Linear(m) => m,
        }
    }
}

impl DensityModel for AnyModel {
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }

    fn order(&self) -> usize {
        self.inner().order()
    }

    fn parameters(&self) -> Vec<&Parameter> {
        self.inner().parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.inner_mut().parameters_mut()
    }

    fn penalized(&self) -> Vec<String> {
        self.inner().penalized()
    }

    fn log_density_nodes(
        &self,
        g: &mut Graph,
        x: &Tensor,
        y: &[f64],
    ) -> Result<DensityNodes, FlowError> {
        self.inner().log_density_nodes(g, x, y)
    }

    fn transform_params(&self, x: &Tensor) -> Result<Vec<TransformParams>, FlowError> {
        self.inner().transform_params(x)
    }
}

/// Row-wise log-densities without recording gradients.
pub fn batch_log_density(
    model: &dyn DensityModel,
    x: &Tensor,
    y: &[f64],
) -> Result<Vec<f64>, FlowError> {
    let mut g = Graph::new();
    let nodes = model.log_density_nodes(&mut g, x, y)?;
    Ok(g.value(nodes.log_density).data().to_vec())
}
