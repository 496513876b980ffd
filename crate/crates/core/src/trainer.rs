//! Training loops that fit the recurrent encoder and a one-class head
//! together.
//!
//! The gradient method descends the smoothed primal in the head variables
//! and takes a Cayley step on every encoder block, all from the same
//! iteration-start point. The QP method alternates an SMO solve of the dual
//! with a Cayley pass on the encoder that lowers the dual objective at the
//! fixed multipliers. Both loops stop once the squared change of their
//! objective drops to `epsilon` and both halve the step (at most 8 times) when
//! a step would raise the objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Label, Sequence, SequenceBatch};
use crate::dual::{gram_matrix, DualError, DualSolution, PairRule};
use crate::ocsvm::{self, sigmoid, smooth_hinge, HeadError, HyperplaneModel, OcsvmDual, SmoothingConfig};
use crate::rnn::{forward, CellKind, ForwardTrace, PoolingMode, RnnError, RnnGradient, RnnParams};
use crate::stiefel::{update_block, StiefelError};
use crate::svdd::{self, SphereModel, SvddDual};

const MAX_HALVINGS: usize = 8;
const ACCEPT_SLACK: f64 = 1e-12;
const STALL_SLACK: f64 = 1e-3;
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },
    #[error(transparent)]
    Rnn(#[from] RnnError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Stiefel(#[from] StiefelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<DualError> for TrainError {
    fn from(e: DualError) -> Self {
        TrainError::Head(HeadError::Dual(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Hyperplane,
    Sphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gradient,
    Qp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    Unsupervised,
    Semi,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub cell: CellKind,
    /// Embedding width `m`.
    pub hidden: usize,
    pub pooling: PoolingMode,
    pub head: HeadKind,
    pub method: Method,
    pub supervision: Supervision,
    pub mu: f64,
    pub lambda: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub max_outer_iters: usize,
    /// Slack weight of the supervised hyperplane objective.
    pub c: f64,
    /// Margin, unlabeled-slack and labeled-slack weights of the supervised
    /// sphere objective.
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Relative objective decrease below which an SMO solve stops.
    pub inner_tol: f64,
    pub inner_max_sweeps: usize,
    /// Keep the encoder at its initialization and fit only the head.
    pub freeze_rnn: bool,
    /// Seed of the encoder initialization.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cell: CellKind::Lstm,
            hidden: 4,
            pooling: PoolingMode::Mean,
            head: HeadKind::Hyperplane,
            method: Method::Gradient,
            supervision: Supervision::Unsupervised,
            mu: 0.05,
            lambda: 0.5,
            tau: 10.0,
            epsilon: 1e-10,
            max_outer_iters: 200,
            c: 1.0,
            c1: 0.5,
            c2: 1.0,
            c3: 1.0,
            inner_tol: 1e-10,
            inner_max_sweeps: 500,
            freeze_rnn: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mu", self.mu, true),
            ("lambda", self.lambda, false),
            ("tau", self.tau, false),
            ("epsilon", self.epsilon, false),
            ("c", self.c, false),
            ("c1", self.c1, true),
            ("c2", self.c2, false),
            ("c3", self.c3, false),
            ("inner_tol", self.inner_tol, true),
        ];
        for (name, value, zero_ok) in positive {
            let ok = value.is_finite() && (value > 0.0 || (zero_ok && value == 0.0));
            if !ok {
                let bound = if zero_ok { "non-negative" } else { "positive" };
                return Err(TrainError::Config(format!("{name} must be finite and {bound}, got {value}")));
            }
        }
        if self.hidden == 0 {
            return Err(TrainError::Config("hidden must be at least 1".into()));
        }
        if self.max_outer_iters == 0 {
            return Err(TrainError::Config("max_outer_iters must be at least 1".into()));
        }
        if self.method == Method::Qp {
            if self.supervision != Supervision::Unsupervised {
                return Err(TrainError::Config(
                    "the qp method supports unsupervised training only".into(),
                ));
            }
            if self.lambda > 1.0 {
                return Err(TrainError::Config(format!(
                    "the qp method needs lambda <= 1 for a feasible dual, got {}",
                    self.lambda
                )));
            }
            if self.inner_max_sweeps == 0 {
                return Err(TrainError::Config("inner_max_sweeps must be at least 1".into()));
            }
        }
        Ok(())
    }

    fn objective_kind(&self) -> ObjectiveKind {
        match (self.head, self.supervision) {
            (HeadKind::Hyperplane, Supervision::Unsupervised) => ObjectiveKind::Hyperplane,
            (HeadKind::Sphere, Supervision::Unsupervised) => ObjectiveKind::Sphere,
            (HeadKind::Hyperplane, _) => ObjectiveKind::SupervisedHyperplane,
            (HeadKind::Sphere, _) => ObjectiveKind::SupervisedSphere,
        }
    }
}

/// `−(1/τ) log(e^{−τa} + e^{−τb})`, a smooth lower approximation of
/// `min(a, b)` within `log(2)/τ`.
pub fn smooth_min(a: f64, b: f64, tau: f64) -> f64 {
    let lo = a.min(b);
    let gap = (a - b).abs();
    lo - (-tau * gap).exp().ln_1p() / tau
}

/// Smoothed objective handled by the gradient loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// Variables `[w, ρ]`.
    Hyperplane,
    /// Variables `[c̃, R²]`.
    Sphere,
    /// Variables `[w, ρ]`; labeled items enter through `y(wᵀh̄ + ρ) ≥ 1`.
    SupervisedHyperplane,
    /// Variables `[c̃, R², g]` with margin `γ = log(1 + e^g)`.
    SupervisedSphere,
}

/// Head variables of a smoothed objective, stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadVars {
    pub kind: ObjectiveKind,
    pub x: DVector<f64>,
}

/// Hyperparameters of the smoothed objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParams {
    pub tau: f64,
    pub lambda: f64,
    pub c: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl From<&TrainConfig> for ObjectiveParams {
    fn from(cfg: &TrainConfig) -> Self {
        Self {
            tau: cfg.tau,
            lambda: cfg.lambda,
            c: cfg.c,
            c1: cfg.c1,
            c2: cfg.c2,
            c3: cfg.c3,
        }
    }
}

fn softplus(g: f64) -> f64 {
    smooth_hinge(g, 1.0)
}

impl HeadVars {
    /// Starting point: `w = mean h̄, ρ = 0` for hyperplanes; mean center and
    /// median squared distance for spheres; `g = 0` for the sphere margin.
    pub fn init(kind: ObjectiveKind, embeddings: &[DVector<f64>]) -> Result<Self> {
        let first = embeddings.first().ok_or(TrainError::EmptyBatch)?;
        let m = first.len();
        let x = match kind {
            ObjectiveKind::Hyperplane | ObjectiveKind::SupervisedHyperplane => {
                let mut x = DVector::zeros(m + 1);
                for h in embeddings {
                    x.rows_mut(0, m).axpy(1.0 / embeddings.len() as f64, h, 1.0);
                }
                x
            }
            ObjectiveKind::Sphere | ObjectiveKind::SupervisedSphere => {
                let s = SphereModel::init(embeddings)?;
                let extra = usize::from(kind == ObjectiveKind::SupervisedSphere);
                let mut x = DVector::zeros(m + 1 + extra);
                x.rows_mut(0, m).copy_from(&s.center);
                x[m] = s.r_squared;
                x
            }
        };
        Ok(Self { kind, x })
    }

    /// Embedding width the variables belong to.
    pub fn dim(&self) -> usize {
        match self.kind {
            ObjectiveKind::SupervisedSphere => self.x.len() - 2,
            _ => self.x.len() - 1,
        }
    }

    fn vector(&self) -> DVector<f64> {
        self.x.rows(0, self.dim()).into_owned()
    }

    fn scalar(&self) -> f64 {
        self.x[self.dim()]
    }

    pub fn hyperplane(&self) -> HyperplaneModel {
        HyperplaneModel::new(self.vector(), self.scalar())
    }

    pub fn sphere(&self) -> SphereModel {
        SphereModel::new(self.vector(), self.scalar())
    }

    /// `γ` of the supervised sphere objective.
    pub fn gamma(&self) -> Option<f64> {
        (self.kind == ObjectiveKind::SupervisedSphere).then(|| softplus(self.x[self.dim() + 1]))
    }

    /// Real-valued normality score; non-negative means nominal.
    pub fn margin(&self, h: &DVector<f64>) -> f64 {
        match self.kind {
            ObjectiveKind::Hyperplane => self.hyperplane().margin(h),
            ObjectiveKind::SupervisedHyperplane => {
                let m = self.hyperplane();
                m.w.dot(h) + m.rho
            }
            ObjectiveKind::Sphere | ObjectiveKind::SupervisedSphere => self.sphere().margin(h),
        }
    }

    fn project(&mut self) {
        if matches!(self.kind, ObjectiveKind::Sphere | ObjectiveKind::SupervisedSphere) {
            let k = self.dim();
            self.x[k] = self.x[k].max(0.0);
        }
    }

    pub fn into_detector_head(self) -> DetectorHead {
        match self.kind {
            ObjectiveKind::Hyperplane => DetectorHead::Hyperplane { model: self.hyperplane() },
            ObjectiveKind::SupervisedHyperplane => DetectorHead::SupervisedHyperplane {
                model: self.hyperplane(),
            },
            ObjectiveKind::Sphere => DetectorHead::Sphere { model: self.sphere() },
            ObjectiveKind::SupervisedSphere => DetectorHead::SupervisedSphere {
                gamma: self.gamma().unwrap_or(0.0),
                model: self.sphere(),
            },
        }
    }
}

fn check_dims(vars: &HeadVars, embeddings: &[DVector<f64>], labels: &[Option<Label>]) -> Result<()> {
    if embeddings.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if labels.len() != embeddings.len() {
        return Err(TrainError::Config(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.len()
        )));
    }
    if let Some(h) = embeddings.iter().find(|h| h.len() != vars.dim()) {
        return Err(HeadError::Dimension {
            expected: vars.dim(),
            found: h.len(),
        }
        .into());
    }
    Ok(())
}

/// Value of the smoothed head objective. Labels matter for the supervised
/// kinds only; `None` marks an unlabeled item.
pub fn head_objective(
    vars: &HeadVars,
    embeddings: &[DVector<f64>],
    labels: &[Option<Label>],
    p: &ObjectiveParams,
) -> Result<f64> {
    check_dims(vars, embeddings, labels)?;
    let smoothing = SmoothingConfig::new(p.tau, p.lambda)?;
    Ok(match vars.kind {
        ObjectiveKind::Hyperplane => ocsvm::primal_objective(&vars.hyperplane(), embeddings, &smoothing)?,
        ObjectiveKind::Sphere => svdd::primal_objective(&vars.sphere(), embeddings, &smoothing)?,
        ObjectiveKind::SupervisedHyperplane => supervised_hyperplane(vars, embeddings, labels, p, true),
        ObjectiveKind::SupervisedSphere => supervised_sphere(vars, embeddings, labels, p, true),
    })
}

/// The supervised objectives with every smoothed slack replaced by its exact
/// hinge and every smooth minimum by `min`.
pub fn exact_supervised_objective(
    vars: &HeadVars,
    embeddings: &[DVector<f64>],
    labels: &[Option<Label>],
    p: &ObjectiveParams,
) -> Result<f64> {
    check_dims(vars, embeddings, labels)?;
    match vars.kind {
        ObjectiveKind::SupervisedHyperplane => Ok(supervised_hyperplane(vars, embeddings, labels, p, false)),
        ObjectiveKind::SupervisedSphere => Ok(supervised_sphere(vars, embeddings, labels, p, false)),
        _ => Err(TrainError::Config("exact supervised objective needs a supervised head".into())),
    }
}

fn supervised_hyperplane(
    vars: &HeadVars,
    embeddings: &[DVector<f64>],
    labels: &[Option<Label>],
    p: &ObjectiveParams,
    smooth: bool,
) -> f64 {
    let model = vars.hyperplane();
    let slack = |v: f64| if smooth { smooth_hinge(v, p.tau) } else { v.max(0.0) };
    let mut total = 0.0;
    for (h, label) in embeddings.iter().zip(labels) {
        let u = model.w.dot(h);
        total += match label {
            Some(y) => slack(1.0 - y.sign() * (u + model.rho)),
            None => {
                let xi = slack(1.0 - (u - model.rho));
                let gamma = slack(1.0 + (u - model.rho));
                if smooth {
                    smooth_min(gamma, xi, p.tau)
                } else {
                    gamma.min(xi)
                }
            }
        };
    }
    p.c * total + model.w.norm()
}

fn supervised_sphere(
    vars: &HeadVars,
    embeddings: &[DVector<f64>],
    labels: &[Option<Label>],
    p: &ObjectiveParams,
    smooth: bool,
) -> f64 {
    let model = vars.sphere();
    let gamma = vars.gamma().unwrap_or(0.0);
    let slack = |v: f64| if smooth { smooth_hinge(v, p.tau) } else { v.max(0.0) };
    let mut unlabeled = 0.0;
    let mut labeled = 0.0;
    for (h, label) in embeddings.iter().zip(labels) {
        let psi = svdd::psi(h, &model);
        match label {
            Some(y) => labeled += slack(y.sign() * psi + gamma),
            None => unlabeled += slack(psi),
        }
    }
    model.r_squared - p.c1 * gamma + p.c2 * unlabeled + p.c3 * labeled
}

/// Gradient of [`head_objective`] with respect to the head variables, plus
/// the per-item derivative with respect to each embedding.
pub fn head_gradient(
    vars: &HeadVars,
    embeddings: &[DVector<f64>],
    labels: &[Option<Label>],
    p: &ObjectiveParams,
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    check_dims(vars, embeddings, labels)?;
    let smoothing = SmoothingConfig::new(p.tau, p.lambda)?;
    let m = vars.dim();
    Ok(match vars.kind {
        ObjectiveKind::Hyperplane => {
            let g = ocsvm::primal_gradients(&vars.hyperplane(), embeddings, &smoothing)?;
            let mut x = DVector::zeros(m + 1);
            x.rows_mut(0, m).copy_from(&g.grad_w);
            x[m] = g.grad_rho;
            (x, g.upstream)
        }
        ObjectiveKind::Sphere => {
            let g = svdd::primal_gradients(&vars.sphere(), embeddings, &smoothing)?;
            let mut x = DVector::zeros(m + 1);
            x.rows_mut(0, m).copy_from(&g.grad_center);
            x[m] = g.grad_r_squared;
            (x, g.upstream)
        }
        ObjectiveKind::SupervisedHyperplane => supervised_hyperplane_gradient(vars, embeddings, labels, p),
        ObjectiveKind::SupervisedSphere => supervised_sphere_gradient(vars, embeddings, labels, p),
    })
}

fn supervised_hyperplane_gradient(
    vars: &HeadVars,
    embeddings: &[DVector<f64>],
    labels: &[Option<Label>],
    p: &ObjectiveParams,
) -> (DVector<f64>, Vec<DVector<f64>>) {
    let model = vars.hyperplane();
    let m = model.w.len();
    let tau = p.tau;
    let mut grad_w = DVector::zeros(m);
    let mut grad_rho = 0.0;
    let mut upstream = Vec::with_capacity(embeddings.len());
    for (h, label) in embeddings.iter().zip(labels) {
        let u = model.w.dot(h);
        // derivative of the item's term with respect to u = wᵀh̄, and the
        // sign with which ρ enters next to u
        let (d_u, rho_sign) = match label {
            Some(y) => {
                let y = y.sign();
                (-p.c * y * sigmoid(tau * (1.0 - y * (u + model.rho))), 1.0)
            }
            None => {
                let a = 1.0 - (u - model.rho);
                let b = 1.0 + (u - model.rho);
                let (sa, sb) = (smooth_hinge(a, tau), smooth_hinge(b, tau));
                let weight_b = sigmoid(tau * (sa - sb));
                let d = weight_b * sigmoid(tau * b) - (1.0 - weight_b) * sigmoid(tau * a);
                (p.c * d, -1.0)
            }
        };
        grad_w.axpy(d_u, h, 1.0);
        grad_rho += d_u * rho_sign;
        upstream.push(&model.w * d_u);
    }
    let norm = model.w.norm();
    if norm > 0.0 {
        grad_w.axpy(1.0 / norm, &model.w, 1.0);
    }
    let mut x = DVector::zeros(m + 1);
    x.rows_mut(0, m).copy_from(&grad_w);
    x[m] = grad_rho;
    (x, upstream)
}

fn supervised_sphere_gradient(
    vars: &HeadVars,
    embeddings: &[DVector<f64>],
    labels: &[Option<Label>],
    p: &ObjectiveParams,
) -> (DVector<f64>, Vec<DVector<f64>>) {
    let model = vars.sphere();
    let m = model.center.len();
    let g = vars.x[m + 1];
    let gamma = softplus(g);
    let tau = p.tau;
    let mut grad_c = DVector::zeros(m);
    let mut grad_r2 = 1.0;
    let mut grad_gamma = -p.c1;
    let mut upstream = Vec::with_capacity(embeddings.len());
    for (h, label) in embeddings.iter().zip(labels) {
        let diff = h - &model.center;
        let psi = diff.norm_squared() - model.r_squared;
        // derivative of the item's term with respect to Ψ
        let d_psi = match label {
            Some(y) => {
                let y = y.sign();
                let s = p.c3 * sigmoid(tau * (y * psi + gamma));
                grad_gamma += s;
                s * y
            }
            None => p.c2 * sigmoid(tau * psi),
        };
        grad_c.axpy(-2.0 * d_psi, &diff, 1.0);
        grad_r2 -= d_psi;
        upstream.push(diff * (2.0 * d_psi));
    }
    let mut x = DVector::zeros(m + 2);
    x.rows_mut(0, m).copy_from(&grad_c);
    x[m] = grad_r2;
    x[m + 1] = grad_gamma * sigmoid(g);
    (x, upstream)
}

/// Trained head, serialized with a `type` tag that selects the score formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DetectorHead {
    /// Score `wᵀh̄ − ρ`.
    Hyperplane { model: HyperplaneModel },
    /// Score `wᵀh̄ + ρ`, the decision function of the labeled constraints.
    SupervisedHyperplane { model: HyperplaneModel },
    /// Score `R² − ‖h̄ − c̃‖²`.
    Sphere { model: SphereModel },
    SupervisedSphere { model: SphereModel, gamma: f64 },
    /// Score `Σ αⱼ h̄ⱼᵀh̄ − ρ` over the training embeddings.
    HyperplaneDual {
        alpha: DualSolution,
        rho: f64,
        support: Vec<Vec<f64>>,
    },
    /// Score `R² − αᵀKα + 2 Σ αⱼ h̄ⱼᵀh̄ − h̄ᵀh̄` over the training embeddings.
    SphereDual {
        alpha: DualSolution,
        r_squared: f64,
        support: Vec<Vec<f64>>,
    },
}

impl DetectorHead {
    pub fn dim(&self) -> usize {
        match self {
            DetectorHead::Hyperplane { model } | DetectorHead::SupervisedHyperplane { model } => model.w.len(),
            DetectorHead::Sphere { model } | DetectorHead::SupervisedSphere { model, .. } => model.center.len(),
            DetectorHead::HyperplaneDual { support, .. } | DetectorHead::SphereDual { support, .. } => {
                support.first().map_or(0, Vec::len)
            }
        }
    }

    /// Margin of every embedding; non-negative means nominal.
    pub fn margins(&self, embeddings: &[DVector<f64>]) -> Vec<f64> {
        match self {
            DetectorHead::Hyperplane { model } => embeddings.iter().map(|h| model.margin(h)).collect(),
            DetectorHead::SupervisedHyperplane { model } => {
                embeddings.iter().map(|h| model.w.dot(h) + model.rho).collect()
            }
            DetectorHead::Sphere { model } | DetectorHead::SupervisedSphere { model, .. } => {
                embeddings.iter().map(|h| model.margin(h)).collect()
            }
            DetectorHead::HyperplaneDual { alpha, rho, support } => {
                let support = to_vectors(support);
                embeddings
                    .iter()
                    .map(|h| ocsvm::dual_margin(alpha, *rho, &gram_row(&support, h)))
                    .collect()
            }
            DetectorHead::SphereDual {
                alpha,
                r_squared,
                support,
            } => {
                let support = to_vectors(support);
                let gram = gram_matrix(&support);
                embeddings
                    .iter()
                    .map(|h| svdd::dual_margin(alpha, *r_squared, &gram, &gram_row(&support, h), h.norm_squared()))
                    .collect()
            }
        }
    }
}

fn to_vectors(rows: &[Vec<f64>]) -> Vec<DVector<f64>> {
    rows.iter().map(|r| DVector::from_column_slice(r)).collect()
}

fn gram_row(support: &[DVector<f64>], h: &DVector<f64>) -> Vec<f64> {
    support.iter().map(|s| s.dot(h)).collect()
}

/// Why the outer loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The squared objective change fell below `epsilon`.
    Tolerance,
    /// No step size produced progress, and the best candidate moved the
    /// objective by a negligible amount.
    Stalled,
    /// `max_outer_iters` was reached.
    IterationCap,
    /// The encoder was frozen and the dual was solved once.
    FrozenEncoder,
}

impl StopReason {
    pub fn converged(self) -> bool {
        self != StopReason::IterationCap
    }
}

/// Encoder, head and training record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedDetector {
    pub version: u32,
    pub params: RnnParams,
    pub head: DetectorHead,
    pub config: TrainConfig,
    /// Objective after initialization and after every outer iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// Whether the stopping rule fired before the iteration cap.
    pub converged: bool,
    pub stop_reason: StopReason,
    /// Whether every SMO solve met its tolerance (always true for the
    /// gradient method).
    pub inner_converged: bool,
}

impl TrainedDetector {
    pub fn embed(&self, batch: &SequenceBatch) -> Result<Vec<DVector<f64>>> {
        embed_all(&self.params, batch.items(), self.config.pooling)
    }

    /// Real-valued normality score of every sequence.
    pub fn margins(&self, batch: &SequenceBatch) -> Result<Vec<f64>> {
        let embeddings = self.embed(batch)?;
        Ok(self.head.margins(&embeddings))
    }

    pub fn predict(&self, batch: &SequenceBatch) -> Result<Vec<Label>> {
        Ok(self.margins(batch)?.into_iter().map(Label::from_margin).collect())
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let det: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if det.version != MODEL_VERSION {
            return Err(format!("unsupported model version {}", det.version));
        }
        if det.head.dim() != det.params.m() {
            return Err(format!(
                "head dimension {} does not match encoder width {}",
                det.head.dim(),
                det.params.m()
            ));
        }
        Ok(det)
    }
}

fn embed_all(params: &RnnParams, items: &[Sequence], pooling: PoolingMode) -> Result<Vec<DVector<f64>>> {
    items
        .iter()
        .map(|s| Ok(forward(&s.values, params, pooling)?.embedding().h_bar.clone()))
        .collect()
}

fn forward_all(params: &RnnParams, items: &[Sequence], pooling: PoolingMode) -> Result<Vec<ForwardTrace>> {
    items
        .iter()
        .map(|s| Ok(forward(&s.values, params, pooling)?))
        .collect()
}

fn embeddings_of(traces: &[ForwardTrace]) -> Vec<DVector<f64>> {
    traces.iter().map(|t| t.embedding().h_bar.clone()).collect()
}

fn chain_gradient(params: &RnnParams, traces: &[ForwardTrace], upstream: &[DVector<f64>]) -> RnnGradient {
    let mut grad = RnnGradient::zeros_like(params);
    for (t, u) in traces.iter().zip(upstream) {
        t.backward_into(params, u, &mut grad);
    }
    grad
}

/// One Cayley step of size `mu` on every block of `params`.
pub fn cayley_pass(params: &RnnParams, grad: &RnnGradient, mu: f64) -> Result<RnnParams> {
    let mut next = params.clone();
    for (blk, g) in next.blocks_mut().iter_mut().zip(&grad.blocks) {
        blk.w = update_block(&blk.w, &g.w, mu)?;
        blk.r = update_block(&blk.r, &g.r, mu)?;
        if let (Some(b), Some(gb)) = (blk.b.as_mut(), g.b.as_ref()) {
            let col = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
            let gcol = DMatrix::from_column_slice(gb.len(), 1, gb.as_slice());
            let out = update_block(&col, &gcol, mu)?;
            *b = DVector::from_column_slice(out.as_slice());
        }
    }
    Ok(next)
}

/// Smoothed objective and its full gradient: head variables and every
/// encoder entry, chained through the unrolled recursion.
pub fn joint_gradient(
    params: &RnnParams,
    vars: &HeadVars,
    batch: &SequenceBatch,
    pooling: PoolingMode,
    p: &ObjectiveParams,
) -> Result<(f64, DVector<f64>, RnnGradient)> {
    let traces = forward_all(params, batch.items(), pooling)?;
    let embeddings = embeddings_of(&traces);
    let labels = batch.labels();
    let f = head_objective(vars, &embeddings, &labels, p)?;
    let (gx, upstream) = head_gradient(vars, &embeddings, &labels, p)?;
    Ok((f, gx, chain_gradient(params, &traces, &upstream)))
}

/// Smoothed objective of the encoder-plus-head composition.
pub fn joint_objective(
    params: &RnnParams,
    vars: &HeadVars,
    batch: &SequenceBatch,
    pooling: PoolingMode,
    p: &ObjectiveParams,
) -> Result<f64> {
    let embeddings = embed_all(params, batch.items(), pooling)?;
    head_objective(vars, &embeddings, &batch.labels(), p)
}

fn accepts(f_new: f64, f_old: f64) -> bool {
    f_new.is_finite() && f_new <= f_old + ACCEPT_SLACK * f_old.abs().max(1.0)
}

/// Outcome of a step search that found no acceptable step. `worsening` is
/// how far the best candidate moved the objective in the wrong direction; a
/// small finite amount means the iterate is stationary up to round-off and
/// curvature, anything else is divergence.
fn rejected_step(iteration: usize, f_old: f64, best: f64, worsening: f64) -> Result<()> {
    if best.is_finite() && worsening <= STALL_SLACK * f_old.abs().max(1.0) {
        Ok(())
    } else {
        Err(TrainError::Divergence {
            iteration,
            detail: format!(
                "objective {f_old} could not be improved after {MAX_HALVINGS} step halvings (best candidate {best})"
            ),
        })
    }
}

/// Result of the head-only gradient loop on fixed embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFit {
    pub vars: HeadVars,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
}

/// Gradient descent on the head variables alone, for fixed embeddings.
pub fn fit_head(
    init: HeadVars,
    embeddings: &[DVector<f64>],
    labels: &[Option<Label>],
    cfg: &TrainConfig,
) -> Result<HeadFit> {
    cfg.validate()?;
    let p = ObjectiveParams::from(cfg);
    let mut vars = init;
    let mut f = head_objective(&vars, embeddings, labels, &p)?;
    let mut trace = vec![f];
    let mut stop_reason = StopReason::IterationCap;
    let mut iterations = 0;
    for it in 1..=cfg.max_outer_iters {
        iterations = it;
        let (gx, _) = head_gradient(&vars, embeddings, labels, &p)?;
        let mut step = cfg.mu;
        let mut best = f64::INFINITY;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut cand = vars.clone();
            cand.x.axpy(-step, &gx, 1.0);
            cand.project();
            let f_new = head_objective(&cand, embeddings, labels, &p)?;
            if accepts(f_new, f) {
                accepted = Some((cand, f_new));
                break;
            }
            if f_new < best || best.is_nan() {
                best = f_new;
            }
            step *= 0.5;
        }
        let Some((cand, f_new)) = accepted else {
            rejected_step(it, f, best, best - f)?;
            stop_reason = StopReason::Stalled;
            break;
        };
        let delta = (f_new - f).powi(2);
        vars = cand;
        f = f_new;
        trace.push(f);
        if delta <= cfg.epsilon {
            stop_reason = StopReason::Tolerance;
            break;
        }
    }
    Ok(HeadFit {
        vars,
        trace,
        iterations,
        converged: stop_reason.converged(),
        stop_reason,
    })
}

fn check_batch(batch: &SequenceBatch, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let labeled = batch.items().iter().filter(|s| s.label.is_some()).count();
    match cfg.supervision {
        Supervision::Unsupervised => {}
        Supervision::Semi => {
            if labeled == 0 {
                return Err(TrainError::Config("semi-supervised training needs at least one labeled item".into()));
            }
            if labeled == batch.len() {
                return Err(TrainError::Config(
                    "semi-supervised training needs at least one unlabeled item; use full supervision".into(),
                ));
            }
        }
        Supervision::Full => {
            if labeled != batch.len() {
                return Err(TrainError::Config(format!(
                    "fully supervised training needs every item labeled, {} of {} are unlabeled",
                    batch.len() - labeled,
                    batch.len()
                )));
            }
        }
    }
    Ok(())
}

fn labels_for(batch: &SequenceBatch, cfg: &TrainConfig) -> Vec<Option<Label>> {
    match cfg.supervision {
        Supervision::Unsupervised => vec![None; batch.len()],
        _ => batch.labels(),
    }
}

/// Joint gradient training of encoder and head on the smoothed primal.
pub fn train_gradient(batch: &SequenceBatch, cfg: &TrainConfig) -> Result<TrainedDetector> {
    check_batch(batch, cfg)?;
    if cfg.method != Method::Gradient {
        return Err(TrainError::Config("train_gradient needs method = gradient".into()));
    }
    let p = ObjectiveParams::from(cfg);
    let labels = labels_for(batch, cfg);
    let mut params = RnnParams::init_orthogonal(cfg.cell, cfg.hidden, batch.p(), cfg.seed);
    let mut traces = forward_all(&params, batch.items(), cfg.pooling)?;
    let mut embeddings = embeddings_of(&traces);
    let vars = HeadVars::init(cfg.objective_kind(), &embeddings)?;

    if cfg.freeze_rnn {
        let fit = fit_head(vars, &embeddings, &labels, cfg)?;
        return Ok(TrainedDetector {
            version: MODEL_VERSION,
            params,
            head: fit.vars.into_detector_head(),
            config: cfg.clone(),
            trace: fit.trace,
            iterations: fit.iterations,
            converged: fit.converged,
            stop_reason: fit.stop_reason,
            inner_converged: true,
        });
    }

    let mut vars = vars;
    let mut f = head_objective(&vars, &embeddings, &labels, &p)?;
    let mut trace = vec![f];
    let mut stop_reason = StopReason::IterationCap;
    let mut iterations = 0;
    for it in 1..=cfg.max_outer_iters {
        iterations = it;
        let (gx, upstream) = head_gradient(&vars, &embeddings, &labels, &p)?;
        let grad_theta = chain_gradient(&params, &traces, &upstream);
        let mut step = cfg.mu;
        let mut best = f64::INFINITY;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut cand = vars.clone();
            cand.x.axpy(-step, &gx, 1.0);
            cand.project();
            let cand_params = cayley_pass(&params, &grad_theta, step)?;
            let cand_traces = forward_all(&cand_params, batch.items(), cfg.pooling)?;
            let cand_embeddings = embeddings_of(&cand_traces);
            let f_new = head_objective(&cand, &cand_embeddings, &labels, &p)?;
            if accepts(f_new, f) {
                accepted = Some((cand, cand_params, cand_traces, cand_embeddings, f_new));
                break;
            }
            if f_new < best || best.is_nan() {
                best = f_new;
            }
            step *= 0.5;
        }
        let Some((cand, cand_params, cand_traces, cand_embeddings, f_new)) = accepted else {
            rejected_step(it, f, best, best - f)?;
            stop_reason = StopReason::Stalled;
            break;
        };
        let delta = (f_new - f).powi(2);
        vars = cand;
        params = cand_params;
        traces = cand_traces;
        embeddings = cand_embeddings;
        f = f_new;
        trace.push(f);
        if delta <= cfg.epsilon {
            stop_reason = StopReason::Tolerance;
            break;
        }
    }
    Ok(TrainedDetector {
        version: MODEL_VERSION,
        params,
        head: vars.into_detector_head(),
        config: cfg.clone(),
        trace,
        iterations,
        converged: stop_reason.converged(),
        stop_reason,
        inner_converged: true,
    })
}

/// Semi- or fully supervised gradient training; the head objective follows
/// `cfg.head`.
pub fn train_semisupervised_gradient(batch: &SequenceBatch, cfg: &TrainConfig) -> Result<TrainedDetector> {
    if cfg.supervision == Supervision::Unsupervised {
        return Err(TrainError::Config("supervision must be semi or full".into()));
    }
    train_gradient(batch, cfg)
}

/// `∂/∂h̄ᵢ` of the dual objective at fixed multipliers.
fn dual_upstream(head: HeadKind, alpha: &[f64], embeddings: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut v = DVector::zeros(embeddings[0].len());
    for (a, h) in alpha.iter().zip(embeddings) {
        v.axpy(*a, h, 1.0);
    }
    match head {
        HeadKind::Hyperplane => alpha.iter().map(|a| &v * *a).collect(),
        HeadKind::Sphere => alpha
            .iter()
            .zip(embeddings)
            .map(|(a, h)| (&v - h) * (2.0 * a))
            .collect(),
    }
}

fn dual_value(head: HeadKind, gram: &DMatrix<f64>, alpha: &[f64]) -> f64 {
    match head {
        HeadKind::Hyperplane => OcsvmDual.objective(gram, alpha),
        HeadKind::Sphere => SvddDual.objective(gram, alpha),
    }
}

fn solve(head: HeadKind, alpha: &DualSolution, gram: &DMatrix<f64>, cfg: &TrainConfig) -> Result<crate::dual::SmoOutcome> {
    Ok(match head {
        HeadKind::Hyperplane => ocsvm::solve_dual(alpha, gram, cfg.inner_tol, cfg.inner_max_sweeps)?,
        HeadKind::Sphere => svdd::solve_dual(alpha, gram, cfg.inner_tol, cfg.inner_max_sweeps)?,
    })
}

/// Alternating SMO / Cayley training on the dual.
pub fn train_qp(batch: &SequenceBatch, cfg: &TrainConfig) -> Result<TrainedDetector> {
    check_batch(batch, cfg)?;
    if cfg.method != Method::Qp {
        return Err(TrainError::Config("train_qp needs method = qp".into()));
    }
    let head = cfg.head;
    let mut params = RnnParams::init_orthogonal(cfg.cell, cfg.hidden, batch.p(), cfg.seed);
    let mut traces = forward_all(&params, batch.items(), cfg.pooling)?;
    let mut embeddings = embeddings_of(&traces);
    let mut gram = gram_matrix(&embeddings);
    let init = DualSolution::uniform(batch.len(), cfg.lambda)?;
    let outcome = solve(head, &init, &gram, cfg)?;
    let mut inner_converged = outcome.converged;
    let mut alpha = outcome.solution;
    let mut kappa = outcome.objective;
    let mut trace = vec![kappa];
    let mut stop_reason = if cfg.freeze_rnn {
        StopReason::FrozenEncoder
    } else {
        StopReason::IterationCap
    };
    let mut iterations = 0;

    if !cfg.freeze_rnn {
        for it in 1..=cfg.max_outer_iters {
            iterations = it;
            // The primal optimum equals minus the dual optimum, so lowering
            // the primal over the encoder means raising the dual value at
            // fixed multipliers.
            let upstream: Vec<DVector<f64>> = dual_upstream(head, &alpha.alpha, &embeddings)
                .into_iter()
                .map(|u| -u)
                .collect();
            let grad_theta = chain_gradient(&params, &traces, &upstream);
            let mut step = cfg.mu;
            let mut best = f64::NEG_INFINITY;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let cand_params = cayley_pass(&params, &grad_theta, step)?;
                let cand_traces = forward_all(&cand_params, batch.items(), cfg.pooling)?;
                let cand_embeddings = embeddings_of(&cand_traces);
                let cand_gram = gram_matrix(&cand_embeddings);
                let value = dual_value(head, &cand_gram, &alpha.alpha);
                if accepts(-value, -kappa) {
                    accepted = Some((cand_params, cand_traces, cand_embeddings, cand_gram));
                    break;
                }
                if value > best || best.is_nan() {
                    best = value;
                }
                step *= 0.5;
            }
            let Some((cand_params, cand_traces, cand_embeddings, cand_gram)) = accepted else {
                rejected_step(it, kappa, best, kappa - best)?;
                stop_reason = StopReason::Stalled;
                break;
            };
            params = cand_params;
            traces = cand_traces;
            embeddings = cand_embeddings;
            gram = cand_gram;
            let outcome = solve(head, &alpha, &gram, cfg)?;
            inner_converged &= outcome.converged;
            alpha = outcome.solution;
            let next = outcome.objective;
            if !next.is_finite() {
                return Err(TrainError::Divergence {
                    iteration: it,
                    detail: format!("dual objective became {next}"),
                });
            }
            let delta = (next - kappa).powi(2);
            kappa = next;
            trace.push(kappa);
            if delta <= cfg.epsilon {
                stop_reason = StopReason::Tolerance;
                break;
            }
        }
    }

    let support: Vec<Vec<f64>> = embeddings.iter().map(|h| h.iter().copied().collect()).collect();
    let detector_head = match head {
        HeadKind::Hyperplane => {
            let rho = ocsvm::recover_rho(&alpha, &gram).or_else(|_| ocsvm::rho_from_kkt_bounds(&alpha, &gram))?;
            DetectorHead::HyperplaneDual { alpha, rho, support }
        }
        HeadKind::Sphere => {
            let r_squared =
                svdd::recover_r_squared(&alpha, &gram).or_else(|_| svdd::r_squared_from_kkt_bounds(&alpha, &gram))?;
            DetectorHead::SphereDual {
                alpha,
                r_squared,
                support,
            }
        }
    };
    Ok(TrainedDetector {
        version: MODEL_VERSION,
        params,
        head: detector_head,
        config: cfg.clone(),
        trace,
        iterations,
        converged: stop_reason.converged(),
        stop_reason,
        inner_converged,
    })
}

/// Dispatches on `cfg.method`.
pub fn train(batch: &SequenceBatch, cfg: &TrainConfig) -> Result<TrainedDetector> {
    match cfg.method {
        Method::Gradient => train_gradient(batch, cfg),
        Method::Qp => train_qp(batch, cfg),
    }
}
