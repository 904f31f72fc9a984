//! Constrained attention filters optimized post hoc against a frozen network.
//!
//! A raw spatial filter `f` is mapped through a constraint (unit L2 norm by
//! default) and multiplied into a convolutional feature map. Plain gradient
//! descent on `f` then minimizes either the distance between the filtered
//! and unfiltered outputs (class-oblivious) or a class-specific logit margin.

use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::network::{ActivationTrace, FilterHook, FilterSource, NetworkModel};
use crate::ops;
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub mod heatmap;

pub use heatmap::{heatmap_from_grid, resize_bilinear, Heatmap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CafConfig {
    pub lr: f64,
    /// Convergence tolerance on `|L^l - L^(l-d)|`.
    pub epsilon: f64,
    /// Look-back distance of the stopping rule.
    pub d: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for CafConfig {
    fn default() -> Self {
        CafConfig {
            lr: 1.0,
            epsilon: 1e-5,
            d: 50,
            max_iters: 1000,
            seed: 0,
        }
    }
}

impl CafConfig {
    pub fn with_seed(seed: u64) -> Self {
        CafConfig {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.d < 1 {
            return Err(Error::invalid("d must be at least 1"));
        }
        if self.max_iters < self.d + 1 {
            return Err(Error::invalid(format!(
                "max_iters ({}) must be at least d + 1 ({})",
                self.max_iters,
                self.d + 1
            )));
        }
        Ok(())
    }
}

/// The raw, unconstrained filter `f` of shape `[rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionFilter {
    raw: Tensor,
}

impl AttentionFilter {
    pub fn new(raw: Tensor) -> Result<Self> {
        if raw.rank() != 2 {
            return Err(Error::shape("attention filter", format!("expected [rows, cols], got {:?}", raw.shape())));
        }
        Ok(AttentionFilter { raw })
    }

    /// Entries drawn from `U[0, 1)` with the given seed.
    pub fn random(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, crate::rng::streams::FILTER);
        let data = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
        AttentionFilter {
            raw: Tensor::from_parts(vec![rows, cols], data),
        }
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn rows(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.raw.shape()[1]
    }

    /// `|f| / ||f||₂`.
    pub fn normalized(&self) -> Result<Tensor> {
        ops::l2_normalize(&self.raw.map(f64::abs))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Reproduce the unfiltered output.
    Oblivious,
    /// Raise logit `c` and lower all the others.
    ClassSpecific(usize),
}

/// How the raw variable becomes the filter applied to the feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Constraint {
    /// `f / ||f||₂`.
    L2,
    /// Softmax over all cells.
    Softmax,
    /// Unit-covariance Gaussian with peak 1; only the mean is optimized.
    Gaussian,
}

/// Mean of the Gaussian filter, in (row, col) filter cells. The covariance
/// is fixed to the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianFilterParams {
    pub mu: [f64; 2],
}

impl GaussianFilterParams {
    pub fn sigma(&self) -> [[f64; 2]; 2] {
        [[1.0, 0.0], [0.0, 1.0]]
    }

    pub fn evaluate(&self, rows: usize, cols: usize) -> Result<Tensor> {
        ops::gaussian_grid(&Tensor::vector(self.mu.to_vec())?, rows, cols)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CafResult {
    /// Final filter: the raw `f` for L2 and softmax runs, the evaluated
    /// Gaussian for Gaussian runs.
    pub filter: AttentionFilter,
    pub loss_history: Vec<f64>,
    pub iterations: usize,
    pub terminated_by: Termination,
    pub constraint: Constraint,
    pub gaussian: Option<GaussianFilterParams>,
}

impl CafResult {
    /// Nonnegative saliency grid at filter resolution: `|f|/||f||₂` for L2,
    /// the softmax view for softmax, the Gaussian itself for Gaussian runs.
    pub fn saliency(&self) -> Result<Tensor> {
        match self.constraint {
            Constraint::L2 => self.filter.normalized(),
            Constraint::Softmax => Ok(ops::softmax(self.filter.raw())),
            Constraint::Gaussian => Ok(self.filter.raw().clone()),
        }
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("at least one iteration")
    }

    pub fn initial_loss(&self) -> f64 {
        self.loss_history[0]
    }
}

/// Resizes the result's saliency grid to `target` and rescales it to `[0, 1]`.
pub fn heatmap_from_filter(result: &CafResult, target: (usize, usize)) -> Result<Heatmap> {
    heatmap_from_grid(&result.saliency()?, target)
}

/// What one iteration saw: its index (from 1), loss, and the filter actually
/// multiplied into the feature map.
#[derive(Debug)]
pub struct IterationInfo<'a> {
    pub iteration: usize,
    pub loss: f64,
    pub applied: &'a Tensor,
}

/// A fully specified filter optimization problem.
#[derive(Clone, Debug)]
pub struct CafProblem<'a> {
    model: &'a NetworkModel,
    source: FilterSource<'a>,
    at_layer: usize,
    endpoint: usize,
    objective: Objective,
    target: Option<Tensor>,
    constraint: Constraint,
    frame: Option<usize>,
}

impl<'a> CafProblem<'a> {
    fn spatial_dims(model: &NetworkModel, at_layer: usize) -> Result<(usize, usize)> {
        if at_layer >= model.layers().len() {
            return Err(Error::invalid(format!("no layer {at_layer}")));
        }
        let s = model.layer_shape(at_layer);
        if s.len() != 3 {
            return Err(Error::Incompatible(format!("layer {at_layer} output {s:?} is not spatial")));
        }
        Ok((s[0], s[1]))
    }

    /// Problem on the full network: filter at `at_layer`, scored at the
    /// network output.
    pub fn vanilla(model: &'a NetworkModel, x: &'a Tensor, at_layer: usize, objective: Objective) -> Result<Self> {
        Self::spatial_dims(model, at_layer)?;
        let endpoint = model.output_layer();
        let target = match objective {
            Objective::Oblivious => {
                let (_, trace) = model.forward(x)?;
                Some(trace.get(endpoint).expect("endpoint in trace").clone())
            }
            Objective::ClassSpecific(c) => {
                check_class(model, c)?;
                None
            }
        };
        Ok(CafProblem {
            model,
            source: FilterSource::Input(x),
            at_layer,
            endpoint,
            objective,
            target,
            constraint: Constraint::L2,
            frame: None,
        })
    }

    /// Sub-problem on cached activations: `trace[at_layer]` is the input and
    /// `trace[endpoint]` the target.
    pub fn fast(
        model: &'a NetworkModel,
        trace: &'a ActivationTrace,
        at_layer: usize,
        endpoint: usize,
        objective: Objective,
    ) -> Result<Self> {
        Self::spatial_dims(model, at_layer)?;
        if endpoint <= at_layer || endpoint >= model.layers().len() {
            return Err(Error::invalid(format!(
                "endpoint layer {endpoint} must come after filter layer {at_layer}"
            )));
        }
        let cached = trace
            .get(at_layer)
            .ok_or_else(|| Error::invalid("trace does not cover the filter layer"))?;
        let target = match objective {
            Objective::Oblivious => Some(
                trace
                    .get(endpoint)
                    .ok_or_else(|| Error::invalid("trace does not cover the endpoint"))?
                    .clone(),
            ),
            Objective::ClassSpecific(c) => {
                check_class(model, c)?;
                if endpoint != model.logits_layer()? {
                    return Err(Error::Incompatible(
                        "the class-specific objective needs the logits as endpoint".into(),
                    ));
                }
                None
            }
        };
        Ok(CafProblem {
            model,
            source: FilterSource::Cached(cached),
            at_layer,
            endpoint,
            objective,
            target,
            constraint: Constraint::L2,
            frame: None,
        })
    }

    pub fn with_constraint(mut self, constraint: Constraint) -> Self {
        self.constraint = constraint;
        self
    }

    /// Restricts the filter to one frame of a sequence model.
    pub fn with_frame(mut self, frame: usize) -> Result<Self> {
        match self.model.frames() {
            Some(t) if frame < t && self.model.is_per_frame(self.at_layer) => {
                self.frame = Some(frame);
                Ok(self)
            }
            _ => Err(Error::invalid(format!("frame {frame} is not a per-frame filter position"))),
        }
    }

    pub fn filter_shape(&self) -> (usize, usize) {
        Self::spatial_dims(self.model, self.at_layer).expect("validated at construction")
    }

    /// Applies the constraint to the raw variable on `tape`.
    fn constrain(&self, tape: &mut Tape, raw: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.filter_shape();
        match self.constraint {
            Constraint::L2 => tape.l2_normalize(raw),
            Constraint::Softmax => tape.softmax(raw),
            Constraint::Gaussian => tape.gaussian_grid(raw, rows, cols),
        }
    }

    /// Shape of the optimization variable.
    pub fn variable_shape(&self) -> Vec<usize> {
        let (rows, cols) = self.filter_shape();
        match self.constraint {
            Constraint::Gaussian => vec![2],
            _ => vec![rows, cols],
        }
    }

    fn record(&self, raw: &Tensor) -> Result<Recorded> {
        if raw.shape() != self.variable_shape().as_slice() {
            return Err(Error::shape(
                "filter objective",
                format!("variable {:?} does not match {:?}", raw.shape(), self.variable_shape()),
            ));
        }
        let mut tape = Tape::new();
        let var = tape.variable(raw.clone());
        let view = self.constrain(&mut tape, var)?;
        let hook = FilterHook {
            layer: self.at_layer,
            filter: view,
            frame: self.frame,
        };
        let out = self.model.filtered_on_tape(&mut tape, self.source, hook, self.endpoint)?;
        let loss = match (self.objective, &self.target) {
            (Objective::Oblivious, Some(target)) => {
                let t = tape.constant(target.clone());
                tape.squared_distance(t, out)?
            }
            (Objective::ClassSpecific(c), _) => {
                let total = tape.sum(out)?;
                let own = tape.select(out, c)?;
                let twice = tape.scale(own, -2.0)?;
                tape.add(total, twice)?
            }
            (Objective::Oblivious, None) => unreachable!("oblivious problems carry a target"),
        };
        Ok(Recorded {
            tape,
            var,
            view,
            out,
            loss,
        })
    }

    /// Objective value at `raw`.
    pub fn loss(&self, raw: &Tensor) -> Result<f64> {
        let r = self.record(raw)?;
        Ok(r.tape.value(r.loss).item())
    }

    /// Objective value and its gradient with respect to `raw`.
    pub fn loss_and_grad(&self, raw: &Tensor) -> Result<(f64, Tensor)> {
        let r = self.record(raw)?;
        let g = r.tape.backward(r.loss)?;
        Ok((r.tape.value(r.loss).item(), g.wrt(r.var)))
    }

    /// The network output with the constrained filter applied.
    pub fn filtered_output(&self, raw: &Tensor) -> Result<Tensor> {
        let r = self.record(raw)?;
        Ok(r.tape.value(r.out).clone())
    }

    fn initial_variable(&self, seed: u64) -> Tensor {
        let (rows, cols) = self.filter_shape();
        match self.constraint {
            Constraint::Gaussian => Tensor::from_parts(
                vec![2],
                vec![(rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0],
            ),
            _ => AttentionFilter::random(rows, cols, seed).raw,
        }
    }

    /// Gradient descent from the seeded initial filter under the stopping rule.
    pub fn solve(&self, cfg: &CafConfig) -> Result<CafResult> {
        self.solve_observed(cfg, |_| {})
    }

    /// Like [`solve`](Self::solve), reporting every iteration to `observer`.
    pub fn solve_observed(&self, cfg: &CafConfig, mut observer: impl FnMut(&IterationInfo<'_>)) -> Result<CafResult> {
        cfg.validate()?;
        let mut var = self.initial_variable(cfg.seed);
        let mut history: Vec<f64> = Vec::new();
        let terminated_by = loop {
            let r = self.record(&var)?;
            let value = r.tape.value(r.loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite("filter objective"));
            }
            history.push(value);
            let l = history.len();
            observer(&IterationInfo {
                iteration: l,
                loss: value,
                applied: r.tape.value(r.view),
            });
            if l > cfg.d && (value - history[l - 1 - cfg.d]).abs() < cfg.epsilon {
                break Termination::Converged;
            }
            if l >= cfg.max_iters {
                break Termination::MaxIters;
            }
            let grad = r.tape.backward(r.loss)?.wrt(r.var);
            let next = var.zip_with(&grad, |a, g| a - cfg.lr * g)?;
            if !next.all_finite() {
                return Err(Error::NonFinite("filter update"));
            }
            if self.constraint == Constraint::L2 && next.data().iter().all(|&x| x == 0.0) {
                return Err(Error::DegenerateFilter);
            }
            var = next;
        };
        let (filter, gaussian) = match self.constraint {
            Constraint::Gaussian => {
                let params = GaussianFilterParams {
                    mu: [var.data()[0], var.data()[1]],
                };
                let (rows, cols) = self.filter_shape();
                (AttentionFilter::new(params.evaluate(rows, cols)?)?, Some(params))
            }
            _ => (AttentionFilter::new(var)?, None),
        };
        Ok(CafResult {
            filter,
            iterations: history.len(),
            loss_history: history,
            terminated_by,
            constraint: self.constraint,
            gaussian,
        })
    }
}

struct Recorded {
    tape: Tape,
    var: NodeId,
    view: NodeId,
    out: NodeId,
    loss: NodeId,
}

fn check_class(model: &NetworkModel, c: usize) -> Result<()> {
    let n = match model.head() {
        crate::network::HeadKind::Logits(n) => n,
        crate::network::HeadKind::Embedding(_) => {
            return Err(Error::Incompatible("the class-specific objective needs a logits head".into()))
        }
    };
    if c >= n {
        return Err(Error::invalid(format!("class {c} out of range for {n} classes")));
    }
    Ok(())
}

/// Minimizes `||NT(x) - FT(x, f/||f||₂)||²` over the raw filter `f`.
pub fn optimize_class_oblivious(model: &NetworkModel, x: &Tensor, at_layer: usize, cfg: &CafConfig) -> Result<CafResult> {
    CafProblem::vanilla(model, x, at_layer, Objective::Oblivious)?.solve(cfg)
}

/// Minimizes `-FT_c + sum_{i != c} FT_i` over the raw filter.
pub fn optimize_class_specific(
    model: &NetworkModel,
    x: &Tensor,
    at_layer: usize,
    class: usize,
    cfg: &CafConfig,
) -> Result<CafResult> {
    CafProblem::vanilla(model, x, at_layer, Objective::ClassSpecific(class))?.solve(cfg)
}

/// The cached sub-problem: only layers after `at_layer` run per iteration.
pub fn optimize_fast(
    model: &NetworkModel,
    trace: &ActivationTrace,
    at_layer: usize,
    endpoint: usize,
    cfg: &CafConfig,
    objective: Objective,
) -> Result<CafResult> {
    CafProblem::fast(model, trace, at_layer, endpoint, objective)?.solve(cfg)
}

pub fn optimize_softmax_filter(
    model: &NetworkModel,
    x: &Tensor,
    at_layer: usize,
    cfg: &CafConfig,
    objective: Objective,
) -> Result<CafResult> {
    CafProblem::vanilla(model, x, at_layer, objective)?
        .with_constraint(Constraint::Softmax)
        .solve(cfg)
}

/// Optimizes only the Gaussian mean, starting from the grid center.
pub fn optimize_gaussian_filter(
    model: &NetworkModel,
    x: &Tensor,
    at_layer: usize,
    cfg: &CafConfig,
    objective: Objective,
) -> Result<(CafResult, GaussianFilterParams)> {
    let result = CafProblem::vanilla(model, x, at_layer, objective)?
        .with_constraint(Constraint::Gaussian)
        .solve(cfg)?;
    let params = result.gaussian.expect("gaussian runs report their mean");
    Ok((result, params))
}

/// One class-oblivious filter per frame, optimized in frame order. While
/// filter `t` is optimized every other frame passes through unfiltered.
pub fn optimize_recurrent_sequence(model: &NetworkModel, frames: &Tensor, cfg: &CafConfig) -> Result<Vec<CafResult>> {
    let t = model
        .frames()
        .ok_or_else(|| Error::Incompatible("model does not take frame sequences".into()))?;
    if frames.rank() != 4 || frames.shape()[0] != t {
        return Err(Error::invalid(format!(
            "expected {t} frames shaped {:?}, got {:?}",
            model.full_input_shape(),
            frames.shape()
        )));
    }
    let at_layer = model.feature_layer()?;
    if !model.is_per_frame(at_layer) {
        return Err(Error::Incompatible("feature layer is not per-frame".into()));
    }
    let base = CafProblem::vanilla(model, frames, at_layer, Objective::Oblivious)?;
    (0..t)
        .map(|frame| base.clone().with_frame(frame)?.solve(cfg))
        .collect()
}
