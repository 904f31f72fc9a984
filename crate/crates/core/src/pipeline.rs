//! End-to-end localization runs: saliency per method, boxes, records and
//! per-method summaries.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::attention::{self, CafConfig, CafProblem, Constraint, Objective};
use crate::baselines::{self, GradTarget, Rectify, SaliencyMap};
use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::evaluation::{self, estimate_box, EvalRecord};
use crate::network::{NetworkModel, RandomizeScope};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    L2Caf,
    L2CafFast,
    /// Class-specific filter; `None` targets the predicted class.
    L2CafClass(Option<usize>),
    Softmax,
    Gaussian,
    GradCam,
    GradCamAbs,
    Cam,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::L2Caf => "l2caf".into(),
            Method::L2CafFast => "l2caf-fast".into(),
            Method::L2CafClass(None) => "l2caf-class".into(),
            Method::L2CafClass(Some(c)) => format!("l2caf-class:{c}"),
            Method::Softmax => "softmax".into(),
            Method::Gaussian => "gaussian".into(),
            Method::GradCam => "grad-cam".into(),
            Method::GradCamAbs => "grad-cam-abs".into(),
            Method::Cam => "cam".into(),
        }
    }

    /// Whether the map depends on the class being explained.
    pub fn is_class_specific(&self) -> bool {
        matches!(
            self,
            Method::L2CafClass(None) | Method::Cam | Method::GradCam | Method::GradCamAbs
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "l2caf" => Method::L2Caf,
            "l2caf-fast" => Method::L2CafFast,
            "l2caf-class" => Method::L2CafClass(None),
            "softmax" => Method::Softmax,
            "gaussian" => Method::Gaussian,
            "grad-cam" => Method::GradCam,
            "grad-cam-abs" => Method::GradCamAbs,
            "cam" => Method::Cam,
            other => match other.strip_prefix("l2caf-class:").map(str::parse) {
                Some(Ok(c)) => Method::L2CafClass(Some(c)),
                _ => return Err(Error::invalid(format!("unknown method {other:?}"))),
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WsolConfig {
    pub caf: CafConfig,
    pub theta_frac: f64,
    /// Filter / feature layer; defaults to the last convolutional feature map.
    pub at_layer: Option<usize>,
    /// Gradient target reduction for retrieval Grad-CAM.
    pub retrieval_target: GradTarget,
}

impl Default for WsolConfig {
    fn default() -> Self {
        WsolConfig {
            caf: CafConfig::default(),
            theta_frac: evaluation::DEFAULT_THETA,
            at_layer: None,
            retrieval_target: GradTarget::EmbeddingSum,
        }
    }
}

/// Saliency map of `method` for input `x`. `class` is the class explained by
/// class-specific methods on a logits head.
pub fn saliency(
    model: &NetworkModel,
    x: &Tensor,
    method: Method,
    class: Option<usize>,
    cfg: &WsolConfig,
) -> Result<SaliencyMap> {
    let at = match cfg.at_layer {
        Some(l) => l,
        None => model.feature_layer()?,
    };
    let logits = model.head().is_logits();
    let need_class = || {
        class.ok_or_else(|| Error::invalid(format!("{method} needs a class to explain")))
    };
    match method {
        Method::L2Caf => SaliencyMap::from_caf(&attention::optimize_class_oblivious(model, x, at, &cfg.caf)?),
        Method::L2CafFast => {
            let (_, trace) = model.forward(x)?;
            let r = attention::optimize_fast(model, &trace, at, model.output_layer(), &cfg.caf, Objective::Oblivious)?;
            SaliencyMap::from_caf(&r)
        }
        Method::L2CafClass(fixed) => {
            let c = match fixed {
                Some(c) => c,
                None => need_class()?,
            };
            SaliencyMap::from_caf(&attention::optimize_class_specific(model, x, at, c, &cfg.caf)?)
        }
        Method::Softmax | Method::Gaussian => {
            let constraint = if method == Method::Softmax {
                Constraint::Softmax
            } else {
                Constraint::Gaussian
            };
            let r = CafProblem::vanilla(model, x, at, Objective::Oblivious)?
                .with_constraint(constraint)
                .solve(&cfg.caf)?;
            SaliencyMap::from_caf(&r)
        }
        Method::GradCam if logits => baselines::grad_cam(model, x, at, need_class()?),
        Method::GradCam => baselines::grad_cam_retrieval(model, x, at, Rectify::Relu, cfg.retrieval_target),
        Method::GradCamAbs if logits => {
            let (a, alpha) = baselines::channel_weights(model, x, at, GradTarget::Class(need_class()?))?;
            let m = baselines::weighted_channel_sum(&a, &alpha).map(f64::abs);
            SaliencyMap::new(m, baselines::SaliencySource::GradCamAbs)
        }
        Method::GradCamAbs => baselines::grad_cam_retrieval(model, x, at, Rectify::Abs, cfg.retrieval_target),
        Method::Cam => baselines::cam(model, x, need_class()?),
    }
}

/// Checks that every method applies to the model before any work starts.
pub fn check_compatible(model: &NetworkModel, methods: &[Method]) -> Result<()> {
    for m in methods {
        let ok = match m {
            Method::L2CafClass(_) | Method::Cam => model.head().is_logits(),
            _ => true,
        };
        if !ok {
            return Err(Error::Incompatible(format!("method {m} needs a classification (logits) model")));
        }
        if model.frames().is_some() && !matches!(m, Method::L2Caf | Method::L2CafFast) {
            return Err(Error::Incompatible(format!("method {m} does not support sequence models")));
        }
    }
    Ok(())
}

pub fn image_id(i: usize) -> String {
    format!("{i:05}")
}

fn image_size(x: &Tensor) -> (usize, usize) {
    (x.shape()[0], x.shape()[1])
}

/// Top-`k` classification localization. Rows are ordered by image, then by
/// the order of `methods`.
pub fn evaluate_classification(
    model: &NetworkModel,
    samples: &[SyntheticSample],
    methods: &[Method],
    cfg: &WsolConfig,
    top_k: usize,
) -> Result<Vec<EvalRecord>> {
    check_compatible(model, methods)?;
    let n_classes = model.head().size();
    if !model.head().is_logits() {
        return Err(Error::Incompatible("classification localization needs a logits model".into()));
    }
    let k = top_k.clamp(1, n_classes);
    let per_image: Vec<Vec<EvalRecord>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let logits = model.predict(&s.image)?;
            let mut order: Vec<usize> = (0..n_classes).collect();
            // Stable sort keeps the lower class first on equal logits.
            order.sort_by(|&a, &b| logits.data()[b].total_cmp(&logits.data()[a]));
            order.truncate(k);
            let size = image_size(&s.image);
            methods
                .iter()
                .map(|&m| {
                    let mut shared = None;
                    let mut preds = Vec::with_capacity(k);
                    for &c in &order {
                        let b = match shared {
                            Some(b) if !m.is_class_specific() => b,
                            _ => {
                                let map = saliency(model, &s.image, m, Some(c), cfg)?;
                                let b = estimate_box(&map.to_heatmap(size)?, cfg.theta_frac)?;
                                if !m.is_class_specific() {
                                    shared = Some(b);
                                }
                                b
                            }
                        };
                        preds.push((c, b));
                    }
                    Ok(EvalRecord::top_k(image_id(i), m.name(), &preds, s.class, s.bbox))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Retrieval localization: a prediction is correct when the image's nearest
/// neighbor (by output embedding, within `samples`) shares its class.
pub fn evaluate_retrieval(
    model: &NetworkModel,
    samples: &[SyntheticSample],
    methods: &[Method],
    cfg: &WsolConfig,
) -> Result<(Vec<EvalRecord>, RetrievalScores)> {
    check_compatible(model, methods)?;
    if model.head().is_logits() {
        return Err(Error::Incompatible("retrieval localization needs an embedding model".into()));
    }
    let embeddings: Vec<Tensor> = samples.par_iter().map(|s| model.predict(&s.image)).collect::<Result<_>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.class).collect();
    let nn = evaluation::nearest_neighbors(&embeddings)?;
    let hits: Vec<bool> = nn.iter().enumerate().map(|(i, &j)| labels[i] == labels[j]).collect();
    let n_classes = {
        let mut l = labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    let clusters = evaluation::kmeans(&embeddings, n_classes, cfg.caf.seed)?;
    let scores = RetrievalScores {
        recall_at_1: hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64,
        nmi: evaluation::nmi(&labels, &clusters.assignments)?.nmi,
    };
    let per_image: Vec<Vec<EvalRecord>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            methods
                .iter()
                .map(|&m| {
                    let map = saliency(model, &s.image, m, None, cfg)?;
                    let b = estimate_box(&map.to_heatmap(image_size(&s.image))?, cfg.theta_frac)?;
                    Ok(EvalRecord::new(image_id(i), m.name(), hits[i], b, s.bbox))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((per_image.into_iter().flatten().collect(), scores))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalScores {
    pub recall_at_1: f64,
    pub nmi: f64,
}

/// One summary row per method.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    /// Top-k classification accuracy, or Recall@1 for retrieval.
    pub prediction: f64,
    pub nmi: Option<f64>,
    pub loc: f64,
    /// Localization gain over vanilla Grad-CAM, when it was evaluated.
    pub delta: Option<f64>,
}

pub fn summarize(records: &[EvalRecord], methods: &[Method], nmi: Option<f64>) -> Result<Vec<MethodSummary>> {
    let mut rows = Vec::new();
    for m in methods {
        let name = m.name();
        let mine: Vec<EvalRecord> = records.iter().filter(|r| r.method == name).cloned().collect();
        let prediction = mine.iter().filter(|r| r.prediction_correct).count() as f64 / mine.len().max(1) as f64;
        rows.push(MethodSummary {
            method: name,
            prediction,
            nmi,
            loc: evaluation::localization_accuracy(&mine)?,
            delta: None,
        });
    }
    let base = rows.iter().find(|r| r.method == "grad-cam").map(|r| r.loc);
    for r in &mut rows {
        r.delta = base.map(|b| r.loc - b);
    }
    Ok(rows)
}

/// Which weights a sanity trial resamples. `Control` reruns the trained model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SanityScope {
    Control,
    Logits,
    AllLayers,
}

impl SanityScope {
    pub fn name(self) -> &'static str {
        match self {
            SanityScope::Control => "none",
            SanityScope::Logits => "logits",
            SanityScope::AllLayers => "all-layers",
        }
    }
}

impl FromStr for SanityScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SanityScope::Control),
            "logits" => Ok(SanityScope::Logits),
            "all-layers" => Ok(SanityScope::AllLayers),
            other => Err(Error::invalid(format!("unknown sanity scope {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SanityRow {
    pub image_id: String,
    pub scope: SanityScope,
    /// Randomization seed of this trial.
    pub seed: u64,
    pub spearman: f64,
    /// The randomized heatmap, kept so trials can be compared with each other.
    pub heatmap: Vec<f64>,
}

/// Class-oblivious L2-CAF heatmap at image resolution.
pub fn l2caf_heatmap(model: &NetworkModel, x: &Tensor, cfg: &WsolConfig) -> Result<attention::Heatmap> {
    saliency(model, x, Method::L2CafFast, None, cfg)?.to_heatmap(image_size(x))
}

/// Compares the trained model's heatmap with heatmaps from randomized copies.
/// Trial `i` of a scope uses seed `derive_seed(seed, i)` for both the weight
/// randomization and the filter initialization; control trials keep `cfg`.
/// Rows are ordered by image, scope, then trial.
pub fn sanity_check(
    model: &NetworkModel,
    images: &[Tensor],
    scopes: &[SanityScope],
    trials: usize,
    seed: u64,
    cfg: &WsolConfig,
) -> Result<Vec<SanityRow>> {
    if trials == 0 {
        return Err(Error::invalid("at least one sanity trial is required"));
    }
    let seeds: Vec<u64> = (0..trials as u64).map(|i| derive_seed(seed, i)).collect();
    let mut variants: Vec<(SanityScope, u64, NetworkModel)> = Vec::new();
    for &scope in scopes {
        for &s in &seeds {
            let m = match scope {
                SanityScope::Control => model.clone(),
                SanityScope::Logits => model.randomize(RandomizeScope::LogitsLayer, s)?,
                SanityScope::AllLayers => model.randomize(RandomizeScope::AllLayers, s)?,
            };
            variants.push((scope, s, m));
        }
    }
    let per_image: Vec<Vec<SanityRow>> = images
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let base = l2caf_heatmap(model, x, cfg)?.grid().data().to_vec();
            variants
                .iter()
                .map(|(scope, s, m)| {
                    // Randomized trials are independent runs, filter init included.
                    let mut trial = *cfg;
                    if *scope != SanityScope::Control {
                        trial.caf.seed = *s;
                    }
                    let h = l2caf_heatmap(m, x, &trial)?.grid().data().to_vec();
                    Ok(SanityRow {
                        image_id: image_id(i),
                        scope: *scope,
                        seed: *s,
                        spearman: evaluation::spearman(&base, &h)?,
                        heatmap: h,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}
