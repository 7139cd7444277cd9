use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, RouterMethod};
use crate::dataio::{DepthMap, Raster, RgbImage, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_reports, compute_metrics, MetricReport};
use crate::netgraph::{depth_from_logits, image_tensor, load_checkpoint, Model};
use crate::quantizer::QuantizationScheme;
use crate::router::{
    route_by_coarse_depth, route_by_scene, DepthRange, RoutingDecision, RoutingMethod, SceneLabelTable,
    SceneProbabilities,
};

/// A trained network together with the quantization scheme of its range.
#[derive(Debug, Clone)]
pub struct DepthNet {
    pub model: Model,
    pub scheme: QuantizationScheme,
}

impl DepthNet {
    pub fn new(model: Model, scheme: QuantizationScheme) -> Result<Self> {
        if model.spec().num_bins != scheme.num_bins() {
            return Err(Error::Config(format!(
                "network has {} bins but its scheme has {}",
                model.spec().num_bins,
                scheme.num_bins()
            )));
        }
        Ok(Self { model, scheme })
    }

    /// Loads a checkpoint written by the trainer (the scheme travels in its
    /// header).
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let scheme: QuantizationScheme = serde_json::from_value(ckpt.extra["scheme"].clone())
            .map_err(|e| Error::Format(format!("{}: missing or bad scheme: {e}", path.display())))?;
        Self::new(ckpt.to_model()?, scheme)
    }

    /// Depth for an image of any size: zero-pads up to the network's size
    /// multiple, predicts, and crops back to the source geometry. Uses the
    /// classification branch when present, else the clamped regression.
    pub fn predict(&self, image: &RgbImage) -> Result<DepthMap> {
        let f = self.model.spec().variant.downsampling();
        let (w, h) = (image.width(), image.height());
        let (pw, ph) = (w.div_ceil(f) * f, h.div_ceil(f) * f);
        let (padded, offset) = image.zero_pad(pw, ph)?;
        let out = self.model.forward(&image_tensor(&padded))?;
        let depth = match (out.cls_logits, out.reg_depth) {
            (Some(logits), _) => depth_from_logits(&logits, 0, &self.scheme)?,
            (None, Some(reg)) => {
                let (a, b) = (self.scheme.alpha(), self.scheme.beta());
                DepthMap::from_values(ph, pw, reg.data().iter().map(|v| v.clamp(a, b)).collect())?
            }
            (None, None) => return Err(Error::InvalidInput("network has no output branch".into())),
        };
        depth.crop_back(&offset)
    }
}

/// Networks available to the two-stage inference.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub coarse: Option<DepthNet>,
    pub low: Option<DepthNet>,
    pub high: Option<DepthNet>,
}

impl ModelSet {
    /// Loads the checkpoints the configured router method needs.
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let (need_coarse, need_low, need_high) = needs(config.router.method);
        let p = &config.paths;
        let get = |needed: bool, path: &Option<std::path::PathBuf>, name: &str| -> Result<Option<DepthNet>> {
            match (needed, path) {
                (false, _) => Ok(None),
                (true, None) => Err(Error::Config(format!(
                    "router method {:?} needs paths.{name}",
                    config.router.method
                ))),
                (true, Some(path)) => DepthNet::load(path).map(Some),
            }
        };
        Ok(Self {
            coarse: get(need_coarse, &p.coarse_checkpoint, "coarse_checkpoint")?,
            low: get(need_low, &p.low_checkpoint, "low_checkpoint")?,
            high: get(need_high, &p.high_checkpoint, "high_checkpoint")?,
        })
    }
}

fn needs(method: RouterMethod) -> (bool, bool, bool) {
    match method {
        RouterMethod::SceneClassification => (false, true, true),
        RouterMethod::CoarseDepth => (true, true, true),
        RouterMethod::ForcedLow => (false, true, false),
        RouterMethod::ForcedHigh => (false, false, true),
        RouterMethod::CdeOnly => (true, false, false),
    }
}

/// Scene-classification routing inputs.
#[derive(Debug, Clone)]
pub struct SceneContext<'a> {
    pub table: &'a SceneLabelTable,
    pub probs: &'a SceneProbabilities,
}

fn missing(what: &str, method: RouterMethod) -> Error {
    Error::Config(format!("router method {method:?} requires {what}"))
}

/// Decides which range network should handle an image, without running it.
pub fn route(
    image: &RgbImage,
    config: &PipelineConfig,
    models: &ModelSet,
    scene: Option<SceneContext<'_>>,
) -> Result<RoutingDecision> {
    route_with_coarse(image, config, models, scene).map(|(d, _)| d)
}

/// Returns the decision and, when the coarse network ran, its prediction.
fn route_with_coarse(
    image: &RgbImage,
    config: &PipelineConfig,
    models: &ModelSet,
    scene: Option<SceneContext<'_>>,
) -> Result<(RoutingDecision, Option<DepthMap>)> {
    let method = config.router.method;
    match method {
        RouterMethod::SceneClassification => {
            let s = scene.ok_or_else(|| missing("scene probabilities", method))?;
            Ok((route_by_scene(s.probs, s.table, config.router.top_k)?, None))
        }
        RouterMethod::CoarseDepth | RouterMethod::CdeOnly => {
            let coarse = models.coarse.as_ref().ok_or_else(|| missing("a coarse network", method))?;
            let depth = coarse.predict(image)?;
            Ok((route_by_coarse_depth(&depth, config.router.sigma)?, Some(depth)))
        }
        RouterMethod::ForcedLow => Ok((RoutingDecision::forced(DepthRange::Low), None)),
        RouterMethod::ForcedHigh => Ok((RoutingDecision::forced(DepthRange::High), None)),
    }
}

/// Routes an image, then runs the selected range's network on it.
///
/// With `cde_only` the coarse network's own prediction is returned.
pub fn robust_side_infer(
    image: &RgbImage,
    config: &PipelineConfig,
    models: &ModelSet,
    scene: Option<SceneContext<'_>>,
) -> Result<(DepthMap, RoutingDecision)> {
    let method = config.router.method;
    let (decision, coarse) = route_with_coarse(image, config, models, scene)?;
    if let (RouterMethod::CdeOnly, Some(depth)) = (method, coarse) {
        return Ok((depth, decision));
    }
    let net = match decision.range {
        DepthRange::Low => models.low.as_ref().ok_or_else(|| missing("a low-range network", method))?,
        DepthRange::High => models.high.as_ref().ok_or_else(|| missing("a high-range network", method))?,
    };
    Ok((net.predict(image)?, decision))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEvaluation {
    pub id: String,
    pub expected_range: DepthRange,
    pub routed_range: DepthRange,
    pub routing_method: RoutingMethod,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub images: Vec<ImageEvaluation>,
    pub aggregate: MetricReport,
    /// Fraction of images routed to their manifest range tag.
    pub routing_accuracy: f64,
}

impl EvaluationReport {
    pub fn table(&self) -> String {
        let rows: Vec<_> = self.images.iter().map(|e| (e.id.clone(), e.metrics.clone())).collect();
        let mut out = crate::metrics::format_report_table(&rows, &self.aggregate);
        out.push_str(&format!("routing accuracy: {:.4}\n", self.routing_accuracy));
        out
    }
}

/// An in-memory sample with its manifest metadata.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub range: DepthRange,
    pub image: RgbImage,
    pub depth: DepthMap,
}

/// Loads every record; file or format problems become data errors.
pub fn load_samples(records: &[SampleRecord]) -> Result<Vec<Sample>> {
    records
        .par_iter()
        .map(|r| {
            let (image, depth) = r.load().map_err(|e| match e {
                Error::Config(_) | Error::Data(_) => e,
                other => Error::Data(format!("sample {}: {other}", r.id)),
            })?;
            Ok(Sample {
                id: r.id.clone(),
                range: r.range,
                image,
                depth,
            })
        })
        .collect()
}

/// Runs the two-stage inference over samples and scores it. `scene_probs`
/// maps sample ids to classifier output and is required for scene routing.
pub fn evaluate(
    config: &PipelineConfig,
    samples: &[Sample],
    models: &ModelSet,
    table: &SceneLabelTable,
    scene_probs: Option<&HashMap<String, SceneProbabilities>>,
) -> Result<EvaluationReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let images = samples
        .iter()
        .map(|s| {
            let scene = match scene_probs {
                Some(map) => Some(SceneContext {
                    table,
                    probs: map
                        .get(&s.id)
                        .ok_or_else(|| Error::Data(format!("no scene probabilities for sample {}", s.id)))?,
                }),
                None => None,
            };
            let (pred, decision) = robust_side_infer(&s.image, config, models, scene)?;
            Ok(ImageEvaluation {
                id: s.id.clone(),
                expected_range: s.range,
                routed_range: decision.range,
                routing_method: decision.method,
                metrics: compute_metrics(&pred, &s.depth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<_> = images.iter().map(|e| e.metrics.clone()).collect();
    let correct = images.iter().filter(|e| e.expected_range == e.routed_range).count();
    Ok(EvaluationReport {
        aggregate: aggregate_reports(&reports)?,
        routing_accuracy: correct as f64 / images.len() as f64,
        images,
    })
}

/// Per-image metrics of a single network and their mean.
pub fn evaluate_net(net: &DepthNet, samples: &[Sample]) -> Result<(Vec<MetricReport>, MetricReport)> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let reports = samples
        .iter()
        .map(|s| compute_metrics(&net.predict(&s.image)?, &s.depth))
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate_reports(&reports)?;
    Ok((reports, agg))
}
