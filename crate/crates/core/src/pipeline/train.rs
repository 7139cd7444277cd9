use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, TrainConfig, TrainTarget};
use super::infer::{evaluate_net, DepthNet, Sample};
use crate::dataio::{random_crop, DepthMap, RgbImage};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossConfig};
use crate::metrics::MetricReport;
use crate::netgraph::{save_checkpoint, BnMode, Checkpoint, ForwardOutputs, Graph, Model, Tensor};
use crate::quantizer::QuantizationScheme;

/// Per-step loss record, one JSON line per step in `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub cls: Option<f64>,
    pub reg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub metrics: MetricReport,
}

/// Resumable optimizer and sampling state stored in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    target: TrainTarget,
    step: u64,
    rng_seed: u64,
    rng_word_pos: u128,
    best: Option<ValidationRecord>,
    loss: LossConfig,
    train: TrainConfig,
}

/// Adaptive-moment optimizer; moments are kept per parameter tensor.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let zeros: Vec<_> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn update(&mut self, model: &mut Model, grads: &[Option<Tensor>], cfg: &TrainConfig, step: u64) {
        let t = step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = model.params_mut().get_mut(id).data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] + cfg.weight_decay * p[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                p[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
            }
        }
    }
}

/// One network under training plus everything needed to resume it exactly.
pub struct Trainer {
    model: Model,
    scheme: QuantizationScheme,
    adam: Adam,
    rng: ChaCha8Rng,
    state: TrainState,
}

impl Trainer {
    pub fn new(config: &PipelineConfig, target: TrainTarget) -> Result<Self> {
        let model = Model::new(config.network_spec(target)?)?;
        Ok(Self {
            adam: Adam::new(&model),
            scheme: config.scheme(target),
            rng: ChaCha8Rng::seed_from_u64(config.train.seed),
            state: TrainState {
                target,
                step: 0,
                rng_seed: config.train.seed,
                rng_word_pos: 0,
                best: None,
                loss: config.loss,
                train: config.train.clone(),
            },
            model,
        })
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let state: TrainState = serde_json::from_value(ckpt.extra["train_state"].clone())
            .map_err(|e| Error::Format(format!("checkpoint has no resumable training state: {e}")))?;
        let scheme: QuantizationScheme = serde_json::from_value(ckpt.extra["scheme"].clone())
            .map_err(|e| Error::Format(format!("checkpoint scheme: {e}")))?;
        let model = ckpt.to_model()?;
        let mut adam = Adam::new(&model);
        for id in 0..model.params().len() {
            let name = model.params().name(id);
            for (slot, prefix) in [(&mut adam.m[id], "adam.m."), (&mut adam.v[id], "adam.v.")] {
                let t = ckpt
                    .tensors
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer moment for `{name}`")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!("optimizer moment shape mismatch for `{name}`")));
                }
                *slot = t.clone();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(state.rng_seed);
        rng.set_word_pos(state.rng_word_pos);
        Ok(Self {
            model,
            scheme,
            adam,
            rng,
            state,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model);
        let mut state = self.state.clone();
        state.rng_word_pos = self.rng.get_word_pos();
        ckpt.extra = serde_json::json!({
            "scheme": self.scheme,
            "train_state": state,
        });
        for id in 0..self.model.params().len() {
            let name = self.model.params().name(id);
            ckpt.tensors.insert(format!("adam.m.{name}"), self.adam.m[id].clone());
            ckpt.tensors.insert(format!("adam.v.{name}"), self.adam.v[id].clone());
        }
        ckpt
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn scheme(&self) -> QuantizationScheme {
        self.scheme
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn best(&self) -> Option<&ValidationRecord> {
        self.state.best.as_ref()
    }

    pub fn net(&self) -> DepthNet {
        DepthNet {
            model: self.model.clone(),
            scheme: self.scheme,
        }
    }

    fn draw_batch(&mut self, data: &[Sample]) -> Result<(Tensor, Vec<DepthMap>)> {
        let mut images: Vec<RgbImage> = Vec::new();
        let mut depths = Vec::new();
        for _ in 0..self.state.train.batch_size {
            let s = &data[self.rng.random_range(0..data.len())];
            let (img, depth) = match self.state.train.crop {
                Some([w, h]) => {
                    let (i, d, _) = random_crop(&s.image, &s.depth, w, h, &mut self.rng)
                        .map_err(|e| Error::Data(format!("sample {}: {e}", s.id)))?;
                    (i, d)
                }
                None => (s.image.clone(), s.depth.clone()),
            };
            if let Some(first) = images.first() {
                if (first.width(), first.height()) != (img.width(), img.height()) {
                    return Err(Error::Data(format!(
                        "sample {} is {}x{}, batch needs {}x{}; set train.crop",
                        s.id,
                        img.width(),
                        img.height(),
                        first.width(),
                        first.height()
                    )));
                }
            }
            images.push(img);
            depths.push(depth);
        }
        let (w, h) = (images[0].width(), images[0].height());
        let mut data = Vec::with_capacity(images.len() * 3 * w * h);
        for img in &images {
            data.extend_from_slice(img.data());
        }
        Ok((Tensor::from_vec([images.len(), 3, h, w], data), depths))
    }

    /// One optimizer step on a randomly drawn batch.
    pub fn step(&mut self, data: &[Sample]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let (batch, depths) = self.draw_batch(data)?;
        let [_, _, h, w] = batch.shape();
        self.model
            .spec()
            .check_input(h, w)
            .map_err(|e| Error::Data(format!("training batch: {e}")))?;
        let (grads, stats, record) = {
            let mut graph = Graph::new(self.model.params(), BnMode::Train);
            let out = self.model.forward_with(&mut graph, batch)?;
            let values = ForwardOutputs {
                cls_logits: out.cls_logits.map(|id| graph.value(id).clone()),
                reg_depth: out.reg_depth.map(|id| graph.value(id).clone()),
                encoder_features: Vec::new(),
            };
            let loss = combined_loss(&values, &depths, &self.scheme, &self.state.loss)?;
            let record = StepRecord {
                step: self.state.step + 1,
                total: loss.total,
                cls: loss.cls,
                reg: loss.reg,
            };
            if !loss.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became {} at step {} (cls {:?}, reg {:?})",
                    loss.total, record.step, loss.cls, loss.reg
                )));
            }
            let mut seeds = Vec::new();
            if let (Some(id), Some(g)) = (out.cls_logits, loss.cls_grad) {
                seeds.push((id, g));
            }
            if let (Some(id), Some(g)) = (out.reg_depth, loss.reg_grad) {
                seeds.push((id, g));
            }
            let grads = graph.backward(&seeds);
            (grads, graph.into_bn_stats(), record)
        };
        self.state.step += 1;
        self.adam.update(&mut self.model, &grads, &self.state.train, self.state.step);
        self.model.params_mut().update_bn(&stats, self.state.train.bn_momentum);
        if self.model.params().tensors().iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence(format!("non-finite weights after step {}", self.state.step)));
        }
        Ok(record)
    }

    /// Scores the current weights; records a new best when REL improves.
    pub fn validate(&mut self, data: &[Sample]) -> Result<(MetricReport, bool)> {
        let (_, agg) = evaluate_net(&self.net(), data)?;
        let improved = self.state.best.as_ref().is_none_or(|b| agg.rel < b.metrics.rel);
        if improved {
            self.state.best = Some(ValidationRecord {
                step: self.state.step,
                metrics: agg,
            });
        }
        Ok((agg, improved))
    }
}

/// Where a training run writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn best(&self, target: TrainTarget) -> PathBuf {
        self.dir.join(format!("{target}_best.ckpt"))
    }

    pub fn last(&self, target: TrainTarget) -> PathBuf {
        self.dir.join(format!("{target}_last.ckpt"))
    }

    pub fn log(&self, target: TrainTarget) -> PathBuf {
        self.dir.join(format!("{target}_train_log.jsonl"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    pub best: Option<ValidationRecord>,
    /// Final weights.
    pub net: DepthNet,
}

/// Trains to `config.train.steps` total steps, validating every
/// `validate_every` steps and at the end. With `outputs`, writes the step log
/// and best/last checkpoints. `resume` continues from a saved trainer.
pub fn train(
    config: &PipelineConfig,
    target: TrainTarget,
    train_set: &[Sample],
    val_set: &[Sample],
    outputs: Option<&TrainOutputs>,
    resume: Option<Trainer>,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::Data(format!("no training samples for target {target}")));
    }
    let mut trainer = match resume {
        Some(t) => t,
        None => Trainer::new(config, target)?,
    };
    let mut log = match outputs {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let path = o.log(target);
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let save = |t: &Trainer, path: &Path| save_checkpoint(path, &t.checkpoint());
    let mut history = Vec::new();
    let mut validations = Vec::new();
    let every = config.train.validate_every;
    while trainer.step_count() < config.train.steps {
        let rec = trainer.step(train_set)?;
        if let Some((w, path)) = &mut log {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        history.push(rec);
        let step = trainer.step_count();
        if !val_set.is_empty() && (step % every == 0 || step == config.train.steps) {
            let (metrics, improved) = trainer.validate(val_set)?;
            log::info!("{target} step {step}: validation REL {:.4} RMSE {:.4}", metrics.rel, metrics.rmse);
            validations.push(ValidationRecord { step, metrics });
            if let (true, Some(o)) = (improved, outputs) {
                save(&trainer, &o.best(target))?;
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(o) = outputs {
        save(&trainer, &o.last(target))?;
    }
    Ok(TrainReport {
        history,
        validations,
        best: trainer.best().cloned(),
        net: trainer.net(),
    })
}
