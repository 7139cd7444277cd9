//! Training objectives with analytic gradients.
//!
//! Every loss takes a batch (`[N, C, H, W]` tensors and one target per
//! sample), ignores pixels outside the target's validity mask, and returns the
//! reduced value together with the gradient with respect to its input tensor.

use serde::{Deserialize, Serialize};

use crate::dataio::DepthMap;
use crate::error::{Error, Result};
use crate::netgraph::{softmax_channels, Branches, ForwardOutputs, Tensor};
use crate::quantizer::{QuantizationScheme, QuantizedDepthMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Reg,
    HardCls,
    SoftCls,
    HardClsPlusReg,
    #[default]
    SoftClsPlusReg,
}

impl LossMode {
    fn cls(self) -> Option<ClsKind> {
        match self {
            LossMode::HardCls | LossMode::HardClsPlusReg => Some(ClsKind::Hard),
            LossMode::SoftCls | LossMode::SoftClsPlusReg => Some(ClsKind::Soft),
            LossMode::Reg => None,
        }
    }

    fn has_reg(self) -> bool {
        matches!(self, LossMode::Reg | LossMode::HardClsPlusReg | LossMode::SoftClsPlusReg)
    }

    /// Decoder branches a network needs to be trained with this mode.
    pub fn branches(self) -> Branches {
        match (self.cls().is_some(), self.has_reg()) {
            (true, true) => Branches::Both,
            (true, false) => Branches::ClassificationOnly,
            _ => Branches::RegressionOnly,
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "reg" => LossMode::Reg,
            "hard_cls" => LossMode::HardCls,
            "soft_cls" => LossMode::SoftCls,
            "hard_cls_plus_reg" | "hard_cls+reg" => LossMode::HardClsPlusReg,
            "soft_cls_plus_reg" | "soft_cls+reg" => LossMode::SoftClsPlusReg,
            _ => return Err(Error::Config(format!("unknown loss mode `{s}`"))),
        })
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Reg => "reg",
            LossMode::HardCls => "hard-cls",
            LossMode::SoftCls => "soft-cls",
            LossMode::HardClsPlusReg => "hard-cls+reg",
            LossMode::SoftClsPlusReg => "soft-cls+reg",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClsKind {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    MeanOverValid,
    SumOverValid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Weight of the classification term.
    pub w1: f64,
    /// Weight of the regression term.
    pub w2: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::default(),
            w1: 1.0,
            w2: 1.0,
            reduction: Reduction::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1.is_finite() && self.w2.is_finite()) || self.w1 < 0.0 || self.w2 < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative (w1={}, w2={})",
                self.w1, self.w2
            )));
        }
        if self.w1 == 0.0 && self.w2 == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Reduced loss and its gradient with respect to the loss input.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

pub fn smooth_l1(y: f64) -> f64 {
    if y.abs() < 1.0 {
        0.5 * y * y
    } else {
        y.abs() - 0.5
    }
}

pub fn smooth_l1_grad(y: f64) -> f64 {
    if y.abs() < 1.0 {
        y
    } else {
        y.signum()
    }
}

fn check_batch(n: usize, h: usize, w: usize, targets: &[(usize, usize)]) -> Result<()> {
    if targets.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: targets.len(),
        });
    }
    for &(th, tw) in targets {
        if (th, tw) != (h, w) {
            return Err(Error::Shape(format!("prediction is {w}x{h} but target is {tw}x{th}")));
        }
    }
    Ok(())
}

fn normalizer(reduction: Reduction, n_valid: usize) -> Result<f64> {
    if n_valid == 0 {
        return Err(Error::EmptyTarget);
    }
    Ok(match reduction {
        Reduction::MeanOverValid => 1.0 / n_valid as f64,
        Reduction::SumOverValid => 1.0,
    })
}

fn cls_loss(logits: &Tensor, gt: &[QuantizedDepthMap], reduction: Reduction, kind: ClsKind) -> Result<LossValue> {
    let [n, k1, h, w] = logits.shape();
    check_batch(n, h, w, &gt.iter().map(|g| (g.height, g.width)).collect::<Vec<_>>())?;
    let scale = normalizer(reduction, gt.iter().map(QuantizedDepthMap::num_valid).sum())?;
    let probs = softmax_channels(logits);
    let hw = h * w;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (i, g) in gt.iter().enumerate() {
        let base = i * k1 * hw;
        for p in 0..hw {
            if !g.valid[p] {
                continue;
            }
            let target = g.bins[p] as usize;
            if target >= k1 {
                return Err(Error::Dimension {
                    expected: k1,
                    got: target + 1,
                });
            }
            let at = |j: usize| base + j * hw + p;
            let pr = |j: usize| probs.data()[at(j)];
            match kind {
                ClsKind::Soft => {
                    let e: f64 = (0..k1).map(|j| j as f64 * pr(j)).sum();
                    let r = e - target as f64;
                    total += smooth_l1(r);
                    let s = smooth_l1_grad(r) * scale;
                    for j in 0..k1 {
                        grad.data_mut()[at(j)] = s * pr(j) * (j as f64 - e);
                    }
                }
                ClsKind::Hard => {
                    // log-sum-exp form stays finite for saturated logits
                    let z = |j: usize| logits.data()[at(j)];
                    let m = (0..k1).map(z).fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + (0..k1).map(|j| (z(j) - m).exp()).sum::<f64>().ln();
                    total += lse - z(target);
                    for j in 0..k1 {
                        let onehot = if j == target { 1.0 } else { 0.0 };
                        grad.data_mut()[at(j)] = scale * (pr(j) - onehot);
                    }
                }
            }
        }
    }
    Ok(LossValue {
        value: total * scale,
        grad,
    })
}

/// Smooth-L1 distance between the softmax-expected bin and the target bin.
pub fn soft_cls_loss(logits: &Tensor, gt: &[QuantizedDepthMap], reduction: Reduction) -> Result<LossValue> {
    cls_loss(logits, gt, reduction, ClsKind::Soft)
}

/// Cross-entropy against the target bin index.
pub fn hard_cls_loss(logits: &Tensor, gt: &[QuantizedDepthMap], reduction: Reduction) -> Result<LossValue> {
    cls_loss(logits, gt, reduction, ClsKind::Hard)
}

/// Absolute error in meters between regressed and ground-truth depth.
pub fn l1_reg_loss(reg_depth: &Tensor, gt: &[DepthMap], reduction: Reduction) -> Result<LossValue> {
    let [n, c, h, w] = reg_depth.shape();
    if c != 1 {
        return Err(Error::Dimension { expected: 1, got: c });
    }
    check_batch(n, h, w, &gt.iter().map(|g| (g.height(), g.width())).collect::<Vec<_>>())?;
    let scale = normalizer(reduction, gt.iter().map(DepthMap::num_valid).sum())?;
    let hw = h * w;
    let mut grad = Tensor::zeros(reg_depth.shape());
    let mut total = 0.0;
    for (i, g) in gt.iter().enumerate() {
        for p in 0..hw {
            if !g.valid()[p] {
                continue;
            }
            let r = reg_depth.data()[i * hw + p] - g.values()[p];
            total += r.abs();
            grad.data_mut()[i * hw + p] = scale * if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }
    Ok(LossValue {
        value: total * scale,
        grad,
    })
}

/// Weighted total with per-term values and gradients already scaled by the
/// term weights.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub total: f64,
    pub cls: Option<f64>,
    pub reg: Option<f64>,
    pub cls_grad: Option<Tensor>,
    pub reg_grad: Option<Tensor>,
}

pub fn combined_loss(
    outputs: &ForwardOutputs<Tensor>,
    gt: &[DepthMap],
    scheme: &QuantizationScheme,
    config: &LossConfig,
) -> Result<CombinedLoss> {
    config.validate()?;
    let mut out = CombinedLoss {
        total: 0.0,
        cls: None,
        reg: None,
        cls_grad: None,
        reg_grad: None,
    };
    if let Some(kind) = config.mode.cls() {
        let logits = outputs
            .cls_logits
            .as_ref()
            .ok_or_else(|| Error::Config(format!("loss mode {} needs a classification branch", config.mode)))?;
        let bins: Vec<_> = gt.iter().map(|d| scheme.quantize_map(d)).collect();
        let mut l = cls_loss(logits, &bins, config.reduction, kind)?;
        out.total += config.w1 * l.value;
        out.cls = Some(l.value);
        l.grad.data_mut().iter_mut().for_each(|g| *g *= config.w1);
        out.cls_grad = Some(l.grad);
    }
    if config.mode.has_reg() {
        let reg = outputs
            .reg_depth
            .as_ref()
            .ok_or_else(|| Error::Config(format!("loss mode {} needs a regression branch", config.mode)))?;
        let mut l = l1_reg_loss(reg, gt, config.reduction)?;
        out.total += config.w2 * l.value;
        out.reg = Some(l.value);
        l.grad.data_mut().iter_mut().for_each(|g| *g *= config.w2);
        out.reg_grad = Some(l.grad);
    }
    Ok(out)
}
