use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type ParamId = usize;
pub type BnId = usize;

/// Running statistics and affine parameters of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Batch statistics observed by one training-mode batch-norm evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub layer: BnId,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

/// Named trainable tensors plus batch-norm buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    bn: Vec<BnLayer>,
    bn_names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn add_bn(&mut self, name: &str, channels: usize) -> BnId {
        let gamma = self.add(format!("{name}.gamma"), Tensor::full([channels, 1, 1, 1], 1.0));
        let beta = self.add(format!("{name}.beta"), Tensor::zeros([channels, 1, 1, 1]));
        self.bn.push(BnLayer {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        });
        self.bn_names.push(name.to_string());
        self.bn.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn bn(&self, id: BnId) -> &BnLayer {
        &self.bn[id]
    }

    pub fn bn_layers(&self) -> &[BnLayer] {
        &self.bn
    }

    pub fn bn_name(&self, id: BnId) -> &str {
        &self.bn_names[id]
    }

    pub fn bn_mut(&mut self, id: BnId) -> &mut BnLayer {
        &mut self.bn[id]
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Exponential moving update of the running statistics.
    pub fn update_bn(&mut self, stats: &[BnBatchStats], momentum: f64) {
        for s in stats {
            let layer = &mut self.bn[s.layer];
            for (r, &b) in layer.running_mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, &b) in layer.running_var.iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }

    /// Replaces a tensor by name, checking its shape.
    pub fn set_named(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
        if self.tensors[id].shape() != t.shape() {
            return Err(Error::Format(format!(
                "parameter `{name}` has shape {:?}, archive holds {:?}",
                self.tensors[id].shape(),
                t.shape()
            )));
        }
        self.tensors[id] = t;
        Ok(())
    }
}
