//! Two executors for the same forward description: a recording tape used for
//! training and gradient checks, and an eager executor that frees
//! intermediates as soon as they go out of scope.

use std::rc::Rc;

use super::kernels::{self, BnCache, ConvGeom};
use super::params::{BnBatchStats, BnId, ParamId, ParamStore};
use super::tensor::Tensor;

/// Operations a network forward pass is written against.
pub trait Exec {
    type V: Clone;

    fn params(&self) -> &ParamStore;
    fn input(&mut self, t: Tensor) -> Self::V;
    fn conv(&mut self, x: &Self::V, w: ParamId, b: Option<ParamId>, g: ConvGeom) -> Self::V;
    fn batch_norm(&mut self, x: &Self::V, bn: BnId) -> Self::V;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn resize(&mut self, x: &Self::V, h: usize, w: usize) -> Self::V;
    fn shape(&self, x: &Self::V) -> [usize; 4];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and record them.
    Train,
    /// Normalize with the running statistics.
    Inference,
}

pub type NodeId = usize;

enum Op {
    Input,
    Conv {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        g: ConvGeom,
    },
    BnTrain {
        x: NodeId,
        bn: BnId,
        cache: BnCache,
    },
    BnInfer {
        x: NodeId,
        bn: BnId,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Resize {
        x: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording executor; call [`Graph::backward`] to get parameter gradients.
pub struct Graph<'p> {
    params: &'p ParamStore,
    mode: BnMode,
    nodes: Vec<Node>,
    bn_stats: Vec<BnBatchStats>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, mode: BnMode) -> Self {
        Self {
            params,
            mode,
            nodes: Vec::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn bn_stats(&self) -> &[BnBatchStats] {
        &self.bn_stats
    }

    pub fn into_bn_stats(self) -> Vec<BnBatchStats> {
        self.bn_stats
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = !matches!(op, Op::Input);
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    /// Back-propagates the seed gradients and returns one gradient per
    /// parameter (`None` for parameters the seeds do not reach).
    pub fn backward(&self, seeds: &[(NodeId, Tensor)]) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            accumulate(&mut grads[*id], g.clone());
        }
        let mut pgrads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Conv { x, w, b, g } => {
                    let need_dx = self.nodes[*x].needs_grad;
                    let r = kernels::conv_backward(&self.nodes[*x].value, self.params.get(*w), b.is_some(), &dy, *g, need_dx);
                    accumulate(&mut pgrads[*w], r.dw);
                    if let (Some(b), Some(db)) = (b, r.db) {
                        accumulate(&mut pgrads[*b], db);
                    }
                    if let Some(dx) = r.dx {
                        accumulate(&mut grads[*x], dx);
                    }
                }
                Op::BnTrain { x, bn, cache } => {
                    let layer = self.params.bn(*bn);
                    let (dx, dg, db) = kernels::bn_backward_train(&dy, cache, self.params.get(layer.gamma).data());
                    self.bn_param_grads(&mut pgrads, *bn, dg, db);
                    accumulate(&mut grads[*x], dx);
                }
                Op::BnInfer { x, bn } => {
                    let layer = self.params.bn(*bn);
                    let (dx, dg, db) = kernels::bn_backward_infer(
                        &self.nodes[*x].value,
                        &dy,
                        self.params.get(layer.gamma).data(),
                        &layer.running_mean,
                        &layer.running_var,
                    );
                    self.bn_param_grads(&mut pgrads, *bn, dg, db);
                    accumulate(&mut grads[*x], dx);
                }
                Op::Relu { x } => {
                    let dx = kernels::relu_backward(&node.value, &dy);
                    accumulate(&mut grads[*x], dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*b], dy.clone());
                    accumulate(&mut grads[*a], dy);
                }
                Op::Resize { x } => {
                    let dx = kernels::resize_backward(&dy, self.nodes[*x].value.shape());
                    accumulate(&mut grads[*x], dx);
                }
            }
        }
        pgrads
    }

    fn bn_param_grads(&self, pgrads: &mut [Option<Tensor>], bn: BnId, dg: Vec<f64>, db: Vec<f64>) {
        let layer = self.params.bn(bn);
        let c = dg.len();
        accumulate(&mut pgrads[layer.gamma], Tensor::from_vec([c, 1, 1, 1], dg));
        accumulate(&mut pgrads[layer.beta], Tensor::from_vec([c, 1, 1, 1], db));
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Exec for Graph<'_> {
    type V = NodeId;

    fn params(&self) -> &ParamStore {
        self.params
    }

    fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    fn conv(&mut self, x: &NodeId, w: ParamId, b: Option<ParamId>, g: ConvGeom) -> NodeId {
        let y = kernels::conv_forward(&self.nodes[*x].value, self.params.get(w), b.map(|b| self.params.get(b)), g);
        self.push(y, Op::Conv { x: *x, w, b, g })
    }

    fn batch_norm(&mut self, x: &NodeId, bn: BnId) -> NodeId {
        let layer = self.params.bn(bn);
        let gamma = self.params.get(layer.gamma).data();
        let beta = self.params.get(layer.beta).data();
        match self.mode {
            BnMode::Train => {
                let xv = &self.nodes[*x].value;
                let (y, cache) = kernels::bn_forward_train(xv, gamma, beta);
                let m = (xv.n() * xv.h() * xv.w()) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                self.bn_stats.push(BnBatchStats {
                    layer: bn,
                    mean: cache.mean.clone(),
                    var: cache.var.iter().map(|v| v * unbias).collect(),
                });
                self.push(y, Op::BnTrain { x: *x, bn, cache })
            }
            BnMode::Inference => {
                let y = kernels::bn_forward_infer(&self.nodes[*x].value, gamma, beta, &layer.running_mean, &layer.running_var);
                self.push(y, Op::BnInfer { x: *x, bn })
            }
        }
    }

    fn relu(&mut self, x: &NodeId) -> NodeId {
        let y = kernels::relu_forward(&self.nodes[*x].value);
        self.push(y, Op::Relu { x: *x })
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let y = kernels::add_forward(&self.nodes[*a].value, &self.nodes[*b].value);
        self.push(y, Op::Add { a: *a, b: *b })
    }

    fn resize(&mut self, x: &NodeId, h: usize, w: usize) -> NodeId {
        let y = kernels::resize_forward(&self.nodes[*x].value, h, w);
        self.push(y, Op::Resize { x: *x })
    }

    fn shape(&self, x: &NodeId) -> [usize; 4] {
        self.nodes[*x].value.shape()
    }
}

/// Inference-only executor; batch norm always uses running statistics.
pub struct Eager<'p> {
    params: &'p ParamStore,
}

impl<'p> Eager<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params }
    }
}

impl Exec for Eager<'_> {
    type V = Rc<Tensor>;

    fn params(&self) -> &ParamStore {
        self.params
    }

    fn input(&mut self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn conv(&mut self, x: &Rc<Tensor>, w: ParamId, b: Option<ParamId>, g: ConvGeom) -> Rc<Tensor> {
        Rc::new(kernels::conv_forward(x, self.params.get(w), b.map(|b| self.params.get(b)), g))
    }

    fn batch_norm(&mut self, x: &Rc<Tensor>, bn: BnId) -> Rc<Tensor> {
        let layer = self.params.bn(bn);
        Rc::new(kernels::bn_forward_infer(
            x,
            self.params.get(layer.gamma).data(),
            self.params.get(layer.beta).data(),
            &layer.running_mean,
            &layer.running_var,
        ))
    }

    fn relu(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(kernels::relu_forward(x))
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(kernels::add_forward(a, b))
    }

    fn resize(&mut self, x: &Rc<Tensor>, h: usize, w: usize) -> Rc<Tensor> {
        Rc::new(kernels::resize_forward(x, h, w))
    }

    fn shape(&self, x: &Rc<Tensor>) -> [usize; 4] {
        x.shape()
    }
}
