use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Eager, Exec};
use super::kernels::ConvGeom;
use super::params::{BnId, ParamId, ParamStore};
use super::spec::{Branch, LayerKind, NetworkSpec};
use super::tensor::Tensor;
use crate::dataio::{DepthMap, RgbImage};
use crate::error::{Error, Result};
use crate::quantizer::QuantizationScheme;

#[derive(Debug, Clone)]
struct ConvUnit {
    w: ParamId,
    b: Option<ParamId>,
    geom: ConvGeom,
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: ConvUnit,
    bn: BnId,
}

#[derive(Debug, Clone)]
enum EncLayer {
    Dense(ConvBn),
    Separable { dw: ConvBn, pw: ConvBn },
}

#[derive(Debug, Clone)]
struct UpprojUnit {
    scale: usize,
    a1: ConvBn,
    a2: ConvBn,
    b1: ConvBn,
    skip_y: Option<(usize, ConvUnit)>,
    skip_z: Option<ConvUnit>,
}

#[derive(Debug, Clone)]
enum Stage {
    Upproj(UpprojUnit),
    Sam(Vec<[ConvBn; 3]>),
}

#[derive(Debug, Clone)]
struct BranchLayout {
    stages: Vec<Stage>,
    head: ConvUnit,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<Vec<EncLayer>>,
    cls: Option<BranchLayout>,
    reg: Option<BranchLayout>,
}

/// Outputs of one forward pass, in the executor's value type.
#[derive(Debug, Clone)]
pub struct ForwardOutputs<V> {
    /// `[N, K+1, H, W]` classification logits.
    pub cls_logits: Option<V>,
    /// `[N, 1, H, W]` regressed depth in meters.
    pub reg_depth: Option<V>,
    /// Output of each encoder block.
    pub encoder_features: Vec<V>,
}

struct Builder<'a> {
    params: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    /// He-uniform weights scaled by fan-in.
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, geom: ConvGeom, bias: Option<f64>) -> ConvUnit {
        let k2 = geom.kernel * geom.kernel;
        let (shape, fan_in) = if geom.depthwise {
            ([c_in, 1, geom.kernel, geom.kernel], k2)
        } else {
            ([c_out, c_in, geom.kernel, geom.kernel], c_in * k2)
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let w = self.params.add(format!("{name}.weight"), Tensor::from_vec(shape, data));
        let b = bias.map(|v| self.params.add(format!("{name}.bias"), Tensor::full([c_out, 1, 1, 1], v)));
        ConvUnit { w, b, geom }
    }

    fn conv_bn(&mut self, name: &str, c_in: usize, c_out: usize, geom: ConvGeom) -> ConvBn {
        let conv = self.conv(name, c_in, c_out, geom, None);
        let bn = self.params.add_bn(&format!("{name}.bn"), c_out);
        ConvBn { conv, bn }
    }

    fn branch(&mut self, spec: &NetworkSpec, branch: Branch) -> BranchLayout {
        let prefix = match branch {
            Branch::Classification => "cls",
            Branch::Regression => "reg",
        };
        let mut c = spec.encoder.last().expect("encoder").out_channels();
        let mut stages = Vec::new();
        for (i, st) in spec.decoder.iter().enumerate() {
            let name = format!("{prefix}.stage{}", i + 1);
            match st.layer.kind {
                LayerKind::Sam => {
                    let modules = (0..st.layer.repeat)
                        .map(|m| {
                            [1, 2, 4]
                                .map(|d| self.conv_bn(&format!("{name}.am{m}.d{d}"), c, c, ConvGeom::dense(3, 1, d)))
                        })
                        .collect();
                    stages.push(Stage::Sam(modules));
                }
                _ => {
                    let out = st.layer.out_channels;
                    let k = st.layer.kernel;
                    let a1 = self.conv_bn(&format!("{name}.a1"), c, out, ConvGeom::dense(k, 1, 1));
                    let a2 = self.conv_bn(&format!("{name}.a2"), out, out, ConvGeom::dense(3, 1, 1));
                    let b1 = self.conv_bn(&format!("{name}.b1"), c, out, ConvGeom::dense(k, 1, 1));
                    let skip_y = st.skip_encoder.map(|src| {
                        let cy = spec.encoder[src].out_channels();
                        (src, self.conv(&format!("{name}.skip_y"), cy, out, ConvGeom::dense(1, 1, 1), Some(0.0)))
                    });
                    let skip_z = st
                        .skip_rgb
                        .then(|| self.conv(&format!("{name}.skip_z"), 3, out, ConvGeom::dense(1, 1, 1), Some(0.0)));
                    stages.push(Stage::Upproj(UpprojUnit {
                        scale: st.scale,
                        a1,
                        a2,
                        b1,
                        skip_y,
                        skip_z,
                    }));
                    c = out;
                }
            }
        }
        let (c_out, bias) = match branch {
            Branch::Classification => (spec.num_bins + 1, 0.0),
            Branch::Regression => (1, spec.regression_bias),
        };
        let head = self.conv(&format!("{prefix}.head"), c, c_out, ConvGeom::dense(spec.head_kernel, 1, 1), Some(bias));
        BranchLayout { stages, head }
    }
}

/// A network instance: its spec, weights and batch-norm buffers.
#[derive(Debug, Clone)]
pub struct Model {
    spec: NetworkSpec,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Builds and randomly initializes a network from `spec` using its seed.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        };
        let mut encoder = Vec::new();
        let mut c_in = 3;
        for (bi, block) in spec.encoder.iter().enumerate() {
            let mut layers = Vec::new();
            let mut li = 0;
            for l in &block.layers {
                for _ in 0..l.repeat {
                    let name = format!("enc.block{}.layer{li}", bi + 1);
                    let layer = if l.depthwise {
                        let dw = b.conv_bn(&format!("{name}.dw"), c_in, c_in, ConvGeom::depthwise(l.kernel, l.stride, l.dilation));
                        let pw = b.conv_bn(&format!("{name}.pw"), c_in, l.out_channels, ConvGeom::dense(1, 1, 1));
                        EncLayer::Separable { dw, pw }
                    } else {
                        EncLayer::Dense(b.conv_bn(&name, c_in, l.out_channels, ConvGeom::dense(l.kernel, l.stride, l.dilation)))
                    };
                    layers.push(layer);
                    c_in = l.out_channels;
                    li += 1;
                }
            }
            encoder.push(layers);
        }
        let cls = spec.branches.has(Branch::Classification).then(|| b.branch(&spec, Branch::Classification));
        let reg = spec.branches.has(Branch::Regression).then(|| b.branch(&spec, Branch::Regression));
        Ok(Self {
            spec,
            params,
            layout: Layout { encoder, cls, reg },
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Runs the network on an `[N, 3, H, W]` batch through any executor.
    pub fn forward_with<E: Exec>(&self, exec: &mut E, input: Tensor) -> Result<ForwardOutputs<E::V>> {
        let [_, c, h, w] = input.shape();
        if c != 3 {
            return Err(Error::Dimension { expected: 3, got: c });
        }
        self.spec.check_input(h, w)?;
        let rgb = exec.input(input);
        let mut x = rgb.clone();
        let mut features = Vec::new();
        for block in &self.layout.encoder {
            for layer in block {
                x = match layer {
                    EncLayer::Dense(u) => conv_bn_relu(exec, &x, u),
                    EncLayer::Separable { dw, pw } => {
                        let y = conv_bn_relu(exec, &x, dw);
                        conv_bn_relu(exec, &y, pw)
                    }
                };
            }
            features.push(x.clone());
        }
        let run = |exec: &mut E, b: &Option<BranchLayout>| b.as_ref().map(|b| branch_forward(exec, b, &x, &features, &rgb));
        let cls_logits = run(exec, &self.layout.cls);
        let reg_depth = run(exec, &self.layout.reg);
        Ok(ForwardOutputs {
            cls_logits,
            reg_depth,
            encoder_features: features,
        })
    }

    /// Inference-mode forward pass on a batch.
    pub fn forward(&self, input: &Tensor) -> Result<ForwardOutputs<Tensor>> {
        let mut exec = Eager::new(&self.params);
        let out = self.forward_with(&mut exec, input.clone())?;
        let unwrap = |v: std::rc::Rc<Tensor>| std::rc::Rc::try_unwrap(v).unwrap_or_else(|rc| (*rc).clone());
        Ok(ForwardOutputs {
            cls_logits: out.cls_logits.map(unwrap),
            reg_depth: out.reg_depth.map(unwrap),
            encoder_features: out.encoder_features.into_iter().map(unwrap).collect(),
        })
    }

    /// Depth map from the classification branch: softmax, expected bin,
    /// dequantization. Every pixel of the result is valid.
    pub fn predict_depth(&self, image: &RgbImage, scheme: &QuantizationScheme) -> Result<DepthMap> {
        if scheme.num_bins() != self.spec.num_bins {
            return Err(Error::InvalidInput(format!(
                "scheme has {} bins, network was built for {}",
                scheme.num_bins(),
                self.spec.num_bins
            )));
        }
        let out = self.forward(&image_tensor(image))?;
        let logits = out
            .cls_logits
            .ok_or_else(|| Error::InvalidInput("network has no classification branch".into()))?;
        depth_from_logits(&logits, 0, scheme)
    }
}

/// Converts logits of sample `i` to a depth map via the expected bin.
pub fn depth_from_logits(logits: &Tensor, i: usize, scheme: &QuantizationScheme) -> Result<DepthMap> {
    let [_, k1, h, w] = logits.shape();
    if k1 != scheme.num_classes() {
        return Err(Error::Dimension {
            expected: scheme.num_classes(),
            got: k1,
        });
    }
    let probs = softmax_channels(logits);
    let s = probs.sample(i);
    let hw = h * w;
    let values = (0..hw)
        .map(|p| {
            let e: f64 = (0..k1).map(|j| j as f64 * s[j * hw + p]).sum();
            scheme.dequantize_unchecked(e.clamp(0.0, scheme.num_bins() as f64))
        })
        .collect();
    DepthMap::from_values(h, w, values)
}

/// Numerically stable softmax over the channel axis.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(logits.shape());
    let src = logits.data();
    let dst = out.data_mut();
    for i in 0..n {
        let base = i * c * hw;
        for p in 0..hw {
            let at = |j: usize| base + j * hw + p;
            let m = (0..c).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (src[at(j)] - m).exp();
                dst[at(j)] = e;
                z += e;
            }
            for j in 0..c {
                dst[at(j)] /= z;
            }
        }
    }
    out
}

/// `[1, 3, H, W]` tensor view of an image.
pub fn image_tensor(image: &RgbImage) -> Tensor {
    Tensor::from_vec([1, 3, image.height(), image.width()], image.data().to_vec())
}

fn conv_bn<E: Exec>(exec: &mut E, x: &E::V, u: &ConvBn) -> E::V {
    let y = exec.conv(x, u.conv.w, u.conv.b, u.conv.geom);
    exec.batch_norm(&y, u.bn)
}

fn conv_bn_relu<E: Exec>(exec: &mut E, x: &E::V, u: &ConvBn) -> E::V {
    let y = conv_bn(exec, x, u);
    exec.relu(&y)
}

fn branch_forward<E: Exec>(exec: &mut E, b: &BranchLayout, x: &E::V, features: &[E::V], rgb: &E::V) -> E::V {
    let mut x = x.clone();
    for stage in &b.stages {
        x = match stage {
            Stage::Upproj(u) => upproj_forward(exec, u, &x, features, rgb),
            Stage::Sam(modules) => {
                for [c1, c2, c3] in modules {
                    let y = conv_bn_relu(exec, &x, c1);
                    let y = conv_bn_relu(exec, &y, c2);
                    let y = conv_bn(exec, &y, c3);
                    x = exec.add(&x, &y);
                }
                x
            }
        };
    }
    exec.conv(&x, b.head.w, b.head.b, b.head.geom)
}

fn upproj_forward<E: Exec>(exec: &mut E, u: &UpprojUnit, x: &E::V, features: &[E::V], rgb: &E::V) -> E::V {
    let [_, _, h, w] = exec.shape(x);
    let (oh, ow) = (h * u.scale, w * u.scale);
    let up = if u.scale == 1 { x.clone() } else { exec.resize(x, oh, ow) };
    let a = conv_bn_relu(exec, &up, &u.a1);
    let a = conv_bn(exec, &a, &u.a2);
    let b = conv_bn(exec, &up, &u.b1);
    let mut s = exec.add(&a, &b);
    if let Some((src, conv)) = &u.skip_y {
        let y = exec.conv(&features[*src], conv.w, conv.b, conv.geom);
        s = exec.add(&s, &y);
    }
    if let Some(conv) = &u.skip_z {
        let z = exec.resize(rgb, oh, ow);
        let z = exec.conv(&z, conv.w, conv.b, conv.geom);
        s = exec.add(&s, &z);
    }
    exec.relu(&s)
}
