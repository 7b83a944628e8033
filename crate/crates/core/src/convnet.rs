//! Minimal convolutional feature extractor with exact backpropagation of
//! per-layer cotangents to the input image.
//!
//! Layers are conv / relu / maxpool only. All arithmetic is f64 so that
//! analytic gradients can be checked against central finite differences at
//! tight tolerances. Input pixels in [0, 1] are mapped to [-1, 1] before the
//! first layer; `backward_to_image` returns gradients with respect to the
//! raw [0, 1] pixels (the normalization Jacobian is folded in).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Kernel, Tensor};

/// Names of the conv layers in the default desk-scale network, mirroring the
/// usual VGG-style block naming.
pub const DEFAULT_CONV_NAMES: [&str; 5] = ["conv1-1", "conv2-1", "conv3-1", "conv4-1", "conv5-1"];

#[derive(Debug, Clone)]
pub enum LayerKind {
    Conv {
        weights: Kernel,
        bias: Vec<f64>,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

/// Layered convolutional extractor definition.
#[derive(Debug)]
pub struct NetworkSpec {
    input_channels: usize,
    layers: Vec<Layer>,
    forward_count: AtomicUsize,
}

impl Clone for NetworkSpec {
    fn clone(&self) -> Self {
        NetworkSpec {
            input_channels: self.input_channels,
            layers: self.layers.clone(),
            forward_count: AtomicUsize::new(0),
        }
    }
}

/// Receptive-field geometry of one layer relative to the input image. The
/// same arithmetic applies to rows and columns since all kernels and pools
/// are square. Unit (i, j) of the layer sees input rows
/// `[offset + i*jump, offset + i*jump + field)` clipped to the image, and
/// the matching column range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerGeometry {
    pub height: usize,
    pub width: usize,
    /// Input-pixel step between adjacent units.
    pub jump: usize,
    /// Input coordinate of the top-left corner of unit (0, 0)'s field
    /// (negative when padding reaches outside the image).
    pub offset: isize,
    /// Receptive-field side length in input pixels (before clipping).
    pub field: usize,
}

/// Per-layer activations for one input image, plus each layer's geometry.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    activations: BTreeMap<String, Tensor>,
    geometry: BTreeMap<String, LayerGeometry>,
    input_height: usize,
    input_width: usize,
}

impl FeatureStack {
    pub fn activation(&self, layer: &str) -> Result<&Tensor> {
        self.activations
            .get(layer)
            .ok_or_else(|| Error::Config(format!("unknown layer '{layer}'")))
    }

    pub fn geometry(&self, layer: &str) -> Result<LayerGeometry> {
        self.geometry
            .get(layer)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown layer '{layer}'")))
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.activations.keys().map(|s| s.as_str())
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.input_height, self.input_width)
    }
}

/// Standard cross-correlation with zero padding.
pub fn conv2d(
    input: &Tensor,
    kernel: &Kernel,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if kernel.in_channels() != input.channels() {
        return Err(Error::Dimension(format!(
            "kernel expects {} input channels, image has {}",
            kernel.in_channels(),
            input.channels()
        )));
    }
    if bias.len() != kernel.out_channels() {
        return Err(Error::Dimension("bias length != out_channels".into()));
    }
    if stride < 1 {
        return Err(Error::Dimension("stride must be >= 1".into()));
    }
    let (h, w) = (input.height(), input.width());
    let (kh, kw) = (kernel.kh(), kernel.kw());
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Dimension("kernel larger than padded input".into()));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(kernel.out_channels(), oh, ow);
    for oc in 0..kernel.out_channels() {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..input.channels() {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += input.at(ic, iy as usize, ix as usize)
                                * kernel.at(oc, ic, ky, kx);
                        }
                    }
                }
                *out.at_mut(oc, oy, ox) = acc;
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of `conv2d` with respect to its input.
pub fn conv2d_input_grad(
    cotangent: &Tensor,
    kernel: &Kernel,
    input_shape: (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (ic_n, h, w) = input_shape;
    if ic_n != kernel.in_channels() || cotangent.channels() != kernel.out_channels() {
        return Err(Error::Dimension("cotangent/kernel channel mismatch".into()));
    }
    let oh = (h + 2 * pad - kernel.kh()) / stride + 1;
    let ow = (w + 2 * pad - kernel.kw()) / stride + 1;
    if cotangent.height() != oh || cotangent.width() != ow {
        return Err(Error::Dimension(format!(
            "cotangent spatial size {:?} does not match forward output ({oh}, {ow})",
            (cotangent.height(), cotangent.width())
        )));
    }
    let mut grad = Tensor::zeros(ic_n, h, w);
    for oc in 0..kernel.out_channels() {
        for oy in 0..oh {
            for ox in 0..ow {
                let c = cotangent.at(oc, oy, ox);
                if c == 0.0 {
                    continue;
                }
                for ic in 0..ic_n {
                    for ky in 0..kernel.kh() {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel.kw() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            *grad.at_mut(ic, iy as usize, ix as usize) +=
                                c * kernel.at(oc, ic, ky, kx);
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(cotangent: &Tensor, input: &Tensor) -> Result<Tensor> {
    if !cotangent.same_shape(input) {
        return Err(Error::Dimension("relu cotangent shape mismatch".into()));
    }
    let mut grad = cotangent.clone();
    for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(grad)
}

// 2x2/stride-2 max pooling. Odd spatial dims replicate the last row/column,
// implemented by clamping window indices; the original cell precedes its
// replica in row-major order, so first-argmax routing stays deterministic.
fn pool_window(i: usize, extent: usize) -> [usize; 2] {
    [2 * i, (2 * i + 1).min(extent - 1)]
}

pub fn maxpool2_forward(input: &Tensor) -> Tensor {
    let (c_n, h, w) = input.shape();
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = Tensor::zeros(c_n, oh, ow);
    for c in 0..c_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for iy in pool_window(oy, h) {
                    for ix in pool_window(ox, w) {
                        let v = input.at(c, iy, ix);
                        if v > best {
                            best = v;
                        }
                    }
                }
                *out.at_mut(c, oy, ox) = best;
            }
        }
    }
    out
}

pub fn maxpool2_backward(cotangent: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (c_n, h, w) = input.shape();
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    if cotangent.shape() != (c_n, oh, ow) {
        return Err(Error::Dimension("maxpool cotangent shape mismatch".into()));
    }
    let mut grad = Tensor::zeros(c_n, h, w);
    for c in 0..c_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = (0, 0);
                for iy in pool_window(oy, h) {
                    for ix in pool_window(ox, w) {
                        let v = input.at(c, iy, ix);
                        if v > best {
                            best = v;
                            arg = (iy, ix);
                        }
                    }
                }
                *grad.at_mut(c, arg.0, arg.1) += cotangent.at(c, oy, ox);
            }
        }
    }
    Ok(grad)
}

fn normalize_input(image: &Tensor) -> Tensor {
    image.map(|v| 2.0 * v - 1.0)
}

impl NetworkSpec {
    pub fn new(input_channels: usize, layers: Vec<Layer>) -> Result<Self> {
        let net = NetworkSpec {
            input_channels,
            layers,
            forward_count: AtomicUsize::new(0),
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        let mut channels = self.input_channels;
        for layer in &self.layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate layer name '{}'",
                    layer.name
                )));
            }
            if let LayerKind::Conv { weights, bias, .. } = &layer.kind {
                if weights.in_channels() != channels {
                    return Err(Error::Config(format!(
                        "layer '{}' expects {} input channels but receives {}",
                        layer.name,
                        weights.in_channels(),
                        channels
                    )));
                }
                if bias.len() != weights.out_channels() {
                    return Err(Error::Config(format!(
                        "layer '{}' bias length mismatch",
                        layer.name
                    )));
                }
                channels = weights.out_channels();
            }
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn has_layer(&self, name: &str) -> bool {
        self.layers.iter().any(|l| l.name == name)
    }

    /// Conv layer names in network order, used as default style layers.
    pub fn conv_layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .map(|l| l.name.clone())
            .collect()
    }

    /// Number of `forward_all` calls since construction (performance
    /// contract: reference features are extracted once per run).
    pub fn forward_count(&self) -> usize {
        self.forward_count.load(Ordering::Relaxed)
    }

    fn forward_layers(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        if image.channels() != self.input_channels {
            return Err(Error::Dimension(format!(
                "network expects {} channels, image has {}",
                self.input_channels,
                image.channels()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut current = normalize_input(image);
        for layer in &self.layers {
            let next = match &layer.kind {
                LayerKind::Conv {
                    weights,
                    bias,
                    stride,
                    pad,
                } => conv2d(&current, weights, bias, *stride, *pad)?,
                LayerKind::Relu => relu_forward(&current),
                LayerKind::MaxPool => maxpool2_forward(&current),
            };
            next.check_finite(&layer.name)?;
            acts.push(next.clone());
            current = next;
        }
        Ok(acts)
    }

    pub fn forward_all(&self, image: &Tensor) -> Result<FeatureStack> {
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let acts = self.forward_layers(image)?;
        let geoms = self.geometries(image.height(), image.width());
        let mut activations = BTreeMap::new();
        let mut geometry = BTreeMap::new();
        for (layer, (act, geom)) in self.layers.iter().zip(acts.into_iter().zip(geoms)) {
            activations.insert(layer.name.clone(), act);
            geometry.insert(layer.name.clone(), geom);
        }
        Ok(FeatureStack {
            activations,
            geometry,
            input_height: image.height(),
            input_width: image.width(),
        })
    }

    /// Receptive-field geometry of every layer for a given input size,
    /// in layer order.
    pub fn geometries(&self, input_height: usize, input_width: usize) -> Vec<LayerGeometry> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut g = LayerGeometry {
            height: input_height,
            width: input_width,
            jump: 1,
            offset: 0,
            field: 1,
        };
        for layer in &self.layers {
            g = match &layer.kind {
                LayerKind::Conv {
                    weights,
                    stride,
                    pad,
                    ..
                } => {
                    let k = weights.kh();
                    LayerGeometry {
                        height: (g.height + 2 * pad - k) / stride + 1,
                        width: (g.width + 2 * pad - k) / stride + 1,
                        jump: g.jump * stride,
                        offset: g.offset - g.jump as isize * *pad as isize,
                        field: g.jump * (k - 1) + g.field,
                    }
                }
                LayerKind::Relu => g,
                LayerKind::MaxPool => LayerGeometry {
                    height: g.height.div_ceil(2),
                    width: g.width.div_ceil(2),
                    jump: g.jump * 2,
                    offset: g.offset,
                    field: g.jump + g.field,
                },
            };
            out.push(g);
        }
        out
    }

    /// Pull a set of per-layer cotangents back to a gradient on the raw
    /// [0, 1] image. Shared earlier layers are traversed exactly once.
    pub fn backward_to_image(
        &self,
        image: &Tensor,
        cotangents: &BTreeMap<String, Tensor>,
    ) -> Result<Tensor> {
        for name in cotangents.keys() {
            if !self.has_layer(name) {
                return Err(Error::Config(format!("cotangent on unknown layer '{name}'")));
            }
        }
        let acts = self.forward_layers(image)?;
        let normalized = normalize_input(image);
        let mut upstream: Option<Tensor> = None;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let out_act = &acts[idx];
            let mut grad_out = match upstream.take() {
                Some(g) => g,
                None => Tensor::zeros(out_act.channels(), out_act.height(), out_act.width()),
            };
            if let Some(cot) = cotangents.get(&layer.name) {
                if !cot.same_shape(out_act) {
                    return Err(Error::Dimension(format!(
                        "cotangent shape {:?} does not match '{}' activation {:?}",
                        cot.shape(),
                        layer.name,
                        out_act.shape()
                    )));
                }
                grad_out.add_scaled(cot, 1.0)?;
            }
            let input_act = if idx == 0 { &normalized } else { &acts[idx - 1] };
            let grad_in = match &layer.kind {
                LayerKind::Conv {
                    weights,
                    stride,
                    pad,
                    ..
                } => conv2d_input_grad(&grad_out, weights, input_act.shape(), *stride, *pad)?,
                LayerKind::Relu => relu_backward(&grad_out, input_act)?,
                LayerKind::MaxPool => maxpool2_backward(&grad_out, input_act)?,
            };
            upstream = Some(grad_in);
        }
        let mut grad = upstream
            .ok_or_else(|| Error::Internal("network has no layers".into()))?;
        // d(normalized)/d(pixel) = 2
        grad.scale(2.0);
        grad.check_finite("image gradient")?;
        Ok(grad)
    }
}

// --- templates and random initialization ---

/// Architecture without weights; the template a `random_network` fills in.
#[derive(Debug, Clone)]
pub struct NetworkTemplate {
    pub input_channels: usize,
    pub layers: Vec<LayerTemplate>,
}

#[derive(Debug, Clone)]
pub enum LayerTemplate {
    Conv {
        name: String,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu { name: String },
    MaxPool { name: String },
}

impl NetworkTemplate {
    /// Default desk-scale extractor: 5 blocks of {3x3 conv, relu, 2x2 pool}
    /// with widths {8, 16, 32, 64, 64}, conv layers named conv1-1..conv5-1.
    pub fn desk_default() -> Self {
        let widths = [8usize, 16, 32, 64, 64];
        let mut layers = Vec::new();
        for (i, (&w, name)) in widths.iter().zip(DEFAULT_CONV_NAMES).enumerate() {
            layers.push(LayerTemplate::Conv {
                name: name.to_string(),
                out_channels: w,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            layers.push(LayerTemplate::Relu {
                name: format!("relu{}", i + 1),
            });
            layers.push(LayerTemplate::MaxPool {
                name: format!("pool{}", i + 1),
            });
        }
        NetworkTemplate {
            input_channels: 3,
            layers,
        }
    }

    /// Two-block fixture architecture used by gradient checks: small enough
    /// for finite differences, still exercising conv, relu and pooling.
    pub fn tiny(input_channels: usize) -> Self {
        NetworkTemplate {
            input_channels,
            layers: vec![
                LayerTemplate::Conv {
                    name: "conv1-1".into(),
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerTemplate::Relu {
                    name: "relu1".into(),
                },
                LayerTemplate::MaxPool {
                    name: "pool1".into(),
                },
                LayerTemplate::Conv {
                    name: "conv2-1".into(),
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerTemplate::Relu {
                    name: "relu2".into(),
                },
            ],
        }
    }
}

/// Reproducible random weights for a template. Same seed, same network.
pub fn random_network(template: &NetworkTemplate, seed: u64) -> Result<NetworkSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels = template.input_channels;
    let mut layers = Vec::with_capacity(template.layers.len());
    for lt in &template.layers {
        let layer = match lt {
            LayerTemplate::Conv {
                name,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let fan_in = channels * kernel * kernel;
                let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt())
                    .map_err(|e| Error::Internal(e.to_string()))?;
                let n = out_channels * channels * kernel * kernel;
                let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
                let weights = Kernel::from_vec(*out_channels, channels, *kernel, *kernel, data)?;
                let bias = vec![0.0; *out_channels];
                channels = *out_channels;
                Layer {
                    name: name.clone(),
                    kind: LayerKind::Conv {
                        weights,
                        bias,
                        stride: *stride,
                        pad: *pad,
                    },
                }
            }
            LayerTemplate::Relu { name } => Layer {
                name: name.clone(),
                kind: LayerKind::Relu,
            },
            LayerTemplate::MaxPool { name } => Layer {
                name: name.clone(),
                kind: LayerKind::MaxPool,
            },
        };
        layers.push(layer);
    }
    NetworkSpec::new(template.input_channels, layers)
}

// --- network file format ---
//
// JSON document:
// {
//   "input_channels": 3,
//   "layers": [
//     {"name": "conv1-1", "kind": "conv", "out_channels": 8, "kernel": 3,
//      "stride": 1, "pad": 1, "weights": [[[[...]]]], "bias": [...]},
//     {"name": "relu1", "kind": "relu"},
//     {"name": "pool1", "kind": "maxpool"}
//   ]
// }
// Conv weights are nested [out][in][kh][kw] arrays.

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    input_channels: usize,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    name: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<Vec<Vec<Vec<f64>>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
}

pub fn load_network(path: &Path) -> Result<NetworkSpec> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: NetworkFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let parse_err = |detail: String| Error::Parse {
        path: path.to_path_buf(),
        detail,
    };
    let mut layers = Vec::with_capacity(file.layers.len());
    for lf in file.layers {
        let kind = match lf.kind.as_str() {
            "conv" => {
                let out_channels = lf
                    .out_channels
                    .ok_or_else(|| parse_err(format!("layer '{}': missing out_channels", lf.name)))?;
                let kernel = lf
                    .kernel
                    .ok_or_else(|| parse_err(format!("layer '{}': missing kernel", lf.name)))?;
                let nested = lf
                    .weights
                    .ok_or_else(|| parse_err(format!("layer '{}': missing weights", lf.name)))?;
                let bias = lf
                    .bias
                    .ok_or_else(|| parse_err(format!("layer '{}': missing bias", lf.name)))?;
                if nested.len() != out_channels {
                    return Err(parse_err(format!(
                        "layer '{}': weights have {} output channels, declared {}",
                        lf.name,
                        nested.len(),
                        out_channels
                    )));
                }
                let in_channels = nested.first().map_or(0, |v| v.len());
                let mut data = Vec::with_capacity(out_channels * in_channels * kernel * kernel);
                for o in &nested {
                    if o.len() != in_channels {
                        return Err(parse_err(format!(
                            "layer '{}': ragged input-channel dimension",
                            lf.name
                        )));
                    }
                    for i in o {
                        if i.len() != kernel || i.iter().any(|r| r.len() != kernel) {
                            return Err(parse_err(format!(
                                "layer '{}': kernel rows do not match declared size {kernel}",
                                lf.name
                            )));
                        }
                        for row in i {
                            data.extend_from_slice(row);
                        }
                    }
                }
                let weights = Kernel::from_vec(out_channels, in_channels, kernel, kernel, data)?;
                LayerKind::Conv {
                    weights,
                    bias,
                    stride: lf.stride.unwrap_or(1),
                    pad: lf.pad.unwrap_or(0),
                }
            }
            "relu" => LayerKind::Relu,
            "maxpool" => LayerKind::MaxPool,
            other => {
                return Err(parse_err(format!(
                    "layer '{}': unknown kind '{other}'",
                    lf.name
                )))
            }
        };
        layers.push(Layer {
            name: lf.name,
            kind,
        });
    }
    NetworkSpec::new(file.input_channels, layers)
}

pub fn save_network(net: &NetworkSpec, path: &Path) -> Result<()> {
    let layers = net
        .layers
        .iter()
        .map(|layer| match &layer.kind {
            LayerKind::Conv {
                weights,
                bias,
                stride,
                pad,
            } => {
                let mut nested = Vec::with_capacity(weights.out_channels());
                for o in 0..weights.out_channels() {
                    let mut per_in = Vec::with_capacity(weights.in_channels());
                    for i in 0..weights.in_channels() {
                        let mut rows = Vec::with_capacity(weights.kh());
                        for y in 0..weights.kh() {
                            rows.push(
                                (0..weights.kw()).map(|x| weights.at(o, i, y, x)).collect(),
                            );
                        }
                        per_in.push(rows);
                    }
                    nested.push(per_in);
                }
                LayerFile {
                    name: layer.name.clone(),
                    kind: "conv".into(),
                    out_channels: Some(weights.out_channels()),
                    kernel: Some(weights.kh()),
                    stride: Some(*stride),
                    pad: Some(*pad),
                    weights: Some(nested),
                    bias: Some(bias.clone()),
                }
            }
            LayerKind::Relu => LayerFile {
                name: layer.name.clone(),
                kind: "relu".into(),
                out_channels: None,
                kernel: None,
                stride: None,
                pad: None,
                weights: None,
                bias: None,
            },
            LayerKind::MaxPool => LayerFile {
                name: layer.name.clone(),
                kind: "maxpool".into(),
                out_channels: None,
                kernel: None,
                stride: None,
                pad: None,
                weights: None,
                bias: None,
            },
        })
        .collect();
    let file = NetworkFile {
        input_channels: net.input_channels,
        layers,
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selfcheck::{finite_diff_gradient, global_rel_error, random_tensor};

    fn single_conv_net(kernel_val: f64) -> NetworkSpec {
        let weights = Kernel::from_vec(1, 1, 1, 1, vec![kernel_val]).unwrap();
        NetworkSpec::new(
            1,
            vec![Layer {
                name: "conv1-1".into(),
                kind: LayerKind::Conv {
                    weights,
                    bias: vec![0.0],
                    stride: 1,
                    pad: 0,
                },
            }],
        )
        .unwrap()
    }

    #[test]
    fn conv2d_hand_examples() {
        let input = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let k2 = Kernel::from_vec(1, 1, 1, 1, vec![2.0]).unwrap();
        let out = conv2d(&input, &k2, &[0.0], 1, 0).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0, 6.0, 8.0]);

        // 1x1 identity kernel leaves any input unchanged
        let k1 = Kernel::from_vec(1, 1, 1, 1, vec![1.0]).unwrap();
        let out = conv2d(&input, &k1, &[0.0], 1, 0).unwrap();
        assert_eq!(out.data(), input.data());

        // 3x3 ones * 3x3 ones, no padding -> scalar 9
        let ones3 = Tensor::from_vec(1, 3, 3, vec![1.0; 9]).unwrap();
        let k3 = Kernel::from_vec(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        let out = conv2d(&ones3, &k3, &[0.0], 1, 0).unwrap();
        assert_eq!(out.shape(), (1, 1, 1));
        assert_eq!(out.at(0, 0, 0), 9.0);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let input = Tensor::zeros(2, 2, 2);
        let k = Kernel::from_vec(1, 1, 1, 1, vec![1.0]).unwrap();
        assert!(conv2d(&input, &k, &[0.0], 1, 0).is_err());
    }

    #[test]
    fn conv2d_input_grad_hand_examples() {
        let k = Kernel::from_vec(1, 1, 1, 1, vec![2.0]).unwrap();
        let zero_cot = Tensor::zeros(1, 2, 2);
        let g = conv2d_input_grad(&zero_cot, &k, (1, 2, 2), 1, 0).unwrap();
        assert_eq!(g.data(), &[0.0; 4]);

        let cot = Tensor::from_vec(1, 2, 2, vec![1.0; 4]).unwrap();
        let g = conv2d_input_grad(&cot, &k, (1, 2, 2), 1, 0).unwrap();
        assert_eq!(g.data(), &[2.0; 4]);
    }

    #[test]
    fn conv2d_input_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor(&mut rng, 2, 5, 5);
        let kernel_data: Vec<f64> = {
            let dist = Normal::new(0.0, 0.5).unwrap();
            (0..3 * 2 * 3 * 3).map(|_| dist.sample(&mut rng)).collect()
        };
        let kernel = Kernel::from_vec(3, 2, 3, 3, kernel_data).unwrap();
        let probe = random_tensor(&mut rng, 3, 5, 5); // pad 1 keeps 5x5
        let scalar = |x: &Tensor| {
            conv2d(x, &kernel, &[0.1, -0.2, 0.3], 1, 1)
                .unwrap()
                .dot(&probe)
                .unwrap()
        };
        let analytic = conv2d_input_grad(&probe, &kernel, input.shape(), 1, 1).unwrap();
        let numeric = finite_diff_gradient(&input, 1e-5, scalar);
        assert!(global_rel_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn relu_and_maxpool_hand_examples() {
        let neg = Tensor::from_vec(1, 2, 2, vec![-1.0, -2.0, -0.5, -3.0]).unwrap();
        assert_eq!(relu_forward(&neg).data(), &[0.0; 4]);

        let input = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let pooled = maxpool2_forward(&input);
        assert_eq!(pooled.shape(), (1, 1, 1));
        assert_eq!(pooled.at(0, 0, 0), 4.0);

        let cot = Tensor::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let g = maxpool2_backward(&cot, &input).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_routes_to_first_row_major() {
        let input = Tensor::from_vec(1, 2, 2, vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let cot = Tensor::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let g = maxpool2_backward(&cot, &input).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_odd_dims_replicate() {
        let input = Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
        ])
        .unwrap();
        let pooled = maxpool2_forward(&input);
        assert_eq!(pooled.shape(), (1, 2, 2));
        assert_eq!(
            pooled.data(),
            &[5.0, 6.0, 8.0, 9.0]
        );
    }

    #[test]
    fn forward_all_identity_and_zero_cases() {
        // single relu layer on a negative image -> zero activations
        let relu_net = NetworkSpec::new(
            1,
            vec![Layer {
                name: "relu1".into(),
                kind: LayerKind::Relu,
            }],
        )
        .unwrap();
        // pixels in [0, 0.5) normalize to negative values
        let img = Tensor::from_vec(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let stack = relu_net.forward_all(&img).unwrap();
        assert_eq!(stack.activation("relu1").unwrap().data(), &[0.0; 4]);

        // single 1x1 identity conv -> activation equals the normalized image
        let id_net = single_conv_net(1.0);
        let stack = id_net.forward_all(&img).unwrap();
        let act = stack.activation("conv1-1").unwrap();
        for (a, b) in act.data().iter().zip(img.data()) {
            assert!((a - (2.0 * b - 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_all_matches_scripted_two_layer_oracle() {
        // fixture: conv (2 out ch, 3x3, pad 1) then maxpool on a 4x4 image,
        // checked against an independently scripted forward pass
        let net = random_network(
            &NetworkTemplate {
                input_channels: 1,
                layers: vec![
                    LayerTemplate::Conv {
                        name: "conv1-1".into(),
                        out_channels: 2,
                        kernel: 3,
                        stride: 1,
                        pad: 1,
                    },
                    LayerTemplate::MaxPool {
                        name: "pool1".into(),
                    },
                ],
            },
            11,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_tensor(&mut rng, 1, 4, 4).map(|v| (v + 3.0) / 6.0);
        let stack = net.forward_all(&img).unwrap();

        let LayerKind::Conv { weights, bias, .. } = &net.layers()[0].kind else {
            panic!("fixture layer 0 must be conv");
        };
        // scripted oracle: direct quadruple loop, separate from conv2d
        let mut expect = Tensor::zeros(2, 4, 4);
        for oc in 0..2 {
            for y in 0..4i64 {
                for x in 0..4i64 {
                    let mut acc = bias[oc];
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            let (iy, ix) = (y + dy, x + dx);
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                acc += (2.0 * img.at(0, iy as usize, ix as usize) - 1.0)
                                    * weights.at(oc, 0, (dy + 1) as usize, (dx + 1) as usize);
                            }
                        }
                    }
                    *expect.at_mut(oc, y as usize, x as usize) = acc;
                }
            }
        }
        let act = stack.activation("conv1-1").unwrap();
        for (a, b) in act.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let pooled = stack.activation("pool1").unwrap();
        for c in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let m = expect
                        .at(c, 2 * y, 2 * x)
                        .max(expect.at(c, 2 * y, 2 * x + 1))
                        .max(expect.at(c, 2 * y + 1, 2 * x))
                        .max(expect.at(c, 2 * y + 1, 2 * x + 1));
                    assert!((pooled.at(c, y, x) - m).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_to_image_zero_and_identity() {
        let net = random_network(&NetworkTemplate::tiny(1), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_tensor(&mut rng, 1, 6, 6).map(|v| (v + 3.0) / 6.0);
        let stack = net.forward_all(&img).unwrap();

        let mut cots = BTreeMap::new();
        let act = stack.activation("conv2-1").unwrap();
        cots.insert(
            "conv2-1".to_string(),
            Tensor::zeros(act.channels(), act.height(), act.width()),
        );
        let g = net.backward_to_image(&img, &cots).unwrap();
        assert_eq!(g.max_abs(), 0.0);

        // identity conv: gradient equals cotangent times normalization Jacobian (2)
        let id_net = single_conv_net(1.0);
        let mut cots = BTreeMap::new();
        let cot = random_tensor(&mut rng, 1, 6, 6);
        cots.insert("conv1-1".to_string(), cot.clone());
        let g = id_net.backward_to_image(&img, &cots).unwrap();
        for (a, b) in g.data().iter().zip(cot.data()) {
            assert!((a - 2.0 * b).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_to_image_matches_finite_differences() {
        let net = random_network(&NetworkTemplate::tiny(2), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let img = random_tensor(&mut rng, 2, 6, 6).map(|v| (v + 3.0) / 6.0);
        let stack = net.forward_all(&img).unwrap();
        let mut cots = BTreeMap::new();
        for layer in ["conv1-1", "conv2-1"] {
            let act = stack.activation(layer).unwrap();
            cots.insert(
                layer.to_string(),
                random_tensor(&mut rng, act.channels(), act.height(), act.width()),
            );
        }
        let analytic = net.backward_to_image(&img, &cots).unwrap();
        let scalar = |x: &Tensor| {
            let s = net.forward_all(x).unwrap();
            cots.iter()
                .map(|(name, c)| s.activation(name).unwrap().dot(c).unwrap())
                .sum()
        };
        let numeric = finite_diff_gradient(&img, 1e-6, scalar);
        assert!(global_rel_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn backward_linearity() {
        let net = random_network(&NetworkTemplate::tiny(1), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_tensor(&mut rng, 1, 6, 6).map(|v| (v + 3.0) / 6.0);
        let stack = net.forward_all(&img).unwrap();
        let act = stack.activation("conv1-1").unwrap();
        let c1 = random_tensor(&mut rng, act.channels(), act.height(), act.width());
        let c2 = random_tensor(&mut rng, act.channels(), act.height(), act.width());
        let alpha = 1.7;
        let mut combo = c1.clone();
        combo.scale(alpha);
        combo.add_scaled(&c2, 1.0).unwrap();
        let run = |c: &Tensor| {
            let mut m = BTreeMap::new();
            m.insert("conv1-1".to_string(), c.clone());
            net.backward_to_image(&img, &m).unwrap()
        };
        let lhs = run(&combo);
        let mut rhs = run(&c1);
        rhs.scale(alpha);
        rhs.add_scaled(&run(&c2), 1.0).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn adjoint_consistency_per_layer() {
        // <backward(c), v> == <c, J v> for each layer kind
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let x = random_tensor(&mut rng, 2, 6, 6);

        // conv (linear: Jv = conv(v) with zero bias)
        let dist = Normal::new(0.0, 0.5).unwrap();
        let kdata: Vec<f64> = (0..3 * 2 * 3 * 3).map(|_| dist.sample(&mut rng)).collect();
        let kernel = Kernel::from_vec(3, 2, 3, 3, kdata).unwrap();
        let v = random_tensor(&mut rng, 2, 6, 6);
        let c = random_tensor(&mut rng, 3, 6, 6);
        let jv = conv2d(&v, &kernel, &[0.0; 3], 1, 1).unwrap();
        let bt = conv2d_input_grad(&c, &kernel, x.shape(), 1, 1).unwrap();
        assert!((bt.dot(&v).unwrap() - c.dot(&jv).unwrap()).abs() < 1e-8);

        // relu: Jv = v where x > 0
        let c = random_tensor(&mut rng, 2, 6, 6);
        let mut jv = v.clone();
        for (j, &xi) in jv.data_mut().iter_mut().zip(x.data()) {
            if xi <= 0.0 {
                *j = 0.0;
            }
        }
        let bt = relu_backward(&c, &x).unwrap();
        assert!((bt.dot(&v).unwrap() - c.dot(&jv).unwrap()).abs() < 1e-8);

        // maxpool: Jv = v at argmax positions
        let c = random_tensor(&mut rng, 2, 3, 3);
        let mut jv = Tensor::zeros(2, 3, 3);
        for ch in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = (0, 0);
                    for iy in pool_window(oy, 6) {
                        for ix in pool_window(ox, 6) {
                            if x.at(ch, iy, ix) > best {
                                best = x.at(ch, iy, ix);
                                arg = (iy, ix);
                            }
                        }
                    }
                    *jv.at_mut(ch, oy, ox) = v.at(ch, arg.0, arg.1);
                }
            }
        }
        let bt = maxpool2_backward(&c, &x).unwrap();
        assert!((bt.dot(&v).unwrap() - c.dot(&jv).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let net = random_network(&NetworkTemplate::tiny(3), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_network(&net, &path).unwrap();
        let loaded = load_network(&path).unwrap();
        assert_eq!(net.input_channels(), loaded.input_channels());
        for (a, b) in net.layers().iter().zip(loaded.layers()) {
            assert_eq!(a.name, b.name);
            match (&a.kind, &b.kind) {
                (
                    LayerKind::Conv {
                        weights: wa,
                        bias: ba,
                        stride: sa,
                        pad: pa,
                    },
                    LayerKind::Conv {
                        weights: wb,
                        bias: bb,
                        stride: sb,
                        pad: pb,
                    },
                ) => {
                    assert_eq!(wa.data(), wb.data());
                    assert_eq!(ba, bb);
                    assert_eq!((sa, pa), (sb, pb));
                }
                (LayerKind::Relu, LayerKind::Relu) => {}
                (LayerKind::MaxPool, LayerKind::MaxPool) => {}
                _ => panic!("layer kind changed across round trip"),
            }
        }
    }

    #[test]
    fn random_network_is_seed_deterministic() {
        let a = random_network(&NetworkTemplate::desk_default(), 7).unwrap();
        let b = random_network(&NetworkTemplate::desk_default(), 7).unwrap();
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            if let (LayerKind::Conv { weights: wa, .. }, LayerKind::Conv { weights: wb, .. }) =
                (&la.kind, &lb.kind)
            {
                assert_eq!(wa.data(), wb.data());
            }
        }
    }

    #[test]
    fn declared_channels_flow_into_feature_stack() {
        let template = NetworkTemplate {
            input_channels: 3,
            layers: vec![LayerTemplate::Conv {
                name: "conv1-1".into(),
                out_channels: 8,
                kernel: 3,
                stride: 1,
                pad: 1,
            }],
        };
        let net = random_network(&template, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_network(&net, &path).unwrap();
        let loaded = load_network(&path).unwrap();
        let img = Tensor::zeros(3, 4, 4);
        let stack = loaded.forward_all(&img).unwrap();
        assert_eq!(stack.activation("conv1-1").unwrap().channels(), 8);
    }

    #[test]
    fn malformed_network_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"input_channels\": 3, \"layers\": [{\"name\"").unwrap();
        match load_network(&path) {
            Err(Error::Parse { .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn geometry_is_non_increasing_with_depth() {
        let net = random_network(&NetworkTemplate::desk_default(), 1).unwrap();
        let geoms = net.geometries(32, 32);
        for pair in geoms.windows(2) {
            assert!(pair[1].height <= pair[0].height);
            assert!(pair[1].width <= pair[0].width);
        }
    }
}
