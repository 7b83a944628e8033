//! Loss terms over deep features: mask projection onto feature grids, the
//! eye-shadow content loss, masked Gram matrices and the region style loss,
//! structure preservation, total variation, and the assembled objective.
//!
//! Each cosmetic term sits behind the [`CosmeticTerm`] trait and is
//! registered by region name, so the set of active terms is chosen at
//! runtime from the configuration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::convnet::{FeatureStack, NetworkSpec, DEFAULT_CONV_NAMES};
use crate::error::{Error, Result};
use crate::parsing::Mask;
use crate::tensor::Tensor;

pub const REGION_EYESHADOW_L: &str = "eyeshadow_l";
pub const REGION_EYESHADOW_R: &str = "eyeshadow_r";
pub const REGION_FOUNDATION: &str = "foundation";
pub const REGION_LIP_UPPER: &str = "lip_upper";
pub const REGION_LIP_LOWER: &str = "lip_lower";

/// All cosmetic region names, in canonical order.
pub const REGIONS: [&str; 5] = [
    REGION_EYESHADOW_L,
    REGION_EYESHADOW_R,
    REGION_FOUNDATION,
    REGION_LIP_UPPER,
    REGION_LIP_LOWER,
];

/// A pixel-space mask projected onto one feature layer's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    layer: String,
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl LayerMask {
    pub fn full(layer: &str, height: usize, width: usize) -> Self {
        LayerMask {
            layer: layer.to_string(),
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_grid(layer: &str, grid: &[Vec<bool>]) -> Self {
        let height = grid.len();
        let width = grid.first().map_or(0, |r| r.len());
        LayerMask {
            layer: layer.to_string(),
            height,
            width,
            data: grid.iter().flatten().copied().collect(),
        }
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Inclusive bounding box (y0, y1, x0, x1) of on cells.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(y, x) {
                    bb = Some(match bb {
                        None => (y, y, x, x),
                        Some((y0, y1, x0, x1)) => {
                            (y0.min(y), y1.max(y), x0.min(x), x1.max(x))
                        }
                    });
                }
            }
        }
        bb
    }
}

/// Resample a pixel mask onto a layer's grid: a unit is on iff at least half
/// of the in-bounds pixels in its receptive field are masked.
pub fn project_mask(mask: &Mask, layer: &str, stack: &FeatureStack) -> Result<LayerMask> {
    let (in_h, in_w) = stack.input_size();
    if mask.height() != in_h || mask.width() != in_w {
        return Err(Error::Dimension(format!(
            "mask extent {:?} does not match input image extent {:?}",
            (mask.height(), mask.width()),
            (in_h, in_w)
        )));
    }
    let g = stack.geometry(layer)?;
    let mut data = Vec::with_capacity(g.height * g.width);
    for uy in 0..g.height {
        let y0 = (g.offset + (uy * g.jump) as isize).max(0) as usize;
        let y1 = ((g.offset + (uy * g.jump) as isize + g.field as isize).min(in_h as isize))
            .max(y0 as isize) as usize;
        for ux in 0..g.width {
            let x0 = (g.offset + (ux * g.jump) as isize).max(0) as usize;
            let x1 = ((g.offset + (ux * g.jump) as isize + g.field as isize).min(in_w as isize))
                .max(x0 as isize) as usize;
            let mut on = 0usize;
            let mut total = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    total += 1;
                    if mask.at(y, x) {
                        on += 1;
                    }
                }
            }
            data.push(total > 0 && 2 * on >= total);
        }
    }
    Ok(LayerMask {
        layer: layer.to_string(),
        height: g.height,
        width: g.width,
        data,
    })
}

fn bilinear_sample(f: &Tensor, c: usize, y: f64, x: f64) -> f64 {
    let h = f.height();
    let w = f.width();
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    let top = f.at(c, y0, x0) * (1.0 - fx) + f.at(c, y0, x1) * fx;
    let bot = f.at(c, y1, x0) * (1.0 - fx) + f.at(c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn degenerate(region: &str, detail: &str) -> Error {
    Error::DegenerateRegion {
        region: region.to_string(),
        detail: detail.to_string(),
    }
}

/// Masked feature-matching loss with cross-region correspondence: both masks
/// are projected to the layer, their feature crops aligned bounding box to
/// bounding box (bilinear per channel), and the squared difference averaged
/// over on-cells and channels. Returns the loss and the exact cotangent on
/// the first stack's layer activation.
pub fn eye_shadow_loss(
    a_stack: &FeatureStack,
    r_stack: &FeatureStack,
    mask_b: &Mask,
    mask_r: &Mask,
    layer: &str,
    region: &str,
) -> Result<(f64, Tensor)> {
    if mask_b.is_clear() || mask_r.is_clear() {
        return Err(degenerate(region, "empty pixel mask"));
    }
    let sb = project_mask(mask_b, layer, a_stack)?;
    let sr = project_mask(mask_r, layer, r_stack)?;
    masked_feature_loss(a_stack, r_stack, &sb, &sr, layer, region)
}

fn masked_feature_loss(
    a_stack: &FeatureStack,
    r_stack: &FeatureStack,
    sb: &LayerMask,
    sr: &LayerMask,
    layer: &str,
    region: &str,
) -> Result<(f64, Tensor)> {
    let fa = a_stack.activation(layer)?;
    let fr = r_stack.activation(layer)?;
    if fa.channels() != fr.channels() {
        return Err(Error::Dimension(format!(
            "layer '{layer}' channel counts differ between stacks"
        )));
    }
    let (by0, by1, bx0, bx1) = sb
        .bbox()
        .ok_or_else(|| degenerate(region, "mask projects to no feature cells"))?;
    let (ry0, ry1, rx0, rx1) = sr
        .bbox()
        .ok_or_else(|| degenerate(region, "reference mask projects to no feature cells"))?;
    let bh = by1 - by0 + 1;
    let bw = bx1 - bx0 + 1;
    let rh = ry1 - ry0 + 1;
    let rw = rx1 - rx0 + 1;
    let channels = fa.channels();
    let norm = (sb.count() * channels) as f64;
    let mut loss = 0.0;
    let mut cot = Tensor::zeros(channels, fa.height(), fa.width());
    for y in by0..=by1 {
        for x in bx0..=bx1 {
            if !sb.at(y, x) {
                continue;
            }
            // corner-aligned mapping of the before crop onto the ref crop
            let ry = if bh > 1 {
                ry0 as f64 + (y - by0) as f64 * (rh - 1) as f64 / (bh - 1) as f64
            } else {
                ry0 as f64 + (rh - 1) as f64 / 2.0
            };
            let rx = if bw > 1 {
                rx0 as f64 + (x - bx0) as f64 * (rw - 1) as f64 / (bw - 1) as f64
            } else {
                rx0 as f64 + (rw - 1) as f64 / 2.0
            };
            for c in 0..channels {
                let diff = fa.at(c, y, x) - bilinear_sample(fr, c, ry, rx);
                loss += diff * diff / norm;
                *cot.at_mut(c, y, x) = 2.0 * diff / norm;
            }
        }
    }
    Ok((loss, cot))
}

/// Channel-by-channel inner products of a layer's masked feature maps,
/// averaged over contributing spatial positions.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    n: usize,
    positions: usize,
    values: Vec<f64>,
}

impl GramMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    /// Count of spatial positions that contributed.
    pub fn positions(&self) -> usize {
        self.positions
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn gram(features: &Tensor, lmask: &LayerMask) -> Result<GramMatrix> {
    let (n, h, w) = features.shape();
    if lmask.height() != h || lmask.width() != w {
        return Err(Error::Dimension("layer mask extent mismatch".into()));
    }
    let m = lmask.count();
    if m == 0 {
        return Err(degenerate(lmask.layer(), "empty layer mask in gram"));
    }
    let mut values = vec![0.0; n * n];
    for y in 0..h {
        for x in 0..w {
            if !lmask.at(y, x) {
                continue;
            }
            for i in 0..n {
                let fi = features.at(i, y, x);
                for j in i..n {
                    values[i * n + j] += fi * features.at(j, y, x);
                }
            }
        }
    }
    let inv_m = 1.0 / m as f64;
    for i in 0..n {
        for j in i..n {
            let v = values[i * n + j] * inv_m;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(GramMatrix {
        n,
        positions: m,
        values,
    })
}

/// Gram-matching style loss over a set of layers, each region pair masked
/// and normalized independently: sum_l ||G_A - G_R||_F^2 / (4 N_l^2).
/// Returns the loss and per-layer cotangents on the first stack's features.
pub fn style_region_loss(
    a_stack: &FeatureStack,
    r_stack: &FeatureStack,
    mask_b: &Mask,
    mask_r: &Mask,
    layers: &[String],
    region: &str,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    if mask_b.is_clear() || mask_r.is_clear() {
        return Err(degenerate(region, "empty pixel mask"));
    }
    let mut loss = 0.0;
    let mut cotangents = Vec::with_capacity(layers.len());
    for layer in layers {
        let sb = project_mask(mask_b, layer, a_stack)?;
        let sr = project_mask(mask_r, layer, r_stack)?;
        if sb.count() == 0 || sr.count() == 0 {
            return Err(degenerate(
                region,
                &format!("mask projects to no cells at layer '{layer}'"),
            ));
        }
        let fa = a_stack.activation(layer)?;
        let fr = r_stack.activation(layer)?;
        let ga = gram(fa, &sb)?;
        let gr = gram(fr, &sr)?;
        if ga.size() != gr.size() {
            return Err(Error::Dimension(format!(
                "layer '{layer}' channel counts differ between stacks"
            )));
        }
        let n = ga.size();
        let scale = 1.0 / (4.0 * (n as f64) * (n as f64));
        let mut diff = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let d = ga.at(i, j) - gr.at(i, j);
                diff[i * n + j] = d;
                loss += scale * d * d;
            }
        }
        // d loss / d F_a(k) = (1 / (N^2 M)) * sum_j diff[a][j] * F_j(k)
        let m = ga.positions() as f64;
        let grad_scale = 1.0 / ((n as f64) * (n as f64) * m);
        let mut cot = Tensor::zeros(n, fa.height(), fa.width());
        for y in 0..fa.height() {
            for x in 0..fa.width() {
                if !sb.at(y, x) {
                    continue;
                }
                for a in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += diff[a * n + j] * fa.at(j, y, x);
                    }
                    *cot.at_mut(a, y, x) = grad_scale * acc;
                }
            }
        }
        cotangents.push((layer.clone(), cot));
    }
    Ok((loss, cotangents))
}

/// Structure preservation: the masked feature-matching loss with all-ones
/// masks and the before-makeup face as target.
pub fn structure_loss(
    a_stack: &FeatureStack,
    b_stack: &FeatureStack,
    layer: &str,
) -> Result<(f64, Tensor)> {
    let ga = a_stack.geometry(layer)?;
    let gb = b_stack.geometry(layer)?;
    let sa = LayerMask::full(layer, ga.height, ga.width);
    let sb = LayerMask::full(layer, gb.height, gb.width);
    masked_feature_loss(a_stack, b_stack, &sa, &sb, layer, "structure")
}

/// Total variation smoothness term with exponent beta, per channel:
/// sum ((A[i][j+1]-A[i][j])^2 + (A[i+1][j]-A[i][j])^2)^(beta/2), with
/// differences dropped where the neighbor does not exist.
pub fn tv_loss(a: &Tensor, beta: f64) -> Result<(f64, Tensor)> {
    if beta < 1.0 || !beta.is_finite() {
        return Err(Error::Argument("tv beta must be >= 1".into()));
    }
    let (cn, h, w) = a.shape();
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(cn, h, w);
    for c in 0..cn {
        for y in 0..h {
            for x in 0..w {
                let dx = if x + 1 < w {
                    a.at(c, y, x + 1) - a.at(c, y, x)
                } else {
                    0.0
                };
                let dy = if y + 1 < h {
                    a.at(c, y + 1, x) - a.at(c, y, x)
                } else {
                    0.0
                };
                let e = dx * dx + dy * dy;
                loss += e.powf(beta / 2.0);
                // subgradient 0 at e = 0 for beta < 2
                if e > 0.0 {
                    let f = 0.5 * beta * e.powf(beta / 2.0 - 1.0);
                    *grad.at_mut(c, y, x) += f * (-2.0 * dx - 2.0 * dy);
                    if x + 1 < w {
                        *grad.at_mut(c, y, x + 1) += f * 2.0 * dx;
                    }
                    if y + 1 < h {
                        *grad.at_mut(c, y + 1, x) += f * 2.0 * dy;
                    }
                }
            }
        }
    }
    Ok((loss, grad))
}

// --- configuration ---

/// Loss weights and optimizer constants for one transfer run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransferConfig {
    pub lambda_s: f64,
    pub lambda_e: f64,
    pub lambda_l: f64,
    pub lambda_f: f64,
    pub tv_weight: f64,
    pub tv_beta: f64,
    pub style_layers: Vec<String>,
    pub content_layer: String,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Cosmetic regions to transfer; defaults to all of [`REGIONS`].
    pub regions: Vec<String>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            lambda_s: 10.0,
            lambda_e: 40.0,
            lambda_l: 500.0,
            lambda_f: 100.0,
            tv_weight: 1.0,
            tv_beta: 2.0,
            style_layers: DEFAULT_CONV_NAMES.iter().map(|s| s.to_string()).collect(),
            content_layer: "conv1-1".to_string(),
            iterations: 500,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            regions: REGIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TransferConfig {
    pub fn validate(&self, net: &NetworkSpec) -> Result<()> {
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_e", self.lambda_e),
            ("lambda_l", self.lambda_l),
            ("lambda_f", self.lambda_f),
            ("tv_weight", self.tv_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.tv_beta < 1.0 {
            return Err(Error::Config("tv_beta must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        for layer in self.style_layers.iter().chain([&self.content_layer]) {
            if !net.has_layer(layer) {
                return Err(Error::Config(format!(
                    "layer '{layer}' not present in the network"
                )));
            }
        }
        for region in &self.regions {
            if !REGIONS.contains(&region.as_str()) {
                return Err(Error::Config(format!("unknown region '{region}'")));
            }
        }
        Ok(())
    }
}

/// Before/reference mask pairs per region name.
#[derive(Debug, Clone, Default)]
pub struct RegionMasks {
    masks: BTreeMap<String, (Mask, Mask)>,
}

impl RegionMasks {
    pub fn insert(&mut self, region: &str, before: Mask, reference: Mask) {
        self.masks
            .insert(region.to_string(), (before, reference));
    }

    pub fn get(&self, region: &str) -> Option<&(Mask, Mask)> {
        self.masks.get(region)
    }

    pub fn region_names(&self) -> impl Iterator<Item = &str> {
        self.masks.keys().map(|s| s.as_str())
    }
}

// --- the term registry ---

pub struct EvalContext<'a> {
    pub a_image: &'a Tensor,
    pub a_stack: &'a FeatureStack,
    pub b_stack: &'a FeatureStack,
    pub r_stack: &'a FeatureStack,
}

/// One term's raw value and its derivatives: cotangents on feature layers
/// and/or a direct gradient on the image.
pub struct TermEval {
    pub value: f64,
    pub layer_cotangents: Vec<(String, Tensor)>,
    pub image_gradient: Option<Tensor>,
}

/// A single addend of the transfer objective. Implementations are
/// interchangeable behind this trait and selected by region name from the
/// configuration.
pub trait CosmeticTerm: Send + Sync {
    fn name(&self) -> &str;
    fn weight(&self, cfg: &TransferConfig) -> f64;
    fn evaluate(&self, ctx: &EvalContext, cfg: &TransferConfig) -> Result<TermEval>;
}

struct EyeShadowTerm {
    region: String,
    mask_b: Mask,
    mask_r: Mask,
}

impl CosmeticTerm for EyeShadowTerm {
    fn name(&self) -> &str {
        &self.region
    }

    fn weight(&self, cfg: &TransferConfig) -> f64 {
        cfg.lambda_e
    }

    fn evaluate(&self, ctx: &EvalContext, cfg: &TransferConfig) -> Result<TermEval> {
        let (value, cot) = eye_shadow_loss(
            ctx.a_stack,
            ctx.r_stack,
            &self.mask_b,
            &self.mask_r,
            &cfg.content_layer,
            &self.region,
        )?;
        Ok(TermEval {
            value,
            layer_cotangents: vec![(cfg.content_layer.clone(), cot)],
            image_gradient: None,
        })
    }
}

enum StyleWeight {
    Foundation,
    Lip,
}

struct StyleRegionTerm {
    region: String,
    mask_b: Mask,
    mask_r: Mask,
    kind: StyleWeight,
}

impl CosmeticTerm for StyleRegionTerm {
    fn name(&self) -> &str {
        &self.region
    }

    fn weight(&self, cfg: &TransferConfig) -> f64 {
        match self.kind {
            StyleWeight::Foundation => cfg.lambda_f,
            StyleWeight::Lip => cfg.lambda_l,
        }
    }

    fn evaluate(&self, ctx: &EvalContext, cfg: &TransferConfig) -> Result<TermEval> {
        let (value, layer_cotangents) = style_region_loss(
            ctx.a_stack,
            ctx.r_stack,
            &self.mask_b,
            &self.mask_r,
            &cfg.style_layers,
            &self.region,
        )?;
        Ok(TermEval {
            value,
            layer_cotangents,
            image_gradient: None,
        })
    }
}

struct StructureTerm;

impl CosmeticTerm for StructureTerm {
    fn name(&self) -> &str {
        "structure"
    }

    fn weight(&self, cfg: &TransferConfig) -> f64 {
        cfg.lambda_s
    }

    fn evaluate(&self, ctx: &EvalContext, cfg: &TransferConfig) -> Result<TermEval> {
        let (value, cot) = structure_loss(ctx.a_stack, ctx.b_stack, &cfg.content_layer)?;
        Ok(TermEval {
            value,
            layer_cotangents: vec![(cfg.content_layer.clone(), cot)],
            image_gradient: None,
        })
    }
}

struct TotalVariationTerm;

impl CosmeticTerm for TotalVariationTerm {
    fn name(&self) -> &str {
        "tv"
    }

    fn weight(&self, cfg: &TransferConfig) -> f64 {
        cfg.tv_weight
    }

    fn evaluate(&self, ctx: &EvalContext, cfg: &TransferConfig) -> Result<TermEval> {
        let (value, grad) = tv_loss(ctx.a_image, cfg.tv_beta)?;
        Ok(TermEval {
            value,
            layer_cotangents: Vec::new(),
            image_gradient: Some(grad),
        })
    }
}

/// Build the active term list from the configured regions and the mask pairs
/// that are actually available. Regions without masks are skipped with a
/// warning; the structure and TV terms are always present.
pub fn build_terms(
    masks: &RegionMasks,
    cfg: &TransferConfig,
) -> (Vec<Box<dyn CosmeticTerm>>, Vec<String>) {
    let mut terms: Vec<Box<dyn CosmeticTerm>> = Vec::new();
    let mut warnings = Vec::new();
    for region in REGIONS {
        if !cfg.regions.iter().any(|r| r == region) {
            continue;
        }
        match masks.get(region) {
            Some((b, r)) if !b.is_clear() && !r.is_clear() => {
                let term: Box<dyn CosmeticTerm> = match region {
                    REGION_EYESHADOW_L | REGION_EYESHADOW_R => Box::new(EyeShadowTerm {
                        region: region.to_string(),
                        mask_b: b.clone(),
                        mask_r: r.clone(),
                    }),
                    REGION_FOUNDATION => Box::new(StyleRegionTerm {
                        region: region.to_string(),
                        mask_b: b.clone(),
                        mask_r: r.clone(),
                        kind: StyleWeight::Foundation,
                    }),
                    _ => Box::new(StyleRegionTerm {
                        region: region.to_string(),
                        mask_b: b.clone(),
                        mask_r: r.clone(),
                        kind: StyleWeight::Lip,
                    }),
                };
                terms.push(term);
            }
            _ => warnings.push(format!("region '{region}' has no usable masks; term skipped")),
        }
    }
    terms.push(Box::new(StructureTerm));
    terms.push(Box::new(TotalVariationTerm));
    (terms, warnings)
}

/// One term's contribution in an [`ObjectiveEval`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermReport {
    pub name: String,
    pub raw: f64,
    pub weight: f64,
}

impl TermReport {
    pub fn weighted(&self) -> f64 {
        self.weight * self.raw
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub total: f64,
    pub gradient: Tensor,
    pub terms: Vec<TermReport>,
}

/// The assembled transfer objective. Reference and before feature stacks are
/// extracted once at construction; only the evolving image is re-run through
/// the network per evaluation.
pub struct Objective<'a> {
    net: &'a NetworkSpec,
    b_stack: FeatureStack,
    r_stack: FeatureStack,
    terms: Vec<Box<dyn CosmeticTerm>>,
    cfg: TransferConfig,
    warnings: Vec<String>,
}

impl<'a> Objective<'a> {
    pub fn new(
        net: &'a NetworkSpec,
        before: &Tensor,
        reference: &Tensor,
        masks: &RegionMasks,
        cfg: TransferConfig,
    ) -> Result<Self> {
        cfg.validate(net)?;
        if before.shape() != reference.shape() {
            return Err(Error::Dimension(
                "before and reference images must share an extent".into(),
            ));
        }
        let b_stack = net.forward_all(before)?;
        let r_stack = net.forward_all(reference)?;
        let (terms, warnings) = build_terms(masks, &cfg);
        Ok(Objective {
            net,
            b_stack,
            r_stack,
            terms,
            cfg,
            warnings,
        })
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn config(&self) -> &TransferConfig {
        &self.cfg
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name().to_string()).collect()
    }

    pub fn evaluate(&self, a: &Tensor) -> Result<ObjectiveEval> {
        let a_stack = self.net.forward_all(a)?;
        let ctx = EvalContext {
            a_image: a,
            a_stack: &a_stack,
            b_stack: &self.b_stack,
            r_stack: &self.r_stack,
        };
        let mut total = 0.0;
        let mut reports = Vec::with_capacity(self.terms.len());
        let mut combined: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut direct = Tensor::zeros(a.channels(), a.height(), a.width());
        for term in &self.terms {
            let weight = term.weight(&self.cfg);
            let eval = term.evaluate(&ctx, &self.cfg)?;
            total += weight * eval.value;
            for (layer, cot) in eval.layer_cotangents {
                match combined.get_mut(&layer) {
                    Some(acc) => acc.add_scaled(&cot, weight)?,
                    None => {
                        let mut scaled = cot;
                        scaled.scale(weight);
                        combined.insert(layer, scaled);
                    }
                }
            }
            if let Some(g) = eval.image_gradient {
                direct.add_scaled(&g, weight)?;
            }
            reports.push(TermReport {
                name: term.name().to_string(),
                raw: eval.value,
                weight,
            });
        }
        let mut gradient = if combined.is_empty() {
            Tensor::zeros(a.channels(), a.height(), a.width())
        } else {
            self.net.backward_to_image(a, &combined)?
        };
        gradient.add_scaled(&direct, 1.0)?;
        Ok(ObjectiveEval {
            total,
            gradient,
            terms: reports,
        })
    }
}

/// One-shot evaluation of the full objective and its pixel gradient.
pub fn total_objective(
    net: &NetworkSpec,
    a: &Tensor,
    before: &Tensor,
    reference: &Tensor,
    masks: &RegionMasks,
    cfg: &TransferConfig,
) -> Result<(ObjectiveEval, Vec<String>)> {
    let objective = Objective::new(net, before, reference, masks, cfg.clone())?;
    let eval = objective.evaluate(a)?;
    Ok((eval, objective.warnings().to_vec()))
}
