//! Momentum gradient descent over pixel values, the end-to-end transfer
//! pipeline, and lightness sweeps.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::convnet::NetworkSpec;
use crate::error::{Error, Result};
use crate::losses::{
    Objective, RegionMasks, TransferConfig, REGION_EYESHADOW_L, REGION_EYESHADOW_R,
    REGION_FOUNDATION, REGION_LIP_LOWER, REGION_LIP_UPPER,
};
use crate::parsing::{label, labels_to_mask, Labelmap, Mask};
use crate::tensor::Tensor;
use crate::warp::{eye_shadow_mask_for_before, FaceLandmarks};

/// Mutable state of one descent run.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub image: Tensor,
    pub velocity: Tensor,
    pub step: usize,
    pub momentum: f64,
    pub learning_rate: f64,
    pub loss_trace: Vec<f64>,
}

impl OptimizerState {
    pub fn new(initial: Tensor, momentum: f64, learning_rate: f64) -> Self {
        let velocity = Tensor::zeros(initial.channels(), initial.height(), initial.width());
        OptimizerState {
            image: initial,
            velocity,
            step: 0,
            momentum,
            learning_rate,
            loss_trace: Vec::new(),
        }
    }
}

/// One momentum update: v <- m*v - eta*g, A <- clamp(A + v, 0, 1).
pub fn sgd_momentum_step(state: &mut OptimizerState, gradient: &Tensor, loss: f64) -> Result<()> {
    if !gradient.same_shape(&state.image) {
        return Err(Error::Dimension("gradient/image shape mismatch".into()));
    }
    gradient.check_finite(&format!("gradient at step {}", state.step))?;
    state.velocity.scale(state.momentum);
    state
        .velocity
        .add_scaled(gradient, -state.learning_rate)?;
    state.image.add_scaled(&state.velocity, 1.0)?;
    state.image.clamp_in_place(0.0, 1.0);
    state.loss_trace.push(loss);
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    /// Raw (unweighted) per-term values, aligned with `Trace::term_names`.
    pub terms: Vec<f64>,
}

/// Per-iteration record of the objective and each term.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub term_names: Vec<String>,
    pub rows: Vec<TraceRow>,
    pub warnings: Vec<String>,
}

impl Trace {
    pub fn final_row(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn term_value(&self, row: &TraceRow, name: &str) -> Option<f64> {
        self.term_names
            .iter()
            .position(|n| n == name)
            .map(|i| row.terms[i])
    }

    /// Plain-text table: one row per iteration with the total and each
    /// term's raw value.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for w in &self.warnings {
            out.push_str(&format!("# warning: {w}\n"));
        }
        out.push_str("# t total");
        for name in &self.term_names {
            out.push(' ');
            out.push_str(name);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{} {:.12e}", row.step, row.total));
            for v in &row.terms {
                out.push_str(&format!(" {v:.12e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Labelmaps and landmarks accompanying one before/reference image pair.
pub struct TransferInputs<'a> {
    pub labels_before: &'a Labelmap,
    pub labels_ref: &'a Labelmap,
    pub landmarks_before: Option<&'a FaceLandmarks>,
    pub landmarks_ref: Option<&'a FaceLandmarks>,
}

/// Build the per-region mask pairs for the configured regions. Every region
/// that is enabled but unsupported by the inputs is collected into one
/// explicit error.
pub fn build_region_masks(
    before_extent: (usize, usize),
    inputs: &TransferInputs,
    cfg: &TransferConfig,
) -> Result<RegionMasks> {
    let (h, w) = before_extent;
    for (name, labels) in [
        ("before", inputs.labels_before),
        ("reference", inputs.labels_ref),
    ] {
        if labels.height() != h || labels.width() != w {
            return Err(Error::Dimension(format!(
                "{name} labelmap extent {:?} does not match images {:?}",
                (labels.height(), labels.width()),
                (h, w)
            )));
        }
    }
    let mut missing: Vec<String> = Vec::new();
    let mut masks = RegionMasks::default();
    let single = |id: u8| -> BTreeSet<u8> { [id].into_iter().collect() };
    let mut simple_region = |region: &str, id: u8| -> Result<()> {
        if !cfg.regions.iter().any(|r| r == region) {
            return Ok(());
        }
        let mut absent = Vec::new();
        if !inputs.labels_before.contains(id) {
            absent.push(format!("label {id} absent in before labelmap"));
        }
        if !inputs.labels_ref.contains(id) {
            absent.push(format!("label {id} absent in reference labelmap"));
        }
        if absent.is_empty() {
            let mb = labels_to_mask(inputs.labels_before, &single(id))?;
            let mr = labels_to_mask(inputs.labels_ref, &single(id))?;
            masks.insert(region, mb, mr);
        } else {
            missing.push(format!("{region}: {}", absent.join(", ")));
        }
        Ok(())
    };
    simple_region(REGION_FOUNDATION, label::FACE)?;
    simple_region(REGION_LIP_UPPER, label::UPPER_LIP)?;
    simple_region(REGION_LIP_LOWER, label::LOWER_LIP)?;

    for (region, id, pick_left) in [
        (REGION_EYESHADOW_L, label::LEFT_EYE_SHADOW, true),
        (REGION_EYESHADOW_R, label::RIGHT_EYE_SHADOW, false),
    ] {
        if !cfg.regions.iter().any(|r| r == region) {
            continue;
        }
        let mut absent = Vec::new();
        if !inputs.labels_ref.contains(id) {
            absent.push(format!("label {id} absent in reference labelmap"));
        }
        if inputs.landmarks_before.is_none() {
            absent.push("before landmarks missing".to_string());
        }
        if inputs.landmarks_ref.is_none() {
            absent.push("reference landmarks missing".to_string());
        }
        if !absent.is_empty() {
            missing.push(format!("{region}: {}", absent.join(", ")));
            continue;
        }
        let lm_b = inputs.landmarks_before.expect("checked above");
        let lm_r = inputs.landmarks_ref.expect("checked above");
        let (side_b, side_r) = if pick_left {
            (&lm_b.left, &lm_r.left)
        } else {
            (&lm_b.right, &lm_r.right)
        };
        let mask_r = labels_to_mask(inputs.labels_ref, &single(id))?;
        let warped = eye_shadow_mask_for_before(&mask_r, side_r, side_b, h, w)?;
        masks.insert(region, warped.mask, mask_r);
    }

    if !missing.is_empty() {
        return Err(Error::Argument(format!(
            "missing region inputs: {}",
            missing.join("; ")
        )));
    }
    Ok(masks)
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub image: Tensor,
    pub trace: Trace,
}

/// End-to-end transfer: build masks, extract the before/reference feature
/// stacks once, then descend from A0 = before for the configured budget.
pub fn run_transfer(
    net: &NetworkSpec,
    before: &Tensor,
    reference: &Tensor,
    inputs: &TransferInputs,
    cfg: &TransferConfig,
) -> Result<TransferOutcome> {
    if before.shape() != reference.shape() {
        return Err(Error::Dimension(
            "before and reference images must share an extent".into(),
        ));
    }
    let masks = build_region_masks((before.height(), before.width()), inputs, cfg)?;
    let objective = Objective::new(net, before, reference, &masks, cfg.clone())?;
    let mut trace = Trace {
        term_names: objective.term_names(),
        rows: Vec::with_capacity(cfg.iterations),
        warnings: objective.warnings().to_vec(),
    };
    let mut state = OptimizerState::new(before.clone(), cfg.momentum, cfg.learning_rate);
    let mut initial_loss = 0.0;
    for t in 0..cfg.iterations {
        let eval = objective.evaluate(&state.image)?;
        if t == 0 {
            initial_loss = eval.total;
        } else if eval.total > 1e6 * initial_loss.max(1e-12) {
            return Err(Error::Numeric(format!(
                "divergence at step {t}: loss {} exceeds 1e6 x initial {initial_loss}; trace:\n{}",
                eval.total,
                trace.to_table()
            )));
        }
        trace.rows.push(TraceRow {
            step: t,
            total: eval.total,
            terms: eval.terms.iter().map(|r| r.raw).collect(),
        });
        sgd_momentum_step(&mut state, &eval.gradient, eval.total)?;
    }
    Ok(TransferOutcome {
        image: state.image,
        trace,
    })
}

/// Which cosmetic weight a lightness sweep scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    LambdaE,
    LambdaF,
    LambdaL,
}

impl SweepParam {
    /// Term names whose raw values sum to the swept cosmetic's loss.
    pub fn term_names(&self) -> &'static [&'static str] {
        match self {
            SweepParam::LambdaE => &[REGION_EYESHADOW_L, REGION_EYESHADOW_R],
            SweepParam::LambdaF => &[REGION_FOUNDATION],
            SweepParam::LambdaL => &[REGION_LIP_UPPER, REGION_LIP_LOWER],
        }
    }

    pub fn apply(&self, cfg: &TransferConfig, value: f64) -> TransferConfig {
        let mut out = cfg.clone();
        match self {
            SweepParam::LambdaE => out.lambda_e = value,
            SweepParam::LambdaF => out.lambda_f = value,
            SweepParam::LambdaL => out.lambda_l = value,
        }
        out
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SweepParam::LambdaE => "lambda-e",
            SweepParam::LambdaF => "lambda-f",
            SweepParam::LambdaL => "lambda-l",
        };
        f.write_str(s)
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda-e" => Ok(SweepParam::LambdaE),
            "lambda-f" => Ok(SweepParam::LambdaF),
            "lambda-l" => Ok(SweepParam::LambdaL),
            other => Err(Error::Argument(format!(
                "unknown sweep parameter '{other}' (expected lambda-e, lambda-f or lambda-l)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub value: f64,
    pub image: Tensor,
    /// Converged raw loss of the swept cosmetic (sum over its terms).
    pub term_value: f64,
    pub trace: Trace,
}

/// One independent transfer per weight value, identical seeds throughout.
pub fn lightness_sweep(
    net: &NetworkSpec,
    before: &Tensor,
    reference: &Tensor,
    inputs: &TransferInputs,
    cfg: &TransferConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepRun>> {
    if values.is_empty() {
        return Err(Error::Argument("sweep needs at least one value".into()));
    }
    if values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Argument("sweep values must be positive".into()));
    }
    if values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("sweep values must be strictly ascending".into()));
    }
    let mut runs = Vec::with_capacity(values.len());
    for &value in values {
        let run_cfg = param.apply(cfg, value);
        let outcome = run_transfer(net, before, reference, inputs, &run_cfg)?;
        let final_row = outcome
            .trace
            .final_row()
            .ok_or_else(|| Error::Internal("empty trace".into()))?;
        let term_value = param
            .term_names()
            .iter()
            .filter_map(|name| outcome.trace.term_value(final_row, name))
            .sum();
        runs.push(SweepRun {
            value,
            image: outcome.image,
            term_value,
            trace: outcome.trace,
        });
    }
    Ok(runs)
}

/// Locality probe for sweeps: per-pixel change between two outputs (max
/// over channels) and the count of pixels whose change is significant —
/// above twice the global median and above 1% of the peak change — while
/// lying outside the region mask dilated by `dilation` pixels (Chebyshev
/// distance, covering receptive-field bleed). Returns the offender count
/// and the significance threshold used.
pub fn locality_probe(a1: &Tensor, a2: &Tensor, region: &Mask, dilation: usize) -> (usize, f64) {
    assert_eq!(a1.shape(), a2.shape());
    let (c_n, h, w) = a1.shape();
    let mut change = vec![0.0f64; h * w];
    for c in 0..c_n {
        for y in 0..h {
            for x in 0..w {
                let d = (a1.at(c, y, x) - a2.at(c, y, x)).abs();
                let cell = &mut change[y * w + x];
                if d > *cell {
                    *cell = d;
                }
            }
        }
    }
    let mut sorted = change.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let peak = *sorted.last().expect("non-empty image");
    let threshold = (2.0 * median).max(0.01 * peak);
    let r = dilation as isize;
    let mut offenders = 0usize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            if change[y as usize * w + x as usize] <= threshold {
                continue;
            }
            let mut near = false;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0
                        && xx >= 0
                        && (yy as usize) < h
                        && (xx as usize) < w
                        && region.at(yy as usize, xx as usize)
                    {
                        near = true;
                        break 'scan;
                    }
                }
            }
            if !near {
                offenders += 1;
            }
        }
    }
    (offenders, threshold)
}
