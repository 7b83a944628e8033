//! Labelmap semantics, the weighted cross-entropy parsing loss, and the
//! symmetric-prior confidence averaging applied at inference time.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of facial-part classes.
pub const NUM_LABELS: usize = 11;

/// Fixed label-id assignment.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const FACE: u8 = 1;
    pub const LEFT_EYE: u8 = 2;
    pub const RIGHT_EYE: u8 = 3;
    pub const LEFT_EYEBROW: u8 = 4;
    pub const RIGHT_EYEBROW: u8 = 5;
    pub const INNER_MOUTH: u8 = 6;
    pub const UPPER_LIP: u8 = 7;
    pub const LOWER_LIP: u8 = 8;
    pub const LEFT_EYE_SHADOW: u8 = 9;
    pub const RIGHT_EYE_SHADOW: u8 = 10;
}

/// Lateral class pairs swapped when a confidence map is horizontally
/// mirrored.
pub const MIRROR_PAIRS: [(usize, usize); 3] = [
    (label::LEFT_EYE as usize, label::RIGHT_EYE as usize),
    (label::LEFT_EYEBROW as usize, label::RIGHT_EYEBROW as usize),
    (
        label::LEFT_EYE_SHADOW as usize,
        label::RIGHT_EYE_SHADOW as usize,
    ),
];

/// Per-pixel label ids in 0..=10.
#[derive(Debug, Clone, PartialEq)]
pub struct Labelmap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Labelmap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension("labelmap data length mismatch".into()));
        }
        if let Some(bad) = data.iter().find(|&&v| v as usize >= NUM_LABELS) {
            return Err(Error::Argument(format!(
                "label id {bad} out of range 0..={}",
                NUM_LABELS - 1
            )));
        }
        Ok(Labelmap {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn contains(&self, id: u8) -> bool {
        self.data.contains(&id)
    }
}

/// Per-pixel boolean region mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension("mask data length mismatch".into()));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
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

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_clear(&self) -> bool {
        self.count() == 0
    }
}

/// Positive per-class weights for the parsing loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelWeights(pub [f64; NUM_LABELS]);

impl LabelWeights {
    pub fn uniform() -> Self {
        LabelWeights([1.0; NUM_LABELS])
    }

    /// Empirical defaults: 1.4 for eyebrows/eyes/eye-shadows, 1.2 for
    /// lips/inner-mouth, 1.0 for face/background.
    pub fn defaults() -> Self {
        let mut w = [1.0; NUM_LABELS];
        for id in [
            label::LEFT_EYE,
            label::RIGHT_EYE,
            label::LEFT_EYEBROW,
            label::RIGHT_EYEBROW,
            label::LEFT_EYE_SHADOW,
            label::RIGHT_EYE_SHADOW,
        ] {
            w[id as usize] = 1.4;
        }
        for id in [label::INNER_MOUTH, label::UPPER_LIP, label::LOWER_LIP] {
            w[id as usize] = 1.2;
        }
        LabelWeights(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Argument("label weights must be positive".into()));
        }
        Ok(())
    }
}

/// Keeps the log finite on degenerate confidences.
pub const LOG_CLAMP: f64 = 1e-12;

/// Result of the weighted cross-entropy loss: scalar value, exact gradient
/// with respect to the confidences, and whether any probability had to be
/// clamped away from zero.
#[derive(Debug, Clone)]
pub struct CrossEntropyEval {
    pub loss: f64,
    pub gradient: Tensor,
    pub clamped: bool,
}

/// Weighted cross-entropy over the spatial grid:
/// sum_ij w(y_ij) * (-log p_{y_ij}(x_ij)).
///
/// `conf` holds per-class probabilities when `apply_softmax` is false;
/// otherwise raw scores that are softmaxed per pixel first (the gradient is
/// then taken with respect to the scores).
pub fn weighted_cross_entropy(
    conf: &Tensor,
    truth: &Labelmap,
    weights: &LabelWeights,
    apply_softmax: bool,
) -> Result<CrossEntropyEval> {
    weights.validate()?;
    let (k, h, w) = conf.shape();
    if k != NUM_LABELS && k <= truth.data().iter().copied().max().unwrap_or(0) as usize {
        return Err(Error::Dimension(format!(
            "confidence has {k} classes but labelmap references higher ids"
        )));
    }
    if h != truth.height() || w != truth.width() {
        return Err(Error::Dimension("confidence/labelmap extent mismatch".into()));
    }
    let mut loss = 0.0;
    let mut gradient = Tensor::zeros(k, h, w);
    let mut clamped = false;
    for y in 0..h {
        for x in 0..w {
            let t = truth.at(y, x) as usize;
            let wt = weights.0[t];
            if apply_softmax {
                let m = (0..k).map(|c| conf.at(c, y, x)).fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = (0..k).map(|c| (conf.at(c, y, x) - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let p_t = exps[t] / z;
                loss += wt * -(p_t.max(LOG_CLAMP)).ln();
                if p_t < LOG_CLAMP {
                    clamped = true;
                }
                for c in 0..k {
                    let p_c = exps[c] / z;
                    let indicator = if c == t { 1.0 } else { 0.0 };
                    *gradient.at_mut(c, y, x) = wt * (p_c - indicator);
                }
            } else {
                let p = conf.at(t, y, x);
                let p_clamped = p.max(LOG_CLAMP);
                if p < LOG_CLAMP {
                    clamped = true;
                }
                loss += wt * -p_clamped.ln();
                *gradient.at_mut(t, y, x) = -wt / p_clamped;
            }
        }
    }
    Ok(CrossEntropyEval {
        loss,
        gradient,
        clamped,
    })
}

/// Symmetric prior: average each pixel's confidence with its horizontal
/// mirror, swapping lateral class pairs (L/R eye, eyebrow, eye shadow)
/// under the mirroring. With an odd width the center column mirrors onto
/// itself.
pub fn symmetrize_confidence(conf: &Tensor) -> Tensor {
    let (k, h, w) = conf.shape();
    let mirror_class = |c: usize| -> usize {
        for &(a, b) in &MIRROR_PAIRS {
            if a < k && b < k {
                if c == a {
                    return b;
                }
                if c == b {
                    return a;
                }
            }
        }
        c
    };
    let mut out = Tensor::zeros(k, h, w);
    for c in 0..k {
        let mc = mirror_class(c);
        for y in 0..h {
            for x in 0..w {
                *out.at_mut(c, y, x) = 0.5 * (conf.at(c, y, x) + conf.at(mc, y, w - 1 - x));
            }
        }
    }
    out
}

/// Per-pixel argmax readout; ties break toward the lower label id.
pub fn argmax_labels(conf: &Tensor) -> Result<Labelmap> {
    let (k, h, w) = conf.shape();
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0usize;
            for c in 0..k {
                let v = conf.at(c, y, x);
                if v > best {
                    best = v;
                    arg = c;
                }
            }
            data.push(arg as u8);
        }
    }
    Labelmap::new(h, w, data)
}

/// Pixel is true iff its label is in `wanted`.
pub fn labels_to_mask(labels: &Labelmap, wanted: &BTreeSet<u8>) -> Result<Mask> {
    if let Some(bad) = wanted.iter().find(|&&id| id as usize >= NUM_LABELS) {
        return Err(Error::Argument(format!(
            "unknown label id {bad} (valid range 0..={})",
            NUM_LABELS - 1
        )));
    }
    let data = labels.data().iter().map(|id| wanted.contains(id)).collect();
    Mask::new(labels.height(), labels.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selfcheck::{finite_diff_gradient, global_rel_error, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_conf(k: usize, h: usize, w: usize) -> Tensor {
        Tensor::zeros(k, h, w).map(|_| 1.0 / k as f64)
    }

    #[test]
    fn single_pixel_hand_example() {
        // p = [0.5, 0.5], truth 0, weight 2 -> 2 ln 2
        let conf = uniform_conf(2, 1, 1);
        let truth = Labelmap::new(1, 1, vec![0]).unwrap();
        let mut weights = LabelWeights::uniform();
        weights.0[0] = 2.0;
        let eval = weighted_cross_entropy(&conf, &truth, &weights, false).unwrap();
        assert!((eval.loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(!eval.clamped);
    }

    #[test]
    fn unit_weights_match_unweighted_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = random_tensor(&mut rng, NUM_LABELS, 3, 3).map(f64::exp);
        // normalize per pixel
        let mut conf = raw.clone();
        for y in 0..3 {
            for x in 0..3 {
                let z: f64 = (0..NUM_LABELS).map(|c| raw.at(c, y, x)).sum();
                for c in 0..NUM_LABELS {
                    *conf.at_mut(c, y, x) = raw.at(c, y, x) / z;
                }
            }
        }
        let truth = Labelmap::new(3, 3, vec![0, 1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let eval =
            weighted_cross_entropy(&conf, &truth, &LabelWeights::uniform(), false).unwrap();
        let mut plain = 0.0;
        for y in 0..3 {
            for x in 0..3 {
                plain += -conf.at(truth.at(y, x) as usize, y, x).ln();
            }
        }
        assert!((eval.loss - plain).abs() < 1e-12);
    }

    #[test]
    fn certain_prediction_has_zero_loss() {
        let mut conf = Tensor::zeros(NUM_LABELS, 2, 2);
        let truth = Labelmap::new(2, 2, vec![3, 3, 7, 0]).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                *conf.at_mut(truth.at(y, x) as usize, y, x) = 1.0;
            }
        }
        let eval =
            weighted_cross_entropy(&conf, &truth, &LabelWeights::defaults(), false).unwrap();
        assert_eq!(eval.loss, 0.0);
    }

    #[test]
    fn zero_probability_is_clamped_and_flagged() {
        let conf = Tensor::zeros(2, 1, 1);
        let truth = Labelmap::new(1, 1, vec![0]).unwrap();
        let eval = weighted_cross_entropy(&conf, &truth, &LabelWeights::uniform(), false).unwrap();
        assert!(eval.clamped);
        assert!(eval.loss.is_finite());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = Labelmap::new(3, 3, vec![0, 4, 2, 10, 1, 6, 9, 8, 7]).unwrap();
        let weights = LabelWeights::defaults();
        // probability path: strictly positive confidences
        let conf = random_tensor(&mut rng, NUM_LABELS, 3, 3).map(|v| v.abs() + 0.1);
        let eval = weighted_cross_entropy(&conf, &truth, &weights, false).unwrap();
        let numeric = finite_diff_gradient(&conf, 1e-6, |c| {
            weighted_cross_entropy(c, &truth, &weights, false).unwrap().loss
        });
        assert!(global_rel_error(&eval.gradient, &numeric) < 1e-6);

        // softmax path: raw scores
        let scores = random_tensor(&mut rng, NUM_LABELS, 3, 3);
        let eval = weighted_cross_entropy(&scores, &truth, &weights, true).unwrap();
        let numeric = finite_diff_gradient(&scores, 1e-6, |c| {
            weighted_cross_entropy(c, &truth, &weights, true).unwrap().loss
        });
        assert!(global_rel_error(&eval.gradient, &numeric) < 1e-6);
    }

    #[test]
    fn symmetrize_single_channel_row() {
        let conf = Tensor::from_vec(1, 1, 2, vec![1.0, 3.0]).unwrap();
        let out = symmetrize_confidence(&conf);
        assert_eq!(out.data(), &[2.0, 2.0]);
    }

    #[test]
    fn symmetrize_fixed_point_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conf = random_tensor(&mut rng, NUM_LABELS, 4, 5);
        let once = symmetrize_confidence(&conf);
        let twice = symmetrize_confidence(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // output is exactly mirror-symmetric under (mirror, class swap)
        let (k, h, w) = once.shape();
        let mirror_class = |c: usize| {
            MIRROR_PAIRS
                .iter()
                .find_map(|&(a, b)| {
                    if c == a {
                        Some(b)
                    } else if c == b {
                        Some(a)
                    } else {
                        None
                    }
                })
                .unwrap_or(c)
        };
        for c in 0..k {
            for y in 0..h {
                for x in 0..w {
                    let v = once.at(c, y, x);
                    let m = once.at(mirror_class(c), y, w - 1 - x);
                    assert!((v - m).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn symmetrize_swaps_lateral_classes() {
        // a left-eye detection on the left half must mirror into a
        // right-eye detection on the right half
        let mut conf = Tensor::zeros(NUM_LABELS, 1, 4);
        *conf.at_mut(label::LEFT_EYE as usize, 0, 0) = 1.0;
        let out = symmetrize_confidence(&conf);
        assert!((out.at(label::LEFT_EYE as usize, 0, 0) - 0.5).abs() < 1e-15);
        assert!((out.at(label::RIGHT_EYE as usize, 0, 3) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn argmax_readout() {
        let mut conf = Tensor::zeros(NUM_LABELS, 1, 2);
        *conf.at_mut(5, 0, 0) = 1.0;
        // exact tie between labels 2 and 3 at pixel (0, 1)
        *conf.at_mut(2, 0, 1) = 0.7;
        *conf.at_mut(3, 0, 1) = 0.7;
        let labels = argmax_labels(&conf).unwrap();
        assert_eq!(labels.at(0, 0), 5);
        assert_eq!(labels.at(0, 1), 2);
    }

    #[test]
    fn argmax_matches_scripted_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conf = random_tensor(&mut rng, NUM_LABELS, 5, 7);
        let labels = argmax_labels(&conf).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                let expect = (0..NUM_LABELS)
                    .map(|c| (c, conf.at(c, y, x)))
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                    .unwrap()
                    .0;
                assert_eq!(labels.at(y, x) as usize, expect);
            }
        }
    }

    #[test]
    fn labels_to_mask_cases() {
        let labels = Labelmap::new(2, 3, vec![0, 7, 8, 1, 7, 2]).unwrap();
        let all: BTreeSet<u8> = (0..NUM_LABELS as u8).collect();
        assert_eq!(labels_to_mask(&labels, &all).unwrap().count(), 6);
        assert!(labels_to_mask(&labels, &BTreeSet::new()).unwrap().is_clear());

        let lips: BTreeSet<u8> = [7u8, 8].into_iter().collect();
        let mask = labels_to_mask(&labels, &lips).unwrap();
        assert_eq!(
            mask.data(),
            &[false, true, true, false, true, false]
        );

        let bad: BTreeSet<u8> = [42u8].into_iter().collect();
        assert!(labels_to_mask(&labels, &bad).is_err());
    }

    #[test]
    fn mask_union_distributes() {
        let labels = Labelmap::new(1, 6, vec![0, 1, 2, 7, 8, 10]).unwrap();
        let a: BTreeSet<u8> = [1u8, 7].into_iter().collect();
        let b: BTreeSet<u8> = [8u8, 10].into_iter().collect();
        let ab: BTreeSet<u8> = a.union(&b).copied().collect();
        let ma = labels_to_mask(&labels, &a).unwrap();
        let mb = labels_to_mask(&labels, &b).unwrap();
        let mab = labels_to_mask(&labels, &ab).unwrap();
        for i in 0..6 {
            assert_eq!(mab.data()[i], ma.data()[i] || mb.data()[i]);
        }
    }

    #[test]
    fn labelmap_rejects_out_of_range() {
        assert!(Labelmap::new(1, 1, vec![11]).is_err());
    }
}
