//! Numerical verification harness: central finite differences, a brute-force
//! receptive-field oracle for mask projection, and the self-check suite run
//! by the `selfcheck` CLI command. The checks here deliberately avoid the
//! analytic code paths they validate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::convnet::{LayerGeometry, NetworkSpec};
use crate::parsing::Mask;
use crate::tensor::Tensor;

/// Central finite-difference gradient of a scalar function of a tensor.
pub fn finite_diff_gradient(x: &Tensor, step: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let (c, h, w) = x.shape();
    let mut grad = Tensor::zeros(c, h, w);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Max elementwise deviation relative to the numeric gradient's largest
/// magnitude. Robust near zero entries where per-element ratios blow up.
pub fn global_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let scale = numeric.max_abs().max(1e-12);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Uniform random tensor in [-1, 1].
pub fn random_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor {
    let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(c, h, w, data).expect("shape matches generated length")
}

/// Brute-force mask projection oracle. Influence sets are enumerated
/// structurally, layer by layer, by composing per-layer index dependencies;
/// no receptive-field rectangle arithmetic is used.
pub fn brute_force_layer_mask(
    net: &NetworkSpec,
    layer: &str,
    mask: &Mask,
) -> Option<Vec<Vec<bool>>> {
    use crate::convnet::LayerKind;
    let (h, w) = (mask.height(), mask.width());
    // influence[u] = set of input pixels feeding unit u, as a boolean grid
    let mut influence: Vec<Vec<Vec<bool>>> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| {
            let mut g = vec![vec![false; w]; h];
            g[y][x] = true;
            g
        })
        .collect();
    let mut cur_h = h;
    let mut cur_w = w;
    for l in net.layers() {
        match &l.kind {
            LayerKind::Conv { weights, stride, pad, .. } => {
                let k = weights.kh() as isize;
                let oh = (cur_h + 2 * pad - weights.kh()) / stride + 1;
                let ow = (cur_w + 2 * pad - weights.kw()) / stride + 1;
                let mut next = Vec::with_capacity(oh * ow);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut g = vec![vec![false; w]; h];
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride) as isize + ky - *pad as isize;
                                let ix = (ox * stride) as isize + kx - *pad as isize;
                                if iy < 0 || ix < 0 || iy >= cur_h as isize || ix >= cur_w as isize
                                {
                                    continue;
                                }
                                let src = &influence[iy as usize * cur_w + ix as usize];
                                for (row, srow) in g.iter_mut().zip(src) {
                                    for (v, s) in row.iter_mut().zip(srow) {
                                        *v |= s;
                                    }
                                }
                            }
                        }
                        next.push(g);
                    }
                }
                influence = next;
                cur_h = oh;
                cur_w = ow;
            }
            LayerKind::Relu => {}
            LayerKind::MaxPool => {
                let oh = cur_h.div_ceil(2);
                let ow = cur_w.div_ceil(2);
                let mut next = Vec::with_capacity(oh * ow);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut g = vec![vec![false; w]; h];
                        for iy in [2 * oy, (2 * oy + 1).min(cur_h - 1)] {
                            for ix in [2 * ox, (2 * ox + 1).min(cur_w - 1)] {
                                let src = &influence[iy * cur_w + ix];
                                for (row, srow) in g.iter_mut().zip(src) {
                                    for (v, s) in row.iter_mut().zip(srow) {
                                        *v |= s;
                                    }
                                }
                            }
                        }
                        next.push(g);
                    }
                }
                influence = next;
                cur_h = oh;
                cur_w = ow;
            }
        }
        if l.name == layer {
            let mut out = vec![vec![false; cur_w]; cur_h];
            for oy in 0..cur_h {
                for ox in 0..cur_w {
                    let g = &influence[oy * cur_w + ox];
                    let mut on = 0usize;
                    let mut total = 0usize;
                    for y in 0..h {
                        for x in 0..w {
                            if g[y][x] {
                                total += 1;
                                if mask.at(y, x) {
                                    on += 1;
                                }
                            }
                        }
                    }
                    out[oy][ox] = total > 0 && 2 * on >= total;
                }
            }
            return Some(out);
        }
    }
    None
}

/// Geometry helper shared by tests: in-bounds receptive-field pixel count of
/// a layer unit (independent rectangle arithmetic).
pub fn field_bounds(g: &LayerGeometry, unit: usize, extent: usize) -> (usize, usize) {
    let lo = (g.offset + (unit * g.jump) as isize).max(0) as usize;
    let hi = ((g.offset + (unit * g.jump) as isize) + g.field as isize).min(extent as isize);
    (lo, hi.max(lo as isize) as usize)
}

// --- the self-check suite ---

/// Outcome of one named verification check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, run: impl FnOnce() -> std::result::Result<String, String>) -> CheckResult {
    match run() {
        Ok(detail) => CheckResult {
            name: name.to_string(),
            passed: true,
            detail,
        },
        Err(detail) => CheckResult {
            name: name.to_string(),
            passed: false,
            detail,
        },
    }
}

fn require(cond: bool, msg: impl Fn() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err_str<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Run the full verification suite against the given network (or a seeded
/// default fixture network). Each check is independent; all are evaluated.
pub fn run_all(net: Option<&NetworkSpec>) -> Vec<CheckResult> {
    use crate::convnet::{random_network, NetworkTemplate};

    let owned;
    let net = match net {
        Some(n) => n,
        None => {
            owned = random_network(&NetworkTemplate::tiny(3), 7)
                .expect("fixture network construction");
            &owned
        }
    };
    vec![
        check_objective_gradient(net),
        check_term_gradients(net),
        check_tps(),
        check_gram_properties(),
        check_mask_projection(net),
        check_self_transfer(net),
        check_descent(net),
        check_parsing_loss(),
        check_retrieval(),
        check_determinism(net),
    ]
}

fn fixture_objective<'a>(
    net: &'a NetworkSpec,
    fx: &crate::fixtures::TransferFixture,
    tv_weight: f64,
) -> crate::error::Result<crate::losses::Objective<'a>> {
    use crate::losses::TransferConfig;
    use crate::optim::{build_region_masks, TransferInputs};
    let inputs = TransferInputs {
        labels_before: &fx.labels_before,
        labels_ref: &fx.labels_ref,
        landmarks_before: Some(&fx.landmarks_before),
        landmarks_ref: Some(&fx.landmarks_ref),
    };
    let cfg = TransferConfig {
        // thin fixture regions only project onto the first feature grid
        style_layers: vec!["conv1-1".into()],
        tv_weight,
        ..TransferConfig::default()
    };
    let masks = build_region_masks((fx.before.height(), fx.before.width()), &inputs, &cfg)?;
    crate::losses::Objective::new(net, &fx.before, &fx.reference, &masks, cfg)
}

fn check_objective_gradient(net: &NetworkSpec) -> CheckResult {
    check("objective-gradient", || {
        let fx = crate::fixtures::transfer_fixture(16, 16, 51);
        let objective = fixture_objective(net, &fx, 1.0).map_err(err_str)?;
        let a = crate::fixtures::smooth_image(52, 16, 16);
        let eval = objective.evaluate(&a).map_err(err_str)?;
        let numeric = finite_diff_gradient(&a, 1e-5, |x| {
            objective.evaluate(x).expect("objective evaluation").total
        });
        let rel = global_rel_error(&eval.gradient, &numeric);
        require(rel < 1e-4, || format!("relative error {rel:.3e} >= 1e-4"))?;
        Ok(format!("relative error {rel:.3e}"))
    })
}

fn check_term_gradients(_net: &NetworkSpec) -> CheckResult {
    check("term-gradients", || {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let img = random_tensor(&mut rng, 2, 6, 6).map(|v| (v + 1.0) / 2.0);
        let mut worst: f64 = 0.0;
        for beta in [1.5, 2.0] {
            let (_, analytic) = crate::losses::tv_loss(&img, beta).map_err(err_str)?;
            let numeric =
                finite_diff_gradient(&img, 1e-6, |x| crate::losses::tv_loss(x, beta).unwrap().0);
            worst = worst.max(global_rel_error(&analytic, &numeric));
        }
        require(worst < 1e-5, || {
            format!("tv relative error {worst:.3e} >= 1e-5")
        })?;
        Ok(format!("worst tv relative error {worst:.3e}"))
    })
}

fn check_tps() -> CheckResult {
    check("thin-plate-warp", || {
        use crate::warp::{tps_apply, tps_fit, LandmarkSet, Point};
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let mut pts = |spread: f64| -> std::result::Result<LandmarkSet, String> {
            let pairs: Vec<[f64; 2]> = (0..crate::warp::LANDMARK_COUNT)
                .map(|i| {
                    [
                        (i % 4) as f64 * 3.0 + rng.gen_range(-spread..spread),
                        (i / 4) as f64 * 3.0 + rng.gen_range(-spread..spread),
                    ]
                })
                .collect();
            LandmarkSet::from_pairs(&pairs).map_err(err_str)
        };
        let src = pts(0.5)?;
        let dst = pts(0.8)?;
        let warp = tps_fit(&src, &dst, 0.0).map_err(err_str)?;
        let mut worst: f64 = 0.0;
        for (s, d) in src.points().iter().zip(dst.points()) {
            let got = tps_apply(&warp, Point::new(s.x, s.y));
            worst = worst.max((got.x - d.x).hypot(got.y - d.y));
        }
        require(worst < 1e-8, || {
            format!("interpolation residual {worst:.3e} >= 1e-8")
        })?;
        // an affine target map needs no radial part
        let affine_dst: Vec<[f64; 2]> = src
            .points()
            .iter()
            .map(|p| [1.2 * p.x - 0.3 * p.y + 2.0, 0.4 * p.x + 0.9 * p.y - 1.0])
            .collect();
        let dst = LandmarkSet::from_pairs(&affine_dst).map_err(err_str)?;
        let warp = tps_fit(&src, &dst, 0.0).map_err(err_str)?;
        let radial = warp
            .radial()
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        require(radial < 1e-6, || {
            format!("radial weight {radial:.3e} >= 1e-6 on affine map")
        })?;
        Ok(format!(
            "residual {worst:.3e}, affine radial weight {radial:.3e}"
        ))
    })
}

fn check_gram_properties() -> CheckResult {
    check("gram-properties", || {
        use crate::losses::{gram, LayerMask};
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let f = random_tensor(&mut rng, 4, 5, 5);
        let lm = LayerMask::full("l", 5, 5);
        let g = gram(&f, &lm).map_err(err_str)?;
        let n = g.size();
        for i in 0..n {
            for j in 0..n {
                require((g.at(i, j) - g.at(j, i)).abs() < 1e-12, || {
                    format!("asymmetry at ({i},{j})")
                })?;
            }
        }
        // positive semidefinite: v' G v >= 0 for random v
        for _ in 0..20 {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut q = 0.0;
            for i in 0..n {
                for j in 0..n {
                    q += v[i] * g.at(i, j) * v[j];
                }
            }
            require(q >= -1e-12, || format!("negative quadratic form {q:.3e}"))?;
        }
        Ok("symmetric and positive semidefinite".to_string())
    })
}

fn check_mask_projection(net: &NetworkSpec) -> CheckResult {
    check("mask-projection", || {
        let img = Tensor::zeros(net.input_channels(), 8, 8);
        let stack = net.forward_all(&img).map_err(err_str)?;
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let layer_names: Vec<String> = net.layers().iter().map(|l| l.name.clone()).collect();
        let mut compared = 0usize;
        for _ in 0..8 {
            let data: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.5)).collect();
            let mask = Mask::new(8, 8, data).map_err(err_str)?;
            for layer in &layer_names {
                let lm = crate::losses::project_mask(&mask, layer, &stack).map_err(err_str)?;
                let oracle = brute_force_layer_mask(net, layer, &mask)
                    .ok_or_else(|| format!("layer '{layer}' missing from oracle"))?;
                for y in 0..lm.height() {
                    for x in 0..lm.width() {
                        require(lm.at(y, x) == oracle[y][x], || {
                            format!("mismatch at layer '{layer}' unit ({y},{x})")
                        })?;
                        compared += 1;
                    }
                }
            }
        }
        Ok(format!("{compared} units matched the brute-force oracle"))
    })
}

fn check_self_transfer(net: &NetworkSpec) -> CheckResult {
    check("self-transfer-fixed-point", || {
        let fx = crate::fixtures::transfer_fixture(16, 16, 57);
        let mut self_fx = fx;
        self_fx.reference = self_fx.before.clone();
        self_fx.labels_before = self_fx.labels_ref.clone();
        let objective = fixture_objective(net, &self_fx, 0.0).map_err(err_str)?;
        let eval = objective.evaluate(&self_fx.before).map_err(err_str)?;
        require(eval.total.abs() < 1e-9, || {
            format!("loss {:.3e} at the fixed point", eval.total)
        })?;
        require(eval.gradient.max_abs() < 1e-9, || {
            format!("gradient {:.3e} at the fixed point", eval.gradient.max_abs())
        })?;
        Ok(format!(
            "loss {:.3e}, gradient {:.3e}",
            eval.total,
            eval.gradient.max_abs()
        ))
    })
}

fn check_descent(net: &NetworkSpec) -> CheckResult {
    check("descent", || {
        use crate::losses::TransferConfig;
        use crate::optim::{run_transfer, TransferInputs};
        let fx = crate::fixtures::transfer_fixture(24, 24, 58);
        let inputs = TransferInputs {
            labels_before: &fx.labels_before,
            labels_ref: &fx.labels_ref,
            landmarks_before: Some(&fx.landmarks_before),
            landmarks_ref: Some(&fx.landmarks_ref),
        };
        let cfg = TransferConfig {
            style_layers: vec!["conv1-1".into()],
            iterations: 40,
            learning_rate: 0.02,
            ..TransferConfig::default()
        };
        let outcome =
            run_transfer(net, &fx.before, &fx.reference, &inputs, &cfg).map_err(err_str)?;
        let first = outcome.trace.rows.first().map(|r| r.total).unwrap_or(0.0);
        let last = outcome.trace.rows.last().map(|r| r.total).unwrap_or(0.0);
        require(last < first, || {
            format!("loss did not decrease ({first:.6e} -> {last:.6e})")
        })?;
        Ok(format!("loss {first:.6e} -> {last:.6e} over 40 steps"))
    })
}

fn check_parsing_loss() -> CheckResult {
    check("parsing-loss", || {
        use crate::parsing::{
            symmetrize_confidence, weighted_cross_entropy, LabelWeights, Labelmap,
        };
        // two pixels at probability 1/2 under unit weights: loss = 2 ln 2
        let conf = Tensor::from_vec(2, 1, 2, vec![0.5, 0.5, 0.5, 0.5]).map_err(err_str)?;
        let truth = Labelmap::new(1, 2, vec![0, 1]).map_err(err_str)?;
        let eval = weighted_cross_entropy(&conf, &truth, &LabelWeights::uniform(), false)
            .map_err(err_str)?;
        let expect = 2.0 * std::f64::consts::LN_2;
        require((eval.loss - expect).abs() < 1e-12, || {
            format!("loss {} != 2 ln 2", eval.loss)
        })?;
        // symmetrizing is idempotent
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let conf = random_tensor(&mut rng, crate::parsing::NUM_LABELS, 4, 5)
            .map(|v| (v + 1.5) / 4.0);
        let once = symmetrize_confidence(&conf);
        let twice = symmetrize_confidence(&once);
        let drift = once
            .data()
            .iter()
            .zip(twice.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        require(drift < 1e-12, || format!("symmetrize drift {drift:.3e}"))?;
        Ok("hand value and idempotence hold".to_string())
    })
}

fn check_retrieval() -> CheckResult {
    check("retrieval", || {
        use crate::recommend::{knn_query, Embedding, EmbeddingIndex};
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let entries: Vec<Embedding> = (0..200)
            .map(|i| Embedding {
                id: format!("face-{i:03}"),
                vector: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect();
        let index = EmbeddingIndex::new(entries.clone()).map_err(err_str)?;
        let query: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = knn_query(&index, &query, 5).map_err(err_str)?;
        // oracle: full sort of (distance, id)
        let mut oracle: Vec<(f64, String)> = entries
            .iter()
            .map(|e| {
                let d = e
                    .vector
                    .iter()
                    .zip(&query)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                (d, e.id.clone())
            })
            .collect();
        oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        for (i, (id, d)) in got.iter().enumerate() {
            require(*id == oracle[i].1 && (d - oracle[i].0).abs() < 1e-12, || {
                format!("rank {i}: got {id}, oracle {}", oracle[i].1)
            })?;
        }
        Ok("top-5 matches the sort oracle".to_string())
    })
}

fn check_determinism(net: &NetworkSpec) -> CheckResult {
    check("determinism", || {
        use crate::losses::TransferConfig;
        use crate::optim::{run_transfer, TransferInputs};
        let fx = crate::fixtures::transfer_fixture(16, 16, 61);
        let inputs = TransferInputs {
            labels_before: &fx.labels_before,
            labels_ref: &fx.labels_ref,
            landmarks_before: Some(&fx.landmarks_before),
            landmarks_ref: Some(&fx.landmarks_ref),
        };
        let cfg = TransferConfig {
            style_layers: vec!["conv1-1".into()],
            iterations: 10,
            learning_rate: 0.02,
            ..TransferConfig::default()
        };
        let a = run_transfer(net, &fx.before, &fx.reference, &inputs, &cfg).map_err(err_str)?;
        let b = run_transfer(net, &fx.before, &fx.reference, &inputs, &cfg).map_err(err_str)?;
        require(a.image.data() == b.image.data(), || {
            "repeated runs differ".to_string()
        })?;
        Ok("repeated runs are bit-identical".to_string())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_suite_passes_on_the_fixture_network() {
        let results = run_all(None);
        assert_eq!(results.len(), 10);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
