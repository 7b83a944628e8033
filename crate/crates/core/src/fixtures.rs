//! Deterministic desk-scale fixtures shared by the self-check command and
//! the test suites: a synthetic frontal-face labelmap, matching eye-region
//! landmarks, and smooth seeded image pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::parsing::{label, Labelmap};
use crate::tensor::Tensor;
use crate::warp::{FaceLandmarks, LandmarkSet};

/// Scaled coordinate helper: fraction of `extent`, clamped to a pixel.
fn frac(extent: usize, num: usize, den: usize) -> usize {
    (extent * num / den).min(extent - 1)
}

/// Synthetic frontal-face labelmap. With `with_eye_shadow` the lids above
/// the eyes carry the L/R eye-shadow labels (reference faces only).
pub fn face_labelmap(height: usize, width: usize, with_eye_shadow: bool) -> Labelmap {
    let mut data = vec![label::BACKGROUND; height * width];
    let mut fill = |y0: usize, y1: usize, x0: usize, x1: usize, id: u8| {
        for y in y0..y1 {
            for x in x0..x1 {
                data[y * width + x] = id;
            }
        }
    };
    // face oval approximated by a rectangle
    fill(
        frac(height, 1, 8),
        frac(height, 15, 16),
        frac(width, 3, 16),
        frac(width, 13, 16),
        label::FACE,
    );
    let brow_y = (frac(height, 2, 16), frac(height, 3, 16));
    let shadow_y = (frac(height, 3, 16), frac(height, 5, 16));
    let eye_y = (frac(height, 5, 16), frac(height, 7, 16));
    let lx = (frac(width, 4, 16), frac(width, 7, 16));
    let rx = (frac(width, 9, 16), frac(width, 12, 16));
    fill(brow_y.0, brow_y.1, lx.0, lx.1, label::LEFT_EYEBROW);
    fill(brow_y.0, brow_y.1, rx.0, rx.1, label::RIGHT_EYEBROW);
    fill(eye_y.0, eye_y.1, lx.0, lx.1, label::LEFT_EYE);
    fill(eye_y.0, eye_y.1, rx.0, rx.1, label::RIGHT_EYE);
    if with_eye_shadow {
        fill(shadow_y.0, shadow_y.1, lx.0, lx.1, label::LEFT_EYE_SHADOW);
        fill(shadow_y.0, shadow_y.1, rx.0, rx.1, label::RIGHT_EYE_SHADOW);
    }
    fill(
        frac(height, 10, 16),
        frac(height, 12, 16),
        frac(width, 6, 16),
        frac(width, 10, 16),
        label::UPPER_LIP,
    );
    fill(
        frac(height, 12, 16),
        frac(height, 13, 16),
        frac(width, 6, 16),
        frac(width, 10, 16),
        label::INNER_MOUTH,
    );
    fill(
        frac(height, 13, 16),
        frac(height, 15, 16),
        frac(width, 6, 16),
        frac(width, 10, 16),
        label::LOWER_LIP,
    );
    Labelmap::new(height, width, data).expect("fixture labels are in range")
}

fn eye_region_landmarks(height: usize, width: usize, left: bool) -> LandmarkSet {
    let (x0, x1) = if left {
        (frac(width, 4, 16) as f64, frac(width, 7, 16) as f64)
    } else {
        (frac(width, 9, 16) as f64, frac(width, 12, 16) as f64)
    };
    let eye_mid = (frac(height, 5, 16) + frac(height, 7, 16)) as f64 / 2.0;
    let brow_mid = (frac(height, 2, 16) + frac(height, 3, 16)) as f64 / 2.0;
    let mid_x = (x0 + x1) / 2.0;
    LandmarkSet::from_pairs(&[
        // eye: inner, upper-middle, lower-middle, outer
        [x1, eye_mid],
        [mid_x, eye_mid - 1.0],
        [mid_x, eye_mid + 1.0],
        [x0, eye_mid],
        // eyebrow in the same order
        [x1, brow_mid],
        [mid_x, brow_mid - 1.0],
        [mid_x, brow_mid + 1.0],
        [x0, brow_mid],
    ])
    .expect("fixture landmarks are valid")
}

pub fn face_landmarks(height: usize, width: usize) -> FaceLandmarks {
    FaceLandmarks {
        left: eye_region_landmarks(height, width, true),
        right: eye_region_landmarks(height, width, false),
    }
}

/// Smooth random RGB image in [0.05, 0.95]: coarse seeded noise, bilinearly
/// upsampled so finite-difference probes stay away from relu kinks.
pub fn smooth_image(seed: u64, height: usize, width: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gh = (height / 4).max(2);
    let gw = (width / 4).max(2);
    let grid: Vec<f64> = (0..3 * gh * gw)
        .map(|_| rng.gen_range(0.05..0.95))
        .collect();
    let mut img = Tensor::zeros(3, height, width);
    for c in 0..3 {
        for y in 0..height {
            for x in 0..width {
                let gy = y as f64 / (height - 1).max(1) as f64 * (gh - 1) as f64;
                let gx = x as f64 / (width - 1).max(1) as f64 * (gw - 1) as f64;
                let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
                let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
                let g = |yy: usize, xx: usize| grid[(c * gh + yy) * gw + xx];
                let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
                let bot = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
                *img.at_mut(c, y, x) = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    img
}

/// A complete before/reference input pair for transfer runs.
pub struct TransferFixture {
    pub before: Tensor,
    pub reference: Tensor,
    pub labels_before: Labelmap,
    pub labels_ref: Labelmap,
    pub landmarks_before: FaceLandmarks,
    pub landmarks_ref: FaceLandmarks,
}

pub fn transfer_fixture(height: usize, width: usize, seed: u64) -> TransferFixture {
    TransferFixture {
        before: smooth_image(seed, height, width),
        reference: smooth_image(seed.wrapping_add(1), height, width),
        labels_before: face_labelmap(height, width, false),
        labels_ref: face_labelmap(height, width, true),
        landmarks_before: face_landmarks(height, width),
        landmarks_ref: face_landmarks(height, width),
    }
}
