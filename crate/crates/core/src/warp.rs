//! Thin-plate-spline fitting on the 8 eye-region landmarks and warping of
//! eye-shadow masks into before-face coordinates.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parsing::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist2(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

pub const LANDMARK_COUNT: usize = 8;

/// Eight ordered eye-region landmarks: {inner, upper-middle, lower-middle,
/// outer} of the eye followed by the same four of the eyebrow.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: [Point; LANDMARK_COUNT],
}

impl LandmarkSet {
    pub fn new(points: [Point; LANDMARK_COUNT]) -> Result<Self> {
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Argument("non-finite landmark coordinate".into()));
        }
        // reject fully collinear layouts: every TPS fit through them is singular
        let (a, b) = (points[0], points[1]);
        let max_area = points
            .iter()
            .map(|p| ((b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)).abs())
            .fold(0.0, f64::max);
        if max_area < 1e-9 {
            return Err(Error::Argument("landmarks are collinear".into()));
        }
        Ok(LandmarkSet { points })
    }

    pub fn from_pairs(pairs: &[[f64; 2]]) -> Result<Self> {
        if pairs.len() != LANDMARK_COUNT {
            return Err(Error::Argument(format!(
                "expected {LANDMARK_COUNT} landmarks, got {}",
                pairs.len()
            )));
        }
        let mut points = [Point::new(0.0, 0.0); LANDMARK_COUNT];
        for (p, pair) in points.iter_mut().zip(pairs) {
            *p = Point::new(pair[0], pair[1]);
        }
        LandmarkSet::new(points)
    }

    pub fn points(&self) -> &[Point; LANDMARK_COUNT] {
        &self.points
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.points
            .iter()
            .all(|p| p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut points = self.points;
        for p in &mut points {
            p.x += dx;
            p.y += dy;
        }
        LandmarkSet { points }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut points = self.points;
        for p in &mut points {
            p.x *= s;
            p.y *= s;
        }
        LandmarkSet { points }
    }
}

/// Fitted thin-plate-spline warp: affine part plus radial terms with kernel
/// U(r) = r^2 log r^2 (U(0) = 0) centered on the source control points.
#[derive(Debug, Clone)]
pub struct TpsWarp {
    /// Row-per-output-coordinate affine map: out = A * [x, y, 1].
    affine: [[f64; 3]; 2],
    /// Radial coefficients, one (wx, wy) pair per control point.
    radial: Vec<[f64; 2]>,
    control: Vec<Point>,
}

#[inline]
fn tps_kernel(d2: f64) -> f64 {
    if d2 > 0.0 {
        d2 * d2.ln()
    } else {
        0.0
    }
}

/// Default Tikhonov weight for near-degenerate landmark layouts:
/// 1e-6 times the mean squared distance between source landmark pairs.
pub fn default_regularization(src: &LandmarkSet) -> f64 {
    let pts = src.points();
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            sum += pts[i].dist2(&pts[j]);
            n += 1;
        }
    }
    1e-6 * sum / n.max(1) as f64
}

/// Fit a TPS mapping every `src` landmark (reg = 0: exactly) onto its `dst`
/// counterpart.
pub fn tps_fit(src: &LandmarkSet, dst: &LandmarkSet, reg: f64) -> Result<TpsWarp> {
    if reg < 0.0 || !reg.is_finite() {
        return Err(Error::Argument("regularization must be >= 0".into()));
    }
    let n = LANDMARK_COUNT;
    let sp = src.points();
    let dp = dst.points();
    let dim = n + 3;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DMatrix::<f64>::zeros(dim, 2);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = tps_kernel(sp[i].dist2(&sp[j]));
        }
        a[(i, i)] += reg;
        a[(i, n)] = 1.0;
        a[(i, n + 1)] = sp[i].x;
        a[(i, n + 2)] = sp[i].y;
        a[(n, i)] = 1.0;
        a[(n + 1, i)] = sp[i].x;
        a[(n + 2, i)] = sp[i].y;
        rhs[(i, 0)] = dp[i].x;
        rhs[(i, 1)] = dp[i].y;
    }
    let lu = a.full_piv_lu();
    let sol = lu.solve(&rhs).ok_or_else(|| {
        Error::Numeric("singular TPS system; retry with regularization > 0".into())
    })?;
    let mut radial = Vec::with_capacity(n);
    for i in 0..n {
        radial.push([sol[(i, 0)], sol[(i, 1)]]);
    }
    let affine = [
        [sol[(n + 1, 0)], sol[(n + 2, 0)], sol[(n, 0)]],
        [sol[(n + 1, 1)], sol[(n + 2, 1)], sol[(n, 1)]],
    ];
    Ok(TpsWarp {
        affine,
        radial,
        control: sp.to_vec(),
    })
}

impl TpsWarp {
    pub fn affine(&self) -> &[[f64; 3]; 2] {
        &self.affine
    }

    pub fn radial(&self) -> &[[f64; 2]] {
        &self.radial
    }

    /// Max violation of the TPS side conditions
    /// (sum w = 0, sum w*x = 0, sum w*y = 0), per output coordinate.
    pub fn side_condition_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..2 {
            let s0: f64 = self.radial.iter().map(|w| w[k]).sum();
            let sx: f64 = self
                .radial
                .iter()
                .zip(&self.control)
                .map(|(w, p)| w[k] * p.x)
                .sum();
            let sy: f64 = self
                .radial
                .iter()
                .zip(&self.control)
                .map(|(w, p)| w[k] * p.y)
                .sum();
            worst = worst.max(s0.abs()).max(sx.abs()).max(sy.abs());
        }
        worst
    }
}

/// Evaluate the warp at a point: affine(p) + sum_i w_i U(||p - src_i||).
pub fn tps_apply(warp: &TpsWarp, p: Point) -> Point {
    let mut x = warp.affine[0][0] * p.x + warp.affine[0][1] * p.y + warp.affine[0][2];
    let mut y = warp.affine[1][0] * p.x + warp.affine[1][1] * p.y + warp.affine[1][2];
    for (w, c) in warp.radial.iter().zip(&warp.control) {
        let u = tps_kernel(p.dist2(c));
        x += w[0] * u;
        y += w[1] * u;
    }
    Point::new(x, y)
}

/// Outcome of a mask warp; `empty_input` flags the degenerate all-false case.
#[derive(Debug, Clone)]
pub struct WarpedMask {
    pub mask: Mask,
    pub empty_input: bool,
}

/// Rasterize a warped mask by inverse mapping: `inverse` must map output
/// coordinates to source coordinates (a TPS fitted with src/dst exchanged).
/// Output pixel q is true iff the inverse-mapped point rounds onto a true
/// source pixel.
pub fn warp_mask(
    inverse: &TpsWarp,
    mask: &Mask,
    out_height: usize,
    out_width: usize,
) -> WarpedMask {
    let empty_input = mask.is_clear();
    let mut out = Mask::filled(out_height, out_width, false);
    if !empty_input {
        for y in 0..out_height {
            for x in 0..out_width {
                let src = tps_apply(inverse, Point::new(x as f64, y as f64));
                let sx = src.x.round();
                let sy = src.y.round();
                if sx >= 0.0
                    && sy >= 0.0
                    && (sx as usize) < mask.width()
                    && (sy as usize) < mask.height()
                    && mask.at(sy as usize, sx as usize)
                {
                    out.set(y, x, true);
                }
            }
        }
    }
    WarpedMask {
        mask: out,
        empty_input,
    }
}

/// Carry the reference eye-shadow mask into before-face coordinates: the
/// inverse map (before -> reference) is fitted directly by exchanging the
/// landmark roles.
pub fn eye_shadow_mask_for_before(
    ref_mask: &Mask,
    ref_landmarks: &LandmarkSet,
    before_landmarks: &LandmarkSet,
    before_height: usize,
    before_width: usize,
) -> Result<WarpedMask> {
    let reg = default_regularization(before_landmarks);
    let inverse = tps_fit(before_landmarks, ref_landmarks, reg)?;
    Ok(warp_mask(&inverse, ref_mask, before_height, before_width))
}

// --- landmark file format ---
//
// JSON document with one 8-point list per eye region:
// {"left_eye_region": [[x, y], ...8], "right_eye_region": [[x, y], ...8]}
// Pixel units, origin top-left, listed eye {inner, upper-middle,
// lower-middle, outer} then eyebrow in the same order.

#[derive(Serialize, Deserialize)]
struct LandmarkFile {
    left_eye_region: Vec<[f64; 2]>,
    right_eye_region: Vec<[f64; 2]>,
}

/// Both eye-region landmark sets for one face.
#[derive(Debug, Clone)]
pub struct FaceLandmarks {
    pub left: LandmarkSet,
    pub right: LandmarkSet,
}

pub fn load_landmarks(path: &Path) -> Result<FaceLandmarks> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: LandmarkFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let side = |pairs: &[[f64; 2]], name: &str| {
        LandmarkSet::from_pairs(pairs).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: format!("{name}: {e}"),
        })
    };
    Ok(FaceLandmarks {
        left: side(&file.left_eye_region, "left_eye_region")?,
        right: side(&file.right_eye_region, "right_eye_region")?,
    })
}

pub fn save_landmarks(landmarks: &FaceLandmarks, path: &Path) -> Result<()> {
    let as_pairs = |set: &LandmarkSet| set.points().iter().map(|p| [p.x, p.y]).collect();
    let file = LandmarkFile {
        left_eye_region: as_pairs(&landmarks.left),
        right_eye_region: as_pairs(&landmarks.right),
    };
    let text =
        serde_json::to_string_pretty(&file).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
