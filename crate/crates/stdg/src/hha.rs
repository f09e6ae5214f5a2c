//! HHA re-encoding of depth maps: horizontal disparity, height above
//! ground and the angle each surface normal makes with the inferred
//! gravity direction.
//!
//! Camera convention throughout: +X right, +Y down, +Z forward (optical
//! axis); image row v grows with +Y. Under a level camera the gravity
//! ("down") direction is therefore +Y. The camera model is the simplified
//! one used for datasets without calibration: principal point at the image
//! center, fixed focal length (default `max(W, H)` pixels, about a 53
//! degree field of view).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraModel {
    /// Principal point at the pixel-grid center, focal length `max(W, H)`.
    pub fn default_for(width: usize, height: usize) -> Self {
        CameraModel {
            focal_px: width.max(height) as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.focal_px <= 0.0 || !self.focal_px.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "focal length must be positive, got {}",
                self.focal_px
            )));
        }
        Ok(())
    }
}

/// How raw depth values map to metric depth along the optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthMode {
    /// Values are depth in scene units already.
    Metric,
    /// Values are proportional to 1/z (monocular-estimator style); they are
    /// affinely normalized onto a disparity range and inverted.
    InverseRelative,
}

#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Metric depth; nonpositive or non-finite entries are marked invalid.
    pub fn from_metric(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "depth buffer length {} does not match {width}x{height}",
                values.len()
            )));
        }
        let valid = values.iter().map(|&z| z.is_finite() && z > 0.0).collect();
        Ok(DepthMap {
            width,
            height,
            values,
            valid,
        })
    }

    /// Relative inverse depth: affinely map the finite value range onto
    /// disparities `[1/z_far, 1/z_near]` and take reciprocals.
    pub fn from_inverse_relative(
        width: usize,
        height: usize,
        values: Vec<f64>,
        z_near: f64,
        z_far: f64,
    ) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "depth buffer length {} does not match {width}x{height}",
                values.len()
            )));
        }
        if !(z_near > 0.0 && z_far > z_near) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < z_near < z_far, got {z_near}, {z_far}"
            )));
        }
        let finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return Err(Error::Data("inverse-relative depth map has no finite values".into()));
        }
        let vmin = finite.iter().cloned().fold(f64::INFINITY, f64::min);
        let vmax = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (d_lo, d_hi) = (1.0 / z_far, 1.0 / z_near);
        let span = vmax - vmin;
        let mut out = Vec::with_capacity(values.len());
        let mut valid = Vec::with_capacity(values.len());
        for v in &values {
            if !v.is_finite() {
                out.push(0.0);
                valid.push(false);
                continue;
            }
            let disp = if span <= 0.0 {
                0.5 * (d_lo + d_hi)
            } else {
                d_lo + (v - vmin) / span * (d_hi - d_lo)
            };
            out.push(1.0 / disp);
            valid.push(true);
        }
        Ok(DepthMap {
            width,
            height,
            values: out,
            valid,
        })
    }

    #[inline]
    pub fn at(&self, v: usize, u: usize) -> f64 {
        self.values[v * self.width + u]
    }

    #[inline]
    pub fn is_valid(&self, v: usize, u: usize) -> bool {
        self.valid[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Rank-2 tensor of raw depth values (invalid pixels keep their entry).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.height, self.width], self.values.clone()).expect("sized")
    }

    pub fn from_tensor(t: &Tensor, mode: DepthMode, z_near: f64, z_far: f64) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "depth tensor must be rank 2, got {:?}",
                t.shape()
            )));
        }
        let (h, w) = (t.shape()[0], t.shape()[1]);
        match mode {
            DepthMode::Metric => DepthMap::from_metric(w, h, t.data().to_vec()),
            DepthMode::InverseRelative => {
                DepthMap::from_inverse_relative(w, h, t.data().to_vec(), z_near, z_far)
            }
        }
    }
}

/// Back-projected points, one per pixel, in camera coordinates.
#[derive(Debug, Clone)]
pub struct PointCloud {
    /// `[3, H, W]`: X, Y, Z planes.
    pub points: Tensor,
    pub valid: Vec<bool>,
    /// Pixels that claimed validity but had a nonpositive depth.
    pub invalidated: usize,
}

/// X = (u - cx) z / f, Y = (v - cy) z / f, Z = z.
pub fn backproject(depth: &DepthMap, cam: &CameraModel) -> Result<PointCloud> {
    cam.validate()?;
    let (w, h) = (depth.width, depth.height);
    let mut points = Tensor::zeros(&[3, h, w]);
    let mut valid = vec![false; h * w];
    let mut invalidated = 0usize;
    for v in 0..h {
        for u in 0..w {
            if !depth.is_valid(v, u) {
                continue;
            }
            let z = depth.at(v, u);
            if !(z > 0.0) || !z.is_finite() {
                invalidated += 1;
                continue;
            }
            points.set3(0, v, u, (u as f64 - cam.cx) * z / cam.focal_px);
            points.set3(1, v, u, (v as f64 - cam.cy) * z / cam.focal_px);
            points.set3(2, v, u, z);
            valid[v * w + u] = true;
        }
    }
    Ok(PointCloud {
        points,
        valid,
        invalidated,
    })
}

/// Unit surface normals, oriented toward the camera (nonpositive Z).
#[derive(Debug, Clone)]
pub struct NormalMap {
    /// `[3, H, W]`.
    pub normals: Tensor,
    pub valid: Vec<bool>,
}

impl NormalMap {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }
}

/// Controls for the plane-fit normal estimator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormalParams {
    /// Odd window side, >= 3.
    pub window: usize,
    /// Neighbors whose depth differs from the center by more than
    /// `max(rel * z_center, abs)` are excluded so fits do not straddle
    /// depth discontinuities.
    pub depth_gate_rel: f64,
    pub depth_gate_abs: f64,
}

impl Default for NormalParams {
    fn default() -> Self {
        // The gate is purely relative by default so the angle channel is
        // invariant to global depth rescaling.
        NormalParams {
            window: 5,
            depth_gate_rel: 0.5,
            depth_gate_abs: 0.0,
        }
    }
}

/// A fit is usable only when the in-plane spread clearly dominates the
/// numeric noise floor; below this eigenvalue ratio the neighborhood is
/// treated as collinear/degenerate and the pixel invalidated.
const PLANE_CONDITION_RATIO: f64 = 1e-6;

/// Per-pixel total-least-squares plane fit over the valid in-window
/// neighbors (center included). Pixels with fewer than 3 usable points or
/// a collinear neighborhood are invalidated.
pub fn estimate_normals(cloud: &PointCloud, params: &NormalParams) -> Result<NormalMap> {
    if params.window < 3 || params.window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "normal window must be odd and >= 3, got {}",
            params.window
        )));
    }
    let h = cloud.points.shape()[1];
    let w = cloud.points.shape()[2];
    let half = (params.window / 2) as isize;
    let mut normals = Tensor::zeros(&[3, h, w]);
    let mut valid = vec![false; h * w];

    for v in 0..h {
        for u in 0..w {
            if !cloud.valid[v * w + u] {
                continue;
            }
            let zc = cloud.points.at3(2, v, u);
            let gate = (params.depth_gate_rel * zc).max(params.depth_gate_abs);
            let mut pts: Vec<Vector3<f64>> = Vec::with_capacity(params.window * params.window);
            for dv in -half..=half {
                for du in -half..=half {
                    let (nv, nu) = (v as isize + dv, u as isize + du);
                    if nv < 0 || nu < 0 || nv >= h as isize || nu >= w as isize {
                        continue;
                    }
                    let (nv, nu) = (nv as usize, nu as usize);
                    if !cloud.valid[nv * w + nu] {
                        continue;
                    }
                    if (cloud.points.at3(2, nv, nu) - zc).abs() > gate {
                        continue;
                    }
                    pts.push(Vector3::new(
                        cloud.points.at3(0, nv, nu),
                        cloud.points.at3(1, nv, nu),
                        cloud.points.at3(2, nv, nu),
                    ));
                }
            }
            if pts.len() < 3 {
                continue;
            }
            let centroid = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
            let mut cov = Matrix3::<f64>::zeros();
            for p in &pts {
                let d = p - centroid;
                cov += d * d.transpose();
            }
            let eig = cov.symmetric_eigen();
            let (i_min, i_mid, i_max) = order3(&[
                eig.eigenvalues[0],
                eig.eigenvalues[1],
                eig.eigenvalues[2],
            ]);
            let lam = &eig.eigenvalues;
            // Collinear or near-degenerate neighborhood: no reliable plane.
            if lam[i_mid] <= PLANE_CONDITION_RATIO * lam[i_max].max(1e-300) {
                continue;
            }
            let mut n = eig.eigenvectors.column(i_min).into_owned();
            let norm = n.norm();
            if !(norm > 0.0) {
                continue;
            }
            n /= norm;
            // Orient toward the camera.
            if n.z > 0.0 || (n.z == 0.0 && (n.y > 0.0 || (n.y == 0.0 && n.x > 0.0))) {
                n = -n;
            }
            normals.set3(0, v, u, n.x);
            normals.set3(1, v, u, n.y);
            normals.set3(2, v, u, n.z);
            valid[v * w + u] = true;
        }
    }
    Ok(NormalMap { normals, valid })
}

fn order3(vals: &[f64; 3]) -> (usize, usize, usize) {
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
    (idx[0], idx[1], idx[2])
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GravityEstimate {
    /// Unit vector pointing down, camera coordinates.
    pub down: [f64; 3],
    /// Angle between the last two refinement iterates, degrees.
    pub residual_deg: f64,
    /// Set when an iteration had no usable normals, or the final
    /// parallel/perpendicular split captures too few normals or aligns
    /// weakly (no structure to lock onto).
    pub low_confidence: bool,
    /// Mean set-consistency score in [0, 1] over the captured normals.
    pub alignment: f64,
    /// Fraction of normals the final split captures.
    pub inlier_fraction: f64,
}

/// Default refinement schedule: a coarse stage at 45 degrees then a tight
/// one at 15, five iterations each.
pub const DEFAULT_GRAVITY_STAGES: [(f64, usize); 2] = [(45.0, 5), (15.0, 5)];

const MIN_VALID_NORMALS: usize = 100;
const ALIGNMENT_CONFIDENCE_THRESHOLD: f64 = 0.95;
const INLIER_CONFIDENCE_THRESHOLD: f64 = 0.5;

/// Iterative gravity refinement from the statistics of surface normals.
///
/// Starting from straight down (+Y), each iteration splits normals into a
/// near-parallel set (within the stage threshold of the +-g line) and a
/// near-perpendicular set (within the threshold of 90 degrees), then picks
/// the new g as the smallest-eigenvalue eigenvector of
/// `N_perp - N_par`, where `N_set = sum n n^T`. When the smallest
/// eigenvalue is degenerate the update projects the previous estimate onto
/// the minimizing eigenspace, so ambiguous scenes stay near the y-down
/// prior. The prior must be within the first-stage threshold of true
/// gravity (cameras here pitch well under 45 degrees).
pub fn estimate_gravity(normals: &NormalMap, stages: &[(f64, usize)]) -> Result<GravityEstimate> {
    let h = normals.normals.shape()[1];
    let w = normals.normals.shape()[2];
    let mut ns: Vec<Vector3<f64>> = Vec::new();
    for v in 0..h {
        for u in 0..w {
            if normals.valid[v * w + u] {
                ns.push(Vector3::new(
                    normals.normals.at3(0, v, u),
                    normals.normals.at3(1, v, u),
                    normals.normals.at3(2, v, u),
                ));
            }
        }
    }
    estimate_gravity_from_normals(&ns, stages)
}

/// Same refinement on a bare normal list (testing and diagnostics entry).
pub fn estimate_gravity_from_normals(
    ns: &[Vector3<f64>],
    stages: &[(f64, usize)],
) -> Result<GravityEstimate> {
    if ns.len() < MIN_VALID_NORMALS {
        return Err(Error::Numeric(format!(
            "gravity estimation needs at least {MIN_VALID_NORMALS} valid normals, got {}",
            ns.len()
        )));
    }
    let mut g = Vector3::new(0.0, 1.0, 0.0);
    let mut residual_deg = 0.0;
    let mut empty_iteration = false;
    let mut last_threshold = 45.0;

    'stages: for &(threshold_deg, iters) in stages {
        last_threshold = threshold_deg;
        let cos_par = threshold_deg.to_radians().cos();
        let sin_perp = threshold_deg.to_radians().sin();
        for _ in 0..iters {
            let mut m_par = Matrix3::<f64>::zeros();
            let mut m_perp = Matrix3::<f64>::zeros();
            let mut n_par = 0usize;
            let mut n_perp = 0usize;
            for n in ns {
                let c = n.dot(&g).abs();
                if c >= cos_par {
                    m_par += n * n.transpose();
                    n_par += 1;
                } else if c <= sin_perp {
                    m_perp += n * n.transpose();
                    n_perp += 1;
                }
            }
            if n_par == 0 && n_perp == 0 {
                empty_iteration = true;
                break 'stages;
            }
            let eig = (m_perp - m_par).symmetric_eigen();
            let (i_min, i_mid, i_max) = order3(&[
                eig.eigenvalues[0],
                eig.eigenvalues[1],
                eig.eigenvalues[2],
            ]);
            let lam = &eig.eigenvalues;
            let spread = lam[i_max] - lam[i_min];
            let tol = 1e-9 * spread.max(1e-30);
            // Collect the (near-)minimal eigenspace and project the prior
            // onto it; unique minimum reduces to the plain eigenvector.
            let mut space: Vec<Vector3<f64>> = vec![eig.eigenvectors.column(i_min).into_owned()];
            if lam[i_mid] - lam[i_min] <= tol {
                space.push(eig.eigenvectors.column(i_mid).into_owned());
            }
            if lam[i_max] - lam[i_min] <= tol {
                space.push(eig.eigenvectors.column(i_max).into_owned());
            }
            let mut next = Vector3::zeros();
            for basis in &space {
                next += basis * basis.dot(&g);
            }
            if next.norm() < 1e-9 {
                next = space[0];
            }
            next /= next.norm();
            if next.dot(&g) < 0.0 {
                next = -next;
            }
            residual_deg = next.dot(&g).clamp(-1.0, 1.0).acos().to_degrees();
            g = next;
        }
    }

    // Consistency of the final split: floors should sit on the g line,
    // walls on its equator. Unstructured normal fields score low here.
    let cos_par = last_threshold.to_radians().cos();
    let sin_perp = last_threshold.to_radians().sin();
    let mut score = 0.0;
    let mut count = 0usize;
    for n in ns {
        let c = n.dot(&g).abs();
        if c >= cos_par {
            score += c * c;
            count += 1;
        } else if c <= sin_perp {
            score += 1.0 - c * c;
            count += 1;
        }
    }
    let alignment = if count == 0 { 0.0 } else { score / count as f64 };
    let inlier_fraction = count as f64 / ns.len() as f64;
    let low_confidence = empty_iteration
        || count == 0
        || alignment < ALIGNMENT_CONFIDENCE_THRESHOLD
        || inlier_fraction < INLIER_CONFIDENCE_THRESHOLD;
    Ok(GravityEstimate {
        down: [g.x, g.y, g.z],
        residual_deg,
        low_confidence,
        alignment,
        inlier_fraction,
    })
}

/// Tuning knobs for [`compute_hha`]; the defaults are the documented ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HhaParams {
    pub normals: NormalParams,
    pub gravity_stages: Vec<(f64, usize)>,
    /// Height normalizer; `None` means 2x the 99th-percentile height.
    pub h_max: Option<f64>,
    /// Robust floor reference percentile.
    pub floor_percentile: f64,
    pub ceiling_percentile: f64,
}

impl Default for HhaParams {
    fn default() -> Self {
        HhaParams {
            normals: NormalParams::default(),
            gravity_stages: DEFAULT_GRAVITY_STAGES.to_vec(),
            h_max: None,
            floor_percentile: 1.0,
            ceiling_percentile: 99.0,
        }
    }
}

/// The three HHA channels over the pixel grid, each in [0, 1]; pixels
/// without a valid depth or normal are exactly 0 in all channels.
#[derive(Debug, Clone)]
pub struct HhaImage {
    /// `[3, H, W]`: disparity, height, angle.
    pub channels: Tensor,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HhaDiagnostics {
    pub gravity: GravityEstimate,
    pub valid_pixels: usize,
    pub total_pixels: usize,
    pub invalidated_depths: usize,
    pub floor_height_ref: f64,
    pub h_max: f64,
}

/// Full HHA construction. Also returns the raw (unnormalized) height map
/// used for the height channel, for geometry checks and diagnostics.
pub fn compute_hha(
    depth: &DepthMap,
    cam: &CameraModel,
    params: &HhaParams,
) -> Result<(HhaImage, Tensor, HhaDiagnostics)> {
    let (w, h) = (depth.width, depth.height);
    let cloud = backproject(depth, cam)?;
    let normals = estimate_normals(&cloud, &params.normals)?;
    let gravity = estimate_gravity(&normals, &params.gravity_stages)?;
    let up = -Vector3::new(gravity.down[0], gravity.down[1], gravity.down[2]);

    let mut valid = vec![false; h * w];
    let mut n_valid = 0usize;
    for i in 0..h * w {
        valid[i] = cloud.valid[i] && normals.valid[i];
        if valid[i] {
            n_valid += 1;
        }
    }
    if n_valid == 0 {
        return Err(Error::Numeric("no valid pixels for HHA computation".into()));
    }

    // Disparity channel: 1/z rescaled to [0, 1] over valid pixels.
    let mut disparity = vec![0.0; h * w];
    let mut dmin = f64::INFINITY;
    let mut dmax = f64::NEG_INFINITY;
    for v in 0..h {
        for u in 0..w {
            if valid[v * w + u] {
                let d = 1.0 / cloud.points.at3(2, v, u);
                disparity[v * w + u] = d;
                dmin = dmin.min(d);
                dmax = dmax.max(d);
            }
        }
    }
    let dspan = dmax - dmin;

    // Raw heights along up, floor-referenced by a robust percentile.
    let mut heights = Tensor::zeros(&[h, w]);
    let mut hvals = Vec::with_capacity(n_valid);
    for v in 0..h {
        for u in 0..w {
            if valid[v * w + u] {
                let p = Vector3::new(
                    cloud.points.at3(0, v, u),
                    cloud.points.at3(1, v, u),
                    cloud.points.at3(2, v, u),
                );
                hvals.push(p.dot(&up));
            }
        }
    }
    let floor_ref = percentile(&mut hvals.clone(), params.floor_percentile);
    let mut shifted = Vec::with_capacity(n_valid);
    for v in &hvals {
        shifted.push(v - floor_ref);
    }
    let p_high = percentile(&mut shifted.clone(), params.ceiling_percentile);
    let h_max = params.h_max.unwrap_or(2.0 * p_high).max(0.0);

    let mut out = Tensor::zeros(&[3, h, w]);
    let mut k = 0usize;
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if !valid[i] {
                continue;
            }
            let i_hori = if dspan <= 0.0 {
                0.5
            } else {
                (disparity[i] - dmin) / dspan
            };
            let raw_h = hvals[k] - floor_ref;
            k += 1;
            heights.data_mut()[i] = raw_h;
            let i_height = if h_max <= 1e-9 {
                0.0
            } else {
                raw_h.clamp(0.0, h_max) / h_max
            };
            let n = Vector3::new(
                normals.normals.at3(0, v, u),
                normals.normals.at3(1, v, u),
                normals.normals.at3(2, v, u),
            );
            let i_angle = n.dot(&up).clamp(-1.0, 1.0).acos() / std::f64::consts::PI;
            out.set3(0, v, u, i_hori);
            out.set3(1, v, u, i_height);
            out.set3(2, v, u, i_angle);
        }
    }

    let diag = HhaDiagnostics {
        gravity,
        valid_pixels: n_valid,
        total_pixels: h * w,
        invalidated_depths: cloud.invalidated,
        floor_height_ref: floor_ref,
        h_max,
    };
    Ok((
        HhaImage {
            channels: out,
            valid,
        },
        heights,
        diag,
    ))
}

/// Nearest-rank percentile (q in [0, 100]); sorts its scratch argument.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((q / 100.0) * (values.len() as f64 - 1.0)).round() as usize;
    values[idx.min(values.len() - 1)]
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Depth of the plane `dot(p, axis) = dist` seen through the camera,
    /// or None where the ray misses it.
    fn plane_depth(
        cam: &CameraModel,
        w: usize,
        h: usize,
        axis: Vector3<f64>,
        dist: f64,
    ) -> Vec<f64> {
        let mut values = vec![f64::NAN; w * h];
        for v in 0..h {
            for u in 0..w {
                let dir = Vector3::new(
                    (u as f64 - cam.cx) / cam.focal_px,
                    (v as f64 - cam.cy) / cam.focal_px,
                    1.0,
                );
                let denom = dir.dot(&axis);
                if denom > 1e-9 {
                    let z = dist / denom;
                    if z > 0.0 {
                        values[v * w + u] = z;
                    }
                }
            }
        }
        values
    }

    #[test]
    fn backproject_principal_point_hits_optical_axis() {
        let cam = CameraModel {
            focal_px: 100.0,
            cx: 2.0,
            cy: 2.0,
        };
        let mut vals = vec![1.0; 25];
        vals[2 * 5 + 2] = 2.0;
        let depth = DepthMap::from_metric(5, 5, vals).unwrap();
        let cloud = backproject(&depth, &cam).unwrap();
        assert_eq!(cloud.points.at3(0, 2, 2), 0.0);
        assert_eq!(cloud.points.at3(1, 2, 2), 0.0);
        assert_eq!(cloud.points.at3(2, 2, 2), 2.0);
    }

    #[test]
    fn backproject_similar_triangles() {
        // f=100, cx=50: pixel u=150, v=50 at depth 2 lands at (2, 0, 2).
        let cam = CameraModel {
            focal_px: 100.0,
            cx: 50.0,
            cy: 50.0,
        };
        let (w, h) = (200, 100);
        let depth = DepthMap::from_metric(w, h, vec![2.0; w * h]).unwrap();
        let cloud = backproject(&depth, &cam).unwrap();
        assert!((cloud.points.at3(0, 50, 150) - 2.0).abs() < 1e-12);
        assert!((cloud.points.at3(1, 50, 150) - 0.0).abs() < 1e-12);
        assert!((cloud.points.at3(2, 50, 150) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn backproject_reprojects_to_same_pixel() {
        let (w, h) = (17, 13);
        let cam = CameraModel::default_for(w, h);
        let mut vals = Vec::with_capacity(w * h);
        for i in 0..w * h {
            vals.push(1.0 + 0.03 * ((i * 37 % 101) as f64));
        }
        let depth = DepthMap::from_metric(w, h, vals).unwrap();
        let cloud = backproject(&depth, &cam).unwrap();
        for v in 0..h {
            for u in 0..w {
                let z = cloud.points.at3(2, v, u);
                let u2 = cloud.points.at3(0, v, u) * cam.focal_px / z + cam.cx;
                let v2 = cloud.points.at3(1, v, u) * cam.focal_px / z + cam.cy;
                assert!((u2 - u as f64).abs() < 1e-9);
                assert!((v2 - v as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn backproject_counts_bad_depths() {
        let mut vals = vec![1.0; 9];
        vals[4] = -3.0;
        // from_metric already invalidates; emulate a lying mask by patching.
        let mut depth = DepthMap::from_metric(3, 3, vals).unwrap();
        depth.valid[4] = true;
        let cloud = backproject(&depth, &CameraModel::default_for(3, 3)).unwrap();
        assert_eq!(cloud.invalidated, 1);
        assert!(!cloud.valid[4]);
    }

    #[test]
    fn normals_on_frontoparallel_plane_face_camera() {
        let (w, h) = (12, 10);
        let cam = CameraModel::default_for(w, h);
        let depth = DepthMap::from_metric(w, h, vec![3.0; w * h]).unwrap();
        let cloud = backproject(&depth, &cam).unwrap();
        let nm = estimate_normals(&cloud, &NormalParams::default()).unwrap();
        for v in 0..h {
            for u in 0..w {
                assert!(nm.valid[v * w + u]);
                assert!((nm.normals.at3(0, v, u)).abs() < 1e-9);
                assert!((nm.normals.at3(1, v, u)).abs() < 1e-9);
                assert!((nm.normals.at3(2, v, u) + 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normals_on_pitched_floor_match_analytic() {
        // Camera pitched down 10 degrees: floor "up" normal in camera
        // coordinates is -down = -(0, cos10, sin10).
        let (w, h) = (40, 30);
        let cam = CameraModel::default_for(w, h);
        let pitch = 10f64.to_radians();
        let down = Vector3::new(0.0, pitch.cos(), pitch.sin());
        let vals = plane_depth(&cam, w, h, down, 1.5);
        let depth = DepthMap::from_metric(w, h, vals).unwrap();
        let cloud = backproject(&depth, &cam).unwrap();
        let nm = estimate_normals(&cloud, &NormalParams::default()).unwrap();
        let expect = -down;
        let mut checked = 0;
        for v in 0..h {
            for u in 0..w {
                if nm.valid[v * w + u] {
                    let n = Vector3::new(
                        nm.normals.at3(0, v, u),
                        nm.normals.at3(1, v, u),
                        nm.normals.at3(2, v, u),
                    );
                    let ang = n.dot(&expect).clamp(-1.0, 1.0).acos().to_degrees();
                    assert!(ang < 0.5, "normal off by {ang} deg at ({v},{u})");
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn isolated_pixel_has_no_normal() {
        let mut vals = vec![f64::NAN; 49];
        vals[24] = 2.0;
        let depth = DepthMap::from_metric(7, 7, vals).unwrap();
        let cloud = backproject(&depth, &CameraModel::default_for(7, 7)).unwrap();
        let nm = estimate_normals(&cloud, &NormalParams::default()).unwrap();
        assert!(!nm.valid[24]);
    }

    #[test]
    fn collinear_neighborhood_is_invalidated() {
        // Only one valid row: all points collinear in 3-d.
        let mut vals = vec![f64::NAN; 7 * 7];
        for u in 0..7 {
            vals[3 * 7 + u] = 2.0;
        }
        let depth = DepthMap::from_metric(7, 7, vals).unwrap();
        let cloud = backproject(&depth, &CameraModel::default_for(7, 7)).unwrap();
        let nm = estimate_normals(&cloud, &NormalParams::default()).unwrap();
        assert_eq!(nm.valid_count(), 0);
    }

    #[test]
    fn gravity_single_cluster_fixed_point() {
        // All normals straight up (floor): gravity stays +Y with zero
        // residual and high confidence.
        let ns: Vec<Vector3<f64>> = (0..200).map(|_| Vector3::new(0.0, -1.0, 0.0)).collect();
        let g = estimate_gravity_from_normals(&ns, &DEFAULT_GRAVITY_STAGES).unwrap();
        assert!((g.down[0]).abs() < 1e-12);
        assert!((g.down[1] - 1.0).abs() < 1e-12);
        assert!(g.residual_deg < 1e-9);
        assert!(!g.low_confidence);
    }

    #[test]
    fn gravity_floor_and_walls_pitched() {
        // Floor + two wall clusters, camera pitched 10 degrees.
        let pitch = 10f64.to_radians();
        let down = Vector3::new(0.0, pitch.cos(), pitch.sin());
        let up = -down;
        let wall_a = Vector3::new(1.0, 0.0, 0.0);
        let wall_b = Vector3::new(0.0, pitch.sin(), -pitch.cos()); // faces camera
        let mut ns = Vec::new();
        for i in 0..400 {
            let jitter = |k: u64| 0.02 * (((i as u64 * 31 + k) % 17) as f64 / 17.0 - 0.5);
            let pick = i % 3;
            let base = match pick {
                0 => up,
                1 => wall_a,
                _ => wall_b,
            };
            let mut n = base + Vector3::new(jitter(1), jitter(2), jitter(3));
            n /= n.norm();
            if n.z > 0.0 {
                n = -n;
            }
            ns.push(n);
        }
        let g = estimate_gravity_from_normals(&ns, &DEFAULT_GRAVITY_STAGES).unwrap();
        let gv = Vector3::new(g.down[0], g.down[1], g.down[2]);
        let ang = gv.dot(&down).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(ang < 2.0, "gravity off by {ang} deg");
        assert!(!g.low_confidence);
    }

    #[test]
    fn gravity_random_normals_flag_low_confidence() {
        // Deterministic quasi-uniform directions on the sphere.
        let mut ns = Vec::new();
        for i in 0..1000u64 {
            let a = (i as f64 * 0.618_033_988_749_895).fract() * std::f64::consts::TAU;
            let z = (i as f64 * 2.0 + 1.0) / 1000.0 - 1.0;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let mut n = Vector3::new(r * a.cos(), r * a.sin(), z);
            if n.z > 0.0 {
                n = -n;
            }
            ns.push(n);
        }
        let g = estimate_gravity_from_normals(&ns, &DEFAULT_GRAVITY_STAGES).unwrap();
        assert!(g.low_confidence, "alignment={}", g.alignment);
    }

    #[test]
    fn gravity_requires_enough_normals() {
        let ns: Vec<Vector3<f64>> = (0..99).map(|_| Vector3::new(0.0, -1.0, 0.0)).collect();
        assert!(estimate_gravity_from_normals(&ns, &DEFAULT_GRAVITY_STAGES).is_err());
    }

    #[test]
    fn gravity_rotation_consistent() {
        // Rotating the scene by a known pitch moves the estimate by the
        // same rotation within 2 degrees.
        let build = |pitch_deg: f64| -> Vec<Vector3<f64>> {
            let pitch = pitch_deg.to_radians();
            let down = Vector3::new(0.0, pitch.cos(), pitch.sin());
            let up = -down;
            let wall = Vector3::new(0.0, pitch.sin(), -pitch.cos());
            let side = Vector3::new(1.0, 0.0, 0.0);
            let mut ns = Vec::new();
            for i in 0..300 {
                let jitter = |k: u64| 0.01 * (((i as u64 * 29 + k) % 13) as f64 / 13.0 - 0.5);
                let base = match i % 3 {
                    0 => up,
                    1 => wall,
                    _ => side,
                };
                let mut n = base + Vector3::new(jitter(1), jitter(2), jitter(3));
                n /= n.norm();
                if n.z > 0.0 {
                    n = -n;
                }
                ns.push(n);
            }
            ns
        };
        let g0 = estimate_gravity_from_normals(&build(2.0), &DEFAULT_GRAVITY_STAGES).unwrap();
        let g1 = estimate_gravity_from_normals(&build(14.0), &DEFAULT_GRAVITY_STAGES).unwrap();
        let delta = 12f64.to_radians();
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), delta);
        let moved = rot * Vector3::new(g0.down[0], g0.down[1], g0.down[2]);
        let gv = Vector3::new(g1.down[0], g1.down[1], g1.down[2]);
        let ang = moved.dot(&gv).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(ang < 2.0, "rotation consistency off by {ang} deg");
    }

    #[test]
    fn hha_frontoparallel_plane_channels() {
        let (w, h) = (24, 20);
        let cam = CameraModel::default_for(w, h);
        let depth = DepthMap::from_metric(w, h, vec![2.5; w * h]).unwrap();
        let (hha, _, _) = compute_hha(&depth, &cam, &HhaParams::default()).unwrap();
        // Constant disparity everywhere (degenerate range -> 0.5) and the
        // normal is perpendicular to any gravity estimate in the X/Y plane,
        // so the angle channel reads 90/180.
        for v in 0..h {
            for u in 0..w {
                if hha.valid[v * w + u] {
                    assert_eq!(hha.channels.at3(0, v, u), 0.5);
                    assert!((hha.channels.at3(2, v, u) - 0.5).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn hha_floor_from_above_reads_zero_angle_and_height() {
        let (w, h) = (32, 24);
        let cam = CameraModel::default_for(w, h);
        // Camera pitched 30 degrees down over a bare floor.
        let pitch = 30f64.to_radians();
        let down = Vector3::new(0.0, pitch.cos(), pitch.sin());
        let vals = plane_depth(&cam, w, h, down, 2.0);
        let depth = DepthMap::from_metric(w, h, vals).unwrap();
        let (hha, _, diag) = compute_hha(&depth, &cam, &HhaParams::default()).unwrap();
        let mut n = 0;
        for v in 0..h {
            for u in 0..w {
                if hha.valid[v * w + u] {
                    assert!(hha.channels.at3(2, v, u) < 0.03);
                    assert!(hha.channels.at3(1, v, u) < 0.05);
                    n += 1;
                }
            }
        }
        assert!(n > 300);
        let gd = Vector3::new(diag.gravity.down[0], diag.gravity.down[1], diag.gravity.down[2]);
        assert!((gd.dot(&down) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hha_channels_stay_in_unit_range_and_invalid_pixels_zero() {
        let (w, h) = (20, 16);
        let cam = CameraModel::default_for(w, h);
        let pitch = 8f64.to_radians();
        let down = Vector3::new(0.0, pitch.cos(), pitch.sin());
        let mut vals = plane_depth(&cam, w, h, down, 1.2);
        vals[5 * w + 5] = f64::NAN;
        let depth = DepthMap::from_metric(w, h, vals).unwrap();
        let (hha, _, _) = compute_hha(&depth, &cam, &HhaParams::default()).unwrap();
        for v in 0..h {
            for u in 0..w {
                for c in 0..3 {
                    let x = hha.channels.at3(c, v, u);
                    assert!((0.0..=1.0).contains(&x));
                    if !hha.valid[v * w + u] {
                        assert_eq!(x, 0.0);
                    }
                }
            }
        }
        assert!(!hha.valid[5 * w + 5]);
    }

    #[test]
    fn hha_angle_invariant_to_depth_scale() {
        let (w, h) = (28, 22);
        let cam = CameraModel::default_for(w, h);
        let pitch = 12f64.to_radians();
        let down = Vector3::new(0.0, pitch.cos(), pitch.sin());
        let vals = plane_depth(&cam, w, h, down, 1.4);
        let scaled: Vec<f64> = vals.iter().map(|v| v * 3.7).collect();
        let d1 = DepthMap::from_metric(w, h, vals).unwrap();
        let d2 = DepthMap::from_metric(w, h, scaled).unwrap();
        let (h1, _, g1) = compute_hha(&d1, &cam, &HhaParams::default()).unwrap();
        let (h2, _, g2) = compute_hha(&d2, &cam, &HhaParams::default()).unwrap();
        for v in 0..h {
            for u in 0..w {
                if h1.valid[v * w + u] && h2.valid[v * w + u] {
                    let a = h1.channels.at3(2, v, u);
                    let b = h2.channels.at3(2, v, u);
                    assert!(
                        (a - b).abs() < 1e-6,
                        "angle changed under depth scaling at ({v},{u}): {a} vs {b}; g1={:?} g2={:?}",
                        g1.gravity.down,
                        g2.gravity.down
                    );
                }
            }
        }
    }

    #[test]
    fn inverse_relative_mode_recovers_ordering() {
        // Larger raw value = nearer. After conversion, depth must decrease
        // with the raw value.
        let vals = vec![0.1, 0.5, 0.9, 0.3];
        let d = DepthMap::from_inverse_relative(2, 2, vals, 0.5, 10.0).unwrap();
        assert!(d.at(0, 1) < d.at(0, 0));
        assert!(d.at(1, 0) < d.at(0, 0));
        assert!(d.at(0, 1) < d.at(1, 1));
        assert!(d.values().iter().all(|&z| z >= 0.5 - 1e-12 && z <= 10.0 + 1e-12));
    }
}
