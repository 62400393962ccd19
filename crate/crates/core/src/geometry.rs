//! Two-view model representations, the Sampson residual, the normalized
//! 8-point solver and pose extraction.
//!
//! Conventions: a relative pose maps camera-1 coordinates to camera-2
//! coordinates, `X2 = R X1 + t`, and every model satisfies `p2ᵀ M p1 = 0`
//! for homogeneous points `p = (x, y, 1)`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Smallest singular value ratio accepted for a full-rank (rank 8) design matrix.
const DESIGN_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub p1: Vector2<f64>,
    pub p2: Vector2<f64>,
    /// SNN ratio or matcher score in `[0, 1]`.
    pub side_info: f64,
    pub gt_inlier: Option<bool>,
}

impl Correspondence {
    pub fn new(p1: Vector2<f64>, p2: Vector2<f64>, side_info: f64) -> Result<Self> {
        if !(p1.iter().chain(p2.iter()).all(|v| v.is_finite())) {
            return Err(Error::InvalidCorrespondence("non-finite coordinate"));
        }
        if !(0.0..=1.0).contains(&side_info) {
            return Err(Error::InvalidCorrespondence("side_info outside [0, 1]"));
        }
        Ok(Self {
            p1,
            p2,
            side_info,
            gt_inlier: None,
        })
    }

    pub fn with_label(mut self, inlier: bool) -> Self {
        self.gt_inlier = Some(inlier);
        self
    }

    pub fn h1(&self) -> Vector3<f64> {
        self.p1.push(1.0)
    }

    pub fn h2(&self) -> Vector3<f64> {
        self.p2.push(1.0)
    }
}

/// Zero-skew pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidIntrinsics("non-finite entry"));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidIntrinsics("focal lengths must be positive"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn identity() -> Self {
        Self {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn normalize(&self, p: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy)
    }

    pub fn denormalize(&self, p: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(p.x * self.fx + self.cx, p.y * self.fy + self.cy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Fundamental,
    Essential,
}

impl ModelKind {
    /// Local degrees of freedom of the model manifold.
    pub fn dof(self) -> usize {
        match self {
            ModelKind::Fundamental => 7,
            ModelKind::Essential => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fundamental => "fundamental",
            ModelKind::Essential => "essential",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    MinimalSample(Vec<usize>),
    Refined,
    Zero,
}

/// A 3×3 two-view model with unit Frobenius norm (or the zero sentinel).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHypothesis {
    pub m: Matrix3<f64>,
    pub kind: ModelKind,
    pub provenance: Provenance,
}

impl ModelHypothesis {
    pub fn zero(kind: ModelKind) -> Self {
        Self {
            m: Matrix3::zeros(),
            kind,
            provenance: Provenance::Zero,
        }
    }

    /// Projects `m` onto the manifold of `kind` and scales it to unit norm.
    pub fn from_matrix(m: &Matrix3<f64>, kind: ModelKind, provenance: Provenance) -> Self {
        Self {
            m: project_to_manifold(m, kind),
            kind,
            provenance,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.provenance, Provenance::Zero)
    }
}

/// Relative pose with `X2 = R X1 + t` and unit `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let norm = translation.norm();
        let translation = if norm > 0.0 {
            translation / norm
        } else {
            translation
        };
        Self {
            rotation,
            translation,
        }
    }

    /// `E = [t]ₓ R`, unit Frobenius norm.
    pub fn essential(&self) -> Matrix3<f64> {
        let e = skew(&self.translation) * self.rotation;
        let n = e.norm();
        if n > 0.0 {
            e / n
        } else {
            e
        }
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix from an axis-angle vector (Rodrigues).
pub fn rotation_from_axis_angle(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-12 {
        return Matrix3::identity() + k + k * k * 0.5;
    }
    let a = libm::sin(theta) / theta;
    let b = (1.0 - libm::cos(theta)) / (theta * theta);
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation angle of `r` in radians, accurate near zero.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = (r.trace() - 1.0) * 0.5;
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)])
        .norm()
        * 0.5;
    libm::atan2(s, c)
}

/// Angle between two vectors in radians.
pub fn vector_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    libm::atan2(a.cross(b).norm(), a.dot(b))
}

/// Enforces the model manifold: rank 2 for fundamental, singular values
/// `(σ, σ, 0)` for essential. Output has unit Frobenius norm (or is zero).
pub fn project_to_manifold(m: &Matrix3<f64>, kind: ModelKind) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Matrix3::zeros(),
    };
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    // Apply the projection as a correction to `m` rather than rebuilding it
    // from the factors: the reconstruction error of a 3×3 SVD swamps the
    // small entries of pixel-space fundamental matrices.
    let mut target = sv;
    target[order[2]] = 0.0;
    if kind == ModelKind::Essential {
        let s = (sv[order[0]] + sv[order[1]]) * 0.5;
        target[order[0]] = s;
        target[order[1]] = s;
    }
    let mut out = *m;
    for k in 0..3 {
        let delta = target[k] - sv[k];
        if delta != 0.0 {
            out += u.column(k) * v_t.row(k) * delta;
        }
    }
    let n = out.norm();
    if n > 0.0 {
        out / n
    } else {
        out
    }
}

/// Squared Sampson distance of `c` with respect to `model`.
///
/// Returns `+∞` for the zero model and when all four epipolar-line
/// gradient terms vanish.
pub fn sampson_sq(model: &ModelHypothesis, c: &Correspondence) -> f64 {
    if model.is_zero() {
        return f64::INFINITY;
    }
    sampson_sq_matrix(&model.m, &c.h1(), &c.h2())
}

#[inline]
pub(crate) fn sampson_sq_matrix(m: &Matrix3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> f64 {
    let fx1 = m * x1;
    let ftx2 = m.tr_mul(x2);
    let num = x2.dot(&fx1);
    let den = fx1.x * fx1.x + fx1.y * fx1.y + ftx2.x * ftx2.x + ftx2.y * ftx2.y;
    if den <= 0.0 || !den.is_finite() {
        return f64::INFINITY;
    }
    let r = num * num / den;
    if r.is_nan() {
        f64::INFINITY
    } else {
        r
    }
}

/// Similarity transform moving the centroid to the origin with mean
/// distance √2. `None` when all points coincide.
fn hartley_transform<'a>(points: impl Iterator<Item = &'a Vector2<f64>> + Clone) -> Option<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let centroid = points.clone().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.map(|p| (p - centroid).norm()).sum::<f64>() / n;
    if !(mean_dist > 0.0) || !mean_dist.is_finite() {
        return None;
    }
    let s = core::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(
        s,
        0.0,
        -s * centroid.x,
        0.0,
        s,
        -s * centroid.y,
        0.0,
        0.0,
        1.0,
    ))
}

/// Hartley-normalized linear 8-point solver.
///
/// The returned model lies on the manifold of `kind` with unit norm and its
/// provenance is left as [`Provenance::Refined`]; callers solving a minimal
/// sample overwrite it with the sample indices.
pub fn eight_point(samples: &[Correspondence], kind: ModelKind) -> Result<ModelHypothesis> {
    if samples.len() < 8 {
        return Err(Error::InsufficientData {
            needed: 8,
            available: samples.len(),
        });
    }
    let t1 = hartley_transform(samples.iter().map(|c| &c.p1)).ok_or(Error::Degenerate)?;
    let t2 = hartley_transform(samples.iter().map(|c| &c.p2)).ok_or(Error::Degenerate)?;

    let rows = samples.len().max(9);
    let mut design = DMatrix::<f64>::zeros(rows, 9);
    for (i, c) in samples.iter().enumerate() {
        let a = t1 * c.h1();
        let b = t2 * c.h2();
        let row = [
            b.x * a.x,
            b.x * a.y,
            b.x,
            b.y * a.x,
            b.y * a.y,
            b.y,
            a.x,
            a.y,
            1.0,
        ];
        for (j, v) in row.iter().enumerate() {
            design[(i, j)] = *v;
        }
    }
    let svd = design.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::Degenerate)?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let largest = sv[order[0]];
    if !(largest > 0.0) || sv[order[7]] <= DESIGN_RANK_TOL * largest {
        return Err(Error::Degenerate);
    }
    let null = v_t.row(order[8]);
    let f_norm = Matrix3::new(
        null[0], null[1], null[2], null[3], null[4], null[5], null[6], null[7], null[8],
    );
    let f_norm = project_to_manifold(&f_norm, ModelKind::Fundamental);
    let m = t2.transpose() * f_norm * t1;
    if !m.iter().all(|v| v.is_finite()) || m.norm() == 0.0 {
        return Err(Error::Degenerate);
    }
    Ok(ModelHypothesis::from_matrix(&m, kind, Provenance::Refined))
}

/// Maps both points of `c` to normalized camera coordinates.
pub fn normalize_by_intrinsics(
    c: &Correspondence,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> Correspondence {
    Correspondence {
        p1: k1.normalize(&c.p1),
        p2: k2.normalize(&c.p2),
        side_info: c.side_info,
        gt_inlier: c.gt_inlier,
    }
}

/// `E = K2ᵀ F K1`, projected onto the essential manifold.
pub fn f_to_e_upgrade(
    f: &ModelHypothesis,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> ModelHypothesis {
    if f.is_zero() {
        return ModelHypothesis::zero(ModelKind::Essential);
    }
    let e = k2.matrix().transpose() * f.m * k1.matrix();
    ModelHypothesis::from_matrix(&e, ModelKind::Essential, f.provenance.clone())
}

/// `F = K2⁻ᵀ E K1⁻¹`, unit norm.
pub fn e_to_f(e: &Matrix3<f64>, k1: &CameraIntrinsics, k2: &CameraIntrinsics) -> Matrix3<f64> {
    let f = k2.inverse_matrix().transpose() * e * k1.inverse_matrix();
    f / f.norm()
}

/// Midpoint triangulation of a normalized correspondence. Returns the point
/// in camera-1 coordinates, or `None` for parallel rays.
pub fn triangulate_midpoint(
    pose: &RelativePose,
    x1: &Vector2<f64>,
    x2: &Vector2<f64>,
) -> Option<Vector3<f64>> {
    let r = &pose.rotation;
    let d1 = x1.push(1.0);
    let d2 = r.tr_mul(&x2.push(1.0));
    let c2 = -r.tr_mul(&pose.translation);
    // min |l1 d1 - (c2 + l2 d2)|²
    let a = d1.dot(&d1);
    let b = d1.dot(&d2);
    let c = d2.dot(&d2);
    let d = d1.dot(&c2);
    let e = d2.dot(&c2);
    let den = a * c - b * b;
    if den.abs() <= 1e-14 * a * c {
        return None;
    }
    let l1 = (d * c - b * e) / den;
    let l2 = (b * d - a * e) / den;
    let p1 = d1 * l1;
    let p2 = c2 + d2 * l2;
    Some((p1 + p2) * 0.5)
}

/// The four `(R, t)` factorizations of an essential matrix.
pub fn essential_candidates(e: &Matrix3<f64>) -> Option<[RelativePose; 4]> {
    let svd = e.svd(true, true);
    let mut u = svd.u?;
    let mut v_t = svd.v_t?;
    let sv = svd.singular_values;
    // Move the smallest singular direction to the last column.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let u0 = u;
    let v0 = v_t;
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u0.column(src));
        v_t.set_row(dst, &v0.row(src));
    }
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v_t.determinant() < 0.0 {
        v_t.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).into();
    Some([
        RelativePose::new(r1, t),
        RelativePose::new(r1, -t),
        RelativePose::new(r2, t),
        RelativePose::new(r2, -t),
    ])
}

/// Picks the factorization of `e` that places the most inliers in front of
/// both cameras. Ties go to the smallest mean reprojection residual.
pub fn decompose_essential(
    e: &ModelHypothesis,
    inliers: &[Correspondence],
) -> Result<RelativePose> {
    if e.is_zero() || inliers.is_empty() {
        return Err(Error::PoseUndecidable);
    }
    let candidates = essential_candidates(&e.m).ok_or(Error::PoseUndecidable)?;
    let mut best: Option<(usize, f64, RelativePose)> = None;
    for pose in candidates {
        let mut count = 0usize;
        let mut residual = 0.0;
        for c in inliers {
            let Some(x) = triangulate_midpoint(&pose, &c.p1, &c.p2) else {
                continue;
            };
            let x2 = pose.rotation * x + pose.translation;
            if x.z > 0.0 && x2.z > 0.0 {
                count += 1;
                let r1 = Vector2::new(x.x / x.z, x.y / x.z) - c.p1;
                let r2 = Vector2::new(x2.x / x2.z, x2.y / x2.z) - c.p2;
                residual += r1.norm() + r2.norm();
            }
        }
        if count == 0 {
            continue;
        }
        let mean = residual / count as f64;
        let better = match &best {
            None => true,
            Some((bc, br, _)) => count > *bc || (count == *bc && mean < *br),
        };
        if better {
            best = Some((count, mean, pose));
        }
    }
    best.map(|(_, _, p)| p).ok_or(Error::PoseUndecidable)
}

/// `max(rotation error, translation direction error)` in degrees.
pub fn pose_error(estimate: &RelativePose, gt: &RelativePose) -> f64 {
    let r_err = rotation_angle(&(estimate.rotation * gt.rotation.transpose()));
    let t_err = vector_angle(&estimate.translation, &gt.translation);
    r_err.max(t_err).to_degrees()
}
