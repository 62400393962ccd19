//! Weighted robust Levenberg–Marquardt refinement of two-view models.
//!
//! Models are refined on a minimal local chart so that every iterate stays on
//! its manifold:
//!
//! * essential — `E = [t]ₓ R` with `R ← exp(ω) R` and `t` moved on the unit
//!   sphere along a tangent basis (5 parameters);
//! * fundamental — `F = T₂ᵀ U diag(cos φ, sin φ, 0) Vᵀ T₁` with `U ← U exp(a)`,
//!   `V ← V exp(b)` (7 parameters). `T₁`, `T₂` are Hartley similarities of the
//!   active points, which keeps the chart well conditioned in pixel units.
//!
//! The residual is the signed Sampson error `e = x₂ᵀMx₁ / √D` whose square is
//! [`sampson_sq`](crate::geometry::sampson_sq). Robust losses are handled by
//! iteratively reweighted Gauss–Newton with Marquardt damping.

use alloc::vec::Vec;

use nalgebra::{Matrix3, SMatrix, SVector, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{
    essential_candidates, rotation_from_axis_angle, skew, Correspondence, ModelHypothesis,
    ModelKind, Provenance,
};
use crate::scoring::ScoreMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    /// Iteration cap of the final likelihood-weighted refinement.
    pub max_iterations: usize,
    /// Iteration cap of the intermediate top-k local optimization.
    pub lo_iterations: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Points with weight at or below this are dropped before refinement.
    pub weight_cutoff: f64,
    /// Cauchy scale in squared-residual units; `None` uses the MSAC threshold.
    pub cauchy_scale: Option<f64>,
    pub top_k: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub min_relative_decrease: f64,
    /// Inlier-set refinements alternate between selecting the model's
    /// inliers and refining on them, for at most this many rounds.
    pub inlier_rounds: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            lo_iterations: 10,
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            weight_cutoff: 1e-3,
            cauchy_scale: None,
            top_k: 4,
            min_relative_decrease: 1e-10,
            inlier_rounds: 4,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.max_iterations > 0
            && self.lo_iterations > 0
            && self.lambda_init > 0.0
            && self.lambda_up > 1.0
            && self.lambda_down > 0.0
            && self.lambda_down < 1.0
            && self.weight_cutoff >= 0.0
            && self.top_k >= 1
            && self.inlier_rounds >= 1
            && self.cauchy_scale.is_none_or(|c| c > 0.0);
        if !positive {
            return Err(Error::Config("refinement parameters must be positive (top_k, inlier_rounds ≥ 1, 0 < lambda_down < 1 < lambda_up)".into()));
        }
        Ok(())
    }
}

/// Robust loss applied to the squared residual `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustLoss {
    /// `s`
    Squared,
    /// `c · ln(1 + s / c)`
    Cauchy(f64),
    /// `min(s, t)`
    Truncated(f64),
}

impl RobustLoss {
    pub fn rho(self, s: f64) -> f64 {
        match self {
            RobustLoss::Squared => s,
            RobustLoss::Cauchy(c) => c * libm::log1p(s / c),
            RobustLoss::Truncated(t) => s.min(t),
        }
    }

    /// `ρ'(s)`, the IRLS weight.
    pub fn weight(self, s: f64) -> f64 {
        match self {
            RobustLoss::Squared => 1.0,
            RobustLoss::Cauchy(c) => 1.0 / (1.0 + s / c),
            RobustLoss::Truncated(t) => {
                if s < t {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Result of one LM run.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub model: ModelHypothesis,
    /// Cost at the start followed by the cost after every accepted step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

impl Refined {
    pub fn initial_cost(&self) -> f64 {
        self.cost_history[0]
    }

    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().unwrap()
    }
}

/// Local chart around a model; `retract(δ)` maps parameters to a matrix and
/// `basis()` gives `∂M/∂δ` at `δ = 0`.
#[derive(Debug, Clone)]
enum Chart {
    Essential {
        r: Matrix3<f64>,
        t: Vector3<f64>,
        b1: Vector3<f64>,
        b2: Vector3<f64>,
    },
    Fundamental {
        u: Matrix3<f64>,
        v: Matrix3<f64>,
        phi: f64,
        t1: Matrix3<f64>,
        t2: Matrix3<f64>,
    },
}

const MAX_DOF: usize = 7;
type Params = SVector<f64, MAX_DOF>;

fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if t.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let b1 = t.cross(&helper).normalize();
    let b2 = t.cross(&b1);
    (b1, b2)
}

fn sorted_svd(m: &Matrix3<f64>) -> Option<(Matrix3<f64>, Vector3<f64>, Matrix3<f64>)> {
    let svd = m.svd(true, true);
    let (u0, v_t0) = (svd.u?, svd.v_t?);
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let mut u = Matrix3::zeros();
    let mut v = Matrix3::zeros();
    let mut s = Vector3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u0.column(src));
        v.set_column(dst, &v_t0.row(src).transpose());
        s[dst] = sv[src];
    }
    // Flipping the null direction leaves U diag(s₁, s₂, 0) Vᵀ unchanged.
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v.determinant() < 0.0 {
        v.column_mut(2).neg_mut();
    }
    Some((u, s, v))
}

fn similarity(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 && mean_dist.is_finite() {
        core::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * centroid.x, 0.0, s, -s * centroid.y, 0.0, 0.0, 1.0)
}

impl Chart {
    fn new(model: &ModelHypothesis, data: &[Correspondence]) -> Option<Self> {
        match model.kind {
            ModelKind::Essential => {
                let target = model.m;
                let pose = essential_candidates(&target)?[0];
                let (b1, b2) = tangent_basis(&pose.translation);
                Some(Chart::Essential {
                    r: pose.rotation,
                    t: pose.translation,
                    b1,
                    b2,
                })
            }
            ModelKind::Fundamental => {
                let p1: Vec<Vector2<f64>> = data.iter().map(|c| c.p1).collect();
                let p2: Vec<Vector2<f64>> = data.iter().map(|c| c.p2).collect();
                let t1 = similarity(&p1);
                let t2 = similarity(&p2);
                let t1_inv = t1.try_inverse()?;
                let t2_inv = t2.try_inverse()?;
                let f_n = t2_inv.transpose() * model.m * t1_inv;
                let f_n = f_n / f_n.norm();
                let (u, s, v) = sorted_svd(&f_n)?;
                Some(Chart::Fundamental {
                    u,
                    v,
                    phi: libm::atan2(s[1], s[0]),
                    t1,
                    t2,
                })
            }
        }
    }

    fn dof(&self) -> usize {
        match self {
            Chart::Essential { .. } => 5,
            Chart::Fundamental { .. } => 7,
        }
    }

    fn matrix(&self) -> Matrix3<f64> {
        match self {
            Chart::Essential { r, t, .. } => skew(t) * r,
            Chart::Fundamental { u, v, phi, t1, t2 } => {
                let d = Matrix3::from_diagonal(&Vector3::new(libm::cos(*phi), libm::sin(*phi), 0.0));
                t2.transpose() * u * d * v.transpose() * t1
            }
        }
    }

    fn retract(&self, delta: &Params) -> Chart {
        match self {
            Chart::Essential { r, t, b1, b2 } => {
                let w = Vector3::new(delta[0], delta[1], delta[2]);
                let r = rotation_from_axis_angle(&w) * r;
                let t = (t + b1 * delta[3] + b2 * delta[4]).normalize();
                let (b1, b2) = tangent_basis(&t);
                Chart::Essential { r, t, b1, b2 }
            }
            Chart::Fundamental { u, v, phi, t1, t2 } => {
                let a = Vector3::new(delta[0], delta[1], delta[2]);
                let b = Vector3::new(delta[3], delta[4], delta[5]);
                Chart::Fundamental {
                    u: u * rotation_from_axis_angle(&a),
                    v: v * rotation_from_axis_angle(&b),
                    phi: phi + delta[6],
                    t1: *t1,
                    t2: *t2,
                }
            }
        }
    }

    /// `∂M/∂δ_k` at `δ = 0`.
    fn basis(&self) -> [Matrix3<f64>; MAX_DOF] {
        let mut g = [Matrix3::zeros(); MAX_DOF];
        match self {
            Chart::Essential { r, t, b1, b2 } => {
                let tx = skew(t);
                for k in 0..3 {
                    g[k] = tx * skew(&Vector3::ith(k, 1.0)) * r;
                }
                g[3] = skew(b1) * r;
                g[4] = skew(b2) * r;
            }
            Chart::Fundamental { u, v, phi, t1, t2 } => {
                let d = Matrix3::from_diagonal(&Vector3::new(libm::cos(*phi), libm::sin(*phi), 0.0));
                let dd = Matrix3::from_diagonal(&Vector3::new(-libm::sin(*phi), libm::cos(*phi), 0.0));
                let left = t2.transpose() * u;
                let right = v.transpose() * t1;
                for k in 0..3 {
                    let e = skew(&Vector3::ith(k, 1.0));
                    g[k] = left * e * d * right;
                    g[3 + k] = -(left * d * e * right);
                }
                g[6] = left * dd * right;
            }
        }
        g
    }
}

/// Signed Sampson residual and its gradient with respect to the entries of `m`.
fn residual_and_gradient(m: &Matrix3<f64>, c: &Correspondence) -> Option<(f64, Matrix3<f64>)> {
    let x1 = c.h1();
    let x2 = c.h2();
    let g = m * x1;
    let h = m.tr_mul(&x2);
    let num = x2.dot(&g);
    let den = g.x * g.x + g.y * g.y + h.x * h.x + h.y * h.y;
    if !(den > 0.0) || !den.is_finite() {
        return None;
    }
    let sd = libm::sqrt(den);
    let e = num / sd;
    // ∂D/∂M_ij = 2 g_i x1_j [i < 2] + 2 h_j x2_i [j < 2]
    let mut dd = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let mut v = 0.0;
            if i < 2 {
                v += 2.0 * g[i] * x1[j];
            }
            if j < 2 {
                v += 2.0 * h[j] * x2[i];
            }
            dd[(i, j)] = v;
        }
    }
    let dn = x2 * x1.transpose();
    let grad = dn / sd - dd * (num / (2.0 * den * sd));
    Some((e, grad))
}

fn signed_residual(m: &Matrix3<f64>, c: &Correspondence) -> Option<f64> {
    let x1 = c.h1();
    let x2 = c.h2();
    let g = m * x1;
    let h = m.tr_mul(&x2);
    let den = g.x * g.x + g.y * g.y + h.x * h.x + h.y * h.y;
    if !(den > 0.0) || !den.is_finite() {
        return None;
    }
    Some(x2.dot(&g) / libm::sqrt(den))
}

fn cost(m: &Matrix3<f64>, data: &[Correspondence], weights: &[f64], loss: RobustLoss) -> f64 {
    data.iter()
        .zip(weights)
        .map(|(c, &w)| match signed_residual(m, c) {
            Some(e) => w * loss.rho(e * e),
            None => w * loss.rho(f64::INFINITY),
        })
        .sum()
}

/// Minimizes `Σ wᵢ ρ(sampson_sq(M, cᵢ))` over the model's local chart.
///
/// Every point with a positive weight takes part; callers drop low-weight
/// points beforehand. Accepted steps strictly decrease the cost and the best
/// iterate is returned; if no step is accepted the input model comes back
/// unchanged.
pub fn lm_minimize(
    model: &ModelHypothesis,
    data: &[Correspondence],
    weights: &[f64],
    loss: RobustLoss,
    max_iterations: usize,
    cfg: &RefineConfig,
) -> Result<Refined> {
    assert_eq!(data.len(), weights.len(), "one weight per correspondence");
    if model.is_zero() {
        return Err(Error::ZeroModel);
    }
    let dof = model.kind.dof();
    let effective = weights.iter().filter(|&&w| w > 0.0).count();
    if effective < dof {
        return Err(Error::RefineUnderdetermined { effective, dof });
    }
    let mut chart = Chart::new(model, data).ok_or(Error::Degenerate)?;
    debug_assert_eq!(chart.dof(), dof);
    let initial = cost(&model.m, data, weights, loss);
    let mut history = Vec::with_capacity(max_iterations + 1);
    history.push(initial);
    let mut current = initial;
    let mut moved = false;
    let mut lambda = cfg.lambda_init;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iterations && current > 0.0 {
        iterations += 1;
        let m = chart.matrix();
        let basis = chart.basis();
        let mut h = SMatrix::<f64, MAX_DOF, MAX_DOF>::zeros();
        let mut grad = Params::zeros();
        for (c, &w) in data.iter().zip(weights) {
            let Some((e, de)) = residual_and_gradient(&m, c) else {
                continue;
            };
            let omega = w * loss.weight(e * e);
            if omega == 0.0 {
                continue;
            }
            let mut j = Params::zeros();
            for k in 0..dof {
                j[k] = de.component_mul(&basis[k]).sum();
            }
            h += j * j.transpose() * omega;
            grad += j * (omega * e);
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = h;
            for k in 0..dof {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            for k in dof..MAX_DOF {
                damped[(k, k)] = 1.0;
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= cfg.lambda_up;
                continue;
            };
            let delta = -chol.solve(&grad);
            let candidate = chart.retract(&delta);
            let new_cost = cost(&candidate.matrix(), data, weights, loss);
            if new_cost < current {
                let rel = (current - new_cost) / current;
                chart = candidate;
                current = new_cost;
                moved = true;
                history.push(new_cost);
                lambda = (lambda * cfg.lambda_down).max(1e-12);
                accepted = true;
                converged = rel < cfg.min_relative_decrease;
                break;
            }
            lambda *= cfg.lambda_up;
        }
        if !accepted || converged {
            break;
        }
    }

    let model = if moved {
        ModelHypothesis::from_matrix(&chart.matrix(), model.kind, Provenance::Refined)
    } else {
        history.truncate(1);
        model.clone()
    };
    Ok(Refined {
        model,
        cost_history: history,
        iterations,
    })
}

/// Final likelihood-weighted refinement with `wᵢ = pᵢ^α`.
///
/// Points with `wᵢ ≤ weight_cutoff` are removed before the solver sees the
/// data, so they have no influence at all. `threshold` is the MSAC threshold
/// (squared units), used as the Cauchy scale unless configured otherwise.
pub fn refine_alpha(
    best: &ModelHypothesis,
    data: &[Correspondence],
    probs: &[f64],
    alpha: f64,
    threshold: f64,
    cfg: &RefineConfig,
) -> Result<Refined> {
    assert_eq!(data.len(), probs.len(), "one probability per correspondence");
    let mut active = Vec::new();
    let mut weights = Vec::new();
    for (c, &p) in data.iter().zip(probs) {
        let w = libm::pow(p, alpha);
        if w > cfg.weight_cutoff {
            active.push(c.clone());
            weights.push(w);
        }
    }
    let loss = RobustLoss::Cauchy(cfg.cauchy_scale.unwrap_or(threshold));
    lm_minimize(best, &active, &weights, loss, cfg.max_iterations, cfg)
}

/// Refines on the points within `threshold` of the model, then re-selects
/// the inliers of the refined model and repeats until the set stops changing
/// or `cfg.inlier_rounds` rounds have run. The returned history belongs to
/// the last round; `iterations` counts all rounds.
pub fn refine_on_inliers(
    model: &ModelHypothesis,
    data: &[Correspondence],
    threshold: f64,
    loss: RobustLoss,
    max_iterations: usize,
    cfg: &RefineConfig,
) -> Result<Refined> {
    let select = |m: &ModelHypothesis| -> Vec<usize> {
        (0..data.len())
            .filter(|&i| crate::geometry::sampson_sq(m, &data[i]) < threshold)
            .collect()
    };
    let mut selected = select(model);
    let mut result: Option<Refined> = None;
    let mut iterations = 0;
    for _ in 0..cfg.inlier_rounds {
        let current = result.as_ref().map_or(model, |r| &r.model);
        let inliers: Vec<Correspondence> = selected.iter().map(|&i| data[i].clone()).collect();
        let weights = alloc::vec![1.0; inliers.len()];
        let refined = match lm_minimize(current, &inliers, &weights, loss, max_iterations, cfg) {
            Ok(r) => r,
            Err(e) if result.is_none() => return Err(e),
            Err(_) => break,
        };
        iterations += refined.iterations;
        let next = select(&refined.model);
        let unchanged = next == selected;
        // Keep the previous round's model when the new one loses support.
        if result.is_some() && next.len() < selected.len() {
            break;
        }
        result = Some(refined);
        selected = next;
        if unchanged {
            break;
        }
    }
    let mut result = result.expect("at least one round");
    result.iterations = iterations;
    Ok(result)
}

/// Refines the `top_k` columns with the largest total consensus on their own
/// MSAC inliers ([`refine_on_inliers`] with the truncated loss and
/// `lo_iterations` steps per round), replaces
/// those models and recomputes only their score columns.
///
/// Returns the column indices that were replaced. Models without enough
/// inliers, or whose refinement fails, keep their original column.
pub fn local_optimize_topk(
    models: &mut [ModelHypothesis],
    s: &mut ScoreMatrix,
    data: &[Correspondence],
    cfg: &RefineConfig,
) -> Vec<usize> {
    let totals = s.column_totals();
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k);
    let threshold = s.threshold;
    let mut replaced = Vec::new();
    for j in order {
        let model = &models[j];
        let support = s.s.column(j).iter().filter(|&&v| v > 0.0).count();
        if model.is_zero() || support < model.kind.dof() {
            continue;
        }
        let Ok(refined) = refine_on_inliers(
            model,
            data,
            threshold,
            RobustLoss::Truncated(threshold),
            cfg.lo_iterations,
            cfg,
        ) else {
            continue;
        };
        if refined.model.provenance != Provenance::Refined {
            continue;
        }
        models[j] = refined.model;
        s.rescore_column(j, &models[j], data);
        replaced.push(j);
    }
    replaced
}

#[cfg(test)]
mod tests;
