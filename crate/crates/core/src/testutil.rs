//! Synthetic scenes shared by unit tests.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{rotation_from_axis_angle, CameraIntrinsics, Correspondence, RelativePose};

pub fn random_pose(rng: &mut ChaCha8Rng) -> RelativePose {
    let w = Vector3::new(
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    );
    let t = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.3..0.3),
    );
    RelativePose::new(rotation_from_axis_angle(&w), t)
}

/// Noise-free normalized correspondences in front of both cameras.
pub fn scene(rng: &mut ChaCha8Rng, pose: &RelativePose, n: usize) -> Vec<Correspondence> {
    let mut out = Vec::new();
    while out.len() < n {
        let x = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(4.0..10.0),
        );
        let x2 = pose.rotation * x + pose.translation;
        if x2.z <= 0.1 {
            continue;
        }
        out.push(
            Correspondence::new(
                Vector2::new(x.x / x.z, x.y / x.z),
                Vector2::new(x2.x / x2.z, x2.y / x2.z),
                0.5,
            )
            .unwrap()
            .with_label(true),
        );
    }
    out
}

pub fn to_pixels(c: &[Correspondence], k: &CameraIntrinsics) -> Vec<Correspondence> {
    c.iter()
        .map(|c| Correspondence {
            p1: k.denormalize(&c.p1),
            p2: k.denormalize(&c.p2),
            ..c.clone()
        })
        .collect()
}

/// Adds isotropic Gaussian noise (Box–Muller) to the second point.
pub fn add_noise(rng: &mut ChaCha8Rng, c: &mut [Correspondence], sigma: f64) {
    for c in c.iter_mut() {
        let u1: f64 = rng.random_range(1e-12..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let r = libm::sqrt(-2.0 * libm::log(u1)) * sigma;
        let th = 2.0 * core::f64::consts::PI * u2;
        c.p2 += Vector2::new(r * libm::cos(th), r * libm::sin(th));
    }
}

pub fn aligned_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let a = a / a.norm();
    let b = b / b.norm();
    (a - b).norm().min((a + b).norm())
}

pub fn camera() -> CameraIntrinsics {
    CameraIntrinsics::new(600.0, 620.0, 320.0, 240.0).unwrap()
}
