//! The learned components: state initialization, inlier decoding and the
//! consensus-attention state update, with a manual reverse pass.

mod bundle;
mod layer;
mod weights;

pub use bundle::{MlpBundle, Tape};
pub use layer::{sigmoid, Activation, LayerCache, LinearLayer, Mlp, MlpCache, LEAKY_RELU_SLOPE};
pub use weights::{load_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use nalgebra::DMatrix;

/// Width of the latent state.
pub const STATE_DIM: usize = 128;
/// Width of the Fourier lifting of a side-information scalar.
pub const FOURIER_DIM: usize = 16;

/// Latent estimation state, one row per correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix(pub DMatrix<f64>);

impl StateMatrix {
    pub fn rows(&self) -> usize {
        self.0.nrows()
    }
}

/// `[sin(2ᵏπx), cos(2ᵏπx)]` for `k = 0..8`, interleaved per frequency.
pub fn fourier_features(x: f64) -> [f64; FOURIER_DIM] {
    let mut out = [0.0; FOURIER_DIM];
    let mut freq = core::f64::consts::PI;
    for k in 0..FOURIER_DIM / 2 {
        let phase = freq * x;
        out[2 * k] = libm::sin(phase);
        out[2 * k + 1] = libm::cos(phase);
        freq *= 2.0;
    }
    out
}
