use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::{Activation, Mlp, MlpCache};
use super::{fourier_features, StateMatrix, FOURIER_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::scoring::AttentionOperand;

/// Decoded probabilities are kept this far from 0 and 1.
const PROB_EPS: f64 = 1e-12;

/// Parameters of all learned components plus the refinement exponent.
///
/// The same type doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBundle {
    /// 16 → 128 → 128.
    pub init_state: Mlp,
    /// 128 → 64 → 32 → 1, sigmoid output.
    pub inlier_decoder: Mlp,
    /// Fuses `[F, attended]`: 256 → 128 → 128 → 128.
    pub mlp1: Mlp,
    /// Encodes the attended features: 128 → 128 → 128 → 128.
    pub mlp2: Mlp,
    /// Encodes states before attention: 128 → 128 → 128 → 128.
    pub mlp3: Mlp,
    pub alpha: f64,
}

impl MlpBundle {
    pub fn new_random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = STATE_DIM;
        Self {
            init_state: Mlp::glorot(&[FOURIER_DIM, s, s], Activation::LeakyRelu, Activation::None, &mut rng),
            inlier_decoder: Mlp::glorot(&[s, 64, 32, 1], Activation::LeakyRelu, Activation::Sigmoid, &mut rng),
            mlp1: Mlp::glorot(&[2 * s, s, s, s], Activation::LeakyRelu, Activation::None, &mut rng),
            mlp2: Mlp::glorot(&[s, s, s, s], Activation::Tanh, Activation::None, &mut rng),
            mlp3: Mlp::glorot(&[s, s, s, s], Activation::Tanh, Activation::None, &mut rng),
            alpha: 1.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            init_state: self.init_state.zeros_like(),
            inlier_decoder: self.inlier_decoder.zeros_like(),
            mlp1: self.mlp1.zeros_like(),
            mlp2: self.mlp2.zeros_like(),
            mlp3: self.mlp3.zeros_like(),
            alpha: 0.0,
        }
    }

    /// Named MLPs in serialization order.
    pub fn mlps(&self) -> [(&'static str, &Mlp); 5] {
        [
            ("init_state", &self.init_state),
            ("inlier_decoder", &self.inlier_decoder),
            ("mlp1", &self.mlp1),
            ("mlp2", &self.mlp2),
            ("mlp3", &self.mlp3),
        ]
    }

    pub fn mlps_mut(&mut self) -> [(&'static str, &mut Mlp); 5] {
        [
            ("init_state", &mut self.init_state),
            ("inlier_decoder", &mut self.inlier_decoder),
            ("mlp1", &mut self.mlp1),
            ("mlp2", &mut self.mlp2),
            ("mlp3", &mut self.mlp3),
        ]
    }

    /// All MLP parameters followed by `alpha`.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.init_state
            .params()
            .chain(self.inlier_decoder.params())
            .chain(self.mlp1.params())
            .chain(self.mlp2.params())
            .chain(self.mlp3.params())
            .chain(core::iter::once(&self.alpha))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.init_state
            .params_mut()
            .chain(self.inlier_decoder.params_mut())
            .chain(self.mlp1.params_mut())
            .chain(self.mlp2.params_mut())
            .chain(self.mlp3.params_mut())
            .chain(core::iter::once(&mut self.alpha))
    }

    pub fn mlp_param_count(&self) -> usize {
        self.mlps().iter().map(|(_, m)| m.param_count()).sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.params().map(|v| v * v).sum())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &MlpBundle, scale: f64) {
        for (a, b) in self.params_mut().zip(other.params()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.params_mut() {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }

    fn lift(side_info: &[f64]) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(side_info.len(), FOURIER_DIM);
        for (i, &s) in side_info.iter().enumerate() {
            let f = fourier_features(s);
            for (j, v) in f.iter().enumerate() {
                x[(i, j)] = *v;
            }
        }
        x
    }

    /// One state row per correspondence from its Fourier-lifted side information.
    pub fn init_state(&self, side_info: &[f64]) -> StateMatrix {
        StateMatrix(self.init_state.forward(&Self::lift(side_info)))
    }

    pub fn decode_inliers(&self, f: &StateMatrix) -> Vec<f64> {
        self.inlier_decoder
            .forward(&f.0)
            .iter()
            .map(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS))
            .collect()
    }

    /// `F ← MLP₁([F, MLP₂(A · MLP₃(F))])`.
    pub fn state_transform(&self, f: &StateMatrix, a: &AttentionOperand) -> StateMatrix {
        let g = self.mlp3.forward(&f.0);
        let h = a.apply(&g);
        let u = self.mlp2.forward(&h);
        StateMatrix(self.mlp1.forward(&concat_columns(&f.0, &u)))
    }

    pub fn init_state_recorded(&self, side_info: &[f64], tape: &mut Tape) -> StateMatrix {
        let cache = self.init_state.forward_cached(&Self::lift(side_info));
        let out = cache.output().clone();
        tape.init = Some(cache);
        tape.steps.clear();
        tape.pending = None;
        StateMatrix(out)
    }

    pub fn state_transform_recorded(&self, f: &StateMatrix, a: &AttentionOperand, tape: &mut Tape) -> StateMatrix {
        let mlp3 = self.mlp3.forward_cached(&f.0);
        let h = a.apply(mlp3.output());
        let mlp2 = self.mlp2.forward_cached(&h);
        let mlp1 = self.mlp1.forward_cached(&concat_columns(&f.0, mlp2.output()));
        let out = mlp1.output().clone();
        tape.pending = Some(TransformCache {
            mlp3,
            attention: a.clone(),
            mlp2,
            mlp1,
        });
        StateMatrix(out)
    }

    /// Decodes probabilities and closes the current step on the tape.
    pub fn decode_recorded(&self, f: &StateMatrix, tape: &mut Tape) -> Vec<f64> {
        let cache = self.inlier_decoder.forward_cached(&f.0);
        let probs = cache
            .output()
            .iter()
            .map(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS))
            .collect();
        tape.steps.push(TapeStep {
            transform: tape.pending.take(),
            decoder: cache,
        });
        probs
    }

    /// Reverse pass through every recorded step. `d_probs[q]` is the loss
    /// gradient with respect to the probabilities decoded at step `q`.
    /// Attention operands are constants. `alpha` receives no gradient here.
    pub fn backward(&self, tape: &Tape, d_probs: &[Vec<f64>]) -> Result<MlpBundle> {
        let init = tape.init.as_ref().ok_or(Error::MissingTape)?;
        if d_probs.len() != tape.steps.len() {
            return Err(Error::MissingTape);
        }
        let n = init.output().nrows();
        let mut grad = self.zeros_like();
        let mut d_state = DMatrix::<f64>::zeros(n, STATE_DIM);
        for (step, dp) in tape.steps.iter().zip(d_probs).rev() {
            let d_out = DMatrix::from_column_slice(n, 1, dp);
            d_state += self.inlier_decoder.backward(&step.decoder, &d_out, &mut grad.inlier_decoder);
            if let Some(t) = &step.transform {
                let d_cat = self.mlp1.backward(&t.mlp1, &d_state, &mut grad.mlp1);
                let d_direct = d_cat.columns(0, STATE_DIM).into_owned();
                let d_u = d_cat.columns(STATE_DIM, STATE_DIM).into_owned();
                let d_h = self.mlp2.backward(&t.mlp2, &d_u, &mut grad.mlp2);
                let d_g = t.attention.apply(&d_h);
                let d_prev = self.mlp3.backward(&t.mlp3, &d_g, &mut grad.mlp3);
                d_state = d_direct + d_prev;
            }
        }
        self.init_state.backward(init, &d_state, &mut grad.init_state);
        Ok(grad)
    }
}

pub(crate) fn concat_columns(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

#[derive(Debug, Clone)]
pub struct TransformCache {
    mlp3: MlpCache,
    attention: AttentionOperand,
    mlp2: MlpCache,
    mlp1: MlpCache,
}

#[derive(Debug, Clone)]
pub struct TapeStep {
    transform: Option<TransformCache>,
    decoder: MlpCache,
}

/// Forward record of one image pair: the state initialization followed by
/// one step per decoded probability vector.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    init: Option<MlpCache>,
    steps: Vec<TapeStep>,
    pending: Option<TransformCache>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> usize {
        self.steps.len()
    }
}
