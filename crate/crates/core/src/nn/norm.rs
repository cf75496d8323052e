use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{expect_rank4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Running statistics of a batch-norm layer. The affine scale and shift are
/// ordinary trainable parameters passed alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Batch normalization followed by the per-channel affine map.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running estimates (unbiased variance). Eval mode is a fixed affine map of
/// the running statistics.
pub fn batch_norm<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Var> {
    let [b, c, h, w] = expect_rank4(tape.shape(x), "batch_norm")?;
    if c != state.channels() {
        return Err(Error::shape(format!(
            "batch_norm state has {} channels, input {c}",
            state.channels()
        )));
    }
    match mode {
        Mode::Train => {
            let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, state.eps)?;
            let m = T::from_usize(b * h * w);
            let unbias = m / (m - T::one());
            let mom = state.momentum;
            for ch in 0..c {
                state.running_mean[ch] = (T::one() - mom) * state.running_mean[ch] + mom * mean[ch];
                state.running_var[ch] = (T::one() - mom) * state.running_var[ch] + mom * var[ch] * unbias;
            }
            Ok(y)
        }
        Mode::Eval => {
            let neg_mean = Tensor::new(
                vec![1, c, 1, 1],
                state.running_mean.iter().map(|&v| -v).collect(),
            )?;
            let inv_std = Tensor::new(
                vec![1, c, 1, 1],
                state
                    .running_var
                    .iter()
                    .map(|&v| T::one() / (v + state.eps).sqrt())
                    .collect(),
            )?;
            let nm = tape.constant(neg_mean);
            let is = tape.constant(inv_std);
            let centered = tape.add(x, nm)?;
            let normed = tape.mul(centered, is)?;
            let g = tape.reshape(gamma, &[1, c, 1, 1])?;
            let bt = tape.reshape(beta, &[1, c, 1, 1])?;
            let scaled = tape.mul(normed, g)?;
            tape.add(scaled, bt)
        }
    }
}
