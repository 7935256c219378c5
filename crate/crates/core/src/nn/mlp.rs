//! Fully connected blocks over a flat parameter vector.

use serde::{Deserialize, Serialize};

use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl MlpConfig {
    pub fn new(widths: Vec<usize>) -> Self {
        Self {
            widths,
            activation: Activation::Tanh,
            dropout_rate: 0.0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "an MLP needs at least two widths, got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidParameter(format!("zero width in {:?}", self.widths)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParameter(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Writes initial values into `out` (length [`MlpConfig::n_params`]):
    /// weights uniform with variance `2 / fan_in`, zero biases.
    pub fn init(&self, out: &mut [f64], rng: &mut RngState) {
        let mut pos = 0;
        for w in self.widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / fan_in as f64).sqrt();
            for v in &mut out[pos..pos + fan_in * fan_out] {
                *v = rng.uniform_range(-a, a);
            }
            pos += fan_in * fan_out;
            out[pos..pos + fan_out].fill(0.0);
            pos += fan_out;
        }
    }

    /// Records the block on `tape`. `params` is the block's slice of the
    /// flat vector, which starts at `offset`. Dropout follows every hidden
    /// activation when `dropout` carries a random stream.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[f64],
        offset: usize,
        x: Var,
        mut dropout: Option<&mut RngState>,
    ) -> Var {
        let mut h = x;
        let mut pos = 0;
        let layers = self.widths.len() - 1;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weight = Mat::from_shape_vec((fan_in, fan_out), params[pos..pos + fan_in * fan_out].to_vec())
                .expect("layer layout");
            let wv = tape.param(weight, offset + pos);
            pos += fan_in * fan_out;
            let bias = Mat::from_shape_vec((1, fan_out), params[pos..pos + fan_out].to_vec()).expect("layer layout");
            let bv = tape.param(bias, offset + pos);
            pos += fan_out;
            let z = tape.matmul(h, wv);
            h = tape.add_row(z, bv);
            if l + 1 < layers {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                };
                if let Some(rng) = dropout.as_deref_mut() {
                    if self.dropout_rate > 0.0 {
                        let mut mask = Mat::ones(tape.value(h).dim());
                        dropout_apply(mask.as_slice_mut().unwrap(), self.dropout_rate, Some(rng));
                        h = tape.mask(h, mask);
                    }
                }
            }
        }
        h
    }
}

/// Inverted dropout in place: with a random stream each entry is zeroed
/// with probability `rate` and survivors are scaled by `1 / (1 − rate)`.
/// Without one (evaluation) values pass through unchanged.
pub fn dropout_apply(values: &mut [f64], rate: f64, rng: Option<&mut RngState>) {
    let Some(rng) = rng else { return };
    if rate <= 0.0 {
        return;
    }
    let keep = 1.0 / (1.0 - rate);
    for v in values {
        if rng.uniform() < rate {
            *v = 0.0;
        } else {
            *v *= keep;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_modes() {
        let mut rng = RngState::new(5);
        let orig: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let mut v = orig.clone();
        dropout_apply(&mut v, 0.0, Some(&mut rng));
        assert_eq!(v, orig);
        dropout_apply(&mut v, 0.3, None);
        assert_eq!(v, orig);

        let mut ones = vec![1.0; 1_000_000];
        dropout_apply(&mut ones, 0.3, Some(&mut rng));
        let zeros = ones.iter().filter(|v| **v == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.3).abs() < 0.002, "zero fraction {zeros}");
        assert!(ones.iter().all(|v| *v == 0.0 || (*v - 1.0 / 0.7).abs() < 1e-15));
    }

    #[test]
    fn init_statistics() {
        let cfg = MlpConfig::new(vec![50, 400, 3]);
        assert_eq!(cfg.n_params(), 50 * 400 + 400 + 400 * 3 + 3);
        let mut p = vec![f64::NAN; cfg.n_params()];
        cfg.init(&mut p, &mut RngState::new(1));
        let w = &p[..50 * 400];
        let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.002, "variance {var}");
        assert!(p[50 * 400..50 * 400 + 400].iter().all(|b| *b == 0.0));
    }

    #[test]
    fn validation() {
        assert!(MlpConfig::new(vec![3]).validate().is_err());
        assert!(MlpConfig::new(vec![3, 0, 1]).validate().is_err());
        assert!(MlpConfig::new(vec![3, 1]).with_dropout(1.0).validate().is_err());
        assert!(MlpConfig::new(vec![3, 4, 1]).with_dropout(0.3).validate().is_ok());
    }

    #[test]
    fn forward_matches_manual() {
        let cfg = MlpConfig::new(vec![2, 3, 1]);
        let mut p = vec![0.0; cfg.n_params()];
        cfg.init(&mut p, &mut RngState::new(2));
        p[6] = 0.1;
        p[10] = -0.2;
        let x = [0.3, -0.7];
        let mut tape = Tape::new();
        let xv = tape.constant(Mat::from_shape_vec((1, 2), x.to_vec()).unwrap());
        let out = cfg.forward(&mut tape, &p, 0, xv, None);
        let h: Vec<f64> = (0..3)
            .map(|j| (x[0] * p[j] + x[1] * p[3 + j] + p[6 + j]).tanh())
            .collect();
        let y = (0..3).map(|j| h[j] * p[9 + j]).sum::<f64>() + p[12];
        assert!((tape.value(out)[[0, 0]] - y).abs() < 1e-15);
    }
}
