//! The NeuVec networks: a Deep-Sets style `W^σ` producing the conditional
//! standard deviation, a permutation-preserving `W^μ` producing kriging
//! coefficients, and an optional mean network.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::MlpConfig;
use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::vecchia::Prediction;

/// Added to the softplus output so `σ̂` stays strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Groups per independent tape. Fixed so that results do not depend on
/// the number of worker threads.
pub const SHARD_GROUPS: usize = 32;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    /// Row `j` is `[x_{c,j}, x_i]`.
    #[default]
    Concat,
    /// Row `j` is `[‖x_{c,j} − x_i‖, unit direction, x_i]`.
    DistanceDirection,
}

impl Augmentation {
    pub fn augmented_dim(self, d: usize) -> usize {
        match self {
            Augmentation::Concat => 2 * d,
            Augmentation::DistanceDirection => 2 * d + 1,
        }
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "concat" => Ok(Augmentation::Concat),
            "distance-direction" | "distance_direction" => Ok(Augmentation::DistanceDirection),
            _ => Err(Error::Config(format!("unknown augmentation `{s}`"))),
        }
    }
}

/// What `ρ₁` sees alongside the `ρ₂` summary: the embedded row `φ(a_j)`
/// or the raw augmented row `a_j`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rho1Input {
    #[default]
    Phi,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Simulation-study widths (128/64).
    Table1,
    /// Reduced widths (16) for small real datasets.
    Table4,
    /// Width-32 networks that train on one CPU in minutes.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "table1" => Ok(Preset::Table1),
            "table4" => Ok(Preset::Table4),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset `{s}` (table1, table4, desk)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Table1 => "table1",
            Preset::Table4 => "table4",
            Preset::Desk => "desk",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    #[serde(default)]
    pub augmentation: Augmentation,
    #[serde(default)]
    pub rho1_input: Rho1Input,
    pub phi_mu: MlpConfig,
    pub rho2_mu: MlpConfig,
    pub rho1_mu: MlpConfig,
    pub phi_sigma: MlpConfig,
    pub rho_sigma: MlpConfig,
    #[serde(default)]
    pub mean_net: Option<MlpConfig>,
}

impl ModelConfig {
    pub fn preset(preset: Preset, d: usize, augmentation: Augmentation) -> Self {
        let da = augmentation.augmented_dim(d);
        let mlp = MlpConfig::new;
        let (phi_mu, rho2_mu, rho1_mu, phi_sigma, rho_sigma) = match preset {
            Preset::Table1 => (
                vec![da, 128, 128, 128, 64],
                vec![64, 128, 128, 128, 64],
                vec![128, 128, 128, 128, 1],
                vec![da, 128, 128, 128, 64],
                vec![64, 128, 128, 128, 1],
            ),
            Preset::Table4 => (
                vec![da, 16, 16, 16, 16],
                vec![16, 16, 16, 16, 16],
                vec![32, 16, 16, 16, 1],
                vec![da, 16, 16, 16, 16],
                vec![16, 16, 16, 16, 1],
            ),
            Preset::Desk => (
                vec![da, 32, 32, 32],
                vec![32, 32, 32],
                vec![64, 32, 32, 1],
                vec![da, 32, 32, 32],
                vec![32, 32, 32, 1],
            ),
        };
        Self {
            d,
            augmentation,
            rho1_input: Rho1Input::Phi,
            phi_mu: mlp(phi_mu),
            rho2_mu: mlp(rho2_mu),
            rho1_mu: mlp(rho1_mu),
            phi_sigma: mlp(phi_sigma),
            rho_sigma: mlp(rho_sigma),
            mean_net: None,
        }
    }

    /// Adds a `[d, 8, 8, 8, 1]` mean network.
    pub fn with_mean_net(mut self) -> Self {
        self.mean_net = Some(MlpConfig::new(vec![self.d, 8, 8, 8, 1]));
        self
    }

    /// Switches `ρ₁` to the raw augmented row, resizing its input layer.
    pub fn with_raw_rho1_input(mut self) -> Self {
        self.rho1_input = Rho1Input::Raw;
        self.rho1_mu.widths[0] = self.d_a() + self.d_l2();
        self
    }

    /// Same dropout rate on every block, mean network included.
    pub fn with_dropout(mut self, rate: f64) -> Self {
        for block in self.blocks_mut() {
            block.dropout_rate = rate;
        }
        self
    }

    fn blocks_mut(&mut self) -> Vec<&mut MlpConfig> {
        let mut v = vec![
            &mut self.phi_mu,
            &mut self.rho2_mu,
            &mut self.rho1_mu,
            &mut self.phi_sigma,
            &mut self.rho_sigma,
        ];
        if let Some(m) = self.mean_net.as_mut() {
            v.push(m);
        }
        v
    }

    /// Named blocks in parameter-vector order.
    pub fn blocks(&self) -> Vec<(&'static str, &MlpConfig)> {
        let mut v = vec![
            ("phi_mu", &self.phi_mu),
            ("rho2_mu", &self.rho2_mu),
            ("rho1_mu", &self.rho1_mu),
            ("phi_sigma", &self.phi_sigma),
            ("rho_sigma", &self.rho_sigma),
        ];
        if let Some(m) = &self.mean_net {
            v.push(("mean_net", m));
        }
        v
    }

    pub fn d_a(&self) -> usize {
        self.augmentation.augmented_dim(self.d)
    }

    /// Latent width of `W^σ`.
    pub fn d_l(&self) -> usize {
        self.phi_sigma.output_dim()
    }

    /// Latent width of `φ` in `W^μ`.
    pub fn d_l1(&self) -> usize {
        self.phi_mu.output_dim()
    }

    /// Output width of `ρ₂`.
    pub fn d_l2(&self) -> usize {
        self.rho2_mu.output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.n_params()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidParameter("input dimension must be >= 1".into()));
        }
        for (name, block) in self.blocks() {
            block
                .validate()
                .map_err(|e| Error::InvalidParameter(format!("{name}: {e}")))?;
        }
        let rho1_in = match self.rho1_input {
            Rho1Input::Phi => self.d_l1(),
            Rho1Input::Raw => self.d_a(),
        } + self.d_l2();
        let checks = [
            ("phi_mu input", self.phi_mu.input_dim(), self.d_a()),
            ("rho2_mu input", self.rho2_mu.input_dim(), self.d_l1()),
            ("rho1_mu input", self.rho1_mu.input_dim(), rho1_in),
            ("rho1_mu output", self.rho1_mu.output_dim(), 1),
            ("phi_sigma input", self.phi_sigma.input_dim(), self.d_a()),
            ("rho_sigma input", self.rho_sigma.input_dim(), self.d_l()),
            ("rho_sigma output", self.rho_sigma.output_dim(), 1),
        ];
        for (what, found, expected) in checks {
            if found != expected {
                return Err(Error::InvalidParameter(format!(
                    "{what} width is {found}, expected {expected}"
                )));
            }
        }
        if let Some(m) = &self.mean_net {
            if m.input_dim() != self.d || m.output_dim() != 1 {
                return Err(Error::InvalidParameter(format!(
                    "mean_net must map {} inputs to 1 output",
                    self.d
                )));
            }
        }
        Ok(())
    }
}

/// Conditioning locations plus one target: `locs` holds `k + 1` rows of
/// `d` coordinates with the target last, `y` the matching responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub locs: Vec<f64>,
    pub y: Vec<f64>,
}

impl Group {
    pub fn k(&self) -> usize {
        self.y.len() - 1
    }

    pub fn cond_locs(&self, d: usize) -> &[f64] {
        &self.locs[..self.k() * d]
    }

    pub fn target_loc(&self, d: usize) -> &[f64] {
        &self.locs[self.k() * d..]
    }

    pub fn cond_y(&self) -> &[f64] {
        &self.y[..self.k()]
    }

    pub fn target_y(&self) -> f64 {
        self.y[self.k()]
    }

    fn check(&self, d: usize) -> Result<()> {
        if self.y.is_empty() || self.locs.len() != self.y.len() * d {
            return Err(Error::ShapeMismatch(format!(
                "group has {} coordinates for {} responses in dimension {d}",
                self.locs.len(),
                self.y.len()
            )));
        }
        Ok(())
    }
}

/// Evaluation is deterministic; training draws dropout masks from the
/// given stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut RngState),
}

impl Mode<'_> {
    fn rng(&mut self) -> Option<&mut RngState> {
        match self {
            Mode::Eval => None,
            Mode::Train(r) => Some(r),
        }
    }
}

/// Builds the `m × d_A` augmented input matrix.
pub fn augment(x_c: &[f64], x_i: &[f64], d: usize, mode: Augmentation) -> Result<Mat> {
    if d == 0 || x_i.len() != d || !x_c.len().is_multiple_of(d) {
        return Err(Error::ShapeMismatch(format!(
            "{} conditioning coordinates and {} target coordinates for d = {d}",
            x_c.len(),
            x_i.len()
        )));
    }
    let m = x_c.len() / d;
    let da = mode.augmented_dim(d);
    let mut out = Mat::zeros((m, da));
    for (j, row) in x_c.chunks_exact(d).enumerate() {
        let mut o = out.row_mut(j);
        match mode {
            Augmentation::Concat => {
                for q in 0..d {
                    o[q] = row[q];
                    o[d + q] = x_i[q];
                }
            }
            Augmentation::DistanceDirection => {
                let dist = row.iter().zip(x_i).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if dist == 0.0 {
                    return Err(Error::ZeroDistance { row: j });
                }
                o[0] = dist;
                for q in 0..d {
                    o[1 + q] = (row[q] - x_i[q]) / dist;
                    o[1 + d + q] = x_i[q];
                }
            }
        }
    }
    Ok(out)
}

struct Recorded {
    beta: Var,
    sigma: Var,
    mu_cond: Option<Var>,
    mu_target: Option<Var>,
    offsets: Arc<[usize]>,
}

#[derive(Clone, Debug)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuVecModel {
    config: ModelConfig,
    params: Vec<f64>,
}

impl NeuVecModel {
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut params = vec![0.0; config.n_params()];
        let mut pos = 0;
        for (_, block) in config.blocks() {
            let n = block.n_params();
            block.init(&mut params[pos..pos + n], rng);
            pos += n;
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.n_params() {
            return Err(Error::DimensionMismatch {
                expected: config.n_params(),
                found: params.len(),
            });
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Start offset and length of a named block in the parameter vector.
    pub fn block_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut pos = 0;
        for (n, b) in self.config.blocks() {
            if n == name {
                return Some(pos..pos + b.n_params());
            }
            pos += b.n_params();
        }
        None
    }

    fn block(&self, name: &str) -> (&MlpConfig, &[f64], usize) {
        let range = self.block_range(name).expect("known block");
        let cfg = self
            .config
            .blocks()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, b)| b)
            .unwrap();
        (cfg, &self.params[range.clone()], range.start)
    }

    fn run_block(&self, tape: &mut Tape, name: &str, x: Var, mode: &mut Mode<'_>) -> Var {
        let (cfg, params, offset) = self.block(name);
        cfg.forward(tape, params, offset, x, mode.rng())
    }

    fn record(&self, tape: &mut Tape, groups: &[Group], mode: &mut Mode<'_>) -> Result<Recorded> {
        let d = self.config.d;
        let mut offsets = Vec::with_capacity(groups.len() + 1);
        offsets.push(0);
        for g in groups {
            g.check(d)?;
            offsets.push(offsets.last().unwrap() + g.k());
        }
        let rows = *offsets.last().unwrap();
        let offsets: Arc<[usize]> = Arc::from(offsets);

        let da = self.config.d_a();
        let mut aug = Mat::zeros((rows, da));
        for (g, w) in groups.iter().zip(offsets.windows(2)) {
            let a = augment(g.cond_locs(d), g.target_loc(d), d, self.config.augmentation)?;
            aug.slice_mut(ndarray::s![w[0]..w[1], ..]).assign(&a);
        }
        let a = tape.constant(aug);

        let f = self.run_block(tape, "phi_mu", a, mode);
        let total = tape.segment_sum(f, offsets.clone());
        let spread = tape.repeat(total, offsets.clone());
        let loo = tape.sub(spread, f);
        let summary = self.run_block(tape, "rho2_mu", loo, mode);
        let own = match self.config.rho1_input {
            Rho1Input::Phi => f,
            Rho1Input::Raw => a,
        };
        let joined = tape.concat(own, summary);
        let beta = self.run_block(tape, "rho1_mu", joined, mode);

        let fs = self.run_block(tape, "phi_sigma", a, mode);
        let pooled = tape.segment_sum(fs, offsets.clone());
        let raw = self.run_block(tape, "rho_sigma", pooled, mode);
        let sp = tape.softplus(raw);
        let sigma = tape.add_scalar(sp, SIGMA_FLOOR);

        let (mu_cond, mu_target) = if self.config.mean_net.is_some() {
            let cond = Mat::from_shape_fn((rows, d), |(r, q)| {
                let g = offsets.partition_point(|&o| o <= r) - 1;
                groups[g].locs[(r - offsets[g]) * d + q]
            });
            let targets = Mat::from_shape_fn((groups.len(), d), |(g, q)| groups[g].target_loc(d)[q]);
            let cv = tape.constant(cond);
            let tv = tape.constant(targets);
            let mc = self.run_block(tape, "mean_net", cv, mode);
            let mt = self.run_block(tape, "mean_net", tv, mode);
            (Some(mc), Some(mt))
        } else {
            (None, None)
        };
        Ok(Recorded {
            beta,
            sigma,
            mu_cond,
            mu_target,
            offsets,
        })
    }

    /// Records the summed per-group negative log-likelihood of one shard.
    fn record_nll_sum(&self, tape: &mut Tape, groups: &[Group], mode: &mut Mode<'_>) -> Result<Var> {
        let rec = self.record(tape, groups, mode)?;
        let rows = *rec.offsets.last().unwrap();
        let yc = Mat::from_shape_fn((rows, 1), |(r, _)| {
            let g = rec.offsets.partition_point(|&o| o <= r) - 1;
            groups[g].y[r - rec.offsets[g]]
        });
        let yt = Mat::from_shape_fn((groups.len(), 1), |(g, _)| groups[g].target_y());
        let yc = tape.constant(yc);
        let yt = tape.constant(yt);
        let resid_c = match rec.mu_cond {
            Some(mc) => tape.sub(yc, mc),
            None => yc,
        };
        let weighted = tape.mul(rec.beta, resid_c);
        let adjust = tape.segment_sum(weighted, rec.offsets.clone());
        let mean = match rec.mu_target {
            Some(mt) => tape.add(mt, adjust),
            None => adjust,
        };
        let err = tape.sub(yt, mean);
        let z = tape.div(err, rec.sigma);
        let z2 = tape.mul(z, z);
        let half = tape.scale(z2, 0.5);
        let log_sigma = tape.log(rec.sigma);
        let nll = tape.add(log_sigma, half);
        let total = tape.sum_all(nll);
        Ok(tape.add_scalar(total, HALF_LN_2PI * groups.len() as f64))
    }

    fn shard_rngs(groups: usize, mode: &mut Mode<'_>) -> Vec<Option<RngState>> {
        let shards = groups.div_ceil(SHARD_GROUPS);
        match mode {
            Mode::Eval => vec![None; shards],
            Mode::Train(rng) => (0..shards).map(|_| Some(rng.split())).collect(),
        }
    }

    /// Mean negative log-likelihood over groups and its gradient with
    /// respect to every parameter. Shards are differentiated on separate
    /// tapes in parallel and reduced in shard order.
    pub fn batch_nll_loss(&self, groups: &[Group], mut mode: Mode<'_>) -> Result<LossAndGrad> {
        if groups.is_empty() {
            return Err(Error::EmptyInput);
        }
        let rngs = Self::shard_rngs(groups.len(), &mut mode);
        let parts: Vec<(f64, Vec<f64>)> = groups
            .par_chunks(SHARD_GROUPS)
            .zip(rngs)
            .map(|(shard, rng)| {
                let mut rng = rng;
                let mut mode = match rng.as_mut() {
                    Some(r) => Mode::Train(r),
                    None => Mode::Eval,
                };
                let mut tape = Tape::new();
                let out = self.record_nll_sum(&mut tape, shard, &mut mode)?;
                let mut grad = vec![0.0; self.params.len()];
                tape.backward(out).scatter_params(&tape, &mut grad);
                Ok((tape.value(out)[[0, 0]], grad))
            })
            .collect::<Result<_>>()?;
        let n = groups.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.params.len()];
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        for g in &mut grad {
            *g /= n;
        }
        Ok(LossAndGrad { loss: loss / n, grad })
    }

    /// Mean negative log-likelihood without gradients.
    pub fn batch_nll(&self, groups: &[Group], mut mode: Mode<'_>) -> Result<f64> {
        if groups.is_empty() {
            return Err(Error::EmptyInput);
        }
        let rngs = Self::shard_rngs(groups.len(), &mut mode);
        let parts: Vec<f64> = groups
            .par_chunks(SHARD_GROUPS)
            .zip(rngs)
            .map(|(shard, mut rng)| {
                let mut mode = match rng.as_mut() {
                    Some(r) => Mode::Train(r),
                    None => Mode::Eval,
                };
                let mut tape = Tape::new();
                let out = self.record_nll_sum(&mut tape, shard, &mut mode)?;
                Ok(tape.value(out)[[0, 0]])
            })
            .collect::<Result<_>>()?;
        Ok(parts.iter().sum::<f64>() / groups.len() as f64)
    }

    /// Predictive mean and standard deviation of each group's target.
    /// Target responses are not read.
    pub fn predict(&self, groups: &[Group]) -> Result<Vec<Prediction>> {
        let parts: Vec<Vec<Prediction>> = groups
            .par_chunks(SHARD_GROUPS)
            .map(|shard| {
                let mut tape = Tape::new();
                let rec = self.record(&mut tape, shard, &mut Mode::Eval)?;
                let beta = tape.value(rec.beta);
                let sigma = tape.value(rec.sigma);
                let mc = rec.mu_cond.map(|v| tape.value(v));
                let mt = rec.mu_target.map(|v| tape.value(v));
                Ok(shard
                    .iter()
                    .enumerate()
                    .map(|(g, group)| {
                        let (lo, hi) = (rec.offsets[g], rec.offsets[g + 1]);
                        let adjust: f64 = (lo..hi)
                            .map(|r| {
                                let mu = mc.map_or(0.0, |m| m[[r, 0]]);
                                beta[[r, 0]] * (group.y[r - lo] - mu)
                            })
                            .sum();
                        Prediction {
                            mean: mt.map_or(0.0, |m| m[[g, 0]]) + adjust,
                            sd: sigma[[g, 0]],
                        }
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    fn single_group(&self, x_c: &[f64], x_i: &[f64]) -> Result<Group> {
        let d = self.config.d;
        if x_i.len() != d || !x_c.len().is_multiple_of(d) {
            return Err(Error::ShapeMismatch(format!(
                "{} conditioning coordinates and {} target coordinates for d = {d}",
                x_c.len(),
                x_i.len()
            )));
        }
        let k = x_c.len() / d;
        let mut locs = x_c.to_vec();
        locs.extend_from_slice(x_i);
        Ok(Group {
            locs,
            y: vec![0.0; k + 1],
        })
    }

    /// `σ̂ = softplus(ρ(Σⱼ φ(a_j))) + 1e-6` for one conditioning set.
    pub fn forward_sigma(&self, x_c: &[f64], x_i: &[f64], mut mode: Mode<'_>) -> Result<f64> {
        let group = self.single_group(x_c, x_i)?;
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, std::slice::from_ref(&group), &mut mode)?;
        Ok(tape.value(rec.sigma)[[0, 0]])
    }

    /// `β̂_j = ρ₁(φ(a_j), ρ₂(Σ_{k≠j} φ(a_k)))` for one conditioning set.
    pub fn forward_mu(&self, x_c: &[f64], x_i: &[f64], mut mode: Mode<'_>) -> Result<Vec<f64>> {
        let group = self.single_group(x_c, x_i)?;
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, std::slice::from_ref(&group), &mut mode)?;
        Ok(tape.value(rec.beta).column(0).to_vec())
    }

    pub fn forward_mean(&self, x: &[f64], mut mode: Mode<'_>) -> Result<f64> {
        let cfg = self.config.mean_net.as_ref().ok_or(Error::MeanNetAbsent)?;
        if x.len() != self.config.d {
            return Err(Error::DimensionMismatch {
                expected: self.config.d,
                found: x.len(),
            });
        }
        let range = self.block_range("mean_net").unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Mat::from_shape_vec((1, x.len()), x.to_vec()).unwrap());
        let out = cfg.forward(&mut tape, &self.params[range.clone()], range.start, xv, mode.rng());
        Ok(tape.value(out)[[0, 0]])
    }

    /// Gradient of [`NeuVecModel::forward_mean`] with respect to the full
    /// parameter vector (zero outside the mean block).
    pub fn forward_mean_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let cfg = self.config.mean_net.as_ref().ok_or(Error::MeanNetAbsent)?;
        let range = self.block_range("mean_net").unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Mat::from_shape_vec((1, x.len()), x.to_vec()).unwrap());
        let out = cfg.forward(&mut tape, &self.params[range.clone()], range.start, xv, None);
        let mut grad = vec![0.0; self.params.len()];
        tape.backward(out).scatter_params(&tape, &mut grad);
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perturbed(config: ModelConfig, seed: u64) -> NeuVecModel {
        let mut rng = RngState::new(seed);
        let mut model = NeuVecModel::new(config, &mut rng).unwrap();
        for p in model.params_mut() {
            *p += 0.1 * rng.standard_normal();
        }
        model
    }

    fn desk(d: usize) -> ModelConfig {
        ModelConfig::preset(Preset::Desk, d, Augmentation::Concat)
    }

    fn random_points(n: usize, d: usize, rng: &mut RngState) -> Vec<f64> {
        (0..n * d).map(|_| rng.uniform()).collect()
    }

    /// Plain-Rust MLP used as an independent forward oracle.
    fn naive_mlp(cfg: &MlpConfig, p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut pos = 0;
        let layers = cfg.widths.len() - 1;
        for (l, w) in cfg.widths.windows(2).enumerate() {
            let (fi, fo) = (w[0], w[1]);
            let mut out = vec![0.0; fo];
            for (o, v) in out.iter_mut().enumerate() {
                *v = p[pos + fi * fo + o];
                for i in 0..fi {
                    *v += h[i] * p[pos + i * fo + o];
                }
                if l + 1 < layers {
                    *v = v.tanh();
                }
            }
            pos += fi * fo + fo;
            h = out;
        }
        h
    }

    fn naive_block(model: &NeuVecModel, name: &str, x: &[f64]) -> Vec<f64> {
        let cfg = model.config().blocks().into_iter().find(|(n, _)| *n == name).unwrap().1.clone();
        let r = model.block_range(name).unwrap();
        naive_mlp(&cfg, &model.params()[r], x)
    }

    fn aug_rows(x_c: &[f64], x_i: &[f64], d: usize) -> Vec<Vec<f64>> {
        x_c.chunks(d).map(|r| r.iter().chain(x_i).copied().collect()).collect()
    }

    #[test]
    fn augmentation_layouts() {
        let a = augment(&[1.0], &[2.0], 1, Augmentation::Concat).unwrap();
        assert_eq!(a.as_slice().unwrap(), &[1.0, 2.0]);
        let a = augment(&[0.0; 9], &[0.0; 3], 3, Augmentation::Concat).unwrap();
        assert_eq!(a.dim(), (3, 6));
        let a = augment(&[1.5, 0.5, 0.5], &[0.5, 0.5, 0.5], 3, Augmentation::DistanceDirection).unwrap();
        assert_eq!(a.row(0).to_vec(), vec![1.0, 1.0, 0.0, 0.0, 0.5, 0.5, 0.5]);
        assert!(matches!(
            augment(&[0.1, 0.2, 0.5, 0.5], &[0.5, 0.5], 2, Augmentation::DistanceDirection),
            Err(Error::ZeroDistance { row: 1 })
        ));
        assert!(matches!(augment(&[0.0; 4], &[0.0; 3], 3, Augmentation::Concat), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn sigma_matches_naive_oracle() {
        let model = perturbed(desk(3), 11);
        let mut rng = RngState::new(12);
        let xc = random_points(30, 3, &mut rng);
        let xi = random_points(1, 3, &mut rng);
        let mut pooled = vec![0.0; model.config().d_l()];
        for row in aug_rows(&xc, &xi, 3) {
            for (p, v) in pooled.iter_mut().zip(naive_block(&model, "phi_sigma", &row)) {
                *p += v;
            }
        }
        let raw = naive_block(&model, "rho_sigma", &pooled)[0];
        let expect = raw.exp().ln_1p() + 1e-6;
        let got = model.forward_sigma(&xc, &xi, Mode::Eval).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect, "{got} vs {expect}");
    }

    #[test]
    fn mu_matches_naive_leave_one_out() {
        let model = perturbed(desk(3), 13);
        let mut rng = RngState::new(14);
        let xc = random_points(5, 3, &mut rng);
        let xi = random_points(1, 3, &mut rng);
        let rows = aug_rows(&xc, &xi, 3);
        let phis: Vec<Vec<f64>> = rows.iter().map(|r| naive_block(&model, "phi_mu", r)).collect();
        let got = model.forward_mu(&xc, &xi, Mode::Eval).unwrap();
        for j in 0..5 {
            let mut s = vec![0.0; phis[0].len()];
            for (k, p) in phis.iter().enumerate() {
                if k != j {
                    for (a, b) in s.iter_mut().zip(p) {
                        *a += b;
                    }
                }
            }
            let mut input = phis[j].clone();
            input.extend(naive_block(&model, "rho2_mu", &s));
            let expect = naive_block(&model, "rho1_mu", &input)[0];
            assert!((got[j] - expect).abs() <= 1e-10 * expect.abs().max(1e-3), "{j}: {} vs {expect}", got[j]);
        }
    }

    #[test]
    fn single_neighbor_uses_empty_sum() {
        let model = perturbed(desk(2), 15);
        let xc = [0.2, 0.9];
        let xi = [0.6, 0.1];
        let row: Vec<f64> = xc.iter().chain(&xi).copied().collect();
        let mut input = naive_block(&model, "phi_mu", &row);
        input.extend(naive_block(&model, "rho2_mu", &vec![0.0; 32]));
        let expect = naive_block(&model, "rho1_mu", &input)[0];
        let got = model.forward_mu(&xc, &xi, Mode::Eval).unwrap();
        assert!((got[0] - expect).abs() <= 1e-12 * expect.abs().max(1e-3));
    }

    #[test]
    fn raw_rho1_variant_sizes() {
        let cfg = desk(3).with_raw_rho1_input();
        assert_eq!(cfg.rho1_mu.widths[0], 6 + 32);
        let model = perturbed(cfg, 1);
        let out = model.forward_mu(&[0.1; 12], &[0.5; 3], Mode::Eval).unwrap();
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn zero_final_layer_gives_softplus_bias() {
        let mut model = perturbed(desk(3), 16);
        let r = model.block_range("rho_sigma").unwrap();
        let last = r.end - 33;
        model.params_mut()[last..r.end - 1].fill(0.0);
        model.params_mut()[r.end - 1] = 0.4;
        let s = model.forward_sigma(&[0.3; 9], &[0.1; 3], Mode::Eval).unwrap();
        assert_eq!(s, 0.4f64.exp().ln_1p() + 1e-6);
    }

    #[test]
    fn mean_network_behaviour() {
        let model = perturbed(desk(3), 17);
        assert!(matches!(model.forward_mean(&[0.0; 3], Mode::Eval), Err(Error::MeanNetAbsent)));

        let cfg = desk(3).with_mean_net().with_dropout(0.3);
        let mut model = perturbed(cfg, 18);
        let r = model.block_range("mean_net").unwrap();
        let a = model.forward_mean(&[0.2, 0.4, 0.6], Mode::Eval).unwrap();
        assert_eq!(a, model.forward_mean(&[0.2, 0.4, 0.6], Mode::Eval).unwrap());
        model.params_mut()[r.clone()].fill(0.0);
        assert_eq!(model.forward_mean(&[0.2, 0.4, 0.6], Mode::Eval).unwrap(), 0.0);
    }

    #[test]
    fn mean_network_gradient() {
        let cfg = desk(3).with_mean_net();
        let mut model = perturbed(cfg, 19);
        let x = [0.3, 0.8, 0.1];
        let grad = model.forward_mean_grad(&x).unwrap();
        let r = model.block_range("mean_net").unwrap();
        let h = 1e-6;
        for k in r {
            let orig = model.params()[k];
            model.params_mut()[k] = orig + h;
            let up = model.forward_mean(&x, Mode::Eval).unwrap();
            model.params_mut()[k] = orig - h;
            let dn = model.forward_mean(&x, Mode::Eval).unwrap();
            model.params_mut()[k] = orig;
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-4);
            assert!(err < 1e-5, "param {k}: {} vs {fd}", grad[k]);
        }
    }

    fn make_groups(n: usize, k: usize, d: usize, rng: &mut RngState) -> Vec<Group> {
        (0..n)
            .map(|_| Group {
                locs: random_points(k + 1, d, rng),
                y: (0..=k).map(|_| rng.standard_normal()).collect(),
            })
            .collect()
    }

    #[test]
    fn loss_of_trivial_predictor() {
        let mut model = perturbed(desk(3), 20);
        let r1 = model.block_range("rho1_mu").unwrap();
        model.params_mut()[r1.end - 33..r1.end].fill(0.0);
        let rs = model.block_range("rho_sigma").unwrap();
        model.params_mut()[rs.end - 33..rs.end].fill(0.0);
        // softplus(b) + 1e-6 = 1
        model.params_mut()[rs.end - 1] = (1.0f64 - 1e-6).exp_m1().ln();
        let mut rng = RngState::new(21);
        let mut groups = make_groups(3, 4, 3, &mut rng);
        for g in &mut groups {
            *g.y.last_mut().unwrap() = 0.0;
        }
        let l = model.batch_nll_loss(&groups, Mode::Eval).unwrap().loss;
        assert!((l - HALF_LN_2PI).abs() < 1e-12, "{l}");
    }

    #[test]
    fn identical_groups_average_to_single() {
        let model = perturbed(desk(3), 22);
        let mut rng = RngState::new(23);
        let g = make_groups(1, 6, 3, &mut rng);
        let single = model.batch_nll_loss(&g, Mode::Eval).unwrap().loss;
        let many = vec![g[0].clone(); 70];
        let batch = model.batch_nll_loss(&many, Mode::Eval).unwrap().loss;
        assert!((single - batch).abs() < 1e-12 * single.abs().max(1.0));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut model = perturbed(desk(3).with_mean_net(), 24);
        let mut rng = RngState::new(25);
        let groups = make_groups(40, 5, 3, &mut rng);
        let grad = model.batch_nll_loss(&groups, Mode::Eval).unwrap().grad;
        let h = 1e-6;
        for _ in 0..50 {
            let k = (rng.uniform() * model.n_params() as f64) as usize;
            let orig = model.params()[k];
            model.params_mut()[k] = orig + h;
            let up = model.batch_nll(&groups, Mode::Eval).unwrap();
            model.params_mut()[k] = orig - h;
            let dn = model.batch_nll(&groups, Mode::Eval).unwrap();
            model.params_mut()[k] = orig;
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
            assert!(err < 1e-4, "param {k}: {} vs {fd}", grad[k]);
        }
    }

    #[test]
    fn predictions_agree_with_loss() {
        let model = perturbed(desk(2).with_mean_net(), 26);
        let mut rng = RngState::new(27);
        let groups = make_groups(50, 3, 2, &mut rng);
        let preds = model.predict(&groups).unwrap();
        let mean_nll: f64 = preds
            .iter()
            .zip(&groups)
            .map(|(p, g)| p.nll(g.target_y()))
            .sum::<f64>()
            / 50.0;
        let loss = model.batch_nll(&groups, Mode::Eval).unwrap();
        assert!((mean_nll - loss).abs() < 1e-12);
    }

    #[test]
    fn train_mode_dropout_is_seeded() {
        let model = perturbed(desk(3).with_dropout(0.3), 28);
        let mut rng = RngState::new(29);
        let groups = make_groups(40, 4, 3, &mut rng);
        let a = model.batch_nll(&groups, Mode::Train(&mut RngState::new(1))).unwrap();
        let b = model.batch_nll(&groups, Mode::Train(&mut RngState::new(1))).unwrap();
        let e = model.batch_nll(&groups, Mode::Eval).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a, e);
    }

    #[test]
    fn config_validation() {
        let mut cfg = desk(3);
        cfg.rho2_mu.widths[0] = 7;
        assert!(NeuVecModel::new(cfg, &mut RngState::new(0)).is_err());
        for preset in [Preset::Table1, Preset::Table4, Preset::Desk] {
            let cfg = ModelConfig::preset(preset, 4, Augmentation::DistanceDirection);
            cfg.validate().unwrap();
            assert_eq!(cfg.d_a(), 9);
        }
        let t1 = ModelConfig::preset(Preset::Table1, 3, Augmentation::Concat);
        assert_eq!(t1.phi_mu.widths, vec![6, 128, 128, 128, 64]);
        assert_eq!(t1.rho1_mu.widths, vec![128, 128, 128, 128, 1]);
    }
}
