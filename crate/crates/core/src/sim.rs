//! Simulated training data, the training loop and predictive evaluation.

use std::collections::VecDeque;
use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{covariance_matrix, KernelFamily, KernelSpec, LocationSet};
use crate::linalg::{cholesky, sample_mvn};
use crate::nn::{Checkpoint, Group, Mode, NeuVecModel};
use crate::optim::{
    adamw_step, fit_kernel_params, schedule_lr, AdamWConfig, AdamWState, FitConfig, FitProblem, FitResult,
    Schedule,
};
use crate::rng::RngState;
use crate::vecchia::{exact_conditional, ConditioningPlan, Prediction};

/// Latin hypercube design on `[0, 1]^d`: in every dimension each of the
/// `n` bins `[k/n, (k+1)/n)` holds exactly one point, placed uniformly
/// within its bin.
pub fn lhs_sample(n: usize, d: usize, rng: &mut RngState) -> Result<LocationSet> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut coords = vec![0.0; n * d];
    let mut bins: Vec<usize> = (0..n).collect();
    for q in 0..d {
        bins.shuffle(rng);
        for (i, &b) in bins.iter().enumerate() {
            coords[i * d + q] = (b as f64 + rng.uniform()) / n as f64;
        }
    }
    LocationSet::new(d, coords)
}

/// How designs are drawn for a batch of groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignLayout {
    /// One Latin hypercube over all `n_groups · (m + 1)` points, cut into
    /// consecutive groups.
    #[default]
    Batch,
    /// An independent `(m + 1)`-point Latin hypercube per group.
    PerGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub d: usize,
    pub m: usize,
    pub groups: Vec<Group>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

pub fn simulate_batch(spec: &KernelSpec, m: usize, n_groups: usize, rng: &mut RngState) -> Result<TrainingBatch> {
    simulate_batch_with(spec, m, n_groups, DesignLayout::default(), rng)
}

/// Draws `n_groups` independent zero-mean realizations on `m + 1` points
/// each. Responses use one derived seed per group, so groups can be
/// simulated in parallel with a result independent of thread count.
pub fn simulate_batch_with(
    spec: &KernelSpec,
    m: usize,
    n_groups: usize,
    layout: DesignLayout,
    rng: &mut RngState,
) -> Result<TrainingBatch> {
    spec.validate()?;
    if n_groups == 0 {
        return Err(Error::EmptyInput);
    }
    let d = spec.d();
    let k = m + 1;
    let design = match layout {
        DesignLayout::Batch => Some(lhs_sample(n_groups * k, d, rng)?),
        DesignLayout::PerGroup => None,
    };
    let seeds: Vec<u64> = (0..n_groups).map(|_| rng.next_u64()).collect();
    let groups = seeds
        .into_par_iter()
        .enumerate()
        .map(|(g, seed)| {
            let mut local = RngState::new(seed);
            let locs = match &design {
                Some(all) => LocationSet::new(d, all.coords()[g * k * d..(g + 1) * k * d].to_vec())?,
                None => lhs_sample(k, d, &mut local)?,
            };
            let cov = covariance_matrix(spec, &locs)?;
            let y = sample_mvn(&vec![0.0; k], &cholesky(&cov)?, &mut local)?;
            Ok(Group {
                locs: locs.coords().to_vec(),
                y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingBatch { d, m, groups })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scenario: KernelSpec,
    pub m: usize,
    pub iters: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_lr_end")]
    pub lr_end: f64,
    #[serde(default)]
    pub layout: DesignLayout,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

fn default_lr_end() -> f64 {
    1e-5
}

fn default_log_every() -> u64 {
    100
}

impl TrainConfig {
    pub fn new(scenario: KernelSpec, m: usize, iters: u64, batch_size: usize) -> Self {
        Self {
            scenario,
            m,
            iters,
            batch_size,
            optimizer: AdamWConfig::default(),
            lr_end: default_lr_end(),
            layout: DesignLayout::default(),
            log_every: default_log_every(),
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::cosine(self.optimizer.lr, self.lr_end, self.iters)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iter: u64,
    pub loss: f64,
    /// Mean of the trailing (up to) 100 iteration losses.
    pub smoothed: f64,
}

const SMOOTHING_WINDOW: usize = 100;

/// Resumable simulation-study training run: fresh data every iteration,
/// cosine learning rate, AdamW.
pub struct Trainer {
    pub model: NeuVecModel,
    pub optimizer: AdamWState,
    pub config: TrainConfig,
    rng: RngState,
    iteration: u64,
    recent: VecDeque<f64>,
    trace: Vec<TracePoint>,
}

#[derive(Serialize, Deserialize)]
struct ResumeMeta {
    train: TrainConfig,
    recent_losses: Vec<f64>,
}

impl Trainer {
    pub fn new(model: NeuVecModel, config: TrainConfig, seed: u64) -> Result<Self> {
        if config.scenario.d() != model.config().d {
            return Err(Error::DimensionMismatch {
                expected: model.config().d,
                found: config.scenario.d(),
            });
        }
        if config.batch_size == 0 || config.m == 0 {
            return Err(Error::InvalidParameter("batch size and m must be >= 1".into()));
        }
        config.scenario.validate()?;
        let optimizer = AdamWState::new(model.n_params(), config.optimizer.clone());
        Ok(Self {
            model,
            optimizer,
            config,
            rng: RngState::new(seed),
            iteration: 0,
            recent: VecDeque::with_capacity(SMOOTHING_WINDOW),
            trace: vec![],
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn trace(&self) -> &[TracePoint] {
        &self.trace
    }

    /// Runs one iteration and returns its training loss.
    pub fn step(&mut self) -> Result<f64> {
        let it = self.iteration;
        let lr = schedule_lr(&self.config.schedule(), it)?;
        self.optimizer.set_lr(lr);
        let batch = simulate_batch_with(
            &self.config.scenario,
            self.config.m,
            self.config.batch_size,
            self.config.layout,
            &mut self.rng,
        )?;
        let out = self.model.batch_nll_loss(&batch.groups, Mode::Train(&mut self.rng))?;
        if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iter: it });
        }
        adamw_step(&mut self.optimizer, self.model.params_mut(), &out.grad)?;
        self.iteration += 1;
        if self.recent.len() == SMOOTHING_WINDOW {
            self.recent.pop_front();
        }
        self.recent.push_back(out.loss);
        if self.config.log_every > 0 && self.iteration.is_multiple_of(self.config.log_every) {
            let smoothed = self.smoothed_loss();
            info!("iteration {}: loss {:.5}, trailing mean {smoothed:.5}", self.iteration, out.loss);
            self.trace.push(TracePoint {
                iter: self.iteration,
                loss: out.loss,
                smoothed,
            });
        }
        Ok(out.loss)
    }

    pub fn smoothed_loss(&self) -> f64 {
        self.recent.iter().sum::<f64>() / self.recent.len().max(1) as f64
    }

    /// Steps until `config.iters` iterations are done.
    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.config.iters {
            self.step()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = ResumeMeta {
            train: self.config.clone(),
            recent_losses: self.recent.iter().copied().collect(),
        };
        Checkpoint {
            model: self.model.clone(),
            seed: self.rng.seed(),
            iteration: self.iteration,
            rng: Some(self.rng.snapshot()),
            optimizer: Some(self.optimizer.clone()),
            meta: serde_json::to_value(meta).expect("plain data serializes"),
        }
    }

    /// Continues a run saved by [`Trainer::checkpoint`]. `iters` may extend
    /// the original budget, which also stretches the schedule.
    pub fn resume(ckpt: Checkpoint, iters: Option<u64>) -> Result<Self> {
        let meta: ResumeMeta = serde_json::from_value(ckpt.meta)
            .map_err(|e| Error::Checkpoint(format!("checkpoint carries no training state: {e}")))?;
        let mut config = meta.train;
        if let Some(n) = iters {
            config.iters = n;
        }
        let rng = match ckpt.rng {
            Some(s) => RngState::restore(s),
            None => RngState::new(ckpt.seed),
        };
        let optimizer = ckpt
            .optimizer
            .unwrap_or_else(|| AdamWState::new(ckpt.model.n_params(), config.optimizer.clone()));
        Ok(Self {
            model: ckpt.model,
            optimizer,
            config,
            rng,
            iteration: ckpt.iteration,
            recent: meta.recent_losses.into(),
            trace: vec![],
        })
    }
}

/// Trains `model` for `config.iters` iterations and returns it with the
/// loss trace.
pub fn train(model: NeuVecModel, config: TrainConfig, seed: u64) -> Result<(NeuVecModel, Vec<TracePoint>)> {
    let mut trainer = Trainer::new(model, config, seed)?;
    trainer.run()?;
    Ok((trainer.model, trainer.trace))
}

pub enum Predictor<'a> {
    NeuVec(&'a NeuVecModel),
    /// A parametric kernel predicting with exact kriging on each group.
    Kernel { spec: &'a KernelSpec, label: String },
}

impl Predictor<'_> {
    pub fn label(&self) -> String {
        match self {
            Predictor::NeuVec(_) => "NeuVec".into(),
            Predictor::Kernel { label, .. } => label.clone(),
        }
    }

    pub fn predict(&self, batch: &TrainingBatch) -> Result<Vec<Prediction>> {
        match self {
            Predictor::NeuVec(model) => model.predict(&batch.groups),
            Predictor::Kernel { spec, .. } => batch
                .groups
                .par_iter()
                .map(|g| {
                    let k = g.k();
                    let locs = LocationSet::new(batch.d, g.locs.clone())?;
                    let c: Vec<usize> = (0..k).collect();
                    let law = exact_conditional(spec, &locs, k, &c)?;
                    let mean = law.beta.iter().zip(g.cond_y()).map(|(b, y)| b * y).sum();
                    Ok(Prediction { mean, sd: law.sigma })
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub method: String,
    pub m: usize,
    pub n_test: usize,
    pub mse: f64,
    pub nll: f64,
}

/// Scores predictions of each group's target.
pub fn evaluate_on(predictor: &Predictor<'_>, test: &TrainingBatch, scenario: &str) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyInput);
    }
    let preds = predictor.predict(test)?;
    let n = preds.len() as f64;
    let (mut se, mut nll) = (0.0, 0.0);
    for (p, g) in preds.iter().zip(&test.groups) {
        let y = g.target_y();
        se += (y - p.mean) * (y - p.mean);
        nll += p.nll(y);
    }
    Ok(EvalReport {
        scenario: scenario.to_string(),
        method: predictor.label(),
        m: test.m,
        n_test: test.len(),
        mse: se / n,
        nll: nll / n,
    })
}

/// Simulates `n_test` fresh groups from `scenario` and scores `predictor`.
pub fn evaluate(
    predictor: &Predictor<'_>,
    scenario: &KernelSpec,
    m: usize,
    n_test: usize,
    rng: &mut RngState,
) -> Result<EvalReport> {
    let test = simulate_batch(scenario, m, n_test, rng)?;
    evaluate_on(predictor, &test, scenario.family().name())
}

/// Fits an MT15 kernel by maximum likelihood on `n_groups` simulated
/// groups (each group's joint density, exact within the group).
pub fn fit_mt15_baseline(
    scenario: &KernelSpec,
    m: usize,
    n_groups: usize,
    cfg: &FitConfig,
    rng: &mut RngState,
) -> Result<FitResult> {
    let data = simulate_batch(scenario, m, n_groups, rng)?;
    let locs: Vec<LocationSet> = data
        .groups
        .iter()
        .map(|g| LocationSet::new(data.d, g.locs.clone()))
        .collect::<Result<_>>()?;
    let plan = ConditioningPlan::full(m + 1);
    let problems: Vec<FitProblem<'_>> = locs
        .iter()
        .zip(&data.groups)
        .map(|(l, g)| FitProblem {
            locs: l,
            y: &g.y,
            plan: &plan,
        })
        .collect();
    let init = KernelSpec::scenario_default(KernelFamily::Mt15, data.d)?;
    fit_kernel_params(&init, &problems, cfg)
}

/// Writes reports as a comma-separated table with a header row.
pub fn write_reports_csv<W: Write>(out: W, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_csv<W: Write>(out: W, trace: &[TracePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in trace {
        w.serialize(t).map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}
