//! NeuVec training and scoring on observational data.

use std::collections::{BTreeMap, VecDeque};

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{build_application_plan, Dataset, YearPlan, N_INPUTS};
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, LocationSet};
use crate::nn::{Group, Mode, ModelConfig, NeuVecModel};
use crate::optim::{
    adamw_step, fit_kernel_params, schedule_lr, AdamWConfig, AdamWState, FitConfig, FitProblem, FitResult,
    Schedule,
};
use crate::rng::RngState;
use crate::sim::{evaluate_on, EvalReport, Predictor, TracePoint, TrainingBatch};
use crate::vecchia::ConditioningPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Train,
    Test,
}

/// One group per target position of `role`. Training targets need a full
/// conditioning set of `m` neighbors; test targets need at least one.
pub fn application_groups(dataset: &Dataset, plans: &BTreeMap<i32, YearPlan>, role: Role) -> Vec<Group> {
    let mut groups = vec![];
    for yp in plans.values() {
        let m = yp.plan.m();
        let positions = match role {
            Role::Train => 0..yp.n_train,
            Role::Test => yp.n_train..yp.obs.len(),
        };
        for p in positions {
            let nb = yp.neighbor_records(p);
            let keep = match role {
                Role::Train => nb.len() == m && m > 0,
                Role::Test => !nb.is_empty(),
            };
            if !keep {
                continue;
            }
            let members: Vec<usize> = nb.into_iter().chain([yp.obs[p]]).collect();
            groups.push(Group {
                locs: members.iter().flat_map(|&i| dataset.inputs[i]).collect(),
                y: members.iter().map(|&i| dataset.records[i].response).collect(),
            });
        }
    }
    groups
}

/// Fits an ARD Matérn-1.5 kernel to the centered training responses by
/// Vecchia likelihood, with unit-lengthscale conditioning sets of size
/// `m` built under the same year and float rules as the final plan. The
/// fitted lengthscales are what [`build_application_plan`] expects.
pub fn fit_application_kernel(dataset: &Dataset, m: usize, cfg: &FitConfig) -> Result<FitResult> {
    let plans = build_application_plan(dataset, m, &[1.0; N_INPUTS])?;
    let mean = dataset.train_response_mean();
    let mut data = vec![];
    for yp in plans.values().filter(|yp| yp.n_train > 0) {
        let n = yp.n_train;
        let train = &yp.obs[..n];
        let locs = LocationSet::new(N_INPUTS, train.iter().flat_map(|&i| dataset.inputs[i]).collect())?;
        let y: Vec<f64> = train.iter().map(|&i| dataset.records[i].response - mean).collect();
        let neighbors = (0..n).map(|p| yp.plan.neighbors(p).to_vec()).collect();
        let plan = ConditioningPlan::new((0..n).collect(), neighbors, yp.plan.m())?;
        data.push((locs, y, plan));
    }
    let count: usize = data.iter().map(|(_, y, _)| y.len()).sum();
    if count < 2 {
        return Err(Error::EmptyDataset);
    }
    let var = data.iter().flat_map(|(_, y, _)| y).map(|v| v * v).sum::<f64>() / count as f64;
    let init = KernelSpec::Mt15 {
        sigma: (0.9 * var).sqrt().max(1e-3),
        lengthscales: vec![0.3; N_INPUTS],
        nu: 1.5,
        tau2: (0.1 * var).max(1e-6),
    };
    let problems: Vec<FitProblem<'_>> = data
        .iter()
        .map(|(locs, y, plan)| FitProblem { locs, y, plan })
        .collect();
    fit_kernel_params(&init, &problems, cfg)
}

/// Initializes a model whose mean network starts at the training mean of
/// the response, so early iterations need not learn the offset.
pub fn init_application_model(config: ModelConfig, dataset: &Dataset, rng: &mut RngState) -> Result<NeuVecModel> {
    if config.d != N_INPUTS {
        return Err(Error::DimensionMismatch {
            expected: N_INPUTS,
            found: config.d,
        });
    }
    let mut model = NeuVecModel::new(config, rng)?;
    let bias = model.block_range("mean_net").ok_or(Error::MeanNetAbsent)?.end - 1;
    model.params_mut()[bias] = dataset.train_response_mean();
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppTrainConfig {
    pub iters: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub lr_end: f64,
    pub log_every: u64,
}

impl AppTrainConfig {
    pub fn new(iters: u64, batch_size: usize) -> Self {
        Self {
            iters,
            batch_size,
            optimizer: AdamWConfig::default(),
            lr_end: 1e-5,
            log_every: 100,
        }
    }
}

/// Minibatch training over a fixed pool of groups, sampled with
/// replacement. Dropout is active as configured in the model.
pub fn train_application(
    mut model: NeuVecModel,
    pool: &[Group],
    cfg: &AppTrainConfig,
    seed: u64,
) -> Result<(NeuVecModel, Vec<TracePoint>)> {
    if pool.is_empty() {
        return Err(Error::EmptyInput);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be >= 1".into()));
    }
    let schedule = Schedule::cosine(cfg.optimizer.lr, cfg.lr_end, cfg.iters);
    let mut opt = AdamWState::new(model.n_params(), cfg.optimizer.clone());
    let mut rng = RngState::new(seed);
    let mut recent = VecDeque::with_capacity(100);
    let mut trace = vec![];
    for it in 0..cfg.iters {
        opt.set_lr(schedule_lr(&schedule, it)?);
        let batch: Vec<Group> = (0..cfg.batch_size)
            .map(|_| pool[rng.gen_range(0..pool.len())].clone())
            .collect();
        let out = model.batch_nll_loss(&batch, Mode::Train(&mut rng))?;
        if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iter: it });
        }
        adamw_step(&mut opt, model.params_mut(), &out.grad)?;
        if recent.len() == 100 {
            recent.pop_front();
        }
        recent.push_back(out.loss);
        let done = it + 1;
        if cfg.log_every > 0 && done % cfg.log_every == 0 {
            let smoothed = recent.iter().sum::<f64>() / recent.len() as f64;
            info!("iteration {done}: loss {:.5}, trailing mean {smoothed:.5}", out.loss);
            trace.push(TracePoint {
                iter: done,
                loss: out.loss,
                smoothed,
            });
        }
    }
    Ok((model, trace))
}

/// Scores the model on held-out targets.
pub fn evaluate_application(model: &NeuVecModel, groups: Vec<Group>, m: usize, label: &str) -> Result<EvalReport> {
    let batch = TrainingBatch {
        d: N_INPUTS,
        m,
        groups,
    };
    evaluate_on(&Predictor::NeuVec(model), &batch, label)
}
