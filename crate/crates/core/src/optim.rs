//! AdamW, the cosine learning-rate schedule and a finite-difference fitter
//! for classical kernel parameters.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, LocationSet};
use crate::vecchia::{kernel_laws, vecchia_nll, ConditioningPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescales the gradient to at most this Euclidean norm when set.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub config: AdamWConfig,
}

impl AdamWState {
    pub fn new(n_params: usize, config: AdamWConfig) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            config,
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ(1 − lr·wd)`, then the bias-corrected Adam step.
pub fn adamw_step(state: &mut AdamWState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "params {n}, grads {}, moments {}",
            grads.len(),
            state.m.len()
        )));
    }
    let cfg = &state.config;
    let clip = match cfg.clip_norm {
        Some(max) => {
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let t = state.step as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2_sqrt = (1.0 - b2.powi(t)).sqrt();
    let step_size = cfg.lr / bc1;
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for i in 0..n {
        let g = grads[i] * clip;
        params[i] *= decay;
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let denom = state.v[i].sqrt() / bc2_sqrt + cfg.eps;
        params[i] -= step_size * state.m[i] / denom;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_iters: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr_start: 1e-3,
            lr_end: 1e-5,
            total_iters: 0,
        }
    }
}

impl Schedule {
    pub fn cosine(lr_start: f64, lr_end: f64, total_iters: u64) -> Self {
        Self {
            lr_start,
            lr_end,
            total_iters,
        }
    }
}

/// `lr_end + (lr_start − lr_end)(1 + cos(π t / T)) / 2`.
pub fn schedule_lr(schedule: &Schedule, iter: u64) -> Result<f64> {
    if iter > schedule.total_iters {
        return Err(Error::IterOutOfRange {
            iter,
            total: schedule.total_iters,
        });
    }
    if iter == schedule.total_iters {
        return Ok(if schedule.total_iters == 0 {
            schedule.lr_start
        } else {
            schedule.lr_end
        });
    }
    let frac = iter as f64 / schedule.total_iters as f64;
    let cos = (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0;
    Ok(schedule.lr_end + (schedule.lr_start - schedule.lr_end) * cos)
}

/// One independent dataset: locations, responses and its conditioning plan.
#[derive(Clone, Copy, Debug)]
pub struct FitProblem<'a> {
    pub locs: &'a LocationSet,
    pub y: &'a [f64],
    pub plan: &'a ConditioningPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iters: usize,
    pub lr: f64,
    /// Central-difference step in the unconstrained coordinates.
    pub fd_step: f64,
    /// Names from [`KernelSpec::param_names`] that stay fixed.
    #[serde(default)]
    pub frozen: Vec<String>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iters: 150,
            lr: 0.05,
            fd_step: 1e-4,
            frozen: vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: KernelSpec,
    /// Mean negative log-likelihood per observation at `spec`.
    pub nll: f64,
    pub initial_nll: f64,
    pub iterations: usize,
}

fn mean_nll(spec: &KernelSpec, problems: &[FitProblem<'_>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for p in problems {
        let laws = kernel_laws(spec, p.locs, p.plan)?;
        total += vecchia_nll(&laws, p.plan, p.y, &vec![0.0; p.y.len()])?;
        count += p.y.len();
    }
    Ok(total / count as f64)
}

/// Minimizes the mean Vecchia NLL over the unconstrained parameters with
/// AdamW on central finite-difference gradients. The best iterate seen is
/// returned, so the final NLL never exceeds the initial one.
pub fn fit_kernel_params(init: &KernelSpec, problems: &[FitProblem<'_>], cfg: &FitConfig) -> Result<FitResult> {
    init.validate()?;
    if problems.is_empty() {
        return Err(Error::EmptyInput);
    }
    let names = init.param_names();
    for f in &cfg.frozen {
        if !names.contains(f) {
            return Err(Error::InvalidParameter(format!("unknown parameter `{f}`")));
        }
    }
    let free: Vec<usize> = (0..names.len()).filter(|&i| !cfg.frozen.contains(&names[i])).collect();
    let limit = 2 * init.d() + 2;
    if free.len() > limit {
        return Err(Error::InvalidParameter(format!(
            "{} free parameters exceed the limit of {limit}; freeze some",
            free.len()
        )));
    }
    let objective = |theta: &[f64], iter: usize| -> Result<f64> {
        let spec = init.from_unconstrained(theta)?;
        match mean_nll(&spec, problems) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) | Err(Error::NotPositiveDefinite { .. }) => Err(Error::NonFiniteLoss { iter: iter as u64 }),
            Err(e) => Err(e),
        }
    };

    let mut theta = init.to_unconstrained();
    let initial_nll = objective(&theta, 0)?;
    let (mut best, mut best_theta) = (initial_nll, theta.clone());
    let mut state = AdamWState::new(
        free.len(),
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    );
    let h = cfg.fd_step;
    for iter in 0..cfg.iters {
        let mut grad = vec![0.0; free.len()];
        for (g, &i) in grad.iter_mut().zip(&free) {
            let mut up = theta.clone();
            up[i] += h;
            let mut dn = theta.clone();
            dn[i] -= h;
            *g = (objective(&up, iter)? - objective(&dn, iter)?) / (2.0 * h);
        }
        let mut sub: Vec<f64> = free.iter().map(|&i| theta[i]).collect();
        adamw_step(&mut state, &mut sub, &grad)?;
        for (&i, v) in free.iter().zip(sub) {
            theta[i] = v;
        }
        let value = objective(&theta, iter + 1)?;
        debug!("kernel fit iteration {}: nll {value:.6}", iter + 1);
        if value < best {
            best = value;
            best_theta.clone_from(&theta);
        }
    }
    Ok(FitResult {
        spec: init.from_unconstrained(&best_theta)?,
        nll: best,
        initial_nll,
        iterations: cfg.iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{covariance_matrix, KernelFamily};
    use crate::linalg::{cholesky, sample_mvn};
    use crate::rng::RngState;
    use crate::vecchia::build_plan;

    fn state(n: usize, lr: f64, wd: f64) -> AdamWState {
        AdamWState::new(
            n,
            AdamWConfig {
                lr,
                weight_decay: wd,
                ..AdamWConfig::default()
            },
        )
    }

    #[test]
    fn zero_gradient_identities() {
        let mut p = vec![0.5, -1.25, 3.0];
        let orig = p.clone();
        let mut s = state(3, 1e-3, 0.0);
        adamw_step(&mut s, &mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, orig);

        let mut s = state(3, 1e-3, 1e-4);
        adamw_step(&mut s, &mut p, &[0.0; 3]).unwrap();
        for (a, b) in p.iter().zip(&orig) {
            assert_eq!(*a, b * (1.0 - 1e-3 * 1e-4));
        }
    }

    #[test]
    fn two_steps_constant_gradient() {
        let lr = 1e-3;
        let mut p = vec![0.7];
        let mut s = state(1, lr, 0.0);
        adamw_step(&mut s, &mut p, &[1.0]).unwrap();
        adamw_step(&mut s, &mut p, &[1.0]).unwrap();
        // Both bias-corrected moments equal 1 at every step.
        let expect = 0.7 - 2.0 * lr / (1.0 + 1e-8);
        assert!((p[0] - expect).abs() < 1e-12);
        assert!((s.m[0] - 0.19).abs() < 1e-15);
        assert!((s.v[0] - 0.001999).abs() < 1e-15);
    }

    #[test]
    fn clipping_limits_gradient_norm() {
        let mut a = vec![0.0; 2];
        let mut b = vec![0.0; 2];
        let mut sa = state(2, 1e-2, 0.0);
        sa.config.clip_norm = Some(1.0);
        let mut sb = state(2, 1e-2, 0.0);
        adamw_step(&mut sa, &mut a, &[30.0, 40.0]).unwrap();
        adamw_step(&mut sb, &mut b, &[0.6, 0.8]).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
        assert!(adamw_step(&mut sa, &mut a, &[1.0]).is_err());
    }

    #[test]
    fn cosine_schedule() {
        let s = Schedule::cosine(1e-3, 1e-5, 1000);
        assert_eq!(schedule_lr(&s, 0).unwrap(), 1e-3);
        assert_eq!(schedule_lr(&s, 1000).unwrap(), 1e-5);
        assert!((schedule_lr(&s, 500).unwrap() - 5.05e-4).abs() < 1e-15);
        assert!(matches!(schedule_lr(&s, 1001), Err(Error::IterOutOfRange { .. })));
        let mut prev = f64::INFINITY;
        for t in 0..=1000 {
            let lr = schedule_lr(&s, t).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(schedule_lr(&Schedule::cosine(1e-3, 1e-5, 0), 0).unwrap(), 1e-3);
    }

    fn simulated(n: usize, seed: u64) -> (LocationSet, Vec<f64>, KernelSpec) {
        let mut rng = RngState::new(seed);
        let spec = KernelSpec::scenario_default(KernelFamily::Mt15, 3).unwrap();
        let locs = LocationSet::new(3, (0..n * 3).map(|_| rng.uniform()).collect()).unwrap();
        let cov = covariance_matrix(&spec, &locs).unwrap();
        let y = sample_mvn(&vec![0.0; n], &cholesky(&cov).unwrap(), &mut rng).unwrap();
        (locs, y, spec)
    }

    #[test]
    fn fit_from_truth_does_not_increase_nll() {
        let (locs, y, spec) = simulated(200, 3);
        let plan = build_plan(&locs, 10, &[1.0; 3]).unwrap();
        let problems = [FitProblem { locs: &locs, y: &y, plan: &plan }];
        let cfg = FitConfig {
            iters: 10,
            frozen: vec!["log_lengthscale_1".into()],
            ..FitConfig::default()
        };
        let fit = fit_kernel_params(&spec, &problems, &cfg).unwrap();
        assert!(fit.nll <= fit.initial_nll);
        let KernelSpec::Mt15 { lengthscales, .. } = &fit.spec else { panic!() };
        assert_eq!(lengthscales[1], 0.3f64.ln().exp());
    }

    #[test]
    fn too_many_free_parameters() {
        let (locs, y, _) = simulated(20, 4);
        let plan = build_plan(&locs, 5, &[1.0; 3]).unwrap();
        let problems = [FitProblem { locs: &locs, y: &y, plan: &plan }];
        let sm = KernelSpec::spectral_mixture_init(3, 6, &mut RngState::new(1));
        assert!(matches!(
            fit_kernel_params(&sm, &problems, &FitConfig::default()),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn recovers_lengthscales() {
        let (locs, y, _) = simulated(2000, 5);
        let plan = build_plan(&locs, 10, &[1.0; 3]).unwrap();
        let problems = [FitProblem { locs: &locs, y: &y, plan: &plan }];
        let init = KernelSpec::Mt15 {
            sigma: 1.0,
            lengthscales: vec![0.15, 0.5, 0.2],
            nu: 1.5,
            tau2: 0.05,
        };
        let fit = fit_kernel_params(&init, &problems, &FitConfig::default()).unwrap();
        let KernelSpec::Mt15 { lengthscales, .. } = &fit.spec else { panic!() };
        for l in lengthscales {
            assert!((l - 0.3).abs() <= 0.09, "{lengthscales:?}");
        }
    }
}
