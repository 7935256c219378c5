use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;

use neuvec::app::{
    application_groups, evaluate_application, fit_application_kernel, init_application_model, train_application,
    AppTrainConfig, Role,
};
use neuvec::dataio::{build_application_plan, build_dataset, ingest_csv, subsample_per_float, Dataset, N_INPUTS};
use neuvec::kernels::KernelSpec;
use neuvec::nn::{load_checkpoint, save_checkpoint, Augmentation, Checkpoint, ModelConfig, NeuVecModel, Preset};
use neuvec::optim::FitConfig;
use neuvec::rng::RngState;
use neuvec::sim::{
    evaluate_on, fit_mt15_baseline, simulate_batch, write_reports_csv, write_trace_csv, Predictor, TrainConfig,
    Trainer,
};
use neuvec::{Error, Result};

use crate::settings::Settings;

const DEFAULT_BATCH: usize = 256;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn fit_config(s: &Settings) -> FitConfig {
    let mut cfg = FitConfig::default();
    if let Some(n) = s.fit_iters() {
        cfg.iters = n;
    }
    cfg
}

fn read_dataset(s: &Settings) -> Result<Dataset> {
    let path = s.data().ok_or_else(|| Error::Config("missing required setting `data`".into()))?;
    let text = fs::read(path)?;
    serde_json::from_slice(&text).map_err(|e| Error::Parse {
        row: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

fn read_lengthscales(s: &Settings) -> Result<Vec<f64>> {
    let path = s.kernel().ok_or_else(|| Error::Config("missing required setting `kernel`".into()))?;
    match KernelSpec::from_toml_str(&fs::read_to_string(path)?)? {
        KernelSpec::Mt15 { lengthscales, .. } if lengthscales.len() == N_INPUTS => Ok(lengthscales),
        _ => Err(Error::Config(format!(
            "{} must hold an MT15 kernel with {N_INPUTS} lengthscales",
            path.display()
        ))),
    }
}

fn model_config(s: &Settings, d: usize, default: Preset) -> Result<ModelConfig> {
    let preset = s.preset().map(str::parse).transpose()?.unwrap_or(default);
    let aug = s
        .augmentation()
        .map(str::parse)
        .transpose()?
        .unwrap_or(Augmentation::Concat);
    Ok(ModelConfig::preset(preset, d, aug))
}

pub fn simulate(s: &Settings) -> Result<()> {
    let spec = s.scenario()?;
    let (m, n) = (s.m()?, s.batch()?);
    let out = s.out()?;
    let mut rng = RngState::new(s.seed());
    let mut w = create(out)?;
    write!(w, "batch,group,position")?;
    for q in 0..spec.d() {
        write!(w, ",x{q}")?;
    }
    writeln!(w, ",y")?;
    for b in 0..s.batches() {
        let batch = simulate_batch(&spec, m, n, &mut rng)?;
        for (g, group) in batch.groups.iter().enumerate() {
            for (p, x) in group.locs.chunks_exact(batch.d).enumerate() {
                write!(w, "{b},{g},{p}")?;
                for v in x {
                    write!(w, ",{v}")?;
                }
                writeln!(w, ",{}", group.y[p])?;
            }
        }
    }
    w.flush()?;
    info!("wrote {} batch(es) of {n} groups to {}", s.batches(), out.display());
    Ok(())
}

pub fn train(s: &Settings) -> Result<()> {
    if s.data().is_some() {
        return train_on_data(s);
    }
    let out = s.out()?;
    let mut trainer = match s.resume() {
        Some(path) => Trainer::resume(load_checkpoint(path)?, s.iters().ok())?,
        None => {
            let spec = s.scenario()?;
            let mut mc = model_config(s, spec.d(), Preset::Desk)?;
            if let Some(p) = s.dropout() {
                mc = mc.with_dropout(p);
            }
            let model = NeuVecModel::new(mc, &mut RngState::new(s.seed()))?;
            let mut tc = TrainConfig::new(spec, s.m()?, s.iters()?, s.batch()?);
            if let Some(lr) = s.lr() {
                tc.optimizer.lr = lr;
            }
            Trainer::new(model, tc, s.seed().wrapping_add(1))?
        }
    };
    let stop = s.stop_after().unwrap_or(u64::MAX).min(trainer.config.iters);
    while trainer.iteration() < stop {
        trainer.step()?;
    }
    save_checkpoint(out, &trainer.checkpoint())?;
    if let Some(path) = s.trace() {
        write_trace_csv(create(path)?, trainer.trace())?;
    }
    info!(
        "saved {} after {} iterations (trailing loss {:.5})",
        out.display(),
        trainer.iteration(),
        trainer.smoothed_loss()
    );
    Ok(())
}

fn train_on_data(s: &Settings) -> Result<()> {
    let out = s.out()?;
    let dataset = read_dataset(s)?;
    let lengthscales = read_lengthscales(s)?;
    let m = s.m_or(30);
    let plans = build_application_plan(&dataset, m, &lengthscales)?;
    let pool = application_groups(&dataset, &plans, Role::Train);
    let mc = model_config(s, N_INPUTS, Preset::Table4)?
        .with_mean_net()
        .with_dropout(s.dropout().unwrap_or(0.3));
    let model = init_application_model(mc, &dataset, &mut RngState::new(s.seed()))?;
    let mut tc = AppTrainConfig::new(s.iters()?, s.batch().unwrap_or(DEFAULT_BATCH));
    if let Some(lr) = s.lr() {
        tc.optimizer.lr = lr;
    }
    info!("training on {} groups with full conditioning sets", pool.len());
    let (model, trace) = train_application(model, &pool, &tc, s.seed().wrapping_add(1))?;
    let mut ckpt = Checkpoint::new(model, s.seed());
    ckpt.iteration = tc.iters;
    ckpt.meta = serde_json::json!({ "application": { "m": m, "lengthscales": lengthscales, "train": tc } });
    save_checkpoint(out, &ckpt)?;
    if let Some(path) = s.trace() {
        write_trace_csv(create(path)?, &trace)?;
    }
    info!("saved {}", out.display());
    Ok(())
}

const METHODS: [&str; 3] = ["neuvec", "exact", "mt15-fitted"];

pub fn evaluate(s: &Settings) -> Result<()> {
    let methods = s.methods();
    if let Some(bad) = methods.iter().find(|m| !METHODS.contains(&m.as_str())) {
        return Err(Error::Config(format!(
            "unknown method `{bad}` (expected one of {})",
            METHODS.join(", ")
        )));
    }
    let model = match s.checkpoint() {
        Some(path) => Some(load_checkpoint(path)?.model),
        None if methods.iter().any(|m| m == "neuvec") => {
            return Err(Error::Config("method `neuvec` needs `checkpoint`".into()))
        }
        None => None,
    };
    let out = s.out()?;
    if s.data().is_some() {
        if methods.iter().any(|m| m != "neuvec") {
            return Err(Error::Config("observational data can only be scored with `neuvec`".into()));
        }
        let dataset = read_dataset(s)?;
        let m = s.m_or(30);
        let plans = build_application_plan(&dataset, m, &read_lengthscales(s)?)?;
        let test = application_groups(&dataset, &plans, Role::Test);
        let report = evaluate_application(model.as_ref().unwrap(), test, m, "application")?;
        info!("NeuVec: mse {:.5}, nll {:.5} over {} targets", report.mse, report.nll, report.n_test);
        return write_reports_csv(create(out)?, &[report]);
    }

    let spec = s.scenario()?;
    if let Some(model) = &model {
        if model.config().d != spec.d() {
            return Err(Error::DimensionMismatch {
                expected: model.config().d,
                found: spec.d(),
            });
        }
    }
    let batch = s.batch().unwrap_or(DEFAULT_BATCH);
    let n_test = s.n_test().unwrap_or(10 * batch);
    let sizes = match s.curves() {
        Some(c) => c.to_vec(),
        None => vec![s.m()?],
    };
    let mut rng = RngState::new(s.seed());
    let mut reports = vec![];
    for &m in &sizes {
        let fitted = if methods.iter().any(|x| x == "mt15-fitted") {
            Some(fit_mt15_baseline(&spec, m, batch, &fit_config(s), &mut rng)?.spec)
        } else {
            None
        };
        let test = simulate_batch(&spec, m, n_test, &mut rng)?;
        for method in &methods {
            let predictor = match method.as_str() {
                "neuvec" => Predictor::NeuVec(model.as_ref().unwrap()),
                "exact" => Predictor::Kernel {
                    spec: &spec,
                    label: "exact".into(),
                },
                _ => Predictor::Kernel {
                    spec: fitted.as_ref().unwrap(),
                    label: "MT15-fitted".into(),
                },
            };
            let r = evaluate_on(&predictor, &test, spec.family().name())?;
            info!("m = {m}, {}: mse {:.5}, nll {:.5}", r.method, r.mse, r.nll);
            reports.push(r);
        }
    }
    write_reports_csv(create(out)?, &reports)
}

pub fn fit_kernel(s: &Settings) -> Result<()> {
    let out = s.out()?;
    let fit = if s.data().is_some() {
        fit_application_kernel(&read_dataset(s)?, s.m_or(30), &fit_config(s))?
    } else {
        let spec = s.scenario()?;
        let mut rng = RngState::new(s.seed());
        fit_mt15_baseline(&spec, s.m()?, s.batch().unwrap_or(DEFAULT_BATCH), &fit_config(s), &mut rng)?
    };
    info!("fitted MT15: nll {:.5} (initial {:.5})", fit.nll, fit.initial_nll);
    let mut w = create(out)?;
    w.write_all(fit.spec.to_toml_string().as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn ingest(s: &Settings) -> Result<()> {
    let path = s.data().ok_or_else(|| Error::Config("missing required setting `data`".into()))?;
    let out = s.out()?;
    let raw = ingest_csv(path, &s.columns)?;
    let mut rng = RngState::new(s.seed());
    let kept = subsample_per_float(&raw.records, s.cap(), &mut rng)?;
    let dataset = build_dataset(kept, s.train_fraction(), &mut rng)?;
    let mut w = create(out)?;
    serde_json::to_writer(&mut w, &dataset)?;
    w.flush()?;
    if let Some(m) = s.manifest() {
        let mut w = create(m)?;
        serde_json::to_writer_pretty(&mut w, &dataset.manifest(raw.skipped))?;
        w.flush()?;
    }
    info!(
        "{} records kept ({} read, {} rows skipped) over {} year(s)",
        dataset.records.len(),
        raw.records.len(),
        raw.skipped,
        dataset.splits.len()
    );
    Ok(())
}

pub fn plan(s: &Settings) -> Result<()> {
    let dataset = read_dataset(s)?;
    let lengthscales = read_lengthscales(s)?;
    let out = s.out()?;
    let plans = build_application_plan(&dataset, s.m_or(30), &lengthscales)?;
    for yp in plans.values() {
        if !yp.flagged.is_empty() {
            log::warn!("year {}: {} target(s) without an eligible neighbor", yp.year, yp.flagged.len());
        }
    }
    let mut w = create(out)?;
    serde_json::to_writer(&mut w, &plans)?;
    w.flush()?;
    info!("wrote plans for {} year(s) to {}", plans.len(), out.display());
    Ok(())
}
