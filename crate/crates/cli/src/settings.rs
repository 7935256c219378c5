use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use neuvec::dataio::ColumnMap;
use neuvec::kernels::{KernelFamily, KernelSpec};
use neuvec::{Error, Result};

/// Flags shared by every subcommand. Each one overrides the key of the
/// same name in the `--config` file.
#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// TOML file with default values for any of the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Kernel family name with its simulation parameters.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Input dimension of simulated data.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Number of batches written by `simulate`.
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub preset: Option<String>,
    /// `concat` or `distance-direction`.
    #[arg(long)]
    pub augmentation: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write the loss trace of `train`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Save and stop after this many iterations of a longer schedule.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Checkpoint to continue training from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Trained model read by `evaluate`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated predictors: neuvec, exact, mt15-fitted.
    #[arg(long, value_delimiter = ',')]
    pub method: Option<Vec<String>>,
    /// Number of test groups; defaults to ten batches.
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Observation CSV for `ingest`, dataset file otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Fitted kernel whose lengthscales scale neighbor distances.
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    /// Comma-separated conditioning sizes; `evaluate` writes one row per
    /// size and method.
    #[arg(long, value_delimiter = ',')]
    pub curves: Option<Vec<usize>>,
    /// Records kept per float and year by `ingest`.
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Where `ingest` writes the dataset manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub fit_iters: Option<usize>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct FileSettings {
    seed: Option<u64>,
    scenario: Option<toml::Value>,
    d: Option<usize>,
    m: Option<usize>,
    iters: Option<u64>,
    batch: Option<usize>,
    batches: Option<usize>,
    preset: Option<String>,
    augmentation: Option<String>,
    lr: Option<f64>,
    dropout: Option<f64>,
    out: Option<PathBuf>,
    trace: Option<PathBuf>,
    stop_after: Option<u64>,
    resume: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    method: Option<Vec<String>>,
    n_test: Option<usize>,
    data: Option<PathBuf>,
    kernel: Option<PathBuf>,
    curves: Option<Vec<usize>>,
    cap: Option<usize>,
    train_fraction: Option<f64>,
    manifest: Option<PathBuf>,
    fit_iters: Option<usize>,
    columns: Option<ColumnMap>,
}

/// Merged configuration of one command.
#[derive(Debug)]
pub struct Settings {
    args: RunArgs,
    scenario_table: Option<toml::Table>,
    pub columns: ColumnMap,
}

fn missing(key: &str) -> Error {
    Error::Config(format!("missing required setting `{key}`"))
}

macro_rules! take {
    ($args:ident, $file:ident, $($f:ident),*) => {
        $( if $args.$f.is_none() { $args.$f = $file.$f; } )*
    };
}

impl Settings {
    pub fn load(mut args: RunArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                toml::from_str::<FileSettings>(&text).map_err(|e| Error::Config(e.message().to_string()))?
            }
            None => FileSettings::default(),
        };
        let mut scenario_table = None;
        if args.scenario.is_none() {
            match file.scenario {
                Some(toml::Value::String(s)) => args.scenario = Some(s),
                Some(toml::Value::Table(t)) => scenario_table = Some(t),
                Some(_) => return Err(Error::Config("`scenario` must be a name or a table".into())),
                None => {}
            }
        }
        take!(
            args, file, seed, d, m, iters, batch, batches, preset, augmentation, lr, dropout, out, trace,
            stop_after, resume, checkpoint, method, n_test, data, kernel, curves, cap, train_fraction, manifest, fit_iters
        );
        Ok(Self {
            args,
            scenario_table,
            columns: file.columns.unwrap_or_default(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.args.seed.unwrap_or(0)
    }

    pub fn d(&self) -> usize {
        self.args.d.unwrap_or(3)
    }

    pub fn scenario(&self) -> Result<KernelSpec> {
        if let Some(t) = &self.scenario_table {
            return KernelSpec::from_toml_table(t.clone());
        }
        let name = self.args.scenario.as_deref().ok_or_else(|| missing("scenario"))?;
        let family: KernelFamily = name.parse()?;
        KernelSpec::scenario_default(family, self.d())
    }

    pub fn m(&self) -> Result<usize> {
        self.args.m.ok_or_else(|| missing("m"))
    }

    pub fn m_or(&self, default: usize) -> usize {
        self.args.m.unwrap_or(default)
    }

    pub fn iters(&self) -> Result<u64> {
        self.args.iters.ok_or_else(|| missing("iters"))
    }

    pub fn batch(&self) -> Result<usize> {
        self.args.batch.ok_or_else(|| missing("batch"))
    }

    pub fn batches(&self) -> usize {
        self.args.batches.unwrap_or(1)
    }

    pub fn preset(&self) -> Option<&str> {
        self.args.preset.as_deref()
    }

    pub fn augmentation(&self) -> Option<&str> {
        self.args.augmentation.as_deref()
    }

    pub fn lr(&self) -> Option<f64> {
        self.args.lr
    }

    pub fn dropout(&self) -> Option<f64> {
        self.args.dropout
    }

    pub fn out(&self) -> Result<&Path> {
        self.args.out.as_deref().ok_or_else(|| missing("out"))
    }

    pub fn trace(&self) -> Option<&Path> {
        self.args.trace.as_deref()
    }

    pub fn stop_after(&self) -> Option<u64> {
        self.args.stop_after
    }

    pub fn resume(&self) -> Option<&Path> {
        self.args.resume.as_deref()
    }

    pub fn checkpoint(&self) -> Option<&Path> {
        self.args.checkpoint.as_deref()
    }

    pub fn methods(&self) -> Vec<String> {
        self.args.method.clone().unwrap_or_else(|| vec!["neuvec".into()])
    }

    pub fn n_test(&self) -> Option<usize> {
        self.args.n_test
    }

    pub fn data(&self) -> Option<&Path> {
        self.args.data.as_deref()
    }

    pub fn kernel(&self) -> Option<&Path> {
        self.args.kernel.as_deref()
    }

    pub fn curves(&self) -> Option<&[usize]> {
        self.args.curves.as_deref()
    }

    pub fn cap(&self) -> usize {
        self.args.cap.unwrap_or(200)
    }

    pub fn train_fraction(&self) -> f64 {
        self.args.train_fraction.unwrap_or(0.8)
    }

    pub fn manifest(&self) -> Option<&Path> {
        self.args.manifest.as_deref()
    }

    pub fn fit_iters(&self) -> Option<usize> {
        self.args.fit_iters
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 5\nm = 10\nscenario = \"MT15\"\n").unwrap();
        let args = RunArgs {
            config: Some(path),
            m: Some(30),
            ..RunArgs::default()
        };
        let s = Settings::load(args).unwrap();
        assert_eq!(s.seed(), 5);
        assert_eq!(s.m().unwrap(), 30);
        assert_eq!(s.scenario().unwrap(), KernelSpec::scenario_default(KernelFamily::Mt15, 3).unwrap());
    }

    #[test]
    fn scenario_table_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "[scenario]\nfamily = \"Periodic\"\nd = 2\nsigma = 1.0\nlengthscale = 2.0\nperiod = 0.5\ntau2 = 0.01\n",
        )
        .unwrap();
        let s = Settings::load(RunArgs {
            config: Some(path.clone()),
            ..RunArgs::default()
        })
        .unwrap();
        assert_eq!(s.scenario().unwrap().d(), 2);

        fs::write(&path, "iterations = 3\n").unwrap();
        let err = Settings::load(RunArgs {
            config: Some(path),
            ..RunArgs::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("iterations"), "{err}");
        assert!(Settings::load(RunArgs::default()).unwrap().m().unwrap_err().to_string().contains("`m`"));
    }
}
