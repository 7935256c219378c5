//! Covariance kernels used for simulation and as classical baselines.
//!
//! Every family adds its nugget `tau2` only when the two arguments are the
//! same observation index, never on coordinate equality alone.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::rng::RngState;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Matérn correlation with smoothness 1.5 at unit lengthscale.
#[inline]
pub fn matern15(h: f64) -> f64 {
    let s = SQRT3 * h;
    (1.0 + s) * (-s).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelFamily {
    #[serde(rename = "MT15")]
    Mt15,
    #[serde(rename = "RangeNS")]
    RangeNs,
    Periodic,
    #[serde(rename = "DTMT15")]
    Dtmt15,
    SpectralMixture,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 5] = [
        KernelFamily::Mt15,
        KernelFamily::RangeNs,
        KernelFamily::Periodic,
        KernelFamily::Dtmt15,
        KernelFamily::SpectralMixture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Mt15 => "MT15",
            KernelFamily::RangeNs => "RangeNS",
            KernelFamily::Periodic => "Periodic",
            KernelFamily::Dtmt15 => "DTMT15",
            KernelFamily::SpectralMixture => "SpectralMixture",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mt15" => Ok(KernelFamily::Mt15),
            "rangens" => Ok(KernelFamily::RangeNs),
            "periodic" => Ok(KernelFamily::Periodic),
            "dtmt15" => Ok(KernelFamily::Dtmt15),
            "spectralmixture" | "sm" => Ok(KernelFamily::SpectralMixture),
            _ => Err(Error::UnknownFamily(s.to_string())),
        }
    }
}

/// Declarative covariance kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum KernelSpec {
    /// ARD Matérn-3/2: `σ² M(‖(xᵢ−xⱼ)/ℓ‖) + τ²δᵢⱼ`.
    #[serde(rename = "MT15")]
    Mt15 {
        sigma: f64,
        lengthscales: Vec<f64>,
        nu: f64,
        tau2: f64,
    },
    /// Exponential kernel with input-dependent lengthscale field
    /// `ℓ(x) = exp(β₀ + β₁ sin(3πs) + β₂ cos(2πs))`, `s = Σ x`.
    #[serde(rename = "RangeNS")]
    RangeNs {
        d: usize,
        sigma: f64,
        beta0: f64,
        beta1: f64,
        beta2: f64,
        tau2: f64,
    },
    /// `σ² exp(−(2/ℓ) Σ_q sin²(π(x_iq − x_jq)/p)) + τ²δᵢⱼ`.
    Periodic {
        d: usize,
        sigma: f64,
        lengthscale: f64,
        period: f64,
        tau2: f64,
    },
    /// Matérn-3/2 on linearly transformed inputs: `σ² M(‖A(xᵢ−xⱼ)‖/ℓ) + τ²δᵢⱼ`.
    #[serde(rename = "DTMT15")]
    Dtmt15 {
        sigma: f64,
        lengthscale: f64,
        nu: f64,
        tau2: f64,
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
    },
    /// Gaussian-cosine spectral mixture, product over dimensions.
    SpectralMixture {
        log_weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        log_variances: Vec<Vec<f64>>,
        tau2: f64,
    },
}

/// The 3×3 Lo-Shu magic square.
pub fn magic_square(d: usize) -> Result<Vec<Vec<f64>>> {
    if d != 3 {
        return Err(Error::UnsupportedDimension(d));
    }
    Ok(vec![
        vec![8.0, 1.0, 6.0],
        vec![3.0, 5.0, 7.0],
        vec![4.0, 9.0, 2.0],
    ])
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

impl KernelSpec {
    /// Simulation scenario parameters for the four data-generating
    /// families. Spectral mixtures have no fixed scenario; see
    /// [`KernelSpec::spectral_mixture_init`].
    pub fn scenario_default(family: KernelFamily, d: usize) -> Result<KernelSpec> {
        if d == 0 {
            return Err(Error::UnsupportedDimension(0));
        }
        Ok(match family {
            KernelFamily::Mt15 => KernelSpec::Mt15 {
                sigma: 1.0,
                lengthscales: vec![0.3; d],
                nu: 1.5,
                tau2: 0.01,
            },
            KernelFamily::RangeNs => KernelSpec::RangeNs {
                d,
                sigma: 1.0,
                beta0: -2.0,
                beta1: 1.0,
                beta2: -1.0,
                tau2: 0.01,
            },
            KernelFamily::Periodic => KernelSpec::Periodic {
                d,
                sigma: 1.0,
                lengthscale: d as f64,
                period: 0.5,
                tau2: 0.01,
            },
            KernelFamily::Dtmt15 => {
                // Scaled by the magic constant so each row sums to one.
                let sq = magic_square(d)?;
                let constant: f64 = sq[0].iter().sum();
                KernelSpec::Dtmt15 {
                    sigma: 1.0,
                    lengthscale: (d as f64).sqrt() / 10.0,
                    nu: 1.5,
                    tau2: 0.01,
                    a: sq
                        .into_iter()
                        .map(|row| row.into_iter().map(|v| v / constant).collect())
                        .collect(),
                }
            }
            KernelFamily::SpectralMixture => {
                return Err(invalid(
                    "spectral mixture has no fixed scenario; use spectral_mixture_init",
                ))
            }
        })
    }

    /// Spectral mixture with `q` components: equal weights summing to one,
    /// means uniform on [0, 5], unit variances, nugget 0.01.
    pub fn spectral_mixture_init(d: usize, q: usize, rng: &mut RngState) -> KernelSpec {
        let means = (0..q)
            .map(|_| (0..d).map(|_| rng.uniform_range(0.0, 5.0)).collect())
            .collect();
        KernelSpec::SpectralMixture {
            log_weights: vec![(1.0 / q as f64).ln(); q],
            means,
            log_variances: vec![vec![0.0; d]; q],
            tau2: 0.01,
        }
    }

    pub fn family(&self) -> KernelFamily {
        match self {
            KernelSpec::Mt15 { .. } => KernelFamily::Mt15,
            KernelSpec::RangeNs { .. } => KernelFamily::RangeNs,
            KernelSpec::Periodic { .. } => KernelFamily::Periodic,
            KernelSpec::Dtmt15 { .. } => KernelFamily::Dtmt15,
            KernelSpec::SpectralMixture { .. } => KernelFamily::SpectralMixture,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            KernelSpec::Mt15 { lengthscales, .. } => lengthscales.len(),
            KernelSpec::RangeNs { d, .. } | KernelSpec::Periodic { d, .. } => *d,
            KernelSpec::Dtmt15 { a, .. } => a.len(),
            KernelSpec::SpectralMixture { means, .. } => means.first().map_or(0, Vec::len),
        }
    }

    pub fn tau2(&self) -> f64 {
        match self {
            KernelSpec::Mt15 { tau2, .. }
            | KernelSpec::RangeNs { tau2, .. }
            | KernelSpec::Periodic { tau2, .. }
            | KernelSpec::Dtmt15 { tau2, .. }
            | KernelSpec::SpectralMixture { tau2, .. } => *tau2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if d == 0 {
            return Err(invalid("input dimension must be >= 1"));
        }
        let tau2 = self.tau2();
        if !(tau2 >= 0.0) || !tau2.is_finite() {
            return Err(invalid(format!("tau2 must be >= 0, got {tau2}")));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be > 0, got {v}")))
            }
        };
        match self {
            KernelSpec::Mt15 {
                sigma,
                lengthscales,
                nu,
                ..
            } => {
                positive("sigma", *sigma)?;
                for l in lengthscales {
                    positive("lengthscale", *l)?;
                }
                check_nu(*nu)?;
            }
            KernelSpec::RangeNs {
                sigma,
                beta0,
                beta1,
                beta2,
                ..
            } => {
                positive("sigma", *sigma)?;
                if ![beta0, beta1, beta2].iter().all(|b| b.is_finite()) {
                    return Err(invalid("beta coefficients must be finite"));
                }
            }
            KernelSpec::Periodic {
                sigma,
                lengthscale,
                period,
                ..
            } => {
                positive("sigma", *sigma)?;
                positive("lengthscale", *lengthscale)?;
                positive("period", *period)?;
            }
            KernelSpec::Dtmt15 {
                sigma,
                lengthscale,
                nu,
                a,
                ..
            } => {
                positive("sigma", *sigma)?;
                positive("lengthscale", *lengthscale)?;
                check_nu(*nu)?;
                if a.iter().any(|row| row.len() != d) {
                    return Err(invalid("A must be a square d x d matrix"));
                }
                if a.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(invalid("A entries must be finite"));
                }
            }
            KernelSpec::SpectralMixture {
                log_weights,
                means,
                log_variances,
                ..
            } => {
                let q = log_weights.len();
                if q == 0 {
                    return Err(invalid("spectral mixture needs at least one component"));
                }
                if means.len() != q || log_variances.len() != q {
                    return Err(invalid("spectral mixture component counts disagree"));
                }
                if means.iter().chain(log_variances).any(|v| v.len() != d) {
                    return Err(invalid("spectral mixture dimensions disagree"));
                }
                let all = log_weights
                    .iter()
                    .chain(means.iter().flatten())
                    .chain(log_variances.iter().flatten());
                if all.into_iter().any(|v| !v.is_finite()) {
                    return Err(invalid("spectral mixture parameters must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Kernel value without dimension checks. `xi` and `xj` must both have
    /// length `self.d()`.
    #[inline]
    pub fn eval_unchecked(&self, xi: &[f64], xj: &[f64], same_index: bool) -> f64 {
        let nugget = if same_index { self.tau2() } else { 0.0 };
        let value = match self {
            KernelSpec::Mt15 {
                sigma,
                lengthscales,
                ..
            } => {
                let h2: f64 = xi
                    .iter()
                    .zip(xj)
                    .zip(lengthscales)
                    .map(|((a, b), l)| {
                        let t = (a - b) / l;
                        t * t
                    })
                    .sum();
                sigma * sigma * matern15(h2.sqrt())
            }
            KernelSpec::RangeNs {
                sigma,
                beta0,
                beta1,
                beta2,
                d,
                ..
            } => {
                let field = |x: &[f64]| {
                    let s: f64 = x.iter().sum();
                    (beta0 + beta1 * (3.0 * PI * s).sin() + beta2 * (2.0 * PI * s).cos()).exp()
                };
                let (li, lj) = (field(xi), field(xj));
                let avg = 0.5 * (li + lj);
                let c = (li.powf(0.25) * lj.powf(0.25) / avg.sqrt()).powi(*d as i32);
                let dist: f64 = xi
                    .iter()
                    .zip(xj)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                sigma * sigma * c * (-dist / avg.sqrt()).exp()
            }
            KernelSpec::Periodic {
                sigma,
                lengthscale,
                period,
                ..
            } => {
                let s: f64 = xi
                    .iter()
                    .zip(xj)
                    .map(|(a, b)| {
                        let t = (PI * (a - b) / period).sin();
                        t * t
                    })
                    .sum();
                sigma * sigma * (-2.0 / lengthscale * s).exp()
            }
            KernelSpec::Dtmt15 {
                sigma,
                lengthscale,
                a,
                ..
            } => {
                let h2: f64 = a
                    .iter()
                    .map(|row| {
                        let t: f64 = row.iter().zip(xi).zip(xj).map(|((r, p), q)| r * (p - q)).sum();
                        t * t
                    })
                    .sum();
                sigma * sigma * matern15(h2.sqrt() / lengthscale)
            }
            KernelSpec::SpectralMixture {
                log_weights,
                means,
                log_variances,
                ..
            } => log_weights
                .iter()
                .zip(means)
                .zip(log_variances)
                .map(|((lw, mu), lv)| {
                    let mut expo = 0.0;
                    let mut cosprod = 1.0;
                    for q in 0..xi.len() {
                        let tau = xi[q] - xj[q];
                        expo += tau * tau * lv[q].exp();
                        cosprod *= (2.0 * PI * tau * mu[q]).cos();
                    }
                    lw.exp() * (-2.0 * PI * PI * expo).exp() * cosprod
                })
                .sum(),
        };
        value + nugget
    }

    /// Names of the unconstrained fitting coordinates, in order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![];
        match self {
            KernelSpec::Mt15 { lengthscales, .. } => {
                names.push("log_sigma".to_string());
                names.extend((0..lengthscales.len()).map(|q| format!("log_lengthscale_{q}")));
            }
            KernelSpec::RangeNs { .. } => {
                names.extend(["log_sigma", "beta0", "beta1", "beta2"].map(String::from));
            }
            KernelSpec::Periodic { .. } => {
                names.extend(["log_sigma", "log_lengthscale", "log_period"].map(String::from));
            }
            KernelSpec::Dtmt15 { .. } => {
                names.extend(["log_sigma", "log_lengthscale"].map(String::from));
            }
            KernelSpec::SpectralMixture { log_weights, .. } => {
                let (q, d) = (log_weights.len(), self.d());
                names.extend((0..q).map(|k| format!("log_weight_{k}")));
                for k in 0..q {
                    names.extend((0..d).map(|p| format!("mean_{k}_{p}")));
                }
                for k in 0..q {
                    names.extend((0..d).map(|p| format!("log_variance_{k}_{p}")));
                }
            }
        }
        names.push("log_tau2".to_string());
        names
    }

    /// Parameters mapped to an unconstrained space (logs of positive
    /// quantities, raw values otherwise). `nu` and `A` are fixed.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut out = vec![];
        match self {
            KernelSpec::Mt15 {
                sigma,
                lengthscales,
                ..
            } => {
                out.push(sigma.ln());
                out.extend(lengthscales.iter().map(|l| l.ln()));
            }
            KernelSpec::RangeNs {
                sigma,
                beta0,
                beta1,
                beta2,
                ..
            } => out.extend([sigma.ln(), *beta0, *beta1, *beta2]),
            KernelSpec::Periodic {
                sigma,
                lengthscale,
                period,
                ..
            } => out.extend([sigma.ln(), lengthscale.ln(), period.ln()]),
            KernelSpec::Dtmt15 {
                sigma, lengthscale, ..
            } => out.extend([sigma.ln(), lengthscale.ln()]),
            KernelSpec::SpectralMixture {
                log_weights,
                means,
                log_variances,
                ..
            } => {
                out.extend(log_weights);
                out.extend(means.iter().flatten());
                out.extend(log_variances.iter().flatten());
            }
        }
        out.push(self.tau2().ln());
        out
    }

    /// Inverse of [`KernelSpec::to_unconstrained`].
    pub fn from_unconstrained(&self, theta: &[f64]) -> Result<KernelSpec> {
        let expected = self.param_names().len();
        if theta.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: theta.len(),
            });
        }
        let tau2 = theta[expected - 1].exp();
        let spec = match self {
            KernelSpec::Mt15 {
                lengthscales, nu, ..
            } => KernelSpec::Mt15 {
                sigma: theta[0].exp(),
                lengthscales: theta[1..=lengthscales.len()].iter().map(|v| v.exp()).collect(),
                nu: *nu,
                tau2,
            },
            KernelSpec::RangeNs { d, .. } => KernelSpec::RangeNs {
                d: *d,
                sigma: theta[0].exp(),
                beta0: theta[1],
                beta1: theta[2],
                beta2: theta[3],
                tau2,
            },
            KernelSpec::Periodic { d, .. } => KernelSpec::Periodic {
                d: *d,
                sigma: theta[0].exp(),
                lengthscale: theta[1].exp(),
                period: theta[2].exp(),
                tau2,
            },
            KernelSpec::Dtmt15 { nu, a, .. } => KernelSpec::Dtmt15 {
                sigma: theta[0].exp(),
                lengthscale: theta[1].exp(),
                nu: *nu,
                tau2,
                a: a.clone(),
            },
            KernelSpec::SpectralMixture { log_weights, .. } => {
                let (q, d) = (log_weights.len(), self.d());
                let means_start = q;
                let vars_start = q + q * d;
                KernelSpec::SpectralMixture {
                    log_weights: theta[..q].to_vec(),
                    means: (0..q)
                        .map(|k| theta[means_start + k * d..means_start + (k + 1) * d].to_vec())
                        .collect(),
                    log_variances: (0..q)
                        .map(|k| theta[vars_start + k * d..vars_start + (k + 1) * d].to_vec())
                        .collect(),
                    tau2,
                }
            }
        };
        Ok(spec)
    }

    /// Parses the structured text form (TOML with a `family` key).
    pub fn from_toml_str(s: &str) -> Result<KernelSpec> {
        let table: toml::Table = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_table(table)
    }

    pub fn from_toml_table(table: toml::Table) -> Result<KernelSpec> {
        let family = table
            .get("family")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Config("kernel spec is missing `family`".into()))?;
        let family: KernelFamily = family.parse()?;
        let mut table = table;
        table.insert("family".into(), toml::Value::String(family.name().into()));
        let spec: KernelSpec = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("kernel specs always serialize")
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if nu != 1.5 {
        return Err(invalid(format!("only nu = 1.5 is supported, got {nu}")));
    }
    Ok(())
}

/// A set of `n` input locations in `d` dimensions, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationSet {
    d: usize,
    coords: Vec<f64>,
}

impl LocationSet {
    pub fn new(d: usize, coords: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::UnsupportedDimension(0));
        }
        if !coords.len().is_multiple_of(d) {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates do not split into rows of {d}",
                coords.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(invalid("location coordinates must be finite"));
        }
        Ok(Self { d, coords })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let d = points.first().map(Vec::len).ok_or(Error::EmptyInput)?;
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::ShapeMismatch("points have differing dimension".into()));
        }
        Self::new(d, points.concat())
    }

    pub fn n(&self) -> usize {
        self.coords.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.d..(i + 1) * self.d]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn subset(&self, idx: &[usize]) -> LocationSet {
        let mut coords = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            coords.extend_from_slice(self.point(i));
        }
        LocationSet { d: self.d, coords }
    }
}

/// Evaluates `K(x_i, x_j)`, adding the nugget only when `same_index`.
pub fn kernel_eval(spec: &KernelSpec, xi: &[f64], xj: &[f64], same_index: bool) -> Result<f64> {
    let d = spec.d();
    for x in [xi, xj] {
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
    }
    Ok(spec.eval_unchecked(xi, xj, same_index))
}

/// Dense covariance over a location set, nugget on the diagonal.
pub fn covariance_matrix(spec: &KernelSpec, locs: &LocationSet) -> Result<SymMatrix> {
    if locs.n() == 0 {
        return Err(Error::EmptyInput);
    }
    if locs.d() != spec.d() {
        return Err(Error::DimensionMismatch {
            expected: spec.d(),
            found: locs.d(),
        });
    }
    Ok(SymMatrix::from_lower_fn(locs.n(), |i, j| {
        spec.eval_unchecked(locs.point(i), locs.point(j), i == j)
    }))
}
