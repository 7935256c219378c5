//! Vecchia approximation: conditioning plans, exact kriging laws, the
//! correspondence between laws and the sparse inverse Cholesky factor,
//! likelihood and prediction.
//!
//! Positions index the ordering (`0..n`), observation indices index the
//! original data. A plan maps positions to observations through
//! [`ConditioningPlan::order`] and stores every conditioning set in
//! position space, so `c(i) ⊆ 0..i` always holds.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, LocationSet};
use crate::linalg::{cholesky, solve_triangular, SymMatrix, Triangle};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningPlan {
    order: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    m: usize,
}

impl ConditioningPlan {
    pub fn new(order: Vec<usize>, neighbors: Vec<Vec<usize>>, m: usize) -> Result<Self> {
        let n = order.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if neighbors.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} neighbor sets for {n} positions",
                neighbors.len()
            )));
        }
        let mut seen = vec![false; n];
        for &o in &order {
            if o >= n || std::mem::replace(&mut seen[o], true) {
                return Err(Error::ShapeMismatch("order is not a permutation".into()));
            }
        }
        for (i, c) in neighbors.iter().enumerate() {
            if c.len() > m {
                return Err(Error::ShapeMismatch(format!(
                    "position {i} conditions on {} > m = {m} points",
                    c.len()
                )));
            }
            if c.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::ShapeMismatch(format!(
                    "conditioning set of position {i} is not strictly increasing"
                )));
            }
            if c.last().is_some_and(|&j| j >= i) {
                return Err(Error::ShapeMismatch(format!(
                    "position {i} conditions on a later position"
                )));
            }
        }
        Ok(Self { order, neighbors, m })
    }

    /// Identity ordering with `c(i) = {0, …, i−1}`.
    pub fn full(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            neighbors: (0..n).map(|i| (0..i).collect()).collect(),
            m: n.saturating_sub(1),
        }
    }

    pub fn n(&self) -> usize {
        self.order.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Conditioning set of position `i`, as positions.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Conditioning set of position `i`, as observation indices.
    pub fn neighbor_observations(&self, i: usize) -> Vec<usize> {
        self.neighbors[i].iter().map(|&j| self.order[j]).collect()
    }

    /// One line per observation in ordering sequence:
    /// `i: j1 j2 ... jk` with observation indices.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (pos, &obs) in self.order.iter().enumerate() {
            write!(out, "{obs}:").unwrap();
            for &j in &self.neighbors[pos] {
                write!(out, " {}", self.order[j]).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`ConditioningPlan::to_text`] output. `m` defaults to the
    /// largest conditioning set present.
    pub fn from_text(text: &str, m: Option<usize>) -> Result<Self> {
        let mut order = vec![];
        let mut raw = vec![];
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                row: line_no + 1,
                message: msg.to_string(),
            };
            let (head, tail) = line.split_once(':').ok_or_else(|| parse_err("missing ':'"))?;
            let obs: usize = head.trim().parse().map_err(|_| parse_err("bad index"))?;
            let nbrs = tail
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| parse_err("bad neighbor index")))
                .collect::<Result<Vec<_>>>()?;
            order.push(obs);
            raw.push(nbrs);
        }
        let n = order.len();
        let mut pos_of = vec![usize::MAX; n];
        for (p, &o) in order.iter().enumerate() {
            if o >= n {
                return Err(Error::ShapeMismatch(format!("observation {o} out of range")));
            }
            pos_of[o] = p;
        }
        let neighbors = raw
            .into_iter()
            .map(|nb| {
                nb.into_iter()
                    .map(|o| pos_of.get(o).copied().filter(|&p| p != usize::MAX))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::ShapeMismatch("unknown neighbor index".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let m = m.unwrap_or_else(|| neighbors.iter().map(Vec::len).max().unwrap_or(0));
        Self::new(order, neighbors, m)
    }
}

/// Lexicographic ordering of locations (first coordinate, then the next,
/// ties broken by index).
pub fn lexicographic_order(locs: &LocationSet) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..locs.n()).collect();
    idx.sort_by(|&a, &b| {
        locs.point(a)
            .iter()
            .zip(locs.point(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Strategy for picking conditioning sets among earlier positions.
pub trait NeighborSearch {
    /// For every position, up to `m` eligible earlier positions, sorted
    /// ascending. `eligible(target_obs, candidate_obs)` filters candidates.
    fn select<F>(
        &self,
        locs: &LocationSet,
        order: &[usize],
        m: usize,
        scaling: &[f64],
        eligible: F,
    ) -> Vec<Vec<usize>>
    where
        F: Fn(usize, usize) -> bool + Sync;
}

/// Exact nearest neighbors by exhaustive distance computation.
#[derive(Clone, Copy, Debug, Default)]
pub struct BruteForce;

impl NeighborSearch for BruteForce {
    fn select<F>(
        &self,
        locs: &LocationSet,
        order: &[usize],
        m: usize,
        scaling: &[f64],
        eligible: F,
    ) -> Vec<Vec<usize>>
    where
        F: Fn(usize, usize) -> bool + Sync,
    {
        let inv: Vec<f64> = scaling.iter().map(|s| 1.0 / s).collect();
        (0..order.len())
            .into_par_iter()
            .map(|i| {
                let target = order[i];
                let xi = locs.point(target);
                let mut cand: Vec<(f64, usize)> = (0..i)
                    .filter(|&j| eligible(target, order[j]))
                    .map(|j| {
                        let xj = locs.point(order[j]);
                        let d2: f64 = xi
                            .iter()
                            .zip(xj)
                            .zip(&inv)
                            .map(|((a, b), s)| {
                                let t = (a - b) * s;
                                t * t
                            })
                            .sum();
                        (d2, j)
                    })
                    .collect();
                let by_dist = |a: &(f64, usize), b: &(f64, usize)| {
                    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
                };
                if cand.len() > m {
                    if m == 0 {
                        cand.clear();
                    } else {
                        cand.select_nth_unstable_by(m - 1, by_dist);
                        cand.truncate(m);
                    }
                }
                let mut c: Vec<usize> = cand.into_iter().map(|(_, j)| j).collect();
                c.sort_unstable();
                c
            })
            .collect()
    }
}

fn check_scaling(locs: &LocationSet, scaling: &[f64]) -> Result<()> {
    if scaling.len() != locs.d() {
        return Err(Error::DimensionMismatch {
            expected: locs.d(),
            found: scaling.len(),
        });
    }
    if scaling.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidParameter("scaling must be strictly positive".into()));
    }
    Ok(())
}

/// Plan with lexicographic ordering and up to `m` nearest earlier points
/// under the scaled metric `‖(x − y) / scaling‖`.
pub fn build_plan(locs: &LocationSet, m: usize, scaling: &[f64]) -> Result<ConditioningPlan> {
    build_plan_with(locs, m, scaling, None, |_, _| true)
}

/// General plan builder: optional explicit ordering plus an eligibility
/// predicate on `(target, candidate)` observation indices.
pub fn build_plan_with<F>(
    locs: &LocationSet,
    m: usize,
    scaling: &[f64],
    order: Option<Vec<usize>>,
    eligible: F,
) -> Result<ConditioningPlan>
where
    F: Fn(usize, usize) -> bool + Sync,
{
    if locs.n() == 0 {
        return Err(Error::EmptyInput);
    }
    if m == 0 {
        return Err(Error::InvalidParameter("m must be >= 1".into()));
    }
    check_scaling(locs, scaling)?;
    let order = order.unwrap_or_else(|| lexicographic_order(locs));
    if order.len() != locs.n() {
        return Err(Error::ShapeMismatch("ordering length differs from n".into()));
    }
    let neighbors = BruteForce.select(locs, &order, m, scaling, eligible);
    ConditioningPlan::new(order, neighbors, m)
}

/// Kriging coefficients and conditional standard deviation of one
/// observation given its conditioning set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalLaw {
    pub beta: Vec<f64>,
    pub sigma: f64,
}

/// Source of covariance entries by observation index.
pub trait Covariance {
    fn cov(&self, i: usize, j: usize) -> f64;
}

impl Covariance for SymMatrix {
    fn cov(&self, i: usize, j: usize) -> f64 {
        self.get(i, j)
    }
}

/// A kernel evaluated over a fixed location set.
pub struct KernelCovariance<'a> {
    pub spec: &'a KernelSpec,
    pub locs: &'a LocationSet,
}

impl Covariance for KernelCovariance<'_> {
    fn cov(&self, i: usize, j: usize) -> f64 {
        self.spec
            .eval_unchecked(self.locs.point(i), self.locs.point(j), i == j)
    }
}

/// `β = Σ_cc⁻¹ Σ_ci`, `σ² = Σ_ii − Σ_ic β`, through the Cholesky factor
/// of `Σ_cc`.
pub fn conditional_law<C: Covariance + ?Sized>(cov: &C, i: usize, c: &[usize]) -> Result<ConditionalLaw> {
    let sii = cov.cov(i, i);
    if c.is_empty() {
        if !(sii > 0.0) {
            return Err(Error::NotPositiveDefinite { index: 0, pivot: sii });
        }
        return Ok(ConditionalLaw {
            beta: vec![],
            sigma: sii.sqrt(),
        });
    }
    let scc = SymMatrix::from_lower_fn(c.len(), |a, b| cov.cov(c[a], c[b]));
    let l = cholesky(&scc)?;
    let sci: Vec<f64> = c.iter().map(|&j| cov.cov(j, i)).collect();
    let w = solve_triangular(&l, &sci, Triangle::Lower)?;
    let var = sii - w.iter().map(|v| v * v).sum::<f64>();
    if !(var > 0.0) {
        return Err(Error::NotPositiveDefinite {
            index: c.len(),
            pivot: var,
        });
    }
    let beta = solve_triangular(&l, &w, Triangle::Upper)?;
    Ok(ConditionalLaw {
        beta,
        sigma: var.sqrt(),
    })
}

/// Exact conditional law of observation `i` given observations `c` under
/// a kernel.
pub fn exact_conditional(
    spec: &KernelSpec,
    locs: &LocationSet,
    i: usize,
    c: &[usize],
) -> Result<ConditionalLaw> {
    if locs.d() != spec.d() {
        return Err(Error::DimensionMismatch {
            expected: spec.d(),
            found: locs.d(),
        });
    }
    let n = locs.n();
    if i >= n || c.iter().any(|&j| j >= n || j == i) {
        return Err(Error::ShapeMismatch("conditioning index out of range".into()));
    }
    conditional_law(&KernelCovariance { spec, locs }, i, c)
}

/// Exact laws for every position of a plan, computed in parallel.
pub fn plan_laws<C: Covariance + Sync + ?Sized>(
    cov: &C,
    plan: &ConditioningPlan,
) -> Result<Vec<ConditionalLaw>> {
    (0..plan.n())
        .into_par_iter()
        .map(|pos| conditional_law(cov, plan.order[pos], &plan.neighbor_observations(pos)))
        .collect()
}

pub fn kernel_laws(
    spec: &KernelSpec,
    locs: &LocationSet,
    plan: &ConditioningPlan,
) -> Result<Vec<ConditionalLaw>> {
    if locs.n() != plan.n() {
        return Err(Error::ShapeMismatch("plan and location set sizes differ".into()));
    }
    if locs.d() != spec.d() {
        return Err(Error::DimensionMismatch {
            expected: spec.d(),
            found: locs.d(),
        });
    }
    plan_laws(&KernelCovariance { spec, locs }, plan)
}

/// One column of the sparse upper-triangular inverse Cholesky factor Ṽ.
///
/// Stored in the factored form `Ṽ = (I − B) D⁻¹`: `unit` holds the
/// off-diagonal entries of `I − B` at `rows` and `scale` the entry of `D`.
/// Raw entries of Ṽ are available through [`FactorColumn::entries`] and
/// [`FactorColumn::diag`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorColumn {
    pub rows: Vec<usize>,
    unit: Vec<f64>,
    scale: f64,
}

impl FactorColumn {
    /// Ṽ_{i,i}.
    pub fn diag(&self) -> f64 {
        1.0 / self.scale
    }

    /// Ṽ_{c(i),i}, aligned with `rows`.
    pub fn entries(&self) -> Vec<f64> {
        self.unit.iter().map(|u| u / self.scale).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseInvChol {
    columns: Vec<FactorColumn>,
}

impl SparseInvChol {
    /// Builds from raw entries of Ṽ: per column the row positions, the
    /// off-diagonal values and the (positive) diagonal.
    pub fn from_entries(columns: Vec<(Vec<usize>, Vec<f64>, f64)>) -> Result<Self> {
        let columns = columns
            .into_iter()
            .enumerate()
            .map(|(i, (rows, vals, diag))| {
                if rows.len() != vals.len() {
                    return Err(Error::ShapeMismatch(format!("column {i}: rows/values differ")));
                }
                if rows.iter().any(|&r| r >= i) {
                    return Err(Error::ShapeMismatch(format!(
                        "column {i} has entries on or below the diagonal"
                    )));
                }
                if !(diag > 0.0) {
                    return Err(Error::NotPositiveDefinite { index: i, pivot: diag });
                }
                Ok(FactorColumn {
                    rows,
                    unit: vals.iter().map(|v| v / diag).collect(),
                    scale: 1.0 / diag,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { columns })
    }

    pub fn n(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[FactorColumn] {
        &self.columns
    }

    /// Dense row-major Ṽ in position space.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n();
        let mut v = vec![0.0; n * n];
        for (i, col) in self.columns.iter().enumerate() {
            v[i * n + i] = col.diag();
            for (&r, e) in col.rows.iter().zip(col.entries()) {
                v[r * n + i] = e;
            }
        }
        v
    }
}

fn check_laws(laws: &[ConditionalLaw], plan: &ConditioningPlan) -> Result<()> {
    if laws.len() != plan.n() {
        return Err(Error::ShapeMismatch(format!(
            "{} laws for a plan of {} positions",
            laws.len(),
            plan.n()
        )));
    }
    for (i, law) in laws.iter().enumerate() {
        if law.beta.len() != plan.neighbors(i).len() {
            return Err(Error::ShapeMismatch(format!(
                "position {i}: {} coefficients for {} neighbors",
                law.beta.len(),
                plan.neighbors(i).len()
            )));
        }
    }
    Ok(())
}

/// `Ṽ_{i,i} = 1/σᵢ`, `Ṽ_{c(i),i} = −βᵢ/σᵢ`.
pub fn laws_to_factor(laws: &[ConditionalLaw], plan: &ConditioningPlan) -> Result<SparseInvChol> {
    check_laws(laws, plan)?;
    let columns = laws
        .iter()
        .enumerate()
        .map(|(i, law)| {
            if !(law.sigma > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "position {i}: sigma must be > 0, got {}",
                    law.sigma
                )));
            }
            Ok(FactorColumn {
                rows: plan.neighbors(i).to_vec(),
                unit: law.beta.iter().map(|b| -b).collect(),
                scale: law.sigma,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SparseInvChol { columns })
}

/// `βᵢ = −Ṽ_{c(i),i} / Ṽ_{i,i}`, `σᵢ = 1/Ṽ_{i,i}`.
pub fn factor_to_laws(v: &SparseInvChol) -> Vec<ConditionalLaw> {
    v.columns
        .iter()
        .map(|col| ConditionalLaw {
            beta: col.unit.iter().map(|u| -u).collect(),
            sigma: col.scale,
        })
        .collect()
}

fn check_obs_vectors(plan: &ConditioningPlan, y: &[f64], mu: &[f64]) -> Result<()> {
    if y.len() != plan.n() || mu.len() != plan.n() {
        return Err(Error::ShapeMismatch(format!(
            "responses ({}) and means ({}) must have {} entries",
            y.len(),
            mu.len(),
            plan.n()
        )));
    }
    Ok(())
}

#[inline]
fn conditional_mean(law: &ConditionalLaw, nbrs: &[usize], order: &[usize], y: &[f64], mu: &[f64], target: usize) -> f64 {
    let adj: f64 = law
        .beta
        .iter()
        .zip(nbrs)
        .map(|(b, &j)| {
            let o = order[j];
            b * (y[o] - mu[o])
        })
        .sum();
    mu[target] + adj
}

/// Negative log of the Vecchia density,
/// `Σᵢ log σᵢ + (yᵢ − μ_{i|c(i)})² / (2σᵢ²) + ½ log 2π`.
///
/// `y` and `mu` are indexed by observation. Terms are computed in
/// parallel and summed in position order.
pub fn vecchia_nll(laws: &[ConditionalLaw], plan: &ConditioningPlan, y: &[f64], mu: &[f64]) -> Result<f64> {
    check_laws(laws, plan)?;
    check_obs_vectors(plan, y, mu)?;
    let terms: Vec<f64> = (0..plan.n())
        .into_par_iter()
        .map(|pos| {
            let law = &laws[pos];
            let obs = plan.order[pos];
            let mean = conditional_mean(law, plan.neighbors(pos), &plan.order, y, mu, obs);
            let r = (y[obs] - mean) / law.sigma;
            law.sigma.ln() + 0.5 * r * r + HALF_LN_2PI
        })
        .collect();
    Ok(terms.iter().sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub sd: f64,
}

impl Prediction {
    /// Gaussian negative log density of `y`.
    pub fn nll(&self, y: f64) -> f64 {
        let r = (y - self.mean) / self.sd;
        self.sd.ln() + 0.5 * r * r + HALF_LN_2PI
    }
}

/// Predictive mean and sd at target positions. Targets may only condition
/// on observed (non-target) positions; responses at target observations
/// are never read.
pub fn vecchia_predict(
    laws: &[ConditionalLaw],
    plan: &ConditioningPlan,
    y_observed: &[f64],
    mu: &[f64],
    target_positions: &[usize],
) -> Result<Vec<Prediction>> {
    check_laws(laws, plan)?;
    check_obs_vectors(plan, y_observed, mu)?;
    let targets: HashSet<usize> = target_positions.iter().copied().collect();
    target_positions
        .iter()
        .map(|&pos| {
            if pos >= plan.n() {
                return Err(Error::ShapeMismatch(format!("target position {pos} out of range")));
            }
            if plan.neighbors(pos).iter().any(|j| targets.contains(j)) {
                return Err(Error::ShapeMismatch(format!(
                    "target position {pos} conditions on another target"
                )));
            }
            let law = &laws[pos];
            let mean = conditional_mean(law, plan.neighbors(pos), &plan.order, y_observed, mu, plan.order[pos]);
            Ok(Prediction { mean, sd: law.sigma })
        })
        .collect()
}
