//! Ingestion and preparation of real spatio-temporal observations:
//! per-float subsampling, min/max normalization, per-year splits and
//! metadata-aware conditioning plans.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::LocationSet;
use crate::rng::RngState;
use crate::vecchia::{build_plan_with, lexicographic_order, ConditioningPlan};

/// Number of model inputs: longitude, latitude, depth, day of year.
pub const N_INPUTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub float_id: String,
    pub year: i32,
    pub lon: f64,
    pub lat: f64,
    pub depth: f64,
    pub day_of_year: f64,
    pub response: f64,
}

impl ObservationRecord {
    pub fn inputs(&self) -> [f64; N_INPUTS] {
        [self.lon, self.lat, self.depth, self.day_of_year]
    }
}

/// Header names of the required columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub float_id: String,
    pub year: String,
    pub lon: String,
    pub lat: String,
    pub depth: String,
    pub day_of_year: String,
    pub response: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            float_id: "float_id".into(),
            year: "year".into(),
            lon: "lon".into(),
            lat: "lat".into(),
            depth: "depth".into(),
            day_of_year: "day_of_year".into(),
            response: "temperature".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub records: Vec<ObservationRecord>,
    /// Rows dropped for a missing or non-numeric required field.
    pub skipped: usize,
}

/// Reads a delimited file with a header row. Rows whose required fields
/// are empty or not finite numbers are skipped and counted; malformed rows
/// (for example a wrong field count) are errors carrying the line number.
pub fn ingest_csv(path: &Path, columns: &ColumnMap) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let idx = [
        find(&columns.float_id)?,
        find(&columns.year)?,
        find(&columns.lon)?,
        find(&columns.lat)?,
        find(&columns.depth)?,
        find(&columns.day_of_year)?,
        find(&columns.response)?,
    ];
    let mut records = vec![];
    let mut skipped = 0;
    for row in reader.records() {
        let row = row?;
        let field = |k: usize| row.get(idx[k]).unwrap_or("");
        let num = |k: usize| field(k).parse::<f64>().ok().filter(|v| v.is_finite());
        let float_id = field(0);
        let year = field(1).parse::<i32>().ok();
        match (year, num(2), num(3), num(4), num(5), num(6)) {
            (Some(year), Some(lon), Some(lat), Some(depth), Some(day_of_year), Some(response))
                if !float_id.is_empty() =>
            {
                records.push(ObservationRecord {
                    float_id: float_id.to_string(),
                    year,
                    lon,
                    lat,
                    depth,
                    day_of_year,
                    response,
                })
            }
            _ => skipped += 1,
        }
    }
    Ok(Ingested { records, skipped })
}

/// Caps every (year, float) at `cap` records by uniform sampling without
/// replacement. Survivors keep their original relative order.
pub fn subsample_per_float(records: &[ObservationRecord], cap: usize, rng: &mut RngState) -> Result<Vec<ObservationRecord>> {
    if cap == 0 {
        return Err(Error::InvalidParameter("subsample cap must be >= 1".into()));
    }
    let mut by_key: BTreeMap<(i32, &str), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_key.entry((r.year, r.float_id.as_str())).or_default().push(i);
    }
    let mut keep = vec![false; records.len()];
    for idx in by_key.values() {
        if idx.len() <= cap {
            idx.iter().for_each(|&i| keep[i] = true);
        } else {
            for j in index::sample(rng, idx.len(), cap) {
                keep[idx[j]] = true;
            }
        }
    }
    Ok(records
        .iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r.clone()))
        .collect())
}

/// Per-input min/max captured at build time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: [f64; N_INPUTS],
    pub max: [f64; N_INPUTS],
}

impl Normalization {
    pub fn fit(points: &[[f64; N_INPUTS]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut min = [f64::INFINITY; N_INPUTS];
        let mut max = [f64::NEG_INFINITY; N_INPUTS];
        for p in points {
            for q in 0..N_INPUTS {
                min[q] = min[q].min(p[q]);
                max[q] = max[q].max(p[q]);
            }
        }
        Ok(Self { min, max })
    }

    /// Maps each input to `[0, 1]`; a degenerate range maps to 0.5.
    pub fn apply(&self, p: &[f64; N_INPUTS]) -> [f64; N_INPUTS] {
        let mut out = [0.0; N_INPUTS];
        for q in 0..N_INPUTS {
            let range = self.max[q] - self.min[q];
            out[q] = if range > 0.0 { (p[q] - self.min[q]) / range } else { 0.5 };
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<ObservationRecord>,
    pub normalization: Normalization,
    /// Normalized inputs, aligned with `records`.
    pub inputs: Vec<[f64; N_INPUTS]>,
    pub splits: BTreeMap<i32, Split>,
}

/// Normalizes inputs over all records (responses stay in their units) and
/// splits every year at random into `train_fraction` / remainder, with the
/// train count rounded to the nearest integer.
pub fn build_dataset(records: Vec<ObservationRecord>, train_fraction: f64, rng: &mut RngState) -> Result<Dataset> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidParameter(format!(
            "train fraction must lie in [0, 1], got {train_fraction}"
        )));
    }
    let raw: Vec<[f64; N_INPUTS]> = records.iter().map(ObservationRecord::inputs).collect();
    let normalization = Normalization::fit(&raw)?;
    let inputs = raw.iter().map(|p| normalization.apply(p)).collect();
    let mut by_year: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_year.entry(r.year).or_default().push(i);
    }
    let splits = by_year
        .into_iter()
        .map(|(year, mut idx)| {
            idx.shuffle(rng);
            let n_train = (idx.len() as f64 * train_fraction).round() as usize;
            let mut train = idx[..n_train].to_vec();
            let mut test = idx[n_train..].to_vec();
            train.sort_unstable();
            test.sort_unstable();
            (year, Split { train, test })
        })
        .collect();
    Ok(Dataset {
        records,
        normalization,
        inputs,
        splits,
    })
}

/// Audit record of a built dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_records: usize,
    pub skipped_rows: usize,
    pub normalization: Normalization,
    pub splits: BTreeMap<i32, Split>,
}

impl Dataset {
    pub fn manifest(&self, skipped_rows: usize) -> Manifest {
        Manifest {
            n_records: self.records.len(),
            skipped_rows,
            normalization: self.normalization.clone(),
            splits: self.splits.clone(),
        }
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        self.splits.keys().copied()
    }

    /// Mean response over all training records.
    pub fn train_response_mean(&self) -> f64 {
        let (s, n) = self
            .splits
            .values()
            .flat_map(|s| &s.train)
            .fold((0.0, 0usize), |(s, n), &i| (s + self.records[i].response, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
}

/// Conditioning plan of one year. Positions cover the year's training
/// records first, then its test records; `obs[p]` is the dataset record
/// at position `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YearPlan {
    pub year: i32,
    pub obs: Vec<usize>,
    pub n_train: usize,
    pub plan: ConditioningPlan,
    /// Positions (other than the first) left without any eligible
    /// neighbor.
    pub flagged: Vec<usize>,
}

impl YearPlan {
    pub fn is_train(&self, pos: usize) -> bool {
        pos < self.n_train
    }

    /// Dataset record indices of the neighbors of position `pos`.
    pub fn neighbor_records(&self, pos: usize) -> Vec<usize> {
        self.plan.neighbors(pos).iter().map(|&j| self.obs[j]).collect()
    }

    pub fn require_complete(&self) -> Result<()> {
        if self.flagged.is_empty() {
            Ok(())
        } else {
            Err(Error::InsufficientNeighbors {
                year: self.year,
                count: self.flagged.len(),
            })
        }
    }
}

/// Builds one plan per year: up to `m` nearest neighbors under distances
/// scaled by `1/ℓ_q`, drawn only from earlier training records of the
/// same year and never from the target's own float.
pub fn build_application_plan(dataset: &Dataset, m: usize, lengthscales: &[f64]) -> Result<BTreeMap<i32, YearPlan>> {
    if lengthscales.len() != N_INPUTS {
        return Err(Error::DimensionMismatch {
            expected: N_INPUTS,
            found: lengthscales.len(),
        });
    }
    let years: Vec<(&i32, &Split)> = dataset.splits.iter().collect();
    years
        .into_par_iter()
        .filter(|(_, s)| !s.train.is_empty() || !s.test.is_empty())
        .map(|(&year, split)| {
            let ordered = |idx: &[usize]| -> Result<Vec<usize>> {
                let coords = idx.iter().flat_map(|&i| dataset.inputs[i]).collect();
                let locs = LocationSet::new(N_INPUTS, coords)?;
                Ok(lexicographic_order(&locs).into_iter().map(|k| idx[k]).collect())
            };
            let mut obs = ordered(&split.train)?;
            obs.extend(ordered(&split.test)?);
            let n_train = split.train.len();
            let coords = obs.iter().flat_map(|&i| dataset.inputs[i]).collect();
            let locs = LocationSet::new(N_INPUTS, coords)?;
            let floats: Vec<&str> = obs.iter().map(|&i| dataset.records[i].float_id.as_str()).collect();
            let plan = build_plan_with(&locs, m, lengthscales, Some((0..obs.len()).collect()), |t, c| {
                c < n_train && floats[t] != floats[c]
            })?;
            let flagged = (1..obs.len()).filter(|&p| plan.neighbors(p).is_empty()).collect();
            Ok((
                year,
                YearPlan {
                    year,
                    obs,
                    n_train,
                    plan,
                    flagged,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::File::create(&path).unwrap().write_all(text.as_bytes()).unwrap();
        path
    }

    const HEADER: &str = "float_id,year,lon,lat,depth,day_of_year,temperature\n";

    #[test]
    fn ingest_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "{HEADER}A1,2007,-150.5,10.25,5,32,27.5\nA1,2007,-150.25,10.5,105,33,21.0\nB7,2008,20,-45,1500.5,59,3.25\n"
        );
        let got = ingest_csv(&write_file(&dir, "ok.csv", &text), &ColumnMap::default()).unwrap();
        assert_eq!(got.skipped, 0);
        assert_eq!(got.records.len(), 3);
        assert_eq!(
            got.records[2],
            ObservationRecord {
                float_id: "B7".into(),
                year: 2008,
                lon: 20.0,
                lat: -45.0,
                depth: 1500.5,
                day_of_year: 59.0,
                response: 3.25,
            }
        );
    }

    #[test]
    fn ingest_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        let empty = ingest_csv(&write_file(&dir, "e.csv", HEADER), &ColumnMap::default()).unwrap();
        assert_eq!((empty.records.len(), empty.skipped), (0, 0));

        let text = format!("{HEADER}A,2007,1,2,deep,4,5\nA,2007,1,2,3,4,5\n");
        let got = ingest_csv(&write_file(&dir, "s.csv", &text), &ColumnMap::default()).unwrap();
        assert_eq!((got.records.len(), got.skipped), (1, 1));

        let missing = ingest_csv(&write_file(&dir, "m.csv", "float_id,year\nA,1\n"), &ColumnMap::default());
        assert!(matches!(missing, Err(Error::MissingColumn(c)) if c == "lon"));

        let text = format!("{HEADER}A,2007,1,2,3,4,5\nA,2007,1\n");
        let bad = ingest_csv(&write_file(&dir, "b.csv", &text), &ColumnMap::default());
        assert!(matches!(bad, Err(Error::Parse { row: 3, .. })), "{bad:?}");
    }

    fn record(float_id: &str, year: i32, x: [f64; 4]) -> ObservationRecord {
        ObservationRecord {
            float_id: float_id.into(),
            year,
            lon: x[0],
            lat: x[1],
            depth: x[2],
            day_of_year: x[3],
            response: x.iter().sum(),
        }
    }

    #[test]
    fn subsampling() {
        let mut recs = vec![];
        for i in 0..150 {
            recs.push(record("small", 2010, [i as f64, 0.0, 0.0, 0.0]));
        }
        for i in 0..500 {
            recs.push(record("big", 2010, [i as f64, 1.0, 0.0, 0.0]));
        }
        let a = subsample_per_float(&recs, 200, &mut RngState::new(1)).unwrap();
        let b = subsample_per_float(&recs, 200, &mut RngState::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|r| r.float_id == "small").count(), 150);
        let big: Vec<f64> = a.iter().filter(|r| r.float_id == "big").map(|r| r.lon).collect();
        assert_eq!(big.len(), 200);
        assert!(big.windows(2).all(|w| w[0] < w[1]));
        assert!(subsample_per_float(&recs, 0, &mut RngState::new(1)).is_err());
    }

    #[test]
    fn dataset_normalization_and_splits() {
        let single = build_dataset(vec![record("a", 2001, [3.0, 4.0, 5.0, 6.0])], 0.8, &mut RngState::new(0)).unwrap();
        assert_eq!(single.inputs[0], [0.5; 4]);

        let recs: Vec<_> = (0..10).map(|i| record("f", 2002, [i as f64, -(i as f64), 2.0 * i as f64, 7.0])).collect();
        let ds = build_dataset(recs, 0.8, &mut RngState::new(3)).unwrap();
        let s = &ds.splits[&2002];
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(ds.inputs[0][0], 0.0);
        assert_eq!(ds.inputs[9][0], 1.0);
        assert_eq!(ds.inputs[0][1], 1.0);
        assert_eq!(ds.inputs[3][3], 0.5);

        let again = Normalization::fit(&ds.inputs).unwrap();
        for p in &ds.inputs {
            assert_eq!(again.apply(p), *p);
        }
        assert!(matches!(build_dataset(vec![], 0.8, &mut RngState::new(0)), Err(Error::EmptyDataset)));
    }

    #[test]
    fn plan_excludes_same_float_and_other_years() {
        let mut recs = vec![record("t", 2005, [0.5, 0.5, 0.5, 0.5])];
        for i in 0..4 {
            recs.push(record("t", 2005, [0.5 + 0.001 * i as f64, 0.5, 0.5, 0.5]));
        }
        recs.push(record("far", 2005, [0.0, 0.0, 0.0, 0.0]));
        recs.push(record("near", 2006, [0.5, 0.5, 0.5, 0.5]));
        recs.push(record("x", 2006, [1.0, 1.0, 1.0, 1.0]));
        let ds = build_dataset(recs, 1.0, &mut RngState::new(0)).unwrap();
        let plans = build_application_plan(&ds, 3, &[1.0; 4]).unwrap();
        let p = &plans[&2005];
        for pos in 0..p.obs.len() {
            let target = &ds.records[p.obs[pos]];
            for r in p.neighbor_records(pos) {
                let nb = &ds.records[r];
                assert_eq!(nb.year, target.year);
                assert_ne!(nb.float_id, target.float_id);
            }
        }
        // Float "t" can only ever see float "far".
        let far = p.obs.iter().position(|&i| ds.records[i].float_id == "far").unwrap();
        for pos in far + 1..p.obs.len() {
            assert_eq!(p.plan.neighbors(pos), &[far]);
        }
        assert!(plans[&2006].require_complete().is_ok());
    }

    #[test]
    fn huge_lengthscale_ignores_dimension() {
        let mut rng = RngState::new(4);
        let recs: Vec<_> = (0..40)
            .map(|i| record(&format!("f{}", i % 7), 2003, [rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()]))
            .collect();
        let ds = build_dataset(recs, 0.8, &mut RngState::new(5)).unwrap();
        let mut flat = ds.clone();
        for p in &mut flat.inputs {
            p[2] = 0.5;
        }
        let a = build_application_plan(&ds, 5, &[0.3, 0.3, 1e6, 0.3]).unwrap();
        let b = build_application_plan(&flat, 5, &[0.3, 0.3, 1.0, 0.3]).unwrap();
        let sets = |p: &YearPlan| {
            let mut v: Vec<(usize, Vec<usize>)> = (0..p.obs.len())
                .map(|pos| {
                    let mut n = p.neighbor_records(pos);
                    n.sort();
                    (p.obs[pos], n)
                })
                .collect();
            v.sort();
            v
        };
        let (pa, pb) = (&a[&2003], &b[&2003]);
        assert_eq!(pa.obs, pb.obs);
        assert_eq!(sets(pa), sets(pb));
    }

    #[test]
    fn flagged_targets_are_reported() {
        let recs = vec![
            record("a", 2000, [0.0, 0.0, 0.0, 0.0]),
            record("a", 2000, [1.0, 1.0, 1.0, 1.0]),
        ];
        let ds = build_dataset(recs, 1.0, &mut RngState::new(0)).unwrap();
        let plans = build_application_plan(&ds, 30, &[1.0; 4]).unwrap();
        assert_eq!(plans[&2000].flagged, vec![1]);
        assert!(matches!(
            plans[&2000].require_complete(),
            Err(Error::InsufficientNeighbors { year: 2000, count: 1 })
        ));
    }
}
