//! Datasets: CSV ingestion, a housing-like generator and teacher tasks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, FeedForwardNet, NetSpec};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor2};

/// RNG stream used for the train/test shuffle.
const SPLIT_STREAM: u64 = 0x5e1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Task {
    Regression,
    /// Targets are a single column of class indices.
    Classification {
        classes: usize,
    },
}

/// Standardized features and scaled targets, already split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x_train: Tensor2,
    pub y_train: Tensor2,
    pub x_test: Tensor2,
    pub y_test: Tensor2,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_scale: f64,
    pub task: Task,
}

impl Dataset {
    /// Seeded shuffle-split; features are standardized with train-split
    /// statistics (a constant feature keeps std 1) and targets divided by
    /// `target_scale`. `train_fraction` is the share of rows used for training.
    pub fn from_arrays(
        x: &Tensor2,
        y: &Tensor2,
        task: Task,
        target_scale: f64,
        train_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let n = x.rows();
        if y.rows() != n {
            return Err(Error::shape(
                "Dataset",
                format!("{n} feature rows, {} target rows", y.rows()),
            ));
        }
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        if !(target_scale > 0.0 && target_scale.is_finite()) {
            return Err(Error::Config(format!(
                "target scale must be positive, got {target_scale}"
            )));
        }
        let n_train = ((n as f64) * train_fraction).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(Error::Config(format!(
                "{n} rows cannot be split with fraction {train_fraction}"
            )));
        }
        let order = Rng::stream(seed, SPLIT_STREAM).permutation(n);
        let train_idx = order[..n_train].to_vec();
        let test_idx = order[n_train..].to_vec();

        let raw_train = x.select_rows(&train_idx);
        let feature_mean = raw_train.column_means();
        let feature_std: Vec<f64> = (0..x.cols())
            .map(|c| {
                let m = feature_mean[c];
                let var = raw_train.column(c).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n_train as f64;
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let standardize = |t: &Tensor2| {
            let mut out = t.clone();
            for r in 0..out.rows() {
                for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                    *v = (*v - feature_mean[c]) / feature_std[c];
                }
            }
            out
        };
        let scale = match task {
            Task::Regression => target_scale,
            Task::Classification { .. } => 1.0,
        };
        Ok(Self {
            x_train: standardize(&raw_train),
            y_train: y.select_rows(&train_idx).scale(1.0 / scale),
            x_test: standardize(&x.select_rows(&test_idx)),
            y_test: y.select_rows(&test_idx).scale(1.0 / scale),
            train_idx,
            test_idx,
            feature_mean,
            feature_std,
            target_scale: scale,
            task,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.x_train.cols()
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::Regression => self.y_train.cols(),
            Task::Classification { classes } => classes,
        }
    }
}

/// Reads a numeric CSV whose last column is the target. A first row that
/// does not parse as numbers is taken as a header.
pub fn read_csv(path: &Path) -> Result<(Tensor2, Tensor2)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, &e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, &e))?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("non-numeric field: {e}"),
                })
            }
        };
        let w = *width.get_or_insert(values.len());
        if values.len() != w || w < 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {w} fields (at least 2), found {}", values.len()),
            });
        }
        if let Some(c) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("non-finite value in column {}", c + 1),
            });
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "no data rows".into(),
        });
    }
    let w = rows[0].len();
    let x = Tensor2::new(
        rows.len(),
        w - 1,
        rows.iter().flat_map(|r| r[..w - 1].iter().copied()).collect(),
    )?;
    let y = Tensor2::new(rows.len(), 1, rows.iter().map(|r| r[w - 1]).collect())?;
    Ok((x, y))
}

fn csv_error(path: &Path, e: &csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

/// Housing CSV: 8 features followed by the median house value in dollars.
pub fn load_housing(path: &Path, target_scale: f64, train_fraction: f64, seed: u64) -> Result<Dataset> {
    let (x, y) = read_csv(path)?;
    if x.cols() != 8 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "housing data needs 8 features and a target, found {} columns",
                x.cols() + 1
            ),
        });
    }
    Dataset::from_arrays(&x, &y, Task::Regression, target_scale, train_fraction, seed)
}

/// Housing-like census blocks: median income, house age, average rooms,
/// average bedrooms, population, average occupancy, latitude and longitude,
/// with a median value in dollars capped to [14999, 500001].
pub fn synthetic_housing(n: usize, seed: u64) -> (Tensor2, Tensor2) {
    let mut rng = Rng::stream(seed, 0x40_05e);
    // coastal metro centres and an inland valley
    let centres = [(34.05, -118.25, 0.45), (37.77, -122.42, 0.3), (36.7, -119.8, 0.25)];
    let mut x = Vec::with_capacity(n * 8);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.next_f64();
        let mut acc = 0.0;
        let &(clat, clon, _) = centres
            .iter()
            .find(|c| {
                acc += c.2;
                u < acc
            })
            .unwrap_or(&centres[2]);
        let lat = clat + 0.6 * rng.next_normal();
        let lon = clon + 0.6 * rng.next_normal();
        let income = (1.2 + 0.5 * rng.next_normal()).exp().clamp(0.5, 15.0);
        let age = (1.0 + rng.next_f64() * 51.0).floor();
        let rooms = (5.0 + 0.35 * (income - 3.5) + 0.9 * rng.next_normal()).max(1.0);
        let bedrooms = (0.2 * rooms + 0.05 * rng.next_normal()).max(0.3);
        let population = (7.0 + 0.7 * rng.next_normal()).exp().round().max(3.0);
        let occupancy = (2.9 + 0.7 * rng.next_normal()).max(0.8);
        let coast = ((lat - 34.05).hypot(lon + 118.25)).min((lat - 37.77).hypot(lon + 122.42));
        let value = 45_000.0 * income + 1_200.0 * age + 160_000.0 * (-coast / 0.8).exp() - 9_000.0 * (occupancy - 2.9)
            + 4_000.0 * (rooms - 5.0)
            - 25_000.0 * (bedrooms / rooms - 0.2) * 10.0
            + 30_000.0 * rng.next_normal();
        x.extend([income, age, rooms, bedrooms, population, occupancy, lat, lon]);
        y.push(value.clamp(14_999.0, 500_001.0));
    }
    (
        Tensor2::from_vec_unchecked(n, 8, x),
        Tensor2::from_vec_unchecked(n, 1, y),
    )
}

/// Teacher-student data: `x ~ N(0, I)`, labels from a random Tanh MLP.
/// Regression adds `noise`-scaled Gaussian noise; classification takes the
/// teacher's argmax over `classes` outputs.
pub fn make_synthetic(task: Task, n: usize, d_in: usize, noise: f64, seed: u64) -> Result<(Tensor2, Tensor2)> {
    if n == 0 || d_in == 0 {
        return Err(Error::Parameter("synthetic data needs n > 0 and d_in > 0".into()));
    }
    let mut rng = Rng::stream(seed, 0x7eac);
    let out = match task {
        Task::Regression => 1,
        Task::Classification { classes } if classes >= 2 => classes,
        Task::Classification { .. } => return Err(Error::Parameter("classification needs at least 2 classes".into())),
    };
    let spec = NetSpec::new(d_in, &[32], out, Activation::Tanh);
    let teacher = FeedForwardNet::new(&spec, &mut rng)?;
    let x = crate::numerics::sample_normal(&mut rng, 0.0, 1.0, n, d_in)?;
    let t = teacher.predict(&x)?;
    let y = match task {
        Task::Regression => {
            let eps = crate::numerics::sample_normal(&mut rng, 0.0, noise.max(0.0), n, 1)?;
            t.add(&eps)?
        }
        Task::Classification { .. } => {
            let labels = (0..n)
                .map(|r| {
                    let row = t.row(r);
                    (0..out).fold(0, |best, c| if row[c] > row[best] { c } else { best }) as f64
                })
                .collect();
            Tensor2::from_vec_unchecked(n, 1, labels)
        }
    };
    Ok((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn housing_rows(n: usize) -> String {
        (0..n)
            .map(|i| {
                let v = i as f64;
                format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    v,
                    2.0 * v,
                    1.0,
                    v * v,
                    3.0,
                    v + 1.0,
                    34.0,
                    -118.0,
                    452600.0 + v
                )
            })
            .collect()
    }

    #[test]
    fn housing_target_scaled_and_standardized() {
        let f = write_csv(&format!("a,b,c,d,e,f,g,h,target\n{}", housing_rows(20)));
        let ds = load_housing(f.path(), 10_000.0, 0.8, 1).unwrap();
        assert_eq!(ds.x_train.rows(), 16);
        assert_eq!(ds.x_test.rows(), 4);
        let first = ds.train_idx.iter().position(|&i| i == 0);
        if let Some(p) = first {
            assert!((ds.y_train.get(p, 0) - 45.26).abs() < 1e-12);
        } else {
            let p = ds.test_idx.iter().position(|&i| i == 0).unwrap();
            assert!((ds.y_test.get(p, 0) - 45.26).abs() < 1e-12);
        }
        for m in ds.x_train.column_means() {
            assert!(m.abs() < 1e-10);
        }
        // constant column keeps unit std
        assert_eq!(ds.feature_std[2], 1.0);
        assert!(ds.x_train.all_finite());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let f = write_csv(&housing_rows(30));
        let a = load_housing(f.path(), 10_000.0, 0.8, 5).unwrap();
        let b = load_housing(f.path(), 10_000.0, 0.8, 5).unwrap();
        assert_eq!(a.train_idx, b.train_idx);
        assert_eq!(a.test_idx, b.test_idx);
        assert!(a.train_idx.iter().all(|i| !a.test_idx.contains(i)));
        let c = load_housing(f.path(), 10_000.0, 0.8, 6).unwrap();
        assert_ne!(a.train_idx, c.train_idx);
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write_csv(&format!("{}1,2,3,x,5,6,7,8,9\n", housing_rows(3)));
        match load_housing(f.path(), 1.0, 0.5, 1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let f = write_csv(&format!("{}1,2,3\n", housing_rows(3)));
        assert!(matches!(
            load_housing(f.path(), 1.0, 0.5, 1),
            Err(Error::Parse { line: 4, .. })
        ));
        let f = write_csv("1,2,3,4\n5,6,7,8\n");
        assert!(load_housing(f.path(), 1.0, 0.5, 1).is_err());
    }

    #[test]
    fn synthetic_housing_is_plausible() {
        let (x, y) = synthetic_housing(2000, 3);
        assert_eq!(x.shape(), (2000, 8));
        assert!(y.data().iter().all(|v| (14_999.0..=500_001.0).contains(v)));
        let (x2, y2) = synthetic_housing(2000, 3);
        assert_eq!((x, y), (x2, y2));
    }

    #[test]
    fn synthetic_classification_labels() {
        let (x, y) = make_synthetic(Task::Classification { classes: 10 }, 500, 8, 0.0, 2).unwrap();
        assert_eq!(x.shape(), (500, 8));
        assert!(y.data().iter().all(|&l| (0.0..10.0).contains(&l) && l.fract() == 0.0));
        let again = make_synthetic(Task::Classification { classes: 10 }, 500, 8, 0.0, 2).unwrap();
        assert_eq!(again.1, y);
        assert!(make_synthetic(Task::Classification { classes: 1 }, 5, 2, 0.0, 2).is_err());
    }
}
