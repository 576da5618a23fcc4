//! Synthetic regression and classification sets plus a CSV loader.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::csvio::{parse_field, read_table};
use crate::error::{Error, Result};
use crate::model::Targets;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Tensor,
    pub y: Targets,
    /// Filled in by standardization; empty otherwise.
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Tensor, y: Targets) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Data("a dataset needs at least one row".into()));
        }
        if y.len() != x.rows() {
            return Err(Error::Data(format!("{} targets for {} rows", y.len(), x.rows())));
        }
        let finite = x.is_finite()
            && match &y {
                Targets::Values(t) => t.is_finite(),
                Targets::Labels(_) => true,
            };
        if !finite {
            return Err(Error::Data("non-finite value in dataset".into()));
        }
        Ok(Self {
            name: name.into(),
            x,
            y,
            feature_means: Vec::new(),
            feature_stds: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(idx),
            y: self.y.select(idx),
            feature_means: self.feature_means.clone(),
            feature_stds: self.feature_stds.clone(),
        }
    }

    /// Per-column mean and (population) standard deviation. Constant
    /// columns get a unit scale so they map to zero.
    pub fn feature_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let (r, c) = (self.x.rows() as f64, self.x.cols());
        let mut means = vec![0.0; c];
        for i in 0..self.x.rows() {
            for (m, v) in means.iter_mut().zip(self.x.row(i)) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= r);
        let mut vars = vec![0.0; c];
        for i in 0..self.x.rows() {
            for ((s, v), m) in vars.iter_mut().zip(self.x.row(i)).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        let stds = vars
            .into_iter()
            .map(|s| {
                let sd = (s / r).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        (means, stds)
    }

    /// Applies `(x − mean)/std` column-wise and records the statistics.
    pub fn standardize_with(&mut self, means: &[f64], stds: &[f64]) -> Result<()> {
        if means.len() != self.dim() || stds.len() != self.dim() {
            return Err(Error::Data(format!(
                "standardization statistics for {} columns, data has {}",
                means.len(),
                self.dim()
            )));
        }
        let c = self.dim();
        for (i, v) in self.x.data_mut().iter_mut().enumerate() {
            let j = i % c;
            *v = (*v - means[j]) / stds[j];
        }
        self.feature_means = means.to_vec();
        self.feature_stds = stds.to_vec();
        Ok(())
    }
}

/// The 1-D Levy function with `w = 1 + (x − 1)/4`:
/// `sin²(πw) + (w − 1)²(1 + sin²(2πw))`.
pub fn levy(x: f64) -> f64 {
    let w = 1.0 + (x - 1.0) / 4.0;
    (PI * w).sin().powi(2) + (w - 1.0).powi(2) * (1.0 + (2.0 * PI * w).sin().powi(2))
}

pub const LEVY_RANGE: (f64, f64) = (-10.0, 10.0);
pub const LEVY_NOISE: f64 = 0.5;

/// `x ~ U(range)`, `y = levy(x) + N(0, noise_std²)`.
pub fn gen_levy<R: Rng + ?Sized>(
    n_points: usize,
    noise_std: f64,
    x_range: (f64, f64),
    rng: &mut R,
) -> Result<Dataset> {
    if n_points < 2 {
        return Err(Error::Data(format!("need at least 2 points, got {n_points}")));
    }
    let (lo, hi) = x_range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Data(format!("invalid range [{lo}, {hi}]")));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Data(format!("noise std {noise_std}: {e}")))?;
    let mut xs = Vec::with_capacity(n_points);
    let mut ys = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let x = rng.random_range(lo..hi);
        xs.push(x);
        ys.push(levy(x) + noise.sample(rng));
    }
    Dataset::new(
        "levy",
        Tensor::column_vector(xs),
        Targets::Values(Tensor::column_vector(ys)),
    )
}

/// Two interleaved half-rings. Class 0 is the upper arc of a circle of
/// `radius` around the origin; class 1 is the lower arc shifted by
/// `(radius, −gap)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BananaGeometry {
    pub radius: f64,
    pub gap: f64,
}

impl Default for BananaGeometry {
    fn default() -> Self {
        // A negative gap lifts the lower arc into the upper one's mouth.
        Self { radius: 1.0, gap: -0.5 }
    }
}

pub const BANANA_NOISE: f64 = 0.2;

pub fn gen_banana<R: Rng + ?Sized>(n_points: usize, noise_std: f64, rng: &mut R) -> Result<Dataset> {
    gen_banana_with(n_points, noise_std, BananaGeometry::default(), rng)
}

pub fn gen_banana_with<R: Rng + ?Sized>(
    n_points: usize,
    noise_std: f64,
    geometry: BananaGeometry,
    rng: &mut R,
) -> Result<Dataset> {
    if n_points == 0 || n_points % 2 != 0 {
        return Err(Error::Data(format!("need a positive even point count, got {n_points}")));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Data(format!("noise std {noise_std}: {e}")))?;
    let BananaGeometry { radius, gap } = geometry;
    let half = n_points / 2;
    let mut rows = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for label in 0..2 {
        for _ in 0..half {
            let t = rng.random_range(0.0..PI);
            let (x, y) = if label == 0 {
                (radius * t.cos(), radius * t.sin())
            } else {
                (radius - radius * t.cos(), -radius * t.sin() - gap)
            };
            rows.push(vec![x + noise.sample(rng), y + noise.sample(rng)]);
            labels.push(label);
        }
    }
    // Interleave the classes so minibatches see both.
    let mut order: Vec<usize> = (0..n_points).collect();
    order.shuffle(rng);
    let x = Tensor::from_rows(&order.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>())?;
    let y = Targets::Labels(order.iter().map(|&i| labels[i]).collect());
    Dataset::new("banana", x, y)
}

/// Reads `x1,x2,label` rows.
pub fn load_banana_csv(path: &Path) -> Result<Dataset> {
    let (header, rows) = read_table(path)?;
    if header != ["x1", "x2", "label"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header x1,x2,label, got {}", header.join(",")),
        });
    }
    let mut xs = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (line, r) in rows {
        let x1: f64 = parse_field(path, line, "x1", &r[0])?;
        let x2: f64 = parse_field(path, line, "x2", &r[1])?;
        // Accept both 0/1 and the classic −1/+1 coding.
        let raw: f64 = parse_field(path, line, "label", &r[2])?;
        let label = match raw {
            v if v == 0.0 || v == -1.0 => 0,
            v if v == 1.0 => 1,
            v => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("label {v} is not 0, 1 or -1"),
                })
            }
        };
        xs.push(vec![x1, x2]);
        labels.push(label);
    }
    if xs.is_empty() {
        return Err(Error::Data(format!("{} has no rows", path.display())));
    }
    Dataset::new("banana", Tensor::from_rows(&xs)?, Targets::Labels(labels))
}

pub const MIN_UCI_ROWS: usize = 5;

/// Seeded train/test index split. The train part has `round(fraction·n)` rows.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let test = idx.split_off(n_train.min(n));
    (idx, test)
}

/// Loads a numeric CSV and returns a seeded 80/20 split. Features are
/// standardized with training statistics; targets stay in natural units.
pub fn load_uci_csv(path: &Path, target_column: &str, split_seed: u64) -> Result<(Dataset, Dataset)> {
    load_uci_csv_with(path, target_column, split_seed, 0.8)
}

pub fn load_uci_csv_with(
    path: &Path,
    target_column: &str,
    split_seed: u64,
    train_fraction: f64,
) -> Result<(Dataset, Dataset)> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let (header, rows) = read_table(path)?;
    let target = header
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::Data(format!("{}: no column named `{target_column}`", path.display())))?;
    if rows.len() < MIN_UCI_ROWS {
        return Err(Error::Data(format!(
            "{}: {} rows, need at least {MIN_UCI_ROWS}",
            path.display(),
            rows.len()
        )));
    }
    let c = header.len() - 1;
    let mut x = Vec::with_capacity(rows.len() * c);
    let mut y = Vec::with_capacity(rows.len());
    for (line, r) in &rows {
        for (j, raw) in r.iter().enumerate() {
            let v: f64 = parse_field(path, *line, &header[j], raw)?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    message: format!("column `{}` is not finite", header[j]),
                });
            }
            if j == target {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    let name = path
        .file_stem()
        .map_or_else(|| "uci".to_string(), |s| s.to_string_lossy().into_owned());
    let all = Dataset::new(
        name,
        Tensor::matrix(rows.len(), c, x)?,
        Targets::Values(Tensor::column_vector(y)),
    )?;
    let (train_idx, test_idx) = split_indices(all.len(), train_fraction, split_seed);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Data(format!(
            "split of {} rows at {train_fraction} leaves an empty side",
            all.len()
        )));
    }
    let mut train = all.select(&train_idx);
    let mut test = all.select(&test_idx);
    let (means, stds) = train.feature_stats();
    train.standardize_with(&means, &stds)?;
    test.standardize_with(&means, &stds)?;
    Ok((train, test))
}
