use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Kind, LayerSpec, ParamSet};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::hypersphere::{angles_from_direction, l2_norm, MIN_WEIGHT_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Gaussian with variance `2 / fan_in`.
    He,
    /// Gaussian with variance `2 / (fan_in + fan_out)`.
    Glorot,
    /// Directions uniform on the sphere, `λ = 0`, `r = 1`.
    GmpDefault,
    /// Each angle uniform on its own range. Not sphere-uniform for `n > 2`.
    GmpPerAngleUniform,
}

impl InitScheme {
    pub fn default_for(kind: Kind) -> Self {
        match kind {
            Kind::Gmp => InitScheme::GmpDefault,
            _ => InitScheme::He,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InitScheme::He => "he",
            InitScheme::Glorot => "glorot",
            InitScheme::GmpDefault => "gmp_default",
            InitScheme::GmpPerAngleUniform => "gmp_per_angle",
        }
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "he" => Ok(InitScheme::He),
            "glorot" => Ok(InitScheme::Glorot),
            "gmp_default" => Ok(InitScheme::GmpDefault),
            "gmp_per_angle" => Ok(InitScheme::GmpPerAngleUniform),
            other => Err(Error::config("model.init", format!("unknown scheme `{other}`"))),
        }
    }
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

/// Fresh parameters for `spec`. GmP layers take only the GmP schemes and
/// the other kinds take only He or Glorot.
pub fn init_params<R: Rng + ?Sized>(spec: &LayerSpec, scheme: InitScheme, rng: &mut R) -> Result<ParamSet> {
    spec.validate()?;
    let (n, m) = (spec.fan_in, spec.fan_out);
    let gmp_scheme = matches!(scheme, InitScheme::GmpDefault | InitScheme::GmpPerAngleUniform);
    if gmp_scheme != (spec.kind == Kind::Gmp) {
        return Err(Error::InvalidSpec(format!(
            "init scheme `{}` does not apply to {:?} layers",
            scheme.name(),
            spec.kind
        )));
    }
    let std = match scheme {
        InitScheme::He => (2.0 / n as f64).sqrt(),
        InitScheme::Glorot => (2.0 / (n + m) as f64).sqrt(),
        _ => 0.0,
    };
    let zeros = || Tensor::zeros(1, m);
    let ones = || Tensor::full(1, m, 1.0);
    Ok(match spec.kind {
        Kind::Sp => ParamSet::Sp {
            weight: gaussian_matrix(m, n, std, rng),
            bias: zeros(),
        },
        Kind::Wn => {
            let direction = nonzero_rows(m, n, std, rng);
            let length = Tensor::row_vector((0..m).map(|i| l2_norm(direction.row(i))).collect());
            ParamSet::Wn {
                direction,
                length,
                bias: zeros(),
            }
        }
        Kind::BnSp => ParamSet::BnSp {
            weight: gaussian_matrix(m, n, std, rng),
            bias: zeros(),
            gamma: ones(),
            beta: zeros(),
        },
        Kind::Gmp => {
            let theta = if n == 1 {
                let angles = (0..m)
                    .map(|_| if rng.random::<bool>() { 0.0 } else { PI })
                    .collect();
                Tensor::column_vector(angles)
            } else {
                let mut data = Vec::with_capacity(m * (n - 1));
                for _ in 0..m {
                    match scheme {
                        InitScheme::GmpDefault => {
                            let dir = nonzero_rows(1, n, 1.0, rng);
                            data.extend(angles_from_direction(dir.data())?.into_angles());
                        }
                        _ => {
                            for j in 0..n - 1 {
                                let hi = if j == n - 2 { 2.0 * PI } else { PI };
                                data.push(rng.random_range(0.0..hi));
                            }
                        }
                    }
                }
                Tensor::matrix(m, n - 1, data)?
            };
            ParamSet::Gmp {
                theta,
                radius: zeros(),
                scale: ones(),
                frozen_theta: n == 1,
            }
        }
    })
}

/// Gaussian rows, redrawn in the (measure-zero) event of a zero row.
fn nonzero_rows<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let mut t = gaussian_matrix(rows, cols, std, rng);
    for i in 0..rows {
        while l2_norm(t.row(i)) < MIN_WEIGHT_NORM {
            for j in 0..cols {
                let v: f64 = StandardNormal.sample(rng);
                t.set(i, j, std * v);
            }
        }
    }
    t
}

/// The GmP triple `(r, θ, λ)` of an SP unit: `r = ‖w‖`, `λ = b/‖w‖`.
pub fn gmp_from_sp(w: &[f64], b: f64) -> Result<(f64, Vec<f64>, f64)> {
    let r = l2_norm(w);
    if !(r >= MIN_WEIGHT_NORM) {
        return Err(Error::DegenerateWeight(format!("‖w‖ = {r}")));
    }
    let theta = angles_from_direction(w)?.into_angles();
    Ok((r, theta, b / r))
}

/// The SP weight `l·v/‖v‖` of a WN unit.
pub fn sp_from_wn(v: &[f64], l: f64) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if !(norm > 0.0) {
        return Err(Error::DegenerateWeight(format!("‖v‖ = {norm}")));
    }
    Ok(v.iter().map(|x| l * x / norm).collect())
}
