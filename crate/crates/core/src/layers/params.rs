use std::f64::consts::PI;

use super::{Kind, LayerSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::hypersphere::fill_unit_vector;

/// Trainable storage for one layer. Per-unit vectors are `1×m` rows.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSet {
    Sp {
        weight: Tensor,
        bias: Tensor,
    },
    Wn {
        direction: Tensor,
        length: Tensor,
        bias: Tensor,
    },
    BnSp {
        weight: Tensor,
        bias: Tensor,
        gamma: Tensor,
        beta: Tensor,
    },
    /// `theta` is `m×(n−1)` for `n ≥ 2`. With a 1-D input a direction is
    /// just a sign: `theta` is then `m×1`, holds `0` or `π`, and is frozen.
    Gmp {
        theta: Tensor,
        radius: Tensor,
        scale: Tensor,
        frozen_theta: bool,
    },
}

impl ParamSet {
    /// Trainable tensors in slot order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            ParamSet::Sp { weight, bias } => vec![weight, bias],
            ParamSet::Wn {
                direction,
                length,
                bias,
            } => vec![direction, length, bias],
            ParamSet::BnSp {
                weight,
                bias,
                gamma,
                beta,
            } => vec![weight, bias, gamma, beta],
            ParamSet::Gmp {
                theta,
                radius,
                scale,
                frozen_theta,
            } => {
                if *frozen_theta {
                    vec![radius, scale]
                } else {
                    vec![theta, radius, scale]
                }
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            ParamSet::Sp { weight, bias } => vec![weight, bias],
            ParamSet::Wn {
                direction,
                length,
                bias,
            } => vec![direction, length, bias],
            ParamSet::BnSp {
                weight,
                bias,
                gamma,
                beta,
            } => vec![weight, bias, gamma, beta],
            ParamSet::Gmp {
                theta,
                radius,
                scale,
                frozen_theta,
            } => {
                if *frozen_theta {
                    vec![radius, scale]
                } else {
                    vec![theta, radius, scale]
                }
            }
        }
    }

    pub fn names(&self) -> &'static [&'static str] {
        match self {
            ParamSet::Sp { .. } => &["weight", "bias"],
            ParamSet::Wn { .. } => &["direction", "length", "bias"],
            ParamSet::BnSp { .. } => &["weight", "bias", "gamma", "beta"],
            ParamSet::Gmp { frozen_theta: true, .. } => &["radius", "scale"],
            ParamSet::Gmp { .. } => &["theta", "radius", "scale"],
        }
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn kind(&self) -> Kind {
        match self {
            ParamSet::Sp { .. } => Kind::Sp,
            ParamSet::Wn { .. } => Kind::Wn,
            ParamSet::BnSp { .. } => Kind::BnSp,
            ParamSet::Gmp { .. } => Kind::Gmp,
        }
    }

    /// `u(θ_i)` for GmP unit `i`.
    pub fn gmp_direction(&self, unit: usize) -> Option<Vec<f64>> {
        let ParamSet::Gmp {
            theta,
            frozen_theta,
            ..
        } = self
        else {
            return None;
        };
        if *frozen_theta {
            return Some(vec![theta.get(unit, 0).cos().signum()]);
        }
        let mut u = vec![0.0; theta.cols() + 1];
        fill_unit_vector(theta.row(unit), &mut u);
        Some(u)
    }

    pub(crate) fn check_shapes(&self, spec: &LayerSpec) -> Result<()> {
        let (m, n) = (spec.fan_out, spec.fan_in);
        if self.kind() != spec.kind {
            return Err(Error::InvalidSpec(format!(
                "{:?} parameters for a {:?} layer",
                self.kind(),
                spec.kind
            )));
        }
        let row = [1, m];
        let expected: Vec<[usize; 2]> = match self {
            ParamSet::Sp { .. } => vec![[m, n], row],
            ParamSet::Wn { .. } => vec![[m, n], row, row],
            ParamSet::BnSp { .. } => vec![[m, n], row, row, row],
            ParamSet::Gmp {
                theta,
                frozen_theta,
                ..
            } => {
                if *frozen_theta != (n == 1) {
                    return Err(Error::InvalidSpec(format!(
                        "angles are frozen exactly when the input is 1-D (n = {n})"
                    )));
                }
                if *frozen_theta {
                    if theta.shape() != [m, 1] || theta.data().iter().any(|&a| a != 0.0 && a != PI) {
                        return Err(Error::InvalidSpec(
                            "1-D GmP angles must be an m×1 block of 0 or π".into(),
                        ));
                    }
                    vec![row, row]
                } else {
                    vec![[m, n - 1], row, row]
                }
            }
        };
        for ((t, want), name) in self.tensors().iter().zip(&expected).zip(self.names()) {
            if t.shape() != want {
                return Err(Error::Shape {
                    op: "param_set",
                    detail: format!("{name} has shape {:?}, expected {want:?}", t.shape()),
                });
            }
        }
        Ok(())
    }
}
