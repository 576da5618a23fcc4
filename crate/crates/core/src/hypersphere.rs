//! Hyperspherical coordinates for ReLU characteristic boundaries.
//!
//! A unit in `R^n` is described by a radius `λ` and `n - 1` angles `θ`.
//! The angles map onto the unit sphere through
//!
//! ```text
//! u_1 = cos θ_1
//! u_k = sin θ_1 ... sin θ_{k-1} cos θ_k      (1 < k < n)
//! u_n = sin θ_1 ... sin θ_{n-1}
//! ```
//!
//! and the unit's zero-pre-activation hyperplane `{x : u(θ)ᵀx + λ = 0}` has
//! its closest point to the origin at `φ = -λ u(θ)`.
//!
//! The pullback of the Euclidean metric through this chart is diagonal with
//! entries `1, sin²θ_1, sin²θ_1 sin²θ_2, ...`, so a perturbation `ε` of the
//! angles turns the direction by `‖ε‖_M ≤ ‖ε‖₂` to first order.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Tolerance used when checking that a direction is unit length.
pub const UNIT_NORM_TOL: f64 = 1e-12;

/// Weights with a Euclidean norm below this have no defined boundary.
pub const MIN_WEIGHT_NORM: f64 = 1e-30;

/// The `n - 1` hyperspherical angles of a direction in `R^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularCoordinates {
    angles: Vec<f64>,
}

impl AngularCoordinates {
    /// Angles in the canonical chart: `θ_1..θ_{n-2} ∈ [0, π]`, `θ_{n-1} ∈ [0, 2π)`.
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        let coords = Self::unconstrained(angles)?;
        if !coords.is_canonical() {
            return Err(Error::InvalidDimension(format!(
                "angles {:?} are outside the canonical range",
                coords.angles
            )));
        }
        Ok(coords)
    }

    /// Any finite angles. The direction map is periodic, so trained
    /// parameters never need wrapping.
    pub fn unconstrained(angles: Vec<f64>) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::InvalidDimension(
                "hyperspherical coordinates need an ambient dimension of at least 2".into(),
            ));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidDimension(format!(
                "non-finite angle in {angles:?}"
            )));
        }
        Ok(Self { angles })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn into_angles(self) -> Vec<f64> {
        self.angles
    }

    /// Ambient dimension `n`.
    pub fn dim_ambient(&self) -> usize {
        self.angles.len() + 1
    }

    pub fn is_canonical(&self) -> bool {
        let last = self.angles.len() - 1;
        self.angles.iter().enumerate().all(|(i, &a)| {
            if i == last {
                (0.0..2.0 * PI).contains(&a)
            } else {
                (0.0..=PI).contains(&a)
            }
        })
    }

    /// Equivalent angles in the canonical chart.
    pub fn canonicalize(&self) -> Result<Self> {
        let u = unit_vector(self)?;
        angles_from_direction(u.components())
    }
}

/// A vector on the unit sphere `S^{n-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitDirection {
    components: Vec<f64>,
}

impl UnitDirection {
    /// Normalizes `v`. Fails on the zero vector.
    pub fn new(v: &[f64]) -> Result<Self> {
        let norm = l2_norm(v);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateDirection(format!(
                "cannot normalize vector with norm {norm}"
            )));
        }
        Ok(Self {
            components: v.iter().map(|x| x / norm).collect(),
        })
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn into_components(self) -> Vec<f64> {
        self.components
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }
}

/// A ReLU characteristic boundary `{x : u(θ)ᵀx + λ = 0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicBoundary {
    pub radius: f64,
    pub angles: AngularCoordinates,
}

impl CharacteristicBoundary {
    pub fn new(radius: f64, angles: AngularCoordinates) -> Self {
        Self { radius, angles }
    }

    pub fn spatial_location(&self) -> Vec<f64> {
        spatial_location(self)
    }
}

/// Diagonal of the pullback metric of the angular chart.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricDiagonal {
    entries: Vec<f64>,
}

impl MetricDiagonal {
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// `‖ε‖_M`.
    pub fn norm(&self, eps: &[f64]) -> Result<f64> {
        if eps.len() != self.entries.len() {
            return Err(Error::InvalidDimension(format!(
                "perturbation has {} entries, metric has {}",
                eps.len(),
                self.entries.len()
            )));
        }
        Ok(self
            .entries
            .iter()
            .zip(eps)
            .map(|(m, e)| m * e * e)
            .sum::<f64>()
            .sqrt())
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    // Scaled accumulation keeps tiny weight vectors from underflowing.
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    scale * v.iter().map(|x| (x / scale).powi(2)).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Writes `u(θ)` for raw angles into `out` (`out.len() == angles.len() + 1`).
pub(crate) fn fill_unit_vector(angles: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), angles.len() + 1);
    let mut sin_prefix = 1.0;
    for (i, &a) in angles.iter().enumerate() {
        out[i] = sin_prefix * a.cos();
        sin_prefix *= a.sin();
    }
    out[angles.len()] = sin_prefix;
}

pub fn unit_vector(theta: &AngularCoordinates) -> Result<UnitDirection> {
    let n = theta.dim_ambient();
    if n < 2 {
        return Err(Error::InvalidDimension(format!(
            "ambient dimension {n} < 2"
        )));
    }
    let mut components = vec![0.0; n];
    fill_unit_vector(theta.angles(), &mut components);
    Ok(UnitDirection { components })
}

/// Inverse of [`unit_vector`]. The input is renormalized first; when a
/// trailing block of components vanishes the remaining angles are 0.
pub fn angles_from_direction(u: &[f64]) -> Result<AngularCoordinates> {
    let n = u.len();
    if n < 2 {
        return Err(Error::InvalidDimension(format!(
            "ambient dimension {n} < 2"
        )));
    }
    let u = UnitDirection::new(u)?.into_components();

    // tail[i] = ‖u[i..]‖
    let mut tail = vec![0.0_f64; n + 1];
    for i in (0..n).rev() {
        tail[i] = tail[i + 1].hypot(u[i]);
    }

    let mut angles = vec![0.0; n - 1];
    for i in 0..n - 2 {
        if tail[i] == 0.0 {
            break;
        }
        angles[i] = tail[i + 1].atan2(u[i]);
    }
    if tail[n - 2] > 0.0 {
        let mut last = u[n - 1].atan2(u[n - 2]);
        if last < 0.0 {
            last += 2.0 * PI;
        }
        if last >= 2.0 * PI {
            last = 0.0;
        }
        angles[n - 2] = last;
    }
    AngularCoordinates::new(angles)
}

/// `φ = -λ u(θ)`.
pub fn spatial_location(b: &CharacteristicBoundary) -> Vec<f64> {
    let mut u = vec![0.0; b.angles.dim_ambient()];
    fill_unit_vector(b.angles.angles(), &mut u);
    u.iter().map(|x| -b.radius * x).collect()
}

/// `φ = -b w / (wᵀw)` for a standard unit.
pub fn spatial_location_sp(w: &[f64], b: f64) -> Result<Vec<f64>> {
    let norm = l2_norm(w);
    if !(norm >= MIN_WEIGHT_NORM) {
        return Err(Error::DegenerateWeight(format!(
            "weight norm {norm:e} is below {MIN_WEIGHT_NORM:e}"
        )));
    }
    // -(b/‖w‖) (w/‖w‖) avoids squaring tiny norms.
    let lambda = b / norm;
    Ok(w.iter().map(|x| -lambda * (x / norm)).collect())
}

/// Angle in `[0, π]` between two nonzero vectors.
///
/// Evaluated as `2 atan2(‖â - b̂‖, ‖â + b̂‖)`, which equals the arccos of the
/// normalized inner product but keeps full precision near 0 and π.
pub fn angle_between(u1: &[f64], u2: &[f64]) -> Result<f64> {
    if u1.len() != u2.len() {
        return Err(Error::InvalidDimension(format!(
            "vectors of length {} and {}",
            u1.len(),
            u2.len()
        )));
    }
    let a = UnitDirection::new(u1)?;
    let b = UnitDirection::new(u2)?;
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.components().iter().zip(b.components()) {
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    let angle = 2.0 * diff.sqrt().atan2(sum.sqrt());
    Ok(angle.clamp(0.0, PI))
}

pub fn metric_diagonal(theta: &AngularCoordinates) -> MetricDiagonal {
    let angles = theta.angles();
    let mut entries = Vec::with_capacity(angles.len());
    let mut prod = 1.0;
    entries.push(prod);
    for a in &angles[..angles.len() - 1] {
        prod *= a.sin().powi(2);
        entries.push(prod);
    }
    MetricDiagonal { entries }
}

/// First-order change in direction, in radians, when the angles move by `eps`.
pub fn angular_change_gmp(theta: &AngularCoordinates, eps: &[f64]) -> Result<f64> {
    if eps.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidDimension("non-finite perturbation".into()));
    }
    metric_diagonal(theta).norm(eps)
}

pub fn degrees(radians: f64) -> f64 {
    radians * 180.0 / PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_6};

    fn coords(a: &[f64]) -> AngularCoordinates {
        AngularCoordinates::unconstrained(a.to_vec()).unwrap()
    }

    #[test]
    fn unit_vector_known_values() {
        let u = unit_vector(&coords(&[0.0])).unwrap();
        assert_abs_diff_eq!(u.components()[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u.components()[1], 0.0, epsilon = 1e-15);

        let u = unit_vector(&coords(&[FRAC_PI_2])).unwrap();
        assert_abs_diff_eq!(u.components()[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u.components()[1], 1.0, epsilon = 1e-15);

        let u = unit_vector(&coords(&[FRAC_PI_2, FRAC_PI_2])).unwrap();
        for (got, want) in u.components().iter().zip([0.0, 0.0, 1.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn unit_vector_n3_matches_symbolic_expansion() {
        let (t1, t2) = (0.7_f64, 2.1_f64);
        let expected = [t1.cos(), t1.sin() * t2.cos(), t1.sin() * t2.sin()];
        let u = unit_vector(&coords(&[t1, t2])).unwrap();
        for (got, want) in u.components().iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn empty_angles_rejected() {
        assert!(matches!(
            AngularCoordinates::unconstrained(vec![]),
            Err(Error::InvalidDimension(_))
        ));
        assert!(AngularCoordinates::new(vec![4.0, 0.0]).is_err());
    }

    #[test]
    fn inverse_map_examples() {
        let a = angles_from_direction(&[0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(a.angles()[0], FRAC_PI_2, epsilon = 1e-15);

        let a = angles_from_direction(&[-1.0, 0.0, 0.0]).unwrap();
        assert_eq!(a.angles(), &[PI, 0.0]);

        // trailing zero block: remaining angles are 0
        let a = angles_from_direction(&[0.0, 2.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(a.angles()[0], FRAC_PI_2, epsilon = 1e-15);
        assert_eq!(&a.angles()[1..], &[0.0, 0.0]);

        // negative last components land in [π, 2π)
        let a = angles_from_direction(&[0.0, -1.0]).unwrap();
        assert_abs_diff_eq!(a.angles()[0], 1.5 * PI, epsilon = 1e-15);
    }

    #[test]
    fn zero_direction_rejected() {
        assert!(matches!(
            angles_from_direction(&[0.0, 0.0]),
            Err(Error::DegenerateDirection(_))
        ));
        assert!(matches!(
            angle_between(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateDirection(_))
        ));
    }

    #[test]
    fn spatial_location_examples() {
        let b = CharacteristicBoundary::new(0.0, coords(&[1.3]));
        assert_eq!(b.spatial_location(), vec![-0.0, -0.0]);

        let b = CharacteristicBoundary::new(-1.0, coords(&[FRAC_PI_4]));
        let phi = b.spatial_location();
        let h = 2f64.sqrt() / 2.0;
        assert_abs_diff_eq!(phi[0], h, epsilon = 1e-15);
        assert_abs_diff_eq!(phi[1], h, epsilon = 1e-15);
        // substitution into uᵀφ + λ
        let u = unit_vector(&b.angles).unwrap();
        assert_abs_diff_eq!(dot(u.components(), &phi) + b.radius, 0.0, epsilon = 1e-12);

        let b = CharacteristicBoundary::new(1.0, coords(&[0.0]));
        let phi = b.spatial_location();
        assert_abs_diff_eq!(phi[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(phi[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn spatial_location_sp_examples() {
        assert_eq!(spatial_location_sp(&[1.0, 0.0], 1.0).unwrap(), vec![-1.0, -0.0]);
        assert_eq!(spatial_location_sp(&[2.0, 0.0], 1.0).unwrap(), vec![-0.5, -0.0]);
        assert!(matches!(
            spatial_location_sp(&[1e-31, 0.0], 1.0),
            Err(Error::DegenerateWeight(_))
        ));
    }

    #[test]
    fn angle_between_examples() {
        let w = [0.3, -1.2, 0.5];
        let flipped: Vec<f64> = w.iter().map(|x| x - (1.0 + 1e-3) * x).collect();
        assert_abs_diff_eq!(angle_between(&w, &flipped).unwrap(), PI, epsilon = 1e-12);
        assert_eq!(angle_between(&w, &w).unwrap(), 0.0);
        assert_abs_diff_eq!(
            angle_between(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            FRAC_PI_2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn metric_diagonal_examples() {
        let m = metric_diagonal(&coords(&[FRAC_PI_2, 0.4]));
        assert_abs_diff_eq!(m.entries()[0], 1.0);
        assert_abs_diff_eq!(m.entries()[1], 1.0, epsilon = 1e-15);

        let m = metric_diagonal(&coords(&[FRAC_PI_6, 2.0]));
        assert_abs_diff_eq!(m.entries()[1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn angular_change_examples() {
        let t = coords(&[0.9, 1.7, 0.2]);
        assert_abs_diff_eq!(
            angular_change_gmp(&t, &[-0.3, 0.0, 0.0]).unwrap(),
            0.3,
            epsilon = 1e-15
        );

        let t = coords(&[FRAC_PI_2, 1.0]);
        assert_abs_diff_eq!(
            angular_change_gmp(&t, &[0.3, 0.4]).unwrap(),
            0.5,
            epsilon = 1e-15
        );

        let t = coords(&[FRAC_PI_6, 1.0]);
        assert_abs_diff_eq!(
            angular_change_gmp(&t, &[0.0, 0.2]).unwrap(),
            0.1,
            epsilon = 1e-15
        );

        // first-order agreement with the measured rotation
        let eps = [0.0, 1e-4];
        let shifted = coords(&[FRAC_PI_6, 1.0 + 1e-4]);
        let measured = angle_between(
            unit_vector(&t).unwrap().components(),
            unit_vector(&shifted).unwrap().components(),
        )
        .unwrap();
        let predicted = angular_change_gmp(&t, &eps).unwrap();
        assert!((measured - predicted).abs() < 1e-6);
    }

    #[test]
    fn mismatched_perturbation_rejected() {
        assert!(angular_change_gmp(&coords(&[0.1, 0.2]), &[0.1]).is_err());
    }

    #[test]
    fn canonicalize_preserves_direction() {
        let raw = coords(&[-0.4, 7.5, -2.0]);
        let canon = raw.canonicalize().unwrap();
        assert!(canon.is_canonical());
        let a = unit_vector(&raw).unwrap();
        let b = unit_vector(&canon).unwrap();
        for (x, y) in a.components().iter().zip(b.components()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }
}
