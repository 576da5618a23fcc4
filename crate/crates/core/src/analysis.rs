//! Characteristic-boundary instrumentation.
//!
//! Every hidden ReLU unit has a boundary `{x : wᵀx + b = 0}` whose closest
//! point to the origin is `φ = −(b/‖w‖)·(w/‖w‖)`. Snapshots record `φ` and
//! the unit direction after each optimizer step; drift metrics compare
//! consecutive snapshots.

use std::f64::consts::PI;
use std::path::Path;

use crate::csvio::{fmt_f64, parse_field, read_table, CsvOut};
use crate::error::{Error, Result};
use crate::hypersphere::{
    angle_between, angles_from_direction, degrees, l2_norm, AngularCoordinates, MIN_WEIGHT_NORM,
};
use crate::layers::Kind;
use crate::model::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct UnitSnapshot {
    pub step: u64,
    pub layer: usize,
    pub unit_index: usize,
    pub phi: Vec<f64>,
    /// Unit-norm effective direction.
    pub direction: Vec<f64>,
    pub lambda_effective: f64,
}

impl UnitSnapshot {
    /// Canonical angles of the effective direction (`n ≥ 2` only).
    pub fn theta_effective(&self) -> Result<AngularCoordinates> {
        angles_from_direction(&self.direction)
    }
}

/// Boundaries of every unit of hidden layer `layer_index`, using each
/// layer's eval-time affine map.
pub fn snapshot_layer(model: &Model, layer_index: usize, step: u64) -> Result<Vec<UnitSnapshot>> {
    let layers = model.layers();
    if layer_index + 1 >= layers.len() {
        return Err(Error::UnsupportedLayer(format!(
            "layer {layer_index} is not a hidden layer of a {}-layer model",
            layers.len()
        )));
    }
    let layer = &layers[layer_index];
    let m = layer.spec.fan_out;
    let mut out = Vec::with_capacity(m);
    if layer.spec.kind == Kind::Gmp {
        for i in 0..m {
            let direction = layer.params.gmp_direction(i).expect("gmp params");
            let lambda = layer.gmp_effective_radius(i, &direction);
            out.push(UnitSnapshot {
                step,
                layer: layer_index,
                unit_index: i,
                phi: direction.iter().map(|u| -lambda * u).collect(),
                direction,
                lambda_effective: lambda,
            });
        }
        return Ok(out);
    }
    let (w, b) = layer.effective_affine()?;
    for i in 0..m {
        let row = w.row(i);
        let norm = l2_norm(row);
        if !(norm >= MIN_WEIGHT_NORM) {
            return Err(Error::DegenerateWeight(format!(
                "unit {i} of layer {layer_index} has ‖w‖ = {norm}"
            )));
        }
        let direction: Vec<f64> = row.iter().map(|v| v / norm).collect();
        let lambda = b[i] / norm;
        out.push(UnitSnapshot {
            step,
            layer: layer_index,
            unit_index: i,
            phi: direction.iter().map(|u| -lambda * u).collect(),
            direction,
            lambda_effective: lambda,
        });
    }
    Ok(out)
}

fn check_pairing(prev: &[UnitSnapshot], curr: &[UnitSnapshot]) -> Result<()> {
    if prev.len() != curr.len() {
        return Err(Error::UnitCountMismatch {
            prev: prev.len(),
            curr: curr.len(),
        });
    }
    Ok(())
}

/// Per-unit `(‖Δφ‖, Δangle in degrees)`.
pub fn unit_drifts(prev: &[UnitSnapshot], curr: &[UnitSnapshot]) -> Result<Vec<(f64, f64)>> {
    check_pairing(prev, curr)?;
    prev.iter()
        .zip(curr)
        .map(|(p, c)| {
            if p.phi.len() != c.phi.len() {
                return Err(Error::InvalidDimension(format!(
                    "unit {} changed dimension from {} to {}",
                    p.unit_index,
                    p.phi.len(),
                    c.phi.len()
                )));
            }
            let dphi: Vec<f64> = p.phi.iter().zip(&c.phi).map(|(a, b)| b - a).collect();
            let angle = angle_between(&p.direction, &c.direction)?;
            Ok((l2_norm(&dphi), degrees(angle)))
        })
        .collect()
}

/// `(max_i ‖Δφ_i‖, max_i Δangle_i)` with the angle in degrees.
pub fn drift_metrics(prev: &[UnitSnapshot], curr: &[UnitSnapshot]) -> Result<(f64, f64)> {
    Ok(unit_drifts(prev, curr)?
        .into_iter()
        .fold((0.0, 0.0), |(mp, ma), (p, a)| (f64::max(mp, p), f64::max(ma, a))))
}

/// Per-step maxima of boundary drift.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StabilityTrace {
    pub steps: Vec<u64>,
    pub max_abs_dphi: Vec<f64>,
    pub max_abs_dtheta_deg: Vec<f64>,
}

impl StabilityTrace {
    pub fn push(&mut self, step: u64, dphi: f64, dtheta_deg: f64) {
        self.steps.push(step);
        self.max_abs_dphi.push(dphi);
        self.max_abs_dtheta_deg.push(dtheta_deg);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// One line of `trace.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub layer: usize,
    pub unit: usize,
    pub phi: Vec<f64>,
    pub lambda: f64,
    /// Direction change since the previous snapshot of this unit.
    pub angle_deg: f64,
}

/// Follows one hidden layer through training.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub layer: usize,
    pub trace: StabilityTrace,
    pub rows: Vec<TraceRow>,
    keep_rows: bool,
    prev: Option<Vec<UnitSnapshot>>,
}

impl Tracker {
    /// With `keep_rows`, every snapshot is kept for `trace.csv`.
    pub fn new(layer: usize, keep_rows: bool) -> Self {
        Self {
            layer,
            trace: StabilityTrace::default(),
            rows: Vec::new(),
            keep_rows,
            prev: None,
        }
    }

    pub fn observe(&mut self, model: &Model, step: u64) -> Result<()> {
        let curr = snapshot_layer(model, self.layer, step)?;
        let angles = match &self.prev {
            Some(prev) => {
                let drifts = unit_drifts(prev, &curr)?;
                let (dphi, dtheta) = drifts
                    .iter()
                    .fold((0.0, 0.0), |(mp, ma), &(p, a)| (f64::max(mp, p), f64::max(ma, a)));
                self.trace.push(step, dphi, dtheta);
                drifts.into_iter().map(|(_, a)| a).collect()
            }
            None => vec![0.0; curr.len()],
        };
        if self.keep_rows {
            self.rows.extend(curr.iter().zip(angles).map(|(s, angle_deg)| TraceRow {
                step,
                layer: s.layer,
                unit: s.unit_index,
                phi: s.phi.clone(),
                lambda: s.lambda_effective,
                angle_deg,
            }));
        }
        self.prev = Some(curr);
        Ok(())
    }

    pub fn last_snapshot(&self) -> Option<&[UnitSnapshot]> {
        self.prev.as_deref()
    }
}

pub const STABILITY_HEADER: [&str; 3] = ["step", "max_abs_dphi", "max_abs_dtheta_deg"];

pub fn trace_header(dim: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), "layer".into(), "unit".into()];
    h.extend((0..dim).map(|i| format!("phi_{i}")));
    h.push("lambda".into());
    h.push("angle_deg".into());
    h
}

pub fn write_stability_csv(path: &Path, trace: &StabilityTrace) -> Result<()> {
    let header: Vec<String> = STABILITY_HEADER.iter().map(|s| s.to_string()).collect();
    let mut out = CsvOut::create(path, &header)?;
    for i in 0..trace.len() {
        out.row(&[
            trace.steps[i].to_string(),
            fmt_f64(trace.max_abs_dphi[i]),
            fmt_f64(trace.max_abs_dtheta_deg[i]),
        ])?;
    }
    out.finish()
}

pub fn read_stability_csv(path: &Path) -> Result<StabilityTrace> {
    let (header, rows) = read_table(path)?;
    if header != STABILITY_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut trace = StabilityTrace::default();
    for (line, r) in rows {
        trace.push(
            parse_field(path, line, "step", &r[0])?,
            parse_field(path, line, "max_abs_dphi", &r[1])?,
            parse_field(path, line, "max_abs_dtheta_deg", &r[2])?,
        );
    }
    Ok(trace)
}

/// Writes `trace.csv`. `dim` fixes the number of `phi_*` columns, so an
/// empty trace still gets a complete header.
pub fn write_trace_csv(path: &Path, dim: usize, rows: &[TraceRow]) -> Result<()> {
    let mut out = CsvOut::create(path, &trace_header(dim))?;
    for r in rows {
        if r.phi.len() != dim {
            return Err(Error::InvalidDimension(format!(
                "trace row has {} coordinates, header has {dim}",
                r.phi.len()
            )));
        }
        let mut fields = vec![r.step.to_string(), r.layer.to_string(), r.unit.to_string()];
        fields.extend(r.phi.iter().map(|&v| fmt_f64(v)));
        fields.push(fmt_f64(r.lambda));
        fields.push(fmt_f64(r.angle_deg));
        out.row(&fields)?;
    }
    out.finish()
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let (header, rows) = read_table(path)?;
    let dim = header.len().saturating_sub(5);
    if header.len() < 6 || header != trace_header(dim) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    rows.into_iter()
        .map(|(line, r)| {
            let phi = (0..dim)
                .map(|i| parse_field(path, line, &header[3 + i], &r[3 + i]))
                .collect::<Result<_>>()?;
            Ok(TraceRow {
                step: parse_field(path, line, "step", &r[0])?,
                layer: parse_field(path, line, "layer", &r[1])?,
                unit: parse_field(path, line, "unit", &r[2])?,
                phi,
                lambda: parse_field(path, line, "lambda", &r[3 + dim])?,
                angle_deg: parse_field(path, line, "angle_deg", &r[4 + dim])?,
            })
        })
        .collect()
}

/// Writes `stability.csv` and `trace.csv` into `dir`.
pub fn export_trace(dir: &Path, dim: usize, trace: &StabilityTrace, rows: &[TraceRow]) -> Result<()> {
    write_stability_csv(&dir.join("stability.csv"), trace)?;
    write_trace_csv(&dir.join("trace.csv"), dim, rows)
}

/// One perturbed boundary in the 2-D demo.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbRow {
    pub param: &'static str,
    pub epsilon: f64,
    pub phi_before: [f64; 2],
    pub phi_after: [f64; 2],
    pub displacement: f64,
    pub angle_change_deg: f64,
    /// `(180/π)·‖ε_θ‖` for GmP, where only the angle moves the direction.
    pub angle_bound_deg: Option<f64>,
}

pub const PERTURB_EPSILONS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

/// Direction of the demo unit: 225°.
pub const DEMO_THETA: f64 = 1.25 * PI;
pub const DEMO_LAMBDA: f64 = 1.0;
/// Each weight component is `−6e-4`, so `ε = 1e-3·1` equals `−(1 + 2/3)·w`
/// and reverses the SP and WN directions outright.
pub const DEMO_WEIGHT_SCALE: f64 = 6e-4 * std::f64::consts::SQRT_2;

fn boundary(w: [f64; 2], b: f64) -> ([f64; 2], [f64; 2]) {
    let norm = l2_norm(&w);
    let u = [w[0] / norm, w[1] / norm];
    let lambda = b / norm;
    ([-lambda * u[0], -lambda * u[1]], u)
}

/// Adds `ε = ϵ·1` to every parameter of one 2-D unit under SP, WN and
/// GmP and reports how its boundary moves.
pub fn perturbation_demo(epsilons: &[f64]) -> Result<Vec<PerturbRow>> {
    let r = DEMO_WEIGHT_SCALE;
    let u = [DEMO_THETA.cos(), DEMO_THETA.sin()];
    let w = [r * u[0], r * u[1]];
    let b = r * DEMO_LAMBDA;
    let (phi0, u0) = boundary(w, b);

    let mut rows = Vec::new();
    for &eps in epsilons {
        let cases: [(&'static str, [f64; 2], f64, Option<f64>); 3] = [
            ("sp", [w[0] + eps, w[1] + eps], b + eps, None),
            {
                // v starts equal to w and l to ‖w‖, so the effective weight is
                // (l + ε)·(v + ε)/‖v + ε‖.
                let v = [w[0] + eps, w[1] + eps];
                let scale = (r + eps) / l2_norm(&v);
                ("wn", [scale * v[0], scale * v[1]], b + eps, None)
            },
            {
                let theta = DEMO_THETA + eps;
                let radius = DEMO_LAMBDA + eps;
                let s = r + eps;
                let wg = [s * theta.cos(), s * theta.sin()];
                ("gmp", wg, s * radius, Some(degrees(eps)))
            },
        ];
        for (param, wp, bp, bound) in cases {
            let (phi1, u1) = boundary(wp, bp);
            let dphi = [phi1[0] - phi0[0], phi1[1] - phi0[1]];
            rows.push(PerturbRow {
                param,
                epsilon: eps,
                phi_before: phi0,
                phi_after: phi1,
                displacement: l2_norm(&dphi),
                angle_change_deg: degrees(angle_between(&u0, &u1)?),
                angle_bound_deg: bound,
            });
        }
    }
    Ok(rows)
}

pub const PERTURB_HEADER: [&str; 9] = [
    "param",
    "epsilon",
    "phi0_before",
    "phi1_before",
    "phi0_after",
    "phi1_after",
    "displacement",
    "angle_change_deg",
    "angle_bound_deg",
];

pub fn write_perturb_csv(path: &Path, rows: &[PerturbRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_perturb(file, &path.display().to_string(), rows)
}

/// As [`write_perturb_csv`], to any writer; `label` names it in errors.
pub fn write_perturb<W: std::io::Write>(writer: W, label: &str, rows: &[PerturbRow]) -> Result<()> {
    let header: Vec<String> = PERTURB_HEADER.iter().map(|s| s.to_string()).collect();
    let mut out = CsvOut::from_writer(writer, label, &header)?;
    for r in rows {
        out.row(&[
            r.param.to_string(),
            fmt_f64(r.epsilon),
            fmt_f64(r.phi_before[0]),
            fmt_f64(r.phi_before[1]),
            fmt_f64(r.phi_after[0]),
            fmt_f64(r.phi_after[1]),
            fmt_f64(r.displacement),
            fmt_f64(r.angle_change_deg),
            r.angle_bound_deg.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    out.finish()
}
