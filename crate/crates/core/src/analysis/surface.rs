use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;

pub const SURFACE_FILE: &str = "surface.csv";
pub const POINTS_FILE: &str = "points.csv";

/// Evenly spaced coordinates from `min` to `max` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRange {
    pub min: f64,
    pub max: f64,
    pub resolution: usize,
}

impl GridRange {
    pub fn new(min: f64, max: f64, resolution: usize) -> Self {
        Self { min, max, resolution }
    }

    /// Range of half-width `radius` around `center`.
    pub fn centered(center: f64, radius: f64, resolution: usize) -> Self {
        Self::new(center - radius, center + radius, resolution)
    }

    fn validate(&self) -> Result<(), AnalysisError> {
        if self.resolution < 2 {
            return Err(AnalysisError::Grid(format!("resolution must be at least 2, got {}", self.resolution)));
        }
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(AnalysisError::Grid(format!("bad range [{}, {}]", self.min, self.max)));
        }
        Ok(())
    }

    pub fn coords(&self) -> Vec<f64> {
        let step = (self.max - self.min) / (self.resolution - 1) as f64;
        (0..self.resolution)
            .map(|i| if i + 1 == self.resolution { self.max } else { self.min + step * i as f64 })
            .collect()
    }
}

/// A checkpoint projected onto the slice plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub label: String,
    pub x: f64,
    pub y: f64,
    /// Metric at the checkpoint's full parameter vector.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    pub axis_i: usize,
    pub axis_j: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `values[a * ys.len() + b]` is the metric at `(xs[a], ys[b])`.
    pub values: Vec<f64>,
    pub points: Vec<ProjectedPoint>,
}

impl SurfaceGrid {
    pub fn value(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.ys.len() + b]
    }

    /// Indices `(a, b)` of the smallest finite grid value.
    pub fn argmin(&self) -> Option<(usize, usize)> {
        let (idx, _) = self
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .min_by(|x, y| x.1.total_cmp(y.1))?;
        Some((idx / self.ys.len(), idx % self.ys.len()))
    }

    pub fn surface_csv(&self) -> String {
        let mut out = String::from("x,y,value\n");
        for (a, x) in self.xs.iter().enumerate() {
            for (b, y) in self.ys.iter().enumerate() {
                writeln!(out, "{x:?},{y:?},{:?}", self.value(a, b)).expect("string write");
            }
        }
        out
    }

    pub fn points_csv(&self) -> String {
        let mut out = String::from("label,x,y,value\n");
        for p in &self.points {
            writeln!(out, "{},{:?},{:?},{:?}", p.label, p.x, p.y, p.value).expect("string write");
        }
        out
    }

    /// Writes `surface.csv` and `points.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<(), AnalysisError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(SURFACE_FILE), self.surface_csv())?;
        std::fs::write(dir.join(POINTS_FILE), self.points_csv())?;
        Ok(())
    }
}

/// Evaluates `metric` on the plane through `base` spanned by parameters
/// `axis_i` and `axis_j`; every other coordinate stays at its base value.
///
/// Grid cells are evaluated in parallel. `checkpoints` are projected onto
/// the two axes and evaluated at their own full parameter vectors.
pub fn surface_grid<F>(
    metric: F,
    base: &[f64],
    axis_i: usize,
    axis_j: usize,
    x: GridRange,
    y: GridRange,
    checkpoints: &[(String, Vec<f64>)],
) -> Result<SurfaceGrid, AnalysisError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dim = base.len();
    for axis in [axis_i, axis_j] {
        if axis >= dim {
            return Err(AnalysisError::AxisOutOfRange { axis, dim });
        }
    }
    if axis_i == axis_j {
        return Err(AnalysisError::SameAxis(axis_i));
    }
    x.validate()?;
    y.validate()?;
    for (_, c) in checkpoints {
        if c.len() != dim {
            return Err(AnalysisError::Dimension { expected: dim, got: c.len() });
        }
    }
    let xs = x.coords();
    let ys = y.coords();
    let values = (0..xs.len() * ys.len())
        .into_par_iter()
        .map(|idx| {
            let mut theta = base.to_vec();
            theta[axis_i] = xs[idx / ys.len()];
            theta[axis_j] = ys[idx % ys.len()];
            metric(&theta)
        })
        .collect();
    let points = checkpoints
        .iter()
        .map(|(label, c)| ProjectedPoint { label: label.clone(), x: c[axis_i], y: c[axis_j], value: metric(c) })
        .collect();
    Ok(SurfaceGrid { axis_i, axis_j, xs, ys, values, points })
}
