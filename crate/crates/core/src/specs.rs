//! Differentiable safety specifications `b(x) >= 0`.
//!
//! Every barrier is either a conic obstacle (quadratic ellipse or quartic
//! super-ellipse, safe outside) or an axis-aligned half-space on one state
//! coordinate. Half-spaces optionally read the successor state through a
//! unit-step velocity `v = x_{k+1} - x_k`, which makes them adjacent-pair
//! barriers. Boxes are never a single barrier: they decompose into one
//! half-space per face so every CBF row stays linear in the velocity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("state has {got} coordinates but the barrier reads dimension {dim}")]
    DimensionMismatch { dim: usize, got: usize },
    #[error("adjacent-pair barrier evaluated without a successor state")]
    MissingSuccessor,
    #[error("degenerate normalization statistics on dimension {0}")]
    DegenerateStats(usize),
}

/// Which constructor family a barrier came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    Ellipse,
    QuarticSuperEllipse,
    HalfSpace,
    Box,
    SpeedDependentHalfSpace,
    SpeedDependentBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    SingleState,
    AdjacentPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Shape {
    /// `((x - cx)/ax)^p + ((y - cy)/ay)^p - 1` with `p` in {2, 4}.
    Conic {
        center: [f64; 2],
        axes: [f64; 2],
        dims: [usize; 2],
        power: i32,
    },
    /// `sign * (x_k[dim] + phi * (x_{k+1}[dim] - x_k[dim]) - bound)`.
    Axis {
        dim: usize,
        bound: f64,
        sign: f64,
        phi: Option<f64>,
    },
}

/// Gradient of a barrier with respect to the state(s) it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierGradient {
    pub current: Vec<f64>,
    /// Present only for adjacent-pair barriers.
    pub next: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    kind: SpecKind,
    shape: Shape,
}

fn check_positive(name: &str, values: &[f64]) -> Result<(), SpecError> {
    if values.iter().all(|v| v.is_finite() && *v > 0.0) {
        Ok(())
    } else {
        Err(SpecError::InvalidParameter(format!(
            "{name} must be finite and positive, got {values:?}"
        )))
    }
}

fn check_finite(name: &str, values: &[f64]) -> Result<(), SpecError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SpecError::InvalidParameter(format!(
            "{name} must be finite, got {values:?}"
        )))
    }
}

fn conic(
    kind: SpecKind,
    center: [f64; 2],
    axes: [f64; 2],
    dims: [usize; 2],
    power: i32,
) -> Result<BarrierSpec, SpecError> {
    check_finite("center", &center)?;
    check_positive("axes", &axes)?;
    if dims[0] == dims[1] {
        return Err(SpecError::InvalidParameter(
            "conic barrier needs two distinct dimensions".into(),
        ));
    }
    Ok(BarrierSpec {
        kind,
        shape: Shape::Conic {
            center,
            axes,
            dims,
            power,
        },
    })
}

/// Quadratic obstacle `((x-x0)/a)^2 + ((y-y0)/b)^2 - 1` on state dims 0 and 1.
pub fn make_ellipse(center: [f64; 2], axes: [f64; 2]) -> Result<BarrierSpec, SpecError> {
    make_ellipse_on(center, axes, [0, 1])
}

pub fn make_ellipse_on(
    center: [f64; 2],
    axes: [f64; 2],
    dims: [usize; 2],
) -> Result<BarrierSpec, SpecError> {
    conic(SpecKind::Ellipse, center, axes, dims, 2)
}

/// Quartic obstacle `((x-x0)/a)^4 + ((y-y0)/b)^4 - 1` on state dims 0 and 1.
pub fn make_quartic_superellipse(
    center: [f64; 2],
    axes: [f64; 2],
) -> Result<BarrierSpec, SpecError> {
    make_quartic_superellipse_on(center, axes, [0, 1])
}

pub fn make_quartic_superellipse_on(
    center: [f64; 2],
    axes: [f64; 2],
    dims: [usize; 2],
) -> Result<BarrierSpec, SpecError> {
    conic(SpecKind::QuarticSuperEllipse, center, axes, dims, 4)
}

/// Ceiling `x[dim] <= height`, i.e. `b = height - x[dim]`.
pub fn make_roof(height: f64, dim: usize) -> Result<BarrierSpec, SpecError> {
    check_finite("roof height", &[height])?;
    Ok(BarrierSpec {
        kind: SpecKind::HalfSpace,
        shape: Shape::Axis {
            dim,
            bound: height,
            sign: -1.0,
            phi: None,
        },
    })
}

/// Floor `x[dim] >= level`, i.e. `b = x[dim] - level`.
pub fn make_floor(level: f64, dim: usize) -> Result<BarrierSpec, SpecError> {
    check_finite("floor level", &[level])?;
    Ok(BarrierSpec {
        kind: SpecKind::HalfSpace,
        shape: Shape::Axis {
            dim,
            bound: level,
            sign: 1.0,
            phi: None,
        },
    })
}

/// `z_k + phi * (z_{k+1} - z_k) <= height`.
pub fn make_speed_dependent_roof(
    height: f64,
    phi: f64,
    dim: usize,
) -> Result<BarrierSpec, SpecError> {
    check_finite("roof height", &[height])?;
    check_positive("phi", &[phi])?;
    Ok(BarrierSpec {
        kind: SpecKind::SpeedDependentHalfSpace,
        shape: Shape::Axis {
            dim,
            bound: height,
            sign: -1.0,
            phi: Some(phi),
        },
    })
}

fn check_box(x_min: &[f64], x_max: &[f64]) -> Result<(), SpecError> {
    if x_min.len() != x_max.len() || x_min.is_empty() {
        return Err(SpecError::InvalidParameter(
            "box limits must be non-empty and of equal length".into(),
        ));
    }
    check_finite("x_min", x_min)?;
    check_finite("x_max", x_max)?;
    if let Some(i) = (0..x_min.len()).find(|&i| x_max[i] <= x_min[i]) {
        return Err(SpecError::InvalidParameter(format!(
            "x_max must exceed x_min on dimension {i}"
        )));
    }
    Ok(())
}

fn box_rows(
    kind: SpecKind,
    x_min: &[f64],
    x_max: &[f64],
    phi: Option<f64>,
) -> Vec<BarrierSpec> {
    let mut rows = Vec::with_capacity(2 * x_min.len());
    for dim in 0..x_min.len() {
        rows.push(BarrierSpec {
            kind,
            shape: Shape::Axis {
                dim,
                bound: x_max[dim],
                sign: -1.0,
                phi,
            },
        });
        rows.push(BarrierSpec {
            kind,
            shape: Shape::Axis {
                dim,
                bound: x_min[dim],
                sign: 1.0,
                phi,
            },
        });
    }
    rows
}

/// `x_min <= x <= x_max` as `2d` half-space rows (upper, lower per dim).
pub fn make_joint_box(x_min: &[f64], x_max: &[f64]) -> Result<Vec<BarrierSpec>, SpecError> {
    check_box(x_min, x_max)?;
    Ok(box_rows(SpecKind::Box, x_min, x_max, None))
}

/// `x_min <= x + phi * v <= x_max` as `2d` adjacent-pair rows.
pub fn make_speed_dependent_box(
    x_min: &[f64],
    x_max: &[f64],
    phi: f64,
) -> Result<Vec<BarrierSpec>, SpecError> {
    check_box(x_min, x_max)?;
    check_positive("phi", &[phi])?;
    Ok(box_rows(
        SpecKind::SpeedDependentBox,
        x_min,
        x_max,
        Some(phi),
    ))
}

impl BarrierSpec {
    pub fn kind(&self) -> SpecKind {
        self.kind
    }

    pub fn arity(&self) -> Arity {
        match self.shape {
            Shape::Axis { phi: Some(_), .. } => Arity::AdjacentPair,
            _ => Arity::SingleState,
        }
    }

    /// Affine barriers have exact linearisations.
    pub fn is_affine(&self) -> bool {
        matches!(self.shape, Shape::Axis { .. })
    }

    pub fn is_pair(&self) -> bool {
        self.arity() == Arity::AdjacentPair
    }

    /// State coordinates the barrier reads.
    pub fn dims(&self) -> Vec<usize> {
        match &self.shape {
            Shape::Conic { dims, .. } => dims.to_vec(),
            Shape::Axis { dim, .. } => vec![*dim],
        }
    }

    /// Smallest state dimension this barrier can be evaluated on.
    pub fn min_state_dim(&self) -> usize {
        self.dims().into_iter().max().map_or(0, |d| d + 1)
    }

    /// Speed-independent counterpart used where no successor state exists
    /// (the last planning step). `None` for single-state barriers.
    pub fn terminal_fallback(&self) -> Option<BarrierSpec> {
        match &self.shape {
            Shape::Axis {
                dim,
                bound,
                sign,
                phi: Some(_),
            } => Some(BarrierSpec {
                kind: match self.kind {
                    SpecKind::SpeedDependentBox => SpecKind::Box,
                    _ => SpecKind::HalfSpace,
                },
                shape: Shape::Axis {
                    dim: *dim,
                    bound: *bound,
                    sign: *sign,
                    phi: None,
                },
            }),
            _ => None,
        }
    }

    fn check_state(&self, x: &[f64]) -> Result<(), SpecError> {
        let need = self.min_state_dim();
        if x.len() < need {
            return Err(SpecError::DimensionMismatch {
                dim: need - 1,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn successor<'a>(&self, next: Option<&'a [f64]>) -> Result<Option<&'a [f64]>, SpecError> {
        match (self.arity(), next) {
            (Arity::SingleState, _) => Ok(None),
            (Arity::AdjacentPair, None) => Err(SpecError::MissingSuccessor),
            (Arity::AdjacentPair, Some(n)) => {
                self.check_state(n)?;
                Ok(Some(n))
            }
        }
    }

    /// `b(x_k)` or, for adjacent-pair barriers, `b(x_k, x_{k+1})`.
    pub fn eval(&self, x: &[f64], next: Option<&[f64]>) -> Result<f64, SpecError> {
        self.check_state(x)?;
        let next = self.successor(next)?;
        Ok(match &self.shape {
            Shape::Conic {
                center,
                axes,
                dims,
                power,
            } => {
                let qx = (x[dims[0]] - center[0]) / axes[0];
                let qy = (x[dims[1]] - center[1]) / axes[1];
                qx.powi(*power) + qy.powi(*power) - 1.0
            }
            Shape::Axis {
                dim,
                bound,
                sign,
                phi,
            } => {
                let reach = match (phi, next) {
                    (Some(phi), Some(n)) => x[*dim] + phi * (n[*dim] - x[*dim]),
                    _ => x[*dim],
                };
                sign * (reach - bound)
            }
        })
    }

    /// Analytic gradient, dense over the state dimension of `x`.
    pub fn gradient(&self, x: &[f64], next: Option<&[f64]>) -> Result<BarrierGradient, SpecError> {
        self.check_state(x)?;
        let next = self.successor(next)?;
        let mut current = vec![0.0; x.len()];
        let mut next_grad = next.map(|n| vec![0.0; n.len()]);
        match &self.shape {
            Shape::Conic {
                center,
                axes,
                dims,
                power,
            } => {
                let p = f64::from(*power);
                for axis in 0..2 {
                    let q = (x[dims[axis]] - center[axis]) / axes[axis];
                    current[dims[axis]] = p * q.powi(power - 1) / axes[axis];
                }
            }
            Shape::Axis { dim, sign, phi, .. } => match (phi, next_grad.as_mut()) {
                (Some(phi), Some(g)) => {
                    current[*dim] = sign * (1.0 - phi);
                    g[*dim] = sign * phi;
                }
                _ => current[*dim] = *sign,
            },
        }
        Ok(BarrierGradient {
            current,
            next: next_grad,
        })
    }

    /// Rewrites the parameters under the per-dimension map
    /// `x -> 2 (x - min) / (max - min) - 1`.
    pub fn normalize(&self, stats: &NormalizationStats) -> Result<BarrierSpec, SpecError> {
        stats.validate()?;
        for dim in self.dims() {
            if dim >= stats.dim() {
                return Err(SpecError::DimensionMismatch {
                    dim,
                    got: stats.dim(),
                });
            }
        }
        let shape = match &self.shape {
            Shape::Conic {
                center,
                axes,
                dims,
                power,
            } => Shape::Conic {
                center: [
                    stats.normalize_coord(dims[0], center[0]),
                    stats.normalize_coord(dims[1], center[1]),
                ],
                axes: [
                    axes[0] * stats.scale(dims[0]),
                    axes[1] * stats.scale(dims[1]),
                ],
                dims: *dims,
                power: *power,
            },
            // z and v_z share the same scale, so phi is unchanged.
            Shape::Axis {
                dim,
                bound,
                sign,
                phi,
            } => Shape::Axis {
                dim: *dim,
                bound: stats.normalize_coord(*dim, *bound),
                sign: *sign,
                phi: *phi,
            },
        };
        Ok(BarrierSpec {
            kind: self.kind,
            shape,
        })
    }

    /// Closed-form projection onto `{b >= 0}` used by the truncation
    /// baseline. Returns `false` for barriers that have no such projection
    /// (adjacent-pair specs); `x` is left untouched in that case.
    pub fn project_state(&self, x: &mut [f64]) -> Result<bool, SpecError> {
        self.check_state(x)?;
        match &self.shape {
            Shape::Conic {
                center,
                axes,
                dims,
                power,
            } => {
                let mut q = [
                    (x[dims[0]] - center[0]) / axes[0],
                    (x[dims[1]] - center[1]) / axes[1],
                ];
                let p = f64::from(*power);
                let norm = (q[0].abs().powi(*power) + q[1].abs().powi(*power)).powf(1.0 / p);
                if norm >= 1.0 {
                    return Ok(true);
                }
                if norm == 0.0 {
                    // Degenerate center: push along +x.
                    q = [1.0, 0.0];
                } else {
                    q = [q[0] / norm, q[1] / norm];
                }
                x[dims[0]] = center[0] + axes[0] * q[0];
                x[dims[1]] = center[1] + axes[1] * q[1];
                Ok(true)
            }
            Shape::Axis { phi: Some(_), .. } => Ok(false),
            Shape::Axis {
                dim, bound, sign, ..
            } => {
                if sign * (x[*dim] - bound) < 0.0 {
                    x[*dim] = *bound;
                }
                Ok(true)
            }
        }
    }

    /// Value of `b` on a plane `(u, v)` for the coordinates the barrier reads,
    /// holding every other coordinate at zero. Used for contour plots of
    /// single-state barriers.
    pub fn eval_plane(&self, u: f64, v: f64, plane: [usize; 2], state_dim: usize) -> f64 {
        let mut x = vec![0.0; state_dim.max(self.min_state_dim())];
        x[plane[0]] = u;
        x[plane[1]] = v;
        let next = if self.is_pair() { Some(x.clone()) } else { None };
        self.eval(&x, next.as_deref()).unwrap_or(f64::NAN)
    }
}

/// Per-dimension min/max of the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationStats {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self, SpecError> {
        let stats = Self { min, max };
        stats.validate()?;
        Ok(stats)
    }

    /// Identity map: `min = -1`, `max = 1` on every dimension.
    pub fn identity(dim: usize) -> Self {
        Self {
            min: vec![-1.0; dim],
            max: vec![1.0; dim],
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.min.len() != self.max.len() || self.min.is_empty() {
            return Err(SpecError::InvalidParameter(
                "normalization stats must be non-empty and of equal length".into(),
            ));
        }
        for i in 0..self.min.len() {
            if !(self.max[i] > self.min[i]) || !self.min[i].is_finite() || !self.max[i].is_finite()
            {
                return Err(SpecError::DegenerateStats(i));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn scale(&self, dim: usize) -> f64 {
        2.0 / (self.max[dim] - self.min[dim])
    }

    pub fn normalize_coord(&self, dim: usize, value: f64) -> f64 {
        self.scale(dim) * (value - self.min[dim]) - 1.0
    }

    pub fn denormalize_coord(&self, dim: usize, value: f64) -> f64 {
        (value + 1.0) / self.scale(dim) + self.min[dim]
    }

    pub fn normalize_state(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| self.normalize_coord(i, *v))
            .collect()
    }

    pub fn denormalize_state(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| self.denormalize_coord(i, *v))
            .collect()
    }
}

/// Whether a spec counts toward the simple or the complex satisfaction
/// column of a benchmark report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecClass {
    #[default]
    Simple,
    Complex,
}

/// One entry of a spec-set configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpecEntry {
    Ellipse {
        center: [f64; 2],
        axes: [f64; 2],
        #[serde(default = "default_plane")]
        dims: [usize; 2],
        #[serde(default)]
        class: SpecClass,
    },
    QuarticSuperEllipse {
        center: [f64; 2],
        axes: [f64; 2],
        #[serde(default = "default_plane")]
        dims: [usize; 2],
        #[serde(default)]
        class: SpecClass,
    },
    Roof {
        height: f64,
        dim: usize,
        #[serde(default)]
        class: SpecClass,
    },
    Floor {
        level: f64,
        dim: usize,
        #[serde(default)]
        class: SpecClass,
    },
    SpeedDependentRoof {
        height: f64,
        phi: f64,
        dim: usize,
        #[serde(default)]
        class: SpecClass,
    },
    Box {
        x_min: Vec<f64>,
        x_max: Vec<f64>,
        #[serde(default)]
        class: SpecClass,
    },
    SpeedDependentBox {
        x_min: Vec<f64>,
        x_max: Vec<f64>,
        phi: f64,
        #[serde(default)]
        class: SpecClass,
    },
}

fn default_plane() -> [usize; 2] {
    [0, 1]
}

/// A barrier together with its reporting class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedSpec {
    pub spec: BarrierSpec,
    pub class: SpecClass,
}

impl SpecEntry {
    pub fn class(&self) -> SpecClass {
        match self {
            SpecEntry::Ellipse { class, .. }
            | SpecEntry::QuarticSuperEllipse { class, .. }
            | SpecEntry::Roof { class, .. }
            | SpecEntry::Floor { class, .. }
            | SpecEntry::SpeedDependentRoof { class, .. }
            | SpecEntry::Box { class, .. }
            | SpecEntry::SpeedDependentBox { class, .. } => *class,
        }
    }

    pub fn build(&self) -> Result<Vec<BarrierSpec>, SpecError> {
        match self {
            SpecEntry::Ellipse {
                center, axes, dims, ..
            } => Ok(vec![make_ellipse_on(*center, *axes, *dims)?]),
            SpecEntry::QuarticSuperEllipse {
                center, axes, dims, ..
            } => Ok(vec![make_quartic_superellipse_on(*center, *axes, *dims)?]),
            SpecEntry::Roof { height, dim, .. } => Ok(vec![make_roof(*height, *dim)?]),
            SpecEntry::Floor { level, dim, .. } => Ok(vec![make_floor(*level, *dim)?]),
            SpecEntry::SpeedDependentRoof {
                height, phi, dim, ..
            } => Ok(vec![make_speed_dependent_roof(*height, *phi, *dim)?]),
            SpecEntry::Box { x_min, x_max, .. } => make_joint_box(x_min, x_max),
            SpecEntry::SpeedDependentBox {
                x_min, x_max, phi, ..
            } => make_speed_dependent_box(x_min, x_max, *phi),
        }
    }
}

/// Builds every barrier of a spec set, keeping the per-entry class.
pub fn build_spec_set(entries: &[SpecEntry]) -> Result<Vec<ClassifiedSpec>, SpecError> {
    let mut out = Vec::new();
    for entry in entries {
        let class = entry.class();
        out.extend(
            entry
                .build()?
                .into_iter()
                .map(|spec| ClassifiedSpec { spec, class }),
        );
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct SpecDocument {
    #[serde(default)]
    specs: Vec<SpecEntry>,
}

/// Parses a TOML document with a `[[specs]]` array.
pub fn parse_spec_document(text: &str) -> Result<Vec<SpecEntry>, SpecError> {
    let doc: SpecDocument =
        toml::from_str(text).map_err(|e| SpecError::InvalidParameter(e.to_string()))?;
    Ok(doc.specs)
}
