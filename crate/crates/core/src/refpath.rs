//! Reference path construction from an SVM decision boundary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::svm::{Point2, SvmModel};

#[derive(Debug, Error)]
pub enum RefPathError {
    #[error("no sign change of the decision function inside the bounding box")]
    EmptyBoundary,
    #[error("need at least 5 points, got {0}")]
    TooFewPoints(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate path: consecutive points coincide at index {0}")]
    Degenerate(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed path csv at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub min: Point2<T>,
    pub max: Point2<T>,
}

impl<T: Scalar> BBox<T> {
    /// Bounding box of `points` grown by `pad` on every side.
    pub fn around(points: &[Point2<T>], pad: T) -> Option<Self> {
        let first = points.first()?;
        let mut min = *first;
        let mut max = *first;
        for p in points {
            for k in 0..2 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        Some(Self {
            min: [min[0] - pad, min[1] - pad],
            max: [max[0] + pad, max[1] + pad],
        })
    }
}

/// Ordered path points with approximate tangent angle, curvature and cumulative arc length.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePath<T> {
    pub points: Vec<Point2<T>>,
    pub tangent: Vec<T>,
    pub curvature: Vec<T>,
    pub cum_arclen: Vec<T>,
    pub direction_tag: String,
}

impl<T: Scalar> ReferencePath<T> {
    /// Decorates an already ordered polyline (no resampling or smoothing).
    pub fn from_points(points: Vec<Point2<T>>, direction_tag: impl Into<String>) -> Result<Self, RefPathError> {
        if points.len() < 5 {
            return Err(RefPathError::TooFewPoints(points.len()));
        }
        let (tangent, curvature) = tangent_and_curvature(&points);
        let mut cum_arclen = Vec::with_capacity(points.len());
        let mut s = T::zero();
        cum_arclen.push(s);
        for (i, w) in points.windows(2).enumerate() {
            let chord = dist(&w[0], &w[1]);
            if chord <= T::zero() {
                return Err(RefPathError::Degenerate(i + 1));
            }
            s += chord;
            cum_arclen.push(s);
        }
        Ok(Self {
            points,
            tangent,
            curvature,
            cum_arclen,
            direction_tag: direction_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_length(&self) -> T {
        *self.cum_arclen.last().unwrap_or(&T::zero())
    }

    /// Same geometry traversed in the opposite direction.
    pub fn reversed(&self, direction_tag: impl Into<String>) -> Result<Self, RefPathError> {
        let mut pts = self.points.clone();
        pts.reverse();
        Self::from_points(pts, direction_tag)
    }

    /// Writes `idx,x,y,theta,kappa,s` with 17 significant digits.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("idx,x,y,theta,kappa,s\n");
        for i in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                i,
                self.points[i][0].as_f64(),
                self.points[i][1].as_f64(),
                self.tangent[i].as_f64(),
                self.curvature[i].as_f64(),
                self.cum_arclen[i].as_f64()
            );
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), RefPathError> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn from_csv_str(s: &str, direction_tag: impl Into<String>) -> Result<Self, RefPathError> {
        let mut lines = s.lines();
        match lines.next() {
            Some(h) if h.trim() == "idx,x,y,theta,kappa,s" => {}
            _ => {
                return Err(RefPathError::Parse {
                    line: 1,
                    reason: "expected header idx,x,y,theta,kappa,s".into(),
                })
            }
        }
        let mut path = ReferencePath {
            points: Vec::new(),
            tangent: Vec::new(),
            curvature: Vec::new(),
            cum_arclen: Vec::new(),
            direction_tag: direction_tag.into(),
        };
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            let bad = |reason: String| RefPathError::Parse { line: i + 2, reason };
            if fields.len() != 6 {
                return Err(bad(format!("expected 6 fields, got {}", fields.len())));
            }
            let mut vals = [0.0f64; 5];
            for (k, f) in fields[1..].iter().enumerate() {
                vals[k] = f.trim().parse().map_err(|_| bad(format!("bad number {f:?}")))?;
            }
            path.points.push([T::lit(vals[0]), T::lit(vals[1])]);
            path.tangent.push(T::lit(vals[2]));
            path.curvature.push(T::lit(vals[3]));
            path.cum_arclen.push(T::lit(vals[4]));
        }
        Ok(path)
    }

    pub fn load_csv(path: impl AsRef<Path>, direction_tag: impl Into<String>) -> Result<Self, RefPathError> {
        Self::from_csv_str(&fs::read_to_string(path)?, direction_tag)
    }
}

#[inline]
fn dist<T: Scalar>(a: &Point2<T>, b: &Point2<T>) -> T {
    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
}

/// Derivative per index: central in the interior, second-order one-sided at
/// the ends (plain differences for two points).
fn index_derivative<T: Scalar>(v: &[T]) -> Vec<T> {
    let n = v.len();
    let half = T::lit(0.5);
    let (three, four) = (T::lit(3.0), T::lit(4.0));
    (0..n)
        .map(|i| {
            if n == 2 {
                v[1] - v[0]
            } else if i == 0 {
                (four * v[1] - three * v[0] - v[2]) * half
            } else if i == n - 1 {
                (three * v[n - 1] - four * v[n - 2] + v[n - 3]) * half
            } else {
                (v[i + 1] - v[i - 1]) * half
            }
        })
        .collect()
}

/// Tangent `atan2(dy, dx)` and curvature `(dx d2y - dy d2x) / (dx^2 + dy^2)^(3/2)`.
///
/// With `dx_i = (x_{i+1} - x_{i-1}) / 2` and `d2x_i = (dx_{i+1} - dx_{i-1}) / 2`
/// this is the central-difference estimate; the factor 1/2 cancels in the
/// curvature ratio.
pub fn tangent_and_curvature<T: Scalar>(points: &[Point2<T>]) -> (Vec<T>, Vec<T>) {
    let xs: Vec<T> = points.iter().map(|p| p[0]).collect();
    let ys: Vec<T> = points.iter().map(|p| p[1]).collect();
    let dx = index_derivative(&xs);
    let dy = index_derivative(&ys);
    let ddx = index_derivative(&dx);
    let ddy = index_derivative(&dy);
    let tangent = dx.iter().zip(&dy).map(|(a, b)| b.atan2(*a)).collect();
    let curvature = (0..points.len())
        .map(|i| {
            let denom = (dx[i] * dx[i] + dy[i] * dy[i]).powf(T::lit(1.5));
            if denom > T::zero() {
                (dx[i] * ddy[i] - dy[i] * ddx[i]) / denom
            } else {
                T::zero()
            }
        })
        .collect();
    (tangent, curvature)
}

/// Linear root of `f` along the segment `a -> b`, if the sign changes.
fn edge_root<T: Scalar>(a: Point2<T>, fa: T, b: Point2<T>, fb: T) -> Option<Point2<T>> {
    if (fa < T::zero()) == (fb < T::zero()) {
        return None;
    }
    let t = fa / (fa - fb);
    Some([a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t])
}

/// Samples the decision function on a grid and returns the zero crossings
/// along grid edges, ordered along the principal axis of the crossing points
/// and oriented so the path runs along `travel_direction`.
pub fn extract_zero_boundary<T: Scalar>(
    model: &SvmModel<T>,
    bbox: &BBox<T>,
    grid_step: T,
    travel_direction: Point2<T>,
) -> Result<Vec<Point2<T>>, RefPathError> {
    if !(grid_step > T::zero()) {
        return Err(RefPathError::InvalidParameter("grid_step must be positive".into()));
    }
    let nx = ((bbox.max[0] - bbox.min[0]) / grid_step).floor().to_usize().unwrap_or(0) + 1;
    let ny = ((bbox.max[1] - bbox.min[1]) / grid_step).floor().to_usize().unwrap_or(0) + 1;
    let node = |i: usize, j: usize| -> Point2<T> {
        [
            bbox.min[0] + grid_step * T::lit(i as f64),
            bbox.min[1] + grid_step * T::lit(j as f64),
        ]
    };
    let mut values = vec![T::zero(); nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            values[j * nx + i] = model.decision_value(&node(i, j));
        }
    }

    let mut pts = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let f0 = values[j * nx + i];
            if i + 1 < nx {
                if let Some(p) = edge_root(node(i, j), f0, node(i + 1, j), values[j * nx + i + 1]) {
                    pts.push(p);
                }
            }
            if j + 1 < ny {
                if let Some(p) = edge_root(node(i, j), f0, node(i, j + 1), values[(j + 1) * nx + i]) {
                    pts.push(p);
                }
            }
        }
    }
    if pts.is_empty() {
        return Err(RefPathError::EmptyBoundary);
    }
    pts.dedup();

    let axis = principal_axis(&pts);
    let mut keyed: Vec<(T, Point2<T>)> = pts
        .into_iter()
        .map(|p| (p[0] * axis[0] + p[1] * axis[1], p))
        .collect();
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut ordered: Vec<Point2<T>> = keyed.into_iter().map(|(_, p)| p).collect();
    if axis[0] * travel_direction[0] + axis[1] * travel_direction[1] < T::zero() {
        ordered.reverse();
    }
    Ok(ordered)
}

/// Unit eigenvector of the largest eigenvalue of the 2x2 point covariance.
fn principal_axis<T: Scalar>(pts: &[Point2<T>]) -> Point2<T> {
    let n = T::lit(pts.len() as f64);
    let mx = pts.iter().map(|p| p[0]).sum::<T>() / n;
    let my = pts.iter().map(|p| p[1]).sum::<T>() / n;
    let (mut sxx, mut sxy, mut syy) = (T::zero(), T::zero(), T::zero());
    for p in pts {
        let dx = p[0] - mx;
        let dy = p[1] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    // angle of the major axis of the covariance ellipse
    let angle = (T::lit(2.0) * sxy).atan2(sxx - syy) / T::lit(2.0);
    [angle.cos(), angle.sin()]
}

/// Resamples a polyline at uniform arc-length `spacing` starting at its first point.
pub fn resample_uniform<T: Scalar>(points: &[Point2<T>], spacing: T) -> Vec<Point2<T>> {
    let mut out = Vec::new();
    if points.is_empty() {
        return out;
    }
    out.push(points[0]);
    let mut walked = T::zero();
    let mut next = spacing;
    let slack = spacing * T::lit(1e-9);
    for w in points.windows(2) {
        let seg = dist(&w[0], &w[1]);
        if seg <= T::zero() {
            continue;
        }
        while next <= walked + seg + slack {
            let t = ((next - walked) / seg).min(T::one());
            out.push([
                w[0][0] + (w[1][0] - w[0][0]) * t,
                w[0][1] + (w[1][1] - w[0][1]) * t,
            ]);
            next += spacing;
        }
        walked += seg;
    }
    out
}

/// Centered moving average; the window shrinks symmetrically near the ends
/// so the end points stay fixed.
pub fn moving_average<T: Scalar>(points: &[Point2<T>], window: usize) -> Vec<Point2<T>> {
    let n = points.len();
    let half = window / 2;
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            let count = T::lit((2 * h + 1) as f64);
            let mut acc = [T::zero(), T::zero()];
            for p in &points[i - h..=i + h] {
                acc[0] += p[0];
                acc[1] += p[1];
            }
            [acc[0] / count, acc[1] / count]
        })
        .collect()
}

/// Resample to uniform spacing, smooth, then decorate with tangent, curvature and arc length.
pub fn build_reference_path<T: Scalar>(
    boundary: &[Point2<T>],
    smoothing_window: usize,
    spacing: T,
    direction_tag: impl Into<String>,
) -> Result<ReferencePath<T>, RefPathError> {
    if boundary.len() < 5 {
        return Err(RefPathError::TooFewPoints(boundary.len()));
    }
    if smoothing_window == 0 || smoothing_window % 2 == 0 {
        return Err(RefPathError::InvalidParameter(format!(
            "smoothing window must be odd, got {smoothing_window}"
        )));
    }
    if !(spacing > T::zero()) {
        return Err(RefPathError::InvalidParameter("spacing must be positive".into()));
    }
    let resampled = resample_uniform(boundary, spacing);
    if resampled.len() < 5 {
        return Err(RefPathError::TooFewPoints(resampled.len()));
    }
    let smoothed = moving_average(&resampled, smoothing_window);
    ReferencePath::from_points(smoothed, direction_tag)
}
