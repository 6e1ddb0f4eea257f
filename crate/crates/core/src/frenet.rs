//! Cartesian to Frenet conversion against a discrete reference path.
//!
//! The matched reference point is the nearest path point (no continuous
//! projection). `s` is the cumulative chord length up to that point and `l`
//! its signed distance, positive to the left of the path direction.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Frame, Track, TrackId};
use crate::refpath::ReferencePath;
use crate::scalar::Scalar;
use crate::svm::Point2;

#[derive(Debug, Error, PartialEq)]
pub enum FrenetError {
    #[error("singular projection: |1 - k l| = {0} below threshold")]
    SingularProjection(f64),
}

/// Formula used for the lateral velocity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LdotFormula {
    /// `v sin(theta - theta_r)`, the kinematically consistent form.
    #[default]
    Sin,
    /// `v cos(theta - theta_r)`, reproduced as printed in the source method.
    PaperCos,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrenetConfig {
    pub curvature_threshold: f64,
    pub ldot_formula: LdotFormula,
    pub singular_eps: f64,
}

impl Default for FrenetConfig {
    fn default() -> Self {
        Self {
            curvature_threshold: 0.001,
            ldot_formula: LdotFormula::Sin,
            singular_eps: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrenetState<T> {
    pub s: T,
    pub l: T,
    pub s_dot: T,
    pub l_dot: T,
    /// Index of the matched reference point (0-based).
    pub ref_index: usize,
    /// Excluded by the curvature gate or a singular projection.
    pub gated: bool,
}

impl<T: Scalar> FrenetState<T> {
    /// Lateral mirror: `l -> -l`, `l_dot -> -l_dot`.
    pub fn mirrored(&self) -> Self {
        Self {
            l: -self.l,
            l_dot: -self.l_dot,
            ..*self
        }
    }
}

/// Index of the nearest path point by linear scan; ties go to the smaller index.
pub fn nearest_reference_index<T: Scalar>(path: &ReferencePath<T>, point: Point2<T>) -> usize {
    let mut best = 0;
    let mut best_d = T::infinity();
    for (i, p) in path.points.iter().enumerate() {
        let d = sq_dist(p, &point);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

#[inline]
fn sq_dist<T: Scalar>(a: &Point2<T>, b: &Point2<T>) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Uniform-grid bucket index over the path points, returning exactly the
/// linear-scan answer (same distance arithmetic, same tie rule).
#[derive(Clone, Debug)]
pub struct GridIndex<T> {
    origin: Point2<T>,
    cell: T,
    nx: i64,
    ny: i64,
    buckets: Vec<Vec<usize>>,
}

impl<T: Scalar> GridIndex<T> {
    pub fn new(path: &ReferencePath<T>, cell: T) -> Self {
        let mut min = [T::infinity(); 2];
        let mut max = [T::neg_infinity(); 2];
        for p in &path.points {
            for k in 0..2 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        let nx = ((max[0] - min[0]) / cell).floor().to_i64().unwrap_or(0) + 1;
        let ny = ((max[1] - min[1]) / cell).floor().to_i64().unwrap_or(0) + 1;
        let mut buckets = vec![Vec::new(); (nx * ny) as usize];
        let index = Self { origin: min, cell, nx, ny, buckets: Vec::new() };
        for (i, p) in path.points.iter().enumerate() {
            let (cx, cy) = index.cell_of(p);
            let cx = cx.clamp(0, nx - 1);
            let cy = cy.clamp(0, ny - 1);
            buckets[(cy * nx + cx) as usize].push(i);
        }
        Self { buckets, ..index }
    }

    fn cell_of(&self, p: &Point2<T>) -> (i64, i64) {
        let cx = ((p[0] - self.origin[0]) / self.cell).floor().to_i64().unwrap_or(i64::MAX / 4);
        let cy = ((p[1] - self.origin[1]) / self.cell).floor().to_i64().unwrap_or(i64::MAX / 4);
        (cx, cy)
    }

    pub fn nearest(&self, path: &ReferencePath<T>, point: Point2<T>) -> usize {
        let (qx, qy) = self.cell_of(&point);
        let mut best: Option<(T, usize)> = None;
        // Rings needed to cover the whole grid from the query cell.
        let max_ring = [qx, self.nx - 1 - qx, qy, self.ny - 1 - qy]
            .iter()
            .map(|v| v.abs())
            .max()
            .unwrap_or(0)
            + self.nx.max(self.ny);
        let mut r = 0i64;
        loop {
            for cy in (qy - r)..=(qy + r) {
                if cy < 0 || cy >= self.ny {
                    continue;
                }
                let on_edge_row = cy == qy - r || cy == qy + r;
                let step = if on_edge_row { 1 } else { (2 * r).max(1) };
                let mut cx = qx - r;
                while cx <= qx + r {
                    if cx >= 0 && cx < self.nx {
                        for &i in &self.buckets[(cy * self.nx + cx) as usize] {
                            let d = sq_dist(&path.points[i], &point);
                            let better = match best {
                                None => true,
                                Some((bd, bi)) => d < bd || (d == bd && i < bi),
                            };
                            if better {
                                best = Some((d, i));
                            }
                        }
                    }
                    cx += step;
                }
            }
            // Points outside rings 0..=r are at least r * cell away.
            if let Some((bd, _)) = best {
                let bound = self.cell * T::lit(r as f64);
                if bd < bound * bound {
                    break;
                }
            }
            if r > max_ring {
                break;
            }
            r += 1;
        }
        best.map(|(_, i)| i).unwrap_or(0)
    }
}

/// Converts one Cartesian state given the matched reference index `r`.
pub fn to_frenet_at<T: Scalar>(
    path: &ReferencePath<T>,
    r: usize,
    pos: Point2<T>,
    vel: Point2<T>,
    theta_traj: T,
    config: &FrenetConfig,
) -> Result<FrenetState<T>, FrenetError> {
    let [xr, yr] = path.points[r];
    let theta_r = path.tangent[r];
    let k_r = path.curvature[r];
    let dx = pos[0] - xr;
    let dy = pos[1] - yr;
    let abs_l = (dx * dx + dy * dy).sqrt();
    let side = dy * theta_r.cos() - dx * theta_r.sin();
    // sign(0) = 0, so a point on the path has l = 0
    let l = if side > T::zero() {
        abs_l
    } else if side < T::zero() {
        -abs_l
    } else {
        T::zero()
    };
    let v = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
    let dtheta = theta_traj - theta_r;
    let denom = T::one() - k_r * l;
    let l_dot = match config.ldot_formula {
        LdotFormula::Sin => v * dtheta.sin(),
        LdotFormula::PaperCos => v * dtheta.cos(),
    };
    let gated = k_r.abs() > T::lit(config.curvature_threshold);
    if denom.abs() < T::lit(config.singular_eps) {
        return Err(FrenetError::SingularProjection(denom.abs().as_f64()));
    }
    Ok(FrenetState {
        s: path.cum_arclen[r],
        l,
        s_dot: v / denom * dtheta.cos(),
        l_dot,
        ref_index: r,
        gated,
    })
}

/// Converts one Cartesian state, matching the nearest reference point.
pub fn to_frenet<T: Scalar>(
    path: &ReferencePath<T>,
    pos: Point2<T>,
    vel: Point2<T>,
    theta_traj: T,
    config: &FrenetConfig,
) -> Result<FrenetState<T>, FrenetError> {
    let r = nearest_reference_index(path, pos);
    to_frenet_at(path, r, pos, vel, theta_traj, config)
}

/// A reference path bundled with its nearest-point index and conversion settings.
#[derive(Clone, Debug)]
pub struct FrenetConverter<T> {
    pub path: ReferencePath<T>,
    pub config: FrenetConfig,
    index: Option<GridIndex<T>>,
}

impl<T: Scalar> FrenetConverter<T> {
    pub fn new(path: ReferencePath<T>, config: FrenetConfig) -> Self {
        Self { path, config, index: None }
    }

    /// Enables the grid-bucket nearest-point index.
    pub fn with_grid_index(mut self, cell: T) -> Self {
        self.index = Some(GridIndex::new(&self.path, cell));
        self
    }

    pub fn nearest(&self, point: Point2<T>) -> usize {
        match &self.index {
            Some(grid) => grid.nearest(&self.path, point),
            None => nearest_reference_index(&self.path, point),
        }
    }

    pub fn convert(&self, pos: Point2<T>, vel: Point2<T>, theta_traj: T) -> Result<FrenetState<T>, FrenetError> {
        to_frenet_at(&self.path, self.nearest(pos), pos, vel, theta_traj, &self.config)
    }

    /// Converts every frame of `track`. The trajectory heading comes from
    /// central differences of position (one-sided at the ends). A singular
    /// projection marks that frame gated.
    pub fn track_to_frenet(&self, track: &Track) -> Vec<FrenetState<T>> {
        let pts: Vec<Point2<T>> = track
            .frames
            .iter()
            .map(|p| [T::lit(p.x), T::lit(p.y)])
            .collect();
        let headings = trajectory_headings(&pts);
        track
            .frames
            .iter()
            .zip(pts.iter().zip(&headings))
            .map(|(p, (pos, theta))| {
                let vel = [T::lit(p.vx), T::lit(p.vy)];
                let r = self.nearest(*pos);
                match to_frenet_at(&self.path, r, *pos, vel, *theta, &self.config) {
                    Ok(state) => state,
                    Err(FrenetError::SingularProjection(_)) => {
                        let mut relaxed = self.config;
                        relaxed.singular_eps = 0.0;
                        let mut state = to_frenet_at(&self.path, r, *pos, vel, *theta, &relaxed)
                            .unwrap_or_default();
                        if !state.s_dot.is_finite() {
                            state.s_dot = T::zero();
                        }
                        state.ref_index = r;
                        state.gated = true;
                        state
                    }
                }
            })
            .collect()
    }
}

/// Heading `atan2(dy, dx)` of a sampled trajectory.
pub fn trajectory_headings<T: Scalar>(pts: &[Point2<T>]) -> Vec<T> {
    let n = pts.len();
    if n < 2 {
        return vec![T::zero(); n];
    }
    (0..n)
        .map(|i| {
            let (a, b) = if i == 0 {
                (0, 1)
            } else if i == n - 1 {
                (n - 2, n - 1)
            } else {
                (i - 1, i + 1)
            };
            (pts[b][1] - pts[a][1]).atan2(pts[b][0] - pts[a][0])
        })
        .collect()
}

/// Serializes converted tracks as `trackId,frame,s,l,sdot,ldot,refIdx,gated`.
pub fn frenet_csv<T: Scalar>(rows: &[(TrackId, Frame, FrenetState<T>)]) -> String {
    let mut out = String::from("trackId,frame,s,l,sdot,ldot,refIdx,gated\n");
    for (id, frame, st) in rows {
        let _ = writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
            id,
            frame,
            st.s.as_f64(),
            st.l.as_f64(),
            st.s_dot.as_f64(),
            st.l_dot.as_f64(),
            st.ref_index,
            u8::from(st.gated)
        );
    }
    out
}

/// Parses the output of [`frenet_csv`].
pub fn parse_frenet_csv<T: Scalar>(s: &str) -> Result<Vec<(TrackId, Frame, FrenetState<T>)>, String> {
    let mut lines = s.lines();
    if lines.next().map(str::trim) != Some("trackId,frame,s,l,sdot,ldot,refIdx,gated") {
        return Err("bad header".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(format!("line {}: expected 8 fields", i + 2));
            }
            let num = |k: usize| -> Result<T, String> {
                f[k].parse::<f64>()
                    .map(T::lit)
                    .map_err(|_| format!("line {}: bad number {:?}", i + 2, f[k]))
            };
            let int = |k: usize| -> Result<u64, String> {
                f[k].parse::<u64>().map_err(|_| format!("line {}: bad integer {:?}", i + 2, f[k]))
            };
            Ok((
                int(0)? as TrackId,
                int(1)? as Frame,
                FrenetState {
                    s: num(2)?,
                    l: num(3)?,
                    s_dot: num(4)?,
                    l_dot: num(5)?,
                    ref_index: int(6)? as usize,
                    gated: int(7)? != 0,
                },
            ))
        })
        .collect()
}
