//! Per-location, per-direction lane layout.
//!
//! A [`LaneConfig`] is a JSON document keyed by location id and then by
//! direction name. Each direction lists its lanes ordered from the median
//! outwards together with the lane-center lateral offset in the Frenet frame
//! of that direction's reference path, and the lane type used for ramp
//! exclusion.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type LaneId = u32;

#[derive(Debug, Error)]
pub enum LaneConfigError {
    #[error("io error reading lane config: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed lane config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("location {location}, direction {direction}: {reason}")]
    Invalid {
        location: String,
        direction: String,
        reason: String,
    },
    #[error("unknown location {0}")]
    UnknownLocation(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaneKind {
    Mainline,
    OnRamp,
    OffRamp,
}

impl LaneKind {
    pub fn is_ramp(self) -> bool {
        matches!(self, LaneKind::OnRamp | LaneKind::OffRamp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneSpec {
    pub id: LaneId,
    /// Lane-center lateral offset `l_c` in meters.
    pub center: f64,
    pub kind: LaneKind,
}

/// Optional axis-aligned box `[xmin, ymin, xmax, ymax]` used for boundary extraction.
pub type BoundingBox = [f64; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionLanes {
    /// Lanes ordered inside (median) to outside.
    pub lanes: Vec<LaneSpec>,
    /// Lane ids whose trajectory points train the dividing SVM: this
    /// direction's innermost lane first, then the opposite direction's.
    pub svm_lanes: Vec<LaneId>,
    /// Types of lanelet ids that are not lanes of their own.
    #[serde(default)]
    pub lanelets: BTreeMap<LaneId, LaneKind>,
    #[serde(default)]
    pub bbox: Option<BoundingBox>,
}

/// Left/right/same relation of a lane band relative to another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Same,
    Right,
}

impl DirectionLanes {
    pub fn validate(&self) -> Result<(), String> {
        if self.lanes.is_empty() {
            return Err("no lanes".into());
        }
        if self.svm_lanes.len() != 2 {
            return Err(format!(
                "expected exactly two svm lanes, found {}",
                self.svm_lanes.len()
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for lane in &self.lanes {
            if !lane.center.is_finite() {
                return Err(format!("lane {} has non-finite center", lane.id));
            }
            if !seen.insert(lane.id) {
                return Err(format!("duplicate lane id {}", lane.id));
            }
        }
        if self.lanes.len() >= 2 {
            let increasing = self.lanes[1].center > self.lanes[0].center;
            for w in self.lanes.windows(2) {
                let ok = if increasing {
                    w[1].center > w[0].center
                } else {
                    w[1].center < w[0].center
                };
                if !ok {
                    return Err("lane centers are not strictly monotone".into());
                }
            }
        }
        Ok(())
    }

    pub fn lane_index(&self, id: LaneId) -> Option<usize> {
        self.lanes.iter().position(|l| l.id == id)
    }

    pub fn kind_of(&self, id: LaneId) -> Option<LaneKind> {
        self.lanes
            .iter()
            .find(|l| l.id == id)
            .map(|l| l.kind)
            .or_else(|| self.lanelets.get(&id).copied())
    }

    pub fn contains_id(&self, id: LaneId) -> bool {
        self.kind_of(id).is_some()
    }

    /// Half-width of the band around lane `idx`, from the spacing to its neighbors.
    fn half_widths(&self, idx: usize) -> (f64, f64) {
        let gap = |a: usize, b: usize| (self.lanes[a].center - self.lanes[b].center).abs() / 2.0;
        let inner = (idx > 0).then(|| gap(idx, idx - 1));
        let outer = (idx + 1 < self.lanes.len()).then(|| gap(idx, idx + 1));
        match (inner, outer) {
            (Some(i), Some(o)) => (i, o),
            (Some(i), None) => (i, i),
            (None, Some(o)) => (o, o),
            // single-lane direction: assume a standard 3.75 m lane
            (None, None) => (1.875, 1.875),
        }
    }

    /// Index of the lane band containing lateral position `l`, if any.
    ///
    /// Bands meet halfway between adjacent lane centers; the innermost and
    /// outermost bands extend by half the adjacent spacing.
    pub fn band_index(&self, l: f64) -> Option<usize> {
        if !l.is_finite() {
            return None;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, lane) in self.lanes.iter().enumerate() {
            let d = (l - lane.center).abs();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, d) = best?;
        let (inner, outer) = self.half_widths(i);
        let toward_inner = if i > 0 {
            (self.lanes[i - 1].center - self.lanes[i].center) * (l - self.lanes[i].center) > 0.0
        } else if i + 1 < self.lanes.len() {
            (self.lanes[i + 1].center - self.lanes[i].center) * (l - self.lanes[i].center) < 0.0
        } else {
            true
        };
        let limit = if toward_inner { inner } else { outer };
        (d <= limit).then_some(i)
    }

    /// Band index adjacent to `idx` on `side` (left means larger `l`).
    pub fn adjacent(&self, idx: usize, side: Side) -> Option<usize> {
        let c = self.lanes[idx].center;
        let candidates = [idx.checked_sub(1), Some(idx + 1)];
        candidates
            .into_iter()
            .flatten()
            .filter(|&j| j < self.lanes.len())
            .find(|&j| match side {
                Side::Left => self.lanes[j].center > c,
                Side::Right => self.lanes[j].center < c,
                Side::Same => false,
            })
    }

    /// Relation of band `other` relative to band `reference`, for adjacent or equal bands.
    pub fn relation(&self, reference: usize, other: usize) -> Option<Side> {
        if reference == other {
            return Some(Side::Same);
        }
        if self.adjacent(reference, Side::Left) == Some(other) {
            return Some(Side::Left);
        }
        if self.adjacent(reference, Side::Right) == Some(other) {
            return Some(Side::Right);
        }
        None
    }

    /// Mean spacing between adjacent lane centers.
    pub fn nominal_lane_width(&self) -> f64 {
        if self.lanes.len() < 2 {
            return 3.75;
        }
        let first = self.lanes[0].center;
        let last = self.lanes[self.lanes.len() - 1].center;
        (last - first).abs() / (self.lanes.len() - 1) as f64
    }

    /// Lateral mirror image: every lane center negated.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for lane in &mut out.lanes {
            lane.center = -lane.center;
        }
        out
    }
}

/// Lane layout for every location and direction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LaneConfig {
    pub locations: BTreeMap<String, BTreeMap<String, DirectionLanes>>,
}

impl LaneConfig {
    pub fn from_json_str(s: &str) -> Result<Self, LaneConfigError> {
        let cfg: LaneConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LaneConfigError> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LaneConfigError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), LaneConfigError> {
        for (loc, dirs) in &self.locations {
            for (dir, lanes) in dirs {
                lanes.validate().map_err(|reason| LaneConfigError::Invalid {
                    location: loc.clone(),
                    direction: dir.clone(),
                    reason,
                })?;
            }
        }
        Ok(())
    }

    pub fn location(
        &self,
        location: &str,
    ) -> Result<&BTreeMap<String, DirectionLanes>, LaneConfigError> {
        self.locations
            .get(location)
            .ok_or_else(|| LaneConfigError::UnknownLocation(location.to_string()))
    }

    /// Lane type of `id` in any direction of `location`.
    pub fn kind_of(&self, location: &str, id: LaneId) -> Option<LaneKind> {
        self.locations
            .get(location)?
            .values()
            .find_map(|d| d.kind_of(id))
    }

    /// Name of the direction whose lanes include `id`.
    pub fn direction_of(&self, location: &str, id: LaneId) -> Option<&str> {
        self.locations
            .get(location)?
            .iter()
            .find(|(_, d)| d.lane_index(id).is_some())
            .map(|(name, _)| name.as_str())
    }
}
