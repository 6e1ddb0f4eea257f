//! Eight-slot neighborhood of a target vehicle at one frame.

use serde::{Deserialize, Serialize};

use crate::frenet::FrenetState;
use crate::ingest::{Frame, TrackId};
use crate::lanes::{DirectionLanes, Side};
use crate::scalar::Scalar;

/// Neighbor slots in feature-vector order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    P,
    F,
    Lp,
    La,
    Lf,
    Rp,
    Ra,
    Rf,
}

impl Slot {
    pub const ALL: [Slot; 8] = [
        Slot::P,
        Slot::F,
        Slot::Lp,
        Slot::La,
        Slot::Lf,
        Slot::Rp,
        Slot::Ra,
        Slot::Rf,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::P => "p",
            Slot::F => "f",
            Slot::Lp => "lp",
            Slot::La => "la",
            Slot::Lf => "lf",
            Slot::Rp => "rp",
            Slot::Ra => "ra",
            Slot::Rf => "rf",
        }
    }

    pub fn side(self) -> Side {
        match self {
            Slot::P | Slot::F => Side::Same,
            Slot::Lp | Slot::La | Slot::Lf => Side::Left,
            Slot::Rp | Slot::Ra | Slot::Rf => Side::Right,
        }
    }

    pub fn longitudinal(self) -> Longitudinal {
        match self {
            Slot::P | Slot::Lp | Slot::Rp => Longitudinal::Preceding,
            Slot::La | Slot::Ra => Longitudinal::Alongside,
            Slot::F | Slot::Lf | Slot::Rf => Longitudinal::Following,
        }
    }

    fn from_parts(side: Side, lon: Longitudinal) -> Option<Slot> {
        use Longitudinal::*;
        Some(match (side, lon) {
            (Side::Same, Preceding) => Slot::P,
            (Side::Same, Following) => Slot::F,
            (Side::Same, Alongside) => return None,
            (Side::Left, Preceding) => Slot::Lp,
            (Side::Left, Alongside) => Slot::La,
            (Side::Left, Following) => Slot::Lf,
            (Side::Right, Preceding) => Slot::Rp,
            (Side::Right, Alongside) => Slot::Ra,
            (Side::Right, Following) => Slot::Rf,
        })
    }

    /// Left/right counterpart (`p` and `f` map to themselves).
    pub fn mirrored(self) -> Slot {
        match self {
            Slot::Lp => Slot::Rp,
            Slot::La => Slot::Ra,
            Slot::Lf => Slot::Rf,
            Slot::Rp => Slot::Lp,
            Slot::Ra => Slot::La,
            Slot::Rf => Slot::Lf,
            other => other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Longitudinal {
    Preceding,
    Alongside,
    Following,
}

/// Maximum lateral distance at which a ramp vehicle still counts as a neighbor.
pub const RAMP_LATERAL_LIMIT: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneVehicle<T> {
    pub track_id: TrackId,
    pub state: FrenetState<T>,
    pub length: T,
    /// Occupies an on- or off-ramp at this frame.
    pub on_ramp: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor<T> {
    pub track_id: TrackId,
    pub state: FrenetState<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExclusionReason {
    /// Two or more vehicles alongside on the same side.
    DoubleAlongside,
    /// Target outside every lane band of its direction.
    OutsideLanes,
    /// Target absent at this frame.
    MissingTarget,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneFrame<T> {
    pub frame: Frame,
    pub target: SceneVehicle<T>,
    pub neighbors: [Option<Neighbor<T>>; 8],
    /// Candidates alongside on the left and right sides.
    pub alongside_counts: [usize; 2],
    /// Lane-center offsets of the left, same and right lanes relative to the
    /// target's lane center; a missing lane uses the nominal lane width.
    pub slot_lane_offsets: [T; 3],
    pub exclusion: Option<ExclusionReason>,
}

impl<T: Scalar> SceneFrame<T> {
    pub fn neighbor(&self, slot: Slot) -> Option<&Neighbor<T>> {
        self.neighbors[slot.index()].as_ref()
    }

    pub fn is_valid(&self) -> bool {
        self.exclusion.is_none()
    }

    pub fn lane_offset(&self, side: Side) -> T {
        match side {
            Side::Left => self.slot_lane_offsets[0],
            Side::Same => self.slot_lane_offsets[1],
            Side::Right => self.slot_lane_offsets[2],
        }
    }

    /// Lateral mirror image: states mirrored, left and right slots swapped.
    pub fn mirrored(&self) -> Self {
        let mut neighbors = [None; 8];
        for slot in Slot::ALL {
            neighbors[slot.mirrored().index()] = self.neighbors[slot.index()].map(|n| Neighbor {
                track_id: n.track_id,
                state: n.state.mirrored(),
            });
        }
        Self {
            frame: self.frame,
            target: SceneVehicle {
                state: self.target.state.mirrored(),
                ..self.target.clone()
            },
            neighbors,
            alongside_counts: [self.alongside_counts[1], self.alongside_counts[0]],
            slot_lane_offsets: [
                -self.slot_lane_offsets[2],
                -self.slot_lane_offsets[1],
                -self.slot_lane_offsets[0],
            ],
            exclusion: self.exclusion,
        }
    }
}

/// Longitudinal class of `other` relative to `target` by extent overlap.
pub fn longitudinal_class<T: Scalar>(target: &SceneVehicle<T>, other: &SceneVehicle<T>) -> Longitudinal {
    let half = T::lit(0.5);
    let (t0, t1) = (
        target.state.s - target.length * half,
        target.state.s + target.length * half,
    );
    let (o0, o1) = (
        other.state.s - other.length * half,
        other.state.s + other.length * half,
    );
    if o0 <= t1 && t0 <= o1 {
        Longitudinal::Alongside
    } else if other.state.s > target.state.s {
        Longitudinal::Preceding
    } else {
        Longitudinal::Following
    }
}

/// Fills the eight neighbor slots of `target_id` from all vehicles present at `frame`.
///
/// Lane membership comes from the lane-center bands of `lanes`; only the
/// target's lane and its two adjacent lanes are considered. The nearest
/// candidate (smallest `|ds|`, then smallest track id) wins each slot.
pub fn assign_neighbors<T: Scalar>(
    frame: Frame,
    vehicles: &[SceneVehicle<T>],
    target_id: TrackId,
    lanes: &DirectionLanes,
) -> SceneFrame<T> {
    let nominal = T::lit(lanes.nominal_lane_width());
    let Some(target) = vehicles.iter().find(|v| v.track_id == target_id) else {
        return SceneFrame {
            frame,
            target: SceneVehicle {
                track_id: target_id,
                state: FrenetState::default(),
                length: T::zero(),
                on_ramp: false,
            },
            neighbors: [None; 8],
            alongside_counts: [0, 0],
            slot_lane_offsets: [nominal, T::zero(), -nominal],
            exclusion: Some(ExclusionReason::MissingTarget),
        };
    };

    let target_band = lanes.band_index(target.state.l.as_f64());
    let slot_lane_offsets = match target_band {
        Some(b) => {
            let c = lanes.lanes[b].center;
            let off = |side: Side, fallback: T| {
                lanes
                    .adjacent(b, side)
                    .map(|j| T::lit(lanes.lanes[j].center - c))
                    .unwrap_or(fallback)
            };
            [off(Side::Left, nominal), T::zero(), off(Side::Right, -nominal)]
        }
        None => [nominal, T::zero(), -nominal],
    };
    let mut scene = SceneFrame {
        frame,
        target: target.clone(),
        neighbors: [None; 8],
        alongside_counts: [0, 0],
        slot_lane_offsets,
        exclusion: None,
    };
    let Some(target_band) = target_band else {
        scene.exclusion = Some(ExclusionReason::OutsideLanes);
        return scene;
    };

    let mut best: [Option<(T, TrackId, usize)>; 8] = [None; 8];
    for (idx, cand) in vehicles.iter().enumerate() {
        if cand.track_id == target_id {
            continue;
        }
        let dl = cand.state.l - target.state.l;
        if cand.on_ramp && dl.abs() > T::lit(RAMP_LATERAL_LIMIT) {
            continue;
        }
        let Some(band) = lanes.band_index(cand.state.l.as_f64()) else { continue };
        let Some(side) = lanes.relation(target_band, band) else { continue };
        let lon = longitudinal_class(target, cand);
        if lon == Longitudinal::Alongside {
            match side {
                Side::Left => scene.alongside_counts[0] += 1,
                Side::Right => scene.alongside_counts[1] += 1,
                Side::Same => {}
            }
        }
        let Some(slot) = Slot::from_parts(side, lon) else { continue };
        let ds = (cand.state.s - target.state.s).abs();
        let better = match best[slot.index()] {
            None => true,
            Some((bd, bid, _)) => ds < bd || (ds == bd && cand.track_id < bid),
        };
        if better {
            best[slot.index()] = Some((ds, cand.track_id, idx));
        }
    }
    for slot in Slot::ALL {
        scene.neighbors[slot.index()] = best[slot.index()].map(|(_, _, idx)| Neighbor {
            track_id: vehicles[idx].track_id,
            state: vehicles[idx].state,
        });
    }
    scene
}

/// Marks scenes with two or more alongside vehicles on one side as invalid.
pub fn validate_scene<T: Scalar>(mut scene: SceneFrame<T>) -> SceneFrame<T> {
    if scene.exclusion.is_none() && scene.alongside_counts.iter().any(|&c| c >= 2) {
        scene.exclusion = Some(ExclusionReason::DoubleAlongside);
    }
    scene
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lanes::{LaneKind, LaneSpec};
    use std::collections::BTreeMap;

    fn lanes() -> DirectionLanes {
        DirectionLanes {
            lanes: vec![
                LaneSpec { id: 3, center: -2.0, kind: LaneKind::Mainline },
                LaneSpec { id: 2, center: -5.75, kind: LaneKind::Mainline },
                LaneSpec { id: 1, center: -9.5, kind: LaneKind::Mainline },
                LaneSpec { id: 9, center: -13.25, kind: LaneKind::OnRamp },
            ],
            svm_lanes: vec![3, 5],
            lanelets: BTreeMap::new(),
            bbox: None,
        }
    }

    fn veh(id: TrackId, s: f64, l: f64) -> SceneVehicle<f64> {
        SceneVehicle {
            track_id: id,
            state: FrenetState { s, l, s_dot: 30.0, l_dot: 0.0, ref_index: 0, gated: false },
            length: 4.5,
            on_ramp: false,
        }
    }

    #[test]
    fn single_vehicle_ahead_fills_p() {
        let scene = assign_neighbors(0, &[veh(1, 100.0, -5.75), veh(2, 130.0, -5.6)], 1, &lanes());
        assert_eq!(scene.neighbor(Slot::P).unwrap().track_id, 2);
        assert_eq!(Slot::ALL.iter().filter(|s| scene.neighbor(**s).is_some()).count(), 1);
        assert_eq!(scene.slot_lane_offsets, [3.75, 0.0, -3.75]);
    }

    #[test]
    fn ramp_vehicles_beyond_six_meters_are_ignored() {
        let mut wide = lanes();
        wide.lanes[3].center = -16.0;
        let target = veh(1, 100.0, -9.5);
        let mut ramp = veh(2, 110.0, -9.5 - 7.2);
        ramp.on_ramp = true;
        let scene = assign_neighbors(0, &[target.clone(), ramp.clone()], 1, &wide);
        assert!(Slot::ALL.iter().all(|s| scene.neighbor(*s).is_none()));
        // the same position off the ramp is an ordinary right-lane neighbor
        ramp.on_ramp = false;
        let scene = assign_neighbors(0, &[target.clone(), ramp.clone()], 1, &wide);
        assert_eq!(scene.neighbor(Slot::Rp).unwrap().track_id, 2);
        ramp.on_ramp = true;
        ramp.state.l = -9.5 - 5.5;
        let scene = assign_neighbors(0, &[target, ramp], 1, &wide);
        assert_eq!(scene.neighbor(Slot::Rp).unwrap().track_id, 2);
    }

    #[test]
    fn double_alongside_invalidates() {
        let vs = [veh(1, 100.0, -5.75), veh(2, 101.0, -2.0), veh(3, 98.0, -2.1)];
        let scene = validate_scene(assign_neighbors(0, &vs, 1, &lanes()));
        assert_eq!(scene.exclusion, Some(ExclusionReason::DoubleAlongside));
        assert_eq!(scene.neighbor(Slot::La).unwrap().track_id, 2);
    }

    #[test]
    fn full_scene_is_valid() {
        let vs = [
            veh(1, 100.0, -5.75),
            veh(2, 140.0, -5.75),
            veh(3, 60.0, -5.75),
            veh(4, 130.0, -2.0),
            veh(5, 100.0, -2.0),
            veh(6, 70.0, -2.0),
            veh(7, 125.0, -9.5),
            veh(8, 102.0, -9.5),
            veh(9, 80.0, -9.5),
        ];
        let scene = validate_scene(assign_neighbors(0, &vs, 1, &lanes()));
        assert!(scene.is_valid());
        let ids: Vec<TrackId> = Slot::ALL.iter().map(|s| scene.neighbor(*s).unwrap().track_id).collect();
        assert_eq!(ids, vec![2, 3, 4, 5, 6, 7, 8, 9]);
        let empty = validate_scene(assign_neighbors(0, &vs[..1], 1, &lanes()));
        assert!(empty.is_valid());
    }

    #[test]
    fn nearest_candidate_wins_and_non_adjacent_lanes_are_ignored() {
        let vs = [veh(1, 100.0, -2.0), veh(2, 160.0, -2.0), veh(3, 120.0, -2.0), veh(4, 120.0, -9.5)];
        let scene = assign_neighbors(0, &vs, 1, &lanes());
        assert_eq!(scene.neighbor(Slot::P).unwrap().track_id, 3);
        assert!(scene.neighbor(Slot::Rp).is_none());
        // target in the innermost lane: no left lane, nominal offset used
        assert_eq!(scene.slot_lane_offsets[0], 3.75);
    }

    #[test]
    fn mirroring_swaps_sides_and_is_an_involution() {
        let vs = [veh(1, 100.0, -5.75), veh(2, 130.0, -2.0), veh(3, 101.0, -9.5)];
        let scene = assign_neighbors(0, &vs, 1, &lanes());
        let m = scene.mirrored();
        assert_eq!(m.neighbor(Slot::Rp).unwrap().track_id, 2);
        assert_eq!(m.neighbor(Slot::La).unwrap().track_id, 3);
        assert_eq!(m.neighbor(Slot::Rp).unwrap().state.l, 2.0);
        assert_eq!(m.mirrored(), scene);
    }
}
