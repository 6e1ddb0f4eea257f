//! Synthetic two-direction highway recordings in the ingest schema.
//!
//! Each direction is simulated jointly in time: vehicles follow their lane
//! center with a smooth random lateral jitter, keep distance to the vehicle
//! ahead, and perform scheduled lane changes (a lateral drift phase followed
//! by a quintic move to the neighbor lane) once the target-lane gap is large
//! enough. An on-ramp lane can feed vehicles that merge into the outer lane.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{write_recording, DriveSide, Frame, IngestError, RecordingBundle, Track, TrackId, TrackPoint, VehicleClass};
use crate::lanes::{DirectionLanes, LaneConfig, LaneConfigError, LaneId, LaneKind, LaneSpec};
use crate::segment::{LcDirection, LcInstant};

pub const TRACKS_FILE: &str = "tracks.csv";
pub const META_FILE: &str = "recordingMeta.csv";
pub const LANE_CONFIG_FILE: &str = "lane_config.json";
pub const GROUND_TRUTH_FILE: &str = "groundtruth_lc.csv";
pub const GROUND_TRUTH_HEADER: &str = "trackId,frame,direction";

/// Direction names used in the lane config; `forward` travels toward +x.
pub const DIRECTIONS: [&str; 2] = ["forward", "backward"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid population parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    LaneConfig(#[from] LaneConfigError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RampParams {
    /// The ramp lane runs alongside the outer lane from the road start to here.
    pub length: f64,
    /// Share of spawned vehicles entering from the ramp.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationParams {
    /// Dataset tag and location id.
    pub name: String,
    pub recording_id: u32,
    pub drive_side: DriveSide,
    pub frequency_hz: f64,
    pub road_length: f64,
    /// Straight up to `arc_start`, then a left-turning arc (seen from +x travel).
    pub arc_start: f64,
    pub arc_radius: Option<f64>,
    pub lanes_per_direction: usize,
    pub lane_width: f64,
    pub median_width: f64,
    pub ramp: Option<RampParams>,
    /// Probability that a mainline vehicle attempts one lane change.
    pub lc_probability: f64,
    /// Duration of the lateral move between lane centers (s).
    pub lc_duration: f64,
    /// Drift phase before the move (s).
    pub prep_time: f64,
    /// Lateral offset toward the target lane reached at the end of the drift (m).
    pub prep_drift: f64,
    /// Pull of the speed toward target-lane traffic during the drift (1/s).
    pub speed_adjust_gain: f64,
    /// Minimum bumper gap to target-lane vehicles ahead and behind (m).
    pub gap_acceptance: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    /// Stationary standard deviation of the lateral jitter (m).
    pub jitter_std: f64,
    /// Time scale of the lateral jitter (s).
    pub jitter_time: f64,
    pub truck_fraction: f64,
    pub seed: u64,
}

impl Default for PopulationParams {
    fn default() -> Self {
        Self::exid_like()
    }
}

impl PopulationParams {
    /// Right-hand traffic at 25 Hz with quick lane changes, a small early
    /// drift and steady lane keeping.
    pub fn exid_like() -> Self {
        Self {
            name: "exid".into(),
            recording_id: 1,
            drive_side: DriveSide::Right,
            frequency_hz: 25.0,
            road_length: 900.0,
            arc_start: 750.0,
            arc_radius: Some(400.0),
            lanes_per_direction: 3,
            lane_width: 3.75,
            median_width: 2.5,
            ramp: Some(RampParams { length: 450.0, fraction: 0.08 }),
            lc_probability: 0.6,
            lc_duration: 3.0,
            prep_time: 5.0,
            prep_drift: 0.3,
            speed_adjust_gain: 0.15,
            gap_acceptance: 12.0,
            speed_mean: 32.0,
            speed_std: 3.0,
            jitter_std: 0.05,
            jitter_time: 1.5,
            truck_fraction: 0.1,
            seed: 1,
        }
    }

    /// Left-hand traffic at 30 Hz with slow lane changes, a large early
    /// drift and wandering lane keeping.
    pub fn hk_like() -> Self {
        Self {
            name: "hk".into(),
            recording_id: 2,
            drive_side: DriveSide::Left,
            frequency_hz: 30.0,
            road_length: 700.0,
            arc_start: 700.0,
            arc_radius: None,
            lanes_per_direction: 3,
            lane_width: 3.5,
            median_width: 2.0,
            ramp: None,
            lc_probability: 0.6,
            lc_duration: 6.0,
            prep_time: 3.0,
            prep_drift: 0.6,
            speed_adjust_gain: 0.0,
            gap_acceptance: 6.0,
            speed_mean: 22.0,
            speed_std: 3.0,
            jitter_std: 0.15,
            jitter_time: 3.0,
            truck_fraction: 0.15,
            seed: 2,
        }
    }

    /// Peak lateral speed of the quintic move across one lane.
    pub fn peak_lateral_velocity(&self) -> f64 {
        1.875 * (self.lane_width - self.prep_drift) / self.lc_duration
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        let positive = [
            ("frequency_hz", self.frequency_hz),
            ("road_length", self.road_length),
            ("lane_width", self.lane_width),
            ("median_width", self.median_width),
            ("lc_duration", self.lc_duration),
            ("gap_acceptance", self.gap_acceptance),
            ("speed_mean", self.speed_mean),
            ("jitter_time", self.jitter_time),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("arc_start", self.arc_start),
            ("prep_time", self.prep_time),
            ("prep_drift", self.prep_drift),
            ("speed_adjust_gain", self.speed_adjust_gain),
            ("speed_std", self.speed_std),
            ("jitter_std", self.jitter_std),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.lc_duration >= 10.0 {
            return bad(format!("lc_duration must be below 10 s, got {}", self.lc_duration));
        }
        if self.lanes_per_direction == 0 || self.lanes_per_direction > 8 {
            return bad(format!("lanes_per_direction must be in 1..=8, got {}", self.lanes_per_direction));
        }
        if self.prep_drift >= self.lane_width / 2.0 {
            return bad("prep_drift must stay within half a lane".into());
        }
        for (name, p) in [("lc_probability", self.lc_probability), ("truck_fraction", self.truck_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be a probability, got {p}"));
            }
        }
        if let Some(r) = self.arc_radius {
            if !(r.is_finite() && r > self.median_width + 10.0 * self.lane_width) {
                return bad(format!("arc_radius {r} too small for the cross-section"));
            }
        }
        if let Some(ramp) = &self.ramp {
            if !(ramp.length > 0.0 && ramp.length < self.road_length) || !(0.0..1.0).contains(&ramp.fraction) {
                return bad("ramp length must lie inside the road and fraction in [0, 1)".into());
            }
        }
        Ok(())
    }

    fn has_ramp(&self) -> bool {
        self.ramp.as_ref().is_some_and(|r| r.fraction > 0.0)
    }

    /// Outward lateral offset of lane `i` from the divider (ramp is `lanes_per_direction`).
    fn lane_center(&self, i: usize) -> f64 {
        self.median_width / 2.0 + self.lane_width * (i as f64 + 0.5)
    }

    fn lane_id(dir: usize, i: usize) -> LaneId {
        (dir * 10 + i + 1) as LaneId
    }

    fn lanelet_id(lane: LaneId) -> LaneId {
        100 + lane
    }

    /// Lane configuration matching the generated recording. Centers are the
    /// Frenet lateral offsets against each direction's own reference path.
    pub fn lane_config(&self) -> LaneConfig {
        let sign = match self.drive_side {
            DriveSide::Right => -1.0,
            DriveSide::Left => 1.0,
        };
        let n = self.lanes_per_direction;
        let mut loc = BTreeMap::new();
        for dir in 0..2 {
            let mut lanes: Vec<LaneSpec> = (0..n)
                .map(|i| LaneSpec { id: Self::lane_id(dir, i), center: sign * self.lane_center(i), kind: LaneKind::Mainline })
                .collect();
            if self.has_ramp() {
                lanes.push(LaneSpec { id: Self::lane_id(dir, n), center: sign * self.lane_center(n), kind: LaneKind::OnRamp });
            }
            let lanelets = lanes.iter().map(|l| (Self::lanelet_id(l.id), l.kind)).collect();
            loc.insert(
                DIRECTIONS[dir].to_string(),
                DirectionLanes {
                    lanes,
                    svm_lanes: vec![Self::lane_id(dir, 0), Self::lane_id(1 - dir, 0)],
                    lanelets,
                    bbox: None,
                },
            );
        }
        let mut cfg = BTreeMap::new();
        cfg.insert(self.name.clone(), loc);
        LaneConfig { locations: cfg }
    }
}

/// Divider geometry: straight along +x, then optionally a constant-curvature arc.
#[derive(Clone, Copy, Debug)]
struct Road {
    arc_start: f64,
    curvature: f64,
}

impl Road {
    fn curvature_at(&self, s: f64) -> f64 {
        if s > self.arc_start {
            self.curvature
        } else {
            0.0
        }
    }

    /// Divider point and heading at arc length `s`.
    fn divider(&self, s: f64) -> ([f64; 2], f64) {
        if s <= self.arc_start || self.curvature == 0.0 {
            return ([s, 0.0], 0.0);
        }
        let r = 1.0 / self.curvature;
        let phi = (s - self.arc_start) * self.curvature;
        ([self.arc_start + r * phi.sin(), r * (1.0 - phi.cos())], phi)
    }

    /// Position and velocity of a point at `(s, d)` moving with `(s_dot, d_dot)`;
    /// `d` is positive to the left of +s.
    fn kinematics(&self, s: f64, d: f64, s_dot: f64, d_dot: f64) -> ([f64; 2], [f64; 2]) {
        let (c, phi) = self.divider(s);
        let (sin, cos) = phi.sin_cos();
        let scale = 1.0 - self.curvature_at(s) * d;
        (
            [c[0] - d * sin, c[1] + d * cos],
            [cos * scale * s_dot - sin * d_dot, sin * scale * s_dot + cos * d_dot],
        )
    }
}

fn smoothstep(t: f64) -> (f64, f64) {
    let t = t.clamp(0.0, 1.0);
    (t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t))
}

fn quintic(t: f64) -> (f64, f64) {
    let t = t.clamp(0.0, 1.0);
    let t2 = t * t;
    (t2 * t * (10.0 - 15.0 * t + 6.0 * t2), 30.0 * t2 * (1.0 - t) * (1.0 - t))
}

#[derive(Clone, Copy, Debug)]
enum Plan {
    Keep,
    Pending { at: f64, target: usize, attempts: u32, forced: bool },
    Prep { t0: f64, target: usize },
    Move { t0: f64, from: f64, target: usize },
}

#[derive(Clone, Debug)]
struct Vehicle {
    id: TrackId,
    class: VehicleClass,
    length: f64,
    width: f64,
    u: f64,
    v: f64,
    v_des: f64,
    lane: usize,
    plan: Plan,
    jitter: f64,
    jitter_rate: f64,
    /// Outward offset and its rate at the last recorded frame.
    o: f64,
    o_dot: f64,
    points: Vec<TrackPoint>,
}

struct Arrival {
    time: f64,
    dir: usize,
    lane: usize,
}

/// A generated recording with its lane configuration and the true lane-change instants.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecording {
    pub params: PopulationParams,
    pub bundle: RecordingBundle,
    pub lane_config: LaneConfig,
    /// Direction in the driver's sense, sorted by track then frame.
    pub ground_truth: Vec<LcInstant>,
}

struct Sim<'a> {
    p: &'a PopulationParams,
    road: Road,
    dt: f64,
    rng: ChaCha8Rng,
    jitter_omega: f64,
    jitter_sigma: f64,
}

impl Sim<'_> {
    fn n_lanes(&self) -> usize {
        self.p.lanes_per_direction
    }

    fn lateral(&self, v: &Vehicle, t: f64) -> (f64, f64) {
        let p = self.p;
        let (base, rate) = match v.plan {
            Plan::Keep | Plan::Pending { .. } => (p.lane_center(v.lane), 0.0),
            Plan::Prep { t0, target } => {
                let sign = if target > v.lane { 1.0 } else { -1.0 };
                if p.prep_time > 0.0 {
                    let (s, ds) = smoothstep((t - t0) / p.prep_time);
                    (p.lane_center(v.lane) + sign * p.prep_drift * s, sign * p.prep_drift * ds / p.prep_time)
                } else {
                    (p.lane_center(v.lane), 0.0)
                }
            }
            Plan::Move { t0, from, target } => {
                let delta = p.lane_center(target) - from;
                let (q, dq) = quintic((t - t0) / p.lc_duration);
                (from + delta * q, delta * dq / p.lc_duration)
            }
        };
        (base + v.jitter, rate + v.jitter_rate)
    }

    fn advance_plan(&self, v: &mut Vehicle, t: f64) {
        let p = self.p;
        loop {
            match v.plan {
                Plan::Prep { t0, target } if t >= t0 + p.prep_time => {
                    let from = p.lane_center(v.lane) + if target > v.lane { p.prep_drift } else { -p.prep_drift };
                    v.plan = Plan::Move { t0: t0 + p.prep_time, from, target };
                }
                Plan::Move { t0, target, .. } if t >= t0 + p.lc_duration => {
                    v.lane = target;
                    v.plan = Plan::Keep;
                }
                _ => return,
            }
        }
    }

    fn gap_ok(&self, me: &Vehicle, others: &[Vehicle], target: usize) -> bool {
        let center = self.p.lane_center(target);
        others.iter().filter(|o| o.id != me.id && (o.o - center).abs() < self.p.lane_width * 0.75).all(|o| {
            (o.u - me.u).abs() - (o.length + me.length) / 2.0 >= self.p.gap_acceptance
        })
    }

    fn target_lane_speed(&self, me: &Vehicle, others: &[Vehicle], target: usize) -> Option<f64> {
        let center = self.p.lane_center(target);
        let near: Vec<f64> = others
            .iter()
            .filter(|o| (o.o - center).abs() < self.p.lane_width / 2.0 && (o.u - me.u).abs() < 100.0)
            .map(|o| o.v)
            .collect();
        (!near.is_empty()).then(|| near.iter().sum::<f64>() / near.len() as f64)
    }

    fn acceleration(&self, me: &Vehicle, others: &[Vehicle]) -> f64 {
        let mut a = 0.5 * (me.v_des - me.v);
        let leader = others
            .iter()
            .filter(|o| o.id != me.id && o.u > me.u && (o.o - me.o).abs() < self.p.lane_width * 0.8)
            .min_by(|x, y| x.u.total_cmp(&y.u));
        if let Some(l) = leader {
            let gap = l.u - me.u - (l.length + me.length) / 2.0;
            let desired = 5.0 + 1.5 * me.v;
            if gap < desired {
                a = a.min(0.8 * (l.v - me.v) + 0.3 * (gap - desired));
            }
        }
        if let Plan::Prep { target, .. } = me.plan {
            if let Some(vt) = self.target_lane_speed(me, others, target) {
                a += self.p.speed_adjust_gain * (vt - me.v);
            }
        }
        a.clamp(-6.0, 2.0)
    }

    fn step_jitter(&mut self, v: &mut Vehicle) {
        let w = self.jitter_omega;
        let xi: f64 = StandardNormal.sample(&mut self.rng);
        v.jitter_rate += (-2.0 * w * v.jitter_rate - w * w * v.jitter) * self.dt + self.jitter_sigma * self.dt.sqrt() * xi;
        v.jitter += v.jitter_rate * self.dt;
    }

    fn spawn(&mut self, id: TrackId, lane: usize, t: f64) -> Vehicle {
        let p = self.p;
        let truck = self.rng.random_bool(p.truck_fraction);
        let speed = Normal::new(p.speed_mean, p.speed_std.max(1e-9)).unwrap();
        let mut v_des: f64 = speed.sample(&mut self.rng);
        v_des = v_des.clamp(0.6 * p.speed_mean, 1.4 * p.speed_mean);
        if truck {
            v_des *= 0.85;
        }
        let (length, width) = if truck {
            (self.rng.random_range(10.0..16.0), 2.5)
        } else {
            (self.rng.random_range(4.2..5.0), 1.8)
        };
        let jitter = p.jitter_std * { let z: f64 = StandardNormal.sample(&mut self.rng); z };
        let jitter_rate = p.jitter_std * self.jitter_omega * { let z: f64 = StandardNormal.sample(&mut self.rng); z };
        let n = self.n_lanes();
        let plan = if lane == n {
            let ramp_len = p.ramp.as_ref().map_or(0.0, |r| r.length);
            let du = self.rng.random_range(0.05..0.2) * ramp_len;
            Plan::Pending { at: t + du / v_des, target: n - 1, attempts: 0, forced: true }
        } else if self.rng.random_bool(p.lc_probability) {
            let mut options = Vec::new();
            if lane > 0 {
                options.push(lane - 1);
            }
            if lane + 1 < n {
                options.push(lane + 1);
            }
            let earliest = (8.0 - p.prep_time).max(1.0);
            let latest = p.road_length / v_des - (p.prep_time + p.lc_duration + 3.0);
            if options.is_empty() || latest <= earliest {
                Plan::Keep
            } else {
                let target = options[self.rng.random_range(0..options.len())];
                Plan::Pending { at: t + self.rng.random_range(earliest..latest), target, attempts: 0, forced: false }
            }
        } else {
            Plan::Keep
        };
        Vehicle {
            id,
            class: if truck { VehicleClass::Truck } else { VehicleClass::Car },
            length,
            width,
            u: 0.0,
            v: v_des,
            v_des,
            lane,
            plan,
            jitter,
            jitter_rate,
            o: 0.0,
            o_dot: 0.0,
            points: Vec::new(),
        }
    }

    fn lane_of(&self, o: f64) -> usize {
        let p = self.p;
        let count = self.n_lanes() + usize::from(p.has_ramp());
        let idx = ((o - p.median_width / 2.0) / p.lane_width).floor();
        (idx.max(0.0) as usize).min(count - 1)
    }

    /// Divider coordinate `s` and the sign factors mapping travel and
    /// outward offset onto `(s, d)`.
    fn placement(&self, v: &Vehicle, dir: usize) -> (f64, f64, f64) {
        let p = self.p;
        let (s, s_sign) = if dir == 0 { (v.u, 1.0) } else { (p.road_length - v.u, -1.0) };
        let d_sign = match (p.drive_side, dir) {
            (DriveSide::Right, 0) | (DriveSide::Left, 1) => -1.0,
            _ => 1.0,
        };
        (s, s_sign, d_sign)
    }

    /// Rate of the divider coordinate for a vehicle moving at its speed along its lane.
    fn divider_rate(&self, v: &Vehicle, dir: usize) -> f64 {
        let (s, _, d_sign) = self.placement(v, dir);
        v.v / (1.0 - self.road.curvature_at(s) * d_sign * v.o)
    }

    /// Travel coordinate after moving `dist` along the vehicle's current lane
    /// offset, exact across the start of the arc.
    fn advance(&self, v: &Vehicle, dir: usize, dist: f64) -> f64 {
        let (s0, s_sign, d_sign) = self.placement(v, dir);
        let a = self.road.arc_start;
        let scale = 1.0 - self.road.curvature * d_sign * v.o;
        let lane_dist = |s: f64| if s <= a { s } else { a + (s - a) * scale };
        let inverse = |x: f64| if x <= a { x } else { a + (x - a) / scale };
        let s1 = inverse(lane_dist(s0) + s_sign * dist);
        if dir == 0 {
            s1
        } else {
            self.p.road_length - s1
        }
    }

    fn record(&self, v: &mut Vehicle, dir: usize, frame: Frame) {
        let (s, s_sign, d_sign) = self.placement(v, dir);
        let d = d_sign * v.o;
        let s_dot = s_sign * self.divider_rate(v, dir);
        let (pos, vel) = self.road.kinematics(s, d, s_dot, d_sign * v.o_dot);
        let lane = PopulationParams::lane_id(dir, self.lane_of(v.o));
        v.points.push(TrackPoint {
            frame,
            x: pos[0],
            y: pos[1],
            vx: vel[0],
            vy: vel[1],
            lane_id: lane,
            lanelet_ids: vec![PopulationParams::lanelet_id(lane)],
        });
    }
}

/// Simulates `n_tracks` vehicles whose arrivals are spread over `duration_s`.
pub fn generate_population(params: &PopulationParams, n_tracks: usize, duration_s: f64) -> Result<SynthRecording, SynthError> {
    params.validate()?;
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(SynthError::InvalidParams(format!("duration must be positive, got {duration_s}")));
    }
    let omega = 1.0 / params.jitter_time;
    let mut sim = Sim {
        p: params,
        road: Road { arc_start: params.arc_start, curvature: params.arc_radius.map_or(0.0, |r| 1.0 / r) },
        dt: 1.0 / params.frequency_hz,
        rng: ChaCha8Rng::seed_from_u64(params.seed),
        jitter_omega: omega,
        jitter_sigma: params.jitter_std * (4.0 * omega.powi(3)).sqrt(),
    };
    let n = params.lanes_per_direction;
    let ramp_fraction = if params.has_ramp() { params.ramp.as_ref().unwrap().fraction } else { 0.0 };

    let mut arrivals: Vec<Arrival> = (0..n_tracks)
        .map(|_| {
            let time = sim.rng.random_range(0.0..duration_s);
            let dir = sim.rng.random_range(0..2);
            let lane = if sim.rng.random_bool(ramp_fraction) { n } else { sim.rng.random_range(0..n) };
            Arrival { time, dir, lane }
        })
        .collect();
    arrivals.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut pending: [Vec<Arrival>; 2] = [Vec::new(), Vec::new()];
    for a in arrivals.into_iter().rev() {
        pending[a.dir].push(a);
    }

    let horizon = duration_s + params.road_length / (0.3 * params.speed_mean) + 120.0;
    let mut active: [Vec<Vehicle>; 2] = [Vec::new(), Vec::new()];
    let mut finished: Vec<Vehicle> = Vec::new();
    let mut next_id: TrackId = 1;
    let mut frame: Frame = 0;
    loop {
        let t = frame as f64 * sim.dt;
        if t > horizon || (pending.iter().all(Vec::is_empty) && active.iter().all(Vec::is_empty)) {
            break;
        }
        for dir in 0..2 {
            let mut vehicles = std::mem::take(&mut active[dir]);
            if frame > 0 {
                let accel: Vec<f64> = vehicles.iter().map(|v| sim.acceleration(v, &vehicles)).collect();
                for (v, a) in vehicles.iter_mut().zip(accel) {
                    v.v = (v.v + a * sim.dt).max(0.5);
                    v.u = sim.advance(v, dir, v.v * sim.dt);
                    sim.step_jitter(v);
                    sim.advance_plan(v, t);
                }
            }
            let (done, mut keep): (Vec<Vehicle>, Vec<Vehicle>) =
                vehicles.into_iter().partition(|v| v.u > params.road_length);
            finished.extend(done);

            while pending[dir].last().is_some_and(|a| a.time <= t) {
                let lane = pending[dir].last().unwrap().lane;
                let clear = keep.iter().all(|v| {
                    (v.o - params.lane_center(lane)).abs() > params.lane_width * 0.8 || v.u - v.length / 2.0 > 10.0 + 1.5 * params.speed_mean
                });
                if !clear {
                    break;
                }
                pending[dir].pop();
                let mut v = sim.spawn(next_id, lane, t);
                next_id += 1;
                v.o = params.lane_center(lane) + v.jitter;
                keep.push(v);
            }

            // Gap acceptance for due lane-change decisions.
            for i in 0..keep.len() {
                if let Plan::Pending { at, target, attempts, forced } = keep[i].plan {
                    if t < at {
                        continue;
                    }
                    keep[i].plan = if sim.gap_ok(&keep[i], &keep, target) || (forced && attempts >= 2) {
                        Plan::Prep { t0: t, target }
                    } else if attempts >= 5 {
                        Plan::Keep
                    } else {
                        Plan::Pending { at: at + 1.0, target, attempts: attempts + 1, forced }
                    };
                }
            }

            for v in keep.iter_mut() {
                let (o, o_dot) = sim.lateral(v, t);
                v.o = o;
                v.o_dot = o_dot;
                sim.record(v, dir, frame);
            }
            active[dir] = keep;
        }
        frame += 1;
    }
    finished.extend(active.into_iter().flatten());
    finished.sort_by_key(|v| v.id);

    let lane_config = params.lane_config();
    let mut ground_truth = Vec::new();
    let mut tracks = Vec::new();
    for v in finished {
        if v.points.len() < 2 {
            continue;
        }
        let dir = usize::from(PopulationParams::lane_id(1, 0) <= v.points[0].lane_id);
        let lanes = &lane_config.locations[&params.name][DIRECTIONS[dir]];
        for w in v.points.windows(2) {
            if w[0].lane_id != w[1].lane_id {
                let c = |id| lanes.lanes[lanes.lane_index(id).unwrap()].center;
                let direction = if c(w[1].lane_id) > c(w[0].lane_id) { LcDirection::Left } else { LcDirection::Right };
                ground_truth.push(LcInstant { track_id: v.id, frame: w[1].frame, direction });
            }
        }
        tracks.push(Track { track_id: v.id, frames: v.points, width: v.width, length: v.length, vehicle_class: v.class });
    }
    Ok(SynthRecording {
        params: params.clone(),
        bundle: RecordingBundle {
            recording_id: params.recording_id,
            location_id: params.name.clone(),
            frequency_hz: params.frequency_hz,
            drive_side: params.drive_side,
            tracks,
        },
        lane_config,
        ground_truth,
    })
}

pub fn ground_truth_csv(instants: &[LcInstant]) -> String {
    let mut out = format!("{GROUND_TRUTH_HEADER}\n");
    for i in instants {
        let dir = match i.direction {
            LcDirection::Left => "left",
            LcDirection::Right => "right",
        };
        let _ = writeln!(out, "{},{},{}", i.track_id, i.frame, dir);
    }
    out
}

pub fn parse_ground_truth_csv(s: &str) -> Result<Vec<LcInstant>, String> {
    let mut lines = s.lines();
    if lines.next().map(str::trim) != Some(GROUND_TRUTH_HEADER) {
        return Err(format!("expected header {GROUND_TRUTH_HEADER}"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.trim().split(',').collect();
            let bad = || format!("line {}: malformed {line:?}", i + 2);
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(LcInstant {
                track_id: f[0].parse().map_err(|_| bad())?,
                frame: f[1].parse().map_err(|_| bad())?,
                direction: match f[2] {
                    "left" => LcDirection::Left,
                    "right" => LcDirection::Right,
                    _ => return Err(bad()),
                },
            })
        })
        .collect()
}

/// Writes the recording files, lane config and ground truth into `dir`.
pub fn write_population(rec: &SynthRecording, dir: impl AsRef<Path>) -> Result<(), SynthError> {
    let dir = dir.as_ref();
    let io = |source| SynthError::Io { path: dir.display().to_string(), source };
    fs::create_dir_all(dir).map_err(io)?;
    write_recording(&rec.bundle, dir.join(TRACKS_FILE), dir.join(META_FILE))?;
    rec.lane_config.save(dir.join(LANE_CONFIG_FILE))?;
    fs::write(dir.join(GROUND_TRUTH_FILE), ground_truth_csv(&rec.ground_truth)).map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(params: PopulationParams) -> SynthRecording {
        generate_population(&params, 60, 40.0).unwrap()
    }

    #[test]
    fn quintic_profile_endpoints() {
        assert_eq!(quintic(0.0), (0.0, 0.0));
        assert_eq!(quintic(1.0), (1.0, 0.0));
        assert!((quintic(0.5).0 - 0.5).abs() < 1e-15);
        assert!((quintic(0.5).1 - 1.875).abs() < 1e-15);
    }

    #[test]
    fn emits_requested_track_count_and_valid_config() {
        let rec = small(PopulationParams::exid_like());
        assert_eq!(rec.bundle.tracks.len(), 60);
        rec.lane_config.validate().unwrap();
        for t in &rec.bundle.tracks {
            t.validate().unwrap();
        }
    }

    #[test]
    fn no_lane_changes_without_probability() {
        let params = PopulationParams { lc_probability: 0.0, ramp: None, ..PopulationParams::hk_like() };
        assert!(small(params).ground_truth.is_empty());
    }

    #[test]
    fn finite_difference_velocity_matches() {
        for params in [PopulationParams::exid_like(), PopulationParams::hk_like()] {
            let rec = small(params.clone());
            for t in &rec.bundle.tracks {
                for w in t.frames.windows(2) {
                    let fd = [(w[1].x - w[0].x) * params.frequency_hz, (w[1].y - w[0].y) * params.frequency_hz];
                    let err = (fd[0] - w[1].vx).hypot(fd[1] - w[1].vy);
                    assert!(err <= 0.01 * w[1].vx.hypot(w[1].vy), "track {} frame {} fd {fd:?} {:?} {:?}", t.track_id, w[1].frame, w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_recording() {
        let a = small(PopulationParams::exid_like());
        let b = small(PopulationParams::exid_like());
        assert_eq!(a, b);
        let c = small(PopulationParams { seed: 9, ..PopulationParams::exid_like() });
        assert_ne!(a.bundle, c.bundle);
    }

    #[test]
    fn rejects_invalid_params() {
        let bad = PopulationParams { lc_duration: 12.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(SynthError::InvalidParams(_))));
        let bad = PopulationParams { lane_width: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(generate_population(&PopulationParams::default(), 5, 0.0).is_err());
    }

    #[test]
    fn ground_truth_csv_round_trip() {
        let rec = small(PopulationParams::exid_like());
        assert!(!rec.ground_truth.is_empty());
        let text = ground_truth_csv(&rec.ground_truth);
        assert_eq!(parse_ground_truth_csv(&text).unwrap(), rec.ground_truth);
    }
}
