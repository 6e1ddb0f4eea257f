//! Lane-change instants and labeled observation-window segments.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{Frame, TrackId};
use crate::lanes::DirectionLanes;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "LK")]
    Lk = 0,
    #[serde(rename = "LLC")]
    Llc = 1,
    #[serde(rename = "RLC")]
    Rlc = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Lk, Label::Llc, Label::Rlc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Lk => "LK",
            Label::Llc => "LLC",
            Label::Rlc => "RLC",
        }
    }

    /// LLC and RLC swap under a lateral mirror.
    pub fn mirrored(self) -> Label {
        match self {
            Label::Llc => Label::Rlc,
            Label::Rlc => Label::Llc,
            Label::Lk => Label::Lk,
        }
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "LK" => Ok(Label::Lk),
            "LLC" => Ok(Label::Llc),
            "RLC" => Ok(Label::Rlc),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LcDirection {
    Left,
    Right,
}

impl LcDirection {
    pub fn label(self) -> Label {
        match self {
            LcDirection::Left => Label::Llc,
            LcDirection::Right => Label::Rlc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LcInstant {
    pub track_id: TrackId,
    pub frame: Frame,
    pub direction: LcDirection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub dataset_tag: String,
    pub track_id: TrackId,
    pub start_frame: Frame,
    /// Inclusive.
    pub end_frame: Frame,
    pub label: Label,
    /// Prediction time in seconds; only for lane-change segments.
    pub prediction_time: Option<f64>,
}

impl Segment {
    pub fn frame_count(&self) -> usize {
        (self.end_frame - self.start_frame + 1) as usize
    }

    pub fn contains(&self, frame: Frame) -> bool {
        self.start_frame <= frame && frame <= self.end_frame
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    /// Observation window in seconds.
    pub delta_t_o: f64,
    /// Maximum prediction time in seconds.
    pub delta_t_p_max: f64,
    /// Extra draws of the prediction time after an infeasible one.
    pub retry: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            delta_t_o: 2.0,
            delta_t_p_max: 4.0,
            retry: 10,
        }
    }
}

impl SegmentParams {
    pub fn window_frames(&self, frequency_hz: f64) -> u32 {
        (self.delta_t_o * frequency_hz).round() as u32
    }

    pub fn max_pred_frames(&self, frequency_hz: f64) -> u32 {
        (self.delta_t_p_max * frequency_hz).round() as u32
    }
}

/// Frames of interest of one track: `mask[i]` refers to frame `first_frame + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMask {
    pub first_frame: Frame,
    pub mask: Vec<bool>,
}

impl FrameMask {
    pub fn all(first_frame: Frame, len: usize) -> Self {
        Self { first_frame, mask: vec![true; len] }
    }

    pub fn last_frame(&self) -> Option<Frame> {
        (!self.mask.is_empty()).then(|| self.first_frame + self.mask.len() as u32 - 1)
    }

    pub fn get(&self, frame: Frame) -> bool {
        frame
            .checked_sub(self.first_frame)
            .and_then(|i| self.mask.get(i as usize).copied())
            .unwrap_or(false)
    }

    /// True if every frame in `[start, end]` is of interest.
    pub fn window_ok(&self, start: Frame, end: Frame) -> bool {
        if start < self.first_frame || end < start {
            return false;
        }
        let a = (start - self.first_frame) as usize;
        let b = (end - self.first_frame) as usize;
        b < self.mask.len() && self.mask[a..=b].iter().all(|m| *m)
    }
}

/// One instant per change of the center's lane band. The direction is Left
/// when the new lane center has a larger lateral offset than the old one.
/// Frames outside every band keep the last known band.
pub fn detect_lc_instants(
    track_id: TrackId,
    frames: &[Frame],
    lateral: &[f64],
    lanes: &DirectionLanes,
) -> Vec<LcInstant> {
    let mut out = Vec::new();
    let mut current: Option<usize> = None;
    for (frame, l) in frames.iter().zip(lateral) {
        let Some(band) = lanes.band_index(*l) else { continue };
        if let Some(prev) = current {
            if prev != band {
                let direction = if lanes.lanes[band].center > lanes.lanes[prev].center {
                    LcDirection::Left
                } else {
                    LcDirection::Right
                };
                out.push(LcInstant { track_id, frame: *frame, direction });
            }
        }
        current = Some(band);
    }
    out
}

/// Window of `n` frames ending at `end`, if it does not start before frame 0.
fn window_start(end: Frame, n: u32) -> Option<Frame> {
    (end + 1).checked_sub(n)
}

/// Cuts the lane-change segment for `instant`: the prediction time is drawn
/// uniformly from `[0, delta_t_p_max]` and redrawn up to `params.retry`
/// times when the window is infeasible.
pub fn cut_lc_segment<R: Rng + ?Sized>(
    instant: &LcInstant,
    all_instants: &[LcInstant],
    interest: &FrameMask,
    frequency_hz: f64,
    params: &SegmentParams,
    dataset_tag: &str,
    rng: &mut R,
) -> Option<Segment> {
    let n = params.window_frames(frequency_hz);
    for _ in 0..=params.retry {
        let dt_p = rng.random::<f64>() * params.delta_t_p_max;
        let offset = (dt_p * frequency_hz).round() as u32;
        let Some(end) = instant.frame.checked_sub(offset) else { continue };
        let Some(start) = window_start(end, n) else { continue };
        if !interest.window_ok(start, end) {
            continue;
        }
        let other_inside = all_instants.iter().any(|o| {
            o.track_id == instant.track_id
                && o.frame != instant.frame
                && start <= o.frame
                && o.frame <= end
        });
        if other_inside {
            continue;
        }
        return Some(Segment {
            dataset_tag: dataset_tag.to_string(),
            track_id: instant.track_id,
            start_frame: start,
            end_frame: end,
            label: instant.direction.label(),
            prediction_time: Some(dt_p),
        });
    }
    None
}

/// True if a window `[start, end]` qualifies as lane keeping.
pub fn lk_window_admissible(
    start: Frame,
    end: Frame,
    instants: &[LcInstant],
    interest: &FrameMask,
    max_pred_frames: u32,
) -> bool {
    interest.window_ok(start, end)
        && instants.iter().all(|i| {
            let contained = start <= i.frame && i.frame <= end;
            let precedes = i.frame > end && i.frame - end <= max_pred_frames;
            !contained && !precedes
        })
}

/// Picks one lane-keeping window uniformly among all admissible ones.
pub fn sample_lk_segment<R: Rng + ?Sized>(
    track_id: TrackId,
    instants: &[LcInstant],
    interest: &FrameMask,
    frequency_hz: f64,
    params: &SegmentParams,
    dataset_tag: &str,
    rng: &mut R,
) -> Option<Segment> {
    let candidates = lk_candidates(instants, interest, frequency_hz, params);
    if candidates.is_empty() {
        return None;
    }
    let start = candidates[rng.random_range(0..candidates.len())];
    let n = params.window_frames(frequency_hz);
    Some(Segment {
        dataset_tag: dataset_tag.to_string(),
        track_id,
        start_frame: start,
        end_frame: start + n - 1,
        label: Label::Lk,
        prediction_time: None,
    })
}

/// Start frames of every admissible lane-keeping window.
pub fn lk_candidates(
    instants: &[LcInstant],
    interest: &FrameMask,
    frequency_hz: f64,
    params: &SegmentParams,
) -> Vec<Frame> {
    let n = params.window_frames(frequency_hz);
    let max_pred = params.max_pred_frames(frequency_hz);
    let Some(last) = interest.last_frame() else { return Vec::new() };
    let mut out = Vec::new();
    let mut start = interest.first_frame;
    while start + n - 1 <= last {
        let end = start + n - 1;
        if lk_window_admissible(start, end, instants, interest, max_pred) {
            out.push(start);
        }
        start += 1;
    }
    out
}

pub const SEGMENT_HEADER: &str = "datasetTag,trackId,startFrame,endFrame,label,predTime";

pub fn segments_csv(segments: &[Segment]) -> String {
    let mut out = format!("{SEGMENT_HEADER}\n");
    for s in segments {
        let pred = s.prediction_time.map(|p| format!("{p:.16e}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.dataset_tag, s.track_id, s.start_frame, s.end_frame, s.label, pred
        );
    }
    out
}

pub fn parse_segments_csv(s: &str) -> Result<Vec<Segment>, String> {
    let mut lines = s.lines();
    if lines.next().map(str::trim) != Some(SEGMENT_HEADER) {
        return Err(format!("expected header {SEGMENT_HEADER}"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| format!("line {}: bad {what}", i + 2);
            if f.len() != 6 {
                return Err(bad("field count"));
            }
            Ok(Segment {
                dataset_tag: f[0].to_string(),
                track_id: f[1].parse().map_err(|_| bad("trackId"))?,
                start_frame: f[2].parse().map_err(|_| bad("startFrame"))?,
                end_frame: f[3].parse().map_err(|_| bad("endFrame"))?,
                label: f[4].parse().map_err(|_| bad("label"))?,
                prediction_time: if f[5].is_empty() {
                    None
                } else {
                    Some(f[5].parse().map_err(|_| bad("predTime"))?)
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lanes::{LaneKind, LaneSpec};
    use crate::stats::ks_uniform_test;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn lanes() -> DirectionLanes {
        DirectionLanes {
            lanes: vec![
                LaneSpec { id: 3, center: -2.0, kind: LaneKind::Mainline },
                LaneSpec { id: 2, center: -5.75, kind: LaneKind::Mainline },
                LaneSpec { id: 1, center: -9.5, kind: LaneKind::Mainline },
            ],
            svm_lanes: vec![3, 5],
            lanelets: BTreeMap::new(),
            bbox: None,
        }
    }

    #[test]
    fn constructed_left_crossing() {
        let frames: Vec<Frame> = (0..300).collect();
        let lateral: Vec<f64> = frames.iter().map(|&f| if f < 120 { -5.75 } else { -2.1 }).collect();
        let got = detect_lc_instants(7, &frames, &lateral, &lanes());
        assert_eq!(got, vec![LcInstant { track_id: 7, frame: 120, direction: LcDirection::Left }]);
        assert!(detect_lc_instants(7, &frames, &vec![-5.75; 300], &lanes()).is_empty());
        // mirrored lanes and lateral positions give the opposite direction
        let mirrored: Vec<f64> = lateral.iter().map(|l| -l).collect();
        let got = detect_lc_instants(7, &frames, &mirrored, &lanes().mirrored());
        assert_eq!(got[0].direction, LcDirection::Right);
    }

    #[test]
    fn lc_segment_has_fifty_frames_before_instant() {
        let interest = FrameMask::all(0, 300);
        let inst = LcInstant { track_id: 1, frame: 200, direction: LcDirection::Right };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seg = cut_lc_segment(&inst, &[inst], &interest, 25.0, &SegmentParams::default(), "a", &mut rng)
            .unwrap();
        assert_eq!(seg.frame_count(), 50);
        assert_eq!(seg.label, Label::Rlc);
        let dt = seg.prediction_time.unwrap();
        assert!((0.0..=4.0).contains(&dt));
        assert_eq!(seg.end_frame, 200 - (dt * 25.0).round() as u32);
    }

    #[test]
    fn insufficient_history_gives_none() {
        let interest = FrameMask::all(0, 300);
        let inst = LcInstant { track_id: 1, frame: 10, direction: LcDirection::Left };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(cut_lc_segment(&inst, &[inst], &interest, 25.0, &SegmentParams::default(), "a", &mut rng).is_none());
    }

    #[test]
    fn zero_retry_discards_on_first_infeasible_draw() {
        // only prediction times below ~0.4 s are feasible
        let interest = FrameMask::all(0, 300);
        let inst = LcInstant { track_id: 1, frame: 60, direction: LcDirection::Left };
        let params = SegmentParams { retry: 0, ..Default::default() };
        let mut hits = 0;
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            hits += cut_lc_segment(&inst, &[inst], &interest, 25.0, &params, "a", &mut rng).is_some() as u32;
        }
        assert!(hits > 0 && hits < 40, "{hits}");
    }

    #[test]
    fn drawn_prediction_times_are_uniform() {
        let interest = FrameMask::all(0, 1000);
        let inst = LcInstant { track_id: 1, frame: 500, direction: LcDirection::Left };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| {
                cut_lc_segment(&inst, &[inst], &interest, 25.0, &SegmentParams::default(), "a", &mut rng)
                    .unwrap()
                    .prediction_time
                    .unwrap()
            })
            .collect();
        let ks = ks_uniform_test(&draws, 0.0, 4.0);
        assert!(!ks.rejects(0.01), "D = {}", ks.statistic);
    }

    #[test]
    fn lk_candidate_count_on_clean_track() {
        let interest = FrameMask::all(0, 300);
        let c = lk_candidates(&[], &interest, 25.0, &SegmentParams::default());
        assert_eq!(c.len(), 251);
    }

    #[test]
    fn lk_excluded_when_every_window_precedes_change() {
        // frames of interest only in [100, 200); lane change at frame 240
        let mut mask = vec![false; 400];
        for m in &mut mask[100..200] {
            *m = true;
        }
        let interest = FrameMask { first_frame: 0, mask };
        let inst = LcInstant { track_id: 1, frame: 240, direction: LcDirection::Left };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_lk_segment(1, &[inst], &interest, 25.0, &SegmentParams::default(), "a", &mut rng).is_none());
    }

    #[test]
    fn csv_round_trip() {
        let segs = vec![
            Segment { dataset_tag: "exid".into(), track_id: 4, start_frame: 10, end_frame: 59, label: Label::Llc, prediction_time: Some(1.25) },
            Segment { dataset_tag: "exid".into(), track_id: 5, start_frame: 0, end_frame: 49, label: Label::Lk, prediction_time: None },
        ];
        assert_eq!(parse_segments_csv(&segments_csv(&segs)).unwrap(), segs);
    }
}
