//! In-memory pipeline stages from a recording to labeled feature samples.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use lcpred_core::features::{assemble_sample, build_feature_row, MissingNeighborPolicy, Provenance};
use lcpred_core::frenet::{FrenetConfig, FrenetConverter, FrenetState, LdotFormula};
use lcpred_core::ingest::ramp_exclusion_mask;
use lcpred_core::refpath::{build_reference_path, extract_zero_boundary, BBox, ReferencePath};
use lcpred_core::scene::{assign_neighbors, validate_scene, SceneFrame, SceneVehicle};
use lcpred_core::segment::{cut_lc_segment, detect_lc_instants, sample_lk_segment, FrameMask, LcInstant};
use lcpred_core::svm::{fit_rbf_svm, SvmModel};
use lcpred_core::{DirectionLanes, DriveSide, Frame, LaneConfig, RecordingBundle, Sample, Segment, SegmentParams, TrackId};

use crate::config::RefPathConfig;
use crate::ExperimentError;

fn data_err(stage: &'static str) -> impl Fn(String) -> ExperimentError {
    move |message| ExperimentError::Data { stage, message }
}

/// Reference paths of one location, one per direction, all tracing the same
/// divider in that direction's travel sense.
#[derive(Clone, Debug)]
pub struct FittedPaths {
    pub location: String,
    pub svm: SvmModel<f64>,
    pub training_points: usize,
    pub paths: BTreeMap<String, ReferencePath<f64>>,
}

/// Exactly `min(max, len)` elements, evenly spaced by index.
fn stride<T: Copy>(items: &[T], max: usize) -> Vec<T> {
    let m = max.min(items.len());
    (0..m).map(|i| items[i * items.len() / m]).collect()
}

/// Keeps the points of `candidates` within `radius` of some point of `data`.
fn near_points(candidates: &[[f64; 2]], data: &[[f64; 2]], radius: f64) -> Vec<[f64; 2]> {
    let cell = |p: &[f64; 2]| ((p[0] / radius).floor() as i64, (p[1] / radius).floor() as i64);
    let mut grid: std::collections::HashMap<(i64, i64), Vec<[f64; 2]>> = std::collections::HashMap::new();
    for p in data {
        grid.entry(cell(p)).or_default().push(*p);
    }
    candidates
        .iter()
        .filter(|c| {
            let (i, j) = cell(c);
            (i - 1..=i + 1).any(|a| {
                (j - 1..=j + 1).any(|b| {
                    grid.get(&(a, b))
                        .is_some_and(|v| v.iter().any(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= radius * radius))
                })
            })
        })
        .copied()
        .collect()
}

/// Fits the dividing SVM on the innermost lanes of the first direction,
/// extracts and smooths its zero level, and reverses it for the other direction.
pub fn fit_reference_paths(
    bundle: &RecordingBundle,
    lane_config: &LaneConfig,
    cfg: &RefPathConfig,
) -> Result<FittedPaths, ExperimentError> {
    let err = data_err("refpath");
    let location = &bundle.location_id;
    let dirs = lane_config.location(location).map_err(|e| err(e.to_string()))?;
    let (first_name, first) = dirs.iter().next().ok_or_else(|| err(format!("location {location} has no directions")))?;
    let (own, other) = (first.svm_lanes[0], first.svm_lanes[1]);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut heading = [0.0, 0.0];
    for t in &bundle.tracks {
        for p in &t.frames {
            if p.lane_id == own {
                pos.push([p.x, p.y]);
                heading[0] += p.vx;
                heading[1] += p.vy;
            } else if p.lane_id == other {
                neg.push([p.x, p.y]);
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(err(format!("svm lanes {own} and {other} need trajectory points on both sides")));
    }
    let per_class = cfg.max_points_per_class.min(pos.len()).min(neg.len());
    let pos = stride(&pos, per_class);
    let neg = stride(&neg, per_class);
    let labels: Vec<i8> = std::iter::repeat_n(1, pos.len()).chain(std::iter::repeat_n(-1, neg.len())).collect();
    let points: Vec<[f64; 2]> = pos.into_iter().chain(neg).collect();
    let svm = fit_rbf_svm(&points, &labels, &cfg.svm).map_err(|e| err(e.to_string()))?;
    let bbox = match first.bbox {
        Some([x0, y0, x1, y1]) => BBox { min: [x0, y0], max: [x1, y1] },
        None => BBox::around(&points, cfg.bbox_pad).expect("points are non-empty"),
    };
    let boundary = extract_zero_boundary(&svm, &bbox, cfg.grid_step, heading).map_err(|e| err(e.to_string()))?;
    let boundary = near_points(&boundary, &points, cfg.max_data_distance);
    let path = build_reference_path(&boundary, cfg.smoothing_window, cfg.spacing, first_name.clone())
        .map_err(|e| err(e.to_string()))?;
    let mut paths = BTreeMap::new();
    for name in dirs.keys() {
        let p = if name == first_name { path.clone() } else { path.reversed(name.clone()).map_err(|e| err(e.to_string()))? };
        paths.insert(name.clone(), p);
    }
    Ok(FittedPaths { location: location.clone(), svm, training_points: points.len(), paths })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrenetTrack {
    pub track_id: TrackId,
    pub direction: String,
    pub length: f64,
    pub first_frame: Frame,
    pub states: Vec<FrenetState<f64>>,
    /// Per frame: the footprint touches a ramp lane or lanelet.
    pub on_ramp: Vec<bool>,
}

impl FrenetTrack {
    pub fn frames(&self) -> impl Iterator<Item = Frame> + '_ {
        (0..self.states.len() as u32).map(|i| self.first_frame + i)
    }
}

/// Converted recording. For left-hand traffic both the states and the lane
/// layouts are mirrored so that every population follows right-hand conventions.
#[derive(Clone, Debug, PartialEq)]
pub struct FrenetRecording {
    pub location: String,
    pub frequency_hz: f64,
    pub drive_side: DriveSide,
    pub mirrored: bool,
    pub ldot_formula: LdotFormula,
    pub lanes: BTreeMap<String, DirectionLanes>,
    pub tracks: Vec<FrenetTrack>,
}

pub fn convert_recording(
    bundle: &RecordingBundle,
    lane_config: &LaneConfig,
    paths: &BTreeMap<String, ReferencePath<f64>>,
    frenet: &FrenetConfig,
    index_cell: f64,
) -> Result<FrenetRecording, ExperimentError> {
    let err = data_err("convert");
    let location = &bundle.location_id;
    let dirs = lane_config.location(location).map_err(|e| err(e.to_string()))?;
    let mirrored = bundle.drive_side == DriveSide::Left;
    let converters: BTreeMap<&String, FrenetConverter<f64>> = paths
        .iter()
        .map(|(name, p)| (name, FrenetConverter::new(p.clone(), *frenet).with_grid_index(index_cell)))
        .collect();
    let tracks = bundle
        .tracks
        .par_iter()
        .map(|t| {
            let first_lane = t.frames[0].lane_id;
            let direction = lane_config
                .direction_of(location, first_lane)
                .ok_or_else(|| err(format!("track {}: lane {first_lane} belongs to no direction", t.track_id)))?;
            let conv = converters
                .get(&direction.to_string())
                .ok_or_else(|| err(format!("no reference path for direction {direction}")))?;
            let mut states = conv.track_to_frenet(t);
            if mirrored {
                states.iter_mut().for_each(|s| *s = s.mirrored());
            }
            let on_ramp = ramp_exclusion_mask(t, location, lane_config).map_err(|e| err(e.to_string()))?;
            Ok(FrenetTrack {
                track_id: t.track_id,
                direction: direction.to_string(),
                length: t.length,
                first_frame: t.first_frame(),
                states,
                on_ramp,
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let lanes = dirs
        .iter()
        .map(|(name, d)| (name.clone(), if mirrored { d.mirrored() } else { d.clone() }))
        .collect();
    Ok(FrenetRecording {
        location: location.clone(),
        frequency_hz: bundle.frequency_hz,
        drive_side: bundle.drive_side,
        mirrored,
        ldot_formula: frenet.ldot_formula,
        lanes,
        tracks,
    })
}

/// Who is on the road at each frame, per direction.
pub struct SceneIndex<'a> {
    rec: &'a FrenetRecording,
    /// direction -> (first frame, per-frame `(track index, state index)`).
    by_frame: BTreeMap<&'a str, (Frame, Vec<Vec<(usize, usize)>>)>,
}

impl<'a> SceneIndex<'a> {
    pub fn new(rec: &'a FrenetRecording) -> Self {
        let mut by_frame: BTreeMap<&str, (Frame, Vec<Vec<(usize, usize)>>)> = BTreeMap::new();
        for dir in rec.lanes.keys() {
            let members: Vec<usize> = (0..rec.tracks.len()).filter(|&i| &rec.tracks[i].direction == dir).collect();
            let Some(first) = members.iter().map(|&i| rec.tracks[i].first_frame).min() else { continue };
            let last = members
                .iter()
                .map(|&i| rec.tracks[i].first_frame + rec.tracks[i].states.len() as u32)
                .max()
                .unwrap_or(first);
            let mut slots = vec![Vec::new(); (last - first) as usize];
            for &i in &members {
                let t = &rec.tracks[i];
                for k in 0..t.states.len() {
                    slots[(t.first_frame - first) as usize + k].push((i, k));
                }
            }
            by_frame.insert(dir.as_str(), (first, slots));
        }
        Self { rec, by_frame }
    }

    pub fn recording(&self) -> &FrenetRecording {
        self.rec
    }

    /// Validated scene of track `ti` at its `k`-th frame.
    pub fn scene(&self, ti: usize, k: usize) -> SceneFrame<f64> {
        let t = &self.rec.tracks[ti];
        let frame = t.first_frame + k as u32;
        let (first, slots) = &self.by_frame[t.direction.as_str()];
        let vehicles: Vec<SceneVehicle<f64>> = slots[(frame - first) as usize]
            .iter()
            .map(|&(i, j)| {
                let o = &self.rec.tracks[i];
                SceneVehicle { track_id: o.track_id, state: o.states[j], length: o.length, on_ramp: o.on_ramp[j] }
            })
            .collect();
        validate_scene(assign_neighbors(frame, &vehicles, t.track_id, &self.rec.lanes[&t.direction]))
    }

    /// Frames of interest: off the ramps, not gated and with a valid scene.
    pub fn interest_mask(&self, ti: usize) -> FrameMask {
        let t = &self.rec.tracks[ti];
        let mask = (0..t.states.len())
            .map(|k| !t.on_ramp[k] && !t.states[k].gated && self.scene(ti, k).is_valid())
            .collect();
        FrameMask { first_frame: t.first_frame, mask }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub tracks: usize,
    pub lc_instants: usize,
    pub lc_segments: usize,
    /// Instants for which no admissible window was found.
    pub lc_dropped: usize,
    pub lk_segments: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentOutput {
    pub instants: Vec<LcInstant>,
    pub segments: Vec<Segment>,
    pub stats: SegmentStats,
}

/// Per-track generator seed.
pub fn track_seed(seed: u64, track_id: TrackId) -> u64 {
    seed ^ u64::from(track_id)
}

/// Detects lane changes and cuts one segment per instant plus one
/// lane-keeping segment per track.
pub fn segment_recording(index: &SceneIndex, params: &SegmentParams, dataset_tag: &str, seed: u64) -> SegmentOutput {
    let rec = index.recording();
    let per_track: Vec<(Vec<LcInstant>, Vec<Segment>, usize)> = (0..rec.tracks.len())
        .into_par_iter()
        .map(|ti| {
            let t = &rec.tracks[ti];
            let frames: Vec<Frame> = t.frames().collect();
            let lateral: Vec<f64> = t.states.iter().map(|s| s.l).collect();
            let instants = detect_lc_instants(t.track_id, &frames, &lateral, &rec.lanes[&t.direction]);
            let mask = index.interest_mask(ti);
            let mut rng = ChaCha8Rng::seed_from_u64(track_seed(seed, t.track_id));
            let mut segments = Vec::new();
            let mut dropped = 0;
            for inst in &instants {
                match cut_lc_segment(inst, &instants, &mask, rec.frequency_hz, params, dataset_tag, &mut rng) {
                    Some(s) => segments.push(s),
                    None => dropped += 1,
                }
            }
            segments.extend(sample_lk_segment(t.track_id, &instants, &mask, rec.frequency_hz, params, dataset_tag, &mut rng));
            (instants, segments, dropped)
        })
        .collect();
    let mut out = SegmentOutput { instants: Vec::new(), segments: Vec::new(), stats: SegmentStats { tracks: rec.tracks.len(), ..Default::default() } };
    for (instants, segments, dropped) in per_track {
        out.stats.lc_instants += instants.len();
        out.stats.lc_dropped += dropped;
        for s in &segments {
            if s.prediction_time.is_some() {
                out.stats.lc_segments += 1;
            } else {
                out.stats.lk_segments += 1;
            }
        }
        out.instants.extend(instants);
        out.segments.extend(segments);
    }
    out
}

/// Feature samples for `segments`, in segment order.
pub fn extract_samples(
    index: &SceneIndex,
    segments: &[Segment],
    policy: &MissingNeighborPolicy,
) -> Result<Vec<Sample<f64>>, ExperimentError> {
    let err = data_err("features");
    let rec = index.recording();
    let by_id: BTreeMap<TrackId, usize> = rec.tracks.iter().enumerate().map(|(i, t)| (t.track_id, i)).collect();
    segments
        .par_iter()
        .map(|seg| {
            let &ti = by_id
                .get(&seg.track_id)
                .ok_or_else(|| err(format!("segment references unknown track {}", seg.track_id)))?;
            let t = &rec.tracks[ti];
            let rows = (seg.start_frame..=seg.end_frame)
                .map(|f| {
                    let k = f
                        .checked_sub(t.first_frame)
                        .map(|k| k as usize)
                        .filter(|&k| k < t.states.len())
                        .ok_or_else(|| err(format!("track {} has no frame {f}", t.track_id)))?;
                    build_feature_row(&index.scene(ti, k), policy).map_err(|e| err(format!("track {}: {e}", t.track_id)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let provenance = Provenance { track_id: seg.track_id, start_frame: seg.start_frame, end_frame: seg.end_frame };
            assemble_sample(&rows, seg.label, &seg.dataset_tag, provenance).map_err(|e| err(e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_points_filters_by_radius() {
        let data = [[0.0, 0.0], [10.0, 0.0]];
        let cand = [[0.5, 0.5], [5.0, 0.0], [10.0, -1.9], [30.0, 0.0]];
        assert_eq!(near_points(&cand, &data, 2.0), vec![[0.5, 0.5], [10.0, -1.9]]);
    }

    #[test]
    fn stride_caps_length() {
        let v: Vec<u32> = (0..10).collect();
        assert_eq!(stride(&v, 4), vec![0, 2, 5, 7]);
        assert_eq!(stride(&v, 20), v);
        assert_eq!(stride(&v, 5), vec![0, 2, 4, 6, 8]);
    }
}
