//! Loading of levelX-style recordings (`tracks.csv` + `recordingMeta.csv`).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lanes::{LaneConfig, LaneId};

pub type TrackId = u32;
pub type Frame = u32;

pub const TRACK_COLUMNS: [&str; 12] = [
    "recordingId",
    "trackId",
    "frame",
    "xCenter",
    "yCenter",
    "xVelocity",
    "yVelocity",
    "laneId",
    "laneletId",
    "width",
    "length",
    "class",
];

pub const META_COLUMNS: [&str; 4] = ["recordingId", "locationId", "frameRate", "driveSide"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("row {row}: cannot parse {column} value {value:?}")]
    BadValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("track {0}: frames are not strictly increasing")]
    NonMonotoneFrames(TrackId),
    #[error("track {track_id}: frame gap after frame {after}")]
    FrameGap { track_id: TrackId, after: Frame },
    #[error("unknown lane id {0}")]
    UnknownLaneId(LaneId),
    #[error("track {track_id}: {reason}")]
    InvalidTrack { track_id: TrackId, reason: String },
    #[error("recording meta: {0}")]
    InvalidMeta(String),
    #[error("unknown location {0}")]
    UnknownLocation(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DriveSide {
    Right,
    Left,
}

impl FromStr for DriveSide {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Right" | "right" => Ok(DriveSide::Right),
            "Left" | "left" => Ok(DriveSide::Left),
            other => Err(format!("unknown drive side {other:?}")),
        }
    }
}

impl std::fmt::Display for DriveSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DriveSide::Right => "Right",
            DriveSide::Left => "Left",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleClass {
    Car,
    Truck,
    Other,
}

impl VehicleClass {
    fn parse(s: &str) -> Self {
        match s.to_ascii_lowercase().as_str() {
            "car" => VehicleClass::Car,
            "truck" | "bus" | "van" => VehicleClass::Truck,
            _ => VehicleClass::Other,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            VehicleClass::Car => "car",
            VehicleClass::Truck => "truck",
            VehicleClass::Other => "other",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackPoint {
    pub frame: Frame,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub lane_id: LaneId,
    /// Lanelets the vehicle footprint touches; may be empty.
    pub lanelet_ids: Vec<LaneId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub track_id: TrackId,
    pub frames: Vec<TrackPoint>,
    pub width: f64,
    pub length: f64,
    pub vehicle_class: VehicleClass,
}

impl Track {
    pub fn first_frame(&self) -> Frame {
        self.frames[0].frame
    }

    pub fn last_frame(&self) -> Frame {
        self.frames[self.frames.len() - 1].frame
    }

    pub fn point_at(&self, frame: Frame) -> Option<&TrackPoint> {
        let idx = frame.checked_sub(self.first_frame())? as usize;
        self.frames.get(idx)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let invalid = |reason: &str| IngestError::InvalidTrack {
            track_id: self.track_id,
            reason: reason.to_string(),
        };
        if self.frames.is_empty() {
            return Err(invalid("no frames"));
        }
        if !(self.width > 0.0 && self.length > 0.0) {
            return Err(invalid("non-positive extents"));
        }
        for w in self.frames.windows(2) {
            if w[1].frame <= w[0].frame {
                return Err(IngestError::NonMonotoneFrames(self.track_id));
            }
            if w[1].frame != w[0].frame + 1 {
                return Err(IngestError::FrameGap {
                    track_id: self.track_id,
                    after: w[0].frame,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordingBundle {
    pub recording_id: u32,
    pub location_id: String,
    pub frequency_hz: f64,
    pub drive_side: DriveSide,
    /// Sorted by track id.
    pub tracks: Vec<Track>,
}

impl RecordingBundle {
    pub fn track(&self, id: TrackId) -> Option<&Track> {
        self.tracks
            .binary_search_by_key(&id, |t| t.track_id)
            .ok()
            .map(|i| &self.tracks[i])
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn column_indices(
    headers: &csv::StringRecord,
    wanted: &[&str],
) -> Result<Vec<usize>, IngestError> {
    wanted
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
        })
        .collect()
}

fn parse_field<T: FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    column: &str,
    row: usize,
) -> Result<T, IngestError> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| IngestError::BadValue {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })
}

fn parse_finite(
    record: &csv::StringRecord,
    idx: usize,
    column: &str,
    row: usize,
) -> Result<f64, IngestError> {
    let v: f64 = parse_field(record, idx, column, row)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(IngestError::BadValue {
            row,
            column: column.to_string(),
            value: record.get(idx).unwrap_or("").to_string(),
        })
    }
}

fn parse_lanelets(raw: &str, row: usize) -> Result<Vec<LaneId>, IngestError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(';')
        .map(|part| {
            part.trim().parse().map_err(|_| IngestError::BadValue {
                row,
                column: "laneletId".into(),
                value: raw.to_string(),
            })
        })
        .collect()
}

struct Meta {
    recording_id: u32,
    location_id: String,
    frequency_hz: f64,
    drive_side: DriveSide,
}

fn read_meta(meta_path: &Path) -> Result<Meta, IngestError> {
    let file = File::open(meta_path).map_err(io_err(meta_path))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let idx = column_indices(rdr.headers()?, &META_COLUMNS)?;
    let mut records = rdr.records();
    let rec = records
        .next()
        .ok_or_else(|| IngestError::InvalidMeta("no data row".into()))??;
    let frequency_hz = parse_finite(&rec, idx[2], "frameRate", 1)?;
    if frequency_hz <= 0.0 {
        return Err(IngestError::InvalidMeta("frameRate must be positive".into()));
    }
    let drive_side = rec.get(idx[3]).unwrap_or("").parse().map_err(|_| {
        IngestError::BadValue {
            row: 1,
            column: "driveSide".into(),
            value: rec.get(idx[3]).unwrap_or("").to_string(),
        }
    })?;
    Ok(Meta {
        recording_id: parse_field(&rec, idx[0], "recordingId", 1)?,
        location_id: rec.get(idx[1]).unwrap_or("").to_string(),
        frequency_hz,
        drive_side,
    })
}

/// Parses a recording and checks every lane id against `lane_config`.
pub fn load_recording(
    tracks_path: impl AsRef<Path>,
    meta_path: impl AsRef<Path>,
    lane_config: &LaneConfig,
) -> Result<RecordingBundle, IngestError> {
    let tracks_path = tracks_path.as_ref();
    let meta = read_meta(meta_path.as_ref())?;
    if !lane_config.locations.contains_key(&meta.location_id) {
        return Err(IngestError::UnknownLocation(meta.location_id));
    }

    let file = File::open(tracks_path).map_err(io_err(tracks_path))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let idx = column_indices(rdr.headers()?, &TRACK_COLUMNS)?;

    let mut tracks: BTreeMap<TrackId, Track> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let recording_id: u32 = parse_field(&rec, idx[0], "recordingId", row)?;
        if recording_id != meta.recording_id {
            return Err(IngestError::BadValue {
                row,
                column: "recordingId".into(),
                value: recording_id.to_string(),
            });
        }
        let track_id: TrackId = parse_field(&rec, idx[1], "trackId", row)?;
        let lane_id: LaneId = parse_field(&rec, idx[7], "laneId", row)?;
        let lanelet_ids = parse_lanelets(rec.get(idx[8]).unwrap_or(""), row)?;
        for id in std::iter::once(&lane_id).chain(lanelet_ids.iter()) {
            if lane_config.kind_of(&meta.location_id, *id).is_none() {
                return Err(IngestError::UnknownLaneId(*id));
            }
        }
        let point = TrackPoint {
            frame: parse_field(&rec, idx[2], "frame", row)?,
            x: parse_finite(&rec, idx[3], "xCenter", row)?,
            y: parse_finite(&rec, idx[4], "yCenter", row)?,
            vx: parse_finite(&rec, idx[5], "xVelocity", row)?,
            vy: parse_finite(&rec, idx[6], "yVelocity", row)?,
            lane_id,
            lanelet_ids,
        };
        let width = parse_finite(&rec, idx[9], "width", row)?;
        let length = parse_finite(&rec, idx[10], "length", row)?;
        let class = VehicleClass::parse(rec.get(idx[11]).unwrap_or(""));
        tracks
            .entry(track_id)
            .or_insert_with(|| Track {
                track_id,
                frames: Vec::new(),
                width,
                length,
                vehicle_class: class,
            })
            .frames
            .push(point);
    }

    let tracks: Vec<Track> = tracks.into_values().collect();
    for t in &tracks {
        t.validate()?;
    }
    Ok(RecordingBundle {
        recording_id: meta.recording_id,
        location_id: meta.location_id,
        frequency_hz: meta.frequency_hz,
        drive_side: meta.drive_side,
        tracks,
    })
}

/// Writes `tracks.csv` and `recordingMeta.csv`. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_recording(
    bundle: &RecordingBundle,
    tracks_path: impl AsRef<Path>,
    meta_path: impl AsRef<Path>,
) -> Result<(), IngestError> {
    let tracks_path = tracks_path.as_ref();
    let meta_path = meta_path.as_ref();
    let mut meta = BufWriter::new(File::create(meta_path).map_err(io_err(meta_path))?);
    writeln!(meta, "{}", META_COLUMNS.join(",")).map_err(io_err(meta_path))?;
    writeln!(
        meta,
        "{},{},{},{}",
        bundle.recording_id, bundle.location_id, bundle.frequency_hz, bundle.drive_side
    )
    .map_err(io_err(meta_path))?;
    meta.flush().map_err(io_err(meta_path))?;

    let mut out = BufWriter::new(File::create(tracks_path).map_err(io_err(tracks_path))?);
    let mut body = String::with_capacity(1 << 16);
    body.push_str(&TRACK_COLUMNS.join(","));
    body.push('\n');
    for t in &bundle.tracks {
        for p in &t.frames {
            let lanelets = p
                .lanelet_ids
                .iter()
                .map(|id| id.to_string())
                .collect::<Vec<_>>()
                .join(";");
            use std::fmt::Write as _;
            let _ = writeln!(
                body,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                bundle.recording_id,
                t.track_id,
                p.frame,
                p.x,
                p.y,
                p.vx,
                p.vy,
                p.lane_id,
                lanelets,
                t.width,
                t.length,
                t.vehicle_class.as_str()
            );
            if body.len() > 1 << 20 {
                out.write_all(body.as_bytes()).map_err(io_err(tracks_path))?;
                body.clear();
            }
        }
    }
    out.write_all(body.as_bytes()).map_err(io_err(tracks_path))?;
    out.flush().map_err(io_err(tracks_path))?;
    Ok(())
}

/// Per-frame ramp exclusion: `true` where the vehicle occupies, fully or
/// partially, an on- or off-ramp lane or lanelet.
pub fn ramp_exclusion_mask(
    track: &Track,
    location_id: &str,
    lane_config: &LaneConfig,
) -> Result<Vec<bool>, IngestError> {
    track
        .frames
        .iter()
        .map(|p| {
            let mut excluded = false;
            for id in std::iter::once(&p.lane_id).chain(p.lanelet_ids.iter()) {
                let kind = lane_config
                    .kind_of(location_id, *id)
                    .ok_or(IngestError::UnknownLaneId(*id))?;
                excluded |= kind.is_ramp();
            }
            Ok(excluded)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lanes::{DirectionLanes, LaneKind, LaneSpec};

    fn config() -> LaneConfig {
        let dir = DirectionLanes {
            lanes: vec![
                LaneSpec { id: 3, center: -4.0, kind: LaneKind::Mainline },
                LaneSpec { id: 2, center: -7.75, kind: LaneKind::Mainline },
                LaneSpec { id: 9, center: -11.5, kind: LaneKind::OnRamp },
            ],
            svm_lanes: vec![3, 5],
            lanelets: [(90, LaneKind::OffRamp)].into_iter().collect(),
            bbox: None,
        };
        let mut cfg = LaneConfig::default();
        cfg.locations
            .insert("1".into(), [("east".to_string(), dir)].into_iter().collect());
        cfg
    }

    fn track(lanes: &[(LaneId, Vec<LaneId>)]) -> Track {
        Track {
            track_id: 1,
            frames: lanes
                .iter()
                .enumerate()
                .map(|(i, (lane, lanelets))| TrackPoint {
                    frame: i as Frame,
                    x: i as f64,
                    y: -4.0,
                    vx: 25.0,
                    vy: 0.0,
                    lane_id: *lane,
                    lanelet_ids: lanelets.clone(),
                })
                .collect(),
            width: 1.8,
            length: 4.5,
            vehicle_class: VehicleClass::Car,
        }
    }

    fn write_files(dir: &Path, header: &str, rows: &[String]) -> (std::path::PathBuf, std::path::PathBuf) {
        let tracks = dir.join("tracks.csv");
        let meta = dir.join("recordingMeta.csv");
        let mut f = File::create(&tracks).unwrap();
        writeln!(f, "{header}").unwrap();
        for r in rows {
            writeln!(f, "{r}").unwrap();
        }
        std::fs::write(&meta, "recordingId,locationId,frameRate,driveSide\n7,1,25,Right\n").unwrap();
        (tracks, meta)
    }

    #[test]
    fn loads_two_tracks_of_one_hundred_frames() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for id in [4u32, 2] {
            for f in 0..100 {
                rows.push(format!("7,{id},{f},{},{},30.0,0.0,3,3,1.8,4.5,car", f as f64 * 1.2, -4.0));
            }
        }
        let (t, m) = write_files(dir.path(), &TRACK_COLUMNS.join(","), &rows);
        let bundle = load_recording(t, m, &config()).unwrap();
        assert_eq!(bundle.tracks.len(), 2);
        assert_eq!(bundle.tracks[0].track_id, 2);
        assert!(bundle.tracks.iter().all(|t| t.frames.len() == 100));
        assert_eq!(bundle.frequency_hz, 25.0);
    }

    #[test]
    fn missing_velocity_column_is_reported_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let header = TRACK_COLUMNS
            .iter()
            .filter(|c| **c != "xVelocity")
            .copied()
            .collect::<Vec<_>>()
            .join(",");
        let (t, m) = write_files(dir.path(), &header, &["7,1,0,0,0,0,3,3,1.8,4.5,car".into()]);
        match load_recording(t, m, &config()) {
            Err(IngestError::MissingColumn(c)) => assert_eq!(c, "xVelocity"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unparseable_numbers_and_unknown_lanes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (t, m) = write_files(
            dir.path(),
            &TRACK_COLUMNS.join(","),
            &["7,1,0,abc,0,0,0,3,3,1.8,4.5,car".into()],
        );
        assert!(matches!(
            load_recording(t, m, &config()),
            Err(IngestError::BadValue { ref column, .. }) if column == "xCenter"
        ));
        let (t, m) = write_files(
            dir.path(),
            &TRACK_COLUMNS.join(","),
            &["7,1,0,0,0,0,0,42,,1.8,4.5,car".into()],
        );
        assert!(matches!(load_recording(t, m, &config()), Err(IngestError::UnknownLaneId(42))));
    }

    #[test]
    fn frame_order_and_gaps_are_hard_errors() {
        let dir = tempfile::tempdir().unwrap();
        let row = |f: u32| format!("7,1,{f},0,0,0,0,3,3,1.8,4.5,car");
        let (t, m) = write_files(dir.path(), &TRACK_COLUMNS.join(","), &[row(0), row(2)]);
        assert!(matches!(
            load_recording(t, m, &config()),
            Err(IngestError::FrameGap { track_id: 1, after: 0 })
        ));
        let (t, m) = write_files(dir.path(), &TRACK_COLUMNS.join(","), &[row(3), row(2)]);
        assert!(matches!(load_recording(t, m, &config()), Err(IngestError::NonMonotoneFrames(1))));
    }

    #[test]
    fn mainline_track_has_empty_mask() {
        let t = track(&vec![(3, vec![3]); 20]);
        let mask = ramp_exclusion_mask(&t, "1", &config()).unwrap();
        assert!(mask.iter().all(|m| !m));
    }

    #[test]
    fn on_ramp_prefix_is_masked_exactly() {
        let mut lanes = vec![(9, vec![9]); 50];
        lanes.extend(vec![(2, vec![2]); 30]);
        let mask = ramp_exclusion_mask(&track(&lanes), "1", &config()).unwrap();
        assert!(mask[..50].iter().all(|m| *m));
        assert!(mask[50..].iter().all(|m| !m));
    }

    #[test]
    fn partial_ramp_occupancy_excludes_frame() {
        let mut lanes = vec![(2, vec![2]); 20];
        lanes[10] = (2, vec![2, 9]);
        lanes[12] = (2, vec![2, 90]);
        let mask = ramp_exclusion_mask(&track(&lanes), "1", &config()).unwrap();
        let hits: Vec<usize> = (0..20).filter(|&i| mask[i]).collect();
        assert_eq!(hits, vec![10, 12]);
    }

    #[test]
    fn unknown_lanelet_in_mask_is_an_error() {
        let t = track(&[(2, vec![77])]);
        assert!(matches!(
            ramp_exclusion_mask(&t, "1", &config()),
            Err(IngestError::UnknownLaneId(77))
        ));
    }
}
