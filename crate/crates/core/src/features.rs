//! Fixed-shape samples: 50 time steps by 36 features.
//!
//! Row layout: `[l, s, l_dot, s_dot]` of the target, then one block of
//! `[dl, ds, l_dot, s_dot]` per neighbor slot in the order
//! `p, f, lp, la, lf, rp, ra, rf`. `dl` and `ds` are neighbor minus target;
//! the velocities are the neighbor's own.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Frame, TrackId};
use crate::scalar::{CompensatedSum, Scalar};
use crate::scene::{Longitudinal, SceneFrame, Slot};
use crate::segment::Label;

pub const N_STEPS: usize = 50;
pub const N_FEATURES: usize = 36;

/// Column names in row order.
pub const COLUMN_NAMES: [&str; N_FEATURES] = [
    "l", "s", "l_dot", "s_dot",
    "dl_p", "ds_p", "l_dot_p", "s_dot_p",
    "dl_f", "ds_f", "l_dot_f", "s_dot_f",
    "dl_lp", "ds_lp", "l_dot_lp", "s_dot_lp",
    "dl_la", "ds_la", "l_dot_la", "s_dot_la",
    "dl_lf", "ds_lf", "l_dot_lf", "s_dot_lf",
    "dl_rp", "ds_rp", "l_dot_rp", "s_dot_rp",
    "dl_ra", "ds_ra", "l_dot_ra", "s_dot_ra",
    "dl_rf", "ds_rf", "l_dot_rf", "s_dot_rf",
];

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("scene at frame {0} is not valid")]
    InvalidScene(Frame),
    #[error("need at least 2 rows to resample, got {0}")]
    TooShort(usize),
    #[error("empty training set")]
    EmptySet,
    #[error("dataset {tag}: class {label} has {available} samples, {requested} requested")]
    InsufficientClass {
        tag: String,
        label: Label,
        available: usize,
        requested: usize,
    },
    #[error("matrix has {0} values, expected a multiple of {N_FEATURES}")]
    BadShape(usize),
}

/// Values written for an empty neighbor slot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingNeighborPolicy {
    /// Longitudinal gap for an absent vehicle, signed by slot (following slots negative).
    pub far_distance: f64,
    /// Longitudinal gaps of present neighbors are clipped to `[-clip, clip]`.
    pub clip: f64,
}

impl Default for MissingNeighborPolicy {
    fn default() -> Self {
        Self { far_distance: 200.0, clip: 200.0 }
    }
}

pub type FeatureRow<T> = [T; N_FEATURES];

/// Builds one feature row from a valid scene.
pub fn build_feature_row<T: Scalar>(
    scene: &SceneFrame<T>,
    policy: &MissingNeighborPolicy,
) -> Result<FeatureRow<T>, FeatureError> {
    if !scene.is_valid() {
        return Err(FeatureError::InvalidScene(scene.frame));
    }
    let t = &scene.target.state;
    let clip = T::lit(policy.clip);
    let far = T::lit(policy.far_distance);
    let mut row = [T::zero(); N_FEATURES];
    row[0] = t.l;
    row[1] = t.s;
    row[2] = t.l_dot;
    row[3] = t.s_dot;
    for slot in Slot::ALL {
        let base = 4 + 4 * slot.index();
        match scene.neighbor(slot) {
            Some(n) => {
                row[base] = n.state.l - t.l;
                row[base + 1] = (n.state.s - t.s).max(-clip).min(clip);
                row[base + 2] = n.state.l_dot;
                row[base + 3] = n.state.s_dot;
            }
            None => {
                row[base] = scene.lane_offset(slot.side());
                row[base + 1] = match slot.longitudinal() {
                    Longitudinal::Following => -far,
                    _ => far,
                };
                row[base + 2] = t.l_dot;
                row[base + 3] = t.s_dot;
            }
        }
    }
    Ok(row)
}

/// Linear interpolation of each column from `n_in` to `n_out` rows; first
/// and last rows are copied exactly.
pub fn resample_segment<T: Scalar>(rows: &[FeatureRow<T>], n_out: usize) -> Result<Vec<FeatureRow<T>>, FeatureError> {
    let n_in = rows.len();
    if n_in < 2 || n_out < 2 {
        return Err(FeatureError::TooShort(n_in.min(n_out)));
    }
    let den = n_out - 1;
    Ok((0..n_out)
        .map(|k| {
            let num = k * (n_in - 1);
            let i = num / den;
            let rem = num % den;
            if rem == 0 {
                return rows[i];
            }
            let frac = T::lit(rem as f64 / den as f64);
            let mut out = [T::zero(); N_FEATURES];
            for c in 0..N_FEATURES {
                out[c] = rows[i][c] + (rows[i + 1][c] - rows[i][c]) * frac;
            }
            out
        })
        .collect())
}

/// Subtracts the temporal mean of columns 0 (`l`) and 1 (`s`).
pub fn center_positions<T: Scalar>(rows: &mut [FeatureRow<T>]) {
    if rows.is_empty() {
        return;
    }
    let n = rows.len() as f64;
    for c in 0..2 {
        let mean: CompensatedSum = rows.iter().map(|r| r[c].as_f64()).collect();
        let mean = T::lit(mean.value() / n);
        for r in rows.iter_mut() {
            r[c] -= mean;
        }
    }
}

/// Column permutation and sign flips implementing the lateral mirror on a row.
pub fn mirror_row<T: Scalar>(row: &FeatureRow<T>) -> FeatureRow<T> {
    let mut out = *row;
    out[0] = -row[0];
    out[2] = -row[2];
    for slot in Slot::ALL {
        let src = 4 + 4 * slot.index();
        let dst = 4 + 4 * slot.mirrored().index();
        out[dst] = -row[src];
        out[dst + 1] = row[src + 1];
        out[dst + 2] = -row[src + 2];
        out[dst + 3] = row[src + 3];
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub track_id: TrackId,
    pub start_frame: Frame,
    pub end_frame: Frame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// Row-major `N_STEPS x N_FEATURES`.
    pub rows: Vec<FeatureRow<T>>,
    pub label: Label,
    pub dataset_tag: String,
    pub provenance: Provenance,
}

impl<T: Scalar> Sample<T> {
    /// Stable identifier `tag:track:start-end`.
    pub fn id(&self) -> String {
        format!(
            "{}:{}:{}-{}",
            self.dataset_tag, self.provenance.track_id, self.provenance.start_frame, self.provenance.end_frame
        )
    }

    pub fn mirrored(&self) -> Self {
        Self {
            rows: self.rows.iter().map(mirror_row).collect(),
            label: self.label.mirrored(),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(|v| v.is_finite()))
    }
}

/// Per-column z-score parameters fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation over every row of every
    /// sample. Zero-variance columns get `std = 1`.
    pub fn fit<T: Scalar>(samples: &[Sample<T>]) -> Result<Self, FeatureError> {
        let count: usize = samples.iter().map(|s| s.rows.len()).sum();
        if count == 0 {
            return Err(FeatureError::EmptySet);
        }
        let n = count as f64;
        let mut mean = vec![0.0; N_FEATURES];
        let mut std = vec![0.0; N_FEATURES];
        for c in 0..N_FEATURES {
            let sum: CompensatedSum = samples
                .iter()
                .flat_map(|s| s.rows.iter().map(move |r| r[c].as_f64()))
                .collect();
            let mu = sum.value() / n;
            let sq: CompensatedSum = samples
                .iter()
                .flat_map(|s| s.rows.iter().map(move |r| (r[c].as_f64() - mu).powi(2)))
                .collect();
            let sd = (sq.value() / n).sqrt();
            mean[c] = mu;
            std[c] = if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                warn!("feature column {} has zero variance; using std = 1", COLUMN_NAMES[c]);
                1.0
            };
        }
        Ok(Self { mean, std })
    }

    pub fn apply<T: Scalar>(&self, sample: &Sample<T>) -> Sample<T> {
        let mut out = sample.clone();
        for r in &mut out.rows {
            for c in 0..N_FEATURES {
                r[c] = T::lit((r[c].as_f64() - self.mean[c]) / self.std[c]);
            }
        }
        out
    }
}

/// Draws exactly `per_class_lc` LLC, `per_class_lc` RLC and `2 * per_class_lc`
/// LK samples per dataset tag, without replacement. Output is grouped by tag
/// then label, preserving input order within a group.
pub fn balance_dataset<T: Scalar, R: Rng + ?Sized>(
    samples: &[Sample<T>],
    per_class_lc: usize,
    rng: &mut R,
) -> Result<Vec<Sample<T>>, FeatureError> {
    let mut groups: BTreeMap<(&str, Label), Vec<usize>> = BTreeMap::new();
    let tags: std::collections::BTreeSet<&str> = samples.iter().map(|s| s.dataset_tag.as_str()).collect();
    for tag in &tags {
        for label in Label::ALL {
            groups.insert((tag, label), Vec::new());
        }
    }
    for (i, s) in samples.iter().enumerate() {
        groups.get_mut(&(s.dataset_tag.as_str(), s.label)).unwrap().push(i);
    }
    let mut out = Vec::new();
    for ((tag, label), idx) in &groups {
        let requested = if *label == Label::Lk { 2 * per_class_lc } else { per_class_lc };
        if idx.len() < requested {
            return Err(FeatureError::InsufficientClass {
                tag: tag.to_string(),
                label: *label,
                available: idx.len(),
                requested,
            });
        }
        let mut picked: Vec<usize> = sample_indices(rng, idx.len(), requested)
            .into_iter()
            .map(|k| idx[k])
            .collect();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| samples[i].clone()));
    }
    Ok(out)
}

/// Assembles a sample from per-frame rows of one segment: resampled to
/// [`N_STEPS`] rows and position-centered.
pub fn assemble_sample<T: Scalar>(
    rows: &[FeatureRow<T>],
    label: Label,
    dataset_tag: &str,
    provenance: Provenance,
) -> Result<Sample<T>, FeatureError> {
    let mut rows = resample_segment(rows, N_STEPS)?;
    center_positions(&mut rows);
    Ok(Sample {
        rows,
        label,
        dataset_tag: dataset_tag.to_string(),
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frenet::FrenetState;
    use crate::scene::{Neighbor, SceneVehicle};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(s: f64, l: f64, s_dot: f64, l_dot: f64) -> FrenetState<f64> {
        FrenetState { s, l, s_dot, l_dot, ref_index: 0, gated: false }
    }

    fn scene(neighbors: &[(Slot, FrenetState<f64>)]) -> SceneFrame<f64> {
        let mut slots = [None; 8];
        for (i, (slot, st)) in neighbors.iter().enumerate() {
            slots[slot.index()] = Some(Neighbor { track_id: i as u32 + 10, state: *st });
        }
        SceneFrame {
            frame: 3,
            target: SceneVehicle { track_id: 1, state: state(100.0, -5.75, 30.0, 0.2), length: 4.5, on_ramp: false },
            neighbors: slots,
            alongside_counts: [0, 0],
            slot_lane_offsets: [3.75, 0.0, -3.75],
            exclusion: None,
        }
    }

    #[test]
    fn column_names_follow_slot_order() {
        for slot in Slot::ALL {
            assert_eq!(COLUMN_NAMES[4 + 4 * slot.index()], format!("dl_{}", slot.name()));
        }
    }

    #[test]
    fn relative_distance_arithmetic() {
        let row = build_feature_row(&scene(&[(Slot::Lp, state(130.0, -2.0, 32.0, 0.0))]), &MissingNeighborPolicy::default())
            .unwrap();
        assert_eq!(row[13], 30.0);
        assert_eq!(row[12], 3.75);
        assert_eq!((row[14], row[15]), (0.0, 32.0));
        assert_eq!(&row[..4], &[-5.75, 100.0, 0.2, 30.0]);
    }

    #[test]
    fn empty_scene_uses_policy() {
        let row = build_feature_row(&scene(&[]), &MissingNeighborPolicy::default()).unwrap();
        let block = |s: Slot| &row[4 + 4 * s.index()..8 + 4 * s.index()];
        assert_eq!(block(Slot::P), &[0.0, 200.0, 0.2, 30.0]);
        assert_eq!(block(Slot::F), &[0.0, -200.0, 0.2, 30.0]);
        assert_eq!(block(Slot::Lf), &[3.75, -200.0, 0.2, 30.0]);
        assert_eq!(block(Slot::Rp), &[-3.75, 200.0, 0.2, 30.0]);
    }

    #[test]
    fn longitudinal_gap_is_clipped() {
        let row = build_feature_row(&scene(&[(Slot::F, state(-400.0, -5.75, 30.0, 0.0))]), &MissingNeighborPolicy::default())
            .unwrap();
        assert_eq!(row[9], -200.0);
    }

    #[test]
    fn invalid_scene_is_rejected() {
        let mut sc = scene(&[]);
        sc.exclusion = Some(crate::scene::ExclusionReason::DoubleAlongside);
        assert_eq!(build_feature_row(&sc, &MissingNeighborPolicy::default()), Err(FeatureError::InvalidScene(3)));
    }

    fn ramp_rows(n: usize) -> Vec<FeatureRow<f64>> {
        (0..n)
            .map(|i| {
                let mut r = [0.0; N_FEATURES];
                for (c, v) in r.iter_mut().enumerate() {
                    *v = c as f64 + 0.5 * i as f64;
                }
                r
            })
            .collect()
    }

    #[test]
    fn resampling_sixty_to_fifty_keeps_lines() {
        let rows = ramp_rows(60);
        let out = resample_segment(&rows, 50).unwrap();
        assert_eq!(out.len(), 50);
        assert_eq!(out[0], rows[0]);
        assert_eq!(out[49], rows[59]);
        for (k, r) in out.iter().enumerate() {
            let t = k as f64 * 59.0 / 49.0;
            for (c, v) in r.iter().enumerate() {
                assert!((v - (c as f64 + 0.5 * t)).abs() < 1e-12);
            }
        }
        assert_eq!(resample_segment(&rows[..50], 50).unwrap(), rows[..50].to_vec());
        assert_eq!(resample_segment(&rows[..1], 50), Err(FeatureError::TooShort(1)));
    }

    #[test]
    fn centering_examples() {
        let mut rows = vec![[0.0; N_FEATURES]; 50];
        for (i, r) in rows.iter_mut().enumerate() {
            r[0] = if i < 25 { -3.0 } else { -1.0 };
            r[1] = 500.0;
            r[7] = i as f64;
        }
        let before = rows.clone();
        center_positions(&mut rows);
        assert!(rows.iter().all(|r| r[1] == 0.0));
        assert!(rows[..25].iter().all(|r| r[0] == -1.0) && rows[25..].iter().all(|r| r[0] == 1.0));
        for (a, b) in rows.iter().zip(&before) {
            assert_eq!(&a[2..], &b[2..]);
        }
    }

    fn sample(tag: &str, label: Label, k: u32) -> Sample<f64> {
        let mut rows = ramp_rows(N_STEPS);
        rows[0][5] = k as f64;
        Sample {
            rows,
            label,
            dataset_tag: tag.into(),
            provenance: Provenance { track_id: k, start_frame: 0, end_frame: 49 },
        }
    }

    #[test]
    fn normalizer_standardizes_training_set() {
        let samples: Vec<Sample<f64>> = (0..20).map(|k| sample("a", Label::Lk, k)).collect();
        let norm = Normalizer::fit(&samples).unwrap();
        let out: Vec<Sample<f64>> = samples.iter().map(|s| norm.apply(s)).collect();
        let again = Normalizer::fit(&out).unwrap();
        for c in 0..N_FEATURES {
            assert!(again.mean[c].abs() < 1e-9);
            assert!((again.std[c] - 1.0).abs() < 1e-9);
        }
        let json = serde_json::to_string(&norm).unwrap();
        let back: Normalizer = serde_json::from_str(&json).unwrap();
        assert_eq!(back.apply(&samples[3]), norm.apply(&samples[3]));
    }

    #[test]
    fn constant_column_gets_unit_std() {
        let mut s = sample("a", Label::Lk, 0);
        for r in &mut s.rows {
            r[7] = 4.0;
        }
        let norm = Normalizer::fit(std::slice::from_ref(&s)).unwrap();
        assert_eq!(norm.std[7], 1.0);
        assert!(norm.apply(&s).rows.iter().all(|r| r[7] == 0.0));
        assert_eq!(Normalizer::fit::<f64>(&[]), Err(FeatureError::EmptySet));
    }

    #[test]
    fn balancing_counts() {
        let mut all = Vec::new();
        for tag in ["a", "b"] {
            for k in 0..30 {
                all.push(sample(tag, Label::Lk, k));
                all.push(sample(tag, Label::Llc, 100 + k));
                all.push(sample(tag, Label::Rlc, 200 + k));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = balance_dataset(&all, 10, &mut rng).unwrap();
        for tag in ["a", "b"] {
            let count = |l: Label| out.iter().filter(|s| s.dataset_tag == tag && s.label == l).count();
            assert_eq!((count(Label::Lk), count(Label::Llc), count(Label::Rlc)), (20, 10, 10));
        }
        let again = balance_dataset(&all, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out, again);
        let err = balance_dataset(&all, 20, &mut rng).unwrap_err();
        assert!(matches!(err, FeatureError::InsufficientClass { available: 30, requested: 40, .. }));
    }

    #[test]
    fn balancing_identity_selection() {
        let all = vec![sample("a", Label::Lk, 0), sample("a", Label::Lk, 1), sample("a", Label::Llc, 2), sample("a", Label::Rlc, 3)];
        let out = balance_dataset(&all, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, all);
    }

    #[test]
    fn mirroring_commutes_with_row_construction() {
        let sc = scene(&[
            (Slot::Lp, state(130.0, -2.0, 32.0, 0.1)),
            (Slot::Ra, state(101.0, -9.5, 29.0, -0.3)),
            (Slot::P, state(150.0, -5.7, 31.0, 0.0)),
        ]);
        let policy = MissingNeighborPolicy::default();
        let direct = mirror_row(&build_feature_row(&sc, &policy).unwrap());
        let via_scene = build_feature_row(&sc.mirrored(), &policy).unwrap();
        assert_eq!(direct, via_scene);
        let s = sample("a", Label::Rlc, 1);
        let m = s.mirrored();
        assert_eq!(m.label, Label::Llc);
        assert_eq!(m.mirrored(), s);
    }
}
