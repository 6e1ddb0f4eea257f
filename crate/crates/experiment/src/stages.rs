//! On-disk stages. Each stage reads the artifacts of its predecessors under
//! the output directory, writes its own into a stage directory and records a
//! `manifest.json` with the config hash, the seed and the digests of every
//! input and output.
//!
//! Layout below the output directory:
//!
//! ```text
//! <tag>/data        synthetic recording (synth)
//! <tag>/ingest      recording summary
//! <tag>/refpath     refpath_<direction>.csv, svm.json
//! <tag>/convert     frenet.csv, frenet_meta.json
//! <tag>/segment     instants.csv, segments.csv, stats.json
//! <tag>/features    samples.bin, balanced.bin
//! train/splits/seed<k>/<tag>.bin               test split per population
//! train/<regime>/seed<k>/model.ckpt            plus history.json, audit.json
//! evaluate/<regime>/seed<k>/<tag>.csv          per-sample predictions
//! evaluate/evaluation.json
//! report/
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lcpred_core::dataset::{load_samples, save_samples, DatasetInfo};
use lcpred_core::features::balance_dataset;
use lcpred_core::frenet::{FrenetState, LdotFormula};
use lcpred_core::ingest::load_recording;
use lcpred_core::refpath::ReferencePath;
use lcpred_core::segment::{parse_segments_csv, segments_csv};
use lcpred_core::svm::SvmModel;
use lcpred_core::synth::{
    generate_population, ground_truth_csv, parse_ground_truth_csv, write_population, LANE_CONFIG_FILE, META_FILE,
    TRACKS_FILE,
};
use lcpred_core::{DirectionLanes, DriveSide, Frame, LaneConfig, RecordingBundle, Sample, TrackId};
use lcpred_model::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use lcpred_model::ModelParams;

use crate::config::PipelineConfig;
use crate::pipeline::{
    convert_recording, extract_samples, fit_reference_paths, segment_recording, FrenetRecording, FrenetTrack,
    SceneIndex, SegmentStats,
};
use crate::protocol::{
    evaluate_run, mix_seed, prepare_runs, regimes, tag_hash, train_run, AccuracyMatrix, CellResult, PhaseAudit,
};
use crate::report::{emit_report, InputRef, Report};
use crate::ExperimentError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SVM_FILE: &str = "svm.json";
pub const FRENET_FILE: &str = "frenet.csv";
pub const FRENET_META_FILE: &str = "frenet_meta.json";
pub const INSTANTS_FILE: &str = "instants.csv";
pub const SEGMENTS_FILE: &str = "segments.csv";
pub const STATS_FILE: &str = "stats.json";
pub const SAMPLES_FILE: &str = "samples.bin";
pub const BALANCED_FILE: &str = "balanced.bin";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const AUDIT_FILE: &str = "audit.json";
pub const EVALUATION_FILE: &str = "evaluation.json";

/// Stage names in execution order.
pub const STAGES: [&str; 10] =
    ["synth", "ingest", "refpath", "convert", "segment", "features", "train", "evaluate", "report", "run-all"];

/// Environment variable whose value is stored as the git revision in checkpoints.
pub const GIT_REVISION_ENV: &str = "LCPRED_GIT_REVISION";

pub fn refpath_file(direction: &str) -> String {
    format!("refpath_{direction}.csv")
}

pub fn sha256_file(path: &Path) -> Result<String, ExperimentError> {
    let bytes = fs::read(path).map_err(|e| ExperimentError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub population: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<InputRef>,
    pub outputs: Vec<InputRef>,
}

/// Runs `f` on a pool of `threads` workers; 0 uses every core.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R, ExperimentError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn data_err(stage: &'static str) -> impl Fn(String) -> ExperimentError {
    move |message| ExperimentError::Data { stage, message }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    fs::write(path, body).map_err(|e| ExperimentError::io(path, e))
}

fn read_file(path: &Path) -> Result<String, ExperimentError> {
    fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(path).map_err(|e| ExperimentError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &'static str) -> Result<T, ExperimentError> {
    serde_json::from_str(&read_file(path)?).map_err(|e| data_err(stage)(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RecordingSummary {
    data_dir: String,
    recording_id: u32,
    location: String,
    frequency_hz: f64,
    drive_side: DriveSide,
    tracks: usize,
    frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrackMeta {
    track_id: TrackId,
    direction: String,
    length: f64,
    first_frame: Frame,
    frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FrenetMeta {
    location: String,
    frequency_hz: f64,
    drive_side: DriveSide,
    /// Lateral coordinates and lane layouts are mirrored (left-hand traffic).
    mirrored: bool,
    ldot_formula: LdotFormula,
    lanes: BTreeMap<String, DirectionLanes>,
    tracks: Vec<TrackMeta>,
}

const FRENET_HEADER: &str = "trackId,frame,s,l,sDot,lDot,refIndex,gated,onRamp";

fn frenet_csv(rec: &FrenetRecording) -> String {
    let mut out = format!("{FRENET_HEADER}\n");
    for t in &rec.tracks {
        for (k, (st, ramp)) in t.states.iter().zip(&t.on_ramp).enumerate() {
            let _ = writeln!(
                out,
                "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{}",
                t.track_id,
                t.first_frame + k as u32,
                st.s,
                st.l,
                st.s_dot,
                st.l_dot,
                st.ref_index,
                u8::from(st.gated),
                u8::from(*ramp)
            );
        }
    }
    out
}

fn parse_frenet(meta: FrenetMeta, csv: &str) -> Result<FrenetRecording, String> {
    let mut lines = csv.lines();
    if lines.next() != Some(FRENET_HEADER) {
        return Err(format!("expected header {FRENET_HEADER}"));
    }
    let mut tracks = Vec::with_capacity(meta.tracks.len());
    let mut line_no = 1;
    for tm in meta.tracks {
        let mut states = Vec::with_capacity(tm.frames);
        let mut on_ramp = Vec::with_capacity(tm.frames);
        for k in 0..tm.frames {
            line_no += 1;
            let line = lines.next().ok_or_else(|| format!("track {} ends early", tm.track_id))?;
            let f: Vec<&str> = line.split(',').collect();
            let bad = || format!("line {line_no}: malformed {line:?}");
            if f.len() != 9 || f[0].parse::<TrackId>().ok() != Some(tm.track_id) {
                return Err(bad());
            }
            if f[1].parse::<Frame>().ok() != Some(tm.first_frame + k as u32) {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            let flag = |i: usize| match f[i] {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(bad()),
            };
            states.push(FrenetState {
                s: num(2)?,
                l: num(3)?,
                s_dot: num(4)?,
                l_dot: num(5)?,
                ref_index: f[6].parse().map_err(|_| bad())?,
                gated: flag(7)?,
            });
            on_ramp.push(flag(8)?);
        }
        tracks.push(FrenetTrack {
            track_id: tm.track_id,
            direction: tm.direction,
            length: tm.length,
            first_frame: tm.first_frame,
            states,
            on_ramp,
        });
    }
    if lines.next().is_some() {
        return Err("rows beyond the tracks listed in the metadata".into());
    }
    Ok(FrenetRecording {
        location: meta.location,
        frequency_hz: meta.frequency_hz,
        drive_side: meta.drive_side,
        mirrored: meta.mirrored,
        ldot_formula: meta.ldot_formula,
        lanes: meta.lanes,
        tracks,
    })
}

fn split_name(seed: u64) -> String {
    format!("seed{seed}")
}

/// The artifact tree of one configuration.
pub struct Workspace {
    pub config: PipelineConfig,
    pub root: PathBuf,
    config_hash: String,
}

impl Workspace {
    pub fn new(config: PipelineConfig) -> Self {
        let root = config.out_dir.clone();
        let config_hash = config.hash();
        Self { config, root, config_hash }
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn tags(&self) -> Vec<String> {
        self.config.populations.iter().map(|p| p.tag.clone()).collect()
    }

    pub fn stage_dir(&self, tag: &str, stage: &str) -> PathBuf {
        self.root.join(tag).join(stage)
    }

    pub fn data_dir(&self, tag: &str) -> Result<PathBuf, ExperimentError> {
        let spec = self.config.population(tag)?;
        Ok(spec.data_dir.clone().unwrap_or_else(|| self.stage_dir(tag, "data")))
    }

    pub fn train_dir(&self, regime: &str, seed: u64) -> PathBuf {
        self.root.join("train").join(regime).join(split_name(seed))
    }

    pub fn split_file(&self, tag: &str, seed: u64) -> PathBuf {
        self.root.join("train").join("splits").join(split_name(seed)).join(format!("{tag}.bin"))
    }

    pub fn evaluate_dir(&self) -> PathBuf {
        self.root.join("evaluate")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    fn require(&self, path: &Path, producer: &'static str) -> Result<(), ExperimentError> {
        if path.exists() {
            Ok(())
        } else {
            Err(ExperimentError::MissingArtifact { path: path.display().to_string(), producer })
        }
    }

    fn refs(&self, paths: &[PathBuf]) -> Result<Vec<InputRef>, ExperimentError> {
        paths.iter().map(|p| Ok(InputRef { path: self.rel(p), sha256: sha256_file(p)? })).collect()
    }

    fn write_manifest(
        &self,
        dir: &Path,
        stage: &str,
        population: Option<&str>,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<Manifest, ExperimentError> {
        let manifest = Manifest {
            stage: stage.into(),
            population: population.map(str::to_string),
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
            inputs: self.refs(inputs)?,
            outputs: self.refs(outputs)?,
        };
        write_file(&dir.join(MANIFEST_FILE), to_json(&manifest))?;
        Ok(manifest)
    }

    /// Generates the synthetic recording of population `tag`.
    pub fn synth(&self, tag: &str) -> Result<Manifest, ExperimentError> {
        let spec = self.config.population(tag)?;
        let synth = spec
            .synth
            .as_ref()
            .ok_or_else(|| ExperimentError::Config(format!("population {tag} has no synth section")))?;
        let mut params = synth.params.clone();
        params.name = tag.to_string();
        params.seed = mix_seed(self.config.seed, params.seed);
        let rec = generate_population(&params, synth.n_tracks, synth.duration_s).map_err(|e| data_err("synth")(e.to_string()))?;
        let dir = self.stage_dir(tag, "data");
        write_population(&rec, &dir).map_err(|e| data_err("synth")(e.to_string()))?;
        let outputs: Vec<PathBuf> = [TRACKS_FILE, META_FILE, LANE_CONFIG_FILE, lcpred_core::synth::GROUND_TRUTH_FILE]
            .iter()
            .map(|f| dir.join(f))
            .collect();
        log::info!("synth {tag}: {} tracks, {} lane changes", rec.bundle.tracks.len(), rec.ground_truth.len());
        self.write_manifest(&dir, "synth", Some(tag), &[], &outputs)
    }

    fn raw_inputs(&self, tag: &str) -> Result<[PathBuf; 3], ExperimentError> {
        let dir = self.data_dir(tag)?;
        let files = [dir.join(TRACKS_FILE), dir.join(META_FILE), dir.join(LANE_CONFIG_FILE)];
        for f in &files {
            self.require(f, "synth")?;
        }
        Ok(files)
    }

    fn load_bundle(&self, tag: &str) -> Result<(RecordingBundle, LaneConfig, [PathBuf; 3]), ExperimentError> {
        let files = self.raw_inputs(tag)?;
        let lanes = LaneConfig::load(&files[2]).map_err(|e| data_err("ingest")(e.to_string()))?;
        let bundle = load_recording(&files[0], &files[1], &lanes).map_err(|e| data_err("ingest")(e.to_string()))?;
        Ok((bundle, lanes, files))
    }

    /// Parses and validates the raw recording of population `tag`.
    pub fn ingest(&self, tag: &str) -> Result<Manifest, ExperimentError> {
        let (bundle, _, inputs) = self.load_bundle(tag)?;
        let summary = RecordingSummary {
            data_dir: self.rel(&self.data_dir(tag)?),
            recording_id: bundle.recording_id,
            location: bundle.location_id.clone(),
            frequency_hz: bundle.frequency_hz,
            drive_side: bundle.drive_side,
            tracks: bundle.tracks.len(),
            frames: bundle.tracks.iter().map(|t| t.frames.len()).sum(),
        };
        let dir = self.stage_dir(tag, "ingest");
        create_dir(&dir)?;
        let out = dir.join(SUMMARY_FILE);
        write_file(&out, to_json(&summary))?;
        log::info!("ingest {tag}: {} tracks at {} Hz", summary.tracks, summary.frequency_hz);
        self.write_manifest(&dir, "ingest", Some(tag), &inputs, &[out])
    }

    /// Fits the reference paths of population `tag`.
    pub fn refpath(&self, tag: &str) -> Result<Manifest, ExperimentError> {
        self.require(&self.stage_dir(tag, "ingest").join(SUMMARY_FILE), "ingest")?;
        let (bundle, lanes, inputs) = self.load_bundle(tag)?;
        let fitted = fit_reference_paths(&bundle, &lanes, &self.config.refpath)?;
        let dir = self.stage_dir(tag, "refpath");
        create_dir(&dir)?;
        let mut outputs = Vec::new();
        for (name, path) in &fitted.paths {
            let f = dir.join(refpath_file(name));
            write_file(&f, path.to_csv_string())?;
            outputs.push(f);
        }
        let svm = dir.join(SVM_FILE);
        write_file(&svm, to_json(&fitted.svm))?;
        outputs.push(svm);
        log::info!(
            "refpath {tag}: {} training points, {} support vectors",
            fitted.training_points,
            fitted.svm.support_points.len()
        );
        self.write_manifest(&dir, "refpath", Some(tag), &inputs, &outputs)
    }

    /// Converts every track of population `tag` to Frenet coordinates.
    pub fn convert(&self, tag: &str) -> Result<Manifest, ExperimentError> {
        let (bundle, lanes, raw) = self.load_bundle(tag)?;
        let mut inputs = raw.to_vec();
        let ref_dir = self.stage_dir(tag, "refpath");
        let dirs = lanes.location(&bundle.location_id).map_err(|e| data_err("convert")(e.to_string()))?;
        let mut paths = BTreeMap::new();
        for name in dirs.keys() {
            let f = ref_dir.join(refpath_file(name));
            self.require(&f, "refpath")?;
            let p: ReferencePath<f64> = ReferencePath::load_csv(&f, name.clone()).map_err(|e| data_err("convert")(e.to_string()))?;
            paths.insert(name.clone(), p);
            inputs.push(f);
        }
        let rec = convert_recording(&bundle, &lanes, &paths, &self.config.frenet, self.config.refpath.index_cell)?;
        let meta = FrenetMeta {
            location: rec.location.clone(),
            frequency_hz: rec.frequency_hz,
            drive_side: rec.drive_side,
            mirrored: rec.mirrored,
            ldot_formula: rec.ldot_formula,
            lanes: rec.lanes.clone(),
            tracks: rec
                .tracks
                .iter()
                .map(|t| TrackMeta {
                    track_id: t.track_id,
                    direction: t.direction.clone(),
                    length: t.length,
                    first_frame: t.first_frame,
                    frames: t.states.len(),
                })
                .collect(),
        };
        if rec.ldot_formula == LdotFormula::PaperCos {
            log::warn!("convert {tag}: lateral velocity uses the cosine formula as printed; it is not kinematically consistent");
        }
        let dir = self.stage_dir(tag, "convert");
        create_dir(&dir)?;
        let (csv, meta_file) = (dir.join(FRENET_FILE), dir.join(FRENET_META_FILE));
        write_file(&csv, frenet_csv(&rec))?;
        write_file(&meta_file, to_json(&meta))?;
        self.write_manifest(&dir, "convert", Some(tag), &inputs, &[csv, meta_file])
    }

    /// Loads the converted recording of population `tag`.
    pub fn load_frenet(&self, tag: &str) -> Result<(FrenetRecording, Vec<PathBuf>), ExperimentError> {
        let dir = self.stage_dir(tag, "convert");
        let (csv, meta_file) = (dir.join(FRENET_FILE), dir.join(FRENET_META_FILE));
        self.require(&meta_file, "convert")?;
        self.require(&csv, "convert")?;
        let meta: FrenetMeta = from_json(&meta_file, "convert")?;
        let rec = parse_frenet(meta, &read_file(&csv)?).map_err(|e| data_err("convert")(format!("{}: {e}", csv.display())))?;
        Ok((rec, vec![csv, meta_file]))
    }

    /// Detects lane changes and cuts segments for population `tag`.
    pub fn segment(&self, tag: &str) -> Result<Manifest, ExperimentError> {
        let (rec, inputs) = self.load_frenet(tag)?;
        let index = SceneIndex::new(&rec);
        let out = segment_recording(&index, &self.config.segment, tag, self.config.seed);
        let dir = self.stage_dir(tag, "segment");
        create_dir(&dir)?;
        let files = [dir.join(INSTANTS_FILE), dir.join(SEGMENTS_FILE), dir.join(STATS_FILE)];
        write_file(&files[0], ground_truth_csv(&out.instants))?;
        write_file(&files[1], segments_csv(&out.segments))?;
        write_file(&files[2], to_json(&out.stats))?;
        log::info!("segment {tag}: {:?}", out.stats);
        self.write_manifest(&dir, "segment", Some(tag), &inputs, &files)
    }

    /// Lane-change instants detected by the segment stage, in the mirrored frame.
    pub fn load_instants(&self, tag: &str) -> Result<Vec<lcpred_core::segment::LcInstant>, ExperimentError> {
        let f = self.stage_dir(tag, "segment").join(INSTANTS_FILE);
        self.require(&f, "segment")?;
        parse_ground_truth_csv(&read_file(&f)?).map_err(|e| data_err("segment")(format!("{}: {e}", f.display())))
    }

    pub fn load_segment_stats(&self, tag: &str) -> Result<SegmentStats, ExperimentError> {
        let f = self.stage_dir(tag, "segment").join(STATS_FILE);
        self.require(&f, "segment")?;
        from_json(&f, "segment")
    }

    pub fn load_segments(&self, tag: &str) -> Result<Vec<lcpred_core::Segment>, ExperimentError> {
        let f = self.stage_dir(tag, "segment").join(SEGMENTS_FILE);
        self.require(&f, "segment")?;
        parse_segments_csv(&read_file(&f)?).map_err(|e| data_err("segment")(format!("{}: {e}", f.display())))
    }

    /// Builds feature samples for population `tag` and draws its balanced set.
    pub fn features(&self, tag: &str) -> Result<Manifest, ExperimentError> {
        let seg_file = self.stage_dir(tag, "segment").join(SEGMENTS_FILE);
        let segments = self.load_segments(tag)?;
        let (rec, mut inputs) = self.load_frenet(tag)?;
        inputs.push(seg_file);
        let index = SceneIndex::new(&rec);
        let samples = extract_samples(&index, &segments, &self.config.features.policy)?;
        let samples: Vec<Sample<f32>> = samples
            .iter()
            .map(|s| Sample {
                rows: s.rows.iter().map(|r| r.map(|v| v as f32)).collect(),
                label: s.label,
                dataset_tag: s.dataset_tag.clone(),
                provenance: s.provenance.clone(),
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, tag_hash(tag)));
        let balanced = balance_dataset(&samples, self.config.features.per_class_lc, &mut rng)
            .map_err(|e| data_err("features")(format!("population {tag}: {e}")))?;
        let dir = self.stage_dir(tag, "features");
        create_dir(&dir)?;
        let info = |split: &str| DatasetInfo {
            split: Some(split.into()),
            normalizer: None,
            policy: Some(self.config.features.policy),
            seed: self.config.seed,
            config_hash: Some(self.config_hash.clone()),
        };
        let files = [dir.join(SAMPLES_FILE), dir.join(BALANCED_FILE)];
        let save = |path: &Path, s: &[Sample<f32>], split: &str| {
            save_samples(path, s, &info(split)).map_err(|e| data_err("features")(format!("{}: {e}", path.display())))
        };
        save(&files[0], &samples, "all")?;
        save(&files[1], &balanced, "balanced")?;
        log::info!("features {tag}: {} samples, {} balanced", samples.len(), balanced.len());
        self.write_manifest(&dir, "features", Some(tag), &inputs, &files)
    }

    fn load_dataset(&self, path: &Path, producer: &'static str) -> Result<Vec<Sample<f32>>, ExperimentError> {
        self.require(path, producer)?;
        load_samples(path).map(|(s, _)| s).map_err(|e| data_err(producer)(format!("{}: {e}", path.display())))
    }

    /// Trains every regime for every configured seed.
    pub fn train(&self) -> Result<Manifest, ExperimentError> {
        let plan = &self.config.plan;
        let mut populations = BTreeMap::new();
        let mut inputs = Vec::new();
        for tag in self.tags() {
            let f = self.stage_dir(&tag, "features").join(BALANCED_FILE);
            populations.insert(tag, self.load_dataset(&f, "features")?);
            inputs.push(f);
        }
        let mut data = Vec::new();
        for &seed in &plan.seeds {
            data.extend(prepare_runs(&populations, plan, self.config.seed, seed)?);
        }
        let mut outputs = Vec::new();
        for &seed in &plan.seeds {
            let d = data.iter().find(|d| d.seed == seed).expect("every seed has runs");
            for (tag, test) in &d.tests {
                let f = self.split_file(tag, seed);
                create_dir(f.parent().expect("split file has a parent"))?;
                let info = DatasetInfo {
                    split: Some("test".into()),
                    normalizer: None,
                    policy: Some(self.config.features.policy),
                    seed,
                    config_hash: Some(self.config_hash.clone()),
                };
                save_samples(&f, test, &info).map_err(|e| data_err("train")(format!("{}: {e}", f.display())))?;
                outputs.push(f);
            }
        }
        let runs = data
            .par_iter()
            .map(|d| train_run(d, &self.config.model, &self.config.train, self.config.seed))
            .collect::<Result<Vec<_>, _>>()?;
        let git_revision = std::env::var(GIT_REVISION_ENV).ok();
        for run in &runs {
            let dir = self.train_dir(&run.regime, run.seed);
            create_dir(&dir)?;
            let meta = CheckpointMeta {
                normalizer: Some(run.normalizer.clone()),
                seed: run.seed,
                git_revision: git_revision.clone(),
                extra: serde_json::json!({
                    "config_hash": self.config_hash,
                    "regime": run.regime,
                    "best_epoch": run.best_epoch,
                    "epochs": run.history.len(),
                }),
            };
            let files = [dir.join(CHECKPOINT_FILE), dir.join(HISTORY_FILE), dir.join(AUDIT_FILE)];
            save_checkpoint(&files[0], &run.params, &meta)?;
            write_file(&files[1], to_json(&run.history))?;
            write_file(&files[2], to_json(&run.audit))?;
            outputs.extend(files);
        }
        let dir = self.root.join("train");
        self.write_manifest(&dir, "train", None, &inputs, &outputs)
    }

    /// Hash audit of one trained run.
    pub fn load_audit(&self, regime: &str, seed: u64) -> Result<PhaseAudit, ExperimentError> {
        let f = self.train_dir(regime, seed).join(AUDIT_FILE);
        self.require(&f, "train")?;
        from_json(&f, "train")
    }

    /// Evaluates every trained run on every population's test split.
    pub fn evaluate(&self) -> Result<Manifest, ExperimentError> {
        let plan = &self.config.plan;
        let tags = self.tags();
        let mut inputs = Vec::new();
        let mut jobs = Vec::new();
        for regime in regimes(&tags, plan.joint) {
            for &seed in &plan.seeds {
                let ckpt = self.train_dir(&regime, seed).join(CHECKPOINT_FILE);
                self.require(&ckpt, "train")?;
                inputs.push(ckpt.clone());
                jobs.push((regime.clone(), seed, ckpt));
            }
        }
        let mut tests = BTreeMap::new();
        for &seed in &plan.seeds {
            for tag in &tags {
                let f = self.split_file(tag, seed);
                tests.insert((tag.clone(), seed), self.load_dataset(&f, "train")?);
                inputs.push(f);
            }
        }
        let results: Vec<Vec<CellResult>> = jobs
            .par_iter()
            .map(|(regime, seed, ckpt)| {
                let (params, meta): (ModelParams<f32>, CheckpointMeta) = load_checkpoint(ckpt)?;
                let normalizer = meta
                    .normalizer
                    .ok_or_else(|| data_err("evaluate")(format!("{} stores no normalizer", ckpt.display())))?;
                tags.iter()
                    .map(|tag| {
                        evaluate_run(&params, &normalizer, regime, *seed, tag, &tests[&(tag.clone(), *seed)], plan.eval_batch_size)
                    })
                    .collect()
            })
            .collect::<Result<_, ExperimentError>>()?;
        let results: Vec<CellResult> = results.into_iter().flatten().collect();
        let dir = self.evaluate_dir();
        let mut outputs = Vec::new();
        for r in &results {
            let run_dir = dir.join(&r.regime).join(split_name(r.seed));
            create_dir(&run_dir)?;
            let mut csv = String::from("sampleId,label,predicted,pLK,pLLC,pRLC\n");
            for p in &r.predictions {
                let _ = writeln!(
                    csv,
                    "{},{},{},{:.6},{:.6},{:.6}",
                    p.sample_id, p.label, p.predicted, p.probabilities[0], p.probabilities[1], p.probabilities[2]
                );
            }
            let f = run_dir.join(format!("{}.csv", r.population));
            write_file(&f, csv)?;
            outputs.push(f);
        }
        let eval_file = dir.join(EVALUATION_FILE);
        write_file(&eval_file, to_json(&results))?;
        outputs.push(eval_file);
        self.write_manifest(&dir, "evaluate", None, &inputs, &outputs)
    }

    pub fn load_evaluation(&self) -> Result<Vec<CellResult>, ExperimentError> {
        let f = self.evaluate_dir().join(EVALUATION_FILE);
        self.require(&f, "evaluate")?;
        from_json(&f, "evaluate")
    }

    /// Aggregates the evaluation into the accuracy matrix and report files.
    pub fn report(&self) -> Result<Report, ExperimentError> {
        let plan = &self.config.plan;
        let tags = self.tags();
        let results = self.load_evaluation()?;
        let matrix = AccuracyMatrix::from_results(&regimes(&tags, plan.joint), &tags, &plan.seeds, &results)?;
        let eval_file = self.evaluate_dir().join(EVALUATION_FILE);
        let report = Report {
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
            config: serde_json::to_value(self.config.canonical()).expect("config serializes"),
            inputs: self.refs(std::slice::from_ref(&eval_file))?,
            matrix,
        };
        let dir = self.report_dir();
        let written = emit_report(&report, &dir)?;
        let outputs: Vec<PathBuf> = written.iter().map(|f| dir.join(f)).collect();
        self.write_manifest(&dir, "report", None, &[eval_file], &outputs)?;
        Ok(report)
    }

    /// Every stage for every population, then the protocol and the report.
    pub fn run_all(&self) -> Result<Report, ExperimentError> {
        for tag in self.tags() {
            if self.config.population(&tag)?.data_dir.is_none() {
                self.synth(&tag)?;
            }
            self.ingest(&tag)?;
            self.refpath(&tag)?;
            self.convert(&tag)?;
            self.segment(&tag)?;
            self.features(&tag)?;
        }
        self.train()?;
        self.evaluate()?;
        self.report()
    }

    /// The SVM fitted by the refpath stage.
    pub fn load_svm(&self, tag: &str) -> Result<SvmModel<f64>, ExperimentError> {
        let f = self.stage_dir(tag, "refpath").join(SVM_FILE);
        self.require(&f, "refpath")?;
        from_json(&f, "refpath")
    }
}
