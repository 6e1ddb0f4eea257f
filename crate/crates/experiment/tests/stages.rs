use std::path::Path;

use lcpred_core::dataset::load_samples;
use lcpred_core::ingest::load_recording;
use lcpred_core::refpath::ReferencePath;
use lcpred_core::{LaneConfig, Sample};
use lcpred_experiment::pipeline::{convert_recording, extract_samples, fit_reference_paths, segment_recording, SceneIndex};
use lcpred_experiment::stages::{refpath_file, sha256_file, Manifest};
use lcpred_experiment::{ExperimentError, PipelineConfig, Workspace};

fn small(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig { out_dir: out.to_path_buf(), seed: 3, ..PipelineConfig::default() };
    for p in &mut cfg.populations {
        let s = p.synth.as_mut().unwrap();
        s.n_tracks = 250;
        s.duration_s = 300.0;
    }
    cfg.features.per_class_lc = 20;
    cfg
}

fn run_population_stages(ws: &Workspace, tag: &str) -> Vec<Manifest> {
    vec![
        ws.synth(tag).unwrap(),
        ws.ingest(tag).unwrap(),
        ws.refpath(tag).unwrap(),
        ws.convert(tag).unwrap(),
        ws.segment(tag).unwrap(),
        ws.features(tag).unwrap(),
    ]
}

#[test]
fn disk_stages_match_the_in_memory_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(small(dir.path()));
    let tag = "hk";
    run_population_stages(&ws, tag);
    let cfg = &ws.config;

    let data = ws.data_dir(tag).unwrap();
    let lanes = LaneConfig::load(data.join("lane_config.json")).unwrap();
    let bundle = load_recording(data.join("tracks.csv"), data.join("recordingMeta.csv"), &lanes).unwrap();
    let fitted = fit_reference_paths(&bundle, &lanes, &cfg.refpath).unwrap();
    for (name, path) in &fitted.paths {
        let stored = ReferencePath::<f64>::load_csv(ws.stage_dir(tag, "refpath").join(refpath_file(name)), name.clone()).unwrap();
        assert_eq!(stored.points, path.points);
    }

    let rec = convert_recording(&bundle, &lanes, &fitted.paths, &cfg.frenet, cfg.refpath.index_cell).unwrap();
    let (stored, _) = ws.load_frenet(tag).unwrap();
    assert_eq!(stored, rec);

    let index = SceneIndex::new(&rec);
    let seg = segment_recording(&index, &cfg.segment, tag, cfg.seed);
    assert_eq!(ws.load_segments(tag).unwrap(), seg.segments);
    assert_eq!(ws.load_instants(tag).unwrap(), seg.instants);

    let samples = extract_samples(&index, &seg.segments, &cfg.features.policy).unwrap();
    let (stored, info): (Vec<Sample<f32>>, _) = load_samples(ws.stage_dir(tag, "features").join("samples.bin")).unwrap();
    assert_eq!(info.config_hash.as_deref(), Some(ws.config_hash()));
    assert_eq!(stored.len(), samples.len());
    for (a, b) in stored.iter().zip(&samples) {
        assert_eq!(a.id(), b.id());
        assert_eq!(a.label, b.label);
        assert!(a.rows.iter().flatten().zip(b.rows.iter().flatten()).all(|(x, y)| *x == *y as f32));
    }
}

#[test]
fn manifests_digest_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(small(dir.path()));
    let manifests = run_population_stages(&ws, "exid");
    assert_eq!(manifests.iter().map(|m| m.stage.as_str()).collect::<Vec<_>>(), ["synth", "ingest", "refpath", "convert", "segment", "features"]);
    for m in &manifests {
        assert_eq!(m.config_hash, ws.config_hash());
        assert_eq!(m.population.as_deref(), Some("exid"));
        assert!(!m.outputs.is_empty());
        for r in m.outputs.iter().chain(&m.inputs) {
            assert!(!Path::new(&r.path).is_absolute());
            assert_eq!(r.sha256, sha256_file(&dir.path().join(&r.path)).unwrap(), "{}", r.path);
        }
    }
    // each stage's inputs are outputs of earlier stages
    for w in manifests.windows(2).skip(1) {
        let earlier: Vec<&String> = manifests.iter().take_while(|m| m.stage != w[1].stage).flat_map(|m| m.outputs.iter().map(|r| &r.path)).collect();
        assert!(w[1].inputs.iter().all(|r| earlier.contains(&&r.path)), "{} reads an unknown input", w[1].stage);
    }
}

#[test]
fn later_stages_name_their_missing_producer() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(small(dir.path()));
    let producer = |r: Result<_, ExperimentError>| match r {
        Err(ExperimentError::MissingArtifact { producer, .. }) => producer,
        other => panic!("expected a missing artifact, got {:?}", other.map(|_| ())),
    };
    assert_eq!(producer(ws.ingest("exid").map(|_| ())), "synth");
    assert_eq!(producer(ws.convert("exid").map(|_| ())), "synth");
    assert_eq!(producer(ws.segment("exid").map(|_| ())), "convert");
    assert_eq!(producer(ws.train().map(|_| ())), "features");
    assert_eq!(producer(ws.evaluate().map(|_| ())), "train");
    assert_eq!(producer(ws.report().map(|_| ())), "evaluate");
}
