use std::path::Path;

use imupose::body_model::KinematicModel;
use imupose::formats::{imu_to_string, read_imu, read_motion};
use imupose::metrics::Metric;
use imupose::net::{read_weights, NetworkConfig};
use imupose::pipeline::*;
use imupose::synthesis::{generate_synthetic_corpus, synthesize_imu, MotionType};

fn small_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.paths.corpus = dir.join("corpus");
    cfg.paths.weights = dir.join("model/weights.bin");
    cfg.paths.loss_csv = dir.join("model/loss.csv");
    cfg.paths.reports = dir.join("reports");
    cfg.seed = 11;
    cfg.corpus.sequences_per_type = 1;
    cfg.corpus.frames = 50;
    cfg.network = NetworkConfig { hidden: vec![8, 6, 8], ..NetworkConfig::three_stage() };
    cfg.train.epochs = 3;
    cfg.train.batch_size = 32;
    cfg.stream.rate = 0.0;
    cfg
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["motion", "imu"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        out.extend(names.into_iter().map(|p| (p.display().to_string(), std::fs::read(&p).unwrap())));
    }
    out.push(("manifest".into(), std::fs::read(dir.join(MANIFEST_FILE)).unwrap()));
    out
}

#[test]
fn synthesize_is_deterministic_and_manifest_matches_content() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = small_config(a.path());
    let cb = small_config(b.path());
    let out = cmd_synthesize(&ca).unwrap();
    cmd_synthesize(&cb).unwrap();
    let fa: Vec<_> = files(&ca.paths.corpus).into_iter().map(|(_, v)| v).collect();
    let fb: Vec<_> = files(&cb.paths.corpus).into_iter().map(|(_, v)| v).collect();
    assert_eq!(fa, fb);

    let model = KinematicModel::default();
    let m = &out.manifest;
    assert_eq!(m.counts.len(), 5);
    for t in MotionType::ALL {
        let in_files = m
            .entries
            .iter()
            .filter(|e| read_motion(&model, &ca.paths.corpus.join(&e.motion)).unwrap().motion_type == Some(t))
            .count();
        assert_eq!(m.counts[t.name()], in_files);
    }
    // Parsed files equal what was synthesized in memory.
    let motions = generate_synthetic_corpus(&model, &ca.corpus, ca.seed);
    assert_eq!(motions.len(), m.entries.len());
    for (e, motion) in m.entries.iter().zip(&motions) {
        assert_eq!(&read_motion(&model, &ca.paths.corpus.join(&e.motion)).unwrap().frames.len(), &motion.len());
        let imu = read_imu(&ca.paths.corpus.join(&e.imu)).unwrap();
        assert_eq!(imu, synthesize_imu(&model, motion, ca.smoothing).unwrap());
        assert_eq!(imu_to_string(&imu), std::fs::read_to_string(ca.paths.corpus.join(&e.imu)).unwrap());
        assert_eq!(e.imu_frames, e.motion_frames - 2 * ca.smoothing);
    }
}

#[test]
fn train_estimate_stream_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cmd_synthesize(&cfg).unwrap();
    let trained = cmd_train(&cfg, None).unwrap();
    assert!(trained.report.final_loss().is_finite());
    let csv = std::fs::read_to_string(&cfg.paths.loss_csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + cfg.train.epochs);

    // Saved weights reproduce the in-memory network exactly.
    let reloaded = read_weights(&cfg.paths.weights).unwrap();
    assert_eq!(reloaded, trained.network);

    // Fine-tuning moves the weights but keeps every shape.
    let first = dir.path().join("first.bin");
    std::fs::copy(&cfg.paths.weights, &first).unwrap();
    let tuned = cmd_train(&cfg, Some(&first)).unwrap();
    assert_ne!(tuned.weights_hash, trained.weights_hash);
    let shapes = |n: &imupose::net::Network<f32>| n.tensors().into_iter().map(|(k, t)| (k, t.shape().to_vec())).collect::<Vec<_>>();
    assert_eq!(shapes(&tuned.network), shapes(&trained.network));

    let manifest = CorpusManifest::load(&cfg.paths.corpus).unwrap();
    let entry = &manifest.entries[0];
    let imu_path = cfg.paths.corpus.join(&entry.imu);
    let gt_path = cfg.paths.corpus.join(&entry.motion);
    let pred_path = dir.path().join("pred/a.motion");

    cfg.physics = false;
    let off = cmd_estimate(&cfg, &imu_path, &pred_path, None).unwrap();
    assert_eq!(off.estimation.frames.len(), entry.motion_frames - 25 - 2 * cfg.smoothing);
    assert!(off.torque_csv.is_none());

    cfg.physics = true;
    let on = cmd_estimate(&cfg, &imu_path, &pred_path, None).unwrap();
    let torque_text = std::fs::read_to_string(on.torque_csv.as_ref().unwrap()).unwrap();
    assert_eq!(torque_text.lines().next(), Some("frame,joint,tau_x,tau_y,tau_z"));
    assert_eq!(torque_text.lines().count(), 1 + 15 * on.estimation.frames.len());
    assert!(on.estimation.max_kkt_residual() < 1e-6, "{} fallbacks {}", on.estimation.max_kkt_residual(), on.estimation.fallback_count());

    let mut sink = Vec::new();
    let streamed = cmd_stream(&cfg, &StreamArgs { imu: &imu_path, timing_csv: None }, &mut sink).unwrap();
    assert_eq!(streamed.latency_frames(), Some(5));
    assert_eq!(streamed.frames, on.estimation.frames);
    let model = KinematicModel::default();
    let parsed = parse_stream(&model, std::str::from_utf8(&sink).unwrap()).unwrap();
    let offline = read_motion(&model, &pred_path).unwrap();
    assert_eq!(parsed.len(), offline.len());
    for (i, (frame, pose)) in parsed.iter().enumerate() {
        assert_eq!(*frame, offline.start_frame + i);
        assert_eq!(pose, &offline.frames[i]);
    }

    let eval = cmd_evaluate(&cfg, &pred_path, &gt_path).unwrap();
    let header = std::fs::read_to_string(&eval.csv).unwrap();
    let cols: Vec<&str> = header.lines().next().unwrap().split(',').skip(2).collect();
    assert_eq!(cols, Metric::ALL.iter().map(|m| m.column()).collect::<Vec<_>>());
    assert_eq!(cols, ["Ang Err", "Pos Err", "Mesh Err", "Jitter", "Wrist Pos Err", "Elbow Pos Err"]);
    let groups: Vec<MotionType> = eval.report.per_type.iter().map(|(t, _)| *t).collect();
    assert_eq!(groups, MotionType::ALL);

    let same = cmd_evaluate(&cfg, &gt_path, &gt_path).unwrap();
    for (i, s) in same.report.overall.iter().enumerate() {
        if Metric::ALL[i] != Metric::Jitter {
            assert!(s.mean.abs() < 1e-9, "{:?} {}", Metric::ALL[i], s.mean);
        }
    }
}

#[test]
fn whole_pipeline_is_reproducible() {
    let run = |dir: &Path| {
        let cfg = small_config(dir);
        cmd_synthesize(&cfg).unwrap();
        cmd_train(&cfg, None).unwrap();
        let pred = dir.join("pred");
        let manifest = CorpusManifest::load(&cfg.paths.corpus).unwrap();
        for e in &manifest.entries {
            let name = Path::new(&e.motion).file_name().unwrap();
            cmd_estimate(&cfg, &cfg.paths.corpus.join(&e.imu), &pred.join(name), None).unwrap();
        }
        cmd_evaluate(&cfg, &pred, &cfg.paths.corpus.join("motion")).unwrap();
        (
            std::fs::read(&cfg.paths.weights).unwrap(),
            std::fs::read(cfg.paths.reports.join("report.csv")).unwrap(),
            std::fs::read(cfg.paths.reports.join("report.txt")).unwrap(),
        )
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn errors_carry_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let imu = dir.path().join("missing.imu");
    let out = dir.path().join("out.motion");
    // No weights yet.
    assert_eq!(cmd_estimate(&cfg, &imu, &out, None).unwrap_err().exit_code(), 2);
    assert_eq!(cmd_train(&cfg, None).unwrap_err().exit_code(), 2);

    let mut short = cfg.clone();
    short.corpus.frames = 30;
    cmd_synthesize(&short).unwrap();
    // 30 motion frames leave 22 IMU frames, short of one window.
    let err = cmd_train(&short, None).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");

    let garbage = dir.path().join("garbage.imu");
    std::fs::write(&garbage, "not an imu file\n").unwrap();
    let mut ok = cfg.clone();
    ok.corpus.frames = 40;
    cmd_synthesize(&ok).unwrap();
    cmd_train(&ok, None).unwrap();
    assert_eq!(cmd_estimate(&ok, &garbage, &out, None).unwrap_err().exit_code(), 3);
    let manifest = CorpusManifest::load(&ok.paths.corpus).unwrap();
    let a = ok.paths.corpus.join(&manifest.entries[0].motion);
    let b = dir.path().join("shifted.motion");
    let mut m = read_motion(&KinematicModel::default(), &a).unwrap();
    m.start_frame = 500;
    imupose::formats::write_motion(&KinematicModel::default(), &m, &b).unwrap();
    assert_eq!(cmd_evaluate(&ok, &b, &a).unwrap_err().exit_code(), 3);
}

#[test]
fn calibrate_writes_a_record_estimate_can_use() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cmd_synthesize(&cfg).unwrap();
    let manifest = CorpusManifest::load(&cfg.paths.corpus).unwrap();
    let imu = cfg.paths.corpus.join(&manifest.entries[0].imu);
    let record = dir.path().join("cal.txt");
    let (cal, path) = cmd_calibrate(&cfg, &CalibrateArgs { imu: &imu, reference: None, frame: 0, out: Some(&record) }).unwrap();
    assert_eq!(path, record);
    let back = imupose::calibration::CalibrationResult::from_record(&std::fs::read_to_string(&record).unwrap()).unwrap();
    assert!(back.heading.angle_to(&cal.heading) < 1e-12);
    for (a, b) in back.offsets.iter().zip(&cal.offsets) {
        assert!(a.angle_to(b) < 1e-12);
    }
    cfg.paths.calibration = Some(record);
    cfg.physics = false;
    cmd_train(&cfg, None).unwrap();
    let out = cmd_estimate(&cfg, &imu, &dir.path().join("p.motion"), None).unwrap();
    assert!(!out.estimation.frames.is_empty());
    assert!(cmd_calibrate(&cfg, &CalibrateArgs { imu: &imu, reference: None, frame: 10_000, out: None }).is_err());
}
