use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::estimator::{estimate_sequence, EstimatedFrame, Estimation, Estimator};
use super::{require_file, PipelineConfig, PipelineError};
use crate::body_model::{KinematicModel, Pose};
use crate::calibration::{compute_calibration, CalibrationResult};
use crate::formats::{read_imu, read_motion, read_text, write_imu, write_motion, write_text};
use crate::metrics::{evaluate_sequence, EvalOptions, EvalReport, MetricsError, TaggedSamples};
use crate::net::{read_weights, save_weights, sequence_targets, train, train_from, weights_to_bytes, Dataset, Network, TrainReport, TrainingSequence};
use crate::synthesis::{generate_synthetic_corpus, seated_base_pose, synthesize_imu, MotionType};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// 64-bit FNV-1a, used to fingerprint weights files.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub subject: String,
    pub motion_type: Option<MotionType>,
    /// Relative to the corpus directory.
    pub motion: String,
    pub imu: String,
    pub motion_frames: usize,
    pub imu_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub frame_rate: f64,
    pub smoothing: usize,
    /// Sequences per motion category, every category listed.
    pub counts: BTreeMap<String, usize>,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        require_file(&path, "corpus manifest")?;
        let text = read_text(&path)?;
        toml::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug)]
pub struct SynthesizeOutput {
    pub manifest: CorpusManifest,
    pub dir: PathBuf,
}

/// Generates the motion corpus, synthesizes IMU data for every sequence and
/// writes both plus `manifest.toml` under `paths.corpus`.
pub fn cmd_synthesize(cfg: &PipelineConfig) -> Result<SynthesizeOutput, PipelineError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let dir = cfg.paths.corpus.clone();
    let motions = generate_synthetic_corpus(&model, &cfg.corpus, cfg.seed);
    let mut counts: BTreeMap<String, usize> = MotionType::ALL.iter().map(|t| (t.name().to_string(), 0)).collect();
    let mut entries = Vec::with_capacity(motions.len());
    for motion in &motions {
        let imu = synthesize_imu(&model, motion, cfg.smoothing)?;
        let motion_rel = format!("motion/{}.motion", motion.subject_tag);
        let imu_rel = format!("imu/{}.imu", motion.subject_tag);
        write_motion(&model, motion, &dir.join(&motion_rel))?;
        write_imu(&imu, &dir.join(&imu_rel))?;
        if let Some(t) = motion.motion_type {
            *counts.entry(t.name().to_string()).or_default() += 1;
        }
        entries.push(CorpusEntry {
            subject: motion.subject_tag.clone(),
            motion_type: motion.motion_type,
            motion: motion_rel,
            imu: imu_rel,
            motion_frames: motion.len(),
            imu_frames: imu.len(),
        });
    }
    let manifest = CorpusManifest { seed: cfg.seed, frame_rate: cfg.frame_rate, smoothing: cfg.smoothing, counts, entries };
    let text = toml::to_string(&manifest).map_err(|e| PipelineError::Data(e.to_string()))?;
    write_text(&dir.join(MANIFEST_FILE), &text)?;
    log::info!("wrote {} sequences to {}", manifest.entries.len(), dir.display());
    Ok(SynthesizeOutput { manifest, dir })
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub network: Network<f32>,
    pub report: TrainReport,
    pub windows: usize,
    /// [`fnv1a64`] of the saved weights file.
    pub weights_hash: u64,
}

/// Loads the training set described by the corpus manifest.
pub fn load_dataset(cfg: &PipelineConfig, model: &KinematicModel) -> Result<Dataset, PipelineError> {
    let manifest = CorpusManifest::load(&cfg.paths.corpus)?;
    let mut sequences = Vec::new();
    for e in &manifest.entries {
        if !cfg.dataset.subjects.is_empty() && !cfg.dataset.subjects.contains(&e.subject) {
            continue;
        }
        let motion = read_motion(model, &cfg.paths.corpus.join(&e.motion))?;
        let imu = read_imu(&cfg.paths.corpus.join(&e.imu))?;
        let targets = sequence_targets(model, &motion)?;
        sequences.push(TrainingSequence::from_imu(&cfg.network, &imu, &targets)?);
    }
    let mut data = Dataset::new(&cfg.network, sequences);
    if let Some(n) = cfg.dataset.max_windows {
        data = data.truncated(n);
    }
    if data.is_empty() {
        return Err(PipelineError::Data("no training windows in the selected corpus".into()));
    }
    Ok(data)
}

/// Trains from scratch, or fine-tunes every parameter of `init` when given,
/// then writes the weights and the per-epoch loss CSV.
pub fn cmd_train(cfg: &PipelineConfig, init: Option<&Path>) -> Result<TrainOutput, PipelineError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let data = load_dataset(cfg, &model)?;
    let tc = cfg.train_config();
    let (network, report) = match init {
        None => train(&cfg.network, &tc, &data)?,
        Some(path) => {
            require_file(path, "initial weights")?;
            let net = read_weights(path)?;
            if net.config != cfg.network {
                return Err(PipelineError::Config(format!("{} was trained with a different network config", path.display())));
            }
            train_from(net, &tc, &data)?
        }
    };
    save_weights(&cfg.paths.weights, &network).map_err(|e| PipelineError::io(&cfg.paths.weights, e))?;
    write_text(&cfg.paths.loss_csv, &report.to_csv())?;
    let weights_hash = fnv1a64(&weights_to_bytes(&network));
    log::info!(
        "trained {} epochs on {} windows, final loss {:.3e}, weights {:016x}",
        report.epochs(),
        data.len(),
        report.final_loss(),
        weights_hash
    );
    Ok(TrainOutput { network, report, windows: data.len(), weights_hash })
}

fn load_network(cfg: &PipelineConfig) -> Result<Network<f32>, PipelineError> {
    require_file(&cfg.paths.weights, "weights file")?;
    Ok(read_weights(&cfg.paths.weights)?)
}

fn load_calibration(cfg: &PipelineConfig) -> Result<Option<CalibrationResult>, PipelineError> {
    match &cfg.paths.calibration {
        None => Ok(None),
        Some(p) => {
            require_file(p, "calibration record")?;
            Ok(Some(CalibrationResult::from_record(&read_text(p)?)?))
        }
    }
}

#[derive(Clone, Debug)]
pub struct EstimateOutput {
    pub estimation: Estimation,
    pub torque_csv: Option<PathBuf>,
}

/// Estimates every complete window of an IMU recording and writes the poses
/// as a motion file. With physics on, the torques go to `torques`, or next
/// to `out` with a `.torques.csv` suffix.
pub fn cmd_estimate(cfg: &PipelineConfig, imu_path: &Path, out: &Path, torques: Option<&Path>) -> Result<EstimateOutput, PipelineError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let net = load_network(cfg)?;
    let calibration = load_calibration(cfg)?;
    require_file(imu_path, "IMU file")?;
    let imu = read_imu(imu_path)?;
    let estimation = estimate_sequence(&model, &net, &imu, calibration, cfg.physics.then_some(&cfg.refine))?;
    write_motion(&model, &estimation.motion(&imu), out)?;
    let torque_csv = if cfg.physics {
        let path = torques.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("torques.csv"));
        write_text(&path, &estimation.torque_csv(&model))?;
        let fallbacks = estimation.fallback_count();
        if fallbacks > 0 {
            log::warn!("{fallbacks} frames fell back to the network pose");
        }
        Some(path)
    } else {
        None
    };
    log::info!("estimated {} frames from {}", estimation.frames.len(), imu_path.display());
    Ok(EstimateOutput { estimation, torque_csv })
}

pub struct StreamArgs<'a> {
    pub imu: &'a Path,
    /// Optional `frame,compute_ms` CSV of per-frame processing time.
    pub timing_csv: Option<&'a Path>,
}

#[derive(Clone, Debug)]
pub struct StreamReport {
    pub frames: Vec<EstimatedFrame>,
    /// Input frames between each estimated frame and the input that
    /// released it.
    pub latencies: Vec<usize>,
    /// Processing time of every input frame, seconds.
    pub compute_seconds: Vec<f64>,
    /// Frames whose processing took longer than the frame period.
    pub underruns: usize,
    pub frame_period: f64,
}

impl StreamReport {
    /// The latency when every frame had the same one.
    pub fn latency_frames(&self) -> Option<usize> {
        let first = *self.latencies.first()?;
        self.latencies.iter().all(|&l| l == first).then_some(first)
    }

    pub fn max_compute(&self) -> f64 {
        self.compute_seconds.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_compute(&self) -> f64 {
        self.compute_seconds.iter().sum::<f64>() / self.compute_seconds.len().max(1) as f64
    }
}

pub const STREAM_FORMAT_VERSION: &str = "imupose-stream v1";

/// Replays an IMU file at `stream.rate` from a producer thread and writes one
/// line per estimated frame to `out`: frame index, timestamp, then the pose
/// in the motion-file body layout.
pub fn cmd_stream<W: Write>(cfg: &PipelineConfig, args: &StreamArgs<'_>, out: &mut W) -> Result<StreamReport, PipelineError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let net = load_network(cfg)?;
    let calibration = load_calibration(cfg)?;
    require_file(args.imu, "IMU file")?;
    let imu = read_imu(args.imu)?;
    let mut est = Estimator::new(&model, &net, calibration, cfg.physics.then_some(&cfg.refine), imu.frame_rate, imu.start_frame)?;
    let stdout_err = |e: std::io::Error| PipelineError::io(Path::new("<stream output>"), e);
    let names: Vec<&str> = model.joints.iter().map(|j| j.name.as_str()).collect();
    writeln!(out, "{STREAM_FORMAT_VERSION}\nframe_rate {}\nlatency_frames {}\nnames {}", imu.frame_rate, est.latency_frames(), names.join(" "))
        .map_err(stdout_err)?;

    let frame_period = 1.0 / imu.frame_rate;
    let mut report = StreamReport { frames: Vec::new(), latencies: Vec::new(), compute_seconds: Vec::new(), underruns: 0, frame_period };
    let rate = cfg.stream.rate;
    let (tx, rx) = mpsc::sync_channel::<(usize, crate::synthesis::ImuFrame)>(cfg.stream.queue);
    std::thread::scope(|scope| -> Result<(), PipelineError> {
        let frames = &imu.frames;
        scope.spawn(move || {
            let start = Instant::now();
            for (i, f) in frames.iter().enumerate() {
                if rate > 0.0 {
                    let due = start + Duration::from_secs_f64(i as f64 / rate);
                    if let Some(wait) = due.checked_duration_since(Instant::now()) {
                        std::thread::sleep(wait);
                    }
                }
                if tx.send((i, *f)).is_err() {
                    break;
                }
            }
        });
        for (i, frame) in rx.iter() {
            let t0 = Instant::now();
            let estimate = est.push(&frame)?;
            let elapsed = t0.elapsed().as_secs_f64();
            report.compute_seconds.push(elapsed);
            if elapsed > frame_period {
                report.underruns += 1;
                log::warn!("underrun at input frame {}: {:.2} ms > {:.2} ms", imu.start_frame + i, elapsed * 1e3, frame_period * 1e3);
            }
            if let Some(e) = estimate {
                out.write_all(stream_line(&e).as_bytes()).map_err(stdout_err)?;
                report.latencies.push(imu.start_frame + i - e.frame);
                report.frames.push(e);
            }
        }
        Ok(())
    })?;
    out.flush().map_err(stdout_err)?;
    if let Some(path) = args.timing_csv {
        let mut csv = String::from("frame,compute_ms\n");
        for (i, s) in report.compute_seconds.iter().enumerate() {
            let _ = writeln!(csv, "{},{}", imu.start_frame + i, s * 1e3);
        }
        write_text(path, &csv)?;
    }
    log::info!(
        "streamed {} frames, latency {} frames, compute mean {:.2} ms max {:.2} ms, {} underruns",
        report.frames.len(),
        est.latency_frames(),
        report.mean_compute() * 1e3,
        report.max_compute() * 1e3,
        report.underruns
    );
    Ok(report)
}

fn stream_line(e: &EstimatedFrame) -> String {
    let pose = e.pose();
    let p = pose.root_position;
    let mut line = format!("{} {} {} {} {}", e.frame, e.timestamp, p.x, p.y, p.z);
    for r in &pose.local_rotations {
        let q = r.quaternion();
        let _ = write!(line, " {} {} {} {}", q.w, q.i, q.j, q.k);
    }
    line.push('\n');
    line
}

/// Reads the output of [`cmd_stream`] back into `(frame, pose)` pairs.
pub fn parse_stream(model: &KinematicModel, text: &str) -> Result<Vec<(usize, Pose)>, PipelineError> {
    let mut lines = text.lines();
    if lines.next() != Some(STREAM_FORMAT_VERSION) {
        return Err(PipelineError::Data(format!("stream does not start with '{STREAM_FORMAT_VERSION}'")));
    }
    let joints = model.joint_count();
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().skip(3) {
        let bad = |m: String| PipelineError::Data(format!("stream line {}: {m}", n + 2));
        let mut it = line.split_whitespace();
        let frame: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("missing frame index".into()))?;
        let vals: Vec<f64> = it.skip(1).map(|v| v.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| bad(e.to_string()))?;
        if vals.len() != 3 + 4 * joints {
            return Err(bad(format!("{} values, expected {}", vals.len(), 3 + 4 * joints)));
        }
        let mut pose = Pose::identity(model);
        pose.root_position = nalgebra::Vector3::new(vals[0], vals[1], vals[2]);
        for (j, r) in pose.local_rotations.iter_mut().enumerate() {
            let q = &vals[3 + 4 * j..7 + 4 * j];
            let uq = crate::body_model::unit_quaternion(q[0], q[1], q[2], q[3]).map_err(|e| bad(e.to_string()))?;
            *r = crate::body_model::Rotation::from_quaternion(&uq);
        }
        out.push((frame, pose));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EvaluateOutput {
    pub report: EvalReport,
    pub csv: PathBuf,
    pub table: PathBuf,
}

/// Pairs of prediction and ground-truth files. Directories are matched by
/// file name over their `.motion` files.
fn evaluation_pairs(pred: &Path, gt: &Path) -> Result<Vec<(PathBuf, PathBuf)>, PipelineError> {
    if pred.is_dir() && gt.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(pred)
            .map_err(|e| PipelineError::io(pred, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "motion"))
            .collect();
        files.sort();
        let pairs: Vec<_> = files
            .into_iter()
            .map(|p| {
                let g = gt.join(p.file_name().expect("file entry"));
                (p, g)
            })
            .collect();
        for (_, g) in &pairs {
            require_file(g, "ground-truth file")?;
        }
        if pairs.is_empty() {
            return Err(PipelineError::Data(format!("no .motion files in {}", pred.display())));
        }
        Ok(pairs)
    } else {
        require_file(pred, "prediction file")?;
        require_file(gt, "ground-truth file")?;
        Ok(vec![(pred.to_path_buf(), gt.to_path_buf())])
    }
}

/// Compares predictions against ground truth and writes `report.csv` and
/// `report.txt` under `paths.reports`. A prediction is aligned to the
/// ground-truth frames with the same motion-frame indices.
pub fn cmd_evaluate(cfg: &PipelineConfig, pred: &Path, gt: &Path) -> Result<EvaluateOutput, PipelineError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let mut items = Vec::new();
    for (p, g) in evaluation_pairs(pred, gt)? {
        let pm = read_motion(&model, &p)?;
        let gm = read_motion(&model, &g)?;
        let offset = pm.start_frame.checked_sub(gm.start_frame).filter(|o| o + pm.len() <= gm.len());
        let Some(offset) = offset else {
            return Err(MetricsError::LengthMismatch { a: pm.len(), b: gm.len().saturating_sub(pm.start_frame.saturating_sub(gm.start_frame)) }.into());
        };
        let gt_frames = &gm.frames[offset..offset + pm.len()];
        let samples = evaluate_sequence(&model, &pm.frames, gt_frames, pm.frame_rate, &EvalOptions::default())?;
        items.push(TaggedSamples { motion_type: gm.motion_type.or(pm.motion_type), samples });
    }
    let report = EvalReport::from_samples(&items);
    let csv = cfg.paths.reports.join("report.csv");
    let table = cfg.paths.reports.join("report.txt");
    write_text(&csv, &report.to_csv())?;
    write_text(&table, &report.to_table())?;
    Ok(EvaluateOutput { report, csv, table })
}

pub struct CalibrateArgs<'a> {
    pub imu: &'a Path,
    /// Motion file whose first frame is the held reference pose; the seated
    /// posture when absent.
    pub reference: Option<&'a Path>,
    /// IMU frame captured while the pose was held.
    pub frame: usize,
    /// Output record; `paths.calibration` when absent.
    pub out: Option<&'a Path>,
}

pub fn cmd_calibrate(cfg: &PipelineConfig, args: &CalibrateArgs<'_>) -> Result<(CalibrationResult, PathBuf), PipelineError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let out = args
        .out
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.calibration.clone())
        .ok_or_else(|| PipelineError::Config("no output path for the calibration record".into()))?;
    require_file(args.imu, "IMU file")?;
    let imu = read_imu(args.imu)?;
    let frame = imu
        .frames
        .get(args.frame)
        .ok_or_else(|| PipelineError::Data(format!("calibration frame {} is past the end ({} frames)", args.frame, imu.len())))?;
    let reference = match args.reference {
        Some(p) => {
            require_file(p, "reference pose file")?;
            read_motion(&model, p)?
                .frames
                .into_iter()
                .next()
                .ok_or_else(|| PipelineError::Data(format!("{} has no frames", p.display())))?
        }
        None => seated_base_pose(&model),
    };
    let cal = compute_calibration(frame, &reference, &model)?;
    write_text(&out, &cal.to_record())?;
    Ok((cal, out))
}
