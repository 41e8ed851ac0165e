//! Mini-batch training with Adam, gradient clipping and an optional
//! stage-by-stage schedule.

use ndarray::{s, Array2, ArrayD, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::Network;
use super::targets::SequenceTargets;
use super::{NetError, NetworkConfig, Scalar};
use crate::synthesis::{ImuSequence, NormalizedInput};

/// How the stages of a multi-stage network share the training budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageSchedule {
    /// All stages at once on the equally weighted sum of their losses, with
    /// gradients flowing between stages.
    Joint,
    /// The epochs are split evenly; each part trains one stage on its own
    /// loss with earlier stages frozen.
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop as soon as an epoch's mean loss falls below this value.
    pub target_loss: Option<f64>,
    pub schedule: StageSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 100,
            seed: 0,
            clip_norm: Some(1.0),
            target_loss: None,
            schedule: StageSchedule::Joint,
        }
    }
}

/// Per-stage loss weights; zero switches a stage's loss off.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights(pub Vec<f64>);

/// Normalized inputs with aligned per-stage targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSequence {
    /// `(frames, input_dim)`.
    pub inputs: Array2<f64>,
    /// One `(frames, stage_output)` matrix per stage.
    pub targets: Vec<Array2<f64>>,
}

impl TrainingSequence {
    /// Pairs IMU frames with the targets of the same motion frames.
    pub fn new(
        config: &NetworkConfig,
        inputs: &[NormalizedInput],
        input_start_frame: usize,
        targets: &SequenceTargets,
    ) -> Result<Self, NetError> {
        let offset = input_start_frame
            .checked_sub(targets.start_frame)
            .filter(|o| o + inputs.len() <= targets.frames.len())
            .ok_or_else(|| {
                NetError::ShapeMismatch(format!(
                    "inputs cover frames {input_start_frame}..{} but targets cover {}..{}",
                    input_start_frame + inputs.len(),
                    targets.start_frame,
                    targets.start_frame + targets.frames.len()
                ))
            })?;
        let n = inputs.len();
        let dim = config.input_dim;
        if inputs.iter().any(|f| f.0.len() != dim) {
            return Err(NetError::ShapeMismatch("input width differs from the network's".into()));
        }
        let x = Array2::from_shape_fn((n, dim), |(i, j)| inputs[i].0[j]);
        let mut stage_targets: Vec<Array2<f64>> =
            config.stage_outputs.iter().map(|&d| Array2::zeros((n, d))).collect();
        for i in 0..n {
            let per_stage = targets.frames[offset + i].for_config(config);
            for (k, v) in per_stage.iter().enumerate() {
                if v.len() != config.stage_outputs[k] {
                    return Err(NetError::ShapeMismatch(format!(
                        "stage {k} target has {} values, network outputs {}",
                        v.len(),
                        config.stage_outputs[k]
                    )));
                }
                stage_targets[k].row_mut(i).iter_mut().zip(v).for_each(|(d, s)| *d = *s);
            }
        }
        Ok(TrainingSequence { inputs: x, targets: stage_targets })
    }

    pub fn from_imu(config: &NetworkConfig, imu: &ImuSequence, targets: &SequenceTargets) -> Result<Self, NetError> {
        let inputs = crate::synthesis::normalize_sequence(imu);
        Self::new(config, &inputs, imu.start_frame, targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Training sequences and every complete window over them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: NetworkConfig,
    pub sequences: Vec<TrainingSequence>,
    /// `(sequence, current frame)` for every window.
    pub windows: Vec<(usize, usize)>,
}

impl Dataset {
    /// Sequences shorter than a window contribute nothing.
    pub fn new(config: &NetworkConfig, sequences: Vec<TrainingSequence>) -> Self {
        let w = config.window;
        let mut windows = Vec::new();
        for (i, seq) in sequences.iter().enumerate() {
            if seq.len() >= w.total() {
                windows.extend((w.past..seq.len() - w.future).map(|t| (i, t)));
            }
        }
        Dataset { config: config.clone(), sequences, windows }
    }

    /// Keeps only the first `n` windows.
    pub fn truncated(mut self, n: usize) -> Self {
        self.windows.truncate(n);
        self
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Time-major inputs and current-frame targets for the given windows.
    fn batch<F: Scalar>(&self, windows: &[(usize, usize)]) -> (Array2<F>, Vec<Array2<F>>) {
        let spec = self.config.window;
        let steps = spec.total();
        let b = windows.len();
        let dim = self.config.input_dim;
        let mut x = Array2::<F>::zeros((steps * b, dim));
        for (k, &(seq, cur)) in windows.iter().enumerate() {
            let inputs = &self.sequences[seq].inputs;
            for step in 0..steps {
                let src = inputs.row(cur - spec.past + step);
                x.row_mut(step * b + k).iter_mut().zip(src).for_each(|(d, s)| *d = F::of(*s));
            }
        }
        let targets = (0..self.config.stage_count())
            .map(|st| {
                let d = self.config.stage_outputs[st];
                Array2::from_shape_fn((b, d), |(k, j)| {
                    let (seq, cur) = windows[k];
                    F::of(self.sequences[seq].targets[st][[cur, j]])
                })
            })
            .collect();
        (x, targets)
    }
}

/// Loss of a batch and, unless `grad` is `None`, its gradient.
fn batch_loss<F: Scalar>(
    net: &Network<F>,
    data: &Dataset,
    windows: &[(usize, usize)],
    weights: &LossWeights,
    through_stages: bool,
    grad: Option<&mut Network<F>>,
) -> (f64, Vec<f64>) {
    let steps = net.config.window.total();
    let b = windows.len();
    let cur = net.config.window.current();
    let (x, targets) = data.batch::<F>(windows);
    let (ys, cache) = net.forward_batch(&x.view(), steps, b);
    let mut stage_losses = Vec::with_capacity(ys.len());
    let mut dys = Vec::with_capacity(ys.len());
    let mut total = 0.0;
    for (k, (y, t)) in ys.iter().zip(&targets).enumerate() {
        let d = t.ncols();
        let pred = y.slice(s![cur * b..(cur + 1) * b, ..]);
        let mut sum = 0.0;
        Zip::from(&pred).and(t).for_each(|&p, &q| {
            let e = (p - q).f64();
            sum += e * e;
        });
        let loss = sum / (b * d) as f64;
        stage_losses.push(loss);
        total += weights.0[k] * loss;
        let mut dy = Array2::<F>::zeros(y.raw_dim());
        if weights.0[k] != 0.0 {
            let scale = F::of(2.0 * weights.0[k] / (b * d) as f64);
            let mut rows = dy.slice_mut(s![cur * b..(cur + 1) * b, ..]);
            Zip::from(&mut rows).and(&pred).and(t).for_each(|g, &p, &q| *g = (p - q) * scale);
        }
        dys.push(dy);
    }
    if let Some(g) = grad {
        net.backward_batch(&cache, dys, steps, b, through_stages, g);
    }
    (total, stage_losses)
}

/// Mean per-stage losses over the whole dataset, in batches of `batch_size`.
pub fn dataset_loss<F: Scalar>(net: &Network<F>, data: &Dataset, batch_size: usize) -> Vec<f64> {
    let mut sums = vec![0.0; net.config.stage_count()];
    let ones = LossWeights(vec![1.0; sums.len()]);
    for chunk in data.windows.chunks(batch_size.max(1)) {
        let (_, per) = batch_loss(net, data, chunk, &ones, true, None);
        for (s, l) in sums.iter_mut().zip(per) {
            *s += l * chunk.len() as f64;
        }
    }
    sums.iter().map(|s| s / data.len().max(1) as f64).collect()
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(net: &Network<F>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<ArrayD<F>> = net.tensors().iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect();
        Adam {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates the tensors whose index lies in `active`.
    pub fn update(&mut self, net: &mut Network<F>, grad: &Network<F>, active: std::ops::Range<usize>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = F::of(self.learning_rate * c2.sqrt() / c1);
        let eps = F::of(self.epsilon * c2.sqrt());
        let (fb1, fb2) = (F::of(b1), F::of(b2));
        let (ob1, ob2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let grads = grad.tensors();
        for (i, mut p) in net.tensors_mut().into_iter().enumerate() {
            if !active.contains(&i) {
                continue;
            }
            let g = &grads[i].1;
            Zip::from(&mut p).and(g).and(&mut self.m[i]).and(&mut self.v[i]).for_each(|p, &g, m, v| {
                *m = fb1 * *m + ob1 * g;
                *v = fb2 * *v + ob2 * g * g;
                *p = *p - lr * *m / (v.sqrt() + eps);
            });
        }
    }
}

fn clip_gradient<F: Scalar>(grad: &mut Network<F>, max_norm: f64) -> f64 {
    let norm = grad.tensors().iter().map(|(_, t)| t.iter().map(|v| v.f64() * v.f64()).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = F::of(max_norm / norm);
        for mut t in grad.tensors_mut() {
            t.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of every epoch run, measured during the epoch.
    pub losses: Vec<f64>,
    /// Per-stage losses of the last epoch.
    pub stage_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    pub fn epochs(&self) -> usize {
        self.losses.len()
    }

    /// `epoch,loss` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, l));
        }
        out
    }
}

/// Trains a freshly initialized network. Initialization and shuffling draw
/// from one generator seeded with `cfg.seed`.
pub fn train(netcfg: &NetworkConfig, cfg: &TrainConfig, data: &Dataset) -> Result<(Network<f32>, TrainReport), NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Network::<f32>::init(netcfg, cfg.seed, &mut rng)?;
    run(net, cfg, data, &mut rng)
}

/// Continues training from existing weights; every parameter is updated.
pub fn train_from<F: Scalar>(
    net: Network<F>,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<(Network<F>, TrainReport), NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run(net, cfg, data, &mut rng)
}

fn run<F: Scalar>(
    mut net: Network<F>,
    cfg: &TrainConfig,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<(Network<F>, TrainReport), NetError> {
    if data.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    if data.config != net.config {
        return Err(NetError::ShapeMismatch("dataset was built for a different network config".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(NetError::InvalidConfig("batch size and learning rate must be positive".into()));
    }
    let stages = net.config.stage_count();
    let mut adam = Adam::new(&net, cfg);
    let mut grad = net.zeros_like();
    let mut order = data.windows.clone();
    let mut report = TrainReport { losses: Vec::new(), stage_losses: vec![0.0; stages] };
    let per_phase = cfg.epochs.div_ceil(stages).max(1);

    for epoch in 0..cfg.epochs {
        let (weights, active, through) = match cfg.schedule {
            StageSchedule::Joint => (LossWeights(vec![1.0; stages]), 0..net.tensors().len(), true),
            StageSchedule::Sequential => {
                let phase = (epoch / per_phase).min(stages - 1);
                let mut w = vec![0.0; stages];
                w[phase] = 1.0;
                (LossWeights(w), net.stage_tensor_range(phase), false)
            }
        };
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut epoch_stage = vec![0.0; stages];
        for chunk in order.chunks(cfg.batch_size) {
            for mut t in grad.tensors_mut() {
                t.fill(F::zero());
            }
            let (loss, per) = batch_loss(&net, data, chunk, &weights, through, Some(&mut grad));
            if !loss.is_finite() {
                return Err(NetError::NonFiniteLoss { epoch, last_loss: report.final_loss() });
            }
            if let Some(c) = cfg.clip_norm {
                clip_gradient(&mut grad, c);
            }
            adam.update(&mut net, &grad, active.clone());
            epoch_loss += loss * chunk.len() as f64;
            for (s, l) in epoch_stage.iter_mut().zip(per) {
                *s += l * chunk.len() as f64;
            }
        }
        let n = data.len() as f64;
        let loss = epoch_loss / n;
        report.losses.push(loss);
        report.stage_losses = epoch_stage.iter().map(|s| s / n).collect();
        log::debug!("epoch {} loss {loss:.6e}", epoch + 1);
        if !net.is_finite() {
            return Err(NetError::NonFiniteLoss { epoch, last_loss: loss });
        }
        if cfg.target_loss.is_some_and(|t| loss < t) {
            break;
        }
    }
    Ok((net, report))
}

/// Compares the analytic gradient of the summed loss over the whole dataset
/// with central finite differences, element by element. Returns, for every
/// tensor, `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
pub fn gradient_check(net: &Network<f64>, data: &Dataset, eps: f64) -> Vec<(String, f64)> {
    let weights = LossWeights(vec![1.0; net.config.stage_count()]);
    let mut grad = net.zeros_like();
    batch_loss(net, data, &data.windows, &weights, true, Some(&mut grad));
    let names: Vec<String> = net.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<ArrayD<f64>> = grad.tensors().into_iter().map(|(_, t)| t.to_owned()).collect();
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = analytic[ti].len();
        let mut num = Vec::with_capacity(len);
        for e in 0..len {
            let original = probe.tensors()[ti].1.as_slice().expect("contiguous")[e];
            let set = |net: &mut Network<f64>, v: f64| {
                net.tensors_mut()[ti].as_slice_mut().expect("contiguous")[e] = v;
            };
            set(&mut probe, original + eps);
            let lp = batch_loss(&probe, data, &data.windows, &weights, true, None).0;
            set(&mut probe, original - eps);
            let lm = batch_loss(&probe, data, &data.windows, &weights, true, None).0;
            set(&mut probe, original);
            num.push((lp - lm) / (2.0 * eps));
        }
        let diff: f64 = analytic[ti].iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic[ti].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        out.push((name, if denom == 0.0 { 0.0 } else { diff / denom }));
    }
    out
}
