use ndarray::{concatenate, s, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::layers::{BiLstm, BiLstmCache, Dense, PackedBiLstm, PackedDense};
use super::{NetError, NetworkConfig, Scalar};
use crate::synthesis::NormalizedInput;

/// ReLU-activated input projection to the hidden size, two bidirectional
/// LSTM layers, and a linear head applied at every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage<F> {
    pub input: Dense<F>,
    pub lstm: [BiLstm<F>; 2],
    pub head: Dense<F>,
}

struct StageCache<F> {
    x: Array2<F>,
    pre: Array2<F>,
    relu: Array2<F>,
    l1: Array2<F>,
    c1: BiLstmCache<F>,
    l2: Array2<F>,
    c2: BiLstmCache<F>,
}

impl<F: Scalar> Stage<F> {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Stage {
            input: Dense::zeros(input, hidden),
            lstm: [BiLstm::zeros(hidden, hidden), BiLstm::zeros(2 * hidden, hidden)],
            head: Dense::zeros(2 * hidden, output),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let inp = Dense::init(input, hidden, rng);
        let l1 = BiLstm::init(hidden, hidden, rng);
        let l2 = BiLstm::init(2 * hidden, hidden, rng);
        let head = Dense::init(2 * hidden, output, rng);
        Stage { input: inp, lstm: [l1, l2], head }
    }

    fn forward(&self, x: Array2<F>, steps: usize, batch: usize) -> (Array2<F>, StageCache<F>) {
        let pre = self.input.forward(&x.view());
        let relu = pre.mapv(|v| if v > F::zero() { v } else { F::zero() });
        let (l1, c1) = self.lstm[0].forward(&relu.view(), steps, batch);
        let (l2, c2) = self.lstm[1].forward(&l1.view(), steps, batch);
        let y = self.head.forward(&l2.view());
        (y, StageCache { x, pre, relu, l1, c1, l2, c2 })
    }

    fn backward(
        &self,
        cache: &StageCache<F>,
        dy: &ArrayView2<F>,
        steps: usize,
        batch: usize,
        grad: &mut Stage<F>,
    ) -> Array2<F> {
        let dl2 = self.head.backward(&cache.l2.view(), dy, &mut grad.head);
        let dl1 = self.lstm[1].backward(&cache.l1.view(), &cache.c2, &dl2.view(), steps, batch, &mut grad.lstm[1]);
        let mut drelu = self.lstm[0].backward(&cache.relu.view(), &cache.c1, &dl1.view(), steps, batch, &mut grad.lstm[0]);
        drelu.zip_mut_with(&cache.pre, |d, &p| {
            if p <= F::zero() {
                *d = F::zero();
            }
        });
        self.input.backward(&cache.x.view(), &drelu.view(), &mut grad.input)
    }

    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = vec![
            ("input.w".to_string(), self.input.w.view().into_dyn()),
            ("input.b".to_string(), self.input.b.view().into_dyn()),
        ];
        for (l, bi) in self.lstm.iter().enumerate() {
            for (dir, cell) in [("fwd", &bi.fwd), ("bwd", &bi.bwd)] {
                out.push((format!("lstm{l}.{dir}.w_ih"), cell.w_ih.view().into_dyn()));
                out.push((format!("lstm{l}.{dir}.w_hh"), cell.w_hh.view().into_dyn()));
                out.push((format!("lstm{l}.{dir}.b"), cell.b.view().into_dyn()));
            }
        }
        out.push(("head.w".to_string(), self.head.w.view().into_dyn()));
        out.push(("head.b".to_string(), self.head.b.view().into_dyn()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        let mut out = vec![self.input.w.view_mut().into_dyn(), self.input.b.view_mut().into_dyn()];
        for bi in self.lstm.iter_mut() {
            for cell in [&mut bi.fwd, &mut bi.bwd] {
                out.push(cell.w_ih.view_mut().into_dyn());
                out.push(cell.w_hh.view_mut().into_dyn());
                out.push(cell.b.view_mut().into_dyn());
            }
        }
        out.push(self.head.w.view_mut().into_dyn());
        out.push(self.head.b.view_mut().into_dyn());
        out
    }
}

/// Current-frame outputs of every stage for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutput {
    pub stages: Vec<Vec<f64>>,
}

impl NetworkOutput {
    /// The final stage's output: the 6D pose vector.
    pub fn pose(&self) -> &[f64] {
        self.stages.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// A single-stage or three-stage network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<F> {
    pub config: NetworkConfig,
    /// Seed the weights were initialized from.
    pub seed: u64,
    pub stages: Vec<Stage<F>>,
}

pub(crate) struct ForwardCache<F> {
    stages: Vec<StageCache<F>>,
}

impl<F: Scalar> Network<F> {
    pub fn init<R: Rng + ?Sized>(config: &NetworkConfig, seed: u64, rng: &mut R) -> Result<Self, NetError> {
        config.validate()?;
        let stages = (0..config.stage_count())
            .map(|k| Stage::init(config.stage_input_dim(k), config.hidden[k], config.stage_outputs[k], rng))
            .collect();
        Ok(Network { config: config.clone(), seed, stages })
    }

    pub fn zeros(config: &NetworkConfig) -> Self {
        let stages = (0..config.stage_count())
            .map(|k| Stage::zeros(config.stage_input_dim(k), config.hidden[k], config.stage_outputs[k]))
            .collect();
        Network { config: config.clone(), seed: 0, stages }
    }

    pub fn zeros_like(&self) -> Self {
        Network { seed: self.seed, ..Self::zeros(&self.config) }
    }

    /// Every parameter tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(k, st)| st.tensors().into_iter().map(move |(n, t)| (format!("stage{k}.{n}"), t)))
            .collect()
    }

    /// Mutable views in the same order as [`Network::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        self.stages.iter_mut().flat_map(|st| st.tensors_mut()).collect()
    }

    /// Index range, within [`Network::tensors`], of stage `k`'s tensors.
    pub fn stage_tensor_range(&self, k: usize) -> std::ops::Range<usize> {
        let per = 16;
        k * per..(k + 1) * per
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Runs every stage over a time-major batch `x` of shape
    /// `(steps * batch, input_dim)`; returns each stage's per-frame output.
    pub(crate) fn forward_batch(&self, x: &ArrayView2<F>, steps: usize, batch: usize) -> (Vec<Array2<F>>, ForwardCache<F>) {
        let mut outputs: Vec<Array2<F>> = Vec::with_capacity(self.stages.len());
        let mut caches = Vec::with_capacity(self.stages.len());
        for (k, st) in self.stages.iter().enumerate() {
            let input = if k == 0 {
                x.to_owned()
            } else {
                concatenate(Axis(1), &[x.view(), outputs[k - 1].view()]).expect("matching rows")
            };
            let (y, cache) = st.forward(input, steps, batch);
            outputs.push(y);
            caches.push(cache);
        }
        (outputs, ForwardCache { stages: caches })
    }

    /// Backward pass from per-frame output gradients `dys`. With
    /// `through_stages` unset, no gradient flows from a stage into the
    /// previous stage's outputs.
    pub(crate) fn backward_batch(
        &self,
        cache: &ForwardCache<F>,
        mut dys: Vec<Array2<F>>,
        steps: usize,
        batch: usize,
        through_stages: bool,
        grad: &mut Network<F>,
    ) {
        let input_dim = self.config.input_dim;
        for k in (0..self.stages.len()).rev() {
            let dx = self.stages[k].backward(&cache.stages[k], &dys[k].view(), steps, batch, &mut grad.stages[k]);
            if k > 0 && through_stages {
                dys[k - 1] += &dx.slice(s![.., input_dim..]);
            }
        }
    }

    /// Runs one window and returns every stage's output at the current frame.
    pub fn predict_window(&self, frames: &[NormalizedInput]) -> Result<NetworkOutput, NetError> {
        self.predictor().predict_window(frames)
    }

    /// As [`Network::predict_window`] for a raw `(window, input_dim)` matrix.
    pub fn predict_rows(&self, x: &ArrayView2<F>) -> Result<NetworkOutput, NetError> {
        self.predictor().predict_rows(x)
    }

    /// Weights laid out for repeated single-window prediction. Predictions
    /// are identical to [`Network::predict_window`].
    pub fn predictor(&self) -> Predictor<F> {
        Predictor {
            config: self.config.clone(),
            stages: self
                .stages
                .iter()
                .map(|st| PackedStage {
                    input: PackedDense::new(&st.input),
                    lstm: [PackedBiLstm::new(&st.lstm[0]), PackedBiLstm::new(&st.lstm[1])],
                    head: PackedDense::new(&st.head),
                })
                .collect(),
        }
    }

    /// Converts between precisions, e.g. to run a gradient check on a copy
    /// of trained weights.
    pub fn cast<G: Scalar>(&self) -> Network<G> {
        let mut out = Network::<G>::zeros(&self.config);
        out.seed = self.seed;
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            let mut dst = dst;
            dst.zip_mut_with(&src, |d, &s| *d = G::of(s.f64()));
        }
        out
    }
}

#[derive(Clone, Debug)]
struct PackedStage<F: Scalar> {
    input: PackedDense<F>,
    lstm: [PackedBiLstm<F>; 2],
    head: PackedDense<F>,
}

/// A network prepared for streaming: one window at a time, only the current
/// frame's outputs. The last stage skips the hidden states the current
/// frame does not depend on.
#[derive(Clone, Debug)]
pub struct Predictor<F: Scalar> {
    pub config: NetworkConfig,
    stages: Vec<PackedStage<F>>,
}

impl<F: Scalar> Predictor<F> {
    pub fn predict_window(&self, frames: &[NormalizedInput]) -> Result<NetworkOutput, NetError> {
        let t = self.config.window.total();
        if frames.len() != t {
            return Err(NetError::ShapeMismatch(format!("window has {} frames, expected {t}", frames.len())));
        }
        if self.config.input_dim != frames[0].0.len() {
            return Err(NetError::ShapeMismatch(format!(
                "network takes {} inputs, frames carry {}",
                self.config.input_dim,
                frames[0].0.len()
            )));
        }
        let x = Array2::from_shape_fn((t, self.config.input_dim), |(i, j)| F::of(frames[i].0[j]));
        self.predict_rows(&x.view())
    }

    pub fn predict_rows(&self, x: &ArrayView2<F>) -> Result<NetworkOutput, NetError> {
        let t = self.config.window.total();
        if x.nrows() != t || x.ncols() != self.config.input_dim {
            return Err(NetError::ShapeMismatch(format!(
                "input is {}x{}, expected {t}x{}",
                x.nrows(),
                x.ncols(),
                self.config.input_dim
            )));
        }
        let cur = self.config.window.current();
        let last = self.stages.len() - 1;
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut prev: Option<Array2<F>> = None;
        for (k, st) in self.stages.iter().enumerate() {
            let input = match &prev {
                None => x.to_owned(),
                Some(p) => concatenate(Axis(1), &[x.view(), p.view()]).expect("matching rows"),
            };
            let relu = st.input.forward(&input.view()).mapv(|v| if v > F::zero() { v } else { F::zero() });
            let l1 = st.lstm[0].forward(&relu.view(), t, None);
            if k == last {
                let l2 = st.lstm[1].forward(&l1.view(), t, Some(cur));
                let y = st.head.forward(&l2.slice(s![cur..=cur, ..]));
                stages.push(y.row(0).iter().map(|v| v.f64()).collect());
            } else {
                let l2 = st.lstm[1].forward(&l1.view(), t, None);
                let y = st.head.forward(&l2.view());
                stages.push(y.row(cur).iter().map(|v| v.f64()).collect());
                prev = Some(y);
            }
        }
        Ok(NetworkOutput { stages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::WindowSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            variant: crate::net::Variant::ThreeStage,
            hidden: vec![4, 3, 5],
            input_dim: 48,
            stage_outputs: vec![9, 48, 96],
            window: WindowSpec { past: 3, future: 2 },
        }
    }

    #[test]
    fn output_sizes_follow_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::<f32>::init(&tiny(), 0, &mut rng).unwrap();
        let frames = vec![NormalizedInput([0.1; 48]); 6];
        let out = net.predict_window(&frames).unwrap();
        assert_eq!(out.stages.iter().map(Vec::len).collect::<Vec<_>>(), vec![9, 48, 96]);
        assert_eq!(net.tensors().len(), 48);
        assert!(net.predict_window(&frames[..5]).is_err());
    }

    #[test]
    fn stage_tensor_ranges_cover_each_stage() {
        let net = Network::<f32>::zeros(&tiny());
        let names: Vec<String> = net.tensors().into_iter().map(|(n, _)| n).collect();
        for k in 0..3 {
            for i in net.stage_tensor_range(k) {
                assert!(names[i].starts_with(&format!("stage{k}.")), "{}", names[i]);
            }
        }
    }

    #[test]
    fn prediction_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::<f32>::init(&tiny(), 5, &mut rng).unwrap();
        let frames: Vec<_> = (0..6).map(|i| NormalizedInput(std::array::from_fn(|j| ((i * 48 + j) as f64).cos()))).collect();
        assert_eq!(net.predict_window(&frames).unwrap(), net.predict_window(&frames).unwrap());
    }

    #[test]
    fn predictor_matches_the_training_forward_pass() {
        let mut cfg = tiny();
        cfg.hidden = vec![70, 3, 66];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Network::<f32>::init(&cfg, 6, &mut rng).unwrap();
        let x = Array2::from_shape_fn((6, 48), |(i, j)| ((i * 48 + j) as f32 * 0.37).sin());
        let (ys, _) = net.forward_batch(&x.view(), 6, 1);
        let out = net.predictor().predict_rows(&x.view()).unwrap();
        for (k, y) in ys.iter().enumerate() {
            let expected: Vec<f64> = y.row(3).iter().map(|v| v.f64()).collect();
            assert_eq!(out.stages[k], expected, "stage {k}");
        }
    }
}
