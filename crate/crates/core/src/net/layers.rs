//! Dense and LSTM layers with explicit backward passes.
//!
//! Sequences are laid out time-major: a batch of `b` sequences of length `t`
//! is a `(t * b, features)` matrix whose row `step * b + k` is sequence `k` at
//! time `step`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::Scalar;

fn pack<F: Scalar>(w: &Array2<F>) -> F::Packed {
    let (k, n) = w.dim();
    let w = w.as_standard_layout();
    F::pack(w.as_slice().expect("standard layout"), k, n)
}

/// `x w + b` with `w` packed.
fn affine<F: Scalar>(x: &ArrayView2<F>, w: &F::Packed, b: &Array1<F>) -> Array2<F> {
    let mut y = Array2::zeros((x.nrows(), b.len()));
    y += b;
    let x = x.as_standard_layout();
    F::matmul_acc(w, x.as_slice().expect("standard layout"), y.as_slice_mut().expect("standard layout"), x.nrows());
    y
}

fn uniform<F: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), bound: f64) -> Array2<F> {
    Array2::from_shape_simple_fn(shape, || F::of(rng.random_range(-bound..=bound)))
}

fn uniform1<F: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Array1<F> {
    Array1::from_shape_simple_fn(n, || F::of(rng.random_range(-bound..=bound)))
}

/// `y = x w + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense { w: Array2::zeros((input, output)), b: Array1::zeros(output) }
    }

    /// Uniform in `±1/sqrt(input)`.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Dense { w: uniform(rng, (input, output), bound), b: uniform1(rng, output, bound) }
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> Array2<F> {
        affine(x, &pack(&self.w), &self.b)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &ArrayView2<F>, dy: &ArrayView2<F>, grad: &mut Dense<F>) -> Array2<F> {
        general_mat_mul(F::one(), &x.t(), dy, F::one(), &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

/// One direction of an LSTM. Gate blocks are ordered input, forget, cell,
/// output along the `4 * hidden` axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell<F> {
    pub w_ih: Array2<F>,
    pub w_hh: Array2<F>,
    pub b: Array1<F>,
}

/// Forward-pass state kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmCache<F> {
    /// Activated gates `[i, f, g, o]`, `(t * b, 4h)`.
    gates: Array2<F>,
    c: Array2<F>,
    tanh_c: Array2<F>,
    h: Array2<F>,
}

impl<F: Scalar> LstmCell<F> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCell { w_ih: Array2::zeros((input, 4 * hidden)), w_hh: Array2::zeros((hidden, 4 * hidden)), b: Array1::zeros(4 * hidden) }
    }

    /// Uniform in `±1/sqrt(hidden)`.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmCell {
            w_ih: uniform(rng, (input, 4 * hidden), bound),
            w_hh: uniform(rng, (hidden, 4 * hidden), bound),
            b: uniform1(rng, 4 * hidden, bound),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.nrows()
    }

    /// Runs the cell over `steps` time steps of a batch of `batch`
    /// sequences, from the last step to the first when `reverse` is set.
    /// Returns the hidden states in time-major layout.
    pub fn forward(&self, x: &ArrayView2<F>, steps: usize, batch: usize, reverse: bool) -> (Array2<F>, LstmCache<F>) {
        let packed = PackedCell::new(self);
        packed.run(x, steps, batch, reverse, steps)
    }

    /// Backpropagation through time. `dh` is the gradient of the loss with
    /// respect to every hidden state output. Accumulates into `grad` and
    /// returns `dL/dx`.
    pub fn backward(
        &self,
        x: &ArrayView2<F>,
        cache: &LstmCache<F>,
        dh: &ArrayView2<F>,
        steps: usize,
        batch: usize,
        reverse: bool,
        grad: &mut LstmCell<F>,
    ) -> Array2<F> {
        let hd = self.hidden();
        let rows = steps * batch;
        let time = |step: usize| if reverse { steps - 1 - step } else { step };
        let mut dz = Array2::<F>::zeros((rows, 4 * hd));
        let mut dh_rec = Array2::<F>::zeros((batch, hd));
        let mut dc_next = Array2::<F>::zeros((batch, hd));
        let one = F::one();

        for step in (0..steps).rev() {
            let t = time(step);
            let r0 = t * batch;
            let prev = (step > 0).then(|| time(step - 1) * batch);
            for b in 0..batch {
                let row = r0 + b;
                let g = cache.gates.row(row);
                let g = g.as_slice().expect("contiguous row");
                let mut dzr = dz.row_mut(row);
                let dzr = dzr.as_slice_mut().expect("contiguous row");
                for k in 0..hd {
                    let (i, f, gg, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
                    let tc = cache.tanh_c[[row, k]];
                    let dhv = dh[[row, k]] + dh_rec[[b, k]];
                    let d_o = dhv * tc;
                    let dc = dc_next[[b, k]] + dhv * o * (one - tc * tc);
                    let c_prev = prev.map_or(F::zero(), |p0| cache.c[[p0 + b, k]]);
                    dc_next[[b, k]] = dc * f;
                    dzr[k] = dc * gg * i * (one - i);
                    dzr[hd + k] = dc * c_prev * f * (one - f);
                    dzr[2 * hd + k] = dc * i * (one - gg * gg);
                    dzr[3 * hd + k] = d_o * o * (one - o);
                }
            }
            if step > 0 {
                let dzt = dz.slice(s![r0..r0 + batch, ..]);
                general_mat_mul(one, &dzt, &self.w_hh.t(), F::zero(), &mut dh_rec);
            }
        }

        // Hidden state that fed each step; zero for the first processed step.
        let mut h_prev = Array2::<F>::zeros((rows, hd));
        for step in 1..steps {
            let t = time(step);
            let p = time(step - 1);
            h_prev
                .slice_mut(s![t * batch..(t + 1) * batch, ..])
                .assign(&cache.h.slice(s![p * batch..(p + 1) * batch, ..]));
        }
        general_mat_mul(one, &h_prev.t(), &dz, one, &mut grad.w_hh);
        general_mat_mul(one, &x.t(), &dz, one, &mut grad.w_ih);
        grad.b += &dz.sum_axis(Axis(0));
        dz.dot(&self.w_ih.t())
    }
}

/// Forward and backward LSTM over the same input, outputs concatenated as
/// `[forward | backward]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm<F> {
    pub fwd: LstmCell<F>,
    pub bwd: LstmCell<F>,
}

#[derive(Clone, Debug)]
pub struct BiLstmCache<F> {
    fwd: LstmCache<F>,
    bwd: LstmCache<F>,
}

impl<F: Scalar> BiLstm<F> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        BiLstm { fwd: LstmCell::zeros(input, hidden), bwd: LstmCell::zeros(input, hidden) }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let fwd = LstmCell::init(input, hidden, rng);
        let bwd = LstmCell::init(input, hidden, rng);
        BiLstm { fwd, bwd }
    }

    pub fn forward(&self, x: &ArrayView2<F>, steps: usize, batch: usize) -> (Array2<F>, BiLstmCache<F>) {
        let hd = self.fwd.hidden();
        let (hf, cf) = self.fwd.forward(x, steps, batch, false);
        let (hb, cb) = self.bwd.forward(x, steps, batch, true);
        let mut out = Array2::<F>::zeros((steps * batch, 2 * hd));
        out.slice_mut(s![.., ..hd]).assign(&hf);
        out.slice_mut(s![.., hd..]).assign(&hb);
        (out, BiLstmCache { fwd: cf, bwd: cb })
    }

    pub fn backward(
        &self,
        x: &ArrayView2<F>,
        cache: &BiLstmCache<F>,
        dout: &ArrayView2<F>,
        steps: usize,
        batch: usize,
        grad: &mut BiLstm<F>,
    ) -> Array2<F> {
        let hd = self.fwd.hidden();
        let dhf = dout.slice(s![.., ..hd]).to_owned();
        let dhb = dout.slice(s![.., hd..]).to_owned();
        let mut dx = self.fwd.backward(x, &cache.fwd, &dhf.view(), steps, batch, false, &mut grad.fwd);
        dx += &self.bwd.backward(x, &cache.bwd, &dhb.view(), steps, batch, true, &mut grad.bwd);
        dx
    }
}

/// An LSTM direction with weights packed for the forward kernels.
#[derive(Clone, Debug)]
pub(crate) struct PackedCell<F: Scalar> {
    w_ih: F::Packed,
    w_hh: F::Packed,
    b: Array1<F>,
    hidden: usize,
}

impl<F: Scalar> PackedCell<F> {
    pub(crate) fn new(cell: &LstmCell<F>) -> Self {
        PackedCell { w_ih: pack(&cell.w_ih), w_hh: pack(&cell.w_hh), b: cell.b.clone(), hidden: cell.hidden() }
    }

    /// As [`LstmCell::forward`], stopping after the first `run` steps in
    /// processing order; later hidden states are left at zero.
    fn run(&self, x: &ArrayView2<F>, steps: usize, batch: usize, reverse: bool, run: usize) -> (Array2<F>, LstmCache<F>) {
        let hd = self.hidden;
        let rows = steps * batch;
        let mut gates = affine(x, &self.w_ih, &self.b);
        let w_hh = &self.w_hh;
        let mut c = Array2::<F>::zeros((rows, hd));
        let mut tanh_c = Array2::<F>::zeros((rows, hd));
        let mut h = Array2::<F>::zeros((rows, hd));
        let time = |step: usize| if reverse { steps - 1 - step } else { step };

        for step in 0..run.min(steps) {
            let t = time(step);
            let r0 = t * batch;
            let prev = (step > 0).then(|| time(step - 1) * batch);
            if let Some(p0) = prev {
                let h_prev = &h.as_slice().expect("standard layout")[p0 * hd..(p0 + batch) * hd];
                let z = &mut gates.as_slice_mut().expect("standard layout")[r0 * 4 * hd..(r0 + batch) * 4 * hd];
                F::matmul_acc(w_hh, h_prev, z, batch);
            }
            for b in 0..batch {
                let row = r0 + b;
                let g = gates.row_mut(row).into_slice().expect("contiguous row");
                F::sigmoid_in_place(&mut g[..2 * hd]);
                F::tanh_in_place(&mut g[2 * hd..3 * hd]);
                F::sigmoid_in_place(&mut g[3 * hd..]);
                let g = gates.row(row);
                let g = g.as_slice().expect("contiguous row");
                {
                    let c_prev: Option<Vec<F>> = prev.map(|p0| c.row(p0 + b).to_vec());
                    let ct = c.row_mut(row).into_slice().expect("contiguous row");
                    for k in 0..hd {
                        let cp = c_prev.as_ref().map_or(F::zero(), |v| v[k]);
                        ct[k] = g[hd + k] * cp + g[k] * g[2 * hd + k];
                    }
                }
                let tc = tanh_c.row_mut(row).into_slice().expect("contiguous row");
                tc.copy_from_slice(c.row(row).as_slice().expect("contiguous row"));
                F::tanh_in_place(tc);
                let hr = h.row_mut(row).into_slice().expect("contiguous row");
                for k in 0..hd {
                    hr[k] = g[3 * hd + k] * tc[k];
                }
            }
        }
        let out = h.clone();
        (out, LstmCache { gates, c, tanh_c, h })
    }

}

/// A dense layer with packed weights.
#[derive(Clone, Debug)]
pub(crate) struct PackedDense<F: Scalar> {
    w: F::Packed,
    b: Array1<F>,
}

impl<F: Scalar> PackedDense<F> {
    pub(crate) fn new(d: &Dense<F>) -> Self {
        PackedDense { w: pack(&d.w), b: d.b.clone() }
    }

    pub(crate) fn forward(&self, x: &ArrayView2<F>) -> Array2<F> {
        affine(x, &self.w, &self.b)
    }
}

/// A bidirectional layer with packed weights, for single sequences.
#[derive(Clone, Debug)]
pub(crate) struct PackedBiLstm<F: Scalar> {
    fwd: PackedCell<F>,
    bwd: PackedCell<F>,
}

impl<F: Scalar> PackedBiLstm<F> {
    pub(crate) fn new(l: &BiLstm<F>) -> Self {
        PackedBiLstm { fwd: PackedCell::new(&l.fwd), bwd: PackedCell::new(&l.bwd) }
    }

    /// Hidden states of one sequence of `steps` frames. With `only` set,
    /// just that row is computed; the others are zero.
    pub(crate) fn forward(&self, x: &ArrayView2<F>, steps: usize, only: Option<usize>) -> Array2<F> {
        let hd = self.fwd.hidden;
        let (nf, nb) = only.map_or((steps, steps), |t| (t + 1, steps - t));
        let (hf, _) = self.fwd.run(x, steps, 1, false, nf);
        let (hb, _) = self.bwd.run(x, steps, 1, true, nb);
        let mut out = Array2::<F>::zeros((steps, 2 * hd));
        out.slice_mut(s![.., ..hd]).assign(&hf);
        out.slice_mut(s![.., hd..]).assign(&hb);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_features() {
        let layer = BiLstm::<f64>::zeros(3, 4);
        let x = Array2::from_shape_fn((10, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let (out, _) = layer.forward(&x.view(), 5, 2);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mirrored_weights_meet_in_the_middle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::<f64>::init(3, 4, &mut rng);
        let layer = BiLstm { fwd: cell.clone(), bwd: cell };
        let frame = [0.2, -0.7, 1.1];
        let steps = 7;
        let x = Array2::from_shape_fn((steps, 3), |(_, j)| frame[j]);
        let (out, _) = layer.forward(&x.view(), steps, 1);
        let mid = out.row(steps / 2);
        for k in 0..4 {
            assert_eq!(mid[k], mid[4 + k]);
        }
    }

    #[test]
    fn single_row_path_matches_batched_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = LstmCell::<f64>::init(3, 5, &mut rng);
        let x1 = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        // Same sequence twice in a batch of two.
        let x2 = Array2::from_shape_fn((12, 3), |(r, j)| x1[[r / 2, j]]);
        let (h1, _) = cell.forward(&x1.view(), 6, 1, false);
        let (h2, _) = cell.forward(&x2.view(), 6, 2, false);
        for t in 0..6 {
            for k in 0..5 {
                assert!((h1[[t, k]] - h2[[2 * t, k]]).abs() < 1e-14);
                assert!((h1[[t, k]] - h2[[2 * t + 1, k]]).abs() < 1e-14);
            }
        }
    }
}
