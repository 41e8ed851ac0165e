//! Row-major `out += x w` for the forward pass. Windows are short (26
//! rows), where a general GEMM spends most of its time packing; these
//! kernels keep a block of output rows in registers and stream the weights
//! from column panels.
//!
//! Every output element is accumulated over `k` in order with fused
//! multiply-adds, so the result does not depend on how rows are blocked:
//! a window gives the same values alone or inside a batch.

#[inline(always)]
pub(crate) fn fmadd<F: num_traits::Float>(a: F, b: F, c: F) -> F {
    if cfg!(target_feature = "fma") {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

fn check(x: usize, w: usize, out: usize, m: usize, k: usize, n: usize) {
    assert_eq!(x, m * k, "x is not {m}x{k}");
    assert_eq!(w, k * n, "w is not {k}x{n}");
    assert_eq!(out, m * n, "out is not {m}x{n}");
}

/// A row-major `(k, n)` matrix.
#[derive(Clone, Debug)]
pub struct Plain<F> {
    w: Vec<F>,
    k: usize,
    n: usize,
}

impl<F: num_traits::Float> Plain<F> {
    pub(crate) fn new(w: &[F], k: usize, n: usize) -> Self {
        assert_eq!(w.len(), k * n, "w is not {k}x{n}");
        Plain { w: w.to_vec(), k, n }
    }

    pub(crate) fn matmul_acc(&self, x: &[F], out: &mut [F], m: usize) {
        matmul_acc_generic(x, &self.w, out, m, self.k, self.n);
    }
}

/// Plain row-major product, for any float type.
pub(crate) fn matmul_acc_generic<F: num_traits::Float>(x: &[F], w: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    check(x.len(), w.len(), out.len(), m, k, n);
    for r in 0..m {
        let o = &mut out[r * n..(r + 1) * n];
        for kk in 0..k {
            let xv = x[r * k + kk];
            for (oj, &wj) in o.iter_mut().zip(&w[kk * n..(kk + 1) * n]) {
                *oj = fmadd(xv, wj, *oj);
            }
        }
    }
}

/// Columns per panel.
const PANEL: usize = 64;

/// A `(k, n)` matrix stored as contiguous `(k, 64)` column panels followed
/// by the `(k, n mod 64)` remainder, so a column block streams from memory
/// instead of striding across rows.
#[derive(Clone, Debug)]
pub struct Panels {
    data: Vec<f32>,
    k: usize,
    n: usize,
}

impl Panels {
    pub(crate) fn new(w: &[f32], k: usize, n: usize) -> Self {
        assert_eq!(w.len(), k * n, "w is not {k}x{n}");
        let full = n / PANEL;
        let mut data = Vec::with_capacity(k * n);
        for p in 0..full {
            for kk in 0..k {
                data.extend_from_slice(&w[kk * n + p * PANEL..][..PANEL]);
            }
        }
        for kk in 0..k {
            data.extend_from_slice(&w[kk * n + full * PANEL..(kk + 1) * n]);
        }
        Panels { data, k, n }
    }

    fn panel(&self, p: usize) -> &[f32] {
        &self.data[p * self.k * PANEL..(p + 1) * self.k * PANEL]
    }

    fn full(&self) -> usize {
        self.n / PANEL
    }

    fn tail(&self) -> &[f32] {
        &self.data[self.full() * self.k * PANEL..]
    }

    /// `out += x w` with `x` of shape `(m, k)` and `out` of shape `(m, n)`.
    pub(crate) fn matmul_acc(&self, x: &[f32], out: &mut [f32], m: usize) {
        let (k, n) = (self.k, self.n);
        check(x.len(), self.data.len(), out.len(), m, k, n);
        let full = self.full();
        let mut done = 0;
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the features are present and the sizes were checked.
            unsafe { simd::matmul_acc(self, x, out, m) };
            done = full;
        }
        for p in done..full {
            let panel = self.panel(p);
            for r in 0..m {
                let o = &mut out[r * n + p * PANEL..][..PANEL];
                for kk in 0..k {
                    let xv = x[r * k + kk];
                    for (oj, &wj) in o.iter_mut().zip(&panel[kk * PANEL..(kk + 1) * PANEL]) {
                        *oj = fmadd(xv, wj, *oj);
                    }
                }
            }
        }
        let t = n - full * PANEL;
        if t > 0 {
            let tail = self.tail();
            for r in 0..m {
                let o = &mut out[r * n + full * PANEL..(r + 1) * n];
                for kk in 0..k {
                    let xv = x[r * k + kk];
                    for (oj, &wj) in o.iter_mut().zip(&tail[kk * t..(kk + 1) * t]) {
                        *oj = fmadd(xv, wj, *oj);
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    use super::{Panels, PANEL};

    const LANES: usize = 8;
    const V: usize = PANEL / LANES;

    /// Every full panel; the tail is left to the caller.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn matmul_acc(w: &Panels, x: &[f32], out: &mut [f32], m: usize) {
        let (k, n) = (w.k, w.n);
        let (x, out) = (x.as_ptr(), out.as_mut_ptr());
        let full = w.full();
        let mut p = 0;
        if m == 1 {
            // Two panels at once keeps eight independent accumulators.
            while p + 2 <= full {
                block::<1, 2>(x, [w.panel(p).as_ptr(), w.panel(p + 1).as_ptr()], out, 0, p, k, n);
                p += 2;
            }
        }
        while p < full {
            let panel = [w.panel(p).as_ptr()];
            let mut r0 = 0;
            while r0 + 4 <= m {
                block::<4, 1>(x, panel, out, r0, p, k, n);
                r0 += 4;
            }
            match m - r0 {
                1 => block::<1, 1>(x, panel, out, r0, p, k, n),
                2 => block::<2, 1>(x, panel, out, r0, p, k, n),
                3 => block::<3, 1>(x, panel, out, r0, p, k, n),
                _ => {}
            }
            p += 1;
        }
    }

    /// Rows `r0..r0 + R` against panels `p0..p0 + P`.
    #[target_feature(enable = "avx2,fma")]
    #[inline]
    unsafe fn block<const R: usize, const P: usize>(
        x: *const f32,
        panels: [*const f32; P],
        out: *mut f32,
        r0: usize,
        p0: usize,
        k: usize,
        n: usize,
    ) {
        let col = |r: usize, q: usize, v: usize| (r0 + r) * n + (p0 + q) * PANEL + v * LANES;
        let mut acc = [[[_mm256_setzero_ps(); V]; P]; R];
        for (r, a) in acc.iter_mut().enumerate() {
            for (q, aq) in a.iter_mut().enumerate() {
                for (v, av) in aq.iter_mut().enumerate() {
                    *av = _mm256_loadu_ps(out.wrapping_add(col(r, q, v)));
                }
            }
        }
        for kk in 0..k {
            let mut wv = [[_mm256_setzero_ps(); V]; P];
            for (q, wq) in wv.iter_mut().enumerate() {
                for (v, w) in wq.iter_mut().enumerate() {
                    *w = _mm256_loadu_ps(panels[q].wrapping_add(kk * PANEL + v * LANES));
                }
            }
            for (r, a) in acc.iter_mut().enumerate() {
                let xv = _mm256_broadcastss_ps(_mm_load_ss(x.wrapping_add((r0 + r) * k + kk)));
                for q in 0..P {
                    for v in 0..V {
                        a[q][v] = _mm256_fmadd_ps(xv, wv[q][v], a[q][v]);
                    }
                }
            }
        }
        for (r, a) in acc.iter().enumerate() {
            for (q, aq) in a.iter().enumerate() {
                for (v, av) in aq.iter().enumerate() {
                    _mm256_storeu_ps(out.wrapping_add(col(r, q, v)), *av);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], out: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut expected = out.to_vec();
        for r in 0..m {
            for c in 0..n {
                expected[r * n + c] += (0..k).map(|i| x[r * k + i] * w[i * n + c]).sum::<f64>();
            }
        }
        expected
    }

    const SHAPES: [(usize, usize, usize); 7] = [(1, 3, 5), (26, 48, 256), (7, 17, 130), (4, 1, 64), (9, 33, 9), (1, 40, 1024), (3, 5, 200)];

    fn data(m: usize, k: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x = (0..m * k).map(|i| ((i * 37 % 101) as f64 - 50.0) / 17.0).collect();
        let w = (0..k * n).map(|i| ((i * 53 % 89) as f64 - 44.0) / 13.0).collect();
        let out = (0..m * n).map(|i| i as f64 * 0.5).collect();
        (x, w, out)
    }

    #[test]
    fn generic_matches_naive_product() {
        for &(m, k, n) in &SHAPES {
            let (x, w, mut out) = data(m, k, n);
            let expected = naive(&x, &w, &out, m, k, n);
            matmul_acc_generic(&x, &w, &mut out, m, k, n);
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{m}x{k}x{n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn f32_kernel_matches_naive_product_and_ignores_blocking() {
        for &(m, k, n) in &SHAPES {
            let (x, w, out) = data(m, k, n);
            let expected = naive(&x, &w, &out, m, k, n);
            let (x, w, mut out): (Vec<f32>, Vec<f32>, Vec<f32>) = (
                x.iter().map(|&v| v as f32).collect(),
                w.iter().map(|&v| v as f32).collect(),
                out.iter().map(|&v| v as f32).collect(),
            );
            let start = out.clone();
            let panels = Panels::new(&w, k, n);
            panels.matmul_acc(&x, &mut out, m);
            for (a, b) in out.iter().zip(&expected) {
                assert!((*a as f64 - b).abs() < 1e-4 * (1.0 + b.abs()), "{m}x{k}x{n}: {a} vs {b}");
            }
            for r in 0..m {
                let mut row = start[r * n..(r + 1) * n].to_vec();
                panels.matmul_acc(&x[r * k..(r + 1) * k], &mut row, 1);
                assert_eq!(row, out[r * n..(r + 1) * n], "row {r} of {m}x{k}x{n}");
            }
        }
    }
}
