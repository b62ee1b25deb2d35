// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-precision kernels shared by inference and training.

pub(crate) const RMS_EPS: f32 = 1e-6;

/// Strided read-only view used to describe GEMM operands.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Row-major `rows × cols` matrix.
    pub fn rm(data: &'a [f32], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn tr(data: &'a [f32], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }

    pub fn at(self, offset: usize) -> Self {
        View { offset, ..self }
    }

    pub fn t(self) -> Self {
        View {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "gemm operand out of bounds");
        }
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]`, `c` row-major with row stride `ldc`
/// starting at `c_off`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_>,
    b: View<'_>,
    beta: f32,
    c: &mut [f32],
    c_off: usize,
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        c_off + (m - 1) * ldc + n <= c.len(),
        "gemm output out of bounds"
    );
    if k == 0 {
        for i in 0..m {
            c[c_off + i * ldc..c_off + i * ldc + n]
                .iter_mut()
                .for_each(|v| *v *= beta);
        }
        return;
    }
    a.check(m, k);
    b.check(k, n);
    // SAFETY: every operand region was bounds-checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            ldc as isize,
            1,
        );
    }
}

/// `y[t×out] = x[t×in] · wᵀ` for a row-major `out × in` weight.
pub(crate) fn linear(x: &[f32], t: usize, w: &[f32], out: usize, inp: usize) -> Vec<f32> {
    let mut y = vec![0.0; t * out];
    gemm(
        t,
        inp,
        out,
        View::rm(x, inp),
        View::tr(w, inp),
        0.0,
        &mut y,
        0,
        out,
    );
    y
}

/// [`linear`] accumulated in double precision and rounded once at the end.
pub(crate) fn linear_f64(x: &[f32], t: usize, w: &[f32], out: usize, inp: usize) -> Vec<f32> {
    if t == 0 || out == 0 {
        return Vec::new();
    }
    if inp == 0 {
        return vec![0.0; t * out];
    }
    assert!(
        x.len() >= t * inp && w.len() >= out * inp,
        "linear operand out of bounds"
    );
    let xd: Vec<f64> = x[..t * inp].iter().map(|&v| f64::from(v)).collect();
    let wd: Vec<f64> = w[..out * inp].iter().map(|&v| f64::from(v)).collect();
    let mut y = vec![0.0f64; t * out];
    // SAFETY: operand lengths were checked above; strides describe row-major
    // x (t × inp), the transpose of row-major w (out × inp) and row-major y.
    unsafe {
        matrixmultiply::dgemm(
            t,
            inp,
            out,
            1.0,
            xd.as_ptr(),
            inp as isize,
            1,
            wd.as_ptr(),
            1,
            inp as isize,
            0.0,
            y.as_mut_ptr(),
            out as isize,
            1,
        );
    }
    y.into_iter().map(|v| v as f32).collect()
}

/// Row-wise RMS normalization followed by elementwise scale. Returns the
/// output and each row's inverse RMS.
pub(crate) fn rms_norm(x: &[f32], d: usize, scale: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let t = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut inv = vec![0.0; t];
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        inv[r] = s;
        for ((o, v), g) in out[r * d..(r + 1) * d].iter_mut().zip(row).zip(scale) {
            *o = v * s * g;
        }
    }
    (out, inv)
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// In-place softmax of a row with only the first `valid` entries unmasked.
pub(crate) fn masked_softmax(row: &mut [f32], valid: usize) {
    let max = row[..valid]
        .iter()
        .copied()
        .fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in &mut row[..valid] {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row[..valid].iter_mut().for_each(|v| *v *= inv);
    row[valid..].iter_mut().for_each(|v| *v = 0.0);
}

/// Causal multi-head attention over `t` positions. `q`, `k`, `v` are
/// `t × d` with heads laid out contiguously along the feature axis.
/// Returns the concatenated head outputs and the per-head probability
/// matrices (`n_heads × t × t`).
pub(crate) fn causal_attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    t: usize,
    d: usize,
    n_heads: usize,
) -> (Vec<f32>, Vec<f32>) {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = vec![0.0; n_heads * t * t];
    let mut out = vec![0.0; t * d];
    for h in 0..n_heads {
        let p_off = h * t * t;
        gemm(
            t,
            dh,
            t,
            View::rm(q, d).at(h * dh),
            View::tr(k, d).at(h * dh),
            0.0,
            &mut probs,
            p_off,
            t,
        );
        for i in 0..t {
            let row = &mut probs[p_off + i * t..p_off + (i + 1) * t];
            row[..=i].iter_mut().for_each(|s| *s *= scale);
            masked_softmax(row, i + 1);
        }
        gemm(
            t,
            t,
            dh,
            View::rm(&probs, t).at(p_off),
            View::rm(v, d).at(h * dh),
            0.0,
            &mut out,
            h * dh,
            d,
        );
    }
    (out, probs)
}
