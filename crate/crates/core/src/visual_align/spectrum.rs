//! Orthonormal 2-D DCT pair used by the spectrum-simulation augmentation.
//!
//! `idct2(dct2(x)) == x` up to float round-off, so scaling the coefficients
//! between the two transforms is the only source of change.

/// Orthonormal DCT-II matrix of size `n x n` (row-major).
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let norm0 = (1.0 / n as f64).sqrt();
    let norm = (2.0 / n as f64).sqrt();
    for k in 0..n {
        let s = if k == 0 { norm0 } else { norm };
        for j in 0..n {
            m[k * n + j] =
                s * (std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// `out = a (h x k) * b (k x w)`, row-major.
fn matmul(a: &[f64], b: &[f64], h: usize, k: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let row = &b[l * w..(l + 1) * w];
            let dst = &mut out[i * w..(i + 1) * w];
            for (o, &bv) in dst.iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out = a (h x k) * b^T` where `b` is `w x k`, row-major.
fn matmul_bt(a: &[f64], b: &[f64], h: usize, k: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let arow = &a[i * k..(i + 1) * k];
        for l in 0..w {
            let brow = &b[l * k..(l + 1) * k];
            out[i * w + l] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out = a^T (k x h -> h x k) * b (k x w)`; `a` is `k x h` row-major.
fn matmul_at(a: &[f64], b: &[f64], h: usize, k: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for l in 0..k {
        let arow = &a[l * h..(l + 1) * h];
        let brow = &b[l * w..(l + 1) * w];
        for i in 0..h {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let dst = &mut out[i * w..(i + 1) * w];
            for (o, &bv) in dst.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// 2-D DCT-II of an `h x w` plane: `D_h X D_w^T`.
pub fn dct2(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let dh = dct_matrix(h);
    let dw = dct_matrix(w);
    let tmp = matmul(&dh, plane, h, h, w);
    matmul_bt(&tmp, &dw, h, w, w)
}

/// Inverse of [`dct2`]: `D_h^T Y D_w`.
pub fn idct2(coeffs: &[f64], h: usize, w: usize) -> Vec<f64> {
    let dh = dct_matrix(h);
    let dw = dct_matrix(w);
    let tmp = matmul_at(&dh, coeffs, h, h, w);
    matmul(&tmp, &dw, h, w, w)
}
