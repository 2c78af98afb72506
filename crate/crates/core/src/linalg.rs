// Row-major slice kernels used by the tensor engine and the memory layers.
//
// Matrix loops are written in axpy form (scale a contiguous row, add into a
// contiguous row) so they autovectorize without reassociating reductions:
// results are bit-identical regardless of SIMD width.

/// c = a @ b, a: [m,k], b: [k,n], c: [m,n]. Overwrites c.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k, "matmul: a length");
    assert_eq!(b.len(), k * n, "matmul: b length");
    assert_eq!(c.len(), m * n, "matmul: c length");
    c.fill(0.0);
    matmul_acc(a, b, c, m, k, n);
}

/// c += a @ b, a: [m,k], b: [k,n], c: [m,n].
///
/// Four rows of `a` are processed per pass so each row of `b` is loaded
/// once per block; every c[i,j] still accumulates over l in ascending
/// order, so results are bit-identical to the naive loop.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (a0, a1, a2, a3) = (
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        );
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        for l in 0..k {
            let b_row = &b[l * n..(l + 1) * n];
            let (x0, x1, x2, x3) = (a0[l], a1[l], a2[l], a3[l]);
            for j in 0..n {
                let bv = b_row[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += a_il * bv;
            }
        }
        i += 1;
    }
}

/// c += a^T @ b, a: [m,k], b: [m,n], c: [k,n].
///
/// Blocks of four input rows share one pass over c; each c[l,j] accumulates
/// over i in ascending order, bit-identical to the naive loop.
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    assert_eq!(c.len(), k * n);
    let mut i = 0;
    while i + 4 <= m {
        let (a0, a1, a2, a3) = (
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        );
        let (b0, b1, b2, b3) = (
            &b[i * n..(i + 1) * n],
            &b[(i + 1) * n..(i + 2) * n],
            &b[(i + 2) * n..(i + 3) * n],
            &b[(i + 3) * n..(i + 4) * n],
        );
        for l in 0..k {
            let c_row = &mut c[l * n..(l + 1) * n];
            let (x0, x1, x2, x3) = (a0[l], a1[l], a2[l], a3[l]);
            for j in 0..n {
                let mut acc = c_row[j];
                acc += x0 * b0[j];
                acc += x1 * b1[j];
                acc += x2 * b2[j];
                acc += x3 * b3[j];
                c_row[j] = acc;
            }
        }
        i += 4;
    }
    while i < m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            let c_row = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += a_il * bv;
            }
        }
        i += 1;
    }
}

/// c = a @ b^T, a: [m,k], b: [n,k], c: [m,n].
pub fn matmul_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out = a^T, a: [rows, cols], out: [cols, rows].
pub fn transpose(a: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    assert_eq!(a.len(), rows * cols);
    assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// Dot product, four independent accumulator lanes combined in a fixed
/// order (deterministic, and breaks the serial FMA dependency chain).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (ai, bi) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        lanes[0] += ai[0] * bi[0];
        lanes[1] += ai[1] * bi[1];
        lanes[2] += ai[2] * bi[2];
        lanes[3] += ai[3] * bi[3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// y += alpha * x.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x.iter()) {
        *yv += alpha * xv;
    }
}

/// w += u ⊗ v (w: [u.len(), v.len()], row-major).
pub fn outer_acc(u: &[f64], v: &[f64], w: &mut [f64]) {
    assert_eq!(w.len(), u.len() * v.len());
    let n = v.len();
    for (i, &ui) in u.iter().enumerate() {
        let row = &mut w[i * n..(i + 1) * n];
        for (wv, &vv) in row.iter_mut().zip(v.iter()) {
            *wv += ui * vv;
        }
    }
}

/// out = w @ x for w: [rows, cols], x: [cols].
pub fn matvec(w: &[f64], x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    assert_eq!(w.len(), rows * cols);
    assert_eq!(x.len(), cols);
    assert_eq!(out.len(), rows);
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&w[i * cols..(i + 1) * cols], x);
    }
}

/// out = w^T @ x for w: [rows, cols], x: [rows].
pub fn matvec_t(w: &[f64], x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    assert_eq!(w.len(), rows * cols);
    assert_eq!(x.len(), rows);
    assert_eq!(out.len(), cols);
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        axpy(xi, &w[i * cols..(i + 1) * cols], out);
    }
}

/// Euclidean norm.
pub fn norm2(x: &[f64]) -> f64 {
    crate::math::sqrt(dot(x, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec;

    #[test]
    fn matmul_identity() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let mut c = vec![0.0; 4];
        matmul(&eye, &b, &mut c, 2, 2, 2);
        assert_eq!(c, b);
    }

    #[test]
    fn matmul_projector() {
        let p = vec![1.0, 0.0, 0.0, 0.0];
        let b = vec![5.0, 7.0];
        let mut c = vec![0.0; 2];
        matmul(&p, &b, &mut c, 2, 2, 1);
        assert_eq!(c, vec![5.0, 0.0]);
    }

    #[test]
    fn at_b_matches_explicit_transpose() {
        let mut rng = Rng::new(3);
        let (m, k, n) = (5, 4, 6);
        let mut a = vec![0.0; m * k];
        let mut b = vec![0.0; m * n];
        rng.fill_gauss(&mut a, 1.0);
        rng.fill_gauss(&mut b, 1.0);
        let mut at = vec![0.0; k * m];
        transpose(&a, &mut at, m, k);
        let mut want = vec![0.0; k * n];
        matmul(&at, &b, &mut want, k, m, n);
        let mut got = vec![0.0; k * n];
        matmul_at_b_acc(&a, &b, &mut got, m, k, n);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matvec_pair() {
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let x = vec![1.0, 0.0, -1.0];
        let mut out = vec![0.0; 2];
        matvec(&w, &x, &mut out, 2, 3);
        assert_eq!(out, vec![-2.0, -2.0]);
        let y = vec![1.0, 1.0];
        let mut out_t = vec![0.0; 3];
        matvec_t(&w, &y, &mut out_t, 2, 3);
        assert_eq!(out_t, vec![5.0, 7.0, 9.0]);
    }
}
