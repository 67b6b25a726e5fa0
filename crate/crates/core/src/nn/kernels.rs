//! Dense row-major kernels.
//!
//! Every output element is accumulated in a fixed order that depends only on
//! the element's own row, so a row gives bitwise-identical results whether it
//! is evaluated alone or inside a batch.

/// `out[r,:] = b + Σ_k x[r,k]·w[k,:]` for `x: n×k`, `w: k×m`.
pub fn affine(x: &[f64], w: &[f64], b: &[f64], k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(b.len(), m);
    let n = x.len() / k;
    debug_assert_eq!(out.len(), n * m);
    for (xr, or) in x.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        or.fill(0.0);
        for (xv, wr) in xr.iter().zip(w.chunks_exact(m)) {
            let xv = *xv;
            for (o, wv) in or.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
        for (o, bv) in or.iter_mut().zip(b) {
            *o += bv;
        }
    }
}

/// `out[r,:] = Σ_k x[r,k]·w[k,:]` (no bias).
pub fn linear(x: &[f64], w: &[f64], k: usize, m: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        or.fill(0.0);
        for (xv, wr) in xr.iter().zip(w.chunks_exact(m)) {
            let xv = *xv;
            for (o, wv) in or.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
}

/// `dw[k,:] += Σ_r x[r,k]·g[r,:]`.
pub fn accumulate_outer(x: &[f64], g: &[f64], k: usize, m: usize, dw: &mut [f64]) {
    for (xr, gr) in x.chunks_exact(k).zip(g.chunks_exact(m)) {
        for (xv, dwr) in xr.iter().zip(dw.chunks_exact_mut(m)) {
            let xv = *xv;
            if xv == 0.0 {
                continue;
            }
            for (d, gv) in dwr.iter_mut().zip(gr) {
                *d += xv * gv;
            }
        }
    }
}

/// `db[:] += Σ_r g[r,:]`.
pub fn accumulate_rows(g: &[f64], m: usize, db: &mut [f64]) {
    for gr in g.chunks_exact(m) {
        for (d, gv) in db.iter_mut().zip(gr) {
            *d += gv;
        }
    }
}

/// Row-major transpose of a `rows × cols` matrix.
pub fn transpose(w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = w[r * cols + c];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_matches_naive_and_is_row_independent() {
        let (n, k, m) = (5, 3, 4);
        let x: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).cos()).collect();
        let b: Vec<f64> = (0..m).map(|i| i as f64 * 0.1).collect();
        let mut out = vec![0.0; n * m];
        affine(&x, &w, &b, k, m, &mut out);
        for r in 0..n {
            for j in 0..m {
                let naive: f64 = (0..k).map(|kk| x[r * k + kk] * w[kk * m + j]).sum::<f64>() + b[j];
                assert!((out[r * m + j] - naive).abs() < 1e-14);
            }
            let mut single = vec![0.0; m];
            affine(&x[r * k..(r + 1) * k], &w, &b, k, m, &mut single);
            assert_eq!(&out[r * m..(r + 1) * m], single.as_slice());
        }
    }

    #[test]
    fn transpose_round_trip() {
        let w: Vec<f64> = (0..6).map(f64::from).collect();
        let t = transpose(&w, 2, 3);
        assert_eq!(t, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(transpose(&t, 3, 2), w);
    }
}
