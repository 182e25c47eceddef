//! Raw numeric kernels shared by tape forward and backward passes.
//!
//! All loops run with the output-row index outermost and the contiguous
//! dimension innermost so the compiler can vectorize them. Accumulation
//! order is fixed left-to-right for bit reproducibility.

use crate::scalar::Scalar;

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_nn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T  (B stored row-major as [n,k])
pub fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            c_row[j] += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]  (A stored row-major as [m,k])
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// out[i] = sum_j (a[i,j] - b[i,j])^2 over each row.
pub fn row_sq_dist<S: Scalar>(a: &[S], b: &[S], out: &mut [S], width: usize) {
    for (i, o) in out.iter_mut().enumerate() {
        let ar = &a[i * width..(i + 1) * width];
        let br = &b[i * width..(i + 1) * width];
        let mut acc = S::zero();
        for j in 0..width {
            let d = ar[j] - br[j];
            acc += d * d;
        }
        *o = acc;
    }
}

/// Squared Euclidean distance between two equal-length slices.
pub fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// out[s] = mean over rows listed in segment s of x, zero for empty segments.
///
/// Segment s covers `indices[offsets[s]..offsets[s+1]]`.
pub fn segment_mean_rows<S: Scalar>(
    x: &[S],
    width: usize,
    indices: &[u32],
    offsets: &[usize],
    out: &mut [S],
) {
    for s in 0..offsets.len() - 1 {
        let members = &indices[offsets[s]..offsets[s + 1]];
        if members.is_empty() {
            continue; // output pre-zeroed
        }
        let inv = S::one() / S::of_usize(members.len());
        let o = &mut out[s * width..(s + 1) * width];
        for &idx in members {
            let r = &x[idx as usize * width..(idx as usize + 1) * width];
            for j in 0..width {
                o[j] += r[j];
            }
        }
        for v in o.iter_mut() {
            *v *= inv;
        }
    }
}

/// Backward of `segment_mean_rows`: scatter g[s]/len into every member row.
pub fn segment_mean_rows_backward<S: Scalar>(
    g: &[S],
    width: usize,
    indices: &[u32],
    offsets: &[usize],
    dx: &mut [S],
) {
    for s in 0..offsets.len() - 1 {
        let members = &indices[offsets[s]..offsets[s + 1]];
        if members.is_empty() {
            continue;
        }
        let inv = S::one() / S::of_usize(members.len());
        let gr = &g[s * width..(s + 1) * width];
        for &idx in members {
            let d = &mut dx[idx as usize * width..(idx as usize + 1) * width];
            for j in 0..width {
                d[j] += gr[j] * inv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        matmul_nn_acc(&a, &b, &mut c, m, k, n);

        // nt: B^T stored as [n,k]
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_nt_acc(&a, &bt, &mut c2, m, k, n);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }

        // tn: A^T stored as [m,k], result [k,n] = A^T B equals naive
        let mut c3 = vec![0.0; k * n];
        matmul_tn_acc(&a, &b, &mut c3, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += a[i * k + p] * b[i * n + j];
                }
                assert!((c3[p * n + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn segment_mean_handles_empty_segments() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 3 rows x 2
        let indices = vec![0u32, 2];
        let offsets = vec![0usize, 1, 1, 2];
        let mut out = vec![0.0; 3 * 2];
        segment_mean_rows(&x, 2, &indices, &offsets, &mut out);
        assert_eq!(out, vec![1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
    }
}
