use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(true);

// Below this many multiply-adds the rayon split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 16;

/// Enables or disables intra-op parallelism process-wide.
///
/// Row-partitioned kernels compute each output element with the same
/// operation sequence either way, so results are bit-identical; the switch
/// exists so deterministic runs can pin everything to one thread.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::SeqCst);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::SeqCst)
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `c[m×n] += a[m×k] · b[k×n]`, accumulating each output in order of `k`.
///
/// The sequential k-order matters: padded key positions contribute exact
/// zeros, so extending padding never changes real-position results.
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    let row = |(i, crow): (usize, &mut [f32])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], crow);
            }
        }
    };
    if n == 0 {
        return;
    }
    if parallel_enabled() && m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`.
pub(crate) fn gemm_nt(g: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
    let row = |(i, crow): (usize, &mut [f32])| {
        let grow = &g[i * n..(i + 1) * n];
        for (p, cp) in crow.iter_mut().enumerate() {
            *cp += dot(grow, &b[p * n..(p + 1) * n]);
        }
    };
    if k == 0 {
        return;
    }
    if parallel_enabled() && m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        c.chunks_mut(k).enumerate().for_each(row);
    }
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`.
pub(crate) fn gemm_tn(a: &[f32], g: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, grow, &mut c[p * n..(p + 1) * n]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive_loops() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f32 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-5);
            }
        }
        // aᵀ-side and bᵀ-side products
        let mut ga = vec![0.0; m * k];
        gemm_nt(&c, &b, &mut ga, m, n, k);
        let mut gb = vec![0.0; k * n];
        gemm_tn(&a, &c, &mut gb, m, k, n);
        for i in 0..m {
            for p in 0..k {
                let want: f32 = (0..n).map(|j| c[i * n + j] * b[p * n + j]).sum();
                assert!((ga[i * k + p] - want).abs() < 1e-4);
            }
        }
        for p in 0..k {
            for j in 0..n {
                let want: f32 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((gb[p * n + j] - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn parallel_switch_does_not_change_bits() {
        let (m, k, n) = (64, 64, 32);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.013).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.007).cos()).collect();
        let mut serial = vec![0.0; m * n];
        let mut par = vec![0.0; m * n];
        set_parallel(false);
        gemm_nn(&a, &b, &mut serial, m, k, n);
        set_parallel(true);
        gemm_nn(&a, &b, &mut par, m, k, n);
        assert_eq!(serial, par);
    }
}
