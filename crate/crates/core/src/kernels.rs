//! Convolution kernels shared by the plain forward functions and the tape ops.
//!
//! Every filter here uses "same" alignment: an odd `K`-tap filter with center
//! `c = (K−1)/2` produces `y[n] = Σ_k h[k]·x[n − k + c]`, with samples outside
//! the input treated as zero.

use num_complex::Complex64;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[inline]
fn at(x: &[Complex64], i: isize) -> Complex64 {
    if i >= 0 && (i as usize) < x.len() {
        x[i as usize]
    } else {
        ZERO
    }
}

#[inline]
fn at_real(x: &[f64], i: isize) -> f64 {
    if i >= 0 && (i as usize) < x.len() {
        x[i as usize]
    } else {
        0.0
    }
}

/// Direct `O(N·K)` complex convolution with arbitrary complex taps.
pub fn conv_same(x: &[Complex64], taps: &[Complex64]) -> Vec<Complex64> {
    let c = (taps.len() / 2) as isize;
    (0..x.len() as isize)
        .map(|n| {
            taps.iter()
                .enumerate()
                .fold(ZERO, |acc, (k, h)| acc + h * at(x, n - k as isize + c))
        })
        .collect()
}

/// Adjoint of [`conv_same`]: returns `(∂L/∂x, ∂L/∂taps)` given `∂L/∂y`.
pub fn conv_same_backward(
    x: &[Complex64],
    taps: &[Complex64],
    gy: &[Complex64],
) -> (Vec<Complex64>, Vec<Complex64>) {
    let c = (taps.len() / 2) as isize;
    let n = x.len() as isize;
    let mut gx = vec![ZERO; x.len()];
    let mut gh = vec![ZERO; taps.len()];
    for (k, h) in taps.iter().enumerate() {
        let hc = h.conj();
        let off = c - k as isize;
        let mut acc = ZERO;
        for i in 0..n {
            let j = i + off;
            if j >= 0 && j < n {
                let g = gy[i as usize];
                gx[j as usize] += hc * g;
                acc += x[j as usize].conj() * g;
            }
        }
        gh[k] = acc;
    }
    (gx, gh)
}

/// Expands `⌈K/2⌉` half taps of a symmetric filter to all `K` taps.
pub fn expand_half(half: &[Complex64]) -> Vec<Complex64> {
    let mut full = half.to_vec();
    full.extend(half.iter().rev().skip(1));
    full
}

/// Folded evaluation of a symmetric filter: mirrored input pairs are summed
/// before one multiply per half tap.
pub fn conv_folded(x: &[Complex64], half: &[Complex64]) -> Vec<Complex64> {
    let c = half.len() as isize - 1;
    (0..x.len() as isize)
        .map(|n| {
            let mut acc = ZERO;
            for (k, h) in half.iter().enumerate().take(half.len() - 1) {
                let d = c - k as isize;
                acc += h * (at(x, n + d) + at(x, n - d));
            }
            acc + half[c as usize] * x[n as usize]
        })
        .collect()
}

/// Adjoint of [`conv_folded`].
pub fn conv_folded_backward(
    x: &[Complex64],
    half: &[Complex64],
    gy: &[Complex64],
) -> (Vec<Complex64>, Vec<Complex64>) {
    let full = expand_half(half);
    let (gx, gfull) = conv_same_backward(x, &full, gy);
    let k = full.len();
    let gh = (0..half.len())
        .map(|i| {
            if i == half.len() - 1 {
                gfull[i]
            } else {
                gfull[i] + gfull[k - 1 - i]
            }
        })
        .collect();
    (gx, gh)
}

/// Real-tap convolution applied identically to real and imaginary parts.
pub fn conv_same_real_taps(x: &[Complex64], taps: &[f64]) -> Vec<Complex64> {
    let c = (taps.len() / 2) as isize;
    (0..x.len() as isize)
        .map(|n| {
            taps.iter()
                .enumerate()
                .fold(ZERO, |acc, (k, h)| acc + at(x, n - k as isize + c) * *h)
        })
        .collect()
}

/// Adjoint of [`conv_same_real_taps`].
pub fn conv_same_real_taps_backward(
    x: &[Complex64],
    taps: &[f64],
    gy: &[Complex64],
) -> (Vec<Complex64>, Vec<f64>) {
    let c = (taps.len() / 2) as isize;
    let n = x.len() as isize;
    let mut gx = vec![ZERO; x.len()];
    let mut gh = vec![0.0; taps.len()];
    for (k, h) in taps.iter().enumerate() {
        let off = c - k as isize;
        let mut acc = 0.0;
        for i in 0..n {
            let j = i + off;
            if j >= 0 && j < n {
                let g = gy[i as usize];
                gx[j as usize] += g * *h;
                acc += (x[j as usize].conj() * g).re;
            }
        }
        gh[k] = acc;
    }
    (gx, gh)
}

/// Real MIMO convolution: `out[i][n] = Σ_j Σ_k w[i][j][k]·x[j][n − k + c]`.
/// `w` is row-major `[s_out][s_in][len]`.
pub fn mimo_conv(x: &[Vec<f64>], w: &[f64], s_out: usize, len: usize) -> Vec<Vec<f64>> {
    let s_in = x.len();
    let n = x.first().map_or(0, |v| v.len());
    let c = (len / 2) as isize;
    let mut out = vec![vec![0.0; n]; s_out];
    for (i, o) in out.iter_mut().enumerate() {
        for (j, xj) in x.iter().enumerate() {
            let base = (i * s_in + j) * len;
            for k in 0..len {
                let wk = w[base + k];
                if wk == 0.0 {
                    continue;
                }
                let off = c - k as isize;
                for (t, ot) in o.iter_mut().enumerate() {
                    let v = at_real(xj, t as isize + off);
                    *ot += wk * v;
                }
            }
        }
    }
    out
}

/// Adjoint of [`mimo_conv`]: returns `(∂L/∂x, ∂L/∂w)`.
pub fn mimo_conv_backward(
    x: &[Vec<f64>],
    w: &[f64],
    s_out: usize,
    len: usize,
    gy: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let s_in = x.len();
    let n = x.first().map_or(0, |v| v.len()) as isize;
    let c = (len / 2) as isize;
    let mut gx = vec![vec![0.0; n as usize]; s_in];
    let mut gw = vec![0.0; w.len()];
    for (i, gyi) in gy.iter().enumerate().take(s_out) {
        for (j, xj) in x.iter().enumerate() {
            let base = (i * s_in + j) * len;
            for k in 0..len {
                let off = c - k as isize;
                let wk = w[base + k];
                let mut acc = 0.0;
                for t in 0..n {
                    let s = t + off;
                    if s >= 0 && s < n {
                        let g = gyi[t as usize];
                        acc += g * xj[s as usize];
                        gx[j][s as usize] += wk * g;
                    }
                }
                gw[base + k] = acc;
            }
        }
    }
    (gx, gw)
}

/// "Same"-aligned real FIR followed by sampling at `offset + m·step`.
pub fn fir_decimate(
    x: &[Complex64],
    taps: &[f64],
    offset: usize,
    step: usize,
    count: usize,
) -> Vec<Complex64> {
    let c = (taps.len() / 2) as isize;
    (0..count)
        .map(|m| {
            let n = (offset + m * step) as isize;
            taps.iter()
                .enumerate()
                .fold(ZERO, |acc, (k, h)| acc + at(x, n - k as isize + c) * *h)
        })
        .collect()
}

pub fn fir_decimate_backward(
    n_in: usize,
    taps: &[f64],
    offset: usize,
    step: usize,
    gy: &[Complex64],
) -> Vec<Complex64> {
    let c = (taps.len() / 2) as isize;
    let mut gx = vec![ZERO; n_in];
    for (m, g) in gy.iter().enumerate() {
        let n = (offset + m * step) as isize;
        for (k, h) in taps.iter().enumerate() {
            let j = n - k as isize + c;
            if j >= 0 && (j as usize) < n_in {
                gx[j as usize] += g * *h;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rc(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn folded_matches_full_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 1..6 {
            let x = rc(&mut rng, 40);
            let half = rc(&mut rng, k);
            let a = conv_folded(&x, &half);
            let b = conv_same(&x, &expand_half(&half));
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).norm() < 1e-14);
            }
        }
    }

    // <x, A^T y> == <A x, y> for every linear kernel
    #[test]
    fn adjoint_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rc(&mut rng, 30);
        let h = rc(&mut rng, 5);
        let gy = rc(&mut rng, 30);
        let y = conv_same(&x, &h);
        let (gx, gh) = conv_same_backward(&x, &h, &gy);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| (a.conj() * b).re).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| (a.conj() * b).re).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let rhs_h: f64 = h.iter().zip(&gh).map(|(a, b)| (a.conj() * b).re).sum();
        assert!((lhs - rhs_h).abs() < 1e-12);

        let taps: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = fir_decimate(&x, &taps, 3, 2, 12);
        let gy2 = rc(&mut rng, 12);
        let gx = fir_decimate_backward(30, &taps, 3, 2, &gy2);
        let lhs: f64 = y.iter().zip(&gy2).map(|(a, b)| (a.conj() * b).re).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| (a.conj() * b).re).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
