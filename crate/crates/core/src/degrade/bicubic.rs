//! Antialiased bicubic resampling matrices (Keys kernel, a = -0.5) with
//! symmetric boundary handling.

fn cubic(x: f64) -> f64 {
    let a = x.abs();
    if a <= 1.0 {
        1.5 * a * a * a - 2.5 * a * a + 1.0
    } else if a <= 2.0 {
        -0.5 * a * a * a + 2.5 * a * a - 4.0 * a + 2.0
    } else {
        0.0
    }
}

/// Mirror index into `0..n`, repeating edge samples (`..., 1, 0, 0, 1, ...`).
fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Row-major `out_len x in_len` matrix resampling a 1-D signal. When
/// shrinking, the kernel is stretched by the inverse scale so it low-passes
/// before decimation. Rows sum to one.
pub fn resize_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let scale = out_len as f64 / in_len as f64;
    let (kscale, support) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    let taps = support.ceil() as i64 + 2;
    let mut m = vec![0.0; out_len * in_len];
    for i in 0..out_len {
        // Continuous source coordinate of the output sample centre, 0-based.
        let u = (i as f64 + 0.5) / scale - 0.5;
        let left = (u - support / 2.0).floor() as i64;
        let row = &mut m[i * in_len..(i + 1) * in_len];
        let mut total = 0.0;
        let mut w = Vec::with_capacity(taps as usize);
        for j in 0..taps {
            let idx = left + j;
            let v = kscale * cubic(kscale * (u - idx as f64));
            total += v;
            w.push((idx, v));
        }
        for (idx, v) in w {
            row[mirror(idx, in_len)] += v / total;
        }
    }
    m
}

/// `n x n` operator that shrinks by `factor` and enlarges back.
pub fn down_up_matrix(n: usize, factor: usize) -> Vec<f64> {
    let small = n / factor;
    let down = resize_matrix(n, small);
    let up = resize_matrix(small, n);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..small {
            let a = up[i * small + k];
            if a == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += a * down[k * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_normalised() {
        for (a, b) in [(64, 32), (64, 16), (16, 64), (8, 8)] {
            let m = resize_matrix(a, b);
            for row in m.chunks(a) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_size_is_identity() {
        let m = resize_matrix(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((m[i * 6 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn halving_averages_neighbour_pairs_symmetrically() {
        let m = resize_matrix(16, 8);
        // Interior row 4 is centred between source samples 8 and 9.
        let row = &m[4 * 16..5 * 16];
        assert!((row[8] - row[9]).abs() < 1e-12);
        assert!((row[7] - row[10]).abs() < 1e-12);
        assert!(row[8] > row[7]);
    }
}
