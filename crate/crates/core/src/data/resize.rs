use ndarray::{Array2, Axis};
use num_complex::Complex64;

/// Triangle-filter weights mapping `n_in` samples onto `n_out`, antialiased
/// when shrinking. Rows sum to one.
fn weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let support = scale.max(1.0);
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut w: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|i| {
                    let v = 1.0 - ((i as f64 - center) / support).abs();
                    (v > 0.0).then(|| (i.clamp(0, n_in as isize - 1) as usize, v))
                })
                .collect();
            let total: f64 = w.iter().map(|(_, v)| v).sum();
            for (_, v) in &mut w {
                *v /= total;
            }
            w
        })
        .collect()
}

fn resample_axis(x: &Array2<Complex64>, axis: usize, n_out: usize) -> Array2<Complex64> {
    let n_in = x.shape()[axis];
    if n_in == n_out {
        return x.clone();
    }
    let w = weights(n_in, n_out);
    let mut shape = [x.nrows(), x.ncols()];
    shape[axis] = n_out;
    let mut out = Array2::zeros(shape);
    for (src, mut dst) in x.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
        for (o, taps) in w.iter().enumerate() {
            dst[o] = taps.iter().map(|&(i, v)| src[i] * v).sum();
        }
    }
    out
}

/// Separable linear resampling of the real and imaginary parts.
pub fn resize_complex(x: &Array2<Complex64>, h: usize, w: usize) -> Array2<Complex64> {
    resample_axis(&resample_axis(x, 0, h), 1, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let x = Array2::from_elem((10, 7), Complex64::new(2.0, -1.0));
        for (h, w) in [(5, 3), (20, 14), (9, 7)] {
            let y = resize_complex(&x, h, w);
            assert!(y.iter().all(|v| (v - Complex64::new(2.0, -1.0)).norm() < 1e-12));
        }
    }

    #[test]
    fn halving_averages_pairs_of_a_ramp() {
        let x = Array2::from_shape_fn((1, 8), |(_, j)| Complex64::new(j as f64, 0.0));
        let y = resize_complex(&x, 1, 4);
        // interior samples of a linear ramp stay on the ramp
        for (o, v) in y.iter().enumerate().skip(1).take(2) {
            assert!((v.re - (2.0 * o as f64 + 0.5)).abs() < 1e-12);
        }
    }
}
