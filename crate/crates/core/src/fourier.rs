//! Centered, orthonormal 2-D Fourier transforms (DC at the array center).

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

fn transform_axis(data: &mut Array2<Complex64>, axis: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let n = data.shape()[axis];
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let scale = 1.0 / (n as f64).sqrt();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    // ifftshift -> (i)fft -> fftshift in both directions
    let (pre, post) = (n - n / 2, n / 2);
    for mut lane in data.lanes_mut(ndarray::Axis(axis)) {
        for (i, v) in lane.iter().enumerate() {
            buf[(i + pre) % n] = *v;
        }
        fft.process(&mut buf);
        for (i, v) in buf.iter().enumerate() {
            lane[(i + post) % n] = *v * scale;
        }
    }
}

/// Image -> k-space.
pub fn fft2c(image: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = image.clone();
    let mut planner = FftPlanner::new();
    transform_axis(&mut out, 0, false, &mut planner);
    transform_axis(&mut out, 1, false, &mut planner);
    out
}

/// K-space -> image.
pub fn ifft2c(kspace: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = kspace.clone();
    let mut planner = FftPlanner::new();
    transform_axis(&mut out, 0, true, &mut planner);
    transform_axis(&mut out, 1, true, &mut planner);
    out
}

/// Dense matrix of the 1-D centered orthonormal transform, row-major `[n, n]`,
/// split into real and imaginary parts. Column `j` is the transform of `e_j`.
pub fn centered_dft_matrix(n: usize, inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let mut planner = FftPlanner::new();
    let mut re = vec![0.0; n * n];
    let mut im = vec![0.0; n * n];
    for j in 0..n {
        let mut e = Array2::from_elem((n, 1), Complex64::new(0.0, 0.0));
        e[[j, 0]] = Complex64::new(1.0, 0.0);
        transform_axis(&mut e, 0, inverse, &mut planner);
        for k in 0..n {
            re[k * n + j] = e[[k, 0]].re;
            im[k * n + j] = e[[k, 0]].im;
        }
    }
    (re, im)
}
