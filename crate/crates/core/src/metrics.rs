//! Image-quality metrics and the Fréchet distance between feature populations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array, Array2, Dimension};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d, Tensor};
use crate::rng::rng_from;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `|gt - est| / |gt|`.
pub fn nrmse<D: Dimension>(gt: &Array<f64, D>, est: &Array<f64, D>) -> Result<f64> {
    same_shape(gt, est)?;
    let norm = gt.iter().map(|v| v * v).sum::<f64>();
    if norm == 0.0 {
        return Err(Error::UndefinedMetric("NRMSE of an all-zero reference".into()));
    }
    let err: f64 = gt.iter().zip(est).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((err / norm).sqrt())
}

/// `10 log10(range^2 / MSE)`; `+inf` when the images are identical.
pub fn psnr<D: Dimension>(gt: &Array<f64, D>, est: &Array<f64, D>, data_range: f64) -> Result<f64> {
    same_shape(gt, est)?;
    if !(data_range > 0.0) {
        return Err(Error::Contract(format!("data_range must be positive, got {data_range}")));
    }
    if gt.is_empty() {
        return Err(Error::UndefinedMetric("PSNR of empty images".into()));
    }
    let mse = gt.iter().zip(est).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / gt.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Summed-area table with a zero first row and column.
fn integral(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut s = Array2::zeros((h + 1, w + 1));
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += x[[i, j]];
            s[[i + 1, j + 1]] = s[[i, j + 1]] + row;
        }
    }
    s
}

fn window_means(x: &Array2<f64>, k: usize) -> Array2<f64> {
    let s = integral(x);
    let (h, w) = x.dim();
    let area = (k * k) as f64;
    Array2::from_shape_fn((h + 1 - k, w + 1 - k), |(i, j)| {
        (s[[i + k, j + k]] - s[[i, j + k]] - s[[i + k, j]] + s[[i, j]]) / area
    })
}

/// Mean SSIM over all fully contained `window x window` uniform windows, with
/// sample (unbiased) local variances and covariance.
pub fn ssim(gt: &Array2<f64>, est: &Array2<f64>, window: usize, data_range: f64) -> Result<f64> {
    same_shape(gt, est)?;
    let (h, w) = gt.dim();
    if window.is_multiple_of(2) || window < 3 || window > h.min(w) {
        return Err(Error::Contract(format!(
            "SSIM window must be odd, >= 3 and <= {}, got {window}",
            h.min(w)
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::Contract(format!("data_range must be positive, got {data_range}")));
    }
    let np = (window * window) as f64;
    let cov_norm = np / (np - 1.0);
    let mx = window_means(gt, window);
    let my = window_means(est, window);
    let mxx = window_means(&(gt * gt), window);
    let myy = window_means(&(est * est), window);
    let mxy = window_means(&(gt * est), window);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for ((((&ux, &uy), &xx), &yy), &xy) in mx.iter().zip(&my).zip(&mxx).zip(&myy).zip(&mxy) {
        let vx = cov_norm * (xx - ux * ux);
        let vy = cov_norm * (yy - uy * uy);
        let vxy = cov_norm * (xy - ux * uy);
        total += ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance of the rows.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Contract("cannot fit statistics to an empty feature set".into()));
        };
        let d = first.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Contract("feature vectors have different lengths".into()));
        }
        let n = rows.len();
        if n < d + 1 {
            log::warn!("{n} samples for {d} features: covariance is rank deficient");
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        let denom = (n.max(2) - 1) as f64;
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]) / denom;
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                cov[i * d + j] = cov[j * d + i];
            }
        }
        Ok(Self { mean, cov, n })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

/// Maps one image to a fixed-length feature vector.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, image: &Array2<f64>) -> Vec<f64>;
}

/// Fixed-seed random convolutional features of phase maps.
///
/// The phase enters as `(cos phi, sin phi)` so features do not see the wrap
/// seam. Each random 5x5 filter response goes through `tanh` and is averaged
/// over the four image quadrants, giving `4 * filters` features.
pub struct RandomConvExtractor {
    weights: Tensor<f64>,
    filters: usize,
    /// Images are average-pooled down to at most this side length first.
    pub max_side: usize,
}

impl RandomConvExtractor {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(4) {
            return Err(Error::Config(format!("feature dimension {dim} must be a positive multiple of 4")));
        }
        let filters = dim / 4;
        let mut rng = rng_from(seed);
        let bound = 1.0 / (2.0 * 25.0f64).sqrt();
        let w = (0..filters * 2 * 25).map(|_| rng.random_range(-bound..bound) * 3.0).collect();
        Ok(Self {
            weights: Tensor::new(&[filters, 2, 5, 5], w),
            filters,
            max_side: 64,
        })
    }
}

impl Default for RandomConvExtractor {
    fn default() -> Self {
        Self::new(0x5eed_f1d0, 64).expect("valid default dimension")
    }
}

fn pool_to(image: &Array2<f64>, max_side: usize) -> Array2<f64> {
    let (h, w) = image.dim();
    let f = h.max(w).div_ceil(max_side).max(1);
    if f == 1 {
        return image.clone();
    }
    let (oh, ow) = (h / f, w / f);
    Array2::from_shape_fn((oh.max(1), ow.max(1)), |(i, j)| {
        let mut s = 0.0;
        for a in 0..f {
            for b in 0..f {
                s += image[[(i * f + a).min(h - 1), (j * f + b).min(w - 1)]];
            }
        }
        s / (f * f) as f64
    })
}

impl FeatureExtractor for RandomConvExtractor {
    fn dim(&self) -> usize {
        4 * self.filters
    }

    fn extract(&self, image: &Array2<f64>) -> Vec<f64> {
        let cos = pool_to(&image.mapv(f64::cos), self.max_side);
        let sin = pool_to(&image.mapv(f64::sin), self.max_side);
        let (h, w) = cos.dim();
        let data: Vec<f64> = cos.iter().chain(sin.iter()).copied().collect();
        let y = conv2d(&Tensor::new(&[1, 2, h, w], data), &self.weights, 2);
        let (hh, hw) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = Vec::with_capacity(self.dim());
        for f in 0..self.filters {
            let plane = &y.data()[f * h * w..(f + 1) * h * w];
            for (r0, r1) in [(0, hh), (hh, h)] {
                for (c0, c1) in [(0, hw), (hw, w)] {
                    let mut s = 0.0;
                    let mut count = 0usize;
                    for i in r0..r1 {
                        for j in c0..c1 {
                            s += plane[i * w + j].tanh();
                            count += 1;
                        }
                    }
                    out.push(if count > 0 { s / count as f64 } else { 0.0 });
                }
            }
        }
        out
    }
}

pub fn embed_features(images: &[&Array2<f64>], extractor: &dyn FeatureExtractor) -> Result<FeatureStats> {
    if images.is_empty() {
        return Err(Error::Contract("cannot embed an empty image set".into()));
    }
    let rows: Vec<Vec<f64>> = images.iter().map(|im| extractor.extract(im)).collect();
    FeatureStats::from_features(&rows)
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if min < -1e-6 {
            return Err(Error::Numerical(format!(
                "{what} has eigenvalue {min:e}, not positive semidefinite"
            )));
        }
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(Error::Contract(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let root_a = psd_sqrt(&sa, "first covariance")?;
    psd_sqrt(&sb, "second covariance")?;
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut tr_sqrt = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -1e-6 {
            return Err(Error::Numerical(format!(
                "covariance product has eigenvalue {v:e}"
            )));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let diff = DVector::from_column_slice(&a.mean) - DVector::from_column_slice(&b.mean);
    let value = diff.norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normals;
    use proptest::prelude::*;

    fn random_image(seed: u64, h: usize, w: usize) -> Array2<f64> {
        let mut rng = rng_from(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn nrmse_examples() {
        let x = random_image(1, 8, 8);
        assert_eq!(nrmse(&x, &x).unwrap(), 0.0);
        assert!((nrmse(&x, &Array2::zeros((8, 8))).unwrap() - 1.0).abs() < 1e-15);
        assert!((nrmse(&x, &(&x * 2.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            nrmse(&Array2::zeros((2, 2)), &x.slice(ndarray::s![..2, ..2]).to_owned()),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn psnr_examples() {
        let x = random_image(2, 8, 8);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let shifted = &x + 0.1;
        assert!((psnr(&x, &shifted, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let diff = psnr(&x, &shifted, 2.0).unwrap() - psnr(&x, &shifted, 1.0).unwrap();
        assert!((diff - 20.0 * 2f64.log10()).abs() < 1e-12);
    }

    /// Direct per-window evaluation used as an oracle for the integral-image version.
    fn ssim_direct(x: &Array2<f64>, y: &Array2<f64>, k: usize, l: f64) -> f64 {
        let (h, w) = x.dim();
        let np = (k * k) as f64;
        let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..=h - k {
            for j in 0..=w - k {
                let xs: Vec<f64> = (0..k).flat_map(|a| (0..k).map(move |b| (a, b))).map(|(a, b)| x[[i + a, j + b]]).collect();
                let ys: Vec<f64> = (0..k).flat_map(|a| (0..k).map(move |b| (a, b))).map(|(a, b)| y[[i + a, j + b]]).collect();
                let mx = xs.iter().sum::<f64>() / np;
                let my = ys.iter().sum::<f64>() / np;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / (np - 1.0);
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / (np - 1.0);
                let cxy = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (np - 1.0);
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn ssim_matches_direct_windows() {
        let x = random_image(3, 12, 10);
        let y = random_image(4, 12, 10);
        let fast = ssim(&x, &y, 7, 1.0).unwrap();
        assert!((fast - ssim_direct(&x, &y, 7, 1.0)).abs() < 1e-12);
        assert!((ssim(&x, &x, 7, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Array2::from_elem((9, 9), 0.5);
        let b = Array2::from_elem((9, 9), 0.7);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let expect = (2.0 * 0.5 * 0.7 + c1) * c2 / ((0.25 + 0.49 + c1) * c2);
        assert!((ssim(&a, &b, 7, 1.0).unwrap() - expect).abs() < 1e-9);
        assert!(ssim(&a, &b, 6, 1.0).is_err());
        assert!(ssim(&a, &b, 11, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_scale_invariant(s1 in any::<u64>(), s2 in any::<u64>(), scale in 0.1f64..10.0) {
            let x = random_image(s1, 10, 10);
            let y = random_image(s2, 10, 10);
            let a = ssim(&x, &y, 7, 1.0).unwrap();
            prop_assert!((a - ssim(&y, &x, 7, 1.0).unwrap()).abs() < 1e-12);
            let b = ssim(&(&x * scale), &(&y * scale), 7, scale).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&a));
        }

        #[test]
        fn nrmse_and_psnr_orderings_are_reversed(s in any::<u64>(), e1 in 0.01f64..0.5, e2 in 0.01f64..0.5) {
            let x = random_image(s, 6, 6);
            let a = &x + e1;
            let b = &x - e2;
            let (na, nb) = (nrmse(&x, &a).unwrap(), nrmse(&x, &b).unwrap());
            let (pa, pb) = (psnr(&x, &a, 1.0).unwrap(), psnr(&x, &b, 1.0).unwrap());
            prop_assert_eq!(na < nb, pa > pb);
        }
    }

    fn stats_1d(mu: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mean: vec![mu],
            cov: vec![var],
            n: 100,
        }
    }

    #[test]
    fn frechet_scalar_cases() {
        assert!((frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(2.0, 1.0)).unwrap() - 4.0).abs() < 1e-8);
        assert!((frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-8);
        let bad = FeatureStats {
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 0.0, 0.0, 1.0],
            n: 3,
        };
        assert!(frechet_distance(&stats_1d(0.0, 1.0), &bad).is_err());
        assert!(matches!(
            frechet_distance(&stats_1d(0.0, -1.0), &stats_1d(0.0, 1.0)),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn frechet_of_random_stats() {
        let mut rng = rng_from(5);
        let rows = |rng: &mut crate::rng::StageRng, shift: f64| -> Vec<Vec<f64>> {
            (0..200).map(|_| standard_normals(rng, 6).into_iter().map(|v| v + shift).collect()).collect()
        };
        let a = FeatureStats::from_features(&rows(&mut rng, 0.0)).unwrap();
        let b = FeatureStats::from_features(&rows(&mut rng, 0.5)).unwrap();
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);
        let ab = frechet_distance(&a, &b).unwrap();
        assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-8);
        assert!(ab > 0.0);
    }

    #[test]
    fn feature_fit_on_standard_normals() {
        let mut rng = rng_from(6);
        let rows: Vec<Vec<f64>> = (0..1000).map(|_| standard_normals(&mut rng, 8)).collect();
        let s = FeatureStats::from_features(&rows).unwrap();
        assert!(s.mean.iter().all(|m| m.abs() < 0.1));
        for i in 0..8 {
            assert!((s.cov[i * 8 + i] - 1.0).abs() < 0.1);
        }
        for i in 0..8 {
            for j in 0..8 {
                assert!((s.cov[i * 8 + j] - s.cov[j * 8 + i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn extractor_is_deterministic_and_identical_images_have_zero_covariance() {
        let ex = RandomConvExtractor::default();
        assert_eq!(ex.dim(), 64);
        let img = random_image(7, 32, 32).mapv(|v| 6.0 * v - 3.0);
        assert_eq!(ex.extract(&img), RandomConvExtractor::default().extract(&img));
        let s = embed_features(&[&img, &img, &img], &ex).unwrap();
        assert!(s.cov.iter().all(|v| v.abs() < 1e-15));
        assert!(embed_features(&[], &ex).is_err());
    }
}
