use std::rc::Rc;

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fourier::centered_dft_matrix;
use crate::mask::SamplingMask;
use crate::metrics::{SSIM_K1, SSIM_K2};
use crate::nn::{Bound, Conv2d, ParamId, ParamStore, Scalar, Tensor, Var};

use super::CascadeConfig;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const SSIM_WINDOW: usize = 7;
/// Keeps the magnitude differentiable at zero.
pub const MAGNITUDE_EPS: f64 = 1e-12;

/// `k' = k - eta * mask * (k - y)`, evaluated as `(k - eta k) + eta y` on sampled
/// lines so that `eta = 1` reproduces `y` bit for bit.
pub fn data_consistency(
    k: &Array2<Complex64>,
    y: &Array2<Complex64>,
    mask: &SamplingMask,
    eta: f64,
) -> Result<Array2<Complex64>> {
    if k.dim() != y.dim() {
        return Err(Error::Contract(format!(
            "k-space shapes differ: {:?} vs {:?}",
            k.dim(),
            y.dim()
        )));
    }
    if k.ncols() != mask.len() {
        return Err(Error::Contract(format!(
            "mask length {} does not match {} phase-encode lines",
            mask.len(),
            k.ncols()
        )));
    }
    let mut out = k.clone();
    for (j, &keep) in mask.lines.iter().enumerate() {
        if keep {
            for (o, &yv) in out.column_mut(j).iter_mut().zip(y.column(j)) {
                *o = (*o - *o * eta) + yv * eta;
            }
        }
    }
    Ok(out)
}

struct ComplexMatrix<T> {
    re: Rc<Tensor<T>>,
    im: Rc<Tensor<T>>,
}

impl<T: Scalar> ComplexMatrix<T> {
    fn new(n: usize, inverse: bool, transpose: bool) -> Self {
        let (re, im) = centered_dft_matrix(n, inverse);
        let pick = |v: &[f64]| {
            let data: Vec<f64> = if transpose {
                (0..n * n).map(|i| v[(i % n) * n + i / n]).collect()
            } else {
                v.to_vec()
            };
            Rc::new(Tensor::from_f64(&[n, n], &data))
        };
        Self {
            re: pick(&re),
            im: pick(&im),
        }
    }
}

/// Centered orthonormal 2-D transform on split real/imaginary tensors:
/// `K = C_H X C_W^T`.
pub(crate) struct Dft<T> {
    fwd_h: ComplexMatrix<T>,
    fwd_wt: ComplexMatrix<T>,
    inv_h: ComplexMatrix<T>,
    inv_wt: ComplexMatrix<T>,
}

impl<T: Scalar> Dft<T> {
    pub(crate) fn new(h: usize, w: usize) -> Self {
        Self {
            fwd_h: ComplexMatrix::new(h, false, false),
            fwd_wt: ComplexMatrix::new(w, false, true),
            inv_h: ComplexMatrix::new(h, true, false),
            inv_wt: ComplexMatrix::new(w, true, true),
        }
    }

    pub(crate) fn apply<'t>(&self, re: Var<'t, T>, im: Var<'t, T>, inverse: bool) -> (Var<'t, T>, Var<'t, T>) {
        let (l, r) = if inverse {
            (&self.inv_h, &self.inv_wt)
        } else {
            (&self.fwd_h, &self.fwd_wt)
        };
        let p = re.mat_left(&l.re) - im.mat_left(&l.im);
        let q = im.mat_left(&l.re) + re.mat_left(&l.im);
        let out_re = p.mat_right(&r.re) - q.mat_right(&r.im);
        let out_im = p.mat_right(&r.im) + q.mat_right(&r.re);
        (out_re, out_im)
    }
}

/// Small U-Net on the 2-channel (real, imaginary) image with LeakyReLU
/// activations. The output convolutions start at zero so a fresh refiner is inert.
struct Refiner {
    conv_in: Conv2d,
    enc: Vec<Conv2d>,
    down: Vec<Conv2d>,
    mid: Conv2d,
    dec_a: Vec<Conv2d>,
    dec_b: Vec<Conv2d>,
    out_re: Conv2d,
    out_im: Conv2d,
}

impl Refiner {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, width: usize, depth: usize, rng: &mut R) -> Self {
        let ch = |l: usize| width << l;
        let conv = |store: &mut ParamStore<T>, n: String, cin: usize, cout: usize, gain: f64, rng: &mut R| {
            Conv2d::new(store, &n, cin, cout, 3, gain, true, rng)
        };
        let conv_in = conv(store, format!("{name}.conv_in"), 2, ch(0), 1.0, rng);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..depth {
            enc.push(conv(store, format!("{name}.enc{l}"), ch(l), ch(l), 1.0, rng));
            down.push(conv(store, format!("{name}.down{l}"), ch(l), ch(l + 1), 1.0, rng));
        }
        let mid = conv(store, format!("{name}.mid"), ch(depth), ch(depth), 1.0, rng);
        let mut dec_a = Vec::new();
        let mut dec_b = Vec::new();
        for l in 0..depth {
            dec_a.push(conv(store, format!("{name}.dec{l}.a"), ch(l + 1) + ch(l), ch(l), 1.0, rng));
            dec_b.push(conv(store, format!("{name}.dec{l}.b"), ch(l), ch(l), 1.0, rng));
        }
        let out_re = conv(store, format!("{name}.out_re"), ch(0), 1, 0.0, rng);
        let out_im = conv(store, format!("{name}.out_im"), ch(0), 1, 0.0, rng);
        Self {
            conv_in,
            enc,
            down,
            mid,
            dec_a,
            dec_b,
            out_re,
            out_im,
        }
    }

    fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        re: Var<'t, T>,
        im: Var<'t, T>,
    ) -> (Var<'t, T>, Var<'t, T>) {
        let act = |v: Var<'t, T>| v.leaky_relu(T::of(LEAKY_SLOPE));
        let mut h = act(self.conv_in.forward(p, re.concat_channels(im)));
        let mut skips = Vec::with_capacity(self.enc.len());
        for (enc, down) in self.enc.iter().zip(&self.down) {
            h = act(enc.forward(p, h));
            skips.push(h);
            h = act(down.forward(p, h.avg_pool2()));
        }
        h = act(self.mid.forward(p, h));
        for l in (0..self.enc.len()).rev() {
            h = h.upsample2().concat_channels(skips[l]);
            h = act(self.dec_a[l].forward(p, h));
            h = act(self.dec_b[l].forward(p, h));
        }
        (self.out_re.forward(p, h), self.out_im.forward(p, h))
    }
}

struct Cascade {
    eta: ParamId,
    refiner: Refiner,
}

/// Unrolled network: `k_{i+1} = DC(k_i) - F(refiner_i(F^-1 k_i))`, `k_0 = y`.
pub struct ReconNet {
    cfg: CascadeConfig,
    cascades: Vec<Cascade>,
}

impl ReconNet {
    pub fn new<T: Scalar, R: Rng>(cfg: &CascadeConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let cascades = (0..cfg.num_cascades)
            .map(|i| Cascade {
                eta: store.add_const(format!("cascade{i}.eta"), &[1], cfg.dc_weight_init),
                refiner: Refiner::new(store, &format!("cascade{i}.refiner"), cfg.refiner_width, cfg.refiner_depth, rng),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            cascades,
        })
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.cfg
    }

    pub fn eta_ids(&self) -> Vec<ParamId> {
        self.cascades.iter().map(|c| c.eta).collect()
    }

    pub fn check_inputs(&self, shape: &[usize], mask_len: usize) -> Result<()> {
        let m = self.cfg.size_multiple();
        match *shape {
            [_, 1, h, w] if h % m == 0 && w % m == 0 && h >= SSIM_WINDOW && w >= SSIM_WINDOW => {
                if mask_len != w {
                    return Err(Error::Contract(format!(
                        "mask length {mask_len} does not match {w} phase-encode lines"
                    )));
                }
                Ok(())
            }
            _ => Err(Error::Contract(format!(
                "k-space batch must be [N, 1, H, W] with H and W divisible by {m} and >= {SSIM_WINDOW}, got {shape:?}"
            ))),
        }
    }

    /// Final k-space `(re, im)`, each `[N, 1, H, W]`.
    pub fn forward_kspace<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        y_re: Var<'t, T>,
        y_im: Var<'t, T>,
        mask: &[f64],
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let shape = y_re.shape();
        if y_im.shape() != shape {
            return Err(Error::Contract("real and imaginary parts differ in shape".into()));
        }
        self.check_inputs(&shape, mask.len())?;
        let dft = Dft::<T>::new(shape[2], shape[3]);
        let keep: Vec<T> = mask.iter().map(|&m| T::of(m)).collect();
        let drop: Vec<T> = mask.iter().map(|&m| T::of(1.0 - m)).collect();
        let (mut k_re, mut k_im) = (y_re, y_im);
        for (i, c) in self.cascades.iter().enumerate() {
            let eta = p[c.eta];
            let dc = |k: Var<'t, T>, y: Var<'t, T>| {
                k.mul_columns(&drop) + ((k - k.mul_scalar_var(eta)) + y.mul_scalar_var(eta)).mul_columns(&keep)
            };
            let (img_re, img_im) = dft.apply(k_re, k_im, true);
            let (r_re, r_im) = c.refiner.forward(p, img_re, img_im);
            let (f_re, f_im) = dft.apply(r_re, r_im, false);
            let next_re = dc(k_re, y_re) - f_re;
            let next_im = dc(k_im, y_im) - f_im;
            if !(next_re.value().all_finite() && next_im.value().all_finite()) {
                return Err(Error::Inference {
                    cascade: i,
                    msg: "non-finite k-space".into(),
                });
            }
            k_re = next_re;
            k_im = next_im;
        }
        Ok((k_re, k_im))
    }

    /// Magnitude of the final image, `[N, 1, H, W]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        y_re: Var<'t, T>,
        y_im: Var<'t, T>,
        mask: &[f64],
    ) -> Result<Var<'t, T>> {
        let (k_re, k_im) = self.forward_kspace(p, y_re, y_im, mask)?;
        let shape = k_re.shape();
        let (re, im) = Dft::<T>::new(shape[2], shape[3]).apply(k_re, k_im, true);
        Ok((re.sqr() + im.sqr()).add_scalar(T::of(MAGNITUDE_EPS)).sqrt())
    }
}

/// Mean of `1 - SSIM` over the batch, with each sample's data range given by
/// `range` (valid 7x7 windows, sample covariance).
pub fn ssim_loss<'t, T: Scalar>(est: Var<'t, T>, target: &Tensor<T>, range: &[f64]) -> Var<'t, T> {
    let inv: Vec<T> = range.iter().map(|&r| T::of(1.0 / r)).collect();
    let x = est.scale_per_sample(&inv);
    let y = est.tape().constant(target.clone()).scale_per_sample(&inv);
    let k = SSIM_WINDOW;
    let np = (k * k) as f64;
    let cn = T::of(np / (np - 1.0));
    let ux = x.box_filter(k);
    let uy = y.box_filter(k);
    let vx = ((x * x).box_filter(k) - ux * ux).scale(cn);
    let vy = ((y * y).box_filter(k) - uy * uy).scale(cn);
    let vxy = ((x * y).box_filter(k) - ux * uy).scale(cn);
    let c1 = T::of(SSIM_K1 * SSIM_K1);
    let c2 = T::of(SSIM_K2 * SSIM_K2);
    let two = T::of(2.0);
    let num = (ux * uy).scale(two).add_scalar(c1) * vxy.scale(two).add_scalar(c2);
    let den = (ux * ux + uy * uy).add_scalar(c1) * (vx + vy).add_scalar(c2);
    (num / den).mean_all().scale(-T::one()).add_scalar(T::one())
}
