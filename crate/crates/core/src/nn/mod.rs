//! Small reverse-mode autodiff engine for NCHW image networks.
//!
//! Supports exactly the ops the score network and the unrolled reconstruction
//! network need. Convolutions run as im2col + packed GEMM.

mod kernels;
mod layers;
mod params;
mod tape;
mod tensor;

pub use kernels::{box_filter, conv2d};
pub use layers::{group_count, Conv2d, GroupNorm, Linear};
pub use params::{Adam, Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d f / d inputs against the tape.
    fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
    where
        F: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
    {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&vars);
        let grads = tape.backward(loss);
        let eval = |inputs: &[Tensor<f64>]| {
            let tape = Tape::new();
            let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            f(&vars).value().data()[0]
        };
        let h = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            for j in 0..input.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let tol = 1e-6 * (1.0 + numeric.abs());
                assert!(
                    (a - numeric).abs() <= tol,
                    "input {i} elem {j}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[2, 3, 2, 2], &mut rng);
        let b = random(&[2, 3, 2, 2], &mut rng).map(|v| v + 3.0);
        check(vec![a, b], |v| {
            let (a, b) = (v[0], v[1]);
            let x = (a * b + a / b - b).silu() + a.tanh().sqr() + b.sqrt().scale(0.5);
            (x.leaky_relu(0.2).add_scalar(0.3) * a).sum_all()
        });
    }

    #[test]
    fn broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 2, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let g = random(&[3], &mut rng);
        let e = random(&[2, 3], &mut rng);
        let s = random(&[2, 3], &mut rng);
        let k = random(&[1], &mut rng);
        check(vec![x, b, g, e, s, k], |v| {
            let y = v[0]
                .add_channel_bias(v[1])
                .mul_channel(v[2])
                .add_nc(v[3])
                .mul_nc(v[4])
                .mul_scalar_var(v[5])
                .scale_per_sample(&[0.5, -2.0])
                .mul_columns(&[1.0, 0.0, 3.0]);
            y.sqr().sum_all() + v[0].mean_spatial().sum_all().mul_scalar_var(v[5])
        });
    }

    #[test]
    fn conv_pool_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 2, 4, 4], &mut rng);
        let w3 = random(&[3, 2, 3, 3], &mut rng);
        let w1 = random(&[2, 5, 1, 1], &mut rng);
        check(vec![x, w3, w1], |v| {
            let h = v[0].conv2d(v[1], 1);
            let down = h.avg_pool2().upsample2();
            let cat = down.concat_channels(v[0]);
            cat.conv2d(v[2], 0).sqr().sum_all()
        });
    }

    #[test]
    fn linear_matmul_box_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[5, 4], &mut rng);
        let img = random(&[2, 1, 5, 4], &mut rng);
        let ml = Rc::new(random(&[3, 5], &mut rng));
        let mr = Rc::new(random(&[4, 6], &mut rng));
        check(vec![x, w, img], move |v| {
            let a = v[0].linear(v[1]).tanh().sum_all();
            let b = v[2].mat_left(&ml).mat_right(&mr).box_filter(2).sqr().sum_all();
            a + b
        });
    }

    #[test]
    fn group_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let gn = GroupNorm::new(&mut store, "gn", 4, 2);
        let x = random(&[2, 4, 3, 3], &mut rng);
        let probe = random(&[2, 4, 3, 3], &mut rng);
        let probe = Rc::new(probe);
        check(vec![x], move |v| {
            let tape = v[0].tape();
            let p = store.bind_frozen(tape);
            let y = gn.forward(&p, v[0]);
            (y * tape.constant((*probe).clone())).sum_all()
        });
    }

    #[test]
    fn group_norm_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let gn = GroupNorm::new(&mut store, "gn", 4, 2);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(random(&[1, 4, 8, 8], &mut rng).map(|v| 3.0 * v + 7.0));
        let y = gn.forward(&p, x).value();
        let half = &y.data()[..2 * 64];
        let mean = half.iter().sum::<f64>() / 128.0;
        let var = half.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 128.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let y = conv2d(&x, &w, 1);
        for co in 0..3 {
            for oy in 0..5 {
                for ox in 0..5 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (oy as isize + ky - 1, ox as isize + kx - 1);
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += x.data()[ci * 25 + iy as usize * 5 + ix as usize]
                                        * w.data()[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[co * 25 + oy * 5 + ox];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(&store);
        for _ in 0..2000 {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let loss = p[id].sqr().sum_all();
            let mut g = tape.backward(loss);
            let grads = store.collect_grads(&p, &mut g);
            opt.step(&mut store, &grads, 0.01);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.leaf(Tensor::full(&[2], 2.0));
        let loss = (a * b).sum_all();
        let g = tape.backward(loss);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }
}
