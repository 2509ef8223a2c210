use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use super::tape::Var;
use super::tensor::{Scalar, Tensor};

/// Stride-1 "same" convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: Option<ParamId>,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        gain: f64,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(k % 2 == 1, "only odd kernels keep the spatial size");
        let fan_in = cin * k * k;
        let w = store.add_fan_in(format!("{name}.weight"), &[cout, cin, k, k], fan_in, gain, rng);
        let b = bias.then(|| store.add_const(format!("{name}.bias"), &[cout], 0.0));
        Self { w, b, pad: k / 2 }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let y = x.conv2d(p[self.w], self.pad);
        match self.b {
            Some(b) => y.add_channel_bias(p[b]),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fin: usize,
        fout: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_fan_in(format!("{name}.weight"), &[fout, fin], fin, 1.0, rng);
        let b = store.add_const(format!("{name}.bias"), &[fout], 0.0);
        Self { w, b }
    }

    /// `[N, fin] -> [N, fout]`
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        // The bias is per output feature; treat features as channels of a [N, F, 1] view.
        let y = x.linear(p[self.w]);
        let s = y.shape();
        y.reshape(&[s[0], s[1], 1])
            .add_channel_bias(p[self.b])
            .reshape(&s)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    groups: usize,
    gamma: ParamId,
    beta: ParamId,
    eps: f64,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(
            groups > 0 && channels.is_multiple_of(groups),
            "{channels} channels cannot be split into {groups} groups"
        );
        Self {
            groups,
            gamma: store.add_const(format!("{name}.gamma"), &[channels], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[channels], 0.0),
            eps: 1e-5,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let shape = x.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let g = self.groups;
        let grouped = x.reshape(&[n, g, (c / g) * h, w]);
        let mean = grouped.mean_spatial();
        let centered = grouped.add_nc(-mean);
        let var = centered.sqr().mean_spatial();
        let ones = x.tape().constant(Tensor::full(&[n, g], T::one()));
        let rstd = ones / var.add_scalar(T::of(self.eps)).sqrt();
        centered
            .mul_nc(rstd)
            .reshape(&shape)
            .mul_channel(p[self.gamma])
            .add_channel_bias(p[self.beta])
    }
}

/// Largest group count `<= max_groups` that divides `channels`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}
