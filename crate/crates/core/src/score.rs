//! Time-conditional score network `s(x_t, t, y)` conditioned on the magnitude
//! image by channel concatenation, and its denoising score-matching training.

use std::f64::consts::FRAC_1_SQRT_2;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_archive, write_archive};
use crate::data::SliceRecord;
use crate::error::{Error, Result};
use crate::nn::{group_count, Adam, Bound, Conv2d, GroupNorm, Linear, ParamStore, Scalar, Tape, Tensor, Var};
use crate::rng::{derive_seed, rng_from, standard_normals};
use crate::sde::{NoiseSchedule, ScoreFn};

/// Residual and skip merges are scaled by this factor.
pub const SKIP_SCALE: f64 = FRAC_1_SQRT_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreNetworkConfig {
    pub base_channels: usize,
    /// Number of U-Net resolution levels.
    pub depth: usize,
    /// Channel multiplier at level `l` is `min(2^l, max_channel_mult)`.
    pub max_channel_mult: usize,
    pub res_blocks: usize,
    pub time_embedding_dim: usize,
    pub max_groups: usize,
    /// Inputs are scaled by `1 / sqrt(sigma_data^2 + sigma(t)^2)`.
    pub sigma_data: f64,
}

impl Default for ScoreNetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 3,
            max_channel_mult: 2,
            res_blocks: 1,
            time_embedding_dim: 32,
            max_groups: 8,
            sigma_data: 1.0,
        }
    }
}

impl ScoreNetworkConfig {
    pub const INPUT_CHANNELS: usize = 2;
    pub const OUTPUT_CHANNELS: usize = 1;

    pub fn skip_scale(&self) -> f64 {
        SKIP_SCALE
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 || self.res_blocks == 0 || self.max_channel_mult == 0 {
            return Err(Error::Config(
                "score network widths, depth and block counts must be positive".into(),
            ));
        }
        if self.time_embedding_dim < 2 || !self.time_embedding_dim.is_multiple_of(2) {
            return Err(Error::Config("time_embedding_dim must be even and >= 2".into()));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::Config("sigma_data must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * (1usize << level.min(20)).min(self.max_channel_mult)
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &ScoreNetworkConfig,
        rng: &mut R,
    ) -> Self {
        let g = |c| group_count(c, cfg.max_groups);
        Self {
            gn1: GroupNorm::new(store, &format!("{name}.gn1"), cin, g(cin)),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1.0, true, rng),
            temb: Linear::new(store, &format!("{name}.temb"), 4 * cfg.base_channels, cout, rng),
            gn2: GroupNorm::new(store, &format!("{name}.gn2"), cout, g(cout)),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1.0, true, rng),
            skip: (cin != cout)
                .then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1.0, true, rng)),
        }
    }

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, temb: Var<'t, T>) -> Var<'t, T> {
        let h = self.conv1.forward(p, self.gn1.forward(p, x).silu());
        let h = h.add_nc(self.temb.forward(p, temb));
        let h = self.conv2.forward(p, self.gn2.forward(p, h).silu());
        let s = match &self.skip {
            Some(c) => c.forward(p, x),
            None => x,
        };
        (s + h).scale(T::of(SKIP_SCALE))
    }
}

/// Reduced U-Net with GroupNorm, SiLU, residual blocks and a sinusoidal time embedding.
pub struct ScoreNet {
    cfg: ScoreNetworkConfig,
    schedule: NoiseSchedule,
    embed1: Linear,
    embed2: Linear,
    conv_in: Conv2d,
    down: Vec<Vec<ResBlock>>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    gn_out: GroupNorm,
    conv_out: Conv2d,
}

impl ScoreNet {
    pub fn new<T: Scalar, R: Rng>(
        cfg: &ScoreNetworkConfig,
        schedule: &NoiseSchedule,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        let e = 4 * cfg.base_channels;
        let embed1 = Linear::new(store, "embed1", cfg.time_embedding_dim, e, rng);
        let embed2 = Linear::new(store, "embed2", e, e, rng);
        let conv_in = Conv2d::new(
            store,
            "conv_in",
            ScoreNetworkConfig::INPUT_CHANNELS,
            cfg.base_channels,
            3,
            1.0,
            true,
            rng,
        );
        let mut down = Vec::new();
        let mut cur = cfg.base_channels;
        for l in 0..cfg.depth {
            let c = cfg.channels(l);
            let mut blocks = Vec::new();
            for b in 0..cfg.res_blocks {
                blocks.push(ResBlock::new(store, &format!("down{l}.{b}"), cur, c, cfg, rng));
                cur = c;
            }
            down.push(blocks);
        }
        let mid = ResBlock::new(store, "mid", cur, cur, cfg, rng);
        let mut up = Vec::new();
        for l in (0..cfg.depth).rev() {
            let c = cfg.channels(l);
            up.push(ResBlock::new(store, &format!("up{l}"), cur + c, c, cfg, rng));
            cur = c;
        }
        let gn_out = GroupNorm::new(store, "gn_out", cur, group_count(cur, cfg.max_groups));
        let conv_out = Conv2d::new(
            store,
            "conv_out",
            cur,
            ScoreNetworkConfig::OUTPUT_CHANNELS,
            3,
            0.1,
            true,
            rng,
        );
        Ok(Self {
            cfg: cfg.clone(),
            schedule: *schedule,
            embed1,
            embed2,
            conv_in,
            down,
            mid,
            up,
            gn_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &ScoreNetworkConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn time_features<T: Scalar>(&self, t: &[f64]) -> Tensor<T> {
        let half = self.cfg.time_embedding_dim / 2;
        let mut data = Vec::with_capacity(t.len() * 2 * half);
        for &ti in t {
            for k in 0..half {
                let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
                data.push(T::of((1000.0 * ti * freq).sin()));
            }
            for k in 0..half {
                let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
                data.push(T::of((1000.0 * ti * freq).cos()));
            }
        }
        Tensor::new(&[t.len(), 2 * half], data)
    }

    pub fn check_inputs(&self, x_shape: &[usize], y_shape: &[usize], batch: usize) -> Result<()> {
        if x_shape != y_shape {
            return Err(Error::Contract(format!(
                "x_t shape {x_shape:?} differs from condition shape {y_shape:?}"
            )));
        }
        if x_shape.len() != 4 || x_shape[1] != 1 || x_shape[0] != batch {
            return Err(Error::Contract(format!(
                "expected [{batch}, 1, H, W] input, got {x_shape:?}"
            )));
        }
        let m = self.cfg.size_multiple();
        if !x_shape[2].is_multiple_of(m) || !x_shape[3].is_multiple_of(m) {
            return Err(Error::Contract(format!(
                "spatial size {}x{} must be divisible by {m}",
                x_shape[2], x_shape[3]
            )));
        }
        Ok(())
    }

    /// Score for a batch `[N, 1, H, W]` at per-sample times `t`.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        x_t: Var<'t, T>,
        y: Var<'t, T>,
        t: &[f64],
    ) -> Result<Var<'t, T>> {
        self.check_inputs(&x_t.shape(), &y.shape(), t.len())?;
        if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("diffusion time {bad} outside [0, 1]")));
        }
        let tape = x_t.tape();
        let sigmas: Vec<f64> = t.iter().map(|&ti| self.schedule.sigma(ti)).collect();
        let c_in: Vec<T> = sigmas
            .iter()
            .map(|s| T::of(1.0 / (self.cfg.sigma_data.powi(2) + s * s).sqrt()))
            .collect();
        let inv_sigma: Vec<T> = sigmas.iter().map(|s| T::of(1.0 / s)).collect();

        let temb = tape.constant(self.time_features(t));
        let temb = self.embed2.forward(p, self.embed1.forward(p, temb).silu()).silu();

        let input = x_t.scale_per_sample(&c_in).concat_channels(y);
        let mut h = self.conv_in.forward(p, input);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (l, blocks) in self.down.iter().enumerate() {
            for b in blocks {
                h = b.forward(p, h, temb);
            }
            skips.push(h);
            if l + 1 < self.cfg.depth {
                h = h.avg_pool2();
            }
        }
        h = self.mid.forward(p, h, temb);
        for (i, block) in self.up.iter().enumerate() {
            let l = self.cfg.depth - 1 - i;
            if l + 1 < self.cfg.depth {
                h = h.upsample2();
            }
            h = block.forward(p, h.concat_channels(skips[l]), temb);
        }
        let out = self.conv_out.forward(p, self.gn_out.forward(p, h).silu());
        Ok(out.scale_per_sample(&inv_sigma))
    }
}

/// Value of one denoising score-matching evaluation.
pub struct DsmOutput<'t, T: Scalar> {
    /// Mean over the batch of per-sample squared residual norms.
    pub loss: Var<'t, T>,
    pub per_sample: Vec<f64>,
    pub t: Vec<f64>,
}

/// Denoising score matching with residual `sigma(t) * s(x_t, t, y) + z`,
/// where `x_t = x0 + sigma(t) z` and `t ~ U[eps, 1]` per sample.
///
/// `score` receives `(x_t, y, t)` and returns the score estimate.
pub fn dsm_loss<'t, T, R, F>(
    tape: &'t Tape<T>,
    x0: &Tensor<T>,
    y: &Tensor<T>,
    schedule: &NoiseSchedule,
    rng: &mut R,
    score: F,
) -> Result<DsmOutput<'t, T>>
where
    T: Scalar,
    R: Rng,
    F: FnOnce(Var<'t, T>, Var<'t, T>, &[f64]) -> Result<Var<'t, T>>,
{
    let shape = x0.shape().to_vec();
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::Contract("DSM batch must be nonempty".into()));
    }
    if y.shape() != shape.as_slice() {
        return Err(Error::Contract(format!(
            "phase batch {:?} and magnitude batch {:?} differ",
            shape,
            y.shape()
        )));
    }
    let n = shape[0];
    let per = x0.len() / n;
    let t: Vec<f64> = (0..n)
        .map(|_| schedule.eps + (1.0 - schedule.eps) * rng.random::<f64>())
        .collect();
    let sigmas: Vec<f64> = t.iter().map(|&ti| schedule.sigma(ti)).collect();
    let z = standard_normals(rng, x0.len());
    let xt: Vec<T> = x0
        .data()
        .iter()
        .zip(&z)
        .enumerate()
        .map(|(i, (&x, &zi))| T::of(x.f64() + sigmas[i / per] * zi))
        .collect();
    let x_t = tape.constant(Tensor::new(&shape, xt));
    let yv = tape.constant(y.clone());
    let s = score(x_t, yv, &t)?;
    if s.shape() != shape {
        return Err(Error::Contract(format!(
            "score output {:?} differs from input {:?}",
            s.shape(),
            shape
        )));
    }
    let sig_t: Vec<T> = sigmas.iter().map(|&v| T::of(v)).collect();
    let residual = s.scale_per_sample(&sig_t) + tape.constant(Tensor::from_f64(&shape, &z));
    let r = residual.value();
    let per_sample: Vec<f64> = r
        .data()
        .chunks(per)
        .map(|c| c.iter().map(|v| v.f64() * v.f64()).sum())
        .collect();
    if let Some(index) = per_sample.iter().position(|v| !v.is_finite()) {
        return Err(Error::Training {
            index,
            msg: "non-finite denoising loss".into(),
        });
    }
    let loss = residual.sqr().sum_all().scale(T::of(1.0 / n as f64));
    Ok(DsmOutput { loss, per_sample, t })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Validation (and model-selection) interval in steps.
    pub val_every: usize,
    /// Exponential moving average of the weights; 0 disables it.
    pub ema_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            max_steps: 20_000,
            peak_lr: 1e-4,
            warmup_steps: 5000,
            seed: 0,
            val_every: 500,
            ema_decay: 0.999,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Linear warm-up: `peak_lr * min(1, step / warmup_steps)`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.peak_lr * (step as f64 / cfg.warmup_steps.max(1) as f64).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub best_step: usize,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct ScoreHeader {
    network: ScoreNetworkConfig,
    schedule: NoiseSchedule,
    meta: ScoreMeta,
}

pub const SCORE_KIND: &str = "score";

/// Trained (or freshly initialized) score network with its configuration.
pub struct ScoreCheckpoint {
    pub network: ScoreNetworkConfig,
    pub schedule: NoiseSchedule,
    pub meta: ScoreMeta,
    pub params: ParamStore<f32>,
    net: ScoreNet,
}

impl std::fmt::Debug for ScoreCheckpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScoreCheckpoint")
            .field("network", &self.network)
            .field("schedule", &self.schedule)
            .field("meta", &self.meta)
            .field("parameters", &self.params.num_scalars())
            .finish()
    }
}

impl ScoreCheckpoint {
    pub fn init(network: &ScoreNetworkConfig, schedule: &NoiseSchedule, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = ScoreNet::new(network, schedule, &mut params, &mut rng_from(derive_seed(seed, "score/init")))?;
        Ok(Self {
            network: network.clone(),
            schedule: *schedule,
            meta: ScoreMeta {
                steps: 0,
                final_loss: None,
                best_val_loss: None,
                best_step: 0,
                seed,
                dataset_fingerprint: String::new(),
                train_config: None,
            },
            params,
            net,
        })
    }

    pub fn net(&self) -> &ScoreNet {
        &self.net
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ScoreHeader {
            network: self.network.clone(),
            schedule: self.schedule,
            meta: self.meta.clone(),
        };
        write_archive(path, SCORE_KIND, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_archive::<f32>(path, SCORE_KIND)?;
        let header: ScoreHeader = serde_json::from_value(meta)?;
        let mut ck = Self::init(&header.network, &header.schedule, header.meta.seed)?;
        ck.params
            .load_from(tensors)
            .map_err(|m| Error::Checkpoint(format!("{}: {m}", path.display())))?;
        ck.meta = header.meta;
        Ok(ck)
    }

    /// Score for `x_t` and `y` of shape `[N, H, W]` (or `[H, W]`) at a shared time `t`.
    pub fn score(&self, x_t: &ArrayD<f64>, t: f64, y: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        if x_t.shape() != y.shape() {
            return Err(Error::Contract(format!(
                "x_t shape {:?} differs from condition shape {:?}",
                x_t.shape(),
                y.shape()
            )));
        }
        let shape4 = as_batch_shape(x_t.shape())?;
        let tape = Tape::<f32>::new();
        let p = self.params.bind_frozen(&tape);
        let xv = tape.constant(to_tensor(x_t, &shape4));
        let yv = tape.constant(to_tensor(y, &shape4));
        let out = self.net.forward(&p, xv, yv, &vec![t; shape4[0]])?;
        let data: Vec<f64> = out.value().to_f64();
        Ok(ArrayD::from_shape_vec(IxDyn(x_t.shape()), data).expect("same element count"))
    }

    /// Score function conditioned on a fixed batch of magnitudes `[N, H, W]`.
    pub fn conditioned<'a>(&'a self, y: &ArrayD<f64>) -> Result<ConditionalScore<'a>> {
        let shape4 = as_batch_shape(y.shape())?;
        Ok(ConditionalScore {
            ckpt: self,
            y: to_tensor(y, &shape4),
            shape: y.shape().to_vec(),
        })
    }
}

fn as_batch_shape(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [h, w] => Ok([1, 1, h, w]),
        [n, h, w] => Ok([n, 1, h, w]),
        [n, 1, h, w] => Ok([n, 1, h, w]),
        _ => Err(Error::Contract(format!(
            "expected [H, W], [N, H, W] or [N, 1, H, W], got {shape:?}"
        ))),
    }
}

fn to_tensor(a: &ArrayD<f64>, shape: &[usize]) -> Tensor<f32> {
    Tensor::new(shape, a.iter().map(|&v| v as f32).collect())
}

/// `ScoreFn` adapter used by the reverse-time sampler.
pub struct ConditionalScore<'a> {
    ckpt: &'a ScoreCheckpoint,
    y: Tensor<f32>,
    shape: Vec<usize>,
}

impl ScoreFn for ConditionalScore<'_> {
    fn score(&self, x: &ArrayD<f64>, t: f64) -> Result<ArrayD<f64>> {
        if x.shape() != self.shape.as_slice() {
            return Err(Error::Contract(format!(
                "state shape {:?} differs from condition shape {:?}",
                x.shape(),
                self.shape
            )));
        }
        let tape = Tape::<f32>::new();
        let p = self.ckpt.params.bind_frozen(&tape);
        let xv = tape.constant(to_tensor(x, self.y.shape()));
        let yv = tape.constant(self.y.clone());
        let out = self.ckpt.net.forward(&p, xv, yv, &vec![t; self.y.shape()[0]])?;
        Ok(ArrayD::from_shape_vec(IxDyn(x.shape()), out.value().to_f64()).expect("same element count"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug)]
pub struct ScoreTraining {
    pub checkpoint: ScoreCheckpoint,
    pub curve: Vec<CurvePoint>,
}

/// FNV-1a over the magnitude and phase bytes of the records.
pub fn fingerprint(records: &[&SliceRecord]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |v: f64| {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for r in records {
        r.magnitude.iter().for_each(|&v| feed(v));
        if let Some(p) = &r.phase {
            p.iter().for_each(|&v| feed(v));
        }
    }
    format!("{h:016x}")
}

fn stack(records: &[&SliceRecord], idx: &[usize], phase: bool) -> Tensor<f32> {
    let (h, w) = records[idx[0]].shape();
    let mut data = Vec::with_capacity(idx.len() * h * w);
    for &i in idx {
        let r = records[i];
        let src = if phase {
            r.phase.as_ref().expect("checked")
        } else {
            &r.magnitude
        };
        data.extend(src.iter().map(|&v| v as f32));
    }
    Tensor::new(&[idx.len(), 1, h, w], data)
}

fn check_training_records(records: &[&SliceRecord], net: &ScoreNetworkConfig, what: &str) -> Result<()> {
    if let Some(r) = records.iter().find(|r| r.phase.is_none()) {
        return Err(Error::Config(format!(
            "{what} record {}/{} has no ground-truth phase",
            r.patient_id, r.slice_index
        )));
    }
    if let Some(first) = records.first() {
        let shape = first.shape();
        let m = net.size_multiple();
        if shape.0 % m != 0 || shape.1 % m != 0 {
            return Err(Error::Config(format!(
                "image size {shape:?} must be divisible by {m} for depth {}",
                net.depth
            )));
        }
        if records.iter().any(|r| r.shape() != shape) {
            return Err(Error::Config(format!("{what} records have mixed shapes")));
        }
    }
    Ok(())
}

/// Mean denoising loss over `records` with a fixed noise draw.
pub fn validation_loss(
    ckpt_net: &ScoreNet,
    params: &ParamStore<f32>,
    records: &[&SliceRecord],
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng_from(derive_seed(seed, "score/val"));
    let mut total = 0.0;
    let idx: Vec<usize> = (0..records.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let tape = Tape::<f32>::new();
        let p = params.bind_frozen(&tape);
        let out = dsm_loss(
            &tape,
            &stack(records, chunk, true),
            &stack(records, chunk, false),
            ckpt_net.schedule(),
            &mut rng,
            |x, y, t| ckpt_net.forward(&p, x, y, t),
        )?;
        total += out.per_sample.iter().sum::<f64>();
    }
    Ok(total / records.len().max(1) as f64)
}

/// Train on `train` records (which must carry phases); select the weights with
/// the lowest denoising loss on `val` (the final weights when `val` is empty).
pub fn train(
    train: &[&SliceRecord],
    val: &[&SliceRecord],
    network: &ScoreNetworkConfig,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<ScoreTraining> {
    cfg.validate()?;
    network.validate()?;
    schedule.validate()?;
    check_training_records(train, network, "training")?;
    check_training_records(val, network, "validation")?;
    if train.is_empty() && cfg.max_steps > 0 {
        return Err(Error::Config("no training records".into()));
    }
    let mut ckpt = ScoreCheckpoint::init(network, schedule, cfg.seed)?;
    ckpt.meta.dataset_fingerprint = fingerprint(train);
    ckpt.meta.train_config = Some(cfg.clone());
    let mut ema = ckpt.params.clone();
    let mut opt = Adam::new(&ckpt.params);
    let mut rng = rng_from(derive_seed(cfg.seed, "score/train"));
    let mut curve = Vec::with_capacity(cfg.max_steps);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;

    for step in 1..=cfg.max_steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..train.len()))
            .collect();
        let x0 = stack(train, &idx, true);
        let y = stack(train, &idx, false);
        let tape = Tape::<f32>::new();
        let p = ckpt.params.bind(&tape);
        let out = dsm_loss(&tape, &x0, &y, schedule, &mut rng, |x, y, t| ckpt.net.forward(&p, x, y, t))
            .map_err(|e| match e {
                Error::Training { index, msg } => Error::Training {
                    index,
                    msg: format!("{msg} at step {step}"),
                },
                other => other,
            })?;
        let loss = out.loss.value().data()[0] as f64;
        let mut g = tape.backward(out.loss);
        let mut grads = ckpt.params.collect_grads(&p, &mut g);
        drop(p);
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.iter().map(|t| t.sum_sq() as f64).sum::<f64>().sqrt();
            if norm > clip {
                let s = (clip / norm) as f32;
                for t in &mut grads {
                    t.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let lr = lr_schedule(step, cfg);
        opt.step(&mut ckpt.params, &grads, lr);
        let decay = if cfg.ema_decay > 0.0 {
            cfg.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64)) as f32
        } else {
            0.0
        };
        for (e, w) in ema.tensors_mut().iter_mut().zip(ckpt.params.tensors()) {
            for (a, &b) in e.data_mut().iter_mut().zip(w.data()) {
                *a = decay * *a + (1.0 - decay) * b;
            }
        }
        let mut point = CurvePoint {
            step,
            lr,
            train_loss: loss,
            val_loss: None,
        };
        if step % cfg.val_every == 0 || step == cfg.max_steps {
            if !val.is_empty() {
                let v = validation_loss(&ckpt.net, &ema, val, cfg.batch_size, cfg.seed)?;
                point.val_loss = Some(v);
                if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                    best = Some((v, step, ema.clone()));
                }
            }
            log::info!(
                "score step {step}/{}: train loss {loss:.3}{}",
                cfg.max_steps,
                point.val_loss.map_or(String::new(), |v| format!(", val loss {v:.3}"))
            );
        }
        curve.push(point);
    }

    ckpt.meta.steps = cfg.max_steps;
    ckpt.meta.final_loss = curve.last().map(|p| p.train_loss);
    match best {
        Some((v, step, params)) => {
            ckpt.params = params;
            ckpt.meta.best_val_loss = Some(v);
            ckpt.meta.best_step = step;
        }
        None => {
            ckpt.params = ema;
            ckpt.meta.best_step = cfg.max_steps;
        }
    }
    Ok(ScoreTraining { checkpoint: ckpt, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomConfig};

    fn tiny() -> ScoreNetworkConfig {
        ScoreNetworkConfig {
            base_channels: 4,
            depth: 2,
            max_channel_mult: 2,
            res_blocks: 1,
            time_embedding_dim: 8,
            max_groups: 2,
            sigma_data: 1.0,
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig {
            peak_lr: 1e-4,
            warmup_steps: 5000,
            ..Default::default()
        };
        assert_eq!(lr_schedule(5000, &cfg), 1e-4);
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert!((lr_schedule(2500, &cfg) - 5e-5).abs() < 1e-20);
        assert_eq!(lr_schedule(9000, &cfg), 1e-4);
    }

    #[test]
    fn skip_scale_is_exact() {
        assert_eq!(ScoreNetworkConfig::default().skip_scale(), std::f64::consts::FRAC_1_SQRT_2);
        assert!((ScoreNetworkConfig::default().skip_scale() - 1.0 / 2f64.sqrt()).abs() <= f64::EPSILON);
    }

    #[test]
    fn score_shape_purity_and_conditioning() {
        let ck = ScoreCheckpoint::init(&tiny(), &NoiseSchedule::default(), 1).unwrap();
        let mut rng = rng_from(2);
        let x = ArrayD::from_shape_vec(IxDyn(&[8, 8]), standard_normals(&mut rng, 64)).unwrap();
        let y = ArrayD::from_shape_vec(IxDyn(&[8, 8]), (0..64).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let a = ck.score(&x, 0.4, &y).unwrap();
        assert_eq!(a.shape(), &[8, 8]);
        assert_eq!(a, ck.score(&x, 0.4, &y).unwrap());
        let y2 = y.mapv(|v| 1.0 - v);
        assert_ne!(a, ck.score(&x, 0.4, &y2).unwrap());
        let bad = ArrayD::zeros(IxDyn(&[4, 8]));
        assert!(matches!(ck.score(&x, 0.4, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn oracle_score_zeroes_the_loss() {
        let sched = NoiseSchedule::default();
        let mut rng = rng_from(3);
        let x0 = Tensor::<f64>::new(&[4, 1, 6, 6], standard_normals(&mut rng, 144));
        let y = Tensor::<f64>::zeros(&[4, 1, 6, 6]);
        let tape = Tape::<f64>::new();
        let x0c = x0.clone();
        let out = dsm_loss(&tape, &x0, &y, &sched, &mut rng, |x_t, _y, t| {
            let xv = x_t.value();
            let per = 36;
            let data = xv
                .data()
                .iter()
                .zip(x0c.data())
                .enumerate()
                .map(|(i, (&xt, &x))| -(xt - x) / sched.sigma(t[i / per]).powi(2))
                .collect();
            Ok(x_t.tape().constant(Tensor::new(&[4, 1, 6, 6], data)))
        })
        .unwrap();
        assert!(out.per_sample.iter().all(|v| *v <= 1e-10));
    }

    #[test]
    fn zero_score_loss_expects_pixel_count() {
        let sched = NoiseSchedule::default();
        let mut rng = rng_from(4);
        let (n, pix) = (10_000, 16);
        let x0 = Tensor::<f64>::zeros(&[n, 1, 4, 4]);
        let tape = Tape::<f64>::new();
        let out = dsm_loss(&tape, &x0, &x0, &sched, &mut rng, |x, _, _| Ok(x.scale(0.0))).unwrap();
        let mean = out.loss.value().data()[0];
        assert!((mean - pix as f64).abs() / (pix as f64) < 0.03);
    }

    #[test]
    fn non_finite_loss_names_the_sample() {
        let sched = NoiseSchedule::default();
        let x0 = Tensor::<f64>::zeros(&[3, 1, 2, 2]);
        let tape = Tape::<f64>::new();
        let res = dsm_loss(&tape, &x0, &x0, &sched, &mut rng_from(0), |x, _, _| {
            let mut v = (*x.value()).clone();
            v.data_mut()[9] = f64::NAN;
            Ok(x.tape().constant(v))
        });
        match res {
            Err(Error::Training { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {:?}", other.map(|o| o.per_sample)),
        }
    }

    fn phantoms(n: usize, size: usize) -> Vec<SliceRecord> {
        (0..n)
            .map(|i| generate_phantom(i as u64, size, &PhantomConfig::default()).unwrap())
            .collect()
    }

    #[test]
    fn zero_steps_returns_initialization_and_runs_are_deterministic() {
        let recs = phantoms(6, 16);
        let refs: Vec<&SliceRecord> = recs.iter().collect();
        let sched = NoiseSchedule::default();
        let cfg = TrainConfig {
            batch_size: 2,
            max_steps: 0,
            warmup_steps: 5,
            val_every: 2,
            ..Default::default()
        };
        let out = train(&refs, &[], &tiny(), &cfg, &sched).unwrap();
        let init = ScoreCheckpoint::init(&tiny(), &sched, cfg.seed).unwrap();
        assert_eq!(out.checkpoint.params, init.params);

        let cfg = TrainConfig { max_steps: 6, ..cfg };
        let a = train(&refs[..4], &refs[4..], &tiny(), &cfg, &sched).unwrap();
        let b = train(&refs[..4], &refs[4..], &tiny(), &cfg, &sched).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
    }

    #[test]
    fn missing_phase_is_config_error() {
        let mut recs = phantoms(2, 16);
        recs[1].phase = None;
        let refs: Vec<&SliceRecord> = recs.iter().collect();
        let err = train(&refs, &[], &tiny(), &TrainConfig::default(), &NoiseSchedule::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let mut ck = ScoreCheckpoint::init(&tiny(), &NoiseSchedule::default(), 9).unwrap();
        ck.meta.steps = 17;
        ck.save(&path).unwrap();
        let back = ScoreCheckpoint::load(&path).unwrap();
        assert_eq!(back.meta, ck.meta);
        let probe = ArrayD::from_shape_fn(IxDyn(&[2, 8, 8]), |d| (d[1] * 8 + d[2]) as f64 / 64.0);
        assert_eq!(
            ck.score(&probe, 0.3, &probe).unwrap(),
            back.score(&probe, 0.3, &probe).unwrap()
        );
    }
}
