//! Single-coil unrolled reconstruction: cascades of soft data consistency and a
//! small image-domain U-Net refiner, trained with an SSIM loss.

mod net;
mod report;

use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_archive, write_archive};
use crate::data::{PhaseSource, SliceRecord};
use crate::error::{Error, Result};
use crate::mask::{apply_mask, effective_acceleration, zero_filled_recon, MaskGrid, SamplingMask};
use crate::metrics::{nrmse, psnr, ssim};
use crate::nn::{Adam, ParamStore, Tape, Tensor};
use crate::rng::{derive_seed, rng_from};

pub use net::{data_consistency, ssim_loss, ReconNet, LEAKY_SLOPE, MAGNITUDE_EPS, SSIM_WINDOW};
pub use report::{Metric, MetricReport, MetricRow, ScoreSet, VARNET, ZERO_FILLED};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Optimizer steps; each step uses one mask configuration, cycled in grid order.
    pub steps: usize,
    pub seed: u64,
    /// Validation (and model-selection) interval in steps.
    pub val_every: usize,
}

impl Default for ReconTrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 4,
            steps: 1500,
            seed: 0,
            val_every: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub num_cascades: usize,
    /// Channels at the finest refiner level; doubled per level.
    pub refiner_width: usize,
    /// Number of pooling levels in each refiner.
    pub refiner_depth: usize,
    /// Initial data-consistency weight of every cascade.
    pub dc_weight_init: f64,
    pub train: ReconTrainConfig,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            num_cascades: 3,
            refiner_width: 8,
            refiner_depth: 2,
            dc_weight_init: 1.0,
            train: ReconTrainConfig::default(),
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_cascades == 0 {
            return Err(Error::Config("num_cascades must be >= 1".into()));
        }
        if self.refiner_width == 0 || self.refiner_depth == 0 {
            return Err(Error::Config("refiner width and depth must be positive".into()));
        }
        if !self.dc_weight_init.is_finite() {
            return Err(Error::Config("dc_weight_init must be finite".into()));
        }
        let t = &self.train;
        if !(t.lr > 0.0) || t.batch_size == 0 || t.val_every == 0 {
            return Err(Error::Config(
                "recon training needs lr > 0, batch_size >= 1 and val_every >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.refiner_depth
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconMeta {
    pub phase_source: Option<PhaseSource>,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub best_step: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ReconHeader {
    cascade: CascadeConfig,
    masks: MaskGrid,
    meta: ReconMeta,
}

pub const RECON_KIND: &str = "recon";

pub struct ReconCheckpoint {
    pub cascade: CascadeConfig,
    /// Mask configurations used in training.
    pub masks: MaskGrid,
    pub meta: ReconMeta,
    pub params: ParamStore<f32>,
    net: ReconNet,
}

impl std::fmt::Debug for ReconCheckpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReconCheckpoint")
            .field("cascade", &self.cascade)
            .field("masks", &self.masks)
            .field("meta", &self.meta)
            .field("parameters", &self.params.num_scalars())
            .finish()
    }
}

fn kspace_tensors(ks: &[&Array2<Complex64>]) -> (Tensor<f32>, Tensor<f32>) {
    let (h, w) = ks[0].dim();
    let shape = [ks.len(), 1, h, w];
    let re = ks.iter().flat_map(|k| k.iter().map(|v| v.re as f32)).collect();
    let im = ks.iter().flat_map(|k| k.iter().map(|v| v.im as f32)).collect();
    (Tensor::new(&shape, re), Tensor::new(&shape, im))
}

fn check_same_shape(ks: &[&Array2<Complex64>]) -> Result<(usize, usize)> {
    let dim = ks
        .first()
        .ok_or_else(|| Error::Contract("empty k-space batch".into()))?
        .dim();
    if ks.iter().any(|k| k.dim() != dim) {
        return Err(Error::Contract("k-space batch has mixed shapes".into()));
    }
    Ok(dim)
}

impl ReconCheckpoint {
    pub fn init(cascade: &CascadeConfig, masks: &MaskGrid, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = ReconNet::new(cascade, &mut params, &mut rng_from(derive_seed(seed, "recon/init")))?;
        Ok(Self {
            cascade: cascade.clone(),
            masks: masks.clone(),
            meta: ReconMeta {
                phase_source: None,
                steps: 0,
                final_loss: None,
                best_val_loss: None,
                best_step: 0,
                seed,
            },
            params,
            net,
        })
    }

    pub fn net(&self) -> &ReconNet {
        &self.net
    }

    /// Learned data-consistency weight of each cascade.
    pub fn etas(&self) -> Vec<f64> {
        self.net
            .eta_ids()
            .into_iter()
            .map(|id| f64::from(self.params.get(id).data()[0]))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ReconHeader {
            cascade: self.cascade.clone(),
            masks: self.masks.clone(),
            meta: self.meta.clone(),
        };
        write_archive(path, RECON_KIND, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_archive::<f32>(path, RECON_KIND)?;
        let header: ReconHeader = serde_json::from_value(meta)?;
        let mut ck = Self::init(&header.cascade, &header.masks, header.meta.seed)?;
        ck.params
            .load_from(tensors)
            .map_err(|m| Error::Checkpoint(format!("{}: {m}", path.display())))?;
        ck.meta = header.meta;
        Ok(ck)
    }

    /// Final k-space for each masked input.
    pub fn final_kspace(&self, y: &[&Array2<Complex64>], mask: &SamplingMask) -> Result<Vec<Array2<Complex64>>> {
        let (h, w) = check_same_shape(y)?;
        let (re, im) = kspace_tensors(y);
        let tape = Tape::<f32>::new();
        let p = self.params.bind_frozen(&tape);
        let (k_re, k_im) = self
            .net
            .forward_kspace(&p, tape.constant(re), tape.constant(im), &mask.weights())?;
        let (k_re, k_im) = (k_re.value(), k_im.value());
        Ok((0..y.len())
            .map(|i| {
                let s = i * h * w..(i + 1) * h * w;
                let data = k_re.data()[s.clone()]
                    .iter()
                    .zip(&k_im.data()[s])
                    .map(|(&a, &b)| Complex64::new(f64::from(a), f64::from(b)))
                    .collect();
                Array2::from_shape_vec((h, w), data).expect("same element count")
            })
            .collect())
    }

    /// Magnitude reconstructions of a batch of masked k-spaces sharing one mask.
    pub fn reconstruct(&self, y: &[&Array2<Complex64>], mask: &SamplingMask) -> Result<Vec<Array2<f64>>> {
        let (h, w) = check_same_shape(y)?;
        let (re, im) = kspace_tensors(y);
        let tape = Tape::<f32>::new();
        let p = self.params.bind_frozen(&tape);
        let out = self
            .net
            .forward(&p, tape.constant(re), tape.constant(im), &mask.weights())?
            .value();
        Ok(out
            .data()
            .chunks_exact(h * w)
            .map(|c| Array2::from_shape_vec((h, w), c.iter().map(|&v| f64::from(v)).collect()).expect("h*w"))
            .collect())
    }
}

/// Magnitude reconstruction of one masked k-space.
pub fn varnet_forward(ckpt: &ReconCheckpoint, y: &Array2<Complex64>, mask: &SamplingMask) -> Result<Array2<f64>> {
    Ok(ckpt.reconstruct(&[y], mask)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconCurvePoint {
    pub step: usize,
    #[serde(rename = "R")]
    pub r: usize,
    pub n_acs: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug)]
pub struct ReconTraining {
    pub checkpoint: ReconCheckpoint,
    pub curve: Vec<ReconCurvePoint>,
}

/// Fully sampled k-space and target magnitude of a training record.
struct Prepared {
    kspace: Array2<Complex64>,
    target: Vec<f32>,
    range: f64,
}

fn prepare(records: &[&SliceRecord], what: &str) -> Result<Vec<Prepared>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let k = r.kspace.as_ref().ok_or_else(|| {
            Error::Config(format!("{what} record {}/{} has no k-space", r.patient_id, r.slice_index))
        })?;
        let target = r.target_magnitude().expect("k-space present");
        let range = target.iter().copied().fold(0.0, f64::max);
        out.push(Prepared {
            kspace: k.clone(),
            target: target.iter().map(|&v| v as f32).collect(),
            range: if range > 0.0 { range } else { 1.0 },
        });
    }
    if let Some(first) = out.first() {
        if out.iter().any(|p| p.kspace.dim() != first.kspace.dim()) {
            return Err(Error::Config(format!("{what} records have mixed shapes")));
        }
    }
    Ok(out)
}

struct Batch {
    re: Tensor<f32>,
    im: Tensor<f32>,
    target: Tensor<f32>,
    range: Vec<f64>,
}

fn batch(data: &[Prepared], idx: &[usize], mask: &SamplingMask) -> Result<Batch> {
    let masked: Vec<Array2<Complex64>> = idx
        .iter()
        .map(|&i| apply_mask(&data[i].kspace, mask))
        .collect::<Result<_>>()?;
    let refs: Vec<&Array2<Complex64>> = masked.iter().collect();
    let (re, im) = kspace_tensors(&refs);
    let target = Tensor::new(
        re.shape(),
        idx.iter().flat_map(|&i| data[i].target.iter().copied()).collect(),
    );
    Ok(Batch {
        re,
        im,
        target,
        range: idx.iter().map(|&i| data[i].range).collect(),
    })
}

/// Mean `1 - SSIM` over every record and mask.
fn validation_loss(ckpt: &ReconCheckpoint, data: &[Prepared], masks: &[SamplingMask], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for mask in masks {
        for chunk in idx.chunks(batch_size) {
            let b = batch(data, chunk, mask)?;
            let tape = Tape::<f32>::new();
            let p = ckpt.params.bind_frozen(&tape);
            let out = ckpt
                .net
                .forward(&p, tape.constant(b.re), tape.constant(b.im), &mask.weights())?;
            let loss = ssim_loss(out, &b.target, &b.range);
            total += f64::from(loss.value().data()[0]) * chunk.len() as f64;
            count += chunk.len();
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Train on records carrying k-space; the weights with the lowest validation
/// loss on `val` are kept (the final weights when `val` is empty).
pub fn train_recon(
    train: &[&SliceRecord],
    val: &[&SliceRecord],
    masks: &MaskGrid,
    cfg: &CascadeConfig,
    phase_source: Option<PhaseSource>,
) -> Result<ReconTraining> {
    cfg.validate()?;
    let train_data = prepare(train, "training")?;
    let val_data = prepare(val, "validation")?;
    let mut ckpt = ReconCheckpoint::init(cfg, masks, cfg.train.seed)?;
    ckpt.meta.phase_source = phase_source;
    let tc = &cfg.train;
    if tc.steps == 0 {
        return Ok(ReconTraining {
            checkpoint: ckpt,
            curve: Vec::new(),
        });
    }
    let Some(first) = train_data.first() else {
        return Err(Error::Config("no training records with k-space".into()));
    };
    let (h, w) = first.kspace.dim();
    if val_data.first().is_some_and(|v| v.kspace.dim() != (h, w)) {
        return Err(Error::Config("validation and training shapes differ".into()));
    }
    let mask_list = masks.masks(w)?;
    ckpt.net.check_inputs(&[1, 1, h, w], w).map_err(|e| Error::Config(e.to_string()))?;

    let mut opt = Adam::new(&ckpt.params);
    let mut rng = rng_from(derive_seed(tc.seed, "recon/train"));
    let mut curve = Vec::with_capacity(tc.steps);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for step in 1..=tc.steps {
        let mi = (step - 1) % mask_list.len();
        let mask = &mask_list[mi];
        let idx: Vec<usize> = (0..tc.batch_size)
            .map(|_| rng.random_range(0..train_data.len()))
            .collect();
        let b = batch(&train_data, &idx, mask)?;
        let tape = Tape::<f32>::new();
        let p = ckpt.params.bind(&tape);
        let out = ckpt
            .net
            .forward(&p, tape.constant(b.re), tape.constant(b.im), &mask.weights())?;
        let loss_var = ssim_loss(out, &b.target, &b.range);
        let loss = f64::from(loss_var.value().data()[0]);
        if !loss.is_finite() {
            return Err(Error::Training {
                index: 0,
                msg: format!("non-finite reconstruction loss at step {step}"),
            });
        }
        let mut g = tape.backward(loss_var);
        let grads = ckpt.params.collect_grads(&p, &mut g);
        drop(p);
        opt.step(&mut ckpt.params, &grads, tc.lr);
        let mut point = ReconCurvePoint {
            step,
            r: masks.points[mi].r,
            n_acs: masks.points[mi].n_acs,
            train_loss: loss,
            val_loss: None,
        };
        if step % tc.val_every == 0 || step == tc.steps {
            if !val_data.is_empty() {
                let v = validation_loss(&ckpt, &val_data, &mask_list, tc.batch_size)?;
                point.val_loss = Some(v);
                if best.as_ref().is_none_or(|(bv, _, _)| v < *bv) {
                    best = Some((v, step, ckpt.params.clone()));
                }
            }
            log::info!(
                "recon step {step}/{}: loss {loss:.4}{}",
                tc.steps,
                point.val_loss.map_or(String::new(), |v| format!(", val loss {v:.4}"))
            );
        }
        curve.push(point);
    }
    ckpt.meta.steps = tc.steps;
    ckpt.meta.final_loss = curve.last().map(|p| p.train_loss);
    ckpt.meta.best_step = tc.steps;
    if let Some((v, step, params)) = best {
        ckpt.params = params;
        ckpt.meta.best_val_loss = Some(v);
        ckpt.meta.best_step = step;
    }
    Ok(ReconTraining { checkpoint: ckpt, curve })
}

/// Reconstruction method under evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    ZeroFilled,
    VarNet(&'a ReconCheckpoint),
}

const EVAL_BATCH: usize = 8;

/// Per-slice SSIM / PSNR / NRMSE against the fully sampled magnitude, with
/// the ground-truth maximum as data range, for every grid point.
pub fn method_scores(method: Method<'_>, test: &[&SliceRecord], grid: &MaskGrid) -> Result<Vec<ScoreSet>> {
    let data = prepare(test, "test")?;
    let Some(first) = data.first() else {
        return Err(Error::Config("no test records".into()));
    };
    let n = first.kspace.ncols();
    let (name, phase_source) = match method {
        Method::ZeroFilled => (ZERO_FILLED, None),
        Method::VarNet(ck) => (VARNET, ck.meta.phase_source),
    };
    let masks = grid.masks(n)?;
    let mut sets = Vec::new();
    for (&spec, mask) in grid.points.iter().zip(&masks) {
        let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(data.len()); Metric::ALL.len()];
        for chunk in test.chunks(EVAL_BATCH).zip(data.chunks(EVAL_BATCH)) {
            let (recs, prepared) = chunk;
            let masked: Vec<Array2<Complex64>> = prepared
                .iter()
                .map(|p| apply_mask(&p.kspace, mask))
                .collect::<Result<_>>()?;
            let recons = match method {
                Method::ZeroFilled => masked.iter().map(zero_filled_recon).collect(),
                Method::VarNet(ck) => ck.reconstruct(&masked.iter().collect::<Vec<_>>(), mask)?,
            };
            for ((rec, p), est) in recs.iter().zip(prepared).zip(&recons) {
                let gt = rec.target_magnitude().expect("k-space present");
                values[0].push(ssim(&gt, est, SSIM_WINDOW, p.range)?);
                values[1].push(psnr(&gt, est, p.range)?);
                values[2].push(nrmse(&gt, est)?);
            }
        }
        for (metric, values) in Metric::ALL.into_iter().zip(values) {
            sets.push(ScoreSet {
                method: name.to_string(),
                phase_source,
                spec,
                r_eff: effective_acceleration(mask),
                metric,
                values,
            });
        }
    }
    Ok(sets)
}

/// Scores of the model plus the zero-filled baseline, one row per
/// `(method, R, n_acs, metric)`.
pub fn evaluate_recon(ckpt: &ReconCheckpoint, test: &[&SliceRecord], grid: &MaskGrid) -> Result<MetricReport> {
    let mut sets = method_scores(Method::VarNet(ckpt), test, grid)?;
    sets.extend(method_scores(Method::ZeroFilled, test, grid)?);
    Ok(MetricReport::from_sets(&sets))
}
