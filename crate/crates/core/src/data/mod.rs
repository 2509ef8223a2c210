//! Slice records, synthetic phantoms, preprocessing and patient-level splits.

mod container;
#[cfg(feature = "hdf5")]
pub mod hdf5;
mod resize;

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{fft2c, ifft2c};
use crate::rng::{derive_seed, rng_from};
use crate::synthesis::wrap_phase;

pub use container::{load_dataset, read_array, save_dataset, write_array, ArrayData};
pub use resize::resize_complex;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseSource {
    Gt,
    Smooth,
    Sbdm,
}

impl PhaseSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseSource::Gt => "gt",
            PhaseSource::Smooth => "smooth",
            PhaseSource::Sbdm => "sbdm",
        }
    }
}

impl std::fmt::Display for PhaseSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PhaseSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(PhaseSource::Gt),
            "smooth" => Ok(PhaseSource::Smooth),
            "sbdm" => Ok(PhaseSource::Sbdm),
            other => Err(Error::Config(format!("unknown phase source {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Phantom { seed: u64 },
    Ingested { path: String },
    Synthesized { source: PhaseSource, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub patient_id: String,
    pub slice_index: usize,
    /// Normalized magnitude in `[0, 1]`.
    pub magnitude: Array2<f64>,
    /// Factor the raw magnitude was divided by.
    pub scale: f64,
    pub phase: Option<Array2<f64>>,
    pub kspace: Option<Array2<Complex64>>,
    pub provenance: Provenance,
}

impl SliceRecord {
    pub fn shape(&self) -> (usize, usize) {
        self.magnitude.dim()
    }

    /// Complex image `m * exp(i phi)`; requires a phase.
    pub fn complex_image(&self) -> Option<Array2<Complex64>> {
        let phase = self.phase.as_ref()?;
        let mut out = Array2::zeros(self.magnitude.raw_dim());
        ndarray::Zip::from(&mut out)
            .and(&self.magnitude)
            .and(phase)
            .for_each(|o, &m, &p| *o = Complex64::from_polar(m, p));
        Some(out)
    }

    /// Magnitude of the fully sampled inverse transform of the stored k-space.
    pub fn target_magnitude(&self) -> Option<Array2<f64>> {
        self.kspace.as_ref().map(|k| ifft2c(k).mapv(|v| v.norm()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GenSplit {
    #[serde(rename = "genTrain")]
    GenTrain,
    #[serde(rename = "genVal")]
    GenVal,
    #[serde(rename = "genTest")]
    GenTest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RecSplit {
    #[serde(rename = "recTrain")]
    RecTrain,
    #[serde(rename = "recVal")]
    RecVal,
    #[serde(rename = "recTest")]
    RecTest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSplit {
    pub gen: GenSplit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rec: Option<RecSplit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub patient_id: String,
    pub slice_index: usize,
    pub scale: f64,
    pub provenance: Provenance,
    pub has_phase: bool,
    pub has_kspace: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_size: usize,
    pub records: Vec<RecordEntry>,
    #[serde(default)]
    pub splits: BTreeMap<String, PatientSplit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_source: Option<PhaseSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn patients(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.patient_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn patients_in(&self, gen: GenSplit, rec: Option<RecSplit>) -> BTreeSet<&str> {
        self.splits
            .iter()
            .filter(|(_, s)| s.gen == gen && (rec.is_none() || s.rec == rec))
            .map(|(p, _)| p.as_str())
            .collect()
    }
}

/// Records plus their manifest, kept in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<SliceRecord>,
}

impl Dataset {
    pub fn new(records: Vec<SliceRecord>) -> Result<Self> {
        let image_size = match records.first() {
            Some(r) => r.shape().0,
            None => 0,
        };
        for r in &records {
            if r.shape() != (image_size, image_size) {
                return Err(Error::Contract(format!(
                    "record {}/{} has shape {:?}, expected {image_size}x{image_size}",
                    r.patient_id,
                    r.slice_index,
                    r.shape()
                )));
            }
        }
        let manifest = DatasetManifest {
            version: FORMAT_VERSION,
            image_size,
            records: records.iter().map(entry_of).collect(),
            splits: BTreeMap::new(),
            phase_source: None,
            seed: None,
        };
        Ok(Self { manifest, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn refresh_entries(&mut self) {
        self.manifest.records = self.records.iter().map(entry_of).collect();
    }

    /// Records whose patient is in the given split.
    pub fn subset(&self, gen: GenSplit, rec: Option<RecSplit>) -> Vec<&SliceRecord> {
        let patients = self.manifest.patients_in(gen, rec);
        self.records
            .iter()
            .filter(|r| patients.contains(r.patient_id.as_str()))
            .collect()
    }
}

fn entry_of(r: &SliceRecord) -> RecordEntry {
    RecordEntry {
        patient_id: r.patient_id.clone(),
        slice_index: r.slice_index,
        scale: r.scale,
        provenance: r.provenance.clone(),
        has_phase: r.phase.is_some(),
        has_kspace: r.kspace.is_some(),
    }
}

/// Phantom recipe. Phase = polynomial (order <= 2) + per-ellipse offset, with
/// extra noise outside the object; all wrapped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub min_ellipses: usize,
    pub max_ellipses: usize,
    /// Bound on the random linear/quadratic polynomial coefficients.
    pub poly_amplitude: f64,
    /// Fixed coefficients `[c0, cx, cy, cxx, cxy, cyy]`; random when absent.
    pub fixed_poly: Option<[f64; 6]>,
    pub offset_max: f64,
    pub background_noise_std: f64,
    /// Std of the magnitude noise floor outside the object.
    pub background_level: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            min_ellipses: 4,
            max_ellipses: 8,
            poly_amplitude: 1.0,
            fixed_poly: None,
            offset_max: PI / 2.0,
            background_noise_std: 0.3,
            background_level: 0.02,
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Self {
        Self {
            cx,
            cy,
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Ellipse-composite phantom with a known ground-truth phase.
pub fn generate_phantom(seed: u64, size: usize, cfg: &PhantomConfig) -> Result<SliceRecord> {
    if size < 16 {
        return Err(Error::Contract(format!("phantom size must be >= 16, got {size}")));
    }
    if cfg.min_ellipses > cfg.max_ellipses {
        return Err(Error::Config("min_ellipses exceeds max_ellipses".into()));
    }
    let mut rng = rng_from(seed);
    let coord = |i: usize| 2.0 * (i as f64 + 0.5) / size as f64 - 1.0;

    // Skull ring, brain, then inner structures painted in order.
    let (ox, oy) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    let (oa, ob) = (rng.random_range(0.68..0.85), rng.random_range(0.8..0.95));
    let ot = rng.random_range(-0.2..0.2);
    let mut shapes = vec![
        (Ellipse::new(ox, oy, oa, ob, ot), rng.random_range(0.6..1.0)),
        (
            Ellipse::new(ox, oy, oa * 0.9, ob * 0.92, ot),
            rng.random_range(0.2..0.45),
        ),
    ];
    let count = rng.random_range(cfg.min_ellipses..=cfg.max_ellipses);
    for _ in 0..count {
        let r = rng.random_range(0.0..0.55f64);
        let ang = rng.random_range(0.0..2.0 * PI);
        let e = Ellipse::new(
            ox + r * ang.cos() * oa,
            oy + r * ang.sin() * ob,
            rng.random_range(0.05..0.3),
            rng.random_range(0.05..0.3),
            rng.random_range(0.0..PI),
        );
        shapes.push((e, rng.random_range(0.05..0.95)));
    }
    let offsets: Vec<f64> = shapes
        .iter()
        .map(|_| {
            if cfg.offset_max > 0.0 {
                rng.random_range(-cfg.offset_max..=cfg.offset_max)
            } else {
                0.0
            }
        })
        .collect();
    let poly = match cfg.fixed_poly {
        Some(c) => c,
        None => {
            let a = cfg.poly_amplitude;
            let mut c = [0.0; 6];
            c[0] = rng.random_range(-PI..PI);
            for v in c.iter_mut().skip(1) {
                *v = if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
            }
            c
        }
    };
    let noise = Normal::new(0.0, cfg.background_noise_std.max(0.0)).expect("finite std");
    let floor = Normal::new(0.0, cfg.background_level.max(0.0)).expect("finite std");

    let mut raw = Array2::zeros((size, size));
    let mut phase = Array2::zeros((size, size));
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (coord(i), coord(j));
            let mut value = None;
            for (k, (e, intensity)) in shapes.iter().enumerate() {
                if e.contains(x, y) {
                    value = Some((*intensity, offsets[k]));
                }
            }
            let p = poly[0]
                + poly[1] * x
                + poly[2] * y
                + poly[3] * x * x
                + poly[4] * x * y
                + poly[5] * y * y;
            match value {
                Some((m, off)) => {
                    raw[[i, j]] = m;
                    phase[[i, j]] = p + off;
                }
                None => {
                    let f: f64 = floor.sample(&mut rng);
                    raw[[i, j]] = f.abs();
                    phase[[i, j]] = p + noise.sample(&mut rng);
                }
            }
        }
    }
    let (magnitude, scale) = normalize_magnitude(&raw)?;
    let mut rec = SliceRecord {
        patient_id: String::new(),
        slice_index: 0,
        magnitude,
        scale,
        phase: Some(wrap_phase(&phase)),
        kspace: None,
        provenance: Provenance::Phantom { seed },
    };
    // A phantom plays the role of a fully sampled acquisition.
    rec.kspace = Some(fft2c(&rec.complex_image().expect("phase set")));
    Ok(rec)
}

/// `count` phantoms, one slice per patient, seeds derived from `seed`.
pub fn phantom_dataset(count: usize, size: usize, cfg: &PhantomConfig, seed: u64) -> Result<Dataset> {
    let width = count.max(1).to_string().len().max(4);
    let records = (0..count)
        .map(|i| {
            let mut r = generate_phantom(derive_seed(seed, &format!("phantom/{i}")), size, cfg)?;
            r.patient_id = format!("phantom-{i:0width$}");
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new(records)?;
    ds.manifest.image_size = size;
    ds.manifest.seed = Some(seed);
    Ok(ds)
}

/// Divide by the nearest-rank 99.5th percentile and clip to `[0, 1]`.
///
/// Falls back to the maximum when the percentile is zero; an all-zero slice
/// comes back unchanged with scale 1.
pub fn normalize_magnitude(raw: &Array2<f64>) -> Result<(Array2<f64>, f64)> {
    if raw.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Contract("magnitude must be finite and nonnegative".into()));
    }
    if raw.is_empty() {
        return Ok((raw.clone(), 1.0));
    }
    let mut sorted: Vec<f64> = raw.iter().copied().collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((0.995 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let mut scale = sorted[rank - 1];
    if scale == 0.0 {
        scale = *sorted.last().expect("nonempty");
    }
    if scale == 0.0 {
        return Ok((raw.clone(), 1.0));
    }
    Ok((raw.mapv(|v| (v / scale).min(1.0)), scale))
}

/// Central square crop of k-space, inverse transform, then image-domain resize
/// to `target x target`. Returns `(magnitude, wrapped phase, complex image)`.
pub fn center_crop_resize(
    kspace: &Array2<Complex64>,
    target: usize,
) -> Result<(Array2<f64>, Array2<f64>, Array2<Complex64>)> {
    let (h, w) = kspace.dim();
    let side = h.min(w);
    if target == 0 || target > side {
        return Err(Error::Contract(format!(
            "target {target} exceeds source size {h}x{w}"
        )));
    }
    let (r0, c0) = ((h - side) / 2, (w - side) / 2);
    let crop = kspace
        .slice(ndarray::s![r0..r0 + side, c0..c0 + side])
        .to_owned();
    let image = resize_complex(&ifft2c(&crop), target, target);
    let magnitude = image.mapv(|v| v.norm());
    let phase = wrap_phase(&image.mapv(|v| v.arg()));
    Ok((magnitude, phase, image))
}

/// Turn an un-normalized complex image into a record with consistent k-space.
pub fn record_from_complex(
    image: &Array2<Complex64>,
    patient_id: String,
    slice_index: usize,
    provenance: Provenance,
) -> Result<SliceRecord> {
    let (magnitude, scale) = normalize_magnitude(&image.mapv(|v| v.norm()))?;
    // Clipping only touches the top half-percent; the complex image keeps the
    // clipped magnitude so phase, magnitude and k-space stay consistent.
    let phase = wrap_phase(&image.mapv(|v| v.arg()));
    let mut rec = SliceRecord {
        patient_id,
        slice_index,
        magnitude,
        scale,
        phase: Some(phase),
        kspace: None,
        provenance,
    };
    rec.kspace = Some(fft2c(&rec.complex_image().expect("phase set")));
    Ok(rec)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub gen: [f64; 3],
    pub rec: [f64; 3],
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            gen: [0.6, 0.1, 0.3],
            rec: [0.6, 0.1, 0.3],
        }
    }
}

fn check_ratios(r: &[f64; 3], level: &str) -> Result<()> {
    if r.iter().any(|v| !(*v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{level} split ratios {r:?} must be nonnegative and sum to 1"
        )));
    }
    Ok(())
}

/// Contiguous assignment of an already shuffled list by cumulative ratio.
fn assign<T: Copy>(n: usize, ratios: &[f64; 3], labels: [T; 3], level: &str) -> Result<Vec<T>> {
    if n < 3 {
        return Err(Error::Config(format!(
            "{level} split needs at least 3 patients, found {n}"
        )));
    }
    let mut bounds = [0usize; 3];
    let mut cum = 0.0;
    for (k, r) in ratios.iter().enumerate() {
        cum += r;
        bounds[k] = ((cum * n as f64).round() as usize).min(n);
    }
    bounds[2] = n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for k in 0..3 {
        let len = bounds[k].saturating_sub(start);
        if len == 0 && ratios[k] > 0.0 {
            return Err(Error::Config(format!(
                "{level} split {k} is empty for {n} patients with ratios {ratios:?}"
            )));
        }
        out.extend(std::iter::repeat_n(labels[k], len));
        start = start.max(bounds[k]);
    }
    Ok(out)
}

/// Shuffle patients with `seed` and assign contiguous blocks by ratio; the
/// second level only partitions genTest.
pub fn split_dataset(manifest: &DatasetManifest, ratios: &SplitRatios, seed: u64) -> Result<DatasetManifest> {
    check_ratios(&ratios.gen, "generative")?;
    check_ratios(&ratios.rec, "reconstruction")?;
    let mut patients = manifest.patients();
    let mut rng = rng_from(derive_seed(seed, "split/gen"));
    patients.shuffle(&mut rng);
    let gen = assign(
        patients.len(),
        &ratios.gen,
        [GenSplit::GenTrain, GenSplit::GenVal, GenSplit::GenTest],
        "generative",
    )?;
    let mut test: Vec<String> = patients
        .iter()
        .zip(&gen)
        .filter(|(_, g)| **g == GenSplit::GenTest)
        .map(|(p, _)| p.clone())
        .collect();
    test.shuffle(&mut rng_from(derive_seed(seed, "split/rec")));
    let rec = assign(
        test.len(),
        &ratios.rec,
        [RecSplit::RecTrain, RecSplit::RecVal, RecSplit::RecTest],
        "reconstruction",
    )?;
    let mut out = manifest.clone();
    out.splits = patients
        .into_iter()
        .zip(gen)
        .map(|(p, g)| (p, PatientSplit { gen: g, rec: None }))
        .collect();
    for (p, r) in test.into_iter().zip(rec) {
        out.splits.get_mut(&p).expect("test patient").rec = Some(r);
    }
    Ok(out)
}
