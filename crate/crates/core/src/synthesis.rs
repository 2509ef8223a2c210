//! Phase-map generation (score-model sampling or smooth random fields) and
//! k-space assembly from magnitude/phase pairs.

use std::f64::consts::{PI, TAU};

use ndarray::{Array, Array2, ArrayD, Dimension, IxDyn};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PhaseSource, Provenance, SliceRecord};
use crate::error::{Error, Result};
use crate::fourier::fft2c;
use crate::rng::{derive_seed, rng_from, standard_normals};
use crate::score::ScoreCheckpoint;
use crate::sde::{sample, SamplerConfig};

/// `((x + pi) mod 2 pi) - pi`, always in `[-pi, pi)`.
pub fn wrap_angle(x: f64) -> f64 {
    let r = (x + PI).rem_euclid(TAU);
    // rem_euclid can round up to exactly 2 pi for tiny negative inputs
    let r = if r >= TAU { 0.0 } else { r };
    r - PI
}

pub fn wrap_phase<D: Dimension>(raw: &Array<f64, D>) -> Array<f64, D> {
    raw.mapv(wrap_angle)
}

/// Centered orthonormal transform of `m * exp(i phi)`.
pub fn assemble_kspace(m: &Array2<f64>, phase: &Array2<f64>) -> Result<Array2<Complex64>> {
    if m.dim() != phase.dim() {
        return Err(Error::Contract(format!(
            "magnitude {:?} and phase {:?} shapes differ",
            m.dim(),
            phase.dim()
        )));
    }
    if m.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Contract("magnitude must be nonnegative".into()));
    }
    let mut image = Array2::zeros(m.raw_dim());
    ndarray::Zip::from(&mut image)
        .and(m)
        .and(phase)
        .for_each(|o, &a, &p| *o = Complex64::from_polar(a, p));
    Ok(fft2c(&image))
}

/// Low-frequency Gaussian random field: white noise on a `low_res` grid,
/// bilinear upsampling, rescaled to standard deviation `amplitude`, wrapped.
pub fn smooth_phase_baseline<R: Rng>(
    shape: (usize, usize),
    rng: &mut R,
    low_res: usize,
    amplitude: f64,
) -> Result<Array2<f64>> {
    let (h, w) = shape;
    if low_res == 0 || low_res > h.min(w) {
        return Err(Error::Contract(format!(
            "low_res {low_res} must lie in 1..={}",
            h.min(w)
        )));
    }
    if !(amplitude >= 0.0) {
        return Err(Error::Contract(format!("amplitude must be nonnegative, got {amplitude}")));
    }
    let grid = Array2::from_shape_vec((low_res, low_res), standard_normals(rng, low_res * low_res))
        .expect("grid size");
    if amplitude == 0.0 {
        return Ok(Array2::zeros(shape));
    }
    let coord = |i: usize, n: usize| {
        let c = (i as f64 + 0.5) * low_res as f64 / n as f64 - 0.5;
        let c = c.clamp(0.0, (low_res - 1) as f64);
        let i0 = (c.floor() as usize).min(low_res.saturating_sub(2));
        let f = if low_res == 1 { 0.0 } else { c - i0 as f64 };
        (i0, (i0 + 1).min(low_res - 1), f)
    };
    let field = Array2::from_shape_fn(shape, |(i, j)| {
        let (r0, r1, fr) = coord(i, h);
        let (c0, c1, fc) = coord(j, w);
        (1.0 - fr) * ((1.0 - fc) * grid[[r0, c0]] + fc * grid[[r0, c1]])
            + fr * ((1.0 - fc) * grid[[r1, c0]] + fc * grid[[r1, c1]])
    });
    let n = field.len() as f64;
    let mean = field.sum() / n;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std > 0.0 { amplitude / std } else { 0.0 };
    Ok(wrap_phase(&field.mapv(|v| v * scale)))
}

/// Reverse-time sampling of phase maps for a batch of magnitudes, wrapped.
pub fn sample_phases<R: Rng>(
    ckpt: &ScoreCheckpoint,
    magnitudes: &[&Array2<f64>],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Array2<f64>>> {
    let Some(first) = magnitudes.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = first.dim();
    if magnitudes.iter().any(|m| m.dim() != (h, w)) {
        return Err(Error::Contract("magnitudes in one batch must share a shape".into()));
    }
    let n = magnitudes.len();
    let y = ArrayD::from_shape_vec(
        IxDyn(&[n, h, w]),
        magnitudes.iter().flat_map(|m| m.iter().copied()).collect(),
    )
    .expect("stacked shape");
    let score = ckpt.conditioned(&y)?;
    let x = sample(&ckpt.schedule, &[n, h, w], &score, cfg, rng)?;
    Ok(x.outer_iter()
        .map(|s| wrap_phase(&s.into_dimensionality().expect("2-D slice").to_owned()))
        .collect())
}

pub fn sample_phase<R: Rng>(
    ckpt: &ScoreCheckpoint,
    y: &Array2<f64>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    Ok(sample_phases(ckpt, &[y], cfg, rng)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub smooth_low_res: usize,
    pub smooth_amplitude: f64,
    pub sampler: SamplerConfig,
    /// Records sampled together in one reverse-time pass.
    pub sample_batch: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            smooth_low_res: 8,
            smooth_amplitude: PI / 2.0,
            sampler: SamplerConfig::default(),
            sample_batch: 16,
        }
    }
}

pub enum PhaseGenerator<'a> {
    GroundTruth,
    Smooth,
    Sbdm(&'a ScoreCheckpoint),
}

impl PhaseGenerator<'_> {
    pub fn source(&self) -> PhaseSource {
        match self {
            PhaseGenerator::GroundTruth => PhaseSource::Gt,
            PhaseGenerator::Smooth => PhaseSource::Smooth,
            PhaseGenerator::Sbdm(_) => PhaseSource::Sbdm,
        }
    }
}

fn record_seed(seed: u64, source: PhaseSource, r: &SliceRecord) -> u64 {
    derive_seed(seed, &format!("synth/{source}/{}/{}", r.patient_id, r.slice_index))
}

/// Attach a phase from `generator` and the assembled k-space to every record.
pub fn synthesize_dataset(
    records: &[&SliceRecord],
    generator: &PhaseGenerator<'_>,
    cfg: &SynthesisConfig,
    seed: u64,
) -> Result<Dataset> {
    let source = generator.source();
    let phases: Vec<(Array2<f64>, u64)> = match generator {
        PhaseGenerator::GroundTruth => records
            .iter()
            .map(|r| {
                r.phase.clone().map(|p| (p, seed)).ok_or_else(|| {
                    Error::Config(format!(
                        "record {}/{} has no ground-truth phase",
                        r.patient_id, r.slice_index
                    ))
                })
            })
            .collect::<Result<_>>()?,
        PhaseGenerator::Smooth => records
            .iter()
            .map(|r| {
                let s = record_seed(seed, source, r);
                let p = smooth_phase_baseline(r.shape(), &mut rng_from(s), cfg.smooth_low_res, cfg.smooth_amplitude)?;
                Ok((p, s))
            })
            .collect::<Result<_>>()?,
        PhaseGenerator::Sbdm(ckpt) => {
            let mut out = Vec::with_capacity(records.len());
            for (b, chunk) in records.chunks(cfg.sample_batch.max(1)).enumerate() {
                let s = derive_seed(seed, &format!("synth/sbdm/batch{b}"));
                let mags: Vec<&Array2<f64>> = chunk.iter().map(|r| &r.magnitude).collect();
                let phases = sample_phases(ckpt, &mags, &cfg.sampler, &mut rng_from(s))?;
                log::info!("sampled phase batch {} ({} records)", b + 1, chunk.len());
                out.extend(phases.into_iter().map(|p| (p, s)));
            }
            out
        }
    };
    let synthesized = records
        .iter()
        .zip(phases)
        .map(|(r, (phase, s))| {
            let kspace = assemble_kspace(&r.magnitude, &phase)?;
            Ok(SliceRecord {
                patient_id: r.patient_id.clone(),
                slice_index: r.slice_index,
                magnitude: r.magnitude.clone(),
                scale: r.scale,
                phase: Some(phase),
                kspace: Some(kspace),
                provenance: Provenance::Synthesized { source, seed: s },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new(synthesized)?;
    ds.manifest.phase_source = Some(source);
    ds.manifest.seed = Some(seed);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomConfig};
    use crate::fourier::ifft2c;
    use proptest::prelude::*;

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(1.5 * PI) + 0.5 * PI).abs() < 1e-12);
        assert_eq!(wrap_angle(-5.0 * PI), -PI);
        assert_eq!(wrap_angle(PI), -PI);
        assert!(wrap_angle(-1e-300).abs() < 1e-15);
        let below = f64::from_bits((-PI).to_bits() + 1);
        assert!((-PI..PI).contains(&wrap_angle(below)));
    }

    proptest! {
        #[test]
        fn wrap_range_and_congruence(x in -1e4f64..1e4) {
            let w = wrap_angle(x);
            prop_assert!((-PI..PI).contains(&w));
            let k = ((x - w) / TAU).round();
            prop_assert!((x - w - k * TAU).abs() < 1e-9);
        }

        #[test]
        fn assembly_round_trip_and_energy(seed in any::<u64>()) {
            let mut rng = rng_from(seed);
            let m = Array2::from_shape_fn((12, 10), |_| rng.random_range(0.0..1.0));
            let p = Array2::from_shape_fn((12, 10), |_| rng.random_range(-PI..PI));
            let k = assemble_kspace(&m, &p).unwrap();
            let back = ifft2c(&k);
            let img: Array2<Complex64> = ndarray::Zip::from(&m).and(&p).map_collect(|&a, &b| Complex64::from_polar(a, b));
            let err = back.iter().zip(img.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            prop_assert!(err <= 1e-6);
            let ek: f64 = k.iter().map(|v| v.norm_sqr()).sum();
            let ei: f64 = m.iter().map(|v| v * v).sum();
            prop_assert!((ek - ei).abs() / ei <= 1e-10);
        }
    }

    #[test]
    fn constant_magnitude_gives_dc_spike() {
        let n = 8;
        let k = assemble_kspace(&Array2::ones((n, n)), &Array2::zeros((n, n))).unwrap();
        for ((i, j), v) in k.indexed_iter() {
            let expect = if (i, j) == (n / 2, n / 2) { n as f64 } else { 0.0 };
            assert!((v - Complex64::new(expect, 0.0)).norm() < 1e-12);
        }
        assert!(assemble_kspace(&Array2::from_elem((2, 2), -1.0), &Array2::zeros((2, 2))).is_err());
        assert!(assemble_kspace(&Array2::ones((2, 2)), &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn even_real_image_has_conjugate_symmetric_spectrum() {
        // Even about the center pixel (n/2, n/2) of a 16x16 grid.
        let n = 16;
        let m = Array2::from_shape_fn((n, n), |(i, j)| {
            let (di, dj) = (i as f64 - 8.0, j as f64 - 8.0);
            if (di / 6.0).powi(2) + (dj / 4.0).powi(2) <= 1.0 { 1.0 } else { 0.0 }
        });
        let k = assemble_kspace(&m, &Array2::zeros((n, n))).unwrap();
        for i in 1..n {
            for j in 1..n {
                let mirror = k[[n - i, n - j]].conj();
                assert!((k[[i, j]] - mirror).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn smooth_field_properties() {
        let a = smooth_phase_baseline((32, 32), &mut rng_from(1), 8, PI / 2.0).unwrap();
        let b = smooth_phase_baseline((32, 32), &mut rng_from(1), 8, PI / 2.0).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (-PI..PI).contains(v)));
        let z = smooth_phase_baseline((32, 32), &mut rng_from(1), 8, 0.0).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(smooth_phase_baseline((4, 4), &mut rng_from(1), 8, 1.0).is_err());
    }

    #[test]
    fn smooth_field_is_spatially_smooth() {
        // Unwrapped amplitude small enough to avoid wrap jumps: use the raw field scale.
        let mut ratios = Vec::new();
        for s in 0..100 {
            let f = smooth_phase_baseline((256, 256), &mut rng_from(s), 8, 0.5).unwrap();
            let n = f.len() as f64;
            let mean = f.sum() / n;
            let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let mut diff = 0.0;
            let mut count = 0.0;
            for row in f.rows() {
                for w in row.as_slice().unwrap().windows(2) {
                    diff += wrap_angle(w[1] - w[0]).abs();
                    count += 1.0;
                }
            }
            ratios.push(diff / count / std);
        }
        let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(mean_ratio < 0.2, "{mean_ratio}");
    }

    fn phantoms(n: usize) -> Vec<SliceRecord> {
        (0..n)
            .map(|i| {
                let mut r = generate_phantom(i as u64, 16, &PhantomConfig::default()).unwrap();
                r.patient_id = format!("p{i}");
                r
            })
            .collect()
    }

    #[test]
    fn gt_and_smooth_synthesis() {
        let recs = phantoms(10);
        let refs: Vec<&SliceRecord> = recs.iter().collect();
        let cfg = SynthesisConfig::default();
        let gt = synthesize_dataset(&refs, &PhaseGenerator::GroundTruth, &cfg, 3).unwrap();
        assert_eq!(gt.manifest.phase_source, Some(PhaseSource::Gt));
        for (out, r) in gt.records.iter().zip(&recs) {
            let back = ifft2c(out.kspace.as_ref().unwrap());
            let img = r.complex_image().unwrap();
            let err = back.iter().zip(img.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-6);
        }
        let sm = synthesize_dataset(&refs, &PhaseGenerator::Smooth, &cfg, 3).unwrap();
        assert_eq!(sm.len(), 10);
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(sm.records[i].phase, sm.records[j].phase);
            }
        }
        assert_eq!(sm, synthesize_dataset(&refs, &PhaseGenerator::Smooth, &cfg, 3).unwrap());

        let mut missing = recs.clone();
        missing[4].phase = None;
        let refs: Vec<&SliceRecord> = missing.iter().collect();
        let err = synthesize_dataset(&refs, &PhaseGenerator::GroundTruth, &cfg, 3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
