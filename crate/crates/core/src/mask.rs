//! Cartesian line masks along the last (phase-encode) axis.

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::ifft2c;
use crate::rng::{derive_seed, rng_from};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    #[default]
    Equispaced,
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingMask {
    pub lines: Vec<bool>,
    pub r: usize,
    pub n_acs: usize,
    pub kind: MaskKind,
    pub seed: u64,
}

/// First line of the centered calibration block.
pub fn acs_start(n: usize, n_acs: usize) -> usize {
    (n - n_acs) / 2
}

/// Central `n_acs` lines, plus every `r`-th line from 0 (equispaced) or
/// `floor((n - n_acs) / r)` lines drawn without replacement outside the block (random).
pub fn make_mask(n: usize, r: usize, n_acs: usize, kind: MaskKind, seed: u64) -> Result<SamplingMask> {
    if n == 0 {
        return Err(Error::Contract("mask length must be positive".into()));
    }
    if n_acs > n {
        return Err(Error::Contract(format!("n_acs = {n_acs} exceeds N = {n}")));
    }
    if r == 0 {
        return Err(Error::Contract("acceleration R must be >= 1".into()));
    }
    let mut lines = vec![false; n];
    let start = acs_start(n, n_acs);
    lines[start..start + n_acs].iter_mut().for_each(|l| *l = true);
    match kind {
        MaskKind::Equispaced => {
            for l in lines.iter_mut().step_by(r) {
                *l = true;
            }
        }
        MaskKind::Random => {
            let outside: Vec<usize> = (0..n).filter(|&i| !lines[i]).collect();
            let count = ((n - n_acs) / r).min(outside.len());
            for k in sample(&mut rng_from(seed), outside.len(), count) {
                lines[outside[k]] = true;
            }
        }
    }
    if !lines.iter().any(|&l| l) {
        return Err(Error::Contract(format!(
            "mask (N={n}, R={r}, n_acs={n_acs}) samples no lines"
        )));
    }
    Ok(SamplingMask {
        lines,
        r,
        n_acs,
        kind,
        seed,
    })
}

impl SamplingMask {
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn sampled(&self) -> usize {
        self.lines.iter().filter(|&&l| l).count()
    }

    /// `lines` as a string of `0`/`1`.
    pub fn bitstring(&self) -> String {
        self.lines.iter().map(|&l| if l { '1' } else { '0' }).collect()
    }

    /// Column weights (1 sampled, 0 not).
    pub fn weights(&self) -> Vec<f64> {
        self.lines.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()
    }
}

/// `N / (number of sampled lines)`.
pub fn effective_acceleration(mask: &SamplingMask) -> f64 {
    mask.len() as f64 / mask.sampled().max(1) as f64
}

/// Zero the unsampled columns; sampled columns are copied unchanged.
pub fn apply_mask(kspace: &Array2<Complex64>, mask: &SamplingMask) -> Result<Array2<Complex64>> {
    if kspace.ncols() != mask.len() {
        return Err(Error::Contract(format!(
            "mask length {} does not match {} phase-encode lines",
            mask.len(),
            kspace.ncols()
        )));
    }
    let mut out = kspace.clone();
    for (j, &keep) in mask.lines.iter().enumerate() {
        if !keep {
            out.column_mut(j).fill(Complex64::new(0.0, 0.0));
        }
    }
    Ok(out)
}

/// Magnitude of the centered inverse transform.
pub fn zero_filled_recon(kspace_masked: &Array2<Complex64>) -> Array2<f64> {
    ifft2c(kspace_masked).mapv(|v| v.norm())
}

/// One `(R, n_acs)` point of an evaluation or training grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MaskSpec {
    #[serde(rename = "R")]
    pub r: usize,
    pub n_acs: usize,
}

/// Mask configurations shared by training and evaluation. Each point gets one
/// fixed mask; random masks draw from a seed derived from the point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskGrid {
    pub kind: MaskKind,
    pub seed: u64,
    pub points: Vec<MaskSpec>,
}

impl Default for MaskGrid {
    fn default() -> Self {
        let mut points = Vec::new();
        for r in [2, 3, 4, 6] {
            for n_acs in [16, 26, 31] {
                points.push(MaskSpec { r, n_acs });
            }
        }
        Self {
            kind: MaskKind::Equispaced,
            seed: 0,
            points,
        }
    }
}

impl MaskGrid {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Config("mask grid is empty".into()));
        }
        for p in &self.points {
            if p.r == 0 || p.n_acs > n {
                return Err(Error::Config(format!(
                    "mask point R={}, n_acs={} is invalid for N={n}",
                    p.r, p.n_acs
                )));
            }
        }
        Ok(())
    }

    pub fn mask(&self, spec: MaskSpec, n: usize) -> Result<SamplingMask> {
        let seed = derive_seed(self.seed, &format!("mask/R{}/acs{}", spec.r, spec.n_acs));
        make_mask(n, spec.r, spec.n_acs, self.kind, seed)
    }

    pub fn masks(&self, n: usize) -> Result<Vec<SamplingMask>> {
        self.validate(n)?;
        self.points.iter().map(|&p| self.mask(p, n)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct MaskJson {
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "R")]
    r: usize,
    n_acs: usize,
    kind: MaskKind,
    seed: u64,
    lines: String,
}

impl Serialize for SamplingMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskJson {
            n: self.len(),
            r: self.r,
            n_acs: self.n_acs,
            kind: self.kind,
            seed: self.seed,
            lines: self.bitstring(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SamplingMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let m = MaskJson::deserialize(d)?;
        if m.lines.len() != m.n {
            return Err(D::Error::custom("bitstring length differs from N"));
        }
        let lines = m
            .lines
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(D::Error::custom("bitstring must contain only 0 and 1")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(SamplingMask {
            lines,
            r: m.r,
            n_acs: m.n_acs,
            kind: m.kind,
            seed: m.seed,
        })
    }
}
