//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 2 3`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayD};
use num_complex::Complex64;
use phaseforge::data::{generate_phantom, PhantomConfig};
use phaseforge::fourier::ifft2c;
use phaseforge::mask::{acs_start, effective_acceleration, make_mask, MaskGrid, MaskKind, SamplingMask};
use phaseforge::metrics::{frechet_distance, nrmse, ssim, FeatureStats};
use phaseforge::nn::{ParamStore, Tape, Tensor};
use phaseforge::pipeline::{run_all, ExperimentConfig};
use phaseforge::recon::{CascadeConfig, ReconCheckpoint};
use phaseforge::rng::rng_from;
use phaseforge::score::{dsm_loss, ScoreNet, ScoreNetworkConfig};
use phaseforge::sde::{marginal_perturb, sample, NoiseSchedule, SamplerConfig};
use phaseforge::synthesis::{assemble_kspace, wrap_angle};
use rand::Rng;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

const SIGMA_MIN: f64 = 0.01;
const SIGMA_MAX: f64 = 378.0;

/// Independent evaluation of the geometric noise scale.
fn sigma_oracle(t: f64) -> f64 {
    SIGMA_MIN * (SIGMA_MAX / SIGMA_MIN).powf(t)
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn c1_schedule() -> Outcome {
    let s = NoiseSchedule::default();
    let lo = s.sigma_at(0.0)?;
    let hi = s.sigma_at(1.0)?;
    let mid = s.sigma_at(0.5)?;
    let geo = (SIGMA_MIN * SIGMA_MAX).sqrt();
    let rel = (mid - geo).abs() / geo;
    let exact = lo.to_bits() == SIGMA_MIN.to_bits() && hi.to_bits() == SIGMA_MAX.to_bits();
    Ok((
        exact && rel <= 1e-12,
        format!("sigma(0)={lo:e} sigma(1)={hi:e} midpoint rel err {rel:.2e}"),
    ))
}

fn c2_perturbation() -> Outcome {
    let s = NoiseSchedule::default();
    let mut rng = rng_from(2);
    let x0 = ArrayD::<f64>::zeros(vec![100_000]);
    let mut worst = 0.0f64;
    for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let (xt, _) = marginal_perturb(&s, &x0, t, &mut rng)?;
        let (_, std) = mean_std(xt.as_slice().expect("contiguous"));
        worst = worst.max((std / sigma_oracle(t) - 1.0).abs());
    }
    Ok((worst <= 0.02, format!("worst relative std error {:.3}%", 100.0 * worst)))
}

fn c3_sampler_oracle() -> Outcome {
    let s = NoiseSchedule::default();
    // Data N(0, I): the perturbed marginal is N(0, (1 + sigma^2) I).
    let score = |x: &ArrayD<f64>, t: f64| {
        let var = 1.0 + sigma_oracle(t).powi(2);
        x.mapv(|v| -v / var)
    };
    let cfg = SamplerConfig {
        steps: Some(500),
        ..SamplerConfig::default()
    };
    let x = sample(&s, &[10_000, 2], &score, &cfg, &mut rng_from(3))?;
    let mut ok = true;
    let mut detail = Vec::new();
    for d in 0..2 {
        let col: Vec<f64> = x.index_axis(ndarray::Axis(1), d).iter().copied().collect();
        let (m, sd) = mean_std(&col);
        ok &= m.abs() <= 0.05 && (sd - 1.0).abs() <= 0.05;
        detail.push(format!("dim{d}: mean {m:+.4} std {sd:.4}"));
    }
    Ok((ok, detail.join(", ")))
}

fn c4_dsm() -> Outcome {
    let s = NoiseSchedule::default();
    let recs: Vec<_> = (0..8)
        .map(|i| generate_phantom(40 + i, 16, &PhantomConfig::default()))
        .collect::<Result<_, _>>()?;
    let n = recs.len();
    let x0: Vec<f64> = recs.iter().flat_map(|r| r.phase.as_ref().unwrap().iter().copied()).collect();
    let y: Vec<f64> = recs.iter().flat_map(|r| r.magnitude.iter().copied()).collect();
    let shape = [n, 1, 16, 16];
    let x0 = Tensor::<f64>::from_f64(&shape, &x0);
    let y = Tensor::<f64>::from_f64(&shape, &y);

    let tape = Tape::<f64>::new();
    let out = dsm_loss(&tape, &x0, &y, &s, &mut rng_from(4), |x, _y, t| {
        let inv_var: Vec<f64> = t.iter().map(|&ti| 1.0 / sigma_oracle(ti).powi(2)).collect();
        Ok((tape.constant(x0.clone()) - x).scale_per_sample(&inv_var))
    })?;
    let worst = out.per_sample.iter().cloned().fold(0.0, f64::max);
    let optimum_ok = worst <= 1e-10;

    let net_cfg = ScoreNetworkConfig {
        base_channels: 4,
        depth: 2,
        time_embedding_dim: 8,
        max_groups: 2,
        ..ScoreNetworkConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let net = ScoreNet::new(&net_cfg, &s, &mut store, &mut rng_from(41))?;
    let loss_of = |store: &ParamStore<f64>| -> phaseforge::Result<f64> {
        let tape = Tape::<f64>::new();
        let p = store.bind(&tape);
        let out = dsm_loss(&tape, &x0, &y, &s, &mut rng_from(42), |x, y, t| net.forward(&p, x, y, t))?;
        Ok(out.loss.value().data()[0])
    };
    let tape = Tape::<f64>::new();
    let p = store.bind(&tape);
    let out = dsm_loss(&tape, &x0, &y, &s, &mut rng_from(42), |x, y, t| net.forward(&p, x, y, t))?;
    let mut g = tape.backward(out.loss);
    let grads = store.collect_grads(&p, &mut g);
    drop(p);

    let mut rng = rng_from(43);
    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    for _ in 0..10 {
        let ti = rng.random_range(0..store.len());
        let j = rng.random_range(0..store.tensors()[ti].len());
        let orig = store.tensors()[ti].data()[j];
        store.tensors_mut()[ti].data_mut()[j] = orig + h;
        let up = loss_of(&store)?;
        store.tensors_mut()[ti].data_mut()[j] = orig - h;
        let down = loss_of(&store)?;
        store.tensors_mut()[ti].data_mut()[j] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = grads[ti].data()[j];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        worst_rel = worst_rel.max(rel);
    }
    Ok((
        optimum_ok && worst_rel <= 1e-4,
        format!("oracle-score loss max {worst:.2e} per sample, worst gradient rel err {worst_rel:.2e}"),
    ))
}

fn c5_assembly() -> Outcome {
    let mut rng = rng_from(5);
    let (mut mag_err, mut phase_err, mut energy_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let rec = generate_phantom(rng.random(), 64, &PhantomConfig::default())?;
        let phase = rec.phase.as_ref().unwrap();
        let k = assemble_kspace(&rec.magnitude, phase)?;
        let img = ifft2c(&k);
        for ((z, &m), &p) in img.iter().zip(&rec.magnitude).zip(phase) {
            mag_err = mag_err.max((z.norm() - m).abs());
            phase_err = phase_err.max(wrap_angle(z.arg() - p).abs());
        }
        let ek: f64 = k.iter().map(|z| z.norm_sqr()).sum();
        let em: f64 = rec.magnitude.iter().map(|m| m * m).sum();
        energy_err = energy_err.max((ek - em).abs() / em);
    }
    Ok((
        mag_err <= 1e-6 && phase_err <= 1e-6 && energy_err <= 1e-10,
        format!("max |m| err {mag_err:.2e}, max phase err {phase_err:.2e}, energy rel err {energy_err:.2e}"),
    ))
}

fn c6_masks() -> Outcome {
    let n = 256;
    let mut ok = true;
    let mut reff = Vec::new();
    for r in [2, 3, 4, 6] {
        for n_acs in [16, 26, 31] {
            let a = make_mask(n, r, n_acs, MaskKind::Equispaced, 0)?;
            let b = make_mask(n, r, n_acs, MaskKind::Equispaced, 99)?;
            let start = (n - n_acs) / 2;
            let oracle: Vec<bool> = (0..n).map(|i| i % r == 0 || (start..start + n_acs).contains(&i)).collect();
            let count = oracle.iter().filter(|&&s| s).count();
            let acs_ok = acs_start(n, n_acs) == start && a.lines[start..start + n_acs].iter().all(|&s| s);
            let expected = n as f64 / count as f64;
            let got = effective_acceleration(&a);
            ok &= acs_ok && a == SamplingMask { seed: 0, ..b.clone() } && a.lines == b.lines;
            ok &= a.lines == oracle && got == expected && got <= r as f64;
            reff.push(format!("{r}/{n_acs}:{got:.3}"));
        }
    }
    let grid_ok = MaskGrid::default().masks(n)?.len() == 12;
    Ok((ok && grid_ok, format!("R_eff {}", reff.join(" "))))
}

fn c7_data_consistency() -> Outcome {
    let n = 64;
    let cascade = CascadeConfig {
        num_cascades: 12,
        dc_weight_init: 1.0,
        ..CascadeConfig::default()
    };
    let mut ck = ReconCheckpoint::init(&cascade, &MaskGrid::default(), 7)?;
    let etas = ck.etas();
    let eta_names: Vec<String> = (0..12).map(|i| format!("cascade{i}.eta")).collect();
    let names: Vec<String> = ck.params.names().to_vec();
    for (name, t) in names.iter().zip(ck.params.tensors_mut()) {
        if !eta_names.contains(name) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let recs: Vec<_> = (0..4)
        .map(|i| generate_phantom(70 + i, n, &PhantomConfig::default()))
        .collect::<Result<_, _>>()?;
    let full: Vec<Array2<Complex64>> = recs.iter().map(|r| r.kspace.clone().unwrap()).collect();

    let mask = make_mask(n, 4, 8, MaskKind::Equispaced, 0)?;
    let keep = mask.weights();
    let y: Vec<Array2<Complex64>> = full
        .iter()
        .map(|k| Array2::from_shape_fn(k.dim(), |(i, j)| k[[i, j]] * keep[j]))
        .collect();
    let refs: Vec<&Array2<Complex64>> = y.iter().collect();
    let out = ck.final_kspace(&refs, &mask)?;
    let mut changed = 0usize;
    for (k, yk) in out.iter().zip(&y) {
        for ((i, j), v) in k.indexed_iter() {
            let want = Complex64::new(yk[[i, j]].re as f32 as f64, yk[[i, j]].im as f32 as f64);
            if mask.lines[j] && *v != want {
                changed += 1;
            }
        }
    }

    let all = SamplingMask {
        lines: vec![true; n],
        r: 1,
        n_acs: n,
        kind: MaskKind::Equispaced,
        seed: 0,
    };
    let full_refs: Vec<&Array2<Complex64>> = full.iter().collect();
    let mags = ck.reconstruct(&full_refs, &all)?;
    let mut err = 0.0f64;
    for (m, r) in mags.iter().zip(&recs) {
        err = err.max(m.iter().zip(&r.magnitude).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok((
        etas.iter().all(|&e| e == 1.0) && changed == 0 && err <= 1e-5,
        format!("{changed} sampled entries changed over 12 cascades, full-mask max err {err:.2e}"),
    ))
}

fn c8_metrics() -> Outcome {
    let rec = generate_phantom(8, 64, &PhantomConfig::default())?;
    let x = &rec.magnitude;
    let range = x.iter().cloned().fold(0.0, f64::max);
    let e_nrmse = nrmse(x, x)?;
    let e_ssim = (ssim(x, x, 7, range)? - 1.0).abs();
    let stats = |mean: f64, var: f64| FeatureStats {
        mean: vec![mean],
        cov: vec![var],
        n: 100,
    };
    let mut rng = rng_from(8);
    let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect();
    let a = FeatureStats::from_features(&rows)?;
    let self_fd = frechet_distance(&a, &a)?;
    let shift = frechet_distance(&stats(0.0, 1.0), &stats(2.0, 1.0))?;
    let scale = frechet_distance(&stats(0.0, 1.0), &stats(0.0, 4.0))?;
    let ok = e_nrmse == 0.0
        && e_ssim <= 1e-12
        && self_fd.abs() <= 1e-8
        && (shift - 4.0).abs() <= 1e-8
        && (scale - 1.0).abs() <= 1e-8;
    Ok((
        ok,
        format!(
            "nrmse(x,x)={e_nrmse:e} |ssim(x,x)-1|={e_ssim:.1e} fd(a,a)={self_fd:.1e} shift->{shift} scale->{scale}"
        ),
    ))
}

/// `(method, phase_source, R, n_acs, metric)`
type RowKey = (String, String, usize, usize, String);

fn read_means(csv: &Path) -> Result<BTreeMap<RowKey, f64>, Box<dyn std::error::Error>> {
    let text = std::fs::read_to_string(csv)?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        out.insert(
            (f[0].into(), f[1].into(), f[2].parse()?, f[3].parse()?, f[5].into()),
            f[6].parse()?,
        );
    }
    Ok(out)
}

fn c9_desk_trend() -> Outcome {
    let mut cfg = ExperimentConfig::load(&repo_root().join("configs/desk.toml"))?;
    cfg.out_dir = scratch_dir("desk");
    let summary = run_all(&cfg)?;
    let means = read_means(&cfg.out_dir.join("reports/metrics.csv"))?;
    let get = |method: &str, src: &str, r: usize| {
        means
            .get(&(method.into(), src.into(), r, 16, "nrmse".into()))
            .copied()
            .unwrap_or(f64::NAN)
    };
    let (gt, sbdm, smooth) = (get("varnet", "gt", 6), get("varnet", "sbdm", 6), get("varnet", "smooth", 6));
    let mut ok = gt <= sbdm && sbdm <= smooth;
    let mut detail = vec![format!("R6 NRMSE gt {gt:.4} sbdm {sbdm:.4} smooth {smooth:.4}")];
    for r in [2, 4, 6] {
        let zf = get("zero_filled", "none", r);
        let models: Vec<f64> = ["gt", "sbdm", "smooth"].iter().map(|s| get("varnet", s, r)).collect();
        ok &= models.iter().all(|&m| m < zf);
        detail.push(format!(
            "R{r} zf {zf:.4} vs {:.4}/{:.4}/{:.4}",
            models[0], models[1], models[2]
        ));
    }
    for line in summary {
        detail.push(line);
    }
    Ok((ok, detail.join("\n      ")))
}

fn c10_reproducible() -> Outcome {
    let mut cfg = ExperimentConfig::load(&repo_root().join("configs/smoke.toml"))?;
    let mut csv = Vec::new();
    for name in ["smoke-a", "smoke-b"] {
        cfg.out_dir = scratch_dir(name);
        run_all(&cfg)?;
        csv.push(std::fs::read(cfg.out_dir.join("reports/metrics.csv"))?);
    }
    let rows = String::from_utf8_lossy(&csv[0]).lines().count().saturating_sub(1);
    Ok((
        csv[0] == csv[1] && rows > 0,
        format!("{rows} rows, byte-identical: {}", csv[0] == csv[1]),
    ))
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "schedule exactness", budget: Duration::from_secs(1), run: c1_schedule },
        Criterion { id: 2, name: "perturbation kernel statistics", budget: Duration::from_secs(10), run: c2_perturbation },
        Criterion { id: 3, name: "analytic-score sampler oracle", budget: Duration::from_secs(120), run: c3_sampler_oracle },
        Criterion { id: 4, name: "DSM optimum and gradient", budget: Duration::from_secs(60), run: c4_dsm },
        Criterion { id: 5, name: "k-space assembly round trip", budget: Duration::from_secs(30), run: c5_assembly },
        Criterion { id: 6, name: "mask enumeration", budget: Duration::from_secs(5), run: c6_masks },
        Criterion { id: 7, name: "DC fixed point and full-mask identity", budget: Duration::from_secs(30), run: c7_data_consistency },
        Criterion { id: 8, name: "metric identities", budget: Duration::from_secs(10), run: c8_metrics },
        Criterion { id: 9, name: "desk-scale trend", budget: Duration::from_secs(4 * 3600), run: c9_desk_trend },
        Criterion { id: 10, name: "run-all reproducibility", budget: Duration::from_secs(600), run: c10_reproducible },
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run));
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(Ok((pass, detail))) => (pass, detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        let in_time = elapsed <= c.budget;
        let pass = pass && in_time;
        let timing = if in_time { String::new() } else { format!(", over the {:?} budget", c.budget) };
        println!(
            "{} {:>2} {} ({:.2}s{timing}): {detail}",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
        if !pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
