//! Configuration-driven experiment stages: data, generative model, synthesis,
//! reconstruction training and evaluation.
//!
//! Every stage seed is derived from the root seed with a fixed label
//! (`dataset`, `splits`, `sbdm`, `synthesis`, `recon/seed{s}`), so section-level
//! seed fields in the config file are overwritten.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_dataset, phantom_dataset, save_dataset, split_dataset, Dataset, GenSplit, PhantomConfig, PhaseSource,
    RecSplit, SliceRecord, SplitRatios,
};
use crate::error::{Error, Result};
use crate::mask::MaskGrid;
use crate::metrics::{embed_features, frechet_distance, RandomConvExtractor};
use crate::plot::grouped_bar_chart;
use crate::recon::{method_scores, train_recon, CascadeConfig, Method, Metric, MetricReport, ReconCheckpoint, ScoreSet};
use crate::rng::derive_seed;
use crate::score::{train, ScoreCheckpoint, ScoreNetworkConfig, TrainConfig};
use crate::sde::NoiseSchedule;
use crate::synthesis::{synthesize_dataset, PhaseGenerator, SynthesisConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Phantom,
    Ingest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DataSource,
    /// Side length of the square images.
    pub size: usize,
    /// Number of phantoms (one slice per patient).
    pub count: usize,
    /// HDF5 files or directories of `*.h5` files for `source = "ingest"`.
    pub ingest: Vec<PathBuf>,
    pub phantom: PhantomConfig,
    pub splits: SplitRatios,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::Phantom,
            size: 64,
            count: 200,
            ingest: Vec::new(),
            phantom: PhantomConfig::default(),
            splits: SplitRatios::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SbdmSection {
    pub schedule: NoiseSchedule,
    pub network: ScoreNetworkConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSection {
    pub sources: Vec<PhaseSource>,
    pub settings: SynthesisConfig,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        Self {
            sources: vec![PhaseSource::Gt, PhaseSource::Sbdm, PhaseSource::Smooth],
            settings: SynthesisConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    pub cascade: CascadeConfig,
    /// Mask configurations used for training and evaluation.
    pub masks: MaskGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub metrics: Vec<Metric>,
    /// Reconstruction-training seeds; results are averaged over them.
    pub seeds: Vec<u64>,
    pub plots: bool,
    /// Frechet distance between synthesized and ground-truth phase features.
    pub fid: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            plots: true,
            fid: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Root of every artifact written by the pipeline.
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub sbdm: SbdmSection,
    pub synthesis: SynthesisSection,
    pub recon: ReconSection,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            sbdm: SbdmSection::default(),
            synthesis: SynthesisSection::default(),
            recon: ReconSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.size == 0 {
            return Err(Error::Config("dataset.size must be positive".into()));
        }
        if d.source == DataSource::Ingest && d.ingest.is_empty() {
            return Err(Error::Config("dataset.ingest lists no files".into()));
        }
        self.recon.masks.validate(d.size)?;
        self.recon.cascade.validate()?;
        if self.synthesis.sources.is_empty() {
            return Err(Error::Config("synthesis.sources is empty".into()));
        }
        let mut seen = Vec::new();
        for s in &self.synthesis.sources {
            if seen.contains(s) {
                return Err(Error::Config(format!("phase source {s} listed twice")));
            }
            seen.push(*s);
        }
        if self.evaluation.seeds.is_empty() {
            return Err(Error::Config("evaluation.seeds is empty".into()));
        }
        if self.evaluation.metrics.is_empty() {
            return Err(Error::Config("evaluation.metrics is empty".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.out_dir.clone(),
        }
    }
}

/// Fixed artifact locations under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn sbdm_checkpoint(&self) -> PathBuf {
        self.root.join("sbdm").join("score.ckpt")
    }

    pub fn sbdm_curve(&self) -> PathBuf {
        self.root.join("sbdm").join("loss_curve.csv")
    }

    pub fn synthesized(&self, source: PhaseSource) -> PathBuf {
        self.root.join("synth").join(source.as_str())
    }

    pub fn recon_checkpoint(&self, source: PhaseSource, seed: u64) -> PathBuf {
        self.root.join("recon").join(source.as_str()).join(format!("seed{seed}.ckpt"))
    }

    pub fn recon_curve(&self, source: PhaseSource, seed: u64) -> PathBuf {
        self.root.join("recon").join(source.as_str()).join(format!("seed{seed}_curve.csv"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.reports().join("metrics.csv")
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.reports().join("metrics.json")
    }

    pub fn fid_json(&self) -> PathBuf {
        self.reports().join("fid.json")
    }

    pub fn plot(&self, metric: Metric) -> PathBuf {
        self.reports().join("plots").join(format!("{}.png", metric.as_str()))
    }
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found at {} ({hint})", path.display())))
    }
}

fn load_base(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg.layout().dataset();
    require(&dir.join("manifest.json"), "dataset", "run `phantom` or `ingest` first")?;
    load_dataset(&dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn split_summary(ds: &Dataset) -> String {
    let m = &ds.manifest;
    let mut s = format!("{} records, {} patients:", ds.len(), m.patients().len());
    for (g, name) in [
        (GenSplit::GenTrain, "genTrain"),
        (GenSplit::GenVal, "genVal"),
        (GenSplit::GenTest, "genTest"),
    ] {
        let _ = write!(s, " {name} {}", m.patients_in(g, None).len());
    }
    for (r, name) in [
        (RecSplit::RecTrain, "recTrain"),
        (RecSplit::RecVal, "recVal"),
        (RecSplit::RecTest, "recTest"),
    ] {
        let _ = write!(s, " {name} {}", m.patients_in(GenSplit::GenTest, Some(r)).len());
    }
    s
}

fn finish_dataset(cfg: &ExperimentConfig, mut ds: Dataset) -> Result<String> {
    ds.manifest = split_dataset(&ds.manifest, &cfg.dataset.splits, derive_seed(cfg.seed, "splits"))?;
    save_dataset(&ds, &cfg.layout().dataset())?;
    Ok(format!("dataset: {}", split_summary(&ds)))
}

/// Generate phantoms, split patients and write the dataset container.
pub fn cmd_phantom(cfg: &ExperimentConfig) -> Result<String> {
    let d = &cfg.dataset;
    let ds = phantom_dataset(d.count, d.size, &d.phantom, derive_seed(cfg.seed, "dataset"))?;
    finish_dataset(cfg, ds)
}

fn h5_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "h5" || x == "hdf5"))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.exists() {
            files.push(p.clone());
        } else {
            return Err(Error::Config(format!("ingest path {} does not exist", p.display())));
        }
    }
    if files.is_empty() {
        return Err(Error::Config("no HDF5 files to ingest".into()));
    }
    Ok(files)
}

/// Read single-coil HDF5 k-space files, split patients and write the container.
pub fn cmd_ingest(cfg: &ExperimentConfig) -> Result<String> {
    let files = h5_files(&cfg.dataset.ingest)?;
    ingest_files(cfg, &files)
}

#[cfg(feature = "hdf5")]
fn ingest_files(cfg: &ExperimentConfig, files: &[PathBuf]) -> Result<String> {
    let mut records = Vec::new();
    for f in files {
        records.extend(crate::data::hdf5::ingest_hdf5_kspace(f, cfg.dataset.size)?);
    }
    let mut ds = Dataset::new(records)?;
    ds.manifest.image_size = cfg.dataset.size;
    finish_dataset(cfg, ds)
}

#[cfg(not(feature = "hdf5"))]
fn ingest_files(_: &ExperimentConfig, _: &[PathBuf]) -> Result<String> {
    Err(Error::Config("this build has no HDF5 support".into()))
}

/// Train the conditional score model on genTrain, selecting on genVal.
pub fn cmd_train_sbdm(cfg: &ExperimentConfig) -> Result<String> {
    let ds = load_base(cfg)?;
    let train_set = ds.subset(GenSplit::GenTrain, None);
    let val_set = ds.subset(GenSplit::GenVal, None);
    let mut tc = cfg.sbdm.train.clone();
    tc.seed = derive_seed(cfg.seed, "sbdm");
    let out = train(&train_set, &val_set, &cfg.sbdm.network, &tc, &cfg.sbdm.schedule)?;
    let layout = cfg.layout();
    out.checkpoint.save(&layout.sbdm_checkpoint())?;
    let mut csv = String::from("step,lr,train_loss,val_loss\n");
    for p in &out.curve {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            p.step,
            p.lr,
            p.train_loss,
            p.val_loss.map_or(String::new(), |v| v.to_string())
        );
    }
    write_text(&layout.sbdm_curve(), &csv)?;
    Ok(format!(
        "sbdm: {} steps on {} records, best step {}{}",
        out.checkpoint.meta.steps,
        train_set.len(),
        out.checkpoint.meta.best_step,
        out.checkpoint
            .meta
            .best_val_loss
            .map_or(String::new(), |v| format!(", val loss {v:.4}"))
    ))
}

fn is_rec_train_or_val(ds: &Dataset, r: &SliceRecord) -> bool {
    ds.manifest
        .splits
        .get(&r.patient_id)
        .is_some_and(|s| matches!(s.rec, Some(RecSplit::RecTrain | RecSplit::RecVal)))
}

/// One synthesized dataset per phase source over the recTrain and recVal magnitudes.
pub fn cmd_synthesize(cfg: &ExperimentConfig) -> Result<String> {
    let base = load_base(cfg)?;
    let records: Vec<&SliceRecord> = base.records.iter().filter(|r| is_rec_train_or_val(&base, r)).collect();
    if records.is_empty() {
        return Err(Error::Config("no recTrain/recVal records to synthesize".into()));
    }
    let layout = cfg.layout();
    let sbdm = if cfg.synthesis.sources.contains(&PhaseSource::Sbdm) {
        let path = layout.sbdm_checkpoint();
        require(&path, "score checkpoint", "run `train-sbdm` first")?;
        Some(ScoreCheckpoint::load(&path)?)
    } else {
        None
    };
    let mut summary = Vec::new();
    for &source in &cfg.synthesis.sources {
        let generator = match source {
            PhaseSource::Gt => PhaseGenerator::GroundTruth,
            PhaseSource::Smooth => PhaseGenerator::Smooth,
            PhaseSource::Sbdm => PhaseGenerator::Sbdm(sbdm.as_ref().expect("loaded above")),
        };
        let mut ds = synthesize_dataset(&records, &generator, &cfg.synthesis.settings, derive_seed(cfg.seed, "synthesis"))?;
        ds.manifest.image_size = base.manifest.image_size;
        ds.manifest.splits = ds
            .manifest
            .patients()
            .into_iter()
            .filter_map(|p| base.manifest.splits.get(&p).map(|s| (p, *s)))
            .collect::<BTreeMap<_, _>>();
        save_dataset(&ds, &layout.synthesized(source))?;
        summary.push(format!("{source} {}", ds.len()));
    }
    Ok(format!("synthesized: {}", summary.join(", ")))
}

fn load_synthesized(cfg: &ExperimentConfig, source: PhaseSource) -> Result<Dataset> {
    let dir = cfg.layout().synthesized(source);
    require(&dir.join("manifest.json"), &format!("{source} dataset"), "run `synthesize` first")?;
    load_dataset(&dir)
}

fn recon_seed(cfg: &ExperimentConfig, seed: u64) -> u64 {
    derive_seed(cfg.seed, &format!("recon/seed{seed}"))
}

/// One reconstruction model per phase source and evaluation seed.
pub fn cmd_train_recon(cfg: &ExperimentConfig) -> Result<String> {
    let layout = cfg.layout();
    let mut summary = Vec::new();
    for &source in &cfg.synthesis.sources {
        let ds = load_synthesized(cfg, source)?;
        let train_set = ds.subset(GenSplit::GenTest, Some(RecSplit::RecTrain));
        let val_set = ds.subset(GenSplit::GenTest, Some(RecSplit::RecVal));
        for &seed in &cfg.evaluation.seeds {
            let mut cascade = cfg.recon.cascade.clone();
            cascade.train.seed = recon_seed(cfg, seed);
            log::info!("training {source} reconstruction, seed {seed}");
            let out = train_recon(&train_set, &val_set, &cfg.recon.masks, &cascade, Some(source))?;
            out.checkpoint.save(&layout.recon_checkpoint(source, seed))?;
            let mut csv = String::from("step,R,n_acs,train_loss,val_loss\n");
            for p in &out.curve {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    p.step,
                    p.r,
                    p.n_acs,
                    p.train_loss,
                    p.val_loss.map_or(String::new(), |v| v.to_string())
                );
            }
            write_text(&layout.recon_curve(source, seed), &csv)?;
            summary.push(format!(
                "{source}/seed{seed} best step {}{}",
                out.checkpoint.meta.best_step,
                out.checkpoint
                    .meta
                    .best_val_loss
                    .map_or(String::new(), |v| format!(" (val loss {v:.4})"))
            ));
        }
    }
    Ok(format!("recon: {}", summary.join(", ")))
}

/// Frechet distance between each synthesized source and the ground-truth
/// phases of the same records.
pub fn phase_fid(cfg: &ExperimentConfig) -> Result<BTreeMap<String, f64>> {
    let base = load_base(cfg)?;
    let extractor = RandomConvExtractor::default();
    let mut out = BTreeMap::new();
    let gt: Vec<&SliceRecord> = base.records.iter().filter(|r| is_rec_train_or_val(&base, r)).collect();
    let gt_phases: Vec<_> = gt
        .iter()
        .map(|r| {
            r.phase
                .as_ref()
                .ok_or_else(|| Error::Config(format!("record {} has no phase", r.patient_id)))
        })
        .collect::<Result<_>>()?;
    let reference = embed_features(&gt_phases, &extractor)?;
    for &source in &cfg.synthesis.sources {
        let ds = load_synthesized(cfg, source)?;
        let phases: Vec<_> = ds.records.iter().filter_map(|r| r.phase.as_ref()).collect();
        let stats = embed_features(&phases, &extractor)?;
        out.insert(source.as_str().to_string(), frechet_distance(&reference, &stats)?);
    }
    Ok(out)
}

/// Evaluate every model and the zero-filled baseline on recTest, average over
/// the seed list and write CSV / JSON / plots.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<String> {
    let layout = cfg.layout();
    let base = load_base(cfg)?;
    let test = base.subset(GenSplit::GenTest, Some(RecSplit::RecTest));
    if test.is_empty() {
        return Err(Error::Config("recTest is empty".into()));
    }
    let layout_ref = &layout;
    let missing: Vec<String> = cfg
        .synthesis
        .sources
        .iter()
        .flat_map(|&s| cfg.evaluation.seeds.iter().map(move |&seed| layout_ref.recon_checkpoint(s, seed)))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "missing reconstruction checkpoints (run `train-recon`): {}",
            missing.join(", ")
        )));
    }
    let keep = |sets: Vec<ScoreSet>| -> Vec<ScoreSet> {
        sets.into_iter()
            .filter(|s| cfg.evaluation.metrics.contains(&s.metric))
            .collect()
    };
    let mut runs = Vec::new();
    for (i, &seed) in cfg.evaluation.seeds.iter().enumerate() {
        let mut sets = Vec::new();
        if i == 0 {
            sets.extend(keep(method_scores(Method::ZeroFilled, &test, &cfg.recon.masks)?));
        }
        for &source in &cfg.synthesis.sources {
            let ckpt = ReconCheckpoint::load(&layout.recon_checkpoint(source, seed))?;
            sets.extend(keep(method_scores(Method::VarNet(&ckpt), &test, &cfg.recon.masks)?));
        }
        runs.push(sets);
    }
    let report = MetricReport::aggregate(&runs);
    report.write(&layout.metrics_csv(), &layout.metrics_json())?;
    if cfg.evaluation.plots {
        for &metric in &cfg.evaluation.metrics {
            grouped_bar_chart(&report, metric, &layout.plot(metric))?;
        }
    }
    let mut summary = format!("evaluation: {} rows over {} test slices", report.rows.len(), test.len());
    if cfg.evaluation.fid {
        let fid = phase_fid(cfg)?;
        let mut json = serde_json::to_string_pretty(&fid)?;
        json.push('\n');
        write_text(&layout.fid_json(), &json)?;
        for (k, v) in &fid {
            let _ = write!(summary, ", FID {k} {v:.4}");
        }
    }
    Ok(summary)
}

/// Every stage in order: data, score model (if needed), synthesis,
/// reconstruction training, evaluation.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let mut out = vec![match cfg.dataset.source {
        DataSource::Phantom => cmd_phantom(cfg)?,
        DataSource::Ingest => cmd_ingest(cfg)?,
    }];
    if cfg.synthesis.sources.contains(&PhaseSource::Sbdm) {
        out.push(cmd_train_sbdm(cfg)?);
    }
    out.push(cmd_synthesize(cfg)?);
    out.push(cmd_train_recon(cfg)?);
    out.push(cmd_evaluate(cfg)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 5\n[dataset]\nsize = 32\ncount = 20\n[recon.masks]\npoints = [{R = 2, n_acs = 8}]\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.dataset.size, 32);
        assert_eq!(cfg.evaluation.seeds.len(), 3);
        assert_eq!(cfg.recon.masks.points.len(), 1);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for text in [
            "[dataset]\nsize = 16\n",
            "[evaluation]\nseeds = []\n",
            "[synthesis]\nsources = [\"gt\", \"gt\"]\n",
            "[dataset]\nbogus = 1\n",
            "[recon.cascade]\nnum_cascades = 0\n",
        ] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(err.is_config(), "{text}: {err}");
        }
    }

    #[test]
    fn phantom_command_writes_expected_splits() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        cfg.dataset.size = 32;
        cfg.dataset.count = 100;
        cfg.dataset.splits = SplitRatios {
            gen: [0.6, 0.1, 0.3],
            rec: [0.6, 0.1, 0.3],
        };
        cfg.recon.masks.points.retain(|p| p.n_acs <= 32);
        cmd_phantom(&cfg).unwrap();
        let ds = load_dataset(&cfg.layout().dataset()).unwrap();
        assert_eq!(ds.manifest.patients_in(GenSplit::GenTrain, None).len(), 60);
        assert_eq!(ds.manifest.patients_in(GenSplit::GenVal, None).len(), 10);
        assert_eq!(ds.manifest.patients_in(GenSplit::GenTest, None).len(), 30);
        let first = fs::read(cfg.layout().dataset().join("manifest.json")).unwrap();
        cmd_phantom(&cfg).unwrap();
        assert_eq!(fs::read(cfg.layout().dataset().join("manifest.json")).unwrap(), first);
        cfg.dataset.count = 2;
        assert!(cmd_phantom(&cfg).unwrap_err().is_config());
    }

    #[test]
    fn missing_artifacts_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        for cmd in [cmd_train_sbdm, cmd_synthesize, cmd_train_recon, cmd_evaluate] {
            let err = cmd(&cfg).unwrap_err();
            assert!(err.is_config(), "{err}");
        }
    }
}
