//! End-to-end commands: dataset generation, training, evaluation and
//! sweeps, each leaving a run manifest next to its artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::write_atomic;
use crate::config::RunConfig;
use crate::dataset::{read_dataset, split_ranges, DatasetHeader, DatasetWriter, Sample, SampleBuilder};
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate, MetricsRecord, SweepAxis, TestSpec};
use crate::nn::checkpoint::{self, CheckpointMeta};
use crate::nn::{Model, ModelDims};
use crate::training::{train_stage, write_log, Stage, TrainOutcome, TrainSet};

/// Samples generated and written per parallel batch.
const GEN_CHUNK: u64 = 256;

/// Provenance of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Process arguments of the invocation that produced the artifacts.
    pub invocation: Vec<String>,
    pub config_hash: String,
    /// Resolved configuration as TOML; `--config` accepts it unchanged.
    pub config: String,
    pub master_seed: u64,
    pub inputs: Vec<String>,
    pub artifacts: Vec<String>,
    pub wall_clock_s: f64,
    pub git_describe: String,
    pub tool_version: String,
}

impl RunManifest {
    fn new(command: &str, run: &RunConfig, master_seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            invocation: std::env::args().collect(),
            config_hash: run.hash()?,
            config: run.to_toml_string()?,
            master_seed,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            wall_clock_s: 0.0,
            git_describe: git_describe(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    /// `<artifact>.manifest.toml`
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.toml");
        artifact.with_file_name(name)
    }

    /// Writes the manifest next to its first artifact.
    fn finish(mut self, started: Instant) -> Result<Self> {
        self.wall_clock_s = started.elapsed().as_secs_f64();
        let first = self
            .artifacts
            .first()
            .ok_or_else(|| Error::InvalidArgument("manifest without artifacts".into()))?;
        let path = Self::path_for(Path::new(first));
        let text = toml::to_string(&self)?;
        write_atomic(&path, |w| {
            use std::io::Write;
            w.write_all(text.as_bytes())?;
            Ok(())
        })?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenOptions {
    pub count: u64,
    pub first_index: u64,
    /// Defaults to the system `rng_seed`.
    pub master_seed: Option<u64>,
    pub noise_dbm: Option<f64>,
    pub out: PathBuf,
}

/// Generates `count` samples starting at `first_index` and writes them in
/// index order.
pub fn gen_dataset(run: &RunConfig, opts: &GenOptions) -> Result<RunManifest> {
    let started = Instant::now();
    let mut run = run.clone();
    if let Some(n) = opts.noise_dbm {
        run.system.noise_power_dbm = n;
    }
    run.validate()?;
    let master = opts.master_seed.unwrap_or(run.system.rng_seed);
    let builder = SampleBuilder::new(&run.system, &run.dataset)?;
    let mut w = DatasetWriter::create(&opts.out, builder.header(master, opts.first_index, opts.count))?;
    let end = opts.first_index + opts.count;
    let mut start = opts.first_index;
    while start < end {
        let stop = (start + GEN_CHUNK).min(end);
        for s in builder.build_range(master, start..stop)? {
            w.push(&s)?;
        }
        start = stop;
    }
    w.finish()?;
    info!("wrote {} samples to {}", opts.count, opts.out.display());
    let mut m = RunManifest::new("gen-dataset", &run, master)?;
    m.artifacts.push(display(&opts.out));
    m.finish(started)
}

/// Samples of a dataset file, checked against the run's system section.
pub fn load_dataset(run: &RunConfig, path: &Path) -> Result<(DatasetHeader, Vec<Sample>)> {
    let (header, samples) = read_dataset(path)?;
    let (a, b) = (&header.system, &run.system);
    let same_dims = a.num_subcarriers == b.num_subcarriers
        && a.widebeam_count == b.widebeam_count
        && a.context_frames == b.context_frames
        && a.codebook_size() == b.codebook_size();
    if !same_dims {
        return Err(Error::DimensionMismatch(format!(
            "{} was generated for different system dimensions",
            path.display()
        )));
    }
    Ok((header, samples))
}

/// Train and validation parts of a dataset (first 80% and next 10%).
pub fn train_val(header: &DatasetHeader, samples: &[Sample]) -> Result<(TrainSet, TrainSet)> {
    let [tr, va, _] = split_ranges(samples.len());
    Ok((
        TrainSet::from_samples(header, &samples[tr])?,
        TrainSet::from_samples(header, &samples[va])?,
    ))
}

/// Test part of a dataset (last 10%).
pub fn test_part(samples: &[Sample]) -> &[Sample] {
    let [_, _, te] = split_ranges(samples.len());
    &samples[te]
}

pub fn fresh_model(run: &RunConfig, header: &DatasetHeader) -> Result<Model<f32>> {
    let dims = ModelDims::new(&header.system, &run.model);
    Model::new(&dims, &mut ChaCha8Rng::seed_from_u64(run.training.seed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub data: PathBuf,
    /// Starting checkpoint; `None` starts from fresh weights.
    pub init: Option<PathBuf>,
    pub out: PathBuf,
    pub stage: Stage,
}

/// `<checkpoint>.log.csv`
pub fn log_path_for(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".log.csv");
    ckpt.with_file_name(name)
}

/// Runs one training stage and saves the best checkpoint and the CSV log.
pub fn train_command(run: &RunConfig, opts: &TrainOptions) -> Result<(RunManifest, TrainOutcome<f32>)> {
    let started = Instant::now();
    run.validate()?;
    let (header, samples) = load_dataset(run, &opts.data)?;
    let (train, val) = train_val(&header, &samples)?;
    let (model, init_seed) = match &opts.init {
        Some(p) => {
            let (m, h) = checkpoint::load::<f32>(p)?;
            if m.dims.num_classes != header.codebook_size || m.dims.context != header.tensor_shape[0] {
                return Err(Error::DimensionMismatch(format!(
                    "checkpoint {} does not match the dataset",
                    p.display()
                )));
            }
            (m, h.init_seed)
        }
        None => (fresh_model(run, &header)?, run.training.seed),
    };
    let mut outcome = train_stage(model, &train, &val, &run.training, opts.stage)?;
    let meta = CheckpointMeta {
        init_seed,
        step: outcome.steps,
        epoch: outcome.best_epoch as u64,
        stage: opts.stage.name().to_string(),
    };
    outcome.best.freeze = Default::default();
    checkpoint::save(&opts.out, &mut outcome.best, &meta)?;
    let log = log_path_for(&opts.out);
    write_log(&log, &outcome.history)?;
    let mut m = RunManifest::new(opts.stage.name(), run, header.master_seed)?;
    m.inputs.push(display(&opts.data));
    if let Some(p) = &opts.init {
        m.inputs.push(display(p));
    }
    m.artifacts.push(display(&opts.out));
    m.artifacts.push(display(&log));
    Ok((m.finish(started)?, outcome))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    /// Last 10% of the file.
    Test,
    /// Every sample, for dedicated test files.
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub split: EvalSplit,
    pub variant: String,
}

pub fn evaluate_command(run: &RunConfig, opts: &EvalOptions) -> Result<(RunManifest, MetricsRecord)> {
    let started = Instant::now();
    let (mut model, _) = checkpoint::load::<f32>(&opts.ckpt)?;
    let (header, samples) = load_dataset(run, &opts.data)?;
    let part = match opts.split {
        EvalSplit::Test => test_part(&samples),
        EvalSplit::All => &samples[..],
    };
    let rec = evaluate(&mut model, &header, part, &opts.variant, run.training.eval_batch_size)?;
    let written = emit_report(std::slice::from_ref(&rec), &opts.out)?;
    let mut m = RunManifest::new("evaluate", run, header.master_seed)?;
    m.inputs = vec![display(&opts.ckpt), display(&opts.data)];
    m.artifacts = written.iter().map(|p| display(p)).collect();
    Ok((m.finish(started)?, rec))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub ckpt: PathBuf,
    /// Test samples generated per coordinate.
    pub count: u64,
    pub first_index: u64,
    pub master_seed: Option<u64>,
    /// Pretraining and fine-tuning datasets, needed by the mask-ratio axis.
    pub pretrain_data: Option<PathBuf>,
    pub finetune_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub variant: String,
}

/// Pretrains with mask ratio `alpha` and fine-tunes the result.
pub fn retrain_with_alpha(
    run: &RunConfig,
    alpha: f64,
    pre: &(DatasetHeader, Vec<Sample>),
    fine: &(DatasetHeader, Vec<Sample>),
) -> Result<Model<f32>> {
    let mut cfg = run.training.clone();
    cfg.alpha = alpha;
    let (ptr, pva) = train_val(&pre.0, &pre.1)?;
    let (ftr, fva) = train_val(&fine.0, &fine.1)?;
    let p = train_stage(fresh_model(run, &pre.0)?, &ptr, &pva, &cfg, Stage::Pretrain)?;
    let mut f = train_stage(p.best, &ftr, &fva, &cfg, Stage::Finetune)?;
    f.best.freeze = Default::default();
    Ok(f.best)
}

pub fn sweep_command(run: &RunConfig, opts: &SweepOptions) -> Result<(RunManifest, Vec<MetricsRecord>)> {
    let started = Instant::now();
    std::fs::create_dir_all(&opts.out_dir)?;
    let master = opts.master_seed.unwrap_or(run.system.rng_seed);
    let spec = TestSpec {
        system: run.system.clone(),
        dataset: run.dataset.clone(),
        master_seed: master,
        first_index: opts.first_index,
        count: opts.count,
    };
    let (base, _) = checkpoint::load::<f32>(&opts.ckpt)?;
    let mut inputs = vec![display(&opts.ckpt)];
    let records = if opts.axis == SweepAxis::MaskAlpha {
        let (pd, fd) = match (&opts.pretrain_data, &opts.finetune_data) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidArgument(
                    "the mask_alpha axis retrains and needs --pretrain-data and --finetune-data".into(),
                ))
            }
        };
        inputs.push(display(pd));
        inputs.push(display(fd));
        let pre = load_dataset(run, pd)?;
        let fine = load_dataset(run, fd)?;
        crate::eval::sweep(
            opts.axis,
            &opts.values,
            &spec,
            &opts.variant,
            run.training.eval_batch_size,
            &mut |a| retrain_with_alpha(run, a, &pre, &fine),
        )?
    } else {
        crate::eval::sweep(
            opts.axis,
            &opts.values,
            &spec,
            &opts.variant,
            run.training.eval_batch_size,
            &mut |_| Ok(base.clone()),
        )?
    };
    let csv = opts.out_dir.join("sweep.csv");
    let written = emit_report(&records, &csv)?;
    let mut m = RunManifest::new("sweep", run, master)?;
    m.inputs = inputs;
    m.artifacts = written.iter().map(|p| display(p)).collect();
    Ok((m.finish(started)?, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::preset(Preset::Desk);
        run.training.pretrain_epochs = 1;
        run.training.finetune_epochs = 1;
        run
    }

    #[test]
    fn generation_is_byte_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run();
        let mk = |name: &str| GenOptions {
            count: 300,
            first_index: 0,
            master_seed: Some(9),
            noise_dbm: None,
            out: dir.path().join(name),
        };
        let m = gen_dataset(&run, &mk("a.nfb")).unwrap();
        gen_dataset(&run, &mk("b.nfb")).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("a.nfb")).unwrap(),
            std::fs::read(dir.path().join("b.nfb")).unwrap()
        );
        let back = RunManifest::load(&RunManifest::path_for(&dir.path().join("a.nfb"))).unwrap();
        assert_eq!(back.config_hash, m.config_hash);
        assert_eq!(back.master_seed, 9);
    }

    #[test]
    fn dataset_for_other_dimensions_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run();
        let out = dir.path().join("d.nfb");
        gen_dataset(
            &run,
            &GenOptions {
                count: 4,
                first_index: 0,
                master_seed: None,
                noise_dbm: None,
                out: out.clone(),
            },
        )
        .unwrap();
        let mut other = run.clone();
        other.system.context_frames = 4;
        assert!(matches!(load_dataset(&other, &out), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn manifest_path_sits_next_to_artifact() {
        assert_eq!(
            RunManifest::path_for(Path::new("/tmp/x/model.ckpt")),
            PathBuf::from("/tmp/x/model.ckpt.manifest.toml")
        );
        assert_eq!(log_path_for(Path::new("m.ckpt")), PathBuf::from("m.ckpt.log.csv"));
    }
}
