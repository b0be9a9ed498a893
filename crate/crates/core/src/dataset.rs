//! Labeled sample generation, preprocessing and the dataset file format.
//!
//! A sample follows one user for `P + 1` frames. Frames `0..P` are sounded
//! and form the model input; every frame is labeled by exhaustive search, so
//! the label vector has `P + 1` entries and the last one is the prediction
//! target.
//!
//! # File layout
//!
//! After the common preamble (magic `NFBDSET\0`, version, TOML
//! [`DatasetHeader`]) come `count` fixed-size little-endian records:
//!
//! | field | type |
//! |---|---|
//! | index | `u64` |
//! | seed | `u64` |
//! | noise power (dBm) | `f64` |
//! | initial angle (rad), distance (m), speed (m/s), heading (rad) | `4 x f64` |
//! | pilot tensor `P x 2 x K x G` | `f32` |
//! | labels `P + 1` | `u32` |
//! | mean and std per normalization group, if `store_norm_stats` | `2 x f64` each |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_exact, read_f64, read_preamble, read_u64, write_preamble};
use crate::channel::{generate_frame_sequence, ChannelFrame, UserTrajectory, Vec2};
use crate::codebook::{dft_sin_grid, distance_grid, near_field_codebook, Codebook};
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::oracle::label_frame;
use crate::sounding::{MeasurementFrame, Sounder};

pub const MAGIC: &[u8; 8] = b"NFBDSET\0";
pub const VERSION: u32 = 1;

/// Tries at finding a heading that keeps the whole trajectory inside the
/// configured angle and distance ranges.
const HEADING_TRIES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// One mean and deviation over the whole `P x 2 x K x G` tensor (id 0).
    WholeTensor,
    /// One mean and deviation per frame slice `2 x K x G` (id 1).
    PerFrame,
}

impl Normalization {
    pub fn scheme_id(self) -> u32 {
        match self {
            Self::WholeTensor => 0,
            Self::PerFrame => 1,
        }
    }

    pub fn from_scheme_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Self::WholeTensor),
            1 => Ok(Self::PerFrame),
            _ => Err(Error::Format(format!("unknown normalization scheme id {id}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub normalization: Normalization,
    /// Keep the per-group mean and deviation in each record.
    pub store_norm_stats: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            normalization: Normalization::PerFrame,
            store_norm_stats: false,
        }
    }
}

/// Trajectory summary kept with each sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub angle_rad: f64,
    pub distance_m: f64,
    pub speed_mps: f64,
    pub heading_rad: f64,
}

impl From<&UserTrajectory> for TrajectoryMeta {
    fn from(t: &UserTrajectory) -> Self {
        Self {
            angle_rad: t.initial_angle_rad,
            distance_m: t.initial_distance_m,
            speed_mps: t.speed_mps(),
            heading_rad: t.heading_rad(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: u64,
    pub seed: u64,
    pub noise_power_dbm: f64,
    pub trajectory: TrajectoryMeta,
    /// `P x 2 x K x G`; plane 0 real, plane 1 imaginary.
    pub pilots: Vec<f32>,
    /// Oracle labels of frames `0..=P`.
    pub labels: Vec<u32>,
    /// `(mean, std)` per normalization group when requested.
    pub norm_stats: Option<Vec<[f64; 2]>>,
}

impl Sample {
    pub fn target(&self) -> u32 {
        *self.labels.last().expect("labels are never empty")
    }
}

/// Uniform initial angle, distance and speed, uniform heading.
///
/// The heading is redrawn until every frame position stays inside the
/// configured angle and distance ranges; after a bounded number of tries the
/// last draw is kept.
pub fn sample_trajectory<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> UserTrajectory {
    let [amin, amax] = cfg.angle_range_deg.map(f64::to_radians);
    let [dmin, dmax] = cfg.distance_range_m;
    let [smin, smax] = cfg.speed_range_kmh;
    let uni = |rng: &mut R, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let angle = uni(rng, amin, amax);
    let distance = uni(rng, dmin, dmax);
    let speed = uni(rng, smin, smax) / 3.6;
    let frames = cfg.context_frames + 1;
    let inside = |p: Vec2| {
        let (a, r) = (p.angle_rad(), p.norm());
        a >= amin && a <= amax && r >= dmin && r <= dmax
    };
    let mut traj = UserTrajectory::new(angle, distance, Vec2::default(), frames);
    for _ in 0..HEADING_TRIES {
        let heading = rng.random::<f64>() * std::f64::consts::TAU;
        let v = Vec2::new(speed * heading.cos(), speed * heading.sin());
        traj = UserTrajectory::new(angle, distance, v, frames);
        if speed == 0.0 || traj.frame_positions.iter().all(|&p| inside(p)) {
            break;
        }
    }
    traj
}

/// Splits every frame into real and imaginary planes and standardizes with
/// population statistics. Returns the tensor and the `(mean, std)` of each
/// normalization group.
pub fn preprocess(frames: &[MeasurementFrame], scheme: Normalization) -> Result<(Vec<f32>, Vec<[f64; 2]>)> {
    let mut raw: Vec<Vec<f64>> = Vec::with_capacity(frames.len());
    for f in frames {
        let mut v = Vec::with_capacity(2 * f.y.len());
        v.extend(f.y.iter().map(|z| z.re));
        v.extend(f.y.iter().map(|z| z.im));
        raw.push(v);
    }
    let stats = |vals: &mut dyn Iterator<Item = f64>, frame: usize| -> Result<[f64; 2]> {
        let (mut n, mut s, mut s2) = (0usize, 0.0f64, 0.0f64);
        let collected: Vec<f64> = vals.collect();
        for &x in &collected {
            n += 1;
            s += x;
        }
        let mean = s / n.max(1) as f64;
        for &x in &collected {
            s2 += (x - mean) * (x - mean);
        }
        let std = (s2 / n.max(1) as f64).sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::ZeroVariance { frame });
        }
        Ok([mean, std])
    };
    let groups: Vec<[f64; 2]> = match scheme {
        Normalization::PerFrame => raw
            .iter()
            .enumerate()
            .map(|(i, v)| stats(&mut v.iter().copied(), i))
            .collect::<Result<_>>()?,
        Normalization::WholeTensor => vec![stats(&mut raw.iter().flatten().copied(), 0)?],
    };
    let mut out = Vec::with_capacity(raw.iter().map(Vec::len).sum());
    for (i, v) in raw.iter().enumerate() {
        let [m, s] = groups[if scheme == Normalization::PerFrame { i } else { 0 }];
        out.extend(v.iter().map(|&x| ((x - m) / s) as f32));
    }
    Ok((out, groups))
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` under `master`.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

/// Random stream of a sample: stream 0 drives geometry and fading, stream
/// 1 the receiver noise, so changing the noise level leaves the channel
/// untouched.
pub fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Channel frames `0..=P` of the sample with the given seed.
pub fn regenerate_channel(cfg: &SystemConfig, seed: u64) -> Result<(UserTrajectory, Vec<ChannelFrame>)> {
    let mut rng = sample_rng(seed, 0);
    let traj = sample_trajectory(cfg, &mut rng);
    let frames = generate_frame_sequence(cfg, &traj, &mut rng)?;
    Ok((traj, frames))
}

/// Shared, immutable state for building samples of one configuration.
pub struct SampleBuilder {
    pub cfg: SystemConfig,
    pub dataset: DatasetConfig,
    pub sounder: Sounder,
    pub codebook: Codebook,
}

impl SampleBuilder {
    pub fn new(cfg: &SystemConfig, dataset: &DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            dataset: dataset.clone(),
            sounder: Sounder::new(cfg)?,
            codebook: near_field_codebook(cfg),
        })
    }

    pub fn build(&self, index: u64, seed: u64) -> Result<Sample> {
        let p = self.cfg.context_frames;
        let (traj, frames) = regenerate_channel(&self.cfg, seed)?;
        let mut noise_rng = sample_rng(seed, 1);
        let measured: Vec<MeasurementFrame> = frames
            .iter()
            .map(|f| self.sounder.measure_frame(f, &mut noise_rng))
            .collect::<Result<_>>()?;
        let labels: Vec<u32> = frames
            .iter()
            .map(|f| label_frame(f, &self.codebook).map(|l| l.index as u32))
            .collect::<Result<_>>()?;
        let (pilots, stats) = preprocess(&measured[..p], self.dataset.normalization)?;
        Ok(Sample {
            index,
            seed,
            noise_power_dbm: self.cfg.noise_power_dbm,
            trajectory: TrajectoryMeta::from(&traj),
            pilots,
            labels,
            norm_stats: self.dataset.store_norm_stats.then_some(stats),
        })
    }

    /// Builds samples `indices` under `master` in parallel, in index order.
    pub fn build_range(&self, master: u64, indices: Range<u64>) -> Result<Vec<Sample>> {
        indices
            .into_par_iter()
            .map(|i| self.build(i, sample_seed(master, i)))
            .collect()
    }

    pub fn header(&self, master_seed: u64, first_index: u64, count: u64) -> DatasetHeader {
        DatasetHeader::new(&self.cfg, &self.dataset, master_seed, first_index, count)
    }
}

/// Builds one sample drawing its seed from `rng`.
pub fn build_sample<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<Sample> {
    let seed = rng.random::<u64>();
    SampleBuilder::new(cfg, &DatasetConfig::default())?.build(0, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub count: u64,
    pub first_index: u64,
    pub master_seed: u64,
    pub normalization_scheme: u32,
    pub store_norm_stats: bool,
    /// `[P, 2, K, G]`
    pub tensor_shape: [usize; 4],
    pub label_len: usize,
    pub codebook_size: usize,
    /// Near-field grid: `sin(psi_s)` per angle index and range per distance
    /// index; label `n` is angle `n % N`, distance `n / N`.
    pub angle_grid_sin: Vec<f64>,
    pub distance_grid_m: Vec<f64>,
    pub system: SystemConfig,
}

impl DatasetHeader {
    pub fn new(cfg: &SystemConfig, ds: &DatasetConfig, master_seed: u64, first_index: u64, count: u64) -> Self {
        Self {
            count,
            first_index,
            master_seed,
            normalization_scheme: ds.normalization.scheme_id(),
            store_norm_stats: ds.store_norm_stats,
            tensor_shape: [cfg.context_frames, 2, cfg.num_subcarriers, cfg.widebeam_count],
            label_len: cfg.context_frames + 1,
            codebook_size: cfg.codebook_size(),
            angle_grid_sin: dft_sin_grid(cfg.num_bs_antennas),
            distance_grid_m: distance_grid(cfg),
            system: cfg.clone(),
        }
    }

    pub fn tensor_len(&self) -> usize {
        self.tensor_shape.iter().product()
    }

    pub fn frame_len(&self) -> usize {
        self.tensor_shape[1..].iter().product()
    }

    pub fn normalization(&self) -> Result<Normalization> {
        Normalization::from_scheme_id(self.normalization_scheme)
    }

    fn stats_len(&self) -> usize {
        if !self.store_norm_stats {
            0
        } else if self.normalization_scheme == 1 {
            self.tensor_shape[0]
        } else {
            1
        }
    }

    pub fn record_len(&self) -> usize {
        8 + 8 + 8 + 4 * 8 + 4 * self.tensor_len() + 4 * self.label_len + 16 * self.stats_len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        let mismatch = |m: String| Err(Error::DimensionMismatch(m));
        if self.tensor_shape != [s.context_frames, 2, s.num_subcarriers, s.widebeam_count] {
            return mismatch(format!(
                "tensor shape {:?} disagrees with the system section",
                self.tensor_shape
            ));
        }
        if self.label_len != s.context_frames + 1 || self.codebook_size != s.codebook_size() {
            return mismatch("label dimensions disagree with the system section".into());
        }
        if self.angle_grid_sin.len() != s.num_bs_antennas || self.distance_grid_m.len() != s.distance_samples {
            return mismatch("codebook grids disagree with the system section".into());
        }
        self.normalization()?;
        Ok(())
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        Ok(DatasetConfig {
            normalization: self.normalization()?,
            store_norm_stats: self.store_norm_stats,
        })
    }
}

fn encode_sample(h: &DatasetHeader, s: &Sample, buf: &mut Vec<u8>) -> Result<()> {
    if s.pilots.len() != h.tensor_len() || s.labels.len() != h.label_len {
        return Err(Error::DimensionMismatch(format!(
            "sample {} has {} pilot values and {} labels, header expects {} and {}",
            s.index,
            s.pilots.len(),
            s.labels.len(),
            h.tensor_len(),
            h.label_len
        )));
    }
    buf.clear();
    buf.extend_from_slice(&s.index.to_le_bytes());
    buf.extend_from_slice(&s.seed.to_le_bytes());
    let t = &s.trajectory;
    for v in [s.noise_power_dbm, t.angle_rad, t.distance_m, t.speed_mps, t.heading_rad] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &s.pilots {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &s.labels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let want = h.stats_len();
    if want > 0 {
        let stats = s
            .norm_stats
            .as_ref()
            .filter(|v| v.len() == want)
            .ok_or_else(|| Error::DimensionMismatch(format!("sample {} lacks normalization stats", s.index)))?;
        for [m, sd] in stats {
            buf.extend_from_slice(&m.to_le_bytes());
            buf.extend_from_slice(&sd.to_le_bytes());
        }
    }
    Ok(())
}

/// Streams records to a temporary file; `finish` checks the count and
/// renames it into place.
pub struct DatasetWriter {
    header: DatasetHeader,
    out: BufWriter<File>,
    tmp: PathBuf,
    path: PathBuf,
    written: u64,
    buf: Vec<u8>,
}

impl DatasetWriter {
    pub fn create(path: &Path, header: DatasetHeader) -> Result<Self> {
        header.validate()?;
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let name = path
            .file_name()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
        let mut out = BufWriter::new(File::create(&tmp)?);
        write_preamble(&mut out, MAGIC, VERSION, &toml::to_string(&header)?)?;
        Ok(Self {
            header,
            out,
            tmp,
            path: path.to_path_buf(),
            written: 0,
            buf: Vec::new(),
        })
    }

    pub fn push(&mut self, s: &Sample) -> Result<()> {
        if self.written >= self.header.count {
            return Err(Error::InvalidArgument("more samples than the header count".into()));
        }
        encode_sample(&self.header, s, &mut self.buf)?;
        self.out.write_all(&self.buf)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.header.count {
            let _ = std::fs::remove_file(&self.tmp);
            return Err(Error::InvalidArgument(format!(
                "wrote {} samples, header promises {}",
                self.written, self.header.count
            )));
        }
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        std::fs::rename(&self.tmp, &self.path)?;
        Ok(())
    }
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, samples: &[Sample]) -> Result<()> {
    let mut h = header.clone();
    h.count = samples.len() as u64;
    let mut w = DatasetWriter::create(path, h)?;
    for s in samples {
        w.push(s)?;
    }
    w.finish()
}

/// Iterator over the records of a dataset stream.
pub struct DatasetReader<R> {
    header: DatasetHeader,
    input: R,
    remaining: u64,
    done: bool,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let text = read_preamble(&mut input, MAGIC, VERSION, "dataset")?;
        let header: DatasetHeader = toml::from_str(&text)?;
        header.validate()?;
        Ok(Self {
            remaining: header.count,
            header,
            input,
            done: false,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn read_record(&mut self) -> Result<Sample> {
        let h = &self.header;
        let r = &mut self.input;
        let index = read_u64(r, "dataset record")?;
        let seed = read_u64(r, "dataset record")?;
        let noise_power_dbm = read_f64(r, "dataset record")?;
        let trajectory = TrajectoryMeta {
            angle_rad: read_f64(r, "dataset record")?,
            distance_m: read_f64(r, "dataset record")?,
            speed_mps: read_f64(r, "dataset record")?,
            heading_rad: read_f64(r, "dataset record")?,
        };
        let mut buf = vec![0u8; 4 * h.tensor_len()];
        read_exact(r, &mut buf, "dataset record")?;
        let pilots = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut buf = vec![0u8; 4 * h.label_len];
        read_exact(r, &mut buf, "dataset record")?;
        let labels: Vec<u32> = buf
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= h.codebook_size) {
            return Err(Error::Format(format!("label {bad} outside the codebook")));
        }
        let n_stats = h.stats_len();
        let norm_stats = if n_stats > 0 {
            let mut v = Vec::with_capacity(n_stats);
            for _ in 0..n_stats {
                v.push([read_f64(r, "dataset record")?, read_f64(r, "dataset record")?]);
            }
            Some(v)
        } else {
            None
        };
        Ok(Sample {
            index,
            seed,
            noise_power_dbm,
            trajectory,
            pilots,
            labels,
            norm_stats,
        })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.remaining == 0 {
            self.done = true;
            let mut probe = [0u8; 1];
            return match self.input.read(&mut probe) {
                Ok(0) => None,
                Ok(_) => Some(Err(Error::Format("trailing bytes after the last record".into()))),
                Err(e) => Some(Err(e.into())),
            };
        }
        self.remaining -= 1;
        let rec = self.read_record();
        if rec.is_err() {
            self.done = true;
        }
        Some(rec)
    }
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Sample>)> {
    let reader = DatasetReader::open(path)?;
    let header = reader.header().clone();
    let samples = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, samples))
}

/// 80/10/10 train/validation/test split of `count` samples by position.
pub fn split_ranges(count: usize) -> [Range<usize>; 3] {
    let train = count * 8 / 10;
    let val = count / 10;
    [0..train, train..train + val, train + val..count]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::linalg::C64;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Uniform};

    fn desk() -> SystemConfig {
        SystemConfig::preset(Preset::Desk)
    }

    fn frame(vals: Vec<C64>, k: usize, g: usize) -> MeasurementFrame {
        MeasurementFrame {
            y: vals,
            num_subcarriers: k,
            num_columns: g,
            frame_index: 0,
            noise_power_dbm: 0.0,
        }
    }

    fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn trajectory_marginals_are_uniform() {
        let cfg = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 10_000;
        let trajs: Vec<UserTrajectory> = (0..n).map(|_| sample_trajectory(&cfg, &mut rng)).collect();
        let angles: Vec<f64> = trajs.iter().map(|t| t.initial_angle_rad.to_degrees()).collect();
        assert!(angles.iter().all(|a| (-60.0..=60.0).contains(a)));
        let u = Uniform::new(-60.0, 60.0).unwrap();
        let d = ks_statistic(angles, |x| u.cdf(x));
        // Asymptotic KS critical value at p = 0.01 is 1.628 / sqrt(n).
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
        for t in &trajs {
            let s = t.speed_mps() * 3.6;
            assert!((30.0..=100.0).contains(&s));
            for p in &t.frame_positions {
                assert!(p.angle_rad().abs() <= 60f64.to_radians() + 1e-12);
                assert!((5.0..=20.0).contains(&p.norm()));
            }
        }
    }

    #[test]
    fn fixed_speed_conversion_and_static_override() {
        let mut cfg = desk();
        cfg.speed_range_kmh = [30.0, 30.0];
        let t = sample_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!((t.speed_mps() - 8.333_333_333_333_334).abs() < 1e-12);
        cfg.speed_range_kmh = [0.0, 0.0];
        let t = sample_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(t.frame_positions.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn constant_frame_is_rejected() {
        let f = frame(vec![C64::new(2.0, 2.0); 4], 2, 2);
        assert!(matches!(
            preprocess(&[f], Normalization::PerFrame),
            Err(Error::ZeroVariance { frame: 0 })
        ));
    }

    #[test]
    fn whole_tensor_scheme_shares_statistics() {
        let a = frame(vec![C64::new(1.0, 0.0), C64::new(3.0, 1.0)], 1, 2);
        let b = frame(vec![C64::new(10.0, 0.0), C64::new(30.0, 10.0)], 1, 2);
        let (t, stats) = preprocess(&[a, b], Normalization::WholeTensor).unwrap();
        assert_eq!(stats.len(), 1);
        let mean = t.iter().map(|&x| x as f64).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!(t[..4].iter().map(|x| x.abs()).sum::<f32>() < t[4..].iter().map(|x| x.abs()).sum::<f32>());
    }

    #[test]
    fn desk_sample_shape_and_determinism() {
        let b = SampleBuilder::new(&desk(), &DatasetConfig::default()).unwrap();
        let s = b.build(3, 12345).unwrap();
        assert_eq!(s.pilots.len(), 5 * 2 * 8 * 8);
        assert_eq!(s.labels.len(), 6);
        assert!(s.labels.iter().all(|&l| l < 96));
        assert_eq!(s, b.build(3, 12345).unwrap());
    }

    #[test]
    fn static_noiseless_user_keeps_its_label() {
        let mut cfg = desk();
        cfg.speed_range_kmh = [0.0, 0.0];
        cfg.noise_power_dbm = f64::NEG_INFINITY;
        let b = SampleBuilder::new(&cfg, &DatasetConfig::default()).unwrap();
        for seed in 0..5 {
            let s = b.build(0, seed).unwrap();
            assert!(s.labels.iter().all(|&l| l == s.labels[0]));
        }
    }

    #[test]
    fn los_labels_stay_in_sector() {
        let mut cfg = desk();
        cfg.rician_k_db = f64::INFINITY;
        cfg.noise_power_dbm = f64::NEG_INFINITY;
        let b = SampleBuilder::new(&cfg, &DatasetConfig::default()).unwrap();
        let n = cfg.num_bs_antennas;
        let slack = 2.0 / n as f64;
        let hi = 60f64.to_radians().sin() + slack;
        let samples = b.build_range(99, 0..1000).unwrap();
        for s in &samples {
            for &l in &s.labels {
                let sin = dft_sin_grid(n)[l as usize % n];
                assert!(sin.abs() <= hi, "label {l} at sin {sin}");
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.nfb");
        let ds = DatasetConfig {
            normalization: Normalization::PerFrame,
            store_norm_stats: true,
        };
        let b = SampleBuilder::new(&desk(), &ds).unwrap();
        let samples = b.build_range(5, 0..100).unwrap();
        write_dataset(&path, &b.header(5, 0, 100), &samples).unwrap();
        let (h, back) = read_dataset(&path).unwrap();
        assert_eq!(h.count, 100);
        assert_eq!(back, samples);
        assert_eq!(
            std::fs::metadata(&path).unwrap().len() as usize,
            std::fs::read(&path).unwrap().len()
        );
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.nfb");
        let b = SampleBuilder::new(&desk(), &DatasetConfig::default()).unwrap();
        write_dataset(&path, &b.header(1, 0, 0), &[]).unwrap();
        let (h, s) = read_dataset(&path).unwrap();
        assert_eq!((h.count, s.len()), (0, 0));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.nfb");
        let b = SampleBuilder::new(&desk(), &DatasetConfig::default()).unwrap();
        let samples = b.build_range(5, 0..3).unwrap();
        write_dataset(&path, &b.header(5, 0, 3), &samples).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[1] = b'?';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[8] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(Error::VersionMismatch { found: 9, .. })
        ));

        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Truncated(_))));

        let text = toml::to_string(&b.header(5, 0, 3))
            .unwrap()
            .replace("label_len = 6", "label_len = 7");
        let mut buf = Vec::new();
        write_preamble(&mut buf, MAGIC, VERSION, &text).unwrap();
        std::fs::write(&path, &buf).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn split_is_eighty_ten_ten() {
        let [a, b, c] = split_ranges(1000);
        assert_eq!((a.len(), b.len(), c.len()), (800, 100, 100));
        assert_eq!(c.end, 1000);
    }

    #[test]
    fn noise_level_does_not_change_the_channel() {
        let mut quiet = desk();
        quiet.noise_power_dbm = f64::NEG_INFINITY;
        let mut loud = desk();
        loud.noise_power_dbm = -60.0;
        let a = SampleBuilder::new(&quiet, &DatasetConfig::default())
            .unwrap()
            .build(0, 77)
            .unwrap();
        let b = SampleBuilder::new(&loud, &DatasetConfig::default())
            .unwrap()
            .build(0, 77)
            .unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.trajectory, b.trajectory);
        assert_ne!(a.pilots, b.pilots);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn frames_are_standardized(vals in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 16), scale in 1e-6f64..1e6) {
            let ys: Vec<C64> = vals.iter().map(|&(a, b)| C64::new(a, b)).collect();
            prop_assume!(ys.iter().any(|z| (z - ys[0]).norm() > 1e-3));
            let f = frame(ys.clone(), 4, 4);
            let (t, _) = preprocess(&[f.clone()], Normalization::PerFrame).unwrap();
            let n = t.len() as f64;
            let mean = t.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = t.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() <= 1e-6);
            prop_assert!((var.sqrt() - 1.0).abs() <= 1e-6);
            let (t2, _) = preprocess(&[f.scaled(C64::new(scale, 0.0))], Normalization::PerFrame).unwrap();
            for (a, b) in t.iter().zip(&t2) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }
    }
}
