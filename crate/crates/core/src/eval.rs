//! Accuracy, top-2 accuracy and normalized beamforming gain, parameter
//! sweeps and report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::write_atomic;
use crate::codebook::near_field_codebook;
use crate::config::{PilotScheme, SystemConfig};
use crate::dataset::{regenerate_channel, DatasetConfig, DatasetHeader, Sample, SampleBuilder};
use crate::error::{Error, Result};
use crate::nn::{Model, Real};
use crate::oracle::{label_frame, nbg, top2};
use crate::training::{predict_logits, TrainSet};

/// Metrics of one evaluation plus the coordinates that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub variant: String,
    /// Sweep axis name, empty outside sweeps.
    pub axis: String,
    /// Sweep coordinate, `NaN` outside sweeps.
    pub value: f64,
    pub noise_dbm: f64,
    pub speed_min_kmh: f64,
    pub speed_max_kmh: f64,
    pub rician_k_db: f64,
    pub alpha: f64,
    pub accuracy: f64,
    pub top2_accuracy: f64,
    pub mean_nbg: f64,
    pub sample_count: u64,
}

impl MetricsRecord {
    fn blank(variant: &str, cfg: &SystemConfig) -> Self {
        Self {
            variant: variant.to_string(),
            axis: String::new(),
            value: f64::NAN,
            noise_dbm: cfg.noise_power_dbm,
            speed_min_kmh: cfg.speed_range_kmh[0],
            speed_max_kmh: cfg.speed_range_kmh[1],
            rician_k_db: cfg.rician_k_db,
            alpha: f64::NAN,
            accuracy: 0.0,
            top2_accuracy: 0.0,
            mean_nbg: 0.0,
            sample_count: 0,
        }
    }
}

/// Accuracy at or below this multiple of chance triggers a warning.
pub const CHANCE_WARNING_FACTOR: f64 = 2.0;

/// Wilson score interval of a binomial proportion at normal quantile `z`.
pub fn binomial_interval(p: f64, n: u64, z: f64) -> (f64, f64) {
    let n = n as f64;
    let z2 = z * z;
    let center = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Scores ranked predictions (`[best, second]` per sample) against the
/// stored next-frame labels. NBG is measured on the frame-`P + 1` channel
/// regenerated from each sample's seed.
pub fn score(
    header: &DatasetHeader,
    samples: &[Sample],
    ranked: &[[usize; 2]],
    variant: &str,
) -> Result<MetricsRecord> {
    if ranked.len() != samples.len() {
        return Err(Error::DimensionMismatch("one prediction per sample is required".into()));
    }
    let cfg = &header.system;
    let cb = near_field_codebook(cfg);
    let p = header.tensor_shape[0];
    let per_sample: Vec<(bool, bool, f64)> = samples
        .par_iter()
        .zip(ranked.par_iter())
        .map(|(s, r)| {
            let (_, frames) = regenerate_channel(cfg, s.seed)?;
            let target = frames
                .get(p)
                .ok_or_else(|| Error::Format(format!("sample {} cannot regenerate frame {}", s.index, p + 1)))?;
            if label_frame(target, &cb)?.index != s.target() as usize {
                return Err(Error::Format(format!(
                    "sample {}: regenerated channel disagrees with the stored label",
                    s.index
                )));
            }
            let y = s.target() as usize;
            Ok((r[0] == y, r[0] == y || r[1] == y, nbg(target, r[0], &cb)?))
        })
        .collect::<Result<_>>()?;
    let mut rec = MetricsRecord::blank(variant, cfg);
    let n = per_sample.len();
    rec.sample_count = n as u64;
    if n > 0 {
        let nf = n as f64;
        rec.accuracy = per_sample.iter().filter(|t| t.0).count() as f64 / nf;
        rec.top2_accuracy = per_sample.iter().filter(|t| t.1).count() as f64 / nf;
        rec.mean_nbg = per_sample.iter().map(|t| t.2).sum::<f64>() / nf;
        let chance = 1.0 / header.codebook_size as f64;
        if rec.accuracy <= CHANCE_WARNING_FACTOR * chance {
            warn!(
                "{variant}: accuracy {:.4} is within {CHANCE_WARNING_FACTOR}x of chance ({chance:.4})",
                rec.accuracy
            );
        }
    }
    Ok(rec)
}

/// Top-2 ranking of each row of `logits`.
pub fn rank_top2<T: Real>(logits: &[T], classes: usize) -> Vec<[usize; 2]> {
    logits.chunks_exact(classes).map(top2).collect()
}

/// Evaluates `model` on the samples: argmax of the last-position logits is
/// the predicted beam.
pub fn evaluate<T: Real>(
    model: &mut Model<T>,
    header: &DatasetHeader,
    samples: &[Sample],
    variant: &str,
    batch_size: usize,
) -> Result<MetricsRecord> {
    let data = TrainSet::from_samples(header, samples)?;
    let logits = predict_logits(model, &data, batch_size)?;
    score(header, samples, &rank_top2(&logits, model.dims.num_classes), variant)
}

/// The pilot ablation: all-`1/sqrt K` pilots and identity digital precoders.
pub fn ablation_simplified_pilots(cfg: &SystemConfig) -> SystemConfig {
    cfg.with_pilot_scheme(PilotScheme::Simplified)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NoiseDbm,
    SpeedKmh,
    RicianKDb,
    MaskAlpha,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::NoiseDbm => "noise_dbm",
            Self::SpeedKmh => "speed_kmh",
            Self::RicianKDb => "rician_k_db",
            Self::MaskAlpha => "mask_alpha",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "noise" | "noise_dbm" => Ok(Self::NoiseDbm),
            "speed" | "speed_kmh" => Ok(Self::SpeedKmh),
            "rician" | "k" | "rician_k_db" => Ok(Self::RicianKDb),
            "alpha" | "mask_alpha" => Ok(Self::MaskAlpha),
            _ => Err(Error::InvalidArgument(format!("unknown sweep axis {s}"))),
        }
    }

    /// Default grid: noise -120..=-95 dBm in 3 dB steps, speed 30..=110
    /// km/h, K factor 0..=20 dB, mask ratio 0.1..=0.5.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            Self::NoiseDbm => (0..9).map(|i| -120.0 + 3.0 * i as f64).collect(),
            Self::SpeedKmh => (0..9).map(|i| 30.0 + 10.0 * i as f64).collect(),
            Self::RicianKDb => (0..5).map(|i| 5.0 * i as f64).collect(),
            Self::MaskAlpha => vec![0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }

    /// System configuration at coordinate `v`; the mask ratio leaves it
    /// unchanged.
    pub fn apply(self, cfg: &SystemConfig, v: f64) -> SystemConfig {
        let mut c = cfg.clone();
        match self {
            Self::NoiseDbm => c.noise_power_dbm = v,
            Self::SpeedKmh => c.speed_range_kmh = [v, v],
            Self::RicianKDb => c.rician_k_db = v,
            Self::MaskAlpha => {}
        }
        c
    }
}

/// Where and how large the evaluation set of a sweep is.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSpec {
    pub system: SystemConfig,
    pub dataset: DatasetConfig,
    pub master_seed: u64,
    pub first_index: u64,
    pub count: u64,
}

impl TestSpec {
    /// Generates the test samples under `system`.
    pub fn generate(&self, system: &SystemConfig) -> Result<(DatasetHeader, Vec<Sample>)> {
        let b = SampleBuilder::new(system, &self.dataset)?;
        let samples = b.build_range(self.master_seed, self.first_index..self.first_index + self.count)?;
        Ok((b.header(self.master_seed, self.first_index, self.count), samples))
    }
}

/// Evaluates one model per coordinate on a test set regenerated from the
/// same seeds. `model_for` supplies the model for a coordinate: the trained
/// model for system axes, a retrained one for the mask ratio.
pub fn sweep(
    axis: SweepAxis,
    values: &[f64],
    spec: &TestSpec,
    variant: &str,
    batch_size: usize,
    model_for: &mut dyn FnMut(f64) -> Result<Model<f32>>,
) -> Result<Vec<MetricsRecord>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut shared: Option<(DatasetHeader, Vec<Sample>)> = None;
    for &v in values {
        let sys = axis.apply(&spec.system, v);
        let generated;
        let (header, samples) = if axis == SweepAxis::MaskAlpha {
            if shared.is_none() {
                shared = Some(spec.generate(&sys)?);
            }
            let s = shared.as_ref().unwrap();
            (&s.0, &s.1)
        } else {
            generated = spec.generate(&sys)?;
            (&generated.0, &generated.1)
        };
        let mut model = model_for(v)?;
        let mut rec = evaluate(&mut model, header, samples, variant, batch_size)?;
        rec.axis = axis.name().to_string();
        rec.value = v;
        if axis == SweepAxis::MaskAlpha {
            rec.alpha = v;
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    write_atomic(path, |w| {
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        csv.write_record([
            "variant",
            "axis",
            "value",
            "noise_dbm",
            "speed_min_kmh",
            "speed_max_kmh",
            "rician_k_db",
            "alpha",
            "accuracy",
            "top2_accuracy",
            "mean_nbg",
            "sample_count",
        ])?;
        for r in records {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    })
}

pub fn read_records_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN: f64 = 60.0;

/// Line chart of the three metrics against the sweep coordinate.
pub fn render_chart(axis: &str, records: &[&MetricsRecord]) -> String {
    let mut pts: Vec<&MetricsRecord> = records.to_vec();
    pts.sort_by(|a, b| a.value.total_cmp(&b.value));
    let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| {
        (l.min(r.value), h.max(r.value))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |v: f64| MARGIN + (v - lo) / span * (SVG_W - 2.0 * MARGIN);
    let py = |m: f64| SVG_H - MARGIN - m.clamp(0.0, 1.0) * (SVG_H - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}" stroke="black"/>"#,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN
    );
    for i in 0..=4 {
        let m = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{m:.2}</text>"#,
            MARGIN - 6.0,
            py(m) + 4.0
        );
    }
    for r in &pts {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            px(r.value),
            SVG_H - MARGIN + 16.0,
            r.value
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{axis}</text>"#,
        SVG_W / 2.0,
        SVG_H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">metric</text>"#,
        SVG_H / 2.0,
        SVG_H / 2.0
    );
    let series: [(&str, &str, fn(&MetricsRecord) -> f64); 3] = [
        ("accuracy", "#1f77b4", |r| r.accuracy),
        ("top2_accuracy", "#ff7f0e", |r| r.top2_accuracy),
        ("mean_nbg", "#2ca02c", |r| r.mean_nbg),
    ];
    for (i, (name, color, f)) in series.iter().enumerate() {
        let path: Vec<String> = pts
            .iter()
            .map(|r| format!("{:.2},{:.2}", px(r.value), py(f(r))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{name}</text>"#,
            SVG_W - MARGIN - 100.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `records` as CSV to `path` and one chart per sweep axis next to
/// it, named `<stem>_<axis>.svg`. Returns every written path.
pub fn emit_report(records: &[MetricsRecord], path: &Path) -> Result<Vec<PathBuf>> {
    write_records_csv(path, records)?;
    let mut written = vec![path.to_path_buf()];
    let mut axes: Vec<&str> = records
        .iter()
        .map(|r| r.axis.as_str())
        .filter(|a| !a.is_empty())
        .collect();
    axes.dedup();
    axes.sort_unstable();
    axes.dedup();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    for axis in axes {
        let group: Vec<&MetricsRecord> = records.iter().filter(|r| r.axis == axis).collect();
        let svg = render_chart(axis, &group);
        let out = path.with_file_name(format!("{stem}_{axis}.svg"));
        write_atomic(&out, |w| {
            use std::io::Write;
            w.write_all(svg.as_bytes())?;
            Ok(())
        })?;
        written.push(out);
    }
    Ok(written)
}
