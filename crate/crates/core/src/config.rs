//! System dimensions, physical constants, NR frame timing and named presets.
//!
//! Everything that fixes the shape of a run lives in [`SystemConfig`]. It is
//! validated once on construction and then shared immutably. The run-level
//! [`RunConfig`] bundles it with the model, training and dataset sections and
//! is what the structured-text config file deserializes into:
//!
//! ```toml
//! [system]
//! num_bs_antennas = 32
//! # ...
//! [model]
//! d_emb = 64
//! [training]
//! alpha = 0.3
//! [dataset]
//! normalization = "per_frame"
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::training::TrainingConfig;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// One NR radio frame.
pub const FRAME_DURATION_S: f64 = 0.01;

/// SRS-capable OFDM symbols per radio frame as quoted for the 120 kHz
/// numerology (80 slots x 8). Kept for reference; nothing derives from it.
pub const NOMINAL_SRS_SYMBOLS_PER_FRAME: usize = 640;

/// Converts a power in dBm to watts. `-inf` maps to exactly zero.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    if dbm == f64::NEG_INFINITY {
        0.0
    } else {
        10f64.powf((dbm - 30.0) / 10.0)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    if db == f64::INFINITY {
        f64::INFINITY
    } else {
        10f64.powf(db / 10.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotScheme {
    /// Zadoff-Chu pilots with the cyclic-shift digital precoder.
    Zc,
    /// All-(1/sqrt K) pilots with an identity digital precoder.
    Simplified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

/// Physical, array, frame and codebook dimensions of one simulated system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub carrier_freq_hz: f64,
    pub subcarrier_spacing_hz: f64,
    /// K
    pub num_subcarriers: usize,
    /// N_BS
    pub num_bs_antennas: usize,
    pub antenna_spacing_wavelengths: f64,
    /// N_RF
    pub num_rf_chains: usize,
    /// v, number of adjacent DFT beams merged into one widebeam.
    pub widebeam_group_factor: usize,
    /// G
    pub widebeam_count: usize,
    /// M, distance rings of the near-field codebook.
    pub distance_samples: usize,
    pub distance_range_m: [f64; 2],
    pub angle_range_deg: [f64; 2],
    /// P, frames of pilot history fed to the predictor.
    pub context_frames: usize,
    /// Rician factor in dB; `inf` disables the NLoS part entirely.
    pub rician_k_db: f64,
    pub num_clusters: usize,
    pub rays_per_cluster: usize,
    pub ul_power_dbm: f64,
    /// Receiver noise power per antenna; `-inf` is noiseless.
    pub noise_power_dbm: f64,
    pub speed_range_kmh: [f64; 2],
    pub rng_seed: u64,
    /// Mean of the exponential cluster excess-delay distribution.
    pub cluster_delay_mean_s: f64,
    /// Scatterers are dropped uniformly in this annulus around the user.
    pub scatterer_radius_m: [f64; 2],
    pub pilot_scheme: PilotScheme,
}

impl SystemConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self {
                carrier_freq_hz: 30e9,
                subcarrier_spacing_hz: 120e3,
                num_subcarriers: 60,
                num_bs_antennas: 256,
                antenna_spacing_wavelengths: 0.5,
                num_rf_chains: 8,
                widebeam_group_factor: 4,
                widebeam_count: 64,
                distance_samples: 5,
                distance_range_m: [5.0, 20.0],
                angle_range_deg: [-60.0, 60.0],
                context_frames: 7,
                rician_k_db: 9.0,
                num_clusters: 12,
                rays_per_cluster: 20,
                ul_power_dbm: 20.0,
                noise_power_dbm: -110.0,
                speed_range_kmh: [30.0, 100.0],
                rng_seed: 0x5eed_0001,
                cluster_delay_mean_s: 100e-9,
                scatterer_radius_m: [1.0, 50.0],
                pilot_scheme: PilotScheme::Zc,
            },
            Preset::Desk => Self {
                num_subcarriers: 8,
                num_bs_antennas: 32,
                num_rf_chains: 4,
                widebeam_group_factor: 4,
                widebeam_count: 8,
                distance_samples: 3,
                context_frames: 5,
                num_clusters: 4,
                rays_per_cluster: 5,
                ..Self::preset(Preset::Paper)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_subcarriers == 0 {
            return fail("num_subcarriers must be >= 1".into());
        }
        if self.num_bs_antennas == 0 || self.num_rf_chains == 0 {
            return fail("antenna and RF-chain counts must be positive".into());
        }
        if self.widebeam_group_factor == 0 || self.widebeam_count == 0 {
            return fail("widebeam dimensions must be positive".into());
        }
        if self.widebeam_count % self.num_rf_chains != 0 {
            return fail(format!(
                "num_rf_chains ({}) must divide widebeam_count ({})",
                self.num_rf_chains, self.widebeam_count
            ));
        }
        if self.widebeam_count * self.widebeam_group_factor != self.num_bs_antennas {
            return fail(format!(
                "widebeam_count * widebeam_group_factor = {} but num_bs_antennas = {}",
                self.widebeam_count * self.widebeam_group_factor,
                self.num_bs_antennas
            ));
        }
        if self.distance_samples == 0 {
            return fail("distance_samples must be >= 1".into());
        }
        if self.context_frames == 0 {
            return fail("context_frames must be >= 1".into());
        }
        let [dmin, dmax] = self.distance_range_m;
        if !(dmin > 0.0 && dmax >= dmin && dmax.is_finite()) {
            return fail(format!("bad distance_range_m {:?}", self.distance_range_m));
        }
        let [amin, amax] = self.angle_range_deg;
        if !(amin >= -90.0 && amax <= 90.0 && amax >= amin) {
            return fail(format!("bad angle_range_deg {:?}", self.angle_range_deg));
        }
        let [smin, smax] = self.speed_range_kmh;
        if !(smin >= 0.0 && smax >= smin && smax.is_finite()) {
            return fail(format!("bad speed_range_kmh {:?}", self.speed_range_kmh));
        }
        let [rmin, rmax] = self.scatterer_radius_m;
        if !(rmin > 0.0 && rmax >= rmin) {
            return fail(format!("bad scatterer_radius_m {:?}", self.scatterer_radius_m));
        }
        if !(self.carrier_freq_hz > 0.0 && self.subcarrier_spacing_hz > 0.0) {
            return fail("frequencies must be positive".into());
        }
        if !(self.antenna_spacing_wavelengths > 0.0) {
            return fail("antenna spacing must be positive".into());
        }
        if self.rician_k_db.is_nan() || self.rician_k_db == f64::NEG_INFINITY {
            return fail("rician_k_db must be a number or +inf".into());
        }
        if self.noise_power_dbm.is_nan() || self.noise_power_dbm == f64::INFINITY {
            return fail("noise_power_dbm must be finite or -inf".into());
        }
        if !(self.cluster_delay_mean_s >= 0.0) {
            return fail("cluster_delay_mean_s must be non-negative".into());
        }
        if self.rng_seed > i64::MAX as u64 {
            return fail("rng_seed must fit in a signed 64-bit integer".into());
        }
        Ok(())
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq_hz
    }

    pub fn antenna_spacing_m(&self) -> f64 {
        self.antenna_spacing_wavelengths * self.wavelength_m()
    }

    /// f_k = f_c + k * delta_f, k zero-based.
    pub fn subcarrier_freq_hz(&self, k: usize) -> f64 {
        self.carrier_freq_hz + k as f64 * self.subcarrier_spacing_hz
    }

    /// |N| = N_BS * M
    pub fn codebook_size(&self) -> usize {
        self.num_bs_antennas * self.distance_samples
    }

    pub fn rician_k_linear(&self) -> f64 {
        db_to_linear(self.rician_k_db)
    }

    pub fn ul_power_watts(&self) -> f64 {
        dbm_to_watts(self.ul_power_dbm)
    }

    pub fn noise_power_watts(&self) -> f64 {
        dbm_to_watts(self.noise_power_dbm)
    }

    /// The same configuration with sounding switched to the simplified pilots.
    pub fn with_pilot_scheme(&self, scheme: PilotScheme) -> Self {
        Self {
            pilot_scheme: scheme,
            ..self.clone()
        }
    }
}

/// Number of OFDM symbols needed to sweep every widebeam once: G / N_RF.
pub fn pilot_symbol_budget(cfg: &SystemConfig) -> usize {
    cfg.widebeam_count / cfg.num_rf_chains
}

/// NR timing bookkeeping for one radio frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameTiming {
    pub slots_per_frame: usize,
    pub symbols_per_slot: usize,
    pub srs_symbols_per_ul_slot: usize,
    pub pilot_symbols_per_frame: usize,
}

impl FrameTiming {
    pub const SYMBOLS_PER_SLOT: usize = 14;
    pub const SRS_SYMBOLS_PER_UL_SLOT: usize = 4;

    pub fn for_config(cfg: &SystemConfig) -> Result<Self> {
        Self::with_srs_symbols(cfg, Self::SRS_SYMBOLS_PER_UL_SLOT)
    }

    pub fn with_srs_symbols(cfg: &SystemConfig, srs_symbols: usize) -> Result<Self> {
        if ![1, 2, 4].contains(&srs_symbols) {
            return Err(Error::InvalidConfig(format!(
                "SRS symbols per slot must be 1, 2 or 4, got {srs_symbols}"
            )));
        }
        let ratio = cfg.subcarrier_spacing_hz / 15e3;
        let mu = ratio.log2().round();
        if mu < 0.0 || (2f64.powf(mu) - ratio).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "subcarrier spacing {} Hz is not an NR numerology",
                cfg.subcarrier_spacing_hz
            )));
        }
        Ok(Self {
            slots_per_frame: 10 << (mu as u32),
            symbols_per_slot: Self::SYMBOLS_PER_SLOT,
            srs_symbols_per_ul_slot: srs_symbols,
            pilot_symbols_per_frame: pilot_symbol_budget(cfg),
        })
    }

    pub fn slot_duration_s(&self) -> f64 {
        FRAME_DURATION_S / self.slots_per_frame as f64
    }
}

/// Everything a run needs: system, model, training and dataset sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            system: SystemConfig::preset(preset),
            model: ModelConfig::preset(preset),
            training: TrainingConfig::preset(preset),
            dataset: DatasetConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml_string()?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
