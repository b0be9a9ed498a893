//! Beam codebooks and the digital precoder schedule.
//!
//! Codebook layouts:
//!
//! * DFT: column `m` steers to `sin(psi_m) = -1 + 2m/N`.
//! * Near field: `N * M` codewords, index `n = m * N + s` for distance
//!   sample `m` and angle sample `s` (distance-major). Labels are stored as
//!   these flat indices.
//! * Widebeam: `G` codewords, each the phase of the average of `v` adjacent
//!   DFT columns.
//!
//! All indices (codewords, symbols, subcarriers) are 0-based.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::channel::element_positions;
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::linalg::{CMat, C64};

/// Averaged elements below this magnitude are treated as exactly zero when
/// building widebeams, so their phase is 0 instead of rounding noise.
const WIDEBEAM_ZERO_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookKind {
    Dft,
    NearField,
    Widebeam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodewordMeta {
    pub angle_rad: f64,
    pub distance_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub kind: CodebookKind,
    pub num_antennas: usize,
    /// Codeword-major: codeword `i` occupies `[i*N, (i+1)*N)`.
    codewords: Vec<C64>,
    pub meta: Vec<CodewordMeta>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn codeword(&self, i: usize) -> &[C64] {
        &self.codewords[i * self.num_antennas..(i + 1) * self.num_antennas]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[C64]> {
        self.codewords.chunks_exact(self.num_antennas)
    }

    /// Codeword-major storage, i.e. the row-major |codebook| x N matrix B^T.
    pub fn as_slice(&self) -> &[C64] {
        &self.codewords
    }

    /// N x |codebook| matrix with codewords as columns.
    pub fn to_matrix(&self) -> CMat {
        CMat::from_fn(self.num_antennas, self.len(), |r, c| self.codeword(c)[r])
    }
}

/// sin(psi_m) = -1 + 2m/N.
pub fn dft_sin_grid(n: usize) -> Vec<f64> {
    (0..n).map(|m| -1.0 + 2.0 * m as f64 / n as f64).collect()
}

/// Uniform distance samples over the configured range, endpoints included.
pub fn distance_grid(cfg: &SystemConfig) -> Vec<f64> {
    let [lo, hi] = cfg.distance_range_m;
    let m = cfg.distance_samples;
    if m == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect()
}

/// Entry `e^{-j pi n sin(psi_m)} / sqrt(N)` with the exponent reduced in
/// integer arithmetic: `pi n (2m - N) / N` modulo `2 pi`.
fn dft_entry(n: usize, m: usize, big_n: usize) -> C64 {
    let two_n = 2 * big_n as i64;
    let num = (n as i64 * (2 * m as i64 - big_n as i64)).rem_euclid(two_n);
    C64::from_polar(1.0 / (big_n as f64).sqrt(), -PI * num as f64 / big_n as f64)
}

pub fn dft_codebook(cfg: &SystemConfig) -> Codebook {
    let n = cfg.num_bs_antennas;
    let mut codewords = Vec::with_capacity(n * n);
    let mut meta = Vec::with_capacity(n);
    for (m, s) in dft_sin_grid(n).into_iter().enumerate() {
        codewords.extend((0..n).map(|e| dft_entry(e, m, n)));
        meta.push(CodewordMeta {
            angle_rad: s.asin(),
            distance_m: None,
        });
    }
    Codebook {
        kind: CodebookKind::Dft,
        num_antennas: n,
        codewords,
        meta,
    }
}

/// `e^{j 2 pi (r_s - r) / lambda} / sqrt(N)` with `r_s` the exact distance from
/// element `s` to the focal point at angle `psi` and range `r`.
pub fn near_field_codeword(psi: f64, r: f64, cfg: &SystemConfig) -> Result<Vec<C64>> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "focal distance must be positive and finite, got {r}"
        )));
    }
    let lambda = cfg.wavelength_m();
    let scale = 1.0 / (cfg.num_bs_antennas as f64).sqrt();
    let focus = crate::channel::Vec2::from_polar(psi, r);
    Ok(element_positions(cfg)
        .into_iter()
        .map(|e| C64::from_polar(scale, 2.0 * PI * (e.distance(focus) - r) / lambda))
        .collect())
}

pub fn near_field_codebook(cfg: &SystemConfig) -> Codebook {
    let n = cfg.num_bs_antennas;
    let angles: Vec<f64> = dft_sin_grid(n).into_iter().map(f64::asin).collect();
    let distances = distance_grid(cfg);
    let mut codewords = Vec::with_capacity(n * n * distances.len());
    let mut meta = Vec::with_capacity(n * distances.len());
    for &r in &distances {
        for &psi in &angles {
            codewords.extend(near_field_codeword(psi, r, cfg).expect("validated distance grid"));
            meta.push(CodewordMeta {
                angle_rad: psi,
                distance_m: Some(r),
            });
        }
    }
    Codebook {
        kind: CodebookKind::NearField,
        num_antennas: n,
        codewords,
        meta,
    }
}

/// (angle index s, distance index m) of near-field codeword `index`.
pub fn near_field_indices(index: usize, num_antennas: usize) -> (usize, usize) {
    (index % num_antennas, index / num_antennas)
}

pub fn widebeam_codebook(cfg: &SystemConfig) -> Result<Codebook> {
    let n = cfg.num_bs_antennas;
    let v = cfg.widebeam_group_factor;
    let g_count = cfg.widebeam_count;
    if v == 0 || v * g_count != n {
        return Err(Error::InvalidConfig(format!(
            "widebeams need v * G = N_BS, got {v} * {g_count} != {n}"
        )));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let sin_grid = dft_sin_grid(n);
    let mut codewords = Vec::with_capacity(n * g_count);
    let mut meta = Vec::with_capacity(g_count);
    for g in 0..g_count {
        let cols = g * v..(g + 1) * v;
        for e in 0..n {
            let mean: C64 = cols.clone().map(|m| dft_entry(e, m, n)).sum::<C64>() / v as f64;
            let phase = if mean.norm() <= WIDEBEAM_ZERO_TOL * scale {
                0.0
            } else {
                mean.arg()
            };
            codewords.push(C64::from_polar(scale, phase));
        }
        let centre = cols.map(|m| sin_grid[m]).sum::<f64>() / v as f64;
        meta.push(CodewordMeta {
            angle_rad: centre.asin(),
            distance_m: None,
        });
    }
    Ok(Codebook {
        kind: CodebookKind::Widebeam,
        num_antennas: n,
        codewords,
        meta,
    })
}

/// Analog precoder of pilot symbol `t`: widebeams `t*N_RF .. (t+1)*N_RF`.
pub fn analog_precoder_for_symbol(t: usize, widebeams: &Codebook, cfg: &SystemConfig) -> Result<CMat> {
    let n_rf = cfg.num_rf_chains;
    let symbols = widebeams.len() / n_rf;
    if t >= symbols {
        return Err(Error::OutOfRange {
            what: "pilot symbol",
            index: t,
            bound: symbols,
        });
    }
    let cols: Vec<&[C64]> = (t * n_rf..(t + 1) * n_rf).map(|g| widebeams.codeword(g)).collect();
    CMat::from_columns(&cols)
}

/// Per-subcarrier digital precoders: subcarrier `k` uses the columns of the
/// unitary DFT matrix `Q` in cyclic order `(j + k) mod N_RF`.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitalSchedule {
    pub base: CMat,
    identity: bool,
}

impl DigitalSchedule {
    pub fn new(num_rf_chains: usize) -> Self {
        let n = num_rf_chains;
        let scale = 1.0 / (n as f64).sqrt();
        let base = CMat::from_fn(n, n, |a, b| {
            C64::from_polar(scale, -2.0 * PI * ((a * b) % n) as f64 / n as f64)
        });
        Self { base, identity: false }
    }

    /// Schedule whose every precoder is the identity.
    pub fn identity(num_rf_chains: usize) -> Self {
        Self {
            base: CMat::identity(num_rf_chains),
            identity: true,
        }
    }

    pub fn from_config(cfg: &SystemConfig) -> Self {
        match cfg.pilot_scheme {
            crate::config::PilotScheme::Zc => Self::new(cfg.num_rf_chains),
            crate::config::PilotScheme::Simplified => Self::identity(cfg.num_rf_chains),
        }
    }

    pub fn num_rf_chains(&self) -> usize {
        self.base.rows
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// Column order I_k (0-based).
    pub fn column_set(&self, k: usize) -> Vec<usize> {
        let n = self.num_rf_chains();
        if self.identity {
            return (0..n).collect();
        }
        (0..n).map(|j| (j + k) % n).collect()
    }

    /// F_BB for subcarrier `k`.
    pub fn precoder(&self, k: usize) -> CMat {
        let cols = self.column_set(k);
        CMat::from_fn(self.base.rows, cols.len(), |r, c| self.base.get(r, cols[c]))
    }
}
