//! Uplink pilot sounding through the hybrid widebeam precoders.
//!
//! Pilot symbol `t` (0-based) uses widebeams `t*N_RF .. (t+1)*N_RF` in the
//! analog stage and the cyclically shifted DFT matrix in the digital stage.
//! The `N_RF` combiner outputs of symbol `t` on subcarrier `k` fill columns
//! `t*N_RF + i` of row `k` of the measurement matrix `Y`, which therefore
//! holds every probing beam exactly once.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::channel::ChannelFrame;
use crate::codebook::{analog_precoder_for_symbol, widebeam_codebook, Codebook, DigitalSchedule};
use crate::config::{PilotScheme, SystemConfig};
use crate::error::{Error, Result};
use crate::linalg::{gcd, CMat, C64};

/// K x T pilot symbols, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotMatrix {
    pub num_subcarriers: usize,
    pub num_symbols: usize,
    pub data: Vec<C64>,
    /// ZC root of each symbol; empty for the simplified pilots.
    pub roots: Vec<usize>,
}

impl PilotMatrix {
    #[inline]
    pub fn get(&self, k: usize, t: usize) -> C64 {
        self.data[k * self.num_symbols + t]
    }

    pub fn column(&self, t: usize) -> Vec<C64> {
        (0..self.num_subcarriers).map(|k| self.get(k, t)).collect()
    }
}

/// `X[k, t] = exp(-j pi r_t k (k + eta) / K) / sqrt(K)` with `eta = K mod 2`,
/// the choice that makes every column periodic in `K` and therefore CAZAC.
/// The exponent is reduced modulo `2K`
/// in integers before conversion so long sequences keep full precision.
pub fn zc_pilot(k_len: usize, roots: &[usize]) -> Result<PilotMatrix> {
    if k_len == 0 {
        return Err(Error::InvalidArgument("ZC length must be positive".into()));
    }
    for &r in roots {
        if r == 0 || r >= k_len.max(2) || gcd(r, k_len) != 1 {
            return Err(Error::NonCoprimeRoot { root: r, len: k_len });
        }
    }
    let eta = k_len % 2;
    let two_k = 2 * k_len as u128;
    let amp = 1.0 / (k_len as f64).sqrt();
    let t_len = roots.len();
    let mut data = Vec::with_capacity(k_len * t_len);
    for k in 0..k_len {
        let base = k as u128 * (k + eta) as u128;
        for &r in roots {
            let num = (r as u128 * base) % two_k;
            data.push(C64::from_polar(amp, -PI * num as f64 / k_len as f64));
        }
    }
    Ok(PilotMatrix {
        num_subcarriers: k_len,
        num_symbols: t_len,
        data,
        roots: roots.to_vec(),
    })
}

/// All-`1/sqrt(K)` pilots.
pub fn simplified_pilot(k_len: usize, t_len: usize) -> PilotMatrix {
    PilotMatrix {
        num_subcarriers: k_len,
        num_symbols: t_len,
        data: vec![C64::new(1.0 / (k_len as f64).sqrt(), 0.0); k_len * t_len],
        roots: Vec::new(),
    }
}

/// The `T` smallest positive integers coprime with `K`, below `K`.
///
/// When `T` exceeds the number of such roots the list wraps around and
/// reuses them in the same order.
pub fn default_roots(k_len: usize, t_len: usize) -> Vec<usize> {
    let bound = k_len.max(2);
    let pool: Vec<usize> = (1..bound).filter(|&r| gcd(r, k_len) == 1).collect();
    (0..t_len).map(|t| pool[t % pool.len()]).collect()
}

pub fn pilots_for_config(cfg: &SystemConfig) -> Result<PilotMatrix> {
    let t_len = crate::config::pilot_symbol_budget(cfg);
    match cfg.pilot_scheme {
        PilotScheme::Zc => zc_pilot(cfg.num_subcarriers, &default_roots(cfg.num_subcarriers, t_len)),
        PilotScheme::Simplified => Ok(simplified_pilot(cfg.num_subcarriers, t_len)),
    }
}

fn draw_noise<R: Rng + ?Sized>(n: usize, sigma2: f64, rng: &mut R) -> Vec<C64> {
    let s = (sigma2 / 2.0).sqrt();
    (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            C64::new(s * re, s * im)
        })
        .collect()
}

/// `y = sqrt(P_ul) F^H h x + F^H n`, `F = F_RF F_BB`, `n ~ CN(0, sigma^2 I)`.
///
/// Noise is drawn at the antennas even when `sigma^2 = 0`, so the random
/// stream advances identically across noise levels.
pub fn receive_pilot_symbol<R: Rng + ?Sized>(
    h_k: &[C64],
    f_rf: &CMat,
    f_bb: &CMat,
    x: C64,
    p_ul: f64,
    noise_power: f64,
    rng: &mut R,
) -> Result<Vec<C64>> {
    if p_ul < 0.0 || noise_power < 0.0 {
        return Err(Error::InvalidArgument("powers must be non-negative".into()));
    }
    let f_hyb = f_rf.matmul(f_bb)?;
    let noise = draw_noise(f_hyb.rows, noise_power, rng);
    let signal = f_hyb.adjoint_mul_vec(h_k)?;
    let combined = f_hyb.adjoint_mul_vec(&noise)?;
    let a = x * p_ul.sqrt();
    Ok(signal.into_iter().zip(combined).map(|(s, n)| s * a + n).collect())
}

/// Y in C^{K x G}, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementFrame {
    pub y: Vec<C64>,
    pub num_subcarriers: usize,
    pub num_columns: usize,
    pub frame_index: usize,
    pub noise_power_dbm: f64,
}

impl MeasurementFrame {
    #[inline]
    pub fn get(&self, k: usize, g: usize) -> C64 {
        self.y[k * self.num_columns + g]
    }

    pub fn scaled(&self, alpha: C64) -> Self {
        Self {
            y: self.y.iter().map(|&z| z * alpha).collect(),
            ..self.clone()
        }
    }
}

/// Precomputed hybrid combiners for a configuration.
#[derive(Clone, Debug)]
pub struct Sounder {
    pub pilots: PilotMatrix,
    pub widebeams: Codebook,
    pub schedule: DigitalSchedule,
    num_antennas: usize,
    num_rf: usize,
    num_symbols: usize,
    num_subcarriers: usize,
    p_ul: f64,
    noise_power: f64,
    noise_power_dbm: f64,
    /// F_hyb^H for every (k, t), each N_RF x N row-major, index k*T + t.
    combiners: Vec<Vec<C64>>,
}

impl Sounder {
    pub fn new(cfg: &SystemConfig) -> Result<Self> {
        Self::with_parts(
            cfg,
            pilots_for_config(cfg)?,
            widebeam_codebook(cfg)?,
            DigitalSchedule::from_config(cfg),
        )
    }

    pub fn with_parts(
        cfg: &SystemConfig,
        pilots: PilotMatrix,
        widebeams: Codebook,
        schedule: DigitalSchedule,
    ) -> Result<Self> {
        let n_rf = cfg.num_rf_chains;
        let t_len = widebeams.len() / n_rf;
        if widebeams.len() % n_rf != 0 || t_len == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} widebeams cannot be split over {n_rf} RF chains",
                widebeams.len()
            )));
        }
        if pilots.num_symbols != t_len || pilots.num_subcarriers != cfg.num_subcarriers {
            return Err(Error::DimensionMismatch(format!(
                "pilot matrix is {}x{}, expected {}x{t_len}",
                pilots.num_subcarriers, pilots.num_symbols, cfg.num_subcarriers
            )));
        }
        if schedule.num_rf_chains() != n_rf || widebeams.num_antennas != cfg.num_bs_antennas {
            return Err(Error::DimensionMismatch(
                "precoder dimensions disagree with config".into(),
            ));
        }
        let analog: Vec<CMat> = (0..t_len)
            .map(|t| analog_precoder_for_symbol(t, &widebeams, cfg))
            .collect::<Result<_>>()?;
        let mut combiners = Vec::with_capacity(cfg.num_subcarriers * t_len);
        for k in 0..cfg.num_subcarriers {
            let f_bb = schedule.precoder(k);
            for f_rf in &analog {
                combiners.push(f_rf.matmul(&f_bb)?.adjoint().data);
            }
        }
        Ok(Self {
            pilots,
            widebeams,
            schedule,
            num_antennas: cfg.num_bs_antennas,
            num_rf: n_rf,
            num_symbols: t_len,
            num_subcarriers: cfg.num_subcarriers,
            p_ul: cfg.ul_power_watts(),
            noise_power: cfg.noise_power_watts(),
            noise_power_dbm: cfg.noise_power_dbm,
            combiners,
        })
    }

    pub fn num_columns(&self) -> usize {
        self.num_rf * self.num_symbols
    }

    /// Runs every pilot symbol on every subcarrier of `frame`.
    pub fn measure_frame<R: Rng + ?Sized>(&self, frame: &ChannelFrame, rng: &mut R) -> Result<MeasurementFrame> {
        if frame.num_antennas != self.num_antennas || frame.num_subcarriers != self.num_subcarriers {
            return Err(Error::DimensionMismatch(format!(
                "channel is {}x{}, sounder expects {}x{}",
                frame.num_subcarriers, frame.num_antennas, self.num_subcarriers, self.num_antennas
            )));
        }
        let n = self.num_antennas;
        let g = self.num_columns();
        let amp = self.p_ul.sqrt();
        let mut y = vec![C64::new(0.0, 0.0); self.num_subcarriers * g];
        for k in 0..self.num_subcarriers {
            let h = frame.row(k);
            for t in 0..self.num_symbols {
                let comb = &self.combiners[k * self.num_symbols + t];
                let noise = draw_noise(n, self.noise_power, rng);
                let a = self.pilots.get(k, t) * amp;
                for i in 0..self.num_rf {
                    let row = &comb[i * n..(i + 1) * n];
                    let mut s = C64::new(0.0, 0.0);
                    let mut w = C64::new(0.0, 0.0);
                    for ((c, hv), nv) in row.iter().zip(h).zip(&noise) {
                        s += c * hv;
                        w += c * nv;
                    }
                    y[k * g + t * self.num_rf + i] = s * a + w;
                }
            }
        }
        Ok(MeasurementFrame {
            y,
            num_subcarriers: self.num_subcarriers,
            num_columns: g,
            frame_index: frame.frame_index,
            noise_power_dbm: self.noise_power_dbm,
        })
    }
}

pub fn measure_frame<R: Rng + ?Sized>(
    frame: &ChannelFrame,
    pilots: &PilotMatrix,
    widebeams: &Codebook,
    schedule: &DigitalSchedule,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<MeasurementFrame> {
    Sounder::with_parts(cfg, pilots.clone(), widebeams.clone(), schedule.clone())?.measure_frame(frame, rng)
}
