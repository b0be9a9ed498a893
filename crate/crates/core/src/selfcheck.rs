//! Fast invariant suite behind the `selfcheck` command.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{UserTrajectory, Vec2};
use crate::codebook::{near_field_codebook, near_field_codeword, widebeam_codebook, DigitalSchedule};
use crate::config::{pilot_symbol_budget, Preset, SystemConfig};
use crate::linalg::C64;
use crate::linalg::{correlation, inner, CMat};
use crate::oracle::{label_frame, nbg};
use crate::sounding::{default_roots, zc_pilot};
use crate::training::{apply_mask, MaskAction};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn() -> Result<String, String>;

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pilot_budget() -> Result<String, String> {
    let n = pilot_symbol_budget(&SystemConfig::preset(Preset::Paper));
    ensure(n == 8, format!("{n} symbols per frame"))
}

fn codebook_size() -> Result<String, String> {
    let n = SystemConfig::preset(Preset::Paper).codebook_size();
    ensure(n == 1280, format!("{n} codewords"))
}

fn zc_cazac() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for k in [7usize, 8, 60] {
        let roots: Vec<usize> = (1..k).filter(|&r| crate::linalg::gcd(r, k) == 1).collect();
        let p = zc_pilot(k, &roots).map_err(|e| e.to_string())?;
        for t in 0..p.num_symbols {
            let col = p.column(t);
            for x in &col {
                worst = worst.max((x.norm() - 1.0 / (k as f64).sqrt()).abs());
            }
            for lag in 1..k {
                let shifted: Vec<_> = (0..k).map(|i| col[(i + lag) % k]).collect();
                worst = worst.max(inner(&col, &shifted).norm());
            }
        }
    }
    ensure(worst <= 1e-10, format!("worst deviation {worst:.2e}"))
}

fn unitarity() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for preset in [Preset::Desk, Preset::Paper] {
        let cfg = SystemConfig::preset(preset);
        let sched = DigitalSchedule::from_config(&cfg);
        for k in 0..cfg.num_subcarriers {
            let q = sched.precoder(k);
            let qhq = q.adjoint().matmul(&q).map_err(|e| e.to_string())?;
            worst = worst.max(qhq.max_abs_diff(&CMat::identity(q.cols)));
        }
        let wb = widebeam_codebook(&cfg).map_err(|e| e.to_string())?;
        let amp = 1.0 / (cfg.num_bs_antennas as f64).sqrt();
        for w in wb.iter() {
            for x in w {
                worst = worst.max((x.norm() - amp).abs());
            }
        }
    }
    ensure(worst <= 1e-12, format!("worst deviation {worst:.2e}"))
}

fn far_field_limit() -> Result<String, String> {
    let cfg = SystemConfig::preset(Preset::Desk);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = 1e6 * cfg.wavelength_m();
    let mut worst: f64 = 1.0;
    for _ in 0..32 {
        let psi: f64 = rng.random_range(-0.9..0.9);
        let nf = near_field_codeword(psi, r, &cfg).map_err(|e| e.to_string())?;
        let dft: Vec<C64> = (0..cfg.num_bs_antennas)
            .map(|e| C64::from_polar(1.0, -PI * e as f64 * psi.sin()))
            .collect();
        worst = worst.min(correlation(&nf, &dft));
    }
    ensure(worst >= 0.999, format!("lowest correlation {worst:.6}"))
}

fn masking_statistics() -> Result<String, String> {
    let (batch, seq) = (1000, 100);
    let x = vec![1.0f64; batch * seq];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, plan) = apply_mask(&x, batch, seq, 1, 0.3, &mut rng).map_err(|e| e.to_string())?;
    let masked = plan.masked_count() as f64;
    let frac = masked / (batch * seq) as f64;
    let share = |a: MaskAction| plan.actions.iter().filter(|&&m| m == Some(a)).count() as f64 / masked;
    let (z, r, k) = (
        share(MaskAction::Zero),
        share(MaskAction::Random),
        share(MaskAction::Keep),
    );
    let ok =
        (frac - 0.3).abs() <= 0.01 && (z - 0.8).abs() <= 0.02 && (r - 0.1).abs() <= 0.02 && (k - 0.1).abs() <= 0.02;
    ensure(ok, format!("masked {frac:.4}, split {z:.3}/{r:.3}/{k:.3}"))
}

fn static_los_labels() -> Result<String, String> {
    let mut cfg = SystemConfig::preset(Preset::Desk);
    cfg.rician_k_db = f64::INFINITY;
    cfg.noise_power_dbm = f64::NEG_INFINITY;
    let cb = near_field_codebook(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 1.0;
    for _ in 0..50 {
        let angle = rng.random_range(-PI / 3.0..PI / 3.0);
        let dist = rng.random_range(cfg.distance_range_m[0]..cfg.distance_range_m[1]);
        let traj = UserTrajectory::new(angle, dist, Vec2::default(), 1);
        let frames = crate::channel::generate_frame_sequence(&cfg, &traj, &mut rng).map_err(|e| e.to_string())?;
        let label = label_frame(&frames[0], &cb).map_err(|e| e.to_string())?;
        worst = worst.min(nbg(&frames[0], label.index, &cb).map_err(|e| e.to_string())?);
    }
    ensure(worst >= 0.99, format!("lowest NBG of the label {worst:.4}"))
}

fn default_roots_coprime() -> Result<String, String> {
    for k in [7usize, 8, 60] {
        let roots = default_roots(k, 8);
        zc_pilot(k, &roots).map_err(|e| e.to_string())?;
    }
    Ok("roots valid for K = 7, 8, 60".into())
}

pub const CHECKS: &[(&str, Check)] = &[
    ("pilot budget", pilot_budget),
    ("codebook size", codebook_size),
    ("zc cazac", zc_cazac),
    ("default roots", default_roots_coprime),
    ("unitarity", unitarity),
    ("far-field limit", far_field_limit),
    ("masking statistics", masking_statistics),
    ("static los labels", static_los_labels),
];

pub fn run() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let t = Instant::now();
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome {
                name,
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_check_passes() {
        for c in super::run() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
