//! Exhaustive-search beam labels and normalized beamforming gain.
//!
//! The beam gain of codeword `b` on subcarrier `k` is `|h[k] b|`, the plain
//! product of the row channel with the codeword. The near-field codewords
//! carry the conjugate of the spherical LoS phases, so this product is the
//! matched filter.

use crate::channel::ChannelFrame;
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::linalg::C64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamLabel {
    pub index: usize,
    /// sum_k |h[k] b_index|
    pub gain: f64,
}

fn check_dims(frame: &ChannelFrame, cb: &Codebook) -> Result<()> {
    if frame.num_antennas != cb.num_antennas {
        return Err(Error::DimensionMismatch(format!(
            "channel has {} antennas, codebook {}",
            frame.num_antennas, cb.num_antennas
        )));
    }
    Ok(())
}

/// `h[k] b_n` for every subcarrier and codeword, K x |codebook| row-major.
///
/// Each entry is accumulated over antennas in index order, so it is
/// bitwise equal to a straightforward per-codeword dot product.
pub fn beam_responses(frame: &ChannelFrame, cb: &Codebook) -> Result<Vec<C64>> {
    check_dims(frame, cb)?;
    let n_cw = cb.len();
    let n_ant = cb.num_antennas;
    // Antenna-major copy of the codebook so the inner loop is contiguous.
    let mut bt = vec![C64::new(0.0, 0.0); n_ant * n_cw];
    for (i, w) in cb.iter().enumerate() {
        for (s, &z) in w.iter().enumerate() {
            bt[s * n_cw + i] = z;
        }
    }
    let mut out = vec![C64::new(0.0, 0.0); frame.num_subcarriers * n_cw];
    for k in 0..frame.num_subcarriers {
        let acc = &mut out[k * n_cw..(k + 1) * n_cw];
        for (s, &h) in frame.row(k).iter().enumerate() {
            for (a, &b) in acc.iter_mut().zip(&bt[s * n_cw..(s + 1) * n_cw]) {
                *a += h * b;
            }
        }
    }
    Ok(out)
}

/// Index maximizing `sum_k |h[k] b_n|`; ties go to the lowest index.
pub fn label_frame(frame: &ChannelFrame, cb: &Codebook) -> Result<BeamLabel> {
    let resp = beam_responses(frame, cb)?;
    let n_cw = cb.len();
    let mut gains = vec![0.0f64; n_cw];
    for k in 0..frame.num_subcarriers {
        for (g, z) in gains.iter_mut().zip(&resp[k * n_cw..(k + 1) * n_cw]) {
            *g += z.norm();
        }
    }
    let (index, gain) = argmax_first(&gains).ok_or_else(|| Error::Degenerate("empty codebook".into()))?;
    Ok(BeamLabel { index, gain })
}

fn argmax_first(v: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best
}

/// `(1/K) sum_k |h[k] b_pred|^2 / max_n |h[k] b_n|^2`
pub fn nbg(frame: &ChannelFrame, predicted: usize, cb: &Codebook) -> Result<f64> {
    if predicted >= cb.len() {
        return Err(Error::OutOfRange {
            what: "codeword",
            index: predicted,
            bound: cb.len(),
        });
    }
    let resp = beam_responses(frame, cb)?;
    let n_cw = cb.len();
    let mut total = 0.0;
    for k in 0..frame.num_subcarriers {
        let row = &resp[k * n_cw..(k + 1) * n_cw];
        let best = row.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
        if !(best > 0.0) {
            return Err(Error::Degenerate(format!(
                "subcarrier {k} has zero gain on every codeword"
            )));
        }
        total += row[predicted].norm_sqr() / best;
    }
    Ok(total / frame.num_subcarriers as f64)
}

/// Indices of the two largest scores, best first; ties favour lower indices.
pub fn top2<T: PartialOrd + Copy>(scores: &[T]) -> [usize; 2] {
    let mut first = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[first] {
            first = i;
        }
    }
    let mut second = usize::MAX;
    for (i, s) in scores.iter().enumerate() {
        if i != first && (second == usize::MAX || *s > scores[second]) {
            second = i;
        }
    }
    if second == usize::MAX {
        second = first;
    }
    [first, second]
}

/// Index of the largest score; ties favour lower indices.
pub fn argmax<T: PartialOrd + Copy>(scores: &[T]) -> usize {
    top2(scores)[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_frame_sequence, los_phase_vector, UserTrajectory, Vec2};
    use crate::codebook::near_field_codebook;
    use crate::config::{Preset, SystemConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk() -> SystemConfig {
        SystemConfig::preset(Preset::Desk)
    }

    fn naive_label(frame: &ChannelFrame, cb: &Codebook) -> usize {
        let mut best = 0;
        let mut best_gain = f64::MIN;
        for n in 0..cb.len() {
            let mut g = 0.0;
            for k in 0..frame.num_subcarriers {
                let mut acc = C64::new(0.0, 0.0);
                for s in 0..frame.num_antennas {
                    acc += frame.row(k)[s] * cb.codeword(n)[s];
                }
                g += acc.norm();
            }
            if g > best_gain {
                best_gain = g;
                best = n;
            }
        }
        best
    }

    fn random_frame(seed: u64) -> ChannelFrame {
        let cfg = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let angle = rng.random_range(-1.0..1.0);
        let dist = rng.random_range(5.0..20.0);
        let traj = UserTrajectory::new(angle, dist, Vec2::default(), 1);
        generate_frame_sequence(&cfg, &traj, &mut rng).unwrap().remove(0)
    }

    fn los_frame(cfg: &SystemConfig, pos: Vec2) -> ChannelFrame {
        let los = los_phase_vector(pos, Vec2::default(), cfg, 0.0).unwrap();
        let mut h = Vec::new();
        for _ in 0..cfg.num_subcarriers {
            h.extend_from_slice(&los);
        }
        ChannelFrame {
            h,
            num_subcarriers: cfg.num_subcarriers,
            num_antennas: cfg.num_bs_antennas,
            frame_index: 0,
            position: pos,
        }
    }

    #[test]
    fn matches_naive_search() {
        let cb = near_field_codebook(&desk());
        for seed in 0..20 {
            let f = random_frame(seed);
            assert_eq!(label_frame(&f, &cb).unwrap().index, naive_label(&f, &cb));
        }
    }

    #[test]
    fn matched_filter_wins_single_subcarrier() {
        let cfg = desk();
        let cb = near_field_codebook(&cfg);
        let target = 40;
        let h: Vec<C64> = cb.codeword(target).iter().map(|z| z.conj()).collect();
        let f = ChannelFrame {
            h,
            num_subcarriers: 1,
            num_antennas: 32,
            frame_index: 0,
            position: Vec2::default(),
        };
        assert_eq!(label_frame(&f, &cb).unwrap().index, target);
        assert!((nbg(&f, target, &cb).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn los_grid_points_self_label() {
        let cfg = desk();
        let cb = near_field_codebook(&cfg);
        for idx in [16usize, 20, 32 + 10, 64 + 22] {
            let m = cb.meta[idx];
            let f = los_frame(&cfg, Vec2::from_polar(m.angle_rad, m.distance_m.unwrap()));
            assert_eq!(label_frame(&f, &cb).unwrap().index, idx);
        }
    }

    #[test]
    fn los_label_has_high_nbg() {
        let cfg = desk();
        let cb = near_field_codebook(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let psi: f64 = rng.random_range(-1.0..1.0);
            let r: f64 = rng.random_range(5.0..20.0);
            let f = los_frame(&cfg, Vec2::from_polar(psi, r));
            let label = label_frame(&f, &cb).unwrap().index;
            assert!(nbg(&f, label, &cb).unwrap() >= 0.99);
        }
    }

    #[test]
    fn zero_channel_is_degenerate() {
        let cb = near_field_codebook(&desk());
        let f = ChannelFrame {
            h: vec![C64::new(0.0, 0.0); 8 * 32],
            num_subcarriers: 8,
            num_antennas: 32,
            frame_index: 0,
            position: Vec2::default(),
        };
        assert!(matches!(nbg(&f, 0, &cb), Err(Error::Degenerate(_))));
        assert!(matches!(nbg(&random_frame(1), 96, &cb), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn top2_examples() {
        assert_eq!(top2(&[0.1, 0.5, 0.3]), [1, 2]);
        assert_eq!(top2(&[1.0, 1.0, 0.0]), [0, 1]);
        assert_eq!(top2(&[2.0]), [0, 0]);
    }

    proptest! {
        #[test]
        fn label_is_scale_invariant(seed in 0u64..200, alpha in 1e-3f64..1e3) {
            let cb = near_field_codebook(&desk());
            let f = random_frame(seed);
            let a = label_frame(&f, &cb).unwrap().index;
            let b = label_frame(&f.scaled(C64::new(alpha, 0.0)), &cb).unwrap().index;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn label_maximizes_summed_amplitude(seed in 0u64..200) {
            let cb = near_field_codebook(&desk());
            let f = random_frame(seed);
            let label = label_frame(&f, &cb).unwrap();
            let resp = beam_responses(&f, &cb).unwrap();
            for n in 0..cb.len() {
                let g: f64 = (0..f.num_subcarriers).map(|k| resp[k * cb.len() + n].norm()).sum();
                prop_assert!(label.gain >= g);
            }
        }

        #[test]
        fn nbg_in_unit_interval(seed in 0u64..200, pred in 0usize..96) {
            let cb = near_field_codebook(&desk());
            let v = nbg(&random_frame(seed), pred, &cb).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn top2_contains_top1(scores in proptest::collection::vec(-10.0f64..10.0, 1..50)) {
            let [a, b] = top2(&scores);
            prop_assert_eq!(a, argmax(&scores));
            prop_assert!(scores[a] >= scores[b]);
            if scores.len() > 1 {
                prop_assert_ne!(a, b);
            }
        }
    }
}
