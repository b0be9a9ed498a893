//! Geometry-based mmWave channel for a moving single-antenna user.
//!
//! The BS carries a uniform linear array on the x axis, centered at the
//! origin, with broadside along +y. Angles are measured from broadside and
//! are positive toward +x, so a user at angle `psi` and range `r` sits at
//! `(r sin psi, r cos psi)`.
//!
//! A frame's channel is the Rician combination of
//!
//! * a line-of-sight term whose per-element phase uses the exact
//!   element-to-user distance (spherical wavefront), and
//! * a clustered NLoS term: every ray bounces off a point scatterer, carries
//!   a complex Gaussian gain drawn from an exponential power-delay profile,
//!   and has per-element phases from the exact element-to-scatterer distance.
//!
//! Both terms are evaluated on every subcarrier `f_k = f_c + k df` and the
//! whole frame is scaled by a free-space-style pathloss so that absolute
//! noise powers in dBm are meaningful.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{SystemConfig, FRAME_DURATION_S, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::linalg::C64;

/// Minimum distance between the user and any array element.
pub const MIN_ELEMENT_DISTANCE_M: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Point at `angle_rad` from broadside and range `r`.
    pub fn from_polar(angle_rad: f64, r: f64) -> Self {
        Self::new(r * angle_rad.sin(), r * angle_rad.cos())
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// Angle from broadside of this point as seen from the array center.
    pub fn angle_rad(self) -> f64 {
        self.x.atan2(self.y)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

/// Straight-line user motion sampled once per radio frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserTrajectory {
    pub initial_angle_rad: f64,
    pub initial_distance_m: f64,
    pub velocity_mps: Vec2,
    pub frame_positions: Vec<Vec2>,
}

impl UserTrajectory {
    /// Positions for `num_frames` consecutive frames spaced 10 ms apart.
    pub fn new(angle_rad: f64, distance_m: f64, velocity_mps: Vec2, num_frames: usize) -> Self {
        let start = Vec2::from_polar(angle_rad, distance_m);
        let frame_positions = (0..num_frames)
            .map(|p| start + velocity_mps * (p as f64 * FRAME_DURATION_S))
            .collect();
        Self {
            initial_angle_rad: angle_rad,
            initial_distance_m: distance_m,
            velocity_mps,
            frame_positions,
        }
    }

    pub fn speed_mps(&self) -> f64 {
        self.velocity_mps.norm()
    }

    pub fn heading_rad(&self) -> f64 {
        self.velocity_mps.y.atan2(self.velocity_mps.x)
    }

    pub fn num_frames(&self) -> usize {
        self.frame_positions.len()
    }
}

/// One NLoS ray.
#[derive(Clone, Debug, PartialEq)]
pub struct NlosPath {
    /// Complex gain at the frame this set was evaluated for.
    pub gain: C64,
    /// Absolute delay, `los_delay + excess_delay`.
    pub delay_s: f64,
    pub excess_delay_s: f64,
    pub scatterer: Vec2,
    /// Instantaneous Doppler phase rate 2 pi (r_hat . v) / lambda, r_hat from
    /// the user toward the scatterer.
    pub doppler_phase_rate: f64,
    /// exp(-j 2 pi |element_s - scatterer| / lambda) for every element.
    pub steering: Vec<C64>,
}

/// NLoS rays plus the LoS delay of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSet {
    pub paths: Vec<NlosPath>,
    pub los_delay_s: f64,
    /// Reference user position the gains are referred to.
    pub origin: Vec2,
}

impl ClusterSet {
    pub fn empty(los_delay_s: f64) -> Self {
        Self {
            paths: Vec::new(),
            los_delay_s,
            origin: Vec2::default(),
        }
    }

    /// Sum of |beta_p|^2.
    pub fn total_power(&self) -> f64 {
        self.paths.iter().map(|p| p.gain.norm_sqr()).sum()
    }

    /// Re-evaluates the set for a user that moved to `position`.
    ///
    /// Scatterers are static, so the per-element steering is unchanged. Each
    /// ray's gain picks up the phase of its change in scatterer-to-user path
    /// length, which is the integrated Doppler shift; delays follow the new
    /// LoS delay.
    pub fn at_position(&self, cfg: &SystemConfig, position: Vec2, velocity: Vec2) -> Self {
        let lambda = cfg.wavelength_m();
        let los_delay_s = position.norm() / SPEED_OF_LIGHT;
        let paths = self
            .paths
            .iter()
            .map(|p| {
                let d0 = p.scatterer.distance(self.origin);
                let d1 = p.scatterer.distance(position);
                let rot = C64::from_polar(1.0, -2.0 * PI * (d1 - d0) / lambda);
                NlosPath {
                    gain: p.gain * rot,
                    delay_s: los_delay_s + p.excess_delay_s,
                    doppler_phase_rate: doppler_rate(position, p.scatterer, velocity, lambda),
                    ..p.clone()
                }
            })
            .collect();
        Self {
            paths,
            los_delay_s,
            origin: position,
        }
    }
}

fn doppler_rate(user: Vec2, toward: Vec2, velocity: Vec2, lambda: f64) -> f64 {
    let dir = toward - user;
    let n = dir.norm();
    if n == 0.0 {
        return 0.0;
    }
    2.0 * PI * dir.dot(velocity) / (n * lambda)
}

/// Frequency-domain channel of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelFrame {
    /// K x N_BS, row-major; row k is the row-vector channel h[k].
    pub h: Vec<C64>,
    pub num_subcarriers: usize,
    pub num_antennas: usize,
    pub frame_index: usize,
    pub position: Vec2,
}

impl ChannelFrame {
    pub fn row(&self, k: usize) -> &[C64] {
        &self.h[k * self.num_antennas..(k + 1) * self.num_antennas]
    }

    pub fn scaled(&self, alpha: C64) -> Self {
        Self {
            h: self.h.iter().map(|&z| z * alpha).collect(),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Element positions on the array axis, centered on the origin.
pub fn element_positions(cfg: &SystemConfig) -> Vec<Vec2> {
    let n = cfg.num_bs_antennas;
    let d = cfg.antenna_spacing_m();
    let center = (n as f64 - 1.0) / 2.0;
    (0..n).map(|s| Vec2::new((s as f64 - center) * d, 0.0)).collect()
}

/// Array aperture (N_BS - 1) d.
pub fn aperture_m(cfg: &SystemConfig) -> f64 {
    (cfg.num_bs_antennas as f64 - 1.0) * cfg.antenna_spacing_m()
}

/// LoS per-element phases toward a user at `user_pos` moving with `velocity`.
///
/// Entry s is `exp(-j 2 pi dist(element_s, user) / lambda)` times the Doppler
/// term `exp(j 2 pi (r_hat . v / lambda) t)`, with `r_hat` the unit vector
/// from the user toward the array center.
pub fn los_phase_vector(user_pos: Vec2, velocity: Vec2, cfg: &SystemConfig, time_s: f64) -> Result<Vec<C64>> {
    let lambda = cfg.wavelength_m();
    let doppler = doppler_rate(user_pos, Vec2::default(), velocity, lambda) * time_s;
    element_positions(cfg)
        .into_iter()
        .map(|e| {
            let dist = e.distance(user_pos);
            if dist < MIN_ELEMENT_DISTANCE_M {
                return Err(Error::Geometry(format!(
                    "user at ({:.3e}, {:.3e}) is collocated with an array element",
                    user_pos.x, user_pos.y
                )));
            }
            Ok(C64::from_polar(1.0, -2.0 * PI * dist / lambda + doppler))
        })
        .collect()
}

/// Planar-wavefront array response `exp(j 2 pi x_s sin(psi) / lambda) / sqrt(N)`,
/// the far-field limit of [`los_phase_vector`] up to a common phase.
pub fn far_field_response(cfg: &SystemConfig, angle_rad: f64) -> Vec<C64> {
    let lambda = cfg.wavelength_m();
    let scale = 1.0 / (cfg.num_bs_antennas as f64).sqrt();
    element_positions(cfg)
        .into_iter()
        .map(|e| C64::from_polar(scale, 2.0 * PI * e.x * angle_rad.sin() / lambda))
        .collect()
}

fn spherical_steering(cfg: &SystemConfig, point: Vec2) -> Vec<C64> {
    let lambda = cfg.wavelength_m();
    element_positions(cfg)
        .into_iter()
        .map(|e| C64::from_polar(1.0, -2.0 * PI * e.distance(point) / lambda))
        .collect()
}

/// Draws the NLoS clusters around the trajectory's first position.
///
/// Cluster excess delays are exponential with mean `cluster_delay_mean_s`;
/// cluster powers follow `exp(-tau / mean)` normalized to sum to one; every
/// ray of a cluster has an independent CN(0, w_c / rays) gain and its own
/// scatterer, dropped uniformly (by area) in the configured annulus around
/// the user.
pub fn generate_clusters<R: Rng + ?Sized>(cfg: &SystemConfig, trajectory: &UserTrajectory, rng: &mut R) -> ClusterSet {
    let origin = trajectory
        .frame_positions
        .first()
        .copied()
        .unwrap_or_else(|| Vec2::from_polar(trajectory.initial_angle_rad, trajectory.initial_distance_m));
    let los_delay_s = origin.norm() / SPEED_OF_LIGHT;
    if cfg.num_clusters == 0 || cfg.rays_per_cluster == 0 {
        return ClusterSet {
            origin,
            ..ClusterSet::empty(los_delay_s)
        };
    }

    let mean = cfg.cluster_delay_mean_s;
    let excess: Vec<f64> = (0..cfg.num_clusters)
        .map(|_| {
            if mean > 0.0 {
                Exp::new(1.0 / mean).unwrap().sample(rng)
            } else {
                0.0
            }
        })
        .collect();
    let raw: Vec<f64> = excess
        .iter()
        .map(|&t| if mean > 0.0 { (-t / mean).exp() } else { 1.0 })
        .collect();
    let total: f64 = raw.iter().sum();

    let [rmin, rmax] = cfg.scatterer_radius_m;
    let velocity = trajectory.velocity_mps;
    let lambda = cfg.wavelength_m();
    let mut paths = Vec::with_capacity(cfg.num_clusters * cfg.rays_per_cluster);
    for (c, &tau) in excess.iter().enumerate() {
        let ray_power = raw[c] / total / cfg.rays_per_cluster as f64;
        let sigma = (ray_power / 2.0).sqrt();
        for _ in 0..cfg.rays_per_cluster {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            let radius = (rmin * rmin + u * (rmax * rmax - rmin * rmin)).sqrt();
            let phi = rng.random::<f64>() * 2.0 * PI;
            let scatterer = origin + Vec2::new(radius * phi.cos(), radius * phi.sin());
            paths.push(NlosPath {
                gain: C64::new(sigma * re, sigma * im),
                delay_s: los_delay_s + tau,
                excess_delay_s: tau,
                scatterer,
                doppler_phase_rate: doppler_rate(origin, scatterer, velocity, lambda),
                steering: spherical_steering(cfg, scatterer),
            });
        }
    }
    ClusterSet {
        paths,
        los_delay_s,
        origin,
    }
}

/// Rician weights (NLoS, LoS): sqrt(1/(K_R+1)) and sqrt(K_R/(K_R+1)).
pub fn rician_weights(cfg: &SystemConfig) -> (f64, f64) {
    let k = cfg.rician_k_linear();
    if k.is_infinite() {
        (0.0, 1.0)
    } else {
        ((1.0 / (k + 1.0)).sqrt(), (k / (k + 1.0)).sqrt())
    }
}

/// The weighted NLoS and LoS parts of h[k], returned separately.
pub fn frequency_domain_components(
    clusters: &ClusterSet,
    los: &[C64],
    cfg: &SystemConfig,
    k: usize,
) -> (Vec<C64>, Vec<C64>) {
    let n = los.len();
    let fk = cfg.subcarrier_freq_hz(k);
    let (w_nlos, w_los) = rician_weights(cfg);

    let mut nlos = vec![C64::new(0.0, 0.0); n];
    if w_nlos > 0.0 {
        for p in &clusters.paths {
            let coef = p.gain * C64::from_polar(w_nlos, -2.0 * PI * fk * p.delay_s);
            for (acc, &a) in nlos.iter_mut().zip(&p.steering) {
                *acc += coef * a;
            }
        }
    }
    let los_rot = C64::from_polar(w_los, -2.0 * PI * fk * clusters.los_delay_s);
    let los_part = los.iter().map(|&z| z * los_rot).collect();
    (nlos, los_part)
}

/// h[k] = sqrt(1/(K_R+1)) sum_p beta_p a_p e^{-j2 pi f_k tau_p}
///      + sqrt(K_R/(K_R+1)) los e^{-j2 pi f_k tau_1}
pub fn frequency_domain_channel(clusters: &ClusterSet, los: &[C64], cfg: &SystemConfig, k: usize) -> Vec<C64> {
    let (mut nlos, los_part) = frequency_domain_components(clusters, los, cfg, k);
    for (a, b) in nlos.iter_mut().zip(los_part) {
        *a += b;
    }
    nlos
}

/// 32.4 + 20 log10(f_c / GHz) + 20 log10(d / m)
pub fn pathloss_db(distance_m: f64, cfg: &SystemConfig) -> Result<f64> {
    if !(distance_m > 0.0) {
        return Err(Error::Geometry(format!(
            "pathloss needs a positive distance, got {distance_m}"
        )));
    }
    Ok(32.4 + 20.0 * (cfg.carrier_freq_hz / 1e9).log10() + 20.0 * distance_m.log10())
}

/// One frame per trajectory position.
///
/// Within a frame the channel is a single snapshot; geometry (LoS phases,
/// delays, scatterer path lengths, pathloss) is re-derived from the frame's
/// position, and the NLoS gains keep their draw from the first frame.
pub fn generate_frame_sequence<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    trajectory: &UserTrajectory,
    rng: &mut R,
) -> Result<Vec<ChannelFrame>> {
    let clusters = generate_clusters(cfg, trajectory, rng);
    trajectory
        .frame_positions
        .iter()
        .enumerate()
        .map(|(p, &pos)| frame_at(cfg, &clusters, trajectory.velocity_mps, pos, p))
        .collect()
}

fn frame_at(
    cfg: &SystemConfig,
    clusters: &ClusterSet,
    velocity: Vec2,
    position: Vec2,
    frame_index: usize,
) -> Result<ChannelFrame> {
    let los = los_phase_vector(position, velocity, cfg, 0.0)?;
    let local = clusters.at_position(cfg, position, velocity);
    let amp = 10f64.powf(-pathloss_db(position.norm(), cfg)? / 20.0);
    let k_count = cfg.num_subcarriers;
    let mut h = Vec::with_capacity(k_count * cfg.num_bs_antennas);
    for k in 0..k_count {
        h.extend(
            frequency_domain_channel(&local, &los, cfg, k)
                .into_iter()
                .map(|z| z * amp),
        );
    }
    Ok(ChannelFrame {
        h,
        num_subcarriers: k_count,
        num_antennas: cfg.num_bs_antennas,
        frame_index,
        position,
    })
}
