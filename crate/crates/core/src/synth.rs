//! Synthetic surgical-proxy episodes: a textured static background, a
//! deforming tissue patch and bright tool blobs whose trajectory jerk sets
//! the skill score.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{SCORE_MAX, SCORE_MIN};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Square frame side in pixels.
    pub frame_size: usize,
    pub frame_count: usize,
    pub tool_count: usize,
    /// Wavelength scale of the background texture, in pixels.
    pub texture_scale: f64,
    /// Tissue patch radius as a fraction of the frame size.
    pub tissue_radius: f64,
    /// Maximum relative amplitude of the tissue deformation; each episode
    /// draws its own amplitude uniformly below this.
    pub tissue_deform: f64,
    /// Maximum standard deviation, in pixels, of an independent per-frame
    /// shift of the tissue patch; each episode draws its own level uniformly
    /// below this. It does not enter the score.
    pub tissue_tremor: f64,
    /// Gaussian radius of a tool blob, in pixels.
    pub tool_radius: f64,
    /// Standard deviation of the per-frame positional noise, in pixels.
    pub trajectory_noise: f64,
    /// Mean squared jerk mapped to the top score.
    pub jerk_floor: f64,
    /// Mean squared jerk mapped to the bottom score.
    pub jerk_ceil: f64,
    /// Noise of the most and least skilled user in a dataset.
    pub noise_min: f64,
    pub noise_max: f64,
    /// Log-normal spread of the per-trial noise variance.
    pub trial_jitter: f64,
    pub n_users: usize,
    pub trials_per_user: usize,
    pub task_id: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frame_size: 64,
            frame_count: 128,
            tool_count: 2,
            texture_scale: 8.0,
            tissue_radius: 0.22,
            tissue_deform: 0.5,
            tissue_tremor: 0.0,
            tool_radius: 2.5,
            trajectory_noise: 0.0,
            jerk_floor: 0.05,
            jerk_ceil: 80.0,
            noise_min: 0.3,
            noise_max: 1.5,
            trial_jitter: 0.25,
            n_users: 4,
            trials_per_user: 5,
            task_id: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::invalid(format!("synth config: {msg}")));
        if self.frame_size < 16 || self.frame_count < 4 {
            return fail("frames must be at least 16x16 and 4 long");
        }
        if !(self.tool_radius > 0.0 && self.texture_scale > 0.0) {
            return fail("tool_radius and texture_scale must be positive");
        }
        if !(self.tissue_radius > 0.0 && self.tissue_radius < 0.5 && (0.0..1.0).contains(&self.tissue_deform)) {
            return fail("tissue_radius must be in (0, 0.5) and tissue_deform in [0, 1)");
        }
        if 4.0 * self.tool_radius >= self.frame_size as f64 / 2.0 {
            return fail("tool_radius too large for the frame");
        }
        if !(self.jerk_ceil > self.jerk_floor && self.jerk_floor >= 0.0) {
            return fail("need 0 <= jerk_floor < jerk_ceil");
        }
        if !(self.trajectory_noise >= 0.0 && self.noise_min >= 0.0 && self.noise_max >= self.noise_min) {
            return fail("noise levels must satisfy 0 <= noise_min <= noise_max");
        }
        if !(self.tissue_tremor >= 0.0 && self.tissue_tremor.is_finite()) {
            return fail("tissue_tremor must be >= 0");
        }
        if self.n_users < 2 || self.trials_per_user < 2 {
            return fail("need at least 2 users and 2 trials per user");
        }
        if !(self.trial_jitter >= 0.0 && self.trial_jitter.is_finite()) {
            return fail("trial_jitter must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `frame_count x height x width` grayscale, frame-major.
    pub frames: Vec<u8>,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub score: f64,
    pub user_id: u32,
    pub supertrial_id: u32,
    pub task_id: u32,
    /// Per frame, one `(u, v)` = (column, row) pixel position per tool.
    pub tool_tracks: Vec<Vec<(f64, f64)>>,
}

impl Episode {
    pub fn frame(&self, f: usize) -> &[u8] {
        let plane = self.width * self.height;
        &self.frames[f * plane..(f + 1) * plane]
    }
}

/// `mean_f mean_tools |d^3 p / df^3|^2` by third finite differences.
pub fn mean_squared_jerk(tracks: &[Vec<(f64, f64)>]) -> f64 {
    if tracks.len() < 4 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for w in tracks.windows(4) {
        for tool in 0..w[0].len() {
            let d = |axis: fn(&(f64, f64)) -> f64| {
                axis(&w[3][tool]) - 3.0 * axis(&w[2][tool]) + 3.0 * axis(&w[1][tool]) - axis(&w[0][tool])
            };
            let (du, dv) = (d(|p| p.0), d(|p| p.1));
            sum += du * du + dv * dv;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `clamp(30 - 24 (msj - floor) / (ceil - floor), 6, 30)`: strictly
/// decreasing between the two jerk constants.
pub fn score_from_jerk(msj: f64, cfg: &SynthConfig) -> f64 {
    let span = SCORE_MAX - SCORE_MIN;
    let s = SCORE_MAX - span * (msj - cfg.jerk_floor) / (cfg.jerk_ceil - cfg.jerk_floor);
    s.clamp(SCORE_MIN, SCORE_MAX)
}

pub fn score_from_tracks(tracks: &[Vec<(f64, f64)>], cfg: &SynthConfig) -> f64 {
    score_from_jerk(mean_squared_jerk(tracks), cfg)
}

/// Everything needed to render any frame of one episode.
#[derive(Clone, Debug)]
pub struct Scene {
    size: usize,
    background: Vec<f64>,
    tissue_center: (f64, f64),
    tissue_radius: f64,
    tissue_amp: f64,
    tissue_omega: f64,
    tissue_phase: f64,
    tissue_shift: Vec<(f64, f64)>,
    tool_radius: f64,
    pub tracks: Vec<Vec<(f64, f64)>>,
}

const BACKGROUND_LEVEL: f64 = 0.3;
const TISSUE_LEVEL: f64 = 0.6;

impl Scene {
    pub fn new(cfg: &SynthConfig, seed: u64, noise: f64) -> Result<Self> {
        cfg.validate()?;
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::invalid(format!("trajectory noise must be >= 0, got {noise}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = cfg.frame_size;
        let s = size as f64;

        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                let angle = rng.random_range(0.0..TAU);
                let freq = TAU / (cfg.texture_scale * rng.random_range(0.7..1.5));
                let amp = rng.random_range(0.02..0.05);
                (freq * libm::cos(angle), freq * libm::sin(angle), rng.random_range(0.0..TAU), amp)
            })
            .collect();
        let background = (0..size * size)
            .map(|idx| {
                let (y, x) = ((idx / size) as f64, (idx % size) as f64);
                BACKGROUND_LEVEL + waves.iter().map(|&(kx, ky, ph, a)| a * libm::sin(kx * x + ky * y + ph)).sum::<f64>()
            })
            .collect();

        let tissue_radius = cfg.tissue_radius * s;
        let tissue_center = (
            rng.random_range(0.4 * s..0.6 * s),
            rng.random_range(0.4 * s..0.6 * s),
        );
        let tissue_amp = rng.random_range(0.0..=cfg.tissue_deform);
        let tissue_omega = rng.random_range(0.2..0.6);
        let tissue_phase = rng.random_range(0.0..TAU);

        let margin = 2.0 * cfg.tool_radius;
        let lo = margin;
        let hi = s - 1.0 - margin;
        let lane = (hi - lo) / cfg.tool_count.max(1) as f64;
        let paths: Vec<_> = (0..cfg.tool_count)
            .map(|k| {
                let cx = lo + lane * (k as f64 + 0.5);
                let cy = rng.random_range(0.35 * s..0.65 * s);
                let rx = rng.random_range(0.15..0.35) * lane;
                let ry = rng.random_range(0.1..0.25) * s;
                let omega = rng.random_range(0.05..0.12) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                let phase = rng.random_range(0.0..TAU);
                (cx, cy, rx, ry, omega, phase)
            })
            .collect();
        let tracks = (0..cfg.frame_count)
            .map(|f| {
                paths
                    .iter()
                    .map(|&(cx, cy, rx, ry, omega, phase)| {
                        let a = omega * f as f64 + phase;
                        let nu: f64 = StandardNormal.sample(&mut rng);
                        let nv: f64 = StandardNormal.sample(&mut rng);
                        let u = cx + rx * libm::cos(a) + noise * nu;
                        let v = cy + ry * libm::sin(a) + noise * nv;
                        (u.clamp(lo, hi), v.clamp(lo, hi))
                    })
                    .collect()
            })
            .collect();
        let tremor = rng.random_range(0.0..=cfg.tissue_tremor);
        let tissue_shift = (0..cfg.frame_count)
            .map(|_| {
                let du: f64 = StandardNormal.sample(&mut rng);
                let dv: f64 = StandardNormal.sample(&mut rng);
                (tremor * du, tremor * dv)
            })
            .collect();
        Ok(Scene {
            size,
            background,
            tissue_center,
            tissue_radius,
            tissue_amp,
            tissue_omega,
            tissue_phase,
            tissue_shift,
            tool_radius: cfg.tool_radius,
            tracks,
        })
    }

    /// Intensities in `[0, 1]` of frame `f`, optionally without the tools.
    pub fn render(&self, f: usize, with_tools: bool) -> Vec<f64> {
        let size = self.size;
        let mut out = vec![0.0; size * size];
        let (tx, ty) = self.tissue_center;
        let (tx, ty) = (tx + self.tissue_shift[f].0, ty + self.tissue_shift[f].1);
        let wobble = self.tissue_omega * f as f64 + self.tissue_phase;
        let denom = 2.0 * self.tool_radius * self.tool_radius;
        for (idx, px) in out.iter_mut().enumerate() {
            let (y, x) = ((idx / size) as f64, (idx % size) as f64);
            let bg = self.background[idx];
            let (dx, dy) = (x - tx, y - ty);
            let theta = libm::atan2(dy, dx);
            let edge = self.tissue_radius * (1.0 + self.tissue_amp * libm::sin(2.0 * theta + wobble));
            let dist = libm::sqrt(dx * dx + dy * dy);
            // soft edge over about two pixels
            let inside = (0.5 - (dist - edge) / 2.0).clamp(0.0, 1.0);
            let mut v = bg + inside * (TISSUE_LEVEL - BACKGROUND_LEVEL + 0.5 * (bg - BACKGROUND_LEVEL));
            if with_tools {
                let blob = self.tracks[f]
                    .iter()
                    .map(|&(u, w)| libm::exp(-((x - u) * (x - u) + (y - w) * (y - w)) / denom))
                    .fold(0.0, f64::max);
                v += blob * (1.0 - v);
            }
            *px = v.clamp(0.0, 1.0);
        }
        out
    }
}

fn quantize(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

fn build_episode(cfg: &SynthConfig, seed: u64, noise: f64, user_id: u32, supertrial_id: u32) -> Result<Episode> {
    let scene = Scene::new(cfg, seed, noise)?;
    let frames = (0..cfg.frame_count)
        .flat_map(|f| scene.render(f, true).into_iter().map(quantize))
        .collect();
    let score = score_from_tracks(&scene.tracks, cfg);
    Ok(Episode {
        frames,
        frame_count: cfg.frame_count,
        width: cfg.frame_size,
        height: cfg.frame_size,
        score,
        user_id,
        supertrial_id,
        task_id: cfg.task_id,
        tool_tracks: scene.tracks,
    })
}

/// One episode with `cfg.trajectory_noise`; identity fields are zero.
pub fn generate_episode(cfg: &SynthConfig, seed: u64) -> Result<Episode> {
    build_episode(cfg, seed, cfg.trajectory_noise, 0, 0)
}

/// Noise level of `user`, before per-trial jitter: the noise variance is
/// interpolated linearly from `noise_min^2` to `noise_max^2`.
pub fn user_noise(cfg: &SynthConfig, user: usize, n_users: usize) -> f64 {
    let frac = if n_users > 1 { user as f64 / (n_users - 1) as f64 } else { 0.0 };
    let (a, b) = (cfg.noise_min * cfg.noise_min, cfg.noise_max * cfg.noise_max);
    libm::sqrt(a + (b - a) * frac)
}

/// `n_users x trials_per_user` episodes in user-major order. User `u` trial
/// `r` has `user_id = u`, `supertrial_id = r`; higher user ids are noisier.
pub fn generate_dataset(cfg: &SynthConfig, n_users: usize, trials_per_user: usize) -> Result<Vec<Episode>> {
    if n_users < 2 || trials_per_user < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 users and 2 trials per user, got {n_users} x {trials_per_user}"
        )));
    }
    cfg.validate()?;
    let mut out = Vec::with_capacity(n_users * trials_per_user);
    for u in 0..n_users {
        for r in 0..trials_per_user {
            let seed = derive_seed(cfg.seed, &[u as u64, r as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX]));
            let jitter: f64 = StandardNormal.sample(&mut rng);
            let noise = user_noise(cfg, u, n_users) * libm::exp(0.5 * cfg.trial_jitter * jitter);
            out.push(build_episode(cfg, seed, noise, u as u32, r as u32)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            frame_count: 24,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let cfg = small();
        assert_eq!(generate_episode(&cfg, 3).unwrap(), generate_episode(&cfg, 3).unwrap());
        assert_ne!(generate_episode(&cfg, 3).unwrap().frames, generate_episode(&cfg, 4).unwrap().frames);
    }

    #[test]
    fn zero_noise_scores_thirty() {
        let ep = generate_episode(&small(), 1).unwrap();
        assert_eq!(ep.score, 30.0);
    }

    #[test]
    fn midpoint_jerk_scores_eighteen() {
        let cfg = SynthConfig {
            trajectory_noise: 0.8,
            ..small()
        };
        let msj = mean_squared_jerk(&generate_episode(&cfg, 5).unwrap().tool_tracks);
        let centered = SynthConfig {
            jerk_floor: msj - 1.0,
            jerk_ceil: msj + 1.0,
            ..cfg
        };
        let ep = generate_episode(&centered, 5).unwrap();
        assert!((ep.score - 18.0).abs() < 1e-9, "{}", ep.score);
    }

    #[test]
    fn jerk_of_a_cubic_is_constant() {
        // p(f) = f^3 along u: third difference 6
        let tracks: Vec<Vec<(f64, f64)>> = (0..6).map(|f| vec![((f * f * f) as f64, 1.0)]).collect();
        assert_eq!(mean_squared_jerk(&tracks), 36.0);
    }

    #[test]
    fn score_mapping_is_decreasing_and_clamped() {
        let cfg = SynthConfig::default();
        assert_eq!(score_from_jerk(0.0, &cfg), 30.0);
        assert_eq!(score_from_jerk(1e6, &cfg), 6.0);
        let mut last = f64::INFINITY;
        for i in 0..50 {
            let s = score_from_jerk(cfg.jerk_floor + i as f64 * (cfg.jerk_ceil - cfg.jerk_floor) / 49.0, &cfg);
            assert!(s < last);
            last = s;
        }
    }

    #[test]
    fn cartesian_structure() {
        let eps = generate_dataset(&small(), 4, 5).unwrap();
        assert_eq!(eps.len(), 20);
        for r in 0..5 {
            assert_eq!(eps.iter().filter(|e| e.supertrial_id == r).count(), 4);
        }
        assert!(generate_dataset(&small(), 1, 5).is_err());
    }

    #[test]
    fn users_are_rankable() {
        let eps = generate_dataset(&small(), 4, 5).unwrap();
        let means: Vec<f64> = (0..4)
            .map(|u| eps.iter().filter(|e| e.user_id == u).map(|e| e.score).sum::<f64>() / 5.0)
            .collect();
        assert!(means.windows(2).all(|w| w[0] > w[1]), "{means:?}");
    }

    #[test]
    fn tracks_stay_in_bounds() {
        let cfg = SynthConfig {
            trajectory_noise: 20.0,
            ..small()
        };
        let ep = generate_episode(&cfg, 2).unwrap();
        let s = cfg.frame_size as f64;
        assert!(ep.tool_tracks.iter().flatten().all(|&(u, v)| u >= 0.0 && v >= 0.0 && u < s && v < s));
        assert_eq!(ep.frames.len(), 24 * 64 * 64);
    }

    #[test]
    fn tremor_moves_only_the_tissue() {
        let calm = small();
        let shaky = SynthConfig {
            tissue_tremor: 2.0,
            ..small()
        };
        let a = generate_episode(&calm, 5).unwrap();
        let b = generate_episode(&shaky, 5).unwrap();
        assert_eq!(a.tool_tracks, b.tool_tracks);
        assert_eq!(a.score, b.score);
        assert_ne!(a.frames, b.frames);
    }

    #[test]
    fn blob_peak_sits_on_the_track() {
        let cfg = SynthConfig {
            trajectory_noise: 1.0,
            ..small()
        };
        let scene = Scene::new(&cfg, 8, 1.0).unwrap();
        let size = cfg.frame_size;
        for f in 0..cfg.frame_count {
            let with = scene.render(f, true);
            let without = scene.render(f, false);
            for &(u, v) in &scene.tracks[f] {
                // strongest tool contribution inside this tool's neighborhood
                let mut best = (0.0, 0, 0);
                for i in 0..size {
                    for j in 0..size {
                        if (j as f64 - u).abs() > 4.0 || (i as f64 - v).abs() > 4.0 {
                            continue;
                        }
                        let idx = i * size + j;
                        let blob = (with[idx] - without[idx]) / (1.0 - without[idx]);
                        if blob > best.0 {
                            best = (blob, i, j);
                        }
                    }
                }
                assert!((best.2 as f64 - u).abs() <= 0.5 + 1e-12 && (best.1 as f64 - v).abs() <= 0.5 + 1e-12);
            }
        }
    }
}
