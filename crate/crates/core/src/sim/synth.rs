//! Feature frames synthesized from a scene and a ground-truth pose.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::features::Keypoint;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::server::SCALE_FACTOR;
use crate::sim::scene::Scene;

/// How keypoint octaves are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OctaveModel {
    /// Every keypoint at octave 0.
    Zero,
    /// Texture seen closer shows up at coarser pyramid levels:
    /// `round(log_1.2(ref_depth / depth))` clamped to 0..=7.
    DepthScaled { ref_depth: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub intrinsics: CameraIntrinsics,
    pub max_keypoints: usize,
    /// Pixel noise at quality 100.
    pub noise_base_px: f64,
    /// Extra pixel noise at quality 10.
    pub noise_slope_px: f64,
    /// Per-bit flip probability at quality 10.
    pub bit_flip_max: f64,
    pub octave: OctaveModel,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::vga(),
            max_keypoints: 1000,
            noise_base_px: 0.3,
            noise_slope_px: 0.7,
            bit_flip_max: 0.002,
            octave: OctaveModel::Zero,
        }
    }
}

impl SynthConfig {
    fn degradation(quality: u8) -> f64 {
        (100.0 - quality as f64) / 90.0
    }

    pub fn noise_px(&self, quality: u8) -> f64 {
        self.noise_base_px + self.noise_slope_px * Self::degradation(quality)
    }

    pub fn bit_flip_prob(&self, quality: u8) -> f64 {
        self.bit_flip_max * Self::degradation(quality)
    }

    fn octave(&self, depth: f64) -> u8 {
        match self.octave {
            OctaveModel::Zero => 0,
            OctaveModel::DepthScaled { ref_depth } => {
                ((ref_depth / depth).ln() / SCALE_FACTOR.ln()).round().clamp(0.0, 7.0) as u8
            }
        }
    }
}

/// Keypoints for the landmarks visible from `pose`, nearest first, with
/// quality-dependent pixel noise and descriptor bit flips.
pub fn synthesize_frame(scene: &Scene, pose: &Pose, cfg: &SynthConfig, quality: u8, rng: &mut impl Rng) -> Vec<Keypoint> {
    let sigma = cfg.noise_px(quality);
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let flip = cfg.bit_flip_prob(quality);
    scene
        .visible(&cfg.intrinsics, pose)
        .into_iter()
        .take(cfg.max_keypoints)
        .map(|s| {
            let mut descriptor = scene.landmarks[s.landmark].descriptor;
            if flip > 0.0 {
                for byte in descriptor.0.iter_mut() {
                    for bit in 0..8 {
                        if rng.gen_bool(flip) {
                            *byte ^= 1 << bit;
                        }
                    }
                }
            }
            let (du, dv) = if sigma > 0.0 { (noise.sample(rng), noise.sample(rng)) } else { (0.0, 0.0) };
            Keypoint { u: s.pixel.x + du, v: s.pixel.y + dv, angle: 0.0, octave: cfg.octave(s.depth), descriptor }
        })
        .collect()
}
