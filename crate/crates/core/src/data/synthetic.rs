//! Procedural blob scenes with known landmark identities and a pose knob.
//!
//! A scene is a ring of coloured discs on a textured grey background. The
//! pose parameter (degrees, in `[-90, 90]`) moves every landmark sideways by
//! `sin(pose) * (shift + shear * (y0 - cy))` and hides the far-side
//! landmarks once `|pose|` exceeds the occlusion threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UldError};
use crate::image::{quantize, Image};

use super::manifest::{DatasetManifest, ManifestEntry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deformation {
    pub shift: f64,
    pub shear: f64,
    pub occlusion_deg: f64,
}

impl Deformation {
    /// Horizontal displacement of a template point at height `y0`.
    pub fn displacement(&self, pose_deg: f64, y0: f64, cy: f64) -> f64 {
        pose_deg.to_radians().sin() * (self.shift + self.shear * (y0 - cy))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    /// Canonical (pose 0, no jitter) landmark positions.
    pub template: Vec<[f64; 2]>,
    pub pose: f64,
    pub offset: [f64; 2],
    /// Identity radius: pixels within this distance of a visible landmark
    /// belong to it.
    pub radius: f64,
    pub deformation: Deformation,
    pub texture: f64,
    pub appearance_seed: u64,
}

/// Distinct identity colours: cube vertices first, then the 3-level grid.
pub fn palette(k: usize) -> Result<Vec<[f64; 3]>> {
    let mut colours: Vec<[f64; 3]> = vec![
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 1.0],
    ];
    for r in [0.0, 0.5, 1.0] {
        for g in [0.0, 0.5, 1.0] {
            for b in [0.0, 0.5, 1.0] {
                let c = [r, g, b];
                let grey = c == [0.5, 0.5, 0.5];
                if !grey && c != [0.0, 0.0, 0.0] && !colours.contains(&c) {
                    colours.push(c);
                }
            }
        }
    }
    if k > colours.len() {
        return Err(UldError::InvalidArgument(format!(
            "synthetic scenes support at most {} landmark identities, got {k}",
            colours.len()
        )));
    }
    colours.truncate(k);
    Ok(colours)
}

pub const BACKGROUND_GREY: f64 = 0.5;

impl SyntheticScene {
    pub fn center(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    pub fn num_landmarks(&self) -> usize {
        self.template.len()
    }

    pub fn landmarks(&self) -> Vec<[f64; 2]> {
        let (_, cy) = self.center();
        self.template
            .iter()
            .map(|&[x0, y0]| {
                let dx = self.deformation.displacement(self.pose, y0, cy);
                [x0 + dx + self.offset[0], y0 + self.offset[1]]
            })
            .collect()
    }

    pub fn visibility(&self) -> Vec<bool> {
        let (cx, _) = self.center();
        self.template
            .iter()
            .map(|&[x0, _]| {
                if self.pose.abs() <= self.deformation.occlusion_deg {
                    return true;
                }
                // far side: opposite to the direction of the turn
                (x0 - cx) * self.pose >= 0.0
            })
            .collect()
    }

    /// Identity of pixel `(x, y)`: nearest visible landmark within `radius`.
    pub fn identity_at(&self, x: usize, y: usize) -> Option<usize> {
        self.identity_map_with(&self.landmarks(), &self.visibility(), x, y)
    }

    fn identity_map_with(&self, pts: &[[f64; 2]], vis: &[bool], x: usize, y: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, (p, &v)) in pts.iter().zip(vis).enumerate() {
            if !v {
                continue;
            }
            let d2 = (x as f64 - p[0]).powi(2) + (y as f64 - p[1]).powi(2);
            if d2 <= self.radius * self.radius && best.is_none_or(|(_, b)| d2 < b) {
                best = Some((k, d2));
            }
        }
        best.map(|(k, _)| k)
    }

    /// Row-major identity labels for every pixel.
    pub fn identity_map(&self) -> Vec<Option<usize>> {
        let pts = self.landmarks();
        let vis = self.visibility();
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.identity_map_with(&pts, &vis, x, y));
            }
        }
        out
    }

    pub fn render(&self) -> Result<Image> {
        let colours = palette(self.num_landmarks())?;
        let ids = self.identity_map();
        let mut rng = ChaCha8Rng::seed_from_u64(self.appearance_seed);
        let mut img = Image::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let id = ids[y * self.width + x];
                for c in 0..3 {
                    let noise = if self.texture > 0.0 {
                        rng.random_range(-self.texture..self.texture)
                    } else {
                        0.0
                    };
                    let base = match id {
                        Some(k) => colours[k][c],
                        None => BACKGROUND_GREY,
                    };
                    img.data[[y, x, c]] = quantize(base + noise);
                }
            }
        }
        Ok(img)
    }

    /// Bounding box of visible landmark discs, clamped to the canvas.
    pub fn support_box(&self) -> [f64; 4] {
        let pts = self.landmarks();
        let vis = self.visibility();
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for (p, &v) in pts.iter().zip(&vis) {
            if !v {
                continue;
            }
            b[0] = b[0].min(p[0] - self.radius);
            b[1] = b[1].min(p[1] - self.radius);
            b[2] = b[2].max(p[0] + self.radius);
            b[3] = b[3].max(p[1] + self.radius);
        }
        [
            b[0].max(0.0),
            b[1].max(0.0),
            b[2].min(self.width as f64 - 1.0),
            b[3].min(self.height as f64 - 1.0),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoseDistribution {
    Fixed { pose: f64 },
    Uniform { min: f64, max: f64 },
    /// Alternates between a near-frontal mode `|pose| < frontal_max` and a
    /// profile mode `pose in [profile_min, profile_max]` (mirrored to the
    /// negative side on every other profile image when `symmetric`).
    TwoModes {
        frontal_max: f64,
        profile_min: f64,
        profile_max: f64,
        symmetric: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_images: usize,
    /// The last `n_test` images are tagged with the `test` split.
    pub n_test: usize,
    pub k_true: usize,
    pub width: usize,
    pub height: usize,
    pub radius: f64,
    pub ring_scale: f64,
    pub jitter: f64,
    pub texture: f64,
    pub deformation: Deformation,
    pub pose: PoseDistribution,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_images: 80,
            n_test: 20,
            k_true: 6,
            width: 32,
            height: 32,
            radius: 2.0,
            ring_scale: 0.2,
            jitter: 0.5,
            texture: 0.04,
            deformation: Deformation {
                shift: 5.5,
                shear: 0.1,
                occlusion_deg: 60.0,
            },
            pose: PoseDistribution::TwoModes {
                frontal_max: 30.0,
                profile_min: 45.0,
                profile_max: 90.0,
                symmetric: false,
            },
            seed: 7,
        }
    }
}

/// Landmarks evenly spaced on an ellipse around the canvas centre.
pub fn ring_template(k: usize, width: usize, height: usize, scale: f64) -> Vec<[f64; 2]> {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let (rx, ry) = (scale * width as f64, scale * height as f64);
    (0..k)
        .map(|i| {
            // quarter-step phase keeps landmarks off the vertical axis
            let a = std::f64::consts::TAU * (i as f64 + 0.25) / k as f64;
            [cx + rx * a.cos(), cy + ry * a.sin()]
        })
        .collect()
}

fn sample_pose(dist: &PoseDistribution, index: usize, rng: &mut ChaCha8Rng) -> f64 {
    match *dist {
        PoseDistribution::Fixed { pose } => pose,
        PoseDistribution::Uniform { min, max } => {
            if max > min {
                rng.random_range(min..max)
            } else {
                min
            }
        }
        PoseDistribution::TwoModes {
            frontal_max,
            profile_min,
            profile_max,
            symmetric,
        } => {
            let u: f64 = rng.random_range(0.0..1.0);
            if index.is_multiple_of(2) {
                -frontal_max + u * 2.0 * frontal_max * 0.999
            } else {
                let p = profile_min + u * (profile_max - profile_min);
                if symmetric && (index / 2) % 2 == 1 {
                    -p
                } else {
                    p
                }
            }
        }
    }
}

/// A synthetic sample kept in memory alongside its manifest entry.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub scene: SyntheticScene,
    pub image: Image,
}

/// Renders `config.n_images` scenes; deterministic per `config.seed`.
pub fn generate_synthetic_dataset(
    config: &SyntheticConfig,
) -> Result<(Vec<SyntheticSample>, DatasetManifest)> {
    if config.n_images == 0 {
        return Err(UldError::InvalidArgument("n_images must be >= 1".into()));
    }
    if config.n_test > config.n_images {
        return Err(UldError::InvalidArgument("n_test exceeds n_images".into()));
    }
    palette(config.k_true)?;
    let template = ring_template(config.k_true, config.width, config.height, config.ring_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::with_capacity(config.n_images);
    let mut entries = Vec::with_capacity(config.n_images);
    for i in 0..config.n_images {
        let pose = sample_pose(&config.pose, i, &mut rng);
        let offset = if config.jitter > 0.0 {
            [
                rng.random_range(-config.jitter..config.jitter),
                rng.random_range(-config.jitter..config.jitter),
            ]
        } else {
            [0.0, 0.0]
        };
        let scene = SyntheticScene {
            width: config.width,
            height: config.height,
            template: template.clone(),
            pose,
            offset,
            radius: config.radius,
            deformation: config.deformation,
            texture: config.texture,
            appearance_seed: rng.random(),
        };
        let image = scene.render()?;
        let landmarks: Vec<f64> = scene.landmarks().iter().flat_map(|p| [p[0], p[1]]).collect();
        let split = if i + config.n_test >= config.n_images {
            "test"
        } else {
            "train"
        };
        let b = scene.support_box();
        entries.push(ManifestEntry {
            id: format!("synth_{i:05}"),
            path: format!("images/synth_{i:05}.png"),
            landmarks: Some(landmarks),
            visible: Some(scene.visibility()),
            yaw: Some(pose),
            roi: Some([b[0], b[1], b[2], b[3]]),
            d_iod: None,
            split: Some(split.to_string()),
            scene: Some(scene.clone()),
        });
        samples.push(SyntheticSample { scene, image });
    }
    let manifest = DatasetManifest {
        format: "synthetic".to_string(),
        landmark_count: Some(config.k_true),
        entries,
    };
    Ok((samples, manifest))
}
