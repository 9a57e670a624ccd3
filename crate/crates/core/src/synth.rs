//! Procedural layered test scenes with an exact analytic renderer.
//!
//! Scenes are stacks of fronto-parallel textured rectangles in world space
//! (world = the canonical source-camera frame) plus a full-plane background.
//! Ground truth is produced by casting a ray through each pixel center,
//! intersecting the layer planes analytically, and over-compositing — no
//! rasterization, no shared code with the MPI renderer beyond the image and
//! camera types. Textures are evaluated analytically at the intersection
//! points, so ground truth is resolution independent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::{CameraIntrinsics, RigidPose};
use crate::image::ImageBuffer;
use crate::losses::DepthSampleSet;
use crate::mpi::DepthRange;
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("unknown scene preset '{0}' (expected three_layer, skewed_depth or deep_range)")]
    UnknownPreset(String),
    #[error("camera at world z = {camera_z} is not in front of the nearest layer at z = {nearest}")]
    CameraInsideScene { camera_z: f64, nearest: f64 },
    #[error("layer depths must be strictly increasing and in front of the background")]
    BadLayerOrder,
    #[error("layer opacity must lie in (0, 1], got {0}")]
    BadOpacity(f64),
}

/// One additive sine term of a noise texture.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseWave {
    pub kx: f64,
    pub ky: f64,
    pub phase: f64,
    pub amp: [f64; 3],
}

/// Analytic texture evaluated at world (x, y) on a layer plane.
#[derive(Debug, Clone, PartialEq)]
pub enum TextureSpec {
    /// Two-color checkerboard with `cell`-sized squares and smoothstep
    /// transitions of half-width `blend` (scene units; 0 = hard edges).
    Checker {
        cell: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
        blend: f64,
    },
    /// Linear blend from `color_a` at `origin` to `color_b` at
    /// `origin + extent·direction`.
    Gradient {
        color_a: [f64; 3],
        color_b: [f64; 3],
        direction: (f64, f64),
        origin: (f64, f64),
        extent: f64,
    },
    /// Base color plus a seeded mixture of plane waves.
    Noise { base: [f64; 3], waves: Vec<NoiseWave> },
}

impl TextureSpec {
    /// Seeded noise with `n_waves` terms around angular frequency `freq`
    /// (radians per scene unit) and per-channel amplitudes up to `amp`.
    pub fn noise(base: [f64; 3], freq: f64, amp: f64, n_waves: usize, seed: u64) -> TextureSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..n_waves)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let k = freq * rng.random_range(0.6..1.4);
                NoiseWave {
                    kx: k * angle.cos(),
                    ky: k * angle.sin(),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amp: [
                        amp * rng.random_range(0.4..1.0),
                        amp * rng.random_range(0.4..1.0),
                        amp * rng.random_range(0.4..1.0),
                    ],
                }
            })
            .collect();
        TextureSpec::Noise { base, waves }
    }

    pub fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        let mut out = match self {
            TextureSpec::Checker {
                cell,
                color_a,
                color_b,
                blend,
            } => {
                let sx = smooth_square(x / cell, blend / cell);
                let sy = smooth_square(y / cell, blend / cell);
                let m = sx * sy + (1.0 - sx) * (1.0 - sy);
                blend3(color_b, color_a, m)
            }
            TextureSpec::Gradient {
                color_a,
                color_b,
                direction,
                origin,
                extent,
            } => {
                let t = ((x - origin.0) * direction.0 + (y - origin.1) * direction.1) / extent;
                blend3(color_a, color_b, t.clamp(0.0, 1.0))
            }
            TextureSpec::Noise { base, waves } => {
                let mut c = *base;
                for w in waves {
                    let s = (w.kx * x + w.ky * y + w.phase).sin();
                    c[0] += w.amp[0] * s;
                    c[1] += w.amp[1] * s;
                    c[2] += w.amp[2] * s;
                }
                c
            }
        };
        for v in out.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }
}

/// Period-2 square wave in [0, 1] with smoothstep transitions of the given
/// half-width (cell units) centered on integer boundaries.
fn smooth_square(p: f64, half_width: f64) -> f64 {
    let fr = p.rem_euclid(2.0);
    let high = fr < 1.0;
    let dist = [fr, (fr - 1.0).abs(), 2.0 - fr]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if half_width <= 0.0 {
        return if high { 1.0 } else { 0.0 };
    }
    let t = (dist / half_width).min(1.0);
    let s = t * t * (3.0 - 2.0 * t);
    if high {
        0.5 + 0.5 * s
    } else {
        0.5 - 0.5 * s
    }
}

fn blend3(a: &[f64; 3], b: &[f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Axis-aligned rectangle in a layer's z-plane, scene units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x0 <= x && x <= self.x1 && self.y0 <= y && y <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub depth: f64,
    pub rect: Rect,
    pub texture: TextureSpec,
    pub opacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub depth: f64,
    pub texture: TextureSpec,
}

/// Ordered (nearest-first) stack of textured rectangles plus a background,
/// with the depth range a fit of this scene should use.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredScene {
    pub layers: Vec<Layer>,
    pub background: Background,
    pub depth_range: DepthRange,
}

impl LayeredScene {
    pub fn new(
        layers: Vec<Layer>,
        background: Background,
        depth_range: DepthRange,
    ) -> Result<Self, SynthError> {
        let mut prev = 0.0;
        for l in &layers {
            if l.depth <= prev {
                return Err(SynthError::BadLayerOrder);
            }
            if !(l.opacity > 0.0 && l.opacity <= 1.0) {
                return Err(SynthError::BadOpacity(l.opacity));
            }
            prev = l.depth;
        }
        if background.depth <= prev {
            return Err(SynthError::BadLayerOrder);
        }
        Ok(Self {
            layers,
            background,
            depth_range,
        })
    }
}

/// Camera setup for rendering a scene from several poses (world-to-camera).
#[derive(Debug, Clone)]
pub struct SceneRenderSpec {
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub poses: Vec<RigidPose>,
}

impl SceneRenderSpec {
    pub fn new(
        intrinsics: CameraIntrinsics,
        width: usize,
        height: usize,
        poses: Vec<RigidPose>,
    ) -> Self {
        assert!(poses.len() >= 2, "need a source and at least one target pose");
        Self {
            intrinsics,
            width,
            height,
            poses,
        }
    }
}

/// Deterministic scene for a named preset. `skewed_depth` concentrates at
/// least 80% of visible pixels in the nearest 20% of the depth range.
pub fn generate_scene(preset: &str, seed: u64) -> Result<LayeredScene, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut jitter = |scale: f64| rng.random_range(-scale..scale);
    let wave_seed = |k: u64| seed.wrapping_mul(0x100_0000_01b3).wrapping_add(k);

    match preset {
        "three_layer" => {
            let range = DepthRange::new(1.0, 6.0).unwrap();
            let layers = vec![
                Layer {
                    depth: 1.6,
                    rect: Rect {
                        x0: -0.78 + jitter(0.02),
                        y0: -0.58 + jitter(0.02),
                        x1: -0.06 + jitter(0.02),
                        y1: 0.42 + jitter(0.02),
                    },
                    texture: TextureSpec::noise([0.72, 0.45, 0.34], 26.0, 0.16, 4, wave_seed(1)),
                    opacity: 1.0,
                },
                Layer {
                    depth: 2.6,
                    rect: Rect {
                        x0: -0.10 + jitter(0.03),
                        y0: -1.00 + jitter(0.03),
                        x1: 1.15 + jitter(0.03),
                        y1: 0.25 + jitter(0.03),
                    },
                    texture: TextureSpec::Checker {
                        cell: 0.45,
                        color_a: [0.28, 0.55, 0.78],
                        color_b: [0.52, 0.74, 0.92],
                        blend: 0.07,
                    },
                    opacity: 1.0,
                },
                Layer {
                    depth: 4.0,
                    rect: Rect {
                        x0: -1.70 + jitter(0.04),
                        y0: -0.40 + jitter(0.04),
                        x1: 0.50 + jitter(0.04),
                        y1: 1.80 + jitter(0.04),
                    },
                    texture: TextureSpec::noise([0.36, 0.63, 0.40], 10.0, 0.17, 4, wave_seed(2)),
                    opacity: 1.0,
                },
            ];
            let background = Background {
                depth: 5.5,
                texture: TextureSpec::noise([0.52, 0.55, 0.68], 5.8, 0.14, 4, wave_seed(3)),
            };
            LayeredScene::new(layers, background, range)
        }
        "skewed_depth" => {
            let range = DepthRange::new(1.0, 6.0).unwrap();
            let layers = vec![
                Layer {
                    depth: 1.25,
                    rect: Rect {
                        x0: -0.70 + jitter(0.01),
                        y0: -0.70 + jitter(0.01),
                        x1: 0.10 + jitter(0.01),
                        y1: 0.70 + jitter(0.01),
                    },
                    texture: TextureSpec::noise([0.70, 0.42, 0.30], 34.0, 0.16, 4, wave_seed(4)),
                    opacity: 1.0,
                },
                Layer {
                    depth: 1.55,
                    rect: Rect {
                        x0: -0.05 + jitter(0.01),
                        y0: -0.85 + jitter(0.01),
                        x1: 0.85 + jitter(0.01),
                        y1: 0.12 + jitter(0.01),
                    },
                    texture: TextureSpec::noise([0.40, 0.64, 0.36], 28.0, 0.16, 4, wave_seed(5)),
                    opacity: 1.0,
                },
                Layer {
                    depth: 1.85,
                    rect: Rect {
                        x0: -0.10 + jitter(0.01),
                        y0: 0.02 + jitter(0.01),
                        x1: 1.00 + jitter(0.01),
                        y1: 1.00 + jitter(0.01),
                    },
                    texture: TextureSpec::noise([0.32, 0.46, 0.70], 23.0, 0.16, 4, wave_seed(6)),
                    opacity: 1.0,
                },
            ];
            let background = Background {
                depth: 5.5,
                texture: TextureSpec::noise([0.55, 0.58, 0.66], 6.5, 0.13, 4, wave_seed(7)),
            };
            LayeredScene::new(layers, background, range)
        }
        "deep_range" => {
            let range = DepthRange::new(1.0, 20.0).unwrap();
            let layers = vec![
                Layer {
                    depth: 2.0,
                    rect: Rect {
                        x0: -1.00 + jitter(0.03),
                        y0: -0.85 + jitter(0.03),
                        x1: -0.10 + jitter(0.03),
                        y1: 0.85 + jitter(0.03),
                    },
                    texture: TextureSpec::noise([0.68, 0.48, 0.32], 22.0, 0.16, 4, wave_seed(8)),
                    opacity: 1.0,
                },
                Layer {
                    depth: 5.0,
                    rect: Rect {
                        x0: 0.10 + jitter(0.05),
                        y0: -2.10 + jitter(0.05),
                        x1: 2.40 + jitter(0.05),
                        y1: 0.40 + jitter(0.05),
                    },
                    texture: TextureSpec::Checker {
                        cell: 0.80,
                        color_a: [0.30, 0.56, 0.76],
                        color_b: [0.55, 0.76, 0.90],
                        blend: 0.12,
                    },
                    opacity: 1.0,
                },
                Layer {
                    depth: 12.0,
                    rect: Rect {
                        x0: -5.50 + jitter(0.1),
                        y0: -1.20 + jitter(0.1),
                        x1: 2.00 + jitter(0.1),
                        y1: 5.50 + jitter(0.1),
                    },
                    texture: TextureSpec::noise([0.38, 0.60, 0.42], 3.7, 0.16, 4, wave_seed(9)),
                    opacity: 1.0,
                },
            ];
            let background = Background {
                depth: 18.0,
                texture: TextureSpec::noise([0.50, 0.54, 0.68], 2.4, 0.13, 4, wave_seed(10)),
            };
            LayeredScene::new(layers, background, range)
        }
        other => Err(SynthError::UnknownPreset(other.to_string())),
    }
}

#[derive(Debug, Clone)]
pub struct GtRender {
    pub image: ImageBuffer,
    pub depth: ImageBuffer,
}

/// Renders ground truth for one world-to-camera pose.
///
/// Per pixel: a ray through the pixel center is intersected with every layer
/// plane, rectangle containment decides coverage, textures are evaluated at
/// the intersection point, and layers over-composite front to back (the
/// background is fully opaque). The depth channel holds the camera-frame
/// depth of the first layer with opacity ≥ 0.5, or the background.
pub fn render_ground_truth(
    scene: &LayeredScene,
    intrinsics: &CameraIntrinsics,
    pose_world_to_cam: &RigidPose,
    width: usize,
    height: usize,
) -> Result<GtRender, SynthError> {
    let cam_to_world = pose_world_to_cam.inverse();
    let origin = *cam_to_world.translation();
    let nearest = scene
        .layers
        .first()
        .map(|l| l.depth)
        .unwrap_or(scene.background.depth);
    if origin.z >= nearest {
        return Err(SynthError::CameraInsideScene {
            camera_z: origin.z,
            nearest,
        });
    }

    let mut image = ImageBuffer::new(width, height, 3).expect("gt image");
    let mut depth = ImageBuffer::new(width, height, 1).expect("gt depth");

    // Two passes share the per-pixel tracer; rows are independent.
    let trace = |x: usize, y: usize| -> ([f64; 3], f64) {
        let dir_c = intrinsics.backproject(x as f64, y as f64);
        let dir_w = cam_to_world.rotation() * dir_c;
        let mut color = [0.0; 3];
        let mut transmittance = 1.0;
        let mut depth_out = None;

        for layer in &scene.layers {
            if dir_w.z.abs() <= 1e-12 {
                continue;
            }
            let lambda = (layer.depth - origin.z) / dir_w.z;
            if lambda <= 0.0 {
                continue;
            }
            let px = origin.x + lambda * dir_w.x;
            let py = origin.y + lambda * dir_w.y;
            if !layer.rect.contains(px, py) {
                continue;
            }
            let tex = layer.texture.eval(px, py);
            for c in 0..3 {
                color[c] += transmittance * layer.opacity * tex[c];
            }
            if depth_out.is_none() && layer.opacity >= 0.5 {
                // Camera-frame depth of the hit equals the ray parameter.
                depth_out = Some(lambda);
            }
            transmittance *= 1.0 - layer.opacity;
        }

        let bg_lambda = if dir_w.z.abs() > 1e-12 {
            (scene.background.depth - origin.z) / dir_w.z
        } else {
            -1.0
        };
        if bg_lambda > 0.0 {
            let px = origin.x + bg_lambda * dir_w.x;
            let py = origin.y + bg_lambda * dir_w.y;
            let tex = scene.background.texture.eval(px, py);
            for c in 0..3 {
                color[c] += transmittance * tex[c];
            }
        }
        let d = depth_out.unwrap_or(if bg_lambda > 0.0 {
            bg_lambda
        } else {
            scene.background.depth
        });
        (color, d)
    };

    par::for_each_chunk_mut(image.data_mut(), width * 3, |y, row| {
        for x in 0..width {
            let (c, _) = trace(x, y);
            row[x * 3..x * 3 + 3].copy_from_slice(&c);
        }
    });
    par::for_each_chunk_mut(depth.data_mut(), width, |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            let (_, d) = trace(x, y);
            *out = d;
        }
    });

    Ok(GtRender { image, depth })
}

/// Seeded uniform subsample (without replacement) of a depth map, size
/// min(max_samples, H·W). With `max_samples >= H·W` this is exactly the
/// multiset of all depths in row-major order.
pub fn scene_depth_samples(
    depth_map: &ImageBuffer,
    max_samples: usize,
    seed: u64,
) -> DepthSampleSet {
    assert_eq!(depth_map.channels(), 1, "depth map must be single-channel");
    assert!(max_samples >= 1, "need at least one sample");
    let total = depth_map.data().len();
    if max_samples >= total {
        return DepthSampleSet::new(depth_map.data().to_vec()).expect("nonempty depth map");
    }
    // Partial Fisher-Yates over the index array.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..total).collect();
    let mut values = Vec::with_capacity(max_samples);
    for i in 0..max_samples {
        let j = rng.random_range(i..total);
        indices.swap(i, j);
        values.push(depth_map.data()[indices[i]]);
    }
    DepthSampleSet::new(values).expect("nonempty subsample")
}
