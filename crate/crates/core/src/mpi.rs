//! The multiplane-image representation and the three plane-placement
//! strategies: adaptive bins, uniform-fix, and log-fix.
//!
//! Adaptive placement turns N unconstrained logits into normalized bin
//! widths with a softmax, then stacks the bins over the depth range and
//! places each plane at its bin center:
//!
//!   p_i = d_near + (d_far − d_near) · (b_i/2 + Σ_{j<i} b_j)
//!
//! so plane 1 is the nearest. Both maps are smooth; their vector-Jacobian
//! products live here too so the fitter and renderer can chain depth
//! gradients back to the logits.

use thiserror::Error;

use crate::camera::CameraIntrinsics;
use crate::image::ImageBuffer;

#[derive(Debug, Error, PartialEq)]
pub enum MpiError {
    #[error("depth range requires 0 <= near < far and finite bounds, got [{near}, {far}]")]
    InvalidDepthRange { near: f64, far: f64 },
    #[error("log placement requires a positive near bound, got {0}")]
    NonPositiveNear(f64),
    #[error("bin widths must be positive and sum to 1 within 1e-9 (sum = {sum})")]
    InvalidBinWidths { sum: f64 },
    #[error("multiplane image must contain at least one plane")]
    NoPlanes,
    #[error("plane {index}: {reason}")]
    InvalidPlane { index: usize, reason: String },
}

/// Near/far bounds of the camera frustum slab holding the planes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRange {
    near: f64,
    far: f64,
}

impl DepthRange {
    pub fn new(near: f64, far: f64) -> Result<Self, MpiError> {
        if !(near.is_finite() && far.is_finite() && 0.0 <= near && near < far) {
            return Err(MpiError::InvalidDepthRange { near, far });
        }
        Ok(Self { near, far })
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    pub fn far(&self) -> f64 {
        self.far
    }

    pub fn span(&self) -> f64 {
        self.far - self.near
    }

    pub fn contains(&self, depth: f64) -> bool {
        self.near <= depth && depth <= self.far
    }
}

/// Normalized adaptive bin widths: all positive, summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinWidths {
    widths: Vec<f64>,
}

impl BinWidths {
    pub fn new(widths: Vec<f64>) -> Result<Self, MpiError> {
        if widths.is_empty() {
            return Err(MpiError::NoPlanes);
        }
        let sum: f64 = widths.iter().sum();
        if !widths.iter().all(|w| w.is_finite() && *w > 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(MpiError::InvalidBinWidths { sum });
        }
        Ok(Self { widths })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1, "need at least one bin");
        Self {
            widths: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }
}

/// Softmax of the logits; shift-invariant, output sums to 1.
pub fn normalize_bin_widths(logits: &[f64]) -> BinWidths {
    assert!(!logits.is_empty(), "need at least one logit");
    assert!(
        logits.iter().all(|l| l.is_finite()),
        "logits must be finite"
    );
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    BinWidths {
        widths: exps.into_iter().map(|e| e / sum).collect(),
    }
}

/// Bin-center depths: strictly increasing, inside (near, far).
pub fn plane_positions(widths: &BinWidths, range: &DepthRange) -> Vec<f64> {
    let span = range.span();
    let mut prefix = 0.0;
    widths
        .widths()
        .iter()
        .map(|&w| {
            let p = range.near() + span * (0.5 * w + prefix);
            prefix += w;
            p
        })
        .collect()
}

/// Equal-interval placement; identical to [`plane_positions`] with all
/// widths 1/N.
pub fn uniform_positions(n: usize, range: &DepthRange) -> Vec<f64> {
    plane_positions(&BinWidths::uniform(n), range)
}

/// Bin centers uniformly spaced in ln(depth):
/// p_i = exp(ln d_near + (i − 1/2)/N · (ln d_far − ln d_near)), i = 1..N.
pub fn log_positions(n: usize, range: &DepthRange) -> Result<Vec<f64>, MpiError> {
    assert!(n >= 1, "need at least one plane");
    if range.near() <= 0.0 {
        return Err(MpiError::NonPositiveNear(range.near()));
    }
    let ln_near = range.near().ln();
    let ln_span = range.far().ln() - ln_near;
    Ok((1..=n)
        .map(|i| (ln_near + (i as f64 - 0.5) / n as f64 * ln_span).exp())
        .collect())
}

/// VJP of [`plane_positions`] with respect to the widths:
/// ∂p_i/∂b_j = span · (½·[i=j] + [j<i]), applied as
/// d_width_j = span · (½·d_pos_j + Σ_{i>j} d_pos_i).
pub fn backprop_positions_to_widths(d_positions: &[f64], range: &DepthRange) -> Vec<f64> {
    let span = range.span();
    let mut suffix = 0.0;
    let mut out = vec![0.0; d_positions.len()];
    for j in (0..d_positions.len()).rev() {
        out[j] = span * (0.5 * d_positions[j] + suffix);
        suffix += d_positions[j];
    }
    out
}

/// VJP of the softmax in [`normalize_bin_widths`]:
/// d_logit_j = b_j · (d_width_j − Σ_i d_width_i · b_i).
pub fn backprop_widths_to_logits(d_widths: &[f64], widths: &[f64]) -> Vec<f64> {
    debug_assert_eq!(d_widths.len(), widths.len());
    let dot: f64 = d_widths.iter().zip(widths).map(|(d, b)| d * b).sum();
    d_widths
        .iter()
        .zip(widths)
        .map(|(d, b)| b * (d - dot))
        .collect()
}

/// Inverts the prefix-sum in [`plane_positions`], recovering the widths that
/// generated `positions`. Only meaningful when the depths actually came from
/// bin centers; the renderer uses it to chain depth gradients to the logits.
pub(crate) fn widths_from_positions(positions: &[f64], range: &DepthRange) -> Vec<f64> {
    let span = range.span();
    let mut prefix = 0.0;
    positions
        .iter()
        .map(|&p| {
            let w = 2.0 * ((p - range.near()) / span - prefix);
            prefix += w;
            w
        })
        .collect()
}

/// One fronto-parallel RGB-α plane at a fixed source-frame depth.
#[derive(Debug, Clone, PartialEq)]
pub struct MpiPlane {
    pub color: ImageBuffer,
    pub alpha: ImageBuffer,
    pub depth: f64,
}

/// N RGB-α planes at strictly increasing depths (index 0 nearest), with the
/// source-view intrinsics they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplaneImage {
    planes: Vec<MpiPlane>,
    intrinsics: CameraIntrinsics,
    depth_range: DepthRange,
}

impl MultiplaneImage {
    pub fn new(
        planes: Vec<MpiPlane>,
        intrinsics: CameraIntrinsics,
        depth_range: DepthRange,
    ) -> Result<Self, MpiError> {
        if planes.is_empty() {
            return Err(MpiError::NoPlanes);
        }
        let (w, h) = (planes[0].color.width(), planes[0].color.height());
        let mut prev = f64::NEG_INFINITY;
        for (index, plane) in planes.iter().enumerate() {
            let fail = |reason: &str| MpiError::InvalidPlane {
                index,
                reason: reason.to_string(),
            };
            if plane.color.channels() != 3 || plane.alpha.channels() != 1 {
                return Err(fail("color must be 3-channel and alpha 1-channel"));
            }
            if plane.color.width() != w
                || plane.color.height() != h
                || plane.alpha.width() != w
                || plane.alpha.height() != h
            {
                return Err(fail("all planes must share one resolution"));
            }
            if !(plane.depth > 0.0)
                || !plane.depth.is_finite()
                || !depth_range.contains(plane.depth)
            {
                return Err(fail("depth must be positive and inside the depth range"));
            }
            if plane.depth <= prev {
                return Err(fail("depths must be strictly increasing"));
            }
            prev = plane.depth;
            if !plane.alpha.data().iter().all(|a| (0.0..=1.0).contains(a)) {
                return Err(fail("alpha values must lie in [0, 1]"));
            }
            if !plane.color.data().iter().all(|c| c.is_finite()) {
                return Err(fail("color values must be finite"));
            }
        }
        Ok(Self {
            planes,
            intrinsics,
            depth_range,
        })
    }

    pub fn planes(&self) -> &[MpiPlane] {
        &self.planes
    }

    pub fn n_planes(&self) -> usize {
        self.planes.len()
    }

    pub fn width(&self) -> usize {
        self.planes[0].color.width()
    }

    pub fn height(&self) -> usize {
        self.planes[0].color.height()
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn depth_range(&self) -> &DepthRange {
        &self.depth_range
    }

    pub fn depths(&self) -> Vec<f64> {
        self.planes.iter().map(|p| p.depth).collect()
    }
}

/// Per-pixel expected inverse depth under the compositing weights,
/// evaluated in the source view (no warping):
/// D(u,v) = Σ_i (1/depth_i) · α_i · Π_{j<i} (1 − α_j).
pub fn disparity_map(m: &MultiplaneImage) -> ImageBuffer {
    let (w, h) = (m.width(), m.height());
    let mut out = ImageBuffer::new(w, h, 1).expect("valid disparity buffer");
    let planes = m.planes();
    crate::par::for_each_chunk_mut(out.data_mut(), w, |y, row| {
        for (x, px) in row.iter_mut().enumerate() {
            let mut transmittance = 1.0;
            let mut disparity = 0.0;
            for plane in planes {
                let a = plane.alpha.get(x, y, 0);
                disparity += transmittance * a / plane.depth;
                transmittance *= 1.0 - a;
            }
            *px = disparity;
        }
    });
    out
}
