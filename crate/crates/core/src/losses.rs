//! Fitting objectives and evaluation metrics: the bidirectional chamfer
//! term over plane depths, windowed SSIM, the L1 − SSIM synthesis loss, and
//! PSNR. Everything that feeds the fitter returns its analytic gradient.

use thiserror::Error;

use crate::image::ImageBuffer;
use crate::mpi::DepthRange;
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("ground-truth depth sample set is empty")]
    EmptyGroundTruth,
    #[error("depth samples must be positive and finite")]
    InvalidDepthSample,
    #[error("image shapes differ: {0}x{1}x{2} vs {3}x{4}x{5}")]
    ShapeMismatch(usize, usize, usize, usize, usize, usize),
    #[error("image {0}x{1} too small for an 11x11 window")]
    ImageTooSmall(usize, usize),
}

/// PSNR reported for (numerically) identical images.
pub const PSNR_SENTINEL: f64 = 120.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Scene-depth observations (positive reals) driving the chamfer term.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSampleSet {
    values: Vec<f64>,
}

impl DepthSampleSet {
    pub fn new(values: Vec<f64>) -> Result<Self, LossError> {
        if values.is_empty() {
            return Err(LossError::EmptyGroundTruth);
        }
        if !values.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(LossError::InvalidDepthSample);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Clamps every sample into the fitting range.
    pub fn clipped_to(&self, range: &DepthRange) -> DepthSampleSet {
        DepthSampleSet {
            values: self
                .values
                .iter()
                .map(|v| v.clamp(range.near().max(f64::MIN_POSITIVE), range.far()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptiveBinsLoss {
    pub value: f64,
    pub d_positions: Vec<f64>,
}

/// Bidirectional chamfer between plane depths and ground-truth depth
/// samples: Σ_x min_y (x−y)² + Σ_y min_x (x−y)². Nearest-neighbor ties break
/// toward the lowest index, which also fixes the subgradient there.
pub fn adaptive_bins_loss(positions: &[f64], gt: &DepthSampleSet) -> AdaptiveBinsLoss {
    assert!(!positions.is_empty(), "need at least one plane position");
    let mut value = 0.0;
    let mut d_positions = vec![0.0; positions.len()];

    for &x in gt.values() {
        let (j, d) = nearest(positions, x);
        value += d * d;
        d_positions[j] -= 2.0 * d;
    }
    for (j, &p) in positions.iter().enumerate() {
        let (_, d) = nearest(gt.values(), p);
        value += d * d;
        d_positions[j] += 2.0 * d;
    }
    AdaptiveBinsLoss { value, d_positions }
}

/// Index of the closest candidate to `x` (lowest index on ties) together
/// with the signed difference x − candidate.
#[inline]
fn nearest(candidates: &[f64], x: f64) -> (usize, f64) {
    let mut best = 0;
    let mut best_abs = f64::INFINITY;
    for (i, &c) in candidates.iter().enumerate() {
        let d = (x - c).abs();
        if d < best_abs {
            best_abs = d;
            best = i;
        }
    }
    (best, x - candidates[best])
}

#[derive(Debug, Clone)]
pub struct SsimResult {
    pub mean: f64,
    pub d_a: ImageBuffer,
}

/// Windowed SSIM: 11×11 Gaussian window (σ = 1.5), C1 = 0.01², C2 = 0.03²,
/// unit dynamic range, windows fully inside the image, computed per channel
/// and averaged. Returns the mean and its analytic gradient w.r.t. `a`.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<SsimResult, LossError> {
    check_shapes(a, b)?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(LossError::ImageTooSmall(w, h));
    }
    let kernel = gaussian_kernel();
    let wv = w - SSIM_WINDOW + 1;
    let hv = h - SSIM_WINDOW + 1;
    let n_windows = wv * hv;
    let norm = 1.0 / (n_windows * ch) as f64;

    let mut d_a = ImageBuffer::new(w, h, ch).expect("gradient buffer");
    let mut mean = 0.0;

    for c in 0..ch {
        let x: Vec<f64> = a.data().iter().skip(c).step_by(ch).copied().collect();
        let y: Vec<f64> = b.data().iter().skip(c).step_by(ch).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();

        let mu_x = conv_valid(&x, w, h, &kernel);
        let mu_y = conv_valid(&y, w, h, &kernel);
        let s_xx = conv_valid(&xx, w, h, &kernel);
        let s_yy = conv_valid(&yy, w, h, &kernel);
        let s_xy = conv_valid(&xy, w, h, &kernel);

        // Window-level fields for the adjoint: the gradient decomposes as
        // d/dx_k = 2·(g⊛P + x_k·(g⊛Q) + y_k·(g⊛R)).
        let mut p_field = vec![0.0; n_windows];
        let mut q_field = vec![0.0; n_windows];
        let mut r_field = vec![0.0; n_windows];
        let mut s_sum = 0.0;
        for i in 0..n_windows {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = s_xx[i] - mx * mx;
            let var_y = s_yy[i] - my * my;
            let cov = s_xy[i] - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = var_x + var_y + SSIM_C2;
            let b1b2 = b1 * b2;
            let s = a1 * a2 / b1b2;
            s_sum += s;
            p_field[i] = my * (a2 - a1) / b1b2 + s * mx * (1.0 / b2 - 1.0 / b1);
            q_field[i] = -s / b2;
            r_field[i] = a1 / b1b2;
        }
        mean += s_sum * norm;

        let adj_p = conv_adjoint(&p_field, wv, hv, &kernel);
        let adj_q = conv_adjoint(&q_field, wv, hv, &kernel);
        let adj_r = conv_adjoint(&r_field, wv, hv, &kernel);
        let grad = d_a.data_mut();
        for k in 0..w * h {
            grad[k * ch + c] = 2.0 * norm * (adj_p[k] + x[k] * adj_q[k] + y[k] * adj_r[k]);
        }
    }

    Ok(SsimResult { mean, d_a })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let center = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - center;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid correlation with the (symmetric) kernel:
/// output is (w−10) × (h−10), row-major.
fn conv_valid(src: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wv = w - SSIM_WINDOW + 1;
    let hv = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; wv * h];
    par::for_each_chunk_mut(&mut tmp, wv, |y, row| {
        let src_row = &src[y * w..(y + 1) * w];
        for (j, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &g) in kernel.iter().enumerate() {
                acc += g * src_row[j + k];
            }
            *out = acc;
        }
    });
    let mut out = vec![0.0; wv * hv];
    par::for_each_chunk_mut(&mut out, wv, |i, row| {
        for (j, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &g) in kernel.iter().enumerate() {
                acc += g * tmp[(i + k) * wv + j];
            }
            *out = acc;
        }
    });
    out
}

/// Adjoint of [`conv_valid`]: spreads a (wv × hv) window field back onto the
/// full (wv+10) × (hv+10) pixel grid, adj[x] = Σ_j g[x−j]·field[j] over the
/// windows containing x.
fn conv_adjoint(field: &[f64], wv: usize, hv: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let w = wv + SSIM_WINDOW - 1;
    let h = hv + SSIM_WINDOW - 1;
    let mut tmp = vec![0.0; w * hv];
    par::for_each_chunk_mut(&mut tmp, w, |y, row| {
        let field_row = &field[y * wv..(y + 1) * wv];
        for (x, out) in row.iter_mut().enumerate() {
            let j_lo = x.saturating_sub(SSIM_WINDOW - 1);
            let j_hi = x.min(wv - 1);
            let mut acc = 0.0;
            for j in j_lo..=j_hi {
                acc += kernel[x - j] * field_row[j];
            }
            *out = acc;
        }
    });
    let mut out = vec![0.0; w * h];
    par::for_each_chunk_mut(&mut out, w, |y, row| {
        let i_lo = y.saturating_sub(SSIM_WINDOW - 1);
        let i_hi = y.min(hv - 1);
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in i_lo..=i_hi {
                acc += kernel[y - i] * tmp[i * w + x];
            }
            *out = acc;
        }
    });
    out
}

#[derive(Debug, Clone)]
pub struct SynthesisLoss {
    pub value: f64,
    pub d_pred: ImageBuffer,
}

/// Mean absolute error over all pixels and channels minus mean SSIM;
/// the L1 subgradient is 0 at exact equality.
pub fn synthesis_loss(pred: &ImageBuffer, gt: &ImageBuffer) -> Result<SynthesisLoss, LossError> {
    check_shapes(pred, gt)?;
    let ssim_part = ssim(pred, gt)?;
    let n = pred.data().len() as f64;

    let w = pred.width();
    let ch = pred.channels();
    let row_len = w * ch;
    let l1_rows = par::map_indexed(pred.height(), |y| {
        let p = &pred.data()[y * row_len..(y + 1) * row_len];
        let g = &gt.data()[y * row_len..(y + 1) * row_len];
        p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>()
    });
    let l1: f64 = l1_rows.iter().sum::<f64>() / n;

    let mut d_pred = ssim_part.d_a;
    {
        let grad = d_pred.data_mut();
        for (i, g) in grad.iter_mut().enumerate() {
            let diff = pred.data()[i] - gt.data()[i];
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            *g = sign / n - *g;
        }
    }
    Ok(SynthesisLoss {
        value: l1 - ssim_part.mean,
        d_pred,
    })
}

/// 10·log10(1/MSE) with unit peak; [`PSNR_SENTINEL`] when MSE < 1e-12.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, LossError> {
    check_shapes(a, b)?;
    let row_len = a.width() * a.channels();
    let sq_rows = par::map_indexed(a.height(), |y| {
        let p = &a.data()[y * row_len..(y + 1) * row_len];
        let q = &b.data()[y * row_len..(y + 1) * row_len];
        p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    });
    let mse = sq_rows.iter().sum::<f64>() / a.data().len() as f64;
    if mse < 1e-12 {
        return Ok(PSNR_SENTINEL);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Combined objective report: total = λ_ada·l_ada + l_syn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_ada: f64,
    pub l_syn: f64,
    pub total: f64,
    pub lambda_ada: f64,
}

pub fn total_loss(l_ada: f64, l_syn: f64, lambda_ada: f64) -> LossReport {
    assert!(lambda_ada >= 0.0, "lambda_ada must be nonnegative");
    LossReport {
        l_ada,
        l_syn,
        total: lambda_ada * l_ada + l_syn,
        lambda_ada,
    }
}

fn check_shapes(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), LossError> {
    if !a.same_shape(b) {
        return Err(LossError::ShapeMismatch(
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels(),
        ));
    }
    Ok(())
}
