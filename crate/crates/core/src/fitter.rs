//! Per-scene MPI fitting by first-order optimization.
//!
//! Parameters are unconstrained logits: per-plane color and alpha maps
//! (decoded with a sigmoid) and N bin logits (decoded with the softmax /
//! bin-center placement, unless a fixed placement strategy is selected).
//! The coarse-to-fine schedule optimizes at reduced resolution first so
//! low-frequency structure settles before detail: each stage downscales the
//! target images by its divisor, runs full-batch moment-estimate updates
//! with bias correction, then bilinearly upsamples the logit buffers to the
//! next resolution. Bin logits carry over unchanged between stages.
//!
//! Everything is deterministic for a fixed seed: gradients reduce in a
//! fixed order regardless of thread count and the only randomness is the
//! seeded alpha-noise in the initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::camera::{CameraError, CameraIntrinsics, RigidPose};
use crate::image::{resize, ImageBuffer, ResizeMode};
use crate::losses::{
    adaptive_bins_loss, psnr, ssim, synthesis_loss, total_loss, DepthSampleSet, LossError,
};
use crate::mpi::{
    backprop_positions_to_widths, backprop_widths_to_logits, log_positions, normalize_bin_widths,
    plane_positions, uniform_positions, DepthRange, MpiError, MpiPlane, MultiplaneImage,
};
use crate::renderer::{render, render_backward};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid fit config: {0}")]
    InvalidConfig(String),
    #[error("fitting requires at least one target view")]
    NoTargetViews,
    #[error("use_gt_depth is set but no depth samples were provided")]
    MissingGtDepth,
    #[error("total loss became non-finite at iteration {iter}")]
    Divergence { iter: u64, trace: FitTrace },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Mpi(#[from] MpiError),
}

/// Plane-placement strategy used during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinStrategy {
    /// Learnable adaptive bins (softmax widths, bin-center placement).
    Adaptive,
    /// Fixed equal-interval placement; bin logits are frozen.
    UniformFix,
    /// Fixed log-scale placement; bin logits are frozen.
    LogFix,
}

impl std::str::FromStr for BinStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive" => Ok(BinStrategy::Adaptive),
            "uniform" => Ok(BinStrategy::UniformFix),
            "log" => Ok(BinStrategy::LogFix),
            other => Err(format!("unknown bin strategy '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub scale_divisor: u32,
    pub iterations: u32,
    pub step_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub n_planes: usize,
    pub depth_range: DepthRange,
    pub lambda_ada: f64,
    pub stages: Vec<StageConfig>,
    pub optimizer: OptimConfig,
    pub seed: u64,
    pub use_gt_depth: bool,
    pub bins: BinStrategy,
    /// Bin logits step = step_size × this factor; N scalars move much
    /// slower than millions of pixel logits to avoid depth oscillation.
    pub bin_step_scale: f64,
    /// Optimize only the bin logits from the chamfer term, keeping colors
    /// and alphas at their initialization and excluding the synthesis
    /// gradient from the bins.
    pub freeze_appearance: bool,
}

impl FitConfig {
    /// Default coarse-to-fine schedule: divisors (4, 2, 1), iterations
    /// (300, 300, 400), step sizes (1e-2, 5e-3, 2e-3).
    pub fn new(n_planes: usize, depth_range: DepthRange) -> Self {
        Self {
            n_planes,
            depth_range,
            lambda_ada: 0.1,
            stages: vec![
                StageConfig {
                    scale_divisor: 4,
                    iterations: 300,
                    step_size: 1e-2,
                },
                StageConfig {
                    scale_divisor: 2,
                    iterations: 300,
                    step_size: 5e-3,
                },
                StageConfig {
                    scale_divisor: 1,
                    iterations: 400,
                    step_size: 2e-3,
                },
            ],
            optimizer: OptimConfig::default(),
            seed: 7,
            use_gt_depth: false,
            bins: BinStrategy::Adaptive,
            bin_step_scale: 0.1,
            freeze_appearance: false,
        }
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if self.n_planes == 0 {
            return Err(FitError::InvalidConfig("n_planes must be >= 1".into()));
        }
        if self.lambda_ada < 0.0 || !self.lambda_ada.is_finite() {
            return Err(FitError::InvalidConfig("lambda_ada must be >= 0".into()));
        }
        if self.stages.is_empty() {
            return Err(FitError::InvalidConfig("need at least one stage".into()));
        }
        for w in self.stages.windows(2) {
            if w[1].scale_divisor >= w[0].scale_divisor {
                return Err(FitError::InvalidConfig(
                    "stage scale divisors must be strictly decreasing".into(),
                ));
            }
        }
        let last = self.stages.last().unwrap();
        if last.scale_divisor != 1 {
            return Err(FitError::InvalidConfig(
                "the final stage must run at full resolution (divisor 1)".into(),
            ));
        }
        for s in &self.stages {
            if s.scale_divisor == 0 {
                return Err(FitError::InvalidConfig("scale divisor must be >= 1".into()));
            }
            if !(s.step_size > 0.0) {
                return Err(FitError::InvalidConfig("step size must be > 0".into()));
            }
        }
        if !(self.bin_step_scale > 0.0) {
            return Err(FitError::InvalidConfig("bin_step_scale must be > 0".into()));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return Err(FitError::InvalidConfig(
                "optimizer requires beta1, beta2 in [0,1) and epsilon > 0".into(),
            ));
        }
        if self.bins == BinStrategy::LogFix && self.depth_range.near() <= 0.0 {
            return Err(FitError::InvalidConfig(
                "log placement requires a positive near bound".into(),
            ));
        }
        Ok(())
    }
}

/// Unconstrained optimization state.
#[derive(Debug, Clone, PartialEq)]
pub struct FitParams {
    pub color_logits: Vec<ImageBuffer>,
    pub alpha_logits: Vec<ImageBuffer>,
    pub bin_logits: Vec<f64>,
}

/// A posed image: the stored pose maps this view's camera coordinates into
/// the source camera frame.
#[derive(Debug, Clone)]
pub struct PosedView {
    pub image: ImageBuffer,
    pub pose_to_source: RigidPose,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: u64,
    pub stage: usize,
    pub l_ada: f64,
    pub l_syn: f64,
    pub total: f64,
    pub psnr_train: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub mpi: MultiplaneImage,
    pub trace: FitTrace,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Colors start as the (clamped) source image on every plane, alphas at
/// logit(1/N) plus seeded Gaussian noise (σ = 0.01), bin logits at zero.
pub fn init_params(source: &ImageBuffer, n_planes: usize, seed: u64) -> FitParams {
    assert_eq!(source.channels(), 3, "source image must be 3-channel");
    assert!(n_planes >= 1);
    let (w, h) = (source.width(), source.height());

    let color_seed = ImageBuffer::from_vec(
        w,
        h,
        3,
        source
            .data()
            .iter()
            .map(|&v| logit(v.clamp(1e-3, 1.0 - 1e-3)))
            .collect(),
    )
    .expect("color logits");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).expect("valid noise sigma");
    let alpha_base = logit(1.0 / n_planes as f64);
    let alpha_logits = (0..n_planes)
        .map(|_| {
            ImageBuffer::from_fn(w, h, 1, |_, _, _| alpha_base + normal.sample(&mut rng))
        })
        .collect();

    FitParams {
        color_logits: vec![color_seed; n_planes],
        alpha_logits,
        bin_logits: vec![0.0; n_planes],
    }
}

/// Sigmoid/softmax decoding with adaptive bin-center placement. The result
/// satisfies every MPI invariant by construction; construction re-asserts
/// them.
pub fn decode(
    params: &FitParams,
    range: &DepthRange,
    intrinsics: &CameraIntrinsics,
) -> MultiplaneImage {
    let widths = normalize_bin_widths(&params.bin_logits);
    let positions = plane_positions(&widths, range);
    decode_with_positions(params, &positions, range, intrinsics)
}

fn decode_with_positions(
    params: &FitParams,
    positions: &[f64],
    range: &DepthRange,
    intrinsics: &CameraIntrinsics,
) -> MultiplaneImage {
    let planes = params
        .color_logits
        .iter()
        .zip(&params.alpha_logits)
        .zip(positions)
        .map(|((cl, al), &depth)| MpiPlane {
            color: ImageBuffer::from_vec(
                cl.width(),
                cl.height(),
                3,
                cl.data().iter().map(|&v| sigmoid(v)).collect(),
            )
            .expect("decoded color"),
            alpha: ImageBuffer::from_vec(
                al.width(),
                al.height(),
                1,
                al.data().iter().map(|&v| sigmoid(v)).collect(),
            )
            .expect("decoded alpha"),
            depth,
        })
        .collect();
    MultiplaneImage::new(planes, *intrinsics, *range).expect("decoded MPI satisfies invariants")
}

fn positions_for(params: &FitParams, cfg: &FitConfig) -> Vec<f64> {
    match cfg.bins {
        BinStrategy::Adaptive => {
            plane_positions(&normalize_bin_widths(&params.bin_logits), &cfg.depth_range)
        }
        BinStrategy::UniformFix => uniform_positions(cfg.n_planes, &cfg.depth_range),
        BinStrategy::LogFix => log_positions(cfg.n_planes, &cfg.depth_range)
            .expect("validated config has positive near bound"),
    }
}

/// Adam-style moment accumulator for one parameter group.
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, opt: &OptimConfig, t: u64) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m.len());
        let bc1 = 1.0 - opt.beta1.powi(t as i32);
        let bc2 = 1.0 - opt.beta2.powi(t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = opt.beta1 * self.m[i] + (1.0 - opt.beta1) * g;
            self.v[i] = opt.beta2 * self.v[i] + (1.0 - opt.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + opt.epsilon);
        }
    }
}

struct StageViews {
    images: Vec<ImageBuffer>,
    intrinsics: Vec<CameraIntrinsics>,
    width: usize,
    height: usize,
    stage_intrinsics: CameraIntrinsics,
}

fn prepare_stage_views(
    targets: &[PosedView],
    source_intrinsics: &CameraIntrinsics,
    full_w: usize,
    full_h: usize,
    divisor: u32,
) -> StageViews {
    let w = (full_w / divisor as usize).max(1);
    let h = (full_h / divisor as usize).max(1);
    let images = targets
        .iter()
        .map(|t| {
            if t.image.width() == w && t.image.height() == h {
                t.image.clone()
            } else {
                resize(&t.image, w, h, ResizeMode::Down)
            }
        })
        .collect();
    let intrinsics = targets
        .iter()
        .map(|t| t.intrinsics.rescaled(t.image.width(), t.image.height(), w, h))
        .collect();
    StageViews {
        images,
        intrinsics,
        width: w,
        height: h,
        stage_intrinsics: source_intrinsics.rescaled(full_w, full_h, w, h),
    }
}

/// Fits an MPI to the source view's appearance and the target views'
/// synthesis loss, optionally with the chamfer depth term
/// (`cfg.use_gt_depth`). Returns the full-resolution MPI (tagged with the
/// source intrinsics) and the per-iteration trace; deterministic given the
/// config seed.
pub fn fit(
    source: &ImageBuffer,
    source_intrinsics: &CameraIntrinsics,
    targets: &[PosedView],
    gt_depth: Option<&DepthSampleSet>,
    cfg: &FitConfig,
) -> Result<FitOutcome, FitError> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(FitError::NoTargetViews);
    }
    if cfg.use_gt_depth && gt_depth.is_none() {
        return Err(FitError::MissingGtDepth);
    }
    let gt_samples = gt_depth.map(|s| s.clipped_to(&cfg.depth_range));

    let (full_w, full_h) = (source.width(), source.height());
    let mut params = init_params(source, cfg.n_planes, cfg.seed);
    let mut trace = FitTrace::default();
    let mut iter: u64 = 0;

    for (stage_idx, stage) in cfg.stages.iter().enumerate() {
        let views =
            prepare_stage_views(targets, source_intrinsics, full_w, full_h, stage.scale_divisor);

        // Bring logit buffers to the stage resolution: down by area average
        // before the first stage, up bilinearly between stages.
        let mode = if params.color_logits[0].width() > views.width {
            ResizeMode::Down
        } else {
            ResizeMode::Up
        };
        if params.color_logits[0].width() != views.width
            || params.color_logits[0].height() != views.height
        {
            for buf in params.color_logits.iter_mut() {
                *buf = resize(buf, views.width, views.height, mode);
            }
            for buf in params.alpha_logits.iter_mut() {
                *buf = resize(buf, views.width, views.height, mode);
            }
        }

        let n_pix = views.width * views.height;
        let mut color_moments: Vec<Moments> = (0..cfg.n_planes).map(|_| Moments::new(n_pix * 3)).collect();
        let mut alpha_moments: Vec<Moments> = (0..cfg.n_planes).map(|_| Moments::new(n_pix)).collect();
        let mut bin_moments = Moments::new(cfg.n_planes);

        for t in 1..=stage.iterations {
            let positions = positions_for(&params, cfg);
            let mpi = decode_with_positions(&params, &positions, &cfg.depth_range, &views.stage_intrinsics);

            let mut l_syn = 0.0;
            let mut psnr_sum = 0.0;
            let mut d_color: Vec<Vec<f64>> = vec![vec![0.0; n_pix * 3]; cfg.n_planes];
            let mut d_alpha: Vec<Vec<f64>> = vec![vec![0.0; n_pix]; cfg.n_planes];
            let mut d_bins_syn = vec![0.0; cfg.n_planes];

            for (v, (gt_img, k_t)) in views.images.iter().zip(&views.intrinsics).enumerate() {
                let pred = render(
                    &mpi,
                    &targets[v].pose_to_source,
                    k_t,
                    views.width,
                    views.height,
                )?;
                let loss = synthesis_loss(&pred, gt_img)?;
                l_syn += loss.value;
                psnr_sum += psnr(&pred, gt_img)?;

                if !cfg.freeze_appearance {
                    let bundle =
                        render_backward(&mpi, &targets[v].pose_to_source, k_t, &loss.d_pred)?;
                    for i in 0..cfg.n_planes {
                        for (acc, g) in d_color[i].iter_mut().zip(bundle.d_color[i].data()) {
                            *acc += g;
                        }
                        for (acc, g) in d_alpha[i].iter_mut().zip(bundle.d_alpha[i].data()) {
                            *acc += g;
                        }
                        d_bins_syn[i] += bundle.d_bin_logits[i];
                    }
                }
            }
            let psnr_train = psnr_sum / views.images.len() as f64;

            let mut l_ada = 0.0;
            let mut d_bins_ada = vec![0.0; cfg.n_planes];
            if cfg.use_gt_depth {
                let samples = gt_samples.as_ref().expect("validated above");
                let chamfer = adaptive_bins_loss(&positions, samples);
                l_ada = chamfer.value;
                if cfg.lambda_ada != 0.0 && cfg.bins == BinStrategy::Adaptive {
                    let widths = normalize_bin_widths(&params.bin_logits);
                    let d_widths =
                        backprop_positions_to_widths(&chamfer.d_positions, &cfg.depth_range);
                    let d_logits = backprop_widths_to_logits(&d_widths, widths.widths());
                    for (acc, g) in d_bins_ada.iter_mut().zip(&d_logits) {
                        *acc += cfg.lambda_ada * g;
                    }
                }
            }

            let report = total_loss(l_ada, l_syn, cfg.lambda_ada);
            trace.records.push(TraceRecord {
                iter,
                stage: stage_idx,
                l_ada: report.l_ada,
                l_syn: report.l_syn,
                total: report.total,
                psnr_train,
            });
            if !report.total.is_finite() {
                return Err(FitError::Divergence { iter, trace });
            }

            // Chain pixel gradients through the sigmoid decode and update.
            if !cfg.freeze_appearance {
                for i in 0..cfg.n_planes {
                    let cl = params.color_logits[i].data_mut();
                    for (j, g) in d_color[i].iter_mut().enumerate() {
                        let s = sigmoid(cl[j]);
                        *g *= s * (1.0 - s);
                    }
                    color_moments[i].step(cl, &d_color[i], stage.step_size, &cfg.optimizer, t as u64);

                    let al = params.alpha_logits[i].data_mut();
                    for (j, g) in d_alpha[i].iter_mut().enumerate() {
                        let s = sigmoid(al[j]);
                        *g *= s * (1.0 - s);
                    }
                    alpha_moments[i].step(al, &d_alpha[i], stage.step_size, &cfg.optimizer, t as u64);
                }
            }
            if cfg.bins == BinStrategy::Adaptive {
                let d_bins: Vec<f64> = d_bins_syn
                    .iter()
                    .zip(&d_bins_ada)
                    .map(|(a, b)| if cfg.freeze_appearance { *b } else { a + b })
                    .collect();
                bin_moments.step(
                    &mut params.bin_logits,
                    &d_bins,
                    stage.step_size * cfg.bin_step_scale,
                    &cfg.optimizer,
                    t as u64,
                );
            }
            iter += 1;
        }
    }

    // Final decode at full resolution.
    if params.color_logits[0].width() != full_w || params.color_logits[0].height() != full_h {
        for buf in params.color_logits.iter_mut() {
            *buf = resize(buf, full_w, full_h, ResizeMode::Up);
        }
        for buf in params.alpha_logits.iter_mut() {
            *buf = resize(buf, full_w, full_h, ResizeMode::Up);
        }
    }
    let positions = positions_for(&params, cfg);
    let mpi = decode_with_positions(&params, &positions, &cfg.depth_range, source_intrinsics);
    Ok(FitOutcome { mpi, trace })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub per_view: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub evaluated_width: usize,
    pub evaluated_height: usize,
}

/// Renders each held-out view, crops `crop_fraction` from every border of
/// both prediction and ground truth, and reports PSNR/SSIM per view and
/// their means.
pub fn evaluate_heldout(
    m: &MultiplaneImage,
    heldout: &[PosedView],
    crop_fraction: f64,
) -> Result<EvalSummary, FitError> {
    if !(0.0..0.25).contains(&crop_fraction) {
        return Err(FitError::InvalidConfig(
            "crop fraction must lie in [0, 0.25)".into(),
        ));
    }
    if heldout.is_empty() {
        return Err(FitError::NoTargetViews);
    }
    let mut per_view = Vec::with_capacity(heldout.len());
    let mut size = (0, 0);
    for view in heldout {
        let (w, h) = (view.image.width(), view.image.height());
        let pred = render(m, &view.pose_to_source, &view.intrinsics, w, h)?;
        let pred = crop_borders(&pred, crop_fraction);
        let gt = crop_borders(&view.image, crop_fraction);
        size = (pred.width(), pred.height());
        per_view.push(ViewMetrics {
            psnr: psnr(&pred, &gt)?,
            ssim: ssim(&pred, &gt)?.mean,
        });
    }
    let mean_psnr = per_view.iter().map(|v| v.psnr).sum::<f64>() / per_view.len() as f64;
    let mean_ssim = per_view.iter().map(|v| v.ssim).sum::<f64>() / per_view.len() as f64;
    Ok(EvalSummary {
        per_view,
        mean_psnr,
        mean_ssim,
        evaluated_width: size.0,
        evaluated_height: size.1,
    })
}

/// Removes floor(fraction · dimension) pixels from every border.
pub fn crop_borders(img: &ImageBuffer, fraction: f64) -> ImageBuffer {
    let dx = (fraction * img.width() as f64).floor() as usize;
    let dy = (fraction * img.height() as f64).floor() as usize;
    let (w, h, ch) = (img.width() - 2 * dx, img.height() - 2 * dy, img.channels());
    ImageBuffer::from_fn(w, h, ch, |x, y, c| img.get(x + dx, y + dy, c))
}
