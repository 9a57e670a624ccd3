//! Forward MPI rendering into a target view and the hand-derived adjoint.
//!
//! Forward, per plane i at depth p_i: build the plane-induced homography
//! H_i (target pixel → source pixel), inverse-warp color and alpha with
//! bilinear sampling, then over-composite front to back:
//!
//!   out = Σ_i c′_i·α′_i·T_i,   T_0 = 1,   T_{i+1} = T_i·(1 − α′_i)
//!
//! with plane 0 nearest. The backward pass recomputes the warped stack
//! (cheaper than caching at these sizes, and it keeps the API stateless),
//! runs the compositing adjoint per pixel, scatters through the bilinear
//! footprints into the source planes, and chains the sampling-position
//! gradients through ∂H/∂depth into per-plane depth and bin-logit
//! gradients.
//!
//! Parallel schedule: pixels are independent in the forward pass; in the
//! backward pass the per-pixel stage parallelizes over rows and the scatter
//! stage over planes, each plane accumulating its own buffers in row-major
//! order. Results are bit-identical for any thread count.

use nalgebra::Vector3;

use crate::camera::{
    homography_and_depth_jacobian, CameraError, CameraIntrinsics, Homography, RigidPose,
};
use crate::image::{BorderPolicy, ImageBuffer, Taps};
use crate::mpi::{
    backprop_positions_to_widths, backprop_widths_to_logits, widths_from_positions,
    MultiplaneImage,
};
use crate::par;

/// Plane normal used for the fronto-parallel MPI planes, in source-camera
/// coordinates.
fn mpi_plane_normal() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, 1.0)
}

/// One warped RGB-α plane at target resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedPlane {
    pub color: ImageBuffer,
    pub alpha: ImageBuffer,
}

/// All planes of an MPI warped into a target view, nearest first.
/// Depths stay in source-frame units.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedPlaneStack {
    planes: Vec<WarpedPlane>,
    depths: Vec<f64>,
}

impl WarpedPlaneStack {
    pub fn new(planes: Vec<WarpedPlane>, depths: Vec<f64>) -> Self {
        assert_eq!(planes.len(), depths.len());
        assert!(!planes.is_empty(), "stack needs at least one plane");
        let (w, h) = (planes[0].color.width(), planes[0].color.height());
        for p in &planes {
            assert!(
                p.color.width() == w
                    && p.color.height() == h
                    && p.alpha.width() == w
                    && p.alpha.height() == h,
                "all warped planes must share the target resolution"
            );
            assert_eq!(p.color.channels(), 3);
            assert_eq!(p.alpha.channels(), 1);
        }
        Self { planes, depths }
    }

    pub fn planes(&self) -> &[WarpedPlane] {
        &self.planes
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn width(&self) -> usize {
        self.planes[0].color.width()
    }

    pub fn height(&self) -> usize {
        self.planes[0].color.height()
    }
}

/// Adjoints of a scalar objective with respect to every MPI parameter.
/// Shapes mirror the source MPI.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub d_color: Vec<ImageBuffer>,
    pub d_alpha: Vec<ImageBuffer>,
    pub d_depth: Vec<f64>,
    pub d_bin_logits: Vec<f64>,
}

impl GradientBundle {
    fn zeros(n: usize, w: usize, h: usize) -> Self {
        Self {
            d_color: (0..n).map(|_| ImageBuffer::new(w, h, 3).unwrap()).collect(),
            d_alpha: (0..n).map(|_| ImageBuffer::new(w, h, 1).unwrap()).collect(),
            d_depth: vec![0.0; n],
            d_bin_logits: vec![0.0; n],
        }
    }

    /// Element-wise accumulate, used to sum per-view gradients.
    pub fn accumulate(&mut self, other: &GradientBundle) {
        assert_eq!(self.d_color.len(), other.d_color.len());
        for (a, b) in self.d_color.iter_mut().zip(&other.d_color) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        for (a, b) in self.d_alpha.iter_mut().zip(&other.d_alpha) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        for (a, b) in self.d_depth.iter_mut().zip(&other.d_depth) {
            *a += b;
        }
        for (a, b) in self.d_bin_logits.iter_mut().zip(&other.d_bin_logits) {
            *a += b;
        }
    }
}

/// Inverse-warps one plane: every target pixel looks up its source location
/// through H and bilinear-samples color and alpha. Pixels whose homogeneous
/// coordinate degenerates (|w| ≤ 1e-12) produce zeros.
pub fn warp_plane(
    plane_color: &ImageBuffer,
    plane_alpha: &ImageBuffer,
    h: &Homography,
    target_w: usize,
    target_h: usize,
    border: BorderPolicy,
) -> WarpedPlane {
    // Identity warp at matching size is a straight copy, bit-exact.
    if h.is_identity() && plane_color.width() == target_w && plane_color.height() == target_h {
        return WarpedPlane {
            color: plane_color.clone(),
            alpha: plane_alpha.clone(),
        };
    }

    let mut color = ImageBuffer::new(target_w, target_h, 3).expect("warp color buffer");
    let mut alpha = ImageBuffer::new(target_w, target_h, 1).expect("warp alpha buffer");
    let m = *h.matrix();

    par::for_each_chunk_mut(color.data_mut(), target_w * 3, |y, row| {
        for x in 0..target_w {
            if let Some(taps) = source_taps(&m, x, y) {
                plane_color.sample_taps(&taps, border, &mut row[x * 3..(x + 1) * 3]);
            }
        }
    });
    par::for_each_chunk_mut(alpha.data_mut(), target_w, |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            if let Some(taps) = source_taps(&m, x, y) {
                let mut v = [0.0];
                plane_alpha.sample_taps(&taps, border, &mut v);
                *out = v[0];
            }
        }
    });

    WarpedPlane { color, alpha }
}

#[inline]
fn source_taps(m: &nalgebra::Matrix3<f64>, x: usize, y: usize) -> Option<Taps> {
    let (u, v) = (x as f64, y as f64);
    let hz = m[(2, 0)] * u + m[(2, 1)] * v + m[(2, 2)];
    if hz.abs() <= 1e-12 {
        return None;
    }
    let hx = m[(0, 0)] * u + m[(0, 1)] * v + m[(0, 2)];
    let hy = m[(1, 0)] * u + m[(1, 1)] * v + m[(1, 2)];
    Some(Taps::at(hx / hz, hy / hz))
}

/// Over-composites a nearest-first stack. Per pixel the planes are folded in
/// a fixed sequential order, so the result does not depend on the parallel
/// schedule.
pub fn composite(stack: &WarpedPlaneStack) -> ImageBuffer {
    let (w, h) = (stack.width(), stack.height());
    let planes = stack.planes();
    let mut out = ImageBuffer::new(w, h, 3).expect("composite buffer");
    par::for_each_chunk_mut(out.data_mut(), w * 3, |y, row| {
        for x in 0..w {
            let px = &mut row[x * 3..(x + 1) * 3];
            let mut transmittance = 1.0;
            for plane in planes {
                let a = plane.alpha.get(x, y, 0);
                let c = plane.color.pixel(x, y);
                let wgt = a * transmittance;
                px[0] += wgt * c[0];
                px[1] += wgt * c[1];
                px[2] += wgt * c[2];
                transmittance *= 1.0 - a;
            }
        }
    });
    out
}

/// Warps every plane of `m` into the target camera and returns the stack.
pub fn warp_stack(
    m: &MultiplaneImage,
    pose_tgt_to_src: &RigidPose,
    k_t: &CameraIntrinsics,
    target_w: usize,
    target_h: usize,
    border: BorderPolicy,
) -> Result<WarpedPlaneStack, CameraError> {
    let normal = mpi_plane_normal();
    let homographies: Result<Vec<Homography>, CameraError> = m
        .planes()
        .iter()
        .map(|p| {
            crate::camera::homography_source_from_target(
                m.intrinsics(),
                k_t,
                pose_tgt_to_src,
                p.depth,
                &normal,
            )
        })
        .collect();
    let homographies = homographies?;

    let warped = par::map_indexed(m.n_planes(), |i| {
        let plane = &m.planes()[i];
        warp_plane(
            &plane.color,
            &plane.alpha,
            &homographies[i],
            target_w,
            target_h,
            border,
        )
    });
    Ok(WarpedPlaneStack::new(warped, m.depths()))
}

/// Renders the MPI into the target view (warp every plane, then composite).
pub fn render(
    m: &MultiplaneImage,
    pose_tgt_to_src: &RigidPose,
    k_t: &CameraIntrinsics,
    target_w: usize,
    target_h: usize,
) -> Result<ImageBuffer, CameraError> {
    let stack = warp_stack(m, pose_tgt_to_src, k_t, target_w, target_h, BorderPolicy::ZeroPad)?;
    Ok(composite(&stack))
}

/// Exact adjoint of [`render`] for an upstream gradient `d_output` (same
/// shape as the rendered image). Returns gradients for plane colors, alphas,
/// depths, and — chained through the bin-center placement and softmax — the
/// bin logits. Bilinear sampling uses its almost-everywhere derivative at
/// cell boundaries (the cell containing the point).
pub fn render_backward(
    m: &MultiplaneImage,
    pose_tgt_to_src: &RigidPose,
    k_t: &CameraIntrinsics,
    d_output: &ImageBuffer,
) -> Result<GradientBundle, CameraError> {
    assert_eq!(d_output.channels(), 3, "d_output must be 3-channel");
    let (tw, th) = (d_output.width(), d_output.height());
    let n = m.n_planes();
    let border = BorderPolicy::ZeroPad;
    let normal = mpi_plane_normal();

    let mut homographies = Vec::with_capacity(n);
    let mut depth_jacobians = Vec::with_capacity(n);
    for p in m.planes() {
        let (h, dh) = homography_and_depth_jacobian(
            m.intrinsics(),
            k_t,
            pose_tgt_to_src,
            p.depth,
            &normal,
        )?;
        homographies.push(h);
        depth_jacobians.push(dh);
    }

    // Recompute the forward intermediates.
    let stack = {
        let warped = par::map_indexed(n, |i| {
            let plane = &m.planes()[i];
            warp_plane(&plane.color, &plane.alpha, &homographies[i], tw, th, border)
        });
        WarpedPlaneStack::new(warped, m.depths())
    };

    // Stage 1: compositing adjoint per pixel. d_warped_* live at target
    // resolution, one buffer per plane.
    let mut d_warped_color: Vec<ImageBuffer> =
        (0..n).map(|_| ImageBuffer::new(tw, th, 3).unwrap()).collect();
    let mut d_warped_alpha: Vec<ImageBuffer> =
        (0..n).map(|_| ImageBuffer::new(tw, th, 1).unwrap()).collect();
    {
        // Split the per-plane buffers into row slices and regroup them per
        // row, so one parallel loop over rows can fill all planes.
        let mut color_iters: Vec<_> = d_warped_color
            .iter_mut()
            .map(|b| b.data_mut().chunks_mut(tw * 3))
            .collect();
        let mut alpha_iters: Vec<_> = d_warped_alpha
            .iter_mut()
            .map(|b| b.data_mut().chunks_mut(tw))
            .collect();
        let mut rows: Vec<(Vec<&mut [f64]>, Vec<&mut [f64]>)> = Vec::with_capacity(th);
        for _ in 0..th {
            let c: Vec<&mut [f64]> = color_iters.iter_mut().map(|it| it.next().unwrap()).collect();
            let a: Vec<&mut [f64]> = alpha_iters.iter_mut().map(|it| it.next().unwrap()).collect();
            rows.push((c, a));
        }

        let planes = stack.planes();
        let process_row = |y: usize, row: &mut (Vec<&mut [f64]>, Vec<&mut [f64]>)| {
            let (c_rows, a_rows) = row;
            let mut transmittance = vec![0.0; n + 1];
            for x in 0..tw {
                let d_out = d_output.pixel(x, y);
                transmittance[0] = 1.0;
                for i in 0..n {
                    transmittance[i + 1] =
                        transmittance[i] * (1.0 - planes[i].alpha.get(x, y, 0));
                }
                let mut g_t_next = 0.0;
                for i in (0..n).rev() {
                    let a = planes[i].alpha.get(x, y, 0);
                    let c = planes[i].color.pixel(x, y);
                    let t = transmittance[i];

                    let c_row = &mut c_rows[i][x * 3..(x + 1) * 3];
                    c_row[0] = d_out[0] * a * t;
                    c_row[1] = d_out[1] * a * t;
                    c_row[2] = d_out[2] * a * t;

                    let dot = d_out[0] * c[0] + d_out[1] * c[1] + d_out[2] * c[2];
                    a_rows[i][x] = dot * t - g_t_next * t;
                    g_t_next = dot * a + g_t_next * (1.0 - a);
                }
            }
        };

        #[cfg(feature = "rayon")]
        {
            use rayon::prelude::*;
            rows.par_iter_mut()
                .enumerate()
                .for_each(|(y, row)| process_row(y, row));
        }
        #[cfg(not(feature = "rayon"))]
        rows.iter_mut()
            .enumerate()
            .for_each(|(y, row)| process_row(y, row));
    }

    // Stage 2: per plane, scatter the warped gradients through the bilinear
    // footprint into the source buffers and chain the sampling position into
    // the depth gradient. Each plane walks target pixels in row-major order.
    let per_plane: Vec<(ImageBuffer, ImageBuffer, f64)> = par::map_indexed(n, |i| {
        let plane = &m.planes()[i];
        let (sw, sh) = (plane.color.width(), plane.color.height());
        let mut d_color = ImageBuffer::new(sw, sh, 3).unwrap();
        let mut d_alpha = ImageBuffer::new(sw, sh, 1).unwrap();
        let mut d_depth = 0.0;

        let hm = *homographies[i].matrix();
        let dh = depth_jacobians[i];
        let dwc = &d_warped_color[i];
        let dwa = &d_warped_alpha[i];

        let mut dcdx = [0.0; 3];
        let mut dcdy = [0.0; 3];
        let mut dadx = [0.0; 1];
        let mut dady = [0.0; 1];
        for y in 0..th {
            let v = y as f64;
            for x in 0..tw {
                let u = x as f64;
                let hz = hm[(2, 0)] * u + hm[(2, 1)] * v + hm[(2, 2)];
                if hz.abs() <= 1e-12 {
                    continue;
                }
                let hx = hm[(0, 0)] * u + hm[(0, 1)] * v + hm[(0, 2)];
                let hy = hm[(1, 0)] * u + hm[(1, 1)] * v + hm[(1, 2)];
                let taps = Taps::at(hx / hz, hy / hz);

                let d_c = dwc.pixel(x, y);
                let d_a = dwa.get(x, y, 0);
                d_color.scatter_taps(&taps, border, d_c);
                d_alpha.scatter_taps(&taps, border, &[d_a]);

                plane.color.sample_taps_grad(&taps, border, &mut dcdx, &mut dcdy);
                plane.alpha.sample_taps_grad(&taps, border, &mut dadx, &mut dady);
                let dl_dx = d_c[0] * dcdx[0] + d_c[1] * dcdx[1] + d_c[2] * dcdx[2] + d_a * dadx[0];
                let dl_dy = d_c[0] * dcdy[0] + d_c[1] * dcdy[1] + d_c[2] * dcdy[2] + d_a * dady[0];

                // Sampling position w.r.t. plane depth through H(depth).
                let hdx = dh[(0, 0)] * u + dh[(0, 1)] * v + dh[(0, 2)];
                let hdy = dh[(1, 0)] * u + dh[(1, 1)] * v + dh[(1, 2)];
                let hdz = dh[(2, 0)] * u + dh[(2, 1)] * v + dh[(2, 2)];
                let dx_ddepth = (hdx * hz - hx * hdz) / (hz * hz);
                let dy_ddepth = (hdy * hz - hy * hdz) / (hz * hz);
                d_depth += dl_dx * dx_ddepth + dl_dy * dy_ddepth;
            }
        }
        (d_color, d_alpha, d_depth)
    });

    let mut bundle = GradientBundle::zeros(n, m.width(), m.height());
    for (i, (dc, da, dd)) in per_plane.into_iter().enumerate() {
        bundle.d_color[i] = dc;
        bundle.d_alpha[i] = da;
        bundle.d_depth[i] = dd;
    }

    // Chain depth gradients through bin-center placement and the softmax.
    let widths = widths_from_positions(&m.depths(), m.depth_range());
    let d_widths = backprop_positions_to_widths(&bundle.d_depth, m.depth_range());
    bundle.d_bin_logits = backprop_widths_to_logits(&d_widths, &widths);

    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::homography_source_from_target;
    use crate::mpi::{DepthRange, MpiPlane, MultiplaneImage};
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr(fx: f64, cx: f64, cy: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(fx, fx, cx, cy).unwrap()
    }

    fn random_mpi(rng: &mut ChaCha8Rng, w: usize, h: usize, n: usize) -> MultiplaneImage {
        let range = DepthRange::new(1.0, 6.0).unwrap();
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let widths = crate::mpi::normalize_bin_widths(&logits);
        let depths = crate::mpi::plane_positions(&widths, &range);
        let planes = depths
            .iter()
            .map(|&d| MpiPlane {
                color: ImageBuffer::from_fn(w, h, 3, |_, _, _| rng.random_range(0.05..0.95)),
                alpha: ImageBuffer::from_fn(w, h, 1, |_, _, _| rng.random_range(0.15..0.85)),
                depth: d,
            })
            .collect();
        MultiplaneImage::new(planes, intr(8.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0), range)
            .unwrap()
    }

    fn stack_from(planes: Vec<(ImageBuffer, ImageBuffer)>, depths: Vec<f64>) -> WarpedPlaneStack {
        WarpedPlaneStack::new(
            planes
                .into_iter()
                .map(|(color, alpha)| WarpedPlane { color, alpha })
                .collect(),
            depths,
        )
    }

    /// Independent per-pixel oracle: the recursive over operator,
    /// over(i) = c_i·α_i + (1 − α_i)·over(i+1), applied front to back.
    fn composite_reference(stack: &WarpedPlaneStack) -> ImageBuffer {
        fn over(stack: &WarpedPlaneStack, i: usize, x: usize, y: usize, c: usize) -> f64 {
            if i == stack.planes().len() {
                return 0.0;
            }
            let p = &stack.planes()[i];
            let a = p.alpha.get(x, y, 0);
            p.color.get(x, y, c) * a + (1.0 - a) * over(stack, i + 1, x, y, c)
        }
        let (w, h) = (stack.width(), stack.height());
        ImageBuffer::from_fn(w, h, 3, |x, y, c| over(stack, 0, x, y, c))
    }

    #[test]
    fn composite_single_opaque_plane_returns_color() {
        let color = ImageBuffer::from_fn(3, 2, 3, |x, y, c| (x + y + c) as f64 * 0.1);
        let alpha = ImageBuffer::constant(3, 2, 1, 1.0);
        let stack = stack_from(vec![(color.clone(), alpha)], vec![2.0]);
        assert_eq!(composite(&stack), color);
    }

    #[test]
    fn composite_two_plane_example() {
        let near = (
            ImageBuffer::constant(2, 2, 3, 1.0),
            ImageBuffer::constant(2, 2, 1, 0.4),
        );
        let far = (
            ImageBuffer::constant(2, 2, 3, 0.0),
            ImageBuffer::constant(2, 2, 1, 1.0),
        );
        let out = composite(&stack_from(vec![near, far], vec![2.0, 4.0]));
        for &v in out.data() {
            assert_abs_diff_eq!(v, 0.4, epsilon = 1e-15);
        }
    }

    #[test]
    fn composite_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let planes: Vec<(ImageBuffer, ImageBuffer)> = (0..3)
                .map(|_| {
                    (
                        ImageBuffer::from_fn(4, 4, 3, |_, _, _| rng.random_range(0.0..1.0)),
                        ImageBuffer::from_fn(4, 4, 1, |_, _, _| rng.random_range(0.0..1.0)),
                    )
                })
                .collect();
            let stack = stack_from(planes, vec![1.5, 3.0, 5.0]);
            let fast = composite(&stack);
            let slow = composite_reference(&stack);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn opaque_nearest_plane_hides_everything_behind_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let near_color = ImageBuffer::from_fn(4, 4, 3, |_, _, _| rng.random_range(0.0..1.0));
        let near = (near_color.clone(), ImageBuffer::constant(4, 4, 1, 1.0));
        let far_a = (
            ImageBuffer::from_fn(4, 4, 3, |_, _, _| rng.random_range(0.0..1.0)),
            ImageBuffer::from_fn(4, 4, 1, |_, _, _| rng.random_range(0.0..1.0)),
        );
        let far_b = (
            ImageBuffer::constant(4, 4, 3, 0.123),
            ImageBuffer::constant(4, 4, 1, 0.77),
        );
        let out = composite(&stack_from(vec![near.clone(), far_a, far_b], vec![1.0, 2.0, 3.0]));
        assert_eq!(out, near_color);
    }

    #[test]
    fn compositing_weights_conserve() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let alphas: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut t = 1.0;
            let mut weight_sum = 0.0;
            for &a in &alphas {
                weight_sum += a * t;
                t *= 1.0 - a;
            }
            assert!(weight_sum <= 1.0 + 1e-12);
            // Equality iff some plane is opaque.
            if alphas.iter().any(|&a| a == 1.0) {
                assert_abs_diff_eq!(weight_sum, 1.0, epsilon = 1e-12);
            }
        }
        // Opaque plane forces the sum to exactly one.
        let mut t = 1.0;
        let mut weight_sum = 0.0;
        for &a in &[0.3, 1.0, 0.6] {
            weight_sum += a * t;
            t *= 1.0 - a;
        }
        assert_abs_diff_eq!(weight_sum, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn warp_identity_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let color = ImageBuffer::from_fn(6, 5, 3, |_, _, _| rng.random_range(0.0..1.0));
        let alpha = ImageBuffer::from_fn(6, 5, 1, |_, _, _| rng.random_range(0.0..1.0));
        let out = warp_plane(&color, &alpha, &Homography::identity(), 6, 5, BorderPolicy::ZeroPad);
        assert_eq!(out.color, color);
        assert_eq!(out.alpha, alpha);
    }

    #[test]
    fn warp_one_pixel_shift_vacates_column() {
        // H maps target pixel u to source pixel u+1: content shifts left,
        // and the last column samples out of bounds under ZeroPad.
        let w = 4;
        let color = ImageBuffer::from_fn(w, 2, 3, |x, _, _| x as f64);
        let alpha = ImageBuffer::constant(w, 2, 1, 1.0);
        let h = Homography::from_matrix(nalgebra::Matrix3::new(
            1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0,
        ))
        .unwrap();
        let out = warp_plane(&color, &alpha, &h, w, 2, BorderPolicy::ZeroPad);
        for y in 0..2 {
            for x in 0..w - 1 {
                assert_abs_diff_eq!(out.color.get(x, y, 0), (x + 1) as f64, epsilon = 1e-12);
                assert_abs_diff_eq!(out.alpha.get(x, y, 0), 1.0, epsilon = 1e-12);
            }
            assert_abs_diff_eq!(out.color.get(w - 1, y, 0), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(out.alpha.get(w - 1, y, 0), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn warp_translation_relocates_delta_to_predicted_pixel() {
        // Camera translation t=(0.1,0,0), plane at depth 2, fx=100: the
        // homography shifts content by fx·tx/d = +5 source pixels; a delta
        // at source (10, 3) must appear at target (5, 3).
        let k = intr(100.0, 0.0, 0.0);
        let pose = RigidPose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let h = homography_source_from_target(&k, &k, &pose, 2.0, &Vector3::new(0.0, 0.0, 1.0))
            .unwrap();
        let mut color = ImageBuffer::new(16, 8, 3).unwrap();
        color.set(10, 3, 0, 1.0);
        let alpha = ImageBuffer::constant(16, 8, 1, 1.0);
        let out = warp_plane(&color, &alpha, &h, 16, 8, BorderPolicy::ZeroPad);
        assert_abs_diff_eq!(out.color.get(5, 3, 0), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.color.get(6, 3, 0), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.color.get(4, 3, 0), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn render_identity_equals_unwarped_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_mpi(&mut rng, 8, 8, 3);
        let rendered = render(&m, &RigidPose::identity(), m.intrinsics(), 8, 8).unwrap();
        let stack = stack_from(
            m.planes()
                .iter()
                .map(|p| (p.color.clone(), p.alpha.clone()))
                .collect(),
            m.depths(),
        );
        assert_eq!(rendered, composite(&stack));
    }

    #[test]
    fn render_all_transparent_is_black() {
        let range = DepthRange::new(1.0, 6.0).unwrap();
        let planes = vec![
            MpiPlane {
                color: ImageBuffer::constant(4, 4, 3, 0.8),
                alpha: ImageBuffer::constant(4, 4, 1, 0.0),
                depth: 2.0,
            },
            MpiPlane {
                color: ImageBuffer::constant(4, 4, 3, 0.3),
                alpha: ImageBuffer::constant(4, 4, 1, 0.0),
                depth: 4.0,
            },
        ];
        let m = MultiplaneImage::new(planes, intr(4.0, 1.5, 1.5), range).unwrap();
        let out = render(&m, &RigidPose::identity(), m.intrinsics(), 4, 4).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn render_translated_camera_shifts_opaque_plane() {
        // Single opaque plane at depth 2, fx=16, tx=0.25: shift is
        // fx·tx/d = 2 target pixels. Compare against shifting the source.
        let w = 12;
        let range = DepthRange::new(1.0, 6.0).unwrap();
        let color = ImageBuffer::from_fn(w, 4, 3, |x, y, c| {
            ((x * 7 + y * 3 + c) % 10) as f64 / 10.0
        });
        let planes = vec![MpiPlane {
            color: color.clone(),
            alpha: ImageBuffer::constant(w, 4, 1, 1.0),
            depth: 2.0,
        }];
        let k = intr(16.0, 0.0, 0.0);
        let m = MultiplaneImage::new(planes, k, range).unwrap();
        let pose = RigidPose::from_translation(Vector3::new(0.25, 0.0, 0.0));
        let out = render(&m, &pose, &k, w, 4).unwrap();
        for y in 0..4 {
            for x in 0..w - 2 {
                for c in 0..3 {
                    assert_abs_diff_eq!(
                        out.get(x, y, c),
                        color.get(x + 2, y, c),
                        epsilon = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn render_is_linear_in_color() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_mpi(&mut rng, 8, 8, 3);
        let pose = RigidPose::from_translation(Vector3::new(0.05, -0.02, 0.0));
        let base = render(&m, &pose, m.intrinsics(), 8, 8).unwrap();

        let s = 0.37;
        let scaled_planes = m
            .planes()
            .iter()
            .map(|p| MpiPlane {
                color: ImageBuffer::from_vec(
                    p.color.width(),
                    p.color.height(),
                    3,
                    p.color.data().iter().map(|v| v * s).collect(),
                )
                .unwrap(),
                alpha: p.alpha.clone(),
                depth: p.depth,
            })
            .collect();
        let ms = MultiplaneImage::new(scaled_planes, *m.intrinsics(), *m.depth_range()).unwrap();
        let scaled = render(&ms, &pose, m.intrinsics(), 8, 8).unwrap();
        for (a, b) in scaled.data().iter().zip(base.data()) {
            assert_abs_diff_eq!(*a, b * s, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_bundle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_mpi(&mut rng, 6, 6, 3);
        let pose = RigidPose::from_translation(Vector3::new(0.03, 0.01, 0.0));
        let d_out = ImageBuffer::new(6, 6, 3).unwrap();
        let bundle = render_backward(&m, &pose, m.intrinsics(), &d_out).unwrap();
        assert!(bundle.d_color.iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
        assert!(bundle.d_alpha.iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
        assert!(bundle.d_depth.iter().all(|&v| v == 0.0));
        assert!(bundle.d_bin_logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_single_opaque_identity_plane() {
        // out = c·α with α=1 and identity warp: d_color = d_out,
        // d_alpha = d_out·c per pixel.
        let color = ImageBuffer::from_fn(4, 4, 3, |x, y, c| ((x + y + c) % 5) as f64 / 5.0);
        let range = DepthRange::new(1.0, 6.0).unwrap();
        let planes = vec![MpiPlane {
            color: color.clone(),
            alpha: ImageBuffer::constant(4, 4, 1, 1.0),
            depth: 3.0,
        }];
        let k = intr(4.0, 1.5, 1.5);
        let m = MultiplaneImage::new(planes, k, range).unwrap();
        let d_out = ImageBuffer::constant(4, 4, 3, 1.0);
        let bundle = render_backward(&m, &RigidPose::identity(), &k, &d_out).unwrap();
        for &v in bundle.d_color[0].data() {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
        for y in 0..4 {
            for x in 0..4 {
                let expected: f64 = (0..3).map(|c| color.get(x, y, c)).sum();
                assert_abs_diff_eq!(bundle.d_alpha[0].get(x, y, 0), expected, epsilon = 1e-12);
            }
        }
    }

    /// Directional adjoint check: <backward(d), delta> must match the
    /// central finite difference of <d, render(params + s*delta)>.
    #[test]
    fn backward_directional_derivative_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..5 {
            let m = random_mpi(&mut rng, 8, 8, 4);
            let pose = RigidPose::from_translation(Vector3::new(
                rng.random_range(-0.08..0.08),
                rng.random_range(-0.08..0.08),
                rng.random_range(-0.02..0.02),
            ));
            let k = *m.intrinsics();
            let d_out = ImageBuffer::from_fn(8, 8, 3, |_, _, _| rng.random_range(-1.0..1.0));
            let bundle = render_backward(&m, &pose, &k, &d_out).unwrap();

            // Random perturbation direction over colors and alphas.
            let n = m.n_planes();
            let dir_color: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..8 * 8 * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let dir_alpha: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();

            let perturbed = |s: f64| {
                let planes = m
                    .planes()
                    .iter()
                    .enumerate()
                    .map(|(i, p)| MpiPlane {
                        color: ImageBuffer::from_vec(
                            8,
                            8,
                            3,
                            p.color
                                .data()
                                .iter()
                                .zip(&dir_color[i])
                                .map(|(v, d)| v + s * d)
                                .collect(),
                        )
                        .unwrap(),
                        alpha: ImageBuffer::from_vec(
                            8,
                            8,
                            1,
                            p.alpha
                                .data()
                                .iter()
                                .zip(&dir_alpha[i])
                                .map(|(v, d)| (v + s * d).clamp(0.0, 1.0))
                                .collect(),
                        )
                        .unwrap(),
                        depth: p.depth,
                    })
                    .collect();
                let mp = MultiplaneImage::new(planes, k, *m.depth_range()).unwrap();
                let img = render(&mp, &pose, &k, 8, 8).unwrap();
                img.data()
                    .iter()
                    .zip(d_out.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };

            let h = 1e-5;
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let mut analytic = 0.0;
            for i in 0..n {
                analytic += bundle.d_color[i]
                    .data()
                    .iter()
                    .zip(&dir_color[i])
                    .map(|(g, d)| g * d)
                    .sum::<f64>();
                analytic += bundle.d_alpha[i]
                    .data()
                    .iter()
                    .zip(&dir_alpha[i])
                    .map(|(g, d)| g * d)
                    .sum::<f64>();
            }
            let tol = (1e-3 * fd.abs()).max(1e-6);
            assert!(
                (analytic - fd).abs() <= tol,
                "trial {trial}: analytic={analytic}, fd={fd}"
            );
        }
    }
}
