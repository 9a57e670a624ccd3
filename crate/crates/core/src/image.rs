//! `f64` raster container plus the resampling primitives the renderer and
//! the coarse-to-fine schedule are built on.
//!
//! Pixel centers sit at integer coordinates; `bilinear_sample(x, y)` with
//! integral `x`, `y` returns that pixel exactly. Color and alpha data are
//! kept in [0, 1] at I/O boundaries, not re-checked per arithmetic op.

use thiserror::Error;

use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("channel count must be 1, 3 or 4, got {0}")]
    InvalidChannelCount(usize),
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },
    #[error("data length {len} does not match {width}x{height}x{channels}")]
    DataLengthMismatch {
        len: usize,
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("index {index} out of range for buffer of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("step size must be positive, got {0}")]
    NonPositiveStep(f64),
}

/// How samples outside the raster are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BorderPolicy {
    /// Out-of-bounds neighbors contribute zero in all channels.
    ZeroPad,
    /// Coordinates are clamped to the border pixel.
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    /// Box/area averaging.
    Down,
    /// Bilinear interpolation (clamped at borders).
    Up,
}

/// Row-major H×W×C buffer of finite `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self, ImageError> {
        Self::from_vec(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn from_vec(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(ImageError::InvalidChannelCount(channels));
        }
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyImage { width, height });
        }
        if data.len() != width * height * channels {
            return Err(ImageError::DataLengthMismatch {
                len: data.len(),
                width,
                height,
                channels,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::from_vec(width, height, channels, vec![value; width * height * channels])
            .expect("valid constant image")
    }

    pub fn from_fn<F>(width: usize, height: usize, channels: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize, usize) -> f64,
    {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::from_vec(width, height, channels, data).expect("valid generated image")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    /// Bilinear interpolation of the four neighbors of (x, y); out-of-bounds
    /// neighbors follow `border`. Returns one value per channel.
    pub fn bilinear_sample(&self, x: f64, y: f64, border: BorderPolicy) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.bilinear_sample_into(x, y, border, &mut out);
        out
    }

    pub fn bilinear_sample_into(&self, x: f64, y: f64, border: BorderPolicy, out: &mut [f64]) {
        let taps = Taps::at(x, y);
        self.sample_taps(&taps, border, out);
    }

    #[inline]
    pub(crate) fn sample_taps(&self, taps: &Taps, border: BorderPolicy, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        for (ix, iy, w) in taps.corners() {
            if w == 0.0 {
                continue;
            }
            match self.resolve(ix, iy, border) {
                Some(base) => {
                    for (c, o) in out.iter_mut().enumerate() {
                        *o += w * self.data[base + c];
                    }
                }
                None => {}
            }
        }
    }

    /// Spatial derivative of the bilinear sample at `taps`, one (d/dx, d/dy)
    /// pair per channel, written as `dx` then `dy` runs of `channels` values.
    /// Uses the a.e. derivative of the cell containing the point.
    #[inline]
    pub(crate) fn sample_taps_grad(
        &self,
        taps: &Taps,
        border: BorderPolicy,
        dx: &mut [f64],
        dy: &mut [f64],
    ) {
        debug_assert_eq!(dx.len(), self.channels);
        debug_assert_eq!(dy.len(), self.channels);
        let mut v = [[0.0; 4]; 4]; // [corner][channel], channels <= 4
        let corners = [
            (taps.x0, taps.y0),
            (taps.x0 + 1, taps.y0),
            (taps.x0, taps.y0 + 1),
            (taps.x0 + 1, taps.y0 + 1),
        ];
        for (k, &(ix, iy)) in corners.iter().enumerate() {
            if let Some(base) = self.resolve(ix, iy, border) {
                for c in 0..self.channels {
                    v[k][c] = self.data[base + c];
                }
            }
        }
        for c in 0..self.channels {
            dx[c] = (1.0 - taps.fy) * (v[1][c] - v[0][c]) + taps.fy * (v[3][c] - v[2][c]);
            dy[c] = (1.0 - taps.fx) * (v[2][c] - v[0][c]) + taps.fx * (v[3][c] - v[1][c]);
        }
    }

    /// Adjoint of [`ImageBuffer::sample_taps`]: accumulates `values` into the
    /// four tap locations with the bilinear weights. Out-of-bounds taps are
    /// dropped under `ZeroPad` and folded onto the border under `Clamp`,
    /// mirroring the forward lookup.
    #[inline]
    pub(crate) fn scatter_taps(&mut self, taps: &Taps, border: BorderPolicy, values: &[f64]) {
        debug_assert_eq!(values.len(), self.channels);
        for (ix, iy, w) in taps.corners() {
            if w == 0.0 {
                continue;
            }
            if let Some(base) = self.resolve(ix, iy, border) {
                for (c, &val) in values.iter().enumerate() {
                    self.data[base + c] += w * val;
                }
            }
        }
    }

    #[inline]
    fn resolve(&self, ix: i64, iy: i64, border: BorderPolicy) -> Option<usize> {
        let (ix, iy) = match border {
            BorderPolicy::ZeroPad => {
                if ix < 0 || iy < 0 || ix >= self.width as i64 || iy >= self.height as i64 {
                    return None;
                }
                (ix as usize, iy as usize)
            }
            BorderPolicy::Clamp => (
                ix.clamp(0, self.width as i64 - 1) as usize,
                iy.clamp(0, self.height as i64 - 1) as usize,
            ),
        };
        Some((iy * self.width + ix) * self.channels)
    }
}

/// The four-neighbor footprint of a bilinear lookup at (x, y).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps {
    pub x0: i64,
    pub y0: i64,
    pub fx: f64,
    pub fy: f64,
}

impl Taps {
    #[inline]
    pub fn at(x: f64, y: f64) -> Taps {
        let x0 = x.floor();
        let y0 = y.floor();
        Taps {
            x0: x0 as i64,
            y0: y0 as i64,
            fx: x - x0,
            fy: y - y0,
        }
    }

    #[inline]
    pub fn corners(&self) -> [(i64, i64, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.x0, self.y0, (1.0 - fx) * (1.0 - fy)),
            (self.x0 + 1, self.y0, fx * (1.0 - fy)),
            (self.x0, self.y0 + 1, (1.0 - fx) * fy),
            (self.x0 + 1, self.y0 + 1, fx * fy),
        ]
    }
}

/// Resamples to `new_w` × `new_h`. `Down` uses box/area averaging, `Up` uses
/// bilinear interpolation; both map constants to constants.
pub fn resize(img: &ImageBuffer, new_w: usize, new_h: usize, mode: ResizeMode) -> ImageBuffer {
    assert!(new_w >= 1 && new_h >= 1, "target size must be positive");
    if new_w == img.width() && new_h == img.height() {
        return img.clone();
    }
    match mode {
        ResizeMode::Down => {
            let tmp = area_resample_axis(img, new_w, Axis::X);
            area_resample_axis(&tmp, new_h, Axis::Y)
        }
        ResizeMode::Up => bilinear_resize(img, new_w, new_h),
    }
}

enum Axis {
    X,
    Y,
}

/// Area-weighted resampling along one axis: destination cell j covers the
/// source interval [j·r, (j+1)·r) with r = src/dst, and each overlapped
/// source pixel contributes proportionally to its covered length.
fn area_resample_axis(img: &ImageBuffer, new_len: usize, axis: Axis) -> ImageBuffer {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let (src_len, out_w, out_h) = match axis {
        Axis::X => (w, new_len, h),
        Axis::Y => (h, w, new_len),
    };
    if src_len == new_len {
        return img.clone();
    }
    let r = src_len as f64 / new_len as f64;

    // Per destination index: (first source index, weights).
    let spans: Vec<(usize, Vec<f64>)> = (0..new_len)
        .map(|j| {
            let lo = j as f64 * r;
            let hi = (j as f64 + 1.0) * r;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src_len).max(first + 1);
            let mut weights = Vec::with_capacity(last - first);
            for i in first..last {
                let overlap = hi.min(i as f64 + 1.0) - lo.max(i as f64);
                weights.push(overlap.max(0.0) / r);
            }
            (first, weights)
        })
        .collect();

    let mut out = ImageBuffer::new(out_w, out_h, ch).expect("valid resize target");
    let row_len = out_w * ch;
    par::for_each_chunk_mut(out.data_mut(), row_len, |y, row| {
        for x in 0..out_w {
            let (first, weights) = match axis {
                Axis::X => &spans[x],
                Axis::Y => &spans[y],
            };
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, wgt) in weights.iter().enumerate() {
                    let (sx, sy) = match axis {
                        Axis::X => (first + k, y),
                        Axis::Y => (x, first + k),
                    };
                    acc += wgt * img.get(sx, sy, c);
                }
                row[x * ch + c] = acc;
            }
        }
    });
    out
}

fn bilinear_resize(img: &ImageBuffer, new_w: usize, new_h: usize) -> ImageBuffer {
    let ch = img.channels();
    let rx = img.width() as f64 / new_w as f64;
    let ry = img.height() as f64 / new_h as f64;
    let mut out = ImageBuffer::new(new_w, new_h, ch).expect("valid resize target");
    let row_len = new_w * ch;
    par::for_each_chunk_mut(out.data_mut(), row_len, |y, row| {
        let sy = (y as f64 + 0.5) * ry - 0.5;
        for x in 0..new_w {
            let sx = (x as f64 + 0.5) * rx - 0.5;
            img.bilinear_sample_into(sx, sy, BorderPolicy::Clamp, &mut row[x * ch..(x + 1) * ch]);
        }
    });
    out
}

/// Central difference (f(img + h·e_index) − f(img − h·e_index)) / (2h).
/// The workhorse behind every gradient check in the test suites.
pub fn finite_difference_probe<F>(
    f: F,
    img: &ImageBuffer,
    index: usize,
    h: f64,
) -> Result<f64, ImageError>
where
    F: Fn(&ImageBuffer) -> f64,
{
    if index >= img.data().len() {
        return Err(ImageError::IndexOutOfRange {
            index,
            len: img.data().len(),
        });
    }
    if !(h > 0.0) {
        return Err(ImageError::NonPositiveStep(h));
    }
    let mut plus = img.clone();
    plus.data_mut()[index] += h;
    let mut minus = img.clone();
    minus.data_mut()[index] -= h;
    Ok((f(&plus) - f(&minus)) / (2.0 * h))
}
