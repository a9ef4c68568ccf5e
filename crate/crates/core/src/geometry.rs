//! Fan-beam system operator: Joseph-interpolated forward projection, its exact
//! transpose, and Ram-Lak filtered backprojection.
//!
//! All lengths in the geometry are millimetres. Line integrals are returned in
//! centimetres times the image units, so a density image in mg/cm³ projects to
//! mg/cm².

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MM_PER_CM: f64 = 10.0;

/// Number of view groups accumulated independently by the adjoint. Fixed so the
/// summation order (and therefore the result) does not depend on the thread count.
const ADJOINT_GROUPS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanBeamGeometry {
    /// Pixels per side of the square reconstruction grid.
    pub image_size: usize,
    pub pixel_pitch: f64,
    pub n_detectors: usize,
    pub detector_width: f64,
    pub source_origin_dist: f64,
    pub source_detector_dist: f64,
    /// View angles in degrees, strictly increasing within [0, 360).
    pub angles: Vec<f64>,
}

impl FanBeamGeometry {
    pub fn new(
        image_size: usize,
        pixel_pitch: f64,
        n_detectors: usize,
        detector_width: f64,
        source_origin_dist: f64,
        source_detector_dist: f64,
        angles: Vec<f64>,
    ) -> Result<Self> {
        let g = FanBeamGeometry {
            image_size,
            pixel_pitch,
            n_detectors,
            detector_width,
            source_origin_dist,
            source_detector_dist,
            angles,
        };
        g.validate()?;
        Ok(g)
    }

    /// `n_views` equally spaced angles over a full rotation starting at `offset` degrees.
    pub fn uniform_angles(n_views: usize, offset: f64) -> Vec<f64> {
        let step = 360.0 / n_views as f64;
        (0..n_views).map(|v| offset + v as f64 * step).collect()
    }

    /// Scanner constants of the reference system (384 detectors of 1.5 mm,
    /// 1000/1500 mm source distances) on a 256² grid.
    pub fn reference(n_views: usize) -> Self {
        FanBeamGeometry {
            image_size: 256,
            pixel_pitch: 1.0,
            n_detectors: 384,
            detector_width: 1.5,
            source_origin_dist: 1000.0,
            source_detector_dist: 1500.0,
            angles: Self::uniform_angles(n_views, 0.0),
        }
    }

    /// Desk-scale geometry covering the same 256 mm field of view with
    /// `image_size` pixels; the detector count scales with the grid.
    pub fn desk(image_size: usize, n_views: usize) -> Self {
        let fov = 256.0;
        let n_detectors = image_size * 3 / 2;
        FanBeamGeometry {
            image_size,
            pixel_pitch: fov / image_size as f64,
            n_detectors,
            // 384 mm at the detector plane, i.e. 256 mm at isocentre times 1.5 magnification
            detector_width: 384.0 / n_detectors as f64,
            source_origin_dist: 1000.0,
            source_detector_dist: 1500.0,
            angles: Self::uniform_angles(n_views, 0.0),
        }
    }

    pub fn with_angles(&self, angles: Vec<f64>) -> Result<Self> {
        let mut g = self.clone();
        g.angles = angles;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidGeometry(m.to_string()));
        if self.image_size == 0 {
            return bad("image_size must be positive");
        }
        if !(self.pixel_pitch > 0.0) {
            return bad("pixel_pitch must be positive");
        }
        if self.n_detectors == 0 {
            return bad("n_detectors must be at least 1");
        }
        if !(self.detector_width > 0.0) {
            return bad("detector_width must be positive");
        }
        if !(self.source_origin_dist > 0.0 && self.source_detector_dist > self.source_origin_dist) {
            return bad("require source_detector_dist > source_origin_dist > 0");
        }
        if self.angles.is_empty() {
            return bad("at least one view angle is required");
        }
        if self.angles.iter().any(|a| !(0.0..360.0).contains(a)) {
            return bad("angles must lie in [0, 360)");
        }
        if self.angles.windows(2).any(|w| w[1] <= w[0]) {
            return bad("angles must be strictly increasing");
        }
        // the source must stay outside the image, otherwise rays start inside the object
        let half_diag = self.image_size as f64 * self.pixel_pitch * std::f64::consts::FRAC_1_SQRT_2;
        if self.source_origin_dist <= half_diag {
            return bad("source lies inside the image field");
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn n_rays(&self) -> usize {
        self.n_views() * self.n_detectors
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.image_size, self.image_size)
    }

    pub fn sino_shape(&self) -> (usize, usize) {
        (self.n_views(), self.n_detectors)
    }

    fn check_image(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.dim() != self.image_shape() {
            return Err(Error::DimensionMismatch {
                expected: vec![self.image_size, self.image_size],
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_sino(&self, p: &ArrayView2<f64>) -> Result<()> {
        if p.dim() != self.sino_shape() {
            return Err(Error::DimensionMismatch {
                expected: vec![self.n_views(), self.n_detectors],
                actual: p.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn view_frame(&self, view: usize) -> ViewFrame {
        let beta = self.angles[view].to_radians();
        let (s, c) = beta.sin_cos();
        ViewFrame {
            source: [self.source_origin_dist * c, self.source_origin_dist * s],
            det_centre: [
                -(self.source_detector_dist - self.source_origin_dist) * c,
                -(self.source_detector_dist - self.source_origin_dist) * s,
            ],
            axis_u: [-s, c],
            beta,
        }
    }

    fn detector_offset(&self, det: usize) -> f64 {
        (det as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_width
    }

    /// Visits every (pixel, weight) pair of the Joseph kernel for one ray.
    /// Weights are in centimetres, rounded to `f32` so the stored
    /// [`SystemMatrix`] reproduces this operator exactly. Forward projection and its transpose are both
    /// built from this single routine, which makes them an exact adjoint pair.
    fn trace_ray(&self, frame: &ViewFrame, det: usize, mut visit: impl FnMut(usize, f64)) {
        let n = self.image_size;
        let pitch = self.pixel_pitch;
        let half = (n as f64 - 1.0) / 2.0;
        let u = self.detector_offset(det);
        let end = [
            frame.det_centre[0] + u * frame.axis_u[0],
            frame.det_centre[1] + u * frame.axis_u[1],
        ];
        let mut dir = [end[0] - frame.source[0], end[1] - frame.source[1]];
        let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        dir[0] /= len;
        dir[1] /= len;
        let src = frame.source;

        // March along the dominant axis; the fractional index on the other axis
        // is affine in the marching index, `f = a + b k`.
        let (major_col, a, b) = if dir[0].abs() >= dir[1].abs() {
            let b = -dir[1] / dir[0];
            let a = half - (src[1] + (-half * pitch - src[0]) * dir[1] / dir[0]) / pitch;
            (true, a, b)
        } else {
            let b = -dir[0] / dir[1];
            let a = half + (src[0] + (half * pitch - src[1]) * dir[0] / dir[1]) / pitch;
            (false, a, b)
        };
        let step = pitch / (if major_col { dir[0] } else { dir[1] }).abs() / MM_PER_CM;
        // indices k with f(k) in [-1, n), widened by one and clamped
        let (k_lo, k_hi) = if b.abs() < 1e-300 {
            (0usize, n)
        } else {
            let k1 = (-1.0 - a) / b;
            let k2 = (n as f64 - a) / b;
            let (lo, hi) = if k1 < k2 { (k1, k2) } else { (k2, k1) };
            let lo = (lo.floor() - 1.0).max(0.0);
            let hi = (hi.ceil() + 1.0).min(n as f64);
            if hi <= lo {
                return;
            }
            (lo as usize, hi as usize)
        };
        let last = (n - 1) as f64;
        for k in k_lo..k_hi {
            let f = a + b * k as f64;
            let f0 = f.floor();
            if !(-1.0..=last).contains(&f0) {
                continue;
            }
            let frac = f - f0;
            let i0 = f0 as isize;
            let (first, second) = if major_col {
                // (row i0, column k) and (row i0 + 1, column k)
                (i0 * n as isize + k as isize, (i0 + 1) * n as isize + k as isize)
            } else {
                (k as isize * n as isize + i0, k as isize * n as isize + i0 + 1)
            };
            if i0 >= 0 {
                visit(first as usize, ((1.0 - frac) * step) as f32 as f64);
            }
            if i0 + 1 < n as isize {
                visit(second as usize, (frac * step) as f32 as f64);
            }
        }
    }

    /// Single-channel forward projection `A x`.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_image(x)?;
        let xs = x.as_standard_layout();
        let img = xs.as_slice().expect("standard layout");
        let nd = self.n_detectors;
        let mut out = vec![0.0; self.n_rays()];
        out.par_chunks_mut(nd).enumerate().for_each(|(view, row)| {
            let frame = self.view_frame(view);
            for (det, slot) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                self.trace_ray(&frame, det, |idx, w| acc += w * img[idx]);
                *slot = acc;
            }
        });
        Ok(Array2::from_shape_vec(self.sino_shape(), out).expect("shape"))
    }

    /// Single-channel transpose `Aᵀ p` (unfiltered backprojection).
    pub fn adjoint(&self, p: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_sino(p)?;
        let ps = p.as_standard_layout();
        let sino = ps.as_slice().expect("standard layout");
        let nd = self.n_detectors;
        let nv = self.n_views();
        let m = self.image_size * self.image_size;
        let groups = ADJOINT_GROUPS.min(nv);
        let partials: Vec<Vec<f64>> = (0..groups)
            .into_par_iter()
            .map(|g| {
                let mut acc = vec![0.0; m];
                let mut view = g;
                while view < nv {
                    let frame = self.view_frame(view);
                    for det in 0..nd {
                        let v = sino[view * nd + det];
                        if v != 0.0 {
                            self.trace_ray(&frame, det, |idx, w| acc[idx] += w * v);
                        }
                    }
                    view += groups;
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; m];
        for part in &partials {
            for (o, v) in out.iter_mut().zip(part) {
                *o += v;
            }
        }
        Ok(Array2::from_shape_vec(self.image_shape(), out).expect("shape"))
    }

    /// Indices of pixels touched by a single ray, for support checks.
    pub fn ray_support(&self, view: usize, det: usize) -> Vec<usize> {
        let frame = self.view_frame(view);
        let mut idx = Vec::new();
        self.trace_ray(&frame, det, |i, w| {
            if w > 0.0 {
                idx.push(i)
            }
        });
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    /// Fan-beam filtered backprojection with a Ram-Lak ramp for a flat,
    /// equispaced detector over a full rotation.
    pub fn fbp(&self, p: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_sino(p)?;
        if self.n_views() < 2 {
            return Err(Error::InvalidGeometry(
                "filtered backprojection needs at least two views".into(),
            ));
        }
        let nd = self.n_detectors;
        let sod = self.source_origin_dist / MM_PER_CM;
        let mag = self.source_detector_dist / self.source_origin_dist;
        // detector sampling referred to the isocentre, in cm
        let tau = self.detector_width / mag / MM_PER_CM;
        let det_half = (nd as f64 - 1.0) / 2.0;

        let padded = (2 * nd).next_power_of_two();
        let kernel_fft = ram_lak_spectrum(padded, tau);
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(padded);
        let ifft = planner.plan_fft_inverse(padded);

        let cos_weight: Vec<f64> = (0..nd)
            .map(|j| {
                let s = (j as f64 - det_half) * tau;
                sod / (sod * sod + s * s).sqrt()
            })
            .collect();

        let filtered: Vec<Vec<f64>> = p
            .outer_iter()
            .map(|row| {
                let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); padded];
                for j in 0..nd {
                    buf[j] = Complex::new(row[j] * cos_weight[j], 0.0);
                }
                fft.process(&mut buf);
                for (b, k) in buf.iter_mut().zip(kernel_fft.iter()) {
                    *b *= k;
                }
                ifft.process(&mut buf);
                let scale = tau / padded as f64;
                buf[..nd].iter().map(|c| 0.5 * c.re * scale).collect()
            })
            .collect();

        let n = self.image_size;
        let half = (n as f64 - 1.0) / 2.0;
        let pitch = self.pixel_pitch / MM_PER_CM;
        let d_beta = 2.0 * PI / self.n_views() as f64;
        let frames: Vec<ViewFrame> = (0..self.n_views()).map(|v| self.view_frame(v)).collect();
        let mut out = vec![0.0; n * n];
        out.par_chunks_mut(n).enumerate().for_each(|(r, row)| {
            let y = (half - r as f64) * pitch;
            for (c, slot) in row.iter_mut().enumerate() {
                let x = (c as f64 - half) * pitch;
                let mut acc = 0.0;
                for (frame, q) in frames.iter().zip(&filtered) {
                    let (sb, cb) = frame.beta.sin_cos();
                    let l = sod - (x * cb + y * sb);
                    let u = l / sod;
                    let s = sod * (-x * sb + y * cb) / l;
                    let jf = s / tau + det_half;
                    let j0 = jf.floor();
                    if j0 < 0.0 || j0 >= (nd - 1) as f64 {
                        continue;
                    }
                    let f = jf - j0;
                    let j0 = j0 as usize;
                    let val = (1.0 - f) * q[j0] + f * q[j0 + 1];
                    acc += val / (u * u);
                }
                *slot = acc * d_beta;
            }
        });
        Ok(Array2::from_shape_vec((n, n), out).expect("shape"))
    }
}

/// The projector stored as a sparse matrix: rows (rays) for `A x`, columns
/// (pixels) for `Aᵀ p`. Both products are gathers, so neither depends on the
/// thread count. Worth building when one geometry is applied many times.
#[derive(Debug, Clone)]
pub struct SystemMatrix {
    geometry: FanBeamGeometry,
    row_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    row_val: Vec<f32>,
    col_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    col_val: Vec<f32>,
}

impl SystemMatrix {
    pub fn new(g: &FanBeamGeometry) -> Result<Self> {
        g.validate()?;
        let nd = g.n_detectors;
        let per_view: Vec<Vec<Vec<(u32, f32)>>> = (0..g.n_views())
            .into_par_iter()
            .map(|view| {
                let frame = g.view_frame(view);
                (0..nd)
                    .map(|det| {
                        let mut row = Vec::with_capacity(2 * g.image_size);
                        g.trace_ray(&frame, det, |i, w| row.push((i as u32, w as f32)));
                        row
                    })
                    .collect()
            })
            .collect();
        let n_pix = g.image_size * g.image_size;
        let mut row_ptr = Vec::with_capacity(g.n_rays() + 1);
        let mut row_idx = Vec::new();
        let mut row_val = Vec::new();
        let mut col_count = vec![0usize; n_pix];
        row_ptr.push(0);
        for row in per_view.iter().flatten() {
            for &(i, w) in row {
                row_idx.push(i);
                row_val.push(w);
                col_count[i as usize] += 1;
            }
            row_ptr.push(row_idx.len());
        }
        let mut col_ptr = vec![0usize; n_pix + 1];
        for i in 0..n_pix {
            col_ptr[i + 1] = col_ptr[i] + col_count[i];
        }
        let mut fill = col_ptr[..n_pix].to_vec();
        let mut col_idx = vec![0u32; row_idx.len()];
        let mut col_val = vec![0f32; row_idx.len()];
        for r in 0..g.n_rays() {
            for k in row_ptr[r]..row_ptr[r + 1] {
                let c = row_idx[k] as usize;
                col_idx[fill[c]] = r as u32;
                col_val[fill[c]] = row_val[k];
                fill[c] += 1;
            }
        }
        Ok(SystemMatrix {
            geometry: g.clone(),
            row_ptr,
            row_idx,
            row_val,
            col_ptr,
            col_idx,
            col_val,
        })
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.geometry.check_image(x)?;
        let xs = x.as_standard_layout();
        let img = xs.as_slice().expect("standard layout");
        let out: Vec<f64> = (0..self.geometry.n_rays())
            .into_par_iter()
            .with_min_len(256)
            .map(|r| {
                let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
                self.row_idx[a..b]
                    .iter()
                    .zip(&self.row_val[a..b])
                    .map(|(&i, &w)| w as f64 * img[i as usize])
                    .sum()
            })
            .collect();
        Ok(Array2::from_shape_vec(self.geometry.sino_shape(), out).expect("shape"))
    }

    pub fn adjoint(&self, p: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.geometry.check_sino(p)?;
        let ps = p.as_standard_layout();
        let sino = ps.as_slice().expect("standard layout");
        let n_pix = self.geometry.image_size * self.geometry.image_size;
        let out: Vec<f64> = (0..n_pix)
            .into_par_iter()
            .with_min_len(256)
            .map(|c| {
                let (a, b) = (self.col_ptr[c], self.col_ptr[c + 1]);
                self.col_idx[a..b]
                    .iter()
                    .zip(&self.col_val[a..b])
                    .map(|(&r, &w)| w as f64 * sino[r as usize])
                    .sum()
            })
            .collect();
        Ok(Array2::from_shape_vec(self.geometry.image_shape(), out).expect("shape"))
    }
}

struct ViewFrame {
    source: [f64; 2],
    det_centre: [f64; 2],
    axis_u: [f64; 2],
    beta: f64,
}

/// FFT of the spatial Ram-Lak kernel sampled at `tau`, laid out circularly so
/// linear convolution of an `n/2`-long signal has no wrap-around.
fn ram_lak_spectrum(n: usize, tau: f64) -> Vec<Complex<f64>> {
    let mut h = vec![Complex::new(0.0, 0.0); n];
    for (i, slot) in h.iter_mut().enumerate() {
        let k = if i <= n / 2 { i as i64 } else { i as i64 - n as i64 };
        let v = if k == 0 {
            1.0 / (4.0 * tau * tau)
        } else if k % 2 != 0 {
            -1.0 / ((k * k) as f64 * PI * PI * tau * tau)
        } else {
            0.0
        };
        *slot = Complex::new(v, 0.0);
    }
    FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut h);
    h
}

/// Two-channel density image, channel 0 = bone, channel 1 = water (mg/cm³).
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialImage {
    pub data: Array3<f64>,
}

impl MaterialImage {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 2 || data.shape()[1] != data.shape()[2] {
            return Err(Error::DimensionMismatch {
                expected: vec![2, data.shape()[1], data.shape()[1]],
                actual: data.shape().to_vec(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("material image"));
        }
        Ok(MaterialImage { data })
    }

    pub fn zeros(side: usize) -> Self {
        MaterialImage {
            data: Array3::zeros((2, side, side)),
        }
    }

    pub fn from_channels(bone: Array2<f64>, water: Array2<f64>) -> Result<Self> {
        let data = ndarray::stack(Axis(0), &[bone.view(), water.view()])
            .map_err(|_| Error::DimensionMismatch {
                expected: bone.shape().to_vec(),
                actual: water.shape().to_vec(),
            })?;
        Self::new(data)
    }

    pub fn side(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channel(&self, s: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), s)
    }
}

/// Two-channel material line integrals (mg/cm²), shape `[2, views, detectors]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialSinogram {
    pub data: Array3<f64>,
}

impl MaterialSinogram {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 2 {
            return Err(Error::DimensionMismatch {
                expected: vec![2, data.shape()[1], data.shape()[2]],
                actual: data.shape().to_vec(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("material sinogram"));
        }
        Ok(MaterialSinogram { data })
    }

    pub fn channel(&self, s: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), s)
    }

    pub fn check_geometry(&self, g: &FanBeamGeometry) -> Result<()> {
        let (v, d) = g.sino_shape();
        if self.data.shape() != [2, v, d] {
            return Err(Error::DimensionMismatch {
                expected: vec![2, v, d],
                actual: self.data.shape().to_vec(),
            });
        }
        Ok(())
    }
}

fn per_channel(
    data: &Array3<f64>,
    f: impl Fn(&ArrayView2<f64>) -> Result<Array2<f64>>,
) -> Result<Array3<f64>> {
    let a = f(&data.index_axis(Axis(0), 0))?;
    let b = f(&data.index_axis(Axis(0), 1))?;
    Ok(ndarray::stack(Axis(0), &[a.view(), b.view()]).expect("matching channel shapes"))
}

pub fn forward_project(x: &MaterialImage, g: &FanBeamGeometry) -> Result<MaterialSinogram> {
    Ok(MaterialSinogram {
        data: per_channel(&x.data, |c| g.forward(c))?,
    })
}

/// Exact transpose of [`forward_project`]; may contain negative values.
pub fn back_project(p: &MaterialSinogram, g: &FanBeamGeometry) -> Result<Array3<f64>> {
    p.check_geometry(g)?;
    per_channel(&p.data, |c| g.adjoint(c))
}

pub fn fbp_reconstruct(p: &MaterialSinogram, g: &FanBeamGeometry) -> Result<Array3<f64>> {
    p.check_geometry(g)?;
    per_channel(&p.data, |c| g.fbp(c))
}

/// Fast kVp switching: consecutive views of one rotation alternate between the
/// low- and high-energy source, so each channel sees its own angle subset.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEnergyScan {
    pub low: FanBeamGeometry,
    pub high: FanBeamGeometry,
}

impl DualEnergyScan {
    /// `views_per_channel` views per energy; the high-energy views sit half a
    /// step after the low-energy ones.
    pub fn fast_switching(base: &FanBeamGeometry, views_per_channel: usize) -> Result<Self> {
        let step = 360.0 / views_per_channel as f64;
        let low = base.with_angles(FanBeamGeometry::uniform_angles(views_per_channel, 0.0))?;
        let high = base.with_angles(FanBeamGeometry::uniform_angles(views_per_channel, step / 2.0))?;
        Ok(DualEnergyScan { low, high })
    }

    /// Both energies acquired at the same angles.
    pub fn coincident(base: &FanBeamGeometry, views_per_channel: usize) -> Result<Self> {
        let g = base.with_angles(FanBeamGeometry::uniform_angles(views_per_channel, 0.0))?;
        Ok(DualEnergyScan {
            low: g.clone(),
            high: g,
        })
    }

    pub fn build(base: &FanBeamGeometry, views_per_channel: usize, kvp_switching: bool) -> Result<Self> {
        if kvp_switching {
            Self::fast_switching(base, views_per_channel)
        } else {
            Self::coincident(base, views_per_channel)
        }
    }

    pub fn channel(&self, k: usize) -> &FanBeamGeometry {
        if k == 0 {
            &self.low
        } else {
            &self.high
        }
    }

    /// Geometry on which material sinograms and training labels live: the
    /// low-energy view set.
    pub fn material_geometry(&self) -> &FanBeamGeometry {
        &self.low
    }
}

/// Shared handle used by long-running jobs.
pub type SharedGeometry = Arc<FanBeamGeometry>;
