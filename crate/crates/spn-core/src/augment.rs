//! Training-time image augmentation: integer pixel shifts, bilinear
//! rotation about the image center, and axis flips.
//!
//! A policy carries the allowed ranges; the transform ops validate their
//! arguments against it, so a transform sampled from one policy cannot be
//! silently applied under a stricter one. Brightness or intensity jitter is
//! deliberately not implemented: pixel values are already normalized to
//! [0, 1] and the corpus rules keep intensity untouched.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bounds for sampled transforms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    /// Maximum |dx| and |dy| in whole pixels.
    pub shift_max: i64,
    /// Maximum |angle| in degrees.
    pub rotation_max_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for AugmentPolicy {
    /// Shifts up to 3 px, rotations up to 30 degrees, both flips.
    fn default() -> Self {
        AugmentPolicy {
            shift_max: 3,
            rotation_max_deg: 30.0,
            hflip: true,
            vflip: true,
        }
    }
}

/// One concrete sampled transform. Application order is fixed:
/// rotate, then shift, then flips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub dx: i64,
    pub dy: i64,
    pub theta_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
}

fn check_image(img: &Tensor, op: &'static str) -> Result<()> {
    if img.rank() != 3 {
        return Err(Error::shape(
            op,
            format!("expects an [h, w, c] image, got {:?}", img.shape()),
        ));
    }
    Ok(())
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.shift_max < 0 {
            return Err(Error::invalid(
                "augment_policy",
                format!("shift_max must be nonnegative, got {}", self.shift_max),
            ));
        }
        if !self.rotation_max_deg.is_finite() || self.rotation_max_deg < 0.0 {
            return Err(Error::invalid(
                "augment_policy",
                format!(
                    "rotation_max_deg must be nonnegative and finite, got {}",
                    self.rotation_max_deg
                ),
            ));
        }
        Ok(())
    }

    /// Translates by whole pixels; vacated cells are zero. Positive dx moves
    /// content right, positive dy moves it down.
    pub fn shift(&self, img: &Tensor, dx: i64, dy: i64) -> Result<Tensor> {
        check_image(img, "shift")?;
        if dx.abs() > self.shift_max || dy.abs() > self.shift_max {
            return Err(Error::invalid(
                "shift",
                format!(
                    "({dx}, {dy}) exceeds policy bound of {} px",
                    self.shift_max
                ),
            ));
        }
        let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let mut out = Tensor::zeros(img.shape().to_vec());
        for y in 0..h as i64 {
            let sy = y - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w as i64 {
                let sx = x - dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                let src = ((sy as usize * w) + sx as usize) * c;
                let dst = ((y as usize * w) + x as usize) * c;
                out.data_mut()[dst..dst + c].copy_from_slice(&img.data()[src..src + c]);
            }
        }
        Ok(out)
    }

    /// Rotates about the image center ((h-1)/2, (w-1)/2) with bilinear
    /// interpolation via inverse mapping; samples falling outside the image
    /// read as zero and the result is clamped to [0, 1]. A zero angle is an
    /// exact identity.
    pub fn rotate(&self, img: &Tensor, theta_deg: f64) -> Result<Tensor> {
        check_image(img, "rotate")?;
        if !theta_deg.is_finite() || theta_deg.abs() > self.rotation_max_deg {
            return Err(Error::invalid(
                "rotate",
                format!(
                    "angle {theta_deg} exceeds policy bound of {} degrees",
                    self.rotation_max_deg
                ),
            ));
        }
        let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let theta = theta_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let mut out = Tensor::zeros(img.shape().to_vec());
        let src = img.data();
        let sample = |sy: f64, sx: f64, ch: usize| -> f64 {
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let mut acc = 0.0;
            for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                let yy = y0 as i64 + oy;
                if wy == 0.0 || yy < 0 || yy >= h as i64 {
                    continue;
                }
                for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                    let xx = x0 as i64 + ox;
                    if wx == 0.0 || xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    acc += wy * wx * src[((yy as usize * w) + xx as usize) * c + ch];
                }
            }
            acc
        };
        for y in 0..h {
            let ry = y as f64 - cy;
            for x in 0..w {
                let rx = x as f64 - cx;
                // Inverse map: rotate the sampling point by -theta.
                let sx = cx + cos * rx + sin * ry;
                let sy = cy - sin * rx + cos * ry;
                let dst = (y * w + x) * c;
                for ch in 0..c {
                    out.data_mut()[dst + ch] = sample(sy, sx, ch).clamp(0.0, 1.0);
                }
            }
        }
        Ok(out)
    }

    /// Draws a transform uniformly within the policy bounds. Shifts are
    /// whole pixels, the angle is continuous, and flips are fair coin tosses
    /// (drawn only when the policy enables that axis).
    pub fn sample_transform(&self, rng: &mut ChaCha8Rng) -> Transform {
        let dx = rng.gen_range(-self.shift_max..=self.shift_max);
        let dy = rng.gen_range(-self.shift_max..=self.shift_max);
        let theta_deg = if self.rotation_max_deg > 0.0 {
            rng.gen_range(-self.rotation_max_deg..=self.rotation_max_deg)
        } else {
            0.0
        };
        let hflip = self.hflip && rng.gen::<bool>();
        let vflip = self.vflip && rng.gen::<bool>();
        Transform {
            dx,
            dy,
            theta_deg,
            hflip,
            vflip,
        }
    }

    /// Applies a transform in the canonical order: rotate, shift, flips.
    pub fn apply(&self, img: &Tensor, t: &Transform) -> Result<Tensor> {
        let mut out = self.rotate(img, t.theta_deg)?;
        out = self.shift(&out, t.dx, t.dy)?;
        if t.hflip {
            out = flip_h(&out)?;
        }
        if t.vflip {
            out = flip_v(&out)?;
        }
        Ok(out)
    }
}

/// Mirrors columns (left-right flip).
pub fn flip_h(img: &Tensor) -> Result<Tensor> {
    check_image(img, "flip_h")?;
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros(img.shape().to_vec());
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + (w - 1 - x)) * c;
            let dst = (y * w + x) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&img.data()[src..src + c]);
        }
    }
    Ok(out)
}

/// Mirrors rows (up-down flip).
pub fn flip_v(img: &Tensor) -> Result<Tensor> {
    check_image(img, "flip_v")?;
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros(img.shape().to_vec());
    for y in 0..h {
        let src = ((h - 1 - y) * w) * c;
        let dst = (y * w) * c;
        out.data_mut()[dst..dst + w * c].copy_from_slice(&img.data()[src..src + w * c]);
    }
    Ok(out)
}
