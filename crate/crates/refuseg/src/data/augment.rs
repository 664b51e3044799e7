//! Joint geometric augmentation: flips, rotation+shift, random crop, and
//! resize, applied with identical parameters to every modality slice and
//! the label map. Images interpolate bilinearly, labels nearest-neighbor.

use rand::Rng;

use super::{LabelMap, ModalityStack};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub hflip_p: f32,
    pub vflip_p: f32,
    pub rotate_limit_deg: f32,
    pub shift_limit: f32,
    pub shift_rotate_p: f32,
    pub crop_size: usize,
    pub final_size: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_p: 0.5,
            vflip_p: 0.5,
            rotate_limit_deg: 20.0,
            shift_limit: 0.1,
            shift_rotate_p: 0.5,
            crop_size: 224,
            final_size: 240,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("shift_rotate_p", self.shift_rotate_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0,1]")));
            }
        }
        if self.crop_size == 0 || self.final_size == 0 {
            return Err(Error::Config("crop_size and final_size must be positive".into()));
        }
        Ok(())
    }

    /// Scale the crop/final extents for inputs smaller than the full-scale
    /// 240x240 slices, keeping the crop/final ratio.
    pub fn scaled_to(mut self, extent: usize) -> Self {
        if self.final_size != extent {
            let ratio = self.crop_size as f64 / self.final_size as f64;
            self.final_size = extent;
            self.crop_size = ((extent as f64 * ratio).round() as usize).max(1);
        }
        self
    }
}

/// Every random decision of one augmentation application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    /// (angle in degrees, x shift fraction, y shift fraction)
    pub rot_shift: Option<(f32, f32, f32)>,
    pub crop_x: usize,
    pub crop_y: usize,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw =
        AugmentDraw { hflip: false, vflip: false, rot_shift: None, crop_x: 0, crop_y: 0 };

    /// Sample a draw for an (h, w) input under `cfg`.
    pub fn sample(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut impl Rng) -> AugmentDraw {
        let hflip = rng.gen::<f32>() < cfg.hflip_p;
        let vflip = rng.gen::<f32>() < cfg.vflip_p;
        let rot_shift = if rng.gen::<f32>() < cfg.shift_rotate_p {
            Some((
                rng.gen_range(-cfg.rotate_limit_deg..=cfg.rotate_limit_deg),
                rng.gen_range(-cfg.shift_limit..=cfg.shift_limit),
                rng.gen_range(-cfg.shift_limit..=cfg.shift_limit),
            ))
        } else {
            None
        };
        let crop_x = if w > cfg.crop_size { rng.gen_range(0..=w - cfg.crop_size) } else { 0 };
        let crop_y = if h > cfg.crop_size { rng.gen_range(0..=h - cfg.crop_size) } else { 0 };
        AugmentDraw { hflip, vflip, rot_shift, crop_x, crop_y }
    }
}

fn flip_plane(data: &[f32], h: usize, w: usize, hflip: bool, vflip: bool) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let sy = if vflip { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if hflip { w - 1 - x } else { x };
            out[y * w + x] = data[sy * w + sx];
        }
    }
    out
}

/// Inverse-mapped affine resample. For each output pixel, the source
/// coordinate undoes the shift then the rotation about the image center.
struct RotShiftMap {
    cos: f64,
    sin: f64,
    dx: f64,
    dy: f64,
    cx: f64,
    cy: f64,
}

impl RotShiftMap {
    fn new(angle_deg: f32, dx_frac: f32, dy_frac: f32, h: usize, w: usize) -> Self {
        let theta = (angle_deg as f64).to_radians();
        RotShiftMap {
            cos: theta.cos(),
            sin: theta.sin(),
            dx: dx_frac as f64 * w as f64,
            dy: dy_frac as f64 * h as f64,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        }
    }

    fn source(&self, x: usize, y: usize) -> (f64, f64) {
        let px = x as f64 - self.dx - self.cx;
        let py = y as f64 - self.dy - self.cy;
        (self.cos * px + self.sin * py + self.cx, -self.sin * px + self.cos * py + self.cy)
    }
}

fn sample_bilinear(data: &[f32], h: usize, w: usize, sx: f64, sy: f64) -> f32 {
    if sx <= -1.0 || sy <= -1.0 || sx >= w as f64 || sy >= h as f64 {
        return 0.0;
    }
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let get = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            data[y as usize * w + x as usize] as f64
        }
    };
    let (x0, y0) = (x0 as i64, y0 as i64);
    let v = get(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + get(x0 + 1, y0) * fx * (1.0 - fy)
        + get(x0, y0 + 1) * (1.0 - fx) * fy
        + get(x0 + 1, y0 + 1) * fx * fy;
    v as f32
}

fn sample_nearest_u8(data: &[u8], h: usize, w: usize, sx: f64, sy: f64) -> u8 {
    let x = sx.round() as i64;
    let y = sy.round() as i64;
    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
        0
    } else {
        data[y as usize * w + x as usize]
    }
}

fn resize_bilinear(data: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return data.to_vec();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = vec![0.0f32; oh * ow];
    for y in 0..oh {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..ow {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            out[y * ow + x] = sample_bilinear(data, h, w, src_x.max(0.0).min(w as f64 - 1.0), src_y.max(0.0).min(h as f64 - 1.0));
        }
    }
    out
}

fn resize_nearest_u8(data: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    if (h, w) == (oh, ow) {
        return data.to_vec();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = vec![0u8; oh * ow];
    for y in 0..oh {
        let src_y = (((y as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(h - 1);
        for x in 0..ow {
            let src_x = (((x as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(w - 1);
            out[y * ow + x] = data[src_y * w + src_x];
        }
    }
    out
}

fn crop<T: Copy>(data: &[T], w: usize, x0: usize, y0: usize, size: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        out.extend_from_slice(&data[y * w + x0..y * w + x0 + size]);
    }
    out
}

/// Apply one draw: flips -> rotate+shift -> random crop -> resize to
/// `final_size`. Flips and crop are exact index operations; rotate+shift is
/// the only resampling step, so a draw without it composes losslessly.
pub fn augment(stack: &ModalityStack, cfg: &AugmentConfig, draw: &AugmentDraw) -> Result<ModalityStack> {
    cfg.validate()?;
    let (h, w) = stack.extent();
    if h < cfg.crop_size || w < cfg.crop_size {
        return Err(Error::Config(format!(
            "crop size {} exceeds input extent {h}x{w}",
            cfg.crop_size
        )));
    }
    if draw.crop_x + cfg.crop_size > w || draw.crop_y + cfg.crop_size > h {
        return Err(Error::Config(format!(
            "crop window ({}, {}) + {} exceeds {h}x{w}",
            draw.crop_x, draw.crop_y, cfg.crop_size
        )));
    }

    let map = draw
        .rot_shift
        .map(|(angle, dx, dy)| RotShiftMap::new(angle, dx, dy, h, w));

    let transform_image = |plane: &[f32]| -> Vec<f32> {
        let flipped = if draw.hflip || draw.vflip {
            flip_plane(plane, h, w, draw.hflip, draw.vflip)
        } else {
            plane.to_vec()
        };
        let warped = match &map {
            Some(m) => {
                let mut out = vec![0.0f32; h * w];
                for y in 0..h {
                    for x in 0..w {
                        let (sx, sy) = m.source(x, y);
                        out[y * w + x] = sample_bilinear(&flipped, h, w, sx, sy);
                    }
                }
                out
            }
            None => flipped,
        };
        let cropped = crop(&warped, w, draw.crop_x, draw.crop_y, cfg.crop_size);
        resize_bilinear(&cropped, cfg.crop_size, cfg.crop_size, cfg.final_size, cfg.final_size)
    };

    let slices: [Tensor; 4] = std::array::from_fn(|m| {
        let out = transform_image(stack.slices[m].data());
        Tensor::new(vec![1, cfg.final_size, cfg.final_size], out).expect("sized by construction")
    });

    let label_plane = {
        let flipped: Vec<u8> = if draw.hflip || draw.vflip {
            let as_f: Vec<f32> = stack.label.classes.iter().map(|&c| c as f32).collect();
            flip_plane(&as_f, h, w, draw.hflip, draw.vflip).iter().map(|&v| v as u8).collect()
        } else {
            stack.label.classes.clone()
        };
        let warped: Vec<u8> = match &map {
            Some(m) => {
                let mut out = vec![0u8; h * w];
                for y in 0..h {
                    for x in 0..w {
                        let (sx, sy) = m.source(x, y);
                        out[y * w + x] = sample_nearest_u8(&flipped, h, w, sx, sy);
                    }
                }
                out
            }
            None => flipped,
        };
        let cropped = crop(&warped, w, draw.crop_x, draw.crop_y, cfg.crop_size);
        resize_nearest_u8(&cropped, cfg.crop_size, cfg.crop_size, cfg.final_size, cfg.final_size)
    };

    Ok(ModalityStack {
        slices,
        presence: stack.presence,
        label: LabelMap::new(cfg.final_size, cfg.final_size, label_plane)?,
    })
}
