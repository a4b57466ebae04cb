//! Geometric and photometric augmentation over [C,H,W] tensors.
//!
//! Pipeline order is fixed: center crop, random crop, hflip, vflip, scale,
//! rotate, resize to target, cutout, brightness. Random draws happen in that
//! order and only for enabled (and applicable) ops, so a stream replay
//! reproduces the exact transform. Geometric ops hit image and mask with the
//! same coordinates; the mask always moves by nearest-neighbor with zero fill
//! and is re-binarized, while the image gets bilinear sampling with edge
//! replication. Cutout and brightness touch the image only.

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::element::Element;
use crate::rng::SeedStream;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    CenterCrop,
    RandomCrop,
    Hflip,
    Vflip,
    Scale,
    Rotate,
    Cutout,
    Brightness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub enabled: Vec<AugKind>,
    pub crop_margin: usize,
    pub target_size: usize,
    pub rotate_max_deg: f64,
    pub scale_range: [f64; 2],
    pub cutout_frac: f64,
    pub brightness_delta: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            enabled: vec![
                AugKind::CenterCrop,
                AugKind::RandomCrop,
                AugKind::Hflip,
                AugKind::Vflip,
                AugKind::Scale,
                AugKind::Rotate,
                AugKind::Cutout,
                AugKind::Brightness,
            ],
            crop_margin: 320,
            target_size: 256,
            rotate_max_deg: 90.0,
            scale_range: [0.8, 1.2],
            cutout_frac: 0.25,
            brightness_delta: 0.2,
        }
    }
}

impl AugmentationSpec {
    /// The evaluation pipeline: no randomness, just the mandatory resize.
    pub fn resize_only(target_size: usize) -> AugmentationSpec {
        AugmentationSpec {
            enabled: Vec::new(),
            target_size,
            ..AugmentationSpec::default()
        }
    }

    pub fn on(&self, k: AugKind) -> bool {
        self.enabled.contains(&k)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.target_size == 0 {
            return Err("target_size must be >= 1".into());
        }
        if self.on(AugKind::CenterCrop)
            && self.on(AugKind::RandomCrop)
            && self.crop_margin < self.target_size
        {
            return Err(format!(
                "crop_margin {} must be >= target_size {} when both crops are enabled",
                self.crop_margin, self.target_size
            ));
        }
        if !(self.scale_range[0] <= self.scale_range[1] && self.scale_range[0] > 0.0) {
            return Err(format!("scale_range {:?} must be ordered and positive", self.scale_range));
        }
        if !(0.0..=180.0).contains(&self.rotate_max_deg) {
            return Err(format!("rotate_max_deg {} out of [0, 180]", self.rotate_max_deg));
        }
        if !(0.0..=1.0).contains(&self.cutout_frac) {
            return Err(format!("cutout_frac {} out of [0, 1]", self.cutout_frac));
        }
        if !(0.0..=1.0).contains(&self.brightness_delta) {
            return Err(format!("brightness_delta {} out of [0, 1]", self.brightness_delta));
        }
        Ok(())
    }
}

fn chw(t: &Tensor<impl Element>) -> (usize, usize, usize) {
    let d = t.shape().dims();
    debug_assert_eq!(d.len(), 3);
    (d[0], d[1], d[2])
}

/// Bilinear resize with half-pixel alignment and edge clamping, per channel.
pub fn resize_bilinear<T: Element>(src: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (c, h, w) = chw(src);
    if (h, w) == (oh, ow) {
        return src.clone();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let src_d = src.data();
    Tensor::from_fn(Shape::new(vec![c, oh, ow]).unwrap(), |i| {
        let x = i % ow;
        let y = (i / ow) % oh;
        let ch = i / (ow * oh);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let wy = fy - y0 as f64;
        let wx = fx - x0 as f64;
        let at = |yy: usize, xx: usize| src_d[(ch * h + yy) * w + xx].to_f64();
        let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
        let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
        T::from_f64(top * (1.0 - wy) + bot * wy)
    })
}

/// Nearest-neighbor resize with half-pixel alignment; identity at equal size.
pub fn resize_nearest<T: Element>(src: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (c, h, w) = chw(src);
    if (h, w) == (oh, ow) {
        return src.clone();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let src_d = src.data();
    Tensor::from_fn(Shape::new(vec![c, oh, ow]).unwrap(), |i| {
        let x = i % ow;
        let y = (i / ow) % oh;
        let ch = i / (ow * oh);
        let yy = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let xx = (((x as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        src_d[(ch * h + yy) * w + xx]
    })
}

pub fn crop<T: Element>(src: &Tensor<T>, oy: usize, ox: usize, ch_h: usize, ch_w: usize) -> Tensor<T> {
    let (c, h, w) = chw(src);
    assert!(oy + ch_h <= h && ox + ch_w <= w, "crop window out of bounds");
    let src_d = src.data();
    Tensor::from_fn(Shape::new(vec![c, ch_h, ch_w]).unwrap(), |i| {
        let x = i % ch_w;
        let y = (i / ch_w) % ch_h;
        let ch = i / (ch_w * ch_h);
        src_d[(ch * h + oy + y) * w + ox + x]
    })
}

fn hflip<T: Element>(src: &Tensor<T>) -> Tensor<T> {
    let (_, h, w) = chw(src);
    let src_d = src.data();
    Tensor::from_fn(src.shape().clone(), |i| {
        let x = i % w;
        let y = (i / w) % h;
        let ch = i / (w * h);
        src_d[(ch * h + y) * w + (w - 1 - x)]
    })
}

fn vflip<T: Element>(src: &Tensor<T>) -> Tensor<T> {
    let (_, h, w) = chw(src);
    let src_d = src.data();
    Tensor::from_fn(src.shape().clone(), |i| {
        let x = i % w;
        let y = (i / w) % h;
        let ch = i / (w * h);
        src_d[(ch * h + (h - 1 - y)) * w + x]
    })
}

/// Center-pad `src` to (oh, ow). Images replicate the nearest edge pixel;
/// masks fill with zero so no phantom foreground appears.
fn pad_center<T: Element>(src: &Tensor<T>, oh: usize, ow: usize, edge: bool) -> Tensor<T> {
    let (c, h, w) = chw(src);
    assert!(oh >= h && ow >= w);
    let off_y = (oh - h) / 2;
    let off_x = (ow - w) / 2;
    let src_d = src.data();
    Tensor::from_fn(Shape::new(vec![c, oh, ow]).unwrap(), |i| {
        let x = i % ow;
        let y = (i / ow) % oh;
        let ch = i / (ow * oh);
        let in_y = y >= off_y && y < off_y + h;
        let in_x = x >= off_x && x < off_x + w;
        if edge || (in_y && in_x) {
            let yy = y.saturating_sub(off_y).min(h - 1);
            let xx = x.saturating_sub(off_x).min(w - 1);
            src_d[(ch * h + yy) * w + xx]
        } else {
            T::ZERO
        }
    })
}

/// Zoom by `factor` without changing the output size: resample to the scaled
/// extent, then center-pad (zoom out) and center-crop (zoom in) back.
/// Rounding can send the two axes in different directions, so both steps
/// always run; each is the identity when its axis already fits.
fn scale_zoom<T: Element>(src: &Tensor<T>, factor: f64, image: bool) -> Tensor<T> {
    let (_, h, w) = chw(src);
    let nh = ((h as f64 * factor).round() as usize).max(1);
    let nw = ((w as f64 * factor).round() as usize).max(1);
    let scaled = if image {
        resize_bilinear(src, nh, nw)
    } else {
        resize_nearest(src, nh, nw)
    };
    let padded = pad_center(&scaled, nh.max(h), nw.max(w), image);
    let (_, ph, pw) = chw(&padded);
    crop(&padded, (ph - h) / 2, (pw - w) / 2, h, w)
}

/// Rotate about the image center by `deg`. Exact index permutations for the
/// 0 and 90 degree endpoints; otherwise inverse-map sampling (bilinear with
/// edge clamp for images, nearest with zero fill for masks).
pub fn rotate<T: Element>(src: &Tensor<T>, deg: f64, image: bool) -> Tensor<T> {
    let (_, h, w) = chw(src);
    if deg == 0.0 {
        return src.clone();
    }
    let src_d = src.data();
    if deg == 90.0 && h == w {
        let s = h;
        return Tensor::from_fn(src.shape().clone(), |i| {
            let x = i % s;
            let y = (i / s) % s;
            let ch = i / (s * s);
            src_d[(ch * s + (s - 1 - x)) * s + y]
        });
    }
    let rad = deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cy = h as f64 / 2.0;
    let cx = w as f64 / 2.0;
    Tensor::from_fn(src.shape().clone(), |i| {
        let x = i % w;
        let y = (i / w) % h;
        let ch = i / (w * h);
        let u = x as f64 + 0.5 - cx;
        let v = y as f64 + 0.5 - cy;
        let sx = cx + u * cos + v * sin;
        let sy = cy - u * sin + v * cos;
        if image {
            let fy = (sy - 0.5).clamp(0.0, (h - 1) as f64);
            let fx = (sx - 0.5).clamp(0.0, (w - 1) as f64);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wy = fy - y0 as f64;
            let wx = fx - x0 as f64;
            let at = |yy: usize, xx: usize| src_d[(ch * h + yy) * w + xx].to_f64();
            let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
            let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
            T::from_f64(top * (1.0 - wy) + bot * wy)
        } else {
            let yy = sy.floor();
            let xx = sx.floor();
            if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                T::ZERO
            } else {
                src_d[(ch * h + yy as usize) * w + xx as usize]
            }
        }
    })
}

fn binarize<T: Element>(mask: &mut Tensor<T>) {
    for v in mask.data_mut() {
        *v = if v.to_f64() >= 0.5 { T::ONE } else { T::ZERO };
    }
}

pub fn augment<T: Element>(
    s: &Sample<T>,
    spec: &AugmentationSpec,
    stream: &mut SeedStream,
) -> Sample<T> {
    let mut image = s.image.clone();
    let mut mask = s.mask.clone();

    if spec.on(AugKind::CenterCrop) {
        let (_, h, w) = chw(&image);
        let m = spec.crop_margin;
        if h >= m && w >= m {
            let (oy, ox) = ((h - m) / 2, (w - m) / 2);
            image = crop(&image, oy, ox, m, m);
            mask = crop(&mask, oy, ox, m, m);
        } else {
            log::warn!("{}: {h}x{w} below crop margin {m}, center crop skipped", s.id);
        }
    }
    if spec.on(AugKind::RandomCrop) {
        let (_, h, w) = chw(&image);
        let t = spec.target_size;
        if h >= t && w >= t {
            let oy = stream.below(h - t + 1);
            let ox = stream.below(w - t + 1);
            image = crop(&image, oy, ox, t, t);
            mask = crop(&mask, oy, ox, t, t);
        } else {
            log::warn!("{}: {h}x{w} below target {t}, random crop skipped", s.id);
        }
    }
    if spec.on(AugKind::Hflip) && stream.chance(0.5) {
        image = hflip(&image);
        mask = hflip(&mask);
    }
    if spec.on(AugKind::Vflip) && stream.chance(0.5) {
        image = vflip(&image);
        mask = vflip(&mask);
    }
    if spec.on(AugKind::Scale) {
        let f = stream.range(spec.scale_range[0], spec.scale_range[1]);
        image = scale_zoom(&image, f, true);
        mask = scale_zoom(&mask, f, false);
    }
    if spec.on(AugKind::Rotate) {
        let deg = stream.range(0.0, spec.rotate_max_deg);
        image = rotate(&image, deg, true);
        mask = rotate(&mask, deg, false);
    }

    let t = spec.target_size;
    image = resize_bilinear(&image, t, t);
    mask = resize_nearest(&mask, t, t);

    if spec.on(AugKind::Cutout) {
        let k = ((spec.cutout_frac * t as f64).round() as usize).clamp(1, t);
        let oy = stream.below(t - k + 1);
        let ox = stream.below(t - k + 1);
        let d = image.data_mut();
        for ch in 0..3 {
            for y in oy..oy + k {
                for x in ox..ox + k {
                    d[(ch * t + y) * t + x] = T::ZERO;
                }
            }
        }
    }
    if spec.on(AugKind::Brightness) {
        let delta = stream.range(-spec.brightness_delta, spec.brightness_delta);
        for v in image.data_mut() {
            *v = T::from_f64((v.to_f64() + delta).clamp(0.0, 1.0));
        }
    }

    binarize(&mut mask);
    Sample {
        id: s.id.clone(),
        image,
        mask,
    }
}
