//! Synthetic ellipse dataset: a desk-scale stand-in with exact ground truth.
//! Each sample is a noisy color-gradient background with 1 to 3 filled
//! ellipses; the mask is the rasterized ellipse union, so tests can compare
//! any transformed mask against a closed-form re-rasterization.

use super::Sample;
use crate::element::Element;
use crate::error::DataError;
use crate::rng::SeedStream;
use crate::tensor::{Shape, Tensor};

/// Rotated ellipse in continuous image coordinates (pixel centers sit at
/// integer + 0.5).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Membership of the pixel-center point; the single geometric truth used
    /// by the generator, the image painter, and the test oracles.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let (sin, cos) = self.theta.sin_cos();
        let u = (dx * cos + dy * sin) / self.a;
        let v = (-dx * sin + dy * cos) / self.b;
        u * u + v * v <= 1.0
    }

    /// Half-extents of the axis-aligned bounding box.
    fn extents(&self) -> (f64, f64) {
        let (sin, cos) = self.theta.sin_cos();
        let ex = ((self.a * cos).powi(2) + (self.b * sin).powi(2)).sqrt();
        let ey = ((self.a * sin).powi(2) + (self.b * cos).powi(2)).sqrt();
        (ex, ey)
    }
}

/// Union mask [1,size,size]. Only bounding boxes are scanned; oracle tests
/// sweep every pixel of the full image instead.
pub fn rasterize_mask<T: Element>(size: usize, shapes: &[Ellipse]) -> Tensor<T> {
    let mut data = vec![T::ZERO; size * size];
    for e in shapes {
        let (ex, ey) = e.extents();
        let x0 = (e.cx - ex - 1.0).floor().max(0.0) as usize;
        let y0 = (e.cy - ey - 1.0).floor().max(0.0) as usize;
        let x1 = ((e.cx + ex + 1.0).ceil() as usize).min(size.saturating_sub(1));
        let y1 = ((e.cy + ey + 1.0).ceil() as usize).min(size.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                if e.contains(x, y) {
                    data[y * size + x] = T::ONE;
                }
            }
        }
    }
    Tensor::new(Shape::new(vec![1, size, size]).unwrap(), data).expect("sized buffer")
}

fn draw_shapes(stream: &mut SeedStream, size: usize) -> Vec<Ellipse> {
    let s = size as f64;
    let n = 1 + stream.below(3);
    (0..n)
        .map(|_| Ellipse {
            cx: stream.range(0.2 * s, 0.8 * s),
            cy: stream.range(0.2 * s, 0.8 * s),
            a: stream.range(0.12 * s, 0.30 * s),
            b: stream.range(0.12 * s, 0.30 * s),
            theta: stream.range(0.0, std::f64::consts::PI),
        })
        .collect()
}

/// Background gradient + per-shape fill + pixel noise. Draw order is fixed:
/// 6 gradient color values, 1 direction, then fill candidates per shape,
/// then one noise value per pixel and channel.
fn paint<T: Element>(stream: &mut SeedStream, size: usize, shapes: &[Ellipse]) -> Tensor<T> {
    let s = size as f64;
    let c0: [f64; 3] = std::array::from_fn(|_| stream.range(0.1, 0.5));
    let c1: [f64; 3] = std::array::from_fn(|_| stream.range(0.5, 0.9));
    let phi = stream.range(0.0, std::f64::consts::TAU);
    let (dir_y, dir_x) = phi.sin_cos();

    // Projection span of the image corners along the gradient direction.
    let span: Vec<f64> = [(0.0, 0.0), (s, 0.0), (0.0, s), (s, s)]
        .iter()
        .map(|&(x, y)| x * dir_x + y * dir_y)
        .collect();
    let (pmin, pmax) = span
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &p| (lo.min(p), hi.max(p)));

    // A shape the model cannot see is a mislabeled pixel factory, so fills
    // are redrawn until they clear a contrast margin against the background
    // color under the shape's center (best candidate wins if none do).
    let fills: Vec<[f64; 3]> = shapes
        .iter()
        .map(|e| {
            let t = ((e.cx * dir_x + e.cy * dir_y) - pmin) / (pmax - pmin);
            let base: [f64; 3] = std::array::from_fn(|ch| c0[ch] + (c1[ch] - c0[ch]) * t);
            let contrast = |f: &[f64; 3]| {
                (0..3).map(|ch| (f[ch] - base[ch]).abs()).sum::<f64>() / 3.0
            };
            let mut best: [f64; 3] = std::array::from_fn(|_| stream.range(0.05, 0.95));
            for _ in 0..20 {
                if contrast(&best) >= 0.3 {
                    break;
                }
                let next: [f64; 3] = std::array::from_fn(|_| stream.range(0.05, 0.95));
                if contrast(&next) > contrast(&best) {
                    best = next;
                }
            }
            best
        })
        .collect();

    let mut data = vec![T::ZERO; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64 + 0.5) * dir_x + (y as f64 + 0.5) * dir_y;
            let t = (p - pmin) / (pmax - pmin);
            let fill = shapes
                .iter()
                .zip(&fills)
                .find(|(e, _)| e.contains(x, y))
                .map(|(_, f)| f);
            for ch in 0..3 {
                let base = c0[ch] + (c1[ch] - c0[ch]) * t;
                let v = match fill {
                    // Blend keeps some background texture inside the shape.
                    Some(f) => 0.85 * f[ch] + 0.15 * base,
                    None => base,
                };
                let noisy = (v + stream.range(-0.03, 0.03)).clamp(0.0, 1.0);
                data[(ch * size + y) * size + x] = T::from_f64(noisy);
            }
        }
    }
    Tensor::new(Shape::new(vec![3, size, size]).unwrap(), data).expect("sized buffer")
}

const MAX_ATTEMPTS: usize = 100;

/// One sample plus its generating shapes (kept for geometric oracles).
/// Resamples until the foreground fraction lands in [0.01, 0.6].
pub fn synth_sample<T: Element>(
    i: usize,
    size: usize,
    seed: u64,
) -> Result<(Sample<T>, Vec<Ellipse>), DataError> {
    assert!(size >= 16, "synthetic samples need size >= 16");
    let id = format!("synth-{i:04}");
    let mut stream = SeedStream::derived(seed, "synth.sample", &[i as u64]);
    for _ in 0..MAX_ATTEMPTS {
        let shapes = draw_shapes(&mut stream, size);
        let mask = rasterize_mask::<T>(size, &shapes);
        let fg = mask.data().iter().filter(|&&v| v == T::ONE).count() as f64
            / (size * size) as f64;
        if (0.01..=0.6).contains(&fg) {
            let image = paint(&mut stream, size, &shapes);
            return Ok((Sample { id, image, mask }, shapes));
        }
    }
    Err(DataError::SynthExhausted {
        id,
        attempts: MAX_ATTEMPTS,
    })
}

pub fn synth_dataset<T: Element>(
    n: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<Sample<T>>, DataError> {
    assert!(n >= 1, "synthetic datasets need n >= 1");
    (0..n).map(|i| Ok(synth_sample(i, size, seed)?.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_bitwise_identical_datasets() {
        let a = synth_dataset::<f32>(4, 32, 3).unwrap();
        let b = synth_dataset::<f32>(4, 32, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.mask.data(), y.mask.data());
        }
        let c = synth_dataset::<f32>(4, 32, 4).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.mask.data() != y.mask.data()));
    }

    #[test]
    fn foreground_fraction_stays_in_the_documented_band() {
        for s in synth_dataset::<f64>(20, 48, 7).unwrap() {
            let fg = s.mask.data().iter().filter(|&&v| v == 1.0).count() as f64 / (48.0 * 48.0);
            assert!((0.01..=0.6).contains(&fg), "{}: fraction {fg}", s.id);
            s.validate().unwrap();
        }
    }

    #[test]
    fn bounding_box_rasterization_matches_full_sweep() {
        for i in 0..10 {
            let (sample, shapes) = synth_sample::<f64>(i, 40, 11).unwrap();
            let mask = sample.mask.data();
            for y in 0..40 {
                for x in 0..40 {
                    let hit = shapes.iter().any(|e| e.contains(x, y));
                    let want = if hit { 1.0 } else { 0.0 };
                    assert_eq!(mask[y * 40 + x], want, "sample {i} pixel ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn images_stay_in_unit_range() {
        for s in synth_dataset::<f64>(5, 32, 13).unwrap() {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
