//! Data pipeline: image/mask pairs, deterministic splitting and batching.
//! Decoding, synthesis, and augmentation live in the submodules. Every
//! random choice is derived from (seed, purpose, indices), never from
//! iteration order, so the pipeline is reproducible bit for bit.

pub mod augment;
pub mod pngio;
pub mod synth;

use crate::element::Element;
use crate::error::DataError;
use crate::rng::SeedStream;
use crate::tensor::{Shape, Tensor};

pub use augment::AugmentationSpec;

/// One image/mask pair. Image is [3,H,W] in [0,1]; mask is [1,H,W] in {0,1}.
#[derive(Debug, Clone)]
pub struct Sample<T: Element> {
    pub id: String,
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Element> Sample<T> {
    pub fn size(&self) -> (usize, usize) {
        let d = self.image.shape().dims();
        (d[1], d[2])
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let id = self.image.shape().dims();
        let md = self.mask.shape().dims();
        if id.len() != 3 || md.len() != 3 || id[0] != 3 || md[0] != 1 || id[1..] != md[1..] {
            return Err(DataError::PairSizeMismatch {
                image: self.id.clone(),
                mask: self.id.clone(),
                iw: *id.last().unwrap_or(&0) as u32,
                ih: id.get(1).copied().unwrap_or(0) as u32,
                mw: *md.last().unwrap_or(&0) as u32,
                mh: md.get(1).copied().unwrap_or(0) as u32,
            });
        }
        if let Some(&v) = self
            .mask
            .data()
            .iter()
            .find(|&&v| v != T::ZERO && v != T::ONE)
        {
            return Err(DataError::MaskNotBinary {
                id: self.id.clone(),
                value: v.to_f64(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: (0.8, 0.1, 0.1),
            seed: 0,
        }
    }
}

/// Seeded permutation, then contiguous train/val/test slices: floor sizes for
/// train and val, remainder to test. 10 samples -> 8/1/1.
pub fn split<S>(items: Vec<S>, spec: &SplitSpec) -> Result<(Vec<S>, Vec<S>, Vec<S>), DataError> {
    let (ft, fv, fs) = spec.fractions;
    assert!(
        ft >= 0.0 && fv >= 0.0 && fs >= 0.0 && (ft + fv + fs - 1.0).abs() < 1e-9,
        "split fractions must be nonnegative and sum to 1"
    );
    let n = items.len();
    if n < 10 {
        return Err(DataError::SplitTooSmall { n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeedStream::derived(spec.seed, "split", &[n as u64]).shuffle(&mut order);
    let n_train = (ft * n as f64).floor() as usize;
    let n_val = (fv * n as f64).floor() as usize;

    let mut slots: Vec<Option<S>> = items.into_iter().map(Some).collect();
    let mut take = |idxs: &[usize]| -> Vec<S> {
        idxs.iter()
            .map(|&i| slots[i].take().expect("each index visited once"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}

/// Sample visit order for one epoch; a fresh seeded shuffle per (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SeedStream::derived(seed, "batch.shuffle", &[epoch as u64]).shuffle(&mut order);
    order
}

/// Augmented view of one sample. The stream depends only on
/// (seed, sample id, epoch), so the result is independent of batch
/// composition and iteration order.
pub fn augmented<T: Element>(
    s: &Sample<T>,
    spec: &AugmentationSpec,
    seed: u64,
    epoch: usize,
) -> Sample<T> {
    let mut stream = SeedStream::derived(seed, &format!("augment.{}", s.id), &[epoch as u64]);
    augment::augment(s, spec, &mut stream)
}

/// Stack equal-sized samples into [B,3,S,S] images and [B,1,S,S] masks.
pub fn collate<T: Element>(samples: &[Sample<T>]) -> (Tensor<T>, Tensor<T>) {
    assert!(!samples.is_empty(), "cannot collate an empty batch");
    let (h, w) = samples[0].size();
    let b = samples.len();
    let mut images = Tensor::zeros(Shape::nchw(b, 3, h, w));
    let mut masks = Tensor::zeros(Shape::nchw(b, 1, h, w));
    let isz = 3 * h * w;
    let msz = h * w;
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(s.size(), (h, w), "batch samples must share one size");
        images.data_mut()[i * isz..(i + 1) * isz].copy_from_slice(s.image.data());
        masks.data_mut()[i * msz..(i + 1) * msz].copy_from_slice(s.mask.data());
    }
    (images, masks)
}
