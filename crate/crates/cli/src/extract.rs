//! Keypoint detection plus descriptor sampling on a single image.

use sandesc::geometry::{grid_keypoints, harris_keypoints, HarrisConfig, Keypoint};
use sandesc::image::Image;
use sandesc::net::{DescriptorVolume, Model, SIZE_MULTIPLE};
use sandesc::{Matrix, Result};

/// Which keypoints to describe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DetectorSpec {
    /// Every `stride`-th pixel, offset by half a stride, row-major.
    Grid {
        stride: usize,
    },
    Harris(HarrisConfig),
}

impl DetectorSpec {
    pub fn harris() -> Self {
        DetectorSpec::Harris(HarrisConfig::default())
    }
}

#[derive(Clone, Debug)]
pub struct Features {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Matrix<f32>,
    /// Detections found before the budget was applied.
    pub detected: usize,
}

/// Eval-mode descriptor volume of `image` at its original size; the input is
/// edge-padded to the network's size multiple and the output cropped back.
pub fn describe(model: &Model<f32>, image: &Image) -> Result<DescriptorVolume> {
    let padded = image.to_rgb().pad_to_multiple(SIZE_MULTIPLE);
    let input = padded
        .to_tensor::<f32>()
        .reshaped([1, 3, padded.height(), padded.width()])?;
    let volume = model.forward_eval_batch(input)?.remove(0);
    volume.crop(image.height(), image.width())
}

/// Detections ordered by decreasing preference, truncated to `budget`.
pub fn detect(image: &Image, spec: &DetectorSpec, budget: usize) -> Result<(Vec<Keypoint>, usize)> {
    let mut found = match spec {
        DetectorSpec::Grid { stride } => grid_keypoints(image.width(), image.height(), *stride),
        DetectorSpec::Harris(cfg) => {
            // rank all detections; the budget is applied below
            let cfg = HarrisConfig {
                top_n: usize::MAX,
                ..*cfg
            };
            harris_keypoints(&image.gray(), image.width(), image.height(), &cfg)?
        }
    };
    let detected = found.len();
    found.truncate(budget);
    Ok((found, detected))
}

pub fn extract(model: &Model<f32>, image: &Image, spec: &DetectorSpec, budget: usize) -> Result<Features> {
    let (keypoints, detected) = detect(image, spec, budget)?;
    let volume = describe(model, image)?;
    let descriptors = volume.sample_descriptors(&keypoints)?;
    Ok(Features {
        keypoints,
        descriptors,
        detected,
    })
}
