//! Inference: per-view segmentation, reorientation to axial, and fusion.
//!
//! ```text
//!            ┌─ axial slices ──► M_x ─────────────────────┐
//! volume ────┼─ lateral slices ► M_y ─► reassemble ► axial ┼─► SAN ─► prob / mask
//!            └─ frontal slices ► M_z ─► reassemble ► axial ┘
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{json_file, Error, Result};
use crate::models::{Model, ModelName};
use crate::nn::Tensor;
use crate::training::preprocess_slice;
use crate::volume::{
    assemble, reslice, resize_slice, write_volume, Axis, Image, ResizeMode, SliceStack, Volume,
    VolumeKind,
};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Slices per forward pass during inference.
const INFER_BATCH: usize = 4;

/// Voxels `>= threshold` become 1.
pub fn binarize(prob: &Volume, threshold: f32) -> Result<Volume> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidValue(format!("threshold {threshold} outside [0, 1]")));
    }
    if prob.kind() == VolumeKind::Intensity {
        return Err(Error::InvalidValue("binarize expects a probability volume".into()));
    }
    let data = prob
        .data()
        .iter()
        .map(|&p| if p >= threshold { 1.0 } else { 0.0 })
        .collect();
    Volume::new(prob.dims(), VolumeKind::BinaryMask, data)
}

/// The three trained per-view U-Nets.
#[derive(Clone, Debug)]
pub struct ViewModels {
    axial: Model,
    lateral: Model,
    frontal: Model,
}

impl ViewModels {
    pub fn new(axial: Model, lateral: Model, frontal: Model) -> Result<Self> {
        for (model, axis) in [
            (&axial, Axis::Axial),
            (&lateral, Axis::Lateral),
            (&frontal, Axis::Frontal),
        ] {
            if model.spec().name != ModelName::for_axis(axis) || model.spec().in_channels() != 1 {
                return Err(Error::Precondition(format!(
                    "{} cannot serve as the {axis} model",
                    model.spec().name
                )));
            }
        }
        Ok(Self {
            axial,
            lateral,
            frontal,
        })
    }

    pub fn get(&self, axis: Axis) -> &Model {
        match axis {
            Axis::Axial => &self.axial,
            Axis::Lateral => &self.lateral,
            Axis::Frontal => &self.frontal,
        }
    }
}

/// Runs `model` on every slice of its view and reassembles the per-slice
/// probabilities into a volume with the input's dims.
pub fn segment_view(volume: &Volume, model: &Model) -> Result<Volume> {
    let axis = model.spec().name.axis().ok_or_else(|| {
        Error::Precondition(format!("{} is not a per-view model", model.spec().name))
    })?;
    let stack = reslice(volume, axis);
    let native = stack.expected_shape();
    let shape = model.spec().spatial_shape();
    let slices = stack
        .slices()
        .par_chunks(INFER_BATCH)
        .map(|chunk| -> Result<Vec<Image>> {
            let mut data = Vec::with_capacity(chunk.len() * shape.0 * shape.1);
            for s in chunk {
                data.extend_from_slice(preprocess_slice(s, shape)?.data());
            }
            let x = Tensor::from_vec([chunk.len(), 1, shape.0, shape.1], data)?;
            unstack_probabilities(model.predict(x)?, native)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    assemble(&SliceStack::new(
        slices,
        axis,
        volume.dims(),
        VolumeKind::Probability,
    ))
}

/// Splits a `[n, 1, h, w]` output into images resized to `native`.
fn unstack_probabilities(out: Tensor<f32>, native: (usize, usize)) -> Result<Vec<Image>> {
    let [n, _, h, w] = out.shape();
    let data = out.into_data();
    (0..n)
        .map(|k| {
            let img = Image::new(h, w, data[k * h * w..(k + 1) * h * w].to_vec())?;
            let mut img = resize_slice(&img, native, ResizeMode::Continuous)?;
            for v in img.data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            Ok(img)
        })
        .collect()
}

/// Binary masks of the three views, each as a volume (and so viewable in
/// axial orientation), ordered axial, lateral, frontal.
pub fn per_view_masks(volume: &Volume, views: &ViewModels, threshold: f32) -> Result<[Volume; 3]> {
    let mut out = Axis::ALL
        .iter()
        .map(|&axis| binarize(&segment_view(volume, views.get(axis))?, threshold));
    Ok([
        out.next().expect("three views")?,
        out.next().expect("three views")?,
        out.next().expect("three views")?,
    ])
}

fn check_masks(masks: &[Volume; 3]) -> Result<[usize; 3]> {
    let dims = masks[0].dims();
    if masks.iter().any(|m| m.dims() != dims || m.kind() != VolumeKind::BinaryMask) {
        return Err(Error::Shape(
            "per-view masks must be binary volumes with identical dims".into(),
        ));
    }
    Ok(dims)
}

/// Fusion-network inputs, one per axial slice: the three masks' axial slices
/// stacked as channels (axial, lateral, frontal) and resized to `shape`.
pub fn san_inputs(masks: &[Volume; 3], shape: (usize, usize)) -> Result<Vec<Vec<f32>>> {
    check_masks(masks)?;
    let stacks: Vec<SliceStack> = masks.iter().map(|m| reslice(m, Axis::Axial)).collect();
    (0..stacks[0].len())
        .map(|z| {
            let mut input = Vec::with_capacity(3 * shape.0 * shape.1);
            for s in &stacks {
                input.extend_from_slice(resize_slice(&s.slices()[z], shape, ResizeMode::Label)?.data());
            }
            Ok(input)
        })
        .collect()
}

/// How the three axial-oriented masks are combined.
#[derive(Clone, Copy, Debug)]
pub enum Fuser<'a> {
    /// The trained fusion network, applied per axial slice.
    San(&'a Model),
    /// Per-voxel mean of the three masks.
    ChannelMean,
}

/// Combines three axial-oriented binary masks into one probability volume.
pub fn fuse(masks: &[Volume; 3], fuser: Fuser<'_>) -> Result<Volume> {
    let dims = check_masks(masks)?;
    match fuser {
        Fuser::ChannelMean => {
            let data = (0..masks[0].len())
                .map(|i| masks.iter().map(|m| m.data()[i]).sum::<f32>() / 3.0)
                .collect();
            Volume::new(dims, VolumeKind::Probability, data)
        }
        Fuser::San(model) => {
            if model.spec().name != ModelName::San {
                return Err(Error::Precondition(format!(
                    "{} is not a fusion network",
                    model.spec().name
                )));
            }
            let shape = model.spec().spatial_shape();
            let inputs = san_inputs(masks, shape)?;
            let native = (dims[0], dims[1]);
            let slices = inputs
                .par_chunks(INFER_BATCH)
                .map(|chunk| -> Result<Vec<Image>> {
                    let x = Tensor::from_vec([chunk.len(), 3, shape.0, shape.1], chunk.concat())?;
                    unstack_probabilities(model.predict(x)?, native)
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            assemble(&SliceStack::new(
                slices,
                Axis::Axial,
                dims,
                VolumeKind::Probability,
            ))
        }
    }
}

/// Output of [`segment_volume`] or [`segment_axial_only`].
#[derive(Clone, Debug)]
pub struct SegmentationResult {
    pub prob_axial: Volume,
    pub mask_axial: Volume,
    /// Axial, lateral and frontal masks; absent for the single-view baseline.
    pub per_view_masks: Option<[Volume; 3]>,
    pub threshold: f32,
}

/// The full pipeline: three views, reorientation, fusion, thresholding.
///
/// The per-view maps are always binarized at [`DEFAULT_THRESHOLD`], the
/// setting the fusion network is trained with; `threshold` only applies to
/// the fused probabilities, so changing it never changes `prob_axial`.
pub fn segment_volume(
    volume: &Volume,
    views: &ViewModels,
    fuser: Fuser<'_>,
    threshold: f32,
) -> Result<SegmentationResult> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidValue(format!("threshold {threshold} outside [0, 1]")));
    }
    let masks = per_view_masks(volume, views, DEFAULT_THRESHOLD)?;
    let prob_axial = fuse(&masks, fuser)?;
    let mask_axial = binarize(&prob_axial, threshold)?;
    Ok(SegmentationResult {
        prob_axial,
        mask_axial,
        per_view_masks: Some(masks),
        threshold,
    })
}

/// Single-view baseline: the axial U-Net alone.
pub fn segment_axial_only(volume: &Volume, axial: &Model, threshold: f32) -> Result<SegmentationResult> {
    if axial.spec().name != ModelName::Mx {
        return Err(Error::Precondition(format!(
            "the baseline needs the axial model, got {}",
            axial.spec().name
        )));
    }
    let prob_axial = segment_view(volume, axial)?;
    let mask_axial = binarize(&prob_axial, threshold)?;
    Ok(SegmentationResult {
        prob_axial,
        mask_axial,
        per_view_masks: None,
        threshold,
    })
}

/// `summary.json` written next to a saved result. Paths are volume stems
/// relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub threshold: f32,
    pub fused: bool,
    pub prob: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_view: Vec<(Axis, String)>,
}

impl SegmentationResult {
    /// Writes `prob`, `mask`, per-view masks and `summary.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<SegmentationSummary> {
        write_volume(&self.prob_axial, &dir.join("prob"))?;
        write_volume(&self.mask_axial, &dir.join("mask"))?;
        let mut per_view = Vec::new();
        if let Some(masks) = &self.per_view_masks {
            for (axis, m) in Axis::ALL.iter().zip(masks) {
                let stem = format!("view_{axis}");
                write_volume(m, &dir.join(&stem))?;
                per_view.push((*axis, stem));
            }
        }
        let summary = SegmentationSummary {
            threshold: self.threshold,
            fused: self.per_view_masks.is_some(),
            prob: "prob".into(),
            mask: "mask".into(),
            per_view,
        };
        json_file::write(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    }
}

/// Stem of the probability volume saved by [`SegmentationResult::save`].
pub fn saved_prob_stem(dir: &Path) -> PathBuf {
    dir.join("prob")
}
