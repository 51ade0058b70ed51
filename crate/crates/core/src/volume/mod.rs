//! Volumes, 2D slices and the three orthogonal reslicing directions.
//!
//! Voxel layout is axis-0-major: the voxel at `(x, y, z)` lives at
//! `(x * ny + y) * nz + z`. The vessel runs along `z`, so the three views are
//!
//! | view    | slice index | slice rows × cols | canonical shape |
//! |---------|-------------|-------------------|-----------------|
//! | axial   | `z`         | `x` × `y`         | 320 × 256       |
//! | lateral | `y`         | `x` × `z`         | 320 × 128       |
//! | frontal | `x`         | `y` × `z`         | 256 × 128       |
//!
//! Every function that slices or reassembles a volume goes through
//! [`reslice`] and [`assemble`], so this ordering is the only one in use.

mod io;
mod resize;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_volume, volume_paths, write_volume};
pub use resize::{resize_slice, ResizeMode};

/// What the voxel values of a [`Volume`] mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Intensity,
    Probability,
    BinaryMask,
}

/// One of the three orthogonal slicing directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Axial,
    Lateral,
    Frontal,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Axial, Axis::Lateral, Axis::Frontal];

    /// Index of the volume dimension that the slices are stacked along.
    pub fn stack_dim(self) -> usize {
        match self {
            Axis::Axial => 2,
            Axis::Lateral => 1,
            Axis::Frontal => 0,
        }
    }

    /// Volume dimensions that become the (rows, cols) of a slice.
    pub fn plane_dims(self) -> (usize, usize) {
        match self {
            Axis::Axial => (0, 1),
            Axis::Lateral => (0, 2),
            Axis::Frontal => (1, 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Axial => "axial",
            Axis::Lateral => "lateral",
            Axis::Frontal => "frontal",
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A row-major 2D array of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f32) {
        self.data[i * self.width + j] = value;
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// A 3D scalar volume with dims `(nx, ny, nz)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    kind: VolumeKind,
    data: Vec<f32>,
}

impl Volume {
    /// Builds a volume, checking dims and the value domain implied by `kind`.
    pub fn new(dims: [usize; 3], kind: VolumeKind, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("volume dims must be >= 1, got {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        check_kind(kind, &data)?;
        Ok(Self { dims, kind, data })
    }

    pub fn zeros(dims: [usize; 3], kind: VolumeKind) -> Result<Self> {
        Self::new(dims, kind, vec![0.0; dims.iter().product()])
    }

    /// Fills a volume by evaluating `f(x, y, z)` in storage order.
    pub fn from_fn(
        dims: [usize; 3],
        kind: VolumeKind,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, kind, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Reinterprets the voxels under another kind, re-validating the domain.
    pub fn with_kind(self, kind: VolumeKind) -> Result<Self> {
        check_kind(kind, &self.data)?;
        Ok(Self { kind, ..self })
    }
}

fn check_kind(kind: VolumeKind, data: &[f32]) -> Result<()> {
    match kind {
        VolumeKind::Intensity => {
            if let Some(v) = data.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidValue(format!("non-finite intensity {v}")));
            }
        }
        VolumeKind::Probability => {
            if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidValue(format!("probability {v} outside [0, 1]")));
            }
        }
        VolumeKind::BinaryMask => {
            if let Some(v) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidValue(format!("mask value {v} is not 0 or 1")));
            }
        }
    }
    Ok(())
}

/// Ordered 2D cross-sections of a volume along one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    slices: Vec<Image>,
    axis: Axis,
    source_dims: [usize; 3],
    kind: VolumeKind,
}

impl SliceStack {
    /// Wraps slices produced elsewhere (e.g. network outputs). Shapes are
    /// checked by [`assemble`].
    pub fn new(slices: Vec<Image>, axis: Axis, source_dims: [usize; 3], kind: VolumeKind) -> Self {
        Self {
            slices,
            axis,
            source_dims,
            kind,
        }
    }

    pub fn slices(&self) -> &[Image] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<Image> {
        self.slices
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn source_dims(&self) -> [usize; 3] {
        self.source_dims
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Shape every slice must have for this axis and source volume.
    pub fn expected_shape(&self) -> (usize, usize) {
        let (r, c) = self.axis.plane_dims();
        (self.source_dims[r], self.source_dims[c])
    }
}

/// Extracts every cross-section of `volume` along `axis`.
pub fn reslice(volume: &Volume, axis: Axis) -> SliceStack {
    let [nx, ny, nz] = volume.dims;
    let data = &volume.data;
    let slices = match axis {
        Axis::Axial => (0..nz)
            .map(|z| Image::from_fn(nx, ny, |x, y| data[(x * ny + y) * nz + z]))
            .collect(),
        Axis::Lateral => (0..ny)
            .map(|y| {
                let mut out = Vec::with_capacity(nx * nz);
                for x in 0..nx {
                    let row = (x * ny + y) * nz;
                    out.extend_from_slice(&data[row..row + nz]);
                }
                Image {
                    height: nx,
                    width: nz,
                    data: out,
                }
            })
            .collect(),
        Axis::Frontal => (0..nx)
            .map(|x| {
                let start = x * ny * nz;
                Image {
                    height: ny,
                    width: nz,
                    data: data[start..start + ny * nz].to_vec(),
                }
            })
            .collect(),
    };
    SliceStack {
        slices,
        axis,
        source_dims: volume.dims,
        kind: volume.kind,
    }
}

/// Inverse of [`reslice`].
pub fn assemble(stack: &SliceStack) -> Result<Volume> {
    let dims = stack.source_dims;
    let expected_count = dims[stack.axis.stack_dim()];
    if stack.slices.len() != expected_count {
        return Err(Error::Shape(format!(
            "{} stack for {dims:?} needs {expected_count} slices, got {}",
            stack.axis,
            stack.slices.len()
        )));
    }
    let shape = stack.expected_shape();
    if let Some((k, s)) = stack
        .slices
        .iter()
        .enumerate()
        .find(|(_, s)| s.shape() != shape)
    {
        return Err(Error::Shape(format!(
            "slice {k} has shape {:?}, expected {shape:?}",
            s.shape()
        )));
    }
    let [nx, ny, nz] = dims;
    let mut data = vec![0.0f32; nx * ny * nz];
    match stack.axis {
        Axis::Axial => {
            for (z, s) in stack.slices.iter().enumerate() {
                for x in 0..nx {
                    for y in 0..ny {
                        data[(x * ny + y) * nz + z] = s.data[x * ny + y];
                    }
                }
            }
        }
        Axis::Lateral => {
            for (y, s) in stack.slices.iter().enumerate() {
                for x in 0..nx {
                    let row = (x * ny + y) * nz;
                    data[row..row + nz].copy_from_slice(&s.data[x * nz..(x + 1) * nz]);
                }
            }
        }
        Axis::Frontal => {
            for (x, s) in stack.slices.iter().enumerate() {
                let start = x * ny * nz;
                data[start..start + ny * nz].copy_from_slice(&s.data);
            }
        }
    }
    Volume::new(dims, stack.kind, data)
}

/// Linear rescale of an image onto `[-1, 1]` using its own min and max.
///
/// A constant image maps to all zeros.
pub fn rescale_intensity(image: &Image) -> Image {
    let (lo, hi) = image.min_max();
    let range = hi - lo;
    let data = if range > 0.0 && range.is_finite() {
        image
            .data
            .iter()
            .map(|&v| 2.0 * ((v - lo) / range - 0.5))
            .collect()
    } else {
        vec![0.0; image.data.len()]
    };
    Image {
        height: image.height,
        width: image.width,
        data,
    }
}

/// Per-view network input shapes `(rows, cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceShapeTable {
    pub axial: (usize, usize),
    pub lateral: (usize, usize),
    pub frontal: (usize, usize),
}

impl SliceShapeTable {
    /// The published slice sizes: axial 320×256, lateral 320×128, frontal 256×128.
    pub const CANONICAL: SliceShapeTable = SliceShapeTable {
        axial: (320, 256),
        lateral: (320, 128),
        frontal: (256, 128),
    };

    /// Working volume dims of the canonical table.
    pub const CANONICAL_DIMS: [usize; 3] = [320, 256, 128];

    /// Table whose shapes are the native slice shapes of a volume with `dims`.
    pub fn for_dims(dims: [usize; 3]) -> Self {
        Self {
            axial: (dims[0], dims[1]),
            lateral: (dims[0], dims[2]),
            frontal: (dims[1], dims[2]),
        }
    }

    pub fn shape(&self, axis: Axis) -> (usize, usize) {
        match axis {
            Axis::Axial => self.axial,
            Axis::Lateral => self.lateral,
            Axis::Frontal => self.frontal,
        }
    }

    /// The single volume shape all three slice shapes are cut from, if any.
    pub fn volume_dims(&self) -> Option<[usize; 3]> {
        let (nx, ny) = self.axial;
        let (lx, nz) = self.lateral;
        let (fy, fz) = self.frontal;
        (lx == nx && fy == ny && fz == nz).then_some([nx, ny, nz])
    }
}

impl Default for SliceShapeTable {
    fn default() -> Self {
        Self::CANONICAL
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let mut k = 0.0;
        Volume::from_fn(dims, VolumeKind::Intensity, |_, _, _| {
            k += 1.0;
            k
        })
        .unwrap()
    }

    #[test]
    fn canonical_reslice_shapes() {
        let v = Volume::zeros([320, 256, 128], VolumeKind::Intensity).unwrap();
        let axial = reslice(&v, Axis::Axial);
        assert_eq!(axial.len(), 128);
        assert_eq!(axial.slices()[0].shape(), (320, 256));
        let frontal = reslice(&v, Axis::Frontal);
        assert_eq!(frontal.len(), 320);
        assert_eq!(frontal.slices()[0].shape(), (256, 128));
        let lateral = reslice(&v, Axis::Lateral);
        assert_eq!(lateral.len(), 256);
        assert_eq!(lateral.slices()[0].shape(), (320, 128));
    }

    #[test]
    fn canonical_table_is_consistent() {
        let t = SliceShapeTable::CANONICAL;
        assert_eq!(t.volume_dims(), Some(SliceShapeTable::CANONICAL_DIMS));
        assert_eq!(SliceShapeTable::for_dims([320, 256, 128]), t);
        let bad = SliceShapeTable {
            frontal: (250, 128),
            ..t
        };
        assert_eq!(bad.volume_dims(), None);
    }

    #[test]
    fn single_voxel_volume() {
        let v = Volume::new([1, 1, 1], VolumeKind::Intensity, vec![3.5]).unwrap();
        for axis in Axis::ALL {
            let s = reslice(&v, axis);
            assert_eq!(s.len(), 1);
            assert_eq!(s.slices()[0].shape(), (1, 1));
            assert_eq!(s.slices()[0].get(0, 0), 3.5);
        }
    }

    #[test]
    fn slice_content_matches_coordinates() {
        let v = ramp([3, 4, 5]);
        let lat = reslice(&v, Axis::Lateral);
        assert_eq!(lat.slices()[2].get(1, 3), v.get(1, 2, 3));
        let fr = reslice(&v, Axis::Frontal);
        assert_eq!(fr.slices()[2].get(1, 3), v.get(2, 1, 3));
        let ax = reslice(&v, Axis::Axial);
        assert_eq!(ax.slices()[4].get(2, 3), v.get(2, 3, 4));
    }

    #[test]
    fn assemble_then_reslice_commutes() {
        let v = ramp([8, 6, 4]);
        let rebuilt = assemble(&reslice(&v, Axis::Axial)).unwrap();
        assert_eq!(reslice(&rebuilt, Axis::Lateral), reslice(&v, Axis::Lateral));
    }

    #[test]
    fn assemble_rejects_bad_slice() {
        let v = ramp([8, 6, 4]);
        let stack = reslice(&v, Axis::Lateral);
        let mut slices = stack.clone().into_slices();
        slices[3] = Image::zeros(8, 3);
        let broken = SliceStack::new(slices, Axis::Lateral, [8, 6, 4], VolumeKind::Intensity);
        assert!(matches!(assemble(&broken), Err(Error::Shape(_))));

        let mut short = stack.into_slices();
        short.pop();
        let short = SliceStack::new(short, Axis::Lateral, [8, 6, 4], VolumeKind::Intensity);
        assert!(assemble(&short).is_err());
    }

    #[test]
    fn rescale_examples() {
        let img = Image::new(2, 2, vec![0.0, 50.0, 100.0, 200.0]).unwrap();
        assert_eq!(rescale_intensity(&img).data(), &[-1.0, -0.5, 0.0, 1.0]);

        let flat = Image::new(2, 3, vec![7.0; 6]).unwrap();
        assert!(rescale_intensity(&flat).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kind_invariants_enforced() {
        assert!(Volume::new([1, 1, 2], VolumeKind::BinaryMask, vec![0.0, 0.5]).is_err());
        assert!(Volume::new([1, 1, 2], VolumeKind::Probability, vec![0.0, 1.5]).is_err());
        assert!(Volume::new([1, 1, 2], VolumeKind::Probability, vec![0.0, 0.5]).is_ok());
        assert!(Volume::new([0, 1, 2], VolumeKind::Intensity, vec![]).is_err());
    }
}
