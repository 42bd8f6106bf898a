//! Shared volumetric and annotation types.
//!
//! Coordinate convention, used everywhere: `x` is the column, `y` the row,
//! `z` the slice; origin at the top-left of slice 0. Voxels are stored
//! row-major within a slice, slices ordered by `z`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width, height, depth of a volume in voxels/slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub width: u32,
    pub height: u32,
    pub depth: u32,
}

impl Dims {
    pub fn new(width: u32, height: u32, depth: u32) -> Self {
        Self {
            width,
            height,
            depth,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.width as usize * self.height as usize * self.depth as usize
    }

    pub fn slice_len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Row-major index of `(x, y, z)`.
    #[inline]
    pub fn index(&self, x: u32, y: u32, z: u32) -> usize {
        debug_assert!(x < self.width && y < self.height && z < self.depth);
        (z as usize * self.height as usize + y as usize) * self.width as usize + x as usize
    }

    pub fn contains(&self, x: u32, y: u32, z: u32) -> bool {
        x < self.width && y < self.height && z < self.depth
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.depth)
    }
}

/// One fluorescence channel of a z-stack. Intensities are normalized to
/// `[0, 1]` at load time regardless of the source bit depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVolume {
    dims: Dims,
    voxels: Vec<f32>,
}

impl ChannelVolume {
    pub fn new(dims: Dims, voxels: Vec<f32>) -> Result<Self> {
        if dims.width == 0 || dims.height == 0 || dims.depth == 0 {
            return Err(Error::InvalidParameter(format!(
                "volume dimensions must be positive, got {dims}"
            )));
        }
        if voxels.len() != dims.voxel_count() {
            return Err(Error::InvalidParameter(format!(
                "expected {} voxels for {dims}, got {}",
                dims.voxel_count(),
                voxels.len()
            )));
        }
        if let Some(bad) = voxels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "voxel intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self { dims, voxels })
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(u32, u32, u32) -> f32) -> Result<Self> {
        let mut voxels = Vec::with_capacity(dims.voxel_count());
        for z in 0..dims.depth {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, voxels)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn voxel(&self, x: u32, y: u32, z: u32) -> f32 {
        self.voxels[self.dims.index(x, y, z)]
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    /// The `z`-th slice as a borrowed row-major plane.
    pub fn slice(&self, z: u32) -> &[f32] {
        let len = self.dims.slice_len();
        let start = z as usize * len;
        &self.voxels[start..start + len]
    }

    pub fn slice_image(&self, z: u32) -> Image2D {
        Image2D {
            width: self.dims.width,
            height: self.dims.height,
            values: self.slice(z).to_vec(),
        }
    }
}

/// Paired nuclei/marker z-stacks with identical dimensions.
#[derive(Debug, Clone)]
pub struct MultiChannelVolume {
    nuclei: ChannelVolume,
    marker: ChannelVolume,
}

impl MultiChannelVolume {
    pub fn new(nuclei: ChannelVolume, marker: ChannelVolume) -> Result<Self> {
        if nuclei.dims() != marker.dims() {
            return Err(Error::DimensionMismatch {
                left: nuclei.dims().to_string(),
                right: marker.dims().to_string(),
            });
        }
        Ok(Self { nuclei, marker })
    }

    pub fn dims(&self) -> Dims {
        self.nuclei.dims()
    }

    pub fn nuclei(&self) -> &ChannelVolume {
        &self.nuclei
    }

    pub fn marker(&self) -> &ChannelVolume {
        &self.marker
    }
}

/// A nucleus center marked by an expert: the only supervision available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub x: u32,
    pub y: u32,
    pub z: u32,
    /// 0 = negative, 1 = positive; larger ids allowed for multi-class use.
    pub class_id: u32,
}

/// Ordered point annotations. The index of a point is its identity: Voronoi
/// cell ids refer to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationSet {
    points: Vec<PointAnnotation>,
}

impl AnnotationSet {
    /// Rejects two annotations sharing the same `(x, y)`: the diagram needs
    /// one nucleus per convex cell, so duplicates are a load-time error.
    pub fn new(points: Vec<PointAnnotation>) -> Result<Self> {
        let mut seen = std::collections::HashMap::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            if let Some(&first) = seen.get(&(p.x, p.y)) {
                return Err(Error::DuplicatePoint {
                    first,
                    second: i,
                    x: p.x,
                    y: p.y,
                });
            }
            seen.insert((p.x, p.y), i);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[PointAnnotation] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Errors if any point falls outside `dims`.
    pub fn check_bounds(&self, dims: Dims) -> Result<()> {
        for (index, p) in self.points.iter().enumerate() {
            if !dims.contains(p.x, p.y, p.z) {
                return Err(Error::OutOfBounds {
                    index,
                    x: p.x,
                    y: p.y,
                    z: p.z,
                    dims: dims.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// A 2D scalar image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl Image2D {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(Error::InvalidParameter(format!(
                "expected {} values for {width}x{height}, got {}",
                width as usize * height as usize,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Validation gate for a raw channel pair plus its annotations.
///
/// Idempotent: validating an already validated pair succeeds with identical
/// output.
pub fn validate_volume(
    nuclei: ChannelVolume,
    marker: ChannelVolume,
    ann: AnnotationSet,
) -> Result<(MultiChannelVolume, AnnotationSet)> {
    let vol = MultiChannelVolume::new(nuclei, marker)?;
    ann.check_bounds(vol.dims())?;
    Ok((vol, ann))
}
