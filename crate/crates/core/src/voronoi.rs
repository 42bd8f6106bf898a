//! Planar Voronoi partition of the frame around the annotated nuclei.
//!
//! Every pixel is assigned to the nearest annotation in `(x, y)` (the `z`
//! coordinate plays no role here). Distances are compared as integer squared
//! distances, so the diagram is exact; ties go to the lowest annotation
//! index.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::AnnotationSet;

/// Per-pixel cell ids. Cell `i` is the region of annotation `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoronoiLabel {
    width: u32,
    height: u32,
    cells: u32,
    labels: Vec<u32>,
}

impl VoronoiLabel {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Number of cells (= number of annotations the partition was built from).
    pub fn cells(&self) -> u32 {
        self.cells
    }

    #[inline]
    pub fn label(&self, x: u32, y: u32) -> u32 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

/// Boolean footprint of one Voronoi cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMask2D {
    width: u32,
    height: u32,
    cell_id: u32,
    mask: Vec<bool>,
}

impl CellMask2D {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn cell_id(&self) -> u32 {
        self.cell_id
    }

    #[inline]
    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.mask[y as usize * self.width as usize + x as usize]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn pixel_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Builds the Voronoi label image for a `width` x `height` frame.
pub fn voronoi_partition(ann: &AnnotationSet, width: u32, height: u32) -> Result<VoronoiLabel> {
    if ann.is_empty() {
        return Err(Error::EmptyAnnotations);
    }
    let points: Vec<(i64, i64)> = ann
        .points()
        .iter()
        .map(|p| (p.x as i64, p.y as i64))
        .collect();
    let w = width as usize;
    let labels: Vec<u32> = (0..width as usize * height as usize)
        .into_par_iter()
        .map(|idx| {
            let x = (idx % w) as i64;
            let y = (idx / w) as i64;
            let mut best = 0u32;
            let mut best_d = u64::MAX;
            for (i, &(px, py)) in points.iter().enumerate() {
                let dx = x - px;
                let dy = y - py;
                let d = (dx * dx + dy * dy) as u64;
                if d < best_d {
                    best_d = d;
                    best = i as u32;
                }
            }
            best
        })
        .collect();
    Ok(VoronoiLabel {
        width,
        height,
        cells: ann.len() as u32,
        labels,
    })
}

/// Extracts the footprint of cell `cell_id` from a label image.
pub fn cell_mask(label: &VoronoiLabel, cell_id: u32) -> Result<CellMask2D> {
    if cell_id >= label.cells {
        return Err(Error::InvalidCellId {
            id: cell_id as usize,
            cells: label.cells as usize,
        });
    }
    let mask = label.labels.iter().map(|&l| l == cell_id).collect();
    Ok(CellMask2D {
        width: label.width,
        height: label.height,
        cell_id,
        mask,
    })
}
