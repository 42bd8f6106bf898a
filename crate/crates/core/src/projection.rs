//! Intensity projections: baseline MIP, the per-cell extended projection,
//! and the linear-combination composites used at test time.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ChannelVolume, Image2D, MultiChannelVolume};
use crate::voronoi::{CellMask2D, VoronoiLabel};
use crate::weaklabel::BinaryMask3D;

/// Sorted, deduplicated set of z indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceSet {
    indices: Vec<u32>,
}

impl SliceSet {
    pub fn new(mut indices: Vec<u32>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { indices }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn contains(&self, z: u32) -> bool {
        self.indices.binary_search(&z).is_ok()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Matched 2D projections of the two channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub nuclei_2d: Image2D,
    pub marker_2d: Image2D,
}

/// RGB composite in [0,1]: marker in red, nuclei in blue.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeImage {
    width: u32,
    height: u32,
    pixels: Vec<[f32; 3]>,
}

impl CompositeImage {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }
}

/// What to project for a cell whose slice set came out empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmptyFallback {
    /// Project over the full z range (the cell degrades to plain MIP).
    #[default]
    FullMip,
    /// Leave the cell black.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmipConfig {
    /// A slice belongs to a cell's set when the nucleus-mask pixel count
    /// inside the cell reaches this threshold.
    pub min_pixels: u32,
    pub empty_fallback: EmptyFallback,
}

impl Default for EmipConfig {
    fn default() -> Self {
        Self {
            min_pixels: 1,
            empty_fallback: EmptyFallback::FullMip,
        }
    }
}

/// Extended projection output: the image pair plus the per-cell slice sets
/// and the ids of cells that needed the empty-set fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct EmipResult {
    pub pair: ProjectionPair,
    pub slice_sets: Vec<SliceSet>,
    pub fallback_cells: Vec<u32>,
}

/// Plain maximum intensity projection over the full z range.
pub fn mip(channel: &ChannelVolume) -> Image2D {
    let dims = channel.dims();
    let plane = dims.slice_len();
    let voxels = channel.voxels();
    let values: Vec<f32> = (0..plane)
        .into_par_iter()
        .map(|i| {
            let mut m = 0.0f32;
            for z in 0..dims.depth as usize {
                let v = voxels[z * plane + i];
                if v > m {
                    m = v;
                }
            }
            m
        })
        .collect();
    Image2D::new(dims.width, dims.height, values).expect("projection of a valid volume")
}

/// The set of slices where `mask ∧ cell` has at least `min_pixels` pixels.
pub fn slice_set(mask: &BinaryMask3D, cell: &CellMask2D, min_pixels: u32) -> SliceSet {
    let dims = mask.dims();
    assert!(
        cell.width() == dims.width && cell.height() == dims.height,
        "cell mask {}x{} does not match volume {dims}",
        cell.width(),
        cell.height()
    );
    let plane = dims.slice_len();
    let indices = (0..dims.depth)
        .filter(|&z| {
            let base = z as usize * plane;
            let mut count = 0u64;
            for i in 0..plane {
                if mask.mask()[base + i] && cell.mask()[i] {
                    count += 1;
                    if count >= min_pixels as u64 {
                        return true;
                    }
                }
            }
            min_pixels == 0
        })
        .collect();
    SliceSet { indices }
}

/// Per-nucleus maximum intensity projection: each Voronoi cell is projected
/// over only the slices its nucleus occupies, for both channels at once.
pub fn emip(
    vol: &MultiChannelVolume,
    mask: &BinaryMask3D,
    vor: &VoronoiLabel,
    cfg: &EmipConfig,
) -> Result<EmipResult> {
    let dims = vol.dims();
    if mask.dims() != dims {
        return Err(Error::DimensionMismatch {
            left: dims.to_string(),
            right: mask.dims().to_string(),
        });
    }
    if vor.width() != dims.width || vor.height() != dims.height {
        return Err(Error::DimensionMismatch {
            left: dims.to_string(),
            right: format!("{}x{} label image", vor.width(), vor.height()),
        });
    }
    let cells = vor.cells() as usize;
    let plane = dims.slice_len();
    let labels = vor.labels();

    // Pixel counts of mask ∧ cell per (slice, cell), one parallel pass.
    let counts: Vec<Vec<u64>> = (0..dims.depth as usize)
        .into_par_iter()
        .map(|z| {
            let base = z * plane;
            let mut c = vec![0u64; cells];
            for i in 0..plane {
                if mask.mask()[base + i] {
                    c[labels[i] as usize] += 1;
                }
            }
            c
        })
        .collect();

    let mut slice_sets: Vec<SliceSet> = (0..cells)
        .map(|j| SliceSet {
            indices: (0..dims.depth)
                .filter(|&z| counts[z as usize][j] >= cfg.min_pixels as u64)
                .collect(),
        })
        .collect();

    let mut fallback_cells = Vec::new();
    for (j, s) in slice_sets.iter_mut().enumerate() {
        if s.is_empty() {
            fallback_cells.push(j as u32);
            if cfg.empty_fallback == EmptyFallback::FullMip {
                s.indices = (0..dims.depth).collect();
            }
        }
    }

    let nuclei = vol.nuclei().voxels();
    let marker = vol.marker().voxels();
    let projected: Vec<(f32, f32)> = (0..plane)
        .into_par_iter()
        .map(|i| {
            let zs = &slice_sets[labels[i] as usize].indices;
            let mut n = 0.0f32;
            let mut m = 0.0f32;
            for &z in zs {
                let off = z as usize * plane + i;
                if nuclei[off] > n {
                    n = nuclei[off];
                }
                if marker[off] > m {
                    m = marker[off];
                }
            }
            (n, m)
        })
        .collect();
    let nuclei_2d = Image2D::new(
        dims.width,
        dims.height,
        projected.iter().map(|&(n, _)| n).collect(),
    )?;
    let marker_2d = Image2D::new(
        dims.width,
        dims.height,
        projected.iter().map(|&(_, m)| m).collect(),
    )?;
    Ok(EmipResult {
        pair: ProjectionPair {
            nuclei_2d,
            marker_2d,
        },
        slice_sets,
        fallback_cells,
    })
}

/// Linear-combination composite: `R = w_marker·marker`, `B = w_nuclei·nuclei`,
/// `G = 0`, everything clamped to [0,1].
pub fn compose(pair: &ProjectionPair, w_nuclei: f32, w_marker: f32) -> CompositeImage {
    let width = pair.nuclei_2d.width();
    let height = pair.nuclei_2d.height();
    let pixels = pair
        .nuclei_2d
        .values()
        .iter()
        .zip(pair.marker_2d.values().iter())
        .map(|(&n, &m)| {
            [
                (w_marker * m).clamp(0.0, 1.0),
                0.0,
                (w_nuclei * n).clamp(0.0, 1.0),
            ]
        })
        .collect();
    CompositeImage {
        width,
        height,
        pixels,
    }
}

/// One composite per z slice, built from the matching slice pair.
pub fn per_slice_composites(
    vol: &MultiChannelVolume,
    w_nuclei: f32,
    w_marker: f32,
) -> Vec<CompositeImage> {
    (0..vol.dims().depth)
        .map(|z| {
            let pair = ProjectionPair {
                nuclei_2d: vol.nuclei().slice_image(z),
                marker_2d: vol.marker().slice_image(z),
            };
            compose(&pair, w_nuclei, w_marker)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AnnotationSet, Dims, PointAnnotation};
    use crate::voronoi::{cell_mask, voronoi_partition};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn ann(coords: &[(u32, u32, u32)]) -> AnnotationSet {
        AnnotationSet::new(
            coords
                .iter()
                .map(|&(x, y, z)| PointAnnotation {
                    x,
                    y,
                    z,
                    class_id: 0,
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_volume(dims: Dims, seed: u64) -> ChannelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ChannelVolume::from_fn(dims, |_, _, _| rng.random::<f32>()).unwrap()
    }

    #[test]
    fn mip_of_single_slice_is_the_slice() {
        let dims = Dims::new(8, 6, 1);
        let vol = random_volume(dims, 1);
        assert_eq!(mip(&vol), vol.slice_image(0));
    }

    #[test]
    fn mip_takes_the_larger_value() {
        let dims = Dims::new(1, 1, 2);
        let vol = ChannelVolume::new(dims, vec![0.2, 0.7]).unwrap();
        assert_eq!(mip(&vol).pixel(0, 0), 0.7);
    }

    #[test]
    fn mip_matches_exhaustive_scan() {
        let dims = Dims::new(64, 64, 8);
        let vol = random_volume(dims, 2);
        let img = mip(&vol);
        for y in 0..dims.height {
            for x in 0..dims.width {
                let mut m = 0.0f32;
                for z in 0..dims.depth {
                    m = m.max(vol.voxel(x, y, z));
                }
                assert_eq!(img.pixel(x, y), m);
            }
        }
    }

    fn block_mask(dims: Dims, zs: std::ops::RangeInclusive<u32>) -> BinaryMask3D {
        let mut mask = vec![false; dims.voxel_count()];
        for z in zs {
            for y in 2..6u32.min(dims.height) {
                for x in 2..6u32.min(dims.width) {
                    mask[dims.index(x, y, z)] = true;
                }
            }
        }
        BinaryMask3D::new(dims, mask).unwrap()
    }

    #[test]
    fn slice_set_finds_occupied_range() {
        let dims = Dims::new(16, 16, 12);
        let mask = block_mask(dims, 4..=9);
        let vor = voronoi_partition(&ann(&[(4, 4, 6)]), 16, 16).unwrap();
        let cell = cell_mask(&vor, 0).unwrap();
        let s = slice_set(&mask, &cell, 1);
        assert_eq!(s.indices(), &[4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn slice_set_empty_intersection() {
        let dims = Dims::new(16, 16, 4);
        let mask = BinaryMask3D::new(dims, vec![false; dims.voxel_count()]).unwrap();
        let vor = voronoi_partition(&ann(&[(4, 4, 0)]), 16, 16).unwrap();
        let cell = cell_mask(&vor, 0).unwrap();
        assert!(slice_set(&mask, &cell, 1).is_empty());
    }

    #[test]
    fn slice_set_single_voxel_at_threshold() {
        let dims = Dims::new(8, 8, 6);
        let mut mask = vec![false; dims.voxel_count()];
        mask[dims.index(3, 3, 3)] = true;
        let mask = BinaryMask3D::new(dims, mask).unwrap();
        let vor = voronoi_partition(&ann(&[(3, 3, 3)]), 8, 8).unwrap();
        let cell = cell_mask(&vor, 0).unwrap();
        assert_eq!(slice_set(&mask, &cell, 1).indices(), &[3]);
        assert!(slice_set(&mask, &cell, 2).is_empty());
    }

    fn two_channel(dims: Dims, nuclei: ChannelVolume, marker: ChannelVolume) -> MultiChannelVolume {
        assert_eq!(nuclei.dims(), dims);
        MultiChannelVolume::new(nuclei, marker).unwrap()
    }

    #[test]
    fn emip_suppresses_z_separated_marker() {
        let dims = Dims::new(16, 16, 12);
        // Nucleus occupies z 4..=9; marker signal only on z 0..=3 at the
        // same xy positions.
        let nuclei = ChannelVolume::from_fn(dims, |x, y, z| {
            if (4..=9).contains(&z) && (2..6).contains(&x) && (2..6).contains(&y) {
                0.8
            } else {
                0.05
            }
        })
        .unwrap();
        let marker = ChannelVolume::from_fn(dims, |x, y, z| {
            if (0..=3).contains(&z) && (2..6).contains(&x) && (2..6).contains(&y) {
                0.9
            } else {
                0.0
            }
        })
        .unwrap();
        let vol = two_channel(dims, nuclei, marker);
        let mask = block_mask(dims, 4..=9);
        let vor = voronoi_partition(&ann(&[(4, 4, 6)]), 16, 16).unwrap();
        let out = emip(&vol, &mask, &vor, &EmipConfig::default()).unwrap();
        assert_eq!(out.slice_sets[0].indices(), &[4, 5, 6, 7, 8, 9]);
        assert!(out.fallback_cells.is_empty());
        for v in out.pair.marker_2d.values() {
            assert_eq!(*v, 0.0);
        }
        // Nuclei projection equals the max over the occupied range.
        for y in 0..dims.height {
            for x in 0..dims.width {
                let mut m = 0.0f32;
                for z in 4..=9 {
                    m = m.max(vol.nuclei().voxel(x, y, z));
                }
                assert_eq!(out.pair.nuclei_2d.pixel(x, y), m);
            }
        }
    }

    #[test]
    fn emip_keeps_true_overlap() {
        let dims = Dims::new(8, 8, 8);
        let nuclei = ChannelVolume::from_fn(dims, |x, y, z| {
            if (3..=6).contains(&z) && (2..6).contains(&x) && (2..6).contains(&y) {
                0.8
            } else {
                0.0
            }
        })
        .unwrap();
        let marker = ChannelVolume::from_fn(dims, |x, y, z| {
            if z == 5 && (2..6).contains(&x) && (2..6).contains(&y) {
                0.9
            } else {
                0.0
            }
        })
        .unwrap();
        let vol = two_channel(dims, nuclei, marker);
        let mask = block_mask(dims, 3..=6);
        let vor = voronoi_partition(&ann(&[(4, 4, 4)]), 8, 8).unwrap();
        let out = emip(&vol, &mask, &vor, &EmipConfig::default()).unwrap();
        for y in 2..6u32 {
            for x in 2..6u32 {
                assert!(out.pair.marker_2d.pixel(x, y) >= 0.9);
            }
        }
    }

    #[test]
    fn emip_with_all_ones_mask_is_mip() {
        let dims = Dims::new(24, 24, 6);
        let vol = two_channel(dims, random_volume(dims, 3), random_volume(dims, 4));
        let mask = BinaryMask3D::all_set(dims);
        let vor = voronoi_partition(&ann(&[(3, 3, 0), (17, 5, 2), (9, 20, 5)]), 24, 24).unwrap();
        let out = emip(&vol, &mask, &vor, &EmipConfig::default()).unwrap();
        let nuclei_mip = mip(vol.nuclei());
        let marker_mip = mip(vol.marker());
        assert_eq!(out.pair.nuclei_2d, nuclei_mip);
        assert_eq!(out.pair.marker_2d, marker_mip);
    }

    #[test]
    fn emip_rejects_mismatched_mask() {
        let dims = Dims::new(8, 8, 4);
        let vol = two_channel(dims, random_volume(dims, 5), random_volume(dims, 6));
        let mask = BinaryMask3D::all_set(Dims::new(8, 8, 3));
        let vor = voronoi_partition(&ann(&[(4, 4, 0)]), 8, 8).unwrap();
        assert!(matches!(
            emip(&vol, &mask, &vor, &EmipConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn emip_empty_cell_fallbacks() {
        let dims = Dims::new(16, 8, 5);
        let vol = two_channel(dims, random_volume(dims, 7), random_volume(dims, 8));
        // Mask only occupies the left half: the right cell has no nucleus.
        let mut mask = vec![false; dims.voxel_count()];
        for z in 1..=2u32 {
            for y in 2..6u32 {
                for x in 1..5u32 {
                    mask[dims.index(x, y, z)] = true;
                }
            }
        }
        let mask = BinaryMask3D::new(dims, mask).unwrap();
        let vor = voronoi_partition(&ann(&[(3, 4, 1), (12, 4, 1)]), 16, 8).unwrap();

        let full = emip(&vol, &mask, &vor, &EmipConfig::default()).unwrap();
        assert_eq!(full.fallback_cells, vec![1]);
        let nuclei_mip = mip(vol.nuclei());
        for y in 0..8u32 {
            for x in 0..16u32 {
                if vor.label(x, y) == 1 {
                    assert_eq!(full.pair.nuclei_2d.pixel(x, y), nuclei_mip.pixel(x, y));
                }
            }
        }

        let zeroed = emip(
            &vol,
            &mask,
            &vor,
            &EmipConfig {
                min_pixels: 1,
                empty_fallback: EmptyFallback::Zero,
            },
        )
        .unwrap();
        assert_eq!(zeroed.fallback_cells, vec![1]);
        for y in 0..8u32 {
            for x in 0..16u32 {
                if vor.label(x, y) == 1 {
                    assert_eq!(zeroed.pair.nuclei_2d.pixel(x, y), 0.0);
                    assert_eq!(zeroed.pair.marker_2d.pixel(x, y), 0.0);
                }
            }
        }
    }

    #[test]
    fn compose_channel_assignment() {
        let pair = ProjectionPair {
            nuclei_2d: Image2D::new(2, 1, vec![0.5, 1.0]).unwrap(),
            marker_2d: Image2D::new(2, 1, vec![0.0, 1.0]).unwrap(),
        };
        let c = compose(&pair, 1.0, 1.0);
        assert_eq!(c.pixel(0, 0), [0.0, 0.0, 0.5]);
        assert_eq!(c.pixel(1, 0), [1.0, 0.0, 1.0]);
        let black = compose(&pair, 0.0, 0.0);
        assert!(black.pixels().iter().all(|p| *p == [0.0, 0.0, 0.0]));
    }

    #[test]
    fn per_slice_composites_match_slicewise_compose() {
        let dims = Dims::new(6, 5, 3);
        let vol = two_channel(dims, random_volume(dims, 9), random_volume(dims, 10));
        let composites = per_slice_composites(&vol, 0.8, 0.6);
        assert_eq!(composites.len(), 3);
        for z in 0..3u32 {
            let pair = ProjectionPair {
                nuclei_2d: vol.nuclei().slice_image(z),
                marker_2d: vol.marker().slice_image(z),
            };
            assert_eq!(composites[z as usize], compose(&pair, 0.8, 0.6));
        }
    }

    #[test]
    fn per_slice_composites_zero_marker_means_zero_red() {
        let dims = Dims::new(4, 4, 3);
        let nuclei = random_volume(dims, 11);
        let marker = ChannelVolume::new(dims, vec![0.0; dims.voxel_count()]).unwrap();
        let vol = two_channel(dims, nuclei, marker);
        for c in per_slice_composites(&vol, 1.0, 1.0) {
            assert!(c.pixels().iter().all(|p| p[0] == 0.0));
        }
    }
}
