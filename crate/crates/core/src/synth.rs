//! Synthetic two-channel volumes with exact ground truth.
//!
//! Nuclei are axis-aligned ellipsoids with a Gaussian intensity falloff;
//! the marker channel carries blobs placed relative to each nucleus's
//! z-extent according to its [`MarkerMode`]. The marker channel is kept
//! noise-free and exactly zero outside blobs so that projection tests can
//! assert exact zeros rather than noise-floor thresholds.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::ops::RangeInclusive;

use crate::error::{Error, Result};
use crate::model::{AnnotationSet, ChannelVolume, Dims, MultiChannelVolume, PointAnnotation};
use crate::weaklabel::BinaryMask3D;

/// How a nucleus's marker signal relates to its z-extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerMode {
    /// Marker spans the nucleus's own z-slices: positive.
    OverlapInZ,
    /// Marker at the same xy but on disjoint z-slices: negative, and the
    /// case where a plain MIP fabricates a false positive.
    DisjointInZ,
    /// Marker shares exactly one z-slice with the nucleus: positive.
    PartialOverlap,
    /// No marker at all: negative.
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntensityLevels {
    pub background: f32,
    pub nucleus: f32,
    pub marker: f32,
}

impl Default for IntensityLevels {
    fn default() -> Self {
        Self {
            background: 0.05,
            nucleus: 0.8,
            marker: 0.9,
        }
    }
}

/// Recipe for one synthetic volume.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub dims: Dims,
    /// In-plane nucleus radius range, pixels.
    pub radius_xy: RangeInclusive<u32>,
    /// Half-extent range in slices; a nucleus spans 2h+1 slices.
    pub radius_z: RangeInclusive<u32>,
    /// One mode per nucleus; the length is the nucleus count.
    pub modes: Vec<MarkerMode>,
    pub intensities: IntensityLevels,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn nucleus_count(&self) -> usize {
        self.modes.len()
    }

    fn validate(&self) -> Result<()> {
        let max_r = *self.radius_xy.end();
        let max_h = *self.radius_z.end();
        if self.radius_xy.is_empty() || self.radius_z.is_empty() {
            return Err(Error::InvalidParameter("empty radius range".into()));
        }
        if 2 * max_r + 4 >= self.dims.width || 2 * max_r + 4 >= self.dims.height {
            return Err(Error::InvalidParameter(format!(
                "radius {max_r} does not fit in {}",
                self.dims
            )));
        }
        if 2 * max_h + 1 > self.dims.depth {
            return Err(Error::InvalidParameter(format!(
                "z half-extent {max_h} does not fit in depth {}",
                self.dims.depth
            )));
        }
        for v in [
            self.intensities.background,
            self.intensities.nucleus,
            self.intensities.marker,
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!(
                    "intensity level {v} outside [0,1]"
                )));
            }
        }
        if self.noise_sigma < 0.0 || self.noise_sigma.is_nan() {
            return Err(Error::InvalidParameter(format!(
                "noise sigma {} must be >= 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Everything known by construction about one generated nucleus.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NucleusTruth {
    pub x: u32,
    pub y: u32,
    /// Slice carrying the single point annotation.
    pub annotation_z: u32,
    pub radius_xy: u32,
    /// Inclusive slice range actually containing nucleus voxels.
    pub z_extent: (u32, u32),
    pub mode: MarkerMode,
    /// True class: marker overlaps the nucleus in at least one slice.
    pub positive: bool,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub annotations: AnnotationSet,
    pub nuclei: Vec<NucleusTruth>,
    /// Voxels inside any nucleus ellipsoid.
    pub nucleus_mask: BinaryMask3D,
    /// Voxels inside any marker blob.
    pub marker_mask: BinaryMask3D,
}

/// Gaussian falloff coefficient: intensity = level * exp(-FALLOFF * rho^2)
/// with rho^2 the normalized ellipsoid coordinate. Kept mild so the in-blob
/// intensity band stays narrow and well separated from background; a steep
/// falloff smears blob edges toward the background level, which lets the
/// clustering stage absorb them into a background cluster.
const FALLOFF: f32 = 0.1;

struct NucleusSpec {
    cx: u32,
    cy: u32,
    r_xy: u32,
    z0: u32,
    z1: u32,
    mode: MarkerMode,
    /// Inclusive marker z-range, if the mode places one.
    marker_z: Option<(u32, u32)>,
    marker_r: u32,
}

/// Axis-aligned ellipsoid footprint: an XY disc of radius `r_xy` centered at
/// `(cx, cy)`, spanning the inclusive slice range `z0..=z1`.
struct Blob {
    cx: u32,
    cy: u32,
    r_xy: u32,
    z0: u32,
    z1: u32,
}

fn ellipsoid_blob(values: &mut [f32], mask: &mut [bool], dims: Dims, blob: Blob, level: f32) {
    let Blob {
        cx,
        cy,
        r_xy,
        z0,
        z1,
    } = blob;
    let czf = (z0 + z1) as f32 / 2.0;
    let rzf = (z1 - z0) as f32 / 2.0 + 0.45;
    let r = r_xy as f32;
    let x_lo = cx.saturating_sub(r_xy);
    let x_hi = (cx + r_xy).min(dims.width - 1);
    let y_lo = cy.saturating_sub(r_xy);
    let y_hi = (cy + r_xy).min(dims.height - 1);
    for z in z0..=z1.min(dims.depth - 1) {
        let zr = (z as f32 - czf) / rzf;
        let zr2 = zr * zr;
        for y in y_lo..=y_hi {
            let dy = (y as f32 - cy as f32) / r;
            for x in x_lo..=x_hi {
                let dx = (x as f32 - cx as f32) / r;
                let rho2 = dx * dx + dy * dy + zr2;
                if rho2 <= 1.0 {
                    let idx = dims.index(x, y, z);
                    let v = level * (-FALLOFF * rho2).exp();
                    if v > values[idx] {
                        values[idx] = v;
                    }
                    mask[idx] = true;
                }
            }
        }
    }
}

/// Rasterizes the `NucleusSpec` list into the channel pair plus exact ground truth.
fn build(
    specs: &[NucleusSpec],
    cfg: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(MultiChannelVolume, GroundTruth)> {
    let dims = cfg.dims;
    let n_vox = dims.voxel_count();
    let mut marker = vec![0.0f32; n_vox];
    let mut marker_mask = vec![false; n_vox];
    for s in specs {
        if let Some((mz0, mz1)) = s.marker_z {
            ellipsoid_blob(
                &mut marker,
                &mut marker_mask,
                dims,
                Blob {
                    cx: s.cx,
                    cy: s.cy,
                    r_xy: s.marker_r,
                    z0: mz0,
                    z1: mz1,
                },
                cfg.intensities.marker,
            );
        }
    }

    let mut nuclei = vec![cfg.intensities.background; n_vox];
    let mut nucleus_mask = vec![false; n_vox];
    let mut truths = Vec::with_capacity(specs.len());
    let mut points = Vec::with_capacity(specs.len());
    for s in specs {
        ellipsoid_blob(
            &mut nuclei,
            &mut nucleus_mask,
            dims,
            Blob {
                cx: s.cx,
                cy: s.cy,
                r_xy: s.r_xy,
                z0: s.z0,
                z1: s.z1,
            },
            cfg.intensities.nucleus,
        );
        // True class recomputed from the voxel masks, not from the mode:
        // positive iff some voxel of this nucleus also carries marker.
        let mut positive = false;
        'scan: for z in s.z0..=s.z1 {
            let czf = (s.z0 + s.z1) as f32 / 2.0;
            let rzf = (s.z1 - s.z0) as f32 / 2.0 + 0.45;
            let zr = (z as f32 - czf) / rzf;
            for y in s.cy.saturating_sub(s.r_xy)..=(s.cy + s.r_xy).min(dims.height - 1) {
                for x in s.cx.saturating_sub(s.r_xy)..=(s.cx + s.r_xy).min(dims.width - 1) {
                    let dx = (x as f32 - s.cx as f32) / s.r_xy as f32;
                    let dy = (y as f32 - s.cy as f32) / s.r_xy as f32;
                    if dx * dx + dy * dy + zr * zr <= 1.0 && marker_mask[dims.index(x, y, z)] {
                        positive = true;
                        break 'scan;
                    }
                }
            }
        }
        let annotation_z = (s.z0 + s.z1) / 2;
        let class_id = u32::from(positive);
        truths.push(NucleusTruth {
            x: s.cx,
            y: s.cy,
            annotation_z,
            radius_xy: s.r_xy,
            z_extent: (s.z0, s.z1),
            mode: s.mode,
            positive,
        });
        points.push(PointAnnotation {
            x: s.cx,
            y: s.cy,
            z: annotation_z,
            class_id,
        });
    }

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise_sigma)
            .map_err(|e| Error::InvalidParameter(format!("bad noise sigma: {e}")))?;
        for v in nuclei.iter_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }

    let volume = MultiChannelVolume::new(
        ChannelVolume::new(dims, nuclei)?,
        ChannelVolume::new(dims, marker)?,
    )?;
    let truth = GroundTruth {
        annotations: AnnotationSet::new(points)?,
        nuclei: truths,
        nucleus_mask: BinaryMask3D::new(dims, nucleus_mask)?,
        marker_mask: BinaryMask3D::new(dims, marker_mask)?,
    };
    Ok((volume, truth))
}

/// Derives a marker placement from the mode; `None` when absent.
/// Disjoint markers sit below the nucleus with at least one clear slice.
fn marker_plan(
    mode: MarkerMode,
    z0: u32,
    z1: u32,
    depth: u32,
    r_xy: u32,
) -> Option<(u32, u32, u32)> {
    let marker_r = (r_xy.saturating_sub(1)).max(2);
    match mode {
        MarkerMode::Absent => None,
        MarkerMode::OverlapInZ => Some((z0, z1, marker_r)),
        MarkerMode::PartialOverlap => Some((z1, (z1 + 2).min(depth - 1), marker_r)),
        MarkerMode::DisjointInZ => {
            // z0 >= 2 is guaranteed by placement for this mode.
            let span = z0.saturating_sub(1).min(3);
            Some((z0 - 1 - span, z0 - 2, marker_r))
        }
    }
}

/// Generates a volume pair with rejection-sampled, xy-disjoint nuclei.
pub fn generate(cfg: &ScenarioConfig) -> Result<(MultiChannelVolume, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = cfg.dims;
    let mut specs: Vec<NucleusSpec> = Vec::with_capacity(cfg.modes.len());
    for (i, &mode) in cfg.modes.iter().enumerate() {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::PlacementFailure {
                    index: i,
                    attempts: 1000,
                });
            }
            let r = rng.random_range(cfg.radius_xy.clone());
            let h = rng.random_range(cfg.radius_z.clone());
            let cx = rng.random_range(r + 2..dims.width - r - 2);
            let cy = rng.random_range(r + 2..dims.height - r - 2);
            // Disjoint markers need headroom below the nucleus: push the
            // nucleus toward the top so z0 >= 2.
            let cz_hi = dims.depth - 1 - h;
            let cz_lo = match mode {
                MarkerMode::DisjointInZ => (h + 2).max(cz_hi.saturating_sub(1)),
                _ => h,
            };
            if cz_lo > cz_hi {
                continue;
            }
            let cz = if cz_lo == cz_hi {
                cz_lo
            } else {
                rng.random_range(cz_lo..=cz_hi)
            };
            let ok = specs.iter().all(|s| {
                let dx = cx as i64 - s.cx as i64;
                let dy = cy as i64 - s.cy as i64;
                let min_d = (r + s.r_xy + 3) as i64;
                dx * dx + dy * dy >= min_d * min_d
            });
            if !ok {
                continue;
            }
            let (z0, z1) = (cz - h, cz + h);
            let marker = marker_plan(mode, z0, z1, dims.depth, r);
            specs.push(NucleusSpec {
                cx,
                cy,
                r_xy: r,
                z0,
                z1,
                mode,
                marker_z: marker.map(|(a, b, _)| (a, b)),
                marker_r: marker.map(|(_, _, r)| r).unwrap_or(0),
            });
            break;
        }
    }
    build(&specs, cfg, &mut rng)
}

/// Canned 64x64x10 volumes, one per challenge:
/// 1. a nucleus spanning five slices annotated at a single central point;
/// 2. a positive nucleus whose marker shares exactly one of its slices;
/// 3. the golden z-separation case — nucleus on slices 4–9, marker on
///    slices 0–3 at the same xy, so a plain MIP fabricates an overlap.
pub fn challenge_fixture(id: u8) -> Result<(MultiChannelVolume, GroundTruth)> {
    if !(1..=3).contains(&id) {
        return Err(Error::InvalidParameter(format!(
            "challenge fixture id must be 1..=3, got {id}"
        )));
    }
    let cfg = ScenarioConfig {
        dims: Dims::new(64, 64, 10),
        radius_xy: 10..=10,
        radius_z: 2..=2,
        modes: vec![],
        intensities: IntensityLevels::default(),
        noise_sigma: 0.02,
        seed: 1000 + id as u64,
    };
    let spec = match id {
        1 => NucleusSpec {
            cx: 32,
            cy: 32,
            r_xy: 10,
            z0: 2,
            z1: 6,
            mode: MarkerMode::Absent,
            marker_z: None,
            marker_r: 0,
        },
        2 => NucleusSpec {
            cx: 32,
            cy: 32,
            r_xy: 10,
            z0: 2,
            z1: 6,
            mode: MarkerMode::PartialOverlap,
            marker_z: Some((6, 9)),
            marker_r: 9,
        },
        _ => NucleusSpec {
            cx: 32,
            cy: 32,
            r_xy: 10,
            z0: 4,
            z1: 9,
            mode: MarkerMode::DisjointInZ,
            marker_z: Some((0, 3)),
            marker_r: 9,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    build(&[spec], &cfg, &mut rng)
}
