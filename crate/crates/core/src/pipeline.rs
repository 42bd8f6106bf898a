//! Stage orchestration shared by the CLI and integration tests: typed
//! configuration, the weak-label chain, and EMIP projection with fallback
//! warnings.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::model::{AnnotationSet, ChannelVolume, Image2D, MultiChannelVolume};
use crate::projection::{emip, EmipConfig, EmipResult, EmptyFallback};
use crate::voronoi::{voronoi_partition, VoronoiLabel};
use crate::weaklabel::{
    binary_mask_3d, build_feature_map, dilate_points, distance_map, identify_background, kmeans,
    training_label_masks, BinaryMask3D, ClusterField, NucleiRule, PixelLabelMask,
};

/// Every tunable of the weak-label / projection / evaluation chain,
/// overridable through the flat config file.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Distance-map z-axis scale (1.0 = isotropic voxels).
    pub z_scale: f64,
    /// Distance clip for the feature map, pixels.
    pub d_clip: f32,
    /// k-means cluster count.
    pub k: u32,
    pub kmeans_seed: u64,
    pub kmeans_max_iter: u32,
    pub kmeans_tol: f64,
    /// Point-dilation radii for background identification.
    pub dilate_r_xy: u32,
    pub dilate_r_z: u32,
    /// Minimum in-cell mask pixels for a slice to join a cell's slice set.
    pub min_pixels: u32,
    pub empty_fallback: EmptyFallback,
    /// Composite channel weights.
    pub w_nuclei: f32,
    pub w_marker: f32,
    /// Matching radius for evaluation, pixels.
    pub eval_radius: f64,
    /// Track-linking radius across consecutive slices, pixels.
    pub link_radius: f64,
    /// EMIP-marker intensity above which a cell counts as positive.
    pub marker_threshold: f32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            z_scale: 1.0,
            d_clip: 20.0,
            k: 3,
            kmeans_seed: 0,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
            dilate_r_xy: 3,
            dilate_r_z: 1,
            min_pixels: 1,
            empty_fallback: EmptyFallback::FullMip,
            w_nuclei: 1.0,
            w_marker: 1.0,
            eval_radius: 6.0,
            link_radius: 5.0,
            marker_threshold: 0.1,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("config key `{key}`: bad value `{value}`")))
}

impl PipelineConfig {
    /// Applies flat key=value overrides; unknown keys are errors so typos
    /// cannot silently fall back to defaults.
    pub fn apply(&mut self, overrides: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in overrides {
            match key.as_str() {
                "z_scale" => self.z_scale = parse_value(key, value)?,
                "d_clip" => self.d_clip = parse_value(key, value)?,
                "k" => self.k = parse_value(key, value)?,
                "kmeans_seed" => self.kmeans_seed = parse_value(key, value)?,
                "kmeans_max_iter" => self.kmeans_max_iter = parse_value(key, value)?,
                "kmeans_tol" => self.kmeans_tol = parse_value(key, value)?,
                "dilate_r_xy" => self.dilate_r_xy = parse_value(key, value)?,
                "dilate_r_z" => self.dilate_r_z = parse_value(key, value)?,
                "min_pixels" => self.min_pixels = parse_value(key, value)?,
                "empty_fallback" => {
                    self.empty_fallback = match value.as_str() {
                        "full_mip" => EmptyFallback::FullMip,
                        "zero" => EmptyFallback::Zero,
                        other => {
                            return Err(Error::InvalidParameter(format!(
                            "config key `empty_fallback`: expected full_mip or zero, got `{other}`"
                        )))
                        }
                    }
                }
                "w_nuclei" => self.w_nuclei = parse_value(key, value)?,
                "w_marker" => self.w_marker = parse_value(key, value)?,
                "eval_radius" => self.eval_radius = parse_value(key, value)?,
                "link_radius" => self.link_radius = parse_value(key, value)?,
                "marker_threshold" => self.marker_threshold = parse_value(key, value)?,
                _ => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown config key `{key}`"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Canonical stringly view for manifests and config hashing.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("z_scale".into(), self.z_scale.to_string());
        m.insert("d_clip".into(), self.d_clip.to_string());
        m.insert("k".into(), self.k.to_string());
        m.insert("kmeans_seed".into(), self.kmeans_seed.to_string());
        m.insert("kmeans_max_iter".into(), self.kmeans_max_iter.to_string());
        m.insert("kmeans_tol".into(), self.kmeans_tol.to_string());
        m.insert("dilate_r_xy".into(), self.dilate_r_xy.to_string());
        m.insert("dilate_r_z".into(), self.dilate_r_z.to_string());
        m.insert("min_pixels".into(), self.min_pixels.to_string());
        m.insert(
            "empty_fallback".into(),
            match self.empty_fallback {
                EmptyFallback::FullMip => "full_mip".into(),
                EmptyFallback::Zero => "zero".into(),
            },
        );
        m.insert("w_nuclei".into(), self.w_nuclei.to_string());
        m.insert("w_marker".into(), self.w_marker.to_string());
        m.insert("eval_radius".into(), self.eval_radius.to_string());
        m.insert("link_radius".into(), self.link_radius.to_string());
        m.insert("marker_threshold".into(), self.marker_threshold.to_string());
        m
    }
}

/// Everything the weak-label chain produces.
pub struct WeakLabels {
    pub clusters: ClusterField,
    pub background_id: u32,
    pub mask: BinaryMask3D,
    pub voronoi: VoronoiLabel,
    pub labels: PixelLabelMask,
}

/// Distance map → features → k-means → background id → binary mask,
/// Voronoi partition, and the three-region training mask.
pub fn weak_labels(
    nuclei: &ChannelVolume,
    ann: &AnnotationSet,
    cfg: &PipelineConfig,
) -> Result<WeakLabels> {
    ann.check_bounds(nuclei.dims())?;
    let dims = nuclei.dims();
    let dist = distance_map(ann, dims, cfg.z_scale)?;
    let features = build_feature_map(nuclei, &dist, cfg.d_clip)?;
    let clusters = kmeans(
        &features,
        cfg.k,
        cfg.kmeans_seed,
        cfg.kmeans_max_iter,
        cfg.kmeans_tol,
    )?;
    let dilated = dilate_points(ann, dims, cfg.dilate_r_xy, cfg.dilate_r_z);
    let background_id = identify_background(&clusters, &dilated);
    let mask = binary_mask_3d(&clusters, background_id, NucleiRule::HighestMeanIntensity);
    let voronoi = voronoi_partition(ann, dims.width, dims.height)?;
    let labels = training_label_masks(&clusters, background_id, &voronoi, ann)?;
    Ok(WeakLabels {
        clusters,
        background_id,
        mask,
        voronoi,
        labels,
    })
}

pub struct EmipRun {
    pub weak: WeakLabels,
    pub result: EmipResult,
    /// One entry per cell whose slice set came out empty.
    pub warnings: Vec<String>,
}

/// Full chain from a two-channel volume to the EMIP projection pair.
pub fn run_emip(
    vol: &MultiChannelVolume,
    ann: &AnnotationSet,
    cfg: &PipelineConfig,
) -> Result<EmipRun> {
    let weak = weak_labels(vol.nuclei(), ann, cfg)?;
    let emip_cfg = EmipConfig {
        min_pixels: cfg.min_pixels,
        empty_fallback: cfg.empty_fallback,
    };
    let result = emip(vol, &weak.mask, &weak.voronoi, &emip_cfg)?;
    let fallback_name = match cfg.empty_fallback {
        EmptyFallback::FullMip => "full-z MIP",
        EmptyFallback::Zero => "black output",
    };
    let warnings = result
        .fallback_cells
        .iter()
        .map(|c| format!("cell {c}: empty slice set, fell back to {fallback_name}"))
        .collect();
    Ok(EmipRun {
        weak,
        result,
        warnings,
    })
}

/// Per-cell class read off an EMIP marker projection: positive iff any
/// pixel of the cell exceeds `threshold`.
pub fn classify_cells(marker_2d: &Image2D, vor: &VoronoiLabel, threshold: f32) -> Vec<u32> {
    let mut positive = vec![false; vor.cells() as usize];
    for y in 0..vor.height() {
        for x in 0..vor.width() {
            if marker_2d.pixel(x, y) > threshold {
                positive[vor.label(x, y) as usize] = true;
            }
        }
    }
    positive.into_iter().map(u32::from).collect()
}

/// Detections at the annotation coordinates carrying the per-cell classes
/// (cell i belongs to annotation i by construction).
pub fn detections_from_cells(ann: &AnnotationSet, classes: &[u32]) -> Vec<Detection> {
    ann.points()
        .iter()
        .zip(classes)
        .map(|(p, &class_id)| Detection::new(p.x as f64, p.y as f64, p.z, class_id))
        .collect()
}
