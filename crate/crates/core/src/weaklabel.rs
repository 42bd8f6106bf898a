//! Weak-label construction: distance map, feature map, k-means clustering,
//! background identification, 3D binary masks, and the three-region training
//! masks derived from them.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{AnnotationSet, ChannelVolume, Dims};
use crate::par::{chunked_sum_indexed, SUM_CHUNK};
use crate::voronoi::VoronoiLabel;

/// Non-negative scalar per voxel; here, distance in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField3D {
    dims: Dims,
    values: Vec<f32>,
}

impl ScalarField3D {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn value(&self, x: u32, y: u32, z: u32) -> f32 {
        self.values[self.dims.index(x, y, z)]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Per-voxel 2-vector: (normalized intensity, normalized clipped distance).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    dims: Dims,
    features: Vec<[f32; 2]>,
}

impl FeatureField {
    pub fn new(dims: Dims, features: Vec<[f32; 2]>) -> Result<Self> {
        if features.len() != dims.voxel_count() {
            return Err(Error::DimensionMismatch {
                left: dims.to_string(),
                right: format!("{} feature vectors", features.len()),
            });
        }
        Ok(Self { dims, features })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn features(&self) -> &[[f32; 2]] {
        &self.features
    }
}

/// k-means result: per-voxel cluster ids plus the converged centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterField {
    dims: Dims,
    k: u32,
    assignments: Vec<u32>,
    centroids: Vec<[f64; 2]>,
    objective_trace: Vec<f64>,
}

impl ClusterField {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    #[inline]
    pub fn assignment(&self, x: u32, y: u32, z: u32) -> u32 {
        self.assignments[self.dims.index(x, y, z)]
    }

    pub fn assignments(&self) -> &[u32] {
        &self.assignments
    }

    pub fn centroids(&self) -> &[[f64; 2]] {
        &self.centroids
    }

    /// Within-cluster sum of squares after each assignment step.
    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }
}

/// Per-voxel {0, 1} mask stored as booleans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask3D {
    dims: Dims,
    mask: Vec<bool>,
}

impl BinaryMask3D {
    pub fn new(dims: Dims, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != dims.voxel_count() {
            return Err(Error::InvalidParameter(format!(
                "expected {} mask voxels for {dims}, got {}",
                dims.voxel_count(),
                mask.len()
            )));
        }
        Ok(Self { dims, mask })
    }

    pub fn all_set(dims: Dims) -> Self {
        Self {
            dims,
            mask: vec![true; dims.voxel_count()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, z: u32) -> bool {
        self.mask[self.dims.index(x, y, z)]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count_ones(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Region label of a voxel in the training mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Background,
    Nucleus,
    Unlabeled,
}

/// Three-region training mask: background / nucleus / unlabeled, with a
/// class id on nucleus voxels inherited from the owning Voronoi cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelLabelMask {
    dims: Dims,
    regions: Vec<Region>,
    class_ids: Vec<u32>,
}

impl PixelLabelMask {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn region(&self, x: u32, y: u32, z: u32) -> Region {
        self.regions[self.dims.index(x, y, z)]
    }

    /// Class id at a voxel; `Some` only where the region is `Nucleus`.
    pub fn class_id(&self, x: u32, y: u32, z: u32) -> Option<u32> {
        let i = self.dims.index(x, y, z);
        match self.regions[i] {
            Region::Nucleus => Some(self.class_ids[i]),
            _ => None,
        }
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region_counts(&self) -> (usize, usize, usize) {
        let mut bg = 0;
        let mut nuc = 0;
        let mut unl = 0;
        for r in &self.regions {
            match r {
                Region::Background => bg += 1,
                Region::Nucleus => nuc += 1,
                Region::Unlabeled => unl += 1,
            }
        }
        (bg, nuc, unl)
    }
}

/// Euclidean distance to the nearest annotation at every voxel, with the
/// z axis scaled by `z_scale` before squaring.
pub fn distance_map(ann: &AnnotationSet, shape: Dims, z_scale: f64) -> Result<ScalarField3D> {
    if ann.is_empty() {
        return Err(Error::EmptyAnnotations);
    }
    if !z_scale.is_finite() || z_scale < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "z_scale must be a finite non-negative scalar, got {z_scale}"
        )));
    }
    let points: Vec<(i64, i64, i64)> = ann
        .points()
        .iter()
        .map(|p| (p.x as i64, p.y as i64, p.z as i64))
        .collect();
    let w = shape.width as usize;
    let h = shape.height as usize;
    let values: Vec<f32> = (0..shape.voxel_count())
        .into_par_iter()
        .map(|idx| {
            let x = (idx % w) as i64;
            let y = (idx / w % h) as i64;
            let z = (idx / (w * h)) as i64;
            let mut best = f64::INFINITY;
            for &(px, py, pz) in &points {
                let dx = x - px;
                let dy = y - py;
                let dz = z_scale * (z - pz) as f64;
                let d2 = (dx * dx + dy * dy) as f64 + dz * dz;
                if d2 < best {
                    best = d2;
                }
            }
            best.sqrt() as f32
        })
        .collect();
    Ok(ScalarField3D {
        dims: shape,
        values,
    })
}

/// Per-voxel (intensity, clipped distance / d_clip) feature vectors.
pub fn build_feature_map(
    nuclei: &ChannelVolume,
    dist: &ScalarField3D,
    d_clip: f32,
) -> Result<FeatureField> {
    if nuclei.dims() != dist.dims() {
        return Err(Error::DimensionMismatch {
            left: nuclei.dims().to_string(),
            right: dist.dims().to_string(),
        });
    }
    if d_clip <= 0.0 || !d_clip.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "d_clip must be a finite positive scalar, got {d_clip}"
        )));
    }
    let features = nuclei
        .voxels()
        .par_iter()
        .zip(dist.values().par_iter())
        .map(|(&v, &d)| [v, d.min(d_clip) / d_clip])
        .collect();
    Ok(FeatureField {
        dims: nuclei.dims(),
        features,
    })
}

#[inline]
fn dist2(f: [f32; 2], c: [f64; 2]) -> f64 {
    let dx = f[0] as f64 - c[0];
    let dy = f[1] as f64 - c[1];
    dx * dx + dy * dy
}

fn seed_centroids(feats: &[[f32; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let n = feats.len();
    let mut centroids: Vec<[f64; 2]> = Vec::with_capacity(k);
    let first = feats[rng.random_range(0..n)];
    centroids.push([first[0] as f64, first[1] as f64]);
    let mut d2: Vec<f64> = feats.iter().map(|&f| dist2(f, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc >= target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let f = feats[idx];
        let c = [f[0] as f64, f[1] as f64];
        for (i, &f) in feats.iter().enumerate() {
            let d = dist2(f, c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
        centroids.push(c);
    }
    centroids
}

fn assign(feats: &[[f32; 2]], centroids: &[[f64; 2]], out: &mut [u32]) {
    feats
        .par_iter()
        .zip(out.par_iter_mut())
        .for_each(|(&f, slot)| {
            let mut best = 0u32;
            let mut best_d = f64::INFINITY;
            for (c, &centroid) in centroids.iter().enumerate() {
                let d = dist2(f, centroid);
                if d < best_d {
                    best_d = d;
                    best = c as u32;
                }
            }
            *slot = best;
        });
}

/// Per-cluster feature means. Chunk partials are merged in chunk order so
/// the rounding is independent of the thread count; empty clusters keep
/// their previous centroid.
fn update_centroids(
    feats: &[[f32; 2]],
    assignments: &[u32],
    previous: &[[f64; 2]],
    k: usize,
) -> Vec<[f64; 2]> {
    let chunks: Vec<(usize, usize)> = (0..feats.len())
        .step_by(SUM_CHUNK)
        .map(|s| (s, (s + SUM_CHUNK).min(feats.len())))
        .collect();
    let partials: Vec<(Vec<[f64; 2]>, Vec<u64>)> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let mut sums = vec![[0.0f64; 2]; k];
            let mut counts = vec![0u64; k];
            for i in start..end {
                let a = assignments[i] as usize;
                sums[a][0] += feats[i][0] as f64;
                sums[a][1] += feats[i][1] as f64;
                counts[a] += 1;
            }
            (sums, counts)
        })
        .collect();
    let mut sums = vec![[0.0f64; 2]; k];
    let mut counts = vec![0u64; k];
    for (ps, pc) in &partials {
        for c in 0..k {
            sums[c][0] += ps[c][0];
            sums[c][1] += ps[c][1];
            counts[c] += pc[c];
        }
    }
    (0..k)
        .map(|c| {
            if counts[c] == 0 {
                previous[c]
            } else {
                [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64]
            }
        })
        .collect()
}

fn objective(feats: &[[f32; 2]], centroids: &[[f64; 2]], assignments: &[u32]) -> f64 {
    chunked_sum_indexed(feats.len(), |i| {
        dist2(feats[i], centroids[assignments[i] as usize])
    })
}

/// Independent k-means++ seedings per `kmeans` call; the run with the lowest
/// final objective wins. Lloyd's algorithm only reaches a local optimum, and
/// with strongly imbalanced cluster sizes a single seeding can miss a small
/// cluster entirely.
const KMEANS_RESTARTS: u32 = 10;

struct LloydRun {
    centroids: Vec<[f64; 2]>,
    assignments: Vec<u32>,
    trace: Vec<f64>,
}

fn run_lloyd(
    feats: &[[f32; 2]],
    k: usize,
    rng: &mut ChaCha8Rng,
    max_iter: u32,
    tol: f64,
) -> LloydRun {
    let mut centroids = seed_centroids(feats, k, rng);
    let mut assignments = vec![0u32; feats.len()];
    assign(feats, &centroids, &mut assignments);
    let mut trace = vec![objective(feats, &centroids, &assignments)];
    for _ in 0..max_iter {
        let next = update_centroids(feats, &assignments, &centroids, k);
        let shift = centroids
            .iter()
            .zip(next.iter())
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .fold(0.0f64, f64::max);
        centroids = next;
        assign(feats, &centroids, &mut assignments);
        trace.push(objective(feats, &centroids, &assignments));
        if shift < tol {
            break;
        }
    }
    LloydRun {
        centroids,
        assignments,
        trace,
    }
}

/// Lloyd's algorithm, restarted from several k-means++ seedings derived from
/// `seed`; returns the restart with the lowest final objective (ties keep the
/// earliest). Deterministic for a fixed seed regardless of thread count.
pub fn kmeans(
    features: &FeatureField,
    k: u32,
    seed: u64,
    max_iter: u32,
    tol: f64,
) -> Result<ClusterField> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let feats = features.features();
    if feats.len() < k as usize {
        return Err(Error::TooFewVoxels {
            k: k as usize,
            voxels: feats.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<LloydRun> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = run_lloyd(feats, k as usize, &mut rng, max_iter, tol);
        let better = match &best {
            None => true,
            Some(b) => run.trace.last().unwrap() < b.trace.last().unwrap(),
        };
        if better {
            best = Some(run);
        }
    }
    let run = best.expect("KMEANS_RESTARTS is nonzero");
    Ok(ClusterField {
        dims: features.dims(),
        k,
        assignments: run.assignments,
        centroids: run.centroids,
        objective_trace: run.trace,
    })
}

/// Ellipsoidal dilation of radii `(r_xy, r_xy, r_z)` around every
/// annotation, clipped to the volume bounds.
pub fn dilate_points(ann: &AnnotationSet, shape: Dims, r_xy: u32, r_z: u32) -> BinaryMask3D {
    let mut mask = vec![false; shape.voxel_count()];
    let rxy = r_xy as i64;
    let rz = r_z as i64;
    for p in ann.points() {
        let (cx, cy, cz) = (p.x as i64, p.y as i64, p.z as i64);
        for dz in -rz..=rz {
            let z = cz + dz;
            if z < 0 || z >= shape.depth as i64 {
                continue;
            }
            for dy in -rxy..=rxy {
                let y = cy + dy;
                if y < 0 || y >= shape.height as i64 {
                    continue;
                }
                for dx in -rxy..=rxy {
                    let x = cx + dx;
                    if x < 0 || x >= shape.width as i64 {
                        continue;
                    }
                    let planar = dx * dx + dy * dy;
                    let inside = if rxy == 0 && rz == 0 {
                        dx == 0 && dy == 0 && dz == 0
                    } else if rxy == 0 {
                        dx == 0 && dy == 0
                    } else if rz == 0 {
                        planar <= rxy * rxy
                    } else {
                        planar * rz * rz + dz * dz * rxy * rxy <= rxy * rxy * rz * rz
                    };
                    if inside {
                        mask[shape.index(x as u32, y as u32, z as u32)] = true;
                    }
                }
            }
        }
    }
    BinaryMask3D { dims: shape, mask }
}

/// Cluster with the minimal fraction of its voxels inside `dilated`
/// (empty clusters count as fraction 0); ties go to the lower id.
pub fn identify_background(clusters: &ClusterField, dilated: &BinaryMask3D) -> u32 {
    assert_eq!(
        clusters.dims(),
        dilated.dims(),
        "cluster field and dilated mask must share dimensions"
    );
    let k = clusters.k as usize;
    let mut overlap = vec![0u64; k];
    let mut size = vec![0u64; k];
    for (&a, &m) in clusters.assignments.iter().zip(dilated.mask.iter()) {
        size[a as usize] += 1;
        if m {
            overlap[a as usize] += 1;
        }
    }
    // Compare overlap[a]/size[a] < overlap[b]/size[b] exactly via cross
    // multiplication, treating empty clusters as fraction 0.
    let frac_lt = |a: usize, b: usize| -> bool {
        let (oa, sa) = (overlap[a] as u128, size[a] as u128);
        let (ob, sb) = (overlap[b] as u128, size[b] as u128);
        match (sa == 0, sb == 0) {
            (true, true) => false,
            (true, false) => ob > 0,
            (false, true) => false,
            (false, false) => oa * sb < ob * sa,
        }
    };
    let mut best = 0usize;
    for c in 1..k {
        if frac_lt(c, best) {
            best = c;
        }
    }
    best as u32
}

/// How the nuclei cluster is chosen once the background id is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NucleiRule {
    /// Non-background cluster whose centroid has the highest intensity
    /// component (ties → lower id).
    HighestMeanIntensity,
    /// Explicit cluster id.
    Cluster(u32),
}

pub(crate) fn nuclei_cluster_id(clusters: &ClusterField, background_id: u32) -> Option<u32> {
    let mut best: Option<u32> = None;
    for c in 0..clusters.k {
        if c == background_id {
            continue;
        }
        match best {
            None => best = Some(c),
            Some(b) => {
                if clusters.centroids[c as usize][0] > clusters.centroids[b as usize][0] {
                    best = Some(c);
                }
            }
        }
    }
    best
}

/// Marks the nuclei cluster's voxels 1 and everything else 0.
pub fn binary_mask_3d(
    clusters: &ClusterField,
    background_id: u32,
    rule: NucleiRule,
) -> BinaryMask3D {
    assert!(
        background_id < clusters.k,
        "background id {background_id} out of range for k={}",
        clusters.k
    );
    let nuclei = match rule {
        NucleiRule::HighestMeanIntensity => nuclei_cluster_id(clusters, background_id),
        NucleiRule::Cluster(id) => {
            assert!(
                id < clusters.k,
                "cluster id {id} out of range for k={}",
                clusters.k
            );
            Some(id)
        }
    };
    let mask = match nuclei {
        Some(nid) => clusters.assignments.iter().map(|&a| a == nid).collect(),
        None => vec![false; clusters.assignments.len()],
    };
    BinaryMask3D {
        dims: clusters.dims,
        mask,
    }
}

/// Three-region training mask: background cluster → background, nuclei
/// cluster → nucleus carrying the owning cell's class, rest → unlabeled.
pub fn training_label_masks(
    clusters: &ClusterField,
    background_id: u32,
    vor: &VoronoiLabel,
    ann: &AnnotationSet,
) -> Result<PixelLabelMask> {
    let dims = clusters.dims;
    if vor.width() != dims.width || vor.height() != dims.height {
        return Err(Error::DimensionMismatch {
            left: dims.to_string(),
            right: format!("{}x{} label image", vor.width(), vor.height()),
        });
    }
    if vor.cells() as usize != ann.len() {
        return Err(Error::DimensionMismatch {
            left: format!("{} voronoi cells", vor.cells()),
            right: format!("{} annotations", ann.len()),
        });
    }
    let nuclei = nuclei_cluster_id(clusters, background_id);
    let classes: Vec<u32> = ann.points().iter().map(|p| p.class_id).collect();
    let plane = dims.slice_len();
    let mut regions = vec![Region::Unlabeled; dims.voxel_count()];
    let mut class_ids = vec![0u32; dims.voxel_count()];
    regions
        .par_iter_mut()
        .zip(class_ids.par_iter_mut())
        .enumerate()
        .for_each(|(i, (region, class))| {
            let a = clusters.assignments[i];
            if a == background_id {
                *region = Region::Background;
            } else if Some(a) == nuclei {
                *region = Region::Nucleus;
                let cell = vor.labels()[i % plane] as usize;
                *class = classes[cell];
            }
        });
    Ok(PixelLabelMask {
        dims,
        regions,
        class_ids,
    })
}
