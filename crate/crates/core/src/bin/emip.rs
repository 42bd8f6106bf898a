use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use emip::error::Error;
use emip::eval;
use emip::io;
use emip::losses::{grad_check, EmbeddingSet, GradCheckPoint, LossSelector};
use emip::model::{validate_volume, Dims};
use emip::pipeline::{
    classify_cells, detections_from_cells, run_emip, weak_labels, PipelineConfig,
};
use emip::projection::{compose, mip, per_slice_composites, ProjectionPair};
use emip::synth::{challenge_fixture, generate, IntensityLevels, MarkerMode, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "emip",
    version,
    about = "Weak labels and per-nucleus projections for point-annotated z-stacks",
    propagate_version = true
)]
struct Cli {
    /// Flat key=value config file overriding pipeline defaults
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed override for generation and clustering
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: machine parallelism)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-channel volume with exact ground truth
    Synth(SynthArgs),
    /// Distance map, clustering, and the three-region training masks
    WeakLabels(WeakLabelsArgs),
    /// Plain maximum-intensity projection of both channels
    Mip(ChannelPairArgs),
    /// Per-nucleus extended MIP over each cell's own slice set
    Emip(EmipArgs),
    /// Per-slice composites for test-time slice-by-slice prediction
    ComposeSlices(ChannelPairArgs),
    /// Match detections against ground-truth points and print metrics JSON
    Eval(EvalArgs),
    /// Gradient-check the loss implementations and print a report
    LossesCheck(LossesCheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Canned challenge volume (1, 2, or 3); overrides the scenario flags
    #[arg(long)]
    fixture: Option<u8>,
    #[arg(long, default_value_t = 256)]
    width: u32,
    #[arg(long, default_value_t = 256)]
    height: u32,
    #[arg(long, default_value_t = 12)]
    depth: u32,
    /// Nucleus mix, e.g. `disjoint_in_z=10,overlap_in_z=5,partial_overlap=5`
    #[arg(
        long,
        default_value = "disjoint_in_z=10,overlap_in_z=5,partial_overlap=5"
    )]
    mix: String,
    #[arg(long, default_value_t = 5)]
    radius_xy_min: u32,
    #[arg(long, default_value_t = 8)]
    radius_xy_max: u32,
    #[arg(long, default_value_t = 1)]
    radius_z_min: u32,
    #[arg(long, default_value_t = 2)]
    radius_z_max: u32,
    #[arg(long, default_value_t = 0.02)]
    noise_sigma: f32,
}

#[derive(Args)]
struct WeakLabelsArgs {
    #[arg(long, value_name = "TIFF")]
    nuclei: PathBuf,
    #[arg(long, value_name = "CSV")]
    points: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct ChannelPairArgs {
    #[arg(long, value_name = "TIFF")]
    nuclei: PathBuf,
    #[arg(long, value_name = "TIFF")]
    marker: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct EmipArgs {
    #[arg(long, value_name = "TIFF")]
    nuclei: PathBuf,
    #[arg(long, value_name = "TIFF")]
    marker: PathBuf,
    #[arg(long, value_name = "CSV")]
    points: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "CSV")]
    pred: PathBuf,
    #[arg(long, value_name = "CSV")]
    gt: PathBuf,
    /// Matching radius in pixels (default: config eval_radius)
    #[arg(long)]
    radius: Option<f64>,
    /// Exhaustive maximum-cardinality matching instead of greedy
    #[arg(long)]
    exact: bool,
    /// Link per-slice detections into tracks and integrate before matching
    #[arg(long)]
    integrate: bool,
}

#[derive(Args)]
struct LossesCheckArgs {
    /// Random fixtures per loss
    #[arg(long, default_value_t = 10)]
    fixtures: u32,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn run(cli: Cli) -> emip::Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    }
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply(&io::parse_config(path)?)?;
    }
    if let Some(seed) = cli.seed {
        cfg.kmeans_seed = seed;
    }
    match cli.command {
        Command::Synth(args) => cmd_synth(args, cli.seed),
        Command::WeakLabels(args) => cmd_weak_labels(args, &cfg),
        Command::Mip(args) => cmd_mip(args, &cfg),
        Command::Emip(args) => cmd_emip(args, &cfg),
        Command::ComposeSlices(args) => cmd_compose_slices(args, &cfg),
        Command::Eval(args) => cmd_eval(args, &cfg),
        Command::LossesCheck(args) => cmd_losses_check(args, cli.seed),
    }
}

fn ms(since: Instant) -> u64 {
    since.elapsed().as_millis() as u64
}

fn parse_mix(mix: &str) -> emip::Result<Vec<MarkerMode>> {
    let mut modes = Vec::new();
    for part in mix.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (name, count) = part.split_once('=').ok_or_else(|| {
            Error::InvalidParameter(format!("mix entry `{part}` is not `mode=count`"))
        })?;
        let mode = match name.trim() {
            "overlap_in_z" => MarkerMode::OverlapInZ,
            "disjoint_in_z" => MarkerMode::DisjointInZ,
            "partial_overlap" => MarkerMode::PartialOverlap,
            "absent" => MarkerMode::Absent,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown marker mode `{other}`"
                )))
            }
        };
        let count: usize = count
            .trim()
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad count in mix entry `{part}`")))?;
        modes.extend(std::iter::repeat(mode).take(count));
    }
    if modes.is_empty() {
        return Err(Error::InvalidParameter("mix produced zero nuclei".into()));
    }
    Ok(modes)
}

#[derive(serde::Serialize)]
struct GroundTruthFile<'a> {
    format_version: u32,
    nuclei: &'a [emip::synth::NucleusTruth],
}

fn cmd_synth(args: SynthArgs, seed: Option<u64>) -> emip::Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let start = Instant::now();
    let (label, volume, truth, config) = if let Some(id) = args.fixture {
        let (volume, truth) = challenge_fixture(id)?;
        let mut config = BTreeMap::new();
        config.insert("fixture".to_string(), id.to_string());
        (format!("fixture {id}"), volume, truth, config)
    } else {
        let scenario = ScenarioConfig {
            dims: Dims::new(args.width, args.height, args.depth),
            radius_xy: args.radius_xy_min..=args.radius_xy_max,
            radius_z: args.radius_z_min..=args.radius_z_max,
            modes: parse_mix(&args.mix)?,
            intensities: IntensityLevels::default(),
            noise_sigma: args.noise_sigma,
            seed: seed.unwrap_or(7),
        };
        let mut config = BTreeMap::new();
        config.insert(
            "dims".to_string(),
            format!("{}x{}x{}", args.width, args.height, args.depth),
        );
        config.insert("mix".to_string(), args.mix.clone());
        config.insert(
            "radius_xy".to_string(),
            format!("{}..={}", args.radius_xy_min, args.radius_xy_max),
        );
        config.insert(
            "radius_z".to_string(),
            format!("{}..={}", args.radius_z_min, args.radius_z_max),
        );
        config.insert("noise_sigma".to_string(), scenario.noise_sigma.to_string());
        config.insert("seed".to_string(), scenario.seed.to_string());
        let (volume, truth) = generate(&scenario)?;
        ("scenario".to_string(), volume, truth, config)
    };
    let generate_ms = ms(start);

    let write_start = Instant::now();
    io::write_volume(
        &args.out.join("nuclei.tif"),
        volume.nuclei(),
        io::BitDepth::Sixteen,
    )?;
    io::write_volume(
        &args.out.join("marker.tif"),
        volume.marker(),
        io::BitDepth::Sixteen,
    )?;
    io::write_annotations(&args.out.join("annotations.csv"), &truth.annotations)?;
    let gt = GroundTruthFile {
        format_version: 1,
        nuclei: &truth.nuclei,
    };
    let json = serde_json::to_string_pretty(&gt)
        .map_err(|e| Error::InvalidParameter(format!("ground truth serialization: {e}")))?;
    std::fs::write(args.out.join("ground_truth.json"), json + "\n")?;

    let mut manifest = io::RunManifest::new("synth", vec![label], config);
    manifest.timings_ms.insert("generate".into(), generate_ms);
    manifest.timings_ms.insert("write".into(), ms(write_start));
    io::write_manifest(&args.out.join("manifest.json"), &manifest)
}

fn manifest_inputs(paths: &[&Path]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn cmd_weak_labels(args: WeakLabelsArgs, cfg: &PipelineConfig) -> emip::Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let read_start = Instant::now();
    let nuclei = io::read_volume(&args.nuclei)?;
    let ann = io::read_annotations(&args.points)?;
    let read_ms = ms(read_start);

    let label_start = Instant::now();
    let weak = weak_labels(&nuclei, &ann, cfg)?;
    let label_ms = ms(label_start);

    let write_start = Instant::now();
    io::write_binary_mask(&args.out.join("mask.tif"), &weak.mask)?;
    io::write_label_mask(&args.out.join("training_mask.tif"), &weak.labels)?;
    io::write_voronoi(&args.out.join("voronoi.tif"), &weak.voronoi)?;

    let mut manifest = io::RunManifest::new(
        "weak-labels",
        manifest_inputs(&[&args.nuclei, &args.points]),
        cfg.to_map(),
    );
    manifest.timings_ms.insert("read".into(), read_ms);
    manifest.timings_ms.insert("weak_labels".into(), label_ms);
    manifest.timings_ms.insert("write".into(), ms(write_start));
    io::write_manifest(&args.out.join("manifest.json"), &manifest)
}

fn cmd_mip(args: ChannelPairArgs, cfg: &PipelineConfig) -> emip::Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let read_start = Instant::now();
    let nuclei = io::read_volume(&args.nuclei)?;
    let marker = io::read_volume(&args.marker)?;
    if nuclei.dims() != marker.dims() {
        return Err(Error::DimensionMismatch {
            left: nuclei.dims().to_string(),
            right: marker.dims().to_string(),
        });
    }
    let read_ms = ms(read_start);

    let project_start = Instant::now();
    let pair = ProjectionPair {
        nuclei_2d: mip(&nuclei),
        marker_2d: mip(&marker),
    };
    let composite = compose(&pair, cfg.w_nuclei, cfg.w_marker);
    let project_ms = ms(project_start);

    let write_start = Instant::now();
    io::write_image(&args.out.join("nuclei_mip.tif"), &pair.nuclei_2d)?;
    io::write_image(&args.out.join("marker_mip.tif"), &pair.marker_2d)?;
    io::write_composite_png(&args.out.join("composite.png"), &composite)?;

    let mut manifest = io::RunManifest::new(
        "mip",
        manifest_inputs(&[&args.nuclei, &args.marker]),
        cfg.to_map(),
    );
    manifest.timings_ms.insert("read".into(), read_ms);
    manifest.timings_ms.insert("project".into(), project_ms);
    manifest.timings_ms.insert("write".into(), ms(write_start));
    io::write_manifest(&args.out.join("manifest.json"), &manifest)
}

fn cmd_emip(args: EmipArgs, cfg: &PipelineConfig) -> emip::Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let read_start = Instant::now();
    let nuclei = io::read_volume(&args.nuclei)?;
    let marker = io::read_volume(&args.marker)?;
    let ann = io::read_annotations(&args.points)?;
    let (volume, ann) = validate_volume(nuclei, marker, ann)?;
    let read_ms = ms(read_start);

    let emip_start = Instant::now();
    let run = run_emip(&volume, &ann, cfg)?;
    let composite = compose(&run.result.pair, cfg.w_nuclei, cfg.w_marker);
    let classes = classify_cells(
        &run.result.pair.marker_2d,
        &run.weak.voronoi,
        cfg.marker_threshold,
    );
    let detections = detections_from_cells(&ann, &classes);
    let emip_ms = ms(emip_start);

    let write_start = Instant::now();
    io::write_image(
        &args.out.join("nuclei_emip.tif"),
        &run.result.pair.nuclei_2d,
    )?;
    io::write_image(
        &args.out.join("marker_emip.tif"),
        &run.result.pair.marker_2d,
    )?;
    io::write_composite_png(&args.out.join("composite.png"), &composite)?;
    io::write_detections(&args.out.join("detections.csv"), &detections)?;

    let mut manifest = io::RunManifest::new(
        "emip",
        manifest_inputs(&[&args.nuclei, &args.marker, &args.points]),
        cfg.to_map(),
    );
    manifest.warnings = run.warnings;
    manifest.timings_ms.insert("read".into(), read_ms);
    manifest.timings_ms.insert("emip".into(), emip_ms);
    manifest.timings_ms.insert("write".into(), ms(write_start));
    io::write_manifest(&args.out.join("manifest.json"), &manifest)
}

fn cmd_compose_slices(args: ChannelPairArgs, cfg: &PipelineConfig) -> emip::Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let read_start = Instant::now();
    let nuclei = io::read_volume(&args.nuclei)?;
    let marker = io::read_volume(&args.marker)?;
    let volume = emip::model::MultiChannelVolume::new(nuclei, marker)?;
    let read_ms = ms(read_start);

    let compose_start = Instant::now();
    let composites = per_slice_composites(&volume, cfg.w_nuclei, cfg.w_marker);
    let compose_ms = ms(compose_start);

    let write_start = Instant::now();
    for (z, slice) in composites.iter().enumerate() {
        io::write_composite_png(&args.out.join(format!("composite_z{z:03}.png")), slice)?;
    }

    let mut manifest = io::RunManifest::new(
        "compose-slices",
        manifest_inputs(&[&args.nuclei, &args.marker]),
        cfg.to_map(),
    );
    manifest.timings_ms.insert("read".into(), read_ms);
    manifest.timings_ms.insert("compose".into(), compose_ms);
    manifest.timings_ms.insert("write".into(), ms(write_start));
    io::write_manifest(&args.out.join("manifest.json"), &manifest)
}

#[derive(serde::Serialize)]
struct MetricsReport {
    format_version: u32,
    precision: f64,
    recall: f64,
    f1: f64,
    per_class: Vec<eval::ClassScore>,
    counts: MetricsCounts,
}

#[derive(serde::Serialize)]
struct MetricsCounts {
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_count: usize,
    detections: usize,
    ground_truth: usize,
}

fn cmd_eval(args: EvalArgs, cfg: &PipelineConfig) -> emip::Result<()> {
    let dets = io::read_detections(&args.pred)?;
    let gts = io::read_annotations(&args.gt)?;
    let radius = args.radius.unwrap_or(cfg.eval_radius);
    if radius <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "matching radius must be positive, got {radius}"
        )));
    }
    let dets = if args.integrate {
        integrate_detections(&dets, cfg.link_radius)?
    } else {
        dets
    };
    let matches = if args.exact {
        eval::match_points_exact(&dets, &gts, radius)
    } else {
        eval::match_points(&dets, &gts, radius)
    };
    let (precision, recall, f1) = eval::prf1(&matches);
    let (per_class, _) = eval::classification_scores(&matches);
    let report = MetricsReport {
        format_version: 1,
        precision,
        recall,
        f1,
        per_class,
        counts: MetricsCounts {
            tp: matches.tp(),
            fp: matches.fp(),
            fn_count: matches.fn_count(),
            detections: matches.detection_count(),
            ground_truth: matches.gt_count(),
        },
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidParameter(format!("metrics serialization: {e}")))?;
    println!("{json}");
    Ok(())
}

/// Groups detections by slice, links tracks, and integrates each track to
/// one representative detection with the OR-rule class.
fn integrate_detections(
    dets: &[eval::Detection],
    link_radius: f64,
) -> emip::Result<Vec<eval::Detection>> {
    let max_z = dets.iter().map(|d| d.z).max().unwrap_or(0) as usize;
    let mut per_slice: Vec<Vec<eval::Detection>> = vec![Vec::new(); max_z + 1];
    for d in dets {
        per_slice[d.z as usize].push(*d);
    }
    let tracks = eval::link_tracks(&per_slice, link_radius);
    let mut out = Vec::with_capacity(tracks.len());
    for track in &tracks {
        let integrated = eval::integrate_slices(track)?;
        let mut det = integrated.representative;
        det.class_id = integrated.class_id;
        out.push(det);
    }
    Ok(out)
}

#[derive(serde::Serialize)]
struct LossCheckEntry {
    loss: &'static str,
    max_rel_err: f64,
    pass: bool,
}

#[derive(serde::Serialize)]
struct LossCheckReport {
    format_version: u32,
    h: f64,
    tolerance: f64,
    fixtures_per_loss: u32,
    checks: Vec<LossCheckEntry>,
    pass: bool,
}

fn cmd_losses_check(args: LossesCheckArgs, seed: Option<u64>) -> emip::Result<()> {
    const H: f64 = 1e-5;
    const TOLERANCE: f64 = 1e-4;
    let base_seed = seed.unwrap_or(0);
    let prob_losses = [
        ("cross_entropy", LossSelector::CrossEntropy),
        ("dice", LossSelector::Dice),
        ("entropy", LossSelector::Entropy),
    ];
    let mut checks = Vec::new();
    for (name, selector) in prob_losses {
        let mut worst = 0.0f64;
        for i in 0..args.fixtures {
            let (y, x) = emip::losses::random_interior_probs(24, 3, base_seed + i as u64);
            let err = grad_check(selector, &GradCheckPoint::Probabilities { y: &y, x: &x }, H)?;
            worst = worst.max(err);
        }
        checks.push(LossCheckEntry {
            loss: name,
            max_rel_err: worst,
            pass: worst < TOLERANCE,
        });
    }
    let scl_losses = [
        ("scl_pixel_to_pixel", LossSelector::SclPixelToPixel),
        ("scl_pixel_to_region", LossSelector::SclPixelToRegion),
    ];
    for (name, selector) in scl_losses {
        let mut worst = 0.0f64;
        for i in 0..args.fixtures {
            let classes: Vec<u32> = (0..12).map(|j| j % 3).collect();
            let emb = EmbeddingSet::random_unit(8, classes, 0.1, base_seed + 100 + i as u64)?;
            let err = grad_check(selector, &GradCheckPoint::Embeddings(&emb), H)?;
            worst = worst.max(err);
        }
        checks.push(LossCheckEntry {
            loss: name,
            max_rel_err: worst,
            pass: worst < TOLERANCE,
        });
    }
    let pass = checks.iter().all(|c| c.pass);
    let report = LossCheckReport {
        format_version: 1,
        h: H,
        tolerance: TOLERANCE,
        fixtures_per_loss: args.fixtures,
        checks,
        pass,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidParameter(format!("report serialization: {e}")))?;
    println!("{json}");
    if !pass {
        return Err(Error::InvalidParameter(
            "gradient checks exceeded tolerance".into(),
        ));
    }
    Ok(())
}
