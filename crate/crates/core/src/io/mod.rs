//! On-disk formats: grayscale multi-page TIFF volumes, CSV point lists,
//! PNG composites, JSON manifests, and the flat key=value config file.

pub mod tiff;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use sha2::Digest;

use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::model::{AnnotationSet, ChannelVolume, Dims, Image2D, PointAnnotation};
use crate::projection::CompositeImage;
use crate::voronoi::VoronoiLabel;
use crate::weaklabel::{BinaryMask3D, PixelLabelMask, Region};

/// Sample width for quantized volume output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn bits(self) -> u8 {
        match self {
            BitDepth::Eight => 8,
            BitDepth::Sixteen => 16,
        }
    }

    fn max(self) -> f32 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// Reads a multi-page grayscale TIFF as a normalized volume
/// (sample / max for the page's bit depth).
pub fn read_volume(path: &Path) -> Result<ChannelVolume> {
    let pages = tiff::read_pages(path)?;
    let (w, h, bits) = (pages[0].width, pages[0].height, pages[0].bits);
    for (i, p) in pages.iter().enumerate() {
        if p.width != w || p.height != h || p.bits != bits {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                detail: format!(
                    "page {i} is {}x{}@{} but page 0 is {w}x{h}@{bits}",
                    p.width, p.height, p.bits
                ),
            });
        }
    }
    let max = if bits == 8 { 255.0f32 } else { 65535.0 };
    let dims = Dims::new(w, h, pages.len() as u32);
    let mut voxels = Vec::with_capacity(dims.voxel_count());
    for p in &pages {
        voxels.extend(p.samples.iter().map(|&s| s as f32 / max));
    }
    ChannelVolume::new(dims, voxels)
}

/// Writes a volume as multi-page TIFF, quantizing to round(v * max).
pub fn write_volume(path: &Path, vol: &ChannelVolume, depth: BitDepth) -> Result<()> {
    let dims = vol.dims();
    let max = depth.max();
    let pages: Vec<Vec<u16>> = (0..dims.depth)
        .map(|z| {
            vol.slice(z)
                .iter()
                .map(|&v| (v * max).round() as u16)
                .collect()
        })
        .collect();
    let refs: Vec<&[u16]> = pages.iter().map(|p| p.as_slice()).collect();
    tiff::write_pages(path, dims.width, dims.height, depth.bits(), &refs)
}

/// Writes a single 2D image as a 16-bit one-page TIFF.
pub fn write_image(path: &Path, img: &Image2D) -> Result<()> {
    let samples: Vec<u16> = img
        .values()
        .iter()
        .map(|&v| (v * 65535.0).round() as u16)
        .collect();
    tiff::write_pages(path, img.width(), img.height(), 16, &[&samples])
}

fn csv_parse_err(path: &Path, line: u64, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

fn read_csv_rows(
    path: &Path,
    want_header: &[&str],
    optional_last: bool,
) -> Result<Vec<(u64, Vec<String>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(csv_parse_err(path, 1, "empty file, expected a header")),
            Some((i, l)) if l.trim().is_empty() => {
                if i == 0 {
                    return Err(csv_parse_err(
                        path,
                        1,
                        "blank first line, expected a header",
                    ));
                }
            }
            Some((i, l)) => break (i as u64 + 1, l),
        }
    };
    let fields: Vec<&str> = header.1.split(',').map(str::trim).collect();
    let full: Vec<&str> = want_header.to_vec();
    let short: Vec<&str> = if optional_last {
        want_header[..want_header.len() - 1].to_vec()
    } else {
        full.clone()
    };
    let ncols = if fields == full {
        full.len()
    } else if optional_last && fields == short {
        short.len()
    } else {
        return Err(csv_parse_err(
            path,
            header.0,
            format!(
                "expected header `{}`, got `{}`",
                full.join(","),
                header.1.trim()
            ),
        ));
    };
    let mut rows = Vec::new();
    for (i, l) in lines {
        let line_no = i as u64 + 1;
        if l.trim().is_empty() {
            continue;
        }
        let cols: Vec<String> = l.split(',').map(|c| c.trim().to_string()).collect();
        if cols.len() != ncols {
            return Err(csv_parse_err(
                path,
                line_no,
                format!("expected {ncols} columns, got {}", cols.len()),
            ));
        }
        rows.push((line_no, cols));
    }
    Ok(rows)
}

fn parse_col<T: std::str::FromStr>(path: &Path, line: u64, name: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| csv_parse_err(path, line, format!("bad {name} value `{raw}`")))
}

/// Reads `x,y,z,class` point annotations.
pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    let rows = read_csv_rows(path, &["x", "y", "z", "class"], false)?;
    let mut points = Vec::with_capacity(rows.len());
    for (line, cols) in rows {
        points.push(PointAnnotation {
            x: parse_col(path, line, "x", &cols[0])?,
            y: parse_col(path, line, "y", &cols[1])?,
            z: parse_col(path, line, "z", &cols[2])?,
            class_id: parse_col(path, line, "class", &cols[3])?,
        });
    }
    AnnotationSet::new(points)
}

pub fn write_annotations(path: &Path, ann: &AnnotationSet) -> Result<()> {
    let mut out = String::from("x,y,z,class\n");
    for p in ann.points() {
        out.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.z, p.class_id));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads `x,y,z,class[,confidence]` detections; confidence defaults to 1.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let rows = read_csv_rows(path, &["x", "y", "z", "class", "confidence"], true)?;
    let mut dets = Vec::with_capacity(rows.len());
    for (line, cols) in rows {
        let mut det = Detection::new(
            parse_col(path, line, "x", &cols[0])?,
            parse_col(path, line, "y", &cols[1])?,
            parse_col(path, line, "z", &cols[2])?,
            parse_col(path, line, "class", &cols[3])?,
        );
        if cols.len() == 5 {
            det.confidence = parse_col(path, line, "confidence", &cols[4])?;
            if !(0.0..=1.0).contains(&det.confidence) {
                return Err(csv_parse_err(
                    path,
                    line,
                    format!("confidence {} outside [0,1]", det.confidence),
                ));
            }
        }
        dets.push(det);
    }
    Ok(dets)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut out = String::from("x,y,z,class,confidence\n");
    for d in dets {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            d.x, d.y, d.z, d.class_id, d.confidence
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Region codes for exported training masks.
pub const MASK_BACKGROUND: u16 = 0;
pub const MASK_UNLABELED: u16 = 128;
pub const MASK_NUCLEUS: u16 = 255;

/// Writes the three-region mask as 8-bit multi-page TIFF
/// (0 = background, 128 = unlabeled, 255 = nucleus).
pub fn write_label_mask(path: &Path, mask: &PixelLabelMask) -> Result<()> {
    let dims = mask.dims();
    let slice_len = dims.slice_len();
    let pages: Vec<Vec<u16>> = (0..dims.depth as usize)
        .map(|z| {
            mask.regions()[z * slice_len..(z + 1) * slice_len]
                .iter()
                .map(|r| match r {
                    Region::Background => MASK_BACKGROUND,
                    Region::Unlabeled => MASK_UNLABELED,
                    Region::Nucleus => MASK_NUCLEUS,
                })
                .collect()
        })
        .collect();
    let refs: Vec<&[u16]> = pages.iter().map(|p| p.as_slice()).collect();
    tiff::write_pages(path, dims.width, dims.height, 8, &refs)
}

/// Writes a binary mask as 8-bit multi-page TIFF (0/255).
pub fn write_binary_mask(path: &Path, mask: &BinaryMask3D) -> Result<()> {
    let dims = mask.dims();
    let slice_len = dims.slice_len();
    let pages: Vec<Vec<u16>> = (0..dims.depth as usize)
        .map(|z| {
            mask.mask()[z * slice_len..(z + 1) * slice_len]
                .iter()
                .map(|&b| if b { 255 } else { 0 })
                .collect()
        })
        .collect();
    let refs: Vec<&[u16]> = pages.iter().map(|p| p.as_slice()).collect();
    tiff::write_pages(path, dims.width, dims.height, 8, &refs)
}

/// Writes the Voronoi partition as a 16-bit cell-id image.
pub fn write_voronoi(path: &Path, vor: &VoronoiLabel) -> Result<()> {
    if vor.cells() > u16::MAX as u32 + 1 {
        return Err(Error::InvalidParameter(format!(
            "{} cells exceed the 16-bit label range",
            vor.cells()
        )));
    }
    let samples: Vec<u16> = vor.labels().iter().map(|&l| l as u16).collect();
    tiff::write_pages(path, vor.width(), vor.height(), 16, &[&samples])
}

/// Writes a composite as 8-bit RGB PNG, rounding each channel.
pub fn write_composite_png(path: &Path, img: &CompositeImage) -> Result<()> {
    let out = image::RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let [r, g, b] = img.pixel(x, y);
        image::Rgb([
            (r * 255.0).round() as u8,
            (g * 255.0).round() as u8,
            (b * 255.0).round() as u8,
        ])
    });
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::InvalidParameter(format!("png encode failed: {e}")))?;
    Ok(())
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    pub inputs: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub warnings: Vec<String>,
    /// Wall-clock stage timings; masked out when comparing runs for
    /// reproducibility since they are not deterministic.
    pub timings_ms: BTreeMap<String, u64>,
}

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

impl RunManifest {
    pub fn new(command: &str, inputs: Vec<String>, config: BTreeMap<String, String>) -> Self {
        let config_hash = config_hash(&config);
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            tool: "emip".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            inputs,
            config,
            config_hash,
            warnings: Vec::new(),
            timings_ms: BTreeMap::new(),
        }
    }
}

/// SHA-256 over the canonical `key=value\n` serialization.
pub fn config_hash(config: &BTreeMap<String, String>) -> String {
    let mut hasher = sha2::Sha256::new();
    for (k, v) in config {
        hasher.update(k.as_bytes());
        hasher.update(b"=");
        hasher.update(v.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::InvalidParameter(format!("manifest serialization: {e}")))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(json.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Parses the flat `key = value` config format: one pair per line,
/// `#` comments, later keys override earlier ones. `origin` only labels
/// parse errors.
pub fn parse_config_text(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| csv_parse_err(origin, i as u64 + 1, "expected `key = value`"))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(csv_parse_err(origin, i as u64 + 1, "empty key"));
        }
        map.insert(key.to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// [`parse_config_text`] over a file's contents.
pub fn parse_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    parse_config_text(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("emip-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn constant_8_bit_volume_normalizes_to_one() {
        let path = tmp("const8.tif");
        let page = vec![255u16; 16];
        tiff::write_pages(&path, 4, 4, 8, &[&page, &page, &page]).unwrap();
        let vol = read_volume(&path).unwrap();
        assert_eq!(vol.dims(), Dims::new(4, 4, 3));
        assert!(vol.voxels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sixteen_bit_midpoint_value() {
        let path = tmp("mid16.tif");
        let page = vec![32768u16; 4];
        tiff::write_pages(&path, 2, 2, 16, &[&page]).unwrap();
        let vol = read_volume(&path).unwrap();
        let v = vol.voxel(0, 0, 0);
        assert!((v - 32768.0 / 65535.0).abs() < 1e-7);
        assert!((v - 0.50001).abs() < 1e-5);
    }

    #[test]
    fn volume_round_trip_is_stable_after_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dims = Dims::new(9, 7, 4);
        let vol = ChannelVolume::from_fn(dims, |_, _, _| rng.random::<f32>()).unwrap();
        let p1 = tmp("rt-a.tif");
        let p2 = tmp("rt-b.tif");
        write_volume(&p1, &vol, BitDepth::Sixteen).unwrap();
        let once = read_volume(&p1).unwrap();
        write_volume(&p2, &once, BitDepth::Sixteen).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let twice = read_volume(&p2).unwrap();
        assert_eq!(once.voxels(), twice.voxels());
    }

    #[test]
    fn annotations_round_trip_and_parse_errors() {
        let path = tmp("ann.csv");
        std::fs::write(&path, "x,y,z,class\n10,20,3,1\n4,5,0,0\n").unwrap();
        let ann = read_annotations(&path).unwrap();
        assert_eq!(ann.len(), 2);
        assert_eq!(
            ann.points()[0],
            PointAnnotation {
                x: 10,
                y: 20,
                z: 3,
                class_id: 1
            }
        );

        let out = tmp("ann-out.csv");
        write_annotations(&out, &ann).unwrap();
        assert_eq!(read_annotations(&out).unwrap().points(), ann.points());

        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        match read_annotations(&path) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("expected header error, got {other:?}"),
        }

        std::fs::write(&path, "x,y,z,class\n10,oops,3,1\n").unwrap();
        match read_annotations(&path) {
            Err(Error::Parse {
                line: 2, detail, ..
            }) => assert!(detail.contains("y")),
            other => panic!("expected line-2 error, got {other:?}"),
        }

        std::fs::write(&path, "x,y,z,class\n10,20,3,1\n10,20,5,0\n").unwrap();
        assert!(matches!(
            read_annotations(&path),
            Err(Error::DuplicatePoint { .. })
        ));
    }

    #[test]
    fn detections_accept_optional_confidence() {
        let path = tmp("det.csv");
        std::fs::write(&path, "x,y,z,class\n10.5,20,3,1\n").unwrap();
        let dets = read_detections(&path).unwrap();
        assert_eq!(dets[0].confidence, 1.0);
        assert_eq!(dets[0].x, 10.5);

        std::fs::write(&path, "x,y,z,class,confidence\n10,20,3,1,0.25\n").unwrap();
        let dets = read_detections(&path).unwrap();
        assert_eq!(dets[0].confidence, 0.25);

        std::fs::write(&path, "x,y,z,class,confidence\n10,20,3,1,1.5\n").unwrap();
        assert!(matches!(
            read_detections(&path),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn config_parsing_and_hash_stability() {
        let path = tmp("run.cfg");
        std::fs::write(&path, "# comment\nk = 3\n\nd_clip=20\nk = 4\n").unwrap();
        let map = parse_config(&path).unwrap();
        assert_eq!(map.get("k").map(String::as_str), Some("4"));
        assert_eq!(map.get("d_clip").map(String::as_str), Some("20"));
        let h1 = config_hash(&map);
        let h2 = config_hash(&map);
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);

        std::fs::write(&path, "novalue\n").unwrap();
        assert!(matches!(
            parse_config(&path),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let mut config = BTreeMap::new();
        config.insert("k".to_string(), "3".to_string());
        let mut m = RunManifest::new("emip", vec!["n.tif".into()], config);
        m.warnings
            .push("cell 3: empty slice set, used full MIP".into());
        m.timings_ms.insert("kmeans".into(), 12);
        let path = tmp("manifest.json");
        write_manifest(&path, &m).unwrap();
        let back: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back.format_version, MANIFEST_FORMAT_VERSION);
        assert_eq!(back.config_hash, m.config_hash);
        assert_eq!(back.warnings.len(), 1);
    }
}
