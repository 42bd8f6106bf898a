//! Minimal baseline TIFF codec: uncompressed striped grayscale, 8 or 16
//! bits per sample, multi-page. The reader accepts both byte orders and
//! multiple strips; the writer always emits little-endian pages with a
//! single strip. Anything outside that profile (compression, tiles,
//! multi-sample, palette) is rejected rather than misread.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

const TAG_IMAGE_WIDTH: u16 = 256;
const TAG_IMAGE_LENGTH: u16 = 257;
const TAG_BITS_PER_SAMPLE: u16 = 258;
const TAG_COMPRESSION: u16 = 259;
const TAG_PHOTOMETRIC: u16 = 262;
const TAG_STRIP_OFFSETS: u16 = 273;
const TAG_SAMPLES_PER_PIXEL: u16 = 277;
const TAG_ROWS_PER_STRIP: u16 = 278;
const TAG_STRIP_BYTE_COUNTS: u16 = 279;
const TAG_PLANAR_CONFIG: u16 = 284;
const TAG_TILE_WIDTH: u16 = 322;
const TAG_TILE_LENGTH: u16 = 323;
const TAG_SAMPLE_FORMAT: u16 = 339;

const TYPE_BYTE: u16 = 1;
const TYPE_SHORT: u16 = 3;
const TYPE_LONG: u16 = 4;

/// One decoded grayscale page; samples are raw (0..=255 or 0..=65535)
/// with photometric interpretation already applied.
#[derive(Debug)]
pub struct Page {
    pub width: u32,
    pub height: u32,
    pub bits: u8,
    pub samples: Vec<u16>,
}

struct Reader<'a> {
    data: &'a [u8],
    big: bool,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::CorruptFile {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn unsupported(&self, detail: impl Into<String>) -> Error {
        Error::UnsupportedFormat {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn bytes(&self, off: usize, len: usize) -> Result<&'a [u8]> {
        self.data
            .get(
                off..off
                    .checked_add(len)
                    .ok_or_else(|| self.corrupt("offset overflow"))?,
            )
            .ok_or_else(|| self.corrupt(format!("read of {len} bytes at {off} past end of file")))
    }

    fn u16_at(&self, off: usize) -> Result<u16> {
        let b = self.bytes(off, 2)?;
        Ok(if self.big {
            u16::from_be_bytes([b[0], b[1]])
        } else {
            u16::from_le_bytes([b[0], b[1]])
        })
    }

    fn u32_at(&self, off: usize) -> Result<u32> {
        let b = self.bytes(off, 4)?;
        Ok(if self.big {
            u32::from_be_bytes([b[0], b[1], b[2], b[3]])
        } else {
            u32::from_le_bytes([b[0], b[1], b[2], b[3]])
        })
    }

    /// All values of one IFD entry as u64s (BYTE/SHORT/LONG only).
    fn entry_values(&self, entry_off: usize) -> Result<Vec<u64>> {
        let ty = self.u16_at(entry_off + 2)?;
        let count = self.u32_at(entry_off + 4)? as usize;
        let elem = match ty {
            TYPE_BYTE => 1,
            TYPE_SHORT => 2,
            TYPE_LONG => 4,
            other => {
                return Err(self.corrupt(format!("unhandled tag type {other}")));
            }
        };
        let total = elem * count;
        let base = if total <= 4 {
            entry_off + 8
        } else {
            self.u32_at(entry_off + 8)? as usize
        };
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let off = base + i * elem;
            let v = match ty {
                TYPE_BYTE => self.bytes(off, 1)?[0] as u64,
                TYPE_SHORT => self.u16_at(off)? as u64,
                _ => self.u32_at(off)? as u64,
            };
            out.push(v);
        }
        Ok(out)
    }
}

type TagMap = HashMap<u16, usize>;

fn single(r: &Reader, tags: &TagMap, tag: u16) -> Result<Option<u64>> {
    match tags.get(&tag) {
        None => Ok(None),
        Some(&off) => {
            let vals = r.entry_values(off)?;
            vals.first()
                .copied()
                .map(Some)
                .ok_or_else(|| r.corrupt(format!("tag {tag} has no values")))
        }
    }
}

fn decode_page(r: &Reader, tags: &TagMap) -> Result<Page> {
    if tags.contains_key(&TAG_TILE_WIDTH) || tags.contains_key(&TAG_TILE_LENGTH) {
        return Err(r.unsupported("tiled layout"));
    }
    let compression = single(r, tags, TAG_COMPRESSION)?.unwrap_or(1);
    if compression != 1 {
        return Err(r.unsupported(format!("compression {compression}")));
    }
    let spp = single(r, tags, TAG_SAMPLES_PER_PIXEL)?.unwrap_or(1);
    if spp != 1 {
        return Err(r.unsupported(format!("{spp} samples per pixel")));
    }
    let photometric = single(r, tags, TAG_PHOTOMETRIC)?.unwrap_or(1);
    if photometric > 1 {
        return Err(r.unsupported(format!("photometric interpretation {photometric}")));
    }
    if let Some(planar) = single(r, tags, TAG_PLANAR_CONFIG)? {
        if planar != 1 {
            return Err(r.unsupported(format!("planar configuration {planar}")));
        }
    }
    if let Some(fmt) = single(r, tags, TAG_SAMPLE_FORMAT)? {
        if fmt != 1 {
            return Err(r.unsupported(format!("sample format {fmt}")));
        }
    }
    let bits = single(r, tags, TAG_BITS_PER_SAMPLE)?.unwrap_or(1);
    if bits != 8 && bits != 16 {
        return Err(r.unsupported(format!("{bits} bits per sample")));
    }
    let width =
        single(r, tags, TAG_IMAGE_WIDTH)?.ok_or_else(|| r.corrupt("missing image width"))? as u32;
    let height =
        single(r, tags, TAG_IMAGE_LENGTH)?.ok_or_else(|| r.corrupt("missing image length"))? as u32;
    if width == 0 || height == 0 || width > 1 << 20 || height > 1 << 20 {
        return Err(r.corrupt(format!("implausible page size {width}x{height}")));
    }
    let offsets_entry = tags
        .get(&TAG_STRIP_OFFSETS)
        .ok_or_else(|| r.corrupt("missing strip offsets"))?;
    let offsets = r.entry_values(*offsets_entry)?;
    let counts_entry = tags
        .get(&TAG_STRIP_BYTE_COUNTS)
        .ok_or_else(|| r.corrupt("missing strip byte counts"))?;
    let counts = r.entry_values(*counts_entry)?;
    if offsets.len() != counts.len() {
        return Err(r.corrupt("strip offset/count length mismatch"));
    }
    let expected = width as usize * height as usize * (bits as usize / 8);
    let mut raw = Vec::with_capacity(expected);
    for (&off, &count) in offsets.iter().zip(&counts) {
        raw.extend_from_slice(r.bytes(off as usize, count as usize)?);
    }
    if raw.len() != expected {
        return Err(r.corrupt(format!(
            "strip data is {} bytes, expected {expected}",
            raw.len()
        )));
    }
    let max = if bits == 8 { 255u16 } else { 65535 };
    let mut samples: Vec<u16> = if bits == 8 {
        raw.iter().map(|&b| b as u16).collect()
    } else {
        raw.chunks_exact(2)
            .map(|c| {
                if r.big {
                    u16::from_be_bytes([c[0], c[1]])
                } else {
                    u16::from_le_bytes([c[0], c[1]])
                }
            })
            .collect()
    };
    if photometric == 0 {
        for s in samples.iter_mut() {
            *s = max - *s;
        }
    }
    Ok(Page {
        width,
        height,
        bits: bits as u8,
        samples,
    })
}

/// Decodes every page of a baseline grayscale TIFF.
pub fn read_pages(path: &Path) -> Result<Vec<Page>> {
    let data = std::fs::read(path)?;
    let corrupt = |detail: &str| Error::CorruptFile {
        path: path.to_path_buf(),
        detail: detail.into(),
    };
    if data.len() < 8 {
        return Err(corrupt("shorter than a TIFF header"));
    }
    let big = match &data[0..2] {
        b"II" => false,
        b"MM" => true,
        _ => return Err(corrupt("bad byte-order mark")),
    };
    let r = Reader {
        data: &data,
        big,
        path,
    };
    if r.u16_at(2)? != 42 {
        return Err(corrupt("bad magic number"));
    }
    let mut ifd_off = r.u32_at(4)? as usize;
    let mut pages = Vec::new();
    let mut seen = std::collections::HashSet::new();
    while ifd_off != 0 {
        if !seen.insert(ifd_off) {
            return Err(corrupt("IFD offset cycle"));
        }
        let n = r.u16_at(ifd_off)? as usize;
        let mut tags: TagMap = HashMap::with_capacity(n);
        for i in 0..n {
            let entry_off = ifd_off + 2 + i * 12;
            let tag = r.u16_at(entry_off)?;
            tags.insert(tag, entry_off);
        }
        pages.push(decode_page(&r, &tags)?);
        ifd_off = r.u32_at(ifd_off + 2 + n * 12)? as usize;
    }
    if pages.is_empty() {
        return Err(corrupt("no pages"));
    }
    Ok(pages)
}

fn push_entry(ifd: &mut Vec<u8>, tag: u16, ty: u16, count: u32, value: u32) {
    ifd.extend_from_slice(&tag.to_le_bytes());
    ifd.extend_from_slice(&ty.to_le_bytes());
    ifd.extend_from_slice(&count.to_le_bytes());
    match ty {
        // SHORT values sit in the low two bytes of the field.
        TYPE_SHORT => {
            ifd.extend_from_slice(&(value as u16).to_le_bytes());
            ifd.extend_from_slice(&[0, 0]);
        }
        _ => ifd.extend_from_slice(&value.to_le_bytes()),
    }
}

/// Encodes pages of raw samples as little-endian baseline TIFF, one strip
/// per page. All pages must share dimensions; `bits` is 8 or 16.
pub fn write_pages(path: &Path, width: u32, height: u32, bits: u8, pages: &[&[u16]]) -> Result<()> {
    assert!(bits == 8 || bits == 16, "writer supports 8/16-bit only");
    assert!(!pages.is_empty(), "at least one page required");
    let pixels = width as usize * height as usize;
    let page_bytes = pixels * (bits as usize / 8);
    const ENTRIES: usize = 9;
    let ifd_len = 2 + ENTRIES * 12 + 4;
    let mut out = Vec::with_capacity(8 + pages.len() * (page_bytes + ifd_len));
    out.extend_from_slice(b"II");
    out.extend_from_slice(&42u16.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes()); // first IFD offset, patched below
    let mut prev_link: usize = 4;
    for samples in pages {
        assert_eq!(samples.len(), pixels, "page size mismatch");
        let data_off = out.len() as u32;
        match bits {
            8 => out.extend(samples.iter().map(|&s| s as u8)),
            _ => {
                for &s in samples.iter() {
                    out.extend_from_slice(&s.to_le_bytes());
                }
            }
        }
        let ifd_off = out.len() as u32;
        out[prev_link..prev_link + 4].copy_from_slice(&ifd_off.to_le_bytes());
        let mut ifd = Vec::with_capacity(ifd_len);
        ifd.extend_from_slice(&(ENTRIES as u16).to_le_bytes());
        push_entry(&mut ifd, TAG_IMAGE_WIDTH, TYPE_LONG, 1, width);
        push_entry(&mut ifd, TAG_IMAGE_LENGTH, TYPE_LONG, 1, height);
        push_entry(&mut ifd, TAG_BITS_PER_SAMPLE, TYPE_SHORT, 1, bits as u32);
        push_entry(&mut ifd, TAG_COMPRESSION, TYPE_SHORT, 1, 1);
        push_entry(&mut ifd, TAG_PHOTOMETRIC, TYPE_SHORT, 1, 1);
        push_entry(&mut ifd, TAG_STRIP_OFFSETS, TYPE_LONG, 1, data_off);
        push_entry(&mut ifd, TAG_SAMPLES_PER_PIXEL, TYPE_SHORT, 1, 1);
        push_entry(&mut ifd, TAG_ROWS_PER_STRIP, TYPE_LONG, 1, height);
        push_entry(
            &mut ifd,
            TAG_STRIP_BYTE_COUNTS,
            TYPE_LONG,
            1,
            page_bytes as u32,
        );
        prev_link = out.len() + ifd.len();
        ifd.extend_from_slice(&0u32.to_le_bytes()); // next-IFD link
        out.extend_from_slice(&ifd);
    }
    std::fs::write(path, out)?;
    Ok(())
}
