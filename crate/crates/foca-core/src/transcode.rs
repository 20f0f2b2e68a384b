//! Deterministic binary-to-audio and binary-to-image transcoding.
//!
//! Audio: one source byte becomes one 8-bit unsigned PCM sample (mono,
//! 8000 Hz) in a canonical 44-byte RIFF/WAVE container, so the data chunk is
//! the input byte sequence and the mapping is trivially invertible.
//!
//! Image: bytes are laid out row-major on a single grid whose width comes
//! from a file-size table, and each byte lights exactly one channel of its
//! pixel: red for the header section, green for the data section, blue for
//! the rest. Pad pixels are zero in all channels. Output is PNG with a
//! pinned encoder configuration.

use std::ops::Range;

use serde::Serialize;

use crate::error::{FocaError, Result};

/// First four bytes of a DEX file: "dex\n".
pub const DEX_MAGIC: [u8; 4] = [0x64, 0x65, 0x78, 0x0A];
/// Fixed DEX header size.
const DEX_HEADER_LEN: usize = 0x70;
/// File offsets of data_size / data_off in the DEX header.
const DEX_DATA_SIZE_OFF: usize = 0x68;
const DEX_DATA_OFF_OFF: usize = 0x6C;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobKind {
    Dex,
    Raw,
}

/// A nonempty byte sequence with a declared kind.
#[derive(Debug, Clone)]
pub struct BinaryBlob {
    bytes: Vec<u8>,
    kind: BlobKind,
}

impl BinaryBlob {
    pub fn new(bytes: Vec<u8>, kind: BlobKind) -> Result<Self> {
        if bytes.is_empty() {
            return Err(FocaError::EmptyInput("empty input".into()));
        }
        if kind == BlobKind::Dex && (bytes.len() < 4 || bytes[0..4] != DEX_MAGIC) {
            return Err(FocaError::Malformed(
                "declared dex kind but magic \"dex\\n\" missing".into(),
            ));
        }
        Ok(Self { bytes, kind })
    }

    /// Auto-detect: dex when the magic matches, raw otherwise.
    pub fn sniff(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() >= 4 && bytes[0..4] == DEX_MAGIC {
            Self::new(bytes, BlobKind::Dex)
        } else {
            Self::new(bytes, BlobKind::Raw)
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn kind(&self) -> BlobKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// Canonical WAV container: RIFF, PCM format tag 1, mono, 8000 Hz, 8-bit
/// unsigned, data chunk = the blob, no padding. Total length is 44 + N.
pub fn to_audio(blob: &BinaryBlob) -> Vec<u8> {
    let n = blob.len() as u32;
    let mut out = Vec::with_capacity(44 + blob.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + n).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes()); // PCM fmt chunk size
    out.extend_from_slice(&1u16.to_le_bytes()); // format tag: PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // channels: mono
    out.extend_from_slice(&8000u32.to_le_bytes()); // sample rate
    out.extend_from_slice(&8000u32.to_le_bytes()); // byte rate
    out.extend_from_slice(&1u16.to_le_bytes()); // block align
    out.extend_from_slice(&8u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(blob.bytes());
    out
}

/// Byte ranges feeding the three image channels. Disjoint, jointly covering
/// the whole blob, header first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionMap {
    pub header: Range<usize>,
    pub data: Range<usize>,
    pub rest: Vec<Range<usize>>,
    /// Set when a degenerate DEX data range forced the raw fallback rule.
    pub fallback_warning: bool,
}

#[derive(Serialize)]
struct SectionMapJson {
    kind: BlobKind,
    fallback_warning: bool,
    header: [usize; 2],
    data: [usize; 2],
    rest: Vec<[usize; 2]>,
}

impl SectionMap {
    pub fn to_json(&self, kind: BlobKind) -> Result<String> {
        let j = SectionMapJson {
            kind,
            fallback_warning: self.fallback_warning,
            header: [self.header.start, self.header.end],
            data: [self.data.start, self.data.end],
            rest: self.rest.iter().map(|r| [r.start, r.end]).collect(),
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }
}

/// Locate header/data/rest sections.
///
/// DEX: header is the fixed 0x70-byte header; the data section comes from the
/// header fields data_size (offset 0x68) and data_off (0x6C), clamped into
/// [0x70, len). A range that is empty after clamping falls back to the raw
/// rule with a warning flag.
///
/// Raw: header is the first 112 bytes (whole file if shorter), the remainder
/// is split 50/50 into data then rest.
pub fn parse_sections(blob: &BinaryBlob) -> Result<SectionMap> {
    let len = blob.len();
    match blob.kind() {
        BlobKind::Dex => {
            if len < DEX_HEADER_LEN {
                return Err(FocaError::Malformed(format!(
                    "dex blob of {len} bytes is shorter than the 0x70-byte header"
                )));
            }
            let b = blob.bytes();
            let data_size = u32::from_le_bytes(
                b[DEX_DATA_SIZE_OFF..DEX_DATA_SIZE_OFF + 4].try_into().unwrap(),
            ) as u64;
            let data_off =
                u32::from_le_bytes(b[DEX_DATA_OFF_OFF..DEX_DATA_OFF_OFF + 4].try_into().unwrap())
                    as u64;
            let start = data_off.max(DEX_HEADER_LEN as u64).min(len as u64) as usize;
            let end = (data_off + data_size).min(len as u64) as usize;
            if end <= start {
                let mut m = raw_sections(len);
                m.fallback_warning = true;
                return Ok(m);
            }
            let mut rest = Vec::new();
            if start > DEX_HEADER_LEN {
                rest.push(DEX_HEADER_LEN..start);
            }
            if end < len {
                rest.push(end..len);
            }
            Ok(SectionMap {
                header: 0..DEX_HEADER_LEN,
                data: start..end,
                rest,
                fallback_warning: false,
            })
        }
        BlobKind::Raw => Ok(raw_sections(len)),
    }
}

fn raw_sections(len: usize) -> SectionMap {
    let header_end = len.min(112);
    let data_end = header_end + (len - header_end) / 2;
    let rest = if data_end < len {
        vec![data_end..len]
    } else {
        Vec::new()
    };
    SectionMap {
        header: 0..header_end,
        data: header_end..data_end,
        rest,
        fallback_warning: false,
    }
}

/// Image width as a function of file size, per the usual byte-plot table.
pub fn width_for_len(len: usize) -> usize {
    const KIB: usize = 1024;
    match len {
        l if l < 10 * KIB => 32,
        l if l < 30 * KIB => 64,
        l if l < 60 * KIB => 128,
        l if l < 100 * KIB => 256,
        l if l < 200 * KIB => 384,
        l if l < 500 * KIB => 512,
        l if l < 1000 * KIB => 768,
        _ => 1024,
    }
}

/// RGB byte-plot of a blob; `pixels` is height x width x 3, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Lay the blob out on the grid with one channel per section.
pub fn to_image(blob: &BinaryBlob) -> Result<RgbImage> {
    let sections = parse_sections(blob)?;
    let len = blob.len();
    let width = width_for_len(len);
    let height = len.div_ceil(width);
    let mut pixels = vec![0u8; width * height * 3];
    let bytes = blob.bytes();
    let mut paint = |range: Range<usize>, channel: usize| {
        for i in range {
            pixels[i * 3 + channel] = bytes[i];
        }
    };
    paint(sections.header.clone(), 0);
    paint(sections.data.clone(), 1);
    for r in &sections.rest {
        paint(r.clone(), 2);
    }
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

impl RgbImage {
    /// Encode as PNG with a pinned configuration (fast compression, no
    /// filtering) so the emitted bytes are stable for a given crate version.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_compression(png::Compression::Fast);
            enc.set_filter(png::FilterType::NoFilter);
            let mut writer = enc
                .write_header()
                .map_err(|e| FocaError::Malformed(format!("png encode: {e}")))?;
            writer
                .write_image_data(&self.pixels)
                .map_err(|e| FocaError::Malformed(format!("png encode: {e}")))?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(bytes);
        let mut reader = decoder
            .read_info()
            .map_err(|e| FocaError::Malformed(format!("png decode: {e}")))?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| FocaError::Malformed(format!("png decode: {e}")))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(FocaError::Malformed("png is not 8-bit RGB".into()));
        }
        buf.truncate(info.buffer_size());
        Ok(Self {
            width: info.width as usize,
            height: info.height as usize,
            pixels: buf,
        })
    }
}
