//! Video clips on disk.
//!
//! Two layouts are accepted:
//!
//! * a directory of PNG frames, read in lexicographic file-name order, each
//!   an 8-bit RGB (or RGBA, alpha ignored) image of 128×64 pixels;
//! * a single raw file: the 8 magic bytes `VSSLVID1`, then four
//!   little-endian `u32` values `frames, channels, height, width`, then
//!   `frames·channels·height·width` bytes in frame, channel, row, column
//!   order.
//!
//! A byte `b` maps to the pixel value `b / 127.5 − 1` in `[-1, 1]`.

use std::fs;
use std::path::Path;

use vssl_core::data::{FRAME_CHANNELS, FRAME_HEIGHT, FRAME_WIDTH};
use vssl_core::tensor::Tensor;
use vssl_core::train::VideoSource;

use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 8] = b"VSSLVID1";
const RAW_HEADER: usize = 8 + 16;

/// 8-bit frames `[t, 3, 64, 128]`, decoded to floats one frame at a time.
#[derive(Clone, Debug, PartialEq)]
pub struct ByteVideo {
    frames: usize,
    data: Vec<u8>,
}

pub const FRAME_LEN: usize = FRAME_CHANNELS * FRAME_HEIGHT * FRAME_WIDTH;

pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

impl ByteVideo {
    pub fn new(frames: usize, data: Vec<u8>) -> Result<Self> {
        if frames == 0 || data.len() != frames * FRAME_LEN {
            return Err(Error::Config(format!("video needs {frames} × {FRAME_LEN} bytes, got {}", data.len())));
        }
        Ok(ByteVideo { frames, data })
    }

    /// Quantise any frame source.
    pub fn from_source(src: &dyn VideoSource) -> Result<Self> {
        let mut data = Vec::with_capacity(src.num_frames() * FRAME_LEN);
        for j in 0..src.num_frames() {
            let f = src.frame(j)?;
            if f.len() != FRAME_LEN {
                return Err(Error::Config(format!("frame {j} has shape {:?}", f.shape())));
            }
            data.extend(f.data().iter().map(|&v| to_byte(v)));
        }
        ByteVideo::new(src.num_frames(), data)
    }

    /// Keep the first `n` frames.
    pub fn truncate(&mut self, n: usize) {
        self.frames = self.frames.min(n.max(1));
        self.data.truncate(self.frames * FRAME_LEN);
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }
}

impl VideoSource for ByteVideo {
    fn num_frames(&self) -> usize {
        self.frames
    }

    fn frame(&self, j: usize) -> vssl_core::Result<Tensor> {
        if j >= self.frames {
            return Err(vssl_core::Error::Shape(format!("frame {j} of {}", self.frames)));
        }
        let px = self.data[j * FRAME_LEN..(j + 1) * FRAME_LEN].iter().map(|&b| from_byte(b)).collect();
        Tensor::from_vec(&[FRAME_CHANNELS, FRAME_HEIGHT, FRAME_WIDTH], px)
    }
}

pub fn write_raw(path: &Path, v: &ByteVideo) -> Result<()> {
    let mut out = Vec::with_capacity(RAW_HEADER + v.data.len());
    out.extend_from_slice(RAW_MAGIC);
    for d in [v.frames, FRAME_CHANNELS, FRAME_HEIGHT, FRAME_WIDTH] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&v.data);
    crate::fsio::write_atomic(path, &out)
}

pub fn read_raw(path: &Path) -> Result<ByteVideo> {
    let bytes = crate::fsio::read(path)?;
    if bytes.len() < RAW_HEADER || &bytes[..8] != RAW_MAGIC {
        return Err(Error::format(path, "missing VSSLVID1 header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (t, c, h, w) = (dim(0), dim(1), dim(2), dim(3));
    if (c, h, w) != (FRAME_CHANNELS, FRAME_HEIGHT, FRAME_WIDTH) {
        return Err(Error::format(path, format!("frames are {c}×{h}×{w}, expected {FRAME_CHANNELS}×{FRAME_HEIGHT}×{FRAME_WIDTH}")));
    }
    if bytes.len() != RAW_HEADER + t * FRAME_LEN {
        return Err(Error::format(path, format!("{t} frames need {} payload bytes, found {}", t * FRAME_LEN, bytes.len() - RAW_HEADER)));
    }
    ByteVideo::new(t, bytes[RAW_HEADER..].to_vec()).map_err(|e| Error::format(path, e.to_string()))
}

/// One PNG per frame, named `00000.png`, `00001.png`, ...
pub fn write_png_dir(dir: &Path, v: &ByteVideo) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plane = FRAME_HEIGHT * FRAME_WIDTH;
    for j in 0..v.frames {
        let f = &v.data[j * FRAME_LEN..(j + 1) * FRAME_LEN];
        let mut rgb = Vec::with_capacity(FRAME_LEN);
        for p in 0..plane {
            rgb.extend((0..FRAME_CHANNELS).map(|c| f[c * plane + p]));
        }
        let img = image::RgbImage::from_raw(FRAME_WIDTH as u32, FRAME_HEIGHT as u32, rgb).expect("buffer sized to frame");
        let mut buf = std::io::Cursor::new(Vec::new());
        let path = dir.join(format!("{j:05}.png"));
        img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| Error::format(&path, e.to_string()))?;
        crate::fsio::write_atomic(&path, &buf.into_inner())?;
    }
    Ok(())
}

pub fn read_png_dir(dir: &Path) -> Result<ByteVideo> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "no PNG frames"));
    }
    let plane = FRAME_HEIGHT * FRAME_WIDTH;
    let mut data = Vec::with_capacity(files.len() * FRAME_LEN);
    for p in &files {
        let img = image::open(p).map_err(|e| Error::format(p, e.to_string()))?.to_rgb8();
        if img.dimensions() != (FRAME_WIDTH as u32, FRAME_HEIGHT as u32) {
            return Err(Error::format(p, format!("frame is {:?}, expected {FRAME_WIDTH}×{FRAME_HEIGHT}", img.dimensions())));
        }
        let raw = img.as_raw();
        for c in 0..FRAME_CHANNELS {
            data.extend((0..plane).map(|i| raw[i * FRAME_CHANNELS + c]));
        }
    }
    ByteVideo::new(files.len(), data).map_err(|e| Error::format(dir, e.to_string()))
}

/// Read either layout: a directory is taken as PNG frames, a file as raw.
pub fn read_video(path: &Path) -> Result<ByteVideo> {
    if path.is_dir() {
        read_png_dir(path)
    } else {
        read_raw(path)
    }
}
