//! Datasets: u8 image collections (file-backed or synthetic) and byte-level text.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng as _, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// Image file magic.
pub const IMAGE_MAGIC: &[u8; 8] = b"PTRNIMG1";

/// `count` images of `channels×height×width` u8 pixels, stored image-major,
/// plus one u8 label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl ImageDataset {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * channels * height * width {
            return Err(Error::Dataset(format!(
                "{} pixel bytes for {} images of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self { channels, height, width, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Pixels of image `i` scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Vec<f64> {
        let n = self.image_len();
        self.pixels[i * n..(i + 1) * n].iter().map(|&p| p as f64 / 255.0).collect()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// `[B×C×H×W]` tensor of the chosen images.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let data = indices.iter().flat_map(|&i| self.image(i)).collect();
        Tensor::new([indices.len(), self.channels, self.height, self.width], data)
    }

    /// Leading `1 - val_fraction` of the images for training, the rest for validation.
    pub fn split(&self, val_fraction: f64) -> (ImageDataset, ImageDataset) {
        let cut = ((1.0 - val_fraction.clamp(0.0, 1.0)) * self.len() as f64).round() as usize;
        let n = self.image_len();
        let part = |lo: usize, hi: usize| Self {
            pixels: self.pixels[lo * n..hi * n].to_vec(),
            labels: self.labels[lo..hi].to_vec(),
            ..*self
        };
        (part(0, cut), part(cut, self.len()))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(IMAGE_MAGIC)?;
        for v in [self.len(), self.channels, self.height, self.width] {
            let v = u32::try_from(v).map_err(|_| Error::Dataset(format!("header field {v} exceeds u32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.pixels)?;
        w.write_all(&self.labels)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; 24];
        r.read_exact(&mut header).map_err(|e| Error::Dataset(format!("truncated image header: {e}")))?;
        if &header[..8] != IMAGE_MAGIC {
            return Err(Error::Dataset("bad magic; not an image dataset file".into()));
        }
        let field = |i: usize| u32::from_le_bytes(header[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let (count, channels, height, width) = (field(0), field(1), field(2), field(3));
        let mut pixels = vec![0u8; count * channels * height * width];
        r.read_exact(&mut pixels).map_err(|e| Error::Dataset(format!("truncated pixel data: {e}")))?;
        let mut labels = vec![0u8; count];
        r.read_exact(&mut labels).map_err(|e| Error::Dataset(format!("truncated label data: {e}")))?;
        Self::new(channels, height, width, pixels, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

/// Geometry of the synthetic patterned-patch task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatternedPatch {
    pub channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub classes: usize,
}

impl Default for PatternedPatch {
    fn default() -> Self {
        Self { channels: 3, image_size: 32, patch_size: 4, classes: 10 }
    }
}

impl PatternedPatch {
    fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Class template over one patch's `(c, dy, dx)` entries: `true` marks a
    /// bright pixel, `false` a dark one. Fixed per class, independent of any seed.
    pub fn template(&self, class: usize) -> Vec<bool> {
        let mut rng = Rng::seed_from_u64(0x7A77_E2ED ^ class as u64);
        (0..self.patch_len()).map(|_| rng.random_bool(0.5)).collect()
    }

    /// Every patch independently carries the class template with probability
    /// 1/2 (bright entries in `[160, 256)`, dark ones in `[0, 64)`) and is
    /// uniform noise otherwise. The class is the template that the patches
    /// repeat, so it is a function of patch statistics alone.
    pub fn generate(&self, count: usize, seed: u64) -> Result<ImageDataset> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) || self.classes == 0 {
            return Err(Error::Dataset("bad patterned-patch geometry".into()));
        }
        if self.classes > 256 {
            return Err(Error::Dataset(format!("{} classes do not fit u8 labels", self.classes)));
        }
        let templates: Vec<Vec<bool>> = (0..self.classes).map(|c| self.template(c)).collect();
        let mut rng = Rng::seed_from_u64(seed);
        let (s, p, ch) = (self.image_size, self.patch_size, self.channels);
        let grid = s / p;
        let mut pixels = vec![0u8; count * ch * s * s];
        let mut labels = Vec::with_capacity(count);
        for chunk in pixels.chunks_exact_mut(ch * s * s) {
            let class = rng.random_range(0..self.classes);
            for cell in 0..grid * grid {
                let (py, px) = (cell / grid, cell % grid);
                let marked = rng.random_bool(0.5);
                for c in 0..ch {
                    for dy in 0..p {
                        for dx in 0..p {
                            let v = if !marked {
                                rng.random_range(0..=255)
                            } else if templates[class][(c * p + dy) * p + dx] {
                                rng.random_range(160..=255)
                            } else {
                                rng.random_range(0..64)
                            };
                            chunk[(c * s + py * p + dy) * s + px * p + dx] = v;
                        }
                    }
                }
            }
            labels.push(class as u8);
        }
        ImageDataset::new(ch, s, s, pixels, labels)
    }
}

/// Byte-level corpus; vocabulary is all 256 byte values.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCorpus {
    pub bytes: Vec<u8>,
}

pub const BYTE_VOCAB: usize = 256;

/// 64 distinct-enough characters for memorization runs.
pub const MEMO_PATTERN: &str = "Sphinx of black quartz, judge my vow! 0123456789 ZYXWV: the end.";

impl TextCorpus {
    /// Reads any UTF-8 file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        Ok(Self { bytes: text.into_bytes() })
    }

    /// `pattern` repeated until `len` bytes.
    pub fn repeated(pattern: &str, len: usize) -> Result<Self> {
        if pattern.is_empty() {
            return Err(Error::Dataset("empty pattern".into()));
        }
        Ok(Self { bytes: pattern.bytes().cycle().take(len).collect() })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Leading `1 - val_fraction` for training, the rest for validation.
    pub fn split(&self, val_fraction: f64) -> (TextCorpus, TextCorpus) {
        let cut = ((1.0 - val_fraction.clamp(0.0, 1.0)) * self.len() as f64).round() as usize;
        (Self { bytes: self.bytes[..cut].to_vec() }, Self { bytes: self.bytes[cut..].to_vec() })
    }

    /// Number of windows of `seq_len` inputs (each needs one extra target byte).
    pub fn window_count(&self, seq_len: usize) -> usize {
        self.len().saturating_sub(seq_len)
    }

    /// Inputs `bytes[start..start+L]`, targets shifted by one.
    pub fn window(&self, start: usize, seq_len: usize) -> (Vec<usize>, Vec<usize>) {
        let input = self.bytes[start..start + seq_len].iter().map(|&b| b as usize).collect();
        let target = self.bytes[start + 1..start + seq_len + 1].iter().map(|&b| b as usize).collect();
        (input, target)
    }

    /// Non-overlapping windows covering the corpus, for an exact evaluation pass.
    pub fn eval_starts(&self, seq_len: usize) -> Vec<usize> {
        (0..self.window_count(seq_len)).step_by(seq_len.max(1)).collect()
    }
}
