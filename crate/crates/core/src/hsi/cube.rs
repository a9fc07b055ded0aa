use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"EKGH";

/// A labelled hyperspectral image stored band-sequentially:
/// `data[band·H·W + row·W + col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub data: Vec<f32>,
    /// `0` = unlabelled, `1..=C` = classes; row-major.
    pub labels: Vec<u16>,
    /// Retained-band indicator over the bands of the original acquisition.
    pub band_mask: Vec<bool>,
}

impl HsiCube {
    pub fn new(
        name: &str,
        height: usize,
        width: usize,
        bands: usize,
        data: Vec<f32>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let cube = HsiCube {
            name: name.to_string(),
            height,
            width,
            bands,
            data,
            labels,
            band_mask: vec![true; bands],
        };
        cube.validate()?;
        Ok(cube)
    }

    pub fn validate(&self) -> Result<()> {
        let pixels = self.height * self.width;
        if pixels == 0 || self.bands == 0 {
            return Err(Error::Consistency("cube extents must be positive".into()));
        }
        if self.data.len() != pixels * self.bands {
            return Err(Error::Consistency(format!(
                "cube {}×{}×{} needs {} values, holds {}",
                self.height,
                self.width,
                self.bands,
                pixels * self.bands,
                self.data.len()
            )));
        }
        if self.labels.len() != pixels {
            return Err(Error::Consistency(format!(
                "label grid holds {} entries for a {}×{} image",
                self.labels.len(),
                self.height,
                self.width
            )));
        }
        let retained = self.band_mask.iter().filter(|&&b| b).count();
        if retained != self.bands {
            return Err(Error::Consistency(format!(
                "band mask retains {retained} bands but the cube has {}",
                self.bands
            )));
        }
        let classes = self.num_classes();
        if self.labels.iter().any(|&l| l as usize > classes) {
            return Err(Error::Consistency(
                "class indices are not contiguous".into(),
            ));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l > 0)
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Pixel counts of classes `1..=C` (index 0 holds class 1).
    pub fn class_histogram(&self) -> Vec<usize> {
        let c = self.labels.iter().copied().max().unwrap_or(0) as usize;
        let mut h = vec![0; c];
        for &l in &self.labels {
            if l > 0 {
                h[l as usize - 1] += 1;
            }
        }
        h
    }

    pub fn value(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.value(b, row, col)).collect()
    }

    /// Renumbers classes so that the labels present become `1..=C`, order preserved.
    fn compact_labels(&mut self) {
        let present: Vec<u16> = self
            .labels
            .iter()
            .copied()
            .filter(|&l| l > 0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut map = vec![0u16; *present.last().unwrap_or(&0) as usize + 1];
        for (i, &l) in present.iter().enumerate() {
            map[l as usize] = i as u16 + 1;
        }
        self.labels.iter_mut().for_each(|l| *l = map[*l as usize]);
    }

    /// Keeps the bands whose mask entry is true, in their original order.
    pub fn apply_band_mask(&self, mask: &[bool]) -> Result<HsiCube> {
        if mask.len() != self.bands {
            return Err(Error::Consistency(format!(
                "band mask of length {} for {} bands",
                mask.len(),
                self.bands
            )));
        }
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(plane * mask.iter().filter(|&&m| m).count());
        for (b, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            data.extend_from_slice(&self.data[b * plane..(b + 1) * plane]);
        }
        let mut band_mask = self.band_mask.clone();
        for (slot, &keep) in band_mask.iter_mut().filter(|s| **s).zip(mask) {
            *slot = keep;
        }
        let out = HsiCube {
            name: self.name.clone(),
            height: self.height,
            width: self.width,
            bands: data.len() / plane,
            data,
            labels: self.labels.clone(),
            band_mask,
        };
        out.validate()?;
        Ok(out)
    }

    /// Per-band standardization using the statistics of labelled pixels.
    pub fn normalize(&self) -> (HsiCube, Normalization) {
        let norm = Normalization::fit(self);
        (norm.apply(self), norm)
    }

    /// Byte length of this cube in the `EKGH` format.
    pub fn encoded_len(&self) -> usize {
        4 + 12 + 4 * self.data.len() + 2 * self.labels.len() + 4 + self.name.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(CUBE_MAGIC);
        for v in [self.height, self.width, self.bands] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<HsiCube> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CUBE_MAGIC {
            return Err(Error::Format("bad cube magic".into()));
        }
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let bands = r.u32()? as usize;
        let n = height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(bands))
            .ok_or_else(|| Error::Format("cube extents overflow".into()))?;
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = r
            .take(2 * height * width)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("cube name is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let mut cube = HsiCube {
            name,
            height,
            width,
            bands,
            data,
            labels,
            band_mask: vec![true; bands],
        };
        cube.compact_labels();
        cube.validate()?;
        Ok(cube)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("truncated cube file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_cube(path: impl AsRef<Path>, cube: &HsiCube) -> Result<()> {
    fs::write(path, cube.to_bytes())?;
    Ok(())
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    HsiCube::from_bytes(&fs::read(path)?)
}

/// Per-band mean and standard deviation over labelled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Bands whose variance fell below the floor.
    pub flagged: Vec<usize>,
}

const VAR_FLOOR: f64 = 1e-8;

impl Normalization {
    pub fn fit(cube: &HsiCube) -> Self {
        let plane = cube.height * cube.width;
        let labelled: Vec<usize> = (0..plane).filter(|&p| cube.labels[p] > 0).collect();
        let n = labelled.len().max(1) as f64;
        let mut mean = Vec::with_capacity(cube.bands);
        let mut std = Vec::with_capacity(cube.bands);
        let mut flagged = Vec::new();
        for b in 0..cube.bands {
            let band = &cube.data[b * plane..(b + 1) * plane];
            let m = labelled.iter().map(|&p| band[p] as f64).sum::<f64>() / n;
            let v = labelled
                .iter()
                .map(|&p| (band[p] as f64 - m).powi(2))
                .sum::<f64>()
                / n;
            if v < VAR_FLOOR {
                flagged.push(b);
            }
            mean.push(m);
            std.push(v.max(VAR_FLOOR).sqrt());
        }
        Normalization { mean, std, flagged }
    }

    pub fn apply(&self, cube: &HsiCube) -> HsiCube {
        let plane = cube.height * cube.width;
        let mut out = cube.clone();
        for b in 0..cube.bands {
            for v in &mut out.data[b * plane..(b + 1) * plane] {
                *v = ((*v as f64 - self.mean[b]) / self.std[b]) as f32;
            }
        }
        out
    }
}
