use std::sync::Arc;

use log::warn;

use super::HsiCube;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Train:val:test parts, e.g. `6:1:3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatios(pub [u32; 3]);

impl SplitRatios {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::config(
                "ratios",
                format!("expected A:B:C, got `{s}`"),
            ));
        }
        let mut r = [0u32; 3];
        for (slot, p) in r.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| Error::config("ratios", format!("`{p}` is not a whole number")))?;
        }
        let out = SplitRatios(r);
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().sum::<u32>() == 0 {
            return Err(Error::config("ratios", "ratios sum to zero"));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items; ties go to the earlier split.
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let total: u64 = self.0.iter().map(|&r| r as u64).sum();
        let mut counts = [0usize; 3];
        let mut rems = [0u64; 3];
        for i in 0..3 {
            let q = n as u64 * self.0[i] as u64;
            counts[i] = (q / total) as usize;
            rems[i] = q % total;
        }
        let mut left = n - counts.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if self.0[i] > 0 {
                counts[i] += 1;
                left -= 1;
            }
        }
        counts
    }
}

impl std::fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.0[0], self.0[1], self.0[2])
    }
}

/// A labelled pixel whose neighbor block is a model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    /// Zero-based class index (cube label − 1).
    pub class: usize,
}

/// Neighbor blocks of every labelled pixel, cut lazily from a zero-padded copy
/// of the cube.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    padded: Arc<Vec<f32>>,
    pub padded_height: usize,
    pub padded_width: usize,
    pub bands: usize,
    pub block: usize,
    pub num_classes: usize,
    pub patches: Vec<Patch>,
    /// Split of each patch, once [`stratified_split`] ran.
    pub partition: Option<Vec<Split>>,
    pub ratios: Option<SplitRatios>,
    pub seed: Option<u64>,
    /// Classes too small to split, sent entirely to the training split.
    pub fallback_classes: Vec<usize>,
}

/// Zero-pads by `⌊M/2⌋` on each spatial side and registers the `M×M×L` block
/// around every labelled pixel.
pub fn pad_and_extract(cube: &HsiCube, block: usize) -> Result<PatchDataset> {
    if block.is_multiple_of(2) {
        return Err(Error::param(format!("block size must be odd, got {block}")));
    }
    let r = block / 2;
    let (ph, pw) = (cube.height + 2 * r, cube.width + 2 * r);
    let mut padded = vec![0.0f32; cube.bands * ph * pw];
    for b in 0..cube.bands {
        for row in 0..cube.height {
            let src = &cube.data[(b * cube.height + row) * cube.width..][..cube.width];
            padded[(b * ph + row + r) * pw + r..][..cube.width].copy_from_slice(src);
        }
    }
    let mut patches = Vec::new();
    for row in 0..cube.height {
        for col in 0..cube.width {
            let l = cube.labels[row * cube.width + col];
            if l > 0 {
                patches.push(Patch {
                    row,
                    col,
                    class: l as usize - 1,
                });
            }
        }
    }
    Ok(PatchDataset {
        padded: Arc::new(padded),
        padded_height: ph,
        padded_width: pw,
        bands: cube.bands,
        block,
        num_classes: cube.num_classes(),
        patches,
        partition: None,
        ratios: None,
        seed: None,
        fallback_classes: Vec::new(),
    })
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Number of values in one block, `L·M·M`.
    pub fn patch_len(&self) -> usize {
        self.bands * self.block * self.block
    }

    /// Writes block `i` in `L × M × N` order (band-major).
    pub fn fill_patch(&self, i: usize, out: &mut [f32]) {
        let p = self.patches[i];
        let m = self.block;
        let (ph, pw) = (self.padded_height, self.padded_width);
        for b in 0..self.bands {
            for dr in 0..m {
                let src = &self.padded[(b * ph + p.row + dr) * pw + p.col..][..m];
                out[(b * m + dr) * m..][..m].copy_from_slice(src);
            }
        }
    }

    pub fn patch(&self, i: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.patch_len()];
        self.fill_patch(i, &mut out);
        out
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        match &self.partition {
            Some(p) => (0..p.len()).filter(|&i| p[i] == split).collect(),
            None => Vec::new(),
        }
    }

    /// Model input `B×1×L×M×N` and class targets for the given patches.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let n = self.patch_len();
        let mut buf = vec![0.0f32; n];
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            self.fill_patch(i, &mut buf);
            data.extend(buf.iter().map(|&v| T::from_f64(v as f64)));
        }
        let t = Tensor::new(vec![idx.len(), 1, self.bands, self.block, self.block], data)?;
        Ok((t, idx.iter().map(|&i| self.patches[i].class).collect()))
    }
}

/// Per class, shuffles the pixels with a seeded generator and assigns them to
/// train/val/test by largest-remainder apportionment of the ratios.
pub fn stratified_split(ds: &PatchDataset, ratios: SplitRatios, seed: u64) -> Result<PatchDataset> {
    ratios.validate()?;
    let mut rng = SeededRng::new(derive_seed(seed, "split"));
    let nonzero = ratios.0.iter().filter(|&&r| r > 0).count();
    let mut partition = vec![Split::Train; ds.len()];
    let mut fallback = Vec::new();
    for class in 0..ds.num_classes {
        let mut members: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.patches[i].class == class)
            .collect();
        rng.shuffle(&mut members);
        if members.len() < nonzero {
            warn!(
                "class {} has {} pixels for {nonzero} splits; all go to training",
                class + 1,
                members.len()
            );
            fallback.push(class);
            continue;
        }
        let [tr, va, _] = ratios.apportion(members.len());
        for (pos, &i) in members.iter().enumerate() {
            partition[i] = if pos < tr {
                Split::Train
            } else if pos < tr + va {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    let mut out = ds.clone();
    out.partition = Some(partition);
    out.ratios = Some(ratios);
    out.seed = Some(seed);
    out.fallback_classes = fallback;
    Ok(out)
}
