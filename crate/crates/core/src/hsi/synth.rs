use super::HsiCube;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Generator settings for a separable synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Noise standard deviation as a fraction of each prototype's peak.
    pub noise: f64,
    pub seed: u64,
    /// Explicit class spectra; replaces the generated prototypes when set.
    pub prototypes: Option<Vec<Vec<f32>>>,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            classes: 3,
            height: 32,
            width: 32,
            bands: 24,
            noise: 0.05,
            seed: 0,
            prototypes: None,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(
                "classes",
                "at least two classes are required",
            ));
        }
        if self.classes > u16::MAX as usize {
            return Err(Error::config(
                "classes",
                "too many classes for the label format",
            ));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("height", "image extents must be positive"));
        }
        if self.classes > self.height * self.width {
            return Err(Error::config("classes", "more classes than pixels"));
        }
        if self.bands == 0 {
            return Err(Error::config("bands", "band count must be positive"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config(
                "noise",
                "noise level must be finite and non-negative",
            ));
        }
        if let Some(p) = &self.prototypes {
            if p.len() != self.classes || p.iter().any(|s| s.len() != self.bands) {
                return Err(Error::config(
                    "prototypes",
                    "need one spectrum of `bands` values per class",
                ));
            }
        }
        Ok(())
    }
}

/// A generated cube together with the class spectra it was drawn around.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub cube: HsiCube,
    pub prototypes: Vec<Vec<f32>>,
}

/// Smooth spectrum: a sum of three Gaussian bumps over the band axis.
fn bump_mixture(rng: &mut SeededRng, bands: usize) -> Vec<f32> {
    let span = bands.max(2) as f64 - 1.0;
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let centre = rng.uniform(0.0, span);
            let width = rng.uniform(0.08, 0.25) * span.max(1.0);
            let amp = rng.uniform(0.3, 1.0);
            (centre, width, amp)
        })
        .collect();
    (0..bands)
        .map(|b| {
            let v: f64 = bumps
                .iter()
                .map(|&(c, w, a)| a * (-0.5 * ((b as f64 - c) / w).powi(2)).exp())
                .sum();
            (0.1 + v) as f32
        })
        .collect()
}

/// Class regions are contiguous runs of the raster order; every pixel is
/// labelled. Each pixel is its class prototype plus Gaussian noise that is
/// lightly blurred over the 3×3 spatial neighborhood, so `noise = 0` yields
/// exact copies of the prototypes.
pub fn synthesize_dataset(params: &SynthParams) -> Result<Synthetic> {
    params.validate()?;
    let (h, w, l, c) = (params.height, params.width, params.bands, params.classes);
    let mut rng = SeededRng::stream(params.seed, "synth");
    let prototypes = match &params.prototypes {
        Some(p) => p.clone(),
        None => (0..c).map(|_| bump_mixture(&mut rng, l)).collect(),
    };
    let npix = h * w;
    let labels: Vec<u16> = (0..npix).map(|i| (1 + i * c / npix) as u16).collect();
    let mut data = vec![0.0f32; npix * l];
    for b in 0..l {
        let raw: Vec<f64> = (0..npix).map(|_| rng.normal()).collect();
        for row in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                let mut weight = 0.0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (r, q) = (row as i64 + dr, col as i64 + dc);
                        if r < 0 || q < 0 || r >= h as i64 || q >= w as i64 {
                            continue;
                        }
                        let k = if dr == 0 && dc == 0 { 4.0 } else { 0.5 };
                        acc += k * raw[r as usize * w + q as usize];
                        weight += k * k;
                    }
                }
                // Dividing by the kernel's L2 norm keeps the per-pixel noise
                // standard deviation at exactly one unit before scaling.
                let n = acc / f64::sqrt(weight);
                let class = labels[row * w + col] as usize - 1;
                let proto = &prototypes[class];
                let peak = proto.iter().fold(0.0f32, |m, &v| m.max(v.abs())) as f64;
                data[(b * h + row) * w + col] = (proto[b] as f64 + params.noise * peak * n) as f32;
            }
        }
    }
    let cube = HsiCube::new("synthetic", h, w, l, data, labels)?;
    Ok(Synthetic { cube, prototypes })
}

/// Fraction of labelled pixels whose spectrum is closest (Euclidean) to the
/// prototype of their own class; ties resolve to the lower class index.
pub fn nearest_prototype_accuracy(cube: &HsiCube, prototypes: &[Vec<f32>]) -> Result<f64> {
    if prototypes.iter().any(|p| p.len() != cube.bands) {
        return Err(Error::shape(
            "prototype length differs from the cube's band count",
        ));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for row in 0..cube.height {
        for col in 0..cube.width {
            let label = cube.labels[row * cube.width + col] as usize;
            if label == 0 {
                continue;
            }
            let s = cube.spectrum(row, col);
            let mut best = (f64::INFINITY, 0usize);
            for (k, p) in prototypes.iter().enumerate() {
                let d: f64 = s
                    .iter()
                    .zip(p)
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            total += 1;
            hits += usize::from(best.1 + 1 == label);
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("cube has no labelled pixels".into()));
    }
    Ok(hits as f64 / total as f64)
}
