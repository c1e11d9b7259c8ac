//! Pyramid-Sampling-Set assembly.
//!
//! A PSS is `n_full` random patches from the full-resolution core, `n_half`
//! random patches from its 2×-downsampled copy and one whole-core resize,
//! stacked in that order along the channel axis.
//!
//! Coordinate stream: a `SeededRng` seeded with the PSS seed produces, for
//! each full-res patch in order, `x = next_below(bound_x)` then
//! `y = next_below(bound_y)`, followed by the same for each half-res patch.
//! `bound = max(level_dim - patch_size, 0) + 1`, so a draw is consumed even
//! when the level is too small to move the window. Levels narrower than the
//! patch are centered on white, which shows up as a negative provenance
//! coordinate.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{apply_dihedral, downsample_2x, resize_to, save_image, Dihedral, Raster, WHITE};
use crate::rng::{splitmix64, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PssConfig {
    pub patch_size: usize,
    pub n_full: usize,
    pub n_half: usize,
    pub include_whole: bool,
}

impl Default for PssConfig {
    fn default() -> Self {
        Self {
            patch_size: 512,
            n_full: 40,
            n_half: 10,
            include_whole: true,
        }
    }
}

impl PssConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 8 {
            return Err(Error::Config(format!("patch_size {} < 8", self.patch_size)));
        }
        if self.patch_count() == 0 {
            return Err(Error::Config("PSS config enables no patch source".into()));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        self.n_full + self.n_half + usize::from(self.include_whole)
    }

    /// Channel depth of the stacked classifier input.
    pub fn stacked_channels(&self) -> usize {
        3 * self.patch_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Full,
    Half,
    Whole,
}

impl Level {
    /// Full-resolution pixels per level pixel.
    pub fn scale(self) -> usize {
        match self {
            Level::Full => 1,
            Level::Half => 2,
            Level::Whole => 0,
        }
    }
}

/// Where a patch came from: top-left corner in its level's pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub level: Level,
    pub x: i64,
    pub y: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidSamplingSet {
    pub patches: Vec<Raster>,
    pub provenance: Vec<PatchOrigin>,
    pub seed: u64,
    pub config: PssConfig,
}

impl PyramidSamplingSet {
    pub fn stacked_channels(&self) -> usize {
        3 * self.patches.len()
    }

    pub fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    /// Interleaves patches into one HWC byte tensor with
    /// `3 × patch_count` channels; channel `3p + c` is channel `c` of patch `p`.
    pub fn stacked(&self) -> Vec<u8> {
        let ps = self.config.patch_size;
        let depth = self.stacked_channels();
        let mut out = vec![0u8; ps * ps * depth];
        for (p, patch) in self.patches.iter().enumerate() {
            for (i, px) in patch.data().chunks_exact(3).enumerate() {
                out[i * depth + 3 * p..i * depth + 3 * p + 3].copy_from_slice(px);
            }
        }
        out
    }

    /// Writes `patch_NNN.png` files plus a `pss.json` manifest.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, patch) in self.patches.iter().enumerate() {
            save_image(patch, dir.join(format!("patch_{i:03}.png")))?;
        }
        let manifest = PssManifest {
            seed: self.seed,
            config: self.config,
            patches: self.provenance.clone(),
        };
        let path = dir.join("pss.json");
        let text = serde_json::to_string_pretty(&manifest).expect("plain struct");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PssManifest {
    pub seed: u64,
    pub config: PssConfig,
    pub patches: Vec<PatchOrigin>,
}

/// The three pyramid levels of one core, computed once and shared by every
/// PSS drawn from it.
pub struct PssSource<'a> {
    full: &'a Raster,
    half: Option<Raster>,
    whole: Option<Raster>,
    cfg: PssConfig,
}

impl<'a> PssSource<'a> {
    pub fn new(core: &'a Raster, cfg: PssConfig) -> Result<Self> {
        cfg.validate()?;
        if core.channels() != 3 {
            return Err(Error::Shape(format!("PSS needs an RGB core, got {} channels", core.channels())));
        }
        let half = if cfg.n_half > 0 {
            if core.width() < 2 || core.height() < 2 {
                return Err(Error::DegenerateInput(format!(
                    "{}x{} core has no 2x-downsampled level",
                    core.width(),
                    core.height()
                )));
            }
            Some(downsample_2x(core)?)
        } else {
            None
        };
        let whole = if cfg.include_whole {
            Some(resize_to(core, cfg.patch_size)?)
        } else {
            None
        };
        Ok(Self {
            full: core,
            half,
            whole,
            cfg,
        })
    }

    pub fn config(&self) -> &PssConfig {
        &self.cfg
    }

    pub fn sample(&self, seed: u64) -> Result<PyramidSamplingSet> {
        let ps = self.cfg.patch_size;
        let mut rng = SeededRng::new(seed);
        let mut patches = Vec::with_capacity(self.cfg.patch_count());
        let mut provenance = Vec::with_capacity(self.cfg.patch_count());
        let mut draw = |level: Level, img: &Raster, count: usize, rng: &mut SeededRng| -> Result<()> {
            for _ in 0..count {
                let (x, y) = draw_origin(rng, img.width(), img.height(), ps);
                patches.push(img.crop_padded(x, y, ps, ps, WHITE)?);
                provenance.push(PatchOrigin { level, x, y });
            }
            Ok(())
        };
        draw(Level::Full, self.full, self.cfg.n_full, &mut rng)?;
        if let Some(half) = &self.half {
            draw(Level::Half, half, self.cfg.n_half, &mut rng)?;
        }
        if let Some(whole) = &self.whole {
            patches.push(whole.clone());
            provenance.push(PatchOrigin {
                level: Level::Whole,
                x: 0,
                y: 0,
            });
        }
        Ok(PyramidSamplingSet {
            patches,
            provenance,
            seed,
            config: self.cfg,
        })
    }
}

/// Top-left corner of one random window; consumes exactly two draws.
pub fn draw_origin(rng: &mut SeededRng, width: usize, height: usize, patch: usize) -> (i64, i64) {
    let bx = width.saturating_sub(patch) as u64 + 1;
    let by = height.saturating_sub(patch) as u64 + 1;
    let rx = rng.next_below(bx) as i64;
    let ry = rng.next_below(by) as i64;
    let pad_x = (patch.saturating_sub(width) / 2) as i64;
    let pad_y = (patch.saturating_sub(height) / 2) as i64;
    (rx - pad_x, ry - pad_y)
}

pub fn build_pss(core: &Raster, cfg: &PssConfig, seed: u64) -> Result<PyramidSamplingSet> {
    PssSource::new(core, *cfg)?.sample(seed)
}

/// Seed of batch element `i`.
pub fn batch_seed(base_seed: u64, index: usize) -> u64 {
    splitmix64(base_seed.wrapping_add(index as u64))
}

/// `n` independent PSSs; element `i` uses [`batch_seed`]`(base_seed, i)`.
pub fn build_pss_batch(core: &Raster, cfg: &PssConfig, base_seed: u64, n: usize) -> Result<Vec<PyramidSamplingSet>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let source = PssSource::new(core, *cfg)?;
    (0..n)
        .into_par_iter()
        .map(|i| source.sample(batch_seed(base_seed, i)))
        .collect()
}

/// Pads to square if needed, then applies a uniformly drawn dihedral
/// element. Consumes one `next_below(8)` draw.
pub fn augment_core(core: &Raster, rng: &mut SeededRng) -> Result<(Raster, Dihedral)> {
    let t = Dihedral::ALL[rng.next_below(8) as usize];
    let square = core.pad_to_square();
    Ok((apply_dihedral(&square, t)?, t))
}
