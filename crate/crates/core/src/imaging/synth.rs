//! Synthetic IHC-like cores and TMA slides.
//!
//! Stain model: tissue is a pale hematoxylin tint with a slight blue excess,
//! DAB is brown (low blue relative to red/green). Brightness texture is added
//! equally to all channels so it never changes the brown signal
//! `max(0, (r + g) / 2 - b)`.

use serde::{Deserialize, Serialize};

use super::raster::{Raster, WHITE};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, splitmix64, SeededRng};
use crate::score::Her2Score;

const TISSUE: [f32; 3] = [215.0, 210.0, 225.0];
const DAB: [f32; 3] = [110.0, 60.0, 20.0];
const NUCLEUS: [f32; 3] = [75.0, 80.0, 150.0];

/// Default per-class (stain intensity, coverage fraction).
pub const DEFAULT_SCHEDULE: [(f64, f64); 4] = [(0.10, 0.0), (0.40, 0.15), (0.65, 0.35), (0.90, 0.60)];

/// Disk radius as a fraction of the core raster side.
const CORE_DISK_FRACTION: f64 = 0.47;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCoreSpec {
    pub class_label: Her2Score,
    pub diameter: usize,
    pub stain_intensity_mean: f64,
    pub stain_coverage_fraction: f64,
    pub texture_seed: u64,
}

impl SyntheticCoreSpec {
    /// Spec following [`DEFAULT_SCHEDULE`] exactly.
    pub fn for_class(class_label: Her2Score, diameter: usize, texture_seed: u64) -> Self {
        let (intensity, coverage) = DEFAULT_SCHEDULE[class_label.index()];
        Self {
            class_label,
            diameter,
            stain_intensity_mean: intensity,
            stain_coverage_fraction: coverage,
            texture_seed,
        }
    }

    /// Spec with per-core jitter around the default schedule: intensity
    /// ±0.05 and coverage ×[0.85, 1.15]. Draws three values from `rng`.
    pub fn jittered(class_label: Her2Score, diameter: usize, rng: &mut SeededRng) -> Self {
        let (intensity, coverage) = DEFAULT_SCHEDULE[class_label.index()];
        let di = (rng.next_f64() - 0.5) * 0.1;
        let dc = 0.85 + 0.3 * rng.next_f64();
        Self {
            class_label,
            diameter,
            stain_intensity_mean: (intensity + di).clamp(0.0, 1.0),
            stain_coverage_fraction: (coverage * dc).clamp(0.0, 1.0),
            texture_seed: rng.next_u64(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.diameter < 64 {
            return Err(Error::Config(format!("core diameter {} < 64", self.diameter)));
        }
        for (name, v) in [
            ("stain_intensity_mean", self.stain_intensity_mean),
            ("stain_coverage_fraction", self.stain_coverage_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Per-pixel brown (DAB) signal in `[0, 1]`.
#[inline]
pub fn brown_signal(px: &[u8]) -> f64 {
    let rg = (px[0] as f64 + px[1] as f64) / 2.0;
    (rg - px[2] as f64).max(0.0) / 255.0
}

/// Mean brown signal over all pixels of an RGB raster.
pub fn mean_brown_signal(img: &Raster) -> f64 {
    let n = (img.width() * img.height()) as f64;
    img.data().chunks_exact(3).map(brown_signal).sum::<f64>() / n
}

/// Renders one core: a tissue disk on a white `diameter`×`diameter` canvas.
pub fn generate_synthetic_core(spec: &SyntheticCoreSpec) -> Result<Raster> {
    spec.validate()?;
    let d = spec.diameter;
    let mut img = Raster::white(d, d, 3)?;
    let center = d as f64 / 2.0;
    paint_core_disk(&mut img, center, center, CORE_DISK_FRACTION * d as f64, spec);
    Ok(img)
}

/// Ground-truth circle of a synthetic slide. Center is in continuous pixel
/// coordinates (pixel `(x, y)` covers `[x, x+1) × [y, y+1)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircleTruth {
    pub cx: i64,
    pub cy: i64,
    pub r: i64,
}

const MAX_WSI_SIDE: usize = 65_535;
const MAX_WSI_PIXELS: usize = 400_000_000;

/// Renders a TMA-like slide of `n_cores` non-overlapping disks of the given
/// radius on a jittered grid. Disk classes are drawn uniformly.
pub fn generate_synthetic_wsi(n_cores: usize, radius: usize, seed: u64) -> Result<(Raster, Vec<CircleTruth>)> {
    if radius < 16 {
        return Err(Error::Config(format!("core radius {radius} < 16")));
    }
    let cols = (n_cores as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n_cores.div_ceil(cols).max(1);
    let cell = 2 * radius + radius / 2;
    let border = radius / 4;
    let (w, h) = (cols * cell + 2 * border, rows * cell + 2 * border);
    if w > MAX_WSI_SIDE || h > MAX_WSI_SIDE || w * h > MAX_WSI_PIXELS {
        return Err(Error::Capacity(format!(
            "{n_cores} cores of radius {radius} need a {w}x{h} canvas"
        )));
    }
    let mut img = Raster::white(w, h, 3)?;
    let mut rng = SeededRng::new(seed);
    let jitter = (radius / 8) as i64;
    let mut truth = Vec::with_capacity(n_cores);
    for i in 0..n_cores {
        let (row, col) = (i / cols, i % cols);
        let jx = rng.next_below(2 * jitter as u64 + 1) as i64 - jitter;
        let jy = rng.next_below(2 * jitter as u64 + 1) as i64 - jitter;
        let cx = (border + col * cell + cell / 2) as i64 + jx;
        let cy = (border + row * cell + cell / 2) as i64 + jy;
        let class = Her2Score::ALL[rng.next_below(4) as usize];
        let mut spec = SyntheticCoreSpec::for_class(class, 2 * radius, derive_seed(seed, &[i as u64]));
        spec.diameter = (2 * radius).max(64);
        paint_core_disk(&mut img, cx as f64, cy as f64, radius as f64, &spec);
        truth.push(CircleTruth {
            cx,
            cy,
            r: radius as i64,
        });
    }
    Ok((img, truth))
}

/// Bilinear value noise on a coarse grid, used as brightness texture.
struct ValueNoise {
    cell: f64,
    cols: usize,
    grid: Vec<f32>,
}

impl ValueNoise {
    fn new(extent: f64, cell: f64, amplitude: f32, rng: &mut SeededRng) -> Self {
        let cols = (extent / cell).ceil() as usize + 2;
        let grid = (0..cols * cols)
            .map(|_| (rng.next_f64() as f32 * 2.0 - 1.0) * amplitude)
            .collect();
        Self { cell, cols, grid }
    }

    #[inline]
    fn at(&self, u: f64, v: f64) -> f32 {
        let (fu, fv) = ((u / self.cell).max(0.0), (v / self.cell).max(0.0));
        let (i, j) = (fu as usize, fv as usize);
        let (i, j) = (i.min(self.cols - 2), j.min(self.cols - 2));
        let (tu, tv) = ((fu - i as f64) as f32, (fv - j as f64) as f32);
        let g = |a: usize, b: usize| self.grid[b * self.cols + a];
        let top = g(i, j) * (1.0 - tu) + g(i + 1, j) * tu;
        let bot = g(i, j + 1) * (1.0 - tu) + g(i + 1, j + 1) * tu;
        top * (1.0 - tv) + bot * tv
    }
}

#[inline]
fn pixel_noise(seed: u64, x: usize, y: usize) -> f32 {
    let h = splitmix64(seed ^ ((y as u64) << 32 | x as u64));
    (h >> 61) as f32 - 3.5
}

#[inline]
fn put(img: &mut Raster, x: usize, y: usize, rgb: [f32; 3]) {
    let px = img.pixel_mut(x, y);
    for ch in 0..3 {
        px[ch] = (rgb[ch] + 0.5).floor().clamp(0.0, 255.0) as u8;
    }
}

/// Paints a tissue disk of radius `radius` centered at `(cx, cy)`.
fn paint_core_disk(img: &mut Raster, cx: f64, cy: f64, radius: f64, spec: &SyntheticCoreSpec) {
    let mut rng = SeededRng::new(spec.texture_seed);
    let noise_seed = rng.next_u64();
    let texture = ValueNoise::new(2.0 * radius, (radius / 8.0).max(4.0), 10.0, &mut rng);
    let r2 = radius * radius;
    let (x0, y0) = (cx - radius, cy - radius);

    let inside = |x: usize, y: usize| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        dx * dx + dy * dy <= r2
    };
    let bbox = |ccx: f64, ccy: f64, rr: f64, img: &Raster| {
        let xa = (ccx - rr).floor().max(0.0) as usize;
        let ya = (ccy - rr).floor().max(0.0) as usize;
        let xb = ((ccx + rr).ceil() as usize).min(img.width());
        let yb = ((ccy + rr).ceil() as usize).min(img.height());
        (xa, ya, xb, yb)
    };
    let base = |x: usize, y: usize| -> [f32; 3] {
        let b = texture.at(x as f64 - x0, y as f64 - y0) + pixel_noise(noise_seed, x, y);
        [TISSUE[0] + b, TISSUE[1] + b, TISSUE[2] + b]
    };

    let (xa, ya, xb, yb) = bbox(cx, cy, radius, img);
    for y in ya..yb {
        for x in xa..xb {
            if inside(x, y) {
                let c = base(x, y);
                put(img, x, y, c);
            }
        }
    }

    let disk_area = std::f64::consts::PI * r2;
    let random_point = |rng: &mut SeededRng| loop {
        let u = rng.next_f64() * 2.0 - 1.0;
        let v = rng.next_f64() * 2.0 - 1.0;
        if u * u + v * v <= 1.0 {
            break (cx + u * radius, cy + v * radius);
        }
    };

    // Hematoxylin nuclei, identical density for every class.
    let nucleus_r = (radius / 100.0).max(1.5);
    let n_nuclei = (0.08 * disk_area / (std::f64::consts::PI * nucleus_r * nucleus_r)).round() as usize;
    for _ in 0..n_nuclei {
        let (ncx, ncy) = random_point(&mut rng);
        let (xa, ya, xb, yb) = bbox(ncx, ncy, nucleus_r, img);
        for y in ya..yb {
            for x in xa..xb {
                let (dx, dy) = (x as f64 + 0.5 - ncx, y as f64 + 0.5 - ncy);
                if dx * dx + dy * dy <= nucleus_r * nucleus_r && inside(x, y) {
                    let b = pixel_noise(noise_seed, x, y);
                    put(img, x, y, [NUCLEUS[0] + b, NUCLEUS[1] + b, NUCLEUS[2] + b]);
                }
            }
        }
    }

    // DAB membrane rings.
    if spec.stain_coverage_fraction <= 0.0 || spec.stain_intensity_mean <= 0.0 {
        return;
    }
    let ring_outer = (radius / 24.0).max(2.0);
    let ring_inner = ring_outer - (ring_outer / 3.0).max(1.0);
    let ring_area = std::f64::consts::PI * (ring_outer * ring_outer - ring_inner * ring_inner);
    let n_rings = (spec.stain_coverage_fraction * disk_area / ring_area).round() as usize;
    let alpha = spec.stain_intensity_mean as f32;
    for _ in 0..n_rings {
        let (rcx, rcy) = random_point(&mut rng);
        // Per-ring intensity wobble keeps staining heterogeneous.
        let a = (alpha * (0.85 + 0.3 * rng.next_f64() as f32)).min(1.0);
        let (xa, ya, xb, yb) = bbox(rcx, rcy, ring_outer, img);
        for y in ya..yb {
            for x in xa..xb {
                let (dx, dy) = (x as f64 + 0.5 - rcx, y as f64 + 0.5 - rcy);
                let d2 = dx * dx + dy * dy;
                if d2 <= ring_outer * ring_outer && d2 >= ring_inner * ring_inner && inside(x, y) {
                    let t = base(x, y);
                    let b = t[0] - TISSUE[0];
                    let mut c = [0f32; 3];
                    for ch in 0..3 {
                        c[ch] = TISSUE[ch] + a * (DAB[ch] - TISSUE[ch]) + b;
                    }
                    put(img, x, y, c);
                }
            }
        }
    }
}

/// Reads back the white-background invariant: true if every pixel outside
/// the inscribed disk of a synthetic core is white.
pub fn background_is_white(img: &Raster) -> bool {
    let center = img.width() as f64 / 2.0;
    let r = CORE_DISK_FRACTION * img.width() as f64 + 1.0;
    (0..img.height()).all(|y| {
        (0..img.width()).all(|x| {
            let (dx, dy) = (x as f64 + 0.5 - center, y as f64 + 0.5 - center);
            dx * dx + dy * dy <= r * r || img.pixel(x, y).iter().all(|&v| v == WHITE)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_zero_without_coverage_has_no_brown() {
        let spec = SyntheticCoreSpec {
            class_label: Her2Score::Zero,
            diameter: 256,
            stain_intensity_mean: 0.5,
            stain_coverage_fraction: 0.0,
            texture_seed: 3,
        };
        let img = generate_synthetic_core(&spec).unwrap();
        assert_eq!(mean_brown_signal(&img), 0.0);
        // but there is tissue
        let means = img.channel_means();
        assert!(means[0] < 250.0);
        assert!(background_is_white(&img));
    }

    #[test]
    fn deterministic_per_spec() {
        let spec = SyntheticCoreSpec::for_class(Her2Score::Two, 200, 99);
        assert_eq!(generate_synthetic_core(&spec).unwrap(), generate_synthetic_core(&spec).unwrap());
        let other = SyntheticCoreSpec { texture_seed: 100, ..spec.clone() };
        assert_ne!(generate_synthetic_core(&spec).unwrap(), generate_synthetic_core(&other).unwrap());
    }

    #[test]
    fn brown_signal_increases_with_class() {
        let signals: Vec<f64> = Her2Score::ALL
            .iter()
            .map(|&c| {
                let img = generate_synthetic_core(&SyntheticCoreSpec::for_class(c, 512, 5)).unwrap();
                mean_brown_signal(&img)
            })
            .collect();
        for w in signals.windows(2) {
            assert!(w[0] < w[1], "{signals:?}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SyntheticCoreSpec::for_class(Her2Score::One, 32, 0);
        assert!(generate_synthetic_core(&spec).is_err());
        spec.diameter = 128;
        spec.stain_coverage_fraction = 1.5;
        assert!(generate_synthetic_core(&spec).is_err());
    }

    #[test]
    fn empty_wsi_is_blank() {
        let (img, truth) = generate_synthetic_wsi(0, 100, 1).unwrap();
        assert!(truth.is_empty());
        assert!(img.data().iter().all(|&v| v == WHITE));
    }

    #[test]
    fn wsi_disks_do_not_overlap() {
        let (img, truth) = generate_synthetic_wsi(12, 100, 4).unwrap();
        assert_eq!(truth.len(), 12);
        for (i, a) in truth.iter().enumerate() {
            assert!(a.cx - a.r >= 0 && a.cy - a.r >= 0);
            assert!(a.cx + a.r <= img.width() as i64 && a.cy + a.r <= img.height() as i64);
            for b in &truth[i + 1..] {
                let d = (((a.cx - b.cx).pow(2) + (a.cy - b.cy).pow(2)) as f64).sqrt();
                assert!(d > 2.0 * a.r as f64, "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn wsi_capacity_is_enforced() {
        assert!(matches!(generate_synthetic_wsi(100_000, 400, 0), Err(Error::Capacity(_))));
    }
}
