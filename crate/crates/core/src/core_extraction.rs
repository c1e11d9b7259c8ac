//! Tissue-core detection on TMA slides with a two-stage gradient Hough
//! transform, followed by sub-pixel refinement on the full-resolution slide.
//!
//! Stage 1 votes for centers along each edge pixel's gradient direction
//! (both senses) for every radius in range. Stage 2 builds a radius
//! histogram of radially aligned edge pixels around each surviving center.
//! Both stages run on a grayscale proxy downsampled by `working_downsample`.
//! Refinement casts rays across the coarse boundary on the original slide,
//! finds the background/tissue crossing on each ray and fits a circle.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{downsample_box, Raster, WHITE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoughParams {
    /// Minimum core radius in full-resolution pixels.
    pub r_min: f64,
    /// Maximum core radius in full-resolution pixels.
    pub r_max: f64,
    /// Sobel magnitude threshold on the working proxy (0-255 gray scale).
    pub edge_threshold: f64,
    /// Minimum 3×3-summed center votes on the working proxy.
    pub accumulator_threshold: f64,
    /// Minimum distance between returned centers, full-resolution pixels.
    pub nms_min_center_distance: f64,
    /// Power-of-two factor of the working proxy.
    pub working_downsample: usize,
    /// Minimum fraction of the circumference backed by edge pixels.
    pub min_support: f64,
    /// Refine centers and radii on the full-resolution slide.
    pub refine: bool,
}

impl HoughParams {
    /// Defaults derived from the expected core radius range.
    pub fn for_radius_range(r_min: f64, r_max: f64) -> Self {
        Self::for_radius_range_at(r_min, r_max, 8)
    }

    /// As [`HoughParams::for_radius_range`] with a chosen proxy factor.
    pub fn for_radius_range_at(r_min: f64, r_max: f64, working_downsample: usize) -> Self {
        Self {
            r_min,
            r_max,
            edge_threshold: 40.0,
            accumulator_threshold: std::f64::consts::PI * r_min / working_downsample.max(1) as f64,
            nms_min_center_distance: r_min,
            working_downsample,
            min_support: 0.6,
            refine: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_min > 0.0 && self.r_min < self.r_max) {
            return Err(Error::Config(format!(
                "need 0 < r_min < r_max, got r_min={} r_max={}",
                self.r_min, self.r_max
            )));
        }
        if self.working_downsample == 0 || !self.working_downsample.is_power_of_two() {
            return Err(Error::Config(format!(
                "working_downsample {} is not a power of two",
                self.working_downsample
            )));
        }
        if self.r_min / (self.working_downsample as f64) < 3.0 {
            return Err(Error::Config(format!(
                "r_min {} is under 3 px at downsample {}",
                self.r_min, self.working_downsample
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleDetection {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub accumulator_score: f64,
}

impl CircleDetection {
    fn center_distance(&self, other: &CircleDetection) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }
}

/// Detects circular cores. Sorted by descending score; ties by position.
pub fn detect_cores(slide: &Raster, params: &HoughParams) -> Result<Vec<CircleDetection>> {
    params.validate()?;
    let min_side = (2.0 * params.r_min).ceil() as usize;
    if slide.width() < min_side || slide.height() < min_side {
        return Err(Error::DegenerateInput(format!(
            "{}x{} slide is smaller than 2*r_min = {min_side}",
            slide.width(),
            slide.height()
        )));
    }
    let d = params.working_downsample;
    let proxy = downsample_box(slide, d)?.to_gray();
    let scale = d as f64;
    let r_lo = (params.r_min / scale).floor().max(1.0) as usize;
    let r_hi = (params.r_max / scale).ceil() as usize;

    let edges = sobel_edges(&proxy, params.edge_threshold);
    if edges.is_empty() {
        return Ok(Vec::new());
    }
    let acc = vote_centers(&edges, proxy.width(), proxy.height(), r_lo, r_hi);
    let mut candidates = local_maxima(&acc, proxy.width(), proxy.height(), params.accumulator_threshold);
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));

    let grid = EdgeGrid::new(&edges, proxy.width(), proxy.height(), r_hi + 1);
    // Candidates are verified before suppression, so a strong spurious peak
    // whose verification fails cannot hide a weaker true center next to it.
    let mut found: Vec<CircleDetection> = Vec::new();
    for &(x, y, _) in &candidates {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        let near_accepted = found.iter().any(|k| {
            ((k.cx - cx * scale).powi(2) + (k.cy - cy * scale).powi(2)).sqrt() < params.nms_min_center_distance
        });
        if near_accepted {
            continue;
        }
        if let Some(det) = verify_candidate(slide, &grid, params, cx, cy, r_lo, r_hi) {
            found.push(det);
        }
    }

    found.sort_by(|a, b| {
        b.accumulator_score
            .total_cmp(&a.accumulator_score)
            .then(a.cy.total_cmp(&b.cy))
            .then(a.cx.total_cmp(&b.cx))
    });
    let mut kept: Vec<CircleDetection> = Vec::with_capacity(found.len());
    for det in found {
        if kept
            .iter()
            .all(|k| k.center_distance(&det) >= params.nms_min_center_distance)
        {
            kept.push(det);
        }
    }
    Ok(kept)
}

fn verify_candidate(
    slide: &Raster,
    grid: &EdgeGrid,
    params: &HoughParams,
    cx: f64,
    cy: f64,
    r_lo: usize,
    r_hi: usize,
) -> Option<CircleDetection> {
    let scale = params.working_downsample as f64;
    let (r, support) = estimate_radius(grid, cx, cy, r_lo, r_hi)?;
    if support < params.min_support {
        return None;
    }
    let mut det = CircleDetection {
        cx: cx * scale,
        cy: cy * scale,
        radius: r * scale,
        accumulator_score: support,
    };
    if params.refine {
        // A coarse circle without a clean boundary crossing is texture.
        let band = 2.0 * scale + 2.0;
        let moved = |from: &CircleDetection, c: (f64, f64, f64)| {
            ((c.0 - from.cx).powi(2) + (c.1 - from.cy).powi(2)).sqrt()
        };
        // The coarse peak can sit a few working pixels off the true center.
        let max_move = 4.0 * scale + 2.0;
        let first = refine_circle(slide, &det, band)?;
        if moved(&det, first) > max_move {
            return None;
        }
        // Second pass from the refined circle recovers rays that missed the
        // boundary band around the coarse guess.
        let again = CircleDetection { cx: first.0, cy: first.1, radius: first.2, ..det };
        let (rx, ry, rr) = refine_circle(slide, &again, band).unwrap_or(first);
        if moved(&again, (rx, ry, rr)) > band {
            return None;
        }
        det.cx = rx;
        det.cy = ry;
        det.radius = rr;
    }
    // Clamp so the circle lies inside the slide.
    det.radius = det
        .radius
        .min(det.cx)
        .min(det.cy)
        .min(slide.width() as f64 - det.cx)
        .min(slide.height() as f64 - det.cy);
    (det.radius >= params.r_min && det.radius <= params.r_max).then_some(det)
}

/// Edge pixels bucketed on a square grid for neighborhood queries.
struct EdgeGrid<'a> {
    edges: &'a [EdgePixel],
    cell: usize,
    cols: usize,
    rows: usize,
    starts: Vec<usize>,
    order: Vec<u32>,
}

impl<'a> EdgeGrid<'a> {
    fn new(edges: &'a [EdgePixel], w: usize, h: usize, cell: usize) -> Self {
        let cell = cell.max(1);
        let (cols, rows) = (w.div_ceil(cell), h.div_ceil(cell));
        let slot = |e: &EdgePixel| (e.y as usize / cell).min(rows - 1) * cols + (e.x as usize / cell).min(cols - 1);
        let mut starts = vec![0usize; cols * rows + 1];
        for e in edges {
            starts[slot(e) + 1] += 1;
        }
        for i in 0..cols * rows {
            starts[i + 1] += starts[i];
        }
        let mut fill = starts.clone();
        let mut order = vec![0u32; edges.len()];
        for (i, e) in edges.iter().enumerate() {
            let s = slot(e);
            order[fill[s]] = i as u32;
            fill[s] += 1;
        }
        Self { edges, cell, cols, rows, starts, order }
    }

    /// Edges in cells overlapping the square `[cx - reach, cx + reach]²`.
    fn near(&self, cx: f64, cy: f64, reach: f64) -> impl Iterator<Item = &EdgePixel> + '_ {
        let to_cell = |v: f64, n: usize| ((v.max(0.0) as usize) / self.cell).min(n - 1);
        let (x0, x1) = (to_cell(cx - reach, self.cols), to_cell(cx + reach, self.cols));
        let (y0, y1) = (to_cell(cy - reach, self.rows), to_cell(cy + reach, self.rows));
        (y0..=y1).flat_map(move |gy| {
            let row = gy * self.cols;
            self.order[self.starts[row + x0]..self.starts[row + x1 + 1]]
                .iter()
                .map(move |&i| &self.edges[i as usize])
        })
    }
}

struct EdgePixel {
    x: f64,
    y: f64,
    ux: f64,
    uy: f64,
}

fn sobel_edges(gray: &Raster, threshold: f64) -> Vec<EdgePixel> {
    let (w, h) = (gray.width(), gray.height());
    let mut out = Vec::new();
    if w < 3 || h < 3 {
        return out;
    }
    let p = |x: usize, y: usize| gray.data()[y * w + x] as i32;
    let t2 = threshold * threshold;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (p(x + 1, y - 1) + 2 * p(x + 1, y) + p(x + 1, y + 1))
                - (p(x - 1, y - 1) + 2 * p(x - 1, y) + p(x - 1, y + 1));
            let gy = (p(x - 1, y + 1) + 2 * p(x, y + 1) + p(x + 1, y + 1))
                - (p(x - 1, y - 1) + 2 * p(x, y - 1) + p(x + 1, y - 1));
            let m2 = (gx * gx + gy * gy) as f64;
            if m2 >= t2 && m2 > 0.0 {
                let m = m2.sqrt();
                out.push(EdgePixel {
                    x: x as f64 + 0.5,
                    y: y as f64 + 0.5,
                    ux: gx as f64 / m,
                    uy: gy as f64 / m,
                });
            }
        }
    }
    out
}

fn vote_centers(edges: &[EdgePixel], w: usize, h: usize, r_lo: usize, r_hi: usize) -> Vec<u32> {
    let mut acc = vec![0u32; w * h];
    for e in edges {
        for r in r_lo..=r_hi {
            let r = r as f64;
            for sign in [-1.0, 1.0] {
                let px = e.x + sign * r * e.ux;
                let py = e.y + sign * r * e.uy;
                if px >= 0.0 && py >= 0.0 && px < w as f64 && py < h as f64 {
                    acc[py as usize * w + px as usize] += 1;
                }
            }
        }
    }
    acc
}

/// 3×3-summed accumulator maxima above `threshold`, as `(x, y, votes)`.
fn local_maxima(acc: &[u32], w: usize, h: usize, threshold: f64) -> Vec<(usize, usize, f64)> {
    let mut smooth = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += acc[yy * w + xx];
                }
            }
            smooth[y * w + x] = s;
        }
    }
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = smooth[y * w + x];
            if (v as f64) < threshold || v == 0 {
                continue;
            }
            let mut is_max = true;
            'nb: for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    let i = yy * w + xx;
                    if i == y * w + x {
                        continue;
                    }
                    // Plateaus: the first pixel in raster order wins.
                    let nv = smooth[i];
                    if nv > v || (nv == v && i < y * w + x) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                out.push((x, y, v as f64));
            }
        }
    }
    out
}

/// Radius histogram of radially aligned edges; returns (radius, support).
fn estimate_radius(grid: &EdgeGrid, cx: f64, cy: f64, r_lo: usize, r_hi: usize) -> Option<(f64, f64)> {
    let lo = r_lo as f64 - 1.0;
    let hi = r_hi as f64 + 1.0;
    let nbins = r_hi + 3;
    let mut count = vec![0f64; nbins];
    let mut dist_sum = vec![0f64; nbins];
    for e in grid.near(cx, cy, hi) {
        let (dx, dy) = (e.x - cx, e.y - cy);
        if dx.abs() > hi || dy.abs() > hi {
            continue;
        }
        let dist = (dx * dx + dy * dy).sqrt();
        if dist < lo || dist > hi || dist == 0.0 {
            continue;
        }
        let cos = (dx * e.ux + dy * e.uy) / dist;
        if cos.abs() < 0.9 {
            continue;
        }
        let bin = dist.round() as usize;
        if bin < nbins {
            count[bin] += 1.0;
            dist_sum[bin] += dist;
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for r in r_lo..=r_hi {
        let window: f64 = count[r - 1..=r + 1].iter().sum();
        if best.is_none_or(|(_, b)| window > b) {
            best = Some((r, window));
        }
    }
    let (r, window) = best?;
    if window == 0.0 {
        return None;
    }
    let radius = dist_sum[r - 1..=r + 1].iter().sum::<f64>() / window;
    let support = window / (2.0 * std::f64::consts::PI * radius);
    Some((radius, support))
}

#[inline]
fn gray_at(slide: &Raster, x: usize, y: usize) -> f64 {
    let p = slide.pixel(x, y);
    if p.len() == 3 {
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    } else {
        p[0] as f64
    }
}

/// Bilinear gray sample at continuous coordinates (pixel centers at +0.5).
/// Outside the slide reads as white.
fn sample_gray(slide: &Raster, x: f64, y: f64) -> f64 {
    let (u, v) = (x - 0.5, y - 0.5);
    let (x0, y0) = (u.floor(), v.floor());
    let (tx, ty) = (u - x0, v - y0);
    let at = |xi: f64, yi: f64| {
        if xi < 0.0 || yi < 0.0 || xi >= slide.width() as f64 || yi >= slide.height() as f64 {
            WHITE as f64
        } else {
            gray_at(slide, xi as usize, yi as usize)
        }
    };
    let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1.0, y0) * tx;
    let bot = at(x0, y0 + 1.0) * (1.0 - tx) + at(x0 + 1.0, y0 + 1.0) * tx;
    top * (1.0 - ty) + bot * ty
}

const REFINE_RAYS: usize = 256;
const MIN_RAY_CONTRAST: f64 = 10.0;
const BOUNDARY_DROP: f64 = 15.0;

/// Ray-cast boundary crossings followed by an algebraic circle fit with one
/// outlier-rejection pass. Returns `(cx, cy, r)` in full-resolution pixels.
fn refine_circle(slide: &Raster, det: &CircleDetection, band: f64) -> Option<(f64, f64, f64)> {
    let step = 0.5;
    let n_steps = (2.0 * band / step).ceil() as usize;
    let mut points = Vec::with_capacity(REFINE_RAYS);
    let mut samples = vec![0f64; n_steps + 1];
    for i in 0..REFINE_RAYS {
        let theta = i as f64 * std::f64::consts::TAU / REFINE_RAYS as f64;
        let (ux, uy) = (theta.cos(), theta.sin());
        for (s, slot) in samples.iter_mut().enumerate() {
            let rho = det.radius + band - s as f64 * step;
            *slot = sample_gray(slide, det.cx + rho * ux, det.cy + rho * uy);
        }
        let outer = median4(&samples[..4]);
        let inner = median4(&samples[samples.len() - 4..]);
        if outer - inner < MIN_RAY_CONTRAST {
            continue;
        }
        // A fixed drop below the background keeps the crossing on the tissue
        // rim even when dark stain sits just inside it.
        let level = outer - BOUNDARY_DROP.min((outer - inner) / 2.0);
        if let Some(s) = samples.windows(2).position(|w| w[0] >= level && w[1] < level) {
            let frac = (samples[s] - level) / (samples[s] - samples[s + 1]);
            let rho = det.radius + band - (s as f64 + frac) * step;
            points.push((det.cx + rho * ux, det.cy + rho * uy));
        }
    }
    if points.len() < REFINE_RAYS / 4 {
        return None;
    }
    // Rays that crossed stain or a neighbor pull the first fit off, so the
    // inlier gate tightens in steps.
    let mut fit = fit_circle(&points)?;
    for tol in [16.0, 8.0, 4.0, 2.0] {
        let (cx, cy, r) = fit;
        let inliers: Vec<_> = points
            .iter()
            .copied()
            .filter(|&(x, y)| (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r).abs() <= tol)
            .collect();
        if inliers.len() < REFINE_RAYS / 4 {
            return None;
        }
        fit = fit_circle(&inliers)?;
    }
    Some(fit)
}

fn median4(v: &[f64]) -> f64 {
    let mut s = [v[0], v[1], v[2], v[3]];
    s.sort_by(f64::total_cmp);
    (s[1] + s[2]) / 2.0
}

/// Kåsa least-squares circle fit on mean-centered points.
pub(crate) fn fit_circle(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 3 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut suu, mut svv, mut suv, mut suuu, mut svvv, mut suvv, mut svuu) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (u, v) = (x - mx, y - my);
        suu += u * u;
        svv += v * v;
        suv += u * v;
        suuu += u * u * u;
        svvv += v * v * v;
        suvv += u * v * v;
        svuu += v * u * u;
    }
    let (b1, b2) = ((suuu + suvv) / 2.0, (svvv + svuu) / 2.0);
    let det = suu * svv - suv * suv;
    if det.abs() < 1e-12 {
        return None;
    }
    let uc = (b1 * svv - b2 * suv) / det;
    let vc = (suu * b2 - suv * b1) / det;
    let r = (uc * uc + vc * vc + (suu + svv) / n).sqrt();
    Some((uc + mx, vc + my, r))
}

/// Square crop of side `round(2 r (1 + margin))` centered on the detection,
/// padded white where it leaves the slide.
pub fn crop_core(slide: &Raster, det: &CircleDetection, margin_fraction: f64) -> Result<Raster> {
    let side = (2.0 * det.radius * (1.0 + margin_fraction)).round().max(1.0) as usize;
    let x0 = (det.cx - side as f64 / 2.0).round() as i64;
    let y0 = (det.cy - side as f64 / 2.0).round() as i64;
    slide.crop_padded(x0, y0, side, side, WHITE)
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct DetectionLine {
    cx: i64,
    cy: i64,
    r: i64,
    score: f64,
}

/// One JSON object per line: `{"cx":int,"cy":int,"r":int,"score":float}`.
pub fn write_detections_jsonl(dets: &[CircleDetection], mut out: impl Write) -> std::io::Result<()> {
    for d in dets {
        let line = DetectionLine {
            cx: d.cx.round() as i64,
            cy: d.cy.round() as i64,
            r: d.radius.round() as i64,
            score: d.accumulator_score,
        };
        writeln!(out, "{}", serde_json::to_string(&line).expect("plain struct"))?;
    }
    Ok(())
}

pub fn read_detections_jsonl(path: impl AsRef<Path>) -> Result<Vec<CircleDetection>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let d: DetectionLine = serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            Ok(CircleDetection {
                cx: d.cx as f64,
                cy: d.cy as f64,
                radius: d.r as f64,
                accumulator_score: d.score,
            })
        })
        .collect()
}
