use serde::{Deserialize, Serialize};

use super::raster::Raster;
use crate::error::{Error, Result};

/// The eight symmetries of the square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dihedral {
    Identity,
    /// Quarter turn clockwise.
    Rot90,
    Rot180,
    Rot270,
    /// Mirror across the vertical axis (left-right).
    FlipH,
    /// Mirror across the horizontal axis (top-bottom).
    FlipV,
    /// Mirror across the main diagonal.
    Transpose,
    /// Mirror across the anti-diagonal.
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    pub fn inverse(self) -> Dihedral {
        match self {
            Dihedral::Rot90 => Dihedral::Rot270,
            Dihedral::Rot270 => Dihedral::Rot90,
            other => other,
        }
    }

    /// Source coordinate read for output pixel `(x, y)` on an `n`×`n` grid.
    #[inline]
    pub fn source(self, x: usize, y: usize, n: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            Dihedral::Identity => (x, y),
            Dihedral::Rot90 => (y, m - x),
            Dihedral::Rot180 => (m - x, m - y),
            Dihedral::Rot270 => (m - y, x),
            Dihedral::FlipH => (m - x, y),
            Dihedral::FlipV => (x, m - y),
            Dihedral::Transpose => (y, x),
            Dihedral::AntiTranspose => (m - y, m - x),
        }
    }

    /// `self.then(other)` applies `self` first, then `other`.
    pub fn then(self, other: Dihedral) -> Dihedral {
        // Probe the composite on a 2x2 grid; a dihedral element is fixed by
        // where it sends two corners.
        let probe = |x, y| {
            let (x1, y1) = other.source(x, y, 2);
            self.source(x1, y1, 2)
        };
        let want = (probe(0, 0), probe(1, 0));
        Dihedral::ALL
            .into_iter()
            .find(|t| (t.source(0, 0, 2), t.source(1, 0, 2)) == want)
            .expect("dihedral group is closed")
    }
}

/// Applies a symmetry to a square image. Lossless pixel permutation.
pub fn apply_dihedral(img: &Raster, t: Dihedral) -> Result<Raster> {
    if !img.is_square() {
        return Err(Error::Shape(format!(
            "dihedral transform needs a square image, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    if t == Dihedral::Identity {
        return Ok(img.clone());
    }
    let n = img.width();
    let c = img.channels();
    let src = img.data();
    let mut out = vec![0u8; src.len()];
    for y in 0..n {
        let orow = &mut out[y * n * c..(y + 1) * n * c];
        for x in 0..n {
            let (sx, sy) = t.source(x, y, n);
            let si = (sy * n + sx) * c;
            orow[x * c..x * c + c].copy_from_slice(&src[si..si + c]);
        }
    }
    Raster::from_vec(n, n, c, out)
}
