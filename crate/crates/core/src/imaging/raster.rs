use crate::error::{Error, Result};

/// Row-major interleaved 8-bit image with 1 (gray) or 3 (RGB) channels.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

pub const WHITE: u8 = 255;

impl Raster {
    /// Image filled with a single sample value.
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        check_dims(width, height, channels)?;
        Ok(Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        })
    }

    pub fn white(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::filled(width, height, channels, WHITE)
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, channels)?;
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "buffer of {} bytes for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn<const C: usize>(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; C],
    ) -> Result<Self> {
        check_dims(width, height, C)?;
        let mut data = Vec::with_capacity(width * height * C);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            channels: C,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    pub fn row(&self, y: usize) -> &[u8] {
        let stride = self.width * self.channels;
        &self.data[y * stride..(y + 1) * stride]
    }

    pub fn row_mut(&mut self, y: usize) -> &mut [u8] {
        let stride = self.width * self.channels;
        &mut self.data[y * stride..(y + 1) * stride]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Copies the `w`×`h` window whose top-left corner is `(x0, y0)`.
    /// The window may extend past the image; uncovered pixels take `fill`.
    pub fn crop_padded(&self, x0: i64, y0: i64, w: usize, h: usize, fill: u8) -> Result<Raster> {
        let mut out = Raster::filled(w, h, self.channels, fill)?;
        let c = self.channels;
        let sx0 = x0.max(0);
        let sx1 = (x0 + w as i64).min(self.width as i64);
        if sx1 <= sx0 {
            return Ok(out);
        }
        let dx0 = (sx0 - x0) as usize;
        let span = (sx1 - sx0) as usize * c;
        for oy in 0..h {
            let sy = y0 + oy as i64;
            if sy < 0 || sy >= self.height as i64 {
                continue;
            }
            let src = &self.row(sy as usize)[sx0 as usize * c..sx0 as usize * c + span];
            out.row_mut(oy)[dx0 * c..dx0 * c + span].copy_from_slice(src);
        }
        Ok(out)
    }

    /// Centers the image on a white square canvas of side `max(width, height)`.
    pub fn pad_to_square(&self) -> Raster {
        if self.is_square() {
            return self.clone();
        }
        let side = self.width.max(self.height);
        let x0 = -(((side - self.width) / 2) as i64);
        let y0 = -(((side - self.height) / 2) as i64);
        self.crop_padded(x0, y0, side, side, WHITE)
            .expect("side is nonzero")
    }

    /// Luma (BT.601 integer weights) for RGB, identity for gray.
    pub fn to_gray(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| gray_of(p[0], p[1], p[2]))
            .collect();
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Mean value of every channel.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0u64; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as u64;
            }
        }
        let n = (self.width * self.height) as f64;
        sums.into_iter().map(|s| s as f64 / n).collect()
    }
}

#[inline]
pub(crate) fn gray_of(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

fn check_dims(width: usize, height: usize, channels: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::DegenerateInput(format!(
            "image dimensions {width}x{height}"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Shape(format!("{channels} channels (expected 1 or 3)")));
    }
    Ok(())
}
