use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use super::raster::Raster;
use crate::error::{Error, Result};

/// Loads a PNG or TIFF (or anything else the `image` crate decodes) as 8-bit
/// gray or RGB. Alpha is dropped; 16-bit samples are reduced to 8 bits.
pub fn load_image(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => Raster::from_vec(w, h, 1, buf.into_raw()),
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => {
            Raster::from_vec(w, h, 1, img.to_luma8().into_raw())
        }
        other => Raster::from_vec(w, h, 3, other.to_rgb8().into_raw()),
    }
}

/// Writes gray or RGB 8-bit. Format follows the extension (`.png`, `.tif`).
pub fn save_image(img: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let map = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    match img.channels() {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, img.data())
            .expect("buffer length checked by Raster")
            .save(path)
            .map_err(map),
        _ => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, img.data())
            .expect("buffer length checked by Raster")
            .save(path)
            .map_err(map),
    }
}
