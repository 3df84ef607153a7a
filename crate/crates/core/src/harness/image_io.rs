//! 8-bit PNG persistence of `[-1, 1]` RGB images.

use std::path::Path;

use image::RgbImage;

use crate::error::{invalid, Result};
use crate::flow::Latent;

pub fn to_u8(x: f64) -> u8 {
    (((x.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

pub fn to_rgb_image(image: &Latent) -> Result<RgbImage> {
    let (c, h, w) = image.dims();
    if c != 3 {
        return Err(invalid(format!("expected a three-channel image, got {c} channels")));
    }
    let data = image.to_vec_f64()?;
    let hw = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([to_u8(data[p]), to_u8(data[hw + p]), to_u8(data[2 * hw + p])])
    }))
}

pub fn from_rgb_image(img: &RgbImage) -> Result<Latent> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + p] = from_u8(px.0[c]);
        }
    }
    Latent::from_vec(data, (3, h, w))
}

pub fn save_png(image: &Latent, path: &Path) -> Result<()> {
    to_rgb_image(image)?.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Latent> {
    from_rgb_image(&image::open(path)?.to_rgb8())
}

/// Image as it would be read back after a PNG round trip.
pub fn quantize(image: &Latent) -> Result<Latent> {
    from_rgb_image(&to_rgb_image(image)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_is_symmetric() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(5.0), 255);
        for v in 0..=255u8 {
            assert_eq!(to_u8(from_u8(v) as f64), v);
        }
    }

    #[test]
    fn png_round_trip_is_stable() {
        let img = Latent::from_vec((0..3 * 8 * 4).map(|i| (i as f32 / 48.0) - 1.0).collect(), (3, 8, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(back.dims(), (3, 8, 4));
        assert!(back.bit_eq(&quantize(&img).unwrap()).unwrap());
        for (a, b) in back.to_vec().unwrap().iter().zip(img.to_vec().unwrap()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }
}
