//! Image fidelity metrics on `(channels, height, width)` images in `[-1, 1]`.

use serde::{Deserialize, Serialize};

use super::data::{rgb_hue, PaletteColor};
use crate::error::{invalid, Error, Result};
use crate::flow::Latent;

/// Dynamic range of `[-1, 1]` images.
pub const DATA_RANGE: f64 = 2.0;
/// Reported PSNR of identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

struct Planes {
    data: Vec<f64>,
    c: usize,
    h: usize,
    w: usize,
}

fn planes(x: &Latent) -> Result<Planes> {
    let (c, h, w) = x.dims();
    Ok(Planes {
        data: x.to_vec_f64()?,
        c,
        h,
        w,
    })
}

fn pair(a: &Latent, b: &Latent) -> Result<(Planes, Planes)> {
    a.ensure_same_shape(b)?;
    Ok((planes(a)?, planes(b)?))
}

fn check_region(region: &[bool], h: usize, w: usize) -> Result<()> {
    if region.len() != h * w {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            got: vec![region.len()],
        });
    }
    if !region.iter().any(|&r| r) {
        return Err(invalid("metric region is empty"));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (DATA_RANGE * DATA_RANGE / mse).log10()).min(PSNR_CAP)
}

fn mse_where(a: &Planes, b: &Planes, region: Option<&[bool]>) -> f64 {
    let hw = a.h * a.w;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
        if region.is_none_or(|r| r[i % hw]) {
            sum += (x - y).powi(2);
            n += 1;
        }
    }
    sum / n as f64
}

pub fn psnr(a: &Latent, b: &Latent) -> Result<f64> {
    let (pa, pb) = pair(a, b)?;
    Ok(psnr_from_mse(mse_where(&pa, &pb, None)))
}

/// PSNR over the pixels where `region` is set (row-major `height * width`).
pub fn psnr_region(a: &Latent, b: &Latent, region: &[bool]) -> Result<f64> {
    let (pa, pb) = pair(a, b)?;
    check_region(region, pa.h, pa.w)?;
    Ok(psnr_from_mse(mse_where(&pa, &pb, Some(region))))
}

fn gaussian_kernel() -> Vec<f64> {
    (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect()
}

/// Per-pixel SSIM of one channel. Near the border the window is truncated
/// to the image and its weights renormalised.
fn ssim_map(x: &[f64], y: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let c1 = (0.01 * DATA_RANGE).powi(2);
    let c2 = (0.03 * DATA_RANGE).powi(2);
    let r = SSIM_RADIUS as i64;
    let mut out = vec![0.0; h * w];
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let (mut sw, mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for di in -r..=r {
                let ii = i + di;
                if ii < 0 || ii >= h as i64 {
                    continue;
                }
                for dj in -r..=r {
                    let jj = j + dj;
                    if jj < 0 || jj >= w as i64 {
                        continue;
                    }
                    let wt = k[(di + r) as usize] * k[(dj + r) as usize];
                    let p = ii as usize * w + jj as usize;
                    sw += wt;
                    mx += wt * x[p];
                    my += wt * y[p];
                    sxx += wt * x[p] * x[p];
                    syy += wt * y[p] * y[p];
                    sxy += wt * x[p] * y[p];
                }
            }
            let (mx, my) = (mx / sw, my / sw);
            let vx = sxx / sw - mx * mx;
            let vy = syy / sw - my * my;
            let cov = sxy / sw - mx * my;
            out[i as usize * w + j as usize] =
                ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    out
}

fn ssim_where(a: &Planes, b: &Planes, region: Option<&[bool]>) -> f64 {
    let hw = a.h * a.w;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ch in 0..a.c {
        let map = ssim_map(&a.data[ch * hw..(ch + 1) * hw], &b.data[ch * hw..(ch + 1) * hw], a.h, a.w);
        for (p, v) in map.into_iter().enumerate() {
            if region.is_none_or(|r| r[p]) {
                sum += v;
                n += 1;
            }
        }
    }
    (sum / n as f64).clamp(-1.0, 1.0)
}

/// Mean SSIM over channels and pixels: Gaussian window 11 x 11, sigma 1.5.
pub fn ssim(a: &Latent, b: &Latent) -> Result<f64> {
    let (pa, pb) = pair(a, b)?;
    Ok(ssim_where(&pa, &pb, None))
}

/// Mean of the SSIM map over the pixels where `region` is set.
pub fn ssim_region(a: &Latent, b: &Latent, region: &[bool]) -> Result<f64> {
    let (pa, pb) = pair(a, b)?;
    check_region(region, pa.h, pa.w)?;
    Ok(ssim_where(&pa, &pb, Some(region)))
}

fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Chroma-weighted circular mean hue of an RGB image over `region`, in
/// degrees. `None` when the region is achromatic.
pub fn mean_hue(image: &Latent, region: &[bool]) -> Result<Option<f64>> {
    let p = planes(image)?;
    if p.c != 3 {
        return Err(invalid("hue needs a three-channel image"));
    }
    check_region(region, p.h, p.w)?;
    let hw = p.h * p.w;
    let (mut sx, mut sy) = (0.0, 0.0);
    for (i, _) in region.iter().enumerate().filter(|(_, &r)| r) {
        let rgb = [0, 1, 2].map(|c| ((p.data[c * hw + i] + 1.0) / 2.0).clamp(0.0, 1.0));
        if let Some(h) = rgb_hue(rgb[0], rgb[1], rgb[2]) {
            let chroma = rgb.iter().cloned().fold(f64::MIN, f64::max) - rgb.iter().cloned().fold(f64::MAX, f64::min);
            let rad = h.to_radians();
            sx += chroma * rad.cos();
            sy += chroma * rad.sin();
        }
    }
    if sx.hypot(sy) < 1e-9 {
        return Ok(None);
    }
    Ok(Some(sy.atan2(sx).to_degrees().rem_euclid(360.0)))
}

/// Palette colour nearest in hue to the region's mean hue.
pub fn dominant_color(image: &Latent, region: &[bool]) -> Result<Option<PaletteColor>> {
    Ok(mean_hue(image, region)?.map(|h| {
        PaletteColor::ALL
            .into_iter()
            .min_by(|a, b| hue_distance(h, a.hue()).total_cmp(&hue_distance(h, b.hue())))
            .expect("palette is non-empty")
    }))
}

/// True when the edited region's mean hue is nearest to `target`.
pub fn edit_success(edited: &Latent, region: &[bool], target: PaletteColor) -> Result<bool> {
    Ok(dominant_color(edited, region)? == Some(target))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Over pixels outside the (dilated) edit region.
    pub psnr_unedited: f64,
    pub ssim_unedited: f64,
    pub edit_success: Option<bool>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(f: impl Fn(usize) -> f64) -> Latent {
        Latent::from_vec_f64((0..3 * 16 * 16).map(f).collect(), (3, 16, 16)).unwrap()
    }

    fn painted(rgb: [f32; 3]) -> Latent {
        image(|i| 2.0 * rgb[i / 256] as f64 - 1.0)
    }

    #[test]
    fn identical_images() {
        let a = image(|i| ((i * 7) % 13) as f64 / 6.5 - 1.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_psnr() {
        let a = image(|i| ((i * 7) % 13) as f64 / 20.0 - 0.5);
        let b = image(|i| ((i * 7) % 13) as f64 / 20.0 - 0.5 + 0.1);
        // mse 0.01 on range 2
        let expected = 10.0 * (4.0f64 / 0.01).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 26.0206).abs() < 1e-4);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let a = image(|i| ((i * 7) % 13) as f64 / 6.5 - 1.0);
        let b = image(|i| ((i * 5) % 11) as f64 / 5.5 - 1.0);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-9);
        assert!((-1.0..1.0).contains(&ab));
    }

    #[test]
    fn region_variants() {
        let a = image(|_| 0.0);
        let b = image(|i| if (i % 256) < 128 { 0.0 } else { 0.5 });
        let top: Vec<bool> = (0..256).map(|p| p < 128).collect();
        assert_eq!(psnr_region(&a, &b, &top).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &b).unwrap() < PSNR_CAP);
        assert!(psnr_region(&a, &b, &[false; 256]).is_err());
        assert!(ssim_region(&a, &b, &top).unwrap() > ssim(&a, &b).unwrap());
    }

    #[test]
    fn edit_success_oracle() {
        let region: Vec<bool> = (0..256).map(|p| p % 3 == 0).collect();
        for c in PaletteColor::ALL {
            assert!(edit_success(&painted(c.rgb()), &region, c).unwrap());
        }
        assert!(!edit_success(&painted(PaletteColor::Red.rgb()), &region, PaletteColor::Blue).unwrap());
        let grey = painted([0.4, 0.4, 0.4]);
        assert!(!edit_success(&grey, &region, PaletteColor::Red).unwrap());
    }

    #[test]
    fn hue_wraps_around() {
        assert_eq!(hue_distance(350.0, 10.0), 20.0);
        // equal parts red and magenta-ish red average near 330
        let img = image(|i| {
            let (c, p) = (i / 256, i % 256);
            let rgb = if p % 2 == 0 { [1.0, 0.0, 0.0] } else { [1.0, 0.0, 1.0] };
            2.0 * rgb[c] - 1.0
        });
        let h = mean_hue(&img, &[true; 256]).unwrap().unwrap();
        assert!((h - 330.0).abs() < 1e-6, "{h}");
    }
}
