use candle_core::Tensor;

use crate::error::{invalid, Result};
use crate::flow::Latent;

/// `(B, C, H, W)` -> `(B, (H/p)(W/p), C p p)`; tokens in row-major patch order,
/// features ordered `(c, py, px)`.
pub fn patchify_batch(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(invalid(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(x
        .reshape(vec![b, c, gh, patch, gw, patch])?
        .permute(vec![0, 2, 4, 1, 3, 5])?
        .contiguous()?
        .reshape((b, gh * gw, c * patch * patch))?)
}

/// Inverse of [`patchify_batch`].
pub fn unpatchify_batch(tokens: &Tensor, channels: usize, grid: (usize, usize), patch: usize) -> Result<Tensor> {
    let (b, t, d) = tokens.dims3()?;
    let (gh, gw) = grid;
    if t != gh * gw || d != channels * patch * patch {
        return Err(invalid(format!(
            "cannot unpatchify {t} tokens of width {d} into a {gh}x{gw} grid of {channels}x{patch}x{patch} patches"
        )));
    }
    Ok(tokens
        .reshape(vec![b, gh, gw, channels, patch, patch])?
        .permute(vec![0, 3, 1, 4, 2, 5])?
        .contiguous()?
        .reshape((b, channels, gh * patch, gw * patch))?)
}

/// Visual tokens of a single latent: `(tokens, C p p)`.
pub fn patchify(image: &Latent, patch: usize) -> Result<Tensor> {
    Ok(patchify_batch(&image.tensor().unsqueeze(0)?, patch)?.squeeze(0)?)
}

pub fn unpatchify(tokens: &Tensor, channels: usize, grid: (usize, usize), patch: usize) -> Result<Latent> {
    Latent::new(unpatchify_batch(&tokens.unsqueeze(0)?, channels, grid, patch)?.squeeze(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn token_count_and_round_trip() {
        let x = Tensor::randn(0f32, 1.0, (3, 32, 32), &Device::Cpu).unwrap();
        let z = Latent::new(x).unwrap();
        let tokens = patchify(&z, 4).unwrap();
        assert_eq!(tokens.dims(), &[64, 48]);
        let back = unpatchify(&tokens, 3, (8, 8), 4).unwrap();
        assert!(back.bit_eq(&z).unwrap());
    }

    #[test]
    fn indivisible_rejected() {
        let z = Latent::zeros((3, 30, 30), candle_core::DType::F32).unwrap();
        assert!(patchify(&z, 4).is_err());
    }

    #[test]
    fn first_token_is_top_left_patch() {
        let data: Vec<f32> = (0..2 * 4 * 4).map(|x| x as f32).collect();
        let z = Latent::from_vec(data, (2, 4, 4)).unwrap();
        let tokens = patchify(&z, 2).unwrap().to_vec2::<f32>().unwrap();
        // channel 0 rows 0..2 cols 0..2, then channel 1
        assert_eq!(tokens[0], vec![0., 1., 4., 5., 16., 17., 20., 21.]);
        assert_eq!(tokens[1], vec![2., 3., 6., 7., 18., 19., 22., 23.]);
    }
}
