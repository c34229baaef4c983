//! Pixel patches ↔ token rows. A token row lists its patch pixels row-major,
//! channels innermost.

use crate::data::Image;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn patchify(image: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || !image.width.is_multiple_of(patch) || !image.height.is_multiple_of(patch) {
        return Err(Error::shape(format!(
            "{}x{} image is not divisible into {patch}-pixel patches",
            image.width, image.height
        )));
    }
    let (gw, gh) = (image.width / patch, image.height / patch);
    let dim = patch * patch * 3;
    let mut data = Vec::with_capacity(gw * gh * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * image.width + gx * patch) * 3;
                data.extend_from_slice(&image.data[start..start + patch * 3]);
            }
        }
    }
    Tensor::matrix(gw * gh, dim, data)
}

pub fn unpatchify(tokens: &Tensor, width: usize, height: usize, patch: usize) -> Result<Image> {
    if patch == 0 || !width.is_multiple_of(patch) || !height.is_multiple_of(patch) {
        return Err(Error::shape(format!("{width}x{height} is not divisible by patch {patch}")));
    }
    let (gw, gh) = (width / patch, height / patch);
    if tokens.rows() != gw * gh || tokens.cols() != patch * patch * 3 {
        return Err(Error::shape(format!(
            "{}x{} tokens do not tile a {width}x{height} image with patch {patch}",
            tokens.rows(),
            tokens.cols()
        )));
    }
    let mut data = vec![0.0; width * height * 3];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = tokens.row(gy * gw + gx);
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * width + gx * patch) * 3;
                data[start..start + patch * 3].copy_from_slice(&row[py * patch * 3..(py + 1) * patch * 3]);
            }
        }
    }
    Image::new(width, height, data)
}

/// Maps `[0, 1]` pixels to the model's `[-1, 1]` range.
pub fn to_signed(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| 2.0 * v - 1.0).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

pub fn from_signed(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn eight_by_eight_gives_four_tokens() {
        let t = patchify(&random_image(8, 8, 0), 4).unwrap();
        assert_eq!((t.rows(), t.cols()), (4, 48));
        assert!(patchify(&random_image(8, 6, 0), 4).is_err());
    }

    #[test]
    fn constant_image_gives_identical_rows() {
        let t = patchify(&Image::filled(8, 8, [0.2, 0.4, 0.6]), 4).unwrap();
        assert!((1..4).all(|r| t.row(r) == t.row(0)));
    }

    #[test]
    fn token_layout_matches_pixels() {
        let img = random_image(8, 4, 1);
        let t = patchify(&img, 2).unwrap();
        // token (gy=1, gx=2), pixel (py=1, px=0), channel 2
        let (x, y) = (2 * 2, 2 + 1);
        assert_eq!(t.get(4 + 2, 2 * 3 + 2), img.pixel(x, y)[2]);
    }

    #[test]
    fn round_trip_through_orthonormal_embed() {
        // a signed permutation is orthonormal; embed then invert with the transpose
        let img = random_image(8, 8, 2);
        let t = patchify(&img, 4).unwrap();
        let n = 48;
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            let j = (i * 7 + 3) % n;
            q[i * n + j] = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let qt: Vec<f32> = (0..n * n).map(|k| q[(k % n) * n + k / n]).collect();
        let q = Tensor::matrix(n, n, q).unwrap();
        let qt = Tensor::matrix(n, n, qt).unwrap();
        let back = matmul(&matmul(&t, &q).unwrap(), &qt).unwrap();
        assert_eq!(unpatchify(&back, 8, 8, 4).unwrap(), img);
    }
}
