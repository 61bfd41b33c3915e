//! Training-time augmentation: reflect-padded random crop, horizontal
//! flip, right-angle rotation. Right angles only, so no interpolation
//! enters the pipeline and augmented images stay exactly reproducible.

use fmdnn_core::{Rng, Tensor};

use crate::{Error, Result};

/// Padding margin for same-size crops. With margin m the crop offset
/// ranges over [0, 2m], so m = 4 jitters a 64-pixel image by up to 4
/// pixels in each direction.
pub const CROP_MARGIN: usize = 4;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // mirror without repeating the edge sample; one pass suffices for
    // margins below the image size
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// Pad a [C, H, W] tensor by `m` on every spatial side, reflecting across
/// the border pixels.
pub fn reflect_pad(t: &Tensor, m: usize) -> Result<Tensor> {
    t.expect_rank(3, "reflect_pad input")?;
    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    if m >= h || m >= w {
        return Err(Error::Input(format!(
            "reflect margin {m} too large for {h}x{w}"
        )));
    }
    let (hp, wp) = (h + 2 * m, w + 2 * m);
    let mut out = Tensor::zeros(&[c, hp, wp]);
    for ci in 0..c {
        for y in 0..hp {
            let sy = reflect(y as isize - m as isize, h);
            for x in 0..wp {
                let sx = reflect(x as isize - m as isize, w);
                out.data[(ci * hp + y) * wp + x] = t.data[(ci * h + sy) * w + sx];
            }
        }
    }
    Ok(out)
}

pub fn crop(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
    t.expect_rank(3, "crop input")?;
    let (c, ih, iw) = (t.shape[0], t.shape[1], t.shape[2]);
    if y0 + h > ih || x0 + w > iw {
        return Err(Error::Input(format!(
            "crop {h}x{w}@({y0},{x0}) outside {ih}x{iw}"
        )));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.data[(ci * h + y) * w + x] = t.data[(ci * ih + y0 + y) * iw + x0 + x];
            }
        }
    }
    Ok(out)
}

pub fn hflip(t: &Tensor) -> Result<Tensor> {
    t.expect_rank(3, "hflip input")?;
    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.data[(ci * h + y) * w + x] = t.data[(ci * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Ok(out)
}

/// Rotate 90 degrees counterclockwise `quarters` times.
pub fn rot90(t: &Tensor, quarters: usize) -> Result<Tensor> {
    t.expect_rank(3, "rot90 input")?;
    let mut cur = t.clone();
    for _ in 0..quarters % 4 {
        let (c, h, w) = (cur.shape[0], cur.shape[1], cur.shape[2]);
        let mut out = Tensor::zeros(&[c, w, h]);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    // (y, x) -> (w-1-x, y)
                    out.data[(ci * w + (w - 1 - x)) * h + y] = cur.data[(ci * h + y) * w + x];
                }
            }
        }
        cur = out;
    }
    Ok(cur)
}

/// One augmentation draw: reflect-pad by `CROP_MARGIN` (or crop directly
/// if the input is already larger than the target), random crop to
/// `side` x `side`, horizontal flip with p = 0.5, rotation from
/// {0, 90, 180, 270} degrees. Exactly four RNG draws per call.
pub fn augment(image: &Tensor, side: usize, rng: &mut Rng) -> Result<Tensor> {
    image.expect_rank(3, "augment input")?;
    let (h, w) = (image.shape[1], image.shape[2]);
    if h < side || w < side {
        return Err(Error::Input(format!(
            "image {h}x{w} below target {side}x{side}"
        )));
    }
    let padded;
    let src = if h == side && w == side {
        padded = reflect_pad(image, CROP_MARGIN)?;
        &padded
    } else {
        image
    };
    let max_y = src.shape[1] - side;
    let max_x = src.shape[2] - side;
    let y0 = rng.below(max_y + 1);
    let x0 = rng.below(max_x + 1);
    let mut out = crop(src, y0, x0, side, side)?;
    if rng.uniform() < 0.5 {
        out = hflip(&out)?;
    }
    let quarters = rng.below(4) as usize;
    rot90(&out, quarters)
}
