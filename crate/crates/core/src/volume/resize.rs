use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// Interpolation used by [`resize_slice`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    /// Bilinear, corner-aligned (first and last samples map onto each other).
    Continuous,
    /// Nearest neighbour on pixel centres; never creates new values.
    Label,
}

/// Resamples `image` to `target = (rows, cols)`.
pub fn resize_slice(image: &Image, target: (usize, usize), mode: ResizeMode) -> Result<Image> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Shape(format!("resize target must be >= 1, got {target:?}")));
    }
    if image.shape() == target {
        return Ok(image.clone());
    }
    Ok(match mode {
        ResizeMode::Continuous => bilinear(image, th, tw),
        ResizeMode::Label => nearest(image, th, tw),
    })
}

/// Source coordinate and blend weight for each output index.
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 {
                (src - 1) as f64 / 2.0
            } else {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            };
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

fn bilinear(image: &Image, th: usize, tw: usize) -> Image {
    let rows = linear_taps(image.height(), th);
    let cols = linear_taps(image.width(), tw);
    let mut out = Vec::with_capacity(th * tw);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = image.get(r0, c0) * (1.0 - fc) + image.get(r0, c1) * fc;
            let bottom = image.get(r1, c0) * (1.0 - fc) + image.get(r1, c1) * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    Image::new(th, tw, out).expect("bilinear output sized by construction")
}

fn nearest_taps(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|i| (((2 * i + 1) * src) / (2 * dst)).min(src - 1))
        .collect()
}

fn nearest(image: &Image, th: usize, tw: usize) -> Image {
    let rows = nearest_taps(image.height(), th);
    let cols = nearest_taps(image.width(), tw);
    Image::from_fn(th, tw, |i, j| image.get(rows[i], cols[j]))
}
