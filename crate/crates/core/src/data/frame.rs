use crate::error::{GaitError, Result};

/// Pixels at or above this value count as foreground.
pub const FG_THRESHOLD: u8 = 128;

/// 8-bit grayscale frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FrameImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl FrameImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(GaitError::Input(format!(
                "frame {height}x{width} with {} pixels",
                pixels.len()
            )));
        }
        Ok(FrameImage {
            height,
            width,
            pixels,
        })
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.pixels[r * self.width + c]
    }

    pub fn is_fg(&self, r: usize, c: usize) -> bool {
        self.get(r, c) >= FG_THRESHOLD
    }

    /// Rounded mean column of the foreground, `None` if there is none.
    pub fn centroid_col(&self) -> Option<usize> {
        let (mut sum, mut count) = (0usize, 0usize);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.is_fg(r, c) {
                    sum += c;
                    count += 1;
                }
            }
        }
        (count > 0).then(|| (2 * sum + count) / (2 * count))
    }
}

/// Nearest-neighbour source index for `i` in `0..dst`, mapping the first and
/// last destination samples onto the first and last source samples.
fn align_corners(i: usize, dst: usize, src: usize) -> usize {
    if dst <= 1 {
        0
    } else {
        (2 * i * (src - 1) + (dst - 1)) / (2 * (dst - 1))
    }
}

/// Size-normalizes a silhouette to `target = (H, W)`:
///
/// 1. crop rows to the vertical bounding box of the foreground,
/// 2. rescale isotropically (nearest neighbour) to height `H`,
/// 3. take a `W`-wide window centred on the foreground centroid column,
///    zero-filling outside the image.
///
/// Foreground/background are decided by [`FG_THRESHOLD`]; the grey values
/// themselves are carried through unchanged.
pub fn normalize_frame(raw: &FrameImage, target: (usize, usize)) -> Result<FrameImage> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(GaitError::Config(format!("target size {th}x{tw}")));
    }
    let fg_rows: Vec<usize> = (0..raw.height)
        .filter(|&r| (0..raw.width).any(|c| raw.is_fg(r, c)))
        .collect();
    let (Some(&top), Some(&bottom)) = (fg_rows.first(), fg_rows.last()) else {
        return Err(GaitError::FrameRejected("no foreground pixels".into()));
    };
    let h = bottom - top + 1;
    let w = raw.width;
    let scaled_w = ((2 * w * th + h) / (2 * h)).max(1);

    let mut scaled = vec![0u8; th * scaled_w];
    for r in 0..th {
        let sr = top + align_corners(r, th, h);
        for c in 0..scaled_w {
            scaled[r * scaled_w + c] = raw.get(sr, align_corners(c, scaled_w, w));
        }
    }
    let scaled = FrameImage {
        height: th,
        width: scaled_w,
        pixels: scaled,
    };
    let cx = scaled
        .centroid_col()
        .ok_or_else(|| GaitError::FrameRejected("foreground vanished after rescaling".into()))?;

    let offset = cx as isize - (tw / 2) as isize;
    let mut out = vec![0u8; th * tw];
    for r in 0..th {
        for c in 0..tw {
            let sc = c as isize + offset;
            if sc >= 0 && (sc as usize) < scaled_w {
                out[r * tw + c] = scaled.get(r, sc as usize);
            }
        }
    }
    FrameImage::new(th, tw, out)
}
