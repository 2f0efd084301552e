//! Minimal binary PPM (P6) image emission for sample renders and density maps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::CategoricalGrid;

/// Writes an 8-bit grayscale image as P6 (each pixel replicated to RGB).
pub fn write_ppm_gray(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!(
            "{}x{} image needs {} pixels, got {}",
            width,
            height,
            width * height,
            pixels.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    for &p in pixels {
        w.write_all(&[p, p, p])?;
    }
    w.flush()?;
    Ok(())
}

/// Renders a grid to grayscale pixels by scaling classes onto 0..=255.
///
/// Rank-3 grids render channels side by side (one `H`×`W` tile per channel);
/// rank-1 grids render as a 1-pixel-tall strip.
pub fn render_grid_gray(grid: &CategoricalGrid) -> (usize, usize, Vec<u8>) {
    let k = grid.num_classes();
    let scale = |v: u16| -> u8 {
        if k <= 1 {
            0
        } else {
            ((u32::from(v) * 255) / (k - 1)) as u8
        }
    };
    match grid.shape() {
        [d] => (*d, 1, grid.values().iter().map(|&v| scale(v)).collect()),
        [c, h, w] => {
            let (c, h, w) = (*c, *h, *w);
            let mut pixels = vec![0u8; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        pixels[y * (c * w) + ch * w + x] = scale(grid.values()[ch * h * w + y * w + x]);
                    }
                }
            }
            (c * w, h, pixels)
        }
        _ => unreachable!("grids are rank 1 or 3"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        write_ppm_gray(&path, 2, 1, &[0, 255]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 0, 0, 255, 255, 255]);
        assert!(write_ppm_gray(&path, 2, 2, &[0]).is_err());
    }

    #[test]
    fn render_scales_classes_and_tiles_channels() {
        let g = CategoricalGrid::new(vec![2, 1, 2], 3, vec![0, 1, 2, 0]).unwrap();
        let (w, h, px) = render_grid_gray(&g);
        assert_eq!((w, h), (4, 1));
        assert_eq!(px, vec![0, 127, 255, 0]);
    }
}
