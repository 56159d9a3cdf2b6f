//! Heatmap overlays of binarized patch-correlation rows, written as plain
//! PPM (text-header raster) so no image codec is needed.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{FicopError, Result};
use crate::pcp::{binarize, PatchCorrelationMap};

/// RGB raster at full resolution.
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triplets.
    pub pixels: Vec<[u8; 3]>,
}

impl Raster {
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| FicopError::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)
            .map_err(|e| FicopError::io(path, e))?;
        for p in &self.pixels {
            w.write_all(p).map_err(|e| FicopError::io(path, e))?;
        }
        w.flush().map_err(|e| FicopError::io(path, e))
    }
}

/// Overlay of one anchor patch's binarized query mask on a grayscale base
/// image (e.g. the query depth): active cells are tinted red, inactive kept
/// cold blue-gray. Output is at the base image's resolution.
pub fn patch_overlay(
    c_p: &PatchCorrelationMap,
    tau: f64,
    patch: usize,
    base: &Array2<f32>,
) -> Result<Raster> {
    if patch >= c_p.n_patches() {
        return Err(FicopError::Validation(format!(
            "patch {patch} out of range 0..{}",
            c_p.n_patches()
        )));
    }
    let bin = binarize(c_p, tau)?;
    let (h, w) = base.dim();
    let grid = c_p.g2;
    if h % grid != 0 || w % grid != 0 {
        return Err(FicopError::Validation(format!(
            "base {h}x{w} not divisible by query grid {grid}"
        )));
    }
    let (ch, cw) = (h / grid, w / grid);
    let max = base.iter().cloned().fold(0.0f32, f32::max).max(1e-6);
    let mut pixels = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let g = (base[(v, u)] / max * 200.0) as u8;
            let hot = bin[(patch, v / ch, u / cw)] != 0;
            if hot {
                pixels.push([g.saturating_add(80), g / 2, g / 2]);
            } else {
                pixels.push([g / 2, g / 2, g.saturating_add(40)]);
            }
        }
    }
    Ok(Raster { width: w, height: h, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn uniform_base(h: usize, w: usize) -> Array2<f32> {
        Array2::from_elem((h, w), 0.5)
    }

    #[test]
    fn hot_cell_at_declared_patch() {
        // Identity correlation: row n hot exactly at cell n.
        let g = 4;
        let mut c = Array3::zeros((g * g, g, g));
        for n in 0..g * g {
            c[(n, n / g, n % g)] = 1.0;
        }
        let cp = PatchCorrelationMap::from_binary(&c, g, g).unwrap();
        let r = patch_overlay(&cp, 0.5, 5, &uniform_base(32, 32)).unwrap();
        // Cell (1,1) covers rows 8..16, cols 8..16; its pixels are red-tinted.
        let red = r.pixels[10 * 32 + 10];
        let cold = r.pixels[0];
        assert!(red[0] > red[2]);
        assert!(cold[2] > cold[0]);
    }

    #[test]
    fn all_zero_map_is_uniformly_cold() {
        let g = 4;
        let c = Array3::from_elem((g * g, g, g), 1.0);
        let cp = PatchCorrelationMap::from_binary(&c, g, g).unwrap();
        // Uniform rows at tau 0.5: everything binarizes to zero.
        let r = patch_overlay(&cp, 0.5, 0, &uniform_base(32, 32)).unwrap();
        assert!(r.pixels.iter().all(|p| p[2] > p[0]));
    }

    #[test]
    fn raster_dims_match_base_and_ppm_written() {
        let g = 4;
        let mut c = Array3::zeros((g * g, g, g));
        c[(0, 0, 0)] = 1.0;
        let cp = PatchCorrelationMap::from_binary(&c, g, g).unwrap();
        let r = patch_overlay(&cp, 0.5, 0, &uniform_base(64, 48)).unwrap();
        assert_eq!((r.height, r.width), (64, 48));
        assert_eq!(r.pixels.len(), 64 * 48);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.ppm");
        r.write_ppm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n48 64\n255\n"));
        assert_eq!(bytes.len(), 13 + 64 * 48 * 3);
    }
}
