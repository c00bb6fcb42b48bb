//! Regular grid slicing of an image into square patches.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::preprocess::{RasterImage, Role};
use crate::raster_io::write_raster;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_PATCH_SIZE: usize = 224;

/// Region of the source image covered by the grid. Images whose sides are not
/// multiples of the patch size are center-cropped to the largest multiple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub source_height: usize,
    pub source_width: usize,
}

impl Crop {
    pub fn is_trimmed(&self) -> bool {
        self.height != self.source_height || self.width != self.source_width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T: Scalar> {
    pub row: usize,
    pub col: usize,
    /// `[3, patch_size, patch_size]`, unit-interval samples.
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T: Scalar = f32> {
    pub section_id: String,
    pub role: Role,
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub crop: Crop,
    /// Row-major; `patches[r * cols + c]` is at (r, c).
    pub patches: Vec<Patch<T>>,
}

impl<T: Scalar> PatchGrid<T> {
    pub fn get(&self, row: usize, col: usize) -> Option<&Patch<T>> {
        (row < self.rows && col < self.cols).then(|| &self.patches[row * self.cols + col])
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Cuts `image` into `patch_size`² tiles, row-major. Samples are normalized to
/// `[0, 1]` as they are copied.
pub fn slice_grid<T: Scalar>(image: &RasterImage, section_id: &str, patch_size: usize) -> Result<PatchGrid<T>> {
    if patch_size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if image.channels() != 3 {
        return Err(Error::shape(format!(
            "only 3-channel images are sliced, got {} channels",
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let rows = h / patch_size;
    let cols = w / patch_size;
    if rows == 0 || cols == 0 {
        return Err(Error::shape(format!(
            "{h}x{w} image is smaller than one {patch_size}x{patch_size} patch"
        )));
    }
    let crop = Crop {
        top: (h - rows * patch_size) / 2,
        left: (w - cols * patch_size) / 2,
        height: rows * patch_size,
        width: cols * patch_size,
        source_height: h,
        source_width: w,
    };
    let plane = patch_size * patch_size;
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut data = vec![T::zero(); 3 * plane];
            for y in 0..patch_size {
                let sy = crop.top + r * patch_size + y;
                for x in 0..patch_size {
                    let sx = crop.left + c * patch_size + x;
                    let base = (sy * w + sx) * 3;
                    for ch in 0..3 {
                        data[ch * plane + y * patch_size + x] = T::of(image.unit_value(base + ch));
                    }
                }
            }
            patches.push(Patch {
                row: r,
                col: c,
                tensor: Tensor::new(vec![3, patch_size, patch_size], data)?,
            });
        }
    }
    Ok(PatchGrid {
        section_id: section_id.to_string(),
        role: image.role(),
        patch_size,
        rows,
        cols,
        crop,
        patches,
    })
}

/// Stitches the patches back into the cropped region as a normalized image.
pub fn reassemble<T: Scalar>(grid: &PatchGrid<T>) -> Result<RasterImage> {
    let p = grid.patch_size;
    let (h, w) = (grid.rows * p, grid.cols * p);
    let plane = p * p;
    let mut data = vec![0.0; h * w * 3];
    for patch in &grid.patches {
        let t = patch.tensor.data();
        for y in 0..p {
            for x in 0..p {
                let base = ((patch.row * p + y) * w + patch.col * p + x) * 3;
                for ch in 0..3 {
                    data[base + ch] = t[ch * plane + y * p + x].as_f64();
                }
            }
        }
    }
    RasterImage::from_unit(h, w, grid.role, data)
}

/// PPL, XPL and CI patches at one grid position.
#[derive(Debug, Clone, Copy)]
pub struct AlignedTriple<'a, T: Scalar> {
    pub row: usize,
    pub col: usize,
    pub ppl: &'a Tensor<T>,
    pub xpl: &'a Tensor<T>,
    pub ci: &'a Tensor<T>,
}

impl<'a, T: Scalar> AlignedTriple<'a, T> {
    pub fn get(&self, role: Role) -> &'a Tensor<T> {
        match role {
            Role::Ppl => self.ppl,
            Role::Xpl => self.xpl,
            Role::Ci => self.ci,
            Role::Composite6 => panic!("composites are not classified"),
        }
    }
}

/// Zips three grids of one section position by position, row-major.
pub fn aligned_triples<'a, T: Scalar>(
    ppl: &'a PatchGrid<T>,
    xpl: &'a PatchGrid<T>,
    ci: &'a PatchGrid<T>,
) -> Result<Vec<AlignedTriple<'a, T>>> {
    for other in [xpl, ci] {
        if other.section_id != ppl.section_id {
            return Err(Error::shape(format!(
                "grids belong to different sections: {:?} and {:?}",
                ppl.section_id, other.section_id
            )));
        }
        if (other.patch_size, other.rows, other.cols) != (ppl.patch_size, ppl.rows, ppl.cols) {
            return Err(Error::shape(format!(
                "grid geometry mismatch: {}x{} of {} vs {}x{} of {}",
                ppl.rows, ppl.cols, ppl.patch_size, other.rows, other.cols, other.patch_size
            )));
        }
    }
    Ok(ppl
        .patches
        .iter()
        .zip(&xpl.patches)
        .zip(&ci.patches)
        .map(|((p, x), c)| AlignedTriple {
            row: p.row,
            col: p.col,
            ppl: &p.tensor,
            xpl: &x.tensor,
            ci: &c.tensor,
        })
        .collect())
}

/// Writes every patch as `<section>_<role>_<row>_<col>.ppm` under `dir`.
pub fn export_patches<T: Scalar>(grid: &PatchGrid<T>, dir: &Path) -> Result<Vec<PathBuf>> {
    let p = grid.patch_size;
    let plane = p * p;
    let mut written = Vec::with_capacity(grid.len());
    for patch in &grid.patches {
        let t = patch.tensor.data();
        let data = (0..plane)
            .flat_map(|i| (0..3).map(move |ch| t[ch * plane + i].as_f64().clamp(0.0, 1.0)))
            .collect();
        let img = RasterImage::from_unit(p, p, grid.role, data)?;
        let path = dir.join(format!(
            "{}_{}_{}_{}.ppm",
            grid.section_id, grid.role, patch.row, patch.col
        ));
        write_raster(&path, &img)?;
        written.push(path);
    }
    Ok(written)
}
