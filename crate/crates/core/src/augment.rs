//! Geometric dataset augmentation: rotation about the image center and
//! mirror flips, plus the manifest-level expansion driver.
//!
//! The rotation math runs in a center-origin, y-up frame; raster storage is
//! row-major with a top-left origin. For a w x h image the conversion is
//! `cx = x - (w-1)/2`, `cy = (h-1)/2 - y`, applied symmetrically on the way
//! back. An angle rotates clockwise in that frame:
//! `x1 = x0 cos a + y0 sin a`, `y1 = -x0 sin a + y0 cos a`.

use std::path::Path;

use crate::data::{DatasetManifest, ManifestRow};
use crate::error::{Error, Result};
use crate::image::{read_pgm, write_pgm, Image};

/// Coordinates in the center-origin frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Rotation angle in degrees, normalized to [0, 360).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Angle {
    degrees: f64,
}

impl Angle {
    pub fn new(degrees: f64) -> Result<Self> {
        if !degrees.is_finite() {
            return Err(Error::invalid(format!("angle must be finite, got {degrees}")));
        }
        Ok(Angle { degrees: degrees.rem_euclid(360.0) })
    }

    pub fn degrees(&self) -> f64 {
        self.degrees
    }

    /// Some(n) when the angle is exactly n quarter turns.
    fn quarter_turns(&self) -> Option<usize> {
        [0.0, 90.0, 180.0, 270.0].iter().position(|&q| q == self.degrees)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageDims {
    pub width: usize,
    pub height: usize,
}

impl ImageDims {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("image dims must be positive, got {width}x{height}")));
        }
        Ok(ImageDims { width, height })
    }

    pub fn of(img: &Image) -> Self {
        ImageDims { width: img.width(), height: img.height() }
    }
}

/// Canvas size that holds a rotated image without cropping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotatedBounds {
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MirrorAxis {
    /// Flip top and bottom: (x, y) -> (x, height-1-y).
    Vertical,
    /// Flip left and right: (x, y) -> (width-1-x, y).
    Horizontal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interp {
    #[default]
    Nearest,
    Bilinear,
}

/// Rotate a point clockwise by `a` in the y-up, center-origin frame.
pub fn rotate_point(p: Point, a: Angle) -> Point {
    let (sin, cos) = a.degrees().to_radians().sin_cos();
    Point { x: p.x * cos + p.y * sin, y: -p.x * sin + p.y * cos }
}

/// Output canvas size after rotating a w x h image by `a`: the four source
/// corners are rotated and each output extent is the larger of the two
/// corner-to-corner diagonals, rounded up. Quarter turns short-circuit to
/// the exact (possibly swapped) source dims.
pub fn rotated_bounds(dims: ImageDims, a: Angle) -> RotatedBounds {
    if let Some(q) = a.quarter_turns() {
        return if q % 2 == 0 {
            RotatedBounds { width: dims.width, height: dims.height }
        } else {
            RotatedBounds { width: dims.height, height: dims.width }
        };
    }
    let (w, h) = (dims.width as f64, dims.height as f64);
    let lt = rotate_point(Point { x: -w / 2.0, y: h / 2.0 }, a);
    let rt = rotate_point(Point { x: w / 2.0, y: h / 2.0 }, a);
    let lb = rotate_point(Point { x: -w / 2.0, y: -h / 2.0 }, a);
    let rb = rotate_point(Point { x: w / 2.0, y: -h / 2.0 }, a);
    let width = (rb.x - lt.x).abs().max((rt.x - lb.x).abs()).ceil() as usize;
    let height = (rb.y - lt.y).abs().max((rt.y - lb.y).abs()).ceil() as usize;
    RotatedBounds { width: width.max(1), height: height.max(1) }
}

/// Lossless index permutation for 0/90/180/270 degrees.
fn rotate_quarter(img: &Image, quarter: usize) -> Image {
    let (w, h) = (img.width(), img.height());
    let (dw, dh) = if quarter.is_multiple_of(2) { (w, h) } else { (h, w) };
    let mut out = Image::new(dw, dh).expect("source dims are positive");
    for dy in 0..dh {
        for dx in 0..dw {
            let (sx, sy) = match quarter {
                0 => (dx, dy),
                1 => (dy, h - 1 - dx),
                2 => (w - 1 - dx, h - 1 - dy),
                _ => (w - 1 - dy, dx),
            };
            out.set(dx, dy, img.get(sx, sy));
        }
    }
    out
}

/// Rotate an image clockwise by `a` onto a `rotated_bounds` canvas. Every
/// destination pixel is inverse-mapped (rotation by -a) into the source
/// frame and sampled with `interp`; samples outside the source take `fill`.
/// Exact quarter turns use a lossless permutation instead.
pub fn rotate_image(img: &Image, a: Angle, interp: Interp, fill: u8) -> Image {
    if let Some(q) = a.quarter_turns() {
        return rotate_quarter(img, q);
    }
    let (w, h) = (img.width(), img.height());
    let bounds = rotated_bounds(ImageDims::of(img), a);
    let inv = Angle::new(-a.degrees()).expect("normalized angle is finite");
    let mut out = Image::new(bounds.width, bounds.height).expect("bounds are positive");
    let half_dw = (bounds.width as f64 - 1.0) / 2.0;
    let half_dh = (bounds.height as f64 - 1.0) / 2.0;
    let half_sw = (w as f64 - 1.0) / 2.0;
    let half_sh = (h as f64 - 1.0) / 2.0;

    let sample = |xi: i64, yi: i64| -> f64 {
        if (0..w as i64).contains(&xi) && (0..h as i64).contains(&yi) {
            img.get(xi as usize, yi as usize) as f64
        } else {
            fill as f64
        }
    };

    for dy in 0..bounds.height {
        for dx in 0..bounds.width {
            let dest = Point { x: dx as f64 - half_dw, y: half_dh - dy as f64 };
            let src = rotate_point(dest, inv);
            let fx = src.x + half_sw;
            let fy = half_sh - src.y;
            let v = match interp {
                Interp::Nearest => {
                    let (rx, ry) = (fx.round() as i64, fy.round() as i64);
                    sample(rx, ry).round() as u8
                }
                Interp::Bilinear => {
                    let (x0, y0) = (fx.floor(), fy.floor());
                    let (tx, ty) = (fx - x0, fy - y0);
                    let (x0, y0) = (x0 as i64, y0 as i64);
                    let blended = (1.0 - tx) * (1.0 - ty) * sample(x0, y0)
                        + tx * (1.0 - ty) * sample(x0 + 1, y0)
                        + (1.0 - tx) * ty * sample(x0, y0 + 1)
                        + tx * ty * sample(x0 + 1, y0 + 1);
                    blended.round().clamp(0.0, 255.0) as u8
                }
            };
            out.set(dx, dy, v);
        }
    }
    out
}

/// Mirror a storage-frame coordinate. Self-inverse on the pixel grid.
pub fn mirror_coord(c: (usize, usize), dims: ImageDims, axis: MirrorAxis) -> Result<(usize, usize)> {
    let (x, y) = c;
    if x >= dims.width || y >= dims.height {
        return Err(Error::invalid(format!(
            "mirror_coord: ({x}, {y}) outside {}x{}",
            dims.width, dims.height
        )));
    }
    Ok(match axis {
        MirrorAxis::Vertical => (x, dims.height - 1 - y),
        MirrorAxis::Horizontal => (dims.width - 1 - x, y),
    })
}

pub fn mirror_image(img: &Image, axis: MirrorAxis) -> Image {
    let dims = ImageDims::of(img);
    let mut out = Image::new(dims.width, dims.height).expect("source dims are positive");
    for y in 0..dims.height {
        for x in 0..dims.width {
            let (mx, my) = mirror_coord((x, y), dims, axis).expect("coord is in range");
            out.set(x, y, img.get(mx, my));
        }
    }
    out
}

/// One step of a dataset-expansion plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    Rotate(Angle),
    Mirror(MirrorAxis),
}

impl AugmentOp {
    /// Token appended to augmented file names: rot90, rot22p5, mirv, mirh.
    pub fn file_token(&self) -> String {
        match self {
            AugmentOp::Rotate(a) => format!("rot{}", format!("{}", a.degrees()).replace('.', "p")),
            AugmentOp::Mirror(MirrorAxis::Vertical) => "mirv".to_string(),
            AugmentOp::Mirror(MirrorAxis::Horizontal) => "mirh".to_string(),
        }
    }

    fn apply(&self, img: &Image, interp: Interp) -> Image {
        match self {
            AugmentOp::Rotate(a) => rotate_image(img, *a, interp, 0),
            AugmentOp::Mirror(axis) => mirror_image(img, *axis),
        }
    }
}

/// Write one transformed copy of every manifest image per plan item into
/// `out_dir` and return the merged manifest: the original rows first (paths
/// rewritten relative to `out_dir`), then the generated rows ordered by
/// (source path, plan index). Labels and splits are inherited unchanged.
/// Generated files are named `<stem>_<op token>.pgm`; a plan whose tokens
/// collide is rejected. An empty plan writes nothing.
pub fn augment_dataset(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    plan: &[AugmentOp],
    interp: Interp,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if plan.is_empty() && manifest_dir == out_dir {
        return Ok(manifest.clone());
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(manifest.len() * (1 + plan.len()));
    for row in manifest.rows() {
        let path = relative_path(out_dir, &manifest_dir.join(&row.path))?;
        rows.push(ManifestRow { path, ..row.clone() });
    }

    let mut sources: Vec<&ManifestRow> = manifest.rows().iter().collect();
    sources.sort_by(|a, b| a.path.cmp(&b.path));
    for src_row in sources {
        if plan.is_empty() {
            break;
        }
        let img = read_pgm(&manifest_dir.join(&src_row.path))?;
        let stem = Path::new(&src_row.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::data(format!("no file stem in path {}", src_row.path)))?;
        for op in plan {
            let name = format!("{stem}_{}.pgm", op.file_token());
            write_pgm(&op.apply(&img, interp), &out_dir.join(&name))?;
            rows.push(ManifestRow { path: name, label: src_row.label, split: src_row.split });
        }
    }
    DatasetManifest::new(rows)
}

/// Lexical relative path from `base` (a directory) to `target`, with `/`
/// separators for manifest storage.
fn relative_path(base: &Path, target: &Path) -> Result<String> {
    let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
    let target = std::path::absolute(target).map_err(|e| Error::io(target, e))?;
    let mut b = base.components().peekable();
    let mut t = target.components().peekable();
    while let (Some(x), Some(y)) = (b.peek(), t.peek()) {
        if x == y {
            b.next();
            t.next();
        } else {
            break;
        }
    }
    let mut parts: Vec<String> = b.map(|_| "..".to_string()).collect();
    parts.extend(t.map(|c| c.as_os_str().to_string_lossy().into_owned()));
    if parts.is_empty() {
        return Err(Error::data(format!("target {} is the output directory itself", target.display())));
    }
    Ok(parts.join("/"))
}
