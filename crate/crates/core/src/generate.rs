//! Sampling from a trained model and rendering latent grids as images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::model::{decode_batch, reparameterize, Mode, ModelParams};
use crate::rng::RandomSource;

/// Where latent points come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenStrategy {
    /// Standard normal prior.
    Prior,
    /// Gaussian of a uniformly chosen embedding column.
    AggregatePosterior,
    /// Gaussian of one class column; supervised models only.
    Conditional(usize),
}

impl GenStrategy {
    pub fn check(&self, params: &ModelParams) -> Result<()> {
        if let GenStrategy::Conditional(class) = *self {
            if params.mode != Mode::Supervised {
                return Err(Error::Generation(
                    "class-conditional sampling needs a supervised checkpoint".into(),
                ));
            }
            if class >= params.n_columns() {
                return Err(Error::arg(format!(
                    "class {class} out of range for a model with {} classes",
                    params.n_columns()
                )));
            }
        }
        Ok(())
    }
}

fn column_gaussian(params: &ModelParams, col: usize, rng: &mut RandomSource) -> Vec<f64> {
    let k = params.latent_dim();
    let mu: Vec<f64> = (0..k)
        .map(|r| params.mu_table.get(r, col) + params.mu_bias[r])
        .collect();
    let lv: Vec<f64> = (0..k)
        .map(|r| params.logvar_table.get(r, col) + params.logvar_bias[r])
        .collect();
    let eps: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
    reparameterize(&mu, &lv, &eps)
}

pub fn sample_latent(
    params: &ModelParams,
    strategy: GenStrategy,
    rng: &mut RandomSource,
) -> Result<Vec<f64>> {
    strategy.check(params)?;
    Ok(match strategy {
        GenStrategy::Prior => (0..params.latent_dim())
            .map(|_| rng.standard_normal())
            .collect(),
        GenStrategy::AggregatePosterior => {
            let col = rng.below(params.n_columns() as u64) as usize;
            column_gaussian(params, col, rng)
        }
        GenStrategy::Conditional(class) => column_gaussian(params, class, rng),
    })
}

/// Decodes a `k x B` batch of latent points into `B x d` samples.
pub fn decode_points(params: &ModelParams, z: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(decode_batch(params, z)?.recon.transpose())
}

/// `count x d` generated samples, unclamped.
pub fn generate(
    params: &ModelParams,
    strategy: GenStrategy,
    count: usize,
    rng: &mut RandomSource,
) -> Result<DenseMatrix> {
    if count == 0 {
        return Err(Error::arg("sample count must be at least 1"));
    }
    let mut z = DenseMatrix::zeros(params.latent_dim(), count);
    for j in 0..count {
        z.set_col(j, &sample_latent(params, strategy, rng)?);
    }
    decode_points(params, &z)
}

/// Maps a decoded value to a gray level.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale mosaic of equally sized tiles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TiledImage {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub tile_h: usize,
    pub tile_w: usize,
    pub pixels: Vec<u8>,
}

impl TiledImage {
    pub fn width(&self) -> usize {
        self.tile_cols * self.tile_w
    }

    pub fn height(&self) -> usize {
        self.tile_rows * self.tile_h
    }

    /// Pixels of tile `(r, c)`, row-major.
    pub fn tile(&self, r: usize, c: usize) -> Vec<u8> {
        let w = self.width();
        (0..self.tile_h)
            .flat_map(|y| {
                let start = (r * self.tile_h + y) * w + c * self.tile_w;
                self.pixels[start..start + self.tile_w].iter().copied()
            })
            .collect()
    }
}

/// Lattice coordinate `i` of `res` points spanning `[lo, hi]`; the end points
/// are exact.
pub fn lattice(lo: f64, hi: f64, i: usize, res: usize) -> f64 {
    let t = i as f64 / (res - 1) as f64;
    lo * (1.0 - t) + hi * t
}

/// Latent point decoded into tile `(r, c)` of a `res x res` grid over the
/// bounding box of `embedding` (`n x 2`). Row 0 sits at the largest second
/// coordinate.
pub fn grid_point(bounds: [(f64, f64); 2], r: usize, c: usize, res: usize) -> [f64; 2] {
    let (x_lo, x_hi) = bounds[0];
    let (y_lo, y_hi) = bounds[1];
    [
        lattice(x_lo, x_hi, c, res),
        lattice(y_lo, y_hi, res - 1 - r, res),
    ]
}

pub fn bounding_box(embedding: &DenseMatrix) -> Result<[(f64, f64); 2]> {
    if embedding.cols() != 2 || embedding.rows() == 0 {
        return Err(Error::Unsupported(format!(
            "grid maps need a non-empty 2-D embedding, got {:?}",
            embedding.shape()
        )));
    }
    let mut b = [(f64::INFINITY, f64::NEG_INFINITY); 2];
    for i in 0..embedding.rows() {
        for (axis, bound) in b.iter_mut().enumerate() {
            let v = embedding.get(i, axis);
            bound.0 = bound.0.min(v);
            bound.1 = bound.1.max(v);
        }
    }
    Ok(b)
}

pub fn grid_map(
    params: &ModelParams,
    embedding: &DenseMatrix,
    grid_res: usize,
    image_h: usize,
    image_w: usize,
) -> Result<TiledImage> {
    if params.latent_dim() != 2 {
        return Err(Error::Unsupported(format!(
            "grid maps need a 2-D latent space, model has {}",
            params.latent_dim()
        )));
    }
    if grid_res < 2 {
        return Err(Error::arg("grid resolution must be at least 2"));
    }
    if image_h * image_w != params.output_dim() {
        return Err(Error::Consistency(format!(
            "{image_h}x{image_w} tiles do not match output dimension {}",
            params.output_dim()
        )));
    }
    let bounds = bounding_box(embedding)?;
    let mut z = DenseMatrix::zeros(2, grid_res * grid_res);
    for r in 0..grid_res {
        for c in 0..grid_res {
            z.set_col(r * grid_res + c, &grid_point(bounds, r, c, grid_res));
        }
    }
    let decoded = decode_points(params, &z)?;
    let width = grid_res * image_w;
    let mut pixels = vec![0u8; grid_res * image_h * width];
    for r in 0..grid_res {
        for c in 0..grid_res {
            let sample = decoded.row(r * grid_res + c);
            for y in 0..image_h {
                let dst = (r * image_h + y) * width + c * image_w;
                for x in 0..image_w {
                    pixels[dst + x] = quantize(sample[y * image_w + x]);
                }
            }
        }
    }
    Ok(TiledImage {
        tile_rows: grid_res,
        tile_cols: grid_res,
        tile_h: image_h,
        tile_w: image_w,
        pixels,
    })
}

/// One sample as a single-tile image.
pub fn sample_image(sample: &[f64], image_h: usize, image_w: usize) -> Result<TiledImage> {
    if sample.len() != image_h * image_w {
        return Err(Error::Consistency(format!(
            "{image_h}x{image_w} image does not match sample length {}",
            sample.len()
        )));
    }
    Ok(TiledImage {
        tile_rows: 1,
        tile_cols: 1,
        tile_h: image_h,
        tile_w: image_w,
        pixels: sample.iter().map(|&v| quantize(v)).collect(),
    })
}

pub fn encode_pgm(image: &TiledImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn write_pgm(image: &TiledImage, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM written by [`write_pgm`] as a single tile.
pub fn read_pgm(path: &Path) -> Result<TiledImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() != w * h {
        return Err(bad(&format!(
            "expected {} pixel bytes, found {}",
            w * h,
            data.len()
        )));
    }
    Ok(TiledImage {
        tile_rows: 1,
        tile_cols: 1,
        tile_h: h,
        tile_w: w,
        pixels: data.to_vec(),
    })
}
