use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CdfDeviation, EvalError};
use crate::datasets::LabeledImageDataset;
use crate::diffcore::Tensor;
use crate::divergences::{sample_prior, PriorKind};
use crate::models::WaeModel;

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<usize, EvalError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    let mut count = 0;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
        count += 1;
    }
    w.flush()?;
    Ok(count)
}

fn latent_header(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("z{i}")).collect()
}

fn tensor_rows(t: &Tensor) -> impl Iterator<Item = Vec<f64>> + '_ {
    t.row_iter().map(|r| r.to_vec())
}

/// Writes `posterior.csv` (`n` aggregated-posterior draws for random dataset
/// images), `prior.csv` (`n` prior draws) and `means.csv` (encoder mean and
/// factor indices of every image) into `dir`. Returns the written paths.
pub fn latent_scatter_export(
    model: &WaeModel,
    data: &LabeledImageDataset,
    n: usize,
    dir: impl AsRef<Path>,
    rng: &mut impl Rng,
) -> Result<Vec<PathBuf>, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty("latent_scatter_export"));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let d = model.spec.latent_dim;

    let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.len())).collect();
    let posterior = if picks.is_empty() {
        Tensor::zeros(&[0, d])
    } else {
        model.sample_posterior(&data.batch(&picks), rng)?
    };
    let prior = sample_prior(&model.spec.prior_spec(), n, rng);
    let features = super::encoder_features(model, data)?;

    let paths = ["posterior.csv", "prior.csv", "means.csv"].map(|f| dir.join(f));
    write_rows(&paths[0], &latent_header(d), tensor_rows(&posterior))?;
    write_rows(&paths[1], &latent_header(d), tensor_rows(&prior))?;
    let mut header = latent_header(d);
    header.extend(data.grid.names.iter().cloned());
    let rows = (0..data.len()).map(|i| {
        let mut row = features.row(i).to_vec();
        row.extend(data.factors_of(i).iter().map(|&f| f as f64));
        row
    });
    write_rows(&paths[2], &header, rows)?;
    Ok(paths.to_vec())
}

/// Writes a CDF deviation curve as `t,empirical,theoretical,deviation`.
pub fn write_cdf_csv(cdf: &CdfDeviation, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let header = ["t", "empirical", "theoretical", "deviation"].map(String::from);
    let rows = (0..cdf.grid.len()).map(|i| vec![cdf.grid[i], cdf.empirical[i], cdf.theoretical[i], cdf.deviation[i]]);
    write_rows(path.as_ref(), &header, rows)?;
    Ok(())
}

/// Latent range covered by decoder grids: the box `[−1, 1]` for the uniform
/// prior, `±2` standard deviations for the Gaussian prior.
pub fn prior_grid_range(kind: PriorKind) -> (f64, f64) {
    match kind {
        PriorKind::UniformBox => (-1.0, 1.0),
        PriorKind::StandardGaussian => (-2.0, 2.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridExport {
    pub resolution: usize,
    pub width: usize,
    pub height: usize,
    /// Mean decoder output of each tile, row-major from the top-left tile.
    pub tile_means: Vec<f64>,
}

/// Tiles decoder outputs over a `resolution × resolution` grid of the prior's
/// support into an 8-bit grayscale PNG. Tile columns follow `z0` left to right
/// and tile rows follow `z1` top to bottom from its largest value.
pub fn decoder_grid_export(
    model: &WaeModel,
    resolution: usize,
    path: impl AsRef<Path>,
) -> Result<GridExport, EvalError> {
    let spec = &model.spec;
    if spec.latent_dim != 2 {
        return Err(EvalError::Dimension {
            what: "decoder_grid_export",
            expected: 2,
            got: spec.latent_dim,
        });
    }
    if resolution == 0 {
        return Err(EvalError::Empty("decoder_grid_export"));
    }
    let (lo, hi) = prior_grid_range(spec.prior);
    let at = |i: usize| {
        if resolution == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (resolution - 1) as f64
        }
    };
    let mut z = Vec::with_capacity(resolution * resolution * 2);
    for r in 0..resolution {
        for c in 0..resolution {
            z.extend([at(c), at(resolution - 1 - r)]);
        }
    }
    let probs = model.decode_probs(&Tensor::new(&[resolution * resolution, 2], z).map_err(crate::models::ModelError::from)?)?;

    let (tw, th) = (spec.image_width, spec.image_height);
    let (width, height) = (tw * resolution, th * resolution);
    let mut pixels = vec![0u8; width * height];
    for (t, tile) in probs.row_iter().enumerate() {
        let (tr, tc) = (t / resolution, t % resolution);
        for y in 0..th {
            for x in 0..tw {
                let v = (tile[y * tw + x] * 255.0).round().clamp(0.0, 255.0) as u8;
                pixels[(tr * th + y) * width + tc * tw + x] = v;
            }
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&pixels)?;
    writer.finish()?;

    Ok(GridExport {
        resolution,
        width,
        height,
        tile_means: probs.row_iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect(),
    })
}
