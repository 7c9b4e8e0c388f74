use super::{DatasetError, FactorGrid, LabeledImageDataset};

/// Side length of a fading-squares image.
pub const FADING_SIDE: usize = 32;
/// Rows/columns `13..19` hold the grey block.
pub const FADING_BLOCK: std::ops::Range<usize> = 13..19;

/// Colour levels `0, step, 2·step, …, 1` (both ends included).
fn colour_levels(step: f64) -> Vec<f64> {
    let inv = 1.0 / step;
    let n = inv.round();
    if (inv - n).abs() < 1e-9 * n.max(1.0) {
        let n = n as usize;
        (0..=n).map(|k| k as f64 / n as f64).collect()
    } else {
        let n = inv.floor() as usize;
        (0..=n).map(|k| k as f64 * step).collect()
    }
}

/// 32×32 black images with a centred 6×6 block of uniform grey, one image per
/// colour level.
pub fn gen_fading_squares(step: f64) -> Result<LabeledImageDataset, DatasetError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(DatasetError::Config(format!("colour step {step} not in (0, 1]")));
    }
    let levels = colour_levels(step);
    let side = FADING_SIDE;
    let mut pixels = vec![0.0; levels.len() * side * side];
    for (i, &c) in levels.iter().enumerate() {
        let img = &mut pixels[i * side * side..(i + 1) * side * side];
        for r in FADING_BLOCK {
            for col in FADING_BLOCK {
                img[r * side + col] = c;
            }
        }
    }
    let factors = (0..levels.len() as u32).collect();
    let grid = FactorGrid::new(vec!["colour".into()], vec![levels])?;
    LabeledImageDataset::new(side, side, pixels, factors, grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousandth_steps_give_1001_images() {
        let ds = gen_fading_squares(1e-3).unwrap();
        assert_eq!(ds.len(), 1001);
        assert_eq!(ds.grid.intrinsic_dim(), 1);
        assert_eq!(ds.grid.values[0][1000], 1.0);
    }

    #[test]
    fn mean_pixel_is_36c_over_1024() {
        let ds = gen_fading_squares(1e-3).unwrap();
        for i in [0, 1, 250, 777, 1000] {
            let c = ds.grid.values[0][i];
            assert!((ds.mean_pixel(i) - 36.0 * c / 1024.0).abs() < 1e-15);
        }
        assert_eq!(ds.mean_pixel(0), 0.0);
    }

    #[test]
    fn block_is_centred_6x6() {
        let ds = gen_fading_squares(0.25).unwrap();
        assert_eq!(ds.len(), 5);
        for i in 1..ds.len() {
            let img = ds.image(i);
            let nonzero: Vec<usize> = (0..img.len()).filter(|&p| img[p] != 0.0).collect();
            assert_eq!(nonzero.len(), 36);
            for p in nonzero {
                assert!(FADING_BLOCK.contains(&(p / 32)) && FADING_BLOCK.contains(&(p % 32)));
            }
        }
        assert!(ds.image(0).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn rejects_bad_step() {
        assert!(gen_fading_squares(0.0).is_err());
        assert!(gen_fading_squares(1.5).is_err());
    }
}
