use super::ScoreRecord;
use crate::data::ImageBuffer;
use crate::error::{Error, Result};

/// Lowest to highest quartile: blue, green, yellow, red.
pub const QUARTILE_COLORS: [[u8; 3]; 4] = [[0, 0, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]];

/// Quartile index per weight: `floor(4 * #{j : w_j < w_i} / N)`. Ties share
/// the lower bin, so a constant vector maps entirely to bin 0.
pub fn quartile_bins(weights: &[f32]) -> Vec<usize> {
    let n = weights.len();
    weights
        .iter()
        .map(|&w| 4 * weights.iter().filter(|&&v| v < w).count() / n.max(1))
        .collect()
}

/// Paint each patch tile with its quartile colour. The canvas covers the
/// tiled region (up to the furthest patch edge); uncovered pixels are black.
pub fn render_weight_map(record: &ScoreRecord) -> Result<ImageBuffer> {
    if record.coords.is_empty() || record.coords.len() != record.weights.len() {
        return Err(Error::InvalidArgument(format!(
            "record `{}` has {} coordinates for {} weights",
            record.image_id,
            record.coords.len(),
            record.weights.len()
        )));
    }
    let p = record.patch_size;
    let height = record.coords.iter().map(|c| c.y + p).max().unwrap_or(0);
    let width = record.coords.iter().map(|c| c.x + p).max().unwrap_or(0);
    let mut img = ImageBuffer::filled(width, height, [0, 0, 0]);
    for (c, bin) in record.coords.iter().zip(quartile_bins(&record.weights)) {
        for y in c.y..c.y + p {
            for x in c.x..c.x + p {
                img.set_pixel(y, x, QUARTILE_COLORS[bin]);
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grid_coords;

    fn record(weights: Vec<f32>, side: usize) -> ScoreRecord {
        ScoreRecord {
            image_id: "x".into(),
            quality: 0.0,
            scores: vec![0.0; weights.len()],
            weights,
            coords: grid_coords(side, side, 32),
            patch_size: 32,
        }
    }

    #[test]
    fn uniform_weights_are_one_colour() {
        let img = render_weight_map(&record(vec![0.3; 9], 100)).unwrap();
        assert_eq!((img.width(), img.height()), (96, 96));
        assert!(img.pixels().chunks(3).all(|p| p == QUARTILE_COLORS[0]));
    }

    #[test]
    fn four_weights_four_colours() {
        let img = render_weight_map(&record(vec![1.0, 2.0, 3.0, 4.0], 64)).unwrap();
        assert_eq!(img.pixel(0, 0), QUARTILE_COLORS[0]);
        assert_eq!(img.pixel(0, 40), QUARTILE_COLORS[1]);
        assert_eq!(img.pixel(40, 0), QUARTILE_COLORS[2]);
        assert_eq!(img.pixel(63, 63), QUARTILE_COLORS[3]);
    }

    #[test]
    fn missing_coordinates_are_rejected() {
        let mut r = record(vec![1.0], 32);
        r.coords.clear();
        assert!(render_weight_map(&r).is_err());
    }
}
