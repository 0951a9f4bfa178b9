use crate::numcore::{Real, Tensor};

/// Fixed 2D sinusoidal encoding of cell positions, `H x W x C`.
///
/// The first `C / 2` channels encode the row, the rest the column. Within an
/// axis, channel pair `m` holds `sin`/`cos` of `(m + 1) * pi * u` where
/// `u = pos / extent` lies in `[0, 1)`. Frequencies stay below the grid's
/// Nyquist rate, so nearby cells always encode to nearby vectors.
pub fn positional_encoding<T: Real>(h: usize, w: usize, c: usize) -> Tensor<T> {
    let row_dims = c / 2;
    let mut out = Tensor::zeros(&[h, w, c]);
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c;
            encode_axis(y, h, &mut data[base..base + row_dims]);
            encode_axis(x, w, &mut data[base + row_dims..base + c]);
        }
    }
    out
}

fn encode_axis<T: Real>(pos: usize, extent: usize, out: &mut [T]) {
    let u = pos as f64 / extent as f64;
    for (i, v) in out.iter_mut().enumerate() {
        let freq = (i / 2 + 1) as f64 * std::f64::consts::PI;
        let angle = freq * u;
        *v = T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_cells_get_distinct_codes() {
        let pe = positional_encoding::<f64>(8, 8, 8);
        let rows: Vec<&[f64]> = pe.data().chunks(8).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 1e-6, "cells {i} and {j} collide");
            }
        }
    }

    #[test]
    fn adjacent_cells_are_closer_than_distant_ones() {
        let pe = positional_encoding::<f64>(16, 16, 16);
        let code = |y: usize, x: usize| pe.data()[(y * 16 + x) * 16..(y * 16 + x + 1) * 16].to_vec();
        let dist = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum() };
        let origin = code(5, 5);
        let near = dist(&origin, &code(5, 6));
        for x in 7..16 {
            assert!(near < dist(&origin, &code(5, x)), "col {x}");
        }
    }
}
