use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// Spatiotemporal positional encoding, added once after patch embedding.
///
/// Channels `[0, D/2)` hold a 1-D sinusoidal encoding of the timestamp
/// (interleaved sin/cos); channels `[D/2, D)` hold a 2-D sin-cos grid
/// encoding with `D/4` channels per spatial axis (all sines, then all
/// cosines per axis).
pub fn positional_encoding<E: Element>(t: usize, np: usize, d: usize) -> Result<Tensor<E>> {
    if d % 4 != 0 {
        return Err(Error::dim(format!(
            "positional encoding needs D divisible by 4, got {d}"
        )));
    }
    let d_t = d / 2;
    let d_axis = d / 4;
    let temporal: Vec<Vec<f64>> = (0..t).map(|ti| sincos_interleaved(ti as f64, d_t)).collect();
    let axis: Vec<Vec<f64>> = (0..np).map(|g| sincos_concat(g as f64, d_axis)).collect();

    let mut out = Tensor::zeros(&[t, np, np, d]);
    let od = out.data_mut();
    for ti in 0..t {
        for x in 0..np {
            for y in 0..np {
                let base = ((ti * np + x) * np + y) * d;
                for (c, &v) in temporal[ti].iter().enumerate() {
                    od[base + c] = E::from_f64(v);
                }
                for (c, &v) in axis[x].iter().enumerate() {
                    od[base + d_t + c] = E::from_f64(v);
                }
                for (c, &v) in axis[y].iter().enumerate() {
                    od[base + d_t + d_axis + c] = E::from_f64(v);
                }
            }
        }
    }
    Ok(out)
}

/// Transformer-style interleaved encoding: channel 2i is
/// `sin(pos·ω_i)`, channel 2i+1 is `cos(pos·ω_i)`.
fn sincos_interleaved(pos: f64, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    let half = d / 2;
    for i in 0..half {
        let omega = 10000f64.powf(-2.0 * i as f64 / d as f64);
        v[2 * i] = (pos * omega).sin();
        v[2 * i + 1] = (pos * omega).cos();
    }
    v
}

/// Grid-style concatenated encoding: the first half of the channels are
/// sines, the rest cosines, sharing the frequency ladder.
fn sincos_concat(pos: f64, d: usize) -> Vec<f64> {
    let n_sin = d - d / 2;
    let n_cos = d / 2;
    let mut v = vec![0.0; d];
    for i in 0..n_sin {
        let omega = 10000f64.powf(-(i as f64) / n_sin as f64);
        v[i] = (pos * omega).sin();
    }
    for i in 0..n_cos {
        let omega = 10000f64.powf(-(i as f64) / n_sin as f64);
        v[n_sin + i] = (pos * omega).cos();
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_multiple_of_four() {
        assert!(positional_encoding::<f64>(2, 2, 6).is_err());
    }

    #[test]
    fn shape_is_grid_by_channels() {
        let pe = positional_encoding::<f64>(3, 4, 8).unwrap();
        assert_eq!(pe.shape(), &[3, 4, 4, 8]);
    }

    #[test]
    fn t0_temporal_half_is_zero_sin_one_cos() {
        let d = 16;
        let pe = positional_encoding::<f64>(2, 2, d).unwrap();
        // token (t=0, x=0, y=0): temporal channels alternate sin(0)=0, cos(0)=1
        for i in 0..d / 4 {
            assert_eq!(pe.data()[2 * i], 0.0);
            assert_eq!(pe.data()[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn all_grid_encodings_pairwise_distinct_up_to_16() {
        for (t, np) in [(16, 4), (4, 16), (8, 8)] {
            let d = 16;
            let pe = positional_encoding::<f64>(t, np, d).unwrap();
            let n = t * np * np;
            let mut min_dist = f64::INFINITY;
            for a in 0..n {
                for b in (a + 1)..n {
                    let mut dist = 0.0;
                    for c in 0..d {
                        let diff = pe.data()[a * d + c] - pe.data()[b * d + c];
                        dist += diff * diff;
                    }
                    min_dist = min_dist.min(dist.sqrt());
                }
            }
            assert!(min_dist > 0.0, "encodings collide for T={t}, Np={np}");
        }
    }
}
