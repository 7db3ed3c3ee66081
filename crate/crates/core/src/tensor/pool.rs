use super::Tensor;
use crate::error::{Error, Result};

/// 2x2 max pooling with stride 2.
///
/// Returns the pooled tensor and, for every output cell, the flat input index
/// that won. Ties go to the first cell in row-major order, so it alone
/// receives the gradient.
pub fn maxpool2x2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [b, c, h, w] = input.dims4("maxpool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatialDim { h, w });
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[b, c, ho, wo], out)?, argmax))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_block_max() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn ties_go_to_first_in_row_major_order() {
        let x = Tensor::full(&[1, 1, 2, 2], 5.0);
        let (y, idx) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn odd_dims_rejected() {
        let x = Tensor::zeros(&[1, 1, 3, 4]);
        assert!(matches!(maxpool2x2_forward(&x), Err(Error::OddSpatialDim { h: 3, w: 4 })));
    }
}
