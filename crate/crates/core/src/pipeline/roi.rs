//! Box pooling over feature-map cells.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coordinate-wise union of two normalized boxes.
pub fn union_box(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]
}

/// Flat indices of the `h x w` cells whose centres lie in the box (edges
/// included). Falls back to the cell nearest the box centre.
pub fn roi_cells(b: &[f64; 4], h: usize, w: usize) -> Vec<usize> {
    let mut cells = Vec::new();
    for m in 0..h {
        let cy = (m as f64 + 0.5) / h as f64;
        if cy < b[1] || cy > b[3] {
            continue;
        }
        for l in 0..w {
            let cx = (l as f64 + 0.5) / w as f64;
            if cx >= b[0] && cx <= b[2] {
                cells.push(m * w + l);
            }
        }
    }
    if cells.is_empty() {
        let (ex, ey) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
        let l = ((ex * w as f64).floor() as usize).min(w - 1);
        let m = ((ey * h as f64).floor() as usize).min(h - 1);
        cells.push(m * w + l);
    }
    cells
}

fn dims3(f: &Tensor) -> Result<(usize, usize, usize)> {
    match *f.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("feature map must be [C, H, W], got {s:?}"))),
    }
}

/// Mean feature vector over [`roi_cells`].
pub fn roi_pool(f: &Tensor, b: &[f64; 4]) -> Result<Vec<f64>> {
    let (c, h, w) = dims3(f)?;
    let cells = roi_cells(b, h, w);
    let scale = 1.0 / cells.len() as f64;
    Ok((0..c)
        .map(|ch| {
            let plane = &f.data()[ch * h * w..(ch + 1) * h * w];
            cells.iter().map(|&i| plane[i]).sum::<f64>() * scale
        })
        .collect())
}

/// Pools every box into one row of an `[n x C]` matrix.
pub fn roi_pool_batch(f: &Tensor, boxes: &[[f64; 4]]) -> Result<Tensor> {
    let (c, _, _) = dims3(f)?;
    let mut rows = Vec::with_capacity(boxes.len() * c);
    for b in boxes {
        rows.extend(roi_pool(f, b)?);
    }
    Tensor::new(vec![boxes.len(), c], rows)
}

/// Scatters `[n x C]` row gradients back onto a feature map of shape `shape`.
pub fn roi_pool_batch_backward(shape: &[usize], boxes: &[[f64; 4]], grad: &Tensor, into: &mut Tensor) -> Result<()> {
    let (c, h, w) = match *shape {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Shape("roi backward shape".into())),
    };
    if into.shape() != shape || grad.shape() != [boxes.len(), c] {
        return Err(Error::Shape("roi backward gradient shape".into()));
    }
    let out = into.data_mut();
    for (r, b) in boxes.iter().enumerate() {
        let cells = roi_cells(b, h, w);
        let scale = 1.0 / cells.len() as f64;
        for (ch, g) in grad.row_slice(r).iter().enumerate() {
            let share = g * scale;
            for &i in &cells {
                out[ch * h * w + i] += share;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::init_uniform;

    #[test]
    fn union_examples() {
        assert_eq!(union_box(&[0.0, 0.0, 0.2, 0.2], &[0.5, 0.5, 0.8, 0.8]), [0.0, 0.0, 0.8, 0.8]);
        let b = [0.1, 0.3, 0.4, 0.9];
        assert_eq!(union_box(&b, &b), b);
        let c = [0.2, 0.1, 0.6, 0.5];
        assert_eq!(union_box(&b, &c), union_box(&c, &b));
    }

    #[test]
    fn constant_map_and_global_pool() {
        let f = Tensor::full(&[3, 8, 8], 2.5);
        assert_eq!(roi_pool(&f, &[0.3, 0.2, 0.35, 0.27]).unwrap(), vec![2.5; 3]);
        let f = init_uniform(1, "f", &[2, 8, 8], 1).unwrap();
        let all = roi_pool(&f, &[0.0, 0.0, 1.0, 1.0]).unwrap();
        for ch in 0..2 {
            let mean = f.data()[ch * 64..(ch + 1) * 64].iter().sum::<f64>() / 64.0;
            assert!((all[ch] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_a_scalar_loop() {
        let f = init_uniform(2, "f", &[4, 8, 8], 1).unwrap();
        let b = [0.2, 0.1, 0.7, 0.55];
        let got = roi_pool(&f, &b).unwrap();
        for ch in 0..4 {
            let (mut sum, mut n) = (0.0, 0usize);
            for m in 0..8 {
                for l in 0..8 {
                    let (cx, cy) = ((l as f64 + 0.5) / 8.0, (m as f64 + 0.5) / 8.0);
                    if b[0] <= cx && cx <= b[2] && b[1] <= cy && cy <= b[3] {
                        sum += f.data()[ch * 64 + m * 8 + l];
                        n += 1;
                    }
                }
            }
            assert!((got[ch] - sum / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn tiny_box_uses_nearest_cell() {
        let cells = roi_cells(&[0.26, 0.51, 0.27, 0.52], 8, 8);
        assert_eq!(cells, vec![4 * 8 + 2]);
        let corner = roi_cells(&[0.999, 0.999, 1.0, 1.0], 8, 8);
        assert_eq!(corner, vec![63]);
    }

    #[test]
    fn backward_is_the_adjoint() {
        let f = init_uniform(3, "f", &[2, 4, 4], 1).unwrap();
        let boxes = [[0.0, 0.0, 0.6, 0.6], [0.4, 0.1, 1.0, 0.9]];
        let g = init_uniform(4, "g", &[2, 2], 1).unwrap();
        let pooled = roi_pool_batch(&f, &boxes).unwrap();
        let lhs: f64 = pooled.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let mut back = Tensor::zeros(&[2, 4, 4]);
        roi_pool_batch_backward(&[2, 4, 4], &boxes, &g, &mut back).unwrap();
        let rhs: f64 = back.data().iter().zip(f.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
