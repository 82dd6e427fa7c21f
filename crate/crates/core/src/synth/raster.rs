use super::{SceneRecord, Shape};
use crate::tensor::Tensor;

pub const BACKGROUND: f64 = 0.5;

/// Paints the scene into a `3 x H x W` image. Later objects cover earlier ones.
///
/// A pixel belongs to a shape when its centre does; rectangles use half-open
/// extents so an integer `w x h` box covers exactly `w * h` pixels.
pub fn rasterize(scene: &SceneRecord) -> Tensor {
    let (w, h) = (scene.width as usize, scene.height as usize);
    let mut img = Tensor::full(&[3, h, w], BACKGROUND);
    let plane = w * h;
    let data = img.data_mut();
    for obj in &scene.objects {
        let b = obj.bbox;
        let (cx, cy) = b.center();
        let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
        let ys = (b.y1.floor().max(0.0) as usize)..(b.y2.ceil().min(h as f64) as usize);
        for py in ys {
            let yc = py as f64 + 0.5;
            let xs = (b.x1.floor().max(0.0) as usize)..(b.x2.ceil().min(w as f64) as usize);
            for px in xs {
                let xc = px as f64 + 0.5;
                if !(xc >= b.x1 && xc < b.x2 && yc >= b.y1 && yc < b.y2) {
                    continue;
                }
                let inside = match obj.shape {
                    Shape::Rectangle => true,
                    Shape::Ellipse => {
                        let (dx, dy) = ((xc - cx) / rx, (yc - cy) / ry);
                        dx * dx + dy * dy <= 1.0
                    }
                    // apex at top centre, base along the bottom edge
                    Shape::Triangle => (xc - cx).abs() <= rx * (yc - b.y1) / b.height(),
                };
                if inside {
                    for (c, &v) in obj.color.iter().enumerate() {
                        data[c * plane + py * w + px] = v;
                    }
                }
            }
        }
    }
    img
}
