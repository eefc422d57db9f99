//! Side-by-side match drawings.

use sandesc::image::Image;

pub const INLIER: [f32; 3] = [0.0, 1.0, 0.0];
pub const OUTLIER: [f32; 3] = [1.0, 0.0, 0.0];

fn put(canvas: &mut Image, x: i64, y: i64, color: [f32; 3]) {
    let (w, h) = (canvas.width() as i64, canvas.height() as i64);
    if x < 0 || y < 0 || x >= w || y >= h {
        return;
    }
    let n = (w * h) as usize;
    let i = (y * w + x) as usize;
    let data = canvas.data_mut();
    for (c, v) in color.iter().enumerate() {
        data[c * n + i] = *v;
    }
}

/// Rasterises the segment between two points, one pixel per major-axis step.
pub fn draw_line(canvas: &mut Image, a: (f64, f64), b: (f64, f64), color: [f32; 3]) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        put(canvas, x.round() as i64, y.round() as i64, color);
    }
}

/// Point in the left image, point in the right image, inlier flag.
pub type Segment = ((f64, f64), (f64, f64), bool);

/// `left` and `right` next to each other with one segment per match.
pub fn render_matches(left: &Image, right: &Image, segments: &[Segment]) -> Image {
    let (l, r) = (left.to_rgb(), right.to_rgb());
    let width = l.width() + r.width();
    let height = l.height().max(r.height());
    let mut canvas = Image::from_fn(3, width, height, |c, x, y| {
        if x < l.width() {
            if y < l.height() {
                l.get(c, x, y)
            } else {
                0.0
            }
        } else if y < r.height() {
            r.get(c, x - l.width(), y)
        } else {
            0.0
        }
    });
    let shift = l.width() as f64;
    for &(a, b, inlier) in segments {
        let color = if inlier { INLIER } else { OUTLIER };
        draw_line(&mut canvas, a, (b.0 + shift, b.1), color);
    }
    canvas
}
