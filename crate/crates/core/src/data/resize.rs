use super::Image;

/// Bilinear resize with corner-aligned sampling: output corners sample input corners exactly.
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    if out_h == img.height() && out_w == img.width() {
        return img.clone();
    }
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f32) {
        if out == 1 || inp == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let lo = (pos.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let mut pixels = Vec::with_capacity(out_h * out_w * 3);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, out_h, img.height());
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, out_w, img.width());
            for c in 0..3 {
                let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
                let bottom = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image::from_parts(out_h, out_w, pixels)
}
