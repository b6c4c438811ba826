//! RGB/HSV conversion helpers shared by the generator and augmentation.

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

/// Rotate every pixel's hue by `angle` (in [0,1) turns), preserving
/// saturation and value. Grayscale pixels are unchanged.
pub fn rotate_hue(image: &crate::tensor::Tensor, angle: f64) -> crate::tensor::Tensor {
    let mut out = image.clone();
    for i in 0..image.h * image.w {
        let px = &image.data[i * 3..(i + 1) * 3];
        let [h, s, v] = rgb_to_hsv(px[0], px[1], px[2]);
        let rgb = hsv_to_rgb(h + angle, s, v);
        out.data[i * 3..(i + 1) * 3].copy_from_slice(&rgb);
    }
    out
}
