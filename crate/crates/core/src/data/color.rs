use serde::{Deserialize, Serialize};

use super::Image;

/// Floor applied to a source channel's standard deviation before dividing by it.
pub const MIN_STD: f64 = 1e-6;

/// Per-channel population mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub fn compute_channel_stats(img: &Image) -> ChannelStats {
    let n = (img.height() * img.width()) as f64;
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for px in img.pixels().chunks(3) {
        for c in 0..3 {
            let v = px[c] as f64;
            sum[c] += v;
            sq[c] += v * v;
        }
    }
    let mut stats = ChannelStats {
        mean: [0.0; 3],
        std: [0.0; 3],
    };
    for c in 0..3 {
        let m = sum[c] / n;
        stats.mean[c] = m;
        stats.std[c] = (sq[c] / n - m * m).max(0.0).sqrt();
    }
    stats
}

/// Maps each channel's mean/std onto `reference` (Reinhard-style in RGB), then clamps to `[0, 1]`.
pub fn color_normalize(img: &Image, reference: &ChannelStats) -> Image {
    let own = compute_channel_stats(img);
    let mut out = img.clone();
    for px in out.pixels_mut().chunks_mut(3) {
        for c in 0..3 {
            let scale = reference.std[c] / own.std[c].max(MIN_STD);
            let v = (px[c] as f64 - own.mean[c]) * scale + reference.mean[c];
            px[c] = v.clamp(0.0, 1.0) as f32;
        }
    }
    out
}
