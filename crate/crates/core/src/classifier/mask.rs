/// Boolean (height, width) mask, true where the Euclidean distance from the
/// image centre ((H-1)/2, (W-1)/2) is at most `radius`. Row-major.
pub fn center_mask(height: usize, width: usize, radius: f64) -> Vec<bool> {
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            out.push(dy * dy + dx * dx <= r2);
        }
    }
    out
}

/// Expands a spatial mask to every channel of a (C, H, W) tensor; `None`
/// means no masking.
pub fn channel_mask(shape: (usize, usize, usize), radius: Option<f64>) -> Option<Vec<bool>> {
    let (c, h, w) = shape;
    let spatial = center_mask(h, w, radius?);
    Some((0..c).flat_map(|_| spatial.iter().copied()).collect())
}

/// Squared L2 distance between two flat tensors restricted to `mask`.
pub fn masked_squared_error(a: &[f64], b: &[f64], mask: Option<&[bool]>) -> f64 {
    match mask {
        None => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        Some(m) => a
            .iter()
            .zip(b)
            .zip(m)
            .filter(|(_, keep)| **keep)
            .map(|((x, y), _)| (x - y) * (x - y))
            .sum(),
    }
}
