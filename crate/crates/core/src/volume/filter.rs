use ndarray::{Array3, Axis};

/// Normalized 1D Gaussian taps truncated at `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur; values beyond the volume are treated as zero.
/// `sigma <= 0` returns the input unchanged.
pub fn gaussian_smooth(input: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return input.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut current = input.clone();
    let mut line = Vec::new();
    for axis in 0..3 {
        let mut out = Array3::<f64>::zeros(current.dim());
        for (src, mut dst) in current
            .lanes(Axis(axis))
            .into_iter()
            .zip(out.lanes_mut(Axis(axis)))
        {
            line.clear();
            line.extend(src.iter().copied());
            let n = line.len() as isize;
            for i in 0..n {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let j = i + k as isize - radius;
                    if (0..n).contains(&j) {
                        acc += w * line[j as usize];
                    }
                }
                dst[i as usize] = acc;
            }
        }
        current = out;
    }
    current
}
