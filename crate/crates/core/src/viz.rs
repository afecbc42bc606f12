//! Dense-feature visualization: top-3 PCA projection of patch features
//! mapped to RGB.

use crate::error::{Error, Result};
use crate::img::Image;
use crate::tensor::Tensor;

/// Top-3 PCA of the rows of an n×d matrix by orthogonalized power
/// iteration on the d×d covariance (100 iterations, tolerance 1e-8, f64
/// internally). Sign convention: each component's largest-magnitude
/// coordinate is positive. Returns the n×3 projection and the three
/// explained variances.
pub fn pca3(dense: &Tensor) -> Result<(Tensor, [f64; 3])> {
    let (n, d) = dense.dims2()?;
    if n < 3 {
        return Err(Error::Input(format!("pca3 needs at least 3 rows, got {n}")));
    }
    // Center rows.
    let mut means = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            means[j] += dense.data()[i * d + j] as f64;
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<f64> = (0..n * d)
        .map(|idx| dense.data()[idx] as f64 - means[idx % d])
        .collect();
    // Covariance, d×d.
    let mut cov = vec![0.0f64; d * d];
    for row in centered.chunks(d) {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
        }
    }

    // Orthogonalized power iteration for the top 3 components.
    let k = 3.min(d);
    let mut vectors = vec![0.0f64; k * d];
    for (c, v) in vectors.chunks_mut(d).enumerate() {
        // Deterministic pseudo-random start (hash-derived, full rank).
        for (j, x) in v.iter_mut().enumerate() {
            let h = crate::rng::pixel_hash(0x7063_6133, c as u64, j as u64);
            *x = (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        }
    }
    let mut eigenvalues = [0.0f64; 3];
    let mut deflated = [false; 3];
    for _iter in 0..100 {
        let mut max_vec_delta = 0.0f64;
        for c in 0..k {
            if deflated[c] {
                continue;
            }
            let (head, tail) = vectors.split_at_mut(c * d);
            let v = &mut tail[..d];
            // Multiply by the covariance.
            let mut w = vec![0.0f64; d];
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += cov[i * d + j] * v[j];
                }
                w[i] = acc;
            }
            let norm_before = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            // Orthogonalize against previous components.
            for p in 0..c {
                let prev = &head[p * d..(p + 1) * d];
                let dot: f64 = w.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (wi, pi) in w.iter_mut().zip(prev) {
                    *wi -= dot * pi;
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            // The residual is cancellation noise once the data's column
            // space is exhausted; such a direction carries no variance.
            if norm <= 1e-12 * norm_before.max(1e-300) || norm_before == 0.0 {
                deflated[c] = true;
                eigenvalues[c] = 0.0;
                for x in v.iter_mut() {
                    *x = 0.0;
                }
                continue;
            }
            let mut delta = 0.0f64;
            for (vi, wi) in v.iter_mut().zip(&w) {
                let new = wi / norm;
                delta = delta.max((new - *vi).abs());
                *vi = new;
            }
            max_vec_delta = max_vec_delta.max(delta);
            // Rayleigh quotient vᵀ C v.
            let mut lambda = 0.0;
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += cov[i * d + j] * v[j];
                }
                lambda += v[i] * acc;
            }
            eigenvalues[c] = lambda;
        }
        if max_vec_delta < 1e-8 {
            break;
        }
    }

    // Sign convention.
    for c in 0..k {
        let v = &mut vectors[c * d..(c + 1) * d];
        let argmax = v
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.abs().partial_cmp(&b.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if v[argmax] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }

    let mut projected = vec![0.0f32; n * 3];
    for (i, row) in centered.chunks(d).enumerate() {
        for c in 0..k {
            let v = &vectors[c * d..(c + 1) * d];
            projected[i * 3 + c] = row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() as f32;
        }
    }
    Ok((Tensor::new(vec![n, 3], projected)?, eigenvalues))
}

/// Map an n×3 projection onto a grid image, min-max normalizing each
/// channel over the image.
pub fn projection_to_rgb(projection: &Tensor, grid: (usize, usize)) -> Result<Image> {
    let (n, three) = projection.dims2()?;
    if three != 3 || grid.0 * grid.1 != n {
        return Err(Error::Input(format!(
            "projection {n}x{three} does not match grid {grid:?}"
        )));
    }
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for row in projection.data().chunks(3) {
        for c in 0..3 {
            lo[c] = lo[c].min(row[c]);
            hi[c] = hi[c].max(row[c]);
        }
    }
    let mut img = Image::new(grid.1, grid.0);
    for (i, row) in projection.data().chunks(3).enumerate() {
        let mut rgb = [0u8; 3];
        for c in 0..3 {
            let span = (hi[c] - lo[c]).max(1e-12);
            rgb[c] = (((row[c] - lo[c]) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        img.set(i % grid.1, i / grid.1, rgb);
    }
    Ok(img)
}

/// Nearest-neighbor upscale for viewing patch-grid images.
pub fn upscale_nearest(img: &Image, factor: usize) -> Image {
    let mut out = Image::new(img.width * factor, img.height * factor);
    for y in 0..out.height {
        for x in 0..out.width {
            out.set(x, y, img.get(x / factor, y / factor));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_dim_centered_identity_covariance_is_signed_permutation() {
        // Points along coordinate axes with distinct variances: components
        // recover the axes in variance order.
        let mut rows = Vec::new();
        for i in 0..12 {
            let t = (i as f32 - 5.5) / 3.0;
            rows.push(vec![3.0 * t, 0.0, 0.0]);
            rows.push(vec![0.0, 2.0 * t, 0.0]);
            rows.push(vec![0.0, 0.0, 1.0 * t]);
        }
        let dense = Tensor::from_rows(&rows).unwrap();
        let (proj, vars) = pca3(&dense).unwrap();
        assert!(vars[0] > vars[1] && vars[1] > vars[2]);
        // Column c of the projection must match input column c up to sign.
        for c in 0..3 {
            for (i, row) in rows.iter().enumerate() {
                let got = proj.data()[i * 3 + c].abs();
                let want = row[c].abs();
                assert!((got - want).abs() < 1e-4, "c{c} i{i}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn rank_one_data_has_negligible_trailing_variance() {
        let dir = [0.6f32, -0.2, 0.75, 0.1];
        let rows: Vec<Vec<f32>> = (0..10)
            .map(|i| dir.iter().map(|&d| d * (i as f32 - 4.5)).collect())
            .collect();
        let dense = Tensor::from_rows(&rows).unwrap();
        let (_, vars) = pca3(&dense).unwrap();
        assert!(vars[0] > 1.0);
        assert!(vars[1].abs() < 1e-8 && vars[2].abs() < 1e-8, "{vars:?}");
    }

    #[test]
    fn too_few_rows_rejected() {
        let dense = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert!(pca3(&dense).is_err());
    }

    #[test]
    fn rgb_mapping_spans_full_range() {
        let proj = Tensor::from_rows(&[
            vec![0.0, -1.0, 5.0],
            vec![1.0, 1.0, 6.0],
            vec![0.5, 0.0, 5.5],
            vec![0.25, -0.5, 5.25],
        ])
        .unwrap();
        let img = projection_to_rgb(&proj, (2, 2)).unwrap();
        assert_eq!(img.get(0, 0), [0, 0, 0]);
        assert_eq!(img.get(1, 0), [255, 255, 255]);
    }
}
