//! Small deterministic k-means used to check that feature visualizations
//! separate into distinct regions.

/// Lloyd's algorithm on 3-d points with farthest-point initialization.
/// Returns the cluster assignment per point.
pub fn kmeans3(points: &[[f64; 3]], k: usize, iters: usize) -> Vec<usize> {
    assert!(k >= 1 && points.len() >= k);
    let mut centers: Vec<[f64; 3]> = vec![points[0]];
    while centers.len() < k {
        let far = points
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                let da = centers.iter().map(|c| dist2(a, c)).fold(f64::INFINITY, f64::min);
                let db = centers.iter().map(|c| dist2(b, c)).fold(f64::INFINITY, f64::min);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        centers.push(*far.1);
    }
    let mut assign = vec![0usize; points.len()];
    for _ in 0..iters {
        for (i, p) in points.iter().enumerate() {
            assign[i] = centers
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| dist2(p, a).partial_cmp(&dist2(p, b)).unwrap())
                .unwrap()
                .0;
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            for d in 0..3 {
                sums[assign[i]][d] += p[d];
            }
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..3 {
                    centers[c][d] = sums[c][d] / counts[c] as f64;
                }
            }
        }
    }
    assign
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_blobs() {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push([i as f64 * 0.01, 0.0, 0.0]);
            pts.push([5.0 + i as f64 * 0.01, 5.0, 5.0]);
        }
        let assign = kmeans3(&pts, 2, 20);
        for i in (0..20).step_by(2) {
            assert_eq!(assign[i], assign[0]);
            assert_eq!(assign[i + 1], assign[1]);
        }
        assert_ne!(assign[0], assign[1]);
    }
}
