use nalgebra::DMatrix;
use rand::Rng;

/// Lloyd's k-means with k-means++ seeding. Returns one cluster label per row.
///
/// Ties go to the lowest cluster index, so identical rows all land in one
/// cluster and the others stay empty.
pub fn kmeans<R: Rng>(data: &DMatrix<f64>, k: usize, max_iters: usize, rng: &mut R) -> Vec<usize> {
    let n = data.nrows();
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let dist2 = |i: usize, c: &[f64]| -> f64 {
        data.row(i).iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum()
    };

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(data.row(rng.random_range(0..n)).iter().copied().collect());
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c: Vec<f64> = data.row(pick).iter().copied().collect();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(i, &c));
        }
        centers.push(c);
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = dist2(i, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = data.ncols();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(data.row(i).iter()) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    labels
}
