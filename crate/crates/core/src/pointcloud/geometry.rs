use ndarray::{Array2, Array3, ArrayView1};

use super::{PatchSet, PointCloud};
use crate::error::{Error, Result};

#[inline]
fn dist2(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling.
///
/// The first pick is `start_index`; each later pick maximizes its minimum
/// distance to the points already picked. Ties go to the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m > n {
        return Err(Error::Size {
            requested: m,
            available: n,
        });
    }
    if m == 0 {
        return Err(Error::validation("farthest point sampling needs m >= 1"));
    }
    if start_index >= n {
        return Err(Error::validation(format!(
            "start index {start_index} out of range for {n} points"
        )));
    }
    let pts = &cloud.points;
    let mut picked = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start_index;
    loop {
        picked.push(current);
        taken[current] = true;
        if picked.len() == m {
            break;
        }
        let c = pts.row(current);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(pts.row(i), c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(picked)
}

/// Groups the `k` nearest points (center included) around every center.
pub fn knn_group(cloud: &PointCloud, center_indices: &[usize], k: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if k > n {
        return Err(Error::Size {
            requested: k,
            available: n,
        });
    }
    if k == 0 {
        return Err(Error::validation("knn grouping needs k >= 1"));
    }
    let mut seen = vec![false; n];
    for &c in center_indices {
        if c >= n {
            return Err(Error::validation(format!("center index {c} out of range")));
        }
        if std::mem::replace(&mut seen[c], true) {
            return Err(Error::validation(format!("duplicate center index {c}")));
        }
    }
    let m = center_indices.len();
    let pts = &cloud.points;
    let mut centers = Array2::zeros((m, 3));
    let mut groups = Array3::zeros((m, k, 3));
    let mut neighbor_indices = Array2::zeros((m, k));
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (g, &ci) in center_indices.iter().enumerate() {
        let c = pts.row(ci);
        centers.row_mut(g).assign(&c);
        order.clear();
        order.extend((0..n).map(|i| (dist2(pts.row(i), c), i)));
        // (distance, index) ordering gives the lowest-index tie-break.
        order.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
        let nearest = &mut order[..k];
        nearest.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        for (j, &(_, idx)) in nearest.iter().enumerate() {
            neighbor_indices[[g, j]] = idx;
            for d in 0..3 {
                groups[[g, j, d]] = pts[[idx, d]] - c[d];
            }
        }
    }
    Ok(PatchSet {
        centers,
        groups,
        center_indices: center_indices.to_vec(),
        neighbor_indices,
        source_id: cloud.id.clone(),
    })
}

/// FPS centers followed by KNN grouping.
pub fn patchify(cloud: &PointCloud, num_patches: usize, patch_points: usize, start_index: usize) -> Result<PatchSet> {
    let centers = farthest_point_sample(cloud, num_patches, start_index)?;
    knn_group(cloud, &centers, patch_points)
}
