//! Density-based clustering over arbitrary feature rows.
//!
//! A point is a core point when at least `min_points` rows (itself included)
//! lie within `eps`. Clusters are the connected components of core points
//! under the ε-relation; a non-core point within `eps` of a core point joins
//! the cluster of its nearest core point; all other points are noise.

use ndarray::ArrayView2;

use crate::scalar::Scalar;

/// Cluster label per row; `None` is noise. Labels are numbered by smallest member row.
pub fn dbscan<T: Scalar>(features: ArrayView2<'_, T>, eps: T, min_points: usize) -> Vec<Option<usize>> {
    let n = features.nrows();
    let eps2 = eps * eps;
    let d2 = |a: usize, b: usize| -> T {
        features
            .row(a)
            .iter()
            .zip(features.row(b).iter())
            .map(|(x, y)| (*x - *y) * (*x - *y))
            .sum()
    };
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| d2(i, j) <= eps2).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_points.max(1)).collect();

    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || label[start].is_some() {
            continue;
        }
        label[start] = Some(next);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if core[q] && label[q].is_none() {
                    label[q] = Some(next);
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let nearest = neighbors[i]
            .iter()
            .filter(|&&j| core[j])
            .min_by(|&&a, &&b| d2(i, a).partial_cmp(&d2(i, b)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        label[i] = nearest.and_then(|&j| label[j]);
    }
    relabel_by_first_member(&label)
}

fn relabel_by_first_member(label: &[Option<usize>]) -> Vec<Option<usize>> {
    let mut map = std::collections::HashMap::new();
    label
        .iter()
        .map(|l| {
            l.map(|l| {
                let k = map.len();
                *map.entry(l).or_insert(k)
            })
        })
        .collect()
}
