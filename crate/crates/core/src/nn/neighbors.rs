//! Brute-force neighbor queries. Ties are broken by the lower point index.

use crate::geometry::{dist_sq, Vec3};
use crate::scalar::Scalar;

/// The `k` nearest `data` points for each query, as `(index, distance)` sorted by distance.
pub fn knn<T: Scalar>(queries: &[Vec3<T>], data: &[Vec3<T>], k: usize) -> Vec<Vec<(usize, T)>> {
    let k = k.min(data.len());
    queries
        .iter()
        .map(|q| {
            let mut d: Vec<(usize, T)> = data.iter().enumerate().map(|(j, p)| (j, dist_sq(*q, *p))).collect();
            d.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
            d.truncate(k);
            d.into_iter().map(|(j, s)| (j, s.sqrt())).collect()
        })
        .collect()
}

/// Up to `k` nearest points within `radius` of each point (the point itself included).
pub fn ball_query<T: Scalar>(points: &[Vec3<T>], radius: T, k: usize) -> Vec<Vec<usize>> {
    let r2 = radius * radius;
    knn(points, points, k)
        .into_iter()
        .enumerate()
        .map(|(i, nb)| {
            let mut v: Vec<usize> = nb.into_iter().filter(|(_, d)| *d * *d <= r2).map(|(j, _)| j).collect();
            if v.is_empty() {
                v.push(i);
            }
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_prefer_lower_index() {
        let data = [[1.0f64, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let nn = knn(&[[0.0, 0.0, 0.0]], &data, 1);
        assert_eq!(nn[0][0].0, 0);
    }

    #[test]
    fn ball_query_respects_radius() {
        let pts = [[0.0f64, 0.0, 0.0], [0.4, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let b = ball_query(&pts, 0.5, 8);
        assert_eq!(b[0], vec![0, 1]);
        assert_eq!(b[2], vec![2]);
    }
}
