//! One-to-one match extraction from score and cost matrices.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Detection `det` continues track slot `track` with `score`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub det: usize,
    pub track: usize,
    pub score: f64,
}

/// Greedy selection in descending score order; ties go to the lower `(k, m)`.
/// Pairs below `threshold` are never selected.
pub fn extract_matches<T: Scalar>(normalized: ArrayView2<'_, T>, threshold: f64) -> Vec<Match> {
    let mut cand: Vec<(f64, usize, usize)> = normalized
        .indexed_iter()
        .map(|((k, m), v)| (v.as_f64(), k, m))
        .filter(|(v, _, _)| *v >= threshold)
        .collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    select(cand.into_iter().map(|(v, k, m)| (k, m, v)), normalized.dim())
        .into_iter()
        .map(|(det, track, score)| Match { det, track, score })
        .collect()
}

fn select(ordered: impl Iterator<Item = (usize, usize, f64)>, dim: (usize, usize)) -> Vec<(usize, usize, f64)> {
    let mut row_used = vec![false; dim.0];
    let mut col_used = vec![false; dim.1];
    let mut out = Vec::new();
    for (k, m, v) in ordered {
        if row_used[k] || col_used[m] {
            continue;
        }
        row_used[k] = true;
        col_used[m] = true;
        out.push((k, m, v));
    }
    out.sort_by_key(|(k, m, _)| (*k, *m));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignMethod {
    Greedy,
    Hungarian,
}

/// Minimum-cost one-to-one assignment over a rectangular cost matrix.
/// Returns `(row, col)` pairs sorted by row; every row is assigned when rows ≤ cols.
pub fn hungarian(cost: ArrayView2<'_, f64>) -> Vec<(usize, usize)> {
    let (r, c) = cost.dim();
    if r == 0 || c == 0 {
        return Vec::new();
    }
    if r > c {
        let mut t: Vec<(usize, usize)> = hungarian(cost.t()).into_iter().map(|(a, b)| (b, a)).collect();
        t.sort();
        return t;
    }
    // potentials formulation, 1-based with a virtual column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; r + 1];
    let mut v = vec![0.0; c + 1];
    let mut p = vec![0usize; c + 1];
    let mut way = vec![0usize; c + 1];
    for i in 1..=r {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; c + 1];
        let mut used = vec![false; c + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=c {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=c {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=c).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    out.sort();
    out
}

/// Greedy ascending-cost selection; ties go to the lower `(row, col)`.
pub fn greedy_assign(cost: ArrayView2<'_, f64>) -> Vec<(usize, usize)> {
    let mut cand: Vec<(f64, usize, usize)> = cost.indexed_iter().map(|((k, m), v)| (*v, k, m)).collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    select(cand.into_iter().map(|(v, k, m)| (k, m, v)), cost.dim())
        .into_iter()
        .map(|(k, m, _)| (k, m))
        .collect()
}

/// Assigns with `method` and drops pairs whose cost exceeds `gate`.
/// The score of a kept pair is `1 / (1 + cost)`.
pub fn assign_gated(cost: ArrayView2<'_, f64>, method: AssignMethod, gate: f64) -> Vec<Match> {
    let big = cost.iter().filter(|v| v.is_finite()).fold(gate, |a, b| a.max(*b)) * 4.0 + 1.0;
    let gated = cost.mapv(|v| if v <= gate { v } else { big });
    let pairs = match method {
        AssignMethod::Greedy => greedy_assign(gated.view()),
        AssignMethod::Hungarian => hungarian(gated.view()),
    };
    pairs
        .into_iter()
        .filter(|&(k, m)| cost[[k, m]] <= gate)
        .map(|(k, m)| Match {
            det: k,
            track: m,
            score: 1.0 / (1.0 + cost[[k, m]]),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn extract_from_near_permutation() {
        let p = array![[0.993, 0.007], [0.007, 0.993]];
        let m = extract_matches(p.view(), 0.5);
        let pairs: Vec<_> = m.iter().map(|x| (x.det, x.track)).collect();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn nothing_above_threshold() {
        let p = array![[0.3, 0.2], [0.1, 0.4]];
        assert!(extract_matches(p.view(), 0.5).is_empty());
    }

    #[test]
    fn two_detections_one_track() {
        let p = array![[0.6], [0.6]];
        let m = extract_matches(p.view(), 0.5);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].det, m[0].track), (0, 0));
    }

    #[test]
    fn hungarian_two_by_two() {
        let c = array![[1.0, 10.0], [10.0, 1.0]];
        assert_eq!(hungarian(c.view()), vec![(0, 0), (1, 1)]);
        assert_eq!(greedy_assign(c.view()), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn hungarian_beats_greedy() {
        let c = array![[1.0, 2.0], [2.0, 100.0]];
        assert_eq!(hungarian(c.view()), vec![(0, 1), (1, 0)]);
        assert_eq!(greedy_assign(c.view()), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn hungarian_rectangular() {
        let c = array![[4.0, 1.0, 3.5], [2.0, 0.0, 5.0]];
        assert_eq!(hungarian(c.view()), vec![(0, 1), (1, 0)]);
        assert_eq!(hungarian(c.t()), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn gate_drops_far_pairs() {
        let c = array![[0.5, 9.0], [9.0, 8.0]];
        let m = assign_gated(c.view(), AssignMethod::Hungarian, 2.0);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].det, m[0].track), (0, 0));
        assert!((m[0].score - 1.0 / 1.5).abs() < 1e-12);
    }
}
