//! Envelope (profile) Cholesky factorisation of `A D Aᵀ` with a reverse Cuthill–McKee ordering.
//!
//! Rows coupled to a large share of the others are moved to the end so they do not widen the
//! profile of the sparse part. Pivots that collapse relative to their original diagonal (linearly
//! dependent constraint rows) are replaced by a huge value, which zeroes the matching solution
//! component.

use std::collections::VecDeque;

const PIVOT_RELATIVE_TOL: f64 = 1e-13;
const HUGE_PIVOT: f64 = 1e64;

pub(crate) struct Envelope {
    m: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    first: Vec<usize>,
    offset: Vec<usize>,
    data: Vec<f64>,
    diag_orig: Vec<f64>,
    col_start: Vec<usize>,
    pair_slot: Vec<usize>,
    pair_coef: Vec<f64>,
    work: Vec<f64>,
}

fn row_adjacency(m: usize, cols: &[Vec<(usize, f64)>]) -> Vec<Vec<usize>> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); m];
    for col in cols {
        for &(a, _) in col {
            for &(b, _) in col {
                if a != b {
                    adj[a].push(b);
                }
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Reverse Cuthill–McKee over the rows flagged `active`.
fn reverse_cuthill_mckee(adj: &[Vec<usize>], active: &[bool]) -> Vec<usize> {
    let m = adj.len();
    let degree: Vec<usize> = (0..m)
        .map(|i| adj[i].iter().filter(|&&j| active[j]).count())
        .collect();
    let mut visited = vec![false; m];
    let mut order = Vec::with_capacity(m);
    let bfs_last = |start: usize, seen: &mut Vec<bool>| -> usize {
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut last = start;
        while let Some(v) = queue.pop_front() {
            last = v;
            for &w in &adj[v] {
                if active[w] && !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        last
    };
    let mut candidates: Vec<usize> = (0..m).filter(|&i| active[i]).collect();
    candidates.sort_by_key(|&i| (degree[i], i));
    for &seed in &candidates {
        if visited[seed] {
            continue;
        }
        // A BFS sweep from the seed lands near a peripheral row of its component.
        let mut scratch = visited.clone();
        let start = bfs_last(seed, &mut scratch);
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        let mut component = Vec::new();
        while let Some(v) = queue.pop_front() {
            component.push(v);
            let mut next: Vec<usize> = adj[v]
                .iter()
                .copied()
                .filter(|&w| active[w] && !visited[w])
                .collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
        order.extend(component);
    }
    order.reverse();
    order
}

impl Envelope {
    pub fn new(m: usize, cols: &[Vec<(usize, f64)>]) -> Self {
        let adj = row_adjacency(m, cols);
        let mut degrees: Vec<usize> = adj.iter().map(Vec::len).collect();
        degrees.sort_unstable();
        let median = degrees.get(m / 2).copied().unwrap_or(0);
        let threshold = (6 * median).max(48);
        let dense: Vec<bool> = adj.iter().map(|a| a.len() > threshold).collect();
        let active: Vec<bool> = dense.iter().map(|d| !d).collect();
        let mut perm = reverse_cuthill_mckee(&adj, &active);
        let mut dense_rows: Vec<usize> = (0..m).filter(|&i| dense[i]).collect();
        dense_rows.sort_by_key(|&i| (adj[i].len(), i));
        perm.extend(dense_rows);
        let mut inv = vec![0; m];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..m).collect();
        for (old, list) in adj.iter().enumerate() {
            let i = inv[old];
            for &nb in list {
                first[i] = first[i].min(inv[nb]);
            }
        }
        let mut offset = Vec::with_capacity(m + 1);
        let mut total = 0;
        for i in 0..m {
            offset.push(total);
            total += i - first[i] + 1;
        }
        offset.push(total);

        let mut col_start = Vec::with_capacity(cols.len() + 1);
        let mut pair_slot = Vec::new();
        let mut pair_coef = Vec::new();
        for col in cols {
            col_start.push(pair_slot.len());
            let mut entries: Vec<(usize, f64)> = col.iter().map(|&(r, v)| (inv[r], v)).collect();
            entries.sort_unstable_by_key(|e| e.0);
            for (bi, &(b, vb)) in entries.iter().enumerate() {
                for &(a, va) in &entries[..=bi] {
                    pair_slot.push(offset[b] + a - first[b]);
                    pair_coef.push(va * vb);
                }
            }
        }
        col_start.push(pair_slot.len());
        Self {
            m,
            perm,
            first,
            offset,
            data: vec![0.0; total],
            diag_orig: vec![0.0; m],
            col_start,
            pair_slot,
            pair_coef,
            work: vec![0.0; m],
        }
    }

    /// Stored entries of the lower profile.
    #[cfg(test)]
    pub fn profile_size(&self) -> usize {
        self.data.len()
    }

    /// Assembles `Σ_j d_j a_j a_jᵀ` and factors it in place. Returns the number of replaced pivots.
    pub fn factor(&mut self, d: &[f64]) -> usize {
        self.data.iter_mut().for_each(|v| *v = 0.0);
        for (j, &dj) in d.iter().enumerate() {
            if dj == 0.0 {
                continue;
            }
            for k in self.col_start[j]..self.col_start[j + 1] {
                self.data[self.pair_slot[k]] += dj * self.pair_coef[k];
            }
        }
        for i in 0..self.m {
            self.diag_orig[i] = self.data[self.offset[i + 1] - 1];
        }
        let mut replaced = 0;
        for i in 0..self.m {
            let fi = self.first[i];
            let oi = self.offset[i];
            for k in fi..i {
                let fk = self.first[k];
                let ok = self.offset[k];
                let lo = fi.max(fk);
                let (head, tail) = self.data.split_at_mut(oi);
                let row_k = &head[ok + lo - fk..ok + k - fk];
                let row_i = &tail[lo - fi..k - fi];
                let s: f64 = row_i.iter().zip(row_k).map(|(a, b)| a * b).sum();
                let lkk = head[ok + k - fk];
                tail[k - fi] = (tail[k - fi] - s) / lkk;
            }
            let row = &self.data[oi..oi + i - fi];
            let pivot = self.data[oi + i - fi] - row.iter().map(|v| v * v).sum::<f64>();
            let scale = self.diag_orig[i].abs();
            self.data[oi + i - fi] = if pivot > PIVOT_RELATIVE_TOL * scale && pivot > 0.0 && pivot.is_finite() {
                pivot.sqrt()
            } else {
                replaced += 1;
                HUGE_PIVOT
            };
        }
        replaced
    }

    /// Original indices of the rows whose pivot was replaced in the last factorisation.
    pub fn replaced_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = (0..self.m)
            .filter(|&i| self.data[self.offset[i + 1] - 1] == HUGE_PIVOT)
            .map(|i| self.perm[i])
            .collect();
        rows.sort_unstable();
        rows
    }

    /// Solves with the current factor; `rhs` and the result use the original row order.
    pub fn solve(&mut self, rhs: &[f64]) -> Vec<f64> {
        let m = self.m;
        let w = &mut self.work;
        for (new, &old) in self.perm.iter().enumerate() {
            w[new] = rhs[old];
        }
        for i in 0..m {
            let fi = self.first[i];
            let oi = self.offset[i];
            let row = &self.data[oi..oi + i - fi];
            let s: f64 = row.iter().zip(&w[fi..i]).map(|(a, b)| a * b).sum();
            w[i] = (w[i] - s) / self.data[oi + i - fi];
        }
        for i in (0..m).rev() {
            let fi = self.first[i];
            let oi = self.offset[i];
            w[i] /= self.data[oi + i - fi];
            let xi = w[i];
            if xi != 0.0 {
                for (k, l) in (fi..i).zip(&self.data[oi..oi + i - fi]) {
                    w[k] -= l * xi;
                }
            }
        }
        let mut out = vec![0.0; m];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = w[new];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn matches_dense_solve() {
        // Banded plus one dense row, as in the synthesis programs.
        let m = 30;
        let mut cols: Vec<Vec<(usize, f64)>> = Vec::new();
        for i in 0..m - 2 {
            cols.push(vec![(i, 1.0 + i as f64 * 0.1), (i + 1, -0.5), (m - 1, 0.3)]);
        }
        for i in 0..m {
            cols.push(vec![(i, 1.0)]);
        }
        let d: Vec<f64> = (0..cols.len()).map(|j| 0.5 + (j % 7) as f64).collect();
        let mut dense = DMatrix::<f64>::zeros(m, m);
        for (j, col) in cols.iter().enumerate() {
            for &(a, va) in col {
                for &(b, vb) in col {
                    dense[(a, b)] += d[j] * va * vb;
                }
            }
        }
        let rhs: Vec<f64> = (0..m).map(|i| (i as f64 * 0.37).sin()).collect();
        let expected = dense.clone().cholesky().unwrap().solve(&DVector::from_vec(rhs.clone()));
        let mut env = Envelope::new(m, &cols);
        assert_eq!(env.factor(&d), 0);
        let got = env.solve(&rhs);
        for i in 0..m {
            assert!((got[i] - expected[i]).abs() < 1e-10, "{i}: {} vs {}", got[i], expected[i]);
        }
        assert!(env.profile_size() < m * (m + 1) / 2);
    }

    #[test]
    fn dependent_rows_are_neutralised() {
        // Row 2 duplicates row 0.
        let cols = vec![vec![(0, 1.0), (2, 1.0)], vec![(1, 1.0)], vec![(0, 2.0), (2, 2.0)]];
        let mut env = Envelope::new(3, &cols);
        assert_eq!(env.factor(&[1.0, 1.0, 1.0]), 1);
        let x = env.solve(&[5.0, 1.0, 5.0]);
        assert!(x.iter().all(|v| v.is_finite()));
        let m0 = 5.0 * x[0] + 5.0 * x[2];
        assert!((m0 - 5.0).abs() < 1e-9);
    }
}
