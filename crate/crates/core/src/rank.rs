//! Rank correlations with tie handling.
//!
//! Spearman uses average ranks; ranks are doubled so every intermediate sum
//! is an exact integer. Kendall is the tie-corrected tau-b, computed with
//! Knight's O(n log n) merge-sort algorithm.

use std::cmp::Ordering;

fn cmp_f64(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Average ranks scaled by two (1-based), so ties stay integral.
pub fn doubled_average_ranks(x: &[f64]) -> Vec<i64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| cmp_f64(x[i], x[j]));
    let mut ranks = vec![0i64; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start..end hold 1-based ranks start+1..=end; mean doubled
        let doubled = (start + 1 + end) as i64;
        for &i in &order[start..end] {
            ranks[i] = doubled;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation of two integer sequences, exact up to the final
/// square root and division. `None` when either sequence is constant.
pub fn pearson_integer(a: &[i64], b: &[i64]) -> Option<f64> {
    let n = a.len() as i128;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0i128, 0i128, 0i128, 0i128, 0i128);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as i128, y as i128);
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    let num = n * sab - sa * sb;
    let va = n * saa - sa * sa;
    let vb = n * sbb - sb * sb;
    if va == 0 || vb == 0 {
        return None;
    }
    Some(num as f64 / ((va as f64) * (vb as f64)).sqrt())
}

/// Spearman rank correlation; `None` if fewer than two points or either
/// input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    if x.len() < 2 {
        return None;
    }
    pearson_integer(&doubled_average_ranks(x), &doubled_average_ranks(y))
}

/// Pair counts entering tau-b.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KendallCounts {
    pub n_pairs: u64,
    /// Pairs tied in x.
    pub ties_x: u64,
    /// Pairs tied in y.
    pub ties_y: u64,
    /// Concordant minus discordant pairs.
    pub score: i64,
}

impl KendallCounts {
    pub fn tau_b(&self) -> Option<f64> {
        let dx = self.n_pairs - self.ties_x;
        let dy = self.n_pairs - self.ties_y;
        if dx == 0 || dy == 0 {
            return None;
        }
        Some(self.score as f64 / ((dx as f64) * (dy as f64)).sqrt())
    }
}

fn tied_pairs(sorted_keys: impl Iterator<Item = bool>) -> u64 {
    // `true` marks "equal to previous element"
    let mut total = 0u64;
    let mut run = 1u64;
    for same in sorted_keys {
        if same {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Counts inversions of `v` while merge-sorting it.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]);
    swaps += merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

pub fn kendall_counts(x: &[f64], y: &[f64]) -> KendallCounts {
    assert_eq!(x.len(), y.len(), "kendall inputs differ in length");
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| cmp_f64(x[i], x[j]).then(cmp_f64(y[i], y[j])));
    let n_pairs = (n as u64) * (n.saturating_sub(1) as u64) / 2;
    let ties_x = tied_pairs(order.windows(2).map(|w| x[w[0]] == x[w[1]]));
    let ties_xy = tied_pairs(order.windows(2).map(|w| x[w[0]] == x[w[1]] && y[w[0]] == y[w[1]]));
    let mut ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);
    let ties_y = tied_pairs(ys.windows(2).map(|w| w[0] == w[1]));
    let score = n_pairs as i64 - ties_x as i64 - ties_y as i64 + ties_xy as i64 - 2 * swaps as i64;
    KendallCounts {
        n_pairs,
        ties_x,
        ties_y,
        score,
    }
}

/// Kendall tau-b; `None` if either input is constant or has < 2 points.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    kendall_counts(x, y).tau_b()
}
