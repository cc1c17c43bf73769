//! Spatial clustering of temporal trends: posterior weight matrices, k-means
//! and partition agreement scores. Labels are 0-based.

use nalgebra::DMatrix;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::Rng;

use crate::error::{spec, Result};
use crate::gibbs::PosteriorStore;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    /// m × (columns), one row per location.
    pub values: DMatrix<f64>,
    /// Observation type the rows were taken from.
    pub o: usize,
    /// (kept iteration, factor, L_j) for each column block, in order.
    pub blocks: Vec<(usize, usize, usize)>,
}

/// `count` kept-iteration indices spread evenly over 0..n_kept, ending at the
/// last one.
pub fn dispersed_iterations(n_kept: usize, count: usize) -> Vec<usize> {
    if n_kept == 0 || count == 0 {
        return vec![];
    }
    let count = count.min(n_kept);
    let step = n_kept / count;
    (1..=count).map(|c| c * step - 1 + (n_kept - count * step)).collect()
}

fn check(store: &PosteriorStore, o: usize, iters: &[usize]) -> Result<()> {
    if !store.variant.clustering() {
        return spec("weights exist only for clustering variants");
    }
    if o >= store.o {
        return spec(format!("observation type {o} out of range (O = {})", store.o));
    }
    if iters.is_empty() {
        return spec("no iterations selected");
    }
    if let Some(&bad) = iters.iter().find(|&&i| i >= store.samples.len()) {
        return spec(format!("iteration {bad} out of range ({} kept)", store.samples.len()));
    }
    Ok(())
}

/// Raw weights of type `o` for the selected iterations and every factor,
/// concatenated column-wise without normalization.
pub fn assemble_weights(store: &PosteriorStore, o: usize, iters: &[usize]) -> Result<WeightMatrix> {
    check(store, o, iters)?;
    let m = store.m;
    let mut blocks = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for &it in iters {
        let s = &store.samples[it];
        for (j, f) in s.factors.iter().enumerate() {
            let w = f.weights(m, store.o);
            for l in 0..f.l {
                cols.push((0..m).map(|i| w[(o * m + i) * f.l + l]).collect());
            }
            blocks.push((it, j, f.l));
        }
    }
    let values = DMatrix::from_fn(m, cols.len(), |i, c| cols[c][i]);
    Ok(WeightMatrix { values, o, blocks })
}

/// Fixed-L posterior mean weight matrix, m × (k·L).
pub fn mean_weights(store: &PosteriorStore, o: usize, iters: &[usize]) -> Result<WeightMatrix> {
    check(store, o, iters)?;
    let first = &store.samples[iters[0]];
    let ls: Vec<usize> = first.factors.iter().map(|f| f.l).collect();
    if iters.iter().any(|&i| store.samples[i].factors.iter().map(|f| f.l).ne(ls.iter().copied())) {
        return spec("posterior mean weights need a constant truncation across iterations");
    }
    let raw = assemble_weights(store, o, iters)?;
    let width: usize = ls.iter().sum();
    let mut values = DMatrix::zeros(store.m, width);
    for b in 0..iters.len() {
        values += raw.values.columns(b * width, width);
    }
    values /= iters.len() as f64;
    let blocks = ls.iter().enumerate().map(|(j, &l)| (usize::MAX, j, l)).collect();
    Ok(WeightMatrix { values, o, blocks })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    pub centers: DMatrix<f64>,
    pub wcss: f64,
}

fn sqdist(x: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, j: usize) -> f64 {
    x.row(i).iter().zip(c.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn plus_plus<R: Rng>(x: &DMatrix<f64>, k: usize, rng: &mut R) -> DMatrix<f64> {
    let n = x.nrows();
    let mut centers = DMatrix::zeros(k, x.ncols());
    let first = rng.random_range(0..n);
    centers.set_row(0, &x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sqdist(x, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            crate::dist::categorical(rng, &d2)
        } else {
            rng.random_range(0..n)
        };
        centers.set_row(c, &x.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sqdist(x, i, &centers, c));
        }
    }
    centers
}

fn lloyd(x: &DMatrix<f64>, mut centers: DMatrix<f64>, max_iters: usize) -> KmeansResult {
    let n = x.nrows();
    let k = centers.nrows();
    let mut labels = vec![0; n];
    let mut prev = f64::INFINITY;
    for _ in 0..max_iters.max(1) {
        let mut wcss = 0.0;
        for i in 0..n {
            let (best, d) = (0..k)
                .map(|c| (c, sqdist(x, i, &centers, c)))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            labels[i] = best;
            wcss += d;
        }
        assert!(wcss <= prev * (1.0 + 1e-12) + 1e-12, "k-means objective increased: {prev} -> {wcss}");
        let mut sums = DMatrix::zeros(k, x.ncols());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let mut row = sums.row_mut(labels[i]);
            row += x.row(i);
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.set_row(c, &(sums.row(c) / counts[c] as f64));
            }
        }
        if wcss >= prev {
            break;
        }
        prev = wcss;
    }
    let wcss = (0..n).map(|i| sqdist(x, i, &centers, labels[i])).sum();
    KmeansResult { labels, centers, wcss }
}

/// Lloyd's algorithm from the best of `restarts` k-means++ seedings.
pub fn kmeans(x: &DMatrix<f64>, k: usize, restarts: usize, max_iters: usize, seed: u64) -> Result<KmeansResult> {
    let n = x.nrows();
    if k == 0 || k > n {
        return spec(format!("K = {k} must be in 1..={n}"));
    }
    let mut best: Option<KmeansResult> = None;
    for r in 0..restarts.max(1) {
        let mut rng = stream_rng(seed, r as u32, Stream::Kmeans);
        let res = lloyd(x, plus_plus(x, k, &mut rng), max_iters);
        if best.as_ref().is_none_or(|b| res.wcss < b.wcss) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Fraction of pairs on which the two partitions agree.
pub fn rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "partitions of different length");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut agree = 0usize;
    for i in 0..n {
        for j in 0..i {
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / (n * (n - 1) / 2) as f64
}

fn compact(a: &[usize]) -> (Vec<usize>, usize) {
    let mut seen: Vec<usize> = a.to_vec();
    seen.sort_unstable();
    seen.dedup();
    (a.iter().map(|v| seen.binary_search(v).unwrap()).collect(), seen.len())
}

fn best_perm(c: &[Vec<i64>], used: &mut Vec<bool>, row: usize) -> i64 {
    if row == c.len() {
        return 0;
    }
    let mut best = i64::MIN;
    for col in 0..c.len() {
        if !used[col] {
            used[col] = true;
            best = best.max(c[row][col] + best_perm(c, used, row + 1));
            used[col] = false;
        }
    }
    best
}

/// Largest fraction of labels matching `truth` over all relabelings of `a`.
pub fn accuracy_ratio(a: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(a.len(), truth.len(), "partitions of different length");
    if a.is_empty() {
        return 1.0;
    }
    let (a, ka) = compact(a);
    let (t, kt) = compact(truth);
    let k = ka.max(kt);
    let mut c = vec![vec![0i64; k]; k];
    for (&x, &y) in a.iter().zip(&t) {
        c[x][y] += 1;
    }
    let matched = if k <= 8 {
        best_perm(&c, &mut vec![false; k], 0)
    } else {
        let w = Matrix::from_fn(k, k, |(i, j)| c[i][j]);
        kuhn_munkres(&w).0
    };
    matched as f64 / a.len() as f64
}
