//! Review-aware user initialization. Per-item mean review codes over train
//! interactions feed a cross-relation matrix between review and item
//! embedding dimensions; each user's initial embedding is then a
//! per-dimension softmax-weighted sum of the items they interacted with,
//! with the weights driven by their own review codes. Also hosts the
//! cross-relation export with spectral co-clustering for heatmap rendering.

use crate::dataset::{EmbeddingTable, Interaction};
use crate::numerics::{seeded_rng, DenseMatrix};
use crate::{Error, Result};
use rand::Rng;
use std::io::Write;
use std::path::Path;

/// Mean compressed review embedding per item over train interactions that
/// carry a review; items without any reviewed interaction get a zero row.
#[derive(Debug, Clone)]
pub struct ItemReviewMeans {
    pub matrix: DenseMatrix,
    pub counts: Vec<usize>,
}

pub fn item_review_means(
    train: &[Interaction],
    review_codes: &EmbeddingTable,
    num_items: usize,
) -> Result<ItemReviewMeans> {
    let dim = review_codes.dim();
    let mut matrix = DenseMatrix::zeros(num_items, dim);
    let mut counts = vec![0usize; num_items];
    for it in train {
        let Some(row) = it.review_row else { continue };
        if row >= review_codes.rows() {
            return Err(Error::invalid(format!(
                "interaction references review row {row}, table has {}",
                review_codes.rows()
            )));
        }
        let dst = matrix.row_mut(it.item);
        for (d, &v) in dst.iter_mut().zip(review_codes.matrix.row(row)) {
            *d += v;
        }
        counts[it.item] += 1;
    }
    for item in 0..num_items {
        if counts[item] > 0 {
            let inv = 1.0 / counts[item] as f64;
            for v in matrix.row_mut(item) {
                *v *= inv;
            }
        }
    }
    Ok(ItemReviewMeans { matrix, counts })
}

/// Cross-relation matrix between review dimensions and item-embedding
/// dimensions: the product of stacked per-item review means (transposed)
/// with the stacked initial item embeddings. Frozen after construction.
#[derive(Debug, Clone)]
pub struct CrossRelation {
    pub matrix: DenseMatrix,
}

pub fn build_cross_relation(
    means: &ItemReviewMeans,
    item_init: &DenseMatrix,
) -> Result<CrossRelation> {
    if means.matrix.rows() != item_init.rows() {
        return Err(Error::shape(format!(
            "review means cover {} items, item embeddings {}",
            means.matrix.rows(),
            item_init.rows()
        )));
    }
    Ok(CrossRelation {
        matrix: means.matrix.matmul_tn(item_init)?,
    })
}

/// Column-wise (per-dimension) softmax over rows: entry (i, k) becomes the
/// weight of row i in dimension k, max-shifted for stability. Every column
/// of the output sums to 1.
pub fn dimension_attention(logits: &DenseMatrix) -> DenseMatrix {
    let rows = logits.rows();
    let cols = logits.cols();
    let mut out = logits.clone();
    for k in 0..cols {
        let mut max = f64::NEG_INFINITY;
        for i in 0..rows {
            max = max.max(out.at(i, k));
        }
        let mut sum = 0.0;
        for i in 0..rows {
            let e = (out.at(i, k) - max).exp();
            *out.at_mut(i, k) = e;
            sum += e;
        }
        for i in 0..rows {
            *out.at_mut(i, k) /= sum;
        }
    }
    out
}

/// Initial user embeddings with bookkeeping: `fallback` marks users whose
/// init is the plain mean of interacted items (no reviewed train
/// interactions), `empty` marks users with no train interactions at all.
#[derive(Debug, Clone)]
pub struct UserInitEmbeddings {
    pub matrix: DenseMatrix,
    pub fallback: Vec<bool>,
    pub empty: Vec<bool>,
}

/// Per-dimension attention over each user's reviewed train interactions:
/// logits are the review codes projected through the cross-relation matrix,
/// softmaxed per dimension across the user's items, then used as weights in
/// a per-dimension convex combination of the item embeddings.
pub fn init_users(
    cross: &CrossRelation,
    item_init: &DenseMatrix,
    train: &[Interaction],
    review_codes: &EmbeddingTable,
    num_users: usize,
) -> Result<UserInitEmbeddings> {
    let d_r = cross.matrix.rows();
    let d_i = cross.matrix.cols();
    if item_init.cols() != d_i {
        return Err(Error::shape(format!(
            "cross-relation output dim {d_i} != item dim {}",
            item_init.cols()
        )));
    }
    if review_codes.dim() != d_r {
        return Err(Error::shape(format!(
            "cross-relation input dim {d_r} != review dim {}",
            review_codes.dim()
        )));
    }
    let mut by_user: Vec<Vec<&Interaction>> = vec![Vec::new(); num_users];
    for it in train {
        by_user[it.user].push(it);
    }
    let mut matrix = DenseMatrix::zeros(num_users, d_i);
    let mut fallback = vec![false; num_users];
    let mut empty = vec![false; num_users];
    for (user, interactions) in by_user.iter().enumerate() {
        if interactions.is_empty() {
            empty[user] = true;
            continue;
        }
        let reviewed: Vec<&&Interaction> = interactions
            .iter()
            .filter(|it| it.review_row.is_some())
            .collect();
        if reviewed.is_empty() {
            // No reviewed train interactions: unweighted mean of the
            // interacted item embeddings.
            fallback[user] = true;
            let inv = 1.0 / interactions.len() as f64;
            let dst = matrix.row_mut(user);
            for it in interactions {
                for (d, &v) in dst.iter_mut().zip(item_init.row(it.item)) {
                    *d += inv * v;
                }
            }
            continue;
        }
        let mut logits = DenseMatrix::zeros(reviewed.len(), d_i);
        for (r, it) in reviewed.iter().enumerate() {
            let code = review_codes.matrix.row(it.review_row.expect("reviewed"));
            let dst = logits.row_mut(r);
            for (rr, &c) in code.iter().enumerate() {
                let drow = cross.matrix.row(rr);
                for (d, &w) in dst.iter_mut().zip(drow) {
                    *d += c * w;
                }
            }
        }
        let weights = dimension_attention(&logits);
        let dst = matrix.row_mut(user);
        for (r, it) in reviewed.iter().enumerate() {
            let item_row = item_init.row(it.item);
            for k in 0..d_i {
                dst[k] += weights.at(r, k) * item_row[k];
            }
        }
    }
    Ok(UserInitEmbeddings {
        matrix,
        fallback,
        empty,
    })
}

/// Row/column cluster assignments from spectral co-clustering of the
/// cross-relation matrix.
#[derive(Debug, Clone)]
pub struct CoClusters {
    pub row_assign: Vec<usize>,
    pub col_assign: Vec<usize>,
    /// Set when the matrix carries no signal (all zeros): everything lands
    /// in a single cluster.
    pub degenerate: bool,
}

/// Spectral co-clustering (bipartite spectral graph partitioning): scale the
/// magnitude matrix by inverse-sqrt row/column sums, take the leading
/// singular vectors past the first, embed rows and columns jointly, and run
/// seeded k-means.
pub fn co_cluster(matrix: &DenseMatrix, k: usize, seed: u64) -> Result<CoClusters> {
    let rows = matrix.rows();
    let cols = matrix.cols();
    if k == 0 || rows == 0 || cols == 0 {
        return Err(Error::invalid("co-clustering needs k >= 1 and a non-empty matrix"));
    }
    let mut magnitude = matrix.clone();
    for v in magnitude.data_mut() {
        *v = v.abs();
    }
    let row_sums: Vec<f64> = (0..rows).map(|r| magnitude.row(r).iter().sum()).collect();
    let mut col_sums = vec![0.0; cols];
    for r in 0..rows {
        for (c, &v) in magnitude.row(r).iter().enumerate() {
            col_sums[c] += v;
        }
    }
    let total: f64 = row_sums.iter().sum();
    if total == 0.0 {
        return Ok(CoClusters {
            row_assign: vec![0; rows],
            col_assign: vec![0; cols],
            degenerate: true,
        });
    }
    let r_inv: Vec<f64> = row_sums
        .iter()
        .map(|&s| if s > 0.0 { 1.0 / s.sqrt() } else { 0.0 })
        .collect();
    let c_inv: Vec<f64> = col_sums
        .iter()
        .map(|&s| if s > 0.0 { 1.0 / s.sqrt() } else { 0.0 })
        .collect();
    let mut normalized = magnitude;
    for r in 0..rows {
        for c in 0..cols {
            *normalized.at_mut(r, c) *= r_inv[r] * c_inv[c];
        }
    }

    let na = nalgebra::DMatrix::from_row_slice(rows, cols, normalized.data());
    let svd = na.svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numeric("svd failed".into()))?;
    let v_t = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::Numeric("svd failed".into()))?;
    let want = ((k as f64).log2().ceil() as usize).max(1);
    let available = svd.singular_values.len().saturating_sub(1);
    let dims = want.min(available).max(1).min(svd.singular_values.len());
    let skip = if svd.singular_values.len() > 1 { 1 } else { 0 };

    // Joint embedding: scaled left vectors for rows, right vectors for cols.
    let mut points = Vec::with_capacity(rows + cols);
    for r in 0..rows {
        let mut p = Vec::with_capacity(dims);
        for d in 0..dims {
            let col = (skip + d).min(u.ncols() - 1);
            p.push(r_inv[r] * u[(r, col)]);
        }
        points.push(p);
    }
    for c in 0..cols {
        let mut p = Vec::with_capacity(dims);
        for d in 0..dims {
            let row = (skip + d).min(v_t.nrows() - 1);
            p.push(c_inv[c] * v_t[(row, c)]);
        }
        points.push(p);
    }
    let assign = k_means(&points, k, seed, 100);
    Ok(CoClusters {
        row_assign: assign[..rows].to_vec(),
        col_assign: assign[rows..].to_vec(),
        degenerate: false,
    })
}

/// Seeded Lloyd iterations with farthest-point style initialization.
fn k_means(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Vec<usize> {
    let n = points.len();
    let k = k.min(n).max(1);
    let mut rng = seeded_rng(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..n)].clone());
    while centers.len() < k {
        // Pick the point farthest from its nearest center (deterministic
        // tie-break on index).
        let mut best = (0usize, f64::NEG_INFINITY);
        for (ix, p) in points.iter().enumerate() {
            let d = centers
                .iter()
                .map(|c| sq_dist(p, c))
                .fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (ix, d);
            }
        }
        centers.push(points[best.0].clone());
    }
    let mut assign = vec![0usize; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for (ix, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[ix] != best {
                assign[ix] = best;
                changed = true;
            }
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (ix, p) in points.iter().enumerate() {
            counts[assign[ix]] += 1;
            for (s, &v) in sums[assign[ix]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in &mut sums[c] {
                    *s /= counts[c] as f64;
                }
                centers[c] = sums[c].clone();
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// TSV dump of the cross-relation matrix with co-cluster assignments in
/// comment headers, for heatmap rendering. Returns the assignments.
pub fn export_cross_relation(
    cross: &CrossRelation,
    path: &Path,
    k: usize,
    seed: u64,
    fingerprint: &str,
) -> Result<CoClusters> {
    let clusters = co_cluster(&cross.matrix, k, seed)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "# fingerprint={fingerprint}").map_err(|e| Error::io(path, e))?;
    writeln!(
        w,
        "# rows={} cols={} k={} degenerate={}",
        cross.matrix.rows(),
        cross.matrix.cols(),
        k,
        clusters.degenerate
    )
    .map_err(|e| Error::io(path, e))?;
    let fmt = |xs: &[usize]| {
        xs.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    writeln!(w, "# row_clusters={}", fmt(&clusters.row_assign)).map_err(|e| Error::io(path, e))?;
    writeln!(w, "# col_clusters={}", fmt(&clusters.col_assign)).map_err(|e| Error::io(path, e))?;
    for r in 0..cross.matrix.rows() {
        let fields: Vec<String> = cross
            .matrix
            .row(r)
            .iter()
            .map(|v| format!("{v:.10}"))
            .collect();
        writeln!(w, "{}", fields.join("\t")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(clusters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TableKind;
    use crate::numerics::max_rel_error;

    fn table(rows: Vec<Vec<f64>>) -> EmbeddingTable {
        EmbeddingTable::new(
            TableKind::CompressedReview,
            DenseMatrix::from_rows(&rows).unwrap(),
        )
        .unwrap()
    }

    fn it(user: usize, item: usize, review: Option<usize>) -> Interaction {
        Interaction {
            user,
            item,
            review_row: review,
        }
    }

    #[test]
    fn single_review_mean_is_the_review() {
        let reviews = table(vec![vec![0.3, -0.2]]);
        let train = vec![it(0, 0, Some(0))];
        let means = item_review_means(&train, &reviews, 2).unwrap();
        assert_eq!(means.matrix.row(0), &[0.3, -0.2]);
        assert_eq!(means.counts, vec![1, 0]);
        assert!(means.matrix.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_reviews_average() {
        let reviews = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let train = vec![it(0, 0, Some(0)), it(1, 0, Some(1))];
        let means = item_review_means(&train, &reviews, 1).unwrap();
        assert_eq!(means.matrix.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn review_means_match_loop_oracle() {
        let mut rng = seeded_rng(1);
        let reviews = EmbeddingTable::new(
            TableKind::CompressedReview,
            DenseMatrix::uniform(20, 3, 1.0, &mut rng),
        )
        .unwrap();
        let mut train = Vec::new();
        for r in 0..20 {
            train.push(it(r % 4, rng.gen_range(0..6), Some(r)));
        }
        // A few reviewless interactions must not contribute.
        train.push(it(0, 0, None));
        train.push(it(1, 3, None));
        let means = item_review_means(&train, &reviews, 6).unwrap();
        for item in 0..6 {
            let contributing: Vec<usize> = train
                .iter()
                .filter(|t| t.item == item && t.review_row.is_some())
                .map(|t| t.review_row.unwrap())
                .collect();
            for d in 0..3 {
                let expect = if contributing.is_empty() {
                    0.0
                } else {
                    contributing
                        .iter()
                        .map(|&r| reviews.matrix.at(r, d))
                        .sum::<f64>()
                        / contributing.len() as f64
                };
                assert!((means.matrix.at(item, d) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_relation_single_item_is_outer_product() {
        let means = ItemReviewMeans {
            matrix: DenseMatrix::from_vec(1, 2, vec![2.0, 3.0]).unwrap(),
            counts: vec![1],
        };
        let items = DenseMatrix::from_vec(1, 3, vec![1.0, -1.0, 0.5]).unwrap();
        let cross = build_cross_relation(&means, &items).unwrap();
        assert_eq!(cross.matrix.rows(), 2);
        assert_eq!(cross.matrix.cols(), 3);
        for r in 0..2 {
            for c in 0..3 {
                let expect = means.matrix.at(0, r) * items.at(0, c);
                assert!((cross.matrix.at(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_relation_matches_outer_product_sum_oracle() {
        let mut rng = seeded_rng(2);
        let means = ItemReviewMeans {
            matrix: DenseMatrix::uniform(5, 3, 1.0, &mut rng),
            counts: vec![1; 5],
        };
        let items = DenseMatrix::uniform(5, 4, 1.0, &mut rng);
        let cross = build_cross_relation(&means, &items).unwrap();
        let mut oracle = DenseMatrix::zeros(3, 4);
        for i in 0..5 {
            for r in 0..3 {
                for c in 0..4 {
                    *oracle.at_mut(r, c) += means.matrix.at(i, r) * items.at(i, c);
                }
            }
        }
        assert!(max_rel_error(cross.matrix.data(), oracle.data()) < 1e-10);

        let zero_means = ItemReviewMeans {
            matrix: DenseMatrix::zeros(5, 3),
            counts: vec![0; 5],
        };
        let cross = build_cross_relation(&zero_means, &items).unwrap();
        assert!(cross.matrix.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_relation_rejects_row_mismatch() {
        let means = ItemReviewMeans {
            matrix: DenseMatrix::zeros(4, 3),
            counts: vec![0; 4],
        };
        let items = DenseMatrix::zeros(5, 4);
        assert!(build_cross_relation(&means, &items).is_err());
    }

    #[test]
    fn single_interaction_copies_item_row() {
        let reviews = table(vec![vec![0.7, -0.1]]);
        let items = DenseMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let cross = CrossRelation {
            matrix: DenseMatrix::uniform(2, 3, 1.0, &mut seeded_rng(3)),
        };
        let train = vec![it(0, 1, Some(0))];
        let users = init_users(&cross, &items, &train, &reviews, 1).unwrap();
        assert!(max_rel_error(users.matrix.row(0), items.row(1)) < 1e-12);
        assert!(!users.fallback[0] && !users.empty[0]);
    }

    #[test]
    fn identical_reviews_give_mean_of_items() {
        let reviews = table(vec![vec![0.4, 0.6], vec![0.4, 0.6]]);
        let items = DenseMatrix::from_vec(2, 2, vec![1.0, 10.0, 3.0, 20.0]).unwrap();
        let cross = CrossRelation {
            matrix: DenseMatrix::uniform(2, 2, 1.0, &mut seeded_rng(4)),
        };
        let train = vec![it(0, 0, Some(0)), it(0, 1, Some(1))];
        let users = init_users(&cross, &items, &train, &reviews, 1).unwrap();
        assert!(max_rel_error(users.matrix.row(0), &[2.0, 15.0]) < 1e-12);
    }

    #[test]
    fn matches_per_dimension_loop_oracle() {
        let mut rng = seeded_rng(5);
        let reviews = EmbeddingTable::new(
            TableKind::CompressedReview,
            DenseMatrix::uniform(12, 3, 1.0, &mut rng),
        )
        .unwrap();
        let items = DenseMatrix::uniform(4, 5, 1.0, &mut rng);
        let cross = CrossRelation {
            matrix: DenseMatrix::uniform(3, 5, 1.0, &mut rng),
        };
        let mut train = Vec::new();
        let mut next_review = 0usize;
        for user in 0..3 {
            for item in 0..4 {
                if rng.gen_bool(0.8) {
                    train.push(it(user, item, Some(next_review)));
                    next_review += 1;
                }
            }
        }
        let users = init_users(&cross, &items, &train, &reviews, 3).unwrap();
        for user in 0..3 {
            let mine: Vec<&Interaction> = train.iter().filter(|t| t.user == user).collect();
            for k in 0..5 {
                // Per-dimension softmax over this user's interactions.
                let logits: Vec<f64> = mine
                    .iter()
                    .map(|t| {
                        let code = reviews.matrix.row(t.review_row.unwrap());
                        (0..3).map(|r| code[r] * cross.matrix.at(r, k)).sum::<f64>()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                let expect: f64 = mine
                    .iter()
                    .zip(&logits)
                    .map(|(t, &l)| (l - mx).exp() / z * items.at(t.item, k))
                    .sum();
                assert!(
                    (users.matrix.at(user, k) - expect).abs() < 1e-10,
                    "user {user} dim {k}"
                );
            }
        }
    }

    #[test]
    fn empty_user_is_zero_and_flagged() {
        let reviews = table(vec![vec![0.1, 0.1]]);
        let items = DenseMatrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let cross = CrossRelation {
            matrix: DenseMatrix::zeros(2, 2),
        };
        let train = vec![it(1, 0, Some(0))];
        let users = init_users(&cross, &items, &train, &reviews, 2).unwrap();
        assert!(users.empty[0]);
        assert!(users.matrix.row(0).iter().all(|&v| v == 0.0));
        assert!(!users.empty[1]);
    }

    #[test]
    fn reviewless_user_falls_back_to_item_mean() {
        let reviews = table(vec![vec![0.1, 0.1]]);
        let items = DenseMatrix::from_vec(2, 2, vec![2.0, 4.0, 4.0, 8.0]).unwrap();
        let cross = CrossRelation {
            matrix: DenseMatrix::uniform(2, 2, 1.0, &mut seeded_rng(6)),
        };
        let train = vec![it(0, 0, None), it(0, 1, None)];
        let users = init_users(&cross, &items, &train, &reviews, 1).unwrap();
        assert!(users.fallback[0]);
        assert!(max_rel_error(users.matrix.row(0), &[3.0, 6.0]) < 1e-12);
    }

    #[test]
    fn attention_weights_sum_to_one_and_stay_in_hull() {
        let mut rng = seeded_rng(7);
        for _ in 0..50 {
            let n = rng.gen_range(1..8);
            let logits = DenseMatrix::uniform(n, 6, 5.0, &mut rng);
            let weights = dimension_attention(&logits);
            for k in 0..6 {
                let sum: f64 = (0..n).map(|i| weights.at(i, k)).sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }

        // Convex hull per dimension on a random instance.
        let reviews = EmbeddingTable::new(
            TableKind::CompressedReview,
            DenseMatrix::uniform(10, 3, 1.0, &mut rng),
        )
        .unwrap();
        let items = DenseMatrix::uniform(5, 4, 1.0, &mut rng);
        let cross = CrossRelation {
            matrix: DenseMatrix::uniform(3, 4, 1.0, &mut rng),
        };
        let train: Vec<Interaction> = (0..10).map(|r| it(0, r % 5, Some(r))).collect();
        let users = init_users(&cross, &items, &train, &reviews, 1).unwrap();
        for k in 0..4 {
            let vals: Vec<f64> = train.iter().map(|t| items.at(t.item, k)).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = users.matrix.at(0, k);
            assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }
    }

    #[test]
    fn attention_is_shift_invariant_per_dimension() {
        let mut rng = seeded_rng(8);
        let logits = DenseMatrix::uniform(5, 3, 2.0, &mut rng);
        let base = dimension_attention(&logits);
        let mut shifted = logits.clone();
        for i in 0..5 {
            *shifted.at_mut(i, 1) += 37.5;
        }
        let after = dimension_attention(&shifted);
        assert!(max_rel_error(base.data(), after.data()) < 1e-9);
    }

    #[test]
    fn zero_cross_relation_gives_unweighted_mean() {
        let mut rng = seeded_rng(9);
        let reviews = EmbeddingTable::new(
            TableKind::CompressedReview,
            DenseMatrix::uniform(4, 2, 1.0, &mut rng),
        )
        .unwrap();
        let items = DenseMatrix::uniform(4, 3, 1.0, &mut rng);
        let cross = CrossRelation {
            matrix: DenseMatrix::zeros(2, 3),
        };
        let train: Vec<Interaction> = (0..4).map(|r| it(0, r, Some(r))).collect();
        let users = init_users(&cross, &items, &train, &reviews, 1).unwrap();
        for k in 0..3 {
            let mean: f64 = (0..4).map(|i| items.at(i, k)).sum::<f64>() / 4.0;
            assert!((users.matrix.at(0, k) - mean).abs() < 1e-12);
        }
    }

    fn cluster_accuracy(assign: &[usize], truth: &[usize]) -> f64 {
        // Two clusters: take the better of the two label mappings.
        let direct = assign
            .iter()
            .zip(truth)
            .filter(|(a, t)| a == t)
            .count();
        let flipped = assign
            .iter()
            .zip(truth)
            .filter(|(a, t)| **a == 1 - **t)
            .count();
        direct.max(flipped) as f64 / truth.len() as f64
    }

    #[test]
    fn co_clustering_recovers_identity_blocks() {
        // Block-diagonal 4x4: first two rows/cols vs last two.
        let m = DenseMatrix::from_vec(
            4,
            4,
            vec![
                1.0, 1.0, 0.0, 0.0, //
                1.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 1.0, //
                0.0, 0.0, 1.0, 1.0,
            ],
        )
        .unwrap();
        let clusters = co_cluster(&m, 2, 1).unwrap();
        assert!(!clusters.degenerate);
        let truth = vec![0, 0, 1, 1];
        assert_eq!(cluster_accuracy(&clusters.row_assign, &truth), 1.0);
        assert_eq!(cluster_accuracy(&clusters.col_assign, &truth), 1.0);
        // Rows and columns of the same block land together.
        assert_eq!(clusters.row_assign[0], clusters.col_assign[0]);
        assert_eq!(clusters.row_assign[2], clusters.col_assign[2]);
    }

    #[test]
    fn co_clustering_zero_matrix_is_degenerate() {
        let clusters = co_cluster(&DenseMatrix::zeros(3, 5), 2, 1).unwrap();
        assert!(clusters.degenerate);
        assert!(clusters.row_assign.iter().all(|&a| a == 0));
        assert!(clusters.col_assign.iter().all(|&a| a == 0));
    }

    #[test]
    fn co_clustering_recovers_planted_blocks_under_noise() {
        let mut rng = seeded_rng(10);
        let rows = 24;
        let cols = 40;
        let mut m = DenseMatrix::zeros(rows, cols);
        let row_truth: Vec<usize> = (0..rows).map(|r| usize::from(r >= rows / 2)).collect();
        let col_truth: Vec<usize> = (0..cols).map(|c| usize::from(c >= cols / 2)).collect();
        for r in 0..rows {
            for c in 0..cols {
                let signal = if row_truth[r] == col_truth[c] { 1.0 } else { 0.0 };
                *m.at_mut(r, c) = signal + 0.05 * rng.gen_range(-1.0..1.0);
            }
        }
        let clusters = co_cluster(&m, 2, 3).unwrap();
        assert!(cluster_accuracy(&clusters.row_assign, &row_truth) > 0.95);
        assert!(cluster_accuracy(&clusters.col_assign, &col_truth) > 0.95);
    }

    #[test]
    fn export_writes_matrix_and_clusters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cross.tsv");
        let cross = CrossRelation {
            matrix: DenseMatrix::identity(3),
        };
        let clusters = export_cross_relation(&cross, &path, 2, 7, "fp9").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# fingerprint=fp9\n"));
        assert!(text.contains("# row_clusters="));
        assert_eq!(text.lines().count(), 4 + 3);
        assert_eq!(clusters.row_assign.len(), 3);
    }
}
