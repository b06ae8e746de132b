//! Top-N evaluation over the full candidate set: deterministic ranking,
//! Recall@K and NDCG@K, per-user/aggregate reports with embedded config
//! fingerprints, and a paired t-test for comparing runs.

use crate::graph::Propagated;
use crate::numerics::dot;
use crate::{Error, Result};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

/// All items outside `exclude`, sorted by score descending; ties broken by
/// ascending item index so rankings are deterministic.
pub fn rank_items(embs: &Propagated, user: usize, exclude: &[usize]) -> Vec<usize> {
    let num_items = embs.item_final.rows();
    let mut excluded = vec![false; num_items];
    for &i in exclude {
        excluded[i] = true;
    }
    let user_row = embs.user_final.row(user);
    let mut scored: Vec<(f64, usize)> = (0..num_items)
        .filter(|&i| !excluded[i])
        .map(|i| (dot(user_row, embs.item_final.row(i)), i))
        .collect();
    scored.sort_unstable_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite scores")
            .then_with(|| a.1.cmp(&b.1))
    });
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Fraction of the relevant set found in the top K.
pub fn recall_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| relevant.contains(i))
        .count();
    hits as f64 / relevant.len() as f64
}

/// DCG of hits in the top K (gain 1/log2(rank+1), ranks 1-based), normalized
/// by the ideal DCG truncated at min(K, |relevant|).
pub fn ndcg_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            dcg += 1.0 / (pos as f64 + 2.0).log2();
        }
    }
    let ideal_len = k.min(relevant.len());
    let idcg: f64 = (0..ideal_len)
        .map(|pos| 1.0 / (pos as f64 + 2.0).log2())
        .sum();
    dcg / idcg
}

#[derive(Debug, Clone, Serialize)]
pub struct UserMetrics {
    pub user: usize,
    /// One entry per requested K, in report order.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

/// Per-user and aggregate Recall@K / NDCG@K for one set of embeddings.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub per_user: Vec<UserMetrics>,
    pub aggregate_recall: Vec<f64>,
    pub aggregate_ndcg: Vec<f64>,
    pub evaluated_users: usize,
    pub skipped_users: usize,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.ks
            .iter()
            .position(|&x| x == k)
            .map(|ix| self.aggregate_recall[ix])
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.ks
            .iter()
            .position(|&x| x == k)
            .map(|ix| self.aggregate_ndcg[ix])
    }

    /// One row per evaluated user: `user<TAB>R@k<TAB>N@k...`.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "# fingerprint={}", self.fingerprint).map_err(|e| Error::io(path, e))?;
        let mut header = String::from("user");
        for &k in &self.ks {
            header.push_str(&format!("\tR@{k}\tN@{k}"));
        }
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
        for um in &self.per_user {
            let mut row = um.user.to_string();
            for ix in 0..self.ks.len() {
                row.push_str(&format!("\t{:.10}\t{:.10}", um.recall[ix], um.ndcg[ix]));
            }
            writeln!(w, "{row}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Aggregate metrics plus metadata as JSON.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Aggregate<'a> {
            fingerprint: &'a str,
            ks: &'a [usize],
            recall: &'a [f64],
            ndcg: &'a [f64],
            evaluated_users: usize,
            skipped_users: usize,
        }
        let agg = Aggregate {
            fingerprint: &self.fingerprint,
            ks: &self.ks,
            recall: &self.aggregate_recall,
            ndcg: &self.aggregate_ndcg,
            evaluated_users: self.evaluated_users,
            skipped_users: self.skipped_users,
        };
        let mut bytes =
            serde_json::to_vec_pretty(&agg).map_err(|e| Error::invalid(e.to_string()))?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Evaluates every user with at least one relevant item, ranking all items
/// outside that user's exclusion list. Users without relevant items are
/// counted as skipped.
pub fn evaluate(
    embs: &Propagated,
    exclude_by_user: &[Vec<usize>],
    relevant_by_user: &[Vec<usize>],
    ks: &[usize],
    fingerprint: &str,
) -> EvalReport {
    let num_users = embs.user_final.rows();
    let mut per_user = Vec::new();
    let mut skipped = 0usize;
    let empty: Vec<usize> = Vec::new();
    for user in 0..num_users {
        let relevant_list = relevant_by_user.get(user).unwrap_or(&empty);
        if relevant_list.is_empty() {
            skipped += 1;
            continue;
        }
        let exclude = exclude_by_user.get(user).unwrap_or(&empty);
        let ranked = rank_items(embs, user, exclude);
        let relevant: HashSet<usize> = relevant_list.iter().copied().collect();
        let recall = ks
            .iter()
            .map(|&k| recall_at_k(&ranked, &relevant, k))
            .collect();
        let ndcg = ks
            .iter()
            .map(|&k| ndcg_at_k(&ranked, &relevant, k))
            .collect();
        per_user.push(UserMetrics { user, recall, ndcg });
    }
    let evaluated = per_user.len();
    let mut aggregate_recall = vec![0.0; ks.len()];
    let mut aggregate_ndcg = vec![0.0; ks.len()];
    for um in &per_user {
        for ix in 0..ks.len() {
            aggregate_recall[ix] += um.recall[ix];
            aggregate_ndcg[ix] += um.ndcg[ix];
        }
    }
    if evaluated > 0 {
        for ix in 0..ks.len() {
            aggregate_recall[ix] /= evaluated as f64;
            aggregate_ndcg[ix] /= evaluated as f64;
        }
    }
    EvalReport {
        ks: ks.to_vec(),
        per_user,
        aggregate_recall,
        aggregate_ndcg,
        evaluated_users: evaluated,
        skipped_users: skipped,
        fingerprint: fingerprint.to_string(),
    }
}

/// Mean NDCG@K over users with at least one relevant item; `None` when no
/// user qualifies. This is the early-stopping signal during training.
pub fn mean_ndcg_at_k(
    embs: &Propagated,
    exclude_by_user: &[Vec<usize>],
    relevant_by_user: &[Vec<usize>],
    k: usize,
) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let empty: Vec<usize> = Vec::new();
    for user in 0..embs.user_final.rows() {
        let relevant_list = relevant_by_user.get(user).unwrap_or(&empty);
        if relevant_list.is_empty() {
            continue;
        }
        let exclude = exclude_by_user.get(user).unwrap_or(&empty);
        let ranked = rank_items(embs, user, exclude);
        let relevant: HashSet<usize> = relevant_list.iter().copied().collect();
        total += ndcg_at_k(&ranked, &relevant, k);
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}

/// Which metric a comparison runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Recall,
    Ndcg,
}

/// Two-sided paired t-test over per-user metric differences for the users
/// common to both reports. Returns (t statistic, p-value). Zero-variance
/// differences yield p = 1 when the mean difference is zero, else p = 0.
pub fn paired_t_test(
    a: &EvalReport,
    b: &EvalReport,
    metric: MetricKind,
    k: usize,
) -> Result<(f64, f64)> {
    let k_a = a
        .ks
        .iter()
        .position(|&x| x == k)
        .ok_or_else(|| Error::invalid(format!("report lacks K={k}")))?;
    let k_b = b
        .ks
        .iter()
        .position(|&x| x == k)
        .ok_or_else(|| Error::invalid(format!("report lacks K={k}")))?;
    let pick = |um: &UserMetrics, ix: usize| match metric {
        MetricKind::Recall => um.recall[ix],
        MetricKind::Ndcg => um.ndcg[ix],
    };
    let b_by_user: std::collections::HashMap<usize, f64> = b
        .per_user
        .iter()
        .map(|um| (um.user, pick(um, k_b)))
        .collect();
    let diffs: Vec<f64> = a
        .per_user
        .iter()
        .filter_map(|um| b_by_user.get(&um.user).map(|&vb| pick(um, k_a) - vb))
        .collect();
    t_test_on_differences(&diffs)
}

/// Paired t-test core on precomputed differences.
pub fn t_test_on_differences(diffs: &[f64]) -> Result<(f64, f64)> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "paired t-test needs at least 2 common users, got {n}"
        )));
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY * mean.signum(), 0.0)
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist =
        StudentsT::new(0.0, 1.0, n as f64 - 1.0).map_err(|e| Error::Numeric(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((t, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, DenseMatrix};
    use rand::Rng;

    fn embs_from_scores(scores: &[f64]) -> Propagated {
        // One user with a 1-dim embedding of 1.0; item embeddings equal the
        // desired scores.
        Propagated {
            user_final: DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap(),
            item_final: DenseMatrix::from_vec(scores.len(), 1, scores.to_vec()).unwrap(),
            per_layer: None,
        }
    }

    #[test]
    fn ranking_hand_cases() {
        let embs = embs_from_scores(&[0.1, 0.9, 0.5]);
        assert_eq!(rank_items(&embs, 0, &[]), vec![1, 2, 0]);
        assert_eq!(rank_items(&embs, 0, &[1]), vec![2, 0]);
        let tied = embs_from_scores(&[0.5, 0.5, 0.5]);
        assert_eq!(rank_items(&tied, 0, &[]), vec![0, 1, 2]);
    }

    #[test]
    fn recall_hand_cases() {
        let relevant: HashSet<usize> = [10, 11].into_iter().collect();
        let ranked = vec![10, 1, 2, 3, 4];
        assert!((recall_at_k(&ranked, &relevant, 5) - 0.5).abs() < 1e-12);
        let ranked = vec![11, 10, 2];
        assert!((recall_at_k(&ranked, &relevant, 5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_matches_set_intersection_oracle() {
        let mut rng = seeded_rng(3);
        for _ in 0..200 {
            let num_items = 30;
            let mut ranked: Vec<usize> = (0..num_items).collect();
            for i in (1..num_items).rev() {
                let j = rng.gen_range(0..=i);
                ranked.swap(i, j);
            }
            let relevant: HashSet<usize> = (0..num_items).filter(|_| rng.gen_bool(0.2)).collect();
            if relevant.is_empty() {
                continue;
            }
            let k = rng.gen_range(1..=num_items);
            let top: HashSet<usize> = ranked.iter().take(k).copied().collect();
            let oracle = top.intersection(&relevant).count() as f64 / relevant.len() as f64;
            assert!((recall_at_k(&ranked, &relevant, k) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn ndcg_hand_cases() {
        let relevant: HashSet<usize> = [7].into_iter().collect();
        assert!((ndcg_at_k(&[7, 1, 2], &relevant, 5) - 1.0).abs() < 1e-12);

        // Relevant {A, B}, A at rank 1, B absent, K = 5:
        // DCG = 1, IDCG = 1 + 1/log2(3).
        let relevant: HashSet<usize> = [7, 8].into_iter().collect();
        let got = ndcg_at_k(&[7, 1, 2, 3, 4], &relevant, 5);
        let expect = 1.0 / (1.0 + 1.0 / 3f64.log2());
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.6131).abs() < 1e-4);

        assert_eq!(ndcg_at_k(&[1, 2, 3], &relevant, 3), 0.0);
    }

    #[test]
    fn ndcg_is_one_when_prefix_is_relevant() {
        let relevant: HashSet<usize> = [4, 5, 6].into_iter().collect();
        assert!((ndcg_at_k(&[5, 4, 6, 0, 1], &relevant, 5) - 1.0).abs() < 1e-12);
        // More relevant items than K: top-K all relevant still gives 1.
        assert!((ndcg_at_k(&[5, 4, 6, 0, 1], &relevant, 2) - 1.0).abs() < 1e-12);
    }

    // Recall is monotone in K. NDCG is not, in general: the ideal DCG is
    // truncated at min(K, |relevant|), so it grows with K too (e.g. relevant
    // {a, b} with a ranked first gives NDCG@1 = 1 but NDCG@2 ~ 0.613). Once
    // K reaches |relevant| the ideal side is constant and NDCG is monotone.
    #[test]
    fn metrics_monotone_in_k() {
        let mut rng = seeded_rng(5);
        for _ in 0..50 {
            let ranked: Vec<usize> = (0..20).collect();
            let relevant: HashSet<usize> = (0..20usize).filter(|_| rng.gen_bool(0.3)).collect();
            if relevant.is_empty() {
                continue;
            }
            let mut prev_r = 0.0;
            let mut prev_n = 0.0;
            for k in 1..=20 {
                let r = recall_at_k(&ranked, &relevant, k);
                let n = ndcg_at_k(&ranked, &relevant, k);
                assert!(r >= prev_r - 1e-12);
                if k > relevant.len() {
                    assert!(n >= prev_n - 1e-12);
                }
                assert!((0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&n));
                prev_r = r;
                prev_n = n;
            }
        }
    }

    #[test]
    fn evaluate_skips_users_without_relevant_items() {
        let embs = Propagated {
            user_final: DenseMatrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap(),
            item_final: DenseMatrix::from_vec(3, 1, vec![0.3, 0.2, 0.1]).unwrap(),
            per_layer: None,
        };
        let exclude = vec![vec![], vec![]];
        let relevant = vec![vec![0], vec![]];
        let report = evaluate(&embs, &exclude, &relevant, &[5], "fp");
        assert_eq!(report.evaluated_users, 1);
        assert_eq!(report.skipped_users, 1);
        assert!((report.recall(5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn t_test_identical_reports() {
        let diffs = vec![0.0; 10];
        let (_, p) = t_test_on_differences(&diffs).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn t_test_constant_shift() {
        let diffs = vec![0.1; 100];
        let (_, p) = t_test_on_differences(&diffs).unwrap();
        assert!(p < 1e-10);
    }

    #[test]
    fn t_test_needs_two_users() {
        assert!(t_test_on_differences(&[0.1]).is_err());
    }

    // Numeric-integration oracle for the t CDF: Simpson quadrature of the
    // density, using only the log-gamma function.
    fn t_two_sided_p_oracle(t: f64, df: f64) -> f64 {
        use statrs::function::gamma::ln_gamma;
        let log_norm = ln_gamma((df + 1.0) / 2.0)
            - ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let pdf = |x: f64| (log_norm - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        let upper = t.abs();
        let n = 20_000usize;
        let h = upper / n as f64;
        let mut integral = pdf(0.0) + pdf(upper);
        for i in 1..n {
            let x = i as f64 * h;
            integral += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(x);
        }
        integral *= h / 3.0;
        2.0 * (0.5 - integral)
    }

    #[test]
    fn t_test_matches_quadrature_oracle() {
        let mut rng = seeded_rng(9);
        for trial in 0..20 {
            let n = 12 + trial;
            let diffs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) + 0.08).collect();
            let (t, p) = t_test_on_differences(&diffs).unwrap();
            let oracle = t_two_sided_p_oracle(t, n as f64 - 1.0);
            assert!((p - oracle).abs() < 1e-6, "trial {trial}: {p} vs {oracle}");
        }
    }

    #[test]
    fn report_files_round_trip_deterministically() {
        let embs = Propagated {
            user_final: DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            item_final: DenseMatrix::from_vec(4, 2, vec![0.9, 0.0, 0.0, 0.8, 0.4, 0.4, 0.1, 0.2])
                .unwrap(),
            per_layer: None,
        };
        let exclude = vec![vec![0], vec![]];
        let relevant = vec![vec![2], vec![1, 3]];
        let report = evaluate(&embs, &exclude, &relevant, &[5, 10], "abc123");
        let dir = tempfile::tempdir().unwrap();
        let tsv_a = dir.path().join("a.tsv");
        let tsv_b = dir.path().join("b.tsv");
        report.write_tsv(&tsv_a).unwrap();
        report.write_tsv(&tsv_b).unwrap();
        assert_eq!(
            std::fs::read(&tsv_a).unwrap(),
            std::fs::read(&tsv_b).unwrap()
        );
        let json_path = dir.path().join("agg.json");
        report.write_json(&json_path).unwrap();
        let text = std::fs::read_to_string(&json_path).unwrap();
        assert!(text.contains("abc123"));
    }
}
