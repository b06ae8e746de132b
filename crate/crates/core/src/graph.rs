//! Bipartite interaction graph and the propagation model: symmetric
//! degree-normalized neighbor sums without transforms or nonlinearities,
//! layer-mean combination, inner-product scoring, and BPR training with
//! per-epoch negative sampling and early stopping on validation NDCG@10.
//! Baselines and ablation variants are expressed as initialization modes.

use crate::dataset::{sample_negative, Interaction, SplitDataset};
use crate::eval;
use crate::numerics::{dot, seeded_rng, AdamW, DenseMatrix};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;

const NEGATIVE_SAMPLER_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// CSR adjacency over train interactions, one view per side, with
/// inverse-sqrt degrees precomputed for the propagation normalizer.
#[derive(Debug, Clone)]
pub struct BipartiteGraph {
    num_users: usize,
    num_items: usize,
    user_offsets: Vec<usize>,
    user_items: Vec<usize>,
    item_offsets: Vec<usize>,
    item_users: Vec<usize>,
    user_inv_sqrt_deg: Vec<f64>,
    item_inv_sqrt_deg: Vec<f64>,
}

impl BipartiteGraph {
    pub fn from_interactions(
        interactions: &[Interaction],
        num_users: usize,
        num_items: usize,
    ) -> Self {
        let mut udeg = vec![0usize; num_users];
        let mut ideg = vec![0usize; num_items];
        for it in interactions {
            udeg[it.user] += 1;
            ideg[it.item] += 1;
        }
        let mut user_offsets = vec![0usize; num_users + 1];
        let mut item_offsets = vec![0usize; num_items + 1];
        for u in 0..num_users {
            user_offsets[u + 1] = user_offsets[u] + udeg[u];
        }
        for i in 0..num_items {
            item_offsets[i + 1] = item_offsets[i] + ideg[i];
        }
        let mut user_items = vec![0usize; interactions.len()];
        let mut item_users = vec![0usize; interactions.len()];
        let mut ucur = user_offsets.clone();
        let mut icur = item_offsets.clone();
        for it in interactions {
            user_items[ucur[it.user]] = it.item;
            ucur[it.user] += 1;
            item_users[icur[it.item]] = it.user;
            icur[it.item] += 1;
        }
        for u in 0..num_users {
            user_items[user_offsets[u]..user_offsets[u + 1]].sort_unstable();
        }
        for i in 0..num_items {
            item_users[item_offsets[i]..item_offsets[i + 1]].sort_unstable();
        }
        let user_inv_sqrt_deg = udeg
            .iter()
            .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
            .collect();
        let item_inv_sqrt_deg = ideg
            .iter()
            .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
            .collect();
        BipartiteGraph {
            num_users,
            num_items,
            user_offsets,
            user_items,
            item_offsets,
            item_users,
            user_inv_sqrt_deg,
            item_inv_sqrt_deg,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.user_items.len()
    }

    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.user_items[self.user_offsets[user]..self.user_offsets[user + 1]]
    }

    pub fn users_of(&self, item: usize) -> &[usize] {
        &self.item_users[self.item_offsets[item]..self.item_offsets[item + 1]]
    }

    pub fn user_degree(&self, user: usize) -> usize {
        self.user_offsets[user + 1] - self.user_offsets[user]
    }

    pub fn item_degree(&self, item: usize) -> usize {
        self.item_offsets[item + 1] - self.item_offsets[item]
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        self.items_of(user).binary_search(&item).is_ok()
    }
}

/// Final user/item embeddings after propagation, optionally with the
/// per-layer intermediates cached.
#[derive(Debug, Clone)]
pub struct Propagated {
    pub user_final: DenseMatrix,
    pub item_final: DenseMatrix,
    pub per_layer: Option<Vec<(DenseMatrix, DenseMatrix)>>,
}

/// Runs `layers` rounds of normalized message passing and combines all
/// layers (including layer 0) by arithmetic mean. Isolated nodes receive no
/// messages, so their final embedding is layer 0 divided by layers + 1.
pub fn propagate(
    user0: &DenseMatrix,
    item0: &DenseMatrix,
    layers: usize,
    graph: &BipartiteGraph,
    keep_layers: bool,
) -> Result<Propagated> {
    if user0.cols() != item0.cols() {
        return Err(Error::shape("user/item embedding dims differ"));
    }
    if user0.rows() != graph.num_users() || item0.rows() != graph.num_items() {
        return Err(Error::shape("embedding rows do not match graph"));
    }
    let dim = user0.cols();
    let mut cur_u = user0.clone();
    let mut cur_i = item0.clone();
    let mut sum_u = user0.clone();
    let mut sum_i = item0.clone();
    let mut cached = keep_layers.then(|| vec![(user0.clone(), item0.clone())]);
    for _ in 0..layers {
        let mut next_u = DenseMatrix::zeros(graph.num_users(), dim);
        let mut next_i = DenseMatrix::zeros(graph.num_items(), dim);
        for u in 0..graph.num_users() {
            let fu = graph.user_inv_sqrt_deg[u];
            let row = next_u.row_mut(u);
            for &i in graph.items_of(u) {
                let norm = fu * graph.item_inv_sqrt_deg[i];
                for (o, &v) in row.iter_mut().zip(cur_i.row(i)) {
                    *o += norm * v;
                }
            }
        }
        for i in 0..graph.num_items() {
            let fi = graph.item_inv_sqrt_deg[i];
            let row = next_i.row_mut(i);
            for &u in graph.users_of(i) {
                let norm = fi * graph.user_inv_sqrt_deg[u];
                for (o, &v) in row.iter_mut().zip(cur_u.row(u)) {
                    *o += norm * v;
                }
            }
        }
        sum_u.scaled_add(1.0, &next_u)?;
        sum_i.scaled_add(1.0, &next_i)?;
        if let Some(cache) = cached.as_mut() {
            cache.push((next_u.clone(), next_i.clone()));
        }
        cur_u = next_u;
        cur_i = next_i;
    }
    let denom = 1.0 / (layers as f64 + 1.0);
    sum_u.scale(denom);
    sum_i.scale(denom);
    Ok(Propagated {
        user_final: sum_u,
        item_final: sum_i,
        per_layer: cached,
    })
}

/// Predicted preference: inner product of final embeddings.
pub fn score(embs: &Propagated, user: usize, item: usize) -> Result<f64> {
    if user >= embs.user_final.rows() || item >= embs.item_final.rows() {
        return Err(Error::invalid(format!(
            "score index ({user}, {item}) out of range"
        )));
    }
    Ok(dot(embs.user_final.row(user), embs.item_final.row(item)))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))` without overflow; `-ln sigmoid(m) = softplus(-m)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Where the BPR L2 term applies: the propagated final embeddings (as the
/// objective is written) or the layer-0 parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegTarget {
    Final,
    LayerZero,
}

/// Pairwise ranking loss summed over (user, positive, negative) triples:
/// `-ln sigmoid(s_ui - s_uj)`, plus `lambda * (|e_u|^2 + |e_i|^2)` per triple
/// when regularizing final embeddings.
pub fn bpr_loss(
    embs: &Propagated,
    triples: &[(usize, usize, usize)],
    lambda: f64,
    reg: RegTarget,
) -> f64 {
    let mut total = 0.0;
    for &(u, i, j) in triples {
        let eu = embs.user_final.row(u);
        let margin = dot(eu, embs.item_final.row(i)) - dot(eu, embs.item_final.row(j));
        total += softplus(-margin);
        if reg == RegTarget::Final {
            total += lambda
                * (eu.iter().map(|v| v * v).sum::<f64>()
                    + embs.item_final.row(i).iter().map(|v| v * v).sum::<f64>());
        }
    }
    total
}

/// Loss plus gradients with respect to the final embeddings, summed over
/// triples. Layer-zero regularization is handled by the caller.
pub fn bpr_loss_grads(
    embs: &Propagated,
    triples: &[(usize, usize, usize)],
    lambda: f64,
    reg: RegTarget,
) -> (f64, DenseMatrix, DenseMatrix) {
    let mut grad_u = DenseMatrix::zeros(embs.user_final.rows(), embs.user_final.cols());
    let mut grad_i = DenseMatrix::zeros(embs.item_final.rows(), embs.item_final.cols());
    let mut total = 0.0;
    for &(u, i, j) in triples {
        let eu = embs.user_final.row(u);
        let ei = embs.item_final.row(i);
        let ej = embs.item_final.row(j);
        let margin = dot(eu, ei) - dot(eu, ej);
        total += softplus(-margin);
        // d/dm of -ln sigmoid(m) is sigmoid(m) - 1.
        let coeff = sigmoid(margin) - 1.0;
        let gu = grad_u.row_mut(u);
        for (k, g) in gu.iter_mut().enumerate() {
            *g += coeff * (ei[k] - ej[k]);
        }
        let gi = grad_i.row_mut(i);
        for (k, g) in gi.iter_mut().enumerate() {
            *g += coeff * eu[k];
        }
        let gj = grad_i.row_mut(j);
        for (k, g) in gj.iter_mut().enumerate() {
            *g -= coeff * eu[k];
        }
        if reg == RegTarget::Final {
            total +=
                lambda * (eu.iter().map(|v| v * v).sum::<f64>() + ei.iter().map(|v| v * v).sum::<f64>());
            let gu = grad_u.row_mut(u);
            for (k, g) in gu.iter_mut().enumerate() {
                *g += 2.0 * lambda * eu[k];
            }
            let gi = grad_i.row_mut(i);
            for (k, g) in gi.iter_mut().enumerate() {
                *g += 2.0 * lambda * ei[k];
            }
        }
    }
    (total, grad_u, grad_i)
}

/// Initialization switch selecting the full model, single-modality and
/// no-review ablations, or the random baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// Content-initialized items, review-attention-initialized users.
    Full,
    /// Text codes only for items (image modality removed).
    TextOnly,
    /// Image codes only for items (title modality removed).
    ImageOnly,
    /// Content-initialized items, randomly initialized users.
    NoReviewInit,
    /// Random users and items; propagation unchanged (the plain GCN baseline).
    Random,
    /// Random users and items with zero propagation layers (plain BPR-MF).
    Bprmf,
}

impl InitMode {
    pub const ALL: [InitMode; 6] = [
        InitMode::Full,
        InitMode::TextOnly,
        InitMode::ImageOnly,
        InitMode::NoReviewInit,
        InitMode::Random,
        InitMode::Bprmf,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InitMode::Full => "printf",
            InitMode::TextOnly => "no_image",
            InitMode::ImageOnly => "no_title",
            InitMode::NoReviewInit => "no_raum",
            InitMode::Random => "none",
            InitMode::Bprmf => "bprmf",
        }
    }

    pub fn parse(s: &str) -> Result<InitMode> {
        Ok(match s {
            "printf" => InitMode::Full,
            "no_image" => InitMode::TextOnly,
            "no_title" => InitMode::ImageOnly,
            "no_raum" => InitMode::NoReviewInit,
            "none" => InitMode::Random,
            "bprmf" => InitMode::Bprmf,
            other => return Err(Error::invalid(format!("unknown mode `{other}`"))),
        })
    }

    /// Whether item embeddings start from compressed content.
    pub fn uses_content(&self) -> bool {
        matches!(
            self,
            InitMode::Full | InitMode::TextOnly | InitMode::ImageOnly | InitMode::NoReviewInit
        )
    }

    /// Whether user embeddings start from the review-attention construction.
    pub fn uses_review_init(&self) -> bool {
        matches!(
            self,
            InitMode::Full | InitMode::TextOnly | InitMode::ImageOnly
        )
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Trainable layer-0 embeddings plus optimizer and objective settings.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub user0: DenseMatrix,
    pub item0: DenseMatrix,
    pub num_layers: usize,
    pub lambda_bpr: f64,
    pub reg: RegTarget,
    pub mode: InitMode,
    pub seed: u64,
    pub freeze_items: bool,
    pub optimizer: AdamW,
}

impl ModelState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        user0: DenseMatrix,
        item0: DenseMatrix,
        num_layers: usize,
        lambda_bpr: f64,
        reg: RegTarget,
        mode: InitMode,
        seed: u64,
        lr: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        if user0.cols() != item0.cols() {
            return Err(Error::shape("user/item dims differ"));
        }
        if mode == InitMode::Bprmf {
            if num_layers != 0 {
                return Err(Error::invalid("bprmf mode runs with zero layers"));
            }
        } else if num_layers == 0 || num_layers > 9 {
            return Err(Error::invalid(format!(
                "layer count {num_layers} outside the supported 1..=9 range"
            )));
        }
        let param_count = user0.data().len() + item0.data().len();
        Ok(ModelState {
            user0,
            item0,
            num_layers,
            lambda_bpr,
            reg,
            mode,
            seed,
            freeze_items: false,
            optimizer: AdamW::new(param_count, lr, weight_decay),
        })
    }

    pub fn dim(&self) -> usize {
        self.user0.cols()
    }

    pub fn propagate(&self, graph: &BipartiteGraph) -> Result<Propagated> {
        propagate(&self.user0, &self.item0, self.num_layers, graph, false)
    }
}

/// Uniform random layer-0 embeddings with fan-in scaling for the given width.
pub fn random_embeddings(rows: usize, dim: usize, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::uniform(rows, dim, 1.0 / (dim as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch: 4096,
            patience: 20,
            eval_every: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_ndcg10: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub best_epoch: usize,
    pub best_val_ndcg10: Option<f64>,
}

impl TrainTrace {
    pub fn write_tsv(&self, path: &Path, fingerprint: &str) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "# fingerprint={fingerprint}").map_err(|e| Error::io(path, e))?;
        writeln!(w, "epoch\tmean_loss\tval_ndcg10").map_err(|e| Error::io(path, e))?;
        for row in &self.rows {
            let val = row
                .val_ndcg10
                .map(|v| format!("{v:.10}"))
                .unwrap_or_else(|| "-".into());
            writeln!(w, "{}\t{:.10}\t{}", row.epoch, row.mean_loss, val)
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One negative per observed train interaction per epoch, mean-scaled BPR
/// steps backpropagated through the (linear, symmetric) propagation, early
/// stopping on validation NDCG@10. The state holds the best-validation
/// parameters on return; a non-finite loss restores them and aborts.
pub fn train(
    state: &mut ModelState,
    graph: &BipartiteGraph,
    split: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    let mut rng = seeded_rng(cfg.seed ^ NEGATIVE_SAMPLER_SALT);
    let num_users = graph.num_users();
    let train_items = SplitDataset::items_by_user(&split.train, num_users);
    let val_items = SplitDataset::items_by_user(&split.val, num_users);
    let have_val = !split.val.is_empty();

    let mut best_user0 = state.user0.clone();
    let mut best_item0 = state.item0.clone();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_since_best = 0usize;
    let mut rows = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut triples: Vec<(usize, usize, usize)> = Vec::with_capacity(split.train.len());
        for it in &split.train {
            let j = sample_negative(it.user, graph, &mut rng)?;
            triples.push((it.user, it.item, j));
        }
        triples.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in triples.chunks(cfg.batch.max(1)) {
            let prop = propagate(&state.user0, &state.item0, state.num_layers, graph, false)?;
            let (loss, gu_final, gi_final) =
                bpr_loss_grads(&prop, batch, state.lambda_bpr, state.reg);
            loss_sum += loss;
            if !loss.is_finite() {
                state.user0 = best_user0;
                state.item0 = best_item0;
                return Err(Error::Numeric(format!(
                    "non-finite BPR loss at epoch {epoch}; best checkpoint restored"
                )));
            }
            // The propagation map is symmetric, so backprop through it is the
            // same propagation applied to the final-embedding gradients.
            let back = propagate(&gu_final, &gi_final, state.num_layers, graph, false)?;
            let mut g_user = back.user_final;
            let mut g_item = back.item_final;
            if state.reg == RegTarget::LayerZero {
                for &(u, i, _) in batch {
                    for (k, g) in g_user.row_mut(u).iter_mut().enumerate() {
                        *g += 2.0 * state.lambda_bpr * state.user0.at(u, k);
                    }
                    for (k, g) in g_item.row_mut(i).iter_mut().enumerate() {
                        *g += 2.0 * state.lambda_bpr * state.item0.at(i, k);
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            g_user.scale(scale);
            g_item.scale(if state.freeze_items { 0.0 } else { scale });
            let ModelState {
                user0,
                item0,
                optimizer,
                ..
            } = state;
            optimizer.step(
                &mut [user0.data_mut(), item0.data_mut()],
                &[g_user.data(), g_item.data()],
            )?;
        }

        let mean_loss = loss_sum / split.train.len().max(1) as f64;
        let mut val_metric = None;
        if have_val && epoch % cfg.eval_every == 0 {
            let prop = propagate(&state.user0, &state.item0, state.num_layers, graph, false)?;
            let ndcg = eval::mean_ndcg_at_k(&prop, &train_items, &val_items, 10);
            val_metric = ndcg;
            if let Some(m) = ndcg {
                if m > best_metric {
                    best_metric = m;
                    best_user0 = state.user0.clone();
                    best_item0 = state.item0.clone();
                    best_epoch = epoch;
                    epochs_since_best = 0;
                } else {
                    epochs_since_best += cfg.eval_every;
                }
            }
        }
        rows.push(TraceRow {
            epoch,
            mean_loss,
            val_ndcg10: val_metric,
        });
        if have_val && epochs_since_best >= cfg.patience {
            break;
        }
    }

    if best_metric.is_finite() {
        state.user0 = best_user0;
        state.item0 = best_item0;
    } else {
        best_epoch = rows.last().map(|r| r.epoch).unwrap_or(0);
    }
    Ok(TrainTrace {
        rows,
        best_epoch,
        best_val_ndcg10: if best_metric.is_finite() {
            Some(best_metric)
        } else {
            None
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    num_users: usize,
    num_items: usize,
    dim: usize,
    layers: usize,
    mode: String,
    seed: u64,
    lambda_bpr: f64,
    reg_layer0: bool,
    lr: f64,
    weight_decay: f64,
    step: u64,
    fingerprint: String,
}

/// Writes one JSON header line (dims, layers, mode, seed, fingerprint)
/// followed by a little-endian f64 payload: user0, item0, optimizer moments.
pub fn save_checkpoint(path: &Path, state: &ModelState, fingerprint: &str) -> Result<()> {
    let header = CheckpointHeader {
        num_users: state.user0.rows(),
        num_items: state.item0.rows(),
        dim: state.dim(),
        layers: state.num_layers,
        mode: state.mode.as_str().to_string(),
        seed: state.seed,
        lambda_bpr: state.lambda_bpr,
        reg_layer0: state.reg == RegTarget::LayerZero,
        lr: state.optimizer.lr,
        weight_decay: state.optimizer.weight_decay,
        step: state.optimizer.step_count(),
        fingerprint: fingerprint.to_string(),
    };
    let mut buf = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
    buf.push(b'\n');
    let (m, v) = state.optimizer.moments();
    for part in [state.user0.data(), state.item0.data(), m, v] {
        for &x in part {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint back into a [`ModelState`]; returns the embedded
/// fingerprint alongside.
pub fn load_checkpoint(path: &Path) -> Result<(ModelState, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::invalid(format!("{}: missing header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::invalid(format!("{}: bad header: {e}", path.display())))?;
    let body = &bytes[newline + 1..];
    let n_user = header.num_users * header.dim;
    let n_item = header.num_items * header.dim;
    let n_params = n_user + n_item;
    if body.len() != 3 * n_params * 8 {
        return Err(Error::invalid(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            3 * n_params * 8,
            body.len()
        )));
    }
    let mut values = Vec::with_capacity(3 * n_params);
    for chunk in body.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
    }
    let user0 = DenseMatrix::from_vec(header.num_users, header.dim, values[..n_user].to_vec())?;
    let item0 =
        DenseMatrix::from_vec(header.num_items, header.dim, values[n_user..n_params].to_vec())?;
    let m = values[n_params..2 * n_params].to_vec();
    let v = values[2 * n_params..].to_vec();
    let optimizer = AdamW::restore(header.lr, header.weight_decay, header.step, m, v)?;
    let state = ModelState {
        user0,
        item0,
        num_layers: header.layers,
        lambda_bpr: header.lambda_bpr,
        reg: if header.reg_layer0 {
            RegTarget::LayerZero
        } else {
            RegTarget::Final
        },
        mode: InitMode::parse(&header.mode)?,
        seed: header.seed,
        freeze_items: false,
        optimizer,
    };
    Ok((state, header.fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::max_rel_error;

    fn pair(user: usize, item: usize) -> Interaction {
        Interaction {
            user,
            item,
            review_row: None,
        }
    }

    fn random_bipartite(
        num_users: usize,
        num_items: usize,
        edge_prob: f64,
        seed: u64,
    ) -> (Vec<Interaction>, BipartiteGraph) {
        let mut rng = seeded_rng(seed);
        let mut interactions = Vec::new();
        for u in 0..num_users {
            for i in 0..num_items {
                if rng.gen_bool(edge_prob) {
                    interactions.push(pair(u, i));
                }
            }
        }
        let graph = BipartiteGraph::from_interactions(&interactions, num_users, num_items);
        (interactions, graph)
    }

    /// Dense reference: stack users then items, build the symmetric
    /// normalized adjacency, average its powers applied to the embeddings.
    fn dense_propagation_oracle(
        user0: &DenseMatrix,
        item0: &DenseMatrix,
        layers: usize,
        graph: &BipartiteGraph,
    ) -> (DenseMatrix, DenseMatrix) {
        let nu = graph.num_users();
        let ni = graph.num_items();
        let n = nu + ni;
        let mut adj = DenseMatrix::zeros(n, n);
        for u in 0..nu {
            for &i in graph.items_of(u) {
                let norm = 1.0
                    / ((graph.user_degree(u) as f64).sqrt()
                        * (graph.item_degree(i) as f64).sqrt());
                *adj.at_mut(u, nu + i) = norm;
                *adj.at_mut(nu + i, u) = norm;
            }
        }
        let dim = user0.cols();
        let mut stacked = DenseMatrix::zeros(n, dim);
        for u in 0..nu {
            stacked.row_mut(u).copy_from_slice(user0.row(u));
        }
        for i in 0..ni {
            stacked.row_mut(nu + i).copy_from_slice(item0.row(i));
        }
        let mut acc = stacked.clone();
        let mut cur = stacked;
        for _ in 0..layers {
            cur = adj.matmul(&cur).unwrap();
            acc.scaled_add(1.0, &cur).unwrap();
        }
        acc.scale(1.0 / (layers as f64 + 1.0));
        let mut out_u = DenseMatrix::zeros(nu, dim);
        let mut out_i = DenseMatrix::zeros(ni, dim);
        for u in 0..nu {
            out_u.row_mut(u).copy_from_slice(acc.row(u));
        }
        for i in 0..ni {
            out_i.row_mut(i).copy_from_slice(acc.row(nu + i));
        }
        (out_u, out_i)
    }

    #[test]
    fn sole_mutual_neighbors_average() {
        let graph = BipartiteGraph::from_interactions(&[pair(0, 0)], 1, 1);
        let user0 = DenseMatrix::from_vec(1, 2, vec![2.0, 0.0]).unwrap();
        let item0 = DenseMatrix::from_vec(1, 2, vec![0.0, 4.0]).unwrap();
        let prop = propagate(&user0, &item0, 1, &graph, false).unwrap();
        assert_eq!(prop.user_final.row(0), &[1.0, 2.0]);
        assert_eq!(prop.item_final.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn zero_embeddings_propagate_to_zero() {
        let (_, graph) = random_bipartite(5, 4, 0.4, 3);
        let prop = propagate(
            &DenseMatrix::zeros(5, 3),
            &DenseMatrix::zeros(4, 3),
            4,
            &graph,
            false,
        )
        .unwrap();
        assert!(prop.user_final.data().iter().all(|&v| v == 0.0));
        assert!(prop.item_final.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn propagation_matches_dense_oracle() {
        for seed in 0..10u64 {
            let (_, graph) = random_bipartite(8, 6, 0.35, seed);
            let mut rng = seeded_rng(seed + 100);
            let user0 = DenseMatrix::uniform(8, 5, 1.0, &mut rng);
            let item0 = DenseMatrix::uniform(6, 5, 1.0, &mut rng);
            for layers in [1usize, 2, 3] {
                let prop = propagate(&user0, &item0, layers, &graph, false).unwrap();
                let (ou, oi) = dense_propagation_oracle(&user0, &item0, layers, &graph);
                assert!(max_rel_error(prop.user_final.data(), ou.data()) < 1e-9);
                assert!(max_rel_error(prop.item_final.data(), oi.data()) < 1e-9);
            }
        }
    }

    #[test]
    fn propagation_is_linear() {
        let (_, graph) = random_bipartite(6, 5, 0.4, 11);
        let mut rng = seeded_rng(12);
        let u_a = DenseMatrix::uniform(6, 4, 1.0, &mut rng);
        let i_a = DenseMatrix::uniform(5, 4, 1.0, &mut rng);
        let u_b = DenseMatrix::uniform(6, 4, 1.0, &mut rng);
        let i_b = DenseMatrix::uniform(5, 4, 1.0, &mut rng);

        let mut u_scaled = u_a.clone();
        u_scaled.scale(2.5);
        let mut i_scaled = i_a.clone();
        i_scaled.scale(2.5);
        let p1 = propagate(&u_scaled, &i_scaled, 3, &graph, false).unwrap();
        let mut p2 = propagate(&u_a, &i_a, 3, &graph, false).unwrap();
        p2.user_final.scale(2.5);
        p2.item_final.scale(2.5);
        assert!(max_rel_error(p1.user_final.data(), p2.user_final.data()) < 1e-9);

        let mut u_sum = u_a.clone();
        u_sum.scaled_add(1.0, &u_b).unwrap();
        let mut i_sum = i_a.clone();
        i_sum.scaled_add(1.0, &i_b).unwrap();
        let p_sum = propagate(&u_sum, &i_sum, 3, &graph, false).unwrap();
        let pa = propagate(&u_a, &i_a, 3, &graph, false).unwrap();
        let pb = propagate(&u_b, &i_b, 3, &graph, false).unwrap();
        let mut combined = pa.user_final.clone();
        combined.scaled_add(1.0, &pb.user_final).unwrap();
        assert!(max_rel_error(p_sum.user_final.data(), combined.data()) < 1e-9);
    }

    #[test]
    fn final_embedding_is_mean_of_cached_layers() {
        let (_, graph) = random_bipartite(7, 5, 0.4, 21);
        let mut rng = seeded_rng(22);
        let user0 = DenseMatrix::uniform(7, 3, 1.0, &mut rng);
        let item0 = DenseMatrix::uniform(5, 3, 1.0, &mut rng);
        let prop = propagate(&user0, &item0, 4, &graph, true).unwrap();
        let layers = prop.per_layer.as_ref().unwrap();
        assert_eq!(layers.len(), 5);
        let mut mean_u = DenseMatrix::zeros(7, 3);
        for (lu, _) in layers {
            mean_u.scaled_add(1.0, lu).unwrap();
        }
        mean_u.scale(1.0 / 5.0);
        assert!(max_rel_error(mean_u.data(), prop.user_final.data()) < 1e-12);
    }

    #[test]
    fn message_normalization_spot_check() {
        // u0 with degree 2, i0 with degree 1: message i0 -> u0 is
        // e_i0 / sqrt(2 * 1).
        let graph = BipartiteGraph::from_interactions(&[pair(0, 0), pair(0, 1)], 1, 2);
        let user0 = DenseMatrix::zeros(1, 1);
        let item0 = DenseMatrix::from_vec(2, 1, vec![3.0, 5.0]).unwrap();
        let prop = propagate(&user0, &item0, 1, &graph, true).unwrap();
        let layer1_user = &prop.per_layer.as_ref().unwrap()[1].0;
        let expect = 3.0 / (2f64).sqrt() + 5.0 / (2f64).sqrt();
        assert!((layer1_user.at(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn isolated_nodes_keep_scaled_layer_zero() {
        // Item 1 never interacts: its final embedding is layer0 / (L + 1).
        let graph = BipartiteGraph::from_interactions(&[pair(0, 0)], 1, 2);
        let user0 = DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        let item0 = DenseMatrix::from_vec(2, 1, vec![1.0, 6.0]).unwrap();
        let prop = propagate(&user0, &item0, 2, &graph, false).unwrap();
        assert!((prop.item_final.at(1, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn score_oracle_and_errors() {
        let embs = Propagated {
            user_final: DenseMatrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap(),
            item_final: DenseMatrix::from_vec(2, 3, vec![0.5, 0.5, 0.5, 1.0, 0.0, -1.0]).unwrap(),
            per_layer: None,
        };
        assert!((score(&embs, 0, 0).unwrap() - 3.0).abs() < 1e-12);
        assert!((score(&embs, 0, 1).unwrap() - (-2.0)).abs() < 1e-12);
        assert!(score(&embs, 1, 0).is_err());
        assert!(score(&embs, 0, 2).is_err());
    }

    #[test]
    fn bpr_loss_equal_scores_is_ln2() {
        let embs = Propagated {
            user_final: DenseMatrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
            item_final: DenseMatrix::from_vec(2, 2, vec![0.3, 1.0, 0.3, -1.0]).unwrap(),
            per_layer: None,
        };
        let loss = bpr_loss(&embs, &[(0, 0, 1)], 0.0, RegTarget::Final);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn bpr_loss_saturates_at_large_margin() {
        let embs = Propagated {
            user_final: DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap(),
            item_final: DenseMatrix::from_vec(2, 1, vec![20.0, 0.0]).unwrap(),
            per_layer: None,
        };
        let loss = bpr_loss(&embs, &[(0, 0, 1)], 0.0, RegTarget::Final);
        assert!(loss < 1e-8);
    }

    #[test]
    fn bpr_loss_matches_direct_formula() {
        let mut rng = seeded_rng(31);
        let embs = Propagated {
            user_final: DenseMatrix::uniform(3, 4, 1.0, &mut rng),
            item_final: DenseMatrix::uniform(5, 4, 1.0, &mut rng),
            per_layer: None,
        };
        let triples = [(0, 1, 2), (1, 0, 4), (2, 3, 0)];
        let lambda = 0.03;
        let loss = bpr_loss(&embs, &triples, lambda, RegTarget::Final);
        let mut expect = 0.0;
        for &(u, i, j) in &triples {
            let sui = dot(embs.user_final.row(u), embs.item_final.row(i));
            let suj = dot(embs.user_final.row(u), embs.item_final.row(j));
            expect += -(1.0 / (1.0 + (-(sui - suj)).exp())).ln();
            expect += lambda
                * (embs.user_final.row(u).iter().map(|v| v * v).sum::<f64>()
                    + embs.item_final.row(i).iter().map(|v| v * v).sum::<f64>());
        }
        assert!((loss - expect).abs() < 1e-10);
    }

    // Full-pipeline gradient: loss(layer0) via propagate + BPR, analytic
    // gradient via symmetric backprop, checked against central differences.
    #[test]
    fn full_pipeline_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let (interactions, graph) = random_bipartite(5, 5, 0.5, seed);
            if interactions.is_empty() {
                continue;
            }
            let mut rng = seeded_rng(seed + 555);
            let user0 = DenseMatrix::uniform(5, 3, 0.8, &mut rng);
            let item0 = DenseMatrix::uniform(5, 3, 0.8, &mut rng);
            let mut triples = Vec::new();
            for it in &interactions {
                let j = sample_negative(it.user, &graph, &mut rng);
                if let Ok(j) = j {
                    triples.push((it.user, it.item, j));
                }
            }
            if triples.is_empty() {
                continue;
            }
            let lambda = 1e-3;

            let layers = 2;
            let prop = propagate(&user0, &item0, layers, &graph, false).unwrap();
            let (_, gu_f, gi_f) = bpr_loss_grads(&prop, &triples, lambda, RegTarget::Final);
            let back = propagate(&gu_f, &gi_f, layers, &graph, false).unwrap();

            let loss_at = |u_data: &[f64], i_data: &[f64]| {
                let u = DenseMatrix::from_vec(5, 3, u_data.to_vec()).unwrap();
                let i = DenseMatrix::from_vec(5, 3, i_data.to_vec()).unwrap();
                let p = propagate(&u, &i, layers, &graph, false).unwrap();
                bpr_loss(&p, &triples, lambda, RegTarget::Final)
            };
            let fd_u = crate::numerics::central_difference(
                |x| loss_at(x, item0.data()),
                user0.data(),
                1e-5,
            );
            let fd_i = crate::numerics::central_difference(
                |x| loss_at(user0.data(), x),
                item0.data(),
                1e-5,
            );
            assert!(
                max_rel_error(back.user_final.data(), &fd_u) < 1e-4,
                "seed {seed} users"
            );
            assert!(
                max_rel_error(back.item_final.data(), &fd_i) < 1e-4,
                "seed {seed} items"
            );
        }
    }

    #[test]
    fn two_item_training_learns_preference() {
        let interactions = vec![pair(0, 0)];
        let graph = BipartiteGraph::from_interactions(&interactions, 1, 2);
        let split = SplitDataset {
            train: interactions,
            val: vec![],
            test: vec![],
            ratios: (1.0, 0.0, 0.0),
        };
        let mut rng = seeded_rng(77);
        let mut state = ModelState::new(
            random_embeddings(1, 4, &mut rng),
            random_embeddings(2, 4, &mut rng),
            1,
            1e-4,
            RegTarget::Final,
            InitMode::Random,
            77,
            1e-2,
            0.0,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            batch: 16,
            patience: 20,
            eval_every: 1,
            seed: 77,
        };
        train(&mut state, &graph, &split, &cfg).unwrap();
        let prop = state.propagate(&graph).unwrap();
        assert!(score(&prop, 0, 0).unwrap() > score(&prop, 0, 1).unwrap());
    }

    #[test]
    fn training_trace_is_deterministic() {
        let mut interactions = Vec::new();
        for u in 0..6 {
            for i in 0..4 {
                if (u + i) % 2 == 0 {
                    interactions.push(pair(u, i));
                }
            }
        }
        let graph = BipartiteGraph::from_interactions(&interactions, 6, 4);
        let split = SplitDataset {
            train: interactions.clone(),
            val: vec![pair(0, 1), pair(1, 0)],
            test: vec![],
            ratios: (0.8, 0.2, 0.0),
        };
        let run = || {
            let mut rng = seeded_rng(5);
            let mut state = ModelState::new(
                random_embeddings(6, 4, &mut rng),
                random_embeddings(4, 4, &mut rng),
                2,
                1e-4,
                RegTarget::Final,
                InitMode::Random,
                5,
                1e-3,
                1e-2,
            )
            .unwrap();
            let cfg = TrainConfig {
                epochs: 10,
                batch: 8,
                patience: 20,
                eval_every: 1,
                seed: 5,
            };
            let trace = train(&mut state, &graph, &split, &cfg).unwrap();
            (trace, state.user0.clone(), state.item0.clone())
        };
        let (ta, ua, ia) = run();
        let (tb, ub, ib) = run();
        assert_eq!(ua.data(), ub.data());
        assert_eq!(ia.data(), ib.data());
        for (ra, rb) in ta.rows.iter().zip(&tb.rows) {
            assert_eq!(ra.mean_loss.to_bits(), rb.mean_loss.to_bits());
            assert_eq!(
                ra.val_ndcg10.map(f64::to_bits),
                rb.val_ndcg10.map(f64::to_bits)
            );
        }
    }

    #[test]
    fn bprmf_mode_requires_zero_layers_and_scores_layer0() {
        let mut rng = seeded_rng(9);
        let user0 = random_embeddings(2, 3, &mut rng);
        let item0 = random_embeddings(2, 3, &mut rng);
        assert!(ModelState::new(
            user0.clone(),
            item0.clone(),
            1,
            0.0,
            RegTarget::Final,
            InitMode::Bprmf,
            9,
            1e-3,
            0.0
        )
        .is_err());
        let state = ModelState::new(
            user0.clone(),
            item0.clone(),
            0,
            0.0,
            RegTarget::Final,
            InitMode::Bprmf,
            9,
            1e-3,
            0.0,
        )
        .unwrap();
        let graph = BipartiteGraph::from_interactions(&[pair(0, 0), pair(1, 1)], 2, 2);
        let prop = state.propagate(&graph).unwrap();
        assert!(
            (score(&prop, 0, 1).unwrap() - dot(user0.row(0), item0.row(1))).abs() < 1e-12
        );
    }

    #[test]
    fn layer_zero_regularization_gradient_checks() {
        let (interactions, graph) = random_bipartite(4, 4, 0.6, 40);
        let mut rng = seeded_rng(41);
        let user0 = DenseMatrix::uniform(4, 2, 0.8, &mut rng);
        let item0 = DenseMatrix::uniform(4, 2, 0.8, &mut rng);
        let triples: Vec<_> = interactions
            .iter()
            .filter_map(|it| {
                sample_negative(it.user, &graph, &mut rng)
                    .ok()
                    .map(|j| (it.user, it.item, j))
            })
            .collect();
        let lambda = 1e-2;
        let layers = 2;

        // Loss with layer-0 regularization: plain BPR through propagation
        // plus lambda * (|u0|^2 + |i0|^2) per triple.
        let loss_at = |u_data: &[f64], i_data: &[f64]| {
            let u = DenseMatrix::from_vec(4, 2, u_data.to_vec()).unwrap();
            let i = DenseMatrix::from_vec(4, 2, i_data.to_vec()).unwrap();
            let p = propagate(&u, &i, layers, &graph, false).unwrap();
            let mut total = bpr_loss(&p, &triples, 0.0, RegTarget::LayerZero);
            for &(uu, ii, _) in &triples {
                total += lambda
                    * (u.row(uu).iter().map(|v| v * v).sum::<f64>()
                        + i.row(ii).iter().map(|v| v * v).sum::<f64>());
            }
            total
        };

        let prop = propagate(&user0, &item0, layers, &graph, false).unwrap();
        let (_, gu_f, gi_f) = bpr_loss_grads(&prop, &triples, lambda, RegTarget::LayerZero);
        let back = propagate(&gu_f, &gi_f, layers, &graph, false).unwrap();
        let mut g_user = back.user_final;
        let mut g_item = back.item_final;
        for &(u, i, _) in &triples {
            for (k, g) in g_user.row_mut(u).iter_mut().enumerate() {
                *g += 2.0 * lambda * user0.at(u, k);
            }
            for (k, g) in g_item.row_mut(i).iter_mut().enumerate() {
                *g += 2.0 * lambda * item0.at(i, k);
            }
        }
        let fd_u =
            crate::numerics::central_difference(|x| loss_at(x, item0.data()), user0.data(), 1e-5);
        let fd_i =
            crate::numerics::central_difference(|x| loss_at(user0.data(), x), item0.data(), 1e-5);
        assert!(max_rel_error(g_user.data(), &fd_u) < 1e-4);
        assert!(max_rel_error(g_item.data(), &fd_i) < 1e-4);
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = seeded_rng(50);
        let state = ModelState::new(
            random_embeddings(3, 4, &mut rng),
            random_embeddings(2, 4, &mut rng),
            3,
            1e-4,
            RegTarget::Final,
            InitMode::Full,
            50,
            1e-3,
            1e-2,
        )
        .unwrap();
        save_checkpoint(&path, &state, "fp123").unwrap();
        let (loaded, fp) = load_checkpoint(&path).unwrap();
        assert_eq!(fp, "fp123");
        assert_eq!(loaded.user0.data(), state.user0.data());
        assert_eq!(loaded.item0.data(), state.item0.data());
        assert_eq!(loaded.num_layers, 3);
        assert_eq!(loaded.mode, InitMode::Full);
        assert_eq!(loaded.optimizer.step_count(), 0);
    }
}
