//! Embedding compressors: one auto-encoder per raw table (image, text,
//! review), each a pair of 2-layer MLPs trained with MSE plus an L2 penalty
//! on the auto-encoder parameters, and the image/text concatenation that
//! forms initial item embeddings.

use crate::dataset::EmbeddingTable;
use crate::numerics::{AdamW, DenseMatrix, Mlp, MlpGrads};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;

/// Encoder/decoder pair reducing `input_dim` vectors to `code_dim`.
///
/// Hidden width of both MLPs is the rounded geometric mean of their input
/// and output dims.
#[derive(Debug, Clone)]
pub struct AutoEncoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub l2_coeff: f64,
}

fn geometric_mean_dim(a: usize, b: usize) -> usize {
    ((a as f64 * b as f64).sqrt().round() as usize).max(1)
}

impl AutoEncoder {
    pub fn new_seeded(
        input_dim: usize,
        code_dim: usize,
        l2_coeff: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = geometric_mean_dim(input_dim, code_dim);
        AutoEncoder {
            encoder: Mlp::new_seeded(input_dim, hidden, code_dim, rng),
            decoder: Mlp::new_seeded(code_dim, hidden, input_dim, rng),
            l2_coeff,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn code_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Sum of squared auto-encoder parameters (the L2 regularizer base).
    pub fn params_sum_sq(&self) -> f64 {
        self.encoder.sum_sq() + self.decoder.sum_sq()
    }

    /// Encodes every row; output rows stay aligned with input rows and the
    /// missing flags carry over.
    pub fn compress(&self, table: &EmbeddingTable) -> Result<EmbeddingTable> {
        if table.dim() != self.input_dim() {
            return Err(Error::shape(format!(
                "table dim {} != auto-encoder input dim {}",
                table.dim(),
                self.input_dim()
            )));
        }
        let (codes, _) = self.encoder.forward_batch(&table.matrix)?;
        let mut out = EmbeddingTable::new(table.kind.compressed(), codes)?;
        out.missing = table.missing.clone();
        Ok(out)
    }

    /// Mean-squared reconstruction error over all elements of `x`, plus the
    /// L2 term `l2_coeff * |params|^2`.
    pub fn objective(&self, x: &DenseMatrix) -> Result<f64> {
        let (codes, _) = self.encoder.forward_batch(x)?;
        let (recon, _) = self.decoder.forward_batch(&codes)?;
        let n = (x.rows() * x.cols()) as f64;
        let mse = recon
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(mse + self.l2_coeff * self.params_sum_sq())
    }

    /// Objective and gradients for one batch, in (encoder, decoder) order.
    pub fn objective_grads(&self, x: &DenseMatrix) -> Result<(f64, MlpGrads, MlpGrads)> {
        let (codes, enc_cache) = self.encoder.forward_batch(x)?;
        let (recon, dec_cache) = self.decoder.forward_batch(&codes)?;
        let n = (x.rows() * x.cols()) as f64;
        let mut mse = 0.0;
        let mut grad_recon = DenseMatrix::zeros(recon.rows(), recon.cols());
        for (g, (a, b)) in grad_recon
            .data_mut()
            .iter_mut()
            .zip(recon.data().iter().zip(x.data()))
        {
            let diff = a - b;
            mse += diff * diff;
            *g = 2.0 * diff / n;
        }
        mse /= n;
        let (mut dec_grads, grad_codes) = self.decoder.backward_batch(&dec_cache, &grad_recon)?;
        let (mut enc_grads, _) = self.encoder.backward_batch(&enc_cache, &grad_codes)?;
        // d/dw of l2_coeff * |params|^2.
        for (grads, mlp) in [(&mut enc_grads, &self.encoder), (&mut dec_grads, &self.decoder)] {
            grads.w1.scaled_add(2.0 * self.l2_coeff, &mlp.w1)?;
            grads.w2.scaled_add(2.0 * self.l2_coeff, &mlp.w2)?;
            for (g, &b) in grads.b1.iter_mut().zip(&mlp.b1) {
                *g += 2.0 * self.l2_coeff * b;
            }
            for (g, &b) in grads.b2.iter_mut().zip(&mlp.b2) {
                *g += 2.0 * self.l2_coeff * b;
            }
        }
        Ok((mse + self.l2_coeff * self.params_sum_sq(), enc_grads, dec_grads))
    }
}

#[derive(Debug, Clone)]
pub struct AeTrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for AeTrainOptions {
    fn default() -> Self {
        AeTrainOptions {
            epochs: 200,
            batch: 128,
            lr: 1e-3,
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

/// Minibatch AdamW training. Returns the full-dataset objective after each
/// epoch; aborts on a non-finite loss.
pub fn train_ae(
    ae: &mut AutoEncoder,
    table: &EmbeddingTable,
    opts: &AeTrainOptions,
) -> Result<Vec<f64>> {
    if table.rows() == 0 {
        return Err(Error::invalid("cannot train auto-encoder on empty table"));
    }
    if table.dim() != ae.input_dim() {
        return Err(Error::shape(format!(
            "table dim {} != auto-encoder input dim {}",
            table.dim(),
            ae.input_dim()
        )));
    }
    let mut rng = crate::numerics::seeded_rng(opts.seed);
    let param_count = ae.encoder.param_count() + ae.decoder.param_count();
    let mut opt = AdamW::new(param_count, opts.lr, opts.weight_decay);
    let mut order: Vec<usize> = (0..table.rows()).collect();
    let mut trace = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch.max(1)) {
            let mut batch = DenseMatrix::zeros(chunk.len(), table.dim());
            for (b, &row) in chunk.iter().enumerate() {
                batch.row_mut(b).copy_from_slice(table.matrix.row(row));
            }
            let (loss, enc_grads, dec_grads) = ae.objective_grads(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite auto-encoder loss at epoch {epoch}"
                )));
            }
            let eg = enc_grads.slices();
            let dg = dec_grads.slices();
            let grads = [eg[0], eg[1], eg[2], eg[3], dg[0], dg[1], dg[2], dg[3]];
            let [ew1, eb1, ew2, eb2] = ae.encoder.param_slices_mut();
            let [dw1, db1, dw2, db2] = ae.decoder.param_slices_mut();
            opt.step(&mut [ew1, eb1, ew2, eb2, dw1, db1, dw2, db2], &grads)?;
        }
        trace.push(ae.objective(&table.matrix)?);
    }
    Ok(trace)
}

/// Initial item embeddings: per-row concatenation of compressed image and
/// text codes, image half first.
#[derive(Debug, Clone)]
pub struct ItemInitEmbeddings {
    pub matrix: DenseMatrix,
}

pub fn build_item_init(
    img_codes: &EmbeddingTable,
    txt_codes: &EmbeddingTable,
) -> Result<ItemInitEmbeddings> {
    if img_codes.rows() != txt_codes.rows() {
        return Err(Error::shape(format!(
            "image/text row counts differ: {} vs {}",
            img_codes.rows(),
            txt_codes.rows()
        )));
    }
    let d_img = img_codes.dim();
    let d_txt = txt_codes.dim();
    let mut matrix = DenseMatrix::zeros(img_codes.rows(), d_img + d_txt);
    for r in 0..img_codes.rows() {
        let row = matrix.row_mut(r);
        row[..d_img].copy_from_slice(img_codes.matrix.row(r));
        row[d_img..].copy_from_slice(txt_codes.matrix.row(r));
    }
    Ok(ItemInitEmbeddings { matrix })
}
