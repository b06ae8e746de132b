//! Image/text contrastive alignment head: trainable linear projections for
//! both modalities plus a trainable temperature, optimized with the
//! bidirectional in-batch contrastive loss over precomputed encoder outputs.

use crate::dataset::EmbeddingTable;
use crate::numerics::{seeded_rng, softmax_rows, AdamW, DenseMatrix};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;

/// Projection layers and temperature. The temperature is stored as its log
/// so it stays positive under gradient updates.
#[derive(Debug, Clone)]
pub struct ItcHead {
    pub w_img: DenseMatrix,
    pub w_txt: DenseMatrix,
    log_temp: f64,
}

/// Gradients for [`ItcHead`] parameters.
#[derive(Debug, Clone)]
pub struct ItcGrads {
    pub w_img: DenseMatrix,
    pub w_txt: DenseMatrix,
    pub log_temp: f64,
}

impl ItcHead {
    pub fn new_seeded(
        img_dim: usize,
        txt_dim: usize,
        proj_dim: usize,
        init_temp: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if init_temp <= 0.0 {
            return Err(Error::invalid("temperature must be positive"));
        }
        let bi = 1.0 / (img_dim as f64).sqrt();
        let bt = 1.0 / (txt_dim as f64).sqrt();
        Ok(ItcHead {
            w_img: DenseMatrix::uniform(proj_dim, img_dim, bi, rng),
            w_txt: DenseMatrix::uniform(proj_dim, txt_dim, bt, rng),
            log_temp: init_temp.ln(),
        })
    }

    pub fn temperature(&self) -> f64 {
        self.log_temp.exp()
    }

    pub fn set_temperature(&mut self, temp: f64) -> Result<()> {
        if temp <= 0.0 {
            return Err(Error::invalid("temperature must be positive"));
        }
        self.log_temp = temp.ln();
        Ok(())
    }

    pub fn proj_dim(&self) -> usize {
        self.w_img.rows()
    }

    /// Pairwise projected similarities: `s[a][b] = (W_img i_a) . (W_txt t_b)`.
    pub fn similarity(
        &self,
        img_batch: &DenseMatrix,
        txt_batch: &DenseMatrix,
    ) -> Result<DenseMatrix> {
        if img_batch.rows() != txt_batch.rows() {
            return Err(Error::shape(format!(
                "batch sizes differ: {} images vs {} texts",
                img_batch.rows(),
                txt_batch.rows()
            )));
        }
        let p = img_batch.matmul_nt(&self.w_img)?;
        let q = txt_batch.matmul_nt(&self.w_txt)?;
        p.matmul_nt(&q)
    }

    /// Bidirectional contrastive loss with diagonal positives:
    /// mean cross-entropy of the temperature-scaled row softmax (image to
    /// text) and column softmax (text to image), averaged half and half.
    pub fn itc_loss(&self, img_batch: &DenseMatrix, txt_batch: &DenseMatrix) -> Result<f64> {
        let (loss, _) = self.loss_impl(img_batch, txt_batch, false)?;
        Ok(loss)
    }

    pub fn loss_and_grads(
        &self,
        img_batch: &DenseMatrix,
        txt_batch: &DenseMatrix,
    ) -> Result<(f64, ItcGrads)> {
        let (loss, grads) = self.loss_impl(img_batch, txt_batch, true)?;
        Ok((loss, grads.expect("grads requested")))
    }

    fn loss_impl(
        &self,
        img_batch: &DenseMatrix,
        txt_batch: &DenseMatrix,
        want_grads: bool,
    ) -> Result<(f64, Option<ItcGrads>)> {
        let b = img_batch.rows();
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let p = img_batch.matmul_nt(&self.w_img)?;
        let q = txt_batch.matmul_nt(&self.w_txt)?;
        if p.rows() != q.rows() {
            return Err(Error::shape("batch sizes differ"));
        }
        let s = p.matmul_nt(&q)?;
        if !s.is_finite() {
            return Err(Error::Numeric("non-finite similarity".into()));
        }
        let temp = self.temperature();
        let mut scaled = s.clone();
        scaled.scale(1.0 / temp);
        let img_to_txt = softmax_rows(&scaled);
        let txt_to_img = softmax_rows(&scaled.transpose());

        let mut loss = 0.0;
        for a in 0..b {
            loss -= 0.5 * img_to_txt.at(a, a).ln();
            loss -= 0.5 * txt_to_img.at(a, a).ln();
        }
        loss /= b as f64;
        if !want_grads {
            return Ok((loss, None));
        }

        // d(loss)/d(scaled[a][b]): softmax-cross-entropy rows for the
        // image-to-text half, columns for the text-to-image half.
        let mut grad_scaled = DenseMatrix::zeros(b, b);
        let half = 0.5 / b as f64;
        for a in 0..b {
            for c in 0..b {
                let mut g = half * img_to_txt.at(a, c);
                g += half * txt_to_img.at(c, a);
                if a == c {
                    g -= 2.0 * half;
                }
                *grad_scaled.at_mut(a, c) = g;
            }
        }
        // scaled = s * exp(-log_temp): d(loss)/d(log_temp) = -sum(g . scaled).
        let grad_log_temp = -grad_scaled
            .data()
            .iter()
            .zip(scaled.data())
            .map(|(g, v)| g * v)
            .sum::<f64>();
        let mut grad_s = grad_scaled;
        grad_s.scale(1.0 / temp);
        let grad_p = grad_s.matmul(&q)?;
        let grad_q = grad_s.matmul_tn(&p)?;
        let w_img_grad = grad_p.matmul_tn(img_batch)?;
        let w_txt_grad = grad_q.matmul_tn(txt_batch)?;
        Ok((
            loss,
            Some(ItcGrads {
                w_img: w_img_grad,
                w_txt: w_txt_grad,
                log_temp: grad_log_temp,
            }),
        ))
    }

    /// Applies the image projection to a whole table (kind is preserved; the
    /// rows are still upstream-encoder outputs, just refined).
    pub fn project_images_table(&self, table: &EmbeddingTable) -> Result<EmbeddingTable> {
        let projected = table.matrix.matmul_nt(&self.w_img)?;
        EmbeddingTable::new(table.kind, projected)
    }

    pub fn project_texts_table(&self, table: &EmbeddingTable) -> Result<EmbeddingTable> {
        let projected = table.matrix.matmul_nt(&self.w_txt)?;
        EmbeddingTable::new(table.kind, projected)
    }

    /// Fraction of rows whose matching text is the top-1 similarity.
    pub fn retrieval_top1(&self, img_batch: &DenseMatrix, txt_batch: &DenseMatrix) -> Result<f64> {
        let s = self.similarity(img_batch, txt_batch)?;
        let b = s.rows();
        let mut hits = 0usize;
        for a in 0..b {
            let row = s.row(a);
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == a {
                hits += 1;
            }
        }
        Ok(hits as f64 / b as f64)
    }
}

#[derive(Debug, Clone)]
pub struct ItcTrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ItcTrainOptions {
    fn default() -> Self {
        ItcTrainOptions {
            epochs: 200,
            batch: 32,
            lr: 1e-3,
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

/// Minibatch AdamW training over row-aligned image/text tables (row i of
/// both is item i). Returns the mean batch loss per epoch.
pub fn train_itc(
    head: &mut ItcHead,
    img: &DenseMatrix,
    txt: &DenseMatrix,
    opts: &ItcTrainOptions,
) -> Result<Vec<f64>> {
    if img.rows() != txt.rows() {
        return Err(Error::shape("image/text tables are not row-aligned"));
    }
    if img.rows() == 0 {
        return Err(Error::invalid("empty tables"));
    }
    let mut rng = seeded_rng(opts.seed);
    let param_count = head.w_img.data().len() + head.w_txt.data().len() + 1;
    let mut opt = AdamW::new(param_count, opts.lr, opts.weight_decay);
    let mut order: Vec<usize> = (0..img.rows()).collect();
    let mut trace = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let mut img_batch = DenseMatrix::zeros(chunk.len(), img.cols());
            let mut txt_batch = DenseMatrix::zeros(chunk.len(), txt.cols());
            for (b, &row) in chunk.iter().enumerate() {
                img_batch.row_mut(b).copy_from_slice(img.row(row));
                txt_batch.row_mut(b).copy_from_slice(txt.row(row));
            }
            let (loss, grads) = head.loss_and_grads(&img_batch, &txt_batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite contrastive loss at epoch {epoch}"
                )));
            }
            epoch_loss += loss;
            batches += 1;
            let mut log_temp_slice = [head.log_temp];
            opt.step(
                &mut [
                    head.w_img.data_mut(),
                    head.w_txt.data_mut(),
                    &mut log_temp_slice,
                ],
                &[
                    grads.w_img.data(),
                    grads.w_txt.data(),
                    &[grads.log_temp],
                ],
            )?;
            head.log_temp = log_temp_slice[0];
        }
        trace.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(trace)
}
