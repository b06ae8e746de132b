//! Stage orchestration. Each stage reads its predecessor's artifacts from
//! the output directory, works, and writes versioned outputs carrying the
//! config fingerprint. The same building blocks run fully in memory for the
//! ablation/sweep runners and the synthetic experiments.

use crate::alignment::{train_itc, ItcHead, ItcTrainOptions};
use crate::compressor::{build_item_init, train_ae, AeTrainOptions, AutoEncoder};
use crate::config::{CompressConfig, RunConfig, SplitConfig};
use crate::dataset::{
    load_interactions, split_per_user, EmbeddingTable, Interaction, SplitDataset, TableKind,
};
use crate::eval::{evaluate, EvalReport};
use crate::graph::{
    load_checkpoint, random_embeddings, save_checkpoint, train, BipartiteGraph, InitMode,
    ModelState, RegTarget, TrainConfig, TrainTrace,
};
use crate::numerics::{seeded_rng, DenseMatrix};
use crate::synth::{generate, write_files, GeneratedWorld, PlantedWorld};
use crate::user_init::{build_cross_relation, export_cross_relation, init_users, item_review_means};
use crate::{Error, Result};
use std::io::Write;
use std::path::Path;

const SEED_IMAGE_AE: u64 = 0x1001;
const SEED_TEXT_AE: u64 = 0x1002;
const SEED_REVIEW_AE: u64 = 0x1003;
const SEED_MODE_INIT: u64 = 0x2001;
const SEED_ALIGN: u64 = 0x3001;

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.display().to_string(),
            stage: stage.to_string(),
        })
    }
}

/// Derived-artifact matrix file: one header line
/// `rows=<r> cols=<c> tag=<tag> fingerprint=<fp>` then little-endian f64.
pub fn write_matrix(path: &Path, m: &DenseMatrix, tag: &str, fingerprint: &str) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + m.data().len() * 8);
    buf.extend_from_slice(
        format!(
            "rows={} cols={} tag={} fingerprint={}\n",
            m.rows(),
            m.cols(),
            tag,
            fingerprint
        )
        .as_bytes(),
    );
    for &v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a matrix artifact, checking the expected tag. Returns the matrix
/// and the embedded fingerprint.
pub fn read_matrix(path: &Path, expect_tag: &str) -> Result<(DenseMatrix, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::invalid(format!("{}: missing header", path.display())))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::invalid(format!("{}: non-utf8 header", path.display())))?;
    let mut rows = None;
    let mut cols = None;
    let mut tag = None;
    let mut fingerprint = String::new();
    for field in header.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| {
            Error::invalid(format!("{}: bad header field `{field}`", path.display()))
        })?;
        match key {
            "rows" => rows = value.parse().ok(),
            "cols" => cols = value.parse().ok(),
            "tag" => tag = Some(value.to_string()),
            "fingerprint" => fingerprint = value.to_string(),
            _ => {}
        }
    }
    let (rows, cols) = match (rows, cols) {
        (Some(r), Some(c)) => (r, c),
        _ => return Err(Error::invalid(format!("{}: bad header", path.display()))),
    };
    if tag.as_deref() != Some(expect_tag) {
        return Err(Error::invalid(format!(
            "{}: tag {:?} does not match expected `{expect_tag}`",
            path.display(),
            tag
        )));
    }
    let body = &bytes[newline + 1..];
    if body.len() != rows * cols * 8 {
        return Err(Error::invalid(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            rows * cols * 8,
            body.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in body.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
    }
    Ok((DenseMatrix::from_vec(rows, cols, data)?, fingerprint))
}

/// The three compressed tables plus per-epoch loss traces.
#[derive(Debug, Clone)]
pub struct CompressedTables {
    pub image: EmbeddingTable,
    pub text: EmbeddingTable,
    pub review: EmbeddingTable,
    pub traces: [Vec<f64>; 3],
}

fn ae_options(ccfg: &CompressConfig, rows: usize, seed: u64) -> AeTrainOptions {
    let mut epochs = ccfg.epochs;
    if ccfg.max_steps > 0 && ccfg.batch > 0 {
        let batches_per_epoch = rows.div_ceil(ccfg.batch).max(1);
        let by_cap = ccfg.max_steps.div_ceil(batches_per_epoch).max(1);
        epochs = epochs.min(by_cap);
    }
    AeTrainOptions {
        epochs,
        batch: ccfg.batch,
        lr: ccfg.lr,
        weight_decay: ccfg.weight_decay,
        seed,
    }
}

fn normalize_rows(table: &mut EmbeddingTable) {
    for r in 0..table.rows() {
        let row = table.matrix.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row {
                *v /= norm;
            }
        }
    }
}

/// Trains the three auto-encoders and compresses all tables to `code_dim`.
pub fn compress_tables(
    raw_image: &EmbeddingTable,
    raw_text: &EmbeddingTable,
    raw_review: &EmbeddingTable,
    ccfg: &CompressConfig,
    code_dim: usize,
    seed: u64,
) -> Result<CompressedTables> {
    let mut out = Vec::with_capacity(3);
    let mut traces = Vec::with_capacity(3);
    for (raw, l2, salt) in [
        (raw_image, ccfg.l2_image, SEED_IMAGE_AE),
        (raw_text, ccfg.l2_text, SEED_TEXT_AE),
        (raw_review, ccfg.l2_review, SEED_REVIEW_AE),
    ] {
        let ae_seed = seed ^ salt;
        let mut ae = AutoEncoder::new_seeded(raw.dim(), code_dim, l2, &mut seeded_rng(ae_seed));
        let opts = ae_options(ccfg, raw.rows(), ae_seed);
        let trace = train_ae(&mut ae, raw, &opts)?;
        let mut codes = ae.compress(raw)?;
        if ccfg.normalize_codes {
            normalize_rows(&mut codes);
        }
        out.push(codes);
        traces.push(trace);
    }
    let review = out.pop().expect("three tables");
    let text = out.pop().expect("three tables");
    let image = out.pop().expect("three tables");
    let traces: [Vec<f64>; 3] = traces.try_into().expect("three traces");
    Ok(CompressedTables {
        image,
        text,
        review,
        traces,
    })
}

/// Split, train graph, and compressed tables, ready to initialize and train
/// any mode.
#[derive(Debug, Clone)]
pub struct PreparedWorld {
    pub num_users: usize,
    pub num_items: usize,
    pub split: SplitDataset,
    pub graph: BipartiteGraph,
    pub codes: CompressedTables,
    pub train_items: Vec<Vec<usize>>,
    pub val_items: Vec<Vec<usize>>,
    pub test_items: Vec<Vec<usize>>,
    /// Train plus val items, the candidate exclusion at test time.
    pub trainval_items: Vec<Vec<usize>>,
}

pub fn prepare(
    interactions: &[Interaction],
    num_users: usize,
    num_items: usize,
    codes: CompressedTables,
    split_cfg: &SplitConfig,
    seed: u64,
) -> Result<PreparedWorld> {
    let split = split_per_user(
        interactions,
        (split_cfg.train, split_cfg.val, split_cfg.test),
        seed,
    )?;
    let graph = BipartiteGraph::from_interactions(&split.train, num_users, num_items);
    let train_items = SplitDataset::items_by_user(&split.train, num_users);
    let val_items = SplitDataset::items_by_user(&split.val, num_users);
    let test_items = SplitDataset::items_by_user(&split.test, num_users);
    let mut trainval_items = train_items.clone();
    for (tv, v) in trainval_items.iter_mut().zip(&val_items) {
        tv.extend_from_slice(v);
    }
    Ok(PreparedWorld {
        num_users,
        num_items,
        split,
        graph,
        codes,
        train_items,
        val_items,
        test_items,
        trainval_items,
    })
}

/// Compresses a generated world's raw tables and assembles the prepared
/// form; the shared entry point for synthetic experiments.
pub fn prepare_generated(gen: &GeneratedWorld, cfg: &RunConfig) -> Result<PreparedWorld> {
    let codes = compress_tables(
        &gen.raw_image,
        &gen.raw_text,
        &gen.raw_review,
        &cfg.compress,
        cfg.model.code_dim,
        cfg.seed,
    )?;
    prepare(
        &gen.interactions,
        gen.num_users(),
        gen.num_items(),
        codes,
        &cfg.split,
        cfg.seed,
    )
}

fn concat_item_codes(prepared: &PreparedWorld, mode: InitMode) -> Result<DenseMatrix> {
    match mode {
        InitMode::TextOnly => Ok(prepared.codes.text.matrix.clone()),
        InitMode::ImageOnly => Ok(prepared.codes.image.matrix.clone()),
        _ => Ok(build_item_init(&prepared.codes.image, &prepared.codes.text)?.matrix),
    }
}

fn review_attention_user0(
    prepared: &PreparedWorld,
    item0: &DenseMatrix,
) -> Result<DenseMatrix> {
    let means = item_review_means(&prepared.split.train, &prepared.codes.review, prepared.num_items)?;
    let cross = build_cross_relation(&means, item0)?;
    let users = init_users(
        &cross,
        item0,
        &prepared.split.train,
        &prepared.codes.review,
        prepared.num_users,
    )?;
    Ok(users.matrix)
}

/// Rescales content-derived initializations to the RMS a random fan-in
/// initialization of the same width would have. One shared factor across the
/// given matrices preserves every ranking and the attention geometry while
/// keeping initial BPR margins in the sigmoid's responsive range.
fn rescale_to_random_rms(mats: &mut [&mut DenseMatrix]) {
    let dim = mats.first().map_or(1, |m| m.cols()) as f64;
    let target = 1.0 / (dim.sqrt() * 3f64.sqrt());
    let count: usize = mats.iter().map(|m| m.data().len()).sum();
    let sum_sq: f64 = mats.iter().map(|m| m.sum_sq()).sum();
    let rms = (sum_sq / count.max(1) as f64).sqrt();
    if rms > 0.0 {
        let alpha = target / rms;
        for m in mats {
            m.scale(alpha);
        }
    }
}

/// Builds the trainable state for a mode. Baseline modes draw random
/// embeddings at the same width as the full model so comparisons are
/// parameter-matched; content-derived inits are rescaled to the same RMS.
pub fn init_mode_state(
    prepared: &PreparedWorld,
    cfg: &RunConfig,
    mode: InitMode,
) -> Result<ModelState> {
    let dim = 2 * cfg.model.code_dim;
    let mut rng = seeded_rng(cfg.seed ^ SEED_MODE_INIT);
    let (user0, item0) = match mode {
        InitMode::Full | InitMode::TextOnly | InitMode::ImageOnly => {
            let mut item0 = concat_item_codes(prepared, mode)?;
            let mut user0 = review_attention_user0(prepared, &item0)?;
            rescale_to_random_rms(&mut [&mut user0, &mut item0]);
            (user0, item0)
        }
        InitMode::NoReviewInit => {
            let mut item0 = concat_item_codes(prepared, mode)?;
            rescale_to_random_rms(&mut [&mut item0]);
            let user0 = random_embeddings(prepared.num_users, item0.cols(), &mut rng);
            (user0, item0)
        }
        InitMode::Random | InitMode::Bprmf => {
            let user0 = random_embeddings(prepared.num_users, dim, &mut rng);
            let item0 = random_embeddings(prepared.num_items, dim, &mut rng);
            (user0, item0)
        }
    };
    let layers = if mode == InitMode::Bprmf {
        0
    } else {
        cfg.model.layers
    };
    let reg = if cfg.model.reg_layer0 {
        RegTarget::LayerZero
    } else {
        RegTarget::Final
    };
    let mut state = ModelState::new(
        user0,
        item0,
        layers,
        cfg.model.lambda_bpr,
        reg,
        mode,
        cfg.seed,
        cfg.train.lr,
        cfg.train.weight_decay,
    )?;
    state.freeze_items = cfg.model.freeze_items;
    Ok(state)
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.train.epochs,
        batch: cfg.train.batch,
        patience: cfg.train.patience,
        eval_every: cfg.train.eval_every,
        seed: cfg.seed,
    }
}

/// Trains one mode and evaluates it on the test partition (candidates are
/// all items minus the user's train and val items).
pub fn train_and_evaluate(
    prepared: &PreparedWorld,
    cfg: &RunConfig,
    mode: InitMode,
) -> Result<(ModelState, TrainTrace, EvalReport)> {
    let mut state = init_mode_state(prepared, cfg, mode)?;
    let trace = train(&mut state, &prepared.graph, &prepared.split, &train_config(cfg))?;
    let prop = state.propagate(&prepared.graph)?;
    let report = evaluate(
        &prop,
        &prepared.trainval_items,
        &prepared.test_items,
        &cfg.eval.ks,
        &cfg.fingerprint(),
    );
    Ok((state, trace, report))
}

/// Generates the synthetic world from config and writes its files.
pub fn run_synth(cfg: &RunConfig) -> Result<GeneratedWorld> {
    cfg.validate()?;
    let world = PlantedWorld {
        num_users: cfg.synth.num_users,
        num_items: cfg.synth.num_items,
        num_topics: cfg.synth.num_topics,
        interaction_rate: cfg.synth.interaction_rate,
        sigma_review: cfg.synth.sigma_review,
        sigma_content: cfg.synth.sigma_content,
        affinity_sharpness: cfg.synth.affinity_sharpness,
        topic_mix: cfg.synth.topic_mix,
        min_interactions_per_user: cfg.synth.min_interactions_per_user,
        raw_dim: cfg.synth.raw_dim,
        seed: cfg.seed,
    };
    let gen = generate(&world)?;
    write_files(&gen, &cfg.out_dir(), &cfg.fingerprint())?;
    Ok(gen)
}

fn load_raw_table(cfg: &RunConfig, kind: TableKind) -> Result<EmbeddingTable> {
    let (path, stage) = match kind {
        TableKind::RawImage if cfg.align.first => (cfg.projected_image_path(), "align"),
        TableKind::RawText if cfg.align.first => (cfg.projected_text_path(), "align"),
        TableKind::RawImage => (cfg.raw_image_path(), "synth"),
        TableKind::RawText => (cfg.raw_text_path(), "synth"),
        TableKind::RawReview => (cfg.raw_review_path(), "synth"),
        other => return Err(Error::invalid(format!("{other} is not a raw table"))),
    };
    require(&path, stage)?;
    let table = EmbeddingTable::read(&path)?;
    if table.kind != kind {
        return Err(Error::invalid(format!(
            "{}: holds {} but {} was expected",
            path.display(),
            table.kind,
            kind
        )));
    }
    Ok(table)
}

fn write_trace_tsv(path: &Path, trace: &[f64], fingerprint: &str) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "# fingerprint={fingerprint}").map_err(|e| Error::io(path, e))?;
    writeln!(w, "epoch\tloss").map_err(|e| Error::io(path, e))?;
    for (epoch, loss) in trace.iter().enumerate() {
        writeln!(w, "{epoch}\t{loss:.10}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Which tables the compress stage should process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressKind {
    Image,
    Text,
    Review,
    All,
}

impl CompressKind {
    pub fn parse(s: &str) -> Result<CompressKind> {
        Ok(match s {
            "image" => CompressKind::Image,
            "text" => CompressKind::Text,
            "review" => CompressKind::Review,
            "all" => CompressKind::All,
            other => return Err(Error::invalid(format!("unknown compress kind `{other}`"))),
        })
    }
}

/// Trains the selected auto-encoders over raw tables on disk and writes the
/// compressed tables plus loss traces. Returns (kind, final loss) per table.
pub fn run_compress(cfg: &RunConfig, which: CompressKind) -> Result<Vec<(TableKind, f64)>> {
    cfg.validate()?;
    std::fs::create_dir_all(cfg.out_dir()).map_err(|e| Error::io(&cfg.out_dir(), e))?;
    let fingerprint = cfg.fingerprint();
    let jobs: Vec<(TableKind, f64, u64)> = match which {
        CompressKind::Image => vec![(TableKind::RawImage, cfg.compress.l2_image, SEED_IMAGE_AE)],
        CompressKind::Text => vec![(TableKind::RawText, cfg.compress.l2_text, SEED_TEXT_AE)],
        CompressKind::Review => vec![(TableKind::RawReview, cfg.compress.l2_review, SEED_REVIEW_AE)],
        CompressKind::All => vec![
            (TableKind::RawImage, cfg.compress.l2_image, SEED_IMAGE_AE),
            (TableKind::RawText, cfg.compress.l2_text, SEED_TEXT_AE),
            (TableKind::RawReview, cfg.compress.l2_review, SEED_REVIEW_AE),
        ],
    };
    let mut summary = Vec::with_capacity(jobs.len());
    for (kind, l2, salt) in jobs {
        let raw = load_raw_table(cfg, kind)?;
        let ae_seed = cfg.seed ^ salt;
        let mut ae =
            AutoEncoder::new_seeded(raw.dim(), cfg.model.code_dim, l2, &mut seeded_rng(ae_seed));
        let opts = ae_options(&cfg.compress, raw.rows(), ae_seed);
        let trace = train_ae(&mut ae, &raw, &opts)?;
        let mut codes = ae.compress(&raw)?;
        if cfg.compress.normalize_codes {
            normalize_rows(&mut codes);
        }
        codes.write_binary(&cfg.compressed_path(kind.compressed()))?;
        let trace_path = cfg
            .out_dir()
            .join(format!("trace_ae_{}.tsv", kind.compressed().as_str()));
        write_trace_tsv(&trace_path, &trace, &fingerprint)?;
        summary.push((kind, trace.last().copied().unwrap_or(f64::NAN)));
    }
    Ok(summary)
}

/// Trains the contrastive head on raw image/text tables and writes projected
/// tables for the compress stage to pick up when `align.first` is set.
pub fn run_align(cfg: &RunConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    std::fs::create_dir_all(cfg.out_dir()).map_err(|e| Error::io(&cfg.out_dir(), e))?;
    let img_path = cfg.raw_image_path();
    let txt_path = cfg.raw_text_path();
    require(&img_path, "synth")?;
    require(&txt_path, "synth")?;
    let img = EmbeddingTable::read(&img_path)?;
    let txt = EmbeddingTable::read(&txt_path)?;
    let mut head = ItcHead::new_seeded(
        img.dim(),
        txt.dim(),
        cfg.align.proj_dim,
        cfg.align.temp_init,
        &mut seeded_rng(cfg.seed ^ SEED_ALIGN),
    )?;
    let opts = ItcTrainOptions {
        epochs: cfg.align.epochs,
        batch: cfg.align.batch,
        lr: cfg.align.lr,
        weight_decay: cfg.align.weight_decay,
        seed: cfg.seed ^ SEED_ALIGN,
    };
    let trace = train_itc(&mut head, &img.matrix, &txt.matrix, &opts)?;
    head.project_images_table(&img)?
        .write_binary(&cfg.projected_image_path())?;
    head.project_texts_table(&txt)?
        .write_binary(&cfg.projected_text_path())?;
    write_trace_tsv(
        &cfg.out_dir().join("trace_align.tsv"),
        &trace,
        &cfg.fingerprint(),
    )?;
    let final_loss = trace.last().copied().unwrap_or(f64::NAN);
    let top1 = head.retrieval_top1(&img.matrix, &txt.matrix)?;
    Ok((final_loss, top1))
}

fn load_compressed(cfg: &RunConfig, kind: TableKind) -> Result<EmbeddingTable> {
    let path = cfg.compressed_path(kind);
    require(&path, "compress")?;
    EmbeddingTable::read(&path)
}

struct LoadedDataset {
    interactions: Vec<Interaction>,
    num_users: usize,
    num_items: usize,
}

fn load_dataset(cfg: &RunConfig, review_rows: Option<usize>) -> Result<LoadedDataset> {
    let path = cfg.interactions_path();
    require(&path, "synth")?;
    let loaded = load_interactions(&path, review_rows)?;
    Ok(LoadedDataset {
        num_users: loaded.catalog.num_users(),
        num_items: loaded.catalog.num_items(),
        interactions: loaded.interactions,
    })
}

/// What the init-users stage produced.
#[derive(Debug)]
pub struct InitUsersSummary {
    pub users: usize,
    /// Users initialized by the plain item mean (no reviewed interactions).
    pub fallback_users: usize,
    /// Users with no train interactions at all.
    pub empty_users: usize,
    pub clusters_degenerate: bool,
}

/// Computes item/user initializations from compressed artifacts and writes
/// them with the cross-relation export.
pub fn run_init_users(cfg: &RunConfig) -> Result<InitUsersSummary> {
    cfg.validate()?;
    let mode = InitMode::parse(&cfg.model.mode)?;
    if !mode.uses_review_init() {
        return Err(Error::invalid(format!(
            "mode `{mode}` does not use review-based user initialization"
        )));
    }
    let fingerprint = cfg.fingerprint();
    let review = load_compressed(cfg, TableKind::CompressedReview)?;
    let data = load_dataset(cfg, Some(review.rows()))?;
    let split = split_per_user(
        &data.interactions,
        (cfg.split.train, cfg.split.val, cfg.split.test),
        cfg.seed,
    )?;
    let item0 = match mode {
        InitMode::TextOnly => load_compressed(cfg, TableKind::CompressedText)?.matrix,
        InitMode::ImageOnly => load_compressed(cfg, TableKind::CompressedImage)?.matrix,
        _ => {
            let img = load_compressed(cfg, TableKind::CompressedImage)?;
            let txt = load_compressed(cfg, TableKind::CompressedText)?;
            build_item_init(&img, &txt)?.matrix
        }
    };
    if item0.rows() != data.num_items {
        return Err(Error::shape(format!(
            "item table has {} rows, interactions reference {} items",
            item0.rows(),
            data.num_items
        )));
    }
    let means = item_review_means(&split.train, &review, data.num_items)?;
    let cross = build_cross_relation(&means, &item0)?;
    let users = init_users(&cross, &item0, &split.train, &review, data.num_users)?;
    write_matrix(&cfg.item_init_path(), &item0, "item_init", &fingerprint)?;
    write_matrix(&cfg.user_init_path(), &users.matrix, "user_init", &fingerprint)?;
    let clusters = export_cross_relation(
        &cross,
        &cfg.cross_relation_path(),
        cfg.eval.export_clusters,
        cfg.seed,
        &fingerprint,
    )?;
    Ok(InitUsersSummary {
        users: data.num_users,
        fallback_users: users.fallback.iter().filter(|&&f| f).count(),
        empty_users: users.empty.iter().filter(|&&f| f).count(),
        clusters_degenerate: clusters.degenerate,
    })
}

/// Assembles mode inputs from disk artifacts, trains, and writes the
/// checkpoint and training trace.
pub fn run_train(cfg: &RunConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    let mode = InitMode::parse(&cfg.model.mode)?;
    let fingerprint = cfg.fingerprint();
    let dim = 2 * cfg.model.code_dim;
    let mut rng = seeded_rng(cfg.seed ^ SEED_MODE_INIT);

    let (user0, item0, data) = if mode.uses_review_init() {
        let item_path = cfg.item_init_path();
        let user_path = cfg.user_init_path();
        require(&item_path, "init-users")?;
        require(&user_path, "init-users")?;
        let (item0, _) = read_matrix(&item_path, "item_init")?;
        let (user0, _) = read_matrix(&user_path, "user_init")?;
        let data = load_dataset(cfg, None)?;
        (user0, item0, data)
    } else if mode == InitMode::NoReviewInit {
        let img = load_compressed(cfg, TableKind::CompressedImage)?;
        let txt = load_compressed(cfg, TableKind::CompressedText)?;
        let item0 = build_item_init(&img, &txt)?.matrix;
        let data = load_dataset(cfg, None)?;
        let user0 = random_embeddings(data.num_users, item0.cols(), &mut rng);
        (user0, item0, data)
    } else {
        let data = load_dataset(cfg, None)?;
        let user0 = random_embeddings(data.num_users, dim, &mut rng);
        let item0 = random_embeddings(data.num_items, dim, &mut rng);
        (user0, item0, data)
    };
    if user0.rows() != data.num_users || item0.rows() != data.num_items {
        return Err(Error::shape(format!(
            "initialization covers {}x{} entities, dataset has {}x{}",
            user0.rows(),
            item0.rows(),
            data.num_users,
            data.num_items
        )));
    }

    let split = split_per_user(
        &data.interactions,
        (cfg.split.train, cfg.split.val, cfg.split.test),
        cfg.seed,
    )?;
    let graph = BipartiteGraph::from_interactions(&split.train, data.num_users, data.num_items);
    let layers = if mode == InitMode::Bprmf {
        0
    } else {
        cfg.model.layers
    };
    let reg = if cfg.model.reg_layer0 {
        RegTarget::LayerZero
    } else {
        RegTarget::Final
    };
    let mut state = ModelState::new(
        user0,
        item0,
        layers,
        cfg.model.lambda_bpr,
        reg,
        mode,
        cfg.seed,
        cfg.train.lr,
        cfg.train.weight_decay,
    )?;
    state.freeze_items = cfg.model.freeze_items;
    let trace = train(&mut state, &graph, &split, &train_config(cfg))?;
    save_checkpoint(&cfg.checkpoint_path(mode.as_str()), &state, &fingerprint)?;
    trace.write_tsv(&cfg.train_trace_path(mode.as_str()), &fingerprint)?;
    Ok(trace)
}

/// Loads a trained checkpoint and evaluates on the test partition. Refuses
/// checkpoints whose fingerprint differs from this config unless forced.
pub fn run_eval(cfg: &RunConfig, force: bool) -> Result<EvalReport> {
    cfg.validate()?;
    let mode = InitMode::parse(&cfg.model.mode)?;
    let fingerprint = cfg.fingerprint();
    let ckpt_path = cfg.checkpoint_path(mode.as_str());
    require(&ckpt_path, "train")?;
    let (state, ckpt_fingerprint) = load_checkpoint(&ckpt_path)?;
    if ckpt_fingerprint != fingerprint && !force {
        return Err(Error::Config(format!(
            "checkpoint fingerprint {ckpt_fingerprint} does not match config {fingerprint}; \
             rerun train or pass --force"
        )));
    }
    let data = load_dataset(cfg, None)?;
    let split = split_per_user(
        &data.interactions,
        (cfg.split.train, cfg.split.val, cfg.split.test),
        cfg.seed,
    )?;
    let graph = BipartiteGraph::from_interactions(&split.train, data.num_users, data.num_items);
    let prop = state.propagate(&graph)?;
    let train_items = SplitDataset::items_by_user(&split.train, data.num_users);
    let val_items = SplitDataset::items_by_user(&split.val, data.num_users);
    let test_items = SplitDataset::items_by_user(&split.test, data.num_users);
    let mut exclude = train_items;
    for (tv, v) in exclude.iter_mut().zip(&val_items) {
        tv.extend_from_slice(v);
    }
    let report = evaluate(&prop, &exclude, &test_items, &cfg.eval.ks, &fingerprint);
    report.write_tsv(&cfg.report_tsv_path(mode.as_str()))?;
    report.write_json(&cfg.report_json_path(mode.as_str()))?;
    Ok(report)
}

/// One ablation row: the mode with its test report and training trace.
#[derive(Debug)]
pub struct AblationRow {
    pub mode: InitMode,
    pub report: EvalReport,
    pub trace: TrainTrace,
}

/// Trains and evaluates each mode over the same prepared world (shared seed,
/// split, and compressed tables).
pub fn ablate_prepared(
    prepared: &PreparedWorld,
    cfg: &RunConfig,
    modes: &[InitMode],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let (_, trace, report) = train_and_evaluate(prepared, cfg, mode)?;
        rows.push(AblationRow {
            mode,
            report,
            trace,
        });
    }
    Ok(rows)
}

fn write_ablation_tsv(path: &Path, rows: &[AblationRow], ks: &[usize], fp: &str) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "# fingerprint={fp}").map_err(|e| Error::io(path, e))?;
    let mut header = String::from("mode");
    for &k in ks {
        header.push_str(&format!("\tR@{k}\tN@{k}"));
    }
    header.push_str("\tbest_epoch");
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for row in rows {
        let mut line = row.mode.as_str().to_string();
        for &k in ks {
            line.push_str(&format!(
                "\t{:.10}\t{:.10}",
                row.report.recall(k).unwrap_or(0.0),
                row.report.ndcg(k).unwrap_or(0.0)
            ));
        }
        line.push_str(&format!("\t{}", row.trace.best_epoch));
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Disk-driven ablation: reuses the compressed artifacts, then trains and
/// evaluates each mode with the shared seed and split. Emits a comparison
/// TSV and returns the rows.
pub fn run_ablation(cfg: &RunConfig, modes: &[InitMode]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if modes.is_empty() {
        return Err(Error::invalid("ablation needs at least one mode"));
    }
    let image = load_compressed(cfg, TableKind::CompressedImage)?;
    let text = load_compressed(cfg, TableKind::CompressedText)?;
    let review = load_compressed(cfg, TableKind::CompressedReview)?;
    let data = load_dataset(cfg, Some(review.rows()))?;
    let codes = CompressedTables {
        image,
        text,
        review,
        traces: [vec![], vec![], vec![]],
    };
    let prepared = prepare(
        &data.interactions,
        data.num_users,
        data.num_items,
        codes,
        &cfg.split,
        cfg.seed,
    )?;
    let rows = ablate_prepared(&prepared, cfg, modes)?;
    write_ablation_tsv(&cfg.ablation_path(), &rows, &cfg.eval.ks, &cfg.fingerprint())?;
    Ok(rows)
}

/// One sweep row: layer depth with its test report.
#[derive(Debug)]
pub struct SweepRow {
    pub layers: usize,
    pub report: EvalReport,
}

/// Trains the configured mode at each depth over a shared prepared world.
pub fn sweep_layers_prepared(
    prepared: &PreparedWorld,
    cfg: &RunConfig,
    layer_counts: &[usize],
) -> Result<Vec<SweepRow>> {
    let mode = InitMode::parse(&cfg.model.mode)?;
    let mut rows = Vec::with_capacity(layer_counts.len());
    for &layers in layer_counts {
        let mut sub = cfg.clone();
        sub.model.layers = layers;
        let (_, _, report) = train_and_evaluate(prepared, &sub, mode)?;
        rows.push(SweepRow { layers, report });
    }
    Ok(rows)
}

/// Disk-driven layer sweep; emits one row of metrics per depth.
pub fn run_sweep_layers(cfg: &RunConfig, layer_counts: &[usize]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if layer_counts.is_empty() {
        return Err(Error::invalid("sweep needs at least one layer count"));
    }
    for &l in layer_counts {
        if l == 0 || l > 9 {
            return Err(Error::invalid(format!(
                "layer count {l} outside the supported 1..=9 range"
            )));
        }
    }
    let image = load_compressed(cfg, TableKind::CompressedImage)?;
    let text = load_compressed(cfg, TableKind::CompressedText)?;
    let review = load_compressed(cfg, TableKind::CompressedReview)?;
    let data = load_dataset(cfg, Some(review.rows()))?;
    let codes = CompressedTables {
        image,
        text,
        review,
        traces: [vec![], vec![], vec![]],
    };
    let prepared = prepare(
        &data.interactions,
        data.num_users,
        data.num_items,
        codes,
        &cfg.split,
        cfg.seed,
    )?;
    let rows = sweep_layers_prepared(&prepared, cfg, layer_counts)?;

    let path = cfg.sweep_path();
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "# fingerprint={}", cfg.fingerprint()).map_err(|e| Error::io(&path, e))?;
    let mut header = String::from("layers");
    for &k in &cfg.eval.ks {
        header.push_str(&format!("\tR@{k}\tN@{k}"));
    }
    writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
    for row in &rows {
        let mut line = row.layers.to_string();
        for &k in &cfg.eval.ks {
            line.push_str(&format!(
                "\t{:.10}\t{:.10}",
                row.report.recall(k).unwrap_or(0.0),
                row.report.ndcg(k).unwrap_or(0.0)
            ));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_artifact_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mat");
        let m = DenseMatrix::from_vec(2, 3, vec![1.0, -2.5, 3.25, 0.0, 9.5, -0.125]).unwrap();
        write_matrix(&path, &m, "item_init", "fp77").unwrap();
        let (loaded, fp) = read_matrix(&path, "item_init").unwrap();
        assert_eq!(loaded.data(), m.data());
        assert_eq!(fp, "fp77");
        assert!(read_matrix(&path, "user_init").is_err());
    }

    #[test]
    fn ae_step_cap_limits_epochs() {
        let ccfg = CompressConfig {
            epochs: 100,
            max_steps: 10,
            batch: 32,
            ..Default::default()
        };
        // 64 rows, batch 32 -> 2 batches/epoch; 10 steps caps at 5 epochs.
        assert_eq!(ae_options(&ccfg, 64, 0).epochs, 5);
        // Cap disabled.
        let ccfg = CompressConfig {
            epochs: 100,
            max_steps: 0,
            ..Default::default()
        };
        assert_eq!(ae_options(&ccfg, 64, 0).epochs, 100);
    }

    #[test]
    fn missing_artifact_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.paths.out_dir = dir.path().display().to_string();
        let err = run_ablation(&cfg, &[InitMode::Random]).unwrap_err();
        match err {
            Error::MissingArtifact { stage, .. } => assert_eq!(stage, "compress"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
