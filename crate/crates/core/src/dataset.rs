//! Data model and ingestion: the user/item catalog, interaction lists with
//! optional review-embedding references, embedding tables with a binary or
//! TSV on-disk format, per-user train/val/test splitting, negative sampling,
//! and an optional k-core filter.

use crate::graph::BipartiteGraph;
use crate::numerics::{all_finite, seeded_rng, DenseMatrix};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Bijective map between external string ids and dense indices.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

impl Catalog {
    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn user_id(&self, dense: usize) -> &str {
        &self.user_ids[dense]
    }

    pub fn item_id(&self, dense: usize) -> &str {
        &self.item_ids[dense]
    }

    pub fn user_dense(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item_dense(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    pub fn intern_user(&mut self, id: &str) -> usize {
        if let Some(&ix) = self.user_index.get(id) {
            return ix;
        }
        let ix = self.user_ids.len();
        self.user_ids.push(id.to_string());
        self.user_index.insert(id.to_string(), ix);
        ix
    }

    pub fn intern_item(&mut self, id: &str) -> usize {
        if let Some(&ix) = self.item_index.get(id) {
            return ix;
        }
        let ix = self.item_ids.len();
        self.item_ids.push(id.to_string());
        self.item_index.insert(id.to_string(), ix);
        ix
    }
}

/// One observed (user, item) pair, optionally pointing at a row of the
/// review embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub review_row: Option<usize>,
}

/// What an embedding table holds; raw tables come from upstream encoders,
/// compressed ones from the auto-encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    RawImage,
    RawText,
    RawReview,
    CompressedImage,
    CompressedText,
    CompressedReview,
}

impl TableKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TableKind::RawImage => "raw_image",
            TableKind::RawText => "raw_text",
            TableKind::RawReview => "raw_review",
            TableKind::CompressedImage => "compressed_image",
            TableKind::CompressedText => "compressed_text",
            TableKind::CompressedReview => "compressed_review",
        }
    }

    pub fn parse(s: &str) -> Result<TableKind> {
        Ok(match s {
            "raw_image" => TableKind::RawImage,
            "raw_text" => TableKind::RawText,
            "raw_review" => TableKind::RawReview,
            "compressed_image" => TableKind::CompressedImage,
            "compressed_text" => TableKind::CompressedText,
            "compressed_review" => TableKind::CompressedReview,
            other => return Err(Error::invalid(format!("unknown table kind `{other}`"))),
        })
    }

    pub fn compressed(&self) -> TableKind {
        match self {
            TableKind::RawImage | TableKind::CompressedImage => TableKind::CompressedImage,
            TableKind::RawText | TableKind::CompressedText => TableKind::CompressedText,
            TableKind::RawReview | TableKind::CompressedReview => TableKind::CompressedReview,
        }
    }
}

impl fmt::Display for TableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dense per-entity embedding matrix. Row index i is the dense index of
/// entity i (item or interaction). All-zero rows are flagged as missing so
/// items without an image can run through the pipeline uniformly.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub kind: TableKind,
    pub matrix: DenseMatrix,
    pub missing: Vec<bool>,
}

impl EmbeddingTable {
    pub fn new(kind: TableKind, matrix: DenseMatrix) -> Result<Self> {
        if matrix.cols() == 0 {
            return Err(Error::invalid("embedding table needs dim > 0"));
        }
        if !matrix.is_finite() {
            return Err(Error::Numeric(format!("non-finite entry in {kind} table")));
        }
        let missing = (0..matrix.rows())
            .map(|r| matrix.row(r).iter().all(|&v| v == 0.0))
            .collect();
        Ok(EmbeddingTable {
            kind,
            matrix,
            missing,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    /// Writes header + little-endian f32 rows.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + self.matrix.data().len() * 4);
        buf.extend_from_slice(
            format!(
                "dim={} rows={} kind={} format=binary\n",
                self.dim(),
                self.rows(),
                self.kind
            )
            .as_bytes(),
        );
        for &v in self.matrix.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// TSV fallback: header + one tab-separated row per entity.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!(
            "dim={} rows={} kind={} format=tsv\n",
            self.dim(),
            self.rows(),
            self.kind
        ));
        for r in 0..self.rows() {
            let fields: Vec<String> = self.matrix.row(r).iter().map(|v| format!("{v}")).collect();
            out.push_str(&fields.join("\t"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::invalid(format!("{}: missing header", path.display())))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::invalid(format!("{}: non-utf8 header", path.display())))?;
        let mut dim = None;
        let mut rows = None;
        let mut kind = None;
        let mut format = "binary";
        for field in header.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(|| {
                Error::invalid(format!("{}: bad header field `{field}`", path.display()))
            })?;
            match key {
                "dim" => dim = Some(parse_count(path, 1, value)?),
                "rows" => rows = Some(parse_count(path, 1, value)?),
                "kind" => kind = Some(TableKind::parse(value)?),
                "format" => format = if value == "tsv" { "tsv" } else { "binary" },
                _ => {}
            }
        }
        let (dim, rows, kind) = match (dim, rows, kind) {
            (Some(d), Some(r), Some(k)) => (d, r, k),
            _ => {
                return Err(Error::invalid(format!(
                    "{}: header must carry dim=, rows=, kind=",
                    path.display()
                )))
            }
        };
        let body = &bytes[newline + 1..];
        let mut data = Vec::with_capacity(rows * dim);
        if format == "binary" {
            if body.len() != rows * dim * 4 {
                return Err(Error::invalid(format!(
                    "{}: expected {} payload bytes, found {}",
                    path.display(),
                    rows * dim * 4,
                    body.len()
                )));
            }
            for chunk in body.chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
            }
        } else {
            let text = std::str::from_utf8(body)
                .map_err(|_| Error::invalid(format!("{}: non-utf8 tsv body", path.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                for field in line.split('\t') {
                    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                        path: path.display().to_string(),
                        line: lineno + 2,
                        msg: format!("bad float `{field}`"),
                    })?;
                    data.push(v);
                }
            }
            if data.len() != rows * dim {
                return Err(Error::invalid(format!(
                    "{}: tsv body holds {} values, header says {}",
                    path.display(),
                    data.len(),
                    rows * dim
                )));
            }
        }
        if !all_finite(&data) {
            return Err(Error::Numeric(format!(
                "{}: non-finite embedding value",
                path.display()
            )));
        }
        EmbeddingTable::new(kind, DenseMatrix::from_vec(rows, dim, data)?)
    }
}

fn parse_count(path: &Path, line: usize, s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        msg: format!("bad count `{s}`"),
    })
}

/// Result of [`load_interactions`]: the densified catalog, the deduplicated
/// interaction list, and how many duplicate (user, item) rows were dropped.
#[derive(Debug)]
pub struct LoadedInteractions {
    pub catalog: Catalog,
    pub interactions: Vec<Interaction>,
    pub duplicates: usize,
}

/// Parses a `user<TAB>item<TAB>review_row|-` file, densifying ids in order of
/// first appearance. Duplicate (user, item) rows keep the first occurrence.
/// When `review_rows` is given, review references are range-checked.
pub fn load_interactions(path: &Path, review_rows: Option<usize>) -> Result<LoadedInteractions> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut catalog = Catalog::default();
    let mut interactions = Vec::new();
    let mut seen = HashMap::new();
    let mut duplicates = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (user, item, review) = match (fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(i), Some(r)) if fields.next().is_none() => (u, i, r),
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected user<TAB>item<TAB>review_row|-".into(),
                })
            }
        };
        let review_row = if review == "-" {
            None
        } else {
            let row: usize = review.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("bad review row `{review}`"),
            })?;
            if let Some(limit) = review_rows {
                if row >= limit {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        msg: format!("dangling review reference {row} (table has {limit} rows)"),
                    });
                }
            }
            Some(row)
        };
        let u = catalog.intern_user(user);
        let i = catalog.intern_item(item);
        if seen.insert((u, i), ()).is_some() {
            duplicates += 1;
            continue;
        }
        interactions.push(Interaction {
            user: u,
            item: i,
            review_row,
        });
    }
    Ok(LoadedInteractions {
        catalog,
        interactions,
        duplicates,
    })
}

/// Writes interactions using the catalog's external ids.
pub fn write_interactions(
    path: &Path,
    catalog: &Catalog,
    interactions: &[Interaction],
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for it in interactions {
        let review = match it.review_row {
            Some(r) => r.to_string(),
            None => "-".to_string(),
        };
        writeln!(
            w,
            "{}\t{}\t{}",
            catalog.user_id(it.user),
            catalog.item_id(it.item),
            review
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-user partition of the interaction list.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Vec<Interaction>,
    pub val: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub ratios: (f64, f64, f64),
}

impl SplitDataset {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// Item lists per user for one of the partitions.
    pub fn items_by_user(part: &[Interaction], num_users: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_users];
        for it in part {
            out[it.user].push(it.item);
        }
        out
    }
}

/// Shuffles each user's interactions and partitions them train/val/test with
/// floor rounding for val and test; the remainder goes to train, so every
/// user with any interactions appears in train. Users with fewer than three
/// interactions go entirely to train.
pub fn split_per_user(
    interactions: &[Interaction],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitDataset> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 || ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::invalid(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    let num_users = interactions.iter().map(|i| i.user + 1).max().unwrap_or(0);
    let mut per_user: Vec<Vec<Interaction>> = vec![Vec::new(); num_users];
    for it in interactions {
        per_user[it.user].push(*it);
    }
    let mut rng = seeded_rng(seed);
    let mut split = SplitDataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        ratios,
    };
    for list in per_user.iter_mut() {
        if list.is_empty() {
            continue;
        }
        list.shuffle(&mut rng);
        let n = list.len();
        if n < 3 {
            split.train.extend_from_slice(list);
            continue;
        }
        let n_val = (n as f64 * ratios.1).floor() as usize;
        let n_test = (n as f64 * ratios.2).floor() as usize;
        let n_train = n - n_val - n_test;
        split.train.extend_from_slice(&list[..n_train]);
        split.val.extend_from_slice(&list[n_train..n_train + n_val]);
        split.test.extend_from_slice(&list[n_train + n_val..]);
    }
    Ok(split)
}

/// Uniform draw from the items the user has not interacted with (train graph),
/// by rejection sampling.
pub fn sample_negative(user: usize, graph: &BipartiteGraph, rng: &mut impl Rng) -> Result<usize> {
    let num_items = graph.num_items();
    if graph.items_of(user).len() >= num_items {
        return Err(Error::invalid(format!(
            "user {user} interacted with all {num_items} items"
        )));
    }
    loop {
        let candidate = rng.gen_range(0..num_items);
        if !graph.has_edge(user, candidate) {
            return Ok(candidate);
        }
    }
}

/// Iteratively removes users and items with fewer than `k` interactions until
/// every remaining degree is at least `k`. Whole below-threshold layers are
/// removed per round, which converges to the maximal k-core independent of
/// iteration order. Returns the surviving interactions in input order.
pub fn k_core_filter(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    if k == 0 {
        return interactions.to_vec();
    }
    let num_users = interactions.iter().map(|i| i.user + 1).max().unwrap_or(0);
    let num_items = interactions.iter().map(|i| i.item + 1).max().unwrap_or(0);
    let mut alive: Vec<bool> = vec![true; interactions.len()];
    loop {
        let mut udeg = vec![0usize; num_users];
        let mut ideg = vec![0usize; num_items];
        for (ix, it) in interactions.iter().enumerate() {
            if alive[ix] {
                udeg[it.user] += 1;
                ideg[it.item] += 1;
            }
        }
        let mut changed = false;
        for (ix, it) in interactions.iter().enumerate() {
            if alive[ix] && (udeg[it.user] < k || ideg[it.item] < k) {
                alive[ix] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    interactions
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(it, _)| *it)
        .collect()
}

/// Reads the whole file as raw bytes (round-trip checks, fingerprint hashing).
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
