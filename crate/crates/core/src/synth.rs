//! Synthetic dataset generator with planted user/item topic structure.
//! Interactions are sampled from a sharpened topic-affinity distribution,
//! content embeddings are noisy linear lifts of item topics, and review
//! embeddings are noisy lifts of the elementwise user-item topic product,
//! so they carry user-specific signal. True affinities are retained as a
//! ground-truth ranking oracle.

use crate::dataset::{
    write_interactions, Catalog, EmbeddingTable, Interaction, TableKind,
};
use crate::numerics::{dot, seeded_rng, DenseMatrix};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Generation parameters. Topic vectors are unit-norm mixtures of a primary
/// topic and uniform per-entity variation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedWorld {
    pub num_users: usize,
    pub num_items: usize,
    pub num_topics: usize,
    /// Target interaction density: each user draws about
    /// `interaction_rate * num_items` items.
    pub interaction_rate: f64,
    pub sigma_review: f64,
    pub sigma_content: f64,
    /// Sharpness of the interaction sampler; higher concentrates draws on
    /// the user's own topic block.
    pub affinity_sharpness: f64,
    /// Weight of per-entity uniform variation mixed into the primary topic.
    pub topic_mix: f64,
    /// Fraction of each user's interactions drawn uniformly at random
    /// instead of by affinity: accidental exposure whose reviews carry
    /// little resonance.
    pub exposure_noise: f64,
    /// Fraction of users drawing boosted interaction counts; concentrates
    /// activity so a sizable user subset clears the validation-split floor.
    pub heavy_user_fraction: f64,
    /// Mean multiplier for heavy users; light users are scaled down to keep
    /// the overall interaction rate on target.
    pub heavy_boost: f64,
    /// Floor on per-user interaction counts (0 disables the floor).
    pub min_interactions_per_user: usize,
    pub raw_dim: usize,
    pub seed: u64,
}

impl Default for PlantedWorld {
    fn default() -> Self {
        PlantedWorld {
            num_users: 1000,
            num_items: 600,
            num_topics: 8,
            interaction_rate: 0.025,
            sigma_review: 0.1,
            sigma_content: 0.1,
            affinity_sharpness: 60.0,
            topic_mix: 1.5,
            exposure_noise: 0.45,
            heavy_user_fraction: 0.3,
            heavy_boost: 2.0,
            min_interactions_per_user: 3,
            raw_dim: 768,
            seed: 0,
        }
    }
}

/// Everything the generator produced, including the ground truth that never
/// leaves the oracle side.
#[derive(Debug, Clone)]
pub struct GeneratedWorld {
    pub world: PlantedWorld,
    pub catalog: Catalog,
    pub interactions: Vec<Interaction>,
    pub raw_image: EmbeddingTable,
    pub raw_text: EmbeddingTable,
    pub raw_review: EmbeddingTable,
    /// True user-item affinities (num_users x num_items).
    pub affinity: DenseMatrix,
    pub user_topics: DenseMatrix,
    pub item_topics: DenseMatrix,
    /// Primary topic per user, for probes.
    pub user_primary: Vec<usize>,
    pub item_primary: Vec<usize>,
    pub density: f64,
}

fn sample_poisson(lambda: f64, rng: &mut impl Rng) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let limit = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.gen::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

fn unit_topic_rows(
    count: usize,
    num_topics: usize,
    mix: f64,
    rng: &mut impl Rng,
) -> (DenseMatrix, Vec<usize>) {
    let mut rows = DenseMatrix::zeros(count, num_topics);
    let mut primaries = Vec::with_capacity(count);
    for r in 0..count {
        let primary = rng.gen_range(0..num_topics);
        primaries.push(primary);
        let row = rows.row_mut(r);
        for (t, v) in row.iter_mut().enumerate() {
            *v = if t == primary { 1.0 } else { 0.0 };
            *v += mix * rng.gen::<f64>();
        }
        let norm = dot(row, row).sqrt();
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    (rows, primaries)
}

/// Random lift matrix (raw_dim x num_topics) with N(0, 1/num_topics) entries.
fn lift_matrix(raw_dim: usize, num_topics: usize, rng: &mut impl Rng) -> DenseMatrix {
    let scale = 1.0 / (num_topics as f64).sqrt();
    let mut m = DenseMatrix::zeros(raw_dim, num_topics);
    for v in m.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z * scale;
    }
    m
}

fn lift_into(
    out: &mut [f64],
    lift: &DenseMatrix,
    latent: &[f64],
    noise: f64,
    rng: &mut impl Rng,
) {
    for (d, o) in out.iter_mut().enumerate() {
        let z: f64 = StandardNormal.sample(rng);
        *o = dot(lift.row(d), latent) + noise * z;
    }
}

/// Snap a matrix to f32 precision so in-memory values match the binary
/// embedding files bit-for-bit after a round trip.
fn quantize_f32(m: &mut DenseMatrix) {
    for v in m.data_mut() {
        *v = *v as f32 as f64;
    }
}

pub fn generate(world: &PlantedWorld) -> Result<GeneratedWorld> {
    if world.num_users == 0 || world.num_items == 0 || world.num_topics == 0 {
        return Err(Error::invalid("world needs users, items, and topics"));
    }
    if world.sigma_review < 0.0 || world.sigma_content < 0.0 {
        return Err(Error::invalid("noise levels must be non-negative"));
    }
    let mut rng = seeded_rng(world.seed);
    let (user_topics, user_primary) =
        unit_topic_rows(world.num_users, world.num_topics, world.topic_mix, &mut rng);
    let (item_topics, item_primary) =
        unit_topic_rows(world.num_items, world.num_topics, world.topic_mix, &mut rng);

    let mut affinity = DenseMatrix::zeros(world.num_users, world.num_items);
    for u in 0..world.num_users {
        for i in 0..world.num_items {
            *affinity.at_mut(u, i) = dot(user_topics.row(u), item_topics.row(i));
        }
    }

    // Interactions: per user, a Poisson-sized set of weighted draws without
    // replacement (weight exp(sharpness * affinity)), with an
    // `exposure_noise` fraction of the draws replaced by uniform picks.
    // Interaction counts follow a two-point mixture: a `heavy_user_fraction`
    // of users draw `heavy_boost` times the mean, light users are scaled to
    // keep the configured rate.
    if !(0.0..=1.0).contains(&world.exposure_noise)
        || !(0.0..=1.0).contains(&world.heavy_user_fraction)
    {
        return Err(Error::invalid("fractions must lie in [0, 1]"));
    }
    let lambda = world.interaction_rate * world.num_items as f64;
    let heavy_lambda = lambda * world.heavy_boost;
    let light_lambda = if world.heavy_user_fraction >= 1.0 {
        heavy_lambda
    } else {
        ((lambda - world.heavy_user_fraction * heavy_lambda)
            / (1.0 - world.heavy_user_fraction))
            .max(0.0)
    };
    let mut drawn_interactions = Vec::new();
    for u in 0..world.num_users {
        let user_lambda = if rng.gen::<f64>() < world.heavy_user_fraction {
            heavy_lambda
        } else {
            light_lambda
        };
        let drawn = sample_poisson(user_lambda, &mut rng)
            .max(world.min_interactions_per_user)
            .min(world.num_items.saturating_sub(1));
        let mut weights: Vec<f64> = (0..world.num_items)
            .map(|i| (world.affinity_sharpness * affinity.at(u, i)).exp())
            .collect();
        for _ in 0..drawn {
            let uniform_draw = rng.gen::<f64>() < world.exposure_noise;
            let picked = if uniform_draw {
                // Uniform over not-yet-drawn items.
                let remaining = weights.iter().filter(|&&w| w > 0.0).count();
                if remaining == 0 {
                    break;
                }
                let mut target = rng.gen_range(0..remaining);
                let mut pick = world.num_items - 1;
                for (i, &w) in weights.iter().enumerate() {
                    if w <= 0.0 {
                        continue;
                    }
                    if target == 0 {
                        pick = i;
                        break;
                    }
                    target -= 1;
                }
                pick
            } else {
                let total: f64 = weights.iter().sum();
                if total <= 0.0 {
                    break;
                }
                let mut target = rng.gen::<f64>() * total;
                let mut pick = world.num_items - 1;
                for (i, &w) in weights.iter().enumerate() {
                    if w <= 0.0 {
                        continue;
                    }
                    target -= w;
                    if target <= 0.0 {
                        pick = i;
                        break;
                    }
                }
                pick
            };
            drawn_interactions.push((u, picked));
            weights[picked] = 0.0;
        }
    }
    if drawn_interactions.is_empty() {
        return Err(Error::invalid(format!(
            "degenerate world: no interactions generated (rate {}, {} items)",
            world.interaction_rate, world.num_items
        )));
    }

    // Relabel entities by first appearance in the emitted interaction list,
    // dropping the never-interacted ones, so dense indices here match what
    // the interactions-file loader will assign and embedding row i really is
    // entity i on both sides of a round trip.
    let mut user_map: Vec<Option<usize>> = vec![None; world.num_users];
    let mut item_map: Vec<Option<usize>> = vec![None; world.num_items];
    let mut user_order = Vec::new();
    let mut item_order = Vec::new();
    let mut catalog = Catalog::default();
    let mut interactions = Vec::with_capacity(drawn_interactions.len());
    for (row, &(u, i)) in drawn_interactions.iter().enumerate() {
        let du = *user_map[u].get_or_insert_with(|| {
            user_order.push(u);
            catalog.intern_user(&format!("u{u}"))
        });
        let di = *item_map[i].get_or_insert_with(|| {
            item_order.push(i);
            catalog.intern_item(&format!("i{i}"))
        });
        interactions.push(Interaction {
            user: du,
            item: di,
            review_row: Some(row),
        });
    }
    let num_users = user_order.len();
    let num_items = item_order.len();
    let permute_rows = |m: &DenseMatrix, order: &[usize]| {
        let mut out = DenseMatrix::zeros(order.len(), m.cols());
        for (new, &old) in order.iter().enumerate() {
            out.row_mut(new).copy_from_slice(m.row(old));
        }
        out
    };
    let user_topics = permute_rows(&user_topics, &user_order);
    let item_topics = permute_rows(&item_topics, &item_order);
    let user_primary: Vec<usize> = user_order.iter().map(|&u| user_primary[u]).collect();
    let item_primary: Vec<usize> = item_order.iter().map(|&i| item_primary[i]).collect();
    let mut relabeled_affinity = DenseMatrix::zeros(num_users, num_items);
    for (nu, &ou) in user_order.iter().enumerate() {
        for (ni, &oi) in item_order.iter().enumerate() {
            *relabeled_affinity.at_mut(nu, ni) = affinity.at(ou, oi);
        }
    }
    let affinity = relabeled_affinity;

    let lift_img = lift_matrix(world.raw_dim, world.num_topics, &mut rng);
    let lift_txt = lift_matrix(world.raw_dim, world.num_topics, &mut rng);
    let lift_rev = lift_matrix(world.raw_dim, world.num_topics, &mut rng);

    let mut raw_image = DenseMatrix::zeros(num_items, world.raw_dim);
    let mut raw_text = DenseMatrix::zeros(num_items, world.raw_dim);
    for i in 0..num_items {
        let latent = item_topics.row(i).to_vec();
        lift_into(raw_image.row_mut(i), &lift_img, &latent, world.sigma_content, &mut rng);
        lift_into(raw_text.row_mut(i), &lift_txt, &latent, world.sigma_content, &mut rng);
    }
    let mut raw_review = DenseMatrix::zeros(interactions.len(), world.raw_dim);
    for (row, it) in interactions.iter().enumerate() {
        let latent: Vec<f64> = user_topics
            .row(it.user)
            .iter()
            .zip(item_topics.row(it.item))
            .map(|(a, b)| a * b)
            .collect();
        lift_into(raw_review.row_mut(row), &lift_rev, &latent, world.sigma_review, &mut rng);
    }
    quantize_f32(&mut raw_image);
    quantize_f32(&mut raw_text);
    quantize_f32(&mut raw_review);

    // Reported relative to the configured grid, so it tracks the requested
    // rate even when some configured entities drew no interactions.
    let density = interactions.len() as f64 / (world.num_users * world.num_items) as f64;
    Ok(GeneratedWorld {
        world: world.clone(),
        catalog,
        interactions,
        raw_image: EmbeddingTable::new(TableKind::RawImage, raw_image)?,
        raw_text: EmbeddingTable::new(TableKind::RawText, raw_text)?,
        raw_review: EmbeddingTable::new(TableKind::RawReview, raw_review)?,
        affinity,
        user_topics,
        item_topics,
        user_primary,
        item_primary,
        density,
    })
}

impl GeneratedWorld {
    /// Actual entity counts after dropping never-interacted entities.
    pub fn num_users(&self) -> usize {
        self.catalog.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.catalog.num_items()
    }
}

/// Items ranked by true affinity (descending, index tie-break), skipping the
/// exclusion list. The performance ceiling for any trained model.
pub fn oracle_rank(affinity: &DenseMatrix, user: usize, exclude: &[usize]) -> Vec<usize> {
    let mut excluded = vec![false; affinity.cols()];
    for &i in exclude {
        excluded[i] = true;
    }
    let mut scored: Vec<(f64, usize)> = (0..affinity.cols())
        .filter(|&i| !excluded[i])
        .map(|i| (affinity.at(user, i), i))
        .collect();
    scored.sort_unstable_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite affinity")
            .then_with(|| a.1.cmp(&b.1))
    });
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Paths written by [`write_files`].
#[derive(Debug, Clone)]
pub struct WorldPaths {
    pub interactions: PathBuf,
    pub raw_image: PathBuf,
    pub raw_text: PathBuf,
    pub raw_review: PathBuf,
    pub ground_truth: PathBuf,
    pub meta: PathBuf,
}

impl WorldPaths {
    pub fn in_dir(dir: &Path) -> Self {
        WorldPaths {
            interactions: dir.join("interactions.tsv"),
            raw_image: dir.join("raw_image.emb"),
            raw_text: dir.join("raw_text.emb"),
            raw_review: dir.join("raw_review.emb"),
            ground_truth: dir.join("ground_truth.tsv"),
            meta: dir.join("world.json"),
        }
    }
}

/// Emits the dataset-module file formats plus `ground_truth.tsv`
/// (user, item, affinity) and a JSON metadata file.
pub fn write_files(gen: &GeneratedWorld, dir: &Path, fingerprint: &str) -> Result<WorldPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = WorldPaths::in_dir(dir);
    write_interactions(&paths.interactions, &gen.catalog, &gen.interactions)?;
    gen.raw_image.write_binary(&paths.raw_image)?;
    gen.raw_text.write_binary(&paths.raw_text)?;
    gen.raw_review.write_binary(&paths.raw_review)?;

    let file = std::fs::File::create(&paths.ground_truth)
        .map_err(|e| Error::io(&paths.ground_truth, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "# fingerprint={fingerprint}").map_err(|e| Error::io(&paths.ground_truth, e))?;
    for u in 0..gen.affinity.rows() {
        for i in 0..gen.affinity.cols() {
            writeln!(w, "{u}\t{i}\t{:.10}", gen.affinity.at(u, i))
                .map_err(|e| Error::io(&paths.ground_truth, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&paths.ground_truth, e))?;

    #[derive(Serialize)]
    struct Meta<'a> {
        fingerprint: &'a str,
        world: &'a PlantedWorld,
        interactions: usize,
        density: f64,
    }
    let meta = Meta {
        fingerprint,
        world: &gen.world,
        interactions: gen.interactions.len(),
        density: gen.density,
    };
    let mut bytes = serde_json::to_vec_pretty(&meta).map_err(|e| Error::invalid(e.to_string()))?;
    bytes.push(b'\n');
    std::fs::write(&paths.meta, bytes).map_err(|e| Error::io(&paths.meta, e))?;
    Ok(paths)
}

/// Reads `ground_truth.tsv` back into an affinity matrix.
pub fn load_ground_truth(path: &Path, num_users: usize, num_items: usize) -> Result<DenseMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut affinity = DenseMatrix::zeros(num_users, num_items);
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg,
        };
        let (u, i, a) = match (fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(i), Some(a)) => (u, i, a),
            _ => return Err(parse_err("expected user<TAB>item<TAB>affinity".into())),
        };
        let u: usize = u.parse().map_err(|_| parse_err(format!("bad user `{u}`")))?;
        let i: usize = i.parse().map_err(|_| parse_err(format!("bad item `{i}`")))?;
        let a: f64 = a.parse().map_err(|_| parse_err(format!("bad affinity `{a}`")))?;
        if u >= num_users || i >= num_items {
            return Err(parse_err(format!("index ({u}, {i}) out of range")));
        }
        *affinity.at_mut(u, i) = a;
    }
    Ok(affinity)
}
