//! Run configuration: one TOML-backed struct covering every pipeline stage,
//! flag overrides applied on top, and a SHA-256 fingerprint of the canonical
//! serialization that gets embedded in every output file.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PathsConfig {
    /// Root for every stage artifact.
    pub out_dir: String,
    /// Input overrides; empty means the standard name under `out_dir`.
    pub interactions: String,
    pub raw_image: String,
    pub raw_text: String,
    pub raw_review: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: "out".into(),
            interactions: String::new(),
            raw_image: String::new(),
            raw_text: String::new(),
            raw_review: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.75,
            val: 0.05,
            test: 0.20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Compressed width of each content/review embedding.
    pub code_dim: usize,
    pub layers: usize,
    pub lambda_bpr: f64,
    /// Regularize layer-0 parameters instead of final embeddings.
    pub reg_layer0: bool,
    pub mode: String,
    pub freeze_items: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            code_dim: 64,
            layers: 7,
            lambda_bpr: 1e-4,
            reg_layer0: false,
            mode: "printf".into(),
            freeze_items: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfigSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
}

impl Default for TrainConfigSection {
    fn default() -> Self {
        TrainConfigSection {
            lr: 1e-3,
            weight_decay: 1e-2,
            batch: 4096,
            epochs: 200,
            patience: 20,
            eval_every: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CompressConfig {
    pub epochs: usize,
    /// Optimizer-step cap per auto-encoder; keeps large review tables from
    /// dominating wall time. 0 disables the cap.
    pub max_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub l2_image: f64,
    pub l2_text: f64,
    pub l2_review: f64,
    /// L2-normalize compressed rows (off by default).
    pub normalize_codes: bool,
}

impl Default for CompressConfig {
    fn default() -> Self {
        CompressConfig {
            epochs: 10,
            max_steps: 250,
            batch: 128,
            lr: 1e-3,
            weight_decay: 1e-2,
            l2_image: 1e-4,
            l2_text: 1e-4,
            l2_review: 1e-4,
            normalize_codes: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AlignConfig {
    /// When set, the compress stage consumes the projected tables written by
    /// the align stage instead of the raw ones.
    pub first: bool,
    pub proj_dim: usize,
    pub temp_init: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            first: false,
            proj_dim: 256,
            temp_init: 0.07,
            epochs: 200,
            batch: 32,
            lr: 1e-3,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_topics: usize,
    pub interaction_rate: f64,
    pub sigma_review: f64,
    pub sigma_content: f64,
    pub affinity_sharpness: f64,
    pub topic_mix: f64,
    pub min_interactions_per_user: usize,
    pub raw_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let w = crate::synth::PlantedWorld::default();
        SynthConfig {
            num_users: w.num_users,
            num_items: w.num_items,
            num_topics: w.num_topics,
            interaction_rate: w.interaction_rate,
            sigma_review: w.sigma_review,
            sigma_content: w.sigma_content,
            affinity_sharpness: w.affinity_sharpness,
            topic_mix: w.topic_mix,
            min_interactions_per_user: w.min_interactions_per_user,
            raw_dim: w.raw_dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Cluster count for the cross-relation export.
    pub export_clusters: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![5, 10],
            export_clusters: 4,
        }
    }
}

/// Full run configuration; identical config + seed means identical outputs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfigSection,
    pub compress: CompressConfig,
    pub align: AlignConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Validates cross-field constraints before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let sum = self.split.train + self.split.val + self.split.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {sum}, need 1")));
        }
        if self.model.code_dim == 0 {
            return Err(Error::Config("code_dim must be positive".into()));
        }
        crate::graph::InitMode::parse(&self.model.mode)?;
        if self.model.mode != "bprmf" && (self.model.layers == 0 || self.model.layers > 9) {
            return Err(Error::Config(format!(
                "layers = {} outside the supported 1..=9 range",
                self.model.layers
            )));
        }
        if self.eval.ks.is_empty() {
            return Err(Error::Config("eval.ks must be non-empty".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical serialization; embedded in every output.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.out_dir)
    }

    fn input_or_default(&self, explicit: &str, default_name: &str) -> PathBuf {
        if explicit.is_empty() {
            self.out_dir().join(default_name)
        } else {
            PathBuf::from(explicit)
        }
    }

    pub fn interactions_path(&self) -> PathBuf {
        self.input_or_default(&self.paths.interactions, "interactions.tsv")
    }

    pub fn raw_image_path(&self) -> PathBuf {
        self.input_or_default(&self.paths.raw_image, "raw_image.emb")
    }

    pub fn raw_text_path(&self) -> PathBuf {
        self.input_or_default(&self.paths.raw_text, "raw_text.emb")
    }

    pub fn raw_review_path(&self) -> PathBuf {
        self.input_or_default(&self.paths.raw_review, "raw_review.emb")
    }

    pub fn projected_image_path(&self) -> PathBuf {
        self.out_dir().join("projected_image.emb")
    }

    pub fn projected_text_path(&self) -> PathBuf {
        self.out_dir().join("projected_text.emb")
    }

    pub fn compressed_path(&self, kind: crate::dataset::TableKind) -> PathBuf {
        self.out_dir().join(format!("{}.emb", kind.as_str()))
    }

    pub fn user_init_path(&self) -> PathBuf {
        self.out_dir().join("user_init.mat")
    }

    pub fn item_init_path(&self) -> PathBuf {
        self.out_dir().join("item_init.mat")
    }

    pub fn cross_relation_path(&self) -> PathBuf {
        self.out_dir().join("cross_relation.tsv")
    }

    pub fn checkpoint_path(&self, mode: &str) -> PathBuf {
        self.out_dir().join(format!("model_{mode}.ckpt"))
    }

    pub fn train_trace_path(&self, mode: &str) -> PathBuf {
        self.out_dir().join(format!("trace_{mode}.tsv"))
    }

    pub fn report_tsv_path(&self, mode: &str) -> PathBuf {
        self.out_dir().join(format!("report_{mode}.tsv"))
    }

    pub fn report_json_path(&self, mode: &str) -> PathBuf {
        self.out_dir().join(format!("report_{mode}.json"))
    }

    pub fn ablation_path(&self) -> PathBuf {
        self.out_dir().join("ablation.tsv")
    }

    pub fn sweep_path(&self) -> PathBuf {
        self.out_dir().join("sweep_layers.tsv")
    }

    pub fn world_meta_path(&self) -> PathBuf {
        self.out_dir().join("world.json")
    }
}
