//! Command-line entry point wiring configuration, pipeline stages, and
//! reports. Stage order: synth (or bring your own data) -> align (optional)
//! -> compress -> init-users -> train -> eval, plus the ablate and
//! sweep-layers experiment runners.

use clap::{Parser, Subcommand};
use revrec::config::RunConfig;
use revrec::graph::InitMode;
use revrec::pipeline;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "revrec", version, about = "Review-aware graph recommender")]
struct Cli {
    /// TOML config file; command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact directory.
    #[arg(long, global = true, env = "REVREC_OUT")]
    out: Option<String>,

    /// Master seed; every stage derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-topic synthetic dataset with ground truth.
    Synth {
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        topics: Option<usize>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        sigma_review: Option<f64>,
        #[arg(long)]
        sigma_content: Option<f64>,
        #[arg(long)]
        sharpness: Option<f64>,
        #[arg(long)]
        raw_dim: Option<usize>,
    },
    /// Train auto-encoders and write compressed embedding tables.
    Compress {
        /// Which table(s): image, text, review, or all.
        #[arg(long, default_value = "all")]
        kind: String,
        #[arg(long)]
        code_dim: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// L2 coefficient applied to all selected auto-encoders.
        #[arg(long)]
        l2: Option<f64>,
        /// L2-normalize compressed rows.
        #[arg(long)]
        normalize_codes: bool,
    },
    /// Train the image/text contrastive head; write projected tables.
    Align {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        proj_dim: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Make the compress stage consume the projected tables.
        #[arg(long)]
        first: bool,
    },
    /// Build review means, the cross-relation matrix, and user inits.
    InitUsers {
        /// Cluster count for the cross-relation export.
        #[arg(long)]
        export_k: Option<usize>,
    },
    /// Train the propagation model with BPR and early stopping.
    Train {
        /// printf | no_image | no_title | no_raum | none | bprmf.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        lambda_bpr: Option<f64>,
        /// Apply the BPR L2 term to layer-0 parameters instead of finals.
        #[arg(long)]
        reg_layer0: bool,
        /// Keep item embeddings fixed at their initialization.
        #[arg(long)]
        freeze_items: bool,
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Evaluate a trained checkpoint on the test partition.
    Eval {
        #[arg(long)]
        mode: Option<String>,
        /// Comma-separated metric depths, e.g. 5,10.
        #[arg(long)]
        ks: Option<String>,
        /// Accept a checkpoint whose fingerprint mismatches this config.
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate several init modes on the shared seed and split.
    Ablate {
        /// Comma-separated mode list.
        #[arg(long, default_value = "printf,no_raum,none")]
        modes: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Train at several propagation depths and emit per-depth metrics.
    SweepLayers {
        /// Comma-separated layer counts.
        #[arg(long, default_value = "1,3,5,7,9")]
        layers: String,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn parse_usize_list(s: &str) -> revrec::Result<Vec<usize>> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| revrec::Error::Config(format!("bad list entry `{part}`")))
        })
        .collect()
}

fn load_config(cli: &Cli) -> revrec::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

macro_rules! set_if {
    ($target:expr, $value:expr) => {
        if let Some(v) = $value {
            $target = v;
        }
    };
}

fn run(cli: Cli) -> revrec::Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth {
            users,
            items,
            topics,
            rate,
            sigma_review,
            sigma_content,
            sharpness,
            raw_dim,
        } => {
            set_if!(cfg.synth.num_users, users);
            set_if!(cfg.synth.num_items, items);
            set_if!(cfg.synth.num_topics, topics);
            set_if!(cfg.synth.interaction_rate, rate);
            set_if!(cfg.synth.sigma_review, sigma_review);
            set_if!(cfg.synth.sigma_content, sigma_content);
            set_if!(cfg.synth.affinity_sharpness, sharpness);
            set_if!(cfg.synth.raw_dim, raw_dim);
            let gen = pipeline::run_synth(&cfg)?;
            println!(
                "synth: {} users, {} items, {} interactions (density {:.5}) -> {}",
                gen.num_users(),
                gen.num_items(),
                gen.interactions.len(),
                gen.density,
                cfg.out_dir().display()
            );
        }
        Command::Compress {
            kind,
            code_dim,
            epochs,
            max_steps,
            batch,
            l2,
            normalize_codes,
        } => {
            set_if!(cfg.model.code_dim, code_dim);
            set_if!(cfg.compress.epochs, epochs);
            set_if!(cfg.compress.max_steps, max_steps);
            set_if!(cfg.compress.batch, batch);
            if let Some(l2) = l2 {
                cfg.compress.l2_image = l2;
                cfg.compress.l2_text = l2;
                cfg.compress.l2_review = l2;
            }
            if normalize_codes {
                cfg.compress.normalize_codes = true;
            }
            let which = pipeline::CompressKind::parse(&kind)?;
            for (table, final_loss) in pipeline::run_compress(&cfg, which)? {
                println!(
                    "compress {}: final objective {:.6} -> {}",
                    table,
                    final_loss,
                    cfg.compressed_path(table.compressed()).display()
                );
            }
        }
        Command::Align {
            epochs,
            batch,
            proj_dim,
            lr,
            first,
        } => {
            set_if!(cfg.align.epochs, epochs);
            set_if!(cfg.align.batch, batch);
            set_if!(cfg.align.proj_dim, proj_dim);
            set_if!(cfg.align.lr, lr);
            if first {
                cfg.align.first = true;
            }
            let (final_loss, top1) = pipeline::run_align(&cfg)?;
            println!(
                "align: final loss {:.4}, in-sample top-1 retrieval {:.3} -> {}",
                final_loss,
                top1,
                cfg.projected_image_path().display()
            );
        }
        Command::InitUsers { export_k } => {
            set_if!(cfg.eval.export_clusters, export_k);
            let summary = pipeline::run_init_users(&cfg)?;
            println!(
                "init-users: {} users ({} fallback, {} empty){} -> {}",
                summary.users,
                summary.fallback_users,
                summary.empty_users,
                if summary.clusters_degenerate {
                    ", cross-relation degenerate (single cluster)"
                } else {
                    ""
                },
                cfg.user_init_path().display()
            );
        }
        Command::Train {
            mode,
            layers,
            epochs,
            patience,
            batch,
            lr,
            weight_decay,
            lambda_bpr,
            reg_layer0,
            freeze_items,
            eval_every,
        } => {
            set_if!(cfg.model.mode, mode);
            set_if!(cfg.model.layers, layers);
            set_if!(cfg.train.epochs, epochs);
            set_if!(cfg.train.patience, patience);
            set_if!(cfg.train.batch, batch);
            set_if!(cfg.train.lr, lr);
            set_if!(cfg.train.weight_decay, weight_decay);
            set_if!(cfg.model.lambda_bpr, lambda_bpr);
            set_if!(cfg.train.eval_every, eval_every);
            if reg_layer0 {
                cfg.model.reg_layer0 = true;
            }
            if freeze_items {
                cfg.model.freeze_items = true;
            }
            let trace = pipeline::run_train(&cfg)?;
            println!(
                "train {}: {} epochs, best epoch {}, val NDCG@10 {} -> {}",
                cfg.model.mode,
                trace.rows.len(),
                trace.best_epoch,
                trace
                    .best_val_ndcg10
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "n/a".into()),
                cfg.checkpoint_path(&cfg.model.mode).display()
            );
        }
        Command::Eval { mode, ks, force } => {
            set_if!(cfg.model.mode, mode);
            if let Some(ks) = ks {
                cfg.eval.ks = parse_usize_list(&ks)?;
            }
            let report = pipeline::run_eval(&cfg, force)?;
            let mut line = format!("eval {}:", cfg.model.mode);
            for &k in &report.ks {
                line.push_str(&format!(
                    " R@{k}={:.4} N@{k}={:.4}",
                    report.recall(k).unwrap_or(0.0),
                    report.ndcg(k).unwrap_or(0.0)
                ));
            }
            line.push_str(&format!(
                " ({} users, {} skipped)",
                report.evaluated_users, report.skipped_users
            ));
            println!("{line}");
        }
        Command::Ablate {
            modes,
            epochs,
            patience,
        } => {
            set_if!(cfg.train.epochs, epochs);
            set_if!(cfg.train.patience, patience);
            let modes: Vec<InitMode> = modes
                .split(',')
                .map(|m| InitMode::parse(m.trim()))
                .collect::<revrec::Result<_>>()?;
            let rows = pipeline::run_ablation(&cfg, &modes)?;
            for row in &rows {
                let mut line = format!("ablate {}:", row.mode);
                for &k in &row.report.ks {
                    line.push_str(&format!(
                        " R@{k}={:.4} N@{k}={:.4}",
                        row.report.recall(k).unwrap_or(0.0),
                        row.report.ndcg(k).unwrap_or(0.0)
                    ));
                }
                println!("{line}");
            }
            println!("ablate: wrote {}", cfg.ablation_path().display());
        }
        Command::SweepLayers { layers, epochs } => {
            set_if!(cfg.train.epochs, epochs);
            let counts = parse_usize_list(&layers)?;
            let rows = pipeline::run_sweep_layers(&cfg, &counts)?;
            for row in &rows {
                let mut line = format!("sweep L={}:", row.layers);
                for &k in &row.report.ks {
                    line.push_str(&format!(
                        " R@{k}={:.4} N@{k}={:.4}",
                        row.report.recall(k).unwrap_or(0.0),
                        row.report.ndcg(k).unwrap_or(0.0)
                    ));
                }
                println!("{line}");
            }
            println!("sweep-layers: wrote {}", cfg.sweep_path().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
