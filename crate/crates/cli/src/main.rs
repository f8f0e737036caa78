//! Command-line driver: dataset generation, CKB/JSCC training, evaluation
//! sweeps, and report emission. Every command is deterministic under a
//! fixed `--seed` and replays to byte-identical CSVs.

use clap::{Args, Parser, Subcommand};
use envckb::ckb::CkbTrainConfig;
use envckb::config::SceneConfig;
use envckb::corpus;
use envckb::datastore;
use envckb::error::{Error, Result};
use envckb::fusion::FusionKind;
use envckb::jscc::{CsiMode, JsccDims, JsccTrainConfig};
use envckb::pipeline::{self, RoiRadius, RunSummary};
use num_complex::Complex64;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "envckb", version, about = "Environment-aware CKB / JSCC simulator")]
struct Cli {
    /// Worker cap; this build computes on a single thread, values > 1 are
    /// accepted and clamped. Env override: ENVCKB_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory. Env override: ENVCKB_DATA_DIR.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl DataArg {
    fn resolve(&self) -> Result<PathBuf> {
        if let Some(p) = &self.data {
            return Ok(p.clone());
        }
        std::env::var_os("ENVCKB_DATA_DIR")
            .map(PathBuf::from)
            .ok_or_else(|| Error::config("no --data flag and ENVCKB_DATA_DIR unset"))
    }
}

#[derive(Args)]
struct TrainBudget {
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Train:test split, e.g. 3:1.
    #[arg(long, default_value = "3:1")]
    split: String,
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
}

impl TrainBudget {
    fn ratio(&self) -> Result<(usize, usize)> {
        let (a, b) = self
            .split
            .split_once(':')
            .ok_or_else(|| Error::config("split must look like 3:1"))?;
        let a: usize = a.parse().map_err(|_| Error::config("bad split ratio"))?;
        let b: usize = b.parse().map_err(|_| Error::config("bad split ratio"))?;
        if a == 0 || b == 0 {
            return Err(Error::config("split sides must be positive"));
        }
        Ok((a, b))
    }

    fn ckb_config(&self, fusion: FusionKind, seed: u64) -> CkbTrainConfig {
        CkbTrainConfig {
            fusion,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            patience: self.patience,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an environment/channel dataset from procedural scenes.
    GenDataset {
        #[arg(long, default_value_t = 995)]
        samples: usize,
        /// Number of distinct procedural scene layouts.
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Scene config TOML; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the channel knowledge base on a dataset.
    TrainCkb {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "adaptive")]
        fusion: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[command(flatten)]
        budget: TrainBudget,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a CKB, or run an ablation sweep (retrains per variant).
    EvalCkb {
        #[command(flatten)]
        data: DataArg,
        /// Saved model directory (plain eval only).
        #[arg(long)]
        model: Option<PathBuf>,
        /// One of: roi, fusion, classes.
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long, default_value = "20,60,100,adaptive")]
        radii: String,
        #[arg(long, default_value = "adaptive,linear,cnn")]
        fusions: String,
        #[arg(long, default_value = "4,8,16,28")]
        classes: String,
        /// Gate modes compared at the largest class count.
        #[arg(long, default_value = "direct,uniform,adaptive")]
        gates: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[command(flatten)]
        budget: TrainBudget,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the JSCC coder pair under one CSI mode.
    TrainJscc {
        #[command(flatten)]
        data: DataArg,
        /// ckb | true_csi | no_knowledge.
        #[arg(long, default_value = "ckb")]
        mode: String,
        /// CKB model directory (required for mode ckb).
        #[arg(long)]
        ckb: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Training SNRs in dB (comma list or a:b:c range).
        #[arg(long, default_value = "0:20:5")]
        snrs: String,
        /// Cap on training pairs drawn from the train split.
        #[arg(long, default_value_t = 256)]
        pairs: usize,
        #[arg(long, default_value = "3:1")]
        split: String,
        #[arg(long, default_value_t = 42)]
        split_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate trained JSCC models over an SNR or EEM sweep.
    EvalJscc {
        #[command(flatten)]
        data: DataArg,
        /// Comma-separated saved model directories.
        #[arg(long)]
        models: String,
        /// snr | eem.
        #[arg(long, default_value = "snr")]
        sweep: String,
        #[arg(long, default_value = "-5:25:5")]
        snrs: String,
        #[arg(long, default_value = "1e-3,1e-2,1e-1")]
        eems: String,
        /// Fixed SNR for the EEM sweep.
        #[arg(long, default_value_t = 10.0)]
        snr: f64,
        /// CKB model directory, needed when a model was trained in ckb mode.
        #[arg(long)]
        ckb: Option<PathBuf>,
        /// Evaluation pairs drawn from the test split.
        #[arg(long, default_value_t = 32)]
        pairs: usize,
        #[arg(long, default_value = "3:1")]
        split: String,
        #[arg(long, default_value_t = 42)]
        split_seed: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize the artifacts in a run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    // a:b:c ranges are inclusive; otherwise a comma list.
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let a: f64 = parts[0].parse().map_err(|_| Error::config("bad range start"))?;
        let b: f64 = parts[1].parse().map_err(|_| Error::config("bad range end"))?;
        let c: f64 = parts[2].parse().map_err(|_| Error::config("bad range step"))?;
        if c <= 0.0 || b < a {
            return Err(Error::config("range must be start:end:step with step > 0"));
        }
        let mut out = Vec::new();
        let mut v = a;
        let mut i = 0;
        while v <= b + 1e-9 {
            out.push(a + i as f64 * c);
            i += 1;
            v = a + i as f64 * c;
        }
        return Ok(out);
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad number '{t}'")))
        })
        .collect()
}

fn load_scene_config(path: &Option<PathBuf>) -> Result<SceneConfig> {
    match path {
        Some(p) => SceneConfig::load(p),
        None => Ok(SceneConfig::default()),
    }
}

fn summary(path: &Path, command: &str, seed: u64, outputs: &[&Path]) -> Result<()> {
    pipeline::write_summary(
        path,
        &RunSummary {
            command: command.to_string(),
            seed,
            outputs: outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            notes: vec![],
        },
    )
}

fn bundled_images() -> Vec<Vec<f64>> {
    corpus::bundled_corpus()
}

fn ckb_knowledge(
    model_dir: &Path,
    samples: &[datastore::EnvSample],
    extent: [f64; 3],
) -> Result<std::collections::BTreeMap<u32, Vec<Complex64>>> {
    let model = pipeline::load_ckb_model(model_dir)?;
    let store = envckb::ckb::CkbStore::build(model, samples, extent)?;
    Ok(store
        .entries
        .into_iter()
        .map(|(k, v)| (k, v.h_ne))
        .collect())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    if let Some(t) = cli.threads.or_else(|| {
        std::env::var("ENVCKB_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    }) {
        if t == 0 {
            return Err(Error::config("--threads must be at least 1"));
        }
    }
    match cli.command {
        Command::GenDataset {
            samples,
            scenes,
            seed,
            config,
            out,
        } => {
            let cfg = load_scene_config(&config)?;
            let (data, manifest) = pipeline::generate_dataset(&cfg, samples, scenes, seed)?;
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            datastore::write_dataset(&data, &manifest, &out)?;
            summary(&out.join("summary.toml"), "gen-dataset", seed, &[&out])?;
            println!("wrote {} samples to {}", manifest.n, out.display());
            Ok(())
        }
        Command::TrainCkb {
            data,
            fusion,
            seed,
            budget,
            out,
        } => {
            let dir = data.resolve()?;
            let (samples, manifest) = datastore::read_dataset(&dir)?;
            let cfg = budget.ckb_config(FusionKind::parse(&fusion)?, seed);
            let run =
                pipeline::train_ckb_on_dataset(&samples, &manifest, budget.ratio()?, budget.split_seed, &cfg)?;
            pipeline::save_ckb_model(&run.model, &out)?;
            let hist_rows: Vec<Vec<String>> = run
                .history
                .iter()
                .map(|e| {
                    vec![
                        e.epoch.to_string(),
                        pipeline::fmt_f64(e.train_mse),
                        pipeline::fmt_f64(e.val_mse),
                    ]
                })
                .collect();
            let hist_path = out.join("history.csv");
            pipeline::write_csv(&hist_path, &["epoch", "train_mse", "val_mse"], &hist_rows)?;
            summary(&out.join("summary.toml"), "train-ckb", seed, &[&out, &hist_path])?;
            println!("held-out normalized MSE: {}", run.test_mse);
            Ok(())
        }
        Command::EvalCkb {
            data,
            model,
            sweep,
            radii,
            fusions,
            classes,
            gates,
            config,
            seed,
            budget,
            out,
        } => {
            let dir = data.resolve()?;
            let (samples, manifest) = datastore::read_dataset(&dir)?;
            let scene_cfg = load_scene_config(&config)?;
            let ratio = budget.ratio()?;
            let rows: Vec<Vec<String>>;
            let header: Vec<&str>;
            match sweep.as_deref() {
                None => {
                    let model_dir =
                        model.ok_or_else(|| Error::config("plain eval needs --model"))?;
                    let m = pipeline::load_ckb_model(&model_dir)?;
                    let (_, test_idx) =
                        datastore::split(samples.len(), ratio, budget.split_seed)?;
                    let mse =
                        envckb::ckb::evaluate_ckb(&m, &samples, manifest.extent, &test_idx)?;
                    header = vec!["model", "mse"];
                    rows = vec![vec![
                        model_dir.display().to_string(),
                        pipeline::fmt_f64(mse),
                    ]];
                }
                Some("roi") => {
                    let list: Vec<RoiRadius> = radii
                        .split(',')
                        .map(RoiRadius::parse)
                        .collect::<Result<_>>()?;
                    let cfg = budget.ckb_config(
                        FusionKind::Attention(envckb::fusion::GateMode::Adaptive),
                        seed,
                    );
                    let swept = pipeline::sweep_roi(
                        &samples, &manifest, &scene_cfg, &list, ratio, budget.split_seed, &cfg,
                    )?;
                    header = vec!["radius", "mse"];
                    rows = swept
                        .iter()
                        .map(|r| vec![r.label.clone(), pipeline::fmt_f64(r.mse)])
                        .collect();
                }
                Some("fusion") => {
                    let kinds: Vec<FusionKind> = fusions
                        .split(',')
                        .map(FusionKind::parse)
                        .collect::<Result<_>>()?;
                    let cfg = budget.ckb_config(kinds[0], seed);
                    let swept = pipeline::sweep_fusion(
                        &samples, &manifest, &kinds, ratio, budget.split_seed, &cfg,
                    )?;
                    header = vec!["fusion", "mse"];
                    rows = swept
                        .iter()
                        .map(|r| vec![r.label.clone(), pipeline::fmt_f64(r.mse)])
                        .collect();
                }
                Some("classes") => {
                    let z_list: Vec<usize> = classes
                        .split(',')
                        .map(|t| {
                            t.trim()
                                .parse()
                                .map_err(|_| Error::config(format!("bad class count '{t}'")))
                        })
                        .collect::<Result<_>>()?;
                    let cfg = budget.ckb_config(
                        FusionKind::Attention(envckb::fusion::GateMode::Adaptive),
                        seed,
                    );
                    let mut swept = pipeline::sweep_classes(
                        &samples, &manifest, &scene_cfg, &z_list, ratio, budget.split_seed, &cfg,
                    )?;
                    // Gate-mode comparison at the largest merged class count.
                    let kinds: Vec<FusionKind> = gates
                        .split(',')
                        .map(FusionKind::parse)
                        .collect::<Result<_>>()?;
                    let gate_rows = pipeline::sweep_fusion(
                        &samples, &manifest, &kinds, ratio, budget.split_seed, &cfg,
                    )?;
                    for g in gate_rows {
                        swept.push(pipeline::SweepRow {
                            label: format!("gate_{}", g.label),
                            mse: g.mse,
                        });
                    }
                    header = vec!["variant", "mse"];
                    rows = swept
                        .iter()
                        .map(|r| vec![r.label.clone(), pipeline::fmt_f64(r.mse)])
                        .collect();
                }
                Some(other) => {
                    return Err(Error::config(format!("unknown sweep '{other}'")));
                }
            }
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(Error::from)?;
                }
            }
            pipeline::write_csv(&out, &header, &rows)?;
            summary(&out.with_extension("summary.toml"), "eval-ckb", seed, &[&out])?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::TrainJscc {
            data,
            mode,
            ckb,
            seed,
            epochs,
            batch_size,
            lr,
            snrs,
            pairs,
            split,
            split_seed,
            out,
        } => {
            let dir = data.resolve()?;
            let (samples, manifest) = datastore::read_dataset(&dir)?;
            let mode = CsiMode::parse(&mode)?;
            let ratio = {
                let b = TrainBudget {
                    epochs: 0,
                    batch_size: 0,
                    lr: 0.0,
                    patience: 0,
                    weight_decay: 0.0,
                    split,
                    split_seed,
                };
                b.ratio()?
            };
            let (train_idx, _) = datastore::split(samples.len(), ratio, split_seed)?;
            let use_idx: Vec<usize> = train_idx.into_iter().take(pairs.max(1)).collect();
            let knowledge = match (mode, &ckb) {
                (CsiMode::Ckb, Some(p)) => Some(ckb_knowledge(p, &samples, manifest.extent)?),
                (CsiMode::Ckb, None) => {
                    return Err(Error::config("mode ckb needs --ckb model dir"))
                }
                _ => None,
            };
            let lookup = knowledge.as_ref().map(|map| {
                move |key: u32| -> Result<Vec<Complex64>> {
                    map.get(&key)
                        .cloned()
                        .ok_or_else(|| Error::Lookup(format!("no knowledge for sample {key}")))
                }
            });
            let lookup_dyn: Option<&dyn Fn(u32) -> Result<Vec<Complex64>>> =
                lookup.as_ref().map(|f| f as _);
            let imgs = bundled_images();
            let jsamples = pipeline::build_jscc_samples(&samples, &use_idx, &imgs, lookup_dyn)?;
            let dims = JsccDims {
                k: manifest.k as usize,
                m: manifest.m as usize,
                ..JsccDims::standard()
            };
            let cfg = JsccTrainConfig {
                mode,
                dims,
                epochs,
                batch_size,
                lr,
                seed,
                snr_schedule: parse_f64_list(&snrs)?,
            };
            let (model, history) = envckb::jscc::train_jscc(&jsamples, &cfg)?;
            pipeline::save_jscc_model(&model, &out)?;
            let rows: Vec<Vec<String>> = history
                .iter()
                .enumerate()
                .map(|(e, l)| vec![e.to_string(), pipeline::fmt_f64(*l)])
                .collect();
            let hist_path = out.join("history.csv");
            pipeline::write_csv(&hist_path, &["epoch", "train_mse"], &rows)?;
            summary(&out.join("summary.toml"), "train-jscc", seed, &[&out, &hist_path])?;
            println!("final training MSE: {}", history.last().unwrap());
            Ok(())
        }
        Command::EvalJscc {
            data,
            models,
            sweep,
            snrs,
            eems,
            snr,
            ckb,
            pairs,
            split,
            split_seed,
            seed,
            out,
        } => {
            let dir = data.resolve()?;
            let (samples, manifest) = datastore::read_dataset(&dir)?;
            let ratio = {
                let b = TrainBudget {
                    epochs: 0,
                    batch_size: 0,
                    lr: 0.0,
                    patience: 0,
                    weight_decay: 0.0,
                    split,
                    split_seed,
                };
                b.ratio()?
            };
            let (_, test_idx) = datastore::split(samples.len(), ratio, split_seed)?;
            let use_idx: Vec<usize> = test_idx.into_iter().take(pairs.max(1)).collect();
            let imgs = bundled_images();
            let model_dirs: Vec<PathBuf> = models.split(',').map(PathBuf::from).collect();
            let loaded: Vec<envckb::jscc::JsccModel> = model_dirs
                .iter()
                .map(|p| pipeline::load_jscc_model(p))
                .collect::<Result<_>>()?;
            let header: Vec<&str>;
            let rows: Vec<Vec<String>>;
            match sweep.as_str() {
                "snr" => {
                    let needs_ckb = loaded.iter().any(|m| m.mode == CsiMode::Ckb);
                    let knowledge = match (&ckb, needs_ckb) {
                        (Some(p), _) => Some(ckb_knowledge(p, &samples, manifest.extent)?),
                        (None, true) => {
                            return Err(Error::config(
                                "a ckb-mode model needs --ckb <model dir>",
                            ))
                        }
                        (None, false) => None,
                    };
                    let mut sets = Vec::new();
                    for model in &loaded {
                        let set = if model.mode == CsiMode::Ckb {
                            let map = knowledge.as_ref().unwrap();
                            let f = |key: u32| -> Result<Vec<Complex64>> {
                                map.get(&key).cloned().ok_or_else(|| {
                                    Error::Lookup(format!("no knowledge for sample {key}"))
                                })
                            };
                            pipeline::build_jscc_samples(&samples, &use_idx, &imgs, Some(&f))?
                        } else {
                            pipeline::build_jscc_samples(&samples, &use_idx, &imgs, None)?
                        };
                        sets.push(set);
                    }
                    let refs: Vec<&envckb::jscc::JsccModel> = loaded.iter().collect();
                    let swept = pipeline::sweep_snr(&refs, &sets, &parse_f64_list(&snrs)?, seed)?;
                    header = vec!["snr_db", "mode", "psnr", "ssim"];
                    rows = swept
                        .iter()
                        .map(|r| {
                            vec![
                                pipeline::fmt_f64(r.snr_db),
                                r.mode.clone(),
                                pipeline::fmt_f64(r.psnr),
                                pipeline::fmt_f64(r.ssim),
                            ]
                        })
                        .collect();
                }
                "eem" => {
                    let model = loaded
                        .first()
                        .ok_or_else(|| Error::config("eem sweep needs one model"))?;
                    let base =
                        pipeline::build_jscc_samples(&samples, &use_idx, &imgs, None)?;
                    let swept =
                        pipeline::sweep_eem(model, &base, &parse_f64_list(&eems)?, snr, seed)?;
                    header = vec!["eem", "psnr", "ssim"];
                    rows = swept
                        .iter()
                        .map(|r| {
                            vec![
                                pipeline::fmt_f64(r.eem),
                                pipeline::fmt_f64(r.psnr),
                                pipeline::fmt_f64(r.ssim),
                            ]
                        })
                        .collect();
                }
                other => return Err(Error::config(format!("unknown sweep '{other}'"))),
            }
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(Error::from)?;
                }
            }
            pipeline::write_csv(&out, &header, &rows)?;
            summary(&out.with_extension("summary.toml"), "eval-jscc", seed, &[&out])?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Report { dir, out } => {
            let mut outputs = Vec::new();
            let mut entries: Vec<_> = std::fs::read_dir(&dir)
                .map_err(Error::from)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .collect();
            entries.sort();
            for p in entries {
                if let Some(ext) = p.extension().and_then(|e| e.to_str()) {
                    if matches!(ext, "csv" | "toml" | "ckpt" | "bin") {
                        outputs.push(p.display().to_string());
                    }
                }
            }
            pipeline::write_summary(
                &out,
                &RunSummary {
                    command: "report".to_string(),
                    seed: 0,
                    outputs,
                    notes: vec![format!("scanned {}", dir.display())],
                },
            )?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
