mod args;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Parser;
use fdft_core::augment::CutoutConfig;
use fdft_core::data::{self, LabeledDataset, SyntheticTaskConfig};
use fdft_core::model::{BackboneConfig, Classifier, DetectorModel, ModelConfig};
use fdft_core::nn::thousands;
use fdft_core::train::{self, EpochRecord, History, Metrics, TrainConfig};
use fdft_core::{weights, Float};

use args::{Cli, Command, Precision, Profile, SplitArgs, SplitName, TrainArgs};

fn main() -> ExitCode {
    let argv = match args::expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        eprintln!("warning: could not size the worker pool: {e}");
    }
    eprintln!("config: {}", cli.resolved());
    let result = match cli.precision {
        Precision::F32 => run::<f32>(&cli),
        Precision::F64 => run::<f64>(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run<T: Float>(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData {
            out,
            n_per_class,
            artifact_amp,
            blob_count,
            artifact_period,
            artifact_region,
        } => {
            let cfg = SyntheticTaskConfig {
                n_per_class: *n_per_class,
                seed: cli.seed,
                blob_count: *blob_count,
                artifact_amplitude: *artifact_amp,
                artifact_period: *artifact_period,
                artifact_region: *artifact_region,
            };
            if *artifact_amp == 0.0 {
                eprintln!("warning: artifact amplitude 0 makes real and fake identical; expect AUROC 0.5");
            }
            let ds = data::generate_synthetic(&cfg, Some(out))?;
            let manifest = std::fs::read(out.join("manifest.csv")).context("reading manifest back")?;
            let (r, f) = ds.class_counts();
            println!("real={r} fake={f} manifest_crc32={:08x}", crc32fast::hash(&manifest));
            Ok(())
        }
        Command::Pretrain { data: dir, out, split, train: targs } => {
            let [tr, va, te, _] = load_splits(dir, split, cli)?;
            let mut cfg = train_config(cli, targs, None).pretraining();
            if let Some(lr) = targs.lr {
                cfg.lr0 = lr;
            }
            eprintln!("pretraining on {} images, validating on {}", tr.len(), va.len());
            let t0 = Instant::now();
            let (model, history) =
                train::pretrain::<T>(BackboneConfig::default(), &tr, &va, &cfg, log_epoch)?;
            weights::save_backbone(&model.store, &model.backbone.cfg, model.bn_eps, model.bn_momentum, out)?;
            write_history(&history, out)?;
            let m = train::evaluate(&model, &te, cfg.batch_size)?;
            eprintln!("pretraining took {:.1}s", t0.elapsed().as_secs_f64());
            println!("best_epoch={} backbone_checksum={:08x}", history.best_epoch, model.store.checksum("backbone."));
            print_metrics(&m);
            Ok(())
        }
        Command::Finetune {
            backbone,
            data: dir,
            m,
            n,
            cutout_alpha,
            cutout_beta,
            no_ftt,
            out,
            split,
            train: targs,
        } => {
            let [_, va, te, ft] = load_splits(dir, split, cli)?;
            let cutout = CutoutConfig {
                alpha: *cutout_alpha,
                beta: *cutout_beta,
                ..CutoutConfig::default()
            };
            let cfg = train_config(cli, targs, Some(cutout));
            let mut mcfg = ModelConfig::new(*m, *n);
            mcfg.ftt_enabled = !no_ftt;
            let (bb_cfg, bb_store) = weights::load_backbone::<T>(backbone)?;
            mcfg.backbone = bb_cfg;
            let before = bb_store.checksum("backbone.");
            {
                let probe = DetectorModel::<T>::build(mcfg.clone())?;
                println!(
                    "trainable={} frozen={}",
                    thousands(probe.trainable_count()),
                    thousands(probe.frozen_count())
                );
            }
            println!("backbone_checksum_before={before:08x}");
            eprintln!("fine-tuning on {} images, validating on {}", ft.len(), va.len());
            let t0 = Instant::now();
            let (model, history) = train::fine_tune::<T>(backbone, &ft, &va, mcfg, &cfg, log_epoch)?;
            eprintln!("fine-tuning took {:.1}s", t0.elapsed().as_secs_f64());
            println!("backbone_checksum_after={:08x}", model.backbone_checksum());
            if model.backbone_checksum() != before {
                bail!("backbone weights changed during fine-tuning");
            }
            weights::save_model(&model, out)?;
            write_history(&history, out)?;
            println!("best_epoch={} epochs={}", history.best_epoch, history.records.len());
            print_metrics(&train::evaluate(&model, &te, cfg.batch_size)?);
            Ok(())
        }
        Command::Eval { model, data: dir, split, which } => {
            let model = weights::load_model::<T>(model)?;
            let ds = match which {
                SplitName::All => data::load_dataset_dir(dir)?,
                w => {
                    let parts = load_splits(dir, split, cli)?;
                    parts[w.index()].clone()
                }
            };
            print_metrics(&train::evaluate(&model, &ds, 64)?);
            Ok(())
        }
        Command::Predict { model, image } => {
            let model = weights::load_model::<T>(model)?;
            let img = data::load_ppm(image)?;
            let mut x = img.to_tensor::<T>();
            if img.width != data::IMAGE_SIZE || img.height != data::IMAGE_SIZE {
                x = data::resize_bilinear(&x, data::IMAGE_SIZE, data::IMAGE_SIZE);
            }
            let p = model.predict_proba(&x)?[0].to_f64().unwrap_or(f64::NAN);
            println!("{p:.4}");
            Ok(())
        }
        Command::Params { m, n, backbone_channels } => {
            let mut cfg = ModelConfig::new(*m, *n);
            if let Some(last) = cfg.backbone.widths.last_mut() {
                *last = *backbone_channels;
            }
            let model = DetectorModel::<f32>::build(cfg)?;
            for table in model.breakdowns() {
                println!("{table}\n");
            }
            println!("trainable total: {}", thousands(model.trainable_count()));
            println!("frozen total: {}", thousands(model.frozen_count()));
            Ok(())
        }
    }
}

fn load_splits(dir: &Path, split: &SplitArgs, cli: &Cli) -> Result<[LabeledDataset; 4]> {
    let all = data::load_dataset_dir(dir)?;
    let fractions = split.fractions.unwrap_or(match cli.profile {
        Profile::Desk => args::DESK_FRACTIONS,
        Profile::Paper => args::PAPER_FRACTIONS,
    });
    Ok(data::split(&all, fractions, split.split_seed.unwrap_or(cli.seed))?)
}

fn train_config(cli: &Cli, t: &TrainArgs, cutout: Option<CutoutConfig>) -> TrainConfig {
    let mut cfg = match cli.profile {
        Profile::Desk => TrainConfig::desk(),
        Profile::Paper => TrainConfig::paper(),
    };
    cfg.seed = cli.seed;
    if let Some(v) = t.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = t.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = t.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = t.patience {
        cfg.patience = v;
    }
    cfg.augment.cutout = cutout;
    if t.no_augment {
        cfg.augment = fdft_core::augment::AugmentConfig::none();
    }
    cfg
}

fn log_epoch(r: &EpochRecord) {
    let auc = r.val_auroc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    eprintln!(
        "epoch {:>3}  lr {:.5}  train_loss {:.6}  val_loss {:.6}  val_acc {:.4}  val_auroc {auc}",
        r.epoch, r.lr, r.train_loss, r.val_loss, r.val_acc
    );
}

fn history_path(weights: &Path) -> PathBuf {
    weights.with_extension("history.csv")
}

fn write_history(h: &History, weights: &Path) -> Result<()> {
    let p = history_path(weights);
    h.write_csv(&p)?;
    eprintln!("history written to {}", p.display());
    Ok(())
}

fn print_metrics(m: &Metrics) {
    match m.auroc {
        Some(a) => println!("ACC={:.4} AUROC={a:.4}", m.acc),
        None => {
            eprintln!("warning: single-class set, AUROC is undefined");
            println!("ACC={:.4} AUROC=NaN", m.acc);
        }
    }
}
