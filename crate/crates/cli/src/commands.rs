//! One function per subcommand, each driving exactly one library pipeline.

use crate::config::RunConfig;
use crate::Command;
use cdalign::align::{align_scene, AlignReport, DescriptorSource};
use cdalign::cd::{finetune, infer_scene, CdPair};
use cdalign::model::{
    load_checkpoint_expecting, save_checkpoint, Checkpoint, EncoderConfig, Role,
};
use cdalign::pretext::{pretrain, write_loss_log};
use cdalign::raster::{load_png, save_png, Raster};
use cdalign::scenario::{gen_pretext_corpus, gen_toy_cd_dataset, save_scene, DistortionSpec};
use cdalign::{eval, CdError, CdResult};
use std::path::{Path, PathBuf};

pub fn run(cmd: Command, config: RunConfig, seed: Option<u64>) -> CdResult<()> {
    match cmd {
        Command::Synth {
            scenes_out,
            pairs,
            size,
            change_rate,
            patches_out,
            patches,
            patch_size,
        } => cmd_synth(
            &config,
            seed,
            scenes_out.as_deref(),
            pairs,
            size,
            change_rate,
            patches_out.as_deref(),
            patches,
            patch_size,
        ),
        Command::Pretrain {
            patches,
            out_encoder,
            out_head,
            loss_log,
            epochs,
        } => cmd_pretrain(
            &config,
            seed,
            &patches,
            &out_encoder,
            &out_head,
            loss_log.as_deref(),
            epochs,
        ),
        Command::Align {
            t1,
            t2,
            scenes,
            descriptors,
            encoder,
            head,
            out,
            report,
        } => cmd_align(
            &config,
            seed,
            t1.as_deref(),
            t2.as_deref(),
            scenes.as_deref(),
            &descriptors,
            encoder.as_deref(),
            head.as_deref(),
            out.as_deref(),
            report.as_deref(),
        ),
        Command::Finetune {
            scenes,
            t2_file,
            encoder,
            out_decoder,
            loss_log,
            epochs,
        } => cmd_finetune(
            &config,
            seed,
            &scenes,
            &t2_file,
            &encoder,
            &out_decoder,
            loss_log.as_deref(),
            epochs,
        ),
        Command::Infer {
            t1,
            t2,
            encoder,
            decoder,
            out_prob,
            out_mask,
            tile,
            stride,
            threshold,
        } => cmd_infer(
            &config,
            &t1,
            &t2,
            &encoder,
            &decoder,
            out_prob.as_deref(),
            &out_mask,
            tile,
            stride,
            threshold,
        ),
        Command::Eval {
            pred,
            gt,
            scenario,
            valid_mask,
        } => cmd_eval(&pred, &gt, &scenario, valid_mask.as_deref()),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    config: &RunConfig,
    seed: Option<u64>,
    scenes_out: Option<&Path>,
    pairs: usize,
    size: usize,
    change_rate: f64,
    patches_out: Option<&Path>,
    patches: usize,
    patch_size: usize,
) -> CdResult<()> {
    if scenes_out.is_none() && patches_out.is_none() {
        return Err(CdError::InvalidConfig(
            "synth needs --scenes-out and/or --patches-out".into(),
        ));
    }
    let seed = seed.unwrap_or(config.distortion.seed);
    if let Some(dir) = scenes_out {
        let spec = DistortionSpec {
            seed,
            ..config.distortion
        };
        let scenes = gen_toy_cd_dataset(pairs, size, change_rate, &spec, seed)?;
        for (i, scene) in scenes.iter().enumerate() {
            save_scene(&dir.join(format!("scene_{i:03}")), scene)?;
        }
        log::info!("wrote {} scene bundles under {}", pairs, dir.display());
    }
    if let Some(dir) = patches_out {
        std::fs::create_dir_all(dir)?;
        for (i, p) in gen_pretext_corpus(patches, patch_size, seed)?.iter().enumerate() {
            save_png(p, dir.join(format!("patch_{i:03}.png")))?;
        }
        log::info!("wrote {patches} patches under {}", dir.display());
    }
    Ok(())
}

/// First PNG in the directory, by name; sets the channel count (and patch
/// size) when no encoder block is configured.
fn peek_corpus(dir: &Path) -> CdResult<Raster<f32>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    let first = paths.first().ok_or_else(|| {
        CdError::InvalidDataset(format!("no .png patches under {}", dir.display()))
    })?;
    load_png(first)
}

fn cmd_pretrain(
    config: &RunConfig,
    seed: Option<u64>,
    patches: &Path,
    out_encoder: &Path,
    out_head: &Path,
    loss_log: Option<&Path>,
    epochs: Option<usize>,
) -> CdResult<()> {
    let enc_cfg = match &config.encoder {
        Some(c) => c.clone(),
        None => {
            let first = peek_corpus(patches)?;
            EncoderConfig {
                in_channels: first.channels(),
                patch_size: first.height(),
                ..EncoderConfig::default()
            }
        }
    };
    let mut cfg = config.pretext.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let (enc, head, losses) = pretrain(patches, &enc_cfg, &cfg)?;
    save_checkpoint(out_encoder, &enc)?;
    save_checkpoint(out_head, &head)?;
    if let Some(p) = loss_log {
        write_loss_log(p, &losses)?;
    }
    log::info!(
        "pretrained {} epochs, first {:.4} final {:.4}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

struct LoadedSource {
    encoder: Option<Checkpoint>,
    head: Option<Checkpoint>,
}

impl LoadedSource {
    fn load(kind: &str, encoder: Option<&Path>, head: Option<&Path>) -> CdResult<Self> {
        match kind {
            "raw" => Ok(Self {
                encoder: None,
                head: None,
            }),
            "learned" => Ok(Self {
                encoder: Some(load_checkpoint_expecting(
                    encoder.expect("clap enforces"),
                    Role::Encoder,
                )?),
                head: Some(load_checkpoint_expecting(
                    head.expect("clap enforces"),
                    Role::AlignHead,
                )?),
            }),
            other => Err(CdError::InvalidConfig(format!(
                "descriptors must be raw or learned, got {other}"
            ))),
        }
    }

    fn source(&self) -> DescriptorSource<'_> {
        match (&self.encoder, &self.head) {
            (Some(e), Some(h)) => DescriptorSource::Learned {
                encoder: e,
                head: h,
            },
            _ => DescriptorSource::RawPatch,
        }
    }
}

fn write_report(path: &Path, report: &AlignReport) -> CdResult<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| CdError::InvalidConfig(format!("report serialization: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_align(
    config: &RunConfig,
    seed: Option<u64>,
    t1: Option<&Path>,
    t2: Option<&Path>,
    scenes: Option<&Path>,
    descriptors: &str,
    encoder: Option<&Path>,
    head: Option<&Path>,
    out: Option<&Path>,
    report: Option<&Path>,
) -> CdResult<()> {
    let mut rcfg = config.ransac;
    if let Some(s) = seed {
        rcfg.seed = s;
    }
    let loaded = LoadedSource::load(descriptors, encoder, head)?;

    if let Some(dir) = scenes {
        for scene_dir in scene_dirs(dir)? {
            let t1 = load_png(&scene_dir.join("t1.png"))?;
            let t2 = load_png(&scene_dir.join("t2.png"))?;
            let (calibrated, _, rep) = align_scene(&t1, &t2, loaded.source(), &rcfg)?;
            save_png(&calibrated, scene_dir.join("t2_cal.png"))?;
            write_report(&scene_dir.join("align_report.json"), &rep)?;
            log::info!(
                "{}: {} matches, {} inliers, {:.3} px",
                scene_dir.display(),
                rep.matches,
                rep.inliers,
                rep.mean_error_px
            );
        }
        return Ok(());
    }

    let (t1, t2) = match (t1, t2) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(CdError::InvalidConfig(
                "align needs --t1 and --t2, or --scenes".into(),
            ))
        }
    };
    let r1 = load_png(t1)?;
    let r2 = load_png(t2)?;
    let (calibrated, _, rep) = align_scene(&r1, &r2, loaded.source(), &rcfg)?;
    if let Some(p) = out {
        save_png(&calibrated, p)?;
    }
    if let Some(p) = report {
        write_report(p, &rep)?;
    }
    log::info!(
        "{} matches, {} inliers, {:.3} px",
        rep.matches,
        rep.inliers,
        rep.mean_error_px
    );
    Ok(())
}

/// Immediate subdirectories, sorted by name.
fn scene_dirs(dir: &Path) -> CdResult<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CdError::InvalidDataset(format!(
            "no scene directories under {}",
            dir.display()
        )));
    }
    Ok(dirs)
}

fn binarize(r: &Raster<f32>) -> CdResult<Raster<f32>> {
    let g = r.to_gray();
    Raster::new(
        g.height(),
        g.width(),
        1,
        g.data().iter().map(|&v| f32::from(v >= 0.5)).collect(),
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    config: &RunConfig,
    seed: Option<u64>,
    scenes: &Path,
    t2_file: &str,
    encoder: &Path,
    out_decoder: &Path,
    loss_log: Option<&Path>,
    epochs: Option<usize>,
) -> CdResult<()> {
    let enc = load_checkpoint_expecting(encoder, Role::Encoder)?;
    let mut pairs = Vec::new();
    for dir in scene_dirs(scenes)? {
        pairs.push(CdPair {
            t1_patch: load_png(&dir.join("t1.png"))?,
            t2_patch: load_png(&dir.join(t2_file))?,
            gt_mask: binarize(&load_png(&dir.join("gt.png"))?)?,
        });
    }
    let mut cfg = config.finetune.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let (dec, losses) = finetune(&pairs, &enc, &cfg)?;
    save_checkpoint(out_decoder, &dec)?;
    if let Some(p) = loss_log {
        write_loss_log(p, &losses)?;
    }
    log::info!(
        "finetuned {} epochs on {} pairs, final loss {:.4}",
        losses.len(),
        pairs.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    config: &RunConfig,
    t1: &Path,
    t2: &Path,
    encoder: &Path,
    decoder: &Path,
    out_prob: Option<&Path>,
    out_mask: &Path,
    tile: usize,
    stride: usize,
    threshold: Option<f64>,
) -> CdResult<()> {
    let enc = load_checkpoint_expecting(encoder, Role::Encoder)?;
    let dec = load_checkpoint_expecting(decoder, Role::Decoder)?;
    let r1 = load_png(t1)?;
    let r2 = load_png(t2)?;
    let thr = threshold.unwrap_or(config.finetune.threshold);
    let (prob, mask) = infer_scene(&r1, &r2, &enc, &dec, tile, stride, thr)?;
    if let Some(p) = out_prob {
        save_png(&prob, p)?;
    }
    save_png(&mask, out_mask)?;
    let changed = mask.data().iter().filter(|&&v| v >= 0.5).count();
    log::info!(
        "change mask: {changed}/{} pixels above {thr}",
        mask.data().len()
    );
    Ok(())
}

fn cmd_eval(pred: &Path, gt: &Path, scenario: &str, valid_mask: Option<&Path>) -> CdResult<()> {
    let pred = binarize(&load_png(pred)?)?;
    let gt = binarize(&load_png(gt)?)?;
    let c = match valid_mask {
        Some(p) => eval::confusion_masked(&pred, &gt, &binarize(&load_png(p)?)?)?,
        None => eval::confusion(&pred, &gt)?,
    };
    let m = eval::metrics(&c);
    println!("{}", eval::csv_line(scenario, &m));
    Ok(())
}
