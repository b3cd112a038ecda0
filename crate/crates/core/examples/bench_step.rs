use cdalign::align::{align_scene, DescriptorSource, RansacConfig};
use cdalign::cd::{finetune, infer_scene, CdPair, FinetuneConfig};
use cdalign::eval::{confusion, metrics, Confusion};
use cdalign::model::{
    init_align_head, init_encoder, load_checkpoint, save_checkpoint, Checkpoint, EncoderConfig,
    Role,
};
use cdalign::pretext::{augment, pooled_embedding, pretrain_patches, AugmentationSpec, PretextConfig};
use cdalign::raster::{tile_grid, Raster};
use cdalign::scenario::{alignment_error, gen_pretext_corpus, gen_texture, gen_toy_cd_dataset, synth_perspective, DistortionSpec};
use rand::{Rng, SeedableRng};
use std::path::Path;
use std::time::Instant;

/// Mixed corpus: half the patches are plain textures, half are underexposed
/// (texture scaled near black) so a negative photometric bias clamps the
/// whole augmented view to zero.
fn corpus_patch(side: usize, i: u64) -> Raster<f32> {
    let g = gen_texture(side, side, i).unwrap();
    if i % 2 == 0 {
        return g;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(i ^ 0xBA4D);
    let scale: f32 = rng.random_range(0.01..0.03);
    Raster::from_fn(side, side, 1, |x, y, _| g.get(x, y, 0) * scale).unwrap()
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "spread".into());
    let side = 64usize;
    let cfg = EncoderConfig { in_channels: 1, patch_size: side, ..EncoderConfig::default() };

    if mode == "spread" {
        let patches: Vec<Raster<f32>> = (0..24).map(|i| corpus_patch(side, i as u64)).collect();
        let enc = init_encoder::<f32>(&cfg, 1).unwrap();
        let head = init_align_head::<f32>(&cfg, 2).unwrap();
        let mut view = vec![];
        for (i, p) in patches.iter().enumerate() {
            let z = pooled_embedding(p, &enc, &head).unwrap();
            for v in 0..2 {
                let spec = AugmentationSpec::sample((i * 2 + v) as u64 + 4000);
                let a = augment(p, &spec).unwrap();
                match pooled_embedding(&a, &enc, &head) {
                    Ok(za) => view.push(cos(&z, &za)),
                    Err(_) => view.push(0.0), // dead view embeds to zero
                }
            }
        }
        view.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = view.iter().sum::<f64>() / view.len() as f64;
        println!("view cos: mean {mean:.4} min {:.4} p25 {:.4} median {:.4}",
            view[0], view[view.len() / 4], view[view.len() / 2]);
    } else if mode == "train" {
        let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.05);
        let epochs: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(20);
        let patches = gen_pretext_corpus(200, side, 42).unwrap();
        let train = PretextConfig { epochs, lr, seed: 42, ..PretextConfig::default() };
        let t0 = Instant::now();
        let (enc, head, losses) = pretrain_patches(&patches, &cfg, &train).unwrap();
        println!("lr={lr} elapsed {:.1?}", t0.elapsed());
        for (e, l) in losses.iter().enumerate() {
            println!("epoch {e:2}: {l:+.4}");
        }
        println!("drop = {:+.4}", losses[0] - losses[losses.len() - 1]);
        std::fs::create_dir_all("/tmp/bench_ckpt").unwrap();
        save_checkpoint(Path::new("/tmp/bench_ckpt/enc.ckpt"), &enc).unwrap();
        save_checkpoint(Path::new("/tmp/bench_ckpt/head.ckpt"), &head).unwrap();
        println!("checkpoints cached");
    } else if mode == "cd" {
        // toy change-detection pipeline: align -> finetune -> infer, aligned
        // vs identity calibration
        let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.001);
        let epochs: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(2);
        let batch: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(16);
        let enc = load_checkpoint(Path::new("/tmp/bench_ckpt/enc.ckpt")).unwrap();

        let spec = DistortionSpec { max_corner_disp: 0.05, seed: 9000 };
        let scenes = gen_toy_cd_dataset(40, 256, 0.05, &spec, 9000).unwrap();
        let rcfg = RansacConfig::default();

        let t0 = Instant::now();
        let calibrated: Vec<Raster<f32>> = scenes
            .iter()
            .map(|s| align_scene(&s.t1, &s.t2, DescriptorSource::RawPatch, &rcfg).unwrap().0)
            .collect();
        println!("aligned 40 scenes in {:.1?}", t0.elapsed());

        let windows = tile_grid(256, 256, 64, 64).unwrap();
        let mut pairs = Vec::new();
        for (s, cal) in scenes.iter().zip(&calibrated).take(32) {
            for w in &windows {
                pairs.push(CdPair {
                    t1_patch: s.t1.crop(*w).unwrap(),
                    t2_patch: cal.crop(*w).unwrap(),
                    gt_mask: s.gt_mask.crop(*w).unwrap(),
                });
            }
        }
        println!("{} training pairs", pairs.len());

        let t0 = Instant::now();
        let fcfg = FinetuneConfig { epochs, batch_size: batch, lr, seed: 7, ..FinetuneConfig::default() };
        let (dec, losses) = finetune(&pairs, &enc, &fcfg).unwrap();
        println!("finetune {epochs} epochs in {:.1?}, losses {:?}", t0.elapsed(),
            losses.iter().map(|l| (l * 1e4).round() / 1e4).collect::<Vec<_>>());

        let t0 = Instant::now();
        let score = |use_cal: bool| -> f64 {
            let mut c = Confusion::default();
            for (s, cal) in scenes.iter().zip(&calibrated).skip(32) {
                let t2 = if use_cal { cal } else { &s.t2 };
                let (_, mask) = infer_scene(&s.t1, t2, &enc, &dec, 64, 64, 0.5).unwrap();
                c = c + confusion(&mask, &s.gt_mask).unwrap();
            }
            metrics(&c).f1
        };
        let (f1_a, f1_u) = (score(true), score(false));
        println!("infer in {:.1?}", t0.elapsed());
        println!("f1 aligned {f1_a:.4}  unaligned {f1_u:.4}  gap {:.4}", f1_a - f1_u);
    } else {
        // learned-vs-random descriptor alignment on criterion-6 style scenes;
        // "align2" adds a radiometric offset between the two dates
        let photometric = mode == "align2";
        let enc_t = load_checkpoint(Path::new("/tmp/bench_ckpt/enc.ckpt")).unwrap();
        let head_t = load_checkpoint(Path::new("/tmp/bench_ckpt/head.ckpt")).unwrap();
        let enc_r = Checkpoint::new(Role::Encoder, cfg.clone(), init_encoder::<f32>(&cfg, 7).unwrap());
        let head_r = Checkpoint::new(Role::AlignHead, cfg.clone(), init_align_head::<f32>(&cfg, 8).unwrap());
        let rcfg = RansacConfig::default();
        let mut wins = 0;
        let (mut sum_t, mut sum_r) = (0.0, 0.0);
        for k in 0..10u64 {
            let t1 = gen_texture(512, 512, 1000 + k).unwrap();
            let spec = DistortionSpec { max_corner_disp: 0.05, seed: 2000 + k };
            let (mut t2, h_gt) = synth_perspective(&t1, &spec).unwrap();
            if photometric {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3000 + k);
                let gain: f32 = rng.random_range(0.7..1.3);
                let bias: f32 = rng.random_range(-0.15..0.15);
                t2 = Raster::from_fn(t2.height(), t2.width(), 1, |x, y, _| {
                    (t2.get(x, y, 0) * gain + bias).clamp(0.0, 1.0)
                })
                .unwrap();
            }
            let h_ref = h_gt.inverse().unwrap();
            let err = |e: &Checkpoint, h: &Checkpoint| -> f64 {
                match align_scene(&t1, &t2, DescriptorSource::Learned { encoder: e, head: h }, &rcfg) {
                    Ok((_, h_est, _)) => alignment_error(&h_est, &h_ref, 512, 512).unwrap(),
                    Err(e) => {
                        println!("  scene {k}: FAILED {e}");
                        f64::INFINITY
                    }
                }
            };
            let (et, er) = (err(&enc_t, &head_t), err(&enc_r, &head_r));
            if et < er {
                wins += 1;
            }
            sum_t += et;
            sum_r += er;
            println!("scene {k}: trained {et:8.3} px  random {er:8.3} px");
        }
        println!("wins {wins}/10  mean trained {:.3} random {:.3}", sum_t / 10.0, sum_r / 10.0);
    }
}
