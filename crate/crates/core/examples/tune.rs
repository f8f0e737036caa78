use envckb::ckb::CkbTrainConfig;
use envckb::config::SceneConfig;
use envckb::fusion::{FusionKind, GateMode};
use envckb::pipeline;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(995);
    let scenes: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let carrier: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3e6);
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let which: String = args.get(6).cloned().unwrap_or_else(|| "both".into());
    let wd: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let batch: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(32);
    let bmin: usize = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(4);
    let bmax: usize = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(8);
    let tseed: u64 = args.get(11).and_then(|s| s.parse().ok()).unwrap_or(42);
    let dseed: u64 = args.get(12).and_then(|s| s.parse().ok()).unwrap_or(42);

    let mut cfg = SceneConfig::default();
    cfg.world.carrier_hz = carrier;
    cfg.camera.resolution = 256;
    cfg.raytrace.max_reflections = 1;
    cfg.buildings.count_min = bmin;
    cfg.buildings.count_max = bmax;
    cfg.arrays.bs_rows = 2;
    cfg.arrays.bs_cols = 2;
    cfg.arrays.cu_rows = 2;
    cfg.arrays.cu_cols = 2;
    cfg.trajectories.count = 6;

    let t0 = Instant::now();
    let (samples, manifest) = pipeline::generate_dataset(&cfg, n, scenes, dseed).unwrap();
    eprintln!("dataset: {} samples in {:.1}s", samples.len(), t0.elapsed().as_secs_f64());

    if which == "roi" || which == "classes" || which == "gates" {
        let tc = CkbTrainConfig {
            fusion: FusionKind::Attention(GateMode::Adaptive),
            epochs,
            batch_size: batch,
            lr,
            seed: tseed,
            patience: epochs,
            weight_decay: wd,
        };
        let t1 = Instant::now();
        let rows = match which.as_str() {
            "roi" => pipeline::sweep_roi(
                &samples,
                &manifest,
                &cfg,
                &[
                    pipeline::RoiRadius::Fixed(20),
                    pipeline::RoiRadius::Fixed(60),
                    pipeline::RoiRadius::Fixed(100),
                    pipeline::RoiRadius::Adaptive,
                ],
                (3, 1),
                42,
                &tc,
            )
            .unwrap(),
            "classes" => {
                pipeline::sweep_classes(&samples, &manifest, &cfg, &[4, 28], (3, 1), 42, &tc)
                    .unwrap()
            }
            _ => pipeline::sweep_fusion(
                &samples,
                &manifest,
                &[
                    FusionKind::Attention(GateMode::Direct),
                    FusionKind::Attention(GateMode::Uniform),
                    FusionKind::Attention(GateMode::Adaptive),
                ],
                (3, 1),
                42,
                &tc,
            )
            .unwrap(),
        };
        for r in &rows {
            eprintln!("{}: {:.5}", r.label, r.mse);
        }
        eprintln!("sweep done in {:.1}s", t1.elapsed().as_secs_f64());
        return;
    }

    let kinds: Vec<FusionKind> = match which.as_str() {
        "adaptive" => vec![FusionKind::Attention(GateMode::Adaptive)],
        "linear" => vec![FusionKind::Linear],
        _ => vec![FusionKind::Attention(GateMode::Adaptive), FusionKind::Linear],
    };
    for kind in kinds {
        let tc = CkbTrainConfig {
            fusion: kind,
            epochs,
            batch_size: batch,
            lr,
            seed: tseed,
            patience: epochs,
            weight_decay: wd,
        };
        let t1 = Instant::now();
        let run = pipeline::train_ckb_on_dataset(&samples, &manifest, (3, 1), 42, &tc).unwrap();
        for e in run.history.iter().step_by(5) {
            eprintln!("  epoch {:3}  train {:.5}  val {:.5}", e.epoch, e.train_mse, e.val_mse);
        }
        eprintln!(
            "{:?}: test MSE {:.5} (best val {:.5}) in {:.1}s",
            kind,
            run.test_mse,
            run.history.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min),
            t1.elapsed().as_secs_f64()
        );
    }
}
