//! End-to-end orchestration: dataset generation from scenes, CKB training
//! and ablation sweeps, JSCC training and evaluation sweeps, plus the CSV
//! and model-sidecar plumbing the CLI drives.

use crate::ckb::{self, CkbModel, CkbTrainConfig, EpochStat};
use crate::config::SceneConfig;
use crate::corpus;
use crate::datastore::{
    self, DatasetManifest, EnvSample, DATASET_VERSION,
};
use crate::envsense::{
    self, adaptive_roi_radius, global_input, remap_label_map, render_label_map,
    roi_semantic_vector, semantic_input,
};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::jscc::{self, CsiMode, JsccDims, JsccModel, JsccSample};
use crate::metrics;
use crate::raytrace::{assemble_channel, trace_paths, ArrayGeometry};
use crate::scene::{build_scene, sample_cu_positions, Pose, Scene};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::Path;

// ---- dataset generation -----------------------------------------------

/// Features and channel for one CU pose in one scene.
fn sense_sample(
    cfg: &SceneConfig,
    scene: &Scene,
    cu: &Pose,
    index: u32,
) -> Result<EnvSample> {
    let mut map =
        render_label_map(scene, &scene.bs, cu, cfg.camera.resolution, cfg.camera.fov_deg)?;
    let d_r = adaptive_roi_radius(&map, cfg.roi.d_min, cfg.roi.d_max);
    let sem = roi_semantic_vector(&map, d_r, cfg.roi.kappa)?;
    let j_po = semantic_input(&sem);
    let descriptor = global_input(&map);
    // The dataset format keeps labels only; depth is consumed by the
    // descriptor above and then discarded.
    map.depth = None;
    let wavelength = cfg.wavelength();
    let paths = trace_paths(
        scene,
        &scene.bs,
        cu,
        cfg.raytrace.max_reflections,
        cfg.raytrace.max_paths,
        wavelength,
    )?;
    let tx = ArrayGeometry::upa(cfg.arrays.bs_rows, cfg.arrays.bs_cols, wavelength);
    let rx = ArrayGeometry::upa(cfg.arrays.cu_rows, cfg.arrays.cu_cols, wavelength);
    let h = assemble_channel(&paths, &tx, &rx, wavelength)?;
    // Datasets persist 32-bit floats; snap everything to that grid up front
    // so write/read round-trips are bit-exact.
    let f32g = crate::tensorkit::to_f32_grid;
    Ok(EnvSample {
        index,
        bs_pos: [scene.bs.position.x, scene.bs.position.y, scene.bs.position.z].map(f32g),
        cu_pos: [cu.position.x, cu.position.y, cu.position.z].map(f32g),
        label_map: map,
        d_r: d_r as f64,
        j_po: j_po.into_iter().map(f32g).collect(),
        descriptor: descriptor.into_iter().map(f32g).collect(),
        h: h
            .entries
            .into_iter()
            .map(|z| Complex64::new(f32g(z.re), f32g(z.im)))
            .collect(),
    })
}

/// Generate `samples` environment/channel pairs across `scenes` procedural
/// scene variants (poses walk each scene's trajectory).
pub fn generate_dataset(
    cfg: &SceneConfig,
    samples: usize,
    scenes: usize,
    seed: u64,
) -> Result<(Vec<EnvSample>, DatasetManifest)> {
    if samples == 0 || scenes == 0 {
        return Err(Error::config("need at least one sample and one scene"));
    }
    if scenes > samples {
        return Err(Error::config("more scene variants than samples"));
    }
    let mut out = Vec::with_capacity(samples);
    let base = samples / scenes;
    let extra = samples % scenes;
    let mut index = 0u32;
    for si in 0..scenes {
        let scene = build_scene(cfg, seed.wrapping_add(si as u64).wrapping_mul(0x9e3779b9))?;
        let count = base + usize::from(si < extra);
        let poses = sample_cu_positions(&scene, count)?;
        for cu in &poses {
            out.push(sense_sample(cfg, &scene, cu, index)?);
            index += 1;
        }
    }
    let refs: Vec<&EnvSample> = out.iter().collect();
    let c_h = ckb::channel_scale(&refs)?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        n: samples as u32,
        z: crate::config::NUM_CLASSES as u32,
        m: (cfg.arrays.bs_rows * cfg.arrays.bs_cols) as u32,
        k: (cfg.arrays.cu_rows * cfg.arrays.cu_cols) as u32,
        resolution: cfg.camera.resolution as u32,
        desc_len: envsense::DESC_LEN as u32,
        c_h,
        seed,
        extent: cfg.world.extent,
    };
    Ok((out, manifest))
}

// ---- CKB orchestration ------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkbModelMeta {
    pub version: u32,
    pub fusion: String,
    pub k: u32,
    pub m: u32,
    pub c_h: f64,
}

pub fn save_ckb_model(model: &CkbModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    datastore::save_checkpoint(&model.ps, &dir.join("params.ckpt"))?;
    let meta = CkbModelMeta {
        version: 1,
        fusion: model.fusion.label().to_string(),
        k: model.k as u32,
        m: model.m as u32,
        c_h: model.c_h,
    };
    let text = toml::to_string(&meta).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(dir.join("model.toml"), text).map_err(Error::from)
}

pub fn load_ckb_model(dir: &Path) -> Result<CkbModel> {
    let text = std::fs::read_to_string(dir.join("model.toml")).map_err(Error::from)?;
    let meta: CkbModelMeta =
        toml::from_str(&text).map_err(|e| Error::format(format!("model meta: {e}")))?;
    if meta.version != 1 {
        return Err(Error::format(format!(
            "unsupported CKB model version {}",
            meta.version
        )));
    }
    let ps = datastore::load_checkpoint(&dir.join("params.ckpt"))?;
    Ok(CkbModel {
        ps,
        fusion: FusionKind::parse(&meta.fusion)?,
        k: meta.k as usize,
        m: meta.m as usize,
        c_h: meta.c_h,
    })
}

pub struct CkbRun {
    pub model: CkbModel,
    pub history: Vec<EpochStat>,
    pub test_mse: f64,
}

/// Train on a seeded 3:1-style split and report held-out normalized MSE.
pub fn train_ckb_on_dataset(
    samples: &[EnvSample],
    manifest: &DatasetManifest,
    ratio: (usize, usize),
    split_seed: u64,
    cfg: &CkbTrainConfig,
) -> Result<CkbRun> {
    let (train_idx, test_idx) = datastore::split(samples.len(), ratio, split_seed)?;
    let (model, history) = ckb::train_ckb(
        samples,
        manifest.extent,
        &train_idx,
        &test_idx,
        manifest.k as usize,
        manifest.m as usize,
        cfg,
    )?;
    let test_mse = ckb::evaluate_ckb(&model, samples, manifest.extent, &test_idx)?;
    Ok(CkbRun {
        model,
        history,
        test_mse,
    })
}

// ---- CKB sweeps -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiRadius {
    Fixed(usize),
    Adaptive,
}

impl RoiRadius {
    pub fn parse(s: &str) -> Result<RoiRadius> {
        if s == "adaptive" {
            return Ok(RoiRadius::Adaptive);
        }
        s.parse::<usize>()
            .map(RoiRadius::Fixed)
            .map_err(|_| Error::config(format!("bad ROI radius '{s}'")))
    }

    pub fn label(&self) -> String {
        match self {
            RoiRadius::Fixed(r) => r.to_string(),
            RoiRadius::Adaptive => "adaptive".to_string(),
        }
    }
}

/// One (label, held-out MSE) row of an ablation sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub label: String,
    pub mse: f64,
}

/// Re-derive each sample's semantic vector at a fixed or adaptive ROI
/// radius, retrain with the same budget, and report held-out MSE per radius.
pub fn sweep_roi(
    samples: &[EnvSample],
    manifest: &DatasetManifest,
    scene_cfg: &SceneConfig,
    radii: &[RoiRadius],
    ratio: (usize, usize),
    split_seed: u64,
    cfg: &CkbTrainConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for radius in radii {
        let mut variant = samples.to_vec();
        for s in &mut variant {
            let d_r = match radius {
                RoiRadius::Fixed(r) => *r,
                RoiRadius::Adaptive => {
                    adaptive_roi_radius(&s.label_map, scene_cfg.roi.d_min, scene_cfg.roi.d_max)
                }
            };
            let sem = roi_semantic_vector(&s.label_map, d_r, scene_cfg.roi.kappa)?;
            s.d_r = d_r as f64;
            s.j_po = semantic_input(&sem);
        }
        let run = train_ckb_on_dataset(&variant, manifest, ratio, split_seed, cfg)?;
        rows.push(SweepRow {
            label: radius.label(),
            mse: run.test_mse,
        });
    }
    Ok(rows)
}

/// Retrain under each fusion scheme with the same budget and seeds.
pub fn sweep_fusion(
    samples: &[EnvSample],
    manifest: &DatasetManifest,
    kinds: &[FusionKind],
    ratio: (usize, usize),
    split_seed: u64,
    cfg: &CkbTrainConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for kind in kinds {
        let variant_cfg = CkbTrainConfig {
            fusion: *kind,
            ..cfg.clone()
        };
        let run = train_ckb_on_dataset(samples, manifest, ratio, split_seed, &variant_cfg)?;
        rows.push(SweepRow {
            label: kind.label().to_string(),
            mse: run.test_mse,
        });
    }
    Ok(rows)
}

/// Merge the stored label maps down to `z_eff` classes, regenerate both
/// image-derived feature sets from them, and retrain.
pub fn sweep_classes(
    samples: &[EnvSample],
    manifest: &DatasetManifest,
    scene_cfg: &SceneConfig,
    z_list: &[usize],
    ratio: (usize, usize),
    split_seed: u64,
    cfg: &CkbTrainConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &z_eff in z_list {
        let mut variant = samples.to_vec();
        for s in &mut variant {
            let merged = remap_label_map(&s.label_map, z_eff)?;
            let sem = roi_semantic_vector(&merged, s.d_r as usize, scene_cfg.roi.kappa)?;
            s.j_po = semantic_input(&sem);
            s.descriptor = global_input(&merged);
            s.label_map = merged;
        }
        let run = train_ckb_on_dataset(&variant, manifest, ratio, split_seed, cfg)?;
        rows.push(SweepRow {
            label: z_eff.to_string(),
            mse: run.test_mse,
        });
    }
    Ok(rows)
}

// ---- JSCC orchestration -----------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JsccModelMeta {
    pub version: u32,
    pub mode: String,
    pub k: u32,
    pub m: u32,
    pub img: u32,
    pub c1: u32,
    pub c2: u32,
    pub blocks: u32,
}

pub fn save_jscc_model(model: &JsccModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    datastore::save_checkpoint(&model.ps, &dir.join("params.ckpt"))?;
    let d = &model.dims;
    let meta = JsccModelMeta {
        version: 1,
        mode: model.mode.label().to_string(),
        k: d.k as u32,
        m: d.m as u32,
        img: d.img as u32,
        c1: d.c1 as u32,
        c2: d.c2 as u32,
        blocks: d.blocks as u32,
    };
    let text = toml::to_string(&meta).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(dir.join("model.toml"), text).map_err(Error::from)
}

pub fn load_jscc_model(dir: &Path) -> Result<JsccModel> {
    let text = std::fs::read_to_string(dir.join("model.toml")).map_err(Error::from)?;
    let meta: JsccModelMeta =
        toml::from_str(&text).map_err(|e| Error::format(format!("model meta: {e}")))?;
    if meta.version != 1 {
        return Err(Error::format(format!(
            "unsupported JSCC model version {}",
            meta.version
        )));
    }
    let dims = JsccDims {
        k: meta.k as usize,
        m: meta.m as usize,
        img: meta.img as usize,
        c1: meta.c1 as usize,
        c2: meta.c2 as usize,
        blocks: meta.blocks as usize,
    };
    dims.validate()?;
    let ps = datastore::load_checkpoint(&dir.join("params.ckpt"))?;
    Ok(JsccModel {
        ps,
        dims,
        mode: CsiMode::parse(&meta.mode)?,
    })
}

/// Pair environment channels with corpus images round-robin. `knowledge`
/// supplies H_ne per environment index when the CKB mode needs it.
pub fn build_jscc_samples(
    env: &[EnvSample],
    idx: &[usize],
    images: &[Vec<f64>],
    knowledge: Option<&dyn Fn(u32) -> Result<Vec<Complex64>>>,
) -> Result<Vec<JsccSample>> {
    if images.is_empty() || idx.is_empty() {
        return Err(Error::config("need at least one image and one channel"));
    }
    idx.iter()
        .enumerate()
        .map(|(j, &i)| {
            let s = &env[i];
            let h_ckb = match knowledge {
                Some(f) => Some(f(s.index)?),
                None => None,
            };
            Ok(JsccSample {
                image: corpus::to_chw(&images[j % images.len()]),
                h_true: s.h.clone(),
                h_ckb,
            })
        })
        .collect()
}

/// PSNR/SSIM of one transmission, computed on the HWC views.
pub fn transmit_quality(
    model: &JsccModel,
    sample: &JsccSample,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<(f64, f64)> {
    let recon = jscc::jscc_transmit(model, sample, snr_db, seed)?;
    let a = corpus::to_hwc(&recon);
    let b = corpus::to_hwc(&sample.image);
    let img = model.dims.img;
    Ok((
        metrics::psnr(&a, &b, 1.0)?,
        metrics::ssim(&a, &b, img, img, 3, 1.0)?,
    ))
}

/// One row of an SNR sweep: averaged quality for one model at one SNR.
#[derive(Debug, Clone)]
pub struct SnrRow {
    pub snr_db: f64,
    pub mode: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Evaluate each model over the corpus×channel pairs at every SNR with a
/// fixed evaluation seed.
pub fn sweep_snr(
    models: &[&JsccModel],
    eval_samples: &[Vec<JsccSample>],
    snrs: &[f64],
    seed: u64,
) -> Result<Vec<SnrRow>> {
    if models.len() != eval_samples.len() {
        return Err(Error::dimension("one sample set per model required"));
    }
    let mut rows = Vec::new();
    for &snr in snrs {
        for (model, set) in models.iter().zip(eval_samples) {
            let mut psnr_sum = 0.0;
            let mut ssim_sum = 0.0;
            for (j, s) in set.iter().enumerate() {
                let (p, ss) = transmit_quality(model, s, Some(snr), seed.wrapping_add(j as u64))?;
                psnr_sum += p;
                ssim_sum += ss;
            }
            rows.push(SnrRow {
                snr_db: snr,
                mode: model.mode.label().to_string(),
                psnr: psnr_sum / set.len() as f64,
                ssim: ssim_sum / set.len() as f64,
            });
        }
    }
    Ok(rows)
}

/// One row of an EEM sweep: averaged quality for knowledge perturbed at a
/// given error magnitude.
#[derive(Debug, Clone)]
pub struct EemRow {
    pub eem: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Degrade the knowledge fed to a CKB-mode model by each error magnitude
/// and measure reconstruction quality at a fixed SNR.
pub fn sweep_eem(
    model: &JsccModel,
    base_samples: &[JsccSample],
    eems: &[f64],
    snr_db: f64,
    seed: u64,
) -> Result<Vec<EemRow>> {
    if model.mode != CsiMode::Ckb {
        return Err(Error::config("EEM sweep requires a CKB-mode model"));
    }
    let mut rows = Vec::new();
    for (ei, &eem) in eems.iter().enumerate() {
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for (j, s) in base_samples.iter().enumerate() {
            let noise_seed = seed
                .wrapping_add(ei as u64 * 0x5bd1e995)
                .wrapping_add(j as u64);
            let perturbed = ckb::perturb_knowledge(&s.h_true, eem, noise_seed)?;
            let mut v = s.clone();
            v.h_ckb = Some(perturbed.h_ne);
            let (p, ss) = transmit_quality(model, &v, Some(snr_db), seed.wrapping_add(j as u64))?;
            psnr_sum += p;
            ssim_sum += ss;
        }
        rows.push(EemRow {
            eem,
            psnr: psnr_sum / base_samples.len() as f64,
            ssim: ssim_sum / base_samples.len() as f64,
        });
    }
    Ok(rows)
}

// ---- report plumbing --------------------------------------------------

/// Write a CSV table; float cells use shortest-round-trip formatting, so
/// replays are byte-identical.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    w.write_record(header)
        .map_err(|e| Error::format(e.to_string()))?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::dimension("CSV row width mismatch"));
        }
        w.write_record(row).map_err(|e| Error::format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::format(e.to_string()))?;
    Ok(())
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Machine-readable summary of one CLI run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let text = toml::to_string(summary).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(path, text).map_err(Error::from)
}
