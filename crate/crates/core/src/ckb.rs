//! Generative channel knowledge base: a transformer regressor from fused
//! environment tokens to a channel-matrix estimate, its training loop, the
//! materialized knowledge store, and the knowledge-perturbation tool for
//! estimation-error studies.

use crate::datastore::EnvSample;
use crate::envsense::{self, BnUse};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionKind, DIM};
use crate::tensorkit::{adam_step, AdamConfig, Graph, ParameterSet, TensorId};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

pub const TRANS_LAYERS: usize = 2;
pub const TRANS_FF: usize = 256;
pub const TRANS_HEADS: usize = 4;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct CkbTrainConfig {
    pub fusion: FusionKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Early-stop patience on the validation MSE (epochs).
    pub patience: usize,
    /// Decoupled weight decay applied in the Adam update.
    pub weight_decay: f64,
}

impl Default for CkbTrainConfig {
    fn default() -> Self {
        CkbTrainConfig {
            fusion: FusionKind::Attention(fusion::GateMode::Adaptive),
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            seed: 42,
            patience: 20,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CkbModel {
    pub ps: ParameterSet,
    pub fusion: FusionKind,
    /// Channel matrix rows (RX antennas) and columns (TX antennas).
    pub k: usize,
    pub m: usize,
    /// Global scale for the real/imag regression target.
    pub c_h: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Per-sample network inputs, prepared once per training/eval run.
#[derive(Debug, Clone)]
pub struct FeatureInputs {
    pub loc: Vec<f64>,
    pub glob: Vec<f64>,
    pub sem: Vec<f64>,
}

pub fn feature_inputs(sample: &EnvSample, world_extent: [f64; 3]) -> Result<FeatureInputs> {
    let loc = envsense::location_input(
        crate::geom::vec3(sample.bs_pos[0], sample.bs_pos[1], sample.bs_pos[2]),
        crate::geom::vec3(sample.cu_pos[0], sample.cu_pos[1], sample.cu_pos[2]),
        world_extent,
    )?;
    Ok(FeatureInputs {
        loc: loc.to_vec(),
        glob: sample.descriptor.clone(),
        sem: sample.j_po.clone(),
    })
}

/// Power-of-two standard deviation of all real/imag entries over the given
/// samples. Rounding the scale to a power of two keeps the
/// normalize/de-normalize round-trip bit-exact.
pub fn channel_scale(samples: &[&EnvSample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut n = 0usize;
    for s in samples {
        for z in &s.h {
            for v in [z.re, z.im] {
                sum += v;
                sumsq += v * v;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::config("cannot compute channel scale of empty split"));
    }
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    if std <= 0.0 || !std.is_finite() {
        return Err(Error::Numeric(format!("degenerate channel std {std}")));
    }
    Ok(2f64.powi(std.log2().round() as i32))
}

pub fn init_ckb_params(ps: &mut ParameterSet, k: usize, m: usize, rng: &mut ChaCha12Rng) {
    envsense::init_feature_params(ps, rng);
    fusion::init_fusion_params(ps, rng);
    for l in 0..TRANS_LAYERS {
        let p = format!("trans.l{l}");
        ps.init_norm(&format!("{p}.ln1"), DIM);
        for mat in ["wq", "wk", "wv", "wo"] {
            ps.init_xavier(&format!("{p}.attn.{mat}"), &[DIM, DIM], DIM, DIM, rng);
        }
        ps.init_norm(&format!("{p}.ln2"), DIM);
        ps.init_linear(&format!("{p}.ff1"), DIM, TRANS_FF, rng);
        ps.init_linear(&format!("{p}.ff2"), TRANS_FF, DIM, rng);
    }
    // Zero-initialized regression head: the untrained model outputs zero.
    ps.insert("head.w", &[DIM, 2 * k * m], vec![0.0; DIM * 2 * k * m]);
    ps.insert("head.b", &[2 * k * m], vec![0.0; 2 * k * m]);
}

/// Pre-norm transformer encoder over the fused tokens.
fn transformer(g: &mut Graph, ps: &ParameterSet, mut x: TensorId) -> Result<TensorId> {
    for l in 0..TRANS_LAYERS {
        let p = format!("trans.l{l}");
        let ga = ps.bind(g, &format!("{p}.ln1.gamma"))?;
        let be = ps.bind(g, &format!("{p}.ln1.beta"))?;
        let normed = g.layer_norm(x, ga, be);
        let attended = fusion::attention_block(g, ps, &format!("{p}.attn"), normed, TRANS_HEADS)?;
        x = g.add(x, attended);
        let ga = ps.bind(g, &format!("{p}.ln2.gamma"))?;
        let be = ps.bind(g, &format!("{p}.ln2.beta"))?;
        let normed = g.layer_norm(x, ga, be);
        let w1 = ps.bind(g, &format!("{p}.ff1.w"))?;
        let b1 = ps.bind(g, &format!("{p}.ff1.b"))?;
        let h = g.linear(normed, w1, b1);
        let h = g.relu(h);
        let w2 = ps.bind(g, &format!("{p}.ff2.w"))?;
        let b2 = ps.bind(g, &format!("{p}.ff2.b"))?;
        let ff = g.linear(h, w2, b2);
        x = g.add(x, ff);
    }
    Ok(x)
}

/// Full CKB forward: feature branches -> fusion -> transformer -> pooled
/// regression head. Inputs are row-stacked batches; output is (N, 2·K·M)
/// in normalized units.
pub fn ckb_forward(
    g: &mut Graph,
    ps: &ParameterSet,
    x_loc: TensorId,
    x_glob: TensorId,
    x_sem: TensorId,
    kind: FusionKind,
    train: bool,
    bn_uses: &mut Vec<BnUse>,
) -> Result<TensorId> {
    let p_v = envsense::location_features(g, ps, x_loc, train, bn_uses)?;
    let j_v = envsense::global_image_features(g, ps, x_glob)?;
    let j_sv = envsense::semantic_features(g, ps, x_sem)?;
    let (tokens, _) = fusion::fuse_features(g, ps, p_v, j_v, j_sv, kind)?;
    let encoded = transformer(g, ps, tokens)?;
    let pooled = g.mean_axis(encoded, 1);
    let w = ps.bind(g, "head.w")?;
    let b = ps.bind(g, "head.b")?;
    Ok(g.linear(pooled, w, b))
}

fn batch_tensor(g: &mut Graph, rows: &[&FeatureInputs], pick: fn(&FeatureInputs) -> &Vec<f64>) -> TensorId {
    let d = pick(rows[0]).len();
    let mut vals = Vec::with_capacity(rows.len() * d);
    for r in rows {
        vals.extend_from_slice(pick(r));
    }
    g.constant(&[rows.len(), d], vals)
}

/// Normalized regression target for one sample: re/im interleaved, scaled
/// by 1/c_h.
pub fn normalized_target(h: &[Complex64], c_h: f64) -> Vec<f64> {
    h.iter().flat_map(|z| [z.re / c_h, z.im / c_h]).collect()
}

pub fn denormalize(values: &[f64], c_h: f64) -> Vec<Complex64> {
    values
        .chunks_exact(2)
        .map(|c| Complex64::new(c[0] * c_h, c[1] * c_h))
        .collect()
}

fn eval_mse(
    ps: &ParameterSet,
    kind: FusionKind,
    inputs: &[FeatureInputs],
    targets: &[Vec<f64>],
    idx: &[usize],
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(batch) {
        let rows: Vec<&FeatureInputs> = chunk.iter().map(|&i| &inputs[i]).collect();
        let mut g = Graph::new();
        let x_loc = batch_tensor(&mut g, &rows, |f| &f.loc);
        let x_glob = batch_tensor(&mut g, &rows, |f| &f.glob);
        let x_sem = batch_tensor(&mut g, &rows, |f| &f.sem);
        let mut bn = Vec::new();
        let pred = ckb_forward(&mut g, ps, x_loc, x_glob, x_sem, kind, false, &mut bn)?;
        let pv = g.value(pred);
        let d = targets[chunk[0]].len();
        for (r, &i) in chunk.iter().enumerate() {
            let row = &pv[r * d..(r + 1) * d];
            let t = &targets[i];
            total += row
                .iter()
                .zip(t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            count += d;
        }
    }
    Ok(total / count as f64)
}

/// Train a CKB on pre-extracted feature inputs. `world_extent` scales the
/// location branch; `k`/`m` fix the output head.
pub fn train_ckb(
    samples: &[EnvSample],
    world_extent: [f64; 3],
    train_idx: &[usize],
    val_idx: &[usize],
    k: usize,
    m: usize,
    cfg: &CkbTrainConfig,
) -> Result<(CkbModel, Vec<EpochStat>)> {
    if samples.len() < 8 {
        return Err(Error::config("CKB training needs at least 8 samples"));
    }
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::config("empty train or validation split"));
    }
    let inputs: Vec<FeatureInputs> = samples
        .iter()
        .map(|s| feature_inputs(s, world_extent))
        .collect::<Result<_>>()?;
    let train_samples: Vec<&EnvSample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let c_h = channel_scale(&train_samples)?;
    let targets: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| normalized_target(&s.h, c_h))
        .collect();

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut ps = ParameterSet::new();
    init_ckb_params(&mut ps, k, m, &mut rng);
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_ps = ps.clone();
    let mut since_best = 0usize;
    let mut order: Vec<usize> = train_idx.to_vec();
    for epoch in 0..cfg.epochs {
        // Cosine-anneal the learning rate over the full budget; the flat-lr
        // plateau otherwise oscillates a few 1e-2 around its floor.
        let t = epoch as f64 / cfg.epochs as f64;
        let adam = AdamConfig {
            lr: cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
            weight_decay: cfg.weight_decay,
            ..Default::default()
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<&FeatureInputs> = chunk.iter().map(|&i| &inputs[i]).collect();
            let mut g = Graph::new();
            let x_loc = batch_tensor(&mut g, &rows, |f| &f.loc);
            let x_glob = batch_tensor(&mut g, &rows, |f| &f.glob);
            let x_sem = batch_tensor(&mut g, &rows, |f| &f.sem);
            let d = targets[chunk[0]].len();
            let mut tvals = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                tvals.extend_from_slice(&targets[i]);
            }
            let tgt = g.constant(&[chunk.len(), d], tvals);
            let mut bn = Vec::new();
            let pred = ckb_forward(&mut g, &ps, x_loc, x_glob, x_sem, cfg.fusion, true, &mut bn)?;
            let loss = crate::tensorkit::mse_loss(&mut g, pred, tgt);
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite CKB loss at epoch {epoch}"
                )));
            }
            loss_sum += lv;
            loss_batches += 1;
            g.backward(loss);
            let grads = g.collect_grads();
            adam_step(&mut ps, &grads, &adam)?;
            for use_ in &bn {
                let (mean, var) = envsense::bn_batch_stats(&g, use_);
                ps.update_running_stats(&use_.prefix, &mean, &var, BN_MOMENTUM)?;
            }
        }
        let val_mse = eval_mse(&ps, cfg.fusion, &inputs, &targets, val_idx, cfg.batch_size)?;
        history.push(EpochStat {
            epoch,
            train_mse: loss_sum / loss_batches as f64,
            val_mse,
        });
        if val_mse < best_val {
            best_val = val_mse;
            best_ps = ps.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((
        CkbModel {
            ps: best_ps,
            fusion: cfg.fusion,
            k,
            m,
            c_h,
        },
        history,
    ))
}

/// Held-out normalized MSE of a trained model.
pub fn evaluate_ckb(
    model: &CkbModel,
    samples: &[EnvSample],
    world_extent: [f64; 3],
    idx: &[usize],
) -> Result<f64> {
    let inputs: Vec<FeatureInputs> = samples
        .iter()
        .map(|s| feature_inputs(s, world_extent))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| normalized_target(&s.h, model.c_h))
        .collect();
    eval_mse(&model.ps, model.fusion, &inputs, &targets, idx, 32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnowledgeSource {
    Generated,
    GroundTruth,
    Perturbed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelKnowledge {
    /// K×M row-major estimate.
    pub h_ne: Vec<Complex64>,
    pub source: KnowledgeSource,
}

/// Generate H_ne for one sample's features.
pub fn generate_channel_knowledge(
    model: &CkbModel,
    features: &FeatureInputs,
) -> Result<ChannelKnowledge> {
    let mut g = Graph::new();
    let x_loc = g.constant(&[1, features.loc.len()], features.loc.clone());
    let x_glob = g.constant(&[1, features.glob.len()], features.glob.clone());
    let x_sem = g.constant(&[1, features.sem.len()], features.sem.clone());
    let mut bn = Vec::new();
    let pred = ckb_forward(
        &mut g, &model.ps, x_loc, x_glob, x_sem, model.fusion, false, &mut bn,
    )?;
    Ok(ChannelKnowledge {
        h_ne: denormalize(g.value(pred), model.c_h),
        source: KnowledgeSource::Generated,
    })
}

/// Materialized CKB: generated entries for every known key, backed by the
/// model for novel queries.
pub struct CkbStore {
    pub entries: BTreeMap<u32, ChannelKnowledge>,
    pub model: Option<CkbModel>,
}

impl CkbStore {
    pub fn build(
        model: CkbModel,
        samples: &[EnvSample],
        world_extent: [f64; 3],
    ) -> Result<CkbStore> {
        let mut entries = BTreeMap::new();
        for s in samples {
            let f = feature_inputs(s, world_extent)?;
            entries.insert(s.index, generate_channel_knowledge(&model, &f)?);
        }
        Ok(CkbStore {
            entries,
            model: Some(model),
        })
    }

    pub fn lookup(&self, key: u32) -> Result<&ChannelKnowledge> {
        self.entries
            .get(&key)
            .ok_or_else(|| Error::Lookup(format!("no CKB entry for sample {key}")))
    }
}

/// Add circular Gaussian error with RMS(E)/RMS(H) = `eem` (in expectation).
pub fn perturb_knowledge(h: &[Complex64], eem: f64, seed: u64) -> Result<ChannelKnowledge> {
    if eem < 0.0 {
        return Err(Error::config("EEM must be nonnegative"));
    }
    if eem == 0.0 {
        return Ok(ChannelKnowledge {
            h_ne: h.to_vec(),
            source: KnowledgeSource::Perturbed,
        });
    }
    let power = h.iter().map(|z| z.norm_sqr()).sum::<f64>() / h.len() as f64;
    // Per complex entry: variance eem²·mean|H|², split evenly across re/im.
    let sigma = (eem * eem * power / 2.0).sqrt();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let h_ne = h
        .iter()
        .map(|z| {
            let (g1, g2) = gauss_pair(&mut rng);
            z + Complex64::new(sigma * g1, sigma * g2)
        })
        .collect();
    Ok(ChannelKnowledge {
        h_ne,
        source: KnowledgeSource::Perturbed,
    })
}

/// Box-Muller standard normal pair.
pub fn gauss_pair(rng: &mut ChaCha12Rng) -> (f64, f64) {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    let th = 2.0 * std::f64::consts::PI * u2;
    (r * th.cos(), r * th.sin())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NUM_CLASSES;
    use crate::envsense::{LabelMap, DESC_LEN};
    use crate::metrics;

    fn tiny_sample(index: u32, rng: &mut ChaCha12Rng, k: usize, m: usize) -> EnvSample {
        let res = 16;
        let labels: Vec<u8> = (0..res * res)
            .map(|_| rng.gen_range(1..=NUM_CLASSES as u8))
            .collect();
        EnvSample {
            index,
            bs_pos: [50.0, 50.0, 20.0],
            cu_pos: [
                rng.gen_range(10.0..90.0),
                rng.gen_range(10.0..90.0),
                1.5,
            ],
            label_map: LabelMap {
                h: res,
                w: res,
                labels,
                cu_pixel: (res / 2, res / 2),
                depth: None,
            },
            d_r: 60.0,
            j_po: (0..NUM_CLASSES).map(|_| rng.gen_range(0.0..0.2)).collect(),
            descriptor: (0..DESC_LEN).map(|_| rng.gen_range(0.0..1.0)).collect(),
            h: (0..k * m)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        }
    }

    #[test]
    fn zero_head_outputs_zero_matrix() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut ps = ParameterSet::new();
        init_ckb_params(&mut ps, 2, 2, &mut rng);
        let model = CkbModel {
            ps,
            fusion: FusionKind::Attention(fusion::GateMode::Adaptive),
            k: 2,
            m: 2,
            c_h: 1.0,
        };
        let f = FeatureInputs {
            loc: vec![0.1; 6],
            glob: vec![0.2; DESC_LEN],
            sem: vec![0.05; NUM_CLASSES],
        };
        let k1 = generate_channel_knowledge(&model, &f).unwrap();
        assert!(k1.h_ne.iter().all(|z| z.re == 0.0 && z.im == 0.0));
        // Determinism.
        let k2 = generate_channel_knowledge(&model, &f).unwrap();
        assert_eq!(k1, k2);
    }

    #[test]
    fn channel_scale_is_power_of_two_and_round_trips() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let samples: Vec<EnvSample> = (0..4).map(|i| tiny_sample(i, &mut rng, 2, 2)).collect();
        let refs: Vec<&EnvSample> = samples.iter().collect();
        let c_h = channel_scale(&refs).unwrap();
        assert!(c_h > 0.0);
        let l2 = c_h.log2();
        assert_eq!(l2, l2.round());
        // Exact round-trip through normalize/denormalize.
        for s in &samples {
            let back = denormalize(&normalized_target(&s.h, c_h), c_h);
            assert_eq!(back, s.h);
        }
    }

    #[test]
    fn training_loss_equals_metrics_mse() {
        // One eval pass: the loop's normalized MSE must equal metrics::mse
        // on the normalized complex matrices.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let samples: Vec<EnvSample> = (0..8).map(|i| tiny_sample(i, &mut rng, 2, 2)).collect();
        let cfg = CkbTrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        let (model, _) =
            train_ckb(&samples, [100.0, 100.0, 50.0], &[0, 1, 2, 3, 4, 5], &[6, 7], 2, 2, &cfg)
                .unwrap();
        let loop_mse =
            evaluate_ckb(&model, &samples, [100.0, 100.0, 50.0], &[6, 7]).unwrap();
        // Oracle: generate each estimate, normalize both sides, complex MSE.
        // Complex MSE counts |Δ|² per entry = twice the per-real MSE.
        let mut acc = 0.0;
        for &i in &[6usize, 7] {
            let f = feature_inputs(&samples[i], [100.0, 100.0, 50.0]).unwrap();
            let est = generate_channel_knowledge(&model, &f).unwrap();
            let a: Vec<Complex64> = est.h_ne.iter().map(|z| z / model.c_h).collect();
            let b: Vec<Complex64> = samples[i].h.iter().map(|z| z / model.c_h).collect();
            acc += metrics::mse_complex(&a, &b).unwrap();
        }
        let oracle = acc / 2.0 / 2.0; // 2 samples, complex->real factor 2
        assert!(
            (loop_mse - oracle).abs() < 1e-9,
            "{loop_mse} vs {oracle}"
        );
    }

    #[test]
    fn overfits_two_samples_with_small_lr_monotonically() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut samples: Vec<EnvSample> = (0..8).map(|i| tiny_sample(i, &mut rng, 2, 2)).collect();
        // Two distinct training samples, duplicated val side.
        samples.truncate(8);
        let cfg = CkbTrainConfig {
            epochs: 40,
            batch_size: 2,
            lr: 1e-4,
            patience: 1000,
            ..Default::default()
        };
        let (_, history) =
            train_ckb(&samples, [100.0, 100.0, 50.0], &[0, 1], &[2], 2, 2, &cfg).unwrap();
        for w in history.windows(2) {
            assert!(
                w[1].train_mse <= w[0].train_mse * 1.0 + 1e-9,
                "loss rose: {} -> {}",
                w[0].train_mse,
                w[1].train_mse
            );
        }
    }

    #[test]
    fn overfit_oracle_reaches_tiny_mse() {
        // 8-sample dataset, generous steps: the model should overfit far
        // below the acceptance threshold.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let samples: Vec<EnvSample> = (0..8).map(|i| tiny_sample(i, &mut rng, 2, 2)).collect();
        let cfg = CkbTrainConfig {
            epochs: 800,
            batch_size: 8,
            lr: 1e-3,
            patience: 10_000,
            ..Default::default()
        };
        let idx: Vec<usize> = (0..8).collect();
        let (model, history) =
            train_ckb(&samples, [100.0, 100.0, 50.0], &idx, &idx, 2, 2, &cfg).unwrap();
        let final_mse = history.last().unwrap().train_mse;
        assert!(final_mse <= 1e-4, "train MSE {final_mse}");
        // Single-sample agreement.
        let f = feature_inputs(&samples[0], [100.0, 100.0, 50.0]).unwrap();
        let est = generate_channel_knowledge(&model, &f).unwrap();
        let a: Vec<Complex64> = est.h_ne.iter().map(|z| z / model.c_h).collect();
        let b: Vec<Complex64> = samples[0].h.iter().map(|z| z / model.c_h).collect();
        assert!(metrics::mse_complex(&a, &b).unwrap() < 1e-2);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let samples: Vec<EnvSample> = (0..10).map(|i| tiny_sample(i, &mut rng, 2, 2)).collect();
        let cfg = CkbTrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let run = || {
            train_ckb(
                &samples,
                [100.0, 100.0, 50.0],
                &[0, 1, 2, 3, 4, 5, 6],
                &[7, 8, 9],
                2,
                2,
                &cfg,
            )
            .unwrap()
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(m1.ps, m2.ps);
        for (a, b) in h1.iter().zip(&h2) {
            assert_eq!(a.train_mse, b.train_mse);
            assert_eq!(a.val_mse, b.val_mse);
        }
    }

    #[test]
    fn store_contains_every_key_and_is_stable() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let samples: Vec<EnvSample> = (0..8).map(|i| tiny_sample(i, &mut rng, 2, 2)).collect();
        let mut ps = ParameterSet::new();
        let mut prng = ChaCha12Rng::seed_from_u64(70);
        init_ckb_params(&mut ps, 2, 2, &mut prng);
        let model = CkbModel {
            ps,
            fusion: FusionKind::Attention(fusion::GateMode::Adaptive),
            k: 2,
            m: 2,
            c_h: 1.0,
        };
        let store = CkbStore::build(model, &samples, [100.0, 100.0, 50.0]).unwrap();
        assert_eq!(store.entries.len(), samples.len());
        for s in &samples {
            let a = store.lookup(s.index).unwrap();
            let b = store.lookup(s.index).unwrap();
            assert_eq!(a, b);
        }
        assert!(store.lookup(999).is_err());
    }

    #[test]
    fn perturbation_rms_ratio_and_zero_case() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let h: Vec<Complex64> = (0..256)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let same = perturb_knowledge(&h, 0.0, 1).unwrap();
        assert_eq!(same.h_ne, h);
        assert_eq!(same.source, KnowledgeSource::Perturbed);
        for eem in [1e-2, 1e-1] {
            let mut err_power = 0.0;
            let mut h_power = 0.0;
            for seed in 0..100 {
                let p = perturb_knowledge(&h, eem, seed).unwrap();
                for (a, b) in p.h_ne.iter().zip(&h) {
                    err_power += (a - b).norm_sqr();
                    h_power += b.norm_sqr();
                }
            }
            let ratio = (err_power / h_power).sqrt();
            assert!(
                (ratio - eem).abs() / eem < 0.05,
                "eem {eem}: measured {ratio}"
            );
        }
        // Different seeds, different draws.
        let p1 = perturb_knowledge(&h, 0.1, 1).unwrap();
        let p2 = perturb_knowledge(&h, 0.1, 2).unwrap();
        assert_ne!(p1.h_ne, p2.h_ne);
        assert!(perturb_knowledge(&h, -0.1, 1).is_err());
    }

    #[test]
    fn empty_split_is_config_error() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let samples: Vec<EnvSample> = (0..8).map(|i| tiny_sample(i, &mut rng, 2, 2)).collect();
        let cfg = CkbTrainConfig::default();
        assert!(train_ckb(&samples, [100.0, 100.0, 50.0], &[], &[1], 2, 2, &cfg).is_err());
        assert!(
            train_ckb(&samples[..4], [100.0, 100.0, 50.0], &[0, 1], &[2], 2, 2, &cfg).is_err()
        );
    }
}
