//! Knowledge-conditioned joint source-channel coding of small RGB images:
//! a convolutional encoder to MIMO symbol blocks, the fading-channel
//! transfer itself, and the decoder back to pixels. Both coder halves are
//! conditioned on a channel-knowledge matrix H_ne; feeding zeros recovers a
//! knowledge-free baseline with the exact same network.

use crate::ckb;
use crate::error::{Error, Result};
use crate::tensorkit::{adam_step, AdamConfig, Graph, ParameterSet, TensorId};
use crate::envsense::BnUse;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const BN_MOMENTUM: f64 = 0.1;
const H_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsiMode {
    /// Condition on the generated knowledge-base estimate.
    Ckb,
    /// Condition on the ground-truth channel matrix.
    TrueCsi,
    /// Condition on an all-zero matrix (no knowledge available).
    NoKnowledge,
}

impl CsiMode {
    pub fn parse(s: &str) -> Result<CsiMode> {
        match s {
            "ckb" => Ok(CsiMode::Ckb),
            "true_csi" => Ok(CsiMode::TrueCsi),
            "no_knowledge" => Ok(CsiMode::NoKnowledge),
            other => Err(Error::config(format!("unknown CSI mode '{other}'"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            CsiMode::Ckb => "ckb",
            CsiMode::TrueCsi => "true_csi",
            CsiMode::NoKnowledge => "no_knowledge",
        }
    }
}

/// Static shape of a JSCC coder pair. The encoder downsamples the image by
/// 4 in each direction and maps the bottleneck to `blocks` MIMO uses of `m`
/// complex symbols each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JsccDims {
    pub k: usize,
    pub m: usize,
    pub img: usize,
    pub c1: usize,
    pub c2: usize,
    pub blocks: usize,
}

impl JsccDims {
    pub fn standard() -> JsccDims {
        JsccDims {
            k: 16,
            m: 16,
            img: 32,
            c1: 32,
            c2: 64,
            blocks: 64,
        }
    }

    /// Bottleneck spatial side.
    pub fn s(&self) -> usize {
        self.img / 4
    }

    /// Encoder head channels: 2·M·blocks reals spread over the s×s grid.
    pub fn enc_out_ch(&self) -> usize {
        2 * self.m * self.blocks / (self.s() * self.s())
    }

    /// Decoder feature channels after folding the symbol sequence back onto
    /// the s×s grid.
    pub fn dec_feat_ch(&self) -> usize {
        self.c2 * self.blocks / (self.s() * self.s())
    }

    pub fn validate(&self) -> Result<()> {
        if self.img < 8 || self.img % 4 != 0 {
            return Err(Error::config("image side must be a multiple of 4, >= 8"));
        }
        if self.k == 0 || self.m == 0 || self.blocks == 0 || self.c1 == 0 || self.c2 == 0 {
            return Err(Error::config("JSCC dims must be positive"));
        }
        let ss = self.s() * self.s();
        if 2 * self.m * self.blocks % ss != 0 {
            return Err(Error::config(
                "2*m*blocks must be divisible by the bottleneck area",
            ));
        }
        if self.c2 * self.blocks % ss != 0 {
            return Err(Error::config(
                "c2*blocks must be divisible by the bottleneck area",
            ));
        }
        Ok(())
    }
}

pub fn flatten_h(h: &[Complex64]) -> Vec<f64> {
    h.iter().flat_map(|z| [z.re, z.im]).collect()
}

pub fn init_jscc_params(ps: &mut ParameterSet, dims: &JsccDims, rng: &mut ChaCha12Rng) {
    let hkm = 2 * dims.k * dims.m;
    // Encoder residual blocks.
    for (name, ci, co) in [("enc.b1", 3, dims.c1), ("enc.b2", dims.c1, dims.c2)] {
        ps.init_conv2d(&format!("{name}.conv1"), co, ci, 3, 3, rng);
        ps.init_batch_norm(&format!("{name}.bn1"), co);
        ps.init_conv2d(&format!("{name}.conv2"), co, co, 3, 3, rng);
        ps.init_batch_norm(&format!("{name}.bn2"), co);
        ps.init_conv2d(&format!("{name}.skip"), co, ci, 1, 1, rng);
        ps.insert(&format!("{name}.prelu1"), &[1], vec![0.25]);
        ps.insert(&format!("{name}.prelu2"), &[1], vec![0.25]);
    }
    // Knowledge vectorizers (encoder and decoder sides).
    ps.init_linear("enc.h.fc1", hkm, H_HIDDEN, rng);
    ps.init_linear("enc.h.fc2", H_HIDDEN, dims.c2, rng);
    ps.init_linear("dec.h.fc1", hkm, H_HIDDEN, rng);
    ps.init_linear("dec.h.fc2", H_HIDDEN, dims.dec_feat_ch(), rng);
    // Encoder head.
    ps.init_conv2d("enc.e1", dims.c2, dims.c2, 3, 3, rng);
    ps.init_norm("enc.in", dims.c2);
    ps.init_conv2d("enc.e2", dims.enc_out_ch(), dims.c2, 3, 3, rng);
    // Decoder.
    ps.init_conv1d("dec.d1", dims.c2, 2 * dims.k, 3, rng);
    ps.insert("dec.prelu1", &[1], vec![0.25]);
    ps.init_conv1d("dec.d2", dims.c2, dims.c2, 3, rng);
    ps.insert("dec.prelu2", &[1], vec![0.25]);
    ps.init_conv2d("dec.d3", dims.dec_feat_ch(), dims.dec_feat_ch(), 3, 3, rng);
    ps.insert("dec.prelu3", &[1], vec![0.25]);
    ps.init_conv_transpose2d("dec.up", dims.dec_feat_ch(), dims.c1, 4, 4, rng);
    ps.insert("dec.prelu4", &[1], vec![0.25]);
    ps.init_conv2d("dec.out", 3, dims.c1, 3, 3, rng);
}

fn bn_apply(
    g: &mut Graph,
    ps: &ParameterSet,
    prefix: &str,
    x: TensorId,
    channels: usize,
    train: bool,
    bn_uses: &mut Vec<BnUse>,
) -> Result<TensorId> {
    let gamma = ps.bind(g, &format!("{prefix}.gamma"))?;
    let beta = ps.bind(g, &format!("{prefix}.beta"))?;
    if train {
        let node = g.batch_norm_train(x, gamma, beta);
        bn_uses.push(BnUse {
            prefix: prefix.to_string(),
            node,
            channels,
        });
        Ok(node)
    } else {
        let mean = ps.bind(g, &format!("{prefix}.running_mean"))?;
        let var = ps.bind(g, &format!("{prefix}.running_var"))?;
        Ok(g.batch_norm_eval(x, gamma, beta, mean, var))
    }
}

fn residual_block(
    g: &mut Graph,
    ps: &ParameterSet,
    name: &str,
    x: TensorId,
    co: usize,
    train: bool,
    bn_uses: &mut Vec<BnUse>,
) -> Result<TensorId> {
    let w = ps.bind(g, &format!("{name}.conv1.w"))?;
    let b = ps.bind(g, &format!("{name}.conv1.b"))?;
    let h = g.conv2d(x, w, b, 2, 1);
    let h = bn_apply(g, ps, &format!("{name}.bn1"), h, co, train, bn_uses)?;
    let a1 = ps.bind(g, &format!("{name}.prelu1"))?;
    let h = g.prelu(h, a1);
    let w = ps.bind(g, &format!("{name}.conv2.w"))?;
    let b = ps.bind(g, &format!("{name}.conv2.b"))?;
    let h = g.conv2d(h, w, b, 1, 1);
    let h = bn_apply(g, ps, &format!("{name}.bn2"), h, co, train, bn_uses)?;
    let w = ps.bind(g, &format!("{name}.skip.w"))?;
    let b = ps.bind(g, &format!("{name}.skip.b"))?;
    let skip = g.conv2d(x, w, b, 2, 0);
    let sum = g.add(h, skip);
    let a2 = ps.bind(g, &format!("{name}.prelu2"))?;
    Ok(g.prelu(sum, a2))
}

fn h_vector(
    g: &mut Graph,
    ps: &ParameterSet,
    side: &str,
    h_flat: TensorId,
) -> Result<TensorId> {
    let w = ps.bind(g, &format!("{side}.h.fc1.w"))?;
    let b = ps.bind(g, &format!("{side}.h.fc1.b"))?;
    let h = g.linear(h_flat, w, b);
    let h = g.relu(h);
    let w = ps.bind(g, &format!("{side}.h.fc2.w"))?;
    let b = ps.bind(g, &format!("{side}.h.fc2.b"))?;
    Ok(g.linear(h, w, b))
}

/// Image batch (N,3,img,img) plus flattened knowledge (N,2·K·M) to
/// power-normalized symbols (N, blocks, 2M): real parts then imaginary
/// parts within each block.
pub fn jscc_encode(
    g: &mut Graph,
    ps: &ParameterSet,
    dims: &JsccDims,
    img: TensorId,
    h_flat: TensorId,
    train: bool,
    bn_uses: &mut Vec<BnUse>,
) -> Result<TensorId> {
    dims.validate()?;
    let n = g.shape(img)[0];
    let s3 = residual_block(g, ps, "enc.b1", img, dims.c1, train, bn_uses)?;
    let s3 = residual_block(g, ps, "enc.b2", s3, dims.c2, train, bn_uses)?;
    let hv = h_vector(g, ps, "enc", h_flat)?;
    let s3 = g.broadcast_add_channel(s3, hv);
    let w = ps.bind(g, "enc.e1.w")?;
    let b = ps.bind(g, "enc.e1.b")?;
    let e1 = g.conv2d(s3, w, b, 1, 1);
    let gamma = ps.bind(g, "enc.in.gamma")?;
    let beta = ps.bind(g, "enc.in.beta")?;
    let e1 = g.instance_norm(e1, gamma, beta);
    let e1 = g.relu(e1);
    let w = ps.bind(g, "enc.e2.w")?;
    let b = ps.bind(g, "enc.e2.b")?;
    let e2 = g.conv2d(e1, w, b, 1, 1);
    let flat = g.reshape(e2, &[n, 2 * dims.m * dims.blocks]);
    let normed = g.power_normalize(flat, dims.m * dims.blocks)?;
    Ok(g.reshape(normed, &[n, dims.blocks, 2 * dims.m]))
}

/// One channel transfer: y and the noise parameters actually used.
pub struct ChannelOutput {
    /// (N, blocks, 2K), real parts then imaginary parts per block.
    pub y: TensorId,
    /// Per-real-component noise standard deviation (0 when noiseless).
    pub noise_sigma: f64,
    /// Mean received signal power per block, E‖Hx‖².
    pub rx_power: f64,
}

/// Real 2M×2K right-multiplication matrix for the complex map x -> Hx with
/// the split re/im layout.
fn h_real_t(h: &[Complex64], k: usize, m: usize) -> Vec<f64> {
    let mut t = vec![0.0; 2 * m * 2 * k];
    let cols = 2 * k;
    for r in 0..k {
        for c in 0..m {
            let z = h[r * m + c];
            t[c * cols + r] = z.re;
            t[(m + c) * cols + r] = -z.im;
            t[c * cols + k + r] = z.im;
            t[(m + c) * cols + k + r] = z.re;
        }
    }
    t
}

/// Pass symbol blocks through per-sample MIMO channels with AWGN at the
/// given SNR. `snr_db = None` means noiseless. The noise variance follows
/// SNR = E‖Hx‖² / (K·σ²), with E‖Hx‖² estimated over this call's blocks.
pub fn apply_channel(
    g: &mut Graph,
    x: TensorId,
    h: &[Vec<Complex64>],
    k: usize,
    m: usize,
    snr_db: Option<f64>,
    rng: &mut ChaCha12Rng,
) -> Result<ChannelOutput> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 || xs[2] != 2 * m {
        return Err(Error::dimension(format!(
            "channel input must be (N, blocks, {}), got {:?}",
            2 * m,
            xs
        )));
    }
    let (n, blocks) = (xs[0], xs[1]);
    if h.len() != n {
        return Err(Error::dimension("one channel matrix per sample required"));
    }
    let mut hmat = Vec::with_capacity(n * 2 * m * 2 * k);
    for hs in h {
        if hs.len() != k * m {
            return Err(Error::dimension("channel matrix must be K*M"));
        }
        hmat.extend_from_slice(&h_real_t(hs, k, m));
    }
    let ht = g.constant(&[n, 2 * m, 2 * k], hmat);
    let clean = g.bmm(x, ht);
    let rx_power = {
        let cv = g.value(clean);
        cv.iter().map(|v| v * v).sum::<f64>() / (n * blocks) as f64
    };
    let Some(db) = snr_db else {
        return Ok(ChannelOutput {
            y: clean,
            noise_sigma: 0.0,
            rx_power,
        });
    };
    if rx_power <= 0.0 {
        return Err(Error::Numeric(
            "zero received power: cannot realize a finite SNR".into(),
        ));
    }
    let snr_lin = 10f64.powf(db / 10.0);
    // Complex noise variance per entry, split across re/im.
    let sigma_c2 = rx_power / (k as f64 * snr_lin);
    let sigma = (sigma_c2 / 2.0).sqrt();
    let total = n * blocks * 2 * k;
    let mut noise = Vec::with_capacity(total);
    while noise.len() < total {
        let (g1, g2) = ckb::gauss_pair(rng);
        noise.push(g1 * sigma);
        if noise.len() < total {
            noise.push(g2 * sigma);
        }
    }
    let nid = g.constant(&[n, blocks, 2 * k], noise);
    let y = g.add(clean, nid);
    Ok(ChannelOutput {
        y,
        noise_sigma: sigma,
        rx_power,
    })
}

/// Received blocks (N, blocks, 2K) plus knowledge back to pixels
/// (N,3,img,img) in [0,1].
pub fn jscc_decode(
    g: &mut Graph,
    ps: &ParameterSet,
    dims: &JsccDims,
    y: TensorId,
    h_flat: TensorId,
) -> Result<TensorId> {
    dims.validate()?;
    let n = g.shape(y)[0];
    let s = dims.s();
    let seq = g.permute(y, &[0, 2, 1]);
    let w = ps.bind(g, "dec.d1.w")?;
    let b = ps.bind(g, "dec.d1.b")?;
    let h1 = g.conv1d(seq, w, b, 1, 1);
    let a = ps.bind(g, "dec.prelu1")?;
    let h1 = g.prelu(h1, a);
    let w = ps.bind(g, "dec.d2.w")?;
    let b = ps.bind(g, "dec.d2.b")?;
    let s4 = g.conv1d(h1, w, b, 1, 1);
    let a = ps.bind(g, "dec.prelu2")?;
    let s4 = g.prelu(s4, a);
    let grid = g.reshape(s4, &[n, dims.dec_feat_ch(), s, s]);
    let hv = h_vector(g, ps, "dec", h_flat)?;
    let grid = g.broadcast_add_channel(grid, hv);
    let w = ps.bind(g, "dec.d3.w")?;
    let b = ps.bind(g, "dec.d3.b")?;
    let s5 = g.conv2d(grid, w, b, 1, 1);
    let a = ps.bind(g, "dec.prelu3")?;
    let s5 = g.prelu(s5, a);
    let pooled = g.adaptive_avg_pool2d(s5, s, s);
    let w = ps.bind(g, "dec.up.w")?;
    let b = ps.bind(g, "dec.up.b")?;
    let up = g.conv_transpose2d(pooled, w, b, 4);
    let a = ps.bind(g, "dec.prelu4")?;
    let up = g.prelu(up, a);
    let w = ps.bind(g, "dec.out.w")?;
    let b = ps.bind(g, "dec.out.b")?;
    let out = g.conv2d(up, w, b, 1, 1);
    Ok(g.sigmoid(out))
}

#[derive(Debug, Clone)]
pub struct JsccModel {
    pub ps: ParameterSet,
    pub dims: JsccDims,
    pub mode: CsiMode,
}

/// Knowledge fed to the coders under the model's CSI mode.
pub fn knowledge_for_mode(
    mode: CsiMode,
    h_true: &[Complex64],
    h_ckb: Option<&[Complex64]>,
) -> Result<Vec<f64>> {
    match mode {
        CsiMode::TrueCsi => Ok(flatten_h(h_true)),
        CsiMode::NoKnowledge => Ok(vec![0.0; 2 * h_true.len()]),
        CsiMode::Ckb => {
            let h = h_ckb.ok_or_else(|| Error::config("CKB mode needs a knowledge matrix"))?;
            if h.len() != h_true.len() {
                return Err(Error::dimension("knowledge matrix size mismatch"));
            }
            Ok(flatten_h(h))
        }
    }
}

#[derive(Debug, Clone)]
pub struct JsccTrainConfig {
    pub mode: CsiMode,
    pub dims: JsccDims,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Training SNRs in dB, drawn uniformly per step. Empty = noiseless.
    pub snr_schedule: Vec<f64>,
}

impl Default for JsccTrainConfig {
    fn default() -> Self {
        JsccTrainConfig {
            mode: CsiMode::Ckb,
            dims: JsccDims::standard(),
            epochs: 40,
            batch_size: 16,
            lr: 1e-3,
            seed: 42,
            snr_schedule: vec![0.0, 5.0, 10.0, 15.0, 20.0],
        }
    }
}

/// One training sample: channel-first pixels, the true channel, and the
/// (optional) generated knowledge.
#[derive(Debug, Clone)]
pub struct JsccSample {
    /// (3, img, img) row-major, values in [0,1].
    pub image: Vec<f64>,
    pub h_true: Vec<Complex64>,
    pub h_ckb: Option<Vec<Complex64>>,
}

pub fn train_jscc(samples: &[JsccSample], cfg: &JsccTrainConfig) -> Result<(JsccModel, Vec<f64>)> {
    cfg.dims.validate()?;
    if samples.is_empty() {
        return Err(Error::config("JSCC training needs samples"));
    }
    let px = 3 * cfg.dims.img * cfg.dims.img;
    for s in samples {
        if s.image.len() != px || s.h_true.len() != cfg.dims.k * cfg.dims.m {
            return Err(Error::dimension("JSCC sample shape mismatch"));
        }
    }
    let knowledge: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| knowledge_for_mode(cfg.mode, &s.h_true, s.h_ckb.as_deref()))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut ps = ParameterSet::new();
    init_jscc_params(&mut ps, &cfg.dims, &mut rng);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            let mut img = Vec::with_capacity(n * px);
            let mut hk = Vec::with_capacity(n * 2 * cfg.dims.k * cfg.dims.m);
            let mut hs = Vec::with_capacity(n);
            for &i in chunk {
                img.extend_from_slice(&samples[i].image);
                hk.extend_from_slice(&knowledge[i]);
                hs.push(samples[i].h_true.clone());
            }
            let snr_db = if cfg.snr_schedule.is_empty() {
                None
            } else {
                Some(cfg.snr_schedule[rng.gen_range(0..cfg.snr_schedule.len())])
            };
            let mut g = Graph::new();
            let x_img = g.constant(&[n, 3, cfg.dims.img, cfg.dims.img], img.clone());
            let x_h = g.constant(&[n, 2 * cfg.dims.k * cfg.dims.m], hk);
            let mut bn = Vec::new();
            let sym = jscc_encode(&mut g, &ps, &cfg.dims, x_img, x_h, true, &mut bn)?;
            let ch = apply_channel(&mut g, sym, &hs, cfg.dims.k, cfg.dims.m, snr_db, &mut rng)?;
            let x_h2 = g.constant(&[n, 2 * cfg.dims.k * cfg.dims.m], {
                let mut v = Vec::new();
                for &i in chunk {
                    v.extend_from_slice(&knowledge[i]);
                }
                v
            });
            let recon = jscc_decode(&mut g, &ps, &cfg.dims, ch.y, x_h2)?;
            let target = g.constant(&[n, 3, cfg.dims.img, cfg.dims.img], img);
            let loss = crate::tensorkit::mse_loss(&mut g, recon, target);
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Numeric("non-finite JSCC loss".into()));
            }
            loss_sum += lv;
            batches += 1;
            g.backward(loss);
            let grads = g.collect_grads();
            adam_step(&mut ps, &grads, &adam)?;
            for use_ in &bn {
                let (mean, var) = crate::envsense::bn_batch_stats(&g, use_);
                ps.update_running_stats(&use_.prefix, &mean, &var, BN_MOMENTUM)?;
            }
        }
        history.push(loss_sum / batches as f64);
    }
    Ok((
        JsccModel {
            ps,
            dims: cfg.dims,
            mode: cfg.mode,
        },
        history,
    ))
}

/// Full eval-mode transmission of one image; returns the reconstruction
/// as (3, img, img) values.
pub fn jscc_transmit(
    model: &JsccModel,
    sample: &JsccSample,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<Vec<f64>> {
    let d = &model.dims;
    let hk = knowledge_for_mode(model.mode, &sample.h_true, sample.h_ckb.as_deref())?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let x_img = g.constant(&[1, 3, d.img, d.img], sample.image.clone());
    let x_h = g.constant(&[1, 2 * d.k * d.m], hk.clone());
    let mut bn = Vec::new();
    let sym = jscc_encode(&mut g, &model.ps, d, x_img, x_h, false, &mut bn)?;
    let ch = apply_channel(
        &mut g,
        sym,
        std::slice::from_ref(&sample.h_true),
        d.k,
        d.m,
        snr_db,
        &mut rng,
    )?;
    let x_h2 = g.constant(&[1, 2 * d.k * d.m], hk);
    let recon = jscc_decode(&mut g, &model.ps, d, ch.y, x_h2)?;
    Ok(g.value(recon).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use crate::tensorkit::grad_check;
    use rand::Rng;

    fn tiny_dims() -> JsccDims {
        JsccDims {
            k: 2,
            m: 2,
            img: 8,
            c1: 4,
            c2: 4,
            blocks: 2,
        }
    }

    fn rand_image(rng: &mut ChaCha12Rng, img: usize) -> Vec<f64> {
        (0..3 * img * img).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    fn rand_h(rng: &mut ChaCha12Rng, k: usize, m: usize) -> Vec<Complex64> {
        (0..k * m)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn encoder_output_is_power_normalized() {
        let dims = tiny_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut ps = ParameterSet::new();
        init_jscc_params(&mut ps, &dims, &mut rng);
        let mut g = Graph::new();
        let img = g.constant(&[3, 3, 8, 8], {
            let mut v = Vec::new();
            for _ in 0..3 {
                v.extend(rand_image(&mut rng, 8));
            }
            v
        });
        let h = g.constant(&[3, 2 * dims.k * dims.m], vec![0.3; 3 * 2 * dims.k * dims.m]);
        let mut bn = Vec::new();
        let sym = jscc_encode(&mut g, &ps, &dims, img, h, false, &mut bn).unwrap();
        let v = g.value(sym);
        let per = dims.blocks * 2 * dims.m;
        for s in 0..3 {
            let row = &v[s * per..(s + 1) * per];
            let power = row.iter().map(|a| a * a).sum::<f64>() / (dims.blocks * dims.m) as f64;
            assert!((power - 1.0).abs() < 1e-12, "sample {s}: power {power}");
        }
    }

    #[test]
    fn no_knowledge_equals_ckb_with_zero_matrix() {
        let dims = tiny_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut ps = ParameterSet::new();
        init_jscc_params(&mut ps, &dims, &mut rng);
        let sample = JsccSample {
            image: rand_image(&mut rng, 8),
            h_true: rand_h(&mut rng, 2, 2),
            h_ckb: Some(vec![Complex64::new(0.0, 0.0); 4]),
        };
        let mk = |mode| JsccModel {
            ps: ps.clone(),
            dims,
            mode,
        };
        let a = jscc_transmit(&mk(CsiMode::NoKnowledge), &sample, Some(10.0), 7).unwrap();
        let b = jscc_transmit(&mk(CsiMode::Ckb), &sample, Some(10.0), 7).unwrap();
        assert_eq!(a, b);
        // And true CSI differs (sanity that the conditioning matters).
        let c = jscc_transmit(&mk(CsiMode::TrueCsi), &sample, Some(10.0), 7).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let dims = tiny_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut ps = ParameterSet::new();
        init_jscc_params(&mut ps, &dims, &mut rng);
        let image = rand_image(&mut rng, 8);
        let h = rand_h(&mut rng, 2, 2);
        let hk = flatten_h(&h);
        let target: Vec<f64> = rand_image(&mut rng, 8);
        // Noiseless channel: the AWGN variance is estimated from the live
        // symbol power, so it would shift under finite-difference probes.
        let worst = grad_check(&mut ps, |ps, g| {
            let x_img = g.constant(&[1, 3, 8, 8], image.clone());
            let x_h = g.constant(&[1, 8], hk.clone());
            let mut bn = Vec::new();
            let sym = jscc_encode(g, ps, &dims, x_img, x_h, true, &mut bn)?;
            let mut crng = ChaCha12Rng::seed_from_u64(99);
            let ch = apply_channel(g, sym, std::slice::from_ref(&h), 2, 2, None, &mut crng)?;
            let x_h2 = g.constant(&[1, 8], hk.clone());
            let recon = jscc_decode(g, ps, &dims, ch.y, x_h2)?;
            let tgt = g.constant(&[1, 3, 8, 8], target.clone());
            Ok(crate::tensorkit::mse_loss(g, recon, tgt))
        })
        .unwrap();
        assert!(worst <= 1e-3, "worst rel err {worst}");
    }

    #[test]
    fn channel_snr_matches_request() {
        // Empirical SNR over many noise draws within 0.2 dB of the request.
        let (k, m, blocks) = (4, 4, 8);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let h = rand_h(&mut rng, k, m);
        let x: Vec<f64> = (0..blocks * 2 * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for req_db in [0.0, 10.0] {
            let mut sig = 0.0;
            let mut noi = 0.0;
            for _ in 0..400 {
                let mut g = Graph::new();
                let xs = g.constant(&[1, blocks, 2 * m], x.clone());
                let clean = {
                    let mut g2 = Graph::new();
                    let xs2 = g2.constant(&[1, blocks, 2 * m], x.clone());
                    let out = apply_channel(&mut g2, xs2, std::slice::from_ref(&h), k, m, None, &mut rng)
                        .unwrap();
                    g2.value(out.y).to_vec()
                };
                let out =
                    apply_channel(&mut g, xs, std::slice::from_ref(&h), k, m, Some(req_db), &mut rng)
                        .unwrap();
                let yv = g.value(out.y);
                for (a, c) in yv.iter().zip(&clean) {
                    sig += c * c;
                    noi += (a - c) * (a - c);
                }
            }
            // SNR defn normalizes signal power per block by K·σ_c².
            let measured_db = 10.0 * (sig / noi).log10();
            assert!(
                (measured_db - req_db).abs() < 0.2,
                "requested {req_db} dB, measured {measured_db} dB"
            );
        }
    }

    #[test]
    fn zero_channel_with_finite_snr_errors() {
        let dims = tiny_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(&[1, dims.blocks, 2 * dims.m], vec![0.5; dims.blocks * 2 * dims.m]);
        let zero_h = vec![Complex64::new(0.0, 0.0); dims.k * dims.m];
        let err = apply_channel(
            &mut g,
            x,
            std::slice::from_ref(&zero_h),
            dims.k,
            dims.m,
            Some(10.0),
            &mut rng,
        );
        assert!(err.is_err());
        // Noiseless zero channel is fine: y = 0.
        let mut g = Graph::new();
        let x = g.constant(&[1, dims.blocks, 2 * dims.m], vec![0.5; dims.blocks * 2 * dims.m]);
        let out = apply_channel(
            &mut g,
            x,
            std::slice::from_ref(&zero_h),
            dims.k,
            dims.m,
            None,
            &mut rng,
        )
        .unwrap();
        assert!(g.value(out.y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_matches_direct_complex_oracle() {
        let (k, m) = (3, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let h = rand_h(&mut rng, k, m);
        let x: Vec<f64> = (0..2 * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let xs = g.constant(&[1, 1, 2 * m], x.clone());
        let out = apply_channel(&mut g, xs, std::slice::from_ref(&h), k, m, None, &mut rng).unwrap();
        let yv = g.value(out.y);
        for r in 0..k {
            let mut acc = Complex64::new(0.0, 0.0);
            for c in 0..m {
                acc += h[r * m + c] * Complex64::new(x[c], x[m + c]);
            }
            assert!((yv[r] - acc.re).abs() < 1e-12);
            assert!((yv[k + r] - acc.im).abs() < 1e-12);
        }
    }

    #[test]
    fn overfit_single_image_noiseless() {
        let dims = tiny_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let samples = vec![JsccSample {
            image: rand_image(&mut rng, 8),
            h_true: rand_h(&mut rng, 2, 2),
            h_ckb: None,
        }];
        let cfg = JsccTrainConfig {
            mode: CsiMode::TrueCsi,
            dims,
            epochs: 600,
            batch_size: 1,
            lr: 1e-3,
            seed: 42,
            snr_schedule: vec![],
        };
        let (model, history) = train_jscc(&samples, &cfg).unwrap();
        assert!(
            history.last().unwrap() < &0.01,
            "final loss {}",
            history.last().unwrap()
        );
        let recon = jscc_transmit(&model, &samples[0], None, 1).unwrap();
        let s = metrics::ssim(&to_hwc(&recon, 8), &to_hwc(&samples[0].image, 8), 8, 8, 3, 1.0);
        // 8x8 image: single SSIM window.
        assert!(s.unwrap() > 0.7);
    }

    fn to_hwc(chw: &[f64], img: usize) -> Vec<f64> {
        let mut out = vec![0.0; chw.len()];
        for c in 0..3 {
            for p in 0..img * img {
                out[p * 3 + c] = chw[c * img * img + p];
            }
        }
        out
    }

    #[test]
    fn training_is_deterministic() {
        let dims = tiny_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let samples: Vec<JsccSample> = (0..3)
            .map(|_| JsccSample {
                image: rand_image(&mut rng, 8),
                h_true: rand_h(&mut rng, 2, 2),
                h_ckb: None,
            })
            .collect();
        let cfg = JsccTrainConfig {
            mode: CsiMode::NoKnowledge,
            dims,
            epochs: 3,
            batch_size: 2,
            snr_schedule: vec![5.0, 10.0],
            ..Default::default()
        };
        let (m1, h1) = train_jscc(&samples, &cfg).unwrap();
        let (m2, h2) = train_jscc(&samples, &cfg).unwrap();
        assert_eq!(m1.ps, m2.ps);
        assert_eq!(h1, h2);
    }
}
